//! Experiment specs: INI files with `[experiment]`, `[model]`, `[attack]`,
//! `[defense]` and `[data]` sections.
//!
//! ```ini
//! [experiment]
//! trial_count = 4
//! seed = 0
//! output_dir = runs/opt
//!
//! [model]
//! variant = b
//! image = 16x16x1
//! patch = 4x4
//! channel_dim = 32
//! heads = 4
//! depth = 2
//! classes = 10
//!
//! [attack]
//! variant = april-opt
//! max_iters = 1000
//!
//! [data]
//! source = synthetic
//! kind = blobs
//! ```
//!
//! Omitted keys take the engine defaults. Trial `i` uses seed `seed + i` for
//! the model initialization, the synthetic image, the dummy and the noise.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use vitleak_core::attacks::{AttackConfig, AttackVariant};
use vitleak_core::defenses::{DefenseConfig, DefenseKind};
use vitleak_core::model::{ArchVariant, ModelConfig};
use vitleak_core::Image;

use crate::error::{HarnessError, Result};
use crate::idx::load_dataset;
use crate::pnm::read_pnm;
use crate::synthetic::{synthetic_image, SyntheticKind};

/// Where trial images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Trial `i` takes image `i` (cycling) and its label when a label file
    /// is given, otherwise `seed mod classes`.
    Idx { images: PathBuf, labels: Option<PathBuf> },
    /// The same image in every trial.
    Image { path: PathBuf, label: usize },
    /// Generated per trial from the trial seed; label `seed mod classes`.
    Synthetic { kind: SyntheticKind },
}

#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub model: ModelConfig,
    pub attack: AttackConfig,
    pub defense: DefenseConfig,
    pub data: DataSource,
    pub trial_count: usize,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    /// Write frames at every logged iteration.
    pub save_frames: bool,
    /// Normalized text of the spec, echoed into reports.
    pub echo: String,
}

/// One trial's private input.
#[derive(Clone, Debug)]
pub struct TrialInput {
    pub seed: u64,
    pub image: Image,
    pub label: usize,
}

struct Section<'a> {
    name: &'static str,
    keys: BTreeMap<&'a str, &'a str>,
    path: &'a Path,
}

impl<'a> Section<'a> {
    fn new(ini: &'a Ini, name: &'static str, allowed: &[&str], path: &'a Path) -> Result<Self> {
        let mut keys = BTreeMap::new();
        if let Some(props) = ini.section(Some(name)) {
            for (k, v) in props.iter() {
                if !allowed.contains(&k) {
                    return Err(HarnessError::spec(path, format!("unknown key `{k}` in [{name}]")));
                }
                keys.insert(k, v);
            }
        }
        Ok(Self { name, keys, path })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.keys
            .get(key)
            .map(|v| {
                v.trim()
                    .parse::<T>()
                    .map_err(|e| HarnessError::spec(self.path, format!("[{}] {key} = {v}: {e}", self.name)))
            })
            .transpose()
    }

    fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)?
            .ok_or_else(|| HarnessError::spec(self.path, format!("[{}] needs `{key}`", self.name)))
    }

    fn dims<const N: usize>(&self, key: &str) -> Result<Option<[usize; N]>> {
        let Some(v) = self.keys.get(key) else { return Ok(None) };
        let parts: Vec<usize> = v
            .split('x')
            .map(|p| p.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| HarnessError::spec(self.path, format!("[{}] {key} = {v}: expected AxB", self.name)))?;
        parts
            .try_into()
            .map(Some)
            .map_err(|_| HarnessError::spec(self.path, format!("[{}] {key} = {v}: expected {N} sizes", self.name)))
    }
}

fn split_list(s: &str) -> BTreeSet<String> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(String::from).collect()
}

impl ExperimentSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, path, base)
    }

    /// `origin` names the spec in errors; relative data paths resolve
    /// against `base`.
    pub fn parse(text: &str, origin: &Path, base: &Path) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| HarnessError::spec(origin, e.to_string()))?;
        for (name, _) in ini.iter() {
            match name {
                None | Some("experiment" | "model" | "attack" | "defense" | "data") => {}
                Some(other) => return Err(HarnessError::spec(origin, format!("unknown section [{other}]"))),
            }
        }
        let exp = Section::new(&ini, "experiment", &["trial_count", "seed", "output_dir"], origin)?;
        let m = Section::new(
            &ini,
            "model",
            &[
                "variant", "image", "patch", "channel_dim", "heads", "depth", "classes", "pos_mode", "cls_token",
                "mlp_hidden_dim", "nonlinearity", "layernorm_eps", "init_std",
            ],
            origin,
        )?;
        let a = Section::new(
            &ini,
            "attack",
            &[
                "variant", "alpha", "learning_rate", "max_iters", "init", "label_mode", "mask", "log_every",
                "optimizer", "lr_decay", "save_frames",
            ],
            origin,
        )?;
        let d = Section::new(&ini, "defense", &["kind", "noise_scale", "norm_mode"], origin)?;
        let data = Section::new(&ini, "data", &["source", "kind", "path", "labels", "label"], origin)?;

        let variant: ArchVariant = m.require("variant")?;
        let [ih, iw, ic] = m.dims::<3>("image")?.unwrap_or([16, 16, 1]);
        let [ph, pw] = m.dims::<2>("patch")?.unwrap_or([4, 4]);
        let mut model = ModelConfig::new(
            variant,
            (ih, iw, ic),
            (ph, pw),
            m.get("channel_dim")?.unwrap_or(32),
            m.get("heads")?.unwrap_or(4),
            m.get("depth")?.unwrap_or(2),
            m.get("classes")?.unwrap_or(10),
        );
        if let Some(v) = m.get("pos_mode")? {
            model.pos_mode = v;
        }
        if let Some(v) = m.get("cls_token")? {
            model.cls_token = v;
        }
        if let Some(v) = m.get("mlp_hidden_dim")? {
            model.mlp_hidden_dim = v;
        }
        if let Some(v) = m.get("nonlinearity")? {
            model.nonlinearity = v;
        }
        if let Some(v) = m.get("layernorm_eps")? {
            model.layernorm_eps = v;
        }
        if let Some(v) = m.get("init_std")? {
            model.init_std = v;
        }

        let av: AttackVariant = a.get("variant")?.unwrap_or(AttackVariant::AprilOpt);
        let mut attack = AttackConfig::new(av);
        if let Some(v) = a.get("alpha")? {
            attack.alpha = v;
        }
        if let Some(v) = a.get("learning_rate")? {
            attack.learning_rate = v;
        }
        if let Some(v) = a.get("max_iters")? {
            attack.max_iters = v;
        }
        if let Some(v) = a.get("init")? {
            attack.init = v;
        }
        if let Some(v) = a.get("label_mode")? {
            attack.label_mode = v;
        }
        if let Some(v) = a.get::<String>("mask")? {
            attack.param_mask = split_list(&v);
        }
        if let Some(v) = a.get("log_every")? {
            attack.log_every = v;
        }
        if let Some(v) = a.get("optimizer")? {
            attack.optimizer = v;
        }
        if let Some(v) = a.get("lr_decay")? {
            attack.lr_decay = v;
        }
        let save_frames = a.get("save_frames")?.unwrap_or(false);

        let mut defense = DefenseConfig::new(d.get("kind")?.unwrap_or(DefenseKind::None));
        if let Some(v) = d.get("noise_scale")? {
            defense.noise_scale = v;
        }
        if let Some(v) = d.get("norm_mode")? {
            defense.norm_mode = v;
        }

        let source: String = data.get("source")?.unwrap_or_else(|| "synthetic".into());
        let resolve = |p: String| base.join(p);
        let data_source = match source.as_str() {
            "synthetic" => DataSource::Synthetic {
                kind: data.get("kind")?.unwrap_or(SyntheticKind::Blobs),
            },
            "idx" => DataSource::Idx {
                images: resolve(data.require("path")?),
                labels: data.get::<String>("labels")?.map(resolve),
            },
            "image" => DataSource::Image {
                path: resolve(data.require("path")?),
                label: data.get("label")?.unwrap_or(0),
            },
            other => return Err(HarnessError::spec(origin, format!("unknown data source `{other}`"))),
        };

        let spec = Self {
            model: defense.model_config(&model),
            attack,
            defense,
            data: data_source,
            trial_count: exp.get("trial_count")?.unwrap_or(1),
            seed: exp.get("seed")?.unwrap_or(0),
            output_dir: exp.get::<String>("output_dir")?.map(PathBuf::from),
            save_frames,
            echo: normalized(&ini),
        };
        spec.validate(origin)?;
        Ok(spec)
    }

    fn validate(&self, origin: &Path) -> Result<()> {
        let wrap = |e: vitleak_core::Error| HarnessError::spec(origin, e.to_string());
        self.model.validate().map_err(wrap)?;
        self.attack.validate().map_err(wrap)?;
        self.defense.validate().map_err(wrap)?;
        if self.trial_count == 0 {
            return Err(HarnessError::spec(origin, "trial_count must be at least 1"));
        }
        if self.model.image_height != self.model.image_width {
            if let DataSource::Synthetic { .. } = self.data {
                return Err(HarnessError::spec(origin, "synthetic images are square"));
            }
        }
        if let DataSource::Synthetic { .. } = self.data {
            if self.model.image_channels != 1 {
                return Err(HarnessError::spec(origin, "synthetic images are grayscale"));
            }
        }
        Ok(())
    }

    /// Reads files named by the data section and builds every trial's input.
    pub fn trials(&self) -> Result<Vec<TrialInput>> {
        let classes = self.model.class_count;
        let seeds = (0..self.trial_count as u64).map(|i| self.seed + i);
        let check = |img: &Image| -> Result<()> {
            let want = (self.model.image_height, self.model.image_width, self.model.image_channels);
            if img.dims() != want {
                return Err(HarnessError::ImageFormat(format!(
                    "image is {:?}, model expects {want:?}",
                    img.dims()
                )));
            }
            Ok(())
        };
        let out: Vec<TrialInput> = match &self.data {
            DataSource::Synthetic { kind } => seeds
                .map(|seed| {
                    Ok(TrialInput {
                        seed,
                        image: synthetic_image(seed, self.model.image_height, *kind)?,
                        label: (seed % classes as u64) as usize,
                    })
                })
                .collect::<Result<_>>()?,
            DataSource::Image { path, label } => {
                let image = read_pnm(path)?;
                seeds
                    .map(|seed| TrialInput {
                        seed,
                        image: image.clone(),
                        label: *label,
                    })
                    .collect()
            }
            DataSource::Idx { images, labels } => {
                let ds = load_dataset(images, labels.as_deref())?;
                if ds.images.is_empty() {
                    return Err(HarnessError::ImageFormat("IDX file holds no images".into()));
                }
                seeds
                    .enumerate()
                    .map(|(i, seed)| {
                        let k = i % ds.images.len();
                        TrialInput {
                            seed,
                            image: ds.images[k].clone(),
                            label: ds.labels.as_ref().map_or((seed % classes as u64) as usize, |l| l[k]),
                        }
                    })
                    .collect()
            }
        };
        for t in &out {
            check(&t.image)?;
            if t.label >= classes {
                return Err(vitleak_core::Error::LabelOutOfRange { label: t.label, classes }.into());
            }
        }
        Ok(out)
    }
}

/// Sections and keys in canonical order, so equivalent specs echo alike.
fn normalized(ini: &Ini) -> String {
    let mut sections: Vec<(String, Vec<(String, String)>)> = ini
        .iter()
        .filter_map(|(name, props)| {
            let mut kv: Vec<_> = props.iter().map(|(k, v)| (k.to_string(), v.trim().to_string())).collect();
            kv.sort();
            name.map(|n| (n.to_string(), kv))
        })
        .collect();
    sections.sort();
    let mut s = String::new();
    for (name, kv) in sections {
        s.push_str(&format!("[{name}]\n"));
        for (k, v) in kv {
            s.push_str(&format!("{k} = {v}\n"));
        }
    }
    s
}

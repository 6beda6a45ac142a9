use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ArchVariant, ModelConfig, PosMode};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PATCH_EMBED: &str = "patch_embed";
pub const POS_EMBED: &str = "pos_embed";
pub const CLS_TOKEN: &str = "cls_token";
pub const HEAD: &str = "head";

pub fn block_param(block: usize, leaf: &str) -> String {
    format!("blocks.{block}.{leaf}")
}

/// Masking group a parameter belongs to: `pos-emb`, `patch-emb`, `cls`,
/// `head`, or `encoder-N` (1-based block index).
pub fn param_group(name: &str) -> String {
    match name {
        POS_EMBED => "pos-emb".into(),
        PATCH_EMBED => "patch-emb".into(),
        CLS_TOKEN => "cls".into(),
        HEAD => "head".into(),
        other => match other
            .strip_prefix("blocks.")
            .and_then(|rest| rest.split('.').next())
            .and_then(|i| i.parse::<usize>().ok())
        {
            Some(i) => format!("encoder-{}", i + 1),
            None => other.to_string(),
        },
    }
}

/// `c x n` fixed position table: even rows sin, odd rows cos, frequency
/// `10000^(-2i/c)` for row pair `i`.
pub fn sinusoidal_pos_table<S: Scalar>(c: usize, n: usize) -> Result<Tensor<S>> {
    if c == 0 || n == 0 || c % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "sinusoidal table needs even positive channels, got c={c}, n={n}"
        )));
    }
    Ok(Tensor::from_fn(c, n, |row, j| {
        let i = row / 2;
        let angle = j as f64 / 10000f64.powf(2.0 * i as f64 / c as f64);
        S::lit(if row % 2 == 0 { angle.sin() } else { angle.cos() })
    }))
}

/// Every learnable tensor of a model, keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    tensors: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ModelParams<S> {
    /// Names and shapes of all learnable parameters, in initialization order.
    pub fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let c = cfg.channel_dim;
        let h = cfg.mlp_hidden_dim;
        let mut out = vec![(PATCH_EMBED.to_string(), vec![c, cfg.patch_dim()])];
        if cfg.pos_mode == PosMode::Learnable {
            out.push((POS_EMBED.to_string(), vec![c, cfg.token_count()]));
        }
        if cfg.cls_token {
            out.push((CLS_TOKEN.to_string(), vec![c, 1]));
        }
        for b in 0..cfg.depth {
            for leaf in ["attn.q", "attn.k", "attn.v", "attn.proj"] {
                out.push((block_param(b, leaf), vec![c, c]));
            }
            if cfg.variant == ArchVariant::B {
                for leaf in ["norm1.gamma", "norm1.beta", "norm2.gamma", "norm2.beta"] {
                    out.push((block_param(b, leaf), vec![c, 1]));
                }
            }
            out.push((block_param(b, "mlp.fc1"), vec![h, c]));
            out.push((block_param(b, "mlp.fc2"), vec![c, h]));
        }
        out.push((HEAD.to_string(), vec![cfg.class_count, c + 1]));
        out
    }

    /// Gaussian initialization with `cfg.init_std`; layernorm gains start at 1
    /// and shifts at 0.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, cfg.init_std)
            .map_err(|e| Error::InvalidConfig(format!("init_std: {e}")))?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in Self::layout(cfg) {
            let n: usize = shape.iter().product();
            let data: Vec<S> = if name.ends_with(".gamma") {
                vec![S::one(); n]
            } else if name.ends_with(".beta") {
                vec![S::zero(); n]
            } else {
                (0..n).map(|_| S::lit(normal.sample(&mut rng))).collect()
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { tensors })
    }

    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            tensors: Self::layout(cfg)
                .into_iter()
                .map(|(n, s)| (n, Tensor::zeros(&s)))
                .collect(),
        })
    }

    /// Wraps existing tensors after checking them against the layout.
    pub fn from_tensors(cfg: &ModelConfig, tensors: BTreeMap<String, Tensor<S>>) -> Result<Self> {
        let layout = Self::layout(cfg);
        if layout.len() != tensors.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameters, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for (name, shape) in &layout {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::MissingEntry(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "params",
                    format!("{name}: expected {shape:?}, got {:?}", t.shape()),
                ));
            }
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingEntry(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingEntry(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<S>> {
        self.tensors
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_first_column_alternates() {
        let t = sinusoidal_pos_table::<f64>(6, 3).unwrap();
        let col: Vec<f64> = (0..6).map(|i| t.at(i, 0)).collect();
        assert_eq!(col, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn sinusoid_small_table_matches_formula() {
        let t = sinusoidal_pos_table::<f64>(4, 2).unwrap();
        // rows: sin(j), cos(j), sin(j/100), cos(j/100)
        let expected = [[0.0, 1f64.sin()], [1.0, 1f64.cos()], [0.0, 0.01f64.sin()], [1.0, 0.01f64.cos()]];
        for (i, row) in expected.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert!((t.at(i, j) - v).abs() < 1e-15);
            }
        }
        assert!(sinusoidal_pos_table::<f64>(5, 2).is_err());
    }

    #[test]
    fn groups() {
        assert_eq!(param_group(POS_EMBED), "pos-emb");
        assert_eq!(param_group("blocks.0.attn.k"), "encoder-1");
        assert_eq!(param_group("blocks.3.mlp.fc2"), "encoder-4");
        assert_eq!(param_group(HEAD), "head");
    }

    #[test]
    fn init_is_seeded_and_shaped() {
        let cfg = ModelConfig::new(ArchVariant::B, (8, 8, 1), (2, 2), 8, 2, 2, 4);
        let a = ModelParams::<f64>::init(&cfg, 1).unwrap();
        let b = ModelParams::<f64>::init(&cfg, 1).unwrap();
        let c = ModelParams::<f64>::init(&cfg, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.get(POS_EMBED).unwrap().shape(), &[8, 16]);
        assert_eq!(a.get(PATCH_EMBED).unwrap().shape(), &[8, 5]);
        assert!(a.get("blocks.1.norm2.gamma").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn fixed_positions_are_not_parameters() {
        let mut cfg = ModelConfig::new(ArchVariant::A, (4, 4, 1), (2, 2), 4, 1, 1, 3);
        cfg.pos_mode = PosMode::FixedSinusoidal;
        let p = ModelParams::<f64>::init(&cfg, 0).unwrap();
        assert!(p.get(POS_EMBED).is_err());
    }
}

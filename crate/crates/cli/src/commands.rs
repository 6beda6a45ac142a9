//! Subcommand drivers. Each returns its report after writing every output
//! file, so tests can inspect both.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use vitleak_core::attacks::{matching_loss, run_attack, AttackConfig, AttackTarget, AttackVariant};
use vitleak_core::autodiff::gradcheck::CheckOutcome;
use vitleak_core::defenses::DefenseKind;
use vitleak_core::model::params::param_group;
use vitleak_core::{GradientSnapshot, Image, MetricReport, ReconstructionResult, VisionTransformer};

use crate::error::{HarnessError, Result};
use crate::idx::{load_idx, write_idx, IdxData};
use crate::pnm::{read_pnm, write_pnm};
use crate::report::{write_text, RunReport, TrialRow};
use crate::spec::{ExperimentSpec, TrialInput};

/// Overrides the default output directory.
pub const OUT_DIR_ENV: &str = "VITLEAK_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "vitleak-out";

/// Explicit flag, then the spec, then the environment, then the default.
pub fn resolve_out_dir(flag: Option<&Path>, spec: &ExperimentSpec) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| spec.output_dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

/// Everything one attack trial produced.
pub struct TrialOutcome {
    pub row: TrialRow,
    pub result: ReconstructionResult,
    pub truth: Image,
}

/// Dummy-versus-observed L2 gradient distance of the returned reconstruction.
fn final_gradient_loss(
    model: &VisionTransformer,
    result: &ReconstructionResult,
    observed: &GradientSnapshot,
    mask: &BTreeSet<String>,
) -> Result<f64> {
    let dummy = model.compute_gradients(&result.images, &result.labels)?;
    Ok(matching_loss(AttackVariant::Dlg, &dummy, observed, 0.0, mask)?.item())
}

/// Builds the trial's model, applies the defense to its gradients and runs
/// the attack.
pub fn run_trial(spec: &ExperimentSpec, attack: &AttackConfig, input: &TrialInput) -> Result<TrialOutcome> {
    let model = VisionTransformer::init(spec.model.clone(), input.seed)?;
    let truth = [input.image.clone()];
    let labels = [input.label];
    let clean = model.compute_gradients(&truth, &labels)?;
    let mut defense = spec.defense.clone();
    defense.seed = input.seed;
    let observed = defense.apply(&clean)?;
    let mut cfg = attack.clone();
    cfg.seed = input.seed;
    let mut target = AttackTarget::new(&observed);
    target.labels = Some(&labels);
    target.truth = Some(&truth);
    let result = run_attack(&model, target, &cfg)?;
    let metrics = MetricReport::compare(&result.images[0].clamped(), &input.image)?;
    let gradient_loss = match cfg.variant {
        AttackVariant::AprilClosed => None,
        _ => Some(final_gradient_loss(&model, &result, &observed, &cfg.param_mask)?),
    };
    let row = TrialRow {
        key: String::new(),
        seed: input.seed,
        label: Some(input.label),
        recovered_label: result.labels.first().copied(),
        status: result.status.to_string(),
        iterations: result.iterations,
        mse: metrics.mse,
        ssim: metrics.ssim,
        psnr: metrics.psnr,
        gradient_loss,
        rank: result.rank,
        condition: result.condition,
    };
    Ok(TrialOutcome {
        row,
        result,
        truth: input.image.clone(),
    })
}

fn curve_csv(outcome: &TrialOutcome) -> String {
    let mut s = String::from("iteration,objective,gradient_loss,pos_cosine,image_mse\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &outcome.result.iter_log {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.iteration,
            r.objective,
            r.gradient_loss,
            opt(r.pos_cosine),
            opt(r.image_mse)
        );
    }
    s
}

fn write_trial_files(dir: &Path, outcome: &TrialOutcome, frames: bool) -> Result<()> {
    create_dir(dir)?;
    write_pnm(dir.join("truth.pgm"), &outcome.truth)?;
    for (k, img) in outcome.result.images.iter().enumerate() {
        write_pnm(dir.join(format!("recon-{k}.pgm")), img)?;
    }
    if !outcome.result.iter_log.is_empty() {
        write_text(&dir.join("curve.csv"), &curve_csv(outcome))?;
    }
    if frames && !outcome.result.frames.is_empty() {
        let fdir = dir.join("frames");
        create_dir(&fdir)?;
        for (it, imgs) in &outcome.result.frames {
            for (k, img) in imgs.iter().enumerate() {
                write_pnm(fdir.join(format!("iter-{it:05}-{k}.pgm")), img)?;
            }
        }
    }
    Ok(())
}

fn run_trials(spec: &ExperimentSpec, attack: &AttackConfig, out: &Path) -> Result<Vec<TrialOutcome>> {
    spec.trials()?
        .iter()
        .enumerate()
        .map(|(i, input)| {
            let mut o = run_trial(spec, attack, input)?;
            o.row.key = i.to_string();
            write_trial_files(&out.join(format!("trial-{i:03}")), &o, spec.save_frames)?;
            Ok(o)
        })
        .collect()
}

/// Runs the configured attack once per trial.
pub fn attack(spec: &ExperimentSpec, out: &Path) -> Result<RunReport> {
    let start = Instant::now();
    create_dir(out)?;
    let outcomes = run_trials(spec, &spec.attack, out)?;
    let rows = outcomes.into_iter().map(|o| o.row).collect();
    let report = RunReport::new("attack", &spec.echo, rows, start.elapsed().as_secs_f64())?;
    report.write(out)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKnob {
    Noise,
    HiddenDim,
}

impl std::str::FromStr for SweepKnob {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(Self::Noise),
            "hidden-dim" => Ok(Self::HiddenDim),
            other => Err(HarnessError::Usage(format!("unknown knob `{other}`"))),
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Collapses the trials of one sweep value into a row of means.
fn merge_rows(key: String, rows: Vec<TrialRow>) -> TrialRow {
    if rows.len() == 1 {
        let mut r = rows.into_iter().next().expect("one row");
        r.key = key;
        return r;
    }
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&TrialRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let mean_opt = |f: &dyn Fn(&TrialRow) -> Option<f64>| {
        let v: Vec<f64> = rows.iter().filter_map(f).collect();
        (v.len() == rows.len()).then(|| v.iter().sum::<f64>() / n)
    };
    let same = |f: &dyn Fn(&TrialRow) -> String| {
        let first = f(&rows[0]);
        if rows.iter().all(|r| f(r) == first) {
            first
        } else {
            "mixed".into()
        }
    };
    TrialRow {
        key,
        seed: rows[0].seed,
        label: None,
        recovered_label: None,
        status: same(&|r| r.status.clone()),
        iterations: rows.iter().map(|r| r.iterations).max().unwrap_or(0),
        mse: mean(&|r| r.mse),
        ssim: mean(&|r| r.ssim),
        psnr: mean_opt(&|r| r.psnr),
        gradient_loss: mean_opt(&|r| r.gradient_loss),
        rank: rows.iter().all(|r| r.rank == rows[0].rank).then_some(rows[0].rank).flatten(),
        condition: None,
    }
}

/// One report row per swept value; with several trials the row holds
/// per-value means.
pub fn defense_sweep(spec: &ExperimentSpec, knob: SweepKnob, values: &[f64], out: &Path) -> Result<RunReport> {
    if values.is_empty() {
        return Err(HarnessError::Usage("--values needs at least one entry".into()));
    }
    let start = Instant::now();
    create_dir(out)?;
    let mut rows = Vec::with_capacity(values.len());
    for (vi, &v) in values.iter().enumerate() {
        let mut s = spec.clone();
        match knob {
            SweepKnob::Noise => {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(HarnessError::Usage(format!("noise scale {v} must be finite and >= 0")));
                }
                if !matches!(s.defense.kind, DefenseKind::GaussianNoise | DefenseKind::LaplacianNoise) {
                    s.defense.kind = DefenseKind::GaussianNoise;
                }
                s.defense.noise_scale = v;
            }
            SweepKnob::HiddenDim => {
                if v.fract() != 0.0 || v < 1.0 {
                    return Err(HarnessError::Usage(format!("hidden dim {v} must be a positive integer")));
                }
                let c = v as usize;
                let base = &spec.model;
                s.model.channel_dim = c;
                s.model.head_count = gcd(base.head_count, c);
                s.model.mlp_hidden_dim = (base.mlp_hidden_dim * c / base.channel_dim).max(1);
                s.model.validate()?;
            }
        }
        let dir = out.join(format!("value-{vi:03}"));
        let trial_rows = run_trials(&s, &s.attack, &dir)?.into_iter().map(|o| o.row).collect();
        rows.push(merge_rows(v.to_string(), trial_rows));
    }
    let report = RunReport::new("defense-sweep", &spec.echo, rows, start.elapsed().as_secs_f64())?;
    report.write(out)?;
    Ok(report)
}

/// The attack with the position-embedding gradient left out of the
/// matching loss. Writes `twin-data.csv` with the logged gradient-loss and
/// image-MSE curves and a `final` row for the returned reconstruction.
pub fn twin_data(spec: &ExperimentSpec, out: &Path) -> Result<RunReport> {
    if spec.attack.variant == AttackVariant::AprilClosed {
        return Err(HarnessError::Usage("twin-data needs an optimization attack".into()));
    }
    let start = Instant::now();
    create_dir(out)?;
    let mut attack = spec.attack.clone();
    attack.param_mask.insert("pos-emb".into());
    let outcomes = run_trials(spec, &attack, out)?;
    let mut csv = String::from("trial,iteration,gradient_loss,image_mse\n");
    for o in &outcomes {
        for r in &o.result.iter_log {
            let mse = r.image_mse.map(|m| m.to_string()).unwrap_or_default();
            let _ = writeln!(csv, "{},{},{},{}", o.row.key, r.iteration, r.gradient_loss, mse);
        }
        let _ = writeln!(
            csv,
            "{},final,{},{}",
            o.row.key,
            o.row.gradient_loss.unwrap_or(f64::NAN),
            o.row.mse
        );
    }
    write_text(&out.join("twin-data.csv"), &csv)?;
    let rows = outcomes.into_iter().map(|o| o.row).collect();
    let report = RunReport::new("twin-data", &spec.echo, rows, start.elapsed().as_secs_f64())?;
    report.write(out)?;
    Ok(report)
}

/// Checks that every group names something in the model.
pub fn validate_groups(spec: &ExperimentSpec, groups: &BTreeSet<String>) -> Result<()> {
    let known: BTreeSet<String> = vitleak_core::ModelParams::layout(&spec.model)
        .into_iter()
        .map(|(name, _)| param_group(&name))
        .collect();
    for g in groups {
        if !known.contains(g) {
            let list: Vec<&str> = known.iter().map(String::as_str).collect();
            return Err(HarnessError::Usage(format!("unknown parameter group `{g}`; have {}", list.join(", "))));
        }
    }
    Ok(())
}

/// The configured attack with the given gradient groups excluded from
/// matching, replacing any mask in the spec.
pub fn ablate_params(spec: &ExperimentSpec, groups: &BTreeSet<String>, out: &Path) -> Result<RunReport> {
    if groups.is_empty() {
        return Err(HarnessError::Usage("--mask needs at least one group".into()));
    }
    validate_groups(spec, groups)?;
    let start = Instant::now();
    create_dir(out)?;
    let mut attack = spec.attack.clone();
    attack.param_mask = groups.clone();
    let rows = run_trials(spec, &attack, out)?.into_iter().map(|o| o.row).collect();
    let report = RunReport::new("ablate-params", &spec.echo, rows, start.elapsed().as_secs_f64())?;
    report.write(out)?;
    Ok(report)
}

/// Runs the finite-difference suite and renders one line per check.
pub fn gradcheck(seed: u64) -> Result<(Vec<CheckOutcome>, String)> {
    let outcomes = vitleak_core::verify::full_suite(seed)?;
    let mut text = String::new();
    for o in &outcomes {
        let _ = writeln!(
            text,
            "{:<6} {:<24} order {} trials {:>3} max rel err {:.3e} (tol {:.0e})",
            if o.passed() { "ok" } else { "FAIL" },
            o.name,
            o.order,
            o.trials,
            o.max_rel_err,
            o.tolerance
        );
    }
    let failed = outcomes.iter().filter(|o| !o.passed()).count();
    if failed > 0 {
        eprint!("{text}");
        return Err(HarnessError::GradcheckFailed {
            failed,
            total: outcomes.len(),
        });
    }
    Ok((outcomes, text))
}

fn extension(p: &Path) -> String {
    p.extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default()
}

fn is_pnm(p: &Path) -> bool {
    matches!(extension(p).as_str(), "pgm" | "ppm" | "pnm")
}

/// IDX to PGM/PPM and back. An IDX image file with several images goes to
/// a directory of numbered PGMs unless the target names a single file.
/// Returns the paths written.
pub fn convert(input: &Path, output: &Path) -> Result<Vec<PathBuf>> {
    if is_pnm(input) {
        if is_pnm(output) {
            let img = read_pnm(input)?;
            write_pnm(output, &img)?;
            return Ok(vec![output.to_path_buf()]);
        }
        let img = read_pnm(input)?;
        write_idx(output, &IdxData::Images(vec![img]))?;
        return Ok(vec![output.to_path_buf()]);
    }
    let images = match load_idx(input)? {
        IdxData::Images(v) => v,
        IdxData::Labels(_) => {
            return Err(HarnessError::ImageFormat(format!(
                "{} holds labels, which have no image form",
                input.display()
            )))
        }
    };
    if is_pnm(output) {
        if images.len() != 1 {
            return Err(HarnessError::Usage(format!(
                "{} holds {} images; give a directory as --out",
                input.display(),
                images.len()
            )));
        }
        write_pnm(output, &images[0])?;
        return Ok(vec![output.to_path_buf()]);
    }
    create_dir(output)?;
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let p = output.join(format!("img-{i:05}.pgm"));
            write_pnm(&p, img)?;
            Ok(p)
        })
        .collect()
}

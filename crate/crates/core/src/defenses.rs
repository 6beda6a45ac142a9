//! Transformations a client can apply before sharing gradients, and sweeps
//! that measure how well they hold up against the closed-form attack.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attacks::{closed_form_attack, AttackStatus};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::MetricReport;
use crate::model::config::text_enum;
use crate::model::params::POS_EMBED;
use crate::model::{GradientSnapshot, ModelConfig, PosMode, VisionTransformer};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DefenseKind {
    None,
    GaussianNoise,
    LaplacianNoise,
    MaskPosGrad,
    FixedPosEmbedding,
}

text_enum!(DefenseKind, "defense", {
    "none" => DefenseKind::None,
    "gaussian-noise" => DefenseKind::GaussianNoise,
    "laplacian-noise" => DefenseKind::LaplacianNoise,
    "mask-pos-grad" => DefenseKind::MaskPosGrad,
    "fixed-pos-embedding" => DefenseKind::FixedPosEmbedding,
});

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    Gaussian,
    Laplacian,
}

/// Which gradient norm the noise variance is proportional to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// One norm over every shared tensor.
    Global,
    /// Each tensor's own norm.
    PerTensor,
}

text_enum!(NormMode, "norm mode", { "global" => NormMode::Global, "per-tensor" => NormMode::PerTensor });

#[derive(Clone, Debug, PartialEq)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    /// Noise variance as a multiple of the gradient norm.
    pub noise_scale: f64,
    pub seed: u64,
    pub norm_mode: NormMode,
}

impl DefenseConfig {
    pub fn new(kind: DefenseKind) -> Self {
        Self {
            kind,
            noise_scale: 0.0,
            seed: 0,
            norm_mode: NormMode::Global,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise scale must be a finite value >= 0, got {}",
                self.noise_scale
            )));
        }
        Ok(())
    }

    /// The model the client trains under this defense.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        if self.kind == DefenseKind::FixedPosEmbedding {
            cfg.pos_mode = PosMode::FixedSinusoidal;
        }
        cfg
    }

    /// The snapshot the server receives.
    pub fn apply<S: Scalar>(&self, snapshot: &GradientSnapshot<S>) -> Result<GradientSnapshot<S>> {
        self.validate()?;
        Ok(match self.kind {
            DefenseKind::GaussianNoise => {
                add_gradient_noise(snapshot, NoiseKind::Gaussian, self.noise_scale, self.seed, self.norm_mode)
            }
            DefenseKind::LaplacianNoise => {
                add_gradient_noise(snapshot, NoiseKind::Laplacian, self.noise_scale, self.seed, self.norm_mode)
            }
            DefenseKind::MaskPosGrad => mask_pos_gradient(snapshot),
            DefenseKind::None | DefenseKind::FixedPosEmbedding => snapshot.clone(),
        })
    }
}

/// Unit-variance draw.
fn unit_noise(kind: NoiseKind, rng: &mut ChaCha8Rng) -> f64 {
    match kind {
        NoiseKind::Gaussian => rng.sample(StandardNormal),
        NoiseKind::Laplacian => {
            // inverse CDF with b = 1/sqrt(2)
            let u: f64 = rng.random::<f64>() - 0.5;
            -u.signum() * (1.0 - 2.0 * u.abs()).ln() / std::f64::consts::SQRT_2
        }
    }
}

/// Adds i.i.d. noise of variance `noise_scale * norm` to every element.
///
/// The unit draws depend only on `seed` and the snapshot layout, so sweeping
/// `noise_scale` at a fixed seed rescales one noise pattern. A scale of zero
/// returns the snapshot unchanged.
pub fn add_gradient_noise<S: Scalar>(
    snapshot: &GradientSnapshot<S>,
    kind: NoiseKind,
    noise_scale: f64,
    seed: u64,
    norm_mode: NormMode,
) -> GradientSnapshot<S> {
    let mut out = snapshot.clone();
    if noise_scale == 0.0 {
        return out;
    }
    let global = snapshot.global_norm().to_f64_lossy();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in out.iter_mut() {
        let norm = match norm_mode {
            NormMode::Global => global,
            NormMode::PerTensor => t.frobenius_norm().to_f64_lossy(),
        };
        let sigma = (noise_scale * norm).sqrt();
        for v in t.data_mut() {
            *v += S::lit(sigma * unit_noise(kind, &mut rng));
        }
    }
    out
}

/// Drops the position-embedding gradient.
pub fn mask_pos_gradient<S: Scalar>(snapshot: &GradientSnapshot<S>) -> GradientSnapshot<S> {
    let mut out = snapshot.clone();
    out.remove(POS_EMBED);
    out
}

/// One row of a defense sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    /// The swept knob: noise scale or channel dimension.
    pub value: f64,
    pub metrics: MetricReport<f64>,
    pub status: AttackStatus,
    pub rank: usize,
    pub condition: f64,
}

fn sweep_row<S: Scalar>(
    value: f64,
    model: &VisionTransformer<S>,
    snapshot: &GradientSnapshot<S>,
    image: &Image<S>,
) -> Result<SweepRow> {
    let res = closed_form_attack(snapshot, model)?;
    let recovered: Image<f64> = convert(&res.images[0].clamped());
    let metrics = MetricReport::compare(&recovered, &convert(image))?;
    Ok(SweepRow {
        value,
        metrics,
        status: res.status,
        rank: res.rank.unwrap_or(0),
        condition: res.condition.map(|c| c.to_f64_lossy()).unwrap_or(f64::NAN),
    })
}

fn convert<S: Scalar>(img: &Image<S>) -> Image<f64> {
    let (h, w, c) = img.dims();
    Image::new(h, w, c, img.data().iter().map(|v| v.to_f64_lossy()).collect()).expect("same dimensions")
}

/// Closed-form attack against one model at each channel dimension, on a
/// fresh model seeded with `seed` every time.
pub fn hidden_dim_sweep<S: Scalar>(
    base: &ModelConfig,
    dims: &[usize],
    image: &Image<S>,
    label: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if dims.is_empty() {
        return Err(Error::InvalidConfig("hidden-dim sweep needs at least one value".into()));
    }
    dims.iter()
        .map(|&c| {
            let mut cfg = base.clone();
            cfg.channel_dim = c;
            cfg.head_count = gcd(base.head_count, c);
            cfg.mlp_hidden_dim = (base.mlp_hidden_dim * c / base.channel_dim).max(1);
            let model = VisionTransformer::init(cfg, seed)?;
            let snap = model.compute_gradients(std::slice::from_ref(image), &[label])?;
            sweep_row(c as f64, &model, &snap, image)
        })
        .collect()
}

/// Closed-form attack on one snapshot perturbed at each noise scale, with
/// the same noise seed throughout.
pub fn noise_sweep<S: Scalar>(
    model: &VisionTransformer<S>,
    image: &Image<S>,
    label: usize,
    scales: &[f64],
    kind: NoiseKind,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if scales.is_empty() {
        return Err(Error::InvalidConfig("noise sweep needs at least one value".into()));
    }
    let snap = model.compute_gradients(std::slice::from_ref(image), &[label])?;
    scales
        .iter()
        .map(|&s| {
            let cfg = DefenseConfig {
                kind: match kind {
                    NoiseKind::Gaussian => DefenseKind::GaussianNoise,
                    NoiseKind::Laplacian => DefenseKind::LaplacianNoise,
                },
                noise_scale: s,
                seed,
                norm_mode: NormMode::Global,
            };
            sweep_row(s, model, &cfg.apply(&snap)?, image)
        })
        .collect()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{optimization_attack, AttackConfig, AttackTarget, AttackVariant};
    use crate::model::ArchVariant;
    use crate::tensor::Tensor;
    use std::collections::BTreeMap;

    fn snapshot(n: usize) -> GradientSnapshot<f64> {
        let mut m = BTreeMap::new();
        m.insert("a".into(), Tensor::from_fn(n, 1000, |i, j| ((i * 1000 + j) as f64).sin()));
        m.insert(POS_EMBED.into(), Tensor::from_fn(2, 3, |i, j| (i + j) as f64 - 1.5));
        GradientSnapshot::new(m, 1, 0.5)
    }

    fn bits(s: &GradientSnapshot<f64>) -> Vec<u64> {
        s.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
    }

    #[test]
    fn zero_scale_is_identity() {
        let mut s = snapshot(2);
        s.iter_mut().next().unwrap().1.data_mut()[0] = -0.0;
        for kind in [NoiseKind::Gaussian, NoiseKind::Laplacian] {
            assert_eq!(bits(&add_gradient_noise(&s, kind, 0.0, 3, NormMode::Global)), bits(&s));
        }
    }

    #[test]
    fn noise_variance_matches_request() {
        let s = snapshot(1000);
        let norm = s.global_norm();
        for kind in [NoiseKind::Gaussian, NoiseKind::Laplacian] {
            let noisy = add_gradient_noise(&s, kind, 0.01, 5, NormMode::Global);
            let diffs: Vec<f64> = noisy
                .iter()
                .zip(s.iter())
                .flat_map(|((_, a), (_, b))| a.sub(b).unwrap().into_data())
                .collect();
            assert!(diffs.len() >= 1_000_000);
            let n = diffs.len() as f64;
            let mean = diffs.iter().sum::<f64>() / n;
            let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
            let target = 0.01 * norm;
            assert!((var / target - 1.0).abs() < 0.01, "{kind:?}: {var} vs {target}");
        }
    }

    #[test]
    fn noise_is_seeded_and_per_tensor_mode_differs() {
        let s = snapshot(3);
        let a = add_gradient_noise(&s, NoiseKind::Gaussian, 0.1, 9, NormMode::Global);
        let b = add_gradient_noise(&s, NoiseKind::Gaussian, 0.1, 9, NormMode::Global);
        assert_eq!(bits(&a), bits(&b));
        let c = add_gradient_noise(&s, NoiseKind::Gaussian, 0.1, 10, NormMode::Global);
        assert_ne!(bits(&a), bits(&c));
        let d = add_gradient_noise(&s, NoiseKind::Gaussian, 0.1, 9, NormMode::PerTensor);
        assert_ne!(bits(&a), bits(&d));
    }

    #[test]
    fn masking_is_idempotent_and_local() {
        let s = snapshot(2);
        let once = mask_pos_gradient(&s);
        assert!(once.pos_grad().is_none());
        assert_eq!(once.get("a").unwrap(), s.get("a").unwrap());
        assert_eq!(mask_pos_gradient(&once), once);
    }

    fn setup(c: usize) -> (ModelConfig, Image<f64>) {
        let cfg = ModelConfig::new(ArchVariant::A, (8, 8, 4), (2, 2), c, 4, 1, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = Image::new(8, 8, 4, (0..256).map(|_| rng.random::<f64>()).collect()).unwrap();
        (cfg, img)
    }

    #[test]
    fn masked_snapshot_defeats_position_attacks() {
        let (cfg, img) = setup(64);
        let model = VisionTransformer::<f64>::init(cfg, 1).unwrap();
        let snap = model.compute_gradients(std::slice::from_ref(&img), &[4]).unwrap();
        let masked = DefenseConfig::new(DefenseKind::MaskPosGrad).apply(&snap).unwrap();
        assert!(matches!(closed_form_attack(&masked, &model), Err(Error::NoPositionGradient)));
        let mut ac = AttackConfig::new(AttackVariant::AprilOpt);
        ac.max_iters = 2;
        assert!(matches!(
            optimization_attack(&model, AttackTarget::new(&masked), &ac),
            Err(Error::NoPositionGradient)
        ));
        ac.variant = AttackVariant::Dlg;
        assert!(optimization_attack(&model, AttackTarget::new(&masked), &ac).is_ok());
    }

    #[test]
    fn fixed_embedding_defense_removes_the_gradient() {
        let (cfg, img) = setup(64);
        let defended = DefenseConfig::new(DefenseKind::FixedPosEmbedding).model_config(&cfg);
        let model = VisionTransformer::<f64>::init(defended, 1).unwrap();
        let snap = model.compute_gradients(&[img], &[0]).unwrap();
        assert!(matches!(closed_form_attack(&snap, &model), Err(Error::NoPositionGradient)));
    }

    #[test]
    fn hidden_dim_sweep_trend() {
        let (cfg, img) = setup(64);
        let rows = hidden_dim_sweep(&cfg, &[64, 32, 8], &img, 3, 11).unwrap();
        assert!(rows[0].metrics.mse < 1e-6 && rows[1].metrics.mse < 1e-6);
        assert_eq!(rows[0].status, AttackStatus::Exact);
        assert!(rows[2].metrics.mse > 0.05);
        assert_eq!(rows[2].status, AttackStatus::Underdetermined);
        for r in &rows {
            assert_eq!(r.rank, (r.value as usize).min(16));
        }
        assert!(hidden_dim_sweep(&cfg, &[], &img, 3, 11).is_err());
    }

    #[test]
    fn noise_sweep_breaks_the_closed_form() {
        let (cfg, img) = setup(64);
        let model = VisionTransformer::<f64>::init(cfg, 2).unwrap();
        let scales = [0.0, 0.01, 10.0];
        let rows = noise_sweep(&model, &img, 5, &scales, NoiseKind::Gaussian, 4).unwrap();
        assert!(rows[0].metrics.mse < 1e-8);
        assert!(rows[1].metrics.mse > 0.05 && rows[2].metrics.mse > 0.05);
        let again = noise_sweep(&model, &img, 5, &scales, NoiseKind::Gaussian, 4).unwrap();
        assert_eq!(rows, again);
    }

    #[test]
    fn defense_config_checks() {
        let mut d = DefenseConfig::new(DefenseKind::GaussianNoise);
        d.noise_scale = -1.0;
        assert!(d.validate().is_err());
        assert_eq!("mask-pos-grad".parse::<DefenseKind>().unwrap(), DefenseKind::MaskPosGrad);
    }
}

//! The complete finite-difference suite: every primitive, full-model
//! parameter gradients, and the dummy-input gradient of each matching
//! objective (which differentiates through a gradient).

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attacks::{AttackVariant, Objective};
use crate::autodiff::gradcheck::{
    finite_diff, finite_diff_5pt, primitive_suite, relative_error, CheckOutcome, FD_STEP, FIRST_ORDER_TOL, SECOND_ORDER_TOL,
};
use crate::error::Result;
use crate::image::Image;
use crate::model::{patchify, ArchVariant, ModelConfig, Nonlinearity, VisionTransformer};
use crate::tensor::Tensor;

/// Random inputs per primitive.
pub const PRIMITIVE_TRIALS: usize = 20;

fn small_model(variant: ArchVariant, nonlinearity: Nonlinearity, cls: bool, seed: u64) -> Result<VisionTransformer<f64>> {
    let mut cfg = ModelConfig::new(variant, (4, 4, 1), (2, 2), 4, 2, 2, 3);
    cfg.nonlinearity = nonlinearity;
    cfg.cls_token = cls;
    cfg.mlp_hidden_dim = 6;
    // large enough that the loss is not flat at finite-difference precision
    cfg.init_std = 0.5;
    VisionTransformer::init(cfg, seed)
}

fn random_image(rng: &mut ChaCha8Rng) -> Result<Image<f64>> {
    Image::new(4, 4, 1, (0..16).map(|_| rng.random::<f64>()).collect())
}

/// Least-likely class, so the loss is far from saturation and the
/// gradients are not lost in rounding.
fn least_likely(model: &VisionTransformer<f64>, image: &Image<f64>) -> Result<usize> {
    let (logits, _) = model.forward(image)?;
    Ok(logits
        .data()
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0))
}

/// Parameter gradients of a two-sample batch against central differences,
/// one outcome per model layout. The error is taken over the concatenated
/// gradient of all parameters: individual tensors can have gradients near
/// `1e-7` (dead ReLU paths), where a per-tensor ratio measures rounding only.
pub fn model_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layouts = [
        ("model-a-relu", ArchVariant::A, Nonlinearity::Relu, false),
        ("model-a-gelu", ArchVariant::A, Nonlinearity::Gelu, false),
        ("model-b-gelu", ArchVariant::B, Nonlinearity::Gelu, false),
        ("model-b-gelu-cls", ArchVariant::B, Nonlinearity::Gelu, true),
    ];
    let mut out = Vec::new();
    for (name, variant, nl, cls) in layouts {
        let model = small_model(variant, nl, cls, rng.random())?;
        let imgs = [random_image(&mut rng)?, random_image(&mut rng)?];
        let labels = [least_likely(&model, &imgs[0])?, least_likely(&model, &imgs[1])?];
        let snap = model.compute_gradients(&imgs, &labels)?;
        let (mut analytic_all, mut fd_all) = (Vec::new(), Vec::new());
        for (pname, analytic) in snap.iter() {
            let f = |t: &Tensor<f64>| -> Result<f64> {
                let mut m = model.clone();
                *m.params.get_mut(pname)? = t.clone();
                Ok(m.compute_gradients(&imgs, &labels)?.loss)
            };
            let fd = finite_diff_5pt(f, model.params.get(pname)?, FD_STEP)?;
            analytic_all.extend_from_slice(analytic.data());
            fd_all.extend_from_slice(fd.data());
        }
        let n = analytic_all.len();
        let worst = relative_error(&Tensor::new(vec![n], analytic_all)?, &Tensor::new(vec![n], fd_all)?);
        out.push(CheckOutcome {
            name: name.into(),
            order: 1,
            trials: snap.len(),
            max_rel_err: worst,
            tolerance: FIRST_ORDER_TOL,
        });
    }
    Ok(out)
}

/// Dummy-input gradient of each matching objective against central
/// differences of the objective.
pub fn matching_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = BTreeSet::new();
    let mut out = Vec::new();
    for variant in [AttackVariant::Dlg, AttackVariant::AprilOpt, AttackVariant::Ig, AttackVariant::Tag] {
        let model = small_model(ArchVariant::B, Nonlinearity::Gelu, false, rng.random())?;
        let truth = random_image(&mut rng)?;
        let label = rng.random_range(0..3);
        let snap = model.compute_gradients(std::slice::from_ref(&truth), &[label])?;
        let start = random_image(&mut rng)?;
        let x0 = patchify(&start, &model.config)?.row_slice(0, 4)?;
        let objective = Objective {
            model: &model,
            target: &snap,
            variant,
            alpha: 0.3,
            mask: &mask,
            labels: &[label],
        };
        let analytic = objective.evaluate(std::slice::from_ref(&x0))?.grads.remove(0);
        let fd = finite_diff(|t| objective.value(std::slice::from_ref(t)), &x0, FD_STEP)?;
        out.push(CheckOutcome {
            name: format!("matching-{variant}"),
            order: 2,
            trials: 1,
            max_rel_err: relative_error(&analytic, &fd),
            tolerance: SECOND_ORDER_TOL,
        });
    }
    Ok(out)
}

/// Primitives, model and matching objectives together.
pub fn full_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = primitive_suite(seed, PRIMITIVE_TRIALS)?;
    out.extend(model_suite(seed)?);
    out.extend(matching_suite(seed)?);
    Ok(out)
}

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::matching::{matched_names, matching_loss_on_tape};
use super::{
    resolve_labels, AttackConfig, AttackStatus, AttackTarget, AttackVariant, DummyInit, IterRecord, OptimizerKind,
    ReconstructionResult,
};
use crate::autodiff::{row_concat, Tape};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::mse;
use crate::model::{batch_loss, unpatchify, GradientSnapshot, ParamVars, VisionTransformer};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stop once the best objective improved by less than this over
/// [`PATIENCE`] iterations.
const MIN_IMPROVEMENT: f64 = 1e-9;
const PATIENCE: usize = 100;

/// The matching objective as a function of the dummy pixels.
///
/// Dummies are given as patch matrices without the augmentation row
/// (`patch_dim - 1` by `patches`), which is a reordering of the pixels.
pub struct Objective<'a, S: Scalar> {
    pub model: &'a VisionTransformer<S>,
    pub target: &'a GradientSnapshot<S>,
    pub variant: AttackVariant,
    pub alpha: S,
    pub mask: &'a BTreeSet<String>,
    pub labels: &'a [usize],
}

#[derive(Clone, Debug)]
pub struct Evaluation<S> {
    pub objective: S,
    pub gradient_loss: S,
    pub pos_cosine: Option<S>,
    /// Gradient of the objective for each dummy.
    pub grads: Vec<Tensor<S>>,
}

impl<S: Scalar> Objective<'_, S> {
    fn run(&self, dummies: &[Tensor<S>], want_grad: bool) -> Result<Evaluation<S>> {
        let cfg = &self.model.config;
        let tape = Tape::new();
        let ones = Tensor::ones(&[1, cfg.patch_count()]);
        let leaves: Vec<_> = dummies.iter().map(|x| tape.leaf(x.clone())).collect();
        let xs = leaves
            .iter()
            .map(|&x| row_concat(&[x, tape.constant(ones.clone())]))
            .collect::<Result<Vec<_>>>()?;
        let pv = ParamVars::register(&tape, &self.model.params, true);
        let loss = batch_loss(cfg, &pv, &xs, self.labels)?;
        let names = matched_names(self.target, self.mask);
        let vars = names.iter().map(|n| pv.get(n)).collect::<Result<Vec<_>>>()?;
        let grads = tape.grad_graph(loss, &vars)?;
        let dummy: BTreeMap<String, _> = names.into_iter().zip(grads).collect();
        let terms = matching_loss_on_tape(&tape, self.variant, &dummy, self.target, self.alpha, self.mask)?;
        let grads = if want_grad {
            tape.grad(terms.total, &leaves)?
        } else {
            Vec::new()
        };
        Ok(Evaluation {
            objective: terms.total.item(),
            gradient_loss: terms.l2,
            pos_cosine: terms.pos_cosine,
            grads,
        })
    }

    pub fn evaluate(&self, dummies: &[Tensor<S>]) -> Result<Evaluation<S>> {
        self.run(dummies, true)
    }

    pub fn value(&self, dummies: &[Tensor<S>]) -> Result<S> {
        Ok(self.run(dummies, false)?.objective)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    t: i32,
}

impl<S: Scalar> Adam<S> {
    pub fn new(shapes: &[&[usize]]) -> Self {
        Self {
            beta1: S::lit(0.9),
            beta2: S::lit(0.999),
            eps: S::lit(1e-8),
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<S>], grads: &[Tensor<S>], lr: S) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = S::one() - b1.powi(self.t);
        let c2 = S::one() - b2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, &g), (m, v)) in it {
                *m = b1 * *m + (S::one() - b1) * g;
                *v = b2 * *v + (S::one() - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

fn init_dummies<S: Scalar>(cfg: &AttackConfig, rows: usize, cols: usize, count: usize) -> Vec<Tensor<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..count)
        .map(|_| {
            Tensor::from_fn(rows, cols, |_, _| match cfg.init {
                DummyInit::Gaussian => S::lit(rng.sample::<f64, _>(StandardNormal)),
                DummyInit::Uniform => S::lit(rng.random::<f64>()),
                DummyInit::Zeros => S::zero(),
            })
        })
        .collect()
}

fn to_images<S: Scalar>(model: &VisionTransformer<S>, dummies: &[Tensor<S>]) -> Result<Vec<Image<S>>> {
    dummies.iter().map(|x| unpatchify(x, &model.config)).collect()
}

fn image_mse<S: Scalar>(images: &[Image<S>], truth: &[Image<S>]) -> Result<S> {
    let mut total = S::zero();
    for (a, b) in images.iter().zip(truth) {
        total += mse(&a.clamped(), b)?;
    }
    Ok(total / S::lit(images.len() as f64))
}

/// Fits dummy images to the target gradients.
///
/// Logs diagnostics and a frame every `log_every` iterations and at the
/// last one. The returned images are the iterate with the lowest objective
/// seen. A non-finite objective aborts with [`Error::AttackDiverged`].
pub fn optimization_attack<S: Scalar>(
    model: &VisionTransformer<S>,
    target: AttackTarget<'_, S>,
    cfg: &AttackConfig,
) -> Result<ReconstructionResult<S>> {
    cfg.validate()?;
    if cfg.variant == AttackVariant::AprilClosed {
        return Err(Error::InvalidConfig("april-closed is not an optimization attack".into()));
    }
    if cfg.variant == AttackVariant::AprilOpt && target.snapshot.pos_grad().is_none() {
        return Err(Error::NoPositionGradient);
    }
    let labels = resolve_labels(target, cfg.label_mode)?;
    if let Some(truth) = target.truth {
        if truth.len() != labels.len() {
            return Err(Error::InvalidConfig(format!(
                "{} ground-truth images for a batch of {}",
                truth.len(),
                labels.len()
            )));
        }
    }
    let mc = &model.config;
    let (rows, cols) = (mc.patch_dim() - 1, mc.patch_count());
    let mut dummies: Vec<Tensor<S>> = init_dummies(cfg, rows, cols, labels.len());
    let objective = Objective {
        model,
        target: target.snapshot,
        variant: cfg.variant,
        alpha: S::lit(cfg.alpha),
        mask: &cfg.param_mask,
        labels: &labels,
    };
    let shape = [rows, cols];
    let mut adam = Adam::new(&vec![&shape[..]; dummies.len()]);
    let mut best = (S::infinity(), dummies.clone());
    let mut best_history: Vec<S> = Vec::with_capacity(cfg.max_iters);
    let mut iter_log = Vec::new();
    let mut frames = Vec::new();
    let mut status = AttackStatus::MaxIters;
    let mut iterations = 0;

    for it in 0..cfg.max_iters {
        let eval = objective.evaluate(&dummies).map_err(|e| match e {
            Error::NonFinite { .. } => Error::AttackDiverged { iteration: it },
            other => other,
        })?;
        if !eval.objective.is_finite() {
            return Err(Error::AttackDiverged { iteration: it });
        }
        iterations = it + 1;
        if eval.objective < best.0 {
            best = (eval.objective, dummies.clone());
        }
        best_history.push(best.0);
        let converged = it >= PATIENCE && best_history[it - PATIENCE] - best.0 < S::lit(MIN_IMPROVEMENT);
        let last = converged || it + 1 == cfg.max_iters;
        if it % cfg.log_every == 0 || last {
            let images = to_images(model, &dummies)?;
            let image_mse = target.truth.map(|t| image_mse(&images, t)).transpose()?;
            iter_log.push(IterRecord {
                iteration: it,
                objective: eval.objective,
                gradient_loss: eval.gradient_loss,
                pos_cosine: eval.pos_cosine,
                image_mse,
            });
            frames.push((it, images));
        }
        if converged {
            status = AttackStatus::Converged;
            break;
        }
        if last {
            break;
        }
        let lr = if cfg.lr_decay {
            let quarter = (4 * it) / cfg.max_iters;
            cfg.learning_rate * 0.5f64.powi(quarter as i32)
        } else {
            cfg.learning_rate
        };
        let lr = S::lit(lr);
        match cfg.optimizer {
            OptimizerKind::Adam => adam.step(&mut dummies, &eval.grads, lr),
            OptimizerKind::Gd => {
                for (x, g) in dummies.iter_mut().zip(&eval.grads) {
                    *x = x.sub(&g.scale(lr))?;
                }
            }
        }
    }

    Ok(ReconstructionResult {
        images: to_images(model, &best.1)?,
        recovered_z: None,
        labels,
        iter_log,
        frames,
        status,
        iterations,
        residual: None,
        condition: None,
        rank: None,
        augmentation_deviation: None,
    })
}

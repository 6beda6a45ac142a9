//! Miniature vision transformers (variants A and B), the gradients they
//! produce, and their on-disk container.

pub mod config;
pub mod container;
mod forward;
pub mod params;
mod snapshot;

use std::collections::BTreeMap;

pub use config::{ArchVariant, ModelConfig, Nonlinearity, PosMode};
pub use forward::{
    forward_on_tape, patchify, unpatchify, ActivationTrace, BlockNodes, BlockTrace, ForwardNodes, ParamVars,
};
pub use params::{param_group, sinusoidal_pos_table, ModelParams};
pub use snapshot::GradientSnapshot;

use crate::autodiff::{cross_entropy_softmax, Tape, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Configuration plus parameters.
#[derive(Clone, Debug)]
pub struct VisionTransformer<S> {
    pub config: ModelConfig,
    pub params: ModelParams<S>,
}

/// Mean cross-entropy of a batch of recorded patch matrices.
pub fn batch_loss<'t, S: Scalar>(
    cfg: &ModelConfig,
    pv: &ParamVars<'t, S>,
    patches: &[Var<'t, S>],
    labels: &[usize],
) -> Result<Var<'t, S>> {
    if patches.is_empty() || patches.len() != labels.len() {
        return Err(Error::InvalidConfig(format!(
            "batch of {} inputs with {} labels",
            patches.len(),
            labels.len()
        )));
    }
    let mut total: Option<Var<'t, S>> = None;
    for (&x, &y) in patches.iter().zip(labels) {
        if y >= cfg.class_count {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: cfg.class_count,
            });
        }
        let fwd = forward_on_tape(cfg, pv, x)?;
        let l = cross_entropy_softmax(fwd.logits, y)?;
        total = Some(match total {
            None => l,
            Some(t) => t.add(l)?,
        });
    }
    let total = total.expect("non-empty batch");
    if patches.len() == 1 {
        Ok(total)
    } else {
        total.scale(S::one() / S::lit(patches.len() as f64))
    }
}

impl<S: Scalar> VisionTransformer<S> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn new(config: ModelConfig, params: ModelParams<S>) -> Result<Self> {
        let params = ModelParams::from_tensors(&config, params.into_map())?;
        Ok(Self { config, params })
    }

    pub fn patchify(&self, image: &Image<S>) -> Result<Tensor<S>> {
        patchify(image, &self.config)
    }

    /// Logits (`class_count x 1`) and the intermediate feature maps.
    pub fn forward(&self, image: &Image<S>) -> Result<(Tensor<S>, ActivationTrace<S>)> {
        let x = self.patchify(image)?;
        let tape = Tape::new();
        let pv = ParamVars::register(&tape, &self.params, false);
        let fwd = forward_on_tape(&self.config, &pv, tape.constant(x))?;
        Ok((fwd.logits.value(), fwd.trace()))
    }

    /// Batch-mean gradients of the mean cross-entropy loss.
    pub fn compute_gradients(&self, images: &[Image<S>], labels: &[usize]) -> Result<GradientSnapshot<S>> {
        let patches = images
            .iter()
            .map(|img| self.patchify(img))
            .collect::<Result<Vec<_>>>()?;
        self.gradients_from_patches(&patches, labels)
    }

    pub fn gradients_from_patches(&self, patches: &[Tensor<S>], labels: &[usize]) -> Result<GradientSnapshot<S>> {
        let tape = Tape::new();
        let pv = ParamVars::register(&tape, &self.params, true);
        let xs: Vec<_> = patches.iter().map(|x| tape.constant(x.clone())).collect();
        let loss = batch_loss(&self.config, &pv, &xs, labels)?;
        let (names, vars): (Vec<String>, Vec<Var<'_, S>>) = pv.iter().map(|(n, v)| (n.clone(), *v)).unzip();
        let grads = tape.grad(loss, &vars)?;
        let map: BTreeMap<String, Tensor<S>> = names.into_iter().zip(grads).collect();
        Ok(GradientSnapshot::new(map, patches.len(), loss.item()))
    }
}

#[cfg(test)]
mod tests;

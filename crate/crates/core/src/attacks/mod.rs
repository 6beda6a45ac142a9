//! Reconstruction attacks on shared gradients.
//!
//! The closed-form attack solves for the first attention input directly and
//! inverts the patch embedding. The optimization attacks fit dummy images
//! whose gradients match the shared ones; they differ only in the matching
//! objective.

mod closed_form;
mod labels;
mod matching;
mod optimize;

use std::collections::BTreeSet;

pub use closed_form::{closed_form_attack, invert_patch_embedding, recover_z_closed_form, PatchInversion, ZRecovery};
pub use labels::{extract_label_idlg, restore_batch_labels};
pub use matching::{matching_loss, matching_loss_on_tape, MatchTerms};
pub use optimize::{optimization_attack, Adam, Evaluation, Objective};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::config::text_enum;
use crate::model::{GradientSnapshot, VisionTransformer};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackVariant {
    AprilClosed,
    AprilOpt,
    Dlg,
    Ig,
    Tag,
}

text_enum!(AttackVariant, "attack variant", {
    "april-closed" => AttackVariant::AprilClosed,
    "april-opt" => AttackVariant::AprilOpt,
    "dlg" => AttackVariant::Dlg,
    "ig" => AttackVariant::Ig,
    "tag" => AttackVariant::Tag,
});

/// Starting point of the dummy images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DummyInit {
    /// Standard normal pixels.
    Gaussian,
    /// Uniform on `[0, 1)`.
    Uniform,
    Zeros,
}

text_enum!(DummyInit, "dummy init", {
    "gaussian" => DummyInit::Gaussian,
    "uniform" => DummyInit::Uniform,
    "zeros" => DummyInit::Zeros,
});

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelMode {
    Given,
    Idlg,
    BatchRestore,
}

text_enum!(LabelMode, "label mode", {
    "given" => LabelMode::Given,
    "idlg" => LabelMode::Idlg,
    "batch-restore" => LabelMode::BatchRestore,
});

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    /// Plain gradient descent.
    Gd,
}

text_enum!(OptimizerKind, "optimizer", { "adam" => OptimizerKind::Adam, "gd" => OptimizerKind::Gd });

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub variant: AttackVariant,
    /// Weight of the auxiliary term: the position-gradient cosine for
    /// `april-opt`, the L1 term for `tag`.
    pub alpha: f64,
    pub learning_rate: f64,
    pub max_iters: usize,
    pub seed: u64,
    pub init: DummyInit,
    pub label_mode: LabelMode,
    /// Parameter groups (see [`crate::model::param_group`]) left out of
    /// matching.
    pub param_mask: BTreeSet<String>,
    pub log_every: usize,
    pub optimizer: OptimizerKind,
    /// Halve the learning rate after each quarter of the budget.
    pub lr_decay: bool,
}

impl AttackConfig {
    pub fn new(variant: AttackVariant) -> Self {
        Self {
            variant,
            alpha: Self::default_alpha(variant),
            learning_rate: 0.1,
            max_iters: 1000,
            seed: 0,
            init: DummyInit::Gaussian,
            label_mode: LabelMode::Idlg,
            param_mask: BTreeSet::new(),
            log_every: 100,
            optimizer: OptimizerKind::Adam,
            lr_decay: true,
        }
    }

    pub fn default_alpha(variant: AttackVariant) -> f64 {
        match variant {
            AttackVariant::AprilOpt => 2.0,
            AttackVariant::Tag => 1e-3,
            _ => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be a finite value >= 0, got {}", self.alpha));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackStatus {
    /// Closed form with every linear system of full column rank.
    Exact,
    Converged,
    MaxIters,
    Underdetermined,
}

impl std::fmt::Display for AttackStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttackStatus::Exact => "exact",
            AttackStatus::Converged => "converged",
            AttackStatus::MaxIters => "max-iters",
            AttackStatus::Underdetermined => "underdetermined",
        })
    }
}

/// Diagnostics of one logged iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct IterRecord<S> {
    pub iteration: usize,
    /// Value of the full matching objective.
    pub objective: S,
    /// Squared Frobenius distance over the matched gradients.
    pub gradient_loss: S,
    /// Position-gradient cosine, when the objective uses it.
    pub pos_cosine: Option<S>,
    /// Against the ground truth, on clamped pixels.
    pub image_mse: Option<S>,
}

#[derive(Clone, Debug)]
pub struct ReconstructionResult<S> {
    pub images: Vec<Image<S>>,
    pub recovered_z: Option<Tensor<S>>,
    pub labels: Vec<usize>,
    pub iter_log: Vec<IterRecord<S>>,
    /// Dummy images at each logged iteration.
    pub frames: Vec<(usize, Vec<Image<S>>)>,
    pub status: AttackStatus,
    pub iterations: usize,
    /// Closed form only.
    pub residual: Option<S>,
    /// Closed form only: condition number of the position gradient.
    pub condition: Option<S>,
    /// Closed form only: rank of the position gradient.
    pub rank: Option<usize>,
    /// Closed form only: largest deviation of the recovered augmentation row
    /// from one.
    pub augmentation_deviation: Option<S>,
}

impl<S> ReconstructionResult<S> {
    fn closed_form(images: Vec<Image<S>>, status: AttackStatus) -> Self {
        Self {
            images,
            recovered_z: None,
            labels: Vec::new(),
            iter_log: Vec::new(),
            frames: Vec::new(),
            status,
            iterations: 0,
            residual: None,
            condition: None,
            rank: None,
            augmentation_deviation: None,
        }
    }
}

/// What the attacker observes, plus optional ground truth for diagnostics.
#[derive(Clone, Copy, Debug)]
pub struct AttackTarget<'a, S> {
    pub snapshot: &'a GradientSnapshot<S>,
    /// Required when the label mode is [`LabelMode::Given`].
    pub labels: Option<&'a [usize]>,
    pub truth: Option<&'a [Image<S>]>,
}

impl<'a, S> AttackTarget<'a, S> {
    pub fn new(snapshot: &'a GradientSnapshot<S>) -> Self {
        Self {
            snapshot,
            labels: None,
            truth: None,
        }
    }
}

/// Runs whichever attack the configuration names.
pub fn run_attack<S: Scalar>(
    model: &VisionTransformer<S>,
    target: AttackTarget<'_, S>,
    cfg: &AttackConfig,
) -> Result<ReconstructionResult<S>> {
    cfg.validate()?;
    match cfg.variant {
        AttackVariant::AprilClosed => {
            let mut res = closed_form_attack(target.snapshot, model)?;
            // labels play no part in the reconstruction, so noisy gradients
            // that defeat label extraction leave the list empty
            res.labels = match resolve_labels(target, cfg.label_mode) {
                Ok(l) => l,
                Err(Error::AmbiguousLabel { .. } | Error::DuplicateLabelsUnsupported { .. }) => Vec::new(),
                Err(e) => return Err(e),
            };
            Ok(res)
        }
        _ => optimization_attack(model, target, cfg),
    }
}

pub(crate) fn resolve_labels<S: Scalar>(target: AttackTarget<'_, S>, mode: LabelMode) -> Result<Vec<usize>> {
    let batch = target.snapshot.batch_size;
    match mode {
        LabelMode::Given => {
            let labels = target
                .labels
                .ok_or_else(|| Error::InvalidConfig("label mode `given` without labels".into()))?;
            if labels.len() != batch {
                return Err(Error::InvalidConfig(format!(
                    "{} labels given for a batch of {batch}",
                    labels.len()
                )));
            }
            Ok(labels.to_vec())
        }
        LabelMode::Idlg => {
            if batch != 1 {
                return Err(Error::InvalidConfig(format!(
                    "idlg label extraction needs batch size 1, got {batch}"
                )));
            }
            Ok(vec![extract_label_idlg(target.snapshot)?])
        }
        LabelMode::BatchRestore => restore_batch_labels(target.snapshot, batch),
    }
}

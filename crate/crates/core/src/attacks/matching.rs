use std::collections::{BTreeMap, BTreeSet};

use super::AttackVariant;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::params::POS_EMBED;
use crate::model::{param_group, GradientSnapshot};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Matching objective and its parts.
pub struct MatchTerms<'t, S: Scalar> {
    pub total: Var<'t, S>,
    /// `sum ||g' - g||_F^2` over the matched tensors.
    pub l2: S,
    pub pos_cosine: Option<S>,
}

/// Names of the target gradients that take part in matching.
pub(crate) fn matched_names<S: Scalar>(target: &GradientSnapshot<S>, mask: &BTreeSet<String>) -> Vec<String> {
    target
        .names()
        .filter(|n| !mask.contains(&param_group(n)))
        .cloned()
        .collect()
}

fn sum_all<'t, S: Scalar>(terms: Vec<Var<'t, S>>) -> Result<Var<'t, S>> {
    let mut it = terms.into_iter();
    let first = it
        .next()
        .ok_or_else(|| Error::InvalidConfig("no gradients left to match".into()))?;
    it.try_fold(first, |acc, t| acc.add(t))
}

/// Matching objective between recorded dummy gradients and a target
/// snapshot, differentiable through `dummy`.
///
/// * `dlg`: `sum ||g' - g||_F^2`
/// * `april-opt`: the `dlg` term minus `alpha` times the cosine between the
///   position-embedding gradients
/// * `ig`: one minus the cosine between all matched gradients, concatenated
/// * `tag`: the `dlg` term plus `alpha` times `sum ||g' - g||_1`
pub fn matching_loss_on_tape<'t, S: Scalar>(
    tape: &'t Tape<S>,
    variant: AttackVariant,
    dummy: &BTreeMap<String, Var<'t, S>>,
    target: &GradientSnapshot<S>,
    alpha: S,
    mask: &BTreeSet<String>,
) -> Result<MatchTerms<'t, S>> {
    let names = matched_names(target, mask);
    let mut pairs = Vec::with_capacity(names.len());
    for name in &names {
        let d = *dummy.get(name).ok_or_else(|| Error::MissingEntry(name.clone()))?;
        pairs.push((name.as_str(), d, tape.constant(target.get(name)?.clone())));
    }
    let diffs = pairs
        .iter()
        .map(|&(_, d, t)| d.sub(t))
        .collect::<Result<Vec<_>>>()?;
    let l2_var = sum_all(diffs.iter().map(|d| d.frobenius_sq()).collect::<Result<_>>()?)?;
    let l2 = l2_var.item();
    match variant {
        AttackVariant::Dlg => Ok(MatchTerms {
            total: l2_var,
            l2,
            pos_cosine: None,
        }),
        AttackVariant::AprilOpt => {
            let &(_, d, t) = pairs
                .iter()
                .find(|(n, _, _)| *n == POS_EMBED)
                .ok_or(Error::NoPositionGradient)?;
            let cos = d.cosine_similarity(t)?;
            let pos_cosine = Some(cos.item());
            Ok(MatchTerms {
                total: l2_var.sub(cos.scale(alpha)?)?,
                l2,
                pos_cosine,
            })
        }
        AttackVariant::Ig => {
            let dot = sum_all(pairs.iter().map(|&(_, d, t)| d.dot(t)).collect::<Result<_>>()?)?;
            let nd = sum_all(pairs.iter().map(|&(_, d, _)| d.frobenius_sq()).collect::<Result<_>>()?)?;
            let nt = sum_all(pairs.iter().map(|&(_, _, t)| t.frobenius_sq()).collect::<Result<_>>()?)?;
            let cos = dot.mul(nd.mul(nt)?.sqrt()?.recip()?)?;
            let one = tape.constant(Tensor::scalar(S::one()));
            Ok(MatchTerms {
                total: one.sub(cos)?,
                l2,
                pos_cosine: None,
            })
        }
        AttackVariant::Tag => {
            let l1 = sum_all(diffs.iter().map(|d| d.l1_norm()).collect::<Result<_>>()?)?;
            Ok(MatchTerms {
                total: l2_var.add(l1.scale(alpha)?)?,
                l2,
                pos_cosine: None,
            })
        }
        AttackVariant::AprilClosed => Err(Error::InvalidConfig(
            "april-closed has no matching objective".into(),
        )),
    }
}

/// Matching objective between two plain snapshots, as a rank-0 tensor.
pub fn matching_loss<S: Scalar>(
    variant: AttackVariant,
    dummy: &GradientSnapshot<S>,
    target: &GradientSnapshot<S>,
    alpha: S,
    mask: &BTreeSet<String>,
) -> Result<Tensor<S>> {
    let tape = Tape::new();
    let vars: BTreeMap<String, Var<'_, S>> = dummy
        .iter()
        .map(|(n, t)| (n.clone(), tape.constant(t.clone())))
        .collect();
    Ok(matching_loss_on_tape(&tape, variant, &vars, target, alpha, mask)?
        .total
        .value())
}

use super::{AttackStatus, ReconstructionResult};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::linalg::{lstsq, pinv, rank_and_cond};
use crate::model::params::{block_param, PATCH_EMBED, POS_EMBED};
use crate::model::{
    sinusoidal_pos_table, unpatchify, ArchVariant, GradientSnapshot, ModelConfig, ModelParams, PosMode,
    VisionTransformer,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// First-block input recovered from a snapshot.
#[derive(Clone, Debug)]
pub struct ZRecovery<S> {
    /// `channel_dim x tokens`.
    pub z: Tensor<S>,
    /// Frobenius residual of the least-squares system.
    pub residual: S,
    pub condition: S,
    pub rank: usize,
    pub tokens: usize,
}

impl<S> ZRecovery<S> {
    pub fn is_determined(&self) -> bool {
        self.rank == self.tokens
    }
}

/// Solves `(dl/dz) z^T = Q^T dl/dQ + K^T dl/dK + V^T dl/dV` for the first
/// block input, taking `dl/dz` from the position-embedding gradient.
///
/// Exact for a single sample; for larger batches the snapshot mixes samples
/// and the solution matches none of them.
pub fn recover_z_closed_form<S: Scalar>(
    snapshot: &GradientSnapshot<S>,
    params: &ModelParams<S>,
    cfg: &ModelConfig,
) -> Result<ZRecovery<S>> {
    if cfg.variant != ArchVariant::A {
        return Err(Error::ClosedFormRequiresVariantA);
    }
    let a = snapshot.pos_grad().ok_or(Error::NoPositionGradient)?;
    let mut b: Option<Tensor<S>> = None;
    for leaf in ["attn.q", "attn.k", "attn.v"] {
        let name = block_param(0, leaf);
        let w = params.get(&name)?;
        let term = w.transpose()?.matmul(snapshot.get(&name)?)?;
        b = Some(match b {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    let b = b.expect("three projections");
    let sol = lstsq(a, &b, None)?;
    Ok(ZRecovery {
        z: sol.x.transpose()?,
        residual: sol.residual,
        condition: sol.condition,
        rank: sol.rank,
        tokens: a.cols(),
    })
}

/// Result of undoing the patch embedding.
#[derive(Clone, Debug)]
pub struct PatchInversion<S> {
    pub image: Image<S>,
    /// Recovered `patch_dim x patches` matrix, augmentation row included.
    pub patches: Tensor<S>,
    /// Largest `|x - 1|` over the recovered augmentation row.
    pub augmentation_deviation: S,
    pub rank: usize,
}

impl<S> PatchInversion<S> {
    pub fn is_determined(&self, patch_dim: usize) -> bool {
        self.rank == patch_dim
    }
}

/// Position term that was added to the patch tokens.
fn position_term<S: Scalar>(params: &ModelParams<S>, cfg: &ModelConfig) -> Result<Option<Tensor<S>>> {
    match cfg.pos_mode {
        PosMode::Learnable => Ok(Some(params.get(POS_EMBED)?.clone())),
        PosMode::FixedSinusoidal => Ok(Some(sinusoidal_pos_table(cfg.channel_dim, cfg.token_count())?)),
        PosMode::None => Ok(None),
    }
}

/// `X = W_p^+ (z - E_pos)`, then back to pixels.
pub fn invert_patch_embedding<S: Scalar>(
    z: &Tensor<S>,
    params: &ModelParams<S>,
    cfg: &ModelConfig,
) -> Result<PatchInversion<S>> {
    let (c, t) = z.require_matrix("invert_patch_embedding")?;
    if c != cfg.channel_dim || t != cfg.token_count() {
        return Err(Error::shape(
            "invert_patch_embedding",
            format!("z is {c}x{t}, expected {}x{}", cfg.channel_dim, cfg.token_count()),
        ));
    }
    let tokens = match position_term(params, cfg)? {
        Some(pos) => z.sub(&pos)?,
        None => z.clone(),
    };
    let wp = params.get(PATCH_EMBED)?;
    let (rank, _) = rank_and_cond(wp, None)?;
    let x = pinv(wp, None)?.matmul(&tokens)?;
    let d = x.rows();
    let augmentation_deviation = (0..x.cols())
        .map(|j| (x.at(d - 1, j) - S::one()).abs())
        .fold(S::zero(), S::max);
    Ok(PatchInversion {
        image: unpatchify(&x, cfg)?,
        patches: x,
        augmentation_deviation,
        rank,
    })
}

/// Recovers the first-block input, then the pixels. The status is exact only
/// when both linear systems have full column rank.
pub fn closed_form_attack<S: Scalar>(
    snapshot: &GradientSnapshot<S>,
    model: &VisionTransformer<S>,
) -> Result<ReconstructionResult<S>> {
    let cfg = &model.config;
    let zr = recover_z_closed_form(snapshot, &model.params, cfg)?;
    let inv = invert_patch_embedding(&zr.z, &model.params, cfg)?;
    let status = if zr.is_determined() && inv.is_determined(cfg.patch_dim()) {
        AttackStatus::Exact
    } else {
        AttackStatus::Underdetermined
    };
    let mut res = ReconstructionResult::closed_form(vec![inv.image], status);
    res.recovered_z = Some(zr.z);
    res.residual = Some(zr.residual);
    res.condition = Some(zr.condition);
    res.rank = Some(zr.rank);
    res.augmentation_deviation = Some(inv.augmentation_deviation);
    Ok(res)
}

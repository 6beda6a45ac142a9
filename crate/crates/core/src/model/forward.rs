use std::collections::BTreeMap;

use super::config::{ArchVariant, ModelConfig, Nonlinearity, PosMode};
use super::params::{block_param, sinusoidal_pos_table, ModelParams, CLS_TOKEN, HEAD, PATCH_EMBED, POS_EMBED};
use crate::autodiff::{row_concat, Tape, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Splits an image into a `patch_dim x p` matrix: column `j` is patch `j` in
/// row-major patch order, flattened as (row, col, channel), followed by a
/// constant 1.
pub fn patchify<S: Scalar>(image: &Image<S>, cfg: &ModelConfig) -> Result<Tensor<S>> {
    let (h, w, ch) = image.dims();
    if (h, w, ch) != (cfg.image_height, cfg.image_width, cfg.image_channels) {
        return Err(Error::shape(
            "patchify",
            format!(
                "image {h}x{w}x{ch} vs configured {}x{}x{}",
                cfg.image_height, cfg.image_width, cfg.image_channels
            ),
        ));
    }
    cfg.validate()?;
    let (ph, pw) = (cfg.patch_height, cfg.patch_width);
    let grid_w = w / pw;
    let p = cfg.patch_count();
    let d = cfg.patch_dim();
    let mut out = Tensor::zeros(&[d, p]);
    for j in 0..p {
        let (gy, gx) = (j / grid_w, j % grid_w);
        for dy in 0..ph {
            for dx in 0..pw {
                for c in 0..ch {
                    let row = (dy * pw + dx) * ch + c;
                    out.set(row, j, image.get(gy * ph + dy, gx * pw + dx, c));
                }
            }
        }
        out.set(d - 1, j, S::one());
    }
    Ok(out)
}

/// Inverse of [`patchify`]; the augmentation row is ignored. Accepts the
/// matrix with or without that row.
pub fn unpatchify<S: Scalar>(x: &Tensor<S>, cfg: &ModelConfig) -> Result<Image<S>> {
    let (rows, p) = x.require_matrix("unpatchify")?;
    let d = cfg.patch_dim();
    if (rows != d && rows != d - 1) || p != cfg.patch_count() {
        return Err(Error::shape(
            "unpatchify",
            format!("got {rows}x{p}, expected {d}x{}", cfg.patch_count()),
        ));
    }
    let (ph, pw, ch) = (cfg.patch_height, cfg.patch_width, cfg.image_channels);
    let grid_w = cfg.image_width / pw;
    let mut img = Image::filled(cfg.image_height, cfg.image_width, ch, S::zero());
    for j in 0..p {
        let (gy, gx) = (j / grid_w, j % grid_w);
        for dy in 0..ph {
            for dx in 0..pw {
                for c in 0..ch {
                    let row = (dy * pw + dx) * ch + c;
                    img.set(gy * ph + dy, gx * pw + dx, c, x.at(row, j));
                }
            }
        }
    }
    Ok(img)
}

/// Parameters registered on a tape.
pub struct ParamVars<'t, S: Scalar> {
    vars: BTreeMap<String, Var<'t, S>>,
    learnable: bool,
}

impl<'t, S: Scalar> ParamVars<'t, S> {
    /// Registers every parameter as a leaf when `learnable`, otherwise as a
    /// constant.
    pub fn register(tape: &'t Tape<S>, params: &ModelParams<S>, learnable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(n, t)| {
                let v = if learnable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (n.clone(), v)
            })
            .collect();
        Self { vars, learnable }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, S>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingEntry(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t, S>)> {
        self.vars.iter()
    }

    pub fn is_learnable(&self) -> bool {
        self.learnable
    }
}

/// Nodes of one encoder block.
pub struct BlockNodes<'t, S: Scalar> {
    /// Block input.
    pub z: Var<'t, S>,
    /// Input of the attention module (`z` for variant A, `LN1(z)` for B).
    pub attn_input: Var<'t, S>,
    pub q: Var<'t, S>,
    pub k: Var<'t, S>,
    pub v: Var<'t, S>,
    /// Per head, `tokens x tokens`, rows sum to one.
    pub attention: Vec<Var<'t, S>>,
    pub h: Var<'t, S>,
    pub a: Var<'t, S>,
    pub out: Var<'t, S>,
}

/// Nodes produced by one forward pass.
pub struct ForwardNodes<'t, S: Scalar> {
    pub patches: Var<'t, S>,
    /// Position-embedded tokens, the first block's input.
    pub embedding: Var<'t, S>,
    pub blocks: Vec<BlockNodes<'t, S>>,
    pub pooled: Var<'t, S>,
    pub logits: Var<'t, S>,
}

/// Plain-value copy of the intermediate feature maps.
#[derive(Clone, Debug)]
pub struct BlockTrace<S> {
    pub z: Tensor<S>,
    pub attn_input: Tensor<S>,
    pub q: Tensor<S>,
    pub k: Tensor<S>,
    pub v: Tensor<S>,
    pub attention: Vec<Tensor<S>>,
    pub h: Tensor<S>,
    pub a: Tensor<S>,
    pub out: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct ActivationTrace<S> {
    pub blocks: Vec<BlockTrace<S>>,
    pub pooled: Tensor<S>,
    pub logits: Tensor<S>,
}

impl<S: Scalar> ForwardNodes<'_, S> {
    pub fn trace(&self) -> ActivationTrace<S> {
        ActivationTrace {
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockTrace {
                    z: b.z.value(),
                    attn_input: b.attn_input.value(),
                    q: b.q.value(),
                    k: b.k.value(),
                    v: b.v.value(),
                    attention: b.attention.iter().map(Var::value).collect(),
                    h: b.h.value(),
                    a: b.a.value(),
                    out: b.out.value(),
                })
                .collect(),
            pooled: self.pooled.value(),
            logits: self.logits.value(),
        }
    }
}

/// Layernorm over channels for every token of a `c x t` map.
fn channel_norm<'t, S: Scalar>(
    x: Var<'t, S>,
    eps: S,
    affine: Option<(Var<'t, S>, Var<'t, S>)>,
) -> Result<Var<'t, S>> {
    let t = x.shape()[1];
    let y = x.t()?.row_layernorm(eps)?.t()?;
    match affine {
        None => Ok(y),
        Some((gamma, beta)) => y.mul(gamma.broadcast_cols(t)?)?.add(beta.broadcast_cols(t)?),
    }
}

fn attention<'t, S: Scalar>(
    cfg: &ModelConfig,
    pv: &ParamVars<'t, S>,
    block: usize,
    z: Var<'t, S>,
) -> Result<(Var<'t, S>, Var<'t, S>, Var<'t, S>, Vec<Var<'t, S>>, Var<'t, S>, Var<'t, S>)> {
    let q = pv.get(&block_param(block, "attn.q"))?.matmul(z)?;
    let k = pv.get(&block_param(block, "attn.k"))?.matmul(z)?;
    let v = pv.get(&block_param(block, "attn.v"))?.matmul(z)?;
    let dk = cfg.head_dim();
    let scale = S::one() / S::lit(dk as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.head_count);
    let mut maps = Vec::with_capacity(cfg.head_count);
    for head in 0..cfg.head_count {
        let (lo, hi) = (head * dk, (head + 1) * dk);
        let (qh, kh, vh) = (q.row_slice(lo, hi)?, k.row_slice(lo, hi)?, v.row_slice(lo, hi)?);
        // scores[i][j]: query token i against key token j
        let weights = qh.t()?.matmul(kh)?.scale(scale)?.row_softmax()?;
        heads.push(vh.matmul(weights.t()?)?);
        maps.push(weights);
    }
    let h = if heads.len() == 1 { heads[0] } else { row_concat(&heads)? };
    let a = pv.get(&block_param(block, "attn.proj"))?.matmul(h)?;
    Ok((q, k, v, maps, h, a))
}

fn mlp<'t, S: Scalar>(cfg: &ModelConfig, pv: &ParamVars<'t, S>, block: usize, x: Var<'t, S>) -> Result<Var<'t, S>> {
    let hidden = pv.get(&block_param(block, "mlp.fc1"))?.matmul(x)?;
    let act = match cfg.nonlinearity {
        Nonlinearity::Relu => hidden.relu()?,
        Nonlinearity::Gelu => hidden.gelu()?,
    };
    pv.get(&block_param(block, "mlp.fc2"))?.matmul(act)
}

/// Records a forward pass for one `patch_dim x p` patch matrix.
pub fn forward_on_tape<'t, S: Scalar>(
    cfg: &ModelConfig,
    pv: &ParamVars<'t, S>,
    patches: Var<'t, S>,
) -> Result<ForwardNodes<'t, S>> {
    let tape = patches.tape();
    let shape = patches.shape();
    if shape != [cfg.patch_dim(), cfg.patch_count()] {
        return Err(Error::shape(
            "forward",
            format!("patch matrix {shape:?}, expected [{}, {}]", cfg.patch_dim(), cfg.patch_count()),
        ));
    }
    let c = cfg.channel_dim;
    let eps = S::lit(cfg.layernorm_eps);
    let mut tokens = pv.get(PATCH_EMBED)?.matmul(patches)?;
    if cfg.cls_token {
        let cls = pv.get(CLS_TOKEN)?;
        tokens = row_concat(&[cls.t()?, tokens.t()?])?.t()?;
    }
    let t = cfg.token_count();
    let embedding = match cfg.pos_mode {
        PosMode::Learnable => tokens.add(pv.get(POS_EMBED)?)?,
        PosMode::FixedSinusoidal => tokens.add(tape.constant(sinusoidal_pos_table(c, t)?))?,
        PosMode::None => tokens,
    };

    let mut blocks = Vec::with_capacity(cfg.depth);
    let mut x = embedding;
    for b in 0..cfg.depth {
        let z = x;
        let node = match cfg.variant {
            ArchVariant::A => {
                let (q, k, v, attention, h, a) = attention(cfg, pv, b, z)?;
                let normed = channel_norm(a, eps, None)?;
                let out = mlp(cfg, pv, b, normed)?;
                BlockNodes { z, attn_input: z, q, k, v, attention, h, a, out }
            }
            ArchVariant::B => {
                let n1 = channel_norm(
                    z,
                    eps,
                    Some((pv.get(&block_param(b, "norm1.gamma"))?, pv.get(&block_param(b, "norm1.beta"))?)),
                )?;
                let (q, k, v, attention, h, a) = attention(cfg, pv, b, n1)?;
                let u = z.add(a)?;
                let n2 = channel_norm(
                    u,
                    eps,
                    Some((pv.get(&block_param(b, "norm2.gamma"))?, pv.get(&block_param(b, "norm2.beta"))?)),
                )?;
                let out = u.add(mlp(cfg, pv, b, n2)?)?;
                BlockNodes { z, attn_input: n1, q, k, v, attention, h, a, out }
            }
        };
        x = node.out;
        blocks.push(node);
    }

    let pooled = if cfg.cls_token {
        x.t()?.row_slice(0, 1)?.t()?
    } else {
        x.row_means()?
    };
    let augmented = row_concat(&[pooled, tape.constant(Tensor::ones(&[1, 1]))])?;
    let logits = pv.get(HEAD)?.matmul(augmented)?;
    Ok(ForwardNodes { patches, embedding, blocks, pooled, logits })
}

use crate::error::{Error, Result};
use crate::lora::Projection;
use crate::nn::{FeatureMap, Graph, Init, ParamBuilder, ParamId};
use crate::tensor::{Scalar, Tape, Var};

/// `x·W + b` over the last axis.
pub fn linear(t: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = t.matmul(x, w)?;
    match b {
        Some(b) => t.add_row(y, b),
        None => Ok(y),
    }
}

/// Standardize over the last axis, then scale by `gamma` and shift by `beta`.
pub fn layer_norm(t: &mut Tape, x: Var, gamma: Var, beta: Var, eps: Scalar) -> Result<Var> {
    let n = t.layer_norm(x, eps)?;
    let s = t.mul_row(n, gamma)?;
    t.add_row(s, beta)
}

/// Scaled dot-product attention over already-projected `q[nq×d]`,
/// `k[nk×d]`, `v[nk×d]`, split into `heads` column blocks.
pub fn attention_core(t: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let d = t.value(q).last_dim();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("attention dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as Scalar).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                t.slice_cols(q, h * dh, dh)?,
                t.slice_cols(k, h * dh, dh)?,
                t.slice_cols(v, h * dh, dh)?,
            )
        };
        let s = t.matmul_nt(qh, kh)?;
        let s = t.scale(s, scale)?;
        let a = t.softmax(s)?;
        outs.push(t.matmul(a, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        t.concat_cols(&outs)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        d_in: usize,
        d_out: usize,
        weight: Init,
        bias: Option<Init>,
        frozen: bool,
    ) -> Result<Self> {
        let w = pb.add(&format!("{name}.weight"), &[d_in, d_out], weight, frozen)?;
        let b = match bias {
            Some(init) => Some(pb.add(&format!("{name}.bias"), &[d_out], init, frozen)?),
            None => None,
        };
        Ok(Linear {
            weight: w,
            bias: b,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        linear(g, x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: Scalar,
}

impl LayerNorm {
    pub const EPS: Scalar = 1e-6;

    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d: usize, frozen: bool) -> Result<Self> {
        Ok(LayerNorm {
            gamma: pb.add(&format!("{name}.gamma"), &[d], Init::Ones, frozen)?,
            beta: pb.add(&format!("{name}.beta"), &[d], Init::Zeros, frozen)?,
            eps: Self::EPS,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        layer_norm(g, x, gamma, beta, self.eps)
    }
}

/// Multi-head attention with query/key/value projections (any of which may
/// carry a LoRA adapter) and an output projection.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        dim: usize,
        heads: usize,
        frozen: bool,
        lora_qv: Option<crate::lora::LoraConfig>,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("attention dim {dim} not divisible by {heads} heads")));
        }
        let proj = |pb: &mut ParamBuilder<'_>, which: &str, lora: Option<crate::lora::LoraConfig>| {
            Projection::new(pb, &format!("{name}.{which}"), dim, dim, frozen, lora)
        };
        Ok(Attention {
            q: proj(pb, "q", lora_qv)?,
            k: proj(pb, "k", None)?,
            v: proj(pb, "v", lora_qv)?,
            out: Linear::new(
                pb,
                &format!("{name}.out"),
                dim,
                dim,
                Init::Fan,
                Some(Init::Normal(0.02)),
                frozen,
            )?,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, q_in: Var, k_in: Var, v_in: Var) -> Result<Var> {
        multi_head_attention(g, q_in, k_in, v_in, self)
    }
}

/// Project `q_in`, `k_in`, `v_in`, attend per head with scale `1/√(d/heads)`,
/// concatenate heads and apply the output projection.
pub fn multi_head_attention(g: &mut Graph<'_>, q_in: Var, k_in: Var, v_in: Var, attn: &Attention) -> Result<Var> {
    let q = attn.q.forward(g, q_in)?;
    let k = attn.k.forward(g, k_in)?;
    let v = attn.v.forward(g, v_in)?;
    let o = attention_core(g, q, k, v, attn.heads)?;
    attn.out.forward(g, o)
}

/// Squeeze-and-excitation channel gating: global average pool over the
/// grid, bottleneck MLP (`d → d/s → d`, ReLU), sigmoid gate per channel.
#[derive(Clone, Debug)]
pub struct SeBlock {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SeBlock {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d: usize, reduction: usize, frozen: bool) -> Result<Self> {
        if reduction == 0 || d % reduction != 0 {
            return Err(Error::Config(format!(
                "SE reduction {reduction} does not divide channel count {d}"
            )));
        }
        let hidden = d / reduction;
        Ok(SeBlock {
            fc1: Linear::new(pb, &format!("{name}.fc1"), d, hidden, Init::Fan, Some(Init::Zeros), frozen)?,
            fc2: Linear::new(pb, &format!("{name}.fc2"), hidden, d, Init::Fan, Some(Init::Zeros), frozen)?,
        })
    }

    /// The per-channel gate in (0, 1), shape `[d]`.
    pub fn gate(&self, g: &mut Graph<'_>, x: &FeatureMap) -> Result<Var> {
        let n = x.tokens();
        let d = g.value(x.var).last_dim();
        let pooled = g.sum_rows(x.var)?;
        let pooled = g.scale(pooled, 1.0 / n as Scalar)?;
        let pooled = g.reshape(pooled, &[1, d])?;
        let h = self.fc1.forward(g, pooled)?;
        let h = g.relu(h)?;
        let e = self.fc2.forward(g, h)?;
        let s = g.sigmoid(e)?;
        g.reshape(s, &[d])
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: &FeatureMap) -> Result<FeatureMap> {
        let gate = self.gate(g, x)?;
        let y = g.mul_row(x.var, gate)?;
        Ok(x.with_var(y))
    }
}

/// Non-overlapping `p×p` patchify followed by a linear projection. Patches
/// are flattened in (row, col, channel) order.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub patch: usize,
    pub channels: usize,
}

impl PatchEmbed {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        patch: usize,
        channels: usize,
        d: usize,
        frozen: bool,
    ) -> Result<Self> {
        let fan_in = patch * patch * channels;
        Ok(PatchEmbed {
            proj: Linear::new(pb, &format!("{name}.proj"), fan_in, d, Init::Fan, Some(Init::Normal(0.02)), frozen)?,
            patch,
            channels,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, img: Var) -> Result<FeatureMap> {
        let patches = patchify(g, img, self.patch, self.channels)?;
        let (hp, wp) = (patches.h, patches.w);
        let y = self.proj.forward(g, patches.var)?;
        Ok(FeatureMap::new(y, hp, wp))
    }
}

/// Rearranges `img[H×W×c]` into `[(H/p·W/p) × (p·p·c)]` rows of flattened patches.
pub fn patchify(t: &mut Tape, img: Var, p: usize, channels: usize) -> Result<FeatureMap> {
    let (h, w, c) = match *t.shape(img) {
        [h, w, c] => (h, w, c),
        ref s => return Err(Error::shape("patchify", s, &[0, 0, channels])),
    };
    if c != channels {
        return Err(Error::shape("patchify", &[h, w, c], &[h, w, channels]));
    }
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} is not divisible into {p}x{p} patches (H={h}, W={w}, p={p})"
        )));
    }
    let (hp, wp) = (h / p, w / p);
    let mut index = Vec::with_capacity(h * w * c);
    for i in 0..hp {
        for j in 0..wp {
            for r in 0..p {
                for s in 0..p {
                    for ch in 0..c {
                        index.push(((i * p + r) * w + (j * p + s)) * c + ch);
                    }
                }
            }
        }
    }
    let v = t.gather(img, index, &[hp * wp, p * p * c])?;
    Ok(FeatureMap::new(v, hp, wp))
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `+ MLP(LN(·))` with a
/// GELU MLP of hidden width `mlp_ratio·d`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        d: usize,
        heads: usize,
        mlp_ratio: usize,
        frozen: bool,
        lora_qv: Option<crate::lora::LoraConfig>,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            ln1: LayerNorm::new(pb, &format!("{name}.ln1"), d, frozen)?,
            attn: Attention::new(pb, &format!("{name}.attn"), d, heads, frozen, lora_qv)?,
            ln2: LayerNorm::new(pb, &format!("{name}.ln2"), d, frozen)?,
            fc1: Linear::new(pb, &format!("{name}.mlp.fc1"), d, mlp_ratio * d, Init::Fan, Some(Init::Normal(0.02)), frozen)?,
            fc2: Linear::new(pb, &format!("{name}.mlp.fc2"), mlp_ratio * d, d, Init::Fan, Some(Init::Normal(0.02)), frozen)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: &FeatureMap) -> Result<FeatureMap> {
        let h = self.ln1.forward(g, x.var)?;
        let a = self.attn.forward(g, h, h, h)?;
        let x1 = g.add(x.var, a)?;
        let h = self.ln2.forward(g, x1)?;
        let m = self.fc1.forward(g, h)?;
        let m = g.gelu(m)?;
        let m = self.fc2.forward(g, m)?;
        let y = g.add(x1, m)?;
        Ok(x.with_var(y))
    }
}

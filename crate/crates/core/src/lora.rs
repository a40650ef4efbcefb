//! Low-rank adapters on frozen projections.
//!
//! A LoRA layer keeps a frozen weight `W₀` and adds the trainable low-rank
//! update `scale·B·A`, with `A: [r×d_in]`, `B: [d_out×r]` and
//! `scale = α/r`. `B` starts at zero, so a freshly built adapter computes
//! exactly the frozen layer.
//!
//! Weights in this crate act on row vectors (`y = x·W`), so `W₀` is stored
//! as `[d_in × d_out]` and the adapted map is `x·W₀ + scale·(x·Aᵀ)·Bᵀ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{linear, Graph, Init, Linear, ParamBuilder, ParamId};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    /// Scaling numerator; the update is multiplied by `alpha / rank`.
    /// `alpha == rank` (scale 1) is the default.
    pub alpha: Scalar,
}

impl LoraConfig {
    pub fn new(rank: usize, alpha: Scalar) -> Self {
        LoraConfig { rank, alpha }
    }

    pub fn scale(&self) -> Scalar {
        self.alpha / self.rank as Scalar
    }

    /// Checks `1 ≤ r < min(d_in, d_out)`.
    pub fn validate(&self, d_in: usize, d_out: usize) -> Result<()> {
        let d = d_in.min(d_out);
        if self.rank == 0 || self.rank >= d {
            return Err(Error::Config(format!(
                "LoRA rank must satisfy 1 <= r < d, got r={} with d={d}",
                self.rank
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LoraLinear {
    /// Frozen `W₀` (and bias).
    pub base: Linear,
    /// `A: [r × d_in]`, drawn from `N(0, 1/r)`.
    pub a: ParamId,
    /// `B: [d_out × r]`, zero at construction.
    pub b: ParamId,
    pub rank: usize,
    pub scale: Scalar,
}

impl LoraLinear {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, base: Linear, cfg: LoraConfig) -> Result<Self> {
        cfg.validate(base.d_in, base.d_out)?;
        let r = cfg.rank;
        let a = pb.add(
            &format!("{name}.lora_a"),
            &[r, base.d_in],
            Init::Normal(1.0 / (r as Scalar).sqrt()),
            false,
        )?;
        let b = pb.add(&format!("{name}.lora_b"), &[base.d_out, r], Init::Zeros, false)?;
        Ok(LoraLinear {
            base,
            a,
            b,
            rank: r,
            scale: cfg.scale(),
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w0 = g.param(self.base.weight);
        let bias = self.base.bias.map(|b| g.param(b));
        let a = g.param(self.a);
        let b = g.param(self.b);
        lora_apply(g, x, w0, bias, a, b, self.scale)
    }

    /// Dense equivalent weight `W₀ + scale·(B·A)ᵀ` in `[d_in × d_out]` layout.
    pub fn merged_weight(&self, g: &Graph<'_>) -> Result<Tensor> {
        let p = g.params();
        lora_merge(
            &p.get(self.base.weight).value,
            &p.get(self.a).value,
            &p.get(self.b).value,
            self.scale,
        )
    }
}

/// `x·W₀ + bias + scale·(x·Aᵀ)·Bᵀ`, as two rank-`r` products; `B·A` is never formed.
pub fn lora_apply(
    t: &mut Tape,
    x: Var,
    w0: Var,
    bias: Option<Var>,
    a: Var,
    b: Var,
    scale: Scalar,
) -> Result<Var> {
    let base = linear(t, x, w0, bias)?;
    let down = t.matmul_nt(x, a)?;
    let up = t.matmul_nt(down, b)?;
    let up = if scale == 1.0 { up } else { t.scale(up, scale)? };
    t.add(base, up)
}

/// Dense `W₀ + scale·(B·A)ᵀ` for `W₀: [d_in×d_out]`, `A: [r×d_in]`, `B: [d_out×r]`.
pub fn lora_merge(w0: &Tensor, a: &Tensor, b: &Tensor, scale: Scalar) -> Result<Tensor> {
    let (d_in, d_out) = w0.dims2("lora_merge")?;
    let (r, a_in) = a.dims2("lora_merge")?;
    let (b_out, r2) = b.dims2("lora_merge")?;
    if a_in != d_in || b_out != d_out || r != r2 {
        return Err(Error::shape("lora_merge", a.shape(), b.shape()));
    }
    // (B·A)ᵀ = Aᵀ·Bᵀ
    let delta = a.transpose()?.matmul(&b.transpose()?)?;
    let data = w0
        .data()
        .iter()
        .zip(delta.data())
        .map(|(&w, &dv)| w + scale * dv)
        .collect();
    Tensor::new(w0.shape(), data)
}

/// Trainable parameter count of `sites` rank-`r` adapters on `d×d` layers:
/// `sites·(r·d + d·r)`.
pub fn lora_param_count(d: usize, rank: usize, sites: usize) -> Result<usize> {
    LoraConfig::new(rank, rank as Scalar).validate(d, d)?;
    Ok(sites * (rank * d + d * rank))
}

/// A linear projection that may carry a LoRA adapter.
#[derive(Clone, Debug)]
pub enum Projection {
    Plain(Linear),
    Lora(LoraLinear),
}

impl Projection {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        d_in: usize,
        d_out: usize,
        frozen: bool,
        lora: Option<LoraConfig>,
    ) -> Result<Self> {
        let base = Linear::new(pb, name, d_in, d_out, Init::Fan, Some(Init::Normal(0.02)), frozen)?;
        Ok(match lora {
            Some(cfg) => Projection::Lora(LoraLinear::new(pb, name, base, cfg)?),
            None => Projection::Plain(base),
        })
    }

    pub fn base(&self) -> &Linear {
        match self {
            Projection::Plain(l) => l,
            Projection::Lora(l) => &l.base,
        }
    }

    pub fn lora(&self) -> Option<&LoraLinear> {
        match self {
            Projection::Plain(_) => None,
            Projection::Lora(l) => Some(l),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        match self {
            Projection::Plain(l) => l.forward(g, x),
            Projection::Lora(l) => l.forward(g, x),
        }
    }
}

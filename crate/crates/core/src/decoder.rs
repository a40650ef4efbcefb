//! Dual-prompt mask decoder.
//!
//! Token assembly `E_t = [iou; mask…; sparse…]`, a two-way transformer over
//! image features and tokens, two stride-2 transposed convolutions that lift
//! the refined image features to per-pixel mask embeddings `e_M`, text–image
//! cross-attention producing `F_M`, and a similarity head that scores every
//! pixel against each class.
//!
//! The transformer base weights are frozen. LoRA (when enabled) sits on the
//! query/value projections of the token self-attention and of the
//! token→image attention. Tokens, upscaling, text attention and the head are
//! trainable.

use crate::config::{AblationFlags, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{Attention, FeatureMap, Graph, Init, LayerNorm, Linear, ParamBuilder, ParamId};
use crate::tensor::{Scalar, Tensor, Var};

/// Decoder inputs produced by the prompt encoder.
#[derive(Clone, Copy, Debug)]
pub struct PromptInputs {
    /// No-mask dense embedding `e_d`, `[d]`.
    pub dense: Var,
    /// Positional grid `E_p`, `[(h·w) × d]`.
    pub pe: Var,
    /// Sparse point embeddings `e_s`, `[K × d]`; `None` for `K = 0`.
    pub sparse: Option<Var>,
}

/// `E_s = e_en + e_d` (broadcast over the grid), `E_p = pe`,
/// `E_t = [iou; mask; sparse]`.
pub fn assemble_inputs(
    g: &mut Graph<'_>,
    e_en: FeatureMap,
    prompts: &PromptInputs,
    iou: Var,
    mask: Var,
) -> Result<(FeatureMap, Var, Var)> {
    let (img, pe) = (g.shape(e_en.var).to_vec(), g.shape(prompts.pe).to_vec());
    if img != pe {
        return Err(Error::shape("assemble_inputs (image vs positional grid)", &img, &pe));
    }
    let e_s = g.add_row(e_en.var, prompts.dense)?;
    let mut parts = vec![iou, mask];
    parts.extend(prompts.sparse);
    let e_t = g.concat_rows(&parts)?;
    Ok((e_en.with_var(e_s), prompts.pe, e_t))
}

#[derive(Clone, Debug)]
pub struct TwoWayLayer {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub cross_token_to_image: Attention,
    pub norm2: LayerNorm,
    pub mlp_fc1: Linear,
    pub mlp_fc2: Linear,
    pub norm3: LayerNorm,
    pub cross_image_to_token: Attention,
    pub norm4: LayerNorm,
}

impl TwoWayLayer {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, cfg: &ModelConfig, lora: bool) -> Result<Self> {
        let (d, h) = (cfg.dim, cfg.heads);
        let lora = lora.then(|| cfg.lora());
        let hidden = d * cfg.mlp_ratio;
        Ok(TwoWayLayer {
            self_attn: Attention::new(pb, &format!("{name}.self_attn"), d, h, true, lora)?,
            norm1: LayerNorm::new(pb, &format!("{name}.norm1"), d, true)?,
            cross_token_to_image: Attention::new(pb, &format!("{name}.cross_t2i"), d, h, true, lora)?,
            norm2: LayerNorm::new(pb, &format!("{name}.norm2"), d, true)?,
            mlp_fc1: Linear::new(pb, &format!("{name}.mlp.fc1"), d, hidden, Init::Fan, Some(Init::Zeros), true)?,
            mlp_fc2: Linear::new(pb, &format!("{name}.mlp.fc2"), hidden, d, Init::Fan, Some(Init::Zeros), true)?,
            norm3: LayerNorm::new(pb, &format!("{name}.norm3"), d, true)?,
            cross_image_to_token: Attention::new(pb, &format!("{name}.cross_i2t"), d, h, true, None)?,
            norm4: LayerNorm::new(pb, &format!("{name}.norm4"), d, true)?,
        })
    }

    /// One layer; returns `(image, tokens)`.
    pub fn forward(&self, g: &mut Graph<'_>, image: Var, pe: Var, tokens: Var) -> Result<(Var, Var)> {
        let a = self.self_attn.forward(g, tokens, tokens, tokens)?;
        let t = g.add(tokens, a)?;
        let t = self.norm1.forward(g, t)?;

        let keys = g.add(image, pe)?;
        let a = self.cross_token_to_image.forward(g, t, keys, image)?;
        let t = g.add(t, a)?;
        let t = self.norm2.forward(g, t)?;

        let m = self.mlp_fc1.forward(g, t)?;
        let m = g.relu(m)?;
        let m = self.mlp_fc2.forward(g, m)?;
        let t = g.add(t, m)?;
        let t = self.norm3.forward(g, t)?;

        let a = self.cross_image_to_token.forward(g, keys, t, t)?;
        let img = g.add(image, a)?;
        let img = self.norm4.forward(g, img)?;
        Ok((img, t))
    }
}

#[derive(Clone, Debug)]
pub struct TwoWayTransformer {
    pub layers: Vec<TwoWayLayer>,
    /// Last token→image attention; only `e_f` depends on it.
    pub final_attn: Attention,
    pub final_norm: LayerNorm,
}

impl TwoWayTransformer {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &ModelConfig, lora: bool) -> Result<Self> {
        if cfg.decoder_layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        let layers = (0..cfg.decoder_layers)
            .map(|i| TwoWayLayer::new(pb, &format!("decoder.layers.{i}"), cfg, lora))
            .collect::<Result<_>>()?;
        Ok(TwoWayTransformer {
            layers,
            final_attn: Attention::new(pb, "decoder.final_attn", cfg.dim, cfg.heads, true, None)?,
            final_norm: LayerNorm::new(pb, "decoder.final_norm", cfg.dim, true)?,
        })
    }

    /// `(e_m, e_f)`: refined image features and refined tokens.
    pub fn forward(&self, g: &mut Graph<'_>, e_s: FeatureMap, pe: Var, e_t: Var) -> Result<(FeatureMap, Var)> {
        let (mut img, mut tok) = (e_s.var, e_t);
        for layer in &self.layers {
            (img, tok) = layer.forward(g, img, pe, tok)?;
        }
        let keys = g.add(img, pe)?;
        let a = self.final_attn.forward(g, tok, keys, img)?;
        let f = g.add(tok, a)?;
        let e_f = self.final_norm.forward(g, f)?;
        Ok((e_s.with_var(img), e_f))
    }
}

/// Stride-2, kernel-2 transposed convolution. The weight is stored as
/// `[c_in × (2·2·c_out)]` with columns ordered `(di, dj, c_out)`.
#[derive(Clone, Debug)]
pub struct UpConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl UpConv {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(UpConv {
            weight: pb.add(&format!("{name}.weight"), &[c_in, 4 * c_out], Init::Fan, false)?,
            bias: pb.add(&format!("{name}.bias"), &[c_out], Init::Zeros, false)?,
            c_in,
            c_out,
        })
    }

    /// `out[2i+di, 2j+dj, o] = Σ_c x[i, j, c]·K[c, di, dj, o] + b[o]`, no activation.
    pub fn forward(&self, g: &mut Graph<'_>, x: FeatureMap) -> Result<FeatureMap> {
        let (h, w, co) = (x.h, x.w, self.c_out);
        let w_var = g.param(self.weight);
        let y = g.matmul(x.var, w_var)?;
        let mut index = Vec::with_capacity(4 * h * w * co);
        for oi in 0..2 * h {
            for oj in 0..2 * w {
                let src = ((oi / 2) * w + oj / 2) * 4 * co + ((oi % 2) * 2 + oj % 2) * co;
                index.extend(src..src + co);
            }
        }
        let up = g.gather(y, index, &[4 * h * w, co])?;
        let b = g.param(self.bias);
        let out = g.add_row(up, b)?;
        Ok(FeatureMap::new(out, 2 * h, 2 * w))
    }
}

/// Two transposed convolutions `d → d/2 → d_m`, each followed by GELU.
pub fn upscale_masks(g: &mut Graph<'_>, e_m: FeatureMap, up: &[UpConv; 2]) -> Result<FeatureMap> {
    let x = up[0].forward(g, e_m)?;
    let x = x.with_var(g.gelu(x.var)?);
    let y = up[1].forward(g, x)?;
    Ok(y.with_var(g.gelu(y.var)?))
}

/// Projections of the text–image cross-attention.
#[derive(Clone, Debug)]
pub struct TextAttention {
    /// `[d_m × d_k]`
    pub w_q: ParamId,
    /// `[d_t × d_k]`
    pub w_k: ParamId,
    /// `[d_t × d_v]`
    pub w_v: ParamId,
    pub d_k: usize,
}

impl TextAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, d_m: usize, d_t: usize, d_k: usize, d_v: usize) -> Result<Self> {
        if d_k == 0 {
            return Err(Error::Config("d_k must be positive".into()));
        }
        Ok(TextAttention {
            w_q: pb.add("decoder.text.w_q", &[d_m, d_k], Init::Fan, false)?,
            // Text rows are unit-norm, so unit-variance weights give projected
            // keys and values unit-variance entries.
            w_k: pb.add("decoder.text.w_k", &[d_t, d_k], Init::Normal(1.0), false)?,
            w_v: pb.add("decoder.text.w_v", &[d_t, d_v], Init::Normal(1.0), false)?,
            d_k,
        })
    }
}

/// Order of class rows sorted by their embedding bits. Summing over classes
/// in this order makes `F_M` independent of the vocabulary order, bit for bit.
fn canonical_order(e_t: &Tensor) -> Vec<usize> {
    let d = e_t.last_dim();
    let rows: Vec<&[Scalar]> = e_t.data().chunks(d).collect();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| {
        rows[a]
            .iter()
            .zip(rows[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

fn rows_of(e_t: &Tensor, order: &[usize]) -> Result<Tensor> {
    let d = e_t.last_dim();
    let mut data = Vec::with_capacity(order.len() * d);
    for &i in order {
        data.extend_from_slice(&e_t.data()[i * d..(i + 1) * d]);
    }
    Tensor::new(&[order.len(), d], data)
}

/// Attention weights `softmax(e_M·W_Q·(e_t·W_K)ᵀ/√d_k)` over classes, with
/// classes in canonical order, and the attended values `F_M = weights·e_t·W_V`.
pub fn text_attention_weights(
    g: &mut Graph<'_>,
    e_mask: Var,
    e_t: &Tensor,
    ta: &TextAttention,
) -> Result<(Var, Var)> {
    let (c, _) = e_t.dims2("text_cross_attention")?;
    if c == 0 {
        return Err(Error::InvalidArgument("text cross-attention needs at least one class".into()));
    }
    let sorted = rows_of(e_t, &canonical_order(e_t))?;
    let et = g.constant(sorted);
    let wq = g.param(ta.w_q);
    let wk = g.param(ta.w_k);
    let wv = g.param(ta.w_v);
    let q = g.matmul(e_mask, wq)?;
    let k = g.matmul(et, wk)?;
    let v = g.matmul(et, wv)?;
    let s = g.matmul_nt(q, k)?;
    let s = g.scale(s, 1.0 / (ta.d_k as Scalar).sqrt())?;
    let a = g.softmax(s)?;
    let f = g.matmul(a, v)?;
    Ok((a, f))
}

/// `F_M`, one `d_v` row per pixel of `e_M`.
pub fn text_cross_attention(g: &mut Graph<'_>, e_mask: FeatureMap, e_t: &Tensor, ta: &TextAttention) -> Result<FeatureMap> {
    let (_, f) = text_attention_weights(g, e_mask.var, e_t, ta)?;
    Ok(e_mask.with_var(f))
}

/// Per-pixel class scoring.
#[derive(Clone, Debug)]
pub enum ClassHead {
    /// `h = linear([e_M, F_M])`, `logit_c = ⟨h, e_t,c·W_K⟩/√d_k`.
    Text { proj: Linear },
    /// Without text: `logit_c = ⟨linear(e_M), k_c⟩/√d_k + b_c` with learned `k_c`, `b_c`.
    Learned {
        proj: Linear,
        class_embed: ParamId,
        class_bias: ParamId,
    },
}

/// `[H×W×C]` logits from the `[h_u·w_u × C]` similarity scores, resized to
/// the input resolution when it differs.
fn to_image(g: &mut Graph<'_>, scores: Var, grid: FeatureMap, out_h: usize, out_w: usize) -> Result<Var> {
    let c = g.value(scores).last_dim();
    let s = g.reshape(scores, &[grid.h, grid.w, c])?;
    if (grid.h, grid.w) == (out_h, out_w) {
        Ok(s)
    } else {
        g.bilinear_resize(s, out_h, out_w)
    }
}

/// Text head: logits against the vocabulary, in vocabulary order.
pub fn class_logits(
    g: &mut Graph<'_>,
    e_mask: FeatureMap,
    f_m: FeatureMap,
    e_t: &Tensor,
    ta: &TextAttention,
    proj: &Linear,
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    let x = g.concat_cols(&[e_mask.var, f_m.var])?;
    let h = proj.forward(g, x)?;
    let et = g.constant(e_t.clone());
    let wk = g.param(ta.w_k);
    let keys = g.matmul(et, wk)?;
    let s = g.matmul_nt(h, keys)?;
    let s = g.scale(s, 1.0 / (ta.d_k as Scalar).sqrt())?;
    to_image(g, s, e_mask, out_h, out_w)
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderOutputs {
    pub e_m: FeatureMap,
    pub e_f: Var,
    pub e_mask: FeatureMap,
    pub f_m: Option<FeatureMap>,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct MaskDecoder {
    pub iou_token: ParamId,
    pub mask_tokens: ParamId,
    pub transformer: TwoWayTransformer,
    pub upscale: [UpConv; 2],
    pub text: Option<TextAttention>,
    pub head: ClassHead,
    pub num_classes: usize,
    pub d_k: usize,
}

impl MaskDecoder {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &ModelConfig, flags: &AblationFlags) -> Result<Self> {
        let d = cfg.dim;
        let d_m = cfg.d_mask();
        let iou_token = pb.add("decoder.iou_token", &[1, d], Init::Normal(1.0), false)?;
        let mask_tokens = pb.add("decoder.mask_tokens", &[cfg.mask_tokens, d], Init::Normal(1.0), false)?;
        let transformer = TwoWayTransformer::new(pb, cfg, flags.enable_decoder_lora)?;
        let upscale = [
            UpConv::new(pb, "decoder.upscale.0", d, d / 2)?,
            UpConv::new(pb, "decoder.upscale.1", d / 2, d_m)?,
        ];
        let (text, head) = if flags.enable_text {
            let ta = TextAttention::new(pb, d_m, cfg.d_t, cfg.d_k, cfg.d_v)?;
            let proj = Linear::new(pb, "decoder.head.proj", d_m + cfg.d_v, cfg.d_k, Init::Fan, Some(Init::Zeros), false)?;
            (Some(ta), ClassHead::Text { proj })
        } else {
            let proj = Linear::new(pb, "decoder.head.proj", d_m, cfg.d_k, Init::Fan, Some(Init::Zeros), false)?;
            let class_embed = pb.add("decoder.head.class_embed", &[cfg.num_classes, cfg.d_k], Init::Normal(1.0), false)?;
            let class_bias = pb.add("decoder.head.class_bias", &[cfg.num_classes], Init::Zeros, false)?;
            (
                None,
                ClassHead::Learned {
                    proj,
                    class_embed,
                    class_bias,
                },
            )
        };
        Ok(MaskDecoder {
            iou_token,
            mask_tokens,
            transformer,
            upscale,
            text,
            head,
            num_classes: cfg.num_classes,
            d_k: cfg.d_k,
        })
    }

    /// Full decoder pass. `e_t` (`[C × d_t]`) is required with the text head
    /// and ignored without it. Logits are `[out_h × out_w × C]`.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        e_en: FeatureMap,
        prompts: &PromptInputs,
        e_t: Option<&Tensor>,
        out_h: usize,
        out_w: usize,
    ) -> Result<DecoderOutputs> {
        let iou = g.param(self.iou_token);
        let mask = g.param(self.mask_tokens);
        let (e_s, pe, tokens) = assemble_inputs(g, e_en, prompts, iou, mask)?;
        let (e_m, e_f) = self.transformer.forward(g, e_s, pe, tokens)?;
        let e_mask = upscale_masks(g, e_m, &self.upscale)?;
        let (f_m, logits) = match (&self.head, &self.text) {
            (ClassHead::Text { proj }, Some(ta)) => {
                let e_t = e_t.ok_or_else(|| Error::InvalidArgument("text head needs class embeddings".into()))?;
                let f_m = text_cross_attention(g, e_mask, e_t, ta)?;
                let logits = class_logits(g, e_mask, f_m, e_t, ta, proj, out_h, out_w)?;
                (Some(f_m), logits)
            }
            (
                ClassHead::Learned {
                    proj,
                    class_embed,
                    class_bias,
                },
                _,
            ) => {
                let h = proj.forward(g, e_mask.var)?;
                let k = g.param(*class_embed);
                let s = g.matmul_nt(h, k)?;
                let s = g.scale(s, 1.0 / (self.d_k as Scalar).sqrt())?;
                let b = g.param(*class_bias);
                let s = g.add_row(s, b)?;
                (None, to_image(g, s, e_mask, out_h, out_w)?)
            }
            (ClassHead::Text { .. }, None) => unreachable!("text head is always built with text attention"),
        };
        Ok(DecoderOutputs {
            e_m,
            e_f,
            e_mask,
            f_m,
            logits,
        })
    }
}

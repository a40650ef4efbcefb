//! Dual-branch image encoder.
//!
//! The RGB image goes through a frozen patch embedding and a stack of frozen
//! transformer blocks whose query/value projections carry LoRA adapters. The
//! thermal image has its own trainable patch embedding and feeds a fusion
//! branch: one [`DffmBlock`] per transformer block,
//!
//! ```text
//! F_dffm[i] = conv_out( conv_prev(F_dffm[i-1]) + SE(conv_tb(F_tb[i-1])) )
//! F_tb[i]   = Block_i( F_tb[i-1] + F_dffm[i] )
//! F_dffm[0] = thermal tokens,  F_tb[0] = RGB tokens
//! ```
//!
//! `conv_out` starts at zero, so at initialization the encoder computes the
//! frozen RGB backbone exactly and ignores the thermal image.

use crate::config::{AblationFlags, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{FeatureMap, Graph, Init, Linear, ParamBuilder, PatchEmbed, SeBlock, TransformerBlock};
use crate::tensor::Var;

/// Fusion branch state after `depth_index` blocks.
#[derive(Clone, Copy, Debug)]
pub struct EncoderState {
    pub f_dffm: FeatureMap,
    pub f_tb: FeatureMap,
    pub depth_index: usize,
}

/// One fusion step: three 1×1 convolutions (per-token linear maps over the
/// patch grid) around a squeeze-and-excitation gate. All trainable.
#[derive(Clone, Debug)]
pub struct DffmBlock {
    pub conv_prev: Linear,
    pub conv_tb: Linear,
    pub attention: SeBlock,
    pub conv_out: Linear,
}

impl DffmBlock {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d: usize, se_reduction: usize) -> Result<Self> {
        Ok(DffmBlock {
            conv_prev: Linear::new(pb, &format!("{name}.conv_prev"), d, d, Init::Fan, Some(Init::Zeros), false)?,
            conv_tb: Linear::new(pb, &format!("{name}.conv_tb"), d, d, Init::Fan, Some(Init::Zeros), false)?,
            attention: SeBlock::new(pb, &format!("{name}.se"), d, se_reduction, false)?,
            conv_out: Linear::new(pb, &format!("{name}.conv_out"), d, d, Init::Zeros, Some(Init::Zeros), false)?,
        })
    }
}

/// `conv_out(conv_prev(f_dffm) + SE(conv_tb(f_tb)))`
pub fn dffm_step(g: &mut Graph<'_>, state: &EncoderState, block: &DffmBlock) -> Result<FeatureMap> {
    let (a, b) = (state.f_dffm, state.f_tb);
    if (a.h, a.w) != (b.h, b.w) || g.shape(a.var) != g.shape(b.var) {
        return Err(Error::shape("dffm_step", g.shape(a.var), g.shape(b.var)));
    }
    let prev = block.conv_prev.forward(g, a.var)?;
    let tb = block.conv_tb.forward(g, b.var)?;
    let gated = block.attention.forward(g, &b.with_var(tb))?;
    let sum = g.add(prev, gated.var)?;
    let out = block.conv_out.forward(g, sum)?;
    Ok(a.with_var(out))
}

#[derive(Clone, Debug)]
pub enum Fusion {
    /// One fusion block per transformer block.
    Dffm(Vec<DffmBlock>),
    /// Baseline: RGB and thermal tokens concatenated into one sequence.
    Concat,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub rgb_embed: PatchEmbed,
    pub thermal_embed: PatchEmbed,
    pub blocks: Vec<TransformerBlock>,
    pub fusion: Fusion,
    pub patch: usize,
}

impl Encoder {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &ModelConfig, flags: &AblationFlags) -> Result<Self> {
        if cfg.depth == 0 {
            return Err(Error::Config("encoder depth must be >= 1".into()));
        }
        let d = cfg.dim;
        let rgb_embed = PatchEmbed::new(pb, "encoder.rgb_embed", cfg.patch, 3, d, true)?;
        let thermal_embed = PatchEmbed::new(pb, "encoder.thermal_embed", cfg.patch, 1, d, false)?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            blocks.push(TransformerBlock::new(
                pb,
                &format!("encoder.blocks.{i}"),
                d,
                cfg.heads,
                cfg.mlp_ratio,
                true,
                Some(cfg.lora()),
            )?);
        }
        let fusion = if flags.enable_dffm {
            let dffm = (0..cfg.depth)
                .map(|i| DffmBlock::new(pb, &format!("encoder.dffm.{i}"), d, cfg.se_reduction))
                .collect::<Result<_>>()?;
            Fusion::Dffm(dffm)
        } else {
            Fusion::Concat
        };
        Ok(Encoder {
            rgb_embed,
            thermal_embed,
            blocks,
            fusion,
            patch: cfg.patch,
        })
    }

    /// Patch-embeds both modalities: RGB through the frozen embedding,
    /// thermal through the trainable one.
    pub fn embed_pair(&self, g: &mut Graph<'_>, rgb: Var, th: Var) -> Result<EncoderState> {
        let (rs, ts) = (g.shape(rgb).to_vec(), g.shape(th).to_vec());
        if rs.len() != 3 || ts.len() != 3 || rs[..2] != ts[..2] || rs[2] != 3 || ts[2] != 1 {
            return Err(Error::shape("embed_pair (rgb vs thermal)", &rs, &ts));
        }
        let f_tb = self.rgb_embed.forward(g, rgb)?;
        let f_dffm = self.thermal_embed.forward(g, th)?;
        Ok(EncoderState {
            f_dffm,
            f_tb,
            depth_index: 0,
        })
    }

    /// Image embedding `e_en` for a pixel-aligned RGB/thermal pair.
    pub fn forward(&self, g: &mut Graph<'_>, rgb: Var, th: Var) -> Result<FeatureMap> {
        let mut state = self.embed_pair(g, rgb, th)?;
        match &self.fusion {
            Fusion::Dffm(dffm) => {
                for (block, fuse) in self.blocks.iter().zip(dffm) {
                    let f_dffm = dffm_step(g, &state, fuse)?;
                    let x = g.add(state.f_tb.var, f_dffm.var)?;
                    let f_tb = block.forward(g, &state.f_tb.with_var(x))?;
                    state = EncoderState {
                        f_dffm,
                        f_tb,
                        depth_index: state.depth_index + 1,
                    };
                }
                Ok(state.f_tb)
            }
            Fusion::Concat => {
                let n = state.f_tb.tokens();
                let joint = g.concat_rows(&[state.f_tb.var, state.f_dffm.var])?;
                let mut x = FeatureMap::new(joint, 2 * state.f_tb.h, state.f_tb.w);
                for block in &self.blocks {
                    x = block.forward(g, &x)?;
                }
                let rgb_part = g.slice_rows(x.var, 0, n)?;
                Ok(state.f_tb.with_var(rgb_part))
            }
        }
    }

    /// The frozen RGB backbone alone, without thermal input or fusion.
    pub fn forward_rgb_only(&self, g: &mut Graph<'_>, rgb: Var) -> Result<FeatureMap> {
        let mut x = self.rgb_embed.forward(g, rgb)?;
        for block in &self.blocks {
            x = block.forward(g, &x)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamRegistry;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch: 4,
            dim: 16,
            heads: 2,
            depth: 2,
            lora_rank: 2,
            lora_alpha: 2.0,
            ..Default::default()
        }
    }

    fn build(cfg: &ModelConfig, flags: &AblationFlags) -> (ParamRegistry, Encoder) {
        let mut reg = ParamRegistry::new();
        let enc = Encoder::new(&mut ParamBuilder::new(&mut reg, 3), cfg, flags).unwrap();
        (reg, enc)
    }

    fn images(seed: u64, s: usize) -> (Tensor, Tensor) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (Tensor::uniform(&[s, s, 3], 1.0, &mut r), Tensor::uniform(&[s, s, 1], 1.0, &mut r))
    }

    #[test]
    fn zero_images_give_bias_grids() {
        let (reg, enc) = build(&small_cfg(), &AblationFlags::default());
        let mut g = Graph::new(&reg);
        let rgb = g.constant(Tensor::zeros(&[16, 16, 3]));
        let th = g.constant(Tensor::zeros(&[16, 16, 1]));
        let st = enc.embed_pair(&mut g, rgb, th).unwrap();
        let rb = &reg.get(enc.rgb_embed.proj.bias.unwrap()).value;
        let tb = &reg.get(enc.thermal_embed.proj.bias.unwrap()).value;
        for row in g.value(st.f_tb.var).data().chunks(16) {
            assert_eq!(row, rb.data());
        }
        for row in g.value(st.f_dffm.var).data().chunks(16) {
            assert_eq!(row, tb.data());
        }
    }

    #[test]
    fn default_dims_give_8x8x64_grids() {
        let cfg = ModelConfig::default();
        let (reg, enc) = build(&cfg, &AblationFlags::default());
        let (rgb, th) = images(1, 64);
        let mut g = Graph::new(&reg);
        let (rv, tv) = (g.constant(rgb), g.constant(th));
        let st = enc.embed_pair(&mut g, rv, tv).unwrap();
        for fm in [st.f_tb, st.f_dffm] {
            let grid = fm.to_grid(&mut g).unwrap();
            assert_eq!(g.shape(grid), &[8, 8, 64]);
        }
    }

    #[test]
    fn misaligned_pair_is_rejected() {
        let (reg, enc) = build(&small_cfg(), &AblationFlags::default());
        let mut g = Graph::new(&reg);
        let rgb = g.constant(Tensor::zeros(&[16, 16, 3]));
        let th = g.constant(Tensor::zeros(&[16, 12, 1]));
        assert!(enc.embed_pair(&mut g, rgb, th).is_err());
    }

    #[test]
    fn embed_pair_matches_independent_patch_embeds() {
        let (reg, enc) = build(&small_cfg(), &AblationFlags::default());
        let (rgb, th) = images(2, 16);
        let mut g = Graph::new(&reg);
        let (rv, tv) = (g.constant(rgb.clone()), g.constant(th.clone()));
        let st = enc.embed_pair(&mut g, rv, tv).unwrap();
        let mut h = Graph::new(&reg);
        let (rv, tv) = (h.constant(rgb), h.constant(th));
        let a = enc.rgb_embed.forward(&mut h, rv).unwrap();
        let b = enc.thermal_embed.forward(&mut h, tv).unwrap();
        assert!(g.value(st.f_tb.var).bit_eq(h.value(a.var)));
        assert!(g.value(st.f_dffm.var).bit_eq(h.value(b.var)));
    }

    #[test]
    fn zero_init_dffm_outputs_zero() {
        let (reg, enc) = build(&small_cfg(), &AblationFlags::default());
        let Fusion::Dffm(blocks) = &enc.fusion else { unreachable!() };
        let (rgb, th) = images(3, 16);
        let mut g = Graph::new(&reg);
        let (rv, tv) = (g.constant(rgb), g.constant(th));
        let st = enc.embed_pair(&mut g, rv, tv).unwrap();
        let out = dffm_step(&mut g, &st, &blocks[0]).unwrap();
        assert!(g.value(out.var).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_wiring_passes_thermal_stream_through() {
        let cfg = small_cfg();
        let (mut reg, enc) = build(&cfg, &AblationFlags::default());
        let Fusion::Dffm(blocks) = &enc.fusion else { unreachable!() };
        let b = &blocks[0];
        reg.get_mut(b.conv_prev.weight).value = Tensor::eye(16);
        reg.get_mut(b.conv_out.weight).value = Tensor::eye(16);
        reg.get_mut(b.conv_tb.weight).value = Tensor::zeros(&[16, 16]);
        let (rgb, th) = images(4, 16);
        let mut g = Graph::new(&reg);
        let (rv, tv) = (g.constant(rgb), g.constant(th));
        let st = enc.embed_pair(&mut g, rv, tv).unwrap();
        let out = dffm_step(&mut g, &st, b).unwrap();
        assert!(g.value(out.var).max_abs_diff(g.value(st.f_dffm.var)) == 0.0);
    }

    #[test]
    fn dffm_step_matches_composition() {
        let cfg = small_cfg();
        let (mut reg, enc) = build(&cfg, &AblationFlags::default());
        let Fusion::Dffm(blocks) = &enc.fusion else { unreachable!() };
        let b = blocks[1].clone();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        reg.get_mut(b.conv_out.weight).value = Tensor::randn(&[16, 16], 0.3, &mut r);
        reg.get_mut(b.conv_out.bias.unwrap()).value = Tensor::randn(&[16], 0.3, &mut r);
        let a = Tensor::randn(&[16, 16], 1.0, &mut r);
        let tb = Tensor::randn(&[16, 16], 1.0, &mut r);

        let mut g = Graph::new(&reg);
        let (av, tv) = (g.constant(a.clone()), g.constant(tb.clone()));
        let st = EncoderState {
            f_dffm: FeatureMap::new(av, 4, 4),
            f_tb: FeatureMap::new(tv, 4, 4),
            depth_index: 1,
        };
        let out = dffm_step(&mut g, &st, &b).unwrap();

        // Eager oracle.
        let lin = |l: &Linear, x: &Tensor| {
            let mut y = x.matmul(&reg.get(l.weight).value).unwrap();
            let bias = reg.get(l.bias.unwrap()).value.clone();
            for (i, v) in y.data_mut().iter_mut().enumerate() {
                *v += bias.data()[i % bias.len()];
            }
            y
        };
        let p = lin(&b.conv_prev, &a);
        let c = lin(&b.conv_tb, &tb);
        let mut pooled = Tensor::zeros(&[1, 16]);
        for ch in 0..16 {
            pooled.set(&[0, ch], (0..16).map(|i| c.at(&[i, ch])).sum::<crate::Scalar>() / 16.0);
        }
        let hdn = lin(&b.attention.fc1, &pooled).map(|v| v.max(0.0));
        let e = lin(&b.attention.fc2, &hdn);
        let mut s = p.clone();
        for i in 0..16 {
            for ch in 0..16 {
                let gate = 1.0 / (1.0 + (-e.at(&[0, ch])).exp());
                s.set(&[i, ch], p.at(&[i, ch]) + c.at(&[i, ch]) * gate);
            }
        }
        let want = lin(&b.conv_out, &s);
        assert!(g.value(out.var).max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn init_output_equals_frozen_rgb_backbone() {
        let (reg, enc) = build(&small_cfg(), &AblationFlags::default());
        let (rgb, th) = images(6, 16);
        let mut g = Graph::new(&reg);
        let (rv, tv) = (g.constant(rgb.clone()), g.constant(th));
        let e = enc.forward(&mut g, rv, tv).unwrap();
        let mut h = Graph::new(&reg);
        let rv = h.constant(rgb);
        let base = enc.forward_rgb_only(&mut h, rv).unwrap();
        assert!(g.value(e.var).bit_eq(h.value(base.var)));
    }

    #[test]
    fn zero_transformer_weights_leave_residual_sum() {
        let mut cfg = small_cfg();
        cfg.depth = 1;
        let (mut reg, enc) = build(&cfg, &AblationFlags::default());
        let ids: Vec<_> = reg
            .iter()
            .filter(|(_, p)| p.name.starts_with("encoder.blocks."))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let s = reg.get(id).value.shape().to_vec();
            reg.get_mut(id).value = Tensor::zeros(&s);
        }
        let Fusion::Dffm(blocks) = &enc.fusion else { unreachable!() };
        let mut r = ChaCha8Rng::seed_from_u64(7);
        reg.get_mut(blocks[0].conv_out.weight).value = Tensor::randn(&[16, 16], 0.5, &mut r);
        let (rgb, th) = images(7, 16);
        let mut g = Graph::new(&reg);
        let (rv, tv) = (g.constant(rgb), g.constant(th));
        let e = enc.forward(&mut g, rv, tv).unwrap();

        let mut h = Graph::new(&reg);
        let (rv, tv) = (h.constant(g.value(rv).clone()), h.constant(g.value(tv).clone()));
        let st = enc.embed_pair(&mut h, rv, tv).unwrap();
        let f1 = dffm_step(&mut h, &st, &blocks[0]).unwrap();
        let want = h.add(st.f_tb.var, f1.var).unwrap();
        assert!(g.value(e.var).bit_eq(h.value(want)));
    }

    #[test]
    fn two_blocks_match_unrolled_loop() {
        let cfg = small_cfg();
        let (mut reg, enc) = build(&cfg, &AblationFlags::default());
        let Fusion::Dffm(blocks) = &enc.fusion else { unreachable!() };
        let mut r = ChaCha8Rng::seed_from_u64(8);
        for b in blocks {
            reg.get_mut(b.conv_out.weight).value = Tensor::randn(&[16, 16], 0.3, &mut r);
        }
        let (rgb, th) = images(8, 16);
        let mut g = Graph::new(&reg);
        let (rv, tv) = (g.constant(rgb.clone()), g.constant(th.clone()));
        let e = enc.forward(&mut g, rv, tv).unwrap();

        let mut h = Graph::new(&reg);
        let (rv, tv) = (h.constant(rgb), h.constant(th));
        let s0 = enc.embed_pair(&mut h, rv, tv).unwrap();
        let d1 = dffm_step(&mut h, &s0, &blocks[0]).unwrap();
        let x1 = h.add(s0.f_tb.var, d1.var).unwrap();
        let t1 = enc.blocks[0].forward(&mut h, &s0.f_tb.with_var(x1)).unwrap();
        let s1 = EncoderState { f_dffm: d1, f_tb: t1, depth_index: 1 };
        let d2 = dffm_step(&mut h, &s1, &blocks[1]).unwrap();
        let x2 = h.add(t1.var, d2.var).unwrap();
        let t2 = enc.blocks[1].forward(&mut h, &t1.with_var(x2)).unwrap();
        assert!(g.value(e.var).bit_eq(h.value(t2.var)));
    }

    #[test]
    fn concat_baseline_keeps_grid_shape() {
        let flags = AblationFlags { enable_dffm: false, ..Default::default() };
        let (reg, enc) = build(&small_cfg(), &flags);
        assert!(matches!(enc.fusion, Fusion::Concat));
        let (rgb, th) = images(9, 16);
        let mut g = Graph::new(&reg);
        let (rv, tv) = (g.constant(rgb), g.constant(th));
        let e = enc.forward(&mut g, rv, tv).unwrap();
        assert_eq!(g.shape(e.var), &[16, 16]);
        assert_eq!((e.h, e.w), (4, 4));
    }
}

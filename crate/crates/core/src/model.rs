//! The complete segmenter: encoder, prompt encoder and mask decoder sharing
//! one parameter registry.

use crate::config::{AblationFlags, ModelConfig};
use crate::data::LabelMap;
use crate::decoder::{DecoderOutputs, MaskDecoder, PromptInputs};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::nn::{FeatureMap, Graph, ParamBuilder, ParamRegistry};
use crate::prompt::{PointPrompt, PromptEncoder};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug)]
pub struct Segmenter {
    pub config: ModelConfig,
    pub flags: AblationFlags,
    pub encoder: Encoder,
    pub prompt: PromptEncoder,
    pub decoder: MaskDecoder,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutputs {
    pub e_en: FeatureMap,
    pub decoder: DecoderOutputs,
}

impl ModelOutputs {
    /// `[H × W × C]` class logits.
    pub fn logits(&self) -> Var {
        self.decoder.logits
    }
}

impl Segmenter {
    /// Registers every parameter in `registry`, drawing initial values from
    /// `cfg.init_seed`.
    pub fn new(registry: &mut ParamRegistry, cfg: &ModelConfig, flags: &AblationFlags) -> Result<Self> {
        cfg.validate()?;
        let mut pb = ParamBuilder::new(registry, cfg.init_seed);
        let encoder = Encoder::new(&mut pb, cfg, flags)?;
        let prompt = PromptEncoder::new(&mut pb, cfg.dim)?;
        let decoder = MaskDecoder::new(&mut pb, cfg, flags)?;
        Ok(Segmenter {
            config: cfg.clone(),
            flags: *flags,
            encoder,
            prompt,
            decoder,
        })
    }

    /// A fresh registry with the model's initial parameters.
    pub fn build(cfg: &ModelConfig, flags: &AblationFlags) -> Result<(ParamRegistry, Self)> {
        let mut reg = ParamRegistry::new();
        let model = Self::new(&mut reg, cfg, flags)?;
        Ok((reg, model))
    }

    /// Whether the model consumes class text embeddings.
    pub fn uses_text(&self) -> bool {
        self.flags.enable_text
    }

    fn check_text(&self, e_t: Option<&Tensor>) -> Result<()> {
        match (self.uses_text(), e_t) {
            (true, None) => Err(Error::InvalidArgument("this model needs class text embeddings".into())),
            (true, Some(e)) if e.ndim() != 2 || e.last_dim() != self.config.d_t => Err(Error::InvalidArgument(format!(
                "class embeddings have dim {} but the model expects d_t = {}",
                e.last_dim(),
                self.config.d_t
            ))),
            (true, Some(e)) if e.rows() == 0 => Err(Error::InvalidArgument("at least one class is required".into())),
            _ => Ok(()),
        }
    }

    /// Full forward pass on tape values `rgb: [H×W×3]`, `th: [H×W×1]`.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        rgb: Var,
        th: Var,
        points: &PointPrompt,
        e_t: Option<&Tensor>,
    ) -> Result<ModelOutputs> {
        self.check_text(e_t)?;
        let (h, w) = {
            let s = g.shape(rgb);
            if s.len() != 3 {
                return Err(Error::shape("Segmenter::forward", s, &[0, 0, 3]));
            }
            (s[0], s[1])
        };
        let e_en = self.encoder.forward(g, rgb, th)?;
        let pe = self.prompt.dense_pe(g, e_en.h, e_en.w)?;
        let pe = g.constant(pe);
        let dense = g.param(self.prompt.no_mask);
        let sparse = self.prompt.encode_points(g, points, h, w)?;
        let prompts = PromptInputs { dense, pe, sparse };
        let decoder = self.decoder.forward(g, e_en, &prompts, e_t, h, w)?;
        Ok(ModelOutputs { e_en, decoder })
    }

    /// Forward pass on plain tensors.
    pub fn forward_tensors(
        &self,
        g: &mut Graph<'_>,
        rgb: &Tensor,
        th: &Tensor,
        points: &PointPrompt,
        e_t: Option<&Tensor>,
    ) -> Result<ModelOutputs> {
        let rv = g.constant(rgb.clone());
        let tv = g.constant(th.clone());
        self.forward(g, rv, tv, points, e_t)
    }

    /// Logits `[H × W × C]` and the per-pixel argmax.
    pub fn predict(
        &self,
        params: &ParamRegistry,
        rgb: &Tensor,
        th: &Tensor,
        points: &PointPrompt,
        e_t: Option<&Tensor>,
    ) -> Result<(Tensor, LabelMap)> {
        let mut g = Graph::new(params);
        let out = self.forward_tensors(&mut g, rgb, th, points, e_t)?;
        let logits = g.value(out.logits()).clone();
        let (h, w) = (logits.shape()[0], logits.shape()[1]);
        let labels = logits.argmax_last().into_iter().map(|c| c as u8).collect();
        Ok((logits, LabelMap::new(h, w, labels)?))
    }
}

//! Run configuration: model dimensions, training hyper-parameters and the
//! ablation switches. Serialized as JSON; every field has a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::LoraConfig;
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    pub patch: usize,
    /// Token width `d` shared by encoder and decoder.
    pub dim: usize,
    pub heads: usize,
    /// Number of (fusion block, transformer block) pairs.
    pub depth: usize,
    pub mlp_ratio: usize,
    pub lora_rank: usize,
    /// LoRA scale numerator; the adapter update is scaled by `lora_alpha / lora_rank`.
    pub lora_alpha: Scalar,
    pub decoder_layers: usize,
    pub mask_tokens: usize,
    /// Query/key width of the text cross-attention.
    pub d_k: usize,
    /// Value width of the text cross-attention.
    pub d_v: usize,
    /// Text embedding width.
    pub d_t: usize,
    pub se_reduction: usize,
    pub num_classes: usize,
    /// Seed for every initial parameter value (frozen surrogate backbone included).
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch: 8,
            dim: 64,
            heads: 4,
            depth: 4,
            mlp_ratio: 4,
            lora_rank: 4,
            lora_alpha: 4.0,
            decoder_layers: 2,
            mask_tokens: 4,
            d_k: 32,
            d_v: 16,
            d_t: 32,
            se_reduction: 4,
            num_classes: 4,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    /// Channel width of the per-pixel mask embeddings after upscaling.
    pub fn d_mask(&self) -> usize {
        self.dim / 4
    }

    pub fn lora(&self) -> LoraConfig {
        LoraConfig::new(self.lora_rank, self.lora_alpha)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch", self.patch),
            ("dim", self.dim),
            ("heads", self.heads),
            ("depth", self.depth),
            ("mlp_ratio", self.mlp_ratio),
            ("lora_rank", self.lora_rank),
            ("decoder_layers", self.decoder_layers),
            ("mask_tokens", self.mask_tokens),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("d_t", self.d_t),
            ("se_reduction", self.se_reduction),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} is not divisible by heads {}", self.dim, self.heads)));
        }
        if self.dim % self.se_reduction != 0 {
            return Err(Error::Config(format!(
                "dim {} is not divisible by se_reduction {}",
                self.dim, self.se_reduction
            )));
        }
        if self.dim % 4 != 0 {
            return Err(Error::Config(format!("dim {} must be divisible by 4 for mask upscaling", self.dim)));
        }
        if !(self.lora_alpha > 0.0) {
            return Err(Error::Config("lora_alpha must be > 0".into()));
        }
        self.lora().validate(self.dim, self.dim)?;
        if self.num_classes > 255 {
            return Err(Error::Config("at most 255 classes are supported".into()));
        }
        Ok(())
    }
}

/// Component switches matching the rows of the ablation table. The
/// encoder LoRA is always on; with `enable_dffm = false` the RGB and
/// thermal patch tokens are concatenated into one sequence instead.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub enable_dffm: bool,
    pub enable_decoder_lora: bool,
    pub enable_text: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            enable_dffm: true,
            enable_decoder_lora: true,
            enable_text: true,
        }
    }
}

impl AblationFlags {
    pub const ALL_OFF: AblationFlags = AblationFlags {
        enable_dffm: false,
        enable_decoder_lora: false,
        enable_text: false,
    };

    /// The seven ablation rows, in table order (row 7 is the full model).
    pub fn table_rows() -> [AblationFlags; 7] {
        let f = |enable_dffm, enable_decoder_lora, enable_text| AblationFlags {
            enable_dffm,
            enable_decoder_lora,
            enable_text,
        };
        [
            f(false, false, false),
            f(false, true, false),
            f(false, true, true),
            f(true, false, false),
            f(true, false, true),
            f(true, true, false),
            f(true, true, true),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: Scalar,
    pub weight_decay: Scalar,
    pub beta1: Scalar,
    pub beta2: Scalar,
    pub adam_eps: Scalar,
    pub lambda_dice: Scalar,
    pub dice_smooth: Scalar,
    pub ignore_label: u8,
    pub steps: usize,
    pub batch: usize,
    /// Seed for shuffling and prompt sampling.
    pub seed: u64,
    pub lr_schedule: LrSchedule,
    /// Foreground point prompts sampled per training image (0 = none).
    pub point_prompts: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lambda_dice: 1.0,
            dice_smooth: 1.0,
            ignore_label: 255,
            steps: 200,
            batch: 4,
            seed: 0,
            lr_schedule: LrSchedule::Constant,
            point_prompts: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be > 0".into()));
        }
        if !(self.lambda_dice >= 0.0) {
            return Err(Error::Config("lambda_dice must be >= 0".into()));
        }
        if !(self.dice_smooth > 0.0) {
            return Err(Error::Config("dice_smooth must be > 0".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Text-embedding file; when absent the deterministic toy encoder is used.
    pub classes: Option<PathBuf>,
    /// Seed of the toy text encoder.
    pub text_seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: AblationFlags,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

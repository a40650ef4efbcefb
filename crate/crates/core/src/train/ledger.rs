//! Trainable-parameter accounting grouped by model component.

use serde::Serialize;

use crate::nn::ParamRegistry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    ThermalPatchEmbed,
    Dffm,
    EncoderLora,
    DecoderLora,
    DecoderHeads,
    TextAttention,
    PromptEmbeddings,
    /// Trainable entries matching no known component.
    Other,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::ThermalPatchEmbed,
        ParamGroup::Dffm,
        ParamGroup::EncoderLora,
        ParamGroup::DecoderLora,
        ParamGroup::DecoderHeads,
        ParamGroup::TextAttention,
        ParamGroup::PromptEmbeddings,
        ParamGroup::Other,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ParamGroup::ThermalPatchEmbed => "thermal-patch-embed",
            ParamGroup::Dffm => "dffm-blocks",
            ParamGroup::EncoderLora => "encoder-lora",
            ParamGroup::DecoderLora => "decoder-lora",
            ParamGroup::DecoderHeads => "decoder-heads",
            ParamGroup::TextAttention => "text-attention",
            ParamGroup::PromptEmbeddings => "prompt-embeddings",
            ParamGroup::Other => "other",
        }
    }

    /// Group of a parameter by its registry name.
    pub fn of(name: &str) -> ParamGroup {
        let lora = name.contains(".lora_a") || name.contains(".lora_b");
        if name.starts_with("encoder.thermal_embed.") {
            ParamGroup::ThermalPatchEmbed
        } else if name.starts_with("encoder.dffm.") {
            ParamGroup::Dffm
        } else if lora && name.starts_with("encoder.") {
            ParamGroup::EncoderLora
        } else if lora && name.starts_with("decoder.") {
            ParamGroup::DecoderLora
        } else if name.starts_with("decoder.upscale.") || name.starts_with("decoder.head.") {
            ParamGroup::DecoderHeads
        } else if name.starts_with("decoder.text.") {
            ParamGroup::TextAttention
        } else if matches!(
            name,
            "decoder.iou_token" | "decoder.mask_tokens" | "prompt.label_embed" | "prompt.no_mask_embed"
        ) {
            ParamGroup::PromptEmbeddings
        } else {
            ParamGroup::Other
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LedgerRow {
    pub group: ParamGroup,
    pub tensors: usize,
    pub trainable: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LedgerReport {
    /// One row per group in [`ParamGroup::ALL`] order, zero rows included.
    pub groups: Vec<LedgerRow>,
    pub trainable_total: usize,
    pub frozen_total: usize,
}

impl LedgerReport {
    pub fn trainable(&self, group: ParamGroup) -> usize {
        self.groups.iter().find(|r| r.group == group).map_or(0, |r| r.trainable)
    }

    pub fn format_table(&self) -> String {
        let mut out = format!("{:<20} {:>8} {:>12}\n", "group", "tensors", "trainable");
        for r in &self.groups {
            out += &format!("{:<20} {:>8} {:>12}\n", r.group.label(), r.tensors, r.trainable);
        }
        out += &format!("{:<20} {:>8} {:>12}\n", "trainable total", "", self.trainable_total);
        out += &format!("{:<20} {:>8} {:>12}\n", "frozen total", "", self.frozen_total);
        out
    }
}

/// Counts trainable scalars per group. Frozen parameters only enter
/// `frozen_total`.
pub fn param_ledger(params: &ParamRegistry) -> LedgerReport {
    let mut groups: Vec<LedgerRow> = ParamGroup::ALL
        .iter()
        .map(|&group| LedgerRow {
            group,
            tensors: 0,
            trainable: 0,
        })
        .collect();
    for (_, p) in params.iter().filter(|(_, p)| !p.frozen) {
        let g = ParamGroup::of(&p.name);
        let row = groups.iter_mut().find(|r| r.group == g).expect("every group has a row");
        row.tensors += 1;
        row.trainable += p.value.len();
    }
    LedgerReport {
        trainable_total: groups.iter().map(|r| r.trainable).sum(),
        frozen_total: params.frozen_count(),
        groups,
    }
}

//! Trainable-parameter ledger for the seven ablation rows of the toy model.

use rgbtseg::config::{AblationFlags, ModelConfig};
use rgbtseg::model::Segmenter;
use rgbtseg::train::{param_ledger, ParamGroup};

fn main() -> rgbtseg::Result<()> {
    let cfg = ModelConfig::default();
    let on = |b: bool| if b { "x" } else { "." };
    println!("row  dffm dec-lora text  {:>10} {:>10} {:>10}", "trainable", "text", "frozen");
    for (i, flags) in AblationFlags::table_rows().iter().enumerate() {
        let (params, _) = Segmenter::build(&cfg, flags)?;
        let l = param_ledger(&params);
        println!(
            "{:>3}  {:>4} {:>8} {:>4}  {:>10} {:>10} {:>10}",
            i + 1,
            on(flags.enable_dffm),
            on(flags.enable_decoder_lora),
            on(flags.enable_text),
            l.trainable_total,
            l.trainable(ParamGroup::TextAttention),
            l.frozen_total
        );
    }
    let (params, _) = Segmenter::build(&cfg, &AblationFlags::default())?;
    print!("\nfull model\n{}", param_ledger(&params).format_table());
    Ok(())
}

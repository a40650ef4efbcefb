//! Trains every ablation row on the synthetic benchmark and prints test
//! thermal-only IoU and mIoU per row.
//!
//! `cargo run --release --example ablation_sweep -- [steps]` (default 200;
//! about 40 s per row at the default).

use rgbtseg::cli::run_vocabulary;
use rgbtseg::config::{AblationFlags, RunConfig};
use rgbtseg::data::{gen_synthetic, MiouPolicy, SyntheticConfig, CLASS_NAMES};
use rgbtseg::model::Segmenter;
use rgbtseg::train::{evaluate, train};

fn main() -> rgbtseg::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let data = gen_synthetic(&SyntheticConfig {
        n: 96,
        n_test: 32,
        ..Default::default()
    })?;
    let (train_set, test_set): (Vec<_>, Vec<_>) = data.into_iter().partition(|s| s.has_tag("train"));
    let names: Vec<String> = CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    println!("row  dffm dec-lora text  thermal_only   mIoU");
    for (i, flags) in AblationFlags::table_rows().into_iter().enumerate() {
        let mut cfg = RunConfig {
            ablation: flags,
            ..Default::default()
        };
        cfg.train.steps = steps;
        let vocab = run_vocabulary(&cfg, &names)?;
        let (mut params, model) = Segmenter::build(&cfg.model, &flags)?;
        let e_t = model.uses_text().then(|| vocab.embeddings());
        train(&model, &mut params, &train_set, e_t, &cfg.train)?;
        let rows = evaluate(&model, &params, &test_set, e_t, &[], 255, MiouPolicy::AllClasses)?;
        let r = rows.last().expect("overall row");
        let on = |b: bool| if b { "x" } else { "." };
        println!(
            "{:>3}  {:>4} {:>8} {:>4}  {:>12.4} {:>6.4}",
            i + 1,
            on(flags.enable_dffm),
            on(flags.enable_decoder_lora),
            on(flags.enable_text),
            r.per_class[2].unwrap_or(0.0),
            r.miou
        );
    }
    Ok(())
}

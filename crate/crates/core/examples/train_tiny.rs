//! Trains a small segmenter for a few dozen steps and prints the loss curve.
//!
//! `cargo run --release --example train_tiny -- [steps]`

use rgbtseg::config::{AblationFlags, ModelConfig, TrainConfig};
use rgbtseg::data::{gen_synthetic, SyntheticConfig, CLASS_NAMES};
use rgbtseg::model::Segmenter;
use rgbtseg::prompt::ClassVocabulary;
use rgbtseg::train::{param_ledger, train_with};

fn main() -> rgbtseg::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let cfg = ModelConfig {
        image_size: 32,
        patch: 4,
        dim: 32,
        depth: 2,
        ..Default::default()
    };
    let data = gen_synthetic(&SyntheticConfig {
        n: 16,
        size: 32,
        patch: 4,
        ..Default::default()
    })?;
    let vocab = ClassVocabulary::toy(&CLASS_NAMES, cfg.d_t, 0)?;
    let (mut params, model) = Segmenter::build(&cfg, &AblationFlags::default())?;
    println!("{}", param_ledger(&params).format_table());

    let tc = TrainConfig {
        steps,
        lr: 3e-3,
        ..Default::default()
    };
    train_with(&model, &mut params, &data, Some(vocab.embeddings()), &tc, |r| {
        if r.step % 5 == 0 || r.step == 1 {
            println!("step {:>4}  loss {:.4}  batch mIoU {:.3}", r.step, r.loss, r.miou);
        }
    })?;
    Ok(())
}

//! Trains briefly, then reports per-class IoU and mIoU on the held-out test
//! scenes, split into day and night rows.

use rgbtseg::config::{AblationFlags, ModelConfig, TrainConfig};
use rgbtseg::data::metrics::format_table;
use rgbtseg::data::{gen_synthetic, MiouPolicy, SyntheticConfig, CLASS_NAMES};
use rgbtseg::model::Segmenter;
use rgbtseg::prompt::ClassVocabulary;
use rgbtseg::train::{evaluate, train};

fn main() -> rgbtseg::Result<()> {
    let cfg = ModelConfig {
        image_size: 32,
        patch: 4,
        dim: 32,
        depth: 2,
        ..Default::default()
    };
    let data = gen_synthetic(&SyntheticConfig {
        n: 24,
        n_test: 8,
        size: 32,
        patch: 4,
        ..Default::default()
    })?;
    let (train_set, test_set): (Vec<_>, Vec<_>) = data.into_iter().partition(|s| s.has_tag("train"));
    let vocab = ClassVocabulary::toy(&CLASS_NAMES, cfg.d_t, 0)?;
    let (mut params, model) = Segmenter::build(&cfg, &AblationFlags::default())?;
    let tc = TrainConfig {
        steps: 60,
        lr: 3e-3,
        ..Default::default()
    };
    train(&model, &mut params, &train_set, Some(vocab.embeddings()), &tc)?;

    for policy in [MiouPolicy::AllClasses, MiouPolicy::ExcludeBackground] {
        let rows = evaluate(&model, &params, &test_set, Some(vocab.embeddings()), &["day", "night"], 255, policy)?;
        println!("{policy:?}");
        print!("{}", format_table(vocab.names(), &rows));
    }
    Ok(())
}

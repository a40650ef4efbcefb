//! Inference with and without point prompts on one scene; writes the class
//! mask as a graymap when an output path is given.
//!
//! `cargo run --example point_prompts -- [mask.pgm]`

use rgbtseg::config::{AblationFlags, ModelConfig};
use rgbtseg::data::pnm::{write_image, Image};
use rgbtseg::data::{gen_synthetic, SyntheticConfig, CLASS_NAMES};
use rgbtseg::model::Segmenter;
use rgbtseg::prompt::{ClassVocabulary, Point, PointLabel, PointPrompt};

fn main() -> rgbtseg::Result<()> {
    let cfg = ModelConfig {
        image_size: 32,
        patch: 4,
        dim: 32,
        depth: 2,
        ..Default::default()
    };
    let scene = gen_synthetic(&SyntheticConfig {
        n: 1,
        size: 32,
        patch: 4,
        ..Default::default()
    })?
    .remove(0);
    let vocab = ClassVocabulary::toy(&CLASS_NAMES, cfg.d_t, 0)?;
    let (params, model) = Segmenter::build(&cfg, &AblationFlags::default())?;

    let prompts = [
        PointPrompt::default(),
        PointPrompt::new(vec![
            Point { x: 8.0, y: 8.0, label: PointLabel::Foreground },
            Point { x: 24.0, y: 20.0, label: PointLabel::Background },
        ]),
    ];
    let mut last = None;
    for p in &prompts {
        let (logits, mask) = model.predict(&params, &scene.rgb, &scene.thermal, p, Some(vocab.embeddings()))?;
        let mut hist = vec![0usize; vocab.len()];
        for &l in &mask.data {
            hist[l as usize] += 1;
        }
        println!("{} point(s): logits {:?}, class histogram {hist:?}", p.len(), logits.shape());
        last = Some(mask);
    }
    if let (Some(path), Some(mask)) = (std::env::args().nth(1), last) {
        write_image(path.as_ref(), &Image::new(mask.width, mask.height, 1, mask.data)?)?;
        println!("wrote {path}");
    }
    Ok(())
}

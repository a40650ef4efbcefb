//! Open-vocabulary scoring: the text head scores any class list, and
//! reordering the list reorders the logit channels bit for bit.

use rgbtseg::config::{AblationFlags, ModelConfig};
use rgbtseg::data::{gen_synthetic, SyntheticConfig};
use rgbtseg::model::Segmenter;
use rgbtseg::prompt::{ClassVocabulary, PointPrompt};

fn main() -> rgbtseg::Result<()> {
    let cfg = ModelConfig {
        image_size: 32,
        patch: 4,
        dim: 32,
        depth: 2,
        ..Default::default()
    };
    let s = gen_synthetic(&SyntheticConfig {
        n: 1,
        size: 32,
        patch: 4,
        ..Default::default()
    })?
    .remove(0);
    let (params, model) = Segmenter::build(&cfg, &AblationFlags::default())?;

    let names = ["road", "person", "car", "bike", "sky", "tree"];
    let vocab = ClassVocabulary::toy(&names, cfg.d_t, 0)?;
    println!("{} classes, embedding dim {}", vocab.len(), vocab.dim());

    let perm = [5, 2, 0, 4, 1, 3];
    let shuffled = vocab.permuted(&perm)?;
    let none = PointPrompt::default();
    let (a, _) = model.predict(&params, &s.rgb, &s.thermal, &none, Some(vocab.embeddings()))?;
    let (b, _) = model.predict(&params, &s.rgb, &s.thermal, &none, Some(shuffled.embeddings()))?;
    let c = vocab.len();
    let same = a
        .data()
        .chunks(c)
        .zip(b.data().chunks(c))
        .all(|(ra, rb)| perm.iter().enumerate().all(|(i, &p)| rb[i].to_bits() == ra[p].to_bits()));
    println!("logits {:?}; permuted vocabulary permutes channels bitwise: {same}", a.shape());

    // The same weights score a different, smaller vocabulary.
    let small = ClassVocabulary::toy(&["background", "warm object"], cfg.d_t, 0)?;
    let (l, _) = model.predict(&params, &s.rgb, &s.thermal, &none, Some(small.embeddings()))?;
    println!("two-class vocabulary gives logits {:?}", l.shape());
    Ok(())
}

//! Training loop and split-wise evaluation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::loss::{total_loss, LossConfig};
use super::optim::{lr_at, AdamW};
use crate::config::TrainConfig;
use crate::data::{ConfusionMatrix, LabelMap, MiouPolicy, RgbtSample, SplitReport};
use crate::error::{Error, Result};
use crate::model::Segmenter;
use crate::nn::{stream_seed, Grads, Graph, ParamRegistry};
use crate::prompt::{Point, PointLabel, PointPrompt};
use crate::tensor::{Scalar, Tensor};

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    /// 1-based step index.
    pub step: usize,
    /// Mean total loss over the batch.
    pub loss: Scalar,
    /// mIoU of the batch predictions made during the step's forward pass.
    pub miou: f64,
}

/// Endless stream of sample indices: a fresh seeded permutation per epoch.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        Sampler {
            rng: ChaCha8Rng::seed_from_u64(stream_seed(seed, "shuffle")),
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// `n` points at uniformly drawn pixel centres, labelled foreground where the
/// ground truth is not class 0 and not ignored.
pub fn sample_points(labels: &LabelMap, n: usize, ignore: u8, rng: &mut impl Rng) -> PointPrompt {
    let points = (0..n)
        .map(|_| {
            let y = rng.random_range(0..labels.height);
            let x = rng.random_range(0..labels.width);
            let l = labels.get(y, x);
            Point {
                x: x as Scalar,
                y: y as Scalar,
                label: if l != 0 && l != ignore { PointLabel::Foreground } else { PointLabel::Background },
            }
        })
        .collect();
    PointPrompt::new(points)
}

fn num_classes(model: &Segmenter, e_t: Option<&Tensor>) -> usize {
    match e_t {
        Some(e) if model.uses_text() => e.rows(),
        _ => model.config.num_classes,
    }
}

fn labels_of(logits: &Tensor) -> Result<LabelMap> {
    let (h, w) = (logits.shape()[0], logits.shape()[1]);
    LabelMap::new(h, w, logits.argmax_last().into_iter().map(|c| c as u8).collect())
}

/// Runs `cfg.steps` AdamW steps on `samples` and returns one record per step.
///
/// Each step draws `cfg.batch` samples from a seeded per-epoch shuffle,
/// averages their gradients and applies one update. A non-finite value
/// anywhere in a step aborts with [`Error::Diverged`].
pub fn train(
    model: &Segmenter,
    params: &mut ParamRegistry,
    samples: &[RgbtSample],
    e_t: Option<&Tensor>,
    cfg: &TrainConfig,
) -> Result<Vec<StepRecord>> {
    train_with(model, params, samples, e_t, cfg, |_| {})
}

/// [`train`] with a callback invoked after every step.
pub fn train_with(
    model: &Segmenter,
    params: &mut ParamRegistry,
    samples: &[RgbtSample],
    e_t: Option<&Tensor>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if cfg.steps > 0 && samples.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one sample".into()));
    }
    let c = num_classes(model, e_t);
    for (i, s) in samples.iter().enumerate() {
        s.labels
            .validate(c, cfg.ignore_label)
            .map_err(|e| Error::InvalidArgument(format!("sample {i}: {e}")))?;
    }
    let loss_cfg = LossConfig::from(cfg);
    let mut opt = AdamW::new(params, cfg.into());
    let mut sampler = Sampler::new(samples.len(), cfg.seed);
    let mut point_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, "points"));
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let diverged = |e: Error| match e {
            Error::NonFinite { op } => Error::Diverged {
                step: step + 1,
                detail: format!("non-finite value in `{op}`"),
            },
            e => e,
        };
        let mut grads = Grads::zeros_like(params);
        let mut loss_sum = 0.0;
        let mut cm = ConfusionMatrix::new(c);
        for _ in 0..cfg.batch {
            let s = &samples[sampler.next()];
            let points = sample_points(&s.labels, cfg.point_prompts, cfg.ignore_label, &mut point_rng);
            let mut g = Graph::new(params);
            let out = model.forward_tensors(&mut g, &s.rgb, &s.thermal, &points, e_t).map_err(diverged)?;
            let loss = total_loss(&mut g, out.logits(), &s.labels.data, &loss_cfg).map_err(diverged)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    step: step + 1,
                    detail: format!("loss is {lv}"),
                });
            }
            loss_sum += lv;
            cm.add(&labels_of(g.value(out.logits()))?, &s.labels, cfg.ignore_label)?;
            grads.accumulate(&g.gradients(loss).map_err(diverged)?)?;
        }
        grads.scale(1.0 / cfg.batch as Scalar);
        let lr = lr_at(cfg.lr_schedule, cfg.lr, step, cfg.steps);
        opt.step(params, &grads, lr)?;
        if let Some((_, p)) = params.iter().find(|(_, p)| !p.value.all_finite()) {
            return Err(Error::Diverged {
                step: step + 1,
                detail: format!("parameter `{}` became non-finite", p.name),
            });
        }
        let rec = StepRecord {
            step: step + 1,
            loss: loss_sum / cfg.batch as Scalar,
            miou: SplitReport::from_confusion("batch", cfg.batch, &cm, MiouPolicy::AllClasses)
                .map(|r| r.miou)
                .unwrap_or(0.0),
        };
        log::debug!("step {} loss {:.6} miou {:.4}", rec.step, rec.loss, rec.miou);
        on_step(&rec);
        history.push(rec);
    }
    Ok(history)
}

/// Per-sample predictions, computed once and shared across split rows.
pub fn predict_all(
    model: &Segmenter,
    params: &ParamRegistry,
    samples: &[RgbtSample],
    e_t: Option<&Tensor>,
) -> Result<Vec<LabelMap>> {
    samples
        .iter()
        .map(|s| Ok(model.predict(params, &s.rgb, &s.thermal, &PointPrompt::default(), e_t)?.1))
        .collect()
}

/// One row per tag in `row_tags` that occurs in `samples`, then an
/// `overall` row over every sample.
pub fn evaluate(
    model: &Segmenter,
    params: &ParamRegistry,
    samples: &[RgbtSample],
    e_t: Option<&Tensor>,
    row_tags: &[&str],
    ignore: u8,
    policy: MiouPolicy,
) -> Result<Vec<SplitReport>> {
    let preds = predict_all(model, params, samples, e_t)?;
    let c = num_classes(model, e_t);
    let mut rows = Vec::new();
    let report = |name: &str, keep: &dyn Fn(&RgbtSample) -> bool| -> Result<Option<SplitReport>> {
        let mut cm = ConfusionMatrix::new(c);
        let mut n = 0;
        for (s, p) in samples.iter().zip(&preds) {
            if keep(s) {
                cm.add(p, &s.labels, ignore)?;
                n += 1;
            }
        }
        if n == 0 {
            return Ok(None);
        }
        SplitReport::from_confusion(name, n, &cm, policy).map(Some)
    };
    for tag in row_tags {
        if let Some(r) = report(tag, &|s| s.has_tag(tag))? {
            rows.push(r);
        }
    }
    if let Some(r) = report("overall", &|_| true)? {
        rows.push(r);
    }
    Ok(rows)
}

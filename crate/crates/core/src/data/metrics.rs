//! Per-class IoU and mIoU from label maps.

use serde::{Deserialize, Serialize};

use super::LabelMap;
use crate::error::{Error, Result};

/// Pixel counts indexed `[gt][pred]`, ignored pixels excluded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    /// Adds one prediction/ground-truth pair. Pixels whose ground truth is
    /// `ignore` are skipped.
    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap, ignore: u8) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::shape("iou", &[pred.height, pred.width], &[gt.height, gt.width]));
        }
        let c = self.num_classes;
        for (i, (&p, &g)) in pred.data.iter().zip(&gt.data).enumerate() {
            if g == ignore {
                continue;
            }
            if g as usize >= c || p as usize >= c {
                return Err(Error::InvalidArgument(format!(
                    "pixel {i}: label (gt {g}, pred {p}) outside [0, {c})"
                )));
            }
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    /// `TP/(TP+FP+FN)` per class; `None` when the class has zero union.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.count(k, k);
                let fn_: u64 = (0..c).map(|p| self.count(k, p)).sum::<u64>() - tp;
                let fp: u64 = (0..c).map(|g| self.count(g, k)).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }
}

pub fn iou_per_class(pred: &LabelMap, gt: &LabelMap, num_classes: usize, ignore: u8) -> Result<Vec<Option<f64>>> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add(pred, gt, ignore)?;
    Ok(cm.iou())
}

/// Which classes enter the mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiouPolicy {
    /// Every present class, background (class 0) included.
    #[default]
    AllClasses,
    ExcludeBackground,
}

/// Mean IoU over present classes (absent classes are skipped, not scored 0).
pub fn miou(per_class: &[Option<f64>], policy: MiouPolicy) -> Result<f64> {
    let skip = match policy {
        MiouPolicy::AllClasses => 0,
        MiouPolicy::ExcludeBackground => 1,
    };
    let present: Vec<f64> = per_class.iter().skip(skip).flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::InvalidArgument("mIoU undefined: no class is present".into()));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// One row of an evaluation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split: String,
    pub samples: usize,
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

impl SplitReport {
    pub fn from_confusion(split: &str, samples: usize, cm: &ConfusionMatrix, policy: MiouPolicy) -> Result<Self> {
        let per_class = cm.iou();
        let miou = miou(&per_class, policy)?;
        Ok(SplitReport {
            split: split.to_string(),
            samples,
            per_class,
            miou,
        })
    }
}

/// Aligned text table: one row per split, one column per class, then mIoU.
pub fn format_table(class_names: &[String], rows: &[SplitReport]) -> String {
    let width = class_names.iter().map(|n| n.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<10}", "split");
    for n in class_names {
        out += &format!(" {n:>width$}");
    }
    out += &format!(" {:>width$}\n", "mIoU");
    for r in rows {
        out += &format!("{:<10}", r.split);
        for v in &r.per_class {
            match v {
                Some(x) => out += &format!(" {:>width$.4}", x),
                None => out += &format!(" {:>width$}", "-"),
            }
        }
        out += &format!(" {:>width$.4}\n", r.miou);
    }
    out
}

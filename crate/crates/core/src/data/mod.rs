//! Samples, the synthetic benchmark, on-disk formats and segmentation metrics.

pub mod manifest;
pub mod metrics;
pub mod pnm;
pub mod synthetic;

pub use manifest::{load_dataset, DatasetManifest, ManifestSample};
pub use metrics::{iou_per_class, miou, ConfusionMatrix, MiouPolicy, SplitReport};
pub use synthetic::{gen_synthetic, SyntheticConfig, CLASS_NAMES};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Integer class map, row-major `[H × W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("LabelMap::new", &[height, width], &[data.len()]));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Checks every id is `< num_classes` or equal to `ignore`.
    pub fn validate(&self, num_classes: usize, ignore: u8) -> Result<()> {
        match self.data.iter().position(|&v| v as usize >= num_classes && v != ignore) {
            Some(i) => Err(Error::InvalidArgument(format!(
                "label {} at pixel {i} is outside [0, {num_classes}) and is not the ignore label {ignore}",
                self.data[i]
            ))),
            None => Ok(()),
        }
    }
}

/// A pixel-aligned RGB/thermal pair with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbtSample {
    /// `[H × W × 3]` in `[0, 1]`.
    pub rgb: Tensor,
    /// `[H × W × 1]` in `[0, 1]`.
    pub thermal: Tensor,
    pub labels: LabelMap,
    /// Free-form tags such as `train`/`test` and `day`/`night`.
    pub tags: Vec<String>,
}

impl RgbtSample {
    pub fn new(rgb: Tensor, thermal: Tensor, labels: LabelMap, tags: Vec<String>) -> Result<Self> {
        let (h, w) = (labels.height, labels.width);
        if rgb.shape() != [h, w, 3] {
            return Err(Error::shape("RgbtSample (rgb vs labels)", rgb.shape(), &[h, w, 3]));
        }
        if thermal.shape() != [h, w, 1] {
            return Err(Error::shape("RgbtSample (thermal vs labels)", thermal.shape(), &[h, w, 1]));
        }
        Ok(RgbtSample {
            rgb,
            thermal,
            labels,
            tags,
        })
    }

    pub fn height(&self) -> usize {
        self.labels.height
    }

    pub fn width(&self) -> usize {
        self.labels.width
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.tags.iter().any(|t| t == tag)
    }
}

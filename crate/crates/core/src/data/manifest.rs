//! Dataset manifest: a JSON document listing class names and per-sample file
//! triples. Paths are relative to the manifest's directory.
//!
//! ```json
//! { "classes": ["background", "car"],
//!   "samples": [ { "rgb": "rgb/0000.ppm", "thermal": "thermal/0000.pgm",
//!                  "labels": "labels/0000.pgm", "tags": ["train", "day"] } ] }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pnm::{read_image, write_image, Image};
use super::{LabelMap, RgbtSample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSample {
    pub rgb: PathBuf,
    pub thermal: PathBuf,
    pub labels: PathBuf,
    #[serde(default)]
    pub tags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub samples: Vec<ManifestSample>,
    /// Directory the sample paths are relative to; set on load.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    /// Parses the manifest and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if m.classes.is_empty() {
            return Err(Error::Format(format!("{}: manifest lists no classes", path.display())));
        }
        for s in &m.samples {
            for f in [&s.rgb, &s.thermal, &s.labels] {
                let full = m.root.join(f);
                if !full.is_file() {
                    return Err(Error::Format(format!(
                        "{}: referenced file {} does not exist",
                        path.display(),
                        full.display()
                    )));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Whether any sample carries at least one tag.
    pub fn has_tags(&self) -> bool {
        self.samples.iter().any(|s| !s.tags.is_empty())
    }

    pub fn read_sample(&self, s: &ManifestSample) -> Result<RgbtSample> {
        let rgb = read_image(&self.root.join(&s.rgb))?;
        let th = read_image(&self.root.join(&s.thermal))?;
        let lab = read_image(&self.root.join(&s.labels))?;
        for (img, want, f) in [(&rgb, 3, &s.rgb), (&th, 1, &s.thermal), (&lab, 1, &s.labels)] {
            if img.channels != want {
                return Err(Error::Format(format!(
                    "{}: expected {want} channel(s), found {}",
                    f.display(),
                    img.channels
                )));
            }
        }
        let labels = LabelMap::new(lab.height, lab.width, lab.data)?;
        RgbtSample::new(rgb.to_tensor(), th.to_tensor(), labels, s.tags.clone())
    }
}

/// Loads the manifest and every sample it lists.
pub fn load_dataset(path: &Path) -> Result<(DatasetManifest, Vec<RgbtSample>)> {
    let m = DatasetManifest::load(path)?;
    let samples = m.samples.iter().map(|s| m.read_sample(s)).collect::<Result<_>>()?;
    Ok((m, samples))
}

/// Writes `samples` as `rgb/NNNN.ppm`, `thermal/NNNN.pgm`, `labels/NNNN.pgm`
/// under `dir` plus `dir/manifest.json`; returns the manifest path.
pub fn write_dataset(dir: &Path, classes: &[String], samples: &[RgbtSample]) -> Result<PathBuf> {
    for sub in ["rgb", "thermal", "labels"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let e = ManifestSample {
            rgb: PathBuf::from(format!("rgb/{i:04}.ppm")),
            thermal: PathBuf::from(format!("thermal/{i:04}.pgm")),
            labels: PathBuf::from(format!("labels/{i:04}.pgm")),
            tags: s.tags.clone(),
        };
        write_image(&dir.join(&e.rgb), &Image::from_tensor(&s.rgb)?)?;
        write_image(&dir.join(&e.thermal), &Image::from_tensor(&s.thermal)?)?;
        let lab = Image::new(s.width(), s.height(), 1, s.labels.data.clone())?;
        write_image(&dir.join(&e.labels), &lab)?;
        entries.push(e);
    }
    let m = DatasetManifest {
        classes: classes.to_vec(),
        samples: entries,
        root: dir.to_path_buf(),
    };
    let path = dir.join("manifest.json");
    m.save(&path)?;
    Ok(path)
}

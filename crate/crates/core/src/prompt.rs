//! Non-image decoder inputs: class text embeddings, point prompts and the
//! positional encoding shared by points and the image grid.
//!
//! Text-embedding file format (JSON):
//!
//! ```json
//! { "dim": 4,
//!   "classes": [ { "name": "background", "embedding": [0.1, 0.2, 0.3, 0.4] },
//!                { "name": "person",     "embedding": [0.0, 1.0, 0.0, 0.0] } ] }
//! ```
//!
//! Every `embedding` must hold exactly `dim` numbers. Rows are L2-normalized
//! on load. The order of `classes` is the class-index order.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{stream_seed, Graph, Init, ParamBuilder, ParamId};
use crate::tensor::{consts, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassVocabulary {
    names: Vec<String>,
    /// `[C × d_t]`, unit-norm rows.
    embeddings: Tensor,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    dim: usize,
    classes: Vec<ClassEntry>,
}

#[derive(Serialize, Deserialize)]
struct ClassEntry {
    name: String,
    embedding: Vec<Scalar>,
}

fn normalized(v: &[Scalar]) -> Result<Vec<Scalar>> {
    let norm = v.iter().map(|x| x * x).sum::<Scalar>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Format("text embedding has zero or non-finite norm".into()));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

impl ClassVocabulary {
    /// Builds a vocabulary from `(name, embedding)` pairs, normalizing each row.
    pub fn new(entries: Vec<(String, Vec<Scalar>)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Format("class vocabulary needs at least one class".into()));
        }
        let dim = entries[0].1.len();
        if dim == 0 {
            return Err(Error::Format("text embeddings must have dim >= 1".into()));
        }
        let mut seen = HashSet::new();
        let mut names = Vec::with_capacity(entries.len());
        let mut data = Vec::with_capacity(entries.len() * dim);
        for (name, emb) in entries {
            if emb.len() != dim {
                return Err(Error::Format(format!(
                    "class {name:?} has embedding dim {} but expected {dim}",
                    emb.len()
                )));
            }
            if !seen.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate class name {name:?}")));
            }
            data.extend(normalized(&emb)?);
            names.push(name);
        }
        let embeddings = Tensor::new(&[names.len(), dim], data)?;
        Ok(ClassVocabulary { names, embeddings })
    }

    /// Vocabulary whose embeddings come from [`toy_text_embed`].
    pub fn toy<S: AsRef<str>>(names: &[S], dim: usize, seed: u64) -> Result<Self> {
        let entries = names
            .iter()
            .map(|n| Ok((n.as_ref().to_string(), toy_text_embed(n.as_ref(), dim, seed)?.into_data())))
            .collect::<Result<_>>()?;
        Self::new(entries)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if let Some(bad) = file.classes.iter().find(|c| c.embedding.len() != file.dim) {
            return Err(Error::Format(format!(
                "class {:?} has embedding dim {} but file declares dim {}",
                bad.name,
                bad.embedding.len(),
                file.dim
            )));
        }
        Self::new(file.classes.into_iter().map(|c| (c.name, c.embedding)).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            dim: self.dim(),
            classes: self
                .names
                .iter()
                .zip(self.embeddings.data().chunks(self.dim()))
                .map(|(name, e)| ClassEntry {
                    name: name.clone(),
                    embedding: e.to_vec(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("vocabulary serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.last_dim()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    /// Reorders classes so that new class `i` is old class `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let c = self.len();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if check != (0..c).collect::<Vec<_>>() {
            return Err(Error::InvalidArgument(format!("{perm:?} is not a permutation of 0..{c}")));
        }
        let d = self.dim();
        let mut data = Vec::with_capacity(c * d);
        for &p in perm {
            data.extend_from_slice(&self.embeddings.data()[p * d..(p + 1) * d]);
        }
        Ok(ClassVocabulary {
            names: perm.iter().map(|&p| self.names[p].clone()).collect(),
            embeddings: Tensor::new(&[c, d], data)?,
        })
    }
}

/// Deterministic stand-in for a text encoder: a unit-norm Gaussian vector
/// seeded by `(seed, name)`.
pub fn toy_text_embed(name: &str, dim: usize, seed: u64) -> Result<Tensor> {
    use rand::SeedableRng;
    if name.is_empty() {
        return Err(Error::InvalidArgument("class name must be non-empty".into()));
    }
    if dim == 0 {
        return Err(Error::InvalidArgument("text dim must be >= 1".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(stream_seed(seed, &format!("text:{name}")));
    let v = Tensor::randn(&[dim], 1.0, &mut rng);
    Tensor::new(&[dim], normalized(v.data())?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointLabel {
    Background = 0,
    Foreground = 1,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: Scalar,
    pub y: Scalar,
    pub label: PointLabel,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointPrompt {
    pub points: Vec<Point>,
}

impl PointPrompt {
    pub fn new(points: Vec<Point>) -> Self {
        PointPrompt { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            let inside = p.x >= 0.0 && p.y >= 0.0 && p.x < width as Scalar && p.y < height as Scalar;
            if !inside {
                return Err(Error::InvalidArgument(format!(
                    "point {i} at ({}, {}) is outside the {width}x{height} image",
                    p.x, p.y
                )));
            }
        }
        Ok(())
    }
}

/// Frozen random-Fourier positional encoding plus learned prompt embeddings.
#[derive(Clone, Debug)]
pub struct PromptEncoder {
    /// `[2 × d/2]` Gaussian frequency matrix, frozen.
    pub frequencies: ParamId,
    /// `[2 × d]`: row 0 background points, row 1 foreground points.
    pub label_embed: ParamId,
    /// `[d]` dense embedding used when no mask prompt is given.
    pub no_mask: ParamId,
    pub dim: usize,
}

impl PromptEncoder {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::Config(format!("prompt dim must be even and positive, got {dim}")));
        }
        Ok(PromptEncoder {
            frequencies: pb.add("prompt.pe_frequencies", &[2, dim / 2], Init::Normal(1.0), true)?,
            label_embed: pb.add("prompt.label_embed", &[2, dim], Init::Normal(0.02), false)?,
            no_mask: pb.add("prompt.no_mask_embed", &[dim], Init::Normal(0.02), false)?,
            dim,
        })
    }

    /// Encodes normalized coordinates `[n × 2]` (x, y in `[0, 1]`) as
    /// `[sin(2π·(2c−1)·G), cos(2π·(2c−1)·G)]`.
    pub fn encode_coords(&self, g: &Graph<'_>, coords: &Tensor) -> Result<Tensor> {
        let freq = &g.params().get(self.frequencies).value;
        let (n, two) = coords.dims2("encode_coords")?;
        if two != 2 {
            return Err(Error::shape("encode_coords", coords.shape(), freq.shape()));
        }
        let centered = coords.map(|c| 2.0 * c - 1.0);
        let proj = centered.matmul(freq)?.map(|v| v * 2.0 * consts::PI);
        let half = self.dim / 2;
        let mut out = Tensor::zeros(&[n, self.dim]);
        for i in 0..n {
            for j in 0..half {
                let v = proj.at(&[i, j]);
                out.set(&[i, j], v.sin());
                out.set(&[i, half + j], v.cos());
            }
        }
        Ok(out)
    }

    /// Positional grid `E_p` for an `h × w` patch grid, `[(h·w) × d]`, row-major.
    pub fn dense_pe(&self, g: &Graph<'_>, h: usize, w: usize) -> Result<Tensor> {
        let mut coords = Tensor::zeros(&[h * w, 2]);
        for i in 0..h {
            for j in 0..w {
                coords.set(&[i * w + j, 0], (j as Scalar + 0.5) / w as Scalar);
                coords.set(&[i * w + j, 1], (i as Scalar + 0.5) / h as Scalar);
            }
        }
        self.encode_coords(g, &coords)
    }

    /// Sparse embeddings `e_s: [K × d]`; `None` when there are no points.
    pub fn encode_points(
        &self,
        g: &mut Graph<'_>,
        prompt: &PointPrompt,
        height: usize,
        width: usize,
    ) -> Result<Option<Var>> {
        prompt.validate(height, width)?;
        if prompt.is_empty() {
            return Ok(None);
        }
        let k = prompt.len();
        let mut coords = Tensor::zeros(&[k, 2]);
        for (i, p) in prompt.points.iter().enumerate() {
            coords.set(&[i, 0], (p.x + 0.5) / width as Scalar);
            coords.set(&[i, 1], (p.y + 0.5) / height as Scalar);
        }
        let pe = self.encode_coords(g, &coords)?;
        let pe = g.constant(pe);
        let table = g.param(self.label_embed);
        let d = self.dim;
        let index = prompt
            .points
            .iter()
            .flat_map(|p| {
                let row = p.label as usize;
                (0..d).map(move |j| row * d + j)
            })
            .collect();
        let labels = g.gather(table, index, &[k, d])?;
        Ok(Some(g.add(pe, labels)?))
    }
}

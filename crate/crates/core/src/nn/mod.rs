//! Parameters and the layer library the encoder and decoder are built from.

mod layers;
mod params;

pub use layers::{
    attention_core, layer_norm, linear, multi_head_attention, patchify, Attention, LayerNorm, Linear, PatchEmbed,
    SeBlock, TransformerBlock,
};
pub use params::{Graph, Grads, Param, ParamId, ParamRegistry};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// A patch grid carried as a token sequence `[(h·w) × d]` on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMap {
    pub var: Var,
    pub h: usize,
    pub w: usize,
}

impl FeatureMap {
    pub fn new(var: Var, h: usize, w: usize) -> Self {
        FeatureMap { var, h, w }
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn with_var(&self, var: Var) -> Self {
        FeatureMap { var, ..*self }
    }

    /// The same values viewed as an `[h × w × d]` grid.
    pub fn to_grid(&self, t: &mut Tape) -> Result<Var> {
        let d = t.value(self.var).last_dim();
        t.reshape(self.var, &[self.h, self.w, d])
    }

    /// Views an `[h × w × d]` grid as a token sequence.
    pub fn from_grid(t: &mut Tape, grid: Var) -> Result<Self> {
        let s = t.shape(grid).to_vec();
        let (h, w, d) = match s[..] {
            [h, w, d] => (h, w, d),
            _ => return Err(crate::Error::shape("FeatureMap::from_grid", &s, &[0, 0, 0])),
        };
        let v = t.reshape(grid, &[h * w, d])?;
        Ok(FeatureMap::new(v, h, w))
    }
}

/// How a fresh parameter tensor is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// `N(0, std²)`
    Normal(Scalar),
    /// `N(0, 1/fan_in)` with `fan_in = shape[0]`.
    Fan,
}

/// Registers parameters, drawing each initial value from a generator seeded
/// by `(seed, name)`. A parameter's initial value therefore does not depend
/// on which other parameters exist, so models that differ only in optional
/// components share bit-identical values for everything they have in common.
pub struct ParamBuilder<'a> {
    registry: &'a mut ParamRegistry,
    seed: u64,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(registry: &'a mut ParamRegistry, seed: u64) -> Self {
        ParamBuilder { registry, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, frozen: bool) -> Result<ParamId> {
        let value = self.make(name, shape, init);
        self.registry.register(name, value, frozen)
    }

    pub fn add_tensor(&mut self, name: &str, value: Tensor, frozen: bool) -> Result<ParamId> {
        self.registry.register(name, value, frozen)
    }

    fn make(&self, name: &str, shape: &[usize], init: Init) -> Tensor {
        match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Normal(std) => Tensor::randn(shape, std, &mut self.rng_for(name)),
            Init::Fan => {
                let fan = shape.first().copied().unwrap_or(1).max(1);
                Tensor::randn(shape, 1.0 / (fan as Scalar).sqrt(), &mut self.rng_for(name))
            }
        }
    }

    pub fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(stream_seed(self.seed, name))
    }
}

/// Derives an independent 64-bit seed from a base seed and a label.
pub fn stream_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, then a splitmix64 finalizer mixed with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

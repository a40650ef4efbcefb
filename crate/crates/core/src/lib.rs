//! RGB-thermal semantic segmentation with a frozen, LoRA-adapted transformer
//! backbone, dynamic feature fusion, point prompts and text-conditioned class
//! heads, built on a small reverse-mode autodiff engine.

pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod lora;
pub mod model;
pub mod nn;
pub mod prompt;
pub mod tensor;
pub mod verify;
pub mod train;

pub use error::{Error, Result};
pub use model::Segmenter;
pub use tensor::{Scalar, Tape, Tensor, Var};

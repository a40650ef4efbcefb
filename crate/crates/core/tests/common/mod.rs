#![allow(dead_code)]

use std::path::Path;

use rgbtseg::config::{ModelConfig, RunConfig, TrainConfig};

/// A model small enough for many forward passes per test.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch: 4,
        dim: 16,
        heads: 2,
        depth: 2,
        mlp_ratio: 2,
        lora_rank: 2,
        lora_alpha: 2.0,
        decoder_layers: 1,
        mask_tokens: 2,
        d_k: 8,
        d_v: 4,
        d_t: 6,
        ..Default::default()
    }
}

pub fn tiny_run(steps: usize) -> RunConfig {
    RunConfig {
        model: tiny_model(),
        train: TrainConfig {
            steps,
            batch: 2,
            lr: 1e-2,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Runs the CLI in-process and returns (exit code, stdout).
pub fn cli(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let code = rgbtseg::cli::run(std::iter::once("rgbtseg").chain(args.iter().copied()), &mut out);
    (code, String::from_utf8(out).expect("utf-8 output"))
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// Every file under `dir` with its bytes, sorted by relative path.
pub fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

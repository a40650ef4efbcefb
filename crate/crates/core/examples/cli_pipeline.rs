//! The command-line workflow driven in-process: generate data, train, evaluate
//! and infer inside a temporary directory.

use rgbtseg::cli::run;
use rgbtseg::config::{ModelConfig, RunConfig};

fn step(args: &[&str]) {
    let mut out = Vec::new();
    let code = run(std::iter::once("rgbtseg").chain(args.iter().copied()), &mut out);
    println!("$ rgbtseg {}\n{}(exit {code})\n", args.join(" "), String::from_utf8_lossy(&out));
    assert_eq!(code, 0);
}

fn main() {
    let tmp = tempfile::TempDir::new().expect("temporary directory");
    let dir = tmp.path();
    let s = |p: &std::path::Path| p.to_str().expect("utf-8 path").to_string();
    let (data, run_dir, eval, infer) = (dir.join("data"), dir.join("run"), dir.join("eval"), dir.join("infer"));
    let config = dir.join("config.json");
    let mut cfg = RunConfig {
        model: ModelConfig {
            image_size: 32,
            patch: 4,
            dim: 32,
            depth: 2,
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.train.steps = 20;
    cfg.train.lr = 3e-3;
    cfg.save(&config).expect("config written");

    step(&["gen-data", "--out", &s(&data), "--n", "12", "--size", "32", "--patch", "4", "--test", "4"]);
    let manifest = s(&data.join("manifest.json"));
    step(&["train", "--config", &s(&config), "--data", &manifest, "--out", &s(&run_dir)]);
    let ckpt = s(&run_dir.join("model.ckpt"));
    step(&["eval", "--ckpt", &ckpt, "--data", &manifest, "--split", "test", "--out", &s(&eval)]);
    step(&[
        "infer",
        "--ckpt",
        &ckpt,
        "--rgb",
        &s(&data.join("rgb/0000.ppm")),
        "--thermal",
        &s(&data.join("thermal/0000.pgm")),
        "--out",
        &s(&infer),
        "--overlay",
    ]);
}

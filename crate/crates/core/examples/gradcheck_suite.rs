//! Runs the gradient verification suite: every tape op on several shapes,
//! then the full model with loss on a small configuration.
//!
//! `cargo run --release --example gradcheck_suite -- full` uses the toy
//! default model instead.

use rgbtseg::config::ModelConfig;
use rgbtseg::verify::{composition_suite, op_suite, SuiteOptions};

fn main() -> rgbtseg::Result<()> {
    let full = std::env::args().nth(1).is_some_and(|a| a == "full");
    let model = if full {
        ModelConfig::default()
    } else {
        ModelConfig {
            image_size: 32,
            patch: 4,
            dim: 32,
            depth: 2,
            ..Default::default()
        }
    };
    let opts = SuiteOptions {
        model,
        ..Default::default()
    };
    let ops = op_suite(&opts)?;
    let worst = ops.iter().map(|r| r.report.max_rel_err as f64).fold(0.0, f64::max);
    println!("{} op checks, {} failed, worst {:.2e}", ops.len(), ops.iter().filter(|r| !r.report.pass).count(), worst);
    for r in composition_suite(&opts)? {
        println!(
            "{} {:<56} {:.2e}",
            if r.report.pass { "ok  " } else { "FAIL" },
            r.name,
            r.report.max_rel_err as f64
        );
    }
    Ok(())
}

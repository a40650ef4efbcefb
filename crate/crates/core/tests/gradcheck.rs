use rgbtseg::config::{AblationFlags, ModelConfig};
use rgbtseg::tensor::{gradcheck, Tape, Tensor};
use rgbtseg::verify::{composition_suite, op_suite, SuiteOptions};

#[test]
fn every_tape_op_passes() {
    let results = op_suite(&SuiteOptions::default()).unwrap();
    assert!(results.len() > 60);
    for r in &results {
        assert!(r.report.pass, "{}: {:?}", r.name, r.report);
        assert!(r.report.max_rel_err <= 1e-4);
    }
}

#[test]
fn hand_written_composite_matches_finite_differences() {
    // y = Σ softmax(x·W) ⊙ gelu(x·W), checked independently of the suite.
    let w = Tensor::from_rows(&[[0.3, -0.2, 0.5], [1.1, 0.4, -0.7]]);
    let x = Tensor::from_rows(&[[0.2, -1.0], [0.7, 0.1], [-0.4, 0.9]]);
    let report = gradcheck(
        |t: &mut Tape, v| {
            let wv = t.constant(w.clone());
            let h = t.matmul(v, wv)?;
            let s = t.softmax(h)?;
            let g = t.gelu(h)?;
            let p = t.mul(s, g)?;
            t.sum(p)
        },
        &x,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn composition_passes_for_every_ablation_row() {
    let model = ModelConfig {
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
    };
    for flags in AblationFlags::table_rows() {
        let opts = SuiteOptions {
            model: model.clone(),
            flags,
            coords_per_target: 3,
            ..Default::default()
        };
        for r in composition_suite(&opts).unwrap() {
            assert!(r.report.pass, "{flags:?} {}: {:?}", r.name, r.report);
        }
    }
}

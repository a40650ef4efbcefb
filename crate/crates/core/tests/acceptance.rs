//! The ten acceptance criteria, each at its stated tolerance. Prints one
//! PASS/FAIL line per criterion and exits non-zero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgbtseg::cli::{self, CKPT_FILE};
use rgbtseg::config::{AblationFlags, ModelConfig, RunConfig, TrainConfig};
use rgbtseg::data::{gen_synthetic, iou_per_class, miou, LabelMap, MiouPolicy, RgbtSample, SyntheticConfig, CLASS_NAMES};
use rgbtseg::model::Segmenter;
use rgbtseg::nn::{Grads, Graph, ParamRegistry};
use rgbtseg::prompt::{ClassVocabulary, Point, PointLabel, PointPrompt};
use rgbtseg::tensor::{Scalar, Tape, Tensor};
use rgbtseg::train::{
    cross_entropy, decode_checkpoint, dice_loss, encode_checkpoint, evaluate, load_checkpoint, param_ledger,
    save_checkpoint, train, AdamW, AdamWConfig, CheckpointError, LossConfig, ParamGroup,
};
use rgbtseg::verify::{run_suite, SuiteOptions};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", c1_gradients),
        ("init identity", c2_init_identity),
        ("freeze invariance", c3_freeze),
        ("fusion ablation", c4_fusion_ablation),
        ("text-path ablation", c5_text_ablation),
        ("class-permutation equivariance", c6_permutation),
        ("metric oracle", c7_metric_oracle),
        ("analytic loss values", c8_analytic),
        ("parameter ledger", c9_ledger),
        ("persistence", c10_persistence),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// 1. Every op plus the full composition on the toy default model, max
//    relative error ≤ 1e-4 with central differences at ε = 1e-5, ≤ 2 min.
fn c1_gradients() -> Outcome {
    let opts = SuiteOptions::default();
    ensure!(opts.eps == 1e-5 && opts.tol == 1e-4, "suite defaults changed");
    let m = &opts.model;
    ensure!((m.image_size, m.dim, m.depth) == (64, 64, 4), "toy dims changed: {m:?}");
    let start = Instant::now();
    let results = ok(run_suite(&opts))?;
    let elapsed = start.elapsed();
    let worst = results.iter().max_by(|a, b| a.report.max_rel_err.total_cmp(&b.report.max_rel_err)).unwrap();
    let failures: Vec<&str> = results.iter().filter(|r| !r.report.pass).map(|r| r.name.as_str()).collect();
    ensure!(failures.is_empty(), "failing checks: {failures:?}");
    ensure!(worst.report.max_rel_err <= 1e-4, "worst {} at {}", worst.report.max_rel_err, worst.name);
    ensure!(results.iter().any(|r| r.name.starts_with("composition.")), "no composition checks ran");
    ensure!(elapsed <= Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!(
        "{} checks, worst rel err {:.2e} ({}), {:.1}s",
        results.len(),
        worst.report.max_rel_err,
        worst.name,
        elapsed.as_secs_f64()
    ))
}

fn scene(cfg: &ModelConfig, seed: u64) -> RgbtSample {
    let data = SyntheticConfig {
        n: 1,
        size: cfg.image_size,
        patch: cfg.patch,
        seed,
        ..Default::default()
    };
    gen_synthetic(&data).unwrap().remove(0)
}

fn vocab_for(cfg: &ModelConfig) -> ClassVocabulary {
    ClassVocabulary::toy(&CLASS_NAMES, cfg.d_t, 0).unwrap()
}

// 2. At init the encoder ignores the thermal input and the decoder adapters
//    leave the logits unchanged, bit for bit.
fn c2_init_identity() -> Outcome {
    let cfg = ModelConfig::default();
    let (params, model) = ok(Segmenter::build(&cfg, &AblationFlags::default()))?;
    let s = scene(&cfg, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let other_th = Tensor::uniform(s.thermal.shape(), 0.5, &mut rng).map(|v| v + 0.5);
    let encode = |th: &Tensor| {
        let mut g = Graph::new(&params);
        let rgb = g.constant(s.rgb.clone());
        let tv = g.constant(th.clone());
        let e = model.encoder.forward(&mut g, rgb, tv).unwrap();
        g.value(e.var).clone()
    };
    let rgb_only = {
        let mut g = Graph::new(&params);
        let rgb = g.constant(s.rgb.clone());
        let e = model.encoder.forward_rgb_only(&mut g, rgb).unwrap();
        g.value(e.var).clone()
    };
    let (a, b) = (encode(&s.thermal), encode(&other_th));
    ensure!(a.bit_eq(&b), "encoder output depends on thermal input (max diff {})", a.max_abs_diff(&b));
    ensure!(a.bit_eq(&rgb_only), "encoder output differs from the frozen RGB path");

    let no_lora = AblationFlags {
        enable_decoder_lora: false,
        ..Default::default()
    };
    let (params2, model2) = ok(Segmenter::build(&cfg, &no_lora))?;
    let vocab = vocab_for(&cfg);
    let points = PointPrompt::new(vec![
        Point { x: 10.0, y: 20.0, label: PointLabel::Foreground },
        Point { x: 40.0, y: 5.0, label: PointLabel::Background },
    ]);
    for pts in [PointPrompt::default(), points] {
        let (l1, _) = ok(model.predict(&params, &s.rgb, &s.thermal, &pts, Some(vocab.embeddings())))?;
        let (l2, _) = ok(model2.predict(&params2, &s.rgb, &s.thermal, &pts, Some(vocab.embeddings())))?;
        ensure!(l1.bit_eq(&l2), "decoder LoRA changes logits at init (max diff {})", l1.max_abs_diff(&l2));
    }
    let lora_tensors = params.len() - params2.len();
    ensure!(lora_tensors > 0, "decoder LoRA added no parameters");
    Ok(format!("encoder thermal-independent; {lora_tensors} decoder LoRA tensors leave logits bitwise unchanged"))
}

fn benchmark(n: usize, n_test: usize) -> Vec<RgbtSample> {
    gen_synthetic(&SyntheticConfig {
        n,
        n_test,
        ..Default::default()
    })
    .unwrap()
}

// 3. A seeded 50-step run leaves every frozen tensor bitwise unchanged and
//    changes every trainable one.
fn c3_freeze() -> Outcome {
    let cfg = ModelConfig::default();
    let data = benchmark(16, 0);
    let vocab = vocab_for(&cfg);
    let (mut params, model) = ok(Segmenter::build(&cfg, &AblationFlags::default()))?;
    let init = params.clone();
    let tc = TrainConfig { steps: 50, ..Default::default() };
    ok(train(&model, &mut params, &data, Some(vocab.embeddings()), &tc))?;
    let mut frozen = 0;
    let mut changed = std::collections::BTreeMap::<ParamGroup, usize>::new();
    for ((_, a), (_, b)) in init.iter().zip(params.iter()) {
        ensure!(a.name == b.name && a.frozen == b.frozen, "registry layout changed at {}", a.name);
        if a.frozen {
            ensure!(a.value.bit_eq(&b.value), "frozen `{}` changed", a.name);
            frozen += 1;
        } else {
            ensure!(!a.value.bit_eq(&b.value), "trainable `{}` did not change", a.name);
            *changed.entry(ParamGroup::of(&a.name)).or_default() += 1;
        }
    }
    for g in [
        ParamGroup::ThermalPatchEmbed,
        ParamGroup::Dffm,
        ParamGroup::EncoderLora,
        ParamGroup::DecoderLora,
        ParamGroup::TextAttention,
        ParamGroup::DecoderHeads,
    ] {
        ensure!(changed.get(&g).copied().unwrap_or(0) > 0, "group {} has no trainable tensors", g.label());
    }
    for name in ["encoder.rgb_embed", "encoder.blocks.0.attn.q", "decoder.layers.0"] {
        ensure!(
            init.iter().any(|(_, p)| p.frozen && p.name.starts_with(name)),
            "no frozen tensor under `{name}`"
        );
    }
    Ok(format!("{frozen} frozen tensors unchanged, {} trainable tensors changed", changed.values().sum::<usize>()))
}

/// Per-class IoU and mIoU on the 32 test samples after 200 seeded steps on
/// the 64 training samples.
fn ablation_run(flags: AblationFlags) -> (Vec<Option<f64>>, f64) {
    let cfg = RunConfig {
        ablation: flags,
        ..Default::default()
    };
    let data = benchmark(96, 32);
    let (train_set, test_set): (Vec<_>, Vec<_>) = data.into_iter().partition(|s| s.has_tag("train"));
    assert_eq!((train_set.len(), test_set.len()), (64, 32));
    assert_eq!((cfg.train.steps, cfg.train.batch), (200, 4));
    let names: Vec<String> = CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    let vocab = cli::run_vocabulary(&cfg, &names).unwrap();
    let (mut params, model) = Segmenter::build(&cfg.model, &flags).unwrap();
    let e_t = model.uses_text().then(|| vocab.embeddings());
    train(&model, &mut params, &train_set, e_t, &cfg.train).unwrap();
    let rows = evaluate(&model, &params, &test_set, e_t, &[], 255, MiouPolicy::AllClasses).unwrap();
    let overall = rows.into_iter().last().unwrap();
    (overall.per_class, overall.miou)
}

fn full_model_run() -> &'static (Vec<Option<f64>>, f64) {
    static FULL: std::sync::OnceLock<(Vec<Option<f64>>, f64)> = std::sync::OnceLock::new();
    FULL.get_or_init(|| ablation_run(AblationFlags::default()))
}

const THERMAL_ONLY: usize = 2;

// 4. Thermal-only IoU gains at least 0.20 from the fusion module over the
//    concatenated-embedding baseline.
fn c4_fusion_ablation() -> Outcome {
    let start = Instant::now();
    let (full, _) = full_model_run();
    let concat = AblationFlags {
        enable_dffm: false,
        ..Default::default()
    };
    let (base, _) = ablation_run(concat);
    let f = full[THERMAL_ONLY].ok_or("thermal_only absent from the test split")?;
    let b = base[THERMAL_ONLY].unwrap_or(0.0);
    ensure!(f - b >= 0.20, "thermal_only IoU full {f:.4} vs concat {b:.4}");
    ensure!(start.elapsed() <= Duration::from_secs(600), "took {:?}", start.elapsed());
    Ok(format!("thermal_only IoU {f:.4} (full) vs {b:.4} (concat), diff {:.4}", f - b))
}

// 5. The text head does not lower test mIoU (tolerance -0.01).
fn c5_text_ablation() -> Outcome {
    let (_, with_text) = *full_model_run();
    let no_text = AblationFlags {
        enable_text: false,
        ..Default::default()
    };
    let (_, without) = ablation_run(no_text);
    ensure!(with_text - without >= -0.01, "test mIoU {with_text:.4} with text vs {without:.4} without");
    Ok(format!("test mIoU {with_text:.4} with text vs {without:.4} without"))
}

// 6. Permuting the vocabulary permutes the logit channels bit for bit, in the
//    library and end-to-end through `infer`.
fn c6_permutation() -> Outcome {
    let cfg = common::tiny_model();
    let (params, model) = ok(Segmenter::build(&cfg, &AblationFlags::default()))?;
    let s = scene(&cfg, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    for c in [2usize, 4, 8] {
        for _ in 0..3 {
            let names: Vec<String> = (0..c).map(|i| format!("class-{i}-{}", rng.random::<u32>())).collect();
            let vocab = ok(ClassVocabulary::toy(&names, cfg.d_t, rng.random()))?;
            let mut perm: Vec<usize> = (0..c).collect();
            perm.shuffle(&mut rng);
            let permuted = ok(vocab.permuted(&perm))?;
            let (a, _) = ok(model.predict(&params, &s.rgb, &s.thermal, &PointPrompt::default(), Some(vocab.embeddings())))?;
            let (b, _) =
                ok(model.predict(&params, &s.rgb, &s.thermal, &PointPrompt::default(), Some(permuted.embeddings())))?;
            for (ra, rb) in a.data().chunks(c).zip(b.data().chunks(c)) {
                for (i, &p) in perm.iter().enumerate() {
                    ensure!(rb[i].to_bits() == ra[p].to_bits(), "C={c}: channel {i} is not old channel {p}");
                }
            }
            checked += 1;
        }
    }

    // End to end: train briefly, then infer with the saved and a permuted class file.
    let tmp = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let data = dir.join("data");
    let run = dir.join("run");
    let config = dir.join("run.json");
    ok(common::tiny_run(3).save(&config))?;
    let p = common::p;
    ensure!(common::cli(&["gen-data", "--out", p(&data), "--n", "4", "--size", "16", "--patch", "4"]).0 == 0, "gen-data failed");
    let (code, _) = common::cli(&["train", "--config", p(&config), "--data", p(&data.join("manifest.json")), "--out", p(&run)]);
    ensure!(code == 0, "train exited {code}");
    let perm = [3usize, 1, 0, 2];
    let vocab = ok(ClassVocabulary::load(&run.join(cli::CLASSES_FILE)))?;
    let permuted = dir.join("permuted.json");
    ok(ok(vocab.permuted(&perm))?.save(&permuted))?;
    let (ckpt, rgb, th) = (run.join(CKPT_FILE), data.join("rgb/0001.ppm"), data.join("thermal/0001.pgm"));
    let infer = |classes: &std::path::Path, out: &std::path::Path| -> Result<Vec<u8>, String> {
        let args = [
            "infer",
            "--ckpt",
            p(&ckpt),
            "--rgb",
            p(&rgb),
            "--thermal",
            p(&th),
            "--classes",
            p(classes),
            "--out",
            p(out),
        ];
        let (code, _) = common::cli(&args);
        ensure!(code == 0, "infer exited {code}");
        let img = ok(rgbtseg::data::pnm::read_image(&out.join("mask.pgm")))?;
        Ok(img.data)
    };
    let base = infer(&run.join(cli::CLASSES_FILE), &dir.join("i0"))?;
    let moved = infer(&permuted, &dir.join("i1"))?;
    ensure!(base.len() == 256, "mask has {} pixels", base.len());
    for (&o, &n) in base.iter().zip(&moved) {
        ensure!(perm[n as usize] == o as usize, "infer ids not permuted consistently");
    }
    Ok(format!("{checked} random vocabularies (C in 2, 4, 8) plus infer end to end"))
}

// 7. IoU and mIoU equal a brute-force pixel count on 100 random 16×16 pairs.
fn c7_metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    const C: usize = 5;
    const IGNORE: u8 = 255;
    for trial in 0..100 {
        let draw = |rng: &mut ChaCha8Rng, ignore: bool| -> Vec<u8> {
            (0..256)
                .map(|_| if ignore && rng.random_bool(0.05) { IGNORE } else { rng.random_range(0..C as u8) })
                .collect()
        };
        let gt = draw(&mut rng, true);
        let pred = draw(&mut rng, false);
        let mut expect = Vec::new();
        for k in 0..C as u8 {
            let (mut inter, mut union) = (0u64, 0u64);
            for (&p, &g) in pred.iter().zip(&gt) {
                if g == IGNORE {
                    continue;
                }
                inter += (p == k && g == k) as u64;
                union += (p == k || g == k) as u64;
            }
            expect.push((union > 0).then(|| inter as f64 / union as f64));
        }
        let got = ok(iou_per_class(&ok(LabelMap::new(16, 16, pred))?, &ok(LabelMap::new(16, 16, gt))?, C, IGNORE))?;
        ensure!(got == expect, "trial {trial}: {got:?} vs {expect:?}");
        let present: Vec<f64> = expect.iter().flatten().copied().collect();
        let oracle_miou = present.iter().sum::<f64>() / present.len() as f64;
        ensure!(ok(miou(&got, MiouPolicy::AllClasses))? == oracle_miou, "trial {trial}: mIoU differs");
    }
    Ok("100 pairs agree exactly".into())
}

// 8. CE of uniform logits is ln 4, Dice of a perfect prediction is 0 and a
//    zero-gradient AdamW step scales weights by (1 - lr·wd).
fn c8_analytic() -> Outcome {
    let cfg = LossConfig::default();
    let labels: Vec<u8> = (0..12).map(|i| (i % 4) as u8).collect();
    let mut t = Tape::new();
    let z = t.constant(Tensor::zeros(&[12, 4]));
    let ce = ok(cross_entropy(&mut t, z, &labels, &cfg))?;
    let ce = t.value(ce).item();
    ensure!((ce - (4.0 as Scalar).ln()).abs() <= 1e-12, "CE {ce}");

    let mut perfect = Tensor::full(&[12, 4], -1000.0);
    for (i, &l) in labels.iter().enumerate() {
        perfect.set(&[i, l as usize], 1000.0);
    }
    let pv = t.constant(perfect);
    let dice = ok(dice_loss(&mut t, pv, &labels, &cfg))?;
    let dice = t.value(dice).item();
    ensure!(dice.abs() <= 1e-12, "Dice {dice}");

    let mut reg = ParamRegistry::new();
    let w0 = Tensor::from_rows(&[[0.5, -1.25, 3.0], [2.0, 1e-3, -7.5]]);
    let id = ok(reg.register("w", w0.clone(), false))?;
    let ac = AdamWConfig {
        lr: 1e-2,
        weight_decay: 0.01,
        ..Default::default()
    };
    let mut opt = AdamW::new(&reg, ac.clone());
    let mut grads = Grads::new();
    grads.insert(id, Tensor::zeros(&[2, 3]));
    ok(opt.step(&mut reg, &grads, ac.lr))?;
    let factor = 1.0 - ac.lr * ac.weight_decay;
    for (&a, &b) in w0.data().iter().zip(reg.get(id).value.data()) {
        ensure!((b - a * factor).abs() <= 1e-15, "AdamW {a} -> {b}, expected {}", a * factor);
    }
    Ok(format!("CE {ce:.15}, Dice {dice:e}, decay factor {factor}"))
}

/// Trainable scalars of a configuration, derived from the architecture
/// description without looking at the registry.
fn closed_form(m: &ModelConfig, f: &AblationFlags) -> usize {
    let (d, p, n, r, l) = (m.dim, m.patch, m.depth, m.lora_rank, m.decoder_layers);
    let (dk, dv, dt, c) = (m.d_k, m.d_v, m.d_t, m.num_classes);
    let dm = d / 4;
    let hidden = d / m.se_reduction;
    // Thermal patch embedding: one-channel p×p patches to d, with bias.
    let thermal = p * p * d + d;
    // Three 1×1 convolutions with bias plus the SE bottleneck.
    let dffm = if f.enable_dffm { n * (3 * (d * d + d) + (d * hidden + hidden) + (hidden * d + d)) } else { 0 };
    // Rank-r adapters on the query and value projections of every block.
    let enc_lora = n * 2 * (2 * r * d);
    // Two adapted attentions per decoder layer, query and value each.
    let dec_lora = if f.enable_decoder_lora { l * 2 * 2 * (2 * r * d) } else { 0 };
    // Two 2×2 transposed convolutions: d → d/2 → d/4.
    let upscale = (d * 4 * (d / 2) + d / 2) + ((d / 2) * 4 * dm + dm);
    let head = if f.enable_text {
        // W_Q, W_K, W_V and the projection of [e_M, F_M] to d_k.
        dm * dk + dt * dk + dt * dv + (dm + dv) * dk + dk
    } else {
        // Projection to d_k plus a learned key and bias per class.
        dm * dk + dk + c * dk + c
    };
    // IoU token, mask tokens, two point-label embeddings, no-mask embedding.
    let prompt = d + m.mask_tokens * d + 2 * d + d;
    thermal + dffm + enc_lora + dec_lora + upscale + head + prompt
}

// 9. The ledger matches the closed form for every flag combination and grows
//    with every flag.
fn c9_ledger() -> Outcome {
    let m = ModelConfig::default();
    let total = |f: &AblationFlags| -> Result<usize, String> {
        let (params, _) = ok(Segmenter::build(&m, f))?;
        Ok(param_ledger(&params).trainable_total)
    };
    let full = AblationFlags::default();
    let expect = closed_form(&m, &full);
    ensure!(expect == 84688, "closed form evaluates to {expect}");
    ensure!(total(&full)? == expect, "ledger {} vs closed form {expect}", total(&full)?);
    let mut combos = Vec::new();
    for bits in 0..8u8 {
        let f = AblationFlags {
            enable_dffm: bits & 1 != 0,
            enable_decoder_lora: bits & 2 != 0,
            enable_text: bits & 4 != 0,
        };
        let t = total(&f)?;
        ensure!(t == closed_form(&m, &f), "{f:?}: ledger {t} vs closed form {}", closed_form(&m, &f));
        combos.push((bits, t));
    }
    for &(a, ta) in &combos {
        for &(b, tb) in &combos {
            if a != b && a & b == a {
                ensure!(ta < tb, "flags {a:03b} ({ta}) not below superset {b:03b} ({tb})");
            }
        }
    }
    Ok(format!("toy default {expect}; all 8 flag sets match and are monotone"))
}

// 10. Save/load is byte- and forward-identical; corruption gives typed errors.
fn c10_persistence() -> Outcome {
    let run = common::tiny_run(2);
    let cfg = &run.model;
    let data = gen_synthetic(&SyntheticConfig { n: 2, size: 16, patch: 4, ..Default::default() }).unwrap();
    let vocab = vocab_for(cfg);
    let (mut params, model) = ok(Segmenter::build(cfg, &run.ablation))?;
    ok(train(&model, &mut params, &data, Some(vocab.embeddings()), &run.train))?;

    let tmp = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let (p1, p2) = (tmp.path().join("a.ckpt"), tmp.path().join("b.ckpt"));
    ok(save_checkpoint(&params, &p1))?;
    let loaded = ok(load_checkpoint(&p1))?;
    ok(save_checkpoint(&loaded, &p2))?;
    let bytes = ok(std::fs::read(&p1))?;
    ensure!(bytes == ok(std::fs::read(&p2))?, "re-saved checkpoint differs");
    let (mut fresh, model2) = ok(Segmenter::build(cfg, &run.ablation))?;
    ok(fresh.load_values_from(&loaded))?;
    let s = &data[0];
    let (a, _) = ok(model.predict(&params, &s.rgb, &s.thermal, &PointPrompt::default(), Some(vocab.embeddings())))?;
    let (b, _) = ok(model2.predict(&fresh, &s.rgb, &s.thermal, &PointPrompt::default(), Some(vocab.embeddings())))?;
    ensure!(a.bit_eq(&b), "reloaded forward differs");

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cases: Vec<Vec<u8>> = Vec::new();
    for n in [0, 1, 3, 4, 7, 8, 12, bytes.len() / 2, bytes.len() - 1] {
        cases.push(bytes[..n].to_vec());
    }
    for _ in 0..200 {
        let n = rng.random_range(0..bytes.len());
        cases.push(bytes[..n].to_vec());
        let mut flipped = bytes.clone();
        let i = rng.random_range(0..bytes.len());
        flipped[i] ^= 1 << rng.random_range(0..8);
        cases.push(flipped);
    }
    cases.push((0..bytes.len()).map(|_| rng.random()).collect());
    // Damage behind a valid checksum: a newer version and cut-short bodies.
    let resealed = |mut body: Vec<u8>| {
        let crc = crc32fast::hash(&body);
        body.extend_from_slice(&crc.to_le_bytes());
        body
    };
    let body = &bytes[..bytes.len() - 4];
    let mut newer = body.to_vec();
    newer[4] = 2;
    cases.push(resealed(newer));
    for _ in 0..50 {
        cases.push(resealed(body[..rng.random_range(8..body.len())].to_vec()));
    }
    let mut kinds = std::collections::HashSet::new();
    for (i, c) in cases.iter().enumerate() {
        let r = catch_unwind(|| decode_checkpoint(c)).map_err(|_| format!("case {i} panicked"))?;
        match r {
            Ok(_) => return Err(format!("case {i}: corrupted checkpoint accepted")),
            Err(e) => kinds.insert(std::mem::discriminant(&e)),
        };
    }
    ensure!(kinds.len() == 4, "expected all four corruption error kinds, saw {}", kinds.len());
    let missing = load_checkpoint(&tmp.path().join("missing.ckpt"));
    ensure!(matches!(missing, Err(CheckpointError::Io { .. })), "missing file: {missing:?}");
    ensure!(encode_checkpoint(&loaded) == bytes, "encode differs from saved bytes");
    Ok(format!("{} bytes round trip; {} corrupted inputs rejected ({} error kinds)", bytes.len(), cases.len(), kinds.len()))
}

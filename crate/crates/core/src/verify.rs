//! Gradient verification suite: every differentiable tape op on several
//! shapes, a few composite layers, and the full encoder, decoder and loss
//! composition with respect to the thermal input and every trainable group.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{AblationFlags, ModelConfig};
use crate::data::{synthetic::gen_scene, SyntheticConfig};
use crate::error::Result;
use crate::model::Segmenter;
use crate::nn::{attention_core, layer_norm, linear};
use crate::nn::{stream_seed, Graph, ParamRegistry};
use crate::prompt::ClassVocabulary;
use crate::tensor::gradcheck::{central_difference_check, gradcheck};
use crate::tensor::{GradcheckReport, Scalar, Tape, Tensor, Var};
use crate::train::ledger::ParamGroup;
use crate::train::loss::{total_loss, LossConfig};
use crate::train::sample_points;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub report: GradcheckReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteOptions {
    pub eps: Scalar,
    pub tol: Scalar,
    pub seed: u64,
    /// Model used for the composition checks.
    pub model: ModelConfig,
    pub flags: AblationFlags,
    /// Coordinates checked per composition target.
    pub coords_per_target: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            eps: 1e-5,
            tol: 1e-4,
            seed: 0,
            model: ModelConfig::default(),
            flags: AblationFlags::default(),
            coords_per_target: 4,
        }
    }
}

/// Scalar objective `Σ y ⊙ R` with a fixed random `R`, so ops whose plain sum
/// is constant (softmax) still get a non-trivial gradient.
fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::randn(t.shape(y), 1.0, &mut rng);
    let r = t.constant(r);
    let p = t.mul(y, r)?;
    t.sum(p)
}

type OpFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

struct OpCase {
    name: String,
    input: Tensor,
    f: OpFn,
}

fn case(name: String, input: Tensor, f: impl Fn(&mut Tape, Var) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name,
        input,
        f: Box::new(f),
    }
}

fn shape_tag(s: &[usize]) -> String {
    s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, "gradcheck-ops"));
    let mut cases = Vec::new();
    let shapes: [&[usize]; 3] = [&[5], &[3, 4], &[2, 3, 4]];
    let mut next = || rng.random::<u64>();

    for (si, &s) in shapes.iter().enumerate() {
        let tag = shape_tag(s);
        let k = next();
        let x = Tensor::randn(s, 1.0, &mut ChaCha8Rng::seed_from_u64(k));
        let other = Tensor::randn(s, 1.0, &mut ChaCha8Rng::seed_from_u64(k ^ 1));
        let pos = Tensor::uniform(s, 0.5, &mut ChaCha8Rng::seed_from_u64(k ^ 2)).map(|v| v + 1.0);
        let w = k ^ 3;
        let row = Tensor::randn(&[*s.last().unwrap()], 1.0, &mut ChaCha8Rng::seed_from_u64(k ^ 4));

        macro_rules! unary {
            ($name:literal, $input:expr, |$t:ident, $v:ident| $body:expr) => {
                cases.push(case(format!("{}[{tag}]", $name), $input.clone(), move |$t, $v| {
                    let y = $body?;
                    weighted_sum($t, y, w)
                }));
            };
        }
        let o = other.clone();
        unary!("add.lhs", x, |t, v| {
            let c = t.constant(o.clone());
            t.add(v, c)
        });
        let o = other.clone();
        unary!("sub.rhs", x, |t, v| {
            let c = t.constant(o.clone());
            t.sub(c, v)
        });
        let o = other.clone();
        unary!("mul", x, |t, v| {
            let c = t.constant(o.clone());
            t.mul(v, c)
        });
        let o = other.clone();
        unary!("div.lhs", x, |t, v| {
            let c = t.constant(o.clone().map(|a| a.abs() + 0.5));
            t.div(v, c)
        });
        let o = other.clone();
        unary!("div.rhs", pos, |t, v| {
            let c = t.constant(o.clone());
            t.div(c, v)
        });
        let r = row.clone();
        unary!("add_row.x", x, |t, v| {
            let b = t.constant(r.clone());
            t.add_row(v, b)
        });
        let r = row.clone();
        unary!("mul_row.x", x, |t, v| {
            let b = t.constant(r.clone());
            t.mul_row(v, b)
        });
        let o = other.clone();
        let last = *s.last().unwrap();
        cases.push(case(format!("add_row.b[{last}]"), row.clone(), move |t, b| {
            let xv = t.constant(o.clone());
            let y = t.add_row(xv, b)?;
            weighted_sum(t, y, w)
        }));
        let o = other.clone();
        cases.push(case(format!("mul_row.s[{last}]"), row.clone(), move |t, b| {
            let xv = t.constant(o.clone());
            let y = t.mul_row(xv, b)?;
            weighted_sum(t, y, w)
        }));
        unary!("scale", x, |t, v| t.scale(v, -1.7));
        unary!("add_scalar", x, |t, v| t.add_scalar(v, 0.3));
        unary!("relu", x, |t, v| t.relu(v));
        unary!("sigmoid", x, |t, v| t.sigmoid(v));
        unary!("gelu", x, |t, v| t.gelu(v));
        unary!("softmax", x, |t, v| t.softmax(v));
        unary!("log_softmax", x, |t, v| t.log_softmax(v));
        unary!("layer_norm", x, |t, v| t.layer_norm(v, 1e-5));
        unary!("sum_rows", x, |t, v| t.sum_rows(v));
        unary!("sum", x, |t, v| t.sum(v));
        unary!("mean", x, |t, v| t.mean(v));
        let n = x.len();
        unary!("reshape", x, |t, v| t.reshape(v, &[n]));
        let idx: Vec<usize> = (0..n + 3).map(|i| (i * 7 + si) % n).collect();
        unary!("gather", x, |t, v| t.gather(v, idx.clone(), &[idx.len()]));
        unary!("slice_cols", x, |t, v| t.slice_cols(v, 1, last - 2));
        let o = other.clone();
        unary!("concat_cols", x, |t, v| {
            let c = t.constant(o.clone());
            t.concat_cols(&[c, v, c])
        });
    }

    // 2-D and matrix ops.
    for (m, k, n) in [(1, 3, 2), (4, 5, 3), (6, 2, 7)] {
        let seed = next();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[m, k], 1.0, &mut r);
        let b = Tensor::randn(&[k, n], 1.0, &mut r);
        let bt = Tensor::randn(&[n, k], 1.0, &mut r);
        let tag = format!("{m}x{k}x{n}");
        let w = seed ^ 9;
        let bb = b.clone();
        cases.push(case(format!("matmul.a[{tag}]"), a.clone(), move |t, v| {
            let c = t.constant(bb.clone());
            let y = t.matmul(v, c)?;
            weighted_sum(t, y, w)
        }));
        let aa = a.clone();
        cases.push(case(format!("matmul.b[{tag}]"), b.clone(), move |t, v| {
            let c = t.constant(aa.clone());
            let y = t.matmul(c, v)?;
            weighted_sum(t, y, w)
        }));
        let bb = bt.clone();
        cases.push(case(format!("matmul_nt.a[{tag}]"), a.clone(), move |t, v| {
            let c = t.constant(bb.clone());
            let y = t.matmul_nt(v, c)?;
            weighted_sum(t, y, w)
        }));
        let aa = a.clone();
        cases.push(case(format!("matmul_nt.b[{tag}]"), bt.clone(), move |t, v| {
            let c = t.constant(aa.clone());
            let y = t.matmul_nt(c, v)?;
            weighted_sum(t, y, w)
        }));
        cases.push(case(format!("transpose[{m}x{k}]"), a.clone(), move |t, v| {
            let y = t.transpose(v)?;
            weighted_sum(t, y, w)
        }));
        cases.push(case(format!("slice_rows[{m}x{k}]"), a.clone(), move |t, v| {
            let y = t.slice_rows(v, m / 2, m - m / 2)?;
            weighted_sum(t, y, w)
        }));
        let other = Tensor::randn(&[2, k], 1.0, &mut r);
        cases.push(case(format!("concat_rows[{m}x{k}]"), a.clone(), move |t, v| {
            let c = t.constant(other.clone());
            let y = t.concat_rows(&[c, v])?;
            weighted_sum(t, y, w)
        }));
    }

    for (h, wd, c, oh, ow) in [(2, 2, 1, 5, 3), (3, 4, 2, 8, 8), (4, 4, 3, 2, 7)] {
        let seed = next();
        let x = Tensor::randn(&[h, wd, c], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        cases.push(case(format!("bilinear_resize[{h}x{wd}x{c}->{oh}x{ow}]"), x, move |t, v| {
            let y = t.bilinear_resize(v, oh, ow)?;
            weighted_sum(t, y, seed)
        }));
    }

    // Composite layers.
    for (n, d, heads) in [(3, 4, 1), (5, 6, 2), (4, 8, 4)] {
        let seed = next();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[n, d], 1.0, &mut r);
        let wq = Tensor::randn(&[d, d], 0.5, &mut r);
        let wk = Tensor::randn(&[d, d], 0.5, &mut r);
        let wv = Tensor::randn(&[d, d], 0.5, &mut r);
        let bias = Tensor::randn(&[d], 0.5, &mut r);
        let gamma = Tensor::randn(&[d], 1.0, &mut r);
        let (q2, k2, v2) = (wq.clone(), wk.clone(), wv.clone());
        cases.push(case(format!("attention[{n}x{d}/{heads}]"), x.clone(), move |t, v| {
            let (wq, wk, wv) = (t.constant(q2.clone()), t.constant(k2.clone()), t.constant(v2.clone()));
            let q = t.matmul(v, wq)?;
            let k = t.matmul(v, wk)?;
            let vv = t.matmul(v, wv)?;
            let y = attention_core(t, q, k, vv, heads)?;
            weighted_sum(t, y, seed)
        }));
        let xx = x.clone();
        let b2 = bias.clone();
        cases.push(case(format!("linear.w[{n}x{d}]"), wq.clone(), move |t, wv| {
            let xv = t.constant(xx.clone());
            let b = t.constant(b2.clone());
            let y = linear(t, xv, wv, Some(b))?;
            weighted_sum(t, y, seed)
        }));
        cases.push(case(format!("layer_norm.affine[{n}x{d}]"), x, move |t, v| {
            let g = t.constant(gamma.clone());
            let b = t.constant(bias.clone());
            let y = layer_norm(t, v, g, b, 1e-5)?;
            weighted_sum(t, y, seed)
        }));
    }
    cases
}

/// Checks every op case; returns one result per case.
pub fn op_suite(opts: &SuiteOptions) -> Result<Vec<CheckResult>> {
    op_cases(opts.seed)
        .into_iter()
        .map(|c| {
            Ok(CheckResult {
                report: gradcheck(&c.f, &c.input, opts.eps, opts.tol)?,
                name: c.name,
            })
        })
        .collect()
}

/// Scale of the values given to zero-initialized tensors before the
/// composition check.
pub const ACTIVATION_STD: Scalar = 0.05;

/// Gives every zero-initialized adapter and fusion output a small random
/// value so each path carries gradient during the check.
pub fn activate_adapters(params: &mut ParamRegistry, seed: u64) {
    let ids: Vec<_> = params.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
    for id in ids {
        let p = params.get_mut(id);
        if p.value.data().iter().all(|&v| v == 0.0) {
            let mut r = ChaCha8Rng::seed_from_u64(stream_seed(seed, &p.name));
            p.value = Tensor::randn(p.value.shape(), ACTIVATION_STD, &mut r);
        }
    }
}

/// Gradient of `total_loss(model(rgb, thermal))` with respect to the thermal
/// image and to one representative tensor of every trainable group.
pub fn composition_suite(opts: &SuiteOptions) -> Result<Vec<CheckResult>> {
    let cfg = &opts.model;
    let (mut params, model) = Segmenter::build(cfg, &opts.flags)?;
    activate_adapters(&mut params, opts.seed);
    let data_cfg = SyntheticConfig {
        n: 1,
        size: cfg.image_size,
        patch: cfg.patch,
        seed: opts.seed,
        ..Default::default()
    };
    let sample = gen_scene(&data_cfg, 0)?.sample;
    let names: Vec<String> = (0..cfg.num_classes).map(|i| format!("class{i}")).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let vocab = ClassVocabulary::toy(&names, cfg.d_t, opts.seed)?;
    let e_t = model.uses_text().then(|| vocab.embeddings());
    let mut prng = ChaCha8Rng::seed_from_u64(stream_seed(opts.seed, "gradcheck-points"));
    let points = sample_points(&sample.labels, 2, 255, &mut prng);
    let loss_cfg = LossConfig::default();

    let objective = |params: &ParamRegistry, th: &Tensor| -> Result<Scalar> {
        let mut g = Graph::new(params);
        let out = model.forward_tensors(&mut g, &sample.rgb, th, &points, e_t)?;
        let l = total_loss(&mut g, out.logits(), &sample.labels.data, &loss_cfg)?;
        Ok(g.value(l).item())
    };

    let (grads, th_grad) = {
        let mut g = Graph::new(&params);
        let rgb = g.constant(sample.rgb.clone());
        let th = g.leaf(sample.thermal.clone(), true);
        let out = model.forward(&mut g, rgb, th, &points, e_t)?;
        let l = total_loss(&mut g, out.logits(), &sample.labels.data, &loss_cfg)?;
        let grads = g.gradients(l)?;
        let th_grad = g.grad(th).cloned().unwrap_or_else(|| Tensor::zeros(sample.thermal.shape()));
        (grads, th_grad)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(opts.seed, "gradcheck-coords"));
    let mut pick = |n: usize| -> Vec<usize> { index::sample(&mut rng, n, opts.coords_per_target.min(n)).into_vec() };
    let mut results = Vec::new();

    let coords = pick(sample.thermal.len());
    let report = central_difference_check(|x| objective(&params, x), &sample.thermal, &th_grad, opts.eps, opts.tol, &coords)?;
    results.push(CheckResult {
        name: "composition.thermal_input".into(),
        report,
    });

    // Every trainable tensor of the prompt/head groups and one tensor per
    // adapter site of the others.
    let mut seen_group = std::collections::BTreeMap::<ParamGroup, usize>::new();
    let targets: Vec<_> = params
        .iter()
        .filter(|(_, p)| !p.frozen)
        .filter(|(_, p)| {
            let n = seen_group.entry(ParamGroup::of(&p.name)).or_insert(0);
            *n += 1;
            *n <= 4
        })
        .map(|(id, p)| (id, p.name.clone()))
        .collect();
    for (id, name) in targets {
        let x = params.get(id).value.clone();
        let coords = pick(x.len());
        let analytic = grads.get(id).expect("trainable parameter has a gradient").clone();
        let mut probe = params.clone();
        let report = central_difference_check(
            |v| {
                probe.get_mut(id).value = v.clone();
                objective(&probe, &sample.thermal)
            },
            &x,
            &analytic,
            opts.eps,
            opts.tol,
            &coords,
        )?;
        results.push(CheckResult {
            name: format!("composition.{name}"),
            report,
        });
    }
    Ok(results)
}

/// Op suite followed by the composition suite.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CheckResult>> {
    let mut all = op_suite(opts)?;
    all.extend(composition_suite(opts)?);
    Ok(all)
}

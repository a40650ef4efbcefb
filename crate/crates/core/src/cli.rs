//! Command-line interface.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or validation
//! error, 3 numeric abort.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::manifest::write_dataset;
use crate::data::pnm::{read_image, write_image, Image};
use crate::data::{load_dataset, synthetic::gen_synthetic, MiouPolicy, RgbtSample, SplitReport, SyntheticConfig};
use crate::error::{Error, Result};
use crate::model::Segmenter;
use crate::prompt::{ClassVocabulary, PointPrompt};
use crate::tensor::Scalar;
use crate::train::{load_checkpoint, param_ledger, save_checkpoint, train_with, StepRecord};
use crate::verify::{run_suite, SuiteOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Files written by `train` next to each other; `eval` and `infer` read the
/// config and class vocabulary from the checkpoint's directory.
pub const CKPT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.json";
pub const CLASSES_FILE: &str = "classes.json";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const RESULTS_FILE: &str = "results.json";

#[derive(Debug, Parser)]
#[command(name = "rgbtseg", version, about = "RGB-thermal semantic segmentation")]
pub struct Cli {
    /// Print the effective configuration (defaults merged with --config) and exit.
    #[arg(long, global = true)]
    pub print_config: bool,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic RGB-thermal benchmark.
    GenData(GenDataArgs),
    /// Train a model and write checkpoint, config, class file and metrics log.
    Train(TrainArgs),
    /// Per-class IoU and mIoU of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Segment one RGB/thermal pair.
    Infer(InferArgs),
    /// Run the gradient verification suite.
    Gradcheck(GradcheckArgs),
    /// Print the trainable-parameter ledger of a configuration.
    Params(ParamsArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub patch: usize,
    /// Number of trailing samples tagged `test` instead of `train`.
    #[arg(long = "test", default_value_t = 0)]
    pub n_test: usize,
    #[arg(long, default_value_t = 0.5)]
    pub night_fraction: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `train.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PolicyArg {
    AllClasses,
    ExcludeBackground,
}

impl From<PolicyArg> for MiouPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::AllClasses => MiouPolicy::AllClasses,
            PolicyArg::ExcludeBackground => MiouPolicy::ExcludeBackground,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Restrict to samples carrying this tag (for example `test`).
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long, value_enum, default_value_t = PolicyArg::AllClasses)]
    pub policy: PolicyArg,
    /// Directory for the machine-readable results file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub rgb: PathBuf,
    #[arg(long)]
    pub thermal: PathBuf,
    /// Class vocabulary file; defaults to the one saved with the checkpoint.
    #[arg(long)]
    pub classes: Option<PathBuf>,
    /// Point prompts: `{"points": [{"x": .., "y": .., "label": "foreground"}]}`.
    #[arg(long)]
    pub points: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a colour-coded `overlay.ppm`.
    #[arg(long)]
    pub overlay: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Coordinates checked per composition target.
    #[arg(long, default_value_t = 4)]
    pub coords: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Maximum relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } | Error::Diverged { .. } => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (program name first), runs the command and returns its exit
/// code. Reports go to `out`, errors to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn config_path(cmd: &Option<Command>) -> Option<&Path> {
    match cmd {
        Some(Command::Train(a)) => a.config.as_deref(),
        Some(Command::Params(a)) => a.config.as_deref(),
        _ => None,
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<i32> {
    if cli.print_config {
        let cfg = load_config(config_path(&cli.command))?;
        write_out(out, &(cfg.to_json() + "\n"))?;
        return Ok(EXIT_OK);
    }
    match cli.command {
        None => Err(Error::InvalidArgument("no command given (try --help)".into())),
        Some(Command::GenData(a)) => cmd_gen_data(&a, out),
        Some(Command::Train(a)) => cmd_train(&a, out),
        Some(Command::Eval(a)) => cmd_eval(&a, out),
        Some(Command::Infer(a)) => cmd_infer(&a, out),
        Some(Command::Gradcheck(a)) => cmd_gradcheck(&a, out),
        Some(Command::Params(a)) => cmd_params(&a, out),
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

pub fn cmd_gen_data(a: &GenDataArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = SyntheticConfig {
        n: a.n,
        size: a.size,
        seed: a.seed,
        patch: a.patch,
        n_test: a.n_test,
        night_fraction: a.night_fraction,
        ..Default::default()
    };
    cfg.validate()?;
    let samples = gen_synthetic(&cfg)?;
    let classes: Vec<String> = crate::data::CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    create_dir(&a.out)?;
    let manifest = write_dataset(&a.out, &classes, &samples)?;
    let mut counts = vec![0u64; classes.len()];
    for s in &samples {
        for &l in &s.labels.data {
            counts[l as usize] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let mut text = format!("wrote {} samples to {}\n", samples.len(), manifest.display());
    text += &format!("{:<14} {:>10} {:>8}\n", "class", "pixels", "share");
    for (name, c) in classes.iter().zip(&counts) {
        text += &format!("{name:<14} {c:>10} {:>7.2}%\n", 100.0 * *c as f64 / total.max(1) as f64);
    }
    write_out(out, &text)?;
    Ok(EXIT_OK)
}

/// The class vocabulary a run uses: the configured file, or the toy encoder
/// applied to `class_names`.
pub fn run_vocabulary(cfg: &RunConfig, class_names: &[String]) -> Result<ClassVocabulary> {
    let vocab = match &cfg.paths.classes {
        Some(p) => ClassVocabulary::load(p)?,
        None => ClassVocabulary::toy(class_names, cfg.model.d_t, cfg.paths.text_seed)?,
    };
    if vocab.names() != class_names {
        return Err(Error::Config(format!(
            "class file lists {:?} but the dataset has {:?}",
            vocab.names(),
            class_names
        )));
    }
    if vocab.dim() != cfg.model.d_t {
        return Err(Error::Config(format!(
            "class embeddings have dim {} but model.d_t is {}",
            vocab.dim(),
            cfg.model.d_t
        )));
    }
    Ok(vocab)
}

/// Samples tagged `train`, or every sample when no sample carries that tag.
pub fn training_split(samples: Vec<RgbtSample>) -> Vec<RgbtSample> {
    if samples.iter().any(|s| s.has_tag("train")) {
        samples.into_iter().filter(|s| s.has_tag("train")).collect()
    } else {
        samples
    }
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let (manifest, samples) = load_dataset(&a.data)?;
    if !cfg.ablation.enable_text && manifest.classes.len() != cfg.model.num_classes {
        return Err(Error::Config(format!(
            "model.num_classes is {} but the dataset has {} classes",
            cfg.model.num_classes,
            manifest.classes.len()
        )));
    }
    let vocab = run_vocabulary(&cfg, &manifest.classes)?;
    let samples = training_split(samples);
    for s in &samples {
        if s.height() != cfg.model.image_size || s.width() != cfg.model.image_size {
            return Err(Error::Config(format!(
                "sample is {}x{} but model.image_size is {}",
                s.width(),
                s.height(),
                cfg.model.image_size
            )));
        }
    }
    let (mut params, model) = Segmenter::build(&cfg.model, &cfg.ablation)?;
    let e_t = model.uses_text().then(|| vocab.embeddings());
    create_dir(&a.out)?;
    cfg.save(&a.out.join(CONFIG_FILE))?;
    vocab.save(&a.out.join(CLASSES_FILE))?;
    write_out(out, &param_ledger(&params).format_table())?;

    let metrics_path = a.out.join(METRICS_FILE);
    let mut log = std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut io_err = None;
    let history = train_with(&model, &mut params, &samples, e_t, &cfg.train, |r: &StepRecord| {
        if let Err(e) = writeln!(log, "{}\t{}\t{}", r.step, r.loss, r.miou) {
            io_err.get_or_insert(e);
        }
        if r.step % 10 == 0 || r.step == cfg.train.steps {
            log::info!("step {} loss {:.4} miou {:.4}", r.step, r.loss, r.miou);
        }
    })?;
    if let Some(e) = io_err {
        return Err(Error::io(&metrics_path, e));
    }
    save_checkpoint(&params, &a.out.join(CKPT_FILE))?;
    let summary = match (history.first(), history.last()) {
        (Some(f), Some(l)) => format!(
            "trained {} steps: loss {:.4} -> {:.4}, final train mIoU {:.4}\n",
            history.len(),
            f.loss,
            l.loss,
            l.miou
        ),
        _ => "0 steps: checkpoint holds the initialization\n".to_string(),
    };
    write_out(out, &summary)?;
    Ok(EXIT_OK)
}

/// Model, parameters, config and class vocabulary stored with a checkpoint.
pub struct LoadedRun {
    pub config: RunConfig,
    pub model: Segmenter,
    pub params: crate::nn::ParamRegistry,
    pub vocab: ClassVocabulary,
}

/// Reads `ckpt` together with `config.json` and `classes.json` from the same
/// directory. `classes` overrides the saved vocabulary.
pub fn load_run(ckpt: &Path, classes: Option<&Path>) -> Result<LoadedRun> {
    if !ckpt.is_file() {
        return Err(Error::InvalidArgument(format!("checkpoint {} does not exist", ckpt.display())));
    }
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    let config = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let stored = load_checkpoint(ckpt)?;
    let (mut params, model) = Segmenter::build(&config.model, &config.ablation)?;
    params.load_values_from(&stored)?;
    let vocab = ClassVocabulary::load(&classes.map(Path::to_path_buf).unwrap_or_else(|| dir.join(CLASSES_FILE)))?;
    if model.uses_text() && vocab.dim() != config.model.d_t {
        return Err(Error::Config(format!(
            "class file has embedding dim {} but the checkpoint expects {}",
            vocab.dim(),
            config.model.d_t
        )));
    }
    if !model.uses_text() && vocab.len() != config.model.num_classes {
        return Err(Error::Config(format!(
            "class file lists {} classes but the checkpoint's head has {}",
            vocab.len(),
            config.model.num_classes
        )));
    }
    Ok(LoadedRun {
        config,
        model,
        params,
        vocab,
    })
}

#[derive(Serialize)]
struct EvalResults<'a> {
    classes: &'a [String],
    policy: MiouPolicy,
    split: Option<&'a str>,
    rows: &'a [SplitReport],
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let run = load_run(&a.ckpt, None)?;
    let (manifest, samples) = load_dataset(&a.data)?;
    if manifest.classes != run.vocab.names() {
        return Err(Error::Config(format!(
            "dataset classes {:?} differ from the checkpoint's {:?}",
            manifest.classes,
            run.vocab.names()
        )));
    }
    let samples = match &a.split {
        Some(tag) if manifest.has_tags() => {
            let kept: Vec<_> = samples.into_iter().filter(|s| s.has_tag(tag)).collect();
            if kept.is_empty() {
                return Err(Error::InvalidArgument(format!("no sample is tagged {tag:?}")));
            }
            kept
        }
        Some(tag) => {
            log::warn!("manifest has no tags; --split {tag} treats all samples as one split");
            samples
        }
        None => samples,
    };
    let e_t = run.model.uses_text().then(|| run.vocab.embeddings());
    let policy = MiouPolicy::from(a.policy);
    let rows = crate::train::evaluate(
        &run.model,
        &run.params,
        &samples,
        e_t,
        &["day", "night"],
        run.config.train.ignore_label,
        policy,
    )?;
    create_dir(&a.out)?;
    let results = EvalResults {
        classes: run.vocab.names(),
        policy,
        split: a.split.as_deref(),
        rows: &rows,
    };
    let path = a.out.join(RESULTS_FILE);
    let json = serde_json::to_string_pretty(&results).expect("results serialize");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    write_out(out, &crate::data::metrics::format_table(run.vocab.names(), &rows))?;
    Ok(EXIT_OK)
}

/// Fixed colour per class id, cycling after 8 classes.
pub fn class_color(id: u8) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 8] = [
        [0, 0, 0],
        [230, 25, 75],
        [255, 225, 25],
        [0, 130, 200],
        [60, 180, 75],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
    ];
    PALETTE[id as usize % PALETTE.len()]
}

pub fn cmd_infer(a: &InferArgs, out: &mut dyn Write) -> Result<i32> {
    let run = load_run(&a.ckpt, a.classes.as_deref())?;
    let rgb = read_image(&a.rgb)?;
    let th = read_image(&a.thermal)?;
    if rgb.channels != 3 || th.channels != 1 {
        return Err(Error::InvalidArgument("--rgb must be a pixmap and --thermal a graymap".into()));
    }
    if (rgb.width, rgb.height) != (th.width, th.height) {
        return Err(Error::InvalidArgument(format!(
            "RGB is {}x{} but thermal is {}x{}",
            rgb.width, rgb.height, th.width, th.height
        )));
    }
    let points = match &a.points {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<PointPrompt>(&text).map_err(|e| Error::json(p, e))?
        }
        None => PointPrompt::default(),
    };
    points.validate(rgb.height, rgb.width)?;
    let e_t = run.model.uses_text().then(|| run.vocab.embeddings());
    let (_, labels) = run.model.predict(&run.params, &rgb.to_tensor(), &th.to_tensor(), &points, e_t)?;
    create_dir(&a.out)?;
    write_image(&a.out.join("mask.pgm"), &Image::new(labels.width, labels.height, 1, labels.data.clone())?)?;
    if a.overlay {
        let mut px = Vec::with_capacity(labels.data.len() * 3);
        for (i, &l) in labels.data.iter().enumerate() {
            let c = class_color(l);
            for k in 0..3 {
                let base = rgb.data[i * 3 + k] as u16;
                px.push(((base + c[k] as u16) / 2) as u8);
            }
        }
        write_image(&a.out.join("overlay.ppm"), &Image::new(labels.width, labels.height, 3, px)?)?;
    }
    let mut counts = vec![0usize; run.vocab.len()];
    for &l in &labels.data {
        counts[l as usize] += 1;
    }
    let mut text = String::new();
    for (name, c) in run.vocab.names().iter().zip(&counts) {
        text += &format!("{name:<14} {c:>8}\n");
    }
    write_out(out, &text)?;
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let opts = SuiteOptions {
        seed: a.seed,
        coords_per_target: a.coords,
        eps: a.eps as Scalar,
        tol: a.tol as Scalar,
        ..Default::default()
    };
    let results = run_suite(&opts)?;
    let mut failed = 0;
    let mut text = String::new();
    for r in &results {
        if !r.report.pass {
            failed += 1;
        }
        text += &format!(
            "{} {:<48} max_rel_err {:.3e}  max_abs_err {:.3e}\n",
            if r.report.pass { "ok  " } else { "FAIL" },
            r.name,
            r.report.max_rel_err,
            r.report.max_abs_err
        );
    }
    let worst = results.iter().map(|r| r.report.max_rel_err).fold(0.0, Scalar::max);
    text += &format!(
        "{} checks, {} failed, worst relative error {:.3e} (tol {:.0e})\n",
        results.len(),
        failed,
        worst,
        opts.tol
    );
    write_out(out, &text)?;
    Ok(if failed == 0 { EXIT_OK } else { EXIT_VERIFY })
}

pub fn cmd_params(a: &ParamsArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = load_config(a.config.as_deref())?;
    let (params, _) = Segmenter::build(&cfg.model, &cfg.ablation)?;
    write_out(out, &param_ledger(&params).format_table())?;
    Ok(EXIT_OK)
}

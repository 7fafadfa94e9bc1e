//! The `endprompt-lab` command line.

use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::data::{self, DataError, TrainingSample};
use crate::eval::{self, EvalError, EvalOptions, NiahConfig};
use crate::experiment;
use crate::intervals::Interval;
use crate::model::{self, Checkpoint, ModelError, TinyModelParams, TrainState, METRICS_HEADER};
use crate::plan::{self, PlanError, PlanKind, PlanSpec};
use crate::report::fmt_sig;
use crate::rope::{self, HeadVector};
use crate::smoothness::{self, BoundReport, SmoothnessError, TrigPolynomial};

/// Seed offsets so each command draws from its own stream.
const DATA_STREAM: u64 = 0x6461_7461;
const EVAL_STREAM: u64 = 0x6576_616c;
const BOUND_STREAM: u64 = 0x626e_6473;
const PLAN_STREAM: u64 = 0x706c_616e;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config or input files.
    #[error("{0}")]
    Invalid(String),
    /// Failures while running a valid request.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<SmoothnessError> for CliError {
    fn from(e: SmoothnessError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(e) => CliError::Runtime(e.to_string()),
            DataError::Model(e) => e.into(),
            e => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) | ModelError::TokenOutOfRange { .. } | ModelError::Checkpoint(_) => {
                CliError::Invalid(e.to_string())
            }
            e => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(e) => e.into(),
            e => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<experiment::ExperimentError> for CliError {
    fn from(e: experiment::ExperimentError) -> Self {
        use experiment::ExperimentError as E;
        match e {
            E::Data(e) => e.into(),
            E::Eval(e) => e.into(),
            E::Model(e) => e.into(),
            E::Plan(e) => e.into(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "endprompt-lab", version, about = "Position plans for RoPE context extension, and a small lab to test them")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file; some commands print to stdout without it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, env = "ENDPROMPT_LAB_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Observed and unobserved relative distances of a position plan.
    Plan(PlanArgs),
    /// Rotary frequencies, plain and interpolated.
    Spectrum(SpectrumArgs),
    /// Certify derivative bounds of random interpolated score polynomials.
    Bernstein(BernsteinArgs),
    /// Write training samples as JSON lines.
    MakeData(MakeDataArgs),
    /// Train or fine-tune on a sample file.
    Train(TrainArgs),
    /// Needle retrieval accuracy and distance-bucketed answer loss.
    Eval(EvalArgs),
    /// Join evaluation CSVs into one comparison table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub a: Option<u64>,
    /// Terminal segment length; defaults to the longest configured cue.
    #[arg(long)]
    pub b: Option<u64>,
    #[arg(long = "L")]
    pub target_len: Option<u64>,
    #[arg(long)]
    pub s: Option<f64>,
    /// endprompt, pose or full.
    #[arg(long)]
    pub kind: Option<PlanKind>,
}

#[derive(Debug, Args)]
pub struct SpectrumArgs {
    /// Head dimension; defaults to the model's.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub base: Option<f64>,
    #[arg(long)]
    pub scale: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BernsteinArgs {
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub base: Option<f64>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Distance domain; defaults to `[0, L - 1]`.
    #[arg(long)]
    pub lo: Option<f64>,
    #[arg(long)]
    pub hi: Option<f64>,
}

#[derive(Debug, Args)]
pub struct MakeDataArgs {
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub kind: Option<PlanKind>,
    #[arg(long)]
    pub a: Option<u64>,
    #[arg(long = "L")]
    pub target_len: Option<u64>,
    #[arg(long)]
    pub s: Option<f64>,
    /// Use only this cue id.
    #[arg(long)]
    pub cue: Option<String>,
    /// Byte corpus cut into context windows instead of synthetic episodes.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub prompt_weight: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Sample file written by make-data.
    #[arg(long, required = true)]
    pub data: PathBuf,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub warmup: Option<u64>,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required = true)]
    pub checkpoint: PathBuf,
    #[arg(long = "T-eval")]
    pub t_eval: Option<usize>,
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long)]
    pub depth: Option<f64>,
    /// Row label; defaults to the checkpoint file stem.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long = "L")]
    pub target_len: Option<u64>,
    #[arg(long)]
    pub s: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Evaluation CSV files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            if !path.exists() {
                return Err(CliError::Invalid(format!("config file {} not found", path.display())));
            }
            RunConfig::load(path)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(CliError::Invalid("--threads must be at least 1".into()));
        }
        cfg.train.threads = threads;
    }
    // Already built by an earlier call in the same process; the size stays.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.train.threads).build_global();
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Plan(args) => cmd_plan(cfg, args, out),
        Command::Spectrum(args) => cmd_spectrum(cfg, args, out),
        Command::Bernstein(args) => cmd_bernstein(cfg, args, out),
        Command::MakeData(args) => cmd_make_data(cfg, args, out),
        Command::Train(args) => cmd_train(cfg, args, out),
        Command::Eval(args) => cmd_eval(cfg, args, out),
        Command::Report(args) => cmd_report(cfg, args, out),
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// `<path>.meta.json`.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

fn metadata(command: &str, cfg: &RunConfig, extra: Value) -> Value {
    json!({ "command": command, "config": cfg.resolved(), "details": extra })
}

/// Writes `text` to `out` with its metadata sidecar, or to stdout.
fn emit(out: Option<&Path>, text: &str, meta: &Value) -> Result<(), CliError> {
    match out {
        Some(path) => {
            write_file(path, text.as_bytes())?;
            let mut m = serde_json::to_string_pretty(meta).expect("metadata serializes");
            m.push('\n');
            write_file(&meta_path(path), m.as_bytes())
        }
        None => io::stdout().write_all(text.as_bytes()).map_err(|e| CliError::Runtime(e.to_string())),
    }
}

fn open_input(path: &Path) -> Result<fs::File, CliError> {
    fs::File::open(path).map_err(|e| CliError::Invalid(format!("cannot open {}: {e}", path.display())))
}

fn cmd_plan(mut cfg: RunConfig, args: &PlanArgs, out: Option<&Path>) -> Result<(), CliError> {
    if let Some(a) = args.a {
        cfg.plan.a = a;
    }
    if let Some(l) = args.target_len {
        cfg.plan.target_len = l;
    }
    if args.s.is_some() {
        cfg.plan.s = args.s;
    }
    if let Some(kind) = args.kind {
        cfg.plan.kind = kind;
    }
    let b = args.b.unwrap_or_else(|| cfg.plan_spec().b);
    let spec = PlanSpec::new(cfg.plan.a, b, cfg.plan.target_len, cfg.plan.scale())?;
    let built = match cfg.plan.kind {
        PlanKind::EndPrompt => plan::endprompt_plan(&spec)?,
        PlanKind::Full => plan::full_plan(spec.a + spec.b, spec.scale)?,
        PlanKind::Pose => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ PLAN_STREAM);
            plan::pose_plan(spec.a + spec.b, cfg.plan.pose_chunks, spec.target_len, spec.scale, &mut rng)?
        }
    };
    let report = plan::coverage_report(&built, spec.target_len)?;
    let record = format!("{}\n", report.to_record());

    let mut summary = format!(
        "{} plan: {} tokens (a={}, b={}) spanning a window of L={} at scale s={}\n",
        report.kind,
        built.len(),
        spec.a,
        spec.b,
        spec.target_len,
        spec.scale
    );
    summary.push_str(&format!(
        "observed distances: {} ({} of {}, coverage {:.6})\n",
        report.observed,
        report.observed.count(),
        spec.target_len,
        report.coverage_fraction
    ));
    if report.gap.count() == 0 {
        summary.push_str("unobserved distances: none\n");
    } else {
        summary.push_str(&format!("unobserved distances: {} (largest run {})\n", report.gap, report.largest_gap_width));
    }
    if cfg.plan.kind == PlanKind::EndPrompt {
        let m = spec.a.max(spec.b);
        if spec.gap_condition() {
            summary.push_str(&format!(
                "gap condition met: L - a - b = {} >= max(a, b) = {m}\n",
                spec.target_len - spec.a - spec.b
            ));
        } else {
            summary.push_str(&format!(
                "gap condition unmet: L - a - b = {} < max(a, b) = {m}; the unobserved set above is the plain complement\n",
                spec.target_len - spec.a - spec.b
            ));
        }
    }
    let meta = metadata("plan", &cfg, json!({ "b": spec.b, "gap_condition": spec.gap_condition() }));
    match out {
        Some(_) => {
            emit(out, &record, &meta)?;
            print!("{summary}");
        }
        None => print!("{record}{summary}"),
    }
    Ok(())
}

fn spectrum_params(
    cfg: &mut RunConfig,
    dim: Option<usize>,
    base: Option<f64>,
    scale: Option<f64>,
) -> Result<(usize, f64, f64), CliError> {
    if let Some(base) = base {
        cfg.model.rotary_base = base;
    }
    if scale.is_some() {
        cfg.plan.s = scale;
    }
    let dim = dim.unwrap_or_else(|| cfg.model.head_dim());
    let s = cfg.plan.scale();
    if !(s.is_finite() && s >= 1.0) {
        return Err(PlanError::InvalidScale(s).into());
    }
    rope::frequencies(dim, cfg.model.rotary_base).map_err(|e| CliError::Invalid(e.to_string()))?;
    Ok((dim, cfg.model.rotary_base, s))
}

fn cmd_spectrum(mut cfg: RunConfig, args: &SpectrumArgs, out: Option<&Path>) -> Result<(), CliError> {
    let (dim, base, s) = spectrum_params(&mut cfg, args.dim, args.base, args.scale)?;
    let spec = rope::frequencies(dim, base).map_err(|e| CliError::Invalid(e.to_string()))?;
    let mut text = String::from("j,theta,theta_scaled,wavelength,wavelength_scaled\n");
    for (j, &theta) in spec.freqs().iter().enumerate() {
        let w = std::f64::consts::TAU / theta;
        text.push_str(&format!(
            "{j},{},{},{},{}\n",
            fmt_sig(theta, 9),
            fmt_sig(theta / s, 9),
            fmt_sig(w, 9),
            fmt_sig(w * s, 9)
        ));
    }
    emit(out, &text, &metadata("spectrum", &cfg, json!({ "dim": dim })))
}

fn cmd_bernstein(mut cfg: RunConfig, args: &BernsteinArgs, out: Option<&Path>) -> Result<(), CliError> {
    let (dim, base, s) = spectrum_params(&mut cfg, args.dim, args.base, args.scale)?;
    let lo = args.lo.unwrap_or(0.0);
    let hi = args.hi.unwrap_or(cfg.plan.target_len.saturating_sub(1) as f64);
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(SmoothnessError::EmptyDomain { lo, hi }.into());
    }
    let spec = rope::frequencies(dim, base).map_err(|e| CliError::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ BOUND_STREAM);
    let mut text = format!("{}\n", BoundReport::CSV_HEADER);
    let mut failures = 0;
    for _ in 0..args.trials {
        let mut draw = || HeadVector::new((0..dim).map(|_| StandardNormal.sample(&mut rng)).collect());
        let (q, k) = (draw(), draw());
        let dec = rope::decompose(&q, &k, &spec).map_err(|e| CliError::Invalid(e.to_string()))?;
        let poly = TrigPolynomial::from_decomposition(&dec, &spec, s)?;
        let report = smoothness::bernstein_check(&poly, lo, hi)?;
        if !report.passed() {
            failures += 1;
        }
        text.push_str(&report.to_csv_row());
        text.push('\n');
    }
    let meta = metadata(
        "bernstein",
        &cfg,
        json!({ "dim": dim, "trials": args.trials, "lo": lo, "hi": hi, "failures": failures }),
    );
    emit(out, &text, &meta)?;
    if failures > 0 {
        return Err(CliError::Runtime(format!("{failures} of {} trials exceeded the certified bound", args.trials)));
    }
    Ok(())
}

fn cmd_make_data(mut cfg: RunConfig, args: &MakeDataArgs, out: Option<&Path>) -> Result<(), CliError> {
    if let Some(n) = args.samples {
        cfg.data.samples = n;
    }
    if let Some(kind) = args.kind {
        cfg.plan.kind = kind;
    }
    if let Some(a) = args.a {
        cfg.plan.a = a;
    }
    if let Some(l) = args.target_len {
        cfg.plan.target_len = l;
    }
    if args.s.is_some() {
        cfg.plan.s = args.s;
    }
    if args.cue.is_some() {
        cfg.data.fixed_cue = args.cue.clone();
    }
    if args.corpus.is_some() {
        cfg.data.corpus = args.corpus.clone();
    }
    if let Some(w) = args.prompt_weight {
        cfg.data.prompt_weight = w;
    }
    cfg.validate()?;
    let out = out.unwrap_or(Path::new("samples.jsonl"));
    let cues = cfg.data.cue_set();
    let spec = cfg.sample_spec();
    let a = cfg.plan.a as usize;
    let contexts: Vec<Vec<u32>> = match &cfg.data.corpus {
        Some(path) => {
            let windows = data::ingest(BufReader::new(open_input(path)?), a)
                .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
            windows.into_iter().take(cfg.data.samples).collect()
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ DATA_STREAM);
            let filler = cfg.data.filler_tokens();
            (0..cfg.data.samples)
                .map(|_| experiment::episode(&mut rng, a, &filler, cfg.data.needles))
                .collect::<Result<_, _>>()?
        }
    };
    let mut cue_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ DATA_STREAM ^ 1);
    let samples: Vec<TrainingSample> = contexts
        .iter()
        .map(|ctx| data::make_sample(ctx, &cues, &spec, &mut cue_rng))
        .collect::<Result<_, _>>()?;
    let mut buf = Vec::new();
    data::write_samples(&samples, &mut buf).map_err(|e| CliError::Runtime(e.to_string()))?;
    let text = String::from_utf8(buf).expect("sample lines are ASCII");
    emit(Some(out), &text, &metadata("make-data", &cfg, json!({ "written": samples.len() })))?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn cmd_train(mut cfg: RunConfig, args: &TrainArgs, out: Option<&Path>) -> Result<(), CliError> {
    if let Some(n) = args.max_steps {
        cfg.train.steps = n;
    }
    if let Some(lr) = args.lr {
        cfg.train.lr = lr;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(w) = args.warmup {
        cfg.train.warmup_steps = w;
    }
    if args.init.is_some() {
        cfg.train.init = args.init.clone();
    }
    cfg.validate()?;
    let out = out.unwrap_or(Path::new("model.ckpt"));
    let (params, start) = match &cfg.train.init {
        Some(path) => {
            open_input(path)?;
            let ckpt = model::load_checkpoint(path)?;
            cfg.model = ckpt.params.config.clone();
            (ckpt.params, ckpt.step)
        }
        None => (TinyModelParams::init(&cfg.model, cfg.train.seed)?, 0),
    };
    let samples = data::read_samples(BufReader::new(open_input(&args.data)?), cfg.model.vocab_size)?;
    if samples.is_empty() && cfg.train.steps > 0 {
        return Err(CliError::Invalid(format!("{} holds no samples", args.data.display())));
    }
    // Step k takes the next batch_size samples, wrapping around the file.
    let bs = cfg.train.batch_size;
    let steps = (0..cfg.train.steps as usize)
        .map(|k| {
            let picked: Vec<TrainingSample> =
                (0..bs).map(|i| samples[(k * bs + i) % samples.len()].clone()).collect();
            data::step_batches(&picked)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut state = TrainState::new(params, cfg.train.seed);
    state.step = start;
    let log = state.train_more(steps, &cfg.train_options())?;
    let ckpt = Checkpoint { params: state.params, step: state.step, meta: cfg.resolved() };
    model::save_checkpoint(out, &ckpt).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut metrics = format!("{METRICS_HEADER}\n");
    for m in &log {
        metrics.push_str(&m.to_csv_row());
        metrics.push('\n');
    }
    let metrics_path = out.with_extension("metrics.csv");
    emit(Some(&metrics_path), &metrics, &metadata("train", &cfg, json!({ "checkpoint": out })))?;
    match log.last().and_then(|m| m.loss_mean) {
        Some(loss) => println!("trained {} steps, final loss {}", log.len(), fmt_sig(loss, 6)),
        None => println!("trained {} steps", log.len()),
    }
    Ok(())
}

fn eval_buckets(spec: &PlanSpec, t_eval: usize) -> Result<Vec<Interval>, CliError> {
    let full = if spec.gap_condition() {
        eval::region_buckets(spec)?
    } else {
        vec![Interval { lo: 0, hi: spec.target_len - 1 }]
    };
    Ok(eval::clip_buckets(&full, t_eval as u64 - 1))
}

fn cmd_eval(mut cfg: RunConfig, args: &EvalArgs, out: Option<&Path>) -> Result<(), CliError> {
    if let Some(t) = args.t_eval {
        cfg.eval.t_eval = t;
    }
    if let Some(n) = args.tasks {
        cfg.eval.tasks = n;
    }
    if let Some(d) = args.depth {
        cfg.eval.depth_fraction = d;
    }
    if args.name.is_some() {
        cfg.eval.model_name = args.name.clone();
    }
    if let Some(l) = args.target_len {
        cfg.plan.target_len = l;
    }
    if args.s.is_some() {
        cfg.plan.s = args.s;
    }
    cfg.validate()?;
    if cfg.eval.t_eval as u64 > cfg.plan.target_len {
        return Err(EvalError::Range { t_eval: cfg.eval.t_eval, max_len: cfg.plan.target_len }.into());
    }
    open_input(&args.checkpoint)?;
    let ckpt = model::load_checkpoint(&args.checkpoint)?;
    cfg.model = ckpt.params.config.clone();
    let name = match &cfg.eval.model_name {
        Some(n) => n.clone(),
        None => args.checkpoint.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned()),
    };
    if name.is_empty() || name.contains([',', '\n', '"']) {
        return Err(CliError::Invalid(format!("model name {name:?} cannot appear in a CSV row")));
    }
    let niah = NiahConfig {
        t_eval: cfg.eval.t_eval,
        key_len: cfg.eval.key_len,
        value_len: cfg.eval.value_len,
        filler_vocab: cfg.data.filler_tokens(),
        depth_fraction: cfg.eval.depth_fraction,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ EVAL_STREAM);
    let tasks = eval::gen_tasks(&mut rng, &niah, cfg.eval.tasks)?;
    let buckets = eval_buckets(&cfg.plan_spec(), cfg.eval.t_eval)?;
    let opts = EvalOptions { scale: cfg.plan.scale(), max_len: cfg.plan.target_len, shift: 0 };
    let report = eval::eval_retrieval(&name, &ckpt.params, &tasks, &opts, &buckets)?;
    let text = format!("{}\n{}\n", report.csv_header(), report.to_csv_row());
    let meta = metadata(
        "eval",
        &cfg,
        json!({
            "checkpoint": args.checkpoint,
            "checkpoint_step": ckpt.step,
            "eval_positions": "contiguous indices 0..T_eval divided by s",
            "bucket_counts": report.buckets.iter().map(|b| b.count).collect::<Vec<_>>(),
        }),
    );
    emit(Some(out.unwrap_or(Path::new("eval.csv"))), &text, &meta)?;
    println!("{}: accuracy {:.6} over {} tasks at T={}", name, report.accuracy, report.n, report.t_eval);
    Ok(())
}

fn cmd_report(cfg: RunConfig, args: &ReportArgs, out: Option<&Path>) -> Result<(), CliError> {
    let mut reports = Vec::new();
    for path in &args.inputs {
        let text = fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", path.display())))?;
        let parsed = eval::parse_eval_csv(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
        reports.extend(parsed);
    }
    let table = eval::compare(&reports)?;
    emit(out, &table.to_csv(), &metadata("report", &cfg, json!({ "inputs": args.inputs })))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meta_path_appends_suffix() {
        assert_eq!(meta_path(Path::new("run/eval.csv")), PathBuf::from("run/eval.csv.meta.json"));
    }

    #[test]
    fn eval_buckets_clip_to_length() {
        let spec = PlanSpec::new(120, 8, 1024, 8.0).unwrap();
        let b = eval_buckets(&spec, 1024).unwrap();
        assert_eq!(b.last(), Some(&Interval { lo: 897, hi: 1023 }));
        assert_eq!(eval_buckets(&spec, 64).unwrap(), vec![Interval { lo: 0, hi: 63 }]);
        let tight = PlanSpec::new(4, 2, 9, 1.0).unwrap();
        assert_eq!(eval_buckets(&tight, 9).unwrap(), vec![Interval { lo: 0, hi: 8 }]);
    }
}

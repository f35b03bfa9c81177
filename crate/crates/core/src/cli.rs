//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on runtime or IO failure, 2 on usage errors.
//! `TOME_FORGE_THREADS` caps the worker threads used across images.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::error::Error;
use crate::imageio::{self, load_image};
use crate::lgtm::{build_schedule, predict_trace, MergeSchedule, Reduction, ScheduleMode, ScheduleOverrides};
use crate::merge::SimilarityMetric;
use crate::metrics::{flop_count, throughput_bench, BenchSettings, FlopReport, LayerMetrics};
use crate::model::{ForwardOptions, Model, ModelConfig, Weights};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::visualize::render_merge_map;

pub const THREADS_ENV: &str = "TOME_FORGE_THREADS";

pub const CSV_HEADER: &str = "mode,r,s,w0,t,layers,final_tokens,gmacs,gflops,imgs_per_sec,imgs_per_sec_std,top1";

pub const DIAGNOSE_HEADER: &str = "layer,plan,tokens_in,tokens,merges,cossim_pre,cossim_attn,cossim_post,merged_pair_sim";

#[derive(Debug, Parser)]
#[command(name = "tome-forge", version, about = "Training-free token reduction for Vision Transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// One forward per input; prints the token trace and cost.
    Run(RunArgs),
    /// One CSV row per (mode, r).
    Sweep(SweepArgs),
    /// Per-layer similarity diagnostics as CSV.
    Diagnose(DiagnoseArgs),
    /// Analytic per-block cost of a schedule.
    Flops(FlopsArgs),
    /// Merge map of one image as a P6 pixmap.
    Visualize(VisualizeArgs),
    /// Writes deterministic synthetic weights in VTW1 format.
    SynthWeights(SynthArgs),
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// vit-s, vit-b, vit-l or deit-s.
    #[arg(long, default_value = "deit-s")]
    preset: String,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    /// Input resolution; alias of --image-size.
    #[arg(long, conflicts_with = "image_size")]
    res: Option<usize>,
    #[arg(long)]
    mlp_ratio: Option<f32>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    no_class_token: bool,
    #[arg(long)]
    distilled: bool,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct WeightArgs {
    /// VTW1 weight file.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Generate synthetic weights from this seed.
    #[arg(long)]
    synth_seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ScheduleArgs {
    /// Tokens removed per reducing block.
    #[arg(long, default_value_t = 0)]
    r: usize,
    /// Dense prefix length (default depth / 6).
    #[arg(long)]
    skip: Option<usize>,
    /// Initial local window side (default 7).
    #[arg(long)]
    window: Option<usize>,
    /// Number of local blocks.
    #[arg(long)]
    transition: Option<usize>,
    #[arg(long, default_value_t = ScheduleMode::Full)]
    mode: ScheduleMode,
    /// Same as --mode dfe.
    #[arg(long, conflicts_with_all = ["mode", "no_lgtm"])]
    dfe_only: bool,
    /// Same as --mode tome.
    #[arg(long, conflicts_with = "mode")]
    no_lgtm: bool,
    /// Leave the last block unreduced.
    #[arg(long)]
    no_merge_last: bool,
}

#[derive(Debug, Args)]
struct ExecArgs {
    #[arg(long)]
    no_prop_attn: bool,
    #[arg(long, default_value_t = SimilarityMetric::K)]
    metric: SimilarityMetric,
    #[arg(long, default_value_t = Reduction::Merge)]
    reduction: Reduction,
    /// Seeds synthetic inputs and the random metric.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// A PPM / raw f32 image, or a directory of them with optional labels.csv.
    #[arg(long)]
    images: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Measure throughput.
    #[arg(long)]
    bench: bool,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 50)]
    runs: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    weights: WeightArgs,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[command(flatten)]
    exec: ExecArgs,
    #[command(flatten)]
    bench: BenchArgs,
    /// Print a CSV row instead of the summary.
    #[arg(long)]
    csv: bool,
    /// Also write the CSV row to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    weights: WeightArgs,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[command(flatten)]
    exec: ExecArgs,
    #[command(flatten)]
    bench: BenchArgs,
    /// Comma-separated r values.
    #[arg(long, value_delimiter = ',', required = true)]
    r_list: Vec<usize>,
    /// Comma-separated modes; defaults to the --mode value.
    #[arg(long, value_delimiter = ',')]
    modes: Vec<ScheduleMode>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    weights: WeightArgs,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[command(flatten)]
    exec: ExecArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FlopsArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long, default_value_t = Reduction::Merge)]
    reduction: Reduction,
}

#[derive(Debug, Args)]
struct VisualizeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    weights: WeightArgs,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[command(flatten)]
    exec: ExecArgs,
    /// Blend the tints with the input image.
    #[arg(long)]
    overlay: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e),
        }
    }
}

fn write_failed(e: std::io::Error) -> Failure {
    Failure::Runtime(Error::io("<output>", e))
}

type CliResult<T = ()> = Result<T, Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = stdout.write_all(text.as_bytes());
                    0
                }
                _ => {
                    let _ = stderr.write_all(text.as_bytes());
                    2
                }
            };
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a, stdout),
        Command::Sweep(a) => cmd_sweep(a, stdout),
        Command::Diagnose(a) => cmd_diagnose(a, stdout),
        Command::Flops(a) => cmd_flops(a, stdout),
        Command::Visualize(a) => cmd_visualize(a, stdout),
        Command::SynthWeights(a) => cmd_synth(a, stdout),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(stderr, "error: {msg}");
            2
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(stderr, "error: {e}");
            1
        }
    }
}

fn thread_cap() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .map(Some)
            .ok_or_else(|| Failure::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn pool() -> CliResult<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap()? {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Failure::Runtime(Error::Contract(format!("thread pool: {e}"))))
}

impl ModelArgs {
    fn resolve(&self) -> CliResult<ModelConfig> {
        let mut c = ModelConfig::preset(&self.preset)
            .ok_or_else(|| Failure::Usage(format!("unknown preset `{}`", self.preset)))?;
        if let Some(v) = self.depth {
            c.depth = v;
        }
        if let Some(v) = self.embed_dim {
            c.embed_dim = v;
        }
        if let Some(v) = self.heads {
            c.heads = v;
        }
        if let Some(v) = self.patch_size {
            c.patch_size = v;
        }
        if let Some(v) = self.image_size.or(self.res) {
            c.image_size = v;
        }
        if let Some(v) = self.mlp_ratio {
            c.mlp_ratio = v;
        }
        if let Some(v) = self.num_classes {
            c.num_classes = v;
        }
        c.has_class_token = !self.no_class_token;
        c.distilled = self.distilled;
        c.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        Ok(c)
    }
}

impl WeightArgs {
    fn load(&self, config: &ModelConfig) -> CliResult<Model> {
        let weights = match (&self.weights, self.synth_seed) {
            (Some(path), _) => Weights::load(path, config)?,
            (None, Some(seed)) => Weights::synth(config, &RngStream::new(seed)),
            (None, None) => return Err(Failure::Usage("one of --weights or --synth-seed is required".into())),
        };
        Ok(Model::new(config.clone(), &weights)?)
    }
}

impl ScheduleArgs {
    fn mode(&self) -> ScheduleMode {
        if self.dfe_only {
            ScheduleMode::Dfe
        } else if self.no_lgtm {
            ScheduleMode::Tome
        } else {
            self.mode
        }
    }

    fn build(&self, config: &ModelConfig, r: usize, mode: ScheduleMode) -> CliResult<MergeSchedule> {
        if self.window == Some(0) {
            return Err(Failure::Usage("--window must be at least 1".into()));
        }
        let overrides = ScheduleOverrides {
            skip: self.skip,
            window: self.window,
            transition: self.transition,
            mode,
            no_merge_last: self.no_merge_last,
        };
        Ok(build_schedule(config, r, &overrides))
    }
}

impl ExecArgs {
    fn options(&self, diagnostics: bool) -> ForwardOptions {
        ForwardOptions {
            prop_attn: !self.no_prop_attn,
            metric: self.metric,
            reduction: self.reduction,
            seed: self.seed,
            diagnostics,
        }
    }
}

struct Input {
    name: String,
    image: Tensor,
    label: Option<usize>,
}

fn synthetic_input(config: &ModelConfig, seed: u64, i: usize) -> Input {
    let s = config.image_size;
    Input {
        name: format!("synthetic-{i}"),
        image: RngStream::new(seed).split(&format!("input.{i}")).gaussian_tensor([3, s, s], 1.0),
        label: None,
    }
}

fn read_labels(path: &Path) -> CliResult<BTreeMap<String, usize>> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Runtime(Error::io(path, e)))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (file, class) = line
            .split_once(',')
            .ok_or_else(|| Failure::Runtime(Error::Image(format!("{}:{}: expected `file,class`", path.display(), n + 1))))?;
        match class.trim().parse::<usize>() {
            Ok(c) => {
                out.insert(file.trim().to_string(), c);
            }
            // Header row.
            Err(_) if n == 0 => {}
            Err(_) => {
                return Err(Failure::Runtime(Error::Image(format!(
                    "{}:{}: bad class `{}`",
                    path.display(),
                    n + 1,
                    class.trim()
                ))))
            }
        }
    }
    Ok(out)
}

fn load_inputs(exec: &ExecArgs, config: &ModelConfig) -> CliResult<Vec<Input>> {
    let Some(path) = &exec.images else {
        return Ok(vec![synthetic_input(config, exec.seed, 0)]);
    };
    let size = config.image_size;
    if path.is_dir() {
        let labels_path = path.join("labels.csv");
        let labels = if labels_path.exists() {
            read_labels(&labels_path)?
        } else {
            BTreeMap::new()
        };
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Failure::Runtime(Error::io(path, e)))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| imageio::is_image_file(p))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Failure::Runtime(Error::Image(format!("{}: no images found", path.display()))));
        }
        files
            .into_iter()
            .map(|f| {
                let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                Ok(Input {
                    image: load_image(&f, size)?,
                    label: labels.get(&name).copied(),
                    name,
                })
            })
            .collect()
    } else {
        Ok(vec![Input {
            name: path.display().to_string(),
            image: load_image(path, size)?,
            label: None,
        }])
    }
}

fn argmax(logits: &Tensor) -> usize {
    logits
        .data()
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, v)| if *v > bv { (i, *v) } else { (bi, bv) })
        .0
}

struct Evaluation {
    trace: Vec<usize>,
    top1: Option<f64>,
    outputs: Vec<crate::model::ForwardOutput>,
}

fn evaluate(
    model: &Model,
    schedule: &MergeSchedule,
    options: &ForwardOptions,
    inputs: &[Input],
    pool: &rayon::ThreadPool,
) -> CliResult<Evaluation> {
    let outputs = pool.install(|| {
        inputs
            .par_iter()
            .map(|inp| model.forward(&inp.image, schedule, options))
            .collect::<Result<Vec<_>, Error>>()
    })?;
    let trace = outputs[0].token_trace(model.config().num_tokens());
    let labeled: Vec<(usize, usize)> = inputs
        .iter()
        .zip(&outputs)
        .filter_map(|(inp, out)| inp.label.map(|l| (l, argmax(&out.logits))))
        .collect();
    let top1 = (!labeled.is_empty())
        .then(|| 100.0 * labeled.iter().filter(|(l, p)| l == p).count() as f64 / labeled.len() as f64);
    Ok(Evaluation { trace, top1, outputs })
}

struct Row {
    mode: ScheduleMode,
    schedule: MergeSchedule,
    trace: Vec<usize>,
    cost: FlopReport,
    bench: Option<(f64, f64)>,
    top1: Option<f64>,
}

impl Row {
    fn csv(&self) -> String {
        let layers: Vec<String> = self.trace.iter().map(|n| n.to_string()).collect();
        let opt = |v: Option<f64>, prec: usize| v.map(|x| format!("{x:.prec$}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{:.4},{:.4},{},{},{}",
            self.mode,
            self.schedule.r,
            self.schedule.skip,
            self.schedule.window,
            self.schedule.transition,
            layers.join(";"),
            self.trace.last().copied().unwrap_or(0),
            self.cost.gmacs(),
            self.cost.gflops(),
            opt(self.bench.map(|b| b.0), 2),
            opt(self.bench.map(|b| b.1), 2),
            opt(self.top1, 2),
        )
    }
}

fn bench_batch(inputs: &[Input], batch: usize) -> Vec<Tensor> {
    (0..batch).map(|i| inputs[i % inputs.len()].image.clone()).collect()
}

#[allow(clippy::too_many_arguments)]
fn measure(
    model: &Model,
    mode: ScheduleMode,
    r: usize,
    sched: &ScheduleArgs,
    exec: &ExecArgs,
    bench: &BenchArgs,
    inputs: &[Input],
    pool: &rayon::ThreadPool,
) -> CliResult<Row> {
    let schedule = sched.build(model.config(), r, mode)?;
    let options = exec.options(false);
    let eval = evaluate(model, &schedule, &options, inputs, pool)?;
    let cost = flop_count(model.config(), &eval.trace)?;
    let bench = if bench.bench {
        if bench.batch == 0 || bench.runs == 0 {
            return Err(Failure::Usage("--batch and --runs must be positive".into()));
        }
        let settings = BenchSettings {
            runs: bench.runs,
            warmup: bench.warmup,
            threads: thread_cap()?,
        };
        let report = throughput_bench(model, &schedule, &options, &bench_batch(inputs, bench.batch), settings)?;
        Some((report.imgs_per_sec, report.imgs_per_sec_std))
    } else {
        None
    };
    Ok(Row {
        mode,
        schedule,
        trace: eval.trace,
        cost,
        bench,
        top1: eval.top1,
    })
}

fn write_file(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| Failure::Runtime(Error::io(path, e)))
}

fn cmd_run(a: RunArgs, out: &mut dyn Write) -> CliResult {
    let config = a.model.resolve()?;
    let model = a.weights.load(&config)?;
    let inputs = load_inputs(&a.exec, &config)?;
    let pool = pool()?;
    let row = measure(&model, a.schedule.mode(), a.schedule.r, &a.schedule, &a.exec, &a.bench, &inputs, &pool)?;
    let csv = format!("{CSV_HEADER}\n{}\n", row.csv());
    if let Some(path) = &a.out {
        write_file(path, &csv)?;
    }
    if a.csv {
        return out.write_all(csv.as_bytes()).map_err(write_failed);
    }
    let mut s = String::new();
    let plans: Vec<String> = row.schedule.plans.iter().map(|p| p.to_string()).collect();
    let trace: Vec<String> = row.trace.iter().map(|n| n.to_string()).collect();
    let _ = writeln!(s, "mode: {}", row.mode);
    let _ = writeln!(s, "schedule: {}", plans.join(","));
    let _ = writeln!(s, "token trace: {}", trace.join(","));
    let _ = writeln!(s, "final tokens: {}", row.trace.last().copied().unwrap_or(0));
    let _ = writeln!(s, "gmacs: {:.4}", row.cost.gmacs());
    let _ = writeln!(s, "gflops: {:.4}", row.cost.gflops());
    if let Some((mean, std)) = row.bench {
        let _ = writeln!(s, "imgs/sec: {mean:.2} ± {std:.2}");
    }
    let _ = match row.top1 {
        Some(t) => writeln!(s, "top-1: {t:.2}% over {} labeled inputs", inputs.iter().filter(|i| i.label.is_some()).count()),
        None => writeln!(s, "top-1: n/a (no labels)"),
    };
    if inputs.len() == 1 && inputs[0].label.is_none() {
        let _ = writeln!(s, "input: {}", inputs[0].name);
    }
    out.write_all(s.as_bytes()).map_err(write_failed)
}

fn cmd_sweep(a: SweepArgs, out: &mut dyn Write) -> CliResult {
    if a.r_list.is_empty() {
        return Err(Failure::Usage("--r-list must not be empty".into()));
    }
    let config = a.model.resolve()?;
    let model = a.weights.load(&config)?;
    let inputs = load_inputs(&a.exec, &config)?;
    let pool = pool()?;
    let modes = if a.modes.is_empty() { vec![a.schedule.mode()] } else { a.modes.clone() };
    let mut csv = format!("{CSV_HEADER}\n");
    for mode in modes {
        for &r in &a.r_list {
            let row = measure(&model, mode, r, &a.schedule, &a.exec, &a.bench, &inputs, &pool)?;
            csv.push_str(&row.csv());
            csv.push('\n');
        }
    }
    match &a.out {
        Some(path) => write_file(path, &csv),
        None => out.write_all(csv.as_bytes()).map_err(write_failed),
    }
}

fn mean_of(values: impl Iterator<Item = Option<f32>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().map(f64::from).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Averages layer diagnostics over inputs.
fn diagnose_csv(per_input: &[Vec<LayerMetrics>]) -> String {
    let mut csv = format!("{DIAGNOSE_HEADER}\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for (i, first) in per_input[0].iter().enumerate() {
        let col = |f: fn(&LayerMetrics) -> Option<f32>| mean_of(per_input.iter().map(|l| f(&l[i])));
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            first.layer,
            first.plan,
            first.tokens_in,
            first.tokens,
            first.merges,
            opt(col(|l| l.cossim_pre)),
            opt(col(|l| l.cossim_attn)),
            opt(col(|l| l.cossim_post)),
            opt(col(|l| l.merged_pair_similarity)),
        );
    }
    csv
}

fn cmd_diagnose(a: DiagnoseArgs, out: &mut dyn Write) -> CliResult {
    let config = a.model.resolve()?;
    let model = a.weights.load(&config)?;
    let inputs = load_inputs(&a.exec, &config)?;
    let schedule = a.schedule.build(&config, a.schedule.r, a.schedule.mode())?;
    let eval = evaluate(&model, &schedule, &a.exec.options(true), &inputs, &pool()?)?;
    let layers: Vec<Vec<LayerMetrics>> = eval.outputs.into_iter().map(|o| o.layers).collect();
    let csv = diagnose_csv(&layers);
    match &a.out {
        Some(path) => write_file(path, &csv),
        None => out.write_all(csv.as_bytes()).map_err(write_failed),
    }
}

fn cmd_flops(a: FlopsArgs, out: &mut dyn Write) -> CliResult {
    let config = a.model.resolve()?;
    let schedule = a.schedule.build(&config, a.schedule.r, a.schedule.mode())?;
    let trace = predict_trace(&config, &schedule, a.reduction)?;
    let cost = flop_count(&config, &trace)?;
    let mut s = String::from("block,plan,tokens_in,tokens_out,qkv,logits,attn_v,proj,mlp,total\n");
    for (i, (b, plan)) in cost.blocks.iter().zip(&schedule.plans).enumerate() {
        let _ = writeln!(
            s,
            "{i},{plan},{},{},{},{},{},{},{},{}",
            b.tokens_in,
            b.tokens_out,
            b.qkv,
            b.logits,
            b.attn_v,
            b.proj,
            b.mlp,
            b.total()
        );
    }
    let _ = writeln!(s, "patch_embed_macs: {}", cost.patch_embed);
    let _ = writeln!(s, "head_macs: {}", cost.head);
    let _ = writeln!(s, "non_mac_ops: {}", cost.non_mac_ops);
    let _ = writeln!(s, "total_macs: {}", cost.total_macs);
    let _ = writeln!(s, "gmacs: {:.4}", cost.gmacs());
    let _ = writeln!(s, "gflops: {:.4}", cost.gflops());
    out.write_all(s.as_bytes()).map_err(write_failed)
}

fn cmd_visualize(a: VisualizeArgs, out: &mut dyn Write) -> CliResult {
    let config = a.model.resolve()?;
    let model = a.weights.load(&config)?;
    let inputs = load_inputs(&a.exec, &config)?;
    if inputs.len() != 1 {
        return Err(Failure::Usage("visualize takes a single image".into()));
    }
    let schedule = a.schedule.build(&config, a.schedule.r, a.schedule.mode())?;
    let output = model.forward(&inputs[0].image, &schedule, &a.exec.options(false))?;
    let overlay = (a.overlay && a.exec.images.is_some()).then_some(&inputs[0].image);
    let pm = render_merge_map(&config, &output.state, overlay)?;
    pm.save(&a.out)?;
    let groups = output.state.len() - output.state.num_protected();
    writeln!(out, "wrote {} ({} groups)", a.out.display(), groups).map_err(write_failed)
}

fn cmd_synth(a: SynthArgs, out: &mut dyn Write) -> CliResult {
    let config = a.model.resolve()?;
    let w = Weights::synth(&config, &RngStream::new(a.seed));
    w.save(&a.out)?;
    writeln!(out, "wrote {} ({} tensors, sha256 {})", a.out.display(), w.len(), w.checksum()).map_err(write_failed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(std::iter::once("tome-forge").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    const TINY: [&str; 10] = ["--depth", "3", "--embed-dim", "16", "--heads", "2", "--image-size", "32", "--patch-size", "8"];

    #[test]
    fn weights_and_seed_are_exclusive() {
        let (code, _, err) = call(&["run", "--weights", "w.bin", "--synth-seed", "1"]);
        assert_eq!(code, 2, "{err}");
        let (code, _, _) = call(&["run"]);
        assert_eq!(code, 2);
    }

    #[test]
    fn bad_preset_is_usage_error() {
        let (code, _, err) = call(&["run", "--preset", "vit-xxl", "--synth-seed", "1"]);
        assert_eq!(code, 2);
        assert!(err.contains("vit-xxl"));
    }

    #[test]
    fn run_prints_trace() {
        let mut args = vec!["run", "--synth-seed", "1", "--r", "2"];
        args.extend(TINY);
        let (code, out, err) = call(&args);
        assert_eq!(code, 0, "{err}");
        assert!(out.contains("token trace: 17,"), "{out}");
        assert!(out.contains("top-1: n/a"));
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(call(&["--help"]).0, 0);
    }
}

//! The `crossing-profiler` command line.
//!
//! ```text
//! crossing-profiler [--seed N] [--config FILE] [--out DIR] <command>
//!   synth     write synthetic raw crossing CSVs
//!   prepare   align, augment, split and standardize raw CSVs into a bundle
//!   train     fit one model variant on a bundle
//!   eval      score a checkpoint on a bundle and/or held-out crossings
//!   predict   write the predicted profile for one sequence CSV
//! ```
//!
//! Every command writes `<out>/<command>.run.json` describing the run.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{
    build_dataset, export_raw_csv, export_sequence_csv, ingest_sequence_csv, preprocess, read_raw_dir,
    resample_to_length, synthesize_crossing, AlignedSequence, AugmentationPlan, DatasetBundle, Standardization,
    SynthConfig, INPUT_CHANNELS,
};
use crate::error::{Error, Result};
use crate::models::{load_checkpoint, save_checkpoint, HybridModel, ModelSpec, Variant};
use crate::numerics::Tensor;
use crate::training::{evaluate, generalization_eval, train_with, MetricsReport, Predictor, TrainConfig};

pub const THREADS_ENV: &str = "CROSSING_PROFILER_THREADS";
const STATS_FILE: &str = "standardization.json";

#[derive(Debug, Parser)]
#[command(name = "crossing-profiler", version, about = "Road profile estimation at grade crossings")]
pub struct Cli {
    /// Seed for synthesis, augmentation, initialization and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON file with optional `synth`, `plan`, `model` and `train` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    Synth(SynthArgs),
    Prepare(PrepareArgs),
    Train(TrainArgs),
    Eval(EvalArgs),
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 127)]
    pub count: usize,
    /// Crossing ids are `<prefix>-000`, `<prefix>-001`, ...
    #[arg(long, default_value = "crossing")]
    pub prefix: String,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Directory of raw crossing CSVs.
    #[arg(long)]
    pub raw: PathBuf,
    /// Augmentation plan JSON; overrides the config file's `plan` section.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub sequence_length: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// 1, 2, 3, transformer-lstm, lstm-transformer or parallel.
    #[arg(long, default_value = "2")]
    pub variant: String,
    /// Use the full-size hyperparameters instead of the desk-scale ones.
    #[arg(long)]
    pub full_scale: bool,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub lstm_hidden: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Directory of raw crossing CSVs excluded from training.
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2")]
    pub downsample: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sequence CSV; `wp_profile` is optional.
    #[arg(long)]
    pub input: PathBuf,
    /// Output CSV, or `-` for standard output. Defaults to `<out>/prediction.csv`.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Bundle whose standardization to use instead of the checkpoint's.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
}

/// Contents of `--config`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub synth: Option<SynthConfig>,
    pub plan: Option<AugmentationPlan>,
    pub model: Option<ModelSpec>,
    pub train: Option<TrainConfig>,
}

impl FileConfig {
    /// Checks every section that is present.
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        if let Some(p) = &self.plan {
            p.validate()?;
        }
        if let Some(m) = &self.model {
            m.validate()?;
        }
        if let Some(t) = &self.train {
            t.validate()?;
        }
        Ok(())
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    tool_version: &'a str,
    seed: u64,
    config: serde_json::Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
    duration_s: f64,
}

struct Run {
    command: &'static str,
    out: PathBuf,
    seed: u64,
    started: Instant,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

impl Run {
    fn new(command: &'static str, out: &Path, seed: u64) -> Self {
        Run {
            command,
            out: out.to_path_buf(),
            seed,
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, p: &Path) {
        self.inputs.push(p.display().to_string());
    }

    fn output(&mut self, p: &Path) {
        self.outputs.push(p.display().to_string());
    }

    fn finish(self, config: serde_json::Value) -> Result<()> {
        let path = self.out.join(format!("{}.run.json", self.command));
        let m = RunManifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION"),
            seed: self.seed,
            config,
            inputs: self.inputs,
            outputs: self.outputs,
            duration_s: self.started.elapsed().as_secs_f64(),
        };
        write_text(&path, &(serde_json::to_string_pretty(&m)? + "\n"))
    }
}

/// Runs the parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let config: FileConfig = match &cli.config {
        Some(p) => read_json(p)?,
        None => FileConfig::default(),
    };
    config.validate()?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(&cli, &config, a),
        Command::Prepare(a) => cmd_prepare(&cli, &config, a),
        Command::Train(a) => cmd_train(&cli, &config, a),
        Command::Eval(a) => cmd_eval(&cli, a),
        Command::Predict(a) => cmd_predict(&cli, a),
    }
}

fn cmd_synth(cli: &Cli, config: &FileConfig, a: &SynthArgs) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let cfg = config.synth.clone().unwrap_or_default();
    cfg.validate()?;
    let mut run = Run::new("synth", &cli.out, seed);
    for i in 0..a.count {
        let mut scene = cfg.scene(seed, i);
        scene.crossing_id = format!("{}-{i:03}", a.prefix);
        let record = synthesize_crossing(&scene)?;
        let path = cli.out.join(format!("{}.csv", scene.crossing_id));
        export_raw_csv(&record, &path)?;
        run.output(&path);
    }
    eprintln!("wrote {} raw crossing(s) to {}", a.count, cli.out.display());
    run.finish(json!({ "synth": cfg, "count": a.count, "prefix": a.prefix }))
}

/// Preprocesses every record, collecting all alignment failures.
fn preprocess_all(records: &[crate::data::RawCrossingRecord]) -> Result<Vec<AlignedSequence>> {
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for r in records {
        match preprocess(r) {
            Ok(s) => ok.push(s),
            Err(e) => failures.push(format!("  {}: {e}", r.crossing_id)),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Alignment(format!(
            "{} record(s) could not be aligned:\n{}",
            failures.len(),
            failures.join("\n")
        )));
    }
    Ok(ok)
}

fn cmd_prepare(cli: &Cli, config: &FileConfig, a: &PrepareArgs) -> Result<()> {
    let mut plan = match &a.plan {
        Some(p) => read_json(p)?,
        None => config.plan.clone().unwrap_or_default(),
    };
    if let Some(s) = cli.seed {
        plan.seed = s;
    }
    if let Some(l) = a.sequence_length {
        plan.sequence_length = l;
    }
    plan.validate()?;
    let mut run = Run::new("prepare", &cli.out, plan.seed);
    run.input(&a.raw);
    if let Some(p) = &a.plan {
        run.input(p);
    }

    let records = read_raw_dir(&a.raw)?;
    if records.len() < 3 {
        return Err(Error::contract(format!(
            "at least 3 sources are required, found {} in {}",
            records.len(),
            a.raw.display()
        )));
    }
    let sources = preprocess_all(&records)?;
    let bundle = build_dataset(&sources, &plan)?;

    bundle.save(&cli.out)?;
    run.output(&cli.out.join(crate::data::BUNDLE_MANIFEST));
    let aligned = cli.out.join("aligned");
    for s in &sources {
        let p = aligned.join(format!("{}.csv", s.source_id));
        export_sequence_csv(s, &p)?;
    }
    run.output(&aligned);
    let [tr, va, te] = bundle.split_counts();
    eprintln!(
        "{} sources -> {} children (train {tr}, validation {va}, test {te})",
        sources.len(),
        bundle.total()
    );
    run.finish(json!({ "plan": plan, "sources": sources.len(), "split_counts": [tr, va, te] }))
}

fn resolve_spec(config: &FileConfig, a: &TrainArgs, sequence_length: usize) -> Result<ModelSpec> {
    let variant: Variant = a.variant.parse()?;
    let mut spec = match (&config.model, a.full_scale) {
        (_, true) => ModelSpec::full(variant),
        (Some(m), false) => m.with_variant(variant),
        (None, false) => ModelSpec::desk(variant),
    };
    if let Some(v) = a.d_model {
        spec.d_model = v;
    }
    if let Some(v) = a.lstm_hidden {
        spec.lstm_hidden = v;
    }
    if let Some(v) = a.d_ff {
        spec.d_ff = v;
    }
    if let Some(v) = a.blocks {
        spec.num_encoder_blocks = v;
    }
    spec.sequence_length = sequence_length;
    spec.validate()?;
    Ok(spec)
}

fn cmd_train(cli: &Cli, config: &FileConfig, a: &TrainArgs) -> Result<()> {
    let mut cfg = config.train.clone().unwrap_or_default();
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.epochs {
        cfg.max_epochs = v;
        cfg.patience = cfg.patience.min(v.saturating_sub(1));
    }
    if let Some(v) = a.patience {
        cfg.patience = v;
    }
    cfg.validate()?;
    let bundle = DatasetBundle::load(&a.bundle)?;
    let spec = resolve_spec(config, a, bundle.sequence_length())?;
    let mut run = Run::new("train", &cli.out, cfg.seed);
    run.input(&a.bundle);

    let model = HybridModel::build(spec.clone(), cfg.seed)?;
    eprintln!("training {} ({} parameters)", spec.variant.label(), model.param_count());
    fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    let history_path = cli.out.join("history.csv");
    let io = |e| Error::io(&history_path, e);
    let mut history = fs::File::create(&history_path).map_err(io)?;
    writeln!(history, "epoch,train_loss,val_rmse_m").map_err(io)?;
    let mut write_err = None;
    let outcome = train_with(model, &bundle, &cfg, |e| {
        let line = format!("{},{:.16e},{:.16e}", e.epoch, e.train_loss, e.val_rmse_m);
        if let Err(err) = writeln!(history, "{line}").and_then(|_| history.flush()) {
            write_err.get_or_insert(err);
        }
        eprintln!("epoch {:>4}  train_loss {:.6}  val_rmse {:.5} m", e.epoch, e.train_loss, e.val_rmse_m);
    });
    if let Some(e) = write_err {
        return Err(io(e));
    }
    let outcome = outcome?;
    run.output(&history_path);

    let ckpt = cli.out.join("model.ckpt");
    save_checkpoint(&outcome.model, &ckpt)?;
    run.output(&ckpt);
    let stats = cli.out.join(STATS_FILE);
    write_text(&stats, &(serde_json::to_string_pretty(&bundle.standardization)? + "\n"))?;
    run.output(&stats);
    eprintln!("best epoch {}; checkpoint at {}", outcome.history.best_epoch, ckpt.display());
    run.finish(json!({ "model": spec, "train": cfg, "best_epoch": outcome.history.best_epoch }))
}

fn checkpoint_stats(checkpoint: &Path, bundle: Option<&DatasetBundle>) -> Result<Standardization> {
    if let Some(b) = bundle {
        return Ok(b.standardization.clone());
    }
    let path = checkpoint.parent().unwrap_or(Path::new(".")).join(STATS_FILE);
    let stats: Standardization = read_json(&path)?;
    stats.validate()?;
    Ok(stats)
}

fn write_report(out: &Path, stem: &str, report: &MetricsReport, run: &mut Run) -> Result<()> {
    let csv = out.join(format!("{stem}.csv"));
    let js = out.join(format!("{stem}.json"));
    write_text(&csv, &report.to_csv())?;
    write_text(&js, &report.to_json()?)?;
    run.output(&csv);
    run.output(&js);
    Ok(())
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    if a.bundle.is_none() && a.heldout.is_none() {
        return Err(Error::config("eval needs --bundle, --heldout, or both"));
    }
    let model = load_checkpoint(&a.checkpoint)?;
    let mut run = Run::new("eval", &cli.out, cli.seed.unwrap_or(0));
    run.input(&a.checkpoint);
    let bundle = a.bundle.as_deref().map(DatasetBundle::load).transpose()?;
    if let Some(p) = &a.bundle {
        run.input(p);
    }
    if let Some(b) = &bundle {
        let report = evaluate(&model, b)?;
        print_report(&report);
        write_report(&cli.out, "metrics", &report, &mut run)?;
    }
    if let Some(dir) = &a.heldout {
        run.input(dir);
        let stats = checkpoint_stats(&a.checkpoint, bundle.as_ref())?;
        let heldout = preprocess_all(&read_raw_dir(dir)?)?;
        let report = generalization_eval(
            &model,
            &heldout,
            &a.downsample,
            &stats,
            model.spec().sequence_length,
            bundle.as_ref(),
        )?;
        print_report(&report);
        write_report(&cli.out, "generalization", &report, &mut run)?;
    }
    run.finish(json!({ "model": model.spec(), "downsample": a.downsample }))
}

fn print_report(r: &MetricsReport) {
    for row in &r.rows {
        let f = row.downsample_factor.map_or("-".into(), |f| f.to_string());
        eprintln!(
            "{:<8} {:<10} factor {:<2} rmse {:.4} m  mae {:.4} m",
            row.model, row.dataset, f, row.rmse_m, row.mae_m
        );
    }
}

fn cmd_predict(cli: &Cli, a: &PredictArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let bundle = a.bundle.as_deref().map(DatasetBundle::load).transpose()?;
    let stats = checkpoint_stats(&a.checkpoint, bundle.as_ref())?;
    let mut run = Run::new("predict", &cli.out, cli.seed.unwrap_or(0));
    run.input(&a.checkpoint);
    run.input(&a.input);

    let file = ingest_sequence_csv(&a.input)?;
    let has_truth = file.target.is_some();
    let start = file.positions[0];
    let n = file.inputs.rows();
    let target = file.target.clone().unwrap_or_else(|| vec![0.0; n]);
    let data: Vec<f64> = (0..n)
        .flat_map(|i| file.inputs.row(i).iter().copied().chain([target[i]]))
        .collect();
    let spacing = if n >= 2 { file.positions[1] - file.positions[0] } else { 1.0 };
    let seq = AlignedSequence::new("input", Tensor::matrix(n, INPUT_CHANNELS + 1, data)?, spacing)?;
    let seq = resample_to_length(&seq, model.spec().sequence_length)?;
    let pred = stats.destandardize_target(&model.predict_standardized(&stats.apply(&seq.data))?);

    let mut csv = String::from(if has_truth {
        "position_m,predicted_m,ground_truth_m\n"
    } else {
        "position_m,predicted_m\n"
    });
    let truth = seq.target();
    for (i, p) in pred.iter().enumerate() {
        let x = start + i as f64 * seq.spacing_m;
        if has_truth {
            csv.push_str(&format!("{x:.16e},{p:.16e},{:.16e}\n", truth[i]));
        } else {
            csv.push_str(&format!("{x:.16e},{p:.16e}\n"));
        }
    }
    if !has_truth {
        eprintln!("note: input has no wp_profile column; ground_truth_m omitted");
    }
    let output = a.output.clone().unwrap_or_else(|| cli.out.join("prediction.csv"));
    if output.as_os_str() == "-" {
        std::io::stdout()
            .write_all(csv.as_bytes())
            .map_err(|e| Error::io("<stdout>", e))?;
    } else {
        write_text(&output, &csv)?;
        run.output(&output);
    }
    run.finish(json!({ "model": model.spec(), "rows": pred.len(), "ground_truth": has_truth }))
}

/// Caps rayon's pool from the environment; ignored if already initialised.
pub fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Parses arguments, runs, and maps the outcome to an exit code:
/// 0 on success, 1 for domain errors, 2 for I/O and usage errors.
pub fn main_with_exit_code() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match configure_threads().and_then(|_| run(cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}

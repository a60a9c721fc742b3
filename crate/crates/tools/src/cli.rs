//! The `dml` command line.
//!
//! Every subcommand writes JSON to stdout (or `--out`). A one-line header with
//! the version, seed and a hash of the parsed arguments goes to stderr.
//! `--config file.json` supplies flags from a JSON object; explicit flags win.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dml_core::embed::l2_normalize;
use dml_core::fid::fid;
use dml_core::gradcheck::{grad_check, GradObjective};
use dml_core::losses::{BaseObjective, MarginConfig, MultisimConfig, S2sdConfig};
use dml_core::metrics::{Metric, DEFAULT_SKIP_FIRST};
use dml_core::nn::{Linear, MlpHead};
use dml_core::optim::AdamConfig;
use dml_core::splits::{ags, build_split_sequence, AgsInput, Direction, InitialSplit, SplitConfig};
use dml_core::trainer::{few_shot_adapt, synth_ood_task, train, EpisodeSpec, Objective, OodSpec, TrainConfig};
use dml_core::EmbeddingSet;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::bench::{self, BenchSpec};
use crate::error::{Result, ToolError};
use crate::io::{load_any, save_any};
use crate::manifest::{load_scores, Manifest};
use crate::report::{epoch_json, eval_metrics_json, evaluate_set, EvalRequest};

/// Comma-separated list of positive integers, e.g. `1,2,4`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct List(pub Vec<usize>);

impl FromStr for List {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let items: std::result::Result<Vec<usize>, _> =
            s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(str::parse).collect();
        items.map(List).map_err(|e| format!("expected comma-separated integers: {e}"))
    }
}

#[derive(Debug, Parser)]
#[command(name = "dml", version, about = "Deep metric learning evaluation, split building and training tools")]
#[command(args_override_self = true, propagate_version = true)]
pub struct Cli {
    /// JSON object of flag values (keys are flag names); explicit flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert an embedding file (CSV or EMB1) to EMB1 or CSV.
    Ingest(IngestArgs),
    /// Retrieval, clustering and structure metrics of an embedding file.
    Eval(EvalArgs),
    /// Frechet distance between the Gaussian summaries of two embedding files.
    Fid(FidArgs),
    /// Build a sequence of train/test class splits of increasing difficulty.
    BuildSplits(BuildSplitsArgs),
    /// Aggregated score over a split sequence.
    Ags(AgsArgs),
    /// Train an embedding head, printing one JSON line per epoch.
    TrainToy(TrainArgs),
    /// Few-shot adaptation episodes on test classes.
    Fewshot(FewshotArgs),
    /// Finite-difference checks of the analytic gradients.
    Gradcheck(GradcheckArgs),
    /// Time exact k-NN search as a function of dimension.
    RetrievalBench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// CSV input starts with a header row.
    #[arg(long)]
    pub has_header: bool,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Output path; `.csv` writes CSV, anything else EMB1.
    #[arg(long)]
    pub out: PathBuf,
    /// Class names, one per line, line i naming class i.
    #[arg(long)]
    pub names: Option<PathBuf>,
    #[command(flatten)]
    pub input_opts: InputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Euclidean,
    Cosine,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Euclidean => Metric::Euclidean,
            MetricArg::Cosine => Metric::Cosine,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_name = "K,..")]
    pub recall: Option<List>,
    #[arg(long, value_name = "CUTOFF,..")]
    pub map: Option<List>,
    #[arg(long, value_enum, default_value = "euclidean")]
    pub metric: MetricArg,
    #[arg(long)]
    pub nmi: bool,
    /// π_intra, π_inter and their ratio.
    #[arg(long)]
    pub density: bool,
    #[arg(long)]
    pub spectral: bool,
    #[arg(long, default_value_t = DEFAULT_SKIP_FIRST)]
    pub spectral_skip: usize,
    /// L2-normalize rows before evaluating.
    #[arg(long)]
    pub normalize: bool,
    /// k-means seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub input_opts: InputArgs,
}

#[derive(Debug, Args)]
pub struct FidArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[command(flatten)]
    pub input_opts: InputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    Increase,
    Decrease,
}

#[derive(Debug, Args)]
pub struct BuildSplitsArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// `auto-half` or a comma-separated list of class ids.
    #[arg(long, default_value = "auto-half")]
    pub train_classes: String,
    #[arg(long, default_value_t = 1)]
    pub swap_size: usize,
    /// Smallest fraction of samples kept by removal steps.
    #[arg(long, default_value_t = dml_core::splits::DEFAULT_RETAINED_FLOOR)]
    pub retained_floor: f64,
    #[arg(long, value_enum, default_value = "increase")]
    pub direction: DirectionArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the manifest here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub input_opts: InputArgs,
}

#[derive(Debug, Args)]
pub struct AgsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON array of scores in [0, 1], or `{"scores": [...]}`, one per state.
    #[arg(long)]
    pub scores: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    Margin,
    Multisim,
}

/// Synthetic train/test task used when no data files are given.
#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    pub train_classes: usize,
    #[arg(long, default_value_t = 8)]
    pub test_classes: usize,
    #[arg(long, default_value_t = 25)]
    pub per_class: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Seed of the synthetic task; defaults to `--seed`.
    #[arg(long)]
    pub data_seed: Option<u64>,
}

impl SynthArgs {
    fn task(&self, seed: u64) -> Result<(EmbeddingSet, EmbeddingSet)> {
        let spec = OodSpec::new(
            self.train_classes,
            self.test_classes,
            self.per_class,
            self.dim,
            self.data_seed.unwrap_or(seed),
        );
        Ok(synth_ood_task(&spec)?)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training embeddings; the synthetic task is used when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Evaluation embeddings (defaults to the synthetic test split).
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[command(flatten)]
    pub synth: SynthArgs,
    #[arg(long, value_enum, default_value = "margin")]
    pub objective: ObjectiveArg,
    /// Add the multiscale self-distillation objective.
    #[arg(long)]
    pub s2sd: bool,
    /// Target branch dimensions (with --s2sd).
    #[arg(long, value_name = "D,..")]
    pub targets: Option<List>,
    #[arg(long, default_value_t = 5.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long)]
    pub feature_distill: bool,
    #[arg(long, default_value_t = 0)]
    pub warmup_iters: u64,
    /// Let distillation gradients reach the target heads.
    #[arg(long)]
    pub no_detach: bool,
    #[arg(long, default_value_t = 0.0)]
    pub p_switch: f64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long, value_name = "W,..")]
    pub hidden: Option<List>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Train only the target heads during the first epoch.
    #[arg(long)]
    pub head_warmup: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Save the trained reference head as JSON.
    #[arg(long)]
    pub save_head: Option<PathBuf>,
    #[command(flatten)]
    pub input_opts: InputArgs,
}

impl TrainArgs {
    pub fn config(&self) -> Result<TrainConfig> {
        let base = match self.objective {
            ObjectiveArg::Margin => {
                BaseObjective::Margin(MarginConfig { p_switch: self.p_switch, ..Default::default() })
            }
            ObjectiveArg::Multisim => BaseObjective::Multisim(MultisimConfig::default()),
        };
        let objective = if self.s2sd {
            let cfg = S2sdConfig {
                gamma: self.gamma,
                temperature: self.temperature,
                target_dims: self.targets.clone().unwrap_or_default().0,
                warmup_iters: self.warmup_iters,
                use_feature_distill: self.feature_distill,
                detach_targets: !self.no_detach,
            };
            Objective::S2sd { base, cfg }
        } else {
            if self.targets.is_some() || self.feature_distill {
                return Err(ToolError::Usage("--targets and --feature-distill require --s2sd".into()));
            }
            Objective::Base(base)
        };
        let d = TrainConfig::default();
        Ok(TrainConfig {
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            epochs: self.epochs.unwrap_or(d.epochs),
            seed: self.seed,
            objective,
            eval_every: self.eval_every.unwrap_or(d.eval_every),
            hidden_dims: self.hidden.clone().map_or(d.hidden_dims, |h| h.0),
            embed_dim: self.embed_dim.unwrap_or(d.embed_dim),
            adam: self.lr.map_or(d.adam, |lr| AdamConfig { lr, ..d.adam }),
            head_warmup: self.head_warmup,
            spectral_skip: d.spectral_skip,
        })
    }

    fn datasets(&self) -> Result<(EmbeddingSet, Option<EmbeddingSet>)> {
        let header = self.input_opts.has_header;
        match &self.data {
            Some(path) => {
                let eval = self.eval_data.as_ref().map(|p| load_any(p, header)).transpose()?;
                Ok((load_any(path, header)?, eval))
            }
            None => {
                let (train, test) = self.synth.task(self.seed)?;
                let eval = match &self.eval_data {
                    Some(p) => load_any(p, header)?,
                    None => test,
                };
                Ok((train, Some(eval)))
            }
        }
    }
}

#[derive(Debug, Args)]
pub struct FewshotArgs {
    /// Trained head (from `train-toy --save-head`); trained on the synthetic task when absent.
    #[arg(long)]
    pub head: Option<PathBuf>,
    /// Test-class embeddings; the synthetic test split is used when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub synth: SynthArgs,
    #[arg(long, default_value_t = 5)]
    pub shots: usize,
    #[arg(long, default_value_t = 10)]
    pub episodes: usize,
    #[arg(long, default_value_t = 50)]
    pub adapt_epochs: usize,
    #[arg(long)]
    pub adapt_lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub input_opts: InputArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Objective name, or `all`.
    #[arg(long, default_value = "all")]
    pub objective: String,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 250_000)]
    pub n: usize,
    #[arg(long, value_name = "D,..", default_value = "32,64,128")]
    pub dims: List,
    /// Number of query rows per repetition.
    #[arg(long, default_value_t = 100)]
    pub queries: usize,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 3)]
    pub repetitions: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::Eval(_) => "eval",
            Command::Fid(_) => "fid",
            Command::BuildSplits(_) => "build-splits",
            Command::Ags(_) => "ags",
            Command::TrainToy(_) => "train-toy",
            Command::Fewshot(_) => "fewshot",
            Command::Gradcheck(_) => "gradcheck",
            Command::RetrievalBench(_) => "retrieval-bench",
        }
    }

    fn seed(&self) -> Option<u64> {
        match self {
            Command::Eval(a) => Some(a.seed),
            Command::BuildSplits(a) => Some(a.seed),
            Command::TrainToy(a) => Some(a.seed),
            Command::Fewshot(a) => Some(a.seed),
            Command::Gradcheck(a) => Some(a.seed),
            Command::RetrievalBench(a) => Some(a.seed),
            Command::Ingest(_) | Command::Fid(_) | Command::Ags(_) => None,
        }
    }
}

/// Serialized reference head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadFile {
    pub dims: Vec<usize>,
    pub params: Vec<f64>,
}

impl HeadFile {
    pub fn from_head(head: &MlpHead) -> Self {
        HeadFile { dims: head.dims(), params: head.params() }
    }

    pub fn into_head(self) -> Result<MlpHead> {
        if self.dims.len() < 2 {
            return Err(ToolError::format(None, "head needs at least two layer widths"));
        }
        let layers = self.dims.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect();
        let mut head = MlpHead::from_layers(layers)?;
        head.set_params(&self.params)?;
        Ok(head)
    }
}

/// Parses `argv` (program name first) and runs the command. Returns the exit code.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match merge_config(argv) {
        Ok(a) => a,
        Err(e) => return report_error(&e, stderr),
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return if e.use_stderr() {
                1
            } else {
                // --help / --version
                let _ = write!(stdout, "{}", e.render());
                0
            };
        }
    };
    let _ = writeln!(stderr, "{}", header(&cli.command));
    match execute(&cli.command, stdout) {
        Ok(()) => 0,
        Err(e) => report_error(&e, stderr),
    }
}

fn report_error(e: &ToolError, stderr: &mut dyn Write) -> i32 {
    let envelope = json!({ "error": { "code": e.code(), "message": e.to_string() } });
    let _ = writeln!(stderr, "{envelope}");
    e.exit_code()
}

fn header(cmd: &Command) -> String {
    let hash = hex::encode(Sha256::digest(format!("{cmd:?}").as_bytes()));
    let seed = cmd.seed().map_or_else(|| "none".to_owned(), |s| s.to_string());
    format!("dml {} {} seed={seed} config_sha256={hash}", env!("CARGO_PKG_VERSION"), cmd.name())
}

/// Expands `--config FILE` into flags inserted right after the subcommand, so
/// that flags given on the command line (which come later) override them.
fn merge_config(mut argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut config = None;
    let mut sub_pos = None;
    let mut i = 1;
    while i < argv.len() {
        let arg = argv[i].to_string_lossy().into_owned();
        if arg == "--config" {
            config = argv.get(i + 1).map(PathBuf::from);
            i += 2;
            continue;
        }
        if let Some(p) = arg.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        } else if arg == "--" {
            break;
        } else if sub_pos.is_none() && !arg.starts_with('-') {
            sub_pos = Some(i);
        }
        i += 1;
    }
    let (Some(path), Some(pos)) = (config, sub_pos) else {
        return Ok(argv);
    };
    let flags = config_flags(&path)?;
    argv.splice(pos + 1..pos + 1, flags);
    Ok(argv)
}

fn config_flags(path: &Path) -> Result<Vec<OsString>> {
    let value: Value = serde_json::from_slice(&fs::read(path)?)?;
    let Value::Object(map) = value else {
        return Err(ToolError::Usage(format!("{}: config must be a JSON object", path.display())));
    };
    let mut out = Vec::new();
    for (key, v) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        match v {
            Value::Bool(true) => out.push(flag.into()),
            Value::Bool(false) | Value::Null => {}
            Value::Array(items) => {
                let joined: Vec<String> = items.iter().map(scalar_string).collect::<Result<_>>()?;
                out.push(flag.into());
                out.push(joined.join(",").into());
            }
            other => {
                out.push(flag.into());
                out.push(scalar_string(&other)?.into());
            }
        }
    }
    Ok(out)
}

fn scalar_string(v: &Value) -> Result<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        other => Err(ToolError::Usage(format!("unsupported config value {other}"))),
    }
}

fn emit(stdout: &mut dyn Write, value: &Value) -> Result<()> {
    writeln!(stdout, "{value}")?;
    Ok(())
}

fn write_or_emit(out: Option<&Path>, stdout: &mut dyn Write, value: &Value) -> Result<()> {
    match out {
        Some(path) => {
            fs::write(path, serde_json::to_vec_pretty(value)?)?;
            emit(stdout, &json!({ "out": path.display().to_string() }))
        }
        None => emit(stdout, value),
    }
}

pub fn execute(cmd: &Command, stdout: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Ingest(a) => ingest(a, stdout),
        Command::Eval(a) => eval(a, stdout),
        Command::Fid(a) => {
            let x = load_any(&a.a, a.input_opts.has_header)?;
            let y = load_any(&a.b, a.input_opts.has_header)?;
            emit(stdout, &json!({ "fid": fid(&x, &y)? }))
        }
        Command::BuildSplits(a) => build_splits(a, stdout),
        Command::Ags(a) => {
            let manifest = Manifest::load(&a.manifest)?;
            let scores = load_scores(&a.scores)?;
            let value = ags(&AgsInput { fids: manifest.fids(), scores })?;
            emit(stdout, &json!({ "ags": value, "splits": manifest.states.len() }))
        }
        Command::TrainToy(a) => train_toy(a, stdout),
        Command::Fewshot(a) => fewshot(a, stdout),
        Command::Gradcheck(a) => gradcheck(a, stdout),
        Command::RetrievalBench(a) => {
            let spec = BenchSpec {
                n: a.n,
                dims: a.dims.0.clone(),
                queries: a.queries,
                k: a.k,
                repetitions: a.repetitions,
                seed: a.seed,
            };
            let rows = bench::run(&spec)?;
            emit(
                stdout,
                &json!({ "n": a.n, "queries": a.queries.min(a.n), "k": a.k, "repetitions": a.repetitions, "results": rows }),
            )
        }
    }
}

fn ingest(a: &IngestArgs, stdout: &mut dyn Write) -> Result<()> {
    let mut set = load_any(&a.input, a.input_opts.has_header)?;
    if let Some(path) = &a.names {
        let names: Vec<String> = fs::read_to_string(path)?.lines().map(|l| l.trim_end().to_owned()).collect();
        set = EmbeddingSet::with_names(set.data().clone(), set.labels().to_vec(), Some(names))?;
    }
    save_any(&set, &a.out)?;
    emit(
        stdout,
        &json!({
            "rows": set.len(),
            "dim": set.dim(),
            "classes": set.classes().len(),
            "out": a.out.display().to_string(),
        }),
    )
}

fn eval(a: &EvalArgs, stdout: &mut dyn Write) -> Result<()> {
    let req = EvalRequest {
        recall: a.recall.clone().unwrap_or_default().0,
        map: a.map.clone().unwrap_or_default().0,
        metric: a.metric.into(),
        nmi: a.nmi,
        density: a.density,
        spectral_skip: a.spectral.then_some(a.spectral_skip),
        seed: a.seed,
    };
    if req.recall.is_empty() && req.map.is_empty() && !req.nmi && !req.density && req.spectral_skip.is_none() {
        return Err(ToolError::Usage(
            "nothing to compute: pass --recall, --map, --nmi, --density or --spectral".into(),
        ));
    }
    let mut set = load_any(&a.data, a.input_opts.has_header)?;
    if a.normalize {
        set = l2_normalize(&set)?;
    }
    let out = evaluate_set(&set, &req)?;
    write_or_emit(a.out.as_deref(), stdout, &Value::Object(out))
}

fn build_splits(a: &BuildSplitsArgs, stdout: &mut dyn Write) -> Result<()> {
    let data = load_any(&a.data, a.input_opts.has_header)?;
    let initial = if a.train_classes == "auto-half" {
        InitialSplit::RandomHalf
    } else {
        let ids: std::result::Result<BTreeSet<u32>, _> =
            a.train_classes.split(',').map(str::trim).filter(|t| !t.is_empty()).map(str::parse).collect();
        InitialSplit::Classes(ids.map_err(|e| ToolError::Usage(format!("--train-classes: {e}")))?)
    };
    let cfg = SplitConfig {
        swap_size: a.swap_size,
        retained_fraction_floor: a.retained_floor,
        direction: match a.direction {
            DirectionArg::Increase => Direction::Increase,
            DirectionArg::Decrease => Direction::Decrease,
        },
        seed: a.seed,
    };
    let seq = build_split_sequence(&data, &initial, cfg)?;
    let manifest = serde_json::to_value(Manifest::from(&seq))?;
    write_or_emit(a.out.as_deref(), stdout, &manifest)
}

fn train_toy(a: &TrainArgs, stdout: &mut dyn Write) -> Result<()> {
    let cfg = a.config()?;
    let (train_set, eval_set) = a.datasets()?;
    let outcome = train(&train_set, eval_set.as_ref(), &cfg)?;
    if let Some(m) = &outcome.initial {
        let mut line = eval_metrics_json(m);
        line.insert("epoch".into(), json!(0));
        emit(stdout, &Value::Object(line))?;
    }
    for record in &outcome.history {
        emit(stdout, &epoch_json(record))?;
    }
    if let Some(path) = &a.save_head {
        fs::write(path, serde_json::to_vec(&HeadFile::from_head(&outcome.reference))?)?;
    }
    Ok(())
}

fn fewshot(a: &FewshotArgs, stdout: &mut dyn Write) -> Result<()> {
    let header = a.input_opts.has_header;
    let (head, test) = match (&a.head, &a.data) {
        (Some(h), Some(d)) => (load_head(h)?, load_any(d, header)?),
        (head, data) => {
            let (train_set, test) = a.synth.task(a.seed)?;
            let test = match data {
                Some(d) => load_any(d, header)?,
                None => test,
            };
            let head = match head {
                Some(h) => load_head(h)?,
                None => {
                    let cfg = TrainConfig { seed: a.seed, eval_every: 0, ..TrainConfig::default() };
                    train(&train_set, None, &cfg)?.reference
                }
            };
            (head, test)
        }
    };
    let d = EpisodeSpec::default();
    let spec = EpisodeSpec {
        shots: a.shots,
        episodes: a.episodes,
        adapt_epochs: a.adapt_epochs,
        seed: a.seed,
        lr: a.adapt_lr.unwrap_or(d.lr),
        margin: d.margin,
    };
    let report = few_shot_adapt(&head, &test, &spec)?;
    let rr = |r: &dml_core::metrics::RetrievalReport| {
        let mut m = serde_json::Map::new();
        for (k, v) in &r.recall_at {
            m.insert(format!("recall@{k}"), json!(v));
        }
        for (c, v) in &r.map_at {
            m.insert(format!("map@{c}"), json!(v));
        }
        Value::Object(m)
    };
    emit(
        stdout,
        &json!({
            "shots": a.shots,
            "episodes": report.episodes.len(),
            "zero_shot": rr(&report.zero_shot),
            "adapted": rr(&report.adapted),
        }),
    )
}

fn load_head(path: &Path) -> Result<MlpHead> {
    let file: HeadFile = serde_json::from_slice(&fs::read(path)?)?;
    file.into_head()
}

fn gradcheck(a: &GradcheckArgs, stdout: &mut dyn Write) -> Result<()> {
    let objectives: Vec<GradObjective> = if a.objective == "all" {
        GradObjective::ALL.to_vec()
    } else {
        let names: Vec<&str> = GradObjective::ALL.iter().map(|o| o.name()).collect();
        let obj = GradObjective::from_name(&a.objective).ok_or_else(|| {
            ToolError::Usage(format!("unknown objective {:?}; one of all, {}", a.objective, names.join(", ")))
        })?;
        vec![obj]
    };
    let mut failed = Vec::new();
    let mut results = Vec::new();
    for obj in objectives {
        let r = grad_check(obj, a.trials, a.seed);
        let passed = r.passed(a.tol);
        if !passed {
            failed.push(obj.name());
        }
        let blocks: serde_json::Map<String, Value> =
            r.blocks.iter().map(|b| (b.block.clone(), json!(b.max_rel_error))).collect();
        results.push(json!({
            "objective": obj.name(),
            "trials": r.trials,
            "redrawn": r.redrawn,
            "max_rel_error": r.max_rel_error(),
            "blocks": blocks,
            "failures": r.failures,
            "passed": passed,
        }));
    }
    emit(stdout, &json!({ "tol": a.tol, "results": results }))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(dml_core::Error::NumericalFailure(format!("gradient check failed for {}", failed.join(", "))).into())
    }
}

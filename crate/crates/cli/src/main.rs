//! `mtlgraph`: train, evaluate, transfer and inspect graph-connected
//! multi-task LSTM models.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or
//! checkpoint error, 3 numeric failure (including a failed gradient check).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use mtlgraph::checkpoint::{self, has_shared_encoder};
use mtlgraph::data::{build_vocab, gen_synthetic_tasks, load_task_dirs, Corpus, Split, SynthSpec, TaskDataset};
use mtlgraph::interpret::{
    export_alpha_topk, export_beta_matrix, to_jsonl, write_attn_tsv, write_topk_tsv, DEFAULT_TOPK,
};
use mtlgraph::suite::{run_suite, Scope, TOLERANCE};
use mtlgraph::train::{evaluate, train_loop, transfer_train, Exec, TrainConfig, TrainOutcome};
use mtlgraph::{CommMode, Error, Model, TaskInfo};

const USAGE: u8 = 1;
const DATA: u8 = 2;
const NUMERIC: u8 = 3;

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Failure { code: USAGE, msg: msg.into() }
    }

    fn data(msg: impl Into<String>) -> Self {
        Failure { code: DATA, msg: msg.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => USAGE,
            Error::Data(_) | Error::Parse { .. } | Error::Checkpoint(_) | Error::Io { .. } => DATA,
            Error::ShapeMismatch { .. } | Error::NumericOverflow { .. } | Error::Contract(_) => NUMERIC,
        };
        Failure { code, msg: e.to_string() }
    }
}

type CliResult = Result<(), Failure>;

#[derive(Parser)]
#[command(name = "mtlgraph", version, about = "Graph-connected multi-task LSTMs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on every task directory under --data.
    Train(TrainArgs),
    /// Print metrics of a checkpoint as JSON lines.
    Eval(EvalArgs),
    /// Train one held-out task over a frozen pretrained shared layer.
    Transfer(TransferArgs),
    /// Write attention weights for the sentences of an input file.
    ExportAttn(ExportArgs),
    /// Generate synthetic classification tasks.
    GenSynth(SynthArgs),
    /// Compare analytic gradients with finite differences.
    GradCheck(GradCheckArgs),
}

/// Flags that override fields of the TOML training config.
#[derive(Args)]
struct Overrides {
    /// Task communication: single, cg (complete graph) or sg (star graph).
    #[arg(long)]
    mode: Option<CommMode>,
    /// Seeds parameter init and batch order.
    #[arg(long)]
    seed: Option<u64>,
    /// Parameter-name prefix to hold fixed; repeatable.
    #[arg(long = "freeze", value_name = "PREFIX")]
    freeze: Vec<String>,
    /// Block gradients from messages into source tasks (complete graph).
    #[arg(long)]
    stop_grad_messages: bool,
    /// One attention reader shared by every task.
    #[arg(long)]
    shared_attention: bool,
    /// Star-graph readers only see shared positions up to the current one.
    #[arg(long)]
    causal_attention: bool,
    #[arg(long)]
    epochs: Option<usize>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    jobs: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.freeze.extend(self.freeze.iter().cloned());
        cfg.stop_grad_messages |= self.stop_grad_messages;
        cfg.shared_attention |= self.shared_attention;
        cfg.causal_attention |= self.causal_attention;
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(j) = self.jobs {
            cfg.jobs = j;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// TOML training config.
    #[arg(long)]
    config: PathBuf,
    /// Directory holding one subdirectory per task.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for model.ckpt, train_log.jsonl and config.resolved.toml.
    #[arg(long)]
    out: PathBuf,
    /// Use only the first N task directories (in name order).
    #[arg(long, value_name = "N")]
    tasks: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file.
    #[arg(long)]
    model: PathBuf,
    /// Directory with one subdirectory per task, named as in the checkpoint.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct TransferArgs {
    /// Checkpoint of a star-graph model.
    #[arg(long)]
    pretrained: PathBuf,
    /// Directory of the held-out task.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    /// Task name or index.
    #[arg(long, default_value = "0")]
    task: String,
    /// One whitespace-tokenized sentence per line.
    #[arg(long)]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Source tasks listed per token (complete graph).
    #[arg(long, default_value_t = DEFAULT_TOPK)]
    topk: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// TOML generator spec; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of tasks; overrides the spec.
    #[arg(long, value_name = "K")]
    tasks: Option<usize>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Component to check; repeatable. All components when omitted.
    #[arg(long)]
    scope: Vec<Scope>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Perturb the analytic gradient of this component (negative control).
    #[arg(long, hide = true)]
    corrupt: Option<Scope>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Transfer(a) => cmd_transfer(a),
        Command::ExportAttn(a) => cmd_export_attn(a),
        Command::GenSynth(a) => cmd_gen_synth(a),
        Command::GradCheck(a) => cmd_grad_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<TrainConfig, Failure> {
    if !path.is_file() {
        return Err(Failure::usage(format!("config file {} not found", path.display())));
    }
    let mut cfg = TrainConfig::load(path)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| Failure::data(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, contents).map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))
}

/// The resolved config, prefixed with comments naming the data it ran on.
fn resolved_config(cfg: &TrainConfig, data: &Path, tasks: &[String]) -> String {
    format!(
        "# data = {}\n# tasks = {}\n# config hash = {}\n{}",
        data.display(),
        tasks.join(","),
        cfg.hash(),
        cfg.to_toml()
    )
}

fn infos(data: &[TaskDataset]) -> Vec<TaskInfo> {
    data.iter()
        .map(|d| TaskInfo {
            name: d.name.clone(),
            kind: d.kind,
            labels: d.labels.clone(),
        })
        .collect()
}

fn report_best(outcome: &TrainOutcome) {
    for b in &outcome.best {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
        eprintln!(
            "{}: best epoch {} dev {} {} test {}",
            b.task,
            b.epoch,
            b.metric,
            fmt(b.dev),
            fmt(b.test)
        );
    }
}

fn write_run(out: &Path, outcome: &TrainOutcome, cfg: &TrainConfig, resolved: &str) -> CliResult {
    create_dir(out)?;
    checkpoint::save(&outcome.model, &cfg.hash(), &out.join("model.ckpt"))?;
    outcome.log.write(&out.join("train_log.jsonl"))?;
    write_file(&out.join("config.resolved.toml"), resolved)
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let cfg = load_config(&a.config, &a.overrides)?;
    if !a.data.is_dir() {
        return Err(Failure::data(format!("data directory {} not found", a.data.display())));
    }
    let mut corpora = load_task_dirs(&a.data)?;
    if let Some(n) = a.tasks {
        if n == 0 || n > corpora.len() {
            return Err(Failure::usage(format!(
                "--tasks {n} out of range: {} task directories found",
                corpora.len()
            )));
        }
        corpora.truncate(n);
    }
    if cfg.mode == CommMode::Cg && corpora.len() < 2 {
        return Err(Failure::usage("the complete graph needs at least 2 tasks"));
    }
    let vocab = build_vocab(&corpora.iter().collect::<Vec<_>>(), cfg.min_count)?;
    let data = corpora
        .iter()
        .enumerate()
        .map(|(k, c)| TaskDataset::index(k, c, &vocab, None))
        .collect::<mtlgraph::Result<Vec<_>>>()?;
    let model = Model::new(cfg.model_config(), vocab, infos(&data), cfg.seed)?;
    let outcome = train_loop(model, &data, &cfg)?;
    report_best(&outcome);
    let names: Vec<String> = data.iter().map(|d| d.name.clone()).collect();
    write_run(&a.out, &outcome, &cfg, &resolved_config(&cfg, &a.data, &names))
}

fn parse_split(s: &str) -> Result<Split, Failure> {
    Split::ALL
        .into_iter()
        .find(|sp| sp.name() == s)
        .ok_or_else(|| Failure::usage(format!("unknown split {s:?}")))
}

/// Indexes a task directory against a trained model's vocabulary and labels.
fn index_for(model: &Model, task: usize, dir: &Path) -> Result<TaskDataset, Failure> {
    let corpus = Corpus::load_dir(dir)?;
    let info = &model.tasks[task];
    if corpus.kind != info.kind {
        return Err(Failure::data(format!(
            "{}: task kind does not match the checkpoint",
            dir.display()
        )));
    }
    Ok(TaskDataset::index(task, &corpus, &model.vocab, Some(&info.labels))?)
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let split = parse_split(&a.split)?;
    let exec = Exec::new(a.jobs)?;
    let model = checkpoint::load(&a.model)?.model;
    for (k, info) in model.tasks.iter().enumerate() {
        let data = index_for(&model, k, &a.data.join(&info.name))?;
        let samples = data.split(split);
        if samples.is_empty() {
            return Err(Failure::data(format!("task {}: empty {} split", info.name, split.name())));
        }
        let eval = evaluate(&model, k, samples, &exec)?;
        for m in &eval.metrics {
            println!(
                "{}",
                json!({"task": info.name, "split": split.name(), "metric": m.name, "value": m.value})
            );
        }
    }
    Ok(())
}

fn cmd_transfer(a: TransferArgs) -> CliResult {
    let cfg = load_config(&a.config, &a.overrides)?;
    let pretrained = checkpoint::load(&a.pretrained)?.model;
    if !has_shared_encoder(&pretrained) {
        return Err(Failure::data(format!(
            "{} has no shared encoder (mode {}): transfer needs a star-graph checkpoint with shared/lstm parameters",
            a.pretrained.display(),
            pretrained.mode()
        )));
    }
    let corpus = Corpus::load_dir(&a.data)?;
    let target = TaskDataset::index(0, &corpus, &pretrained.vocab, None)?;
    let run = transfer_train(&pretrained, &target, &cfg)?;
    report_best(&run.outcome);
    write_run(
        &a.out,
        &run.outcome,
        &cfg,
        &resolved_config(&cfg, &a.data, std::slice::from_ref(&target.name)),
    )?;
    let report = json!({
        "pretrained": a.pretrained.display().to_string(),
        "frozen": run.outcome.model.shared_names(),
        "shared_before": run.shared_before,
        "shared_after": run.shared_after,
        "identical": run.shared_before == run.shared_after,
    });
    write_file(
        &a.out.join("frozen_report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    )?;
    if run.shared_before != run.shared_after {
        return Err(Failure {
            code: NUMERIC,
            msg: "frozen shared parameters changed during transfer".into(),
        });
    }
    Ok(())
}

fn resolve_task(model: &Model, task: &str) -> Result<usize, Failure> {
    if let Some(k) = model.tasks.iter().position(|t| t.name == task) {
        return Ok(k);
    }
    match task.parse::<usize>() {
        Ok(k) if k < model.num_tasks() => Ok(k),
        _ => Err(Failure::usage(format!("unknown task {task:?}"))),
    }
}

fn cmd_export_attn(a: ExportArgs) -> CliResult {
    if a.topk == 0 {
        return Err(Failure::usage("--topk must be at least 1"));
    }
    let model = checkpoint::load(&a.model)?.model;
    let task = resolve_task(&model, &a.task)?;
    if model.mode() == CommMode::Single {
        return Err(Failure::data("a single-task model records no attention"));
    }
    let text = fs::read_to_string(&a.input)
        .map_err(|e| Failure::data(format!("cannot read {}: {e}", a.input.display())))?;
    let mut exports = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let words: Vec<String> = line.split_whitespace().map(str::to_owned).collect();
        let tokens: Vec<usize> = words.iter().map(|w| model.vocab.id(w)).collect();
        let (_, trace) = model.predict(task, &tokens)?;
        let mut trace = trace.ok_or_else(|| Failure::data("model recorded no attention"))?;
        trace.tokens = words;
        exports.push(match model.mode() {
            CommMode::Cg => export_alpha_topk(&trace, a.topk.min(trace.sources.len()))?,
            _ => export_beta_matrix(&trace)?,
        });
    }
    create_dir(&a.out)?;
    let name = &model.tasks[task].name;
    write_file(&a.out.join(format!("{name}.attn.jsonl")), to_jsonl(&exports))?;
    match model.mode() {
        CommMode::Cg => {
            let names: Vec<String> = model.tasks.iter().map(|t| t.name.clone()).collect();
            write_file(&a.out.join(format!("{name}.topk.tsv")), write_topk_tsv(&exports, &names)?)
        }
        _ => write_file(&a.out.join(format!("{name}.attn.tsv")), write_attn_tsv(&exports)?),
    }
}

fn cmd_gen_synth(a: SynthArgs) -> CliResult {
    let mut spec = match &a.config {
        Some(p) if !p.is_file() => {
            return Err(Failure::usage(format!("spec file {} not found", p.display())))
        }
        Some(p) => SynthSpec::load(p)?,
        None => SynthSpec::default(),
    };
    if let Some(k) = a.tasks {
        spec.tasks = k;
        spec.relatedness.clear();
    }
    for corpus in gen_synthetic_tasks(&spec, a.seed)? {
        corpus.write_dir(&a.out.join(&corpus.name))?;
    }
    write_file(&a.out.join("synth.toml"), spec.to_toml())
}

fn cmd_grad_check(a: GradCheckArgs) -> CliResult {
    let scopes = if a.scope.is_empty() { Scope::ALL.to_vec() } else { a.scope };
    let results = run_suite(&scopes, a.seed, a.corrupt)?;
    let mut failed = Vec::new();
    for r in &results {
        println!(
            "{:<8} max relative error {:.3e} over {} scalars: {}",
            r.scope.name(),
            r.max_rel_error,
            r.scalars,
            if r.passed() { "ok" } else { "FAIL" }
        );
        if !r.passed() {
            failed.push(r.scope.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: NUMERIC,
            msg: format!("gradient check failed (tolerance {TOLERANCE:e}): {}", failed.join(", ")),
        })
    }
}

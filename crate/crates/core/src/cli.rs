//! Command-line front end.
//!
//! Exit codes: 0 success, 1 validation findings, 2 usage errors, 3 I/O
//! errors, 4 format or content errors.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    aggregate_tasks, read_task_scores, write_task_scores, Stat, TaskScoreTable,
};
use crate::corpus::{load_dataset, write_dataset};
use crate::dynamics::{read_traces, validate_traces, write_traces, TraceSet};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_threaded, render_table, CategoryMode, EvalReport};
use crate::jsonl;
use crate::mining;
use crate::perturb::{self, PerturbKind, PerturbationPlan};
use crate::scoring::{read_scores, score_dataset, write_scores, EpochMode, Method};
use crate::toytrain::{train_toy_full, HyperParams};

#[derive(Debug, Parser)]
#[command(
    name = "aedkit",
    version,
    about = "Annotation error detection from training dynamics"
)]
pub struct Cli {
    /// JSON config file with default flag values; explicit flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a dataset, and optionally a trace file against it.
    Validate(ValidateArgs),
    /// Inject synthetic errors into a clean dataset.
    Perturb(PerturbArgs),
    /// Train the toy model and record training-dynamics traces.
    Toytrain(ToytrainArgs),
    /// Compute error scores from traces.
    Score(ScoreArgs),
    /// Aggregate instance scores per (task, split).
    Aggregate(AggregateArgs),
    /// Evaluate scores against clean/error labels and print the AP table.
    Eval(EvalArgs),
    /// Compare two versions of a task corpus.
    Diff(DiffArgs),
    /// Build a labeled dataset from a version diff or from pair verdicts.
    Assemble(AssembleArgs),
    /// Pair each query instance with its best BM25 match in a corpus.
    Pair(PairArgs),
    /// Evaluate and write both the JSON report and the text table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Dataset JSONL file.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Trace JSONL file to check against the dataset.
    #[arg(long)]
    pub traces: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    /// Clean input dataset.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output dataset with split labels.
    #[arg(long)]
    pub out: PathBuf,
    /// Existing plan JSON; its seed is used.
    #[arg(long, conflicts_with_all = ["tasks_per_kind", "seed"])]
    pub plan: Option<PathBuf>,
    /// Sample this many tasks per error kind.
    #[arg(long, required_unless_present = "plan")]
    pub tasks_per_kind: Option<usize>,
    /// Error kinds to plan, in round-robin order.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "empty,flip,truncate,replace"
    )]
    pub kinds: Vec<KindArg>,
    /// Seed for task sampling and perturbation.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replacement outputs JSONL ({"id", "output"}) for replace assignments.
    #[arg(long)]
    pub replacements: Option<PathBuf>,
    /// Write the plan that was applied.
    #[arg(long)]
    pub plan_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Empty,
    Flip,
    Truncate,
    Replace,
}

impl From<KindArg> for PerturbKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Empty => PerturbKind::EmptyOutput,
            KindArg::Flip => PerturbKind::FlipOutput,
            KindArg::Truncate => PerturbKind::TruncateInput,
            KindArg::Replace => PerturbKind::ReplaceOutput,
        }
    }
}

#[derive(Debug, Args)]
pub struct ToytrainArgs {
    /// Dataset to train on.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output trace JSONL.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for initialization and shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training epochs (default 10).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Embedding size (default 16).
    #[arg(long)]
    pub dim: Option<usize>,
    /// Hidden layer size (default 32).
    #[arg(long)]
    pub hidden: Option<usize>,
    /// SGD learning rate (default 0.1).
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Trace JSONL file.
    #[arg(long)]
    pub traces: PathBuf,
    /// Output scores JSONL.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated methods: ppl, p_mu, p_min, aum (default all).
    #[arg(long)]
    pub methods: Option<String>,
    /// all, last or both (default both).
    #[arg(long)]
    pub epoch_mode: Option<String>,
    /// Worker threads (default 1); output is identical for any value.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    /// Instance scores from `score`.
    #[arg(long)]
    pub scores: PathBuf,
    /// Labeled dataset the scores belong to.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output task scores JSONL.
    #[arg(long)]
    pub out: PathBuf,
    /// mean, median or both (default both).
    #[arg(long)]
    pub stat: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalInputs {
    /// Labeled dataset.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Instance scores from `score`.
    #[arg(long)]
    pub scores: PathBuf,
    /// Task scores from `aggregate`, for task-level AP.
    #[arg(long)]
    pub task_scores: Option<PathBuf>,
    /// Negatives for per-category AP: global or paired (default global).
    #[arg(long)]
    pub category_mode: Option<String>,
    /// Worker threads (default 1).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub inputs: EvalInputs,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub inputs: EvalInputs,
    /// Machine-readable report.
    #[arg(long)]
    pub json: PathBuf,
    /// Human-readable table.
    #[arg(long)]
    pub text: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiffArgs {
    /// Older corpus version.
    #[arg(long)]
    pub old: PathBuf,
    /// Newer corpus version.
    #[arg(long)]
    pub new: PathBuf,
    /// Diff summary JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AssembleArgs {
    #[command(subcommand)]
    pub style: AssembleStyle,
}

#[derive(Debug, Subcommand)]
pub enum AssembleStyle {
    /// From two versions of a task corpus and a list of erroneous tasks.
    Versions {
        /// Older corpus version.
        #[arg(long)]
        old: PathBuf,
        /// Newer corpus version.
        #[arg(long)]
        new: PathBuf,
        /// File with one erroneous task id per line.
        #[arg(long)]
        err_tasks: PathBuf,
        /// Instances per task and split (default 64).
        #[arg(long)]
        cap: Option<usize>,
        /// Seed for sampling changed pairs.
        #[arg(long)]
        seed: Option<u64>,
        /// Output dataset.
        #[arg(long)]
        out: PathBuf,
    },
    /// From two corpora and human verdicts on their BM25 pairs.
    Verdicts {
        /// Left corpus of the judged pairs.
        #[arg(long)]
        left: PathBuf,
        /// Right corpus of the judged pairs.
        #[arg(long)]
        right: PathBuf,
        /// Verdicts JSONL.
        #[arg(long)]
        verdicts: PathBuf,
        /// Output dataset.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct PairArgs {
    /// Instances to find matches for.
    #[arg(long)]
    pub queries: PathBuf,
    /// Instances to search.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output pairs JSONL.
    #[arg(long)]
    pub out: PathBuf,
    /// Term-frequency saturation (default 1.2).
    #[arg(long)]
    pub k1: Option<f64>,
    /// Length normalization (default 0.75).
    #[arg(long)]
    pub b: Option<f64>,
}

/// Values a config file may supply. Every key is optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub dim: Option<usize>,
    pub hidden: Option<usize>,
    pub lr: Option<f64>,
    pub threads: Option<usize>,
    pub methods: Option<String>,
    pub epoch_mode: Option<String>,
    pub stat: Option<String>,
    pub category_mode: Option<String>,
    pub cap: Option<usize>,
    pub k1: Option<f64>,
    pub b: Option<f64>,
}

fn require_seed(flag: Option<u64>, config: &Config, command: &str) -> Result<u64> {
    flag.or(config.seed)
        .ok_or_else(|| Error::Usage(format!("`{command}` is randomized and requires --seed")))
}

fn parse_methods(s: &str) -> Result<Vec<Method>> {
    let methods: Vec<Method> = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if methods.is_empty() {
        return Err(Error::Usage("no methods given".into()));
    }
    Ok(methods)
}

fn parse_epoch_modes(s: &str) -> Result<Vec<EpochMode>> {
    match s {
        "both" => Ok(EpochMode::ALL.to_vec()),
        other => Ok(vec![other.parse()?]),
    }
}

fn parse_stats(s: &str) -> Result<Vec<Stat>> {
    match s {
        "both" => Ok(Stat::ALL.to_vec()),
        other => Ok(vec![other.parse()?]),
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: &Cli) -> Result<i32> {
    let config: Config = match &cli.config {
        Some(path) => jsonl::read_json(path).map_err(|e| match e {
            Error::Io { .. } => e,
            other => Error::Usage(format!("bad config: {other}")),
        })?,
        None => Config::default(),
    };
    match &cli.command {
        Command::Validate(a) => validate(a),
        Command::Perturb(a) => run_perturb(a, &config),
        Command::Toytrain(a) => run_toytrain(a, &config),
        Command::Score(a) => run_score(a, &config),
        Command::Aggregate(a) => run_aggregate(a, &config),
        Command::Eval(a) => {
            let report = run_eval(&a.inputs, &config)?;
            print!("{}", render_table(&report));
            if let Some(out) = &a.out {
                jsonl::write_json(out, &report)?;
            }
            Ok(0)
        }
        Command::Report(a) => {
            let report = run_eval(&a.inputs, &config)?;
            let table = render_table(&report);
            jsonl::write_json(&a.json, &report)?;
            std::fs::write(&a.text, &table).map_err(|e| Error::io(&a.text, e))?;
            print!("{table}");
            Ok(0)
        }
        Command::Diff(a) => run_diff(a),
        Command::Assemble(a) => run_assemble(a, &config),
        Command::Pair(a) => run_pair(a, &config),
    }
}

fn validate(a: &ValidateArgs) -> Result<i32> {
    let finding = |e: Error| -> Result<i32> {
        match e {
            Error::Io { .. } => Err(e),
            other => {
                println!("finding: {other}");
                Ok(1)
            }
        }
    };
    let ds = match load_dataset(&a.dataset) {
        Ok(ds) => ds,
        Err(e) => return finding(e),
    };
    let Some(trace_path) = &a.traces else {
        println!("ok: {} instances", ds.len());
        return Ok(0);
    };
    let ts: TraceSet = match read_traces(trace_path) {
        Ok(ts) => ts,
        Err(e) => return finding(e),
    };
    let report = validate_traces(&ts, &ds);
    if report.is_clean() {
        println!("ok: {} instances, {} traces", ds.len(), ts.len());
        return Ok(0);
    }
    for f in &report.findings {
        println!("finding: {f}");
    }
    Ok(1)
}

fn run_perturb(a: &PerturbArgs, config: &Config) -> Result<i32> {
    let ds = load_dataset(&a.dataset)?;
    let mut plan = match (&a.plan, a.tasks_per_kind) {
        (Some(path), _) => PerturbationPlan::load(path)?,
        (None, Some(n)) => {
            let seed = require_seed(a.seed, config, "perturb")?;
            let kinds: Vec<PerturbKind> = a.kinds.iter().map(|&k| k.into()).collect();
            perturb::plan_perturbations_for(&ds, &kinds, n, seed)?
        }
        (None, None) => return Err(Error::Usage("give --plan or --tasks-per-kind".into())),
    };
    if let Some(r) = &a.replacements {
        plan.replacements_path = Some(r.clone());
    }
    let needs_replacements = plan
        .assignments
        .iter()
        .any(|x| x.kind == PerturbKind::ReplaceOutput);
    if !needs_replacements {
        plan.replacements_path = None;
    }
    plan.validate().map_err(|e| Error::Usage(e.to_string()))?;
    let replacements = match &plan.replacements_path {
        Some(p) => Some(perturb::load_replacements(p)?),
        None => None,
    };
    let out = perturb::apply_plan(&ds, &plan, replacements.as_ref())?;
    write_dataset(&a.out, &out)?;
    if let Some(p) = &a.plan_out {
        plan.save(p)?;
    }
    Ok(0)
}

fn run_toytrain(a: &ToytrainArgs, c: &Config) -> Result<i32> {
    let seed = require_seed(a.seed, c, "toytrain")?;
    let defaults = HyperParams::default();
    let hp = HyperParams {
        dim: a.dim.or(c.dim).unwrap_or(defaults.dim),
        hidden: a.hidden.or(c.hidden).unwrap_or(defaults.hidden),
        lr: a.lr.or(c.lr).unwrap_or(defaults.lr),
        epochs: a.epochs.or(c.epochs).unwrap_or(defaults.epochs),
    };
    let ds = load_dataset(&a.dataset)?;
    let outcome = train_toy_full::<f64>(&ds, &hp, seed)?;
    for (e, loss) in outcome.epoch_losses.iter().enumerate() {
        eprintln!("epoch {:>3}  loss {loss:.6}", e + 1);
    }
    write_traces(&a.out, &outcome.traces)?;
    Ok(0)
}

fn run_score(a: &ScoreArgs, c: &Config) -> Result<i32> {
    let methods = parse_methods(
        a.methods
            .as_deref()
            .or(c.methods.as_deref())
            .unwrap_or("ppl,p_mu,p_min,aum"),
    )?;
    let modes = parse_epoch_modes(
        a.epoch_mode
            .as_deref()
            .or(c.epoch_mode.as_deref())
            .unwrap_or("both"),
    )?;
    let threads = a.threads.or(c.threads).unwrap_or(1);
    let ts: TraceSet = read_traces(&a.traces)?;
    if ts.is_empty() {
        return Err(Error::EmptySet("trace file has no records".into()));
    }
    let table = score_dataset(&ts, &methods, &modes, threads);
    write_scores(&a.out, &table)?;
    Ok(0)
}

fn run_aggregate(a: &AggregateArgs, c: &Config) -> Result<i32> {
    let stats = parse_stats(a.stat.as_deref().or(c.stat.as_deref()).unwrap_or("both"))?;
    let st = read_scores::<f64>(&a.scores)?;
    let ds = load_dataset(&a.dataset)?;
    let mut table = TaskScoreTable::new();
    for stat in stats {
        table.extend(aggregate_tasks(&st, &ds, stat)?);
    }
    write_task_scores(&a.out, &table)?;
    Ok(0)
}

fn run_eval(a: &EvalInputs, c: &Config) -> Result<EvalReport> {
    let mode: CategoryMode = a
        .category_mode
        .as_deref()
        .or(c.category_mode.as_deref())
        .unwrap_or("global")
        .parse()?;
    let threads = a.threads.or(c.threads).unwrap_or(1);
    let ds = load_dataset(&a.dataset)?;
    let st = read_scores::<f64>(&a.scores)?;
    let tst = a
        .task_scores
        .as_deref()
        .map(read_task_scores::<f64>)
        .transpose()?;
    let report = evaluate_threaded(&st, &ds, tst.as_ref(), mode, threads)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(report)
}

#[derive(Serialize)]
struct DiffPair<'a> {
    old_id: &'a str,
    new_id: &'a str,
    old_output: &'a str,
    new_output: &'a str,
}

#[derive(Serialize)]
struct DiffTask<'a> {
    task_id: &'a str,
    unchanged_count: usize,
    changed: Vec<DiffPair<'a>>,
}

#[derive(Serialize)]
struct DiffSummary<'a> {
    changed: Vec<DiffTask<'a>>,
    added: Vec<&'a str>,
    removed: Vec<&'a str>,
}

fn run_diff(a: &DiffArgs) -> Result<i32> {
    let old = load_dataset(&a.old)?;
    let new = load_dataset(&a.new)?;
    let diff = mining::diff_versions(&old, &new)?;
    let summary = DiffSummary {
        changed: diff
            .changed
            .iter()
            .map(|c| DiffTask {
                task_id: &c.task_id,
                unchanged_count: c.unchanged_count,
                changed: c
                    .changed
                    .iter()
                    .map(|(o, n)| DiffPair {
                        old_id: &o.id,
                        new_id: &n.id,
                        old_output: &o.output,
                        new_output: &n.output,
                    })
                    .collect(),
            })
            .collect(),
        added: diff.added.iter().map(|i| i.id.as_str()).collect(),
        removed: diff.removed.iter().map(|i| i.id.as_str()).collect(),
    };
    jsonl::write_json(&a.out, &summary)?;
    println!(
        "{} tasks changed, {} added, {} removed",
        summary.changed.len(),
        summary.added.len(),
        summary.removed.len()
    );
    Ok(0)
}

fn read_task_list(path: &Path) -> Result<BTreeSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect())
}

fn run_assemble(a: &AssembleArgs, c: &Config) -> Result<i32> {
    match &a.style {
        AssembleStyle::Versions {
            old,
            new,
            err_tasks,
            cap,
            seed,
            out,
        } => {
            let seed = require_seed(*seed, c, "assemble versions")?;
            let cap = cap.or(c.cap).unwrap_or(mining::DEFAULT_CAP);
            let old = load_dataset(old)?;
            let new = load_dataset(new)?;
            let err = read_task_list(err_tasks)?;
            let diff = mining::diff_versions(&old, &new)?;
            let ds = mining::assemble_sni_style(&old, &new, &diff, &err, cap, seed)?;
            write_dataset(out, &ds)?;
        }
        AssembleStyle::Verdicts {
            left,
            right,
            verdicts,
            out,
        } => {
            let left = load_dataset(left)?;
            let right = load_dataset(right)?;
            let verdicts = mining::load_verdicts(verdicts)?;
            let ds = mining::assemble_from_verdicts(&left, &right, &verdicts)?;
            write_dataset(out, &ds)?;
        }
    }
    Ok(0)
}

fn run_pair(a: &PairArgs, c: &Config) -> Result<i32> {
    let k1 = a.k1.or(c.k1).unwrap_or(mining::DEFAULT_K1);
    let b = a.b.or(c.b).unwrap_or(mining::DEFAULT_B);
    let queries = load_dataset(&a.queries)?;
    let corpus = load_dataset(&a.corpus)?;
    let pairs = mining::bm25_pair(&queries, &corpus, k1, b)?;
    mining::write_pairs(&a.out, &pairs)?;
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn method_and_mode_lists() {
        assert_eq!(
            parse_methods("p_mu, aum").unwrap(),
            vec![Method::PMu, Method::Aum]
        );
        assert!(parse_methods("").is_err());
        assert_eq!(parse_epoch_modes("both").unwrap().len(), 2);
        assert_eq!(
            parse_epoch_modes("last").unwrap(),
            vec![EpochMode::LastEpoch]
        );
        assert!(parse_epoch_modes("first").is_err());
    }

    #[test]
    fn seed_precedence() {
        let c = Config {
            seed: Some(4),
            ..Default::default()
        };
        assert_eq!(require_seed(Some(9), &c, "x").unwrap(), 9);
        assert_eq!(require_seed(None, &c, "x").unwrap(), 4);
        assert!(matches!(
            require_seed(None, &Config::default(), "x"),
            Err(Error::Usage(_))
        ));
    }
}

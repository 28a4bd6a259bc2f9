//! Ranking evaluation: how well a score separates known-erroneous from
//! known-clean instances, measured by average precision.
//!
//! Unknown instances never take part. Ties are handled by evaluating
//! precision and recall only at distinct score thresholds, so tied items
//! share one point of the precision-recall curve and the result does not
//! depend on input order.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aggregation::{Stat, TaskScoreTable};
use crate::corpus::{Dataset, ErrorCategory, Instance, SplitLabel};
use crate::error::{Error, Result};
use crate::scalar::{cmp_desc, Scalar};
use crate::scoring::{EpochMode, Method, ScoreTable};

/// Meta key linking the two instances of a judged pair.
pub const PAIR_META_KEY: &str = "pair_id";

/// Average precision of a ranking by descending score.
pub fn average_precision<T: Scalar>(scored: &[(T, bool)]) -> Result<T> {
    let n_pos = scored.iter().filter(|(_, y)| *y).count();
    if n_pos == 0 {
        return Err(Error::EmptySet(
            "average precision needs at least one positive".into(),
        ));
    }
    if n_pos == scored.len() {
        return Err(Error::EmptySet(
            "average precision needs at least one negative".into(),
        ));
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| cmp_desc(&a.0, &b.0));

    let total = T::from_count(n_pos);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = T::zero();
    let mut ap = T::zero();
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = T::from_count(tp) / total;
        let precision = T::from_count(tp) / T::from_count(tp + fp);
        ap = ap + (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Expected AP of a label-independent ranking, estimated by prevalence.
pub fn random_baseline(n_pos: usize, n_neg: usize) -> Result<f64> {
    if n_pos == 0 {
        return Err(Error::EmptySet(
            "random baseline needs at least one positive".into(),
        ));
    }
    Ok(n_pos as f64 / (n_pos + n_neg) as f64)
}

/// Which clean instances serve as negatives for a per-category evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CategoryMode {
    /// Every clean instance.
    #[default]
    Global,
    /// Clean instances sharing a task with a positive, or pair-linked to one.
    Paired,
}

impl FromStr for CategoryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(CategoryMode::Global),
            "paired" => Ok(CategoryMode::Paired),
            _ => Err(Error::Usage(format!("unknown category mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApCell {
    pub ap: f64,
    pub random_baseline: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl ApCell {
    fn compute<T: Scalar>(scored: &[(T, bool)]) -> Result<Self> {
        let n_pos = scored.iter().filter(|(_, y)| *y).count();
        let n_neg = scored.len() - n_pos;
        let ap = average_precision(scored)?.to_f64_lossy();
        Ok(ApCell {
            ap,
            random_baseline: random_baseline(n_pos, n_neg)?,
            n_pos,
            n_neg,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallRow {
    pub method: Method,
    pub epoch_mode: EpochMode,
    #[serde(flatten)]
    pub cell: ApCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: ErrorCategory,
    pub method: Method,
    pub epoch_mode: EpochMode,
    #[serde(flatten)]
    pub cell: ApCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub method: Method,
    pub epoch_mode: EpochMode,
    pub stat: Stat,
    #[serde(flatten)]
    pub cell: ApCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub category_mode: CategoryMode,
    pub tie_policy: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Vec<OverallRow>,
    pub per_category: Vec<CategoryRow>,
    pub task_level: Vec<TaskRow>,
    pub options: EvalOptions,
    /// Cells that could not be evaluated (no positives or no negatives).
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn overall(&self, method: Method, mode: EpochMode) -> Option<&ApCell> {
        self.overall
            .iter()
            .find(|r| r.method == method && r.epoch_mode == mode)
            .map(|r| &r.cell)
    }

    pub fn category(
        &self,
        category: ErrorCategory,
        method: Method,
        mode: EpochMode,
    ) -> Option<&ApCell> {
        self.per_category
            .iter()
            .find(|r| r.category == category && r.method == method && r.epoch_mode == mode)
            .map(|r| &r.cell)
    }

    pub fn task(&self, method: Method, mode: EpochMode, stat: Stat) -> Option<&ApCell> {
        self.task_level
            .iter()
            .find(|r| r.method == method && r.epoch_mode == mode && r.stat == stat)
            .map(|r| &r.cell)
    }
}

fn paired_negatives<'a>(positives: &[&'a Instance], clean: &[&'a Instance]) -> Vec<&'a Instance> {
    let tasks: HashSet<&str> = positives
        .iter()
        .filter_map(|p| p.task_id.as_deref())
        .collect();
    let pos_ids: HashSet<&str> = positives.iter().map(|p| p.id.as_str()).collect();
    let linked: HashSet<&str> = positives
        .iter()
        .filter_map(|p| p.meta.get(PAIR_META_KEY).map(String::as_str))
        .collect();
    clean
        .iter()
        .copied()
        .filter(|c| {
            c.task_id.as_deref().is_some_and(|t| tasks.contains(t))
                || linked.contains(c.id.as_str())
                || c.meta
                    .get(PAIR_META_KEY)
                    .is_some_and(|other| pos_ids.contains(other.as_str()))
        })
        .collect()
}

fn labeled_scores<T: Scalar>(
    column: &BTreeMap<&str, T>,
    positives: &[&Instance],
    negatives: &[&Instance],
) -> Vec<(T, bool)> {
    let pos = positives
        .iter()
        .filter_map(|i| column.get(i.id.as_str()).map(|&s| (s, true)));
    let neg = negatives
        .iter()
        .filter_map(|i| column.get(i.id.as_str()).map(|&s| (s, false)));
    pos.chain(neg).collect()
}

/// Evaluates every configuration present in `st` (and `tst`, if given).
pub fn evaluate<T: Scalar>(
    st: &ScoreTable<T>,
    ds: &Dataset,
    tst: Option<&TaskScoreTable<T>>,
    mode: CategoryMode,
) -> Result<EvalReport> {
    evaluate_threaded(st, ds, tst, mode, 1)
}

enum Cell {
    Overall(OverallRow),
    Category(CategoryRow),
    Task(TaskRow),
}

/// [`evaluate`] with report cells computed on up to `threads` workers.
/// The report is identical for every thread count.
pub fn evaluate_threaded<T: Scalar>(
    st: &ScoreTable<T>,
    ds: &Dataset,
    tst: Option<&TaskScoreTable<T>>,
    mode: CategoryMode,
    threads: usize,
) -> Result<EvalReport> {
    let clean: Vec<&Instance> = ds
        .instances()
        .iter()
        .filter(|i| i.split == SplitLabel::Clean)
        .collect();
    let error: Vec<&Instance> = ds
        .instances()
        .iter()
        .filter(|i| i.split == SplitLabel::Error)
        .collect();
    if clean.is_empty() || error.is_empty() {
        return Err(Error::EmptySet(format!(
            "evaluation needs clean and error instances (found {} clean, {} error)",
            clean.len(),
            error.len()
        )));
    }

    let categories: BTreeSet<ErrorCategory> = error.iter().filter_map(|i| i.category).collect();
    let category_sets: Vec<(ErrorCategory, Vec<&Instance>, Vec<&Instance>)> = categories
        .into_iter()
        .map(|c| {
            let pos: Vec<&Instance> = error
                .iter()
                .copied()
                .filter(|i| i.category == Some(c))
                .collect();
            let neg = match mode {
                CategoryMode::Global => clean.clone(),
                CategoryMode::Paired => paired_negatives(&pos, &clean),
            };
            (c, pos, neg)
        })
        .collect();

    // one job per instance-level configuration, then one per task-level configuration
    let configs = st.configurations();
    let task_configs = tst.map(TaskScoreTable::configurations).unwrap_or_default();
    let instance_job =
        |method: Method, epoch_mode: EpochMode| -> Vec<std::result::Result<Cell, String>> {
            let column = st.column(method, epoch_mode);
            let mut out = Vec::with_capacity(1 + category_sets.len());
            out.push(
                ApCell::compute(&labeled_scores(&column, &error, &clean))
                    .map(|cell| {
                        Cell::Overall(OverallRow {
                            method,
                            epoch_mode,
                            cell,
                        })
                    })
                    .map_err(|e| format!("overall {method}/{epoch_mode}: {e}")),
            );
            for (category, pos, neg) in &category_sets {
                out.push(
                    ApCell::compute(&labeled_scores(&column, pos, neg))
                        .map(|cell| {
                            Cell::Category(CategoryRow {
                                category: *category,
                                method,
                                epoch_mode,
                                cell,
                            })
                        })
                        .map_err(|e| format!("category {category} {method}/{epoch_mode}: {e}")),
                );
            }
            out
        };
    let task_job = |method: Method,
                    epoch_mode: EpochMode,
                    stat: Stat|
     -> Vec<std::result::Result<Cell, String>> {
        let Some(tst) = tst else { return Vec::new() };
        let scored: Vec<(T, bool)> = tst
            .iter()
            .filter(|(k, _)| k.method == method && k.epoch_mode == epoch_mode && k.stat == stat)
            .filter_map(|(k, v)| match k.split {
                SplitLabel::Error => Some((v, true)),
                SplitLabel::Clean => Some((v, false)),
                SplitLabel::Unknown => None,
            })
            .collect();
        vec![ApCell::compute(&scored)
            .map(|cell| {
                Cell::Task(TaskRow {
                    method,
                    epoch_mode,
                    stat,
                    cell,
                })
            })
            .map_err(|e| format!("task {stat} {method}/{epoch_mode}: {e}"))]
    };
    let run_job = |job: usize| {
        if job < configs.len() {
            let (m, e) = configs[job];
            instance_job(m, e)
        } else {
            let (m, e, s) = task_configs[job - configs.len()];
            task_job(m, e, s)
        }
    };
    let jobs: Vec<usize> = (0..configs.len() + task_configs.len()).collect();
    let threads = threads.max(1);
    let results: Vec<std::result::Result<Cell, String>> = if threads == 1 || jobs.len() < 2 {
        jobs.iter().flat_map(|&j| run_job(j)).collect()
    } else {
        let chunk_len = jobs.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = jobs
                .chunks(chunk_len)
                .map(|chunk| s.spawn(|| chunk.iter().flat_map(|&j| run_job(j)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };

    let mut report = EvalReport {
        overall: Vec::new(),
        per_category: Vec::new(),
        task_level: Vec::new(),
        options: EvalOptions {
            category_mode: mode,
            tie_policy: "grouped_thresholds".into(),
        },
        warnings: Vec::new(),
    };
    for r in results {
        match r {
            Ok(Cell::Overall(row)) => report.overall.push(row),
            Ok(Cell::Category(row)) => report.per_category.push(row),
            Ok(Cell::Task(row)) => report.task_level.push(row),
            Err(w) => report.warnings.push(w),
        }
    }
    Ok(report)
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

/// Renders the report as a plain-text table: one column per method, one row
/// per (granularity, epoch mode), values as percentages with one decimal.
pub fn render_table(report: &EvalReport) -> String {
    struct Row {
        label: String,
        mode: EpochMode,
        cells: BTreeMap<Method, ApCell>,
    }
    let mut rows: Vec<Row> = Vec::new();
    let mut push = |label: String, mode: EpochMode, method: Method, cell: ApCell| match rows
        .iter_mut()
        .find(|r| r.label == label && r.mode == mode)
    {
        Some(r) => {
            r.cells.insert(method, cell);
        }
        None => rows.push(Row {
            label,
            mode,
            cells: BTreeMap::from([(method, cell)]),
        }),
    };
    for r in &report.overall {
        push("overall".into(), r.epoch_mode, r.method, r.cell);
    }
    for r in &report.per_category {
        push(r.category.to_string(), r.epoch_mode, r.method, r.cell);
    }
    for r in &report.task_level {
        push(format!("task {}", r.stat), r.epoch_mode, r.method, r.cell);
    }

    let mut out = String::new();
    let mode = match report.options.category_mode {
        CategoryMode::Global => "global",
        CategoryMode::Paired => "paired",
    };
    let _ = writeln!(out, "AP in percent; category mode: {mode}");
    let _ = write!(
        out,
        "{:<22}{:<6}{:>7}{:>7}{:>7}",
        "", "epoch", "n_pos", "n_neg", "rand"
    );
    for m in Method::ALL {
        let _ = write!(out, "{:>7}", m.label());
    }
    out.push('\n');
    for row in rows {
        let first = row.cells.values().next().expect("row has a cell");
        let _ = write!(
            out,
            "{:<22}{:<6}{:>7}{:>7}{:>7}",
            row.label,
            row.mode.as_str(),
            first.n_pos,
            first.n_neg,
            pct(first.random_baseline)
        );
        for m in Method::ALL {
            let value = row
                .cells
                .get(&m)
                .map_or_else(|| "-".to_string(), |c| pct(c.ap));
            let _ = write!(out, "{value:>7}");
        }
        out.push('\n');
    }
    for w in &report.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    out
}

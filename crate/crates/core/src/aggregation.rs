//! Task-level scores: instance scores summarized per (task, split) group.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, SplitLabel};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::scalar::Scalar;
use crate::scoring::{EpochMode, Method, ScoreTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stat {
    Mean,
    Median,
}

impl Stat {
    pub const ALL: [Stat; 2] = [Stat::Mean, Stat::Median];

    pub fn as_str(self) -> &'static str {
        match self {
            Stat::Mean => "mean",
            Stat::Median => "median",
        }
    }

    pub fn apply<T: Scalar>(self, values: &[T]) -> T {
        match self {
            Stat::Mean => mean(values),
            Stat::Median => median(values),
        }
    }
}

impl fmt::Display for Stat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Stat::Mean),
            "median" => Ok(Stat::Median),
            _ => Err(Error::Usage(format!("unknown stat `{s}`"))),
        }
    }
}

/// Arithmetic mean, accumulated left to right. Empty input is a caller bug.
pub fn mean<T: Scalar>(values: &[T]) -> T {
    assert!(!values.is_empty(), "mean of empty group");
    let mut sum = T::zero();
    for &v in values {
        sum = sum + v;
    }
    sum / T::from_count(values.len())
}

/// Median; even-sized groups take the midpoint of the two central values.
pub fn median<T: Scalar>(values: &[T]) -> T {
    assert!(!values.is_empty(), "median of empty group");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / T::lit(2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskKey {
    pub task_id: String,
    pub split: SplitLabel,
    pub method: Method,
    pub epoch_mode: EpochMode,
    pub stat: Stat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskScoreTable<T = f64> {
    entries: BTreeMap<TaskKey, T>,
}

impl<T> Default for TaskScoreTable<T> {
    fn default() -> Self {
        TaskScoreTable {
            entries: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> TaskScoreTable<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: TaskKey, score: T) {
        self.entries.insert(key, score);
    }

    pub fn get(&self, key: &TaskKey) -> Option<T> {
        self.entries.get(key).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TaskKey, T)> {
        self.entries.iter().map(|(k, &v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Merges another table; entries of `other` win on key collision.
    pub fn extend(&mut self, other: TaskScoreTable<T>) {
        self.entries.extend(other.entries);
    }

    /// Distinct (method, epoch mode, stat) triples present, ascending.
    pub fn configurations(&self) -> Vec<(Method, EpochMode, Stat)> {
        let mut out: Vec<_> = self
            .entries
            .keys()
            .map(|k| (k.method, k.epoch_mode, k.stat))
            .collect();
        out.sort();
        out.dedup();
        out
    }
}

/// Groups scored instances by (task, split) and summarizes each group with `stat`.
pub fn aggregate_tasks<T: Scalar>(
    st: &ScoreTable<T>,
    ds: &Dataset,
    stat: Stat,
) -> Result<TaskScoreTable<T>> {
    let mut groups: BTreeMap<(String, SplitLabel, Method, EpochMode), Vec<T>> = BTreeMap::new();
    for (id, method, mode, score) in st.iter() {
        let inst = ds
            .get(id)
            .ok_or_else(|| Error::UnknownInstance(id.to_owned()))?;
        let task = inst
            .task_id
            .clone()
            .ok_or_else(|| Error::MissingTaskId(id.to_owned()))?;
        groups
            .entry((task, inst.split, method, mode))
            .or_default()
            .push(score);
    }
    let mut table = TaskScoreTable::new();
    for ((task_id, split, method, epoch_mode), values) in groups {
        table.insert(
            TaskKey {
                task_id,
                split,
                method,
                epoch_mode,
                stat,
            },
            stat.apply(&values),
        );
    }
    Ok(table)
}

#[derive(Debug, Serialize, Deserialize)]
struct TaskScoreLine {
    task_id: String,
    split: SplitLabel,
    method: Method,
    epoch_mode: EpochMode,
    stat: Stat,
    score: f64,
}

pub fn write_task_scores<T: Scalar>(path: &Path, table: &TaskScoreTable<T>) -> Result<()> {
    let lines: Vec<TaskScoreLine> = table
        .iter()
        .map(|(k, v)| TaskScoreLine {
            task_id: k.task_id.clone(),
            split: k.split,
            method: k.method,
            epoch_mode: k.epoch_mode,
            stat: k.stat,
            score: v.to_f64_lossy(),
        })
        .collect();
    jsonl::write_file(path, &lines)
}

pub fn read_task_scores<T: Scalar>(path: &Path) -> Result<TaskScoreTable<T>> {
    let mut table = TaskScoreTable::new();
    for (_, l) in jsonl::read_file::<TaskScoreLine>(path)? {
        table.insert(
            TaskKey {
                task_id: l.task_id,
                split: l.split,
                method: l.method,
                epoch_mode: l.epoch_mode,
                stat: l.stat,
            },
            T::lit(l.score),
        );
    }
    Ok(table)
}

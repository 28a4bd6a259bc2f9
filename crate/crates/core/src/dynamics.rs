//! Training-dynamics traces: per-epoch, per-output-token probabilities.
//!
//! For every instance a trace stores two `E x L` matrices. `p[e][l]` is the
//! probability the model assigned to the gold token at position `l` after
//! epoch `e`; `q[e][l]` is the largest probability assigned to any other
//! token at that position. Values are kept exactly as read; scorers clamp
//! `p` before taking logarithms.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::jsonl;
use crate::scalar::Scalar;

/// Lower clamp applied to gold-token probabilities before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Slack allowed on `p + q <= 1`.
pub const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord<T = f64> {
    pub instance_id: String,
    pub tokens: Vec<String>,
    pub p: Vec<Vec<T>>,
    pub q: Vec<Vec<T>>,
}

impl<T: Scalar> TraceRecord<T> {
    /// Builds a record, rejecting empty or ragged matrices.
    pub fn new(
        instance_id: impl Into<String>,
        tokens: Vec<String>,
        p: Vec<Vec<T>>,
        q: Vec<Vec<T>>,
    ) -> Result<Self> {
        let rec = TraceRecord {
            instance_id: instance_id.into(),
            tokens,
            p,
            q,
        };
        if let Some(message) = rec.shape_problem() {
            return Err(Error::TraceShape {
                id: rec.instance_id,
                message,
            });
        }
        Ok(rec)
    }

    pub fn epochs(&self) -> usize {
        self.p.len()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The same record restricted to its final epoch.
    pub fn last_epoch_only(&self) -> Self {
        TraceRecord {
            instance_id: self.instance_id.clone(),
            tokens: self.tokens.clone(),
            p: self.p.last().cloned().into_iter().collect(),
            q: self.q.last().cloned().into_iter().collect(),
        }
    }

    fn shape_problem(&self) -> Option<String> {
        let len = self.tokens.len();
        if len == 0 {
            return Some("no output tokens".into());
        }
        if self.p.is_empty() {
            return Some("no epochs".into());
        }
        if self.p.len() != self.q.len() {
            return Some(format!(
                "p has {} epochs but q has {}",
                self.p.len(),
                self.q.len()
            ));
        }
        for (e, (prow, qrow)) in self.p.iter().zip(&self.q).enumerate() {
            if prow.len() != len || qrow.len() != len {
                return Some(format!(
                    "epoch {e}: rows have lengths p={} q={}, expected {len}",
                    prow.len(),
                    qrow.len()
                ));
            }
        }
        None
    }

    fn to_raw(&self) -> RawTrace {
        let conv = |m: &Vec<Vec<T>>| -> Vec<Vec<f64>> {
            m.iter()
                .map(|row| row.iter().map(|v| v.to_f64_lossy()).collect())
                .collect()
        };
        RawTrace {
            instance_id: self.instance_id.clone(),
            tokens: self.tokens.clone(),
            epochs: self.epochs(),
            p: conv(&self.p),
            q: conv(&self.q),
        }
    }

    fn from_raw(raw: RawTrace) -> Result<Self> {
        if raw.epochs != raw.p.len() {
            return Err(Error::TraceShape {
                id: raw.instance_id,
                message: format!(
                    "declares {} epochs but p has {} rows",
                    raw.epochs,
                    raw.p.len()
                ),
            });
        }
        let conv = |m: Vec<Vec<f64>>| -> Vec<Vec<T>> {
            m.into_iter()
                .map(|row| row.into_iter().map(T::lit).collect())
                .collect()
        };
        TraceRecord::new(raw.instance_id, raw.tokens, conv(raw.p), conv(raw.q))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawTrace {
    instance_id: String,
    tokens: Vec<String>,
    epochs: usize,
    p: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
}

/// All traces of one training run, keyed by instance id.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet<T = f64> {
    records: BTreeMap<String, TraceRecord<T>>,
    epochs: Option<usize>,
}

impl<T> Default for TraceSet<T> {
    fn default() -> Self {
        TraceSet {
            records: BTreeMap::new(),
            epochs: None,
        }
    }
}

impl<T: Scalar> TraceSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: impl IntoIterator<Item = TraceRecord<T>>) -> Result<Self> {
        let mut set = Self::new();
        for rec in records {
            set.insert(rec)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, rec: TraceRecord<T>) -> Result<()> {
        let e = rec.epochs();
        match self.epochs {
            Some(expected) if expected != e => {
                return Err(Error::InconsistentEpochs {
                    id: rec.instance_id,
                    expected,
                    found: e,
                })
            }
            _ => self.epochs = Some(e),
        }
        if self.records.contains_key(&rec.instance_id) {
            return Err(Error::TraceShape {
                id: rec.instance_id,
                message: "duplicate instance_id".into(),
            });
        }
        self.records.insert(rec.instance_id.clone(), rec);
        Ok(())
    }

    /// Common epoch count, `None` for an empty set.
    pub fn epochs(&self) -> Option<usize> {
        self.epochs
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&TraceRecord<T>> {
        self.records.get(id)
    }

    /// Records in ascending instance id order.
    pub fn records(&self) -> impl Iterator<Item = &TraceRecord<T>> {
        self.records.values()
    }
}

pub fn read_traces_from<T: Scalar, R: BufRead>(reader: R) -> Result<TraceSet<T>> {
    let mut set = TraceSet::new();
    for (line, raw) in jsonl::read_records::<RawTrace, _>(reader)? {
        let rec = TraceRecord::from_raw(raw).map_err(|e| Error::Malformed {
            line,
            message: e.to_string(),
        })?;
        set.insert(rec).map_err(|e| Error::Malformed {
            line,
            message: e.to_string(),
        })?;
    }
    Ok(set)
}

pub fn read_traces<T: Scalar>(path: &Path) -> Result<TraceSet<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_traces_from(std::io::BufReader::new(file))
}

pub fn write_traces_to<T: Scalar, W: Write>(writer: W, ts: &TraceSet<T>) -> Result<()> {
    let raws: Vec<RawTrace> = ts.records().map(TraceRecord::to_raw).collect();
    jsonl::write_records(writer, &raws)
}

pub fn write_traces<T: Scalar>(path: &Path, ts: &TraceSet<T>) -> Result<()> {
    let raws: Vec<RawTrace> = ts.records().map(TraceRecord::to_raw).collect();
    jsonl::write_file(path, &raws)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Finding {
    /// A trace without a matching dataset instance.
    OrphanTrace { instance_id: String },
    /// A dataset instance without a trace.
    MissingTrace { instance_id: String },
    Shape {
        instance_id: String,
        message: String,
    },
    Range {
        instance_id: String,
        matrix: char,
        epoch: usize,
        position: usize,
        value: f64,
    },
    SumExceedsOne {
        instance_id: String,
        epoch: usize,
        position: usize,
        sum: f64,
    },
    /// Empty outputs must be traced as the end-of-sequence token alone.
    EmptyOutputLength { instance_id: String, length: usize },
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Finding::OrphanTrace { instance_id } => {
                write!(f, "{instance_id}: trace has no dataset instance")
            }
            Finding::MissingTrace { instance_id } => {
                write!(f, "{instance_id}: dataset instance has no trace")
            }
            Finding::Shape {
                instance_id,
                message,
            } => write!(f, "{instance_id}: shape: {message}"),
            Finding::Range {
                instance_id,
                matrix,
                epoch,
                position,
                value,
            } => write!(
                f,
                "{instance_id}: {matrix}[{epoch}][{position}] = {value} out of range"
            ),
            Finding::SumExceedsOne {
                instance_id,
                epoch,
                position,
                sum,
            } => write!(
                f,
                "{instance_id}: p+q at [{epoch}][{position}] = {sum} exceeds 1"
            ),
            Finding::EmptyOutputLength {
                instance_id,
                length,
            } => write!(
                f,
                "{instance_id}: empty output traced with {length} tokens, expected 1"
            ),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Checks a trace set against a dataset. Never fails; every problem becomes a finding.
pub fn validate_traces<T: Scalar>(ts: &TraceSet<T>, ds: &Dataset) -> ValidationReport {
    let mut findings = Vec::new();
    for rec in ts.records() {
        let id = &rec.instance_id;
        match ds.get(id) {
            None => findings.push(Finding::OrphanTrace {
                instance_id: id.clone(),
            }),
            Some(inst) if inst.output.is_empty() && rec.len() != 1 => {
                findings.push(Finding::EmptyOutputLength {
                    instance_id: id.clone(),
                    length: rec.len(),
                })
            }
            Some(_) => {}
        }
        if let Some(message) = rec.shape_problem() {
            findings.push(Finding::Shape {
                instance_id: id.clone(),
                message,
            });
            continue;
        }
        for (e, (prow, qrow)) in rec.p.iter().zip(&rec.q).enumerate() {
            for (l, (&p, &q)) in prow.iter().zip(qrow).enumerate() {
                let (p, q) = (p.to_f64_lossy(), q.to_f64_lossy());
                // NaN fails both comparisons and is reported
                if !(0.0..=1.0).contains(&p) {
                    findings.push(Finding::Range {
                        instance_id: id.clone(),
                        matrix: 'p',
                        epoch: e,
                        position: l,
                        value: p,
                    });
                }
                if !(0.0..=1.0).contains(&q) {
                    findings.push(Finding::Range {
                        instance_id: id.clone(),
                        matrix: 'q',
                        epoch: e,
                        position: l,
                        value: q,
                    });
                }
                if p + q > 1.0 + SUM_TOLERANCE {
                    findings.push(Finding::SumExceedsOne {
                        instance_id: id.clone(),
                        epoch: e,
                        position: l,
                        sum: p + q,
                    });
                }
            }
        }
    }
    let traced: BTreeSet<&str> = ts.records().map(|r| r.instance_id.as_str()).collect();
    for inst in ds.instances() {
        if !traced.contains(inst.id.as_str()) {
            findings.push(Finding::MissingTrace {
                instance_id: inst.id.clone(),
            });
        }
    }
    ValidationReport { findings }
}

//! Error scores computed from training dynamics. Every score is oriented so
//! that a higher value means the instance is more likely to be erroneous.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dynamics::{TraceRecord, TraceSet, PROB_FLOOR};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Epoch-averaged perplexity.
    #[serde(rename = "ppl")]
    Ppl,
    /// Negative mean gold-token probability.
    #[serde(rename = "p_mu")]
    PMu,
    /// Negative minimum gold-token probability.
    #[serde(rename = "p_min")]
    PMin,
    /// Area under the margin, averaged over tokens.
    #[serde(rename = "aum")]
    Aum,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ppl, Method::PMu, Method::PMin, Method::Aum];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ppl => "ppl",
            Method::PMu => "p_mu",
            Method::PMin => "p_min",
            Method::Aum => "aum",
        }
    }

    /// Column header used in rendered tables.
    pub fn label(self) -> &'static str {
        match self {
            Method::Ppl => "PPL",
            Method::PMu => "Pmu",
            Method::PMin => "Pmin",
            Method::Aum => "AUM",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "unknown method `{s}` (expected ppl, p_mu, p_min or aum)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EpochMode {
    #[serde(rename = "all")]
    AllEpochs,
    #[serde(rename = "last")]
    LastEpoch,
}

impl EpochMode {
    pub const ALL: [EpochMode; 2] = [EpochMode::AllEpochs, EpochMode::LastEpoch];

    pub fn as_str(self) -> &'static str {
        match self {
            EpochMode::AllEpochs => "all",
            EpochMode::LastEpoch => "last",
        }
    }
}

impl fmt::Display for EpochMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EpochMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(EpochMode::AllEpochs),
            "last" => Ok(EpochMode::LastEpoch),
            _ => Err(Error::Usage(format!("unknown epoch mode `{s}`"))),
        }
    }
}

/// Per-epoch statistic of one trace row.
fn epoch_value<T: Scalar>(method: Method, p: &[T], q: &[T]) -> T {
    let floor = T::lit(PROB_FLOOR);
    let clamp = |v: T| v.max(floor).min(T::one());
    let len = T::from_count(p.len());
    match method {
        Method::Ppl => {
            let mut log_sum = T::zero();
            for &v in p {
                log_sum = log_sum + clamp(v).ln();
            }
            (-log_sum / len).exp()
        }
        Method::PMu => {
            let mut sum = T::zero();
            for &v in p {
                sum = sum + clamp(v);
            }
            sum / len
        }
        Method::PMin => p.iter().copied().map(clamp).fold(T::one(), T::min),
        Method::Aum => {
            let mut sum = T::zero();
            for (&pv, &qv) in p.iter().zip(q) {
                sum = sum + (qv - clamp(pv));
            }
            sum / len
        }
    }
}

/// Scores one trace. Precondition: the record satisfies the trace shape invariants.
pub fn score_instance<T: Scalar>(rec: &TraceRecord<T>, method: Method, mode: EpochMode) -> T {
    let epochs = rec.epochs();
    let first = match mode {
        EpochMode::AllEpochs => 0,
        EpochMode::LastEpoch => epochs - 1,
    };
    let mut sum = T::zero();
    for e in first..epochs {
        sum = sum + epoch_value(method, &rec.p[e], &rec.q[e]);
    }
    let mean = sum / T::from_count(epochs - first);
    match method {
        Method::PMu | Method::PMin => -mean,
        Method::Ppl | Method::Aum => mean,
    }
}

/// Scores keyed by (instance id, method, epoch mode), iterated in ascending key order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable<T = f64> {
    entries: BTreeMap<(String, Method, EpochMode), T>,
}

impl<T> Default for ScoreTable<T> {
    fn default() -> Self {
        ScoreTable {
            entries: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> ScoreTable<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, method: Method, mode: EpochMode, score: T) {
        self.entries.insert((id.into(), method, mode), score);
    }

    pub fn get(&self, id: &str, method: Method, mode: EpochMode) -> Option<T> {
        self.entries.get(&(id.to_owned(), method, mode)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Method, EpochMode, T)> {
        self.entries
            .iter()
            .map(|((id, m, e), &s)| (id.as_str(), *m, *e, s))
    }

    /// Distinct (method, epoch mode) pairs present, ascending.
    pub fn configurations(&self) -> Vec<(Method, EpochMode)> {
        let mut out: Vec<_> = self.entries.keys().map(|(_, m, e)| (*m, *e)).collect();
        out.sort();
        out.dedup();
        out
    }

    /// Scores of one configuration keyed by instance id.
    pub fn column(&self, method: Method, mode: EpochMode) -> BTreeMap<&str, T> {
        self.iter()
            .filter(|&(_, m, e, _)| m == method && e == mode)
            .map(|(id, _, _, s)| (id, s))
            .collect()
    }
}

/// Scores every record for every requested method and mode.
///
/// `threads > 1` splits the records into contiguous chunks; results are merged
/// into the ordered table, so the output does not depend on the thread count.
pub fn score_dataset<T: Scalar>(
    ts: &TraceSet<T>,
    methods: &[Method],
    modes: &[EpochMode],
    threads: usize,
) -> ScoreTable<T> {
    let records: Vec<&TraceRecord<T>> = ts.records().collect();
    let score_chunk = |chunk: &[&TraceRecord<T>]| {
        let mut out = Vec::with_capacity(chunk.len() * methods.len() * modes.len());
        for rec in chunk {
            for &m in methods {
                for &e in modes {
                    out.push((rec.instance_id.clone(), m, e, score_instance(rec, m, e)));
                }
            }
        }
        out
    };
    let threads = threads.max(1);
    let parts: Vec<Vec<(String, Method, EpochMode, T)>> = if threads == 1 || records.len() < 2 {
        vec![score_chunk(&records)]
    } else {
        let chunk_len = records.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = records
                .chunks(chunk_len)
                .map(|chunk| s.spawn(move || score_chunk(chunk)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("scoring worker panicked"))
                .collect()
        })
    };
    let mut table = ScoreTable::new();
    for (id, m, e, s) in parts.into_iter().flatten() {
        table.insert(id, m, e, s);
    }
    table
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreLine {
    instance_id: String,
    method: Method,
    epoch_mode: EpochMode,
    score: f64,
}

pub fn write_scores<T: Scalar>(path: &Path, table: &ScoreTable<T>) -> Result<()> {
    let lines: Vec<ScoreLine> = table
        .iter()
        .map(|(id, m, e, s)| ScoreLine {
            instance_id: id.to_owned(),
            method: m,
            epoch_mode: e,
            score: s.to_f64_lossy(),
        })
        .collect();
    jsonl::write_file(path, &lines)
}

pub fn read_scores<T: Scalar>(path: &Path) -> Result<ScoreTable<T>> {
    let mut table = ScoreTable::new();
    for (line, rec) in jsonl::read_file::<ScoreLine>(path)? {
        if !rec.score.is_finite() {
            return Err(Error::Malformed {
                line,
                message: "score is not finite".into(),
            });
        }
        table.insert(
            rec.instance_id,
            rec.method,
            rec.epoch_mode,
            T::lit(rec.score),
        );
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(p: Vec<Vec<f64>>, q: Vec<Vec<f64>>) -> TraceRecord {
        let len = p[0].len();
        TraceRecord::new("x", vec!["t".into(); len], p, q).unwrap()
    }

    #[test]
    fn perfect_confidence() {
        let r = rec(vec![vec![1.0, 1.0]; 2], vec![vec![0.0, 0.0]; 2]);
        let all = EpochMode::AllEpochs;
        assert_eq!(score_instance(&r, Method::Ppl, all), 1.0);
        assert_eq!(score_instance(&r, Method::PMu, all), -1.0);
        assert_eq!(score_instance(&r, Method::PMin, all), -1.0);
        assert_eq!(score_instance(&r, Method::Aum, all), -1.0);
    }

    #[test]
    fn two_epoch_hand_values() {
        let r = rec(
            vec![vec![0.5, 0.5], vec![1.0, 1.0]],
            vec![vec![0.5, 0.5], vec![0.0, 0.0]],
        );
        let all = EpochMode::AllEpochs;
        assert!((score_instance(&r, Method::Ppl, all) - 1.5).abs() < 1e-12);
        assert!((score_instance(&r, Method::PMu, all) + 0.75).abs() < 1e-12);
        assert!((score_instance(&r, Method::PMin, all) + 0.75).abs() < 1e-12);
        assert!((score_instance(&r, Method::Aum, all) + 0.5).abs() < 1e-12);
        let last = EpochMode::LastEpoch;
        assert_eq!(score_instance(&r, Method::PMu, last), -1.0);
        assert_eq!(score_instance(&r, Method::Ppl, last), 1.0);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let r = rec(vec![vec![0.0]], vec![vec![1.0]]);
        let ppl = score_instance(&r, Method::Ppl, EpochMode::AllEpochs);
        assert!(ppl.is_finite());
        assert!((ppl - 1e12).abs() / 1e12 < 1e-9);
    }

    #[test]
    fn f32_matches_f64() {
        let p = vec![vec![0.25f32, 0.5], vec![0.75, 0.125]];
        let q = vec![vec![0.5f32, 0.25], vec![0.125, 0.5]];
        let r32 = TraceRecord::new("x", vec!["a".into(), "b".into()], p, q).unwrap();
        let r64 = rec(
            vec![vec![0.25, 0.5], vec![0.75, 0.125]],
            vec![vec![0.5, 0.25], vec![0.125, 0.5]],
        );
        for m in Method::ALL {
            for e in EpochMode::ALL {
                let a = score_instance(&r32, m, e) as f64;
                let b = score_instance(&r64, m, e);
                assert!((a - b).abs() < 1e-6, "{m} {e}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn score_dataset_counts_and_modes() {
        let ts = TraceSet::from_records([rec(vec![vec![0.3, 0.6]], vec![vec![0.2, 0.1]])]).unwrap();
        let table = score_dataset(&ts, &Method::ALL, &EpochMode::ALL, 1);
        assert_eq!(table.len(), 8);
        for m in Method::ALL {
            assert_eq!(
                table.get("x", m, EpochMode::AllEpochs),
                table.get("x", m, EpochMode::LastEpoch)
            );
        }
    }

    #[test]
    fn identical_matrices_identical_scores() {
        let mk = |id: &str| {
            TraceRecord::new(
                id,
                vec!["a".into()],
                vec![vec![0.4], vec![0.7]],
                vec![vec![0.3], vec![0.2]],
            )
            .unwrap()
        };
        let ts = TraceSet::from_records([mk("a"), mk("b")]).unwrap();
        let table = score_dataset(&ts, &Method::ALL, &EpochMode::ALL, 1);
        for m in Method::ALL {
            for e in EpochMode::ALL {
                assert_eq!(table.get("a", m, e), table.get("b", m, e));
            }
        }
    }

    #[test]
    fn thread_count_does_not_change_output() {
        let records = (0..37).map(|i| {
            let v = 0.01 + (i as f64) / 40.0;
            TraceRecord::new(
                format!("r{i:02}"),
                vec!["a".into(), "b".into()],
                vec![vec![v, 1.0 - v]],
                vec![vec![0.0, 0.0]],
            )
            .unwrap()
        });
        let ts = TraceSet::from_records(records).unwrap();
        let one = score_dataset(&ts, &Method::ALL, &EpochMode::ALL, 1);
        for threads in [2, 3, 8] {
            assert_eq!(
                score_dataset(&ts, &Method::ALL, &EpochMode::ALL, threads),
                one
            );
        }
    }

    #[test]
    fn method_strings_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("mean".parse::<Method>().is_err());
    }
}

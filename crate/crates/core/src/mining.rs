//! Benchmark construction from raw material: diffing two versions of a task
//! corpus, assembling a labeled dataset from the diff, and pairing instances
//! across two corpora with Okapi BM25.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, ErrorCategory, Instance, SplitLabel};
use crate::error::{Error, Result};
use crate::evaluation::PAIR_META_KEY;
use crate::jsonl;
use crate::scalar::Scalar;

pub const DEFAULT_CAP: usize = 64;
pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

/// Instances of one task whose output differs between versions.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangedInstanceSet {
    pub task_id: String,
    /// (old, new) pairs with the same (instruction, input) and different outputs.
    pub changed: Vec<(Instance, Instance)>,
    pub unchanged_count: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VersionDiff {
    pub changed: Vec<ChangedInstanceSet>,
    /// Present only in the new version.
    pub added: Vec<Instance>,
    /// Present only in the old version.
    pub removed: Vec<Instance>,
}

type MatchKey<'a> = (&'a str, &'a str);

fn match_key(inst: &Instance) -> MatchKey<'_> {
    (
        inst.instruction.as_str(),
        inst.input.as_deref().unwrap_or(""),
    )
}

fn keyed<'a>(
    ds: &'a Dataset,
    task: &str,
    version: &'static str,
) -> Result<BTreeMap<MatchKey<'a>, &'a Instance>> {
    let mut map = BTreeMap::new();
    for inst in ds.task_instances(task) {
        if map.insert(match_key(inst), inst).is_some() {
            return Err(Error::AmbiguousMatch {
                task: task.to_owned(),
                version,
            });
        }
    }
    Ok(map)
}

fn require_tasks(ds: &Dataset) -> Result<()> {
    match ds.instances().iter().find(|i| i.task_id.is_none()) {
        Some(inst) => Err(Error::MissingTaskId(inst.id.clone())),
        None => Ok(()),
    }
}

/// Compares two versions task by task, matching instances on (instruction, input).
pub fn diff_versions(old: &Dataset, new: &Dataset) -> Result<VersionDiff> {
    require_tasks(old)?;
    require_tasks(new)?;
    let tasks: BTreeSet<&str> = old.task_ids().chain(new.task_ids()).collect();
    let mut diff = VersionDiff::default();
    for task in tasks {
        let old_map = keyed(old, task, "old")?;
        let new_map = keyed(new, task, "new")?;
        let mut changed = Vec::new();
        let mut unchanged = 0;
        for (key, &o) in &old_map {
            match new_map.get(key) {
                Some(&n) if n.output != o.output => changed.push((o.clone(), n.clone())),
                Some(_) => unchanged += 1,
                None => diff.removed.push(o.clone()),
            }
        }
        diff.added.extend(
            new_map
                .iter()
                .filter(|(k, _)| !old_map.contains_key(*k))
                .map(|(_, &n)| n.clone()),
        );
        if !changed.is_empty() {
            diff.changed.push(ChangedInstanceSet {
                task_id: task.to_owned(),
                changed,
                unchanged_count: unchanged,
            });
        }
    }
    Ok(diff)
}

fn relabel(inst: &Instance, version: &str, split: SplitLabel, pair: Option<&str>) -> Instance {
    let mut out = inst.clone();
    out.id = format!("{version}:{}", inst.id);
    out.split = split;
    out.category = None;
    out.subcategory = None;
    out.meta.insert("source_id".into(), inst.id.clone());
    out.meta.insert("version".into(), version.into());
    if let Some(pair) = pair {
        out.meta.insert(PAIR_META_KEY.into(), pair.to_owned());
    }
    out
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, pool: &'a [T], n: usize) -> Vec<&'a T> {
    let n = n.min(pool.len());
    let mut idx = sample(rng, pool.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| &pool[i]).collect()
}

/// Builds a labeled dataset from a version diff.
///
/// For each task in `err_tasks`: up to `cap` changed pairs are sampled; their
/// old versions become `Error` and their new versions `Clean`. When fewer than
/// `cap` pairs changed, all become `Error`, `Clean` is topped up to `cap` from
/// the rest of the new version, and `Unknown` receives extra old-version
/// instances so the task keeps about `cap` erroneous-side instances. Every other
/// task contributes up to `cap` latest-version instances as `Unknown`.
///
/// Ids are prefixed with `old:` or `new:`; the original id is kept in
/// `meta.source_id` and changed pairs are linked through `meta.pair_id`.
pub fn assemble_sni_style(
    old: &Dataset,
    new: &Dataset,
    diff: &VersionDiff,
    err_tasks: &BTreeSet<String>,
    cap: usize,
    seed: u64,
) -> Result<Dataset> {
    let by_task: HashMap<&str, &ChangedInstanceSet> = diff
        .changed
        .iter()
        .map(|c| (c.task_id.as_str(), c))
        .collect();
    for task in err_tasks {
        match by_task.get(task.as_str()) {
            None => {
                return Err(Error::Assembly(
                    task.clone(),
                    "marked erroneous but has no changed instances".into(),
                ))
            }
            Some(c) if c.changed.is_empty() => {
                return Err(Error::Assembly(task.clone(), "no changed instances".into()))
            }
            Some(_) => {}
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let tasks: BTreeSet<&str> = new
        .task_ids()
        .chain(err_tasks.iter().map(String::as_str))
        .collect();
    for task in tasks {
        if !err_tasks.contains(task) {
            let pool = new.task_instances(task);
            for inst in pick(&mut rng, &pool, cap) {
                out.push(relabel(inst, "new", SplitLabel::Unknown, None));
            }
            continue;
        }
        let set = by_task[task];
        let chosen = pick(&mut rng, &set.changed, cap);
        let changed_keys: BTreeSet<MatchKey<'_>> =
            set.changed.iter().map(|(o, _)| match_key(o)).collect();
        for (o, n) in &chosen {
            let (old_id, new_id) = (format!("old:{}", o.id), format!("new:{}", n.id));
            out.push(relabel(o, "old", SplitLabel::Error, Some(&new_id)));
            out.push(relabel(n, "new", SplitLabel::Clean, Some(&old_id)));
        }
        let shortfall = cap.saturating_sub(chosen.len());
        if shortfall > 0 {
            let new_rest: Vec<&Instance> = new
                .task_instances(task)
                .into_iter()
                .filter(|i| !changed_keys.contains(&match_key(i)))
                .collect();
            for inst in pick(&mut rng, &new_rest, shortfall) {
                out.push(relabel(inst, "new", SplitLabel::Clean, None));
            }
            let old_rest: Vec<&Instance> = old
                .task_instances(task)
                .into_iter()
                .filter(|i| !changed_keys.contains(&match_key(i)))
                .collect();
            for inst in pick(&mut rng, &old_rest, shortfall) {
                out.push(relabel(inst, "old", SplitLabel::Unknown, None));
            }
        }
    }
    Dataset::new(out)
}

/// One query paired with its best-scoring corpus document.
#[derive(Debug, Clone, PartialEq)]
pub struct PairCandidate<T = f64> {
    pub left: Instance,
    pub right: Instance,
    pub bm25: T,
}

/// Lowercased whitespace tokens of instruction, input and output.
pub fn document_tokens(inst: &Instance) -> Vec<String> {
    let text = format!(
        "{} {} {}",
        inst.instruction,
        inst.input.as_deref().unwrap_or(""),
        inst.output
    );
    text.to_lowercase()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Okapi BM25 index over a fixed corpus.
#[derive(Debug, Clone)]
pub struct Bm25Index<T = f64> {
    k1: T,
    b: T,
    avgdl: T,
    docs: Vec<(usize, HashMap<String, usize>)>,
    doc_freq: HashMap<String, usize>,
}

impl<T: Scalar> Bm25Index<T> {
    pub fn new(documents: &[Vec<String>], k1: T, b: T) -> Self {
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        let docs: Vec<(usize, HashMap<String, usize>)> = documents
            .iter()
            .map(|tokens| {
                let mut tf: HashMap<String, usize> = HashMap::new();
                for t in tokens {
                    *tf.entry(t.clone()).or_default() += 1;
                }
                for t in tf.keys() {
                    *doc_freq.entry(t.clone()).or_default() += 1;
                }
                (tokens.len(), tf)
            })
            .collect();
        let total: usize = docs.iter().map(|(len, _)| len).sum();
        let avgdl = if docs.is_empty() || total == 0 {
            T::one()
        } else {
            T::from_count(total) / T::from_count(docs.len())
        };
        Bm25Index {
            k1,
            b,
            avgdl,
            docs,
            doc_freq,
        }
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// `ln(1 + (N - n_t + 0.5) / (n_t + 0.5))`, non-negative for every term.
    pub fn idf(&self, term: &str) -> T {
        let n = T::from_count(self.docs.len());
        let nt = T::from_count(self.doc_freq.get(term).copied().unwrap_or(0));
        let half = T::lit(0.5);
        (T::one() + (n - nt + half) / (nt + half)).ln()
    }

    /// Score of document `doc` for a query, summing over distinct query terms.
    pub fn score(&self, query: &[String], doc: usize) -> T {
        let (len, tf) = &self.docs[doc];
        let norm = self.k1 * (T::one() - self.b + self.b * T::from_count(*len) / self.avgdl);
        let terms: BTreeSet<&str> = query.iter().map(String::as_str).collect();
        let mut score = T::zero();
        for term in terms {
            let f = match tf.get(term) {
                Some(&f) => T::from_count(f),
                None => continue,
            };
            score = score + self.idf(term) * f * (self.k1 + T::one()) / (f + norm);
        }
        score
    }
}

/// Pairs every query with its highest-scoring corpus instance; ties go to the smallest corpus id.
pub fn bm25_pair<T: Scalar>(
    queries: &Dataset,
    corpus: &Dataset,
    k1: T,
    b: T,
) -> Result<Vec<PairCandidate<T>>> {
    if corpus.is_empty() {
        return Err(Error::EmptySet("BM25 corpus is empty".into()));
    }
    let docs: Vec<Vec<String>> = corpus.instances().iter().map(document_tokens).collect();
    let index = Bm25Index::new(&docs, k1, b);
    let mut out = Vec::with_capacity(queries.len());
    for q in queries.instances() {
        let tokens = document_tokens(q);
        let mut best: Option<(usize, T)> = None;
        for (d, cand) in corpus.instances().iter().enumerate() {
            let s = index.score(&tokens, d);
            let better = match best {
                None => true,
                Some((bd, bs)) => s > bs || (s == bs && cand.id < corpus.instances()[bd].id),
            };
            if better {
                best = Some((d, s));
            }
        }
        let (d, s) = best.expect("corpus is nonempty");
        out.push(PairCandidate {
            left: q.clone(),
            right: corpus.instances()[d].clone(),
            bm25: s,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLine {
    pub left_id: String,
    pub right_id: String,
    pub bm25: f64,
}

pub fn write_pairs<T: Scalar>(path: &Path, pairs: &[PairCandidate<T>]) -> Result<()> {
    let lines: Vec<PairLine> = pairs
        .iter()
        .map(|p| PairLine {
            left_id: p.left.id.clone(),
            right_id: p.right.id.clone(),
            bm25: p.bm25.to_f64_lossy(),
        })
        .collect();
    jsonl::write_file(path, &lines)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    LeftBetter,
    RightBetter,
    Equal,
    Unknown,
}

/// A human judgment on one BM25 pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictLine {
    pub left_id: String,
    pub right_id: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub category: Option<ErrorCategory>,
}

pub fn load_verdicts(path: &Path) -> Result<Vec<VerdictLine>> {
    Ok(jsonl::read_file(path)?
        .into_iter()
        .map(|(_, v)| v)
        .collect())
}

/// Labels the union of two corpora from pair verdicts: the preferred instance
/// becomes `Clean`, the other `Error` (with the verdict's category); everything
/// else is `Unknown`. Ids must be unique across both corpora.
pub fn assemble_from_verdicts(
    left: &Dataset,
    right: &Dataset,
    verdicts: &[VerdictLine],
) -> Result<Dataset> {
    let mut labels: HashMap<&str, (SplitLabel, Option<ErrorCategory>, &str)> = HashMap::new();
    for v in verdicts {
        if left.get(&v.left_id).is_none() {
            return Err(Error::UnknownInstance(v.left_id.clone()));
        }
        if right.get(&v.right_id).is_none() {
            return Err(Error::UnknownInstance(v.right_id.clone()));
        }
        let (l, r) = match v.verdict {
            Verdict::LeftBetter => ((SplitLabel::Clean, None), (SplitLabel::Error, v.category)),
            Verdict::RightBetter => ((SplitLabel::Error, v.category), (SplitLabel::Clean, None)),
            Verdict::Equal | Verdict::Unknown => continue,
        };
        labels.insert(&v.left_id, (l.0, l.1, &v.right_id));
        labels.insert(&v.right_id, (r.0, r.1, &v.left_id));
    }
    let mut out = Vec::with_capacity(left.len() + right.len());
    for inst in left.instances().iter().chain(right.instances()) {
        let mut inst = inst.clone();
        inst.category = None;
        inst.subcategory = None;
        match labels.get(inst.id.as_str()) {
            Some(&(split, category, partner)) => {
                inst.split = split;
                inst.category = category;
                inst.meta.insert(PAIR_META_KEY.into(), partner.to_owned());
            }
            None => inst.split = SplitLabel::Unknown,
        }
        out.push(inst);
    }
    Dataset::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(id: &str, task: &str, instruction: &str, output: &str) -> Instance {
        Instance::new(id, instruction, output).with_task(task)
    }

    #[test]
    fn identical_versions_have_no_diff() {
        let ds = Dataset::new(vec![inst("1", "t", "q1", "a"), inst("2", "t", "q2", "b")]).unwrap();
        let diff = diff_versions(&ds, &ds).unwrap();
        assert_eq!(diff, VersionDiff::default());
    }

    #[test]
    fn flipped_label_is_one_changed_pair() {
        let old = Dataset::new(vec![
            inst("1", "t", "is it?", "No"),
            inst("2", "t", "other", "x"),
        ])
        .unwrap();
        let new = Dataset::new(vec![
            inst("1", "t", "is it?", "Yes"),
            inst("2", "t", "other", "x"),
        ])
        .unwrap();
        let diff = diff_versions(&old, &new).unwrap();
        assert_eq!(diff.changed.len(), 1);
        let set = &diff.changed[0];
        assert_eq!(set.changed.len(), 1);
        assert_eq!(set.changed[0].0.output, "No");
        assert_eq!(set.changed[0].1.output, "Yes");
        assert_eq!(set.unchanged_count, 1);
    }

    #[test]
    fn added_instance_is_not_changed() {
        let old = Dataset::new(vec![inst("1", "t", "q1", "a")]).unwrap();
        let new = Dataset::new(vec![inst("1", "t", "q1", "a"), inst("2", "t", "q2", "b")]).unwrap();
        let diff = diff_versions(&old, &new).unwrap();
        assert!(diff.changed.is_empty());
        assert_eq!(diff.added.len(), 1);
        let back = diff_versions(&new, &old).unwrap();
        assert_eq!(back.removed.len(), 1);
    }

    #[test]
    fn duplicate_keys_are_ambiguous() {
        let old = Dataset::new(vec![inst("1", "t", "q", "a"), inst("2", "t", "q", "b")]).unwrap();
        assert!(matches!(
            diff_versions(&old, &old),
            Err(Error::AmbiguousMatch { .. })
        ));
    }

    #[test]
    fn swapping_versions_reverses_pairs() {
        let old = Dataset::new(vec![inst("1", "t", "q1", "a"), inst("2", "u", "q2", "b")]).unwrap();
        let new = Dataset::new(vec![inst("1", "t", "q1", "A"), inst("2", "u", "q2", "B")]).unwrap();
        let fwd = diff_versions(&old, &new).unwrap();
        let rev = diff_versions(&new, &old).unwrap();
        assert_eq!(fwd.changed.len(), rev.changed.len());
        for (f, r) in fwd.changed.iter().zip(&rev.changed) {
            for ((fo, fn_), (ro, rn)) in f.changed.iter().zip(&r.changed) {
                assert_eq!((fo, fn_), (rn, ro));
            }
        }
    }

    fn versions(task: &str, total: usize, changed: usize) -> (Vec<Instance>, Vec<Instance>) {
        let mut old = Vec::new();
        let mut new = Vec::new();
        for i in 0..total {
            let id = format!("{task}-{i}");
            let q = format!("question {i}");
            old.push(inst(&id, task, &q, "old answer"));
            let out = if i < changed {
                "new answer"
            } else {
                "old answer"
            };
            new.push(inst(&id, task, &q, out));
        }
        (old, new)
    }

    fn count(ds: &Dataset, task: &str, split: SplitLabel) -> usize {
        ds.task_instances(task)
            .iter()
            .filter(|i| i.split == split)
            .count()
    }

    #[test]
    fn sni_assembly_caps_and_top_up() {
        let (mut old, mut new) = versions("big", 150, 100);
        let (o2, n2) = versions("small", 80, 10);
        let (o3, n3) = versions("plain", 30, 0);
        old.extend(o2.into_iter().chain(o3));
        new.extend(n2.into_iter().chain(n3));
        let (old, new) = (Dataset::new(old).unwrap(), Dataset::new(new).unwrap());
        let diff = diff_versions(&old, &new).unwrap();
        let err: BTreeSet<String> = ["big".to_string(), "small".to_string()].into();
        let out = assemble_sni_style(&old, &new, &diff, &err, 64, 3).unwrap();

        assert_eq!(count(&out, "big", SplitLabel::Error), 64);
        assert_eq!(count(&out, "big", SplitLabel::Clean), 64);
        assert_eq!(count(&out, "big", SplitLabel::Unknown), 0);

        assert_eq!(count(&out, "small", SplitLabel::Error), 10);
        assert_eq!(count(&out, "small", SplitLabel::Clean), 64);
        assert_eq!(count(&out, "small", SplitLabel::Unknown), 54);

        assert_eq!(count(&out, "plain", SplitLabel::Unknown), 30);
        assert_eq!(out.task_instances("plain").len(), 30);

        for e in out
            .instances()
            .iter()
            .filter(|i| i.split == SplitLabel::Error)
        {
            assert_eq!(e.output, "old answer");
            let partner = out.get(&e.meta[PAIR_META_KEY]).unwrap();
            assert_eq!(partner.split, SplitLabel::Clean);
            assert_eq!(partner.output, "new answer");
        }

        let again = assemble_sni_style(&old, &new, &diff, &err, 64, 3).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn err_task_without_changes_rejected() {
        let (old, new) = versions("t", 5, 0);
        let (old, new) = (Dataset::new(old).unwrap(), Dataset::new(new).unwrap());
        let diff = diff_versions(&old, &new).unwrap();
        let err: BTreeSet<String> = ["t".to_string()].into();
        assert!(assemble_sni_style(&old, &new, &diff, &err, 64, 0).is_err());
    }

    fn corpus(docs: &[(&str, &str)]) -> Dataset {
        Dataset::new(
            docs.iter()
                .map(|(id, text)| Instance::new(*id, *text, ""))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn bm25_hand_example() {
        let c = corpus(&[("d1", "a b"), ("d2", "a c")]);
        let q = corpus(&[("q", "c")]);
        let pairs = bm25_pair(&q, &c, DEFAULT_K1, DEFAULT_B).unwrap();
        assert_eq!(pairs[0].right.id, "d2");
        assert!((pairs[0].bm25 - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bm25_absent_terms_pick_smallest_id() {
        let c = corpus(&[("z", "a b"), ("m", "a c"), ("n", "d")]);
        let q = corpus(&[("q", "nothing here")]);
        let pairs = bm25_pair(&q, &c, DEFAULT_K1, DEFAULT_B).unwrap();
        assert_eq!(pairs[0].right.id, "m");
        assert_eq!(pairs[0].bm25, 0.0);
    }

    #[test]
    fn bm25_self_match_wins() {
        let c = corpus(&[
            ("a", "the cat sat"),
            ("b", "the dog ran"),
            ("c", "a zebra grazed quietly"),
        ]);
        let q = corpus(&[("q", "a zebra grazed quietly")]);
        assert_eq!(
            bm25_pair(&q, &c, DEFAULT_K1, DEFAULT_B).unwrap()[0]
                .right
                .id,
            "c"
        );
    }

    #[test]
    fn bm25_empty_corpus() {
        let q = corpus(&[("q", "x")]);
        assert!(bm25_pair(&q, &Dataset::default(), DEFAULT_K1, DEFAULT_B).is_err());
    }

    #[test]
    fn verdicts_label_pairs() {
        let left = corpus(&[("l1", "x"), ("l2", "y"), ("l3", "z")]);
        let right = corpus(&[("r1", "x"), ("r2", "y")]);
        let verdicts = vec![
            VerdictLine {
                left_id: "l1".into(),
                right_id: "r1".into(),
                verdict: Verdict::LeftBetter,
                category: Some(ErrorCategory::Noise),
            },
            VerdictLine {
                left_id: "l2".into(),
                right_id: "r2".into(),
                verdict: Verdict::Equal,
                category: None,
            },
        ];
        let ds = assemble_from_verdicts(&left, &right, &verdicts).unwrap();
        assert_eq!(ds.get("l1").unwrap().split, SplitLabel::Clean);
        let r1 = ds.get("r1").unwrap();
        assert_eq!(
            (r1.split, r1.category),
            (SplitLabel::Error, Some(ErrorCategory::Noise))
        );
        assert_eq!(r1.meta[PAIR_META_KEY], "l1");
        for id in ["l2", "r2", "l3"] {
            assert_eq!(ds.get(id).unwrap().split, SplitLabel::Unknown);
        }
    }
}

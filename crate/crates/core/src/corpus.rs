//! Instruction-tuning instances, the error taxonomy, and JSONL persistence.
//!
//! A dataset file holds one [`Instance`] per line. Every instance carries a
//! [`SplitLabel`] saying whether it is known clean, known erroneous, or
//! unlabeled; only erroneous instances may carry an [`ErrorCategory`].

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::jsonl;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(rename_all = "lowercase")]
pub enum SplitLabel {
    Clean,
    Error,
    #[default]
    Unknown,
}

impl SplitLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitLabel::Clean => "clean",
            SplitLabel::Error => "error",
            SplitLabel::Unknown => "unknown",
        }
    }
}

impl fmt::Display for SplitLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The six top-level error categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    IncorrectOutput,
    FactualOrMath,
    Noise,
    UnderspecifiedInput,
    ModalityMismatch,
    Formatting,
}

impl ErrorCategory {
    pub const ALL: [ErrorCategory; 6] = [
        ErrorCategory::IncorrectOutput,
        ErrorCategory::FactualOrMath,
        ErrorCategory::Noise,
        ErrorCategory::UnderspecifiedInput,
        ErrorCategory::ModalityMismatch,
        ErrorCategory::Formatting,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::IncorrectOutput => "incorrect_output",
            ErrorCategory::FactualOrMath => "factual_or_math",
            ErrorCategory::Noise => "noise",
            ErrorCategory::UnderspecifiedInput => "underspecified_input",
            ErrorCategory::ModalityMismatch => "modality_mismatch",
            ErrorCategory::Formatting => "formatting",
        }
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ErrorCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown error category `{s}`")))
    }
}

/// One instruction-tuning example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    #[serde(default)]
    pub task_id: Option<String>,
    pub instruction: String,
    #[serde(default)]
    pub input: Option<String>,
    pub output: String,
    /// Absent in raw corpora; read as `unknown`.
    #[serde(default)]
    pub split: SplitLabel,
    #[serde(default)]
    pub category: Option<ErrorCategory>,
    #[serde(default)]
    pub subcategory: Option<String>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    /// Top-level fields outside the schema, kept so they survive a rewrite.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Instance {
    pub fn new(
        id: impl Into<String>,
        instruction: impl Into<String>,
        output: impl Into<String>,
    ) -> Self {
        Instance {
            id: id.into(),
            task_id: None,
            instruction: instruction.into(),
            input: None,
            output: output.into(),
            split: SplitLabel::Unknown,
            category: None,
            subcategory: None,
            meta: BTreeMap::new(),
            extra: Map::new(),
        }
    }

    pub fn with_task(mut self, task_id: impl Into<String>) -> Self {
        self.task_id = Some(task_id.into());
        self
    }

    pub fn with_input(mut self, input: impl Into<String>) -> Self {
        self.input = Some(input.into());
        self
    }

    pub fn with_split(mut self, split: SplitLabel) -> Self {
        self.split = split;
        self
    }

    pub fn with_category(mut self, category: ErrorCategory) -> Self {
        self.category = Some(category);
        self
    }

    /// Text fed to the model as source: instruction followed by the input, if any.
    pub fn source_text(&self) -> String {
        match self.input.as_deref() {
            Some(input) if !input.is_empty() => format!("{} {}", self.instruction, input),
            _ => self.instruction.clone(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::InvalidInstance {
                id: self.id.clone(),
                message: "empty id".into(),
            });
        }
        if self.category.is_some() && self.split != SplitLabel::Error {
            return Err(Error::InvalidInstance {
                id: self.id.clone(),
                message: format!("category set on a `{}` instance", self.split),
            });
        }
        Ok(())
    }
}

/// An ordered, validated collection of instances with a derived task grouping.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    instances: Vec<Instance>,
    by_id: HashMap<String, usize>,
    tasks: BTreeMap<String, Vec<usize>>,
}

impl Dataset {
    pub fn new(instances: Vec<Instance>) -> Result<Self> {
        Self::build(
            instances
                .into_iter()
                .enumerate()
                .map(|(i, inst)| (i + 1, inst)),
        )
    }

    fn build(numbered: impl IntoIterator<Item = (usize, Instance)>) -> Result<Self> {
        let mut instances = Vec::new();
        let mut by_id = HashMap::new();
        let mut tasks: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (line, inst) in numbered {
            inst.check()?;
            let idx = instances.len();
            if by_id.insert(inst.id.clone(), idx).is_some() {
                return Err(Error::DuplicateId { line, id: inst.id });
            }
            if let Some(task) = &inst.task_id {
                tasks.entry(task.clone()).or_default().push(idx);
            }
            instances.push(inst);
        }
        Ok(Dataset {
            instances,
            by_id,
            tasks,
        })
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn into_instances(self) -> Vec<Instance> {
        self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Instance> {
        self.by_id.get(id).map(|&i| &self.instances[i])
    }

    /// Task ids in ascending order.
    pub fn task_ids(&self) -> impl Iterator<Item = &str> {
        self.tasks.keys().map(String::as_str)
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    /// Instances of one task, in file order.
    pub fn task_instances(&self, task_id: &str) -> Vec<&Instance> {
        self.task_indices(task_id)
            .iter()
            .map(|&i| &self.instances[i])
            .collect()
    }

    pub(crate) fn task_indices(&self, task_id: &str) -> &[usize] {
        self.tasks.get(task_id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Number of tasks with at least one erroneous instance.
    pub fn error_task_count(&self) -> usize {
        self.tasks
            .values()
            .filter(|idx| {
                idx.iter()
                    .any(|&i| self.instances[i].split == SplitLabel::Error)
            })
            .count()
    }
}

/// Disjoint split of a dataset into (clean, error, unknown), each in file order.
pub fn partition_sets(ds: &Dataset) -> (Vec<&Instance>, Vec<&Instance>, Vec<&Instance>) {
    let mut clean = Vec::new();
    let mut error = Vec::new();
    let mut unknown = Vec::new();
    for inst in ds.instances() {
        match inst.split {
            SplitLabel::Clean => clean.push(inst),
            SplitLabel::Error => error.push(inst),
            SplitLabel::Unknown => unknown.push(inst),
        }
    }
    (clean, error, unknown)
}

pub fn read_dataset<R: BufRead>(reader: R) -> Result<Dataset> {
    Dataset::build(jsonl::read_records(reader)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::build(jsonl::read_file(path)?)
}

pub fn write_dataset_to<W: Write>(writer: W, ds: &Dataset) -> Result<()> {
    jsonl::write_records(writer, ds.instances())
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    jsonl::write_file(path, ds.instances())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Dataset> {
        read_dataset(text.as_bytes())
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let ds = parse("").unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.task_count(), 0);
    }

    #[test]
    fn two_lines_keep_order() {
        let text = r#"{"id":"b","instruction":"x","output":"1","split":"clean"}
{"id":"a","instruction":"y","output":"2","split":"unknown"}
"#;
        let ds = parse(text).unwrap();
        let ids: Vec<_> = ds.instances().iter().map(|i| i.id.as_str()).collect();
        assert_eq!(ids, ["b", "a"]);
    }

    #[test]
    fn duplicate_id_names_second_line() {
        let text = r#"{"id":"a","instruction":"x","output":"1","split":"clean"}
{"id":"a","instruction":"y","output":"2","split":"clean"}"#;
        match parse(text) {
            Err(Error::DuplicateId { line, id }) => {
                assert_eq!(line, 2);
                assert_eq!(id, "a");
            }
            other => panic!("expected duplicate id error, got {other:?}"),
        }
    }

    #[test]
    fn category_on_clean_rejected() {
        let text =
            r#"{"id":"a","instruction":"x","output":"1","split":"clean","category":"noise"}"#;
        assert!(matches!(parse(text), Err(Error::InvalidInstance { .. })));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"id\":\"a\",\"instruction\":\"x\",\"output\":\"1\",\"split\":\"clean\"}\n\n{not json}\n";
        match parse(text) {
            Err(Error::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_category_string_is_malformed() {
        let text = r#"{"id":"a","instruction":"x","output":"1","split":"error","category":"typo"}"#;
        assert!(matches!(parse(text), Err(Error::Malformed { line: 1, .. })));
    }

    #[test]
    fn unknown_fields_survive_rewrite() {
        let text = r#"{"id":"a","instruction":"x","output":"1","split":"error","category":"noise","meta":{"src":"p3"},"source":{"nested":[1,2]}}"#;
        let ds = parse(text).unwrap();
        assert_eq!(ds.instances()[0].extra["source"]["nested"][1], 2);
        let mut buf = Vec::new();
        write_dataset_to(&mut buf, &ds).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        let original: Value = serde_json::from_str(text).unwrap();
        let mut rewritten: Value = serde_json::from_slice(&buf).unwrap();
        // nulls for absent optional fields are the only additions
        for key in ["task_id", "input", "subcategory"] {
            assert_eq!(rewritten[key], Value::Null);
            rewritten.as_object_mut().unwrap().remove(key);
        }
        assert_eq!(rewritten, original);
    }

    #[test]
    fn partition_small() {
        let ds = Dataset::new(vec![
            Instance::new("1", "i", "o").with_split(SplitLabel::Clean),
            Instance::new("2", "i", "o").with_split(SplitLabel::Error),
            Instance::new("3", "i", "o").with_split(SplitLabel::Unknown),
        ])
        .unwrap();
        let (c, e, u) = partition_sets(&ds);
        assert_eq!((c.len(), e.len(), u.len()), (1, 1, 1));
    }

    #[test]
    fn partition_all_unknown() {
        let ds = Dataset::new(
            (0..7)
                .map(|i| Instance::new(i.to_string(), "i", "o"))
                .collect(),
        )
        .unwrap();
        let (c, e, u) = partition_sets(&ds);
        assert_eq!((c.len(), e.len(), u.len()), (0, 0, 7));
    }

    #[test]
    fn partition_table_one_sni_counts() {
        let mut instances = Vec::with_capacity(1088 + 585 + 101_783);
        for (split, n) in [
            (SplitLabel::Clean, 1088),
            (SplitLabel::Error, 585),
            (SplitLabel::Unknown, 101_783),
        ] {
            for _ in 0..n {
                let id = instances.len().to_string();
                instances.push(Instance::new(id, "i", "o").with_split(split));
            }
        }
        let ds = Dataset::new(instances).unwrap();
        let (c, e, u) = partition_sets(&ds);
        assert_eq!((c.len(), e.len(), u.len()), (1088, 585, 101_783));
    }

    #[test]
    fn task_grouping_covers_every_task() {
        let ds = Dataset::new(vec![
            Instance::new("1", "i", "o").with_task("t2"),
            Instance::new("2", "i", "o").with_task("t1"),
            Instance::new("3", "i", "o").with_task("t2"),
            Instance::new("4", "i", "o"),
        ])
        .unwrap();
        assert_eq!(ds.task_ids().collect::<Vec<_>>(), ["t1", "t2"]);
        let t2: Vec<_> = ds
            .task_instances("t2")
            .iter()
            .map(|i| i.id.as_str())
            .collect();
        assert_eq!(t2, ["1", "3"]);
    }
}

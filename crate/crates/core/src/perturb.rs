//! Controlled injection of synthetic errors into a clean dataset.
//!
//! A [`PerturbationPlan`] assigns one [`PerturbKind`] and a rate to each of a
//! set of tasks. Applying the plan perturbs every instance of an assigned task
//! independently with that rate. Perturbed instances become `Error`, the rest
//! of an assigned task becomes `Clean`, and every other instance `Unknown`.
//!
//! All randomness comes from a ChaCha8 stream seeded with the plan seed and
//! consumed in a fixed order (assignments in listed order, instances in file
//! order), so a plan replays identically on every platform.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, ErrorCategory, Instance, SplitLabel};
use crate::error::{Error, Result};
use crate::jsonl;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PerturbKind {
    #[serde(rename = "empty")]
    EmptyOutput,
    #[serde(rename = "flip")]
    FlipOutput,
    #[serde(rename = "truncate")]
    TruncateInput,
    #[serde(rename = "replace")]
    ReplaceOutput,
}

impl PerturbKind {
    /// Round-robin order used by [`plan_perturbations`].
    pub const ORDER: [PerturbKind; 4] = [
        PerturbKind::EmptyOutput,
        PerturbKind::FlipOutput,
        PerturbKind::TruncateInput,
        PerturbKind::ReplaceOutput,
    ];

    pub fn default_rate(self) -> f64 {
        match self {
            PerturbKind::EmptyOutput => 1.0,
            _ => 0.5,
        }
    }

    pub fn category(self) -> ErrorCategory {
        match self {
            PerturbKind::TruncateInput => ErrorCategory::UnderspecifiedInput,
            _ => ErrorCategory::IncorrectOutput,
        }
    }

    pub fn subcategory(self) -> &'static str {
        match self {
            PerturbKind::EmptyOutput => "empty_output",
            PerturbKind::FlipOutput => "flipped_output",
            PerturbKind::TruncateInput => "truncated_input",
            PerturbKind::ReplaceOutput => "low_quality_output",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assignment {
    pub task_id: String,
    pub kind: PerturbKind,
    pub rate: f64,
}

impl Assignment {
    pub fn new(task_id: impl Into<String>, kind: PerturbKind) -> Self {
        Assignment {
            task_id: task_id.into(),
            kind,
            rate: kind.default_rate(),
        }
    }
}

impl<'de> Deserialize<'de> for Assignment {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            task_id: String,
            kind: PerturbKind,
            rate: Option<f64>,
        }
        let raw = Raw::deserialize(d)?;
        Ok(Assignment {
            rate: raw.rate.unwrap_or(raw.kind.default_rate()),
            task_id: raw.task_id,
            kind: raw.kind,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationPlan {
    pub seed: u64,
    pub assignments: Vec<Assignment>,
    #[serde(default)]
    pub replacements_path: Option<PathBuf>,
}

impl PerturbationPlan {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for a in &self.assignments {
            if !seen.insert(a.task_id.as_str()) {
                return Err(Error::InvalidPlan(format!(
                    "task `{}` assigned twice",
                    a.task_id
                )));
            }
            if !(0.0..=1.0).contains(&a.rate) {
                return Err(Error::InvalidPlan(format!(
                    "rate {} for task `{}` outside [0, 1]",
                    a.rate, a.task_id
                )));
            }
        }
        let needs_replacements = self
            .assignments
            .iter()
            .any(|a| a.kind == PerturbKind::ReplaceOutput);
        match (needs_replacements, &self.replacements_path) {
            (true, None) => Err(Error::InvalidPlan(
                "replace assignments need a replacements_path".into(),
            )),
            (false, Some(_)) => Err(Error::InvalidPlan(
                "replacements_path given but no replace assignment".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let plan: PerturbationPlan = jsonl::read_json(path)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write_json(path, self)
    }
}

/// Samples `4 * tasks_per_kind` distinct tasks and assigns kinds round-robin.
pub fn plan_perturbations(
    ds: &Dataset,
    tasks_per_kind: usize,
    seed: u64,
) -> Result<PerturbationPlan> {
    plan_perturbations_for(ds, &PerturbKind::ORDER, tasks_per_kind, seed)
}

/// Like [`plan_perturbations`], restricted to `kinds` (assigned round-robin in the given order).
pub fn plan_perturbations_for(
    ds: &Dataset,
    kinds: &[PerturbKind],
    tasks_per_kind: usize,
    seed: u64,
) -> Result<PerturbationPlan> {
    if tasks_per_kind == 0 {
        return Err(Error::InvalidPlan("tasks_per_kind must be positive".into()));
    }
    let distinct: HashSet<PerturbKind> = kinds.iter().copied().collect();
    if kinds.is_empty() || distinct.len() != kinds.len() {
        return Err(Error::InvalidPlan(
            "kinds must be nonempty and distinct".into(),
        ));
    }
    let tasks: Vec<&str> = ds.task_ids().collect();
    let wanted = kinds.len() * tasks_per_kind;
    if tasks.len() < wanted {
        return Err(Error::InvalidPlan(format!(
            "need {wanted} tasks, dataset has {}",
            tasks.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = sample(&mut rng, tasks.len(), wanted);
    let mut assignments = Vec::with_capacity(wanted);
    for (slot, task_idx) in picked.into_iter().enumerate() {
        let kind = kinds[slot % kinds.len()];
        let task = tasks[task_idx];
        if kind == PerturbKind::FlipOutput && ds.task_indices(task).len() < 2 {
            return Err(Error::NoFlipDonor(task.to_owned()));
        }
        assignments.push(Assignment::new(task, kind));
    }
    Ok(PerturbationPlan {
        seed,
        assignments,
        replacements_path: None,
    })
}

pub type Replacements = HashMap<String, String>;

#[derive(Deserialize)]
struct ReplacementLine {
    id: String,
    output: String,
}

pub fn load_replacements(path: &Path) -> Result<Replacements> {
    Ok(jsonl::read_file::<ReplacementLine>(path)?
        .into_iter()
        .map(|(_, r)| (r.id, r.output))
        .collect())
}

/// Keeps the first `floor(n / 2)` whitespace-delimited tokens.
pub fn truncate_half(text: &str) -> String {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    tokens[..tokens.len() / 2].join(" ")
}

/// Applies `plan` to `ds`. Relabels every instance; see the module docs.
pub fn apply_plan(
    ds: &Dataset,
    plan: &PerturbationPlan,
    replacements: Option<&Replacements>,
) -> Result<Dataset> {
    plan.validate()?;
    let mut out: Vec<Instance> = ds
        .instances()
        .iter()
        .cloned()
        .map(|mut inst| {
            inst.split = SplitLabel::Unknown;
            inst.category = None;
            inst.subcategory = None;
            inst
        })
        .collect();
    // flips draw from the outputs as they were before any perturbation
    let original_outputs: Vec<&str> = ds.instances().iter().map(|i| i.output.as_str()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);

    for a in &plan.assignments {
        let members = ds.task_indices(&a.task_id);
        if members.is_empty() {
            return Err(Error::InvalidPlan(format!(
                "task `{}` not in dataset",
                a.task_id
            )));
        }
        if a.kind == PerturbKind::FlipOutput && members.len() < 2 {
            return Err(Error::NoFlipDonor(a.task_id.clone()));
        }
        for (pos, &idx) in members.iter().enumerate() {
            let selected = rng.gen::<f64>() < a.rate;
            let inst = &mut out[idx];
            if !selected {
                inst.split = SplitLabel::Clean;
                continue;
            }
            match a.kind {
                PerturbKind::EmptyOutput => inst.output.clear(),
                PerturbKind::FlipOutput => {
                    let mut donor = rng.gen_range(0..members.len() - 1);
                    if donor >= pos {
                        donor += 1;
                    }
                    inst.output = original_outputs[members[donor]].to_owned();
                }
                PerturbKind::TruncateInput => match inst.input.as_mut() {
                    Some(input) if !input.trim().is_empty() => *input = truncate_half(input),
                    _ => inst.instruction = truncate_half(&inst.instruction),
                },
                PerturbKind::ReplaceOutput => {
                    let replacement = replacements
                        .and_then(|r| r.get(&inst.id))
                        .ok_or_else(|| Error::MissingReplacement(inst.id.clone()))?;
                    inst.output = replacement.clone();
                }
            }
            inst.split = SplitLabel::Error;
            inst.category = Some(a.kind.category());
            inst.subcategory = Some(a.kind.subcategory().to_owned());
        }
    }
    Dataset::new(out)
}

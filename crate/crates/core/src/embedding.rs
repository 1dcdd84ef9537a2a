//! Class embeddings on the unit hypersphere, the pseudo-unknown embedding and
//! the incremental registration protocol.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm below which a vector counts as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// Weight of the known-mean subtraction in the pseudo-unknown embedding.
pub const DEFAULT_ALPHA: f64 = 0.4;

/// A point in the joint text-image embedding space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::ShapeMismatch(format!(
                "embedding dimension must be at least 2, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("embedding holds a non-finite value".into()));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn dot(&self, other: &Self) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn cosine(&self, other: &Self) -> Result<f64> {
        Ok(self.normalize()?.dot(&other.normalize()?))
    }

    pub fn normalize(&self) -> Result<Self> {
        let n = self.norm();
        if n < ZERO_NORM {
            return Err(Error::ZeroVector);
        }
        Ok(Self(self.0.iter().map(|v| v / n).collect()))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Free-function form of [`EmbeddingVector::normalize`].
pub fn normalize(v: &EmbeddingVector) -> Result<EmbeddingVector> {
    v.normalize()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    pub embedding: EmbeddingVector,
    pub task_id: u32,
    pub frozen: bool,
}

/// Which row, if any, stands for the unknown class in a prompt matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnknownPrompt {
    None,
    /// The raw generic-object embedding.
    Generic,
    /// `w_0 - alpha * mean / |mean|`.
    Pseudo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PromptLabel {
    Known(usize),
    Unknown,
}

/// Prompt rows handed to the detection head. Rows `0..n_known` follow the
/// registry order; an optional trailing row carries [`PromptLabel::Unknown`].
#[derive(Clone, Debug, PartialEq)]
pub struct PromptMatrix {
    pub rows: Vec<EmbeddingVector>,
    pub labels: Vec<PromptLabel>,
}

impl PromptMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEmbeddingRegistry {
    entries: Vec<ClassEntry>,
    generic_object: EmbeddingVector,
    alpha: f64,
}

impl ClassEmbeddingRegistry {
    pub fn new(generic_object: EmbeddingVector, alpha: f64) -> Result<Self> {
        if !(0.0..=2.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha {alpha} outside [0, 2]")));
        }
        Ok(Self {
            entries: Vec::new(),
            generic_object,
            alpha,
        })
    }

    /// Rebuilds a registry from stored entries, checking its invariants.
    pub fn from_parts(entries: Vec<ClassEntry>, generic_object: EmbeddingVector, alpha: f64) -> Result<Self> {
        let mut reg = Self::new(generic_object, alpha)?;
        let dim = reg.generic_object.dim();
        let mut prev_task = 1;
        for e in &entries {
            if e.embedding.dim() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "class `{}` has dimension {}, expected {dim}",
                    e.name,
                    e.embedding.dim()
                )));
            }
            if e.task_id < prev_task {
                return Err(Error::Format("task ids must be non-decreasing".into()));
            }
            prev_task = e.task_id;
            if reg.index_of(&e.name).is_some() {
                return Err(Error::DuplicateClass(e.name.clone()));
            }
            reg.entries.push(e.clone());
        }
        let current = reg.current_task();
        if reg.entries.iter().any(|e| e.task_id < current && !e.frozen) {
            return Err(Error::Format("entries of earlier tasks must be frozen".into()));
        }
        Ok(reg)
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.generic_object.dim()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn generic_object(&self) -> &EmbeddingVector {
        &self.generic_object
    }

    /// Same registry with a different alpha; only the pseudo-unknown row
    /// depends on it.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        let mut out = Self::new(self.generic_object.clone(), alpha)?;
        out.entries = self.entries.clone();
        Ok(out)
    }

    /// Same registry with a different generic-object vector.
    pub fn with_generic_object(&self, generic_object: EmbeddingVector) -> Result<Self> {
        if generic_object.dim() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "generic prompt has dimension {}, expected {}",
                generic_object.dim(),
                self.dim()
            )));
        }
        let mut out = self.clone();
        out.generic_object = generic_object;
        Ok(out)
    }

    pub fn current_task(&self) -> u32 {
        self.entries.last().map_or(0, |e| e.task_id)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Mutable access to a trainable embedding; `None` for frozen entries.
    pub(crate) fn trainable_mut(&mut self, index: usize) -> Option<&mut [f64]> {
        self.entries
            .get_mut(index)
            .filter(|e| !e.frozen)
            .map(|e| e.embedding.as_mut_slice())
    }

    /// `(1/N) * sum_i w_i / |w_i|`. Not unit-norm in general.
    pub fn mean_known_embedding(&self) -> Result<EmbeddingVector> {
        if self.entries.is_empty() {
            return Err(Error::EmptyRegistry);
        }
        let n = self.entries.len() as f64;
        let mut acc = vec![0.0; self.dim()];
        for e in &self.entries {
            let unit = e.embedding.normalize()?;
            for (a, v) in acc.iter_mut().zip(unit.as_slice()) {
                *a += v / n;
            }
        }
        Ok(EmbeddingVector(acc))
    }

    /// `w_0 - alpha * mean / |mean|`, left unnormalized.
    pub fn pseudo_unknown_embedding(&self) -> Result<EmbeddingVector> {
        let mean = self.mean_known_embedding()?;
        let n = mean.norm();
        if n < ZERO_NORM {
            return Err(Error::DegenerateMean(n));
        }
        Ok(EmbeddingVector(
            self.generic_object
                .as_slice()
                .iter()
                .zip(mean.as_slice())
                .map(|(w0, m)| w0 - self.alpha * (m / n))
                .collect(),
        ))
    }

    pub fn prompt_matrix(&self, include_unknown: bool) -> Result<PromptMatrix> {
        self.prompt_matrix_with(if include_unknown {
            UnknownPrompt::Pseudo
        } else {
            UnknownPrompt::None
        })
    }

    pub fn prompt_matrix_with(&self, unknown: UnknownPrompt) -> Result<PromptMatrix> {
        let mut rows: Vec<EmbeddingVector> = self.entries.iter().map(|e| e.embedding.clone()).collect();
        let mut labels: Vec<PromptLabel> = (0..rows.len()).map(PromptLabel::Known).collect();
        match unknown {
            UnknownPrompt::None => {}
            UnknownPrompt::Generic => {
                rows.push(self.generic_object.clone());
                labels.push(PromptLabel::Unknown);
            }
            UnknownPrompt::Pseudo => {
                rows.push(self.pseudo_unknown_embedding()?);
                labels.push(PromptLabel::Unknown);
            }
        }
        Ok(PromptMatrix { rows, labels })
    }

    /// Freezes every existing entry and appends `new_classes` as the next task.
    pub fn register_task(&self, new_classes: Vec<(String, EmbeddingVector)>) -> Result<Self> {
        let task_id = self.current_task() + 1;
        let mut out = self.clone();
        for e in &mut out.entries {
            e.frozen = true;
        }
        for (name, embedding) in new_classes {
            if out.index_of(&name).is_some() {
                return Err(Error::DuplicateClass(name));
            }
            if embedding.dim() != self.dim() {
                return Err(Error::ShapeMismatch(format!(
                    "class `{name}` has dimension {}, expected {}",
                    embedding.dim(),
                    self.dim()
                )));
            }
            out.entries.push(ClassEntry {
                name,
                embedding,
                task_id,
                frozen: false,
            });
        }
        Ok(out)
    }
}

/// Classes introduced per task; everything not yet introduced is unknown.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    tasks: Vec<Vec<String>>,
}

impl TaskSchedule {
    pub fn new(tasks: Vec<Vec<String>>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for name in tasks.iter().flatten() {
            if !seen.insert(name.as_str()) {
                return Err(Error::DuplicateClass(name.clone()));
            }
        }
        Ok(Self { tasks })
    }

    pub fn num_tasks(&self) -> u32 {
        self.tasks.len() as u32
    }

    /// Classes introduced at `task_id` (1-based).
    pub fn classes_of(&self, task_id: u32) -> &[String] {
        task_id
            .checked_sub(1)
            .and_then(|i| self.tasks.get(i as usize))
            .map_or(&[], Vec::as_slice)
    }

    /// Task that introduces `name`, if any.
    pub fn task_of(&self, name: &str) -> Option<u32> {
        self.tasks
            .iter()
            .position(|t| t.iter().any(|c| c == name))
            .map(|i| i as u32 + 1)
    }

    /// Whether `name` is known once `task_id` has been learned.
    pub fn is_known_at(&self, name: &str, task_id: u32) -> bool {
        self.task_of(name).is_some_and(|t| t <= task_id)
    }

    pub fn tasks(&self) -> &[Vec<String>] {
        &self.tasks
    }
}

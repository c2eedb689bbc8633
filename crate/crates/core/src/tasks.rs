//! Task registry and one-hot prompt encoding.
//!
//! Pertinent tasks occupy indices `1..=T`; index `T + 1` is reserved for the
//! synthetic "segment every foreground" task built by cutmixing labeled data.
//! All public indices are 1-based.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Name accepted by [`TaskRegistry::resolve`] for the synthetic task.
pub const ALL_FOREGROUND: &str = "all-foreground";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct TaskRegistry {
    names: Vec<String>,
}

impl TaskRegistry {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let names: Vec<String> = names.iter().map(|s| s.as_ref().to_string()).collect();
        ensure!(
            names.len() >= 2,
            "at least two pertinent tasks are required, got {}",
            names.len()
        );
        for (i, name) in names.iter().enumerate() {
            ensure!(!name.trim().is_empty(), "task name at position {} is empty", i + 1);
            ensure!(
                name != ALL_FOREGROUND,
                "task name `{ALL_FOREGROUND}` is reserved for the synthetic task"
            );
            ensure!(
                !names[..i].contains(name),
                "duplicate task name `{name}`"
            );
        }
        Ok(Self { names })
    }

    /// Number of pertinent tasks `T`.
    pub fn num_tasks(&self) -> usize {
        self.names.len()
    }

    pub fn synthetic_index(&self) -> usize {
        self.names.len() + 1
    }

    pub fn prompt_dim(&self) -> usize {
        self.names.len() + 1
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Pertinent task indices `1..=T`.
    pub fn pertinent(&self) -> impl Iterator<Item = usize> + Clone {
        1..=self.names.len()
    }

    pub fn is_synthetic(&self, index: usize) -> bool {
        index == self.synthetic_index()
    }

    pub fn name(&self, index: usize) -> Result<&str> {
        self.check_index(index)?;
        Ok(if self.is_synthetic(index) {
            ALL_FOREGROUND
        } else {
            &self.names[index - 1]
        })
    }

    /// Maps a task name (or `all-foreground`) to its 1-based index.
    pub fn resolve(&self, name: &str) -> Result<usize> {
        if name == ALL_FOREGROUND {
            return Ok(self.synthetic_index());
        }
        self.names
            .iter()
            .position(|n| n == name)
            .map(|p| p + 1)
            .ok_or_else(|| crate::Error::Validation(format!("unknown task `{name}`")))
    }

    pub fn encode_prompt(&self, task_index: usize) -> Result<PromptVector> {
        self.check_index(task_index)?;
        let mut values = vec![0u8; self.prompt_dim()];
        values[task_index - 1] = 1;
        Ok(PromptVector { values })
    }

    fn check_index(&self, index: usize) -> Result<()> {
        ensure!(
            (1..=self.prompt_dim()).contains(&index),
            "task index {index} out of range 1..={}",
            self.prompt_dim()
        );
        Ok(())
    }
}

impl TryFrom<Vec<String>> for TaskRegistry {
    type Error = crate::Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        TaskRegistry::new(&names)
    }
}

impl From<TaskRegistry> for Vec<String> {
    fn from(r: TaskRegistry) -> Self {
        r.names
    }
}

/// One-hot task identity of length `T + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PromptVector {
    values: Vec<u8>,
}

impl PromptVector {
    /// Rebuilds a prompt from raw entries, rejecting anything that is not one-hot.
    pub fn from_values(values: Vec<u8>) -> Result<Self> {
        ensure!(
            values.iter().all(|&v| v <= 1) && values.iter().filter(|&&v| v == 1).count() == 1,
            "prompt is not one-hot: {values:?}"
        );
        Ok(Self { values })
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// 1-based task index carried by this prompt.
    pub fn decode(&self) -> usize {
        self.values.iter().position(|&v| v == 1).expect("one-hot invariant") + 1
    }

    pub fn dot(&self, other: &PromptVector) -> u32 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| u32::from(a) * u32::from(b))
            .sum()
    }
}

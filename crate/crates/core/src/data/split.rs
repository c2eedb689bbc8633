use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::synth::CorpusManifest;
use crate::error::{ensure, Error, Result};
use crate::rng::stream;

pub const TEST_FRACTION: f64 = 0.2;
pub const VALIDATION_FRACTION: f64 = 0.1;
pub const SPLIT_FILE: &str = "split.json";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSplit {
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl TaskSplit {
    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.labeled
            .iter()
            .chain(&self.unlabeled)
            .chain(&self.validation)
            .chain(&self.test)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub labeled_fraction: f64,
    pub seed: u64,
    /// Keyed by 1-based task index.
    pub tasks: BTreeMap<usize, TaskSplit>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPart {
    Labeled,
    Unlabeled,
    Validation,
    Test,
}

impl std::str::FromStr for SplitPart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "labeled" => Self::Labeled,
            "unlabeled" => Self::Unlabeled,
            "val" | "validation" => Self::Validation,
            "test" => Self::Test,
            other => return Err(Error::Validation(format!("unknown split part `{other}`"))),
        })
    }
}

impl SplitPlan {
    pub fn part(&self, task: usize, part: SplitPart) -> &[String] {
        let Some(t) = self.tasks.get(&task) else {
            return &[];
        };
        match part {
            SplitPart::Labeled => &t.labeled,
            SplitPart::Unlabeled => &t.unlabeled,
            SplitPart::Validation => &t.validation,
            SplitPart::Test => &t.test,
        }
    }

    /// `(task, id)` pairs of one part across all tasks, in task order.
    pub fn collect(&self, part: SplitPart) -> Vec<(usize, String)> {
        self.tasks
            .keys()
            .flat_map(|&t| self.part(t, part).iter().map(move |id| (t, id.clone())))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::header(path, e.to_string()))
    }
}

/// Number of labeled ids drawn from `train_ids` training ids.
pub fn labeled_count(train_ids: usize, labeled_fraction: f64) -> usize {
    ((train_ids as f64 * labeled_fraction).round() as usize).max(1)
}

pub fn split_corpus(manifest: &CorpusManifest, labeled_fraction: f64, seed: u64) -> Result<SplitPlan> {
    ensure!(
        labeled_fraction > 0.0 && labeled_fraction < 1.0,
        "labeled fraction must lie in (0, 1), got {labeled_fraction}"
    );
    let mut tasks = BTreeMap::new();
    for task in manifest.tasks.pertinent() {
        let mut ids = manifest.ids_for_task(task);
        ids.sort();
        let n = ids.len();
        let n_test = (n as f64 * TEST_FRACTION).round() as usize;
        let n_train = n - n_test;
        let n_val = ((n_train as f64 * VALIDATION_FRACTION).round() as usize).max(1);
        let n_lab = labeled_count(n_train, labeled_fraction);
        ensure!(
            n_test >= 1 && n_val + n_lab < n_train,
            "task {task} has {n} samples, too few to populate test/validation/labeled/unlabeled sets"
        );
        ids.shuffle(&mut stream(seed, &[0x5911, task as u64]));
        let test = ids[..n_test].to_vec();
        let validation = ids[n_test..n_test + n_val].to_vec();
        let labeled = ids[n_test + n_val..n_test + n_val + n_lab].to_vec();
        let unlabeled = ids[n_test + n_val + n_lab..].to_vec();
        tasks.insert(
            task,
            TaskSplit {
                labeled,
                unlabeled,
                validation,
                test,
            },
        );
    }
    Ok(SplitPlan {
        labeled_fraction,
        seed,
        tasks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_corpus, Shape3};
    use crate::tasks::TaskRegistry;
    use std::collections::HashSet;

    #[test]
    fn labeled_counts_match_reported_settings() {
        assert_eq!(labeled_count(62, 0.10), 6);
        assert_eq!(labeled_count(30, 0.10), 3);
        assert_eq!(labeled_count(62, 0.20), 12);
        assert_eq!(labeled_count(4, 0.01), 1);
    }

    #[test]
    fn split_is_disjoint_complete_and_deterministic() {
        let reg = TaskRegistry::new(&["a", "b"]).unwrap();
        let c = generate_synthetic_corpus(40, Shape3::cube(16), &reg, 1).unwrap();
        let p = split_corpus(&c.manifest, 0.1, 9).unwrap();
        assert_eq!(p, split_corpus(&c.manifest, 0.1, 9).unwrap());
        assert_ne!(p, split_corpus(&c.manifest, 0.1, 10).unwrap());
        for task in reg.pertinent() {
            let t = &p.tasks[&task];
            assert_eq!(t.test.len(), 8);
            assert_eq!(t.validation.len(), 3);
            assert_eq!(t.labeled.len(), 3);
            assert_eq!(t.unlabeled.len(), 26);
            let all: HashSet<_> = t.all().cloned().collect();
            assert_eq!(all.len(), 40);
            assert_eq!(all, c.manifest.ids_for_task(task).into_iter().collect());
        }
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let reg = TaskRegistry::new(&["a", "b"]).unwrap();
        let c = generate_synthetic_corpus(10, Shape3::cube(16), &reg, 1).unwrap();
        assert!(split_corpus(&c.manifest, 0.9, 1).is_err());
        assert!(split_corpus(&c.manifest, 0.0, 1).is_err());
        assert!(split_corpus(&c.manifest, 0.1, 1).is_ok());
    }
}

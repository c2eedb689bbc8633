//! Experiment configuration file (TOML) and its override layers.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use versemi_core::data::Shape3;
use versemi_core::model::ModelConfig;
use versemi_core::trainer::TrainConfig;
use versemi_core::TaskRegistry;

use crate::error::CliError;

pub const ENV_RUN_DIR: &str = "VERSEMI_RUN_DIR";
pub const ENV_MAX_STEPS: &str = "VERSEMI_MAX_STEPS";
pub const ENV_SEED: &str = "VERSEMI_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    /// Corpus directory; relative paths resolve against the config file's directory.
    pub root: PathBuf,
    pub samples_per_task: usize,
    pub shape: Shape3,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data/corpus"),
            samples_per_task: 40,
            shape: Shape3::cube(40),
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub labeled_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            labeled_fraction: 0.1,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    /// Root under which `<name>/` run directories are created.
    pub output_dir: PathBuf,
    pub tasks: Vec<String>,
    pub corpus: CorpusSpec,
    pub split: SplitSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "desk".into(),
            output_dir: PathBuf::from("runs"),
            tasks: ["lumpy", "sphere", "bean", "multifocal"].map(String::from).to_vec(),
            corpus: CorpusSpec::default(),
            split: SplitSpec::default(),
            model: ModelConfig {
                prompt_dim: 0,
                ..ModelConfig::default()
            },
            train: TrainConfig::default(),
        }
    }
}

/// Values that take precedence over the file, lowest first: environment, then flags.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub max_steps: Option<u64>,
    pub seed: Option<u64>,
}

impl Overrides {
    pub fn from_env() -> Result<Self, CliError> {
        fn parse(key: &str) -> Result<Option<u64>, CliError> {
            match std::env::var(key) {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map(Some)
                    .map_err(|_| CliError::Config(format!("{key}={v:?} is not a non-negative integer"))),
                Err(_) => Ok(None),
            }
        }
        Ok(Self {
            output_dir: std::env::var_os(ENV_RUN_DIR).map(PathBuf::from),
            max_steps: parse(ENV_MAX_STEPS)?,
            seed: parse(ENV_SEED)?,
        })
    }

    /// `other` wins wherever it is set.
    pub fn then(self, other: Overrides) -> Overrides {
        Overrides {
            output_dir: other.output_dir.or(self.output_dir),
            max_steps: other.max_steps.or(self.max_steps),
            seed: other.seed.or(self.seed),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serialises to TOML")
    }

    /// Reads a config file, resolving relative corpus and output paths
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.corpus.root.is_relative() {
            cfg.corpus.root = base.join(&cfg.corpus.root);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
        if let Some(s) = o.max_steps {
            self.train.max_steps = s;
        }
        if let Some(s) = o.seed {
            self.train.seed = s;
        }
    }

    pub fn registry(&self) -> Result<TaskRegistry, CliError> {
        Ok(TaskRegistry::new(&self.tasks)?)
    }

    /// Model settings with the prompt length taken from the task list.
    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let dim = self.registry()?.prompt_dim();
        let mut m = self.model.clone();
        if m.prompt_dim == 0 {
            m.prompt_dim = dim;
        }
        if m.prompt_dim != dim {
            return Err(CliError::Config(format!(
                "model.prompt_dim = {} but {} tasks need {dim}",
                m.prompt_dim,
                self.tasks.len()
            )));
        }
        Ok(m)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(CliError::Config(format!("invalid run name {:?}", self.name)));
        }
        self.registry()?;
        self.model_config()?.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Everything that affects the trained weights.
    pub fn fingerprint(&self) -> Result<String, CliError> {
        Ok(versemi_core::trainer::fingerprint(&(
            &self.tasks,
            &self.corpus.samples_per_task,
            &self.corpus.shape,
            &self.corpus.seed,
            &self.split,
            &self.model_config()?,
            &self.train,
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_toml("[train]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn flags_beat_environment() {
        let env = Overrides {
            max_steps: Some(10),
            seed: Some(1),
            output_dir: None,
        };
        let flags = Overrides {
            max_steps: Some(20),
            ..Overrides::default()
        };
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&env.then(flags));
        assert_eq!(cfg.train.max_steps, 20);
        assert_eq!(cfg.train.seed, 1);
    }

    #[test]
    fn prompt_dim_follows_tasks() {
        let cfg = ExperimentConfig::from_toml("tasks = [\"a\", \"b\", \"c\"]\n").unwrap();
        assert_eq!(cfg.model_config().unwrap().prompt_dim, 4);
        assert!(ExperimentConfig::from_toml("tasks = [\"a\", \"b\"]\n[model]\nprompt_dim = 5\n").is_err());
    }
}

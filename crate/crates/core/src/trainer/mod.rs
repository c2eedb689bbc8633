//! Semi-supervised training loop: batch construction, optimisation steps,
//! validation-based model selection, checkpointing and exact resume.

mod log_file;

pub use log_file::{read_log, LogRow, LOG_HEADER};

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{sample_patch, Corpus, Shape3, SplitPart, SplitPlan};
use crate::error::{ensure, Error, Result};
use crate::losses::{objective, LabeledSample, LossConfig, LossReport, StepBatch};
use crate::metrics::{evaluate, EvalMode, EvalSample, MetricsReport};
use crate::mixer::{mix_labeled, mix_unlabeled, sample_cut_mask};
use crate::model::{init_model, load_checkpoint, save_checkpoint, AdamConfig, CheckpointMeta, ModelConfig, ModelState};
use crate::rng::{derive_seed, Rng};
use crate::tasks::TaskRegistry;

pub const CKPT_BEST: &str = "ckpt_best";
pub const CKPT_LAST: &str = "ckpt_last";
pub const LOG_FILE: &str = "log.csv";
pub const VAL_FILE: &str = "val.csv";

const BATCH_STREAM: u64 = 0xba7c;
const PREFETCH_DEPTH: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub labeled_batch: usize,
    pub synthetic_batch: usize,
    /// 0 trains on the supervised objective only.
    pub unlabeled_batch: usize,
    pub max_steps: u64,
    pub val_interval: u64,
    pub seed: u64,
    pub patch: Shape3,
    pub loss: LossConfig,
    /// Linear ramp of the unsupervised weight over the first 10% of steps.
    pub unsup_ramp: bool,
    /// Polynomial learning-rate decay `(1 - t/T)^0.9` instead of a constant rate.
    pub poly_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            labeled_batch: 4,
            synthetic_batch: 4,
            unlabeled_batch: 4,
            max_steps: 2000,
            val_interval: 100,
            seed: 0,
            patch: Shape3::cube(32),
            loss: LossConfig::default(),
            unsup_ramp: false,
            poly_decay: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), "learning rate must be positive, got {}", self.lr);
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            "Adam betas must lie in [0, 1)"
        );
        ensure!(self.adam_eps > 0.0, "adam_eps must be positive");
        ensure!(self.labeled_batch >= 1, "labeled_batch must be at least 1");
        ensure!(self.val_interval >= 1, "val_interval must be at least 1");
        ensure!(
            self.max_steps == 0 || self.max_steps >= self.val_interval,
            "max_steps ({}) must be >= val_interval ({})",
            self.max_steps,
            self.val_interval
        );
        ensure!(!self.patch.is_empty(), "patch must be non-empty");
        self.loss.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    /// Learning rate for the update that produces step `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.poly_decay && self.max_steps > 0 {
            let t = (step - 1) as f64 / self.max_steps as f64;
            self.lr * (1.0 - t).max(0.0).powf(0.9)
        } else {
            self.lr
        }
    }

    /// Loss settings for step `step`, with the unsupervised ramp applied.
    pub fn loss_at(&self, step: u64) -> LossConfig {
        let mut cfg = self.loss.clone();
        if self.unsup_ramp && self.max_steps > 0 {
            let ramp = (self.max_steps as f64 * 0.1).max(1.0);
            cfg.unsup_weight *= (step as f64 / ramp).min(1.0);
        }
        cfg
    }

    /// Seed of the random stream that builds the batch for `step`.
    pub fn batch_seed(&self, step: u64) -> u64 {
        derive_seed(self.seed, &[BATCH_STREAM, step])
    }
}

fn pick<'a>(ids: &'a [String], rng: &mut Rng, what: &str) -> Result<&'a String> {
    ids.choose(rng)
        .ok_or_else(|| Error::Validation(format!("no {what} samples available")))
}

/// Draws one step's labeled, synthetic and unlabeled-mixed samples.
pub fn build_step_batch(
    split: &SplitPlan,
    corpus: &Corpus,
    registry: &TaskRegistry,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<StepBatch> {
    let tasks: Vec<usize> = registry.pertinent().collect();
    for &t in &tasks {
        ensure!(
            !split.part(t, SplitPart::Labeled).is_empty(),
            "task {} has no labeled samples",
            registry.name(t)?
        );
        if config.unlabeled_batch > 0 {
            ensure!(
                !split.part(t, SplitPart::Unlabeled).is_empty(),
                "task {} has no unlabeled samples",
                registry.name(t)?
            );
        }
    }
    let patch = config.patch;
    let crop = |id: &str, with_mask: bool, rng: &mut Rng| -> Result<(crate::data::Volume, Option<crate::data::BinaryMask>)> {
        let s = corpus.get(id)?;
        let mask = if with_mask {
            Some(
                s.mask
                    .as_ref()
                    .ok_or_else(|| Error::Validation(format!("labeled sample {id} has no mask")))?,
            )
        } else {
            None
        };
        sample_patch(&s.volume, mask, patch, rng)
    };

    // cycle through the tasks from a random offset so each batch is balanced
    let offset = rng.random_range(0..tasks.len());
    let mut labeled = Vec::with_capacity(config.labeled_batch);
    for b in 0..config.labeled_batch {
        let task = tasks[(offset + b) % tasks.len()];
        let id = pick(split.part(task, SplitPart::Labeled), rng, "labeled")?;
        let (image, label) = crop(id, true, rng)?;
        labeled.push(LabeledSample {
            image,
            label: label.expect("mask requested"),
            task,
        });
    }

    let mut synthetic = Vec::with_capacity(config.synthetic_batch);
    for _ in 0..config.synthetic_batch {
        let pair: Vec<usize> = tasks.choose_multiple(rng, 2).copied().collect();
        let (i, j) = (pair[0], pair[1]);
        let (xi, yi) = crop(pick(split.part(i, SplitPart::Labeled), rng, "labeled")?, true, rng)?;
        let (xj, yj) = crop(pick(split.part(j, SplitPart::Labeled), rng, "labeled")?, true, rng)?;
        let cut = sample_cut_mask(patch, rng)?;
        synthetic.push(mix_labeled(
            (i, j),
            &xi,
            &yi.expect("mask requested"),
            &xj,
            &yj.expect("mask requested"),
            &cut,
        )?);
    }

    let pool = split.collect(SplitPart::Unlabeled);
    let mut unlabeled = Vec::with_capacity(config.unlabeled_batch);
    for _ in 0..config.unlabeled_batch {
        ensure!(pool.len() >= 2, "need at least two unlabeled samples to mix");
        let pair: Vec<&(usize, String)> = pool.choose_multiple(rng, 2).collect();
        let (xi, _) = crop(&pair[0].1, false, rng)?;
        let (xj, _) = crop(&pair[1].1, false, rng)?;
        let cut = sample_cut_mask(patch, rng)?;
        unlabeled.push(mix_unlabeled(&xi, &xj, &cut)?);
    }
    Ok(StepBatch {
        labeled,
        synthetic,
        unlabeled,
    })
}

/// Context reported when a step aborts.
#[derive(Clone, Copy, Debug)]
pub struct StepContext {
    pub step: u64,
    pub batch_seed: u64,
}

/// One Adam update on the total objective. The parameters are left untouched
/// when the loss or its gradient is not finite.
pub fn train_step(
    state: &mut ModelState,
    batch: &StepBatch,
    registry: &TaskRegistry,
    config: &TrainConfig,
    ctx: StepContext,
) -> Result<LossReport> {
    let numerical = |reason: String| Error::Numerical {
        step: ctx.step,
        batch_seed: ctx.batch_seed,
        reason,
    };
    if !state.all_finite() {
        return Err(numerical("parameters are not finite before the update".into()));
    }
    let eval = objective(&state.network, batch, registry, &config.loss_at(ctx.step), None)?;
    if !eval.report.is_finite() {
        return Err(numerical(format!("non-finite loss {:?}", eval.report)));
    }
    if let Some(i) = eval.grads.iter().position(|g| !g.is_finite()) {
        return Err(numerical(format!("non-finite gradient at parameter {i}")));
    }
    let lr = config.lr_at(ctx.step);
    state.optimizer.step(state.network.params_mut(), &eval.grads, lr);
    state.step += 1;
    Ok(eval.report)
}

/// Whole-volume evaluation samples of one split part.
pub fn eval_set(corpus: &Corpus, split: &SplitPlan, part: SplitPart) -> Result<Vec<EvalSample>> {
    split
        .collect(part)
        .into_iter()
        .map(|(task, id)| {
            let s = corpus.get(&id)?;
            let label = s
                .mask
                .clone()
                .ok_or_else(|| Error::Validation(format!("sample {id} has no ground truth")))?;
            Ok(EvalSample {
                id,
                task,
                image: s.volume.clone(),
                label,
            })
        })
        .collect()
}

pub fn validate(state: &ModelState, validation: &[EvalSample], registry: &TaskRegistry) -> Result<MetricsReport> {
    evaluate(state, validation, registry, EvalMode::WithTaskInfo)
}

/// SHA-256 over the JSON encoding of any configuration value.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("configuration serialises");
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Continue from `ckpt_last` in the run directory.
    pub resume: bool,
    /// Stop (after checkpointing) once this step has completed.
    pub halt_after: Option<u64>,
    /// Recorded in checkpoints; derived from the configs when absent.
    pub fingerprint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedArtifact {
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub best_val_dice: f64,
    pub best_step: u64,
    pub initial_val_dice: f64,
    pub fingerprint: String,
    pub final_step: u64,
    pub final_checksum: String,
}

struct Selection {
    best_dice: f64,
    best_step: u64,
    initial_dice: f64,
}

fn meta_for(
    registry: &TaskRegistry,
    state: &ModelState,
    fingerprint: &str,
    sel: &Selection,
) -> CheckpointMeta {
    CheckpointMeta {
        model: state.config().clone(),
        tasks: registry.names().to_vec(),
        step: state.step,
        fingerprint: fingerprint.to_string(),
        n_params: state.n_params(),
        best_dice: Some(sel.best_dice),
        best_step: Some(sel.best_step),
        initial_dice: Some(sel.initial_dice),
        adam: state.optimizer.config,
        adam_t: state.optimizer.t,
        has_optimizer: true,
    }
}

fn append(path: &Path, text: &str) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Trains for `config.max_steps` steps inside `run_dir`, validating at step 0,
/// every `val_interval` steps and at the end.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    config: &TrainConfig,
    model: &ModelConfig,
    corpus: &Corpus,
    split: &SplitPlan,
    registry: &TaskRegistry,
    run_dir: &Path,
    options: &FitOptions,
) -> Result<TrainedArtifact> {
    config.validate()?;
    let mut model = model.clone();
    if model.prompt_dim == 0 {
        model.prompt_dim = registry.prompt_dim();
    }
    ensure!(
        model.prompt_dim == registry.prompt_dim(),
        "model prompt_dim {} does not match {} task prompts",
        model.prompt_dim,
        registry.prompt_dim()
    );
    model.check_input(config.patch)?;
    let fp = options
        .fingerprint
        .clone()
        .unwrap_or_else(|| fingerprint(&(config, &model, registry.names())));
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let best_path = run_dir.join(CKPT_BEST);
    let last_path = run_dir.join(CKPT_LAST);
    let log_path = run_dir.join(LOG_FILE);
    let val_path = run_dir.join(VAL_FILE);
    let validation = eval_set(corpus, split, SplitPart::Validation)?;

    let run_validation = |state: &ModelState| -> Result<f64> {
        let rep = validate(state, &validation, registry)?;
        let dice = rep.mean_task_dice();
        append(&val_path, &format!("{},{}\n", state.step, dice))?;
        log::info!("step {} validation mean dice {:.2}", state.step, dice);
        Ok(dice)
    };

    let (mut state, mut sel) = if options.resume {
        let ck = load_checkpoint(&last_path)?;
        ensure!(
            ck.meta.fingerprint == fp,
            "checkpoint {} was produced by a different configuration",
            last_path.display()
        );
        ensure!(ck.meta.has_optimizer, "checkpoint {} lacks optimizer state", last_path.display());
        let step = ck.state.step;
        log_file::truncate_rows(&log_path, step, Some(LOG_HEADER))?;
        log_file::truncate_rows(&val_path, step, None)?;
        let sel = Selection {
            best_dice: ck.meta.best_dice.unwrap_or(f64::NEG_INFINITY),
            best_step: ck.meta.best_step.unwrap_or(0),
            initial_dice: ck.meta.initial_dice.unwrap_or(f64::NEG_INFINITY),
        };
        log::info!("resuming from step {step}");
        (ck.state, sel)
    } else {
        let mut state = init_model(&model)?;
        state.optimizer = crate::model::Adam::new(state.n_params(), config.adam());
        fs::write(&log_path, format!("{LOG_HEADER}\n")).map_err(|e| Error::io(&log_path, e))?;
        fs::write(&val_path, "").map_err(|e| Error::io(&val_path, e))?;
        let dice = run_validation(&state)?;
        let sel = Selection {
            best_dice: dice,
            best_step: 0,
            initial_dice: dice,
        };
        save_checkpoint(&best_path, &meta_for(registry, &state, &fp, &sel), &state, false)?;
        save_checkpoint(&last_path, &meta_for(registry, &state, &fp, &sel), &state, true)?;
        (state, sel)
    };

    let started = Instant::now();
    let first = state.step + 1;
    let last = options.halt_after.map_or(config.max_steps, |h| h.min(config.max_steps));
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = std::sync::mpsc::sync_channel(PREFETCH_DEPTH);
        scope.spawn(move || {
            for step in first..=last {
                let batch_seed = config.batch_seed(step);
                let batch = build_step_batch(split, corpus, registry, config, &mut Rng::seed_from_u64(batch_seed));
                if tx.send((step, batch_seed, batch)).is_err() {
                    break;
                }
            }
        });
        let mut rows = String::new();
        for (step, batch_seed, batch) in rx {
            let report = train_step(&mut state, &batch?, registry, config, StepContext { step, batch_seed })?;
            rows.push_str(&LogRow::from_report(step, &report).to_csv());
            rows.push('\n');
            let at_val = step % config.val_interval == 0 || step == config.max_steps;
            if at_val || step == last {
                append(&log_path, &rows)?;
                rows.clear();
            }
            if at_val {
                let dice = run_validation(&state)?;
                if dice > sel.best_dice {
                    sel.best_dice = dice;
                    sel.best_step = step;
                    save_checkpoint(&best_path, &meta_for(registry, &state, &fp, &sel), &state, false)?;
                }
            }
            if at_val || step == last {
                save_checkpoint(&last_path, &meta_for(registry, &state, &fp, &sel), &state, true)?;
            }
            if step % 50 == 0 {
                let per = started.elapsed().as_secs_f64() / (step - first + 1) as f64;
                log::info!(
                    "step {step}/{} l_total {:.4} ({per:.2} s/step)",
                    config.max_steps,
                    report.l_total
                );
            }
        }
        Ok(())
    })?;

    Ok(TrainedArtifact {
        best_checkpoint: best_path,
        final_checkpoint: last_path,
        log_path,
        best_val_dice: sel.best_dice,
        best_step: sel.best_step,
        initial_val_dice: sel.initial_dice,
        fingerprint: fp,
        final_step: state.step,
        final_checksum: state.checksum(),
    })
}

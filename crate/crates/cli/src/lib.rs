//! Operator-facing commands: corpus synthesis, training, evaluation,
//! prompted prediction and diagnostic exports.

pub mod config;
mod error;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use versemi_core::data::{
    generate_synthetic_corpus, load_corpus, load_volume, save_mask, split_corpus, write_corpus, BinaryMask, Corpus,
    SplitPart, SplitPlan, SPLIT_FILE,
};
use versemi_core::metrics::{evaluate, EvalMode, FOREGROUND_THRESHOLD};
use versemi_core::model::{extract_features, forward_prompts, load_checkpoint, Checkpoint};
use versemi_core::trainer::{eval_set, fit, FitOptions, TrainedArtifact};
use versemi_core::TaskRegistry;

pub use config::{ExperimentConfig, Overrides};
pub use error::CliError;

pub const HISTOGRAM_BINS: usize = 20;
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "versemi", version, about = "Task-prompted semi-supervised volumetric segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and its split described by a config file.
    SynthData {
        #[arg(short, long)]
        config: PathBuf,
        /// Overwrite a non-empty corpus directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model; writes `<output_dir>/<name>/{config.toml,log.csv,val.csv,ckpt_best,ckpt_last}`.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Continue from `ckpt_last` of an interrupted run.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        overrides: OverrideArgs,
        /// Stop after this step, leaving a resumable checkpoint.
        #[arg(long, value_name = "STEP")]
        halt_after: Option<u64>,
    },
    /// Score a checkpoint on one split part and write metric CSVs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitPart,
        #[arg(long, default_value = "with-task-info")]
        mode: EvalMode,
        /// Also write one row per sample.
        #[arg(long)]
        per_sample: bool,
        /// Output directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment one volume under a task prompt and write the binary mask.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Volume file (`.raw` with its `.meta` sidecar).
        #[arg(long)]
        input: PathBuf,
        /// Task name, or `all-foreground` for the synthetic task.
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        output: PathBuf,
    },
    /// Export pooled embeddings and foreground-probability histograms as CSV.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitPart,
        /// Output directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Default, Args)]
pub struct OverrideArgs {
    /// Root directory for run outputs (beats VERSEMI_RUN_DIR and the file).
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl From<OverrideArgs> for Overrides {
    fn from(a: OverrideArgs) -> Self {
        Overrides {
            output_dir: a.output_dir,
            max_steps: a.max_steps,
            seed: a.seed,
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    match cli.command {
        Command::SynthData { config, force } => cmd_synth_data(&config, force).map(|_| ()),
        Command::Train {
            config,
            resume,
            overrides,
            halt_after,
        } => {
            let o = Overrides::from_env()?.then(overrides.into());
            let art = cmd_train(&config, &o, resume, halt_after)?;
            println!(
                "trained {} steps; best validation Dice {:.2} at step {} ({})",
                art.final_step,
                art.best_val_dice,
                art.best_step,
                art.best_checkpoint.display()
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            config,
            split,
            mode,
            per_sample,
            out,
        } => cmd_eval(&checkpoint, &config, split, mode, per_sample, out.as_deref()).map(|_| ()),
        Command::Predict {
            checkpoint,
            input,
            prompt,
            output,
        } => cmd_predict(&checkpoint, &input, &prompt, &output).map(|_| ()),
        Command::Diagnose {
            checkpoint,
            config,
            split,
            out,
        } => cmd_diagnose(&checkpoint, &config, split, out.as_deref()).map(|_| ()),
    }
}

fn is_nonempty_dir(path: &Path) -> bool {
    fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Writes the corpus and `split.json` under `corpus.root`; returns the root.
pub fn cmd_synth_data(config: &Path, force: bool) -> Result<PathBuf, CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let root = cfg.corpus.root.clone();
    if is_nonempty_dir(&root) {
        if !force {
            return Err(CliError::Config(format!(
                "{} exists and is not empty; pass --force to overwrite",
                root.display()
            )));
        }
        fs::remove_dir_all(&root).map_err(|e| CliError::io(&root, e))?;
    }
    let registry = cfg.registry()?;
    let corpus = generate_synthetic_corpus(cfg.corpus.samples_per_task, cfg.corpus.shape, &registry, cfg.corpus.seed)?;
    let split = split_corpus(&corpus.manifest, cfg.split.labeled_fraction, cfg.split.seed)?;
    write_corpus(&root, &corpus)?;
    split.save(&root.join(SPLIT_FILE))?;

    println!("corpus {} ({} volumes of {})", root.display(), corpus.samples().len(), cfg.corpus.shape);
    println!("{:<16} {:>8} {:>10} {:>10} {:>6}", "task", "labeled", "unlabeled", "validation", "test");
    for task in registry.pertinent() {
        println!(
            "{:<16} {:>8} {:>10} {:>10} {:>6}",
            registry.name(task)?,
            split.part(task, SplitPart::Labeled).len(),
            split.part(task, SplitPart::Unlabeled).len(),
            split.part(task, SplitPart::Validation).len(),
            split.part(task, SplitPart::Test).len()
        );
    }
    Ok(root)
}

fn load_data(cfg: &ExperimentConfig) -> Result<(Corpus, SplitPlan, TaskRegistry), CliError> {
    let root = &cfg.corpus.root;
    if !root.join(SPLIT_FILE).exists() {
        return Err(CliError::Config(format!(
            "no corpus at {}; run `versemi synth-data` first",
            root.display()
        )));
    }
    let corpus = load_corpus(root)?;
    let split = SplitPlan::load(&root.join(SPLIT_FILE))?;
    let registry = cfg.registry()?;
    if corpus.registry() != &registry {
        return Err(CliError::Config(format!(
            "corpus at {} was generated for tasks {:?}, config lists {:?}",
            root.display(),
            corpus.registry().names(),
            registry.names()
        )));
    }
    Ok((corpus, split, registry))
}

pub fn cmd_train(
    config: &Path,
    overrides: &Overrides,
    resume: bool,
    halt_after: Option<u64>,
) -> Result<TrainedArtifact, CliError> {
    let mut cfg = ExperimentConfig::load(config)?;
    cfg.apply(overrides);
    cfg.validate()?;
    let (corpus, split, registry) = load_data(&cfg)?;
    let run_dir = cfg.run_dir();
    create_dir(&run_dir)?;
    write(&run_dir.join(CONFIG_FILE), &cfg.to_toml())?;
    let options = FitOptions {
        resume,
        halt_after,
        fingerprint: Some(cfg.fingerprint()?),
    };
    Ok(fit(&cfg.train, &cfg.model_config()?, &corpus, &split, &registry, &run_dir, &options)?)
}

fn open_checkpoint(path: &Path) -> Result<(Checkpoint, TaskRegistry), CliError> {
    if !path.exists() {
        return Err(CliError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        ));
    }
    let ck = load_checkpoint(path)?;
    let registry = TaskRegistry::new(&ck.meta.tasks)?;
    Ok((ck, registry))
}

fn output_dir(out: Option<&Path>, checkpoint: &Path) -> PathBuf {
    out.map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf())
}

fn part_name(part: SplitPart) -> &'static str {
    match part {
        SplitPart::Labeled => "labeled",
        SplitPart::Unlabeled => "unlabeled",
        SplitPart::Validation => "validation",
        SplitPart::Test => "test",
    }
}

/// Writes `metrics_<split>_<mode>.csv` (and `samples_…` with `per_sample`); returns the summary path.
pub fn cmd_eval(
    checkpoint: &Path,
    config: &Path,
    split: SplitPart,
    mode: EvalMode,
    per_sample: bool,
    out: Option<&Path>,
) -> Result<PathBuf, CliError> {
    let (ck, registry) = open_checkpoint(checkpoint)?;
    let cfg = ExperimentConfig::load(config)?;
    let (corpus, plan, data_registry) = load_data(&cfg)?;
    if data_registry != registry {
        return Err(CliError::Config("checkpoint and corpus disagree on the task list".into()));
    }
    let samples = eval_set(&corpus, &plan, split)?;
    let report = evaluate(&ck.state, &samples, &registry, mode)?;
    let dir = output_dir(out, checkpoint);
    create_dir(&dir)?;
    let stem = format!("{}_{mode}", part_name(split));
    let summary = dir.join(format!("metrics_{stem}.csv"));
    write(&summary, &report.to_csv())?;
    if per_sample {
        write(&dir.join(format!("samples_{stem}.csv")), &report.per_sample_csv())?;
    }
    println!("{} split, {mode} (step {})", part_name(split), ck.meta.step);
    print!("{}", report.table());
    Ok(summary)
}

pub fn cmd_predict(checkpoint: &Path, input: &Path, prompt: &str, output: &Path) -> Result<BinaryMask, CliError> {
    let (ck, registry) = open_checkpoint(checkpoint)?;
    let task = registry.resolve(prompt)?;
    let volume = load_volume(input)?;
    let probs = forward_prompts(&ck.state, &volume, &[registry.encode_prompt(task)?])?;
    let mask = BinaryMask::threshold(volume.shape(), probs[0].foreground(), FOREGROUND_THRESHOLD);
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_mask(output, &mask, volume.spacing(), Some(task))?;
    println!(
        "{}: {} foreground voxels of {} under prompt `{prompt}`",
        output.display(),
        mask.count(),
        volume.shape().len()
    );
    Ok(mask)
}

/// Foreground-probability histogram over `[0, 1]` with equal-width bins.
pub fn histogram(values: &[f32], bins: usize) -> Vec<u64> {
    let mut h = vec![0u64; bins];
    for &v in values {
        let b = ((v.clamp(0.0, 1.0) as f64) * bins as f64) as usize;
        h[b.min(bins - 1)] += 1;
    }
    h
}

/// Writes `embeddings.csv` and `histograms.csv`; returns their paths.
pub fn cmd_diagnose(
    checkpoint: &Path,
    config: &Path,
    split: SplitPart,
    out: Option<&Path>,
) -> Result<(PathBuf, PathBuf), CliError> {
    let (ck, registry) = open_checkpoint(checkpoint)?;
    let cfg = ExperimentConfig::load(config)?;
    let (corpus, plan, data_registry) = load_data(&cfg)?;
    if data_registry != registry {
        return Err(CliError::Config("checkpoint and corpus disagree on the task list".into()));
    }
    let samples = eval_set(&corpus, &plan, split)?;
    let dim = ck.state.config().embed_dim();

    let mut emb = String::from("id,task");
    for c in 0..dim {
        let _ = write!(emb, ",e{c}");
    }
    emb.push('\n');
    let mut hist = String::from("id,task");
    for b in 0..HISTOGRAM_BINS {
        let _ = write!(hist, ",bin{b}");
    }
    hist.push('\n');

    for s in &samples {
        let name = registry.name(s.task)?;
        let features = extract_features(&ck.state, std::slice::from_ref(&s.image))?;
        let _ = write!(emb, "{},{name}", s.id);
        for v in &features[0].pooled {
            let _ = write!(emb, ",{v}");
        }
        emb.push('\n');
        let probs = forward_prompts(&ck.state, &s.image, &[registry.encode_prompt(s.task)?])?;
        let _ = write!(hist, "{},{name}", s.id);
        for c in histogram(probs[0].foreground(), HISTOGRAM_BINS) {
            let _ = write!(hist, ",{c}");
        }
        hist.push('\n');
    }
    let dir = output_dir(out, checkpoint);
    create_dir(&dir)?;
    let (e, h) = (dir.join("embeddings.csv"), dir.join("histograms.csv"));
    write(&e, &emb)?;
    write(&h, &hist)?;
    println!("{} samples, embedding dimension {dim}: {} {}", samples.len(), e.display(), h.display());
    Ok((e, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn histogram_bins_cover_unit_interval() {
        let h = histogram(&[0.0, 0.04, 0.05, 0.5, 0.999, 1.0], 20);
        assert_eq!(h.iter().sum::<u64>(), 6);
        assert_eq!(h[0], 2);
        assert_eq!(h[1], 1);
        assert_eq!(h[10], 1);
        assert_eq!(h[19], 2);
    }
}

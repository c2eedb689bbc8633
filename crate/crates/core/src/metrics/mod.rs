//! Overlap and surface-distance metrics, model evaluation and prompt leakage.

mod distance;

pub use distance::squared_edt;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BinaryMask, Spacing, Volume};
use crate::error::{ensure, Error, Result};
use crate::mixer::{restrict_label, CutSide, MixedSample};
use crate::model::{forward_prompts, ModelState};
use crate::tasks::TaskRegistry;

/// Foreground decision rule for probability maps.
pub const FOREGROUND_THRESHOLD: f32 = 0.5;

fn check_pair(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    ensure!(a.shape() == b.shape(), "mask shapes differ: {} vs {}", a.shape(), b.shape());
    Ok(())
}

/// `(|A ∩ B|, |A|, |B|)`.
fn overlap_counts(a: &BinaryMask, b: &BinaryMask) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut na = 0;
    let mut nb = 0;
    for (&x, &y) in a.voxels().iter().zip(b.voxels()) {
        inter += usize::from(x & y);
        na += usize::from(x);
        nb += usize::from(y);
    }
    (inter, na, nb)
}

/// `2|A∩B| / (|A|+|B|)`; 1.0 (with a logged warning) when both are empty.
pub fn dice_score(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_pair(a, b)?;
    let (i, na, nb) = overlap_counts(a, b);
    if na + nb == 0 {
        log::warn!("dice of two empty masks defined as 1.0");
        return Ok(1.0);
    }
    Ok(2.0 * i as f64 / (na + nb) as f64)
}

/// `|A∩B| / |A∪B|`; 1.0 (with a logged warning) when both are empty.
pub fn jaccard_score(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_pair(a, b)?;
    let (i, na, nb) = overlap_counts(a, b);
    let union = na + nb - i;
    if union == 0 {
        log::warn!("jaccard of two empty masks defined as 1.0");
        return Ok(1.0);
    }
    Ok(i as f64 / union as f64)
}

fn surface_flags(m: &BinaryMask) -> Vec<bool> {
    let s = m.shape();
    let v = m.voxels();
    let mut out = vec![false; s.len()];
    for z in 0..s.d {
        for y in 0..s.h {
            for x in 0..s.w {
                let i = s.index(z, y, x);
                if v[i] == 0 {
                    continue;
                }
                let bg = |dz: isize, dy: isize, dx: isize| {
                    let (zz, yy, xx) = (z as isize + dz, y as isize + dy, x as isize + dx);
                    if zz < 0 || yy < 0 || xx < 0 || zz >= s.d as isize || yy >= s.h as isize || xx >= s.w as isize {
                        return true;
                    }
                    v[s.index(zz as usize, yy as usize, xx as usize)] == 0
                };
                out[i] = bg(-1, 0, 0) || bg(1, 0, 0) || bg(0, -1, 0) || bg(0, 1, 0) || bg(0, 0, -1) || bg(0, 0, 1);
            }
        }
    }
    out
}

/// Foreground voxels with at least one background (or out-of-bounds)
/// face neighbour, in raster order.
pub fn surface_voxels(m: &BinaryMask) -> Result<Vec<[usize; 3]>> {
    if m.is_empty() {
        return Err(Error::UndefinedSurfaceMetric("surface of an empty mask"));
    }
    let s = m.shape();
    Ok(surface_flags(m)
        .iter()
        .enumerate()
        .filter(|(_, &f)| f)
        .map(|(i, _)| {
            let (z, y, x) = s.coords(i);
            [z, y, x]
        })
        .collect())
}

/// Distances from each surface voxel of `from` to the surface of `to`.
fn directed_surface_distances(from: &[bool], to: &[bool], m: &BinaryMask, spacing: Spacing) -> Vec<f64> {
    let d2 = squared_edt(m.shape(), to, spacing);
    from.iter()
        .zip(&d2)
        .filter(|(&f, _)| f)
        .map(|(_, &d)| d.sqrt())
        .collect()
}

fn both_directions(pred: &BinaryMask, gt: &BinaryMask, spacing: Spacing) -> Result<(Vec<f64>, Vec<f64>)> {
    check_pair(pred, gt)?;
    ensure!(
        spacing.iter().all(|s| s.is_finite() && *s > 0.0),
        "spacing must be positive, got {spacing:?}"
    );
    if pred.is_empty() {
        return Err(Error::UndefinedSurfaceMetric("prediction is empty"));
    }
    if gt.is_empty() {
        return Err(Error::UndefinedSurfaceMetric("ground truth is empty"));
    }
    let sp = surface_flags(pred);
    let sg = surface_flags(gt);
    Ok((
        directed_surface_distances(&sp, &sg, pred, spacing),
        directed_surface_distances(&sg, &sp, pred, spacing),
    ))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Average of the two directed mean surface distances.
pub fn asd(pred: &BinaryMask, gt: &BinaryMask, spacing: Spacing) -> Result<f64> {
    let (a, b) = both_directions(pred, gt, spacing)?;
    Ok((mean(&a) + mean(&b)) / 2.0)
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// 95th percentile of the pooled directed surface distances.
pub fn hd95(pred: &BinaryMask, gt: &BinaryMask, spacing: Spacing) -> Result<f64> {
    let (mut a, b) = both_directions(pred, gt, spacing)?;
    a.extend(b);
    Ok(percentile(&mut a, 95.0))
}

// ---------------------------------------------------------------------------
// evaluation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Each sample is prompted with its own task.
    WithTaskInfo,
    /// Each sample is prompted with the synthetic all-foreground task.
    TaskAgnostic,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "with-task-info" => Ok(Self::WithTaskInfo),
            "task-agnostic" => Ok(Self::TaskAgnostic),
            other => Err(Error::Validation(format!(
                "unknown evaluation mode `{other}` (expected with-task-info or task-agnostic)"
            ))),
        }
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::WithTaskInfo => "with-task-info",
            Self::TaskAgnostic => "task-agnostic",
        })
    }
}

#[derive(Clone, Debug)]
pub struct EvalSample {
    pub id: String,
    /// Pertinent task index, 1-based.
    pub task: usize,
    pub image: Volume,
    pub label: BinaryMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub task: String,
    pub dice: f64,
    pub jaccard: f64,
    /// `None` when the prediction or ground truth is empty.
    pub asd: Option<f64>,
    pub hd95: Option<f64>,
    pub both_empty: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub samples: usize,
    /// Percent.
    pub dice: f64,
    /// Percent.
    pub jaccard: f64,
    /// Voxel units (or spacing units), averaged over defined samples.
    pub asd: Option<f64>,
    pub hd95: Option<f64>,
    /// Samples whose surface metrics were undefined.
    pub surface_missing: usize,
}

impl MetricSummary {
    fn from_samples(rows: &[&SampleMetrics]) -> Self {
        let n = rows.len();
        let avg = |f: &dyn Fn(&SampleMetrics) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n as f64;
        let defined = |f: &dyn Fn(&SampleMetrics) -> Option<f64>| {
            let v: Vec<f64> = rows.iter().filter_map(|r| f(r)).collect();
            (!v.is_empty()).then(|| mean(&v))
        };
        Self {
            samples: n,
            dice: 100.0 * avg(&|r| r.dice),
            jaccard: 100.0 * avg(&|r| r.jaccard),
            asd: defined(&|r| r.asd),
            hd95: defined(&|r| r.hd95),
            surface_missing: rows.iter().filter(|r| r.asd.is_none()).count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: EvalMode,
    /// Keyed by task name, in registry order.
    pub per_task: Vec<(String, MetricSummary)>,
    pub overall: MetricSummary,
    pub samples: Vec<SampleMetrics>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

impl MetricsReport {
    pub fn from_samples(mode: EvalMode, registry: &TaskRegistry, samples: Vec<SampleMetrics>) -> Result<Self> {
        ensure!(!samples.is_empty(), "metrics report over zero samples");
        let mut by_task: BTreeMap<usize, Vec<&SampleMetrics>> = BTreeMap::new();
        for s in &samples {
            by_task.entry(registry.resolve(&s.task)?).or_default().push(s);
        }
        let per_task = by_task
            .into_iter()
            .map(|(k, rows)| Ok((registry.name(k)?.to_string(), MetricSummary::from_samples(&rows))))
            .collect::<Result<_>>()?;
        let all: Vec<&SampleMetrics> = samples.iter().collect();
        let overall = MetricSummary::from_samples(&all);
        Ok(Self {
            mode,
            per_task,
            overall,
            samples,
        })
    }

    pub fn task(&self, name: &str) -> Option<&MetricSummary> {
        self.per_task.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    /// Mean Dice (percent) over per-task means.
    pub fn mean_task_dice(&self) -> f64 {
        self.per_task.iter().map(|(_, s)| s.dice).sum::<f64>() / self.per_task.len() as f64
    }

    /// Summary rows: `task,samples,dice,jaccard,asd,hd95,surface_missing`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,samples,dice,jaccard,asd,hd95,surface_missing\n");
        let rows = self.per_task.iter().map(|(n, s)| (n.as_str(), s)).chain([("overall", &self.overall)]);
        for (name, s) in rows {
            let _ = writeln!(
                out,
                "{name},{},{:.4},{:.4},{},{},{}",
                s.samples,
                s.dice,
                s.jaccard,
                fmt_opt(s.asd),
                fmt_opt(s.hd95),
                s.surface_missing
            );
        }
        out
    }

    pub fn per_sample_csv(&self) -> String {
        let mut out = String::from("id,task,dice,jaccard,asd,hd95,both_empty\n");
        for r in &self.samples {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{},{},{}",
                r.id,
                r.task,
                r.dice,
                r.jaccard,
                fmt_opt(r.asd),
                fmt_opt(r.hd95),
                r.both_empty
            );
        }
        out
    }

    /// Fixed-width table with Dice (%), Jaccard (%), ASD (voxel), 95HD (voxel).
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<16} {:>7} {:>10} {:>12} {:>11} {:>12}\n",
            "Task", "N", "Dice (%)", "Jaccard (%)", "ASD (voxel)", "95HD (voxel)"
        );
        let rows = self.per_task.iter().map(|(n, s)| (n.as_str(), s)).chain([("overall", &self.overall)]);
        for (name, s) in rows {
            let _ = writeln!(
                out,
                "{:<16} {:>7} {:>10.2} {:>12.2} {:>11} {:>12}",
                name,
                s.samples,
                s.dice,
                s.jaccard,
                s.asd.map_or("NA".into(), |v| format!("{v:.2}")),
                s.hd95.map_or("NA".into(), |v| format!("{v:.2}")),
            );
        }
        out
    }
}

/// Scores one thresholded prediction against its ground truth.
pub fn score_sample(id: &str, task: &str, pred: &BinaryMask, gt: &BinaryMask, spacing: Spacing) -> Result<SampleMetrics> {
    let dice = dice_score(pred, gt)?;
    let jaccard = jaccard_score(pred, gt)?;
    let surface = |r: Result<f64>| match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedSurfaceMetric(_)) => Ok(None),
        Err(e) => Err(e),
    };
    Ok(SampleMetrics {
        id: id.to_string(),
        task: task.to_string(),
        dice,
        jaccard,
        asd: surface(asd(pred, gt, spacing))?,
        hd95: surface(hd95(pred, gt, spacing))?,
        both_empty: pred.is_empty() && gt.is_empty(),
    })
}

/// Thresholded prediction of one volume under one task prompt.
pub fn predict_mask(state: &ModelState, image: &Volume, registry: &TaskRegistry, task: usize) -> Result<BinaryMask> {
    let p = forward_prompts(state, image, &[registry.encode_prompt(task)?])?;
    Ok(BinaryMask::threshold(image.shape(), p[0].foreground(), FOREGROUND_THRESHOLD))
}

pub fn evaluate(state: &ModelState, eval_set: &[EvalSample], registry: &TaskRegistry, mode: EvalMode) -> Result<MetricsReport> {
    ensure!(!eval_set.is_empty(), "evaluation set is empty");
    let rows = eval_set
        .par_iter()
        .map(|s| {
            ensure!(
                registry.pertinent().any(|k| k == s.task),
                "sample {} has non-pertinent task index {}",
                s.id,
                s.task
            );
            let prompt_task = match mode {
                EvalMode::WithTaskInfo => s.task,
                EvalMode::TaskAgnostic => registry.synthetic_index(),
            };
            let pred = predict_mask(state, &s.image, registry, prompt_task)?;
            score_sample(&s.id, registry.name(s.task)?, &pred, &s.label, s.image.spacing())
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_samples(mode, registry, rows)
}

// ---------------------------------------------------------------------------
// prompt leakage

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub volumes: usize,
    /// Predicted foreground voxels over all prompts and volumes.
    pub predicted: usize,
    /// Predicted voxels falling inside the other source's ground truth.
    pub leaked: usize,
}

impl LeakageReport {
    pub fn fraction(&self) -> f64 {
        if self.predicted == 0 {
            0.0
        } else {
            self.leaked as f64 / self.predicted as f64
        }
    }
}

/// For each labeled cutmix volume built from tasks `(i, j)`, predicts under
/// prompt `i` and counts foreground voxels inside the visible part of task
/// `j`'s ground truth, and symmetrically for prompt `j`.
pub fn prompt_leakage(state: &ModelState, mixed: &[MixedSample], registry: &TaskRegistry) -> Result<LeakageReport> {
    ensure!(!mixed.is_empty(), "leakage needs at least one mixed volume");
    let counts = mixed
        .par_iter()
        .map(|m| {
            let (i, j) = m
                .source_tasks
                .ok_or_else(|| Error::Validation("mixed volume lacks source tasks".into()))?;
            let (yi, yj) = m
                .source_labels
                .as_ref()
                .ok_or_else(|| Error::Validation("mixed volume lacks source labels".into()))?;
            let gi = restrict_label(yi, &m.cut, CutSide::Kept)?;
            let gj = restrict_label(yj, &m.cut, CutSide::Complement)?;
            let prompts = [registry.encode_prompt(i)?, registry.encode_prompt(j)?];
            let maps = forward_prompts(state, &m.image, &prompts)?;
            let mut predicted = 0;
            let mut leaked = 0;
            for (map, other) in maps.iter().zip([&gj, &gi]) {
                let pred = BinaryMask::threshold(m.image.shape(), map.foreground(), FOREGROUND_THRESHOLD);
                predicted += pred.count();
                leaked += pred.and(other)?.count();
            }
            Ok((predicted, leaked))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LeakageReport {
        volumes: mixed.len(),
        predicted: counts.iter().map(|c| c.0).sum(),
        leaked: counts.iter().map(|c| c.1).sum(),
    })
}

//! Training objectives and their gradients.
//!
//! The public scalar functions (`soft_dice_loss`, `cross_entropy_loss`, ...)
//! evaluate single terms on `f32` maps. [`objective`] evaluates the complete
//! weighted objective of one step batch and backpropagates it through a
//! [`Network`] of any precision; the trainer uses it in `f32`, gradient checks
//! replay it in `f64`.

use serde::{Deserialize, Serialize};

use crate::data::{BinaryMask, Volume};
use crate::error::{ensure, Error, Result};
use crate::mixer::{restrict_label, CutSide, MixedSample};
use crate::model::{volume_feature_as, HeadTrace, ModelState, Network, ProbMap, TrunkTrace};
use crate::nn::{Feature, Real};
use crate::tasks::TaskRegistry;

pub const DICE_SMOOTH: f64 = 1e-5;
pub const CE_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub dice_smooth: f64,
    pub ce_eps: f64,
    pub aux_weight: f64,
    pub unsup_weight: f64,
    /// Treat the aggregated prediction as a constant target.
    pub detach_aggregate: bool,
    /// Supervise the auxiliary prompts with the full source labels instead of
    /// the parts that survive the cut.
    pub literal_aux_target: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            dice_smooth: DICE_SMOOTH,
            ce_eps: CE_EPS,
            aux_weight: 1.0,
            unsup_weight: 1.0,
            detach_aggregate: true,
            literal_aux_target: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.dice_smooth > 0.0, "dice_smooth must be positive");
        ensure!(self.ce_eps > 0.0 && self.ce_eps < 0.5, "ce_eps must lie in (0, 0.5)");
        ensure!(
            self.aux_weight >= 0.0 && self.unsup_weight >= 0.0,
            "loss weights must be non-negative"
        );
        Ok(())
    }
}

/// Weighted loss terms of one step. `l_aux` and `l_unsup` already include
/// their weights, so the sums below hold exactly as stored.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_lab: f64,
    pub l_aux: f64,
    pub l_sup: f64,
    pub l_unsup: f64,
    pub l_total: f64,
    /// Mean supervised term per task, position `k - 1` for task index `k`
    /// (the synthetic task last);
    /// `None` when the batch held no sample of that task.
    pub per_task: Vec<Option<f64>>,
}

impl LossReport {
    fn assemble(l_lab: f64, l_aux: f64, l_unsup: f64, per_task: Vec<Option<f64>>) -> Self {
        let l_sup = l_lab + l_aux;
        Self {
            l_lab,
            l_aux,
            l_sup,
            l_unsup,
            l_total: l_sup + l_unsup,
            per_task,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_lab, self.l_aux, self.l_sup, self.l_unsup, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// A labeled training example; `task` may be the synthetic index.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub image: Volume,
    pub label: BinaryMask,
    pub task: usize,
}

impl LabeledSample {
    /// Views a labeled cutmix sample as an example of the synthetic task.
    pub fn from_mixed(m: &MixedSample, registry: &TaskRegistry) -> Result<Self> {
        let label = m
            .label
            .clone()
            .ok_or_else(|| Error::Validation("mixed sample has no label".into()))?;
        Ok(Self {
            image: m.image.clone(),
            label,
            task: registry.synthetic_index(),
        })
    }
}

/// Everything one optimisation step consumes.
#[derive(Clone, Debug, Default)]
pub struct StepBatch {
    pub labeled: Vec<LabeledSample>,
    pub synthetic: Vec<MixedSample>,
    pub unlabeled: Vec<MixedSample>,
}

// ---------------------------------------------------------------------------
// scalar terms

struct DiceParts {
    loss: f64,
    numer: f64,
    denom: f64,
}

fn dice_parts<T: Real>(p: &[T], q: &[T], smooth: f64) -> DiceParts {
    let (mut inter, mut sp, mut sq) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in p.iter().zip(q) {
        let (a, b) = (a.f64(), b.f64());
        inter += a * b;
        sp += a;
        sq += b;
    }
    let numer = 2.0 * inter + smooth;
    let denom = sp + sq + smooth;
    DiceParts {
        loss: 1.0 - numer / denom,
        numer,
        denom,
    }
}

impl DiceParts {
    /// Derivative with respect to the first argument at a voxel whose
    /// partner value is `other`.
    #[inline]
    fn grad(&self, other: f64) -> f64 {
        -(2.0 * other * self.denom - self.numer) / (self.denom * self.denom)
    }
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    ensure!(a == b, "{what}: length {a} does not match {b}");
    Ok(())
}

pub fn soft_dice_loss(p_fg: &[f32], y: &BinaryMask, smooth: f64) -> Result<f64> {
    check_len(p_fg.len(), y.shape().len(), "soft dice")?;
    let y: Vec<f32> = y.voxels().iter().map(|&v| f32::from(v)).collect();
    Ok(dice_parts(p_fg, &y, smooth).loss)
}

fn ce_value<T: Real>(fg: &[T], bg: &[T], y: &[u8], eps: f64) -> f64 {
    let s: f64 = fg
        .iter()
        .zip(bg)
        .zip(y)
        .map(|((&f, &b), &t)| {
            let p = if t == 1 { f } else { b };
            -p.f64().max(eps).ln()
        })
        .sum();
    s / y.len() as f64
}

pub fn cross_entropy_loss(p: &ProbMap, y: &BinaryMask, eps: f64) -> Result<f64> {
    ensure!(p.shape() == y.shape(), "cross entropy: shape {} vs {}", p.shape(), y.shape());
    Ok(ce_value(p.foreground(), p.background(), y.voxels(), eps))
}

/// Voxel-wise maximum of the foreground channels.
pub fn aggregate_predictions(maps: &[ProbMap]) -> Result<Vec<f32>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Validation("aggregation needs at least one map".into()))?;
    for m in maps {
        ensure!(m.shape() == first.shape(), "aggregation over mismatched shapes");
    }
    let mut out = first.foreground().to_vec();
    for m in &maps[1..] {
        for (o, &v) in out.iter_mut().zip(m.foreground()) {
            *o = o.max(v);
        }
    }
    Ok(out)
}

/// Soft Dice between the synthetic-prompt prediction and the aggregate.
pub fn unsupervised_loss(p_agg: &[f32], p_syn: &[f32], smooth: f64) -> Result<f64> {
    check_len(p_agg.len(), p_syn.len(), "unsupervised loss")?;
    Ok(dice_parts(p_syn, p_agg, smooth).loss)
}

// ---------------------------------------------------------------------------
// model-driven terms

fn check_sample(registry: &TaskRegistry, image: &Volume, label: &BinaryMask, task: usize) -> Result<()> {
    ensure!(
        (1..=registry.prompt_dim()).contains(&task),
        "task index {task} out of range 1..={}",
        registry.prompt_dim()
    );
    ensure!(
        image.shape() == label.shape(),
        "image {} and label {} differ in shape",
        image.shape(),
        label.shape()
    );
    Ok(())
}

fn check_mixed(s: &MixedSample) -> Result<()> {
    ensure!(s.image.shape() == s.cut.shape(), "mixed image and cut differ in shape");
    Ok(())
}

pub fn supervised_labeled_loss(state: &ModelState, batch: &[LabeledSample], registry: &TaskRegistry) -> Result<f64> {
    let cfg = LossConfig::default();
    let b = StepBatch {
        labeled: batch.to_vec(),
        ..StepBatch::default()
    };
    Ok(run(&state.network, &b, registry, &cfg, None, false)?.report.l_lab)
}

/// Unweighted prompt-controllability term of one labeled cutmix sample.
pub fn auxiliary_loss(state: &ModelState, mixed: &MixedSample, registry: &TaskRegistry, cfg: &LossConfig) -> Result<f64> {
    let net = &state.network;
    let (targets, tasks) = aux_targets(mixed, cfg)?;
    check_mixed(mixed)?;
    net.config().check_input(mixed.image.shape())?;
    let trunk = net.trunk_forward(&volume_feature_as::<f32>(&mixed.image));
    let mut total = 0.0;
    for (k, y) in [tasks.0, tasks.1].into_iter().zip(&targets) {
        let h = head(net, &trunk, registry, k)?;
        total += supervised_value(&h, y, cfg);
    }
    Ok(total / 2.0)
}

/// Unweighted loss report for a step batch.
pub fn total_loss(
    state: &ModelState,
    labeled: &[LabeledSample],
    synthetic: &[MixedSample],
    unlabeled: &[MixedSample],
    registry: &TaskRegistry,
    cfg: &LossConfig,
) -> Result<LossReport> {
    let b = StepBatch {
        labeled: labeled.to_vec(),
        synthetic: synthetic.to_vec(),
        unlabeled: unlabeled.to_vec(),
    };
    Ok(run(&state.network, &b, registry, cfg, None, false)?.report)
}

/// Loss report, parameter gradient and the aggregated targets of every
/// unlabeled sample.
#[derive(Clone, Debug)]
pub struct Evaluation<T> {
    pub report: LossReport,
    pub grads: Vec<T>,
    pub aggregates: Vec<Vec<T>>,
}

/// Full objective with gradients. When `fixed_aggregates` is given those
/// targets replace the live aggregate (one per unlabeled sample) and are held
/// constant, which is how the detached objective is checked numerically.
pub fn objective<T: Real>(
    net: &Network<T>,
    batch: &StepBatch,
    registry: &TaskRegistry,
    cfg: &LossConfig,
    fixed_aggregates: Option<&[Vec<T>]>,
) -> Result<Evaluation<T>> {
    run(net, batch, registry, cfg, fixed_aggregates, true)
}

fn aux_targets(m: &MixedSample, cfg: &LossConfig) -> Result<([BinaryMask; 2], (usize, usize))> {
    let tasks = m
        .source_tasks
        .ok_or_else(|| Error::Validation("synthetic sample lacks source tasks".into()))?;
    let (yi, yj) = m
        .source_labels
        .as_ref()
        .ok_or_else(|| Error::Validation("synthetic sample lacks source labels".into()))?;
    let targets = if cfg.literal_aux_target {
        [yi.clone(), yj.clone()]
    } else {
        [
            restrict_label(yi, &m.cut, CutSide::Kept)?,
            restrict_label(yj, &m.cut, CutSide::Complement)?,
        ]
    };
    Ok((targets, tasks))
}

fn head<T: Real>(net: &Network<T>, trunk: &TrunkTrace<T>, registry: &TaskRegistry, task: usize) -> Result<HeadTrace<T>> {
    let prompt = registry.encode_prompt(task)?;
    Ok(net.head_forward(&trunk.decoded, &trunk.pooled, prompt.values()))
}

fn supervised_value<T: Real>(h: &HeadTrace<T>, y: &BinaryMask, cfg: &LossConfig) -> f64 {
    let yt: Vec<T> = y.voxels().iter().map(|&v| T::of(f64::from(v))).collect();
    dice_parts(&h.foreground, &yt, cfg.dice_smooth).loss + ce_value(&h.foreground, &h.background, y.voxels(), cfg.ce_eps)
}

/// Value of Dice + CE and its derivative with respect to the logit difference,
/// scaled by `weight`.
fn supervised_grad<T: Real>(h: &HeadTrace<T>, y: &BinaryMask, cfg: &LossConfig, weight: f64) -> (f64, Vec<T>) {
    let yv = y.voxels();
    let n = yv.len() as f64;
    let yt: Vec<T> = yv.iter().map(|&v| T::of(f64::from(v))).collect();
    let dice = dice_parts(&h.foreground, &yt, cfg.dice_smooth);
    let ce = ce_value(&h.foreground, &h.background, yv, cfg.ce_eps);
    let grad = h
        .foreground
        .iter()
        .zip(&h.background)
        .zip(yv)
        .map(|((&f, &b), &t)| {
            let (pf, pb) = (f.f64(), b.f64());
            let d_dice = dice.grad(f64::from(t)) * pf * pb;
            let p_target = if t == 1 { pf } else { pb };
            let d_ce = if p_target < cfg.ce_eps { 0.0 } else { (pf - f64::from(t)) / n };
            T::of(weight * (d_dice + d_ce))
        })
        .collect();
    (dice.loss + ce, grad)
}

struct Accum<T> {
    grads: Vec<T>,
}

impl<T: Real> Accum<T> {
    fn backward_heads(&mut self, net: &Network<T>, trunk: TrunkTrace<T>, heads: &[(HeadTrace<T>, Vec<T>)]) {
        let mut d_decoded = vec![T::zero(); trunk.decoded.data.len()];
        let mut d_pooled = vec![T::zero(); trunk.pooled.len()];
        for (h, d) in heads {
            net.head_backward(&trunk.decoded, h, d, &mut self.grads, &mut d_decoded, &mut d_pooled);
        }
        net.trunk_backward(&trunk, d_decoded, &d_pooled, &mut self.grads);
    }
}

fn forward_trunk<T: Real>(net: &Network<T>, image: &Volume) -> Result<TrunkTrace<T>> {
    net.config().check_input(image.shape())?;
    let x: Feature<T> = volume_feature_as(image);
    Ok(net.trunk_forward(&x))
}

/// (image, label, task, restricted aux targets with their source tasks)
type Supervised<'a> = (&'a Volume, &'a BinaryMask, usize, Option<([BinaryMask; 2], (usize, usize))>);

fn run<T: Real>(
    net: &Network<T>,
    batch: &StepBatch,
    registry: &TaskRegistry,
    cfg: &LossConfig,
    fixed_aggregates: Option<&[Vec<T>]>,
    want_grad: bool,
) -> Result<Evaluation<T>> {
    cfg.validate()?;
    ensure!(
        net.config().prompt_dim == registry.prompt_dim(),
        "model prompt_dim {} does not match registry ({} prompts)",
        net.config().prompt_dim,
        registry.prompt_dim()
    );
    let n_lab = batch.labeled.len() + batch.synthetic.len();
    ensure!(n_lab > 0, "supervised loss over an empty batch is undefined");
    if let Some(f) = fixed_aggregates {
        ensure!(
            f.len() == batch.unlabeled.len(),
            "{} fixed aggregates for {} unlabeled samples",
            f.len(),
            batch.unlabeled.len()
        );
    }
    let syn = registry.synthetic_index();
    let w_lab = 1.0 / n_lab as f64;
    let n_syn = batch.synthetic.len();
    let w_aux = if n_syn == 0 { 0.0 } else { cfg.aux_weight / (2.0 * n_syn as f64) };
    let n_un = batch.unlabeled.len();
    let w_un = if n_un == 0 { 0.0 } else { cfg.unsup_weight / n_un as f64 };

    let mut acc = Accum {
        grads: if want_grad { vec![T::zero(); net.n_params()] } else { Vec::new() },
    };
    let mut per_task_sum = vec![0.0; registry.prompt_dim()];
    let mut per_task_n = vec![0usize; registry.prompt_dim()];
    let (mut l_lab, mut l_aux, mut l_unsup) = (0.0, 0.0, 0.0);

    let mut supervised: Vec<Supervised<'_>> = Vec::new();
    for s in &batch.labeled {
        check_sample(registry, &s.image, &s.label, s.task)?;
        supervised.push((&s.image, &s.label, s.task, None));
    }
    for m in &batch.synthetic {
        check_mixed(m)?;
        let label = m
            .label
            .as_ref()
            .ok_or_else(|| Error::Validation("synthetic sample has no mixed label".into()))?;
        check_sample(registry, &m.image, label, syn)?;
        let aux = aux_targets(m, cfg)?;
        ensure!(
            [aux.1 .0, aux.1 .1].iter().all(|k| (1..syn).contains(k)),
            "synthetic sample sources must be pertinent tasks"
        );
        supervised.push((&m.image, label, syn, Some(aux)));
    }

    for (image, label, task, aux) in supervised {
        let trunk = forward_trunk(net, image)?;
        let mut heads = Vec::new();
        let h = head(net, &trunk, registry, task)?;
        let value = if want_grad {
            let (v, g) = supervised_grad(&h, label, cfg, w_lab);
            heads.push((h, g));
            v
        } else {
            supervised_value(&h, label, cfg)
        };
        l_lab += w_lab * value;
        per_task_sum[task - 1] += value;
        per_task_n[task - 1] += 1;
        if let Some((targets, (i, j))) = aux {
            for (k, y) in [i, j].into_iter().zip(&targets) {
                let h = head(net, &trunk, registry, k)?;
                let v = if want_grad {
                    let (v, g) = supervised_grad(&h, y, cfg, w_aux);
                    heads.push((h, g));
                    v
                } else {
                    supervised_value(&h, y, cfg)
                };
                l_aux += w_aux * v;
            }
        }
        if want_grad {
            acc.backward_heads(net, trunk, &heads);
        }
    }

    let mut aggregates = Vec::with_capacity(n_un);
    for (u, m) in batch.unlabeled.iter().enumerate() {
        check_mixed(m)?;
        let trunk = forward_trunk(net, &m.image)?;
        let task_heads: Vec<HeadTrace<T>> = registry
            .pertinent()
            .map(|k| head(net, &trunk, registry, k))
            .collect::<Result<_>>()?;
        let n = m.image.shape().len();
        let (agg, argmax) = match fixed_aggregates {
            Some(f) => {
                check_len(f[u].len(), n, "fixed aggregate")?;
                (f[u].clone(), Vec::new())
            }
            None => {
                let mut agg = task_heads[0].foreground.clone();
                let mut arg = vec![0usize; n];
                for (k, h) in task_heads.iter().enumerate().skip(1) {
                    for v in 0..n {
                        if h.foreground[v] > agg[v] {
                            agg[v] = h.foreground[v];
                            arg[v] = k;
                        }
                    }
                }
                (agg, arg)
            }
        };
        let hs = head(net, &trunk, registry, syn)?;
        let dice = dice_parts(&hs.foreground, &agg, cfg.dice_smooth);
        l_unsup += w_un * dice.loss;
        if want_grad {
            let d_syn: Vec<T> = hs
                .foreground
                .iter()
                .zip(&hs.background)
                .zip(&agg)
                .map(|((&f, &b), &q)| T::of(w_un * dice.grad(q.f64()) * f.f64() * b.f64()))
                .collect();
            let mut heads = Vec::new();
            if !cfg.detach_aggregate && fixed_aggregates.is_none() {
                let mut d_task: Vec<Vec<T>> = vec![vec![T::zero(); n]; task_heads.len()];
                for v in 0..n {
                    let k = argmax[v];
                    let f = task_heads[k].foreground[v].f64();
                    let b = task_heads[k].background[v].f64();
                    d_task[k][v] = T::of(w_un * dice.grad(hs.foreground[v].f64()) * f * b);
                }
                heads.extend(task_heads.into_iter().zip(d_task));
            }
            heads.push((hs, d_syn));
            acc.backward_heads(net, trunk, &heads);
        }
        aggregates.push(agg);
    }

    let per_task = per_task_sum
        .iter()
        .zip(&per_task_n)
        .map(|(&s, &n)| (n > 0).then(|| s / n as f64))
        .collect();
    Ok(Evaluation {
        report: LossReport::assemble(l_lab, l_aux, l_unsup, per_task),
        grads: acc.grads,
        aggregates,
    })
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::data::Shape3;
    use crate::mixer::{mix_labeled, mix_unlabeled, CutMask};
    use crate::model::{init_model, ModelConfig};
    use crate::rng::stream;
    use rand::Rng as _;

    fn registry() -> TaskRegistry {
        TaskRegistry::new(&["a", "b", "c"]).unwrap()
    }

    fn small_state(seed: u64) -> ModelState {
        init_model(&ModelConfig {
            base_width: 4,
            depth: 3,
            prompt_dim: 4,
            head_hidden: 4,
            seed,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn volume(shape: Shape3, seed: u64) -> Volume {
        let mut r = stream(seed, &[1]);
        Volume::new(shape, (0..shape.len()).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn ball(shape: Shape3, c: [f64; 3], r: f64) -> BinaryMask {
        BinaryMask::from_fn(shape, |z, y, x| {
            let d = [z as f64 - c[0], y as f64 - c[1], x as f64 - c[2]];
            d.iter().map(|v| v * v).sum::<f64>() <= r * r
        })
    }

    fn batch(shape: Shape3) -> StepBatch {
        let y0 = ball(shape, [2.0, 2.0, 2.0], 2.0);
        let y1 = ball(shape, [5.0, 5.0, 4.0], 2.5);
        let (x0, x1) = (volume(shape, 1), volume(shape, 2));
        let cut = CutMask::cuboid(shape, [0, 0, 0], [shape.d / 2, shape.h, shape.w]).unwrap();
        StepBatch {
            labeled: vec![
                LabeledSample { image: x0.clone(), label: y0.clone(), task: 1 },
                LabeledSample { image: x1.clone(), label: y1.clone(), task: 2 },
            ],
            synthetic: vec![mix_labeled((1, 2), &x0, &y0, &x1, &y1, &cut).unwrap()],
            unlabeled: vec![mix_unlabeled(&volume(shape, 3), &volume(shape, 4), &cut).unwrap()],
        }
    }

    fn oracle_dice(p: &[f32], y: &[u8], s: f64) -> f64 {
        let mut i = 0.0;
        let mut sp = 0.0;
        let mut sy = 0.0;
        for k in 0..p.len() {
            i += p[k] as f64 * y[k] as f64;
            sp += p[k] as f64;
            sy += y[k] as f64;
        }
        1.0 - (2.0 * i + s) / (sp + sy + s)
    }

    fn oracle_ce(fg: &[f32], y: &[u8], eps: f64) -> f64 {
        let mut t = 0.0;
        for k in 0..fg.len() {
            let p = if y[k] == 1 { fg[k] as f64 } else { 1.0 - fg[k] as f64 };
            t -= p.max(eps).ln();
        }
        t / fg.len() as f64
    }

    #[test]
    fn dice_examples() {
        let s = Shape3::cube(2);
        let y = BinaryMask::from_fn(s, |z, _, _| z == 0);
        let p: Vec<f32> = y.voxels().iter().map(|&v| v as f32).collect();
        assert!(soft_dice_loss(&p, &y, DICE_SMOOTH).unwrap() <= 1e-4);
        let inv: Vec<f32> = p.iter().map(|v| 1.0 - v).collect();
        assert!(soft_dice_loss(&inv, &y, DICE_SMOOTH).unwrap() >= 1.0 - 1e-3);
        let half = vec![0.5f32; 8];
        let want = 1.0 - (4.0 + DICE_SMOOTH) / (8.0 + DICE_SMOOTH);
        assert!((soft_dice_loss(&half, &y, DICE_SMOOTH).unwrap() - want).abs() < 1e-12);
        assert!(soft_dice_loss(&half[1..], &y, DICE_SMOOTH).is_err());
    }

    #[test]
    fn scalar_terms_match_loop_oracles() {
        let mut r = stream(5, &[]);
        for n in 2..=6 {
            let s = Shape3::cube(n);
            let fg: Vec<f32> = (0..s.len()).map(|_| r.random::<f32>()).collect();
            let y = BinaryMask::from_fn(s, |_, _, _| r.random_bool(0.4));
            let pm = ProbMap::from_foreground(s, fg.clone()).unwrap();
            let d = soft_dice_loss(&fg, &y, DICE_SMOOTH).unwrap();
            assert!((d - oracle_dice(&fg, y.voxels(), DICE_SMOOTH)).abs() < 1e-6);
            let c = cross_entropy_loss(&pm, &y, CE_EPS).unwrap();
            assert!((c - oracle_ce(&fg, y.voxels(), CE_EPS)).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let s = Shape3::cube(3);
        let y = BinaryMask::from_fn(s, |z, y, _| z == y);
        let fg: Vec<f32> = y.voxels().iter().map(|&v| v as f32).collect();
        let perfect = ProbMap::from_foreground(s, fg).unwrap();
        assert!(cross_entropy_loss(&perfect, &y, CE_EPS).unwrap() <= -(1.0 - CE_EPS).ln() + 1e-6);
        let half = ProbMap::from_foreground(s, vec![0.5; 27]).unwrap();
        assert!((cross_entropy_loss(&half, &y, CE_EPS).unwrap() - 2f64.ln()).abs() < 1e-6);
        let wrong = ProbMap::from_foreground(Shape3::cube(2), vec![0.5; 8]).unwrap();
        assert!(cross_entropy_loss(&wrong, &y, CE_EPS).is_err());
    }

    #[test]
    fn aggregation_is_elementwise_max() {
        let s = Shape3::cube(4);
        let mut r = stream(9, &[]);
        let maps: Vec<ProbMap> = (0..4)
            .map(|_| ProbMap::from_foreground(s, (0..64).map(|_| r.random::<f32>()).collect()).unwrap())
            .collect();
        let agg = aggregate_predictions(&maps).unwrap();
        for v in 0..64 {
            let mut m = maps[0].foreground()[v];
            for k in 1..4 {
                if maps[k].foreground()[v] > m {
                    m = maps[k].foreground()[v];
                }
            }
            assert_eq!(agg[v], m);
        }
        assert_eq!(aggregate_predictions(&maps[..1]).unwrap(), maps[0].foreground());
        let mut rev = maps.clone();
        rev.reverse();
        assert_eq!(aggregate_predictions(&rev).unwrap(), agg);
        let mut dup = maps.clone();
        dup.push(maps[2].clone());
        assert_eq!(aggregate_predictions(&dup).unwrap(), agg);
        let nested = vec![
            ProbMap::from_foreground(s, aggregate_predictions(&maps[..2]).unwrap()).unwrap(),
            ProbMap::from_foreground(s, aggregate_predictions(&maps[2..]).unwrap()).unwrap(),
        ];
        assert_eq!(aggregate_predictions(&nested).unwrap(), agg);
        assert!(aggregate_predictions(&[]).is_err());
    }

    #[test]
    fn unsupervised_examples() {
        let mut r = stream(2, &[]);
        let p: Vec<f32> = (0..64).map(|_| r.random::<f32>()).collect();
        let q: Vec<f32> = (0..64).map(|_| r.random::<f32>()).collect();
        let b: Vec<f32> = p.iter().map(|v| (*v > 0.5) as u8 as f32).collect();
        assert!(unsupervised_loss(&b, &b, DICE_SMOOTH).unwrap() <= 1e-4);
        let ones = vec![1.0f32; 64];
        let zeros = vec![0.0f32; 64];
        assert!((unsupervised_loss(&ones, &zeros, DICE_SMOOTH).unwrap() - 1.0).abs() < 1e-6);
        let mut i = 0.0;
        let mut s = 0.0;
        for k in 0..64 {
            i += (p[k] * q[k]) as f64;
            s += (p[k] + q[k]) as f64;
        }
        let want = 1.0 - (2.0 * i + DICE_SMOOTH) / (s + DICE_SMOOTH);
        assert!((unsupervised_loss(&q, &p, DICE_SMOOTH).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn labeled_loss_is_mean_of_single_sample_losses() {
        let st = small_state(1);
        let reg = registry();
        let b = batch(Shape3::cube(8));
        let both = supervised_labeled_loss(&st, &b.labeled, &reg).unwrap();
        let a = supervised_labeled_loss(&st, &b.labeled[..1], &reg).unwrap();
        let c = supervised_labeled_loss(&st, &b.labeled[1..], &reg).unwrap();
        assert!((both - (a + c) / 2.0).abs() < 1e-6);
        assert!(supervised_labeled_loss(&st, &[], &reg).is_err());
        let mut bad = b.labeled[0].clone();
        bad.task = 9;
        assert!(supervised_labeled_loss(&st, &[bad], &reg).is_err());
    }

    #[test]
    fn auxiliary_loss_matches_direct_terms() {
        let st = small_state(2);
        let reg = registry();
        let b = batch(Shape3::cube(8));
        let m = &b.synthetic[0];
        let (yi, yj) = m.source_labels.clone().unwrap();
        let ti = restrict_label(&yi, &m.cut, CutSide::Kept).unwrap();
        let tj = restrict_label(&yj, &m.cut, CutSide::Complement).unwrap();
        let direct = |k: usize, y: &BinaryMask| {
            let p = crate::model::forward(&st, std::slice::from_ref(&m.image), &reg.encode_prompt(k).unwrap()).unwrap();
            soft_dice_loss(p[0].foreground(), y, DICE_SMOOTH).unwrap() + cross_entropy_loss(&p[0], y, CE_EPS).unwrap()
        };
        let want = (direct(1, &ti) + direct(2, &tj)) / 2.0;
        let got = auxiliary_loss(&st, m, &reg, &LossConfig::default()).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} {want}");
        let literal = LossConfig { literal_aux_target: true, ..LossConfig::default() };
        let want_lit = (direct(1, &yi) + direct(2, &yj)) / 2.0;
        assert!((auxiliary_loss(&st, m, &reg, &literal).unwrap() - want_lit).abs() < 1e-6);
        let mut no_src = m.clone();
        no_src.source_labels = None;
        assert!(auxiliary_loss(&st, &no_src, &reg, &LossConfig::default()).is_err());
    }

    #[test]
    fn empty_sources_give_background_only_target() {
        let st = small_state(2);
        let reg = registry();
        let s = Shape3::cube(8);
        let cut = CutMask::cuboid(s, [0, 0, 0], [4, 8, 8]).unwrap();
        let e = BinaryMask::zeros(s);
        let m = mix_labeled((1, 3), &volume(s, 1), &e, &volume(s, 2), &e, &cut).unwrap();
        // the Dice part is 1 - s/(sum p + s), driven only by predicted mass
        let v = auxiliary_loss(&st, &m, &reg, &LossConfig::default()).unwrap();
        assert!(v.is_finite() && v >= 0.0);
    }

    #[test]
    fn report_recomposes_individual_terms() {
        let st = small_state(3);
        let reg = registry();
        let b = batch(Shape3::cube(8));
        let cfg = LossConfig::default();
        let r = total_loss(&st, &b.labeled, &b.synthetic, &b.unlabeled, &reg, &cfg).unwrap();
        assert!((r.l_sup - (r.l_lab + r.l_aux)).abs() < 1e-12);
        assert!((r.l_total - (r.l_sup + r.l_unsup)).abs() < 1e-12);

        let mut lab = b.labeled.clone();
        lab.push(LabeledSample::from_mixed(&b.synthetic[0], &reg).unwrap());
        let l_lab = supervised_labeled_loss(&st, &lab, &reg).unwrap();
        assert!((r.l_lab - l_lab).abs() < 1e-6);
        let l_aux = auxiliary_loss(&st, &b.synthetic[0], &reg, &cfg).unwrap();
        assert!((r.l_aux - l_aux).abs() < 1e-6);
        let m = &b.unlabeled[0];
        let maps: Vec<ProbMap> = reg
            .pertinent()
            .map(|k| crate::model::forward(&st, std::slice::from_ref(&m.image), &reg.encode_prompt(k).unwrap()).unwrap().remove(0))
            .collect();
        let agg = aggregate_predictions(&maps).unwrap();
        let syn = crate::model::forward(&st, std::slice::from_ref(&m.image), &reg.encode_prompt(reg.synthetic_index()).unwrap()).unwrap();
        let l_un = unsupervised_loss(&agg, syn[0].foreground(), DICE_SMOOTH).unwrap();
        assert!((r.l_unsup - l_un).abs() < 1e-6);
        assert_eq!(r.per_task.len(), 4);
        assert!(r.per_task[3].is_some());

        let no_unlab = total_loss(&st, &b.labeled, &b.synthetic, &[], &reg, &cfg).unwrap();
        assert_eq!(no_unlab.l_unsup, 0.0);
        assert_eq!(no_unlab.l_total, no_unlab.l_sup);
    }

    #[test]
    fn weights_scale_reported_terms() {
        let st = small_state(4);
        let reg = registry();
        let b = batch(Shape3::cube(8));
        let base = total_loss(&st, &b.labeled, &b.synthetic, &b.unlabeled, &reg, &LossConfig::default()).unwrap();
        let cfg = LossConfig { aux_weight: 0.5, unsup_weight: 0.25, ..LossConfig::default() };
        let w = total_loss(&st, &b.labeled, &b.synthetic, &b.unlabeled, &reg, &cfg).unwrap();
        assert!((w.l_aux - 0.5 * base.l_aux).abs() < 1e-9);
        assert!((w.l_unsup - 0.25 * base.l_unsup).abs() < 1e-9);
        assert_eq!(w.l_lab, base.l_lab);
    }

    #[test]
    fn detached_target_matches_fixed_target_gradient_exactly() {
        let st = small_state(5);
        let reg = registry();
        let b = batch(Shape3::cube(8));
        let net = &st.network;
        let cfg = LossConfig::default();
        let live = objective(net, &b, &reg, &cfg, None).unwrap();
        let fixed = objective(net, &b, &reg, &cfg, Some(&live.aggregates)).unwrap();
        assert_eq!(live.grads, fixed.grads);
        assert_eq!(live.report, fixed.report);
        let sym = objective(net, &b, &reg, &LossConfig { detach_aggregate: false, ..cfg }, None).unwrap();
        assert_ne!(sym.grads, live.grads);
        assert_eq!(sym.report, live.report);
    }

    fn fd_check(cfg: &LossConfig, frozen: bool) {
        let st = small_state(6);
        let reg = registry();
        let b = batch(Shape3::cube(8));
        let net = st.network.cast::<f64>();
        let base = objective(&net, &b, &reg, cfg, None).unwrap();
        let targets = frozen.then(|| base.aggregates.clone());
        let mut r = stream(77, &[]);
        let mut worst = 0.0f64;
        for _ in 0..12 {
            let i = r.random_range(0..net.n_params());
            let h = 1e-5;
            let eval = |delta: f64| {
                let mut n = net.clone();
                n.params_mut()[i] += delta;
                objective(&n, &b, &reg, cfg, targets.as_deref()).unwrap().report.l_total
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = base.grads[i];
            let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn total_gradient_matches_finite_differences_detached() {
        fd_check(&LossConfig::default(), true);
    }

    #[test]
    fn total_gradient_matches_finite_differences_symmetric() {
        fd_check(&LossConfig { detach_aggregate: false, ..LossConfig::default() }, false);
    }

    #[test]
    fn all_terms_non_negative_and_finite() {
        let reg = registry();
        for seed in 0..3 {
            let st = small_state(seed);
            let b = batch(Shape3::cube(8));
            let r = total_loss(&st, &b.labeled, &b.synthetic, &b.unlabeled, &reg, &LossConfig::default()).unwrap();
            for v in [r.l_lab, r.l_aux, r.l_sup, r.l_unsup, r.l_total] {
                assert!(v.is_finite() && v >= 0.0);
            }
        }
    }
}

//! Analytic phantom corpus: one foreground object per volume, drawn from a
//! per-task shape family, with exact ground truth.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::io::{load_mask, load_volume, save_mask, save_volume};
use super::volume::{BinaryMask, Shape3, Volume};
use crate::error::{ensure, Error, Result};
use crate::rng::{stream, Rng};
use crate::tasks::TaskRegistry;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const NOISE_SIGMA: f64 = 0.1;

/// Accepted foreground fraction band for generated masks.
pub const FOREGROUND_FRACTION: (f64, f64) = (0.012, 0.38);
pub const MIN_CONTRAST: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    LumpyEllipsoid,
    Sphere,
    Bean,
    MultiFocal,
}

impl ShapeFamily {
    pub fn for_task(task_index: usize) -> Self {
        match (task_index - 1) % 4 {
            0 => Self::LumpyEllipsoid,
            1 => Self::Sphere,
            2 => Self::Bean,
            _ => Self::MultiFocal,
        }
    }

    /// Mean object intensity above the local background.
    fn contrast(task_index: usize) -> f64 {
        const BASE: [f64; 4] = [0.45, 0.8, 0.6, 1.0];
        let cycle = (task_index - 1) / 4;
        BASE[(task_index - 1) % 4] + 0.07 * cycle as f64
    }

    /// Per-task background offset, standing in for scanner/dataset appearance.
    fn background(task_index: usize) -> f64 {
        const BASE: [f64; 4] = [0.0, 0.1, -0.1, 0.05];
        BASE[(task_index - 1) % 4]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub task: usize,
    pub volume: String,
    pub mask: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub tasks: TaskRegistry,
    pub seed: u64,
    pub shape: Shape3,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn ids_for_task(&self, task: usize) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.task == task)
            .map(|e| e.id.clone())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct CorpusSample {
    pub id: String,
    pub task: usize,
    pub volume: Volume,
    pub mask: Option<BinaryMask>,
}

/// A manifest together with its samples held in memory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    samples: Vec<CorpusSample>,
    index: HashMap<String, usize>,
}

impl Corpus {
    fn from_parts(manifest: CorpusManifest, samples: Vec<CorpusSample>) -> Self {
        let index = samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.clone(), i))
            .collect();
        Self {
            manifest,
            samples,
            index,
        }
    }

    pub fn samples(&self) -> &[CorpusSample] {
        &self.samples
    }

    pub fn get(&self, id: &str) -> Result<&CorpusSample> {
        self.index
            .get(id)
            .map(|&i| &self.samples[i])
            .ok_or_else(|| Error::Validation(format!("unknown sample id `{id}`")))
    }

    pub fn registry(&self) -> &TaskRegistry {
        &self.manifest.tasks
    }
}

pub fn generate_synthetic_corpus(
    n_per_task: usize,
    shape: Shape3,
    registry: &TaskRegistry,
    seed: u64,
) -> Result<Corpus> {
    ensure!(n_per_task >= 10, "n_per_task must be at least 10, got {n_per_task}");
    ensure!(
        shape.min_dim() >= 16,
        "every corpus dimension must be at least 16, got {shape}"
    );
    let mut entries = Vec::new();
    let mut samples = Vec::new();
    for task in registry.pertinent() {
        let name = registry.name(task)?;
        for n in 0..n_per_task {
            let id = format!("{name}_{n:03}");
            let mut rng = stream(seed, &[task as u64, n as u64]);
            let (volume, mask) = generate_sample(task, shape, &mut rng);
            entries.push(ManifestEntry {
                volume: format!("{name}/images/{id}.raw"),
                mask: Some(format!("{name}/labels/{id}.raw")),
                id: id.clone(),
                task,
            });
            samples.push(CorpusSample {
                id,
                task,
                volume,
                mask: Some(mask),
            });
        }
    }
    let manifest = CorpusManifest {
        tasks: registry.clone(),
        seed,
        shape,
        entries,
    };
    Ok(Corpus::from_parts(manifest, samples))
}

/// Draws one (volume, mask) pair for a task, redrawing geometry until the
/// foreground fraction and contrast constraints hold.
pub fn generate_sample(task: usize, shape: Shape3, rng: &mut Rng) -> (Volume, BinaryMask) {
    let family = ShapeFamily::for_task(task);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    for _ in 0..1000 {
        let mask = draw_mask(family, shape, rng);
        let frac = mask.fraction();
        if frac < FOREGROUND_FRACTION.0 || frac > FOREGROUND_FRACTION.1 {
            continue;
        }
        let contrast = ShapeFamily::contrast(task) * rng.random_range(0.9..1.1);
        let base = ShapeFamily::background(task) + rng.random_range(-0.05..0.05);
        let field = BiasField::draw(rng);
        let mut voxels = Vec::with_capacity(shape.len());
        for i in 0..shape.len() {
            let (z, y, x) = shape.coords(i);
            let fg = if mask.voxels()[i] == 1 { contrast } else { 0.0 };
            let b = base + field.eval(shape, z, y, x);
            voxels.push((b + fg + noise.sample(rng)) as f32);
        }
        let volume = Volume::new(shape, voxels).expect("finite intensities");
        if intensity_contrast(&volume, &mask) >= MIN_CONTRAST {
            return (volume, mask);
        }
    }
    unreachable!("phantom generator failed to satisfy constraints for {shape}")
}

/// Mean intensity inside the mask minus mean outside.
pub fn intensity_contrast(volume: &Volume, mask: &BinaryMask) -> f64 {
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &m) in volume.voxels().iter().zip(mask.voxels()) {
        if m == 1 {
            si += f64::from(v);
            ni += 1;
        } else {
            so += f64::from(v);
            no += 1;
        }
    }
    si / ni.max(1) as f64 - so / no.max(1) as f64
}

/// Low-frequency additive shading.
struct BiasField {
    amp: f64,
    freq: [f64; 3],
    phase: f64,
}

impl BiasField {
    fn draw(rng: &mut Rng) -> Self {
        Self {
            amp: rng.random_range(0.0..0.05),
            freq: [
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
            ],
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    fn eval(&self, s: Shape3, z: usize, y: usize, x: usize) -> f64 {
        let t = self.freq[0] * z as f64 / s.d as f64
            + self.freq[1] * y as f64 / s.h as f64
            + self.freq[2] * x as f64 / s.w as f64;
        self.amp * (std::f64::consts::TAU * t + self.phase).sin()
    }
}

type Vec3 = [f64; 3];

fn random_rotation(rng: &mut Rng) -> [[f64; 3]; 3] {
    // uniform unit quaternion
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (w, x, y, z) = (
        a * (tau * u2).sin(),
        a * (tau * u2).cos(),
        b * (tau * u3).sin(),
        b * (tau * u3).cos(),
    );
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Applies the transpose of `r` (world -> local frame).
fn to_local(r: &[[f64; 3]; 3], p: Vec3) -> Vec3 {
    [
        r[0][0] * p[0] + r[1][0] * p[1] + r[2][0] * p[2],
        r[0][1] * p[0] + r[1][1] * p[1] + r[2][1] * p[2],
        r[0][2] * p[0] + r[1][2] * p[1] + r[2][2] * p[2],
    ]
}

fn random_center(shape: Shape3, radius: f64, rng: &mut Rng) -> Vec3 {
    let axis = |n: usize, rng: &mut Rng| {
        let (lo, hi) = (radius + 1.0, n as f64 - radius - 2.0);
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            (n as f64 - 1.0) / 2.0
        }
    };
    [axis(shape.d, rng), axis(shape.h, rng), axis(shape.w, rng)]
}

fn draw_mask(family: ShapeFamily, shape: Shape3, rng: &mut Rng) -> BinaryMask {
    let l = shape.min_dim() as f64;
    match family {
        ShapeFamily::Sphere => {
            let r = l * rng.random_range(0.15..0.25);
            let c = random_center(shape, r, rng);
            BinaryMask::from_fn(shape, |z, y, x| dist2(pt(z, y, x), c) <= r * r)
        }
        ShapeFamily::LumpyEllipsoid => {
            let radii = [
                l * rng.random_range(0.16..0.24),
                l * rng.random_range(0.16..0.24),
                l * rng.random_range(0.16..0.24),
            ];
            let bound = radii.iter().cloned().fold(0.0, f64::max) * 1.2;
            let c = random_center(shape, bound, rng);
            let rot = random_rotation(rng);
            let (alpha, beta) = (
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
            );
            BinaryMask::from_fn(shape, |z, y, x| {
                let q = to_local(&rot, sub(pt(z, y, x), c));
                let rho = ((q[0] / radii[0]).powi(2)
                    + (q[1] / radii[1]).powi(2)
                    + (q[2] / radii[2]).powi(2))
                .sqrt();
                let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt().max(1e-9);
                let theta = q[1].atan2(q[0]);
                let phi = (q[2] / norm).clamp(-1.0, 1.0).acos();
                rho <= 1.0 + 0.18 * (3.0 * theta + alpha).sin() * (2.0 * phi + beta).sin()
            })
        }
        ShapeFamily::Bean => {
            let radii = [
                l * rng.random_range(0.28..0.34),
                l * rng.random_range(0.10..0.13),
                l * rng.random_range(0.10..0.13),
            ];
            let kappa = rng.random_range(0.4..0.7) / radii[0];
            let bound = radii[0] * 1.05;
            let c = random_center(shape, bound, rng);
            let rot = random_rotation(rng);
            BinaryMask::from_fn(shape, |z, y, x| {
                let q = to_local(&rot, sub(pt(z, y, x), c));
                let bent = q[1] - kappa * (q[0] * q[0] - radii[0] * radii[0] / 3.0);
                (q[0] / radii[0]).powi(2) + (bent / radii[1]).powi(2) + (q[2] / radii[2]).powi(2)
                    <= 1.0
            })
        }
        ShapeFamily::MultiFocal => {
            let count = rng.random_range(3..=4);
            let mut foci: Vec<(Vec3, f64)> = Vec::new();
            let mut attempts = 0;
            while foci.len() < count && attempts < 500 {
                attempts += 1;
                let r = l * rng.random_range(0.10..0.14);
                let c = random_center(shape, r, rng);
                if foci
                    .iter()
                    .all(|(o, ro)| dist2(*o, c).sqrt() >= r + ro + 2.0)
                {
                    foci.push((c, r));
                }
            }
            BinaryMask::from_fn(shape, |z, y, x| {
                foci.iter().any(|(c, r)| dist2(pt(z, y, x), *c) <= r * r)
            })
        }
    }
}

fn sub(p: Vec3, c: Vec3) -> Vec3 {
    [p[0] - c[0], p[1] - c[1], p[2] - c[2]]
}

fn dist2(p: Vec3, c: Vec3) -> f64 {
    (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)
}

fn pt(z: usize, y: usize, x: usize) -> Vec3 {
    [z as f64, y as f64, x as f64]
}

/// Writes every sample plus `manifest.json` under `root`.
pub fn write_corpus(root: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for (entry, sample) in corpus.manifest.entries.iter().zip(&corpus.samples) {
        save_volume(&root.join(&entry.volume), &sample.volume, Some(entry.task))?;
        if let (Some(rel), Some(mask)) = (&entry.mask, &sample.mask) {
            save_mask(&root.join(rel), mask, sample.volume.spacing(), Some(entry.task))?;
        }
    }
    let path = root.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&corpus.manifest).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(root: &Path) -> Result<CorpusManifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::header(&path, e.to_string()))
}

/// Loads a corpus directory, checking every labeled pair against its volume.
pub fn load_corpus(root: &Path) -> Result<Corpus> {
    let manifest = read_manifest(root)?;
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let vpath = root.join(&entry.volume);
        let volume = load_volume(&vpath)?;
        let mask = match &entry.mask {
            Some(rel) => {
                let mpath = root.join(rel);
                let mask = load_mask(&mpath)?;
                if mask.shape() != volume.shape() {
                    return Err(Error::header(
                        mpath,
                        format!("mask shape {} != volume shape {}", mask.shape(), volume.shape()),
                    ));
                }
                Some(mask)
            }
            None => None,
        };
        samples.push(CorpusSample {
            id: entry.id.clone(),
            task: entry.task,
            volume,
            mask,
        });
    }
    Ok(Corpus::from_parts(manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry() -> TaskRegistry {
        TaskRegistry::new(&["pancreas", "atrium", "spleen", "lung"]).unwrap()
    }

    #[test]
    fn rejects_small_requests() {
        assert!(generate_synthetic_corpus(9, Shape3::cube(32), &registry(), 1).is_err());
        assert!(generate_synthetic_corpus(10, Shape3::new(32, 15, 32), &registry(), 1).is_err());
    }

    #[test]
    fn every_sample_meets_fraction_and_contrast() {
        let c = generate_synthetic_corpus(10, Shape3::cube(32), &registry(), 7).unwrap();
        assert_eq!(c.samples().len(), 40);
        for s in c.samples() {
            let m = s.mask.as_ref().unwrap();
            let f = m.fraction();
            assert!((0.01..=0.4).contains(&f), "{} fraction {f}", s.id);
            let k = intensity_contrast(&s.volume, m);
            assert!(k >= 0.3, "{} contrast {k}", s.id);
        }
    }

    #[test]
    fn disk_roundtrip_matches_memory() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_synthetic_corpus(10, Shape3::cube(16), &registry(), 3).unwrap();
        write_corpus(dir.path(), &c).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back.manifest, c.manifest);
        for (a, b) in back.samples().iter().zip(c.samples()) {
            assert_eq!(a.volume, b.volume);
            assert_eq!(a.mask, b.mask);
        }
        assert!(dir.path().join("spleen/labels/spleen_004.meta").exists());
    }
}

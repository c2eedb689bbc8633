//! Cut-mask sampling and cutmix composition.
//!
//! A mixed image keeps the first source inside the cut region and the second
//! source everywhere else: `x_i * M + x_j * (1 - M)`.

use rand::Rng as _;

use crate::data::{BinaryMask, Shape3, Volume};
use crate::error::{ensure, Error, Result};
use crate::rng::Rng;

pub const CUT_FRACTION_RANGE: (f64, f64) = (0.3, 0.7);
/// Allowed gap between the drawn and the realised cuboid fraction.
pub const CUT_ROUNDING_SLACK: f64 = 0.02;

/// Region pasted from the first source. `fraction` is the share of ones.
#[derive(Clone, Debug, PartialEq)]
pub struct CutMask {
    mask: BinaryMask,
    fraction: f64,
}

impl CutMask {
    /// Wraps an arbitrary mask. No fraction bound is enforced, so degenerate
    /// all-ones / all-zeros cuts are representable.
    pub fn from_mask(mask: BinaryMask) -> Self {
        let fraction = mask.fraction();
        Self { mask, fraction }
    }

    pub fn cuboid(shape: Shape3, origin: [usize; 3], size: [usize; 3]) -> Result<Self> {
        ensure!(
            origin[0] + size[0] <= shape.d && origin[1] + size[1] <= shape.h && origin[2] + size[2] <= shape.w,
            "cuboid {origin:?}+{size:?} exceeds {shape}"
        );
        let inside = |v: usize, o: usize, s: usize| v >= o && v < o + s;
        Ok(Self::from_mask(BinaryMask::from_fn(shape, |z, y, x| {
            inside(z, origin[0], size[0]) && inside(y, origin[1], size[1]) && inside(x, origin[2], size[2])
        })))
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }

    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    pub fn shape(&self) -> Shape3 {
        self.mask.shape()
    }
}

/// Pluggable cut-region generator.
pub trait CutSampler {
    fn sample(&self, shape: Shape3, rng: &mut Rng) -> Result<CutMask>;
}

/// Single axis-aligned cuboid whose volume fraction is drawn uniformly from
/// [`CUT_FRACTION_RANGE`], placed uniformly among valid positions.
#[derive(Clone, Copy, Debug, Default)]
pub struct CuboidCut;

impl CutSampler for CuboidCut {
    fn sample(&self, shape: Shape3, rng: &mut Rng) -> Result<CutMask> {
        sample_cut_mask(shape, rng)
    }
}

pub fn sample_cut_mask(shape: Shape3, rng: &mut Rng) -> Result<CutMask> {
    ensure!(shape.min_dim() >= 4, "cut mask needs every dimension >= 4, got {shape}");
    let target = rng.random_range(CUT_FRACTION_RANGE.0..=CUT_FRACTION_RANGE.1);
    let size = cuboid_sides(shape, target, rng)?;
    let origin = [
        rng.random_range(0..=shape.d - size[0]),
        rng.random_range(0..=shape.h - size[1]),
        rng.random_range(0..=shape.w - size[2]),
    ];
    CutMask::cuboid(shape, origin, size)
}

fn cuboid_sides(shape: Shape3, target: f64, rng: &mut Rng) -> Result<[usize; 3]> {
    let dims = shape.dims();
    let total = shape.len() as f64;
    let frac_of = |s: [usize; 3]| (s[0] * s[1] * s[2]) as f64 / total;

    for _ in 0..64 {
        // split the log-fraction across axes with random weights
        let w: [f64; 3] = [
            rng.random_range(0.2..1.0),
            rng.random_range(0.2..1.0),
            rng.random_range(0.2..1.0),
        ];
        let sum: f64 = w.iter().sum();
        let mut sides = [0usize; 3];
        for a in 0..3 {
            let f = target.powf(w[a] / sum);
            sides[a] = ((f * dims[a] as f64).round() as usize).clamp(1, dims[a]);
        }
        // fit the last axis (in random order) to the residual
        let last = rng.random_range(0..3);
        let (p, q) = ((last + 1) % 3, (last + 2) % 3);
        let want = target * total / (sides[p] * sides[q]) as f64;
        sides[last] = (want.round() as usize).clamp(1, dims[last]);
        if (frac_of(sides) - target).abs() <= CUT_ROUNDING_SLACK {
            return Ok(sides);
        }
    }

    // exhaustive: closest realizable fraction that stays inside the slack band
    let (lo, hi) = (
        CUT_FRACTION_RANGE.0 - CUT_ROUNDING_SLACK,
        CUT_FRACTION_RANGE.1 + CUT_ROUNDING_SLACK,
    );
    let mut best: Option<([usize; 3], f64)> = None;
    for a in 1..=dims[0] {
        for b in 1..=dims[1] {
            for c in 1..=dims[2] {
                let f = frac_of([a, b, c]);
                if f < lo || f > hi {
                    continue;
                }
                let err = (f - target).abs();
                if best.is_none_or(|(_, e)| err < e) {
                    best = Some(([a, b, c], err));
                }
            }
        }
    }
    best.map(|(s, _)| s).ok_or_else(|| {
        Error::Validation(format!("shape {shape} cannot realise a cut fraction near {target:.3}"))
    })
}

/// Cutmix composition of two sources.
#[derive(Clone, Debug)]
pub struct MixedSample {
    pub image: Volume,
    /// Mixed label; present on the labeled path only.
    pub label: Option<BinaryMask>,
    /// Source task indices `(i, j)` when known.
    pub source_tasks: Option<(usize, usize)>,
    /// Source labels `(y_i, y_j)`, required by the prompt-controllability loss.
    pub source_labels: Option<(BinaryMask, BinaryMask)>,
    pub cut: CutMask,
}

fn blend(a: &[f32], b: &[f32], m: &[u8]) -> Vec<f32> {
    a.iter()
        .zip(b)
        .zip(m)
        .map(|((&a, &b), &m)| if m == 1 { a } else { b })
        .collect()
}

fn check_shapes(cut: &CutMask, shapes: &[Shape3]) -> Result<()> {
    for s in shapes {
        ensure!(*s == cut.shape(), "shape {s} does not match cut mask {}", cut.shape());
    }
    Ok(())
}

fn mix_image(x_i: &Volume, x_j: &Volume, cut: &CutMask) -> Volume {
    Volume::with_spacing(
        x_i.shape(),
        x_i.spacing(),
        blend(x_i.voxels(), x_j.voxels(), cut.mask.voxels()),
    )
    .expect("blend of finite volumes")
}

pub fn mix_labeled(
    tasks: (usize, usize),
    x_i: &Volume,
    y_i: &BinaryMask,
    x_j: &Volume,
    y_j: &BinaryMask,
    cut: &CutMask,
) -> Result<MixedSample> {
    ensure!(tasks.0 != tasks.1, "labeled mixing needs two distinct tasks, got {tasks:?}");
    check_shapes(cut, &[x_i.shape(), y_i.shape(), x_j.shape(), y_j.shape()])?;
    let label = restrict_label(y_i, cut, CutSide::Kept)?
        .voxels()
        .iter()
        .zip(restrict_label(y_j, cut, CutSide::Complement)?.voxels())
        .map(|(a, b)| a + b)
        .collect();
    Ok(MixedSample {
        image: mix_image(x_i, x_j, cut),
        label: Some(BinaryMask::new(cut.shape(), label)?),
        source_tasks: Some(tasks),
        source_labels: Some((y_i.clone(), y_j.clone())),
        cut: cut.clone(),
    })
}

pub fn mix_unlabeled(x_i: &Volume, x_j: &Volume, cut: &CutMask) -> Result<MixedSample> {
    check_shapes(cut, &[x_i.shape(), x_j.shape()])?;
    Ok(MixedSample {
        image: mix_image(x_i, x_j, cut),
        label: None,
        source_tasks: None,
        source_labels: None,
        cut: cut.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CutSide {
    Kept,
    Complement,
}

/// `y * M` for [`CutSide::Kept`], `y * (1 - M)` for [`CutSide::Complement`].
pub fn restrict_label(y: &BinaryMask, cut: &CutMask, side: CutSide) -> Result<BinaryMask> {
    check_shapes(cut, &[y.shape()])?;
    match side {
        CutSide::Kept => y.and(&cut.mask),
        CutSide::Complement => y.and(&cut.mask.complement()),
    }
}

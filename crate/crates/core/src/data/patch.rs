use rand::Rng as _;

use super::volume::{BinaryMask, Shape3, Volume};
use crate::error::{ensure, Result};
use crate::rng::Rng;

/// Crop attempts made when chasing a foreground-containing patch.
pub const FOREGROUND_ATTEMPTS: usize = 10;

fn crop_volume(v: &Volume, origin: [usize; 3], patch: Shape3) -> Volume {
    let s = v.shape();
    let mut out = Vec::with_capacity(patch.len());
    for z in 0..patch.d {
        for y in 0..patch.h {
            let start = s.index(origin[0] + z, origin[1] + y, origin[2]);
            out.extend_from_slice(&v.voxels()[start..start + patch.w]);
        }
    }
    Volume::with_spacing(patch, v.spacing(), out).expect("crop of valid volume")
}

fn crop_mask(m: &BinaryMask, origin: [usize; 3], patch: Shape3) -> BinaryMask {
    let s = m.shape();
    let mut out = Vec::with_capacity(patch.len());
    for z in 0..patch.d {
        for y in 0..patch.h {
            let start = s.index(origin[0] + z, origin[1] + y, origin[2]);
            out.extend_from_slice(&m.voxels()[start..start + patch.w]);
        }
    }
    BinaryMask::new(patch, out).expect("crop of valid mask")
}

/// Axis-aligned random crop. With a mask present, half of the draws retry
/// (up to [`FOREGROUND_ATTEMPTS`] times) until the crop holds foreground.
pub fn sample_patch(
    volume: &Volume,
    mask: Option<&BinaryMask>,
    patch: Shape3,
    rng: &mut Rng,
) -> Result<(Volume, Option<BinaryMask>)> {
    let s = volume.shape();
    ensure!(
        patch.d <= s.d && patch.h <= s.h && patch.w <= s.w && !patch.is_empty(),
        "patch {patch} does not fit in volume {s}"
    );
    if let Some(m) = mask {
        ensure!(m.shape() == s, "mask shape {} != volume shape {s}", m.shape());
    }
    let draw = |rng: &mut Rng| {
        [
            rng.random_range(0..=s.d - patch.d),
            rng.random_range(0..=s.h - patch.h),
            rng.random_range(0..=s.w - patch.w),
        ]
    };
    let mut origin = draw(rng);
    if let Some(m) = mask {
        if rng.random_bool(0.5) {
            let mut attempt = 1;
            while attempt < FOREGROUND_ATTEMPTS && crop_mask(m, origin, patch).is_empty() {
                origin = draw(rng);
                attempt += 1;
            }
        }
    }
    Ok((
        crop_volume(volume, origin, patch),
        mask.map(|m| crop_mask(m, origin, patch)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn full_size_patch_is_identity() {
        let s = Shape3::new(4, 5, 6);
        let v = Volume::new(s, (0..s.len()).map(|i| i as f32).collect()).unwrap();
        let m = BinaryMask::from_fn(s, |z, _, x| z == x);
        let (pv, pm) = sample_patch(&v, Some(&m), s, &mut stream(0, &[])).unwrap();
        assert_eq!(pv, v);
        assert_eq!(pm.unwrap(), m);
    }

    #[test]
    fn unlabeled_patch_has_no_mask_and_oversize_fails() {
        let v = Volume::zeros(Shape3::cube(8));
        let mut rng = stream(1, &[]);
        let (p, m) = sample_patch(&v, None, Shape3::cube(4), &mut rng).unwrap();
        assert_eq!(p.shape(), Shape3::cube(4));
        assert!(m.is_none());
        assert!(sample_patch(&v, None, Shape3::new(9, 4, 4), &mut rng).is_err());
    }

    #[test]
    fn crop_matches_source_voxels() {
        let s = Shape3::new(6, 7, 8);
        let v = Volume::new(s, (0..s.len()).map(|i| i as f32).collect()).unwrap();
        let mut rng = stream(3, &[]);
        let (p, _) = sample_patch(&v, None, Shape3::new(2, 3, 4), &mut rng).unwrap();
        let o = s.coords(p.voxels()[0] as usize);
        for z in 0..2 {
            for y in 0..3 {
                for x in 0..4 {
                    assert_eq!(p.get(z, y, x), v.get(o.0 + z, o.1 + y, o.2 + x));
                }
            }
        }
    }
}

//! Exact squared Euclidean distance transform with per-axis spacing
//! (lower-envelope-of-parabolas method, one pass per axis).

use crate::data::{Shape3, Spacing};

/// One-dimensional transform of `f` in place: `f[q] = min_p w*(q-p)^2 + f[p]`.
fn edt_1d(f: &mut [f64], w: f64, v: &mut [usize], z: &mut [f64], out: &mut [f64]) {
    let n = f.len();
    let mut k: usize = 0;
    let mut seeded = false;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        if !seeded {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            seeded = true;
            continue;
        }
        let meet = |p: usize| {
            ((f[q] + w * (q * q) as f64) - (f[p] + w * (p * p) as f64)) / (2.0 * w * (q as f64 - p as f64))
        };
        let mut s = meet(v[k]);
        while s <= z[k] {
            k -= 1;
            s = meet(v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    if !seeded {
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = w * d * d + f[p];
    }
    f.copy_from_slice(&out[..n]);
}

/// Squared distance from every voxel to the nearest voxel with `seed == true`;
/// infinite everywhere when there is no seed.
pub fn squared_edt(shape: Shape3, seeds: &[bool], spacing: Spacing) -> Vec<f64> {
    assert_eq!(seeds.len(), shape.len());
    let mut g: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let dims = shape.dims();
    let strides = [shape.h * shape.w, shape.w, 1];
    let longest = *dims.iter().max().unwrap_or(&1);
    let mut line = vec![0.0; longest];
    let mut v = vec![0usize; longest];
    let mut z = vec![0.0; longest + 1];
    let mut out = vec![0.0; longest];
    for axis in (0..3).rev() {
        let n = dims[axis];
        let w = spacing[axis] * spacing[axis];
        let stride = strides[axis];
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for a in 0..dims[o1] {
            for b in 0..dims[o2] {
                let base = a * strides[o1] + b * strides[o2];
                let f = &mut line[..n];
                for (i, slot) in f.iter_mut().enumerate() {
                    *slot = g[base + i * stride];
                }
                edt_1d(f, w, &mut v, &mut z, &mut out);
                for (i, &val) in f.iter().enumerate() {
                    g[base + i * stride] = val;
                }
            }
        }
    }
    g
}

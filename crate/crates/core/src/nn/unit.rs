//! `op -> instance norm -> leaky ReLU` building block.

use super::{dot, leaky, leaky_grad, matmul, matmul_ld, Feature, Padding, Real, Trans, NORM_EPS};
use crate::data::Shape3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    /// 3x3x3, stride 1, same padding.
    Conv3,
    /// 2x2x2, stride 2.
    Down,
    /// Transposed 2x2x2, stride 2.
    Up,
}

/// A convolution followed by affine instance normalisation and a leaky ReLU.
/// Offsets index into the network's flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Unit {
    pub op: Op,
    pub cin: usize,
    pub cout: usize,
    pub weight: usize,
    pub gamma: usize,
    pub beta: usize,
}

pub struct UnitCache<T> {
    /// Raw input (Conv3/Up) or the im2col matrix (Down).
    col: Vec<T>,
    in_shape: Shape3,
    out_shape: Shape3,
    pad: Padding,
    xhat: Vec<T>,
    inv_std: Vec<f64>,
    positive: Vec<bool>,
}

impl Unit {
    /// Lays the unit out at `offset`; returns the unit and the next free offset.
    pub fn place(op: Op, cin: usize, cout: usize, offset: usize) -> (Self, usize) {
        let taps = match op {
            Op::Conv3 => 27,
            Op::Down | Op::Up => 8,
        };
        let weight = offset;
        let gamma = weight + cin * cout * taps;
        let beta = gamma + cout;
        (
            Self {
                op,
                cin,
                cout,
                weight,
                gamma,
                beta,
            },
            beta + cout,
        )
    }

    pub fn weight_len(&self) -> usize {
        self.gamma - self.weight
    }

    pub fn fan_in(&self) -> usize {
        match self.op {
            Op::Conv3 => self.cin * 27,
            Op::Down => self.cin * 8,
            Op::Up => self.cin,
        }
    }

    pub fn out_shape(&self, s: Shape3) -> Shape3 {
        match self.op {
            Op::Conv3 => s,
            Op::Down => s.halved(),
            Op::Up => s.doubled(),
        }
    }

    pub fn forward<T: Real>(
        &self,
        params: &[T],
        x: &Feature<T>,
        pad: Padding,
    ) -> (Feature<T>, UnitCache<T>) {
        assert_eq!(x.channels, self.cin);
        let w = &params[self.weight..self.gamma];
        let in_shape = x.shape;
        let out_shape = self.out_shape(in_shape);
        let (n_in, n_out) = (in_shape.len(), out_shape.len());
        let mut y = vec![T::zero(); self.cout * n_out];
        let col = match self.op {
            Op::Conv3 => {
                conv3(w, &x.data, self.cin, self.cout, in_shape, pad, &mut y);
                x.data.clone()
            }
            Op::Down => {
                let mut col = vec![T::zero(); self.cin * 8 * n_out];
                im2col_down(&x.data, self.cin, in_shape, &mut col);
                matmul(self.cout, self.cin * 8, n_out, w, Trans::No, &col, Trans::No, &mut y, T::zero());
                col
            }
            Op::Up => {
                let mut tmp = vec![T::zero(); self.cout * 8 * n_in];
                matmul(self.cout * 8, self.cin, n_in, w, Trans::No, &x.data, Trans::No, &mut tmp, T::zero());
                scatter_up(&tmp, self.cout, in_shape, &mut y);
                x.data.clone()
            }
        };

        // instance norm + leaky relu, in place
        let mut xhat = vec![T::zero(); y.len()];
        let mut inv_std = Vec::with_capacity(self.cout);
        let mut positive = vec![false; y.len()];
        for c in 0..self.cout {
            let range = c * n_out..(c + 1) * n_out;
            let chan = &mut y[range.clone()];
            let mean = chan.iter().map(|v| v.f64()).sum::<f64>() / n_out as f64;
            let var = chan.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n_out as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std.push(is);
            let (g, b) = (params[self.gamma + c], params[self.beta + c]);
            let (m, s) = (T::of(mean), T::of(is));
            for (i, v) in chan.iter_mut().enumerate() {
                let h = (*v - m) * s;
                xhat[range.start + i] = h;
                let o = leaky(g * h + b);
                positive[range.start + i] = o > T::zero();
                *v = o;
            }
        }
        (
            Feature::new(self.cout, out_shape, y),
            UnitCache {
                col,
                in_shape,
                out_shape,
                pad,
                xhat,
                inv_std,
                positive,
            },
        )
    }

    /// Accumulates parameter gradients into `grads`; returns the input gradient
    /// when `need_input` is set.
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        cache: &UnitCache<T>,
        dout: &[T],
        grads: &mut [T],
        need_input: bool,
    ) -> Option<Feature<T>> {
        let n_out = cache.out_shape.len();
        let n_in = cache.in_shape.len();
        assert_eq!(dout.len(), self.cout * n_out);
        let slope = leaky_grad(T::zero());

        let mut dconv = vec![T::zero(); dout.len()];
        for c in 0..self.cout {
            let range = c * n_out..(c + 1) * n_out;
            let g = params[self.gamma + c];
            let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
            for i in range.clone() {
                let d = if cache.positive[i] { dout[i] } else { dout[i] * slope };
                dconv[i] = d;
                sum_dy += d.f64();
                sum_dy_xhat += (d * cache.xhat[i]).f64();
            }
            grads[self.gamma + c] += T::of(sum_dy_xhat);
            grads[self.beta + c] += T::of(sum_dy);
            // d xhat = d * g; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
            let mean_d = T::of(sum_dy / n_out as f64) * g;
            let mean_dx = T::of(sum_dy_xhat / n_out as f64) * g;
            let is = T::of(cache.inv_std[c]);
            for i in range {
                dconv[i] = is * (dconv[i] * g - mean_d - cache.xhat[i] * mean_dx);
            }
        }

        let w = &params[self.weight..self.gamma];
        let (wstart, wend) = (self.weight, self.gamma);
        match self.op {
            Op::Conv3 => {
                let k = self.cin * 27;
                let s = cache.in_shape;
                let rows = tile_rows(k, s);
                let mut col = vec![T::zero(); k * rows * s.w];
                let gw = &mut grads[wstart..wend];
                for (r0, r1) in row_tiles(s, rows) {
                    let nt = (r1 - r0) * s.w;
                    let off = r0 * s.w;
                    let col = &mut col[..k * nt];
                    im2col3(&cache.col, self.cin, s, cache.pad, r0, r1, col);
                    for (r, crow) in col.chunks_exact(nt).enumerate() {
                        for co in 0..self.cout {
                            gw[co * k + r] += dot(&dconv[co * n_in + off..][..nt], crow);
                        }
                    }
                }
                need_input.then(|| {
                    // adjoint = convolution with spatially flipped, transposed taps
                    let mut wt = vec![T::zero(); w.len()];
                    for co in 0..self.cout {
                        for ci in 0..self.cin {
                            for tap in 0..27 {
                                wt[(ci * self.cout + co) * 27 + 26 - tap] = w[(co * self.cin + ci) * 27 + tap];
                            }
                        }
                    }
                    let mut dx = vec![T::zero(); self.cin * n_in];
                    conv3(&wt, &dconv, self.cout, self.cin, s, cache.pad, &mut dx);
                    Feature::new(self.cin, s, dx)
                })
            }
            Op::Down => {
                let k = self.cin * 8;
                matmul(self.cout, n_out, k, &dconv, Trans::No, &cache.col, Trans::Yes, &mut grads[wstart..wend], T::one());
                need_input.then(|| {
                    let mut dcol = vec![T::zero(); k * n_out];
                    matmul(k, self.cout, n_out, w, Trans::Yes, &dconv, Trans::No, &mut dcol, T::zero());
                    let mut dx = vec![T::zero(); self.cin * n_in];
                    col2im_down(&dcol, self.cin, cache.in_shape, &mut dx);
                    Feature::new(self.cin, cache.in_shape, dx)
                })
            }
            Op::Up => {
                let mut dtmp = vec![T::zero(); self.cout * 8 * n_in];
                gather_up(&dconv, self.cout, cache.in_shape, &mut dtmp);
                matmul(self.cout * 8, n_in, self.cin, &dtmp, Trans::No, &cache.col, Trans::Yes, &mut grads[wstart..wend], T::one());
                need_input.then(|| {
                    let mut dx = vec![T::zero(); self.cin * n_in];
                    matmul(self.cin, self.cout * 8, n_in, w, Trans::Yes, &dtmp, Trans::No, &mut dx, T::zero());
                    Feature::new(self.cin, cache.in_shape, dx)
                })
            }
        }
    }
}

#[inline]
fn wrap(v: isize, n: usize, pad: Padding) -> Option<usize> {
    if v >= 0 && (v as usize) < n {
        Some(v as usize)
    } else {
        match pad {
            Padding::Zero => None,
            Padding::Periodic => Some(v.rem_euclid(n as isize) as usize),
        }
    }
}

/// Voxel budget per im2col tile; keeps the column block cache-resident.
const TILE_ELEMS: usize = 96 * 1024;

fn tile_rows(k: usize, s: Shape3) -> usize {
    (TILE_ELEMS / (k * s.w)).clamp(1, s.d * s.h)
}

/// `y = w * x` for a 3x3x3 same-size convolution, `w` laid out `[cout][cin*27]`.
fn conv3<T: Real>(w: &[T], x: &[T], cin: usize, cout: usize, s: Shape3, pad: Padding, y: &mut [T]) {
    let k = cin * 27;
    let n = s.len();
    let rows = tile_rows(k, s);
    let mut col = vec![T::zero(); k * rows * s.w];
    for (r0, r1) in row_tiles(s, rows) {
        let nt = (r1 - r0) * s.w;
        let col = &mut col[..k * nt];
        im2col3(x, cin, s, pad, r0, r1, col);
        matmul_ld(cout, k, nt, w, k, Trans::No, col, nt, Trans::No, &mut y[r0 * s.w..], n, T::zero());
    }
}

/// `[r0, r1)` ranges over the flattened `(z, y)` rows.
fn row_tiles(s: Shape3, rows: usize) -> impl Iterator<Item = (usize, usize)> {
    let total = s.d * s.h;
    (0..total).step_by(rows).map(move |r0| (r0, (r0 + rows).min(total)))
}

/// Columns for output rows `[r0, r1)`; `col` is `[c*27][(r1-r0)*w]`.
fn im2col3<T: Real>(x: &[T], c: usize, s: Shape3, pad: Padding, r0: usize, r1: usize, col: &mut [T]) {
    let n = s.len();
    let nt = (r1 - r0) * s.w;
    for ci in 0..c {
        let src = &x[ci * n..(ci + 1) * n];
        for kd in 0..3 {
            for kh in 0..3 {
                for kw in 0..3 {
                    let row = ci * 27 + kd * 9 + kh * 3 + kw;
                    let dst = &mut col[row * nt..(row + 1) * nt];
                    for r in r0..r1 {
                        let (z, y) = (r / s.h, r % s.h);
                        let drow = &mut dst[(r - r0) * s.w..][..s.w];
                        let zz = wrap(z as isize + kd as isize - 1, s.d, pad);
                        let yy = wrap(y as isize + kh as isize - 1, s.h, pad);
                        match (zz, yy) {
                            (Some(zz), Some(yy)) => {
                                let srow = &src[(zz * s.h + yy) * s.w..][..s.w];
                                shift_row(drow, srow, kw as isize - 1, pad);
                            }
                            _ => drow.fill(T::zero()),
                        }
                    }
                }
            }
        }
    }
}

/// `dst[x] = src[x + dx]` with boundary handling, `dx` in `{-1, 0, 1}`.
#[inline]
fn shift_row<T: Real>(dst: &mut [T], src: &[T], dx: isize, pad: Padding) {
    let w = dst.len();
    let edge = |v: T| if pad == Padding::Periodic { v } else { T::zero() };
    match dx {
        0 => dst.copy_from_slice(src),
        1 => {
            dst[..w - 1].copy_from_slice(&src[1..]);
            dst[w - 1] = edge(src[0]);
        }
        _ => {
            dst[1..].copy_from_slice(&src[..w - 1]);
            dst[0] = edge(src[w - 1]);
        }
    }
}

fn im2col_down<T: Real>(x: &[T], c: usize, s: Shape3, col: &mut [T]) {
    let o = s.halved();
    let (n, no) = (s.len(), o.len());
    for ci in 0..c {
        let src = &x[ci * n..(ci + 1) * n];
        for tap in 0..8 {
            let (a, b, cc) = (tap >> 2, (tap >> 1) & 1, tap & 1);
            let dst = &mut col[(ci * 8 + tap) * no..][..no];
            for z in 0..o.d {
                for y in 0..o.h {
                    let srow = &src[s.index(2 * z + a, 2 * y + b, 0)..][..s.w];
                    let drow = &mut dst[o.index(z, y, 0)..][..o.w];
                    for (x, d) in drow.iter_mut().enumerate() {
                        *d = srow[2 * x + cc];
                    }
                }
            }
        }
    }
}

fn col2im_down<T: Real>(col: &[T], c: usize, s: Shape3, dx: &mut [T]) {
    let o = s.halved();
    let (n, no) = (s.len(), o.len());
    for ci in 0..c {
        let gx = &mut dx[ci * n..(ci + 1) * n];
        for tap in 0..8 {
            let (a, b, cc) = (tap >> 2, (tap >> 1) & 1, tap & 1);
            let src = &col[(ci * 8 + tap) * no..][..no];
            for z in 0..o.d {
                for y in 0..o.h {
                    let start = s.index(2 * z + a, 2 * y + b, 0);
                    let grow = &mut gx[start..start + s.w];
                    let srow = &src[o.index(z, y, 0)..][..o.w];
                    for (x, &g) in srow.iter().enumerate() {
                        grow[2 * x + cc] += g;
                    }
                }
            }
        }
    }
}

/// `y[co, 2z+a, 2y+b, 2x+c] = tmp[co*8 + tap, z, y, x]`.
fn scatter_up<T: Real>(tmp: &[T], cout: usize, s_in: Shape3, y: &mut [T]) {
    let so = s_in.doubled();
    let (n, no) = (s_in.len(), so.len());
    for co in 0..cout {
        let dst = &mut y[co * no..(co + 1) * no];
        for tap in 0..8 {
            let (a, b, cc) = (tap >> 2, (tap >> 1) & 1, tap & 1);
            let src = &tmp[(co * 8 + tap) * n..][..n];
            for z in 0..s_in.d {
                for yy in 0..s_in.h {
                    let start = so.index(2 * z + a, 2 * yy + b, 0);
                    let drow = &mut dst[start..start + so.w];
                    let srow = &src[s_in.index(z, yy, 0)..][..s_in.w];
                    for (x, &v) in srow.iter().enumerate() {
                        drow[2 * x + cc] = v;
                    }
                }
            }
        }
    }
}

fn gather_up<T: Real>(dy: &[T], cout: usize, s_in: Shape3, dtmp: &mut [T]) {
    let so = s_in.doubled();
    let (n, no) = (s_in.len(), so.len());
    for co in 0..cout {
        let src = &dy[co * no..(co + 1) * no];
        for tap in 0..8 {
            let (a, b, cc) = (tap >> 2, (tap >> 1) & 1, tap & 1);
            let dst = &mut dtmp[(co * 8 + tap) * n..][..n];
            for z in 0..s_in.d {
                for yy in 0..s_in.h {
                    let start = so.index(2 * z + a, 2 * yy + b, 0);
                    let srow = &src[start..start + so.w];
                    let drow = &mut dst[s_in.index(z, yy, 0)..][..s_in.w];
                    for (x, d) in drow.iter_mut().enumerate() {
                        *d = srow[2 * x + cc];
                    }
                }
            }
        }
    }
}

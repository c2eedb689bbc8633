//! Encoder-decoder trunk and the prompt-conditioned dynamic head.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Shape3;
use crate::error::{ensure, Result};
use crate::nn::{axpy, dot, leaky, leaky_grad, matmul, sum, Feature, Op, Padding, Real, Trans, Unit, UnitCache};
use crate::rng::stream;

fn default_in_channels() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub base_width: usize,
    /// Number of encoder stages, including the full-resolution one.
    pub depth: usize,
    /// One-hot prompt length, `T + 1`. Filled from the task registry when zero.
    #[serde(default)]
    pub prompt_dim: usize,
    /// Hidden width of the generated head; 0 means a single generated layer.
    pub head_hidden: usize,
    pub seed: u64,
    #[serde(default)]
    pub padding: Padding,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_width: 8,
            depth: 4,
            prompt_dim: 5,
            head_hidden: 8,
            seed: 0,
            padding: Padding::Zero,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.in_channels == 1, "only single-channel input is supported");
        ensure!(self.base_width >= 4, "base_width must be >= 4, got {}", self.base_width);
        ensure!(self.depth >= 3, "depth must be >= 3, got {}", self.depth);
        ensure!(self.depth <= 8, "depth must be <= 8, got {}", self.depth);
        ensure!(self.prompt_dim >= 3, "prompt_dim must be >= 3, got {}", self.prompt_dim);
        Ok(())
    }

    pub fn width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    /// Channels of the bottleneck embedding.
    pub fn embed_dim(&self) -> usize {
        self.width(self.depth - 1)
    }

    /// Channels of the decoder output.
    pub fn decoder_dim(&self) -> usize {
        self.base_width
    }

    /// Total spatial downsampling factor of the encoder.
    pub fn stride(&self) -> usize {
        1 << (self.depth - 1)
    }

    /// Length of the generated kernel vector.
    pub fn head_param_count(&self) -> usize {
        head_param_count(self.decoder_dim(), self.head_hidden)
    }

    pub fn check_input(&self, shape: Shape3) -> Result<()> {
        let s = self.stride();
        ensure!(
            shape.dims().iter().all(|&d| d >= s && d % s == 0),
            "input {shape} must have every dimension divisible by {s}"
        );
        Ok(())
    }
}

pub fn head_param_count(decoder_dim: usize, hidden: usize) -> usize {
    if hidden == 0 {
        2 * decoder_dim + 2
    } else {
        hidden * decoder_dim + hidden + 2 * hidden + 2
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Architecture {
    enc0: Unit,
    /// Index `s - 1` holds stage `s` (1..depth).
    down: Vec<Unit>,
    block: Vec<Unit>,
    /// Index `s` maps stage `s + 1` back to stage `s` (0..depth-1).
    up: Vec<Unit>,
    dec: Vec<Unit>,
    psi_w: usize,
    psi_b: usize,
    pub(crate) n_params: usize,
}

impl Architecture {
    fn new(c: &ModelConfig) -> Self {
        let mut off = 0;
        let mut place = |op, cin, cout| {
            let (u, next) = Unit::place(op, cin, cout, off);
            off = next;
            u
        };
        let enc0 = place(Op::Conv3, c.in_channels, c.width(0));
        let mut down = Vec::new();
        let mut block = Vec::new();
        for s in 1..c.depth {
            down.push(place(Op::Down, c.width(s - 1), c.width(s)));
            block.push(place(Op::Conv3, c.width(s), c.width(s)));
        }
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for s in 0..c.depth - 1 {
            up.push(place(Op::Up, c.width(s + 1), c.width(s)));
            dec.push(place(Op::Conv3, c.width(s), c.width(s)));
        }
        let z = c.embed_dim() + c.prompt_dim;
        let p = c.head_param_count();
        let psi_w = off;
        let psi_b = psi_w + p * z;
        Self {
            enc0,
            down,
            block,
            up,
            dec,
            psi_w,
            psi_b,
            n_params: psi_b + p,
        }
    }

    fn units(&self) -> impl Iterator<Item = &Unit> {
        std::iter::once(&self.enc0)
            .chain(&self.down)
            .chain(&self.block)
            .chain(&self.up)
            .chain(&self.dec)
    }
}

/// Learnable parameters of the whole model in one flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    config: ModelConfig,
    arch: Architecture,
    params: Vec<T>,
}

/// Cached activations of one trunk pass.
pub struct TrunkTrace<T> {
    enc0: UnitCache<T>,
    down: Vec<UnitCache<T>>,
    block: Vec<UnitCache<T>>,
    up: Vec<UnitCache<T>>,
    dec: Vec<UnitCache<T>>,
    pub bottleneck: Feature<T>,
    pub decoded: Feature<T>,
    pub pooled: Vec<T>,
}

/// Activations of one prompted head evaluation.
pub struct HeadTrace<T> {
    pub kernel: Vec<T>,
    z: Vec<T>,
    hidden: Vec<T>,
    /// Foreground logit minus background logit per voxel.
    pub logit_diff: Vec<T>,
    pub foreground: Vec<T>,
    pub background: Vec<T>,
}

impl Network<f32> {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let arch = Architecture::new(config);
        let mut params = vec![0.0f32; arch.n_params];
        let mut rng = stream(config.seed, &[0x1417]);
        for u in arch.units() {
            let std = (2.0 / u.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for p in &mut params[u.weight..u.gamma] {
                *p = normal.sample(&mut rng) as f32;
            }
            params[u.gamma..u.beta].fill(1.0);
        }
        // generator weights start small; its bias holds a standard head init
        let psi = Normal::new(0.0, 0.05).expect("positive std");
        for p in &mut params[arch.psi_w..arch.psi_b] {
            *p = psi.sample(&mut rng) as f32;
        }
        let (cd, h) = (config.decoder_dim(), config.head_hidden);
        let bias = &mut params[arch.psi_b..];
        if h == 0 {
            let n = Normal::new(0.0, (1.0 / cd as f64).sqrt()).expect("std");
            for p in &mut bias[..2 * cd] {
                *p = n.sample(&mut rng) as f32;
            }
        } else {
            let n1 = Normal::new(0.0, (2.0 / cd as f64).sqrt()).expect("std");
            for p in &mut bias[..h * cd] {
                *p = n1.sample(&mut rng) as f32;
            }
            let n2 = Normal::new(0.0, (1.0 / h as f64).sqrt()).expect("std");
            let w2 = h * cd + h;
            for p in &mut bias[w2..w2 + 2 * h] {
                *p = n2.sample(&mut rng) as f32;
            }
        }
        Ok(Self {
            config: config.clone(),
            arch,
            params,
        })
    }
}

impl<T: Real> Network<T> {
    pub fn from_params(config: &ModelConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let arch = Architecture::new(config);
        ensure!(
            params.len() == arch.n_params,
            "parameter vector has {} entries, model needs {}",
            params.len(),
            arch.n_params
        );
        Ok(Self {
            config: config.clone(),
            arch,
            params,
        })
    }

    /// Converts the parameters to another precision.
    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            arch: self.arch.clone(),
            params: self.params.iter().map(|&p| U::of(p.f64())).collect(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.arch.n_params
    }

    /// Range of the kernel generator's weight matrix `[P, C_e + prompt_dim]`.
    pub fn generator_weight_range(&self) -> std::ops::Range<usize> {
        self.arch.psi_w..self.arch.psi_b
    }

    pub fn generator_bias_range(&self) -> std::ops::Range<usize> {
        self.arch.psi_b..self.arch.n_params
    }

    pub fn trunk_forward(&self, x: &Feature<T>) -> TrunkTrace<T> {
        let pad = self.config.padding;
        let a = &self.arch;
        let p = &self.params;
        let (a0, enc0) = a.enc0.forward(p, x, pad);
        let mut skips = vec![a0];
        let mut down_c = Vec::new();
        let mut block_c = Vec::new();
        for (du, bu) in a.down.iter().zip(&a.block) {
            let (d, dc) = du.forward(p, skips.last().expect("stage"), pad);
            let (mut r, bc) = bu.forward(p, &d, pad);
            r.add_assign(&d);
            skips.push(r);
            down_c.push(dc);
            block_c.push(bc);
        }
        let bottleneck = skips.pop().expect("bottleneck");
        let pooled = bottleneck.global_average();
        let mut up_c: Vec<Option<UnitCache<T>>> = (0..a.up.len()).map(|_| None).collect();
        let mut dec_c: Vec<Option<UnitCache<T>>> = (0..a.dec.len()).map(|_| None).collect();
        let mut u = bottleneck.clone();
        for s in (0..a.up.len()).rev() {
            let (mut m, uc) = a.up[s].forward(p, &u, pad);
            m.add_assign(&skips[s]);
            let (next, dc) = a.dec[s].forward(p, &m, pad);
            up_c[s] = Some(uc);
            dec_c[s] = Some(dc);
            u = next;
        }
        TrunkTrace {
            enc0,
            down: down_c,
            block: block_c,
            up: up_c.into_iter().map(|c| c.expect("filled")).collect(),
            dec: dec_c.into_iter().map(|c| c.expect("filled")).collect(),
            bottleneck,
            decoded: u,
            pooled,
        }
    }

    /// Backpropagates gradients of the decoder output and pooled embedding
    /// through the trunk into `grads`.
    pub fn trunk_backward(&self, trace: &TrunkTrace<T>, d_decoded: Vec<T>, d_pooled: &[T], grads: &mut [T]) {
        let a = &self.arch;
        let p = &self.params;
        let depth = self.config.depth;
        // decoder
        let mut d_skip: Vec<Option<Vec<T>>> = (0..depth).map(|_| None).collect();
        let mut du = d_decoded;
        for (s, (dec, up)) in a.dec.iter().zip(&a.up).enumerate() {
            let dm = dec
                .backward(p, &trace.dec[s], &du, grads, true)
                .expect("input grad")
                .data;
            du = up
                .backward(p, &trace.up[s], &dm, grads, true)
                .expect("input grad")
                .data;
            d_skip[s] = Some(dm);
        }
        // bottleneck also feeds the pooled embedding
        let n_e = trace.bottleneck.shape.len();
        let mut da = du;
        for (c, &g) in d_pooled.iter().enumerate() {
            let g = g / T::of(n_e as f64);
            for v in &mut da[c * n_e..(c + 1) * n_e] {
                *v += g;
            }
        }
        // encoder, residual stages
        for s in (1..depth).rev() {
            let db = a.block[s - 1]
                .backward(p, &trace.block[s - 1], &da, grads, true)
                .expect("input grad")
                .data;
            let dd: Vec<T> = da.iter().zip(&db).map(|(&x, &y)| x + y).collect();
            let mut prev = a.down[s - 1]
                .backward(p, &trace.down[s - 1], &dd, grads, true)
                .expect("input grad")
                .data;
            if let Some(ds) = d_skip[s - 1].take() {
                for (v, g) in prev.iter_mut().zip(ds) {
                    *v += g;
                }
            }
            da = prev;
        }
        a.enc0.backward(p, &trace.enc0, &da, grads, false);
    }

    /// Kernel generator: one linear map over `concat(pooled, prompt)`.
    pub fn generate_kernel(&self, pooled: &[T], prompt: &[u8]) -> (Vec<T>, Vec<T>) {
        let c = &self.config;
        assert_eq!(pooled.len(), c.embed_dim());
        assert_eq!(prompt.len(), c.prompt_dim);
        let z: Vec<T> = pooled
            .iter()
            .copied()
            .chain(prompt.iter().map(|&v| T::of(f64::from(v))))
            .collect();
        let pc = c.head_param_count();
        let mut kernel = self.params[self.arch.psi_b..self.arch.n_params].to_vec();
        matmul(pc, z.len(), 1, &self.params[self.arch.psi_w..self.arch.psi_b], Trans::No, &z, Trans::No, &mut kernel, T::one());
        (kernel, z)
    }

    pub fn head_forward(&self, decoded: &Feature<T>, pooled: &[T], prompt: &[u8]) -> HeadTrace<T> {
        let (kernel, z) = self.generate_kernel(pooled, prompt);
        let cd = self.config.decoder_dim();
        let h = self.config.head_hidden;
        let n = decoded.shape.len();
        let x = &decoded.data;
        let mut hidden = Vec::new();
        let (last, feats): (&[T], &[T]) = if h == 0 {
            (&kernel[..], x)
        } else {
            let (w1, rest) = kernel.split_at(h * cd);
            let (b1, rest) = rest.split_at(h);
            hidden = vec![T::zero(); h * n];
            for (j, row) in hidden.chunks_exact_mut(n).enumerate() {
                row.fill(b1[j]);
                for c in 0..cd {
                    axpy(w1[j * cd + c], &x[c * n..(c + 1) * n], row);
                }
                for v in row.iter_mut() {
                    *v = leaky(*v);
                }
            }
            (rest, &hidden[..])
        };
        // only the logit difference matters for two-class softmax
        let f = feats.len() / n;
        let (w2, b2) = last.split_at(2 * f);
        let mut logit_diff = vec![b2[1] - b2[0]; n];
        for j in 0..f {
            axpy(w2[f + j] - w2[j], &feats[j * n..(j + 1) * n], &mut logit_diff);
        }
        let foreground: Vec<T> = logit_diff.iter().map(|&s| sigmoid(s)).collect();
        let background: Vec<T> = logit_diff.iter().map(|&s| sigmoid(-s)).collect();
        HeadTrace {
            kernel,
            z,
            hidden,
            logit_diff,
            foreground,
            background,
        }
    }

    /// Backpropagates `d logit_diff` through one head evaluation, accumulating
    /// into the generator parameters, the decoder output and the pooled embedding.
    pub fn head_backward(
        &self,
        decoded: &Feature<T>,
        trace: &HeadTrace<T>,
        d_logit_diff: &[T],
        grads: &mut [T],
        d_decoded: &mut [T],
        d_pooled: &mut [T],
    ) {
        let cd = self.config.decoder_dim();
        let h = self.config.head_hidden;
        let n = decoded.shape.len();
        let x = &decoded.data;
        let g = d_logit_diff;
        assert_eq!(g.len(), n);
        let mut dk = vec![T::zero(); trace.kernel.len()];
        let (feats, f, last_off) = if h == 0 {
            (x.as_slice(), cd, 0)
        } else {
            (trace.hidden.as_slice(), h, h * cd + h)
        };
        let w2 = &trace.kernel[last_off..last_off + 2 * f];
        {
            let (dw2, db2) = dk[last_off..].split_at_mut(2 * f);
            for j in 0..f {
                let d = dot(g, &feats[j * n..(j + 1) * n]);
                dw2[j] = -d;
                dw2[f + j] = d;
            }
            let sg = sum(g);
            db2[0] = -sg;
            db2[1] = sg;
        }
        if h == 0 {
            for c in 0..cd {
                axpy(w2[f + c] - w2[c], g, &mut d_decoded[c * n..(c + 1) * n]);
            }
        } else {
            let w1 = &trace.kernel[..h * cd];
            let mut dh = vec![T::zero(); n];
            for j in 0..h {
                let wd = w2[f + j] - w2[j];
                for ((d, &gi), &o) in dh.iter_mut().zip(g).zip(&trace.hidden[j * n..(j + 1) * n]) {
                    *d = wd * gi * leaky_grad(o);
                }
                dk[h * cd + j] = sum(&dh);
                for c in 0..cd {
                    let xc = &x[c * n..(c + 1) * n];
                    dk[j * cd + c] = dot(&dh, xc);
                    axpy(w1[j * cd + c], &dh, &mut d_decoded[c * n..(c + 1) * n]);
                }
            }
        }
        // generator: kernel = W z + b
        let pc = dk.len();
        let zl = trace.z.len();
        {
            let gw = &mut grads[self.arch.psi_w..self.arch.psi_b];
            for r in 0..pc {
                let g = dk[r];
                for (w, &zv) in gw[r * zl..(r + 1) * zl].iter_mut().zip(&trace.z) {
                    *w += g * zv;
                }
            }
        }
        for (b, &g) in grads[self.arch.psi_b..self.arch.n_params].iter_mut().zip(&dk) {
            *b += g;
        }
        let mut dz = vec![T::zero(); zl];
        matmul(zl, pc, 1, &self.params[self.arch.psi_w..self.arch.psi_b], Trans::Yes, &dk, Trans::No, &mut dz, T::zero());
        for (d, &g) in d_pooled.iter_mut().zip(&dz) {
            *d += g;
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(s: T) -> T {
    if s >= T::zero() {
        T::one() / (T::one() + (-s).exp())
    } else {
        let e = s.exp();
        e / (T::one() + e)
    }
}

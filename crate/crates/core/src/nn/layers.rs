//! Primitive differentiable layers. Each `backward` takes the forward input
//! and the upstream gradient, accumulates parameter gradients and returns the
//! gradient with respect to the input.

use rand::Rng;
use rand_distr::StandardNormal;

use super::params::{ParamRange, ParamStore};
use super::gemm::gemm_acc;
use super::tensor::{axpy, dot, shift_into, Slab};

/// Periodic (circular-padding) 2D convolution with an odd square kernel.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub weight: ParamRange,
    pub bias: Option<ParamRange>,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        bias: bool,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let weight = store.alloc(format!("{name}.weight"), out_ch * in_ch * kernel * kernel);
        let bias = bias.then(|| store.alloc(format!("{name}.bias"), out_ch));
        Self { in_ch, out_ch, kernel, weight, bias }
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn init<R: Rng>(&self, values: &mut [f64], rng: &mut R, gain: f64) {
        let std = gain / (self.fan_in() as f64).sqrt();
        for w in self.weight.slice_mut(values) {
            *w = std * rng.sample::<f64, _>(StandardNormal);
        }
        if let Some(b) = self.bias {
            b.slice_mut(values).iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Stacks every shifted input plane into a `(in_ch * k * k) × (h * w)`
    /// matrix whose row order matches the weight layout.
    fn im2col(&self, x: &Slab) -> Vec<f64> {
        let r = (self.kernel / 2) as isize;
        let (h, w) = (x.height, x.width);
        let n = h * w;
        let mut cols = vec![0.0; self.fan_in() * n];
        let mut rows = cols.chunks_exact_mut(n);
        for c in 0..self.in_ch {
            let plane = x.channel(c);
            for a in 0..self.kernel {
                for b in 0..self.kernel {
                    let row = rows.next().unwrap();
                    shift_into(plane, h, w, a as isize - r, b as isize - r, row);
                }
            }
        }
        cols
    }

    pub fn forward(&self, params: &[f64], x: &Slab) -> Slab {
        debug_assert_eq!(x.channels, self.in_ch);
        let weights = self.weight.slice(params);
        let mut y = Slab::zeros(self.out_ch, x.height, x.width);
        if let Some(b) = self.bias {
            for (o, bias) in b.slice(params).iter().enumerate() {
                y.channel_mut(o).iter_mut().for_each(|v| *v = *bias);
            }
        }
        let k = self.fan_in();
        let n = x.plane();
        if self.kernel == 1 {
            gemm_acc(self.out_ch, n, k, weights, k, 1, &x.data, &mut y.data);
        } else {
            let cols = self.im2col(x);
            gemm_acc(self.out_ch, n, k, weights, k, 1, &cols, &mut y.data);
        }
        y
    }

    pub fn backward(&self, params: &[f64], grads: &mut [f64], x: &Slab, dy: &Slab) -> Slab {
        let weights = self.weight.slice(params);
        if let Some(b) = self.bias {
            let gb = b.slice_mut(grads);
            for (o, g) in gb.iter_mut().enumerate() {
                *g += dy.channel(o).iter().sum::<f64>();
            }
        }
        let k = self.fan_in();
        let (h, w) = (x.height, x.width);
        let n = h * w;
        let owned;
        let cols: &[f64] = if self.kernel == 1 {
            &x.data
        } else {
            owned = self.im2col(x);
            &owned
        };
        let gw = self.weight.slice_mut(grads);
        for o in 0..self.out_ch {
            let dyo = dy.channel(o);
            for (kk, g) in gw[o * k..(o + 1) * k].iter_mut().enumerate() {
                *g += dot(dyo, &cols[kk * n..(kk + 1) * n]);
            }
        }
        // dcols = W^T dy, then scatter each row back through its shift.
        let mut dcols = vec![0.0; k * n];
        gemm_acc(k, n, self.out_ch, weights, 1, k, &dy.data, &mut dcols);
        if self.kernel == 1 {
            return Slab { channels: self.in_ch, height: h, width: w, data: dcols };
        }
        let r = (self.kernel / 2) as isize;
        let mut dx = Slab::zeros(self.in_ch, h, w);
        let mut buf = vec![0.0; n];
        let mut rows = dcols.chunks_exact(n);
        for c in 0..self.in_ch {
            for a in 0..self.kernel {
                for b in 0..self.kernel {
                    let row = rows.next().unwrap();
                    let (di, dj) = (a as isize - r, b as isize - r);
                    shift_into(row, h, w, -di, -dj, &mut buf);
                    axpy(1.0, &buf, dx.channel_mut(c));
                }
            }
        }
        dx
    }
}

/// Dense layer on a vector: `y = W x + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: ParamRange,
    pub bias: ParamRange,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Self {
        let weight = store.alloc(format!("{name}.weight"), inputs * outputs);
        let bias = store.alloc(format!("{name}.bias"), outputs);
        Self { inputs, outputs, weight, bias }
    }

    pub fn init<R: Rng>(&self, values: &mut [f64], rng: &mut R, gain: f64) {
        let std = gain / (self.inputs as f64).sqrt();
        for w in self.weight.slice_mut(values) {
            *w = std * rng.sample::<f64, _>(StandardNormal);
        }
        self.bias.slice_mut(values).iter_mut().for_each(|x| *x = 0.0);
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let w = self.weight.slice(params);
        let b = self.bias.slice(params);
        (0..self.outputs)
            .map(|o| b[o] + dot(&w[o * self.inputs..(o + 1) * self.inputs], x))
            .collect()
    }

    pub fn backward(&self, params: &[f64], grads: &mut [f64], x: &[f64], dy: &[f64]) -> Vec<f64> {
        let w = self.weight.slice(params);
        let mut dx = vec![0.0; self.inputs];
        for (o, g) in dy.iter().enumerate() {
            axpy(*g, &w[o * self.inputs..(o + 1) * self.inputs], &mut dx);
        }
        let gw = self.weight.slice_mut(grads);
        for (o, g) in dy.iter().enumerate() {
            axpy(*g, x, &mut gw[o * self.inputs..(o + 1) * self.inputs]);
        }
        for (gb, g) in self.bias.slice_mut(grads).iter_mut().zip(dy) {
            *gb += g;
        }
        dx
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v * sigmoid(*v)).collect()
}

pub fn silu_slab(x: &Slab) -> Slab {
    Slab { channels: x.channels, height: x.height, width: x.width, data: silu(&x.data) }
}

/// Multiplies `dy` by the SiLU derivative at the pre-activation `x`.
pub fn silu_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(v, g)| {
            let s = sigmoid(*v);
            g * s * (1.0 + v * (1.0 - s))
        })
        .collect()
}

pub fn silu_backward_slab(x: &Slab, dy: &Slab) -> Slab {
    Slab {
        channels: x.channels,
        height: x.height,
        width: x.width,
        data: silu_backward(&x.data, &dy.data),
    }
}

/// 2×2 average pooling.
pub fn avg_pool(x: &Slab) -> Slab {
    let (h, w) = (x.height / 2, x.width / 2);
    let mut y = Slab::zeros(x.channels, h, w);
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = y.channel_mut(c);
        for i in 0..h {
            for j in 0..w {
                let s = src[2 * i * x.width + 2 * j]
                    + src[2 * i * x.width + 2 * j + 1]
                    + src[(2 * i + 1) * x.width + 2 * j]
                    + src[(2 * i + 1) * x.width + 2 * j + 1];
                dst[i * w + j] = 0.25 * s;
            }
        }
    }
    y
}

pub fn avg_pool_backward(dy: &Slab) -> Slab {
    let (h, w) = (dy.height * 2, dy.width * 2);
    let mut dx = Slab::zeros(dy.channels, h, w);
    for c in 0..dy.channels {
        let g = dy.channel(c);
        let dst = dx.channel_mut(c);
        for i in 0..h {
            for j in 0..w {
                dst[i * w + j] = 0.25 * g[(i / 2) * dy.width + j / 2];
            }
        }
    }
    dx
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample(x: &Slab) -> Slab {
    let (h, w) = (x.height * 2, x.width * 2);
    let mut y = Slab::zeros(x.channels, h, w);
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = y.channel_mut(c);
        for i in 0..h {
            for j in 0..w {
                dst[i * w + j] = src[(i / 2) * x.width + j / 2];
            }
        }
    }
    y
}

pub fn upsample_backward(dy: &Slab) -> Slab {
    let (h, w) = (dy.height / 2, dy.width / 2);
    let mut dx = Slab::zeros(dy.channels, h, w);
    for c in 0..dy.channels {
        let g = dy.channel(c);
        let dst = dx.channel_mut(c);
        for i in 0..dy.height {
            for j in 0..dy.width {
                dst[(i / 2) * w + j / 2] += g[i * dy.width + j];
            }
        }
    }
    dx
}

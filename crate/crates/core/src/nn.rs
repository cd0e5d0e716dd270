//! Small layer kit with hand-written backward passes.
//!
//! Gradients of a module are stored in a value of the same type (see
//! [`Params::zeros_like`]), so optimizers can walk parameters and gradients
//! in lockstep through [`Params::visit`] / [`Params::visit_mut`].

use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Anything holding trainable parameters.
pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |s| n += s.len());
        n
    }

    fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |s| out.extend_from_slice(s));
        out
    }

    fn set_flat(&mut self, values: &[f64]) {
        let mut off = 0;
        self.visit_mut(&mut |s| {
            s.copy_from_slice(&values[off..off + s.len()]);
            off += s.len();
        });
        assert_eq!(off, values.len(), "flat parameter length mismatch");
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut g = self.clone();
        g.visit_mut(&mut |s| s.fill(0.0));
        g
    }

    /// `self += other`, parameter by parameter.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src = other.flat();
        let mut off = 0;
        self.visit_mut(&mut |s| {
            let n = s.len();
            for (d, v) in s.iter_mut().zip(&src[off..off + n]) {
                *d += v;
            }
            off += n;
        });
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |s| ok &= s.iter().all(|v| v.is_finite()));
        ok
    }
}

fn slice_of<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameters are kept in standard layout")
}

fn slice_of_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are kept in standard layout")
}

fn normal_init<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Fully connected layer acting on the rows of a matrix: `y = x W^T + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weight: Array2::zeros((outputs, inputs)), bias: Array1::zeros(outputs) }
    }

    /// He-normal weights, zero bias.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let std = (2.0 / inputs as f64).sqrt();
        Self::init_with_std(inputs, outputs, std, rng)
    }

    pub fn init_with_std<R: Rng + ?Sized>(inputs: usize, outputs: usize, std: f64, rng: &mut R) -> Self {
        let w = normal_init(rng, inputs * outputs, std);
        Self { weight: Array2::from_shape_vec((outputs, inputs), w).expect("shape"), bias: Array1::zeros(outputs) }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &dy.t().dot(&x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

impl Params for Linear {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(slice_of(&self.weight));
        f(slice_of(&self.bias));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(slice_of_mut(&mut self.weight));
        f(slice_of_mut(&mut self.bias));
    }
}

/// 2-D valid convolution with square stride, computed through im2col.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    /// `(out, in, kh, kw)`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
}

/// Values kept from the forward pass for [`Conv2d::backward`].
#[derive(Clone, Debug)]
pub struct ConvCache {
    cols: Array2<f64>,
    in_dims: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = inputs * kernel * kernel;
        let w = normal_init(rng, fan_in * outputs, (2.0 / fan_in as f64).sqrt());
        Self {
            weight: Array4::from_shape_vec((outputs, inputs, kernel, kernel), w).expect("shape"),
            bias: Array1::zeros(outputs),
            stride,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn output_size(&self, input: usize) -> Option<usize> {
        let k = self.kernel();
        (input >= k).then(|| (input - k) / self.stride + 1)
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        let (o, i, kh, kw) = self.weight.dim();
        self.weight.view().into_shape_with_order((o, i * kh * kw)).expect("contiguous weight")
    }

    fn im2col(&self, x: &Array3<f64>) -> (Array2<f64>, (usize, usize)) {
        let (c, h, w) = x.dim();
        let k = self.kernel();
        let s = self.stride;
        let oh = (h - k) / s + 1;
        let ow = (w - k) / s + 1;
        let mut cols = Array2::zeros((oh * ow, c * k * k));
        for oy in 0..oh {
            for ox in 0..ow {
                let mut row = cols.row_mut(oy * ow + ox);
                let row = row.as_slice_mut().expect("row");
                let mut j = 0;
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            row[j] = x[[ci, oy * s + ky, ox * s + kx]];
                            j += 1;
                        }
                    }
                }
            }
        }
        (cols, (oh, ow))
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Array3<f64>) -> (Array3<f64>, ConvCache) {
        assert_eq!(x.dim().0, self.in_channels(), "conv input channels");
        let (cols, (oh, ow)) = self.im2col(x);
        let mut y = cols.dot(&self.weight_matrix().t());
        y += &self.bias;
        let out = y
            .t()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.out_channels(), oh, ow))
            .expect("shape");
        (out, ConvCache { cols, in_dims: x.dim(), out_hw: (oh, ow) })
    }

    /// Accumulates into `grad`; returns `dL/dx` when `need_input_grad`.
    pub fn backward(
        &self,
        cache: &ConvCache,
        dy: &Array3<f64>,
        grad: &mut Conv2d,
        need_input_grad: bool,
    ) -> Option<Array3<f64>> {
        let (oh, ow) = cache.out_hw;
        let o = self.out_channels();
        let dy_rows = dy.view().into_shape_with_order((o, oh * ow)).expect("contiguous grad");
        // dW = dy (O x P) . cols (P x CKK)
        let dw = dy_rows.dot(&cache.cols);
        {
            let mut gw = grad.weight.view_mut().into_shape_with_order(dw.dim()).expect("contiguous weight grad");
            gw += &dw;
        }
        grad.bias += &dy_rows.sum_axis(Axis(1));
        if !need_input_grad {
            return None;
        }
        let dcols = dy_rows.t().dot(&self.weight_matrix());
        let (c, h, w) = cache.in_dims;
        let k = self.kernel();
        let s = self.stride;
        let mut dx = Array3::zeros((c, h, w));
        for oy in 0..oh {
            for ox in 0..ow {
                let row = dcols.row(oy * ow + ox);
                let mut j = 0;
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            dx[[ci, oy * s + ky, ox * s + kx]] += row[j];
                            j += 1;
                        }
                    }
                }
            }
        }
        Some(dx)
    }
}

impl Params for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(slice_of(&self.weight));
        f(slice_of(&self.bias));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(slice_of_mut(&mut self.weight));
        f(slice_of_mut(&mut self.bias));
    }
}

/// Batch normalization over the rows of a `(N, C)` matrix.
///
/// Running statistics are buffers, not parameters, and are not visited.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    train: bool,
}

/// Batch statistics observed during a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    pub count: usize,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward_eval(&self, x: ArrayView2<f64>) -> (Array2<f64>, BatchNormCache) {
        let inv_std = self.running_var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let xhat = (&x - &self.running_mean) * &inv_std;
        let y = &xhat * &self.gamma + &self.beta;
        (y, BatchNormCache { xhat, inv_std, train: false })
    }

    pub fn forward_train(&self, x: ArrayView2<f64>) -> (Array2<f64>, BatchNormCache, BatchStats) {
        let n = x.nrows();
        let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
        let centered = &x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n as f64;
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let xhat = centered * &inv_std;
        let y = &xhat * &self.gamma + &self.beta;
        (y, BatchNormCache { xhat, inv_std, train: true }, BatchStats { mean, var, count: n })
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        let n = stats.count as f64;
        let unbiased = if stats.count > 1 { &stats.var * (n / (n - 1.0)) } else { stats.var.clone() };
        let m = self.momentum;
        self.running_mean = &self.running_mean * (1.0 - m) + &stats.mean * m;
        self.running_var = &self.running_var * (1.0 - m) + &unbiased * m;
    }

    pub fn backward(&self, cache: &BatchNormCache, dy: ArrayView2<f64>, grad: &mut BatchNorm) -> Array2<f64> {
        grad.gamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let dxhat = &dy * &self.gamma;
        if !cache.train {
            return dxhat * &cache.inv_std;
        }
        let n = dy.nrows() as f64;
        let sum_dxhat = dxhat.sum_axis(Axis(0));
        let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
        let mut dx = dxhat * n;
        dx -= &sum_dxhat;
        dx -= &(&cache.xhat * &sum_dxhat_xhat);
        dx * &(&cache.inv_std / n)
    }
}

impl Params for BatchNorm {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(slice_of(&self.gamma));
        f(slice_of(&self.beta));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(slice_of_mut(&mut self.gamma));
        f(slice_of_mut(&mut self.beta));
    }
}

pub fn relu<D: ndarray::Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| v.max(0.0))
}

/// Masks `dy` by where the ReLU output was positive.
pub fn relu_backward<D: ndarray::Dimension>(
    out: &ndarray::Array<f64, D>,
    dy: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut dx = dy.clone();
    dx.zip_mut_with(out, |d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// Momentum SGD with L2 weight decay, matching the classic PyTorch update.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step<P: Params>(&mut self, params: &mut P, grads: &P, lr: f64) {
        let g = grads.flat();
        if self.velocity.len() != g.len() {
            self.velocity = vec![0.0; g.len()];
        }
        let (m, wd) = (self.momentum, self.weight_decay);
        let vel = &mut self.velocity;
        let mut off = 0;
        params.visit_mut(&mut |p| {
            for (i, w) in p.iter_mut().enumerate() {
                let j = off + i;
                let v = m * vel[j] + g[j] + wd * *w;
                vel[j] = v;
                *w -= lr * v;
            }
            off += p.len();
        });
    }
}

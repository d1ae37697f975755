//! Dense layers, parameter traversal and the optimizer shared by every
//! trainable component.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Visits named parameter tensors in a fixed order. Gradient buffers use the
/// same type as the model, so traversal order is shared by construction.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, d| n += d.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit("", &mut |_, _, d| out.extend_from_slice(d));
        out
    }

    fn load_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_mut("", &mut |_, d| {
            d.copy_from_slice(&flat[off..off + d.len()]);
            off += d.len();
        });
    }

    fn zero(&mut self) {
        self.visit_mut("", &mut |_, d| d.fill(0.0));
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, _, d| ok &= d.iter().all(|v| v.is_finite()));
        ok
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let std = (2.0 / inputs.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        Self {
            weight: Array2::from_shape_fn((outputs, inputs), |_| normal.sample(rng)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &ArrayView2<f64>, dy: &ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &dy.t().dot(x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }

    /// Same as [`Linear::backward`] without the input gradient.
    pub fn backward_params(&self, x: &ArrayView2<f64>, dy: &ArrayView2<f64>, grad: &mut Linear) {
        grad.weight += &dy.t().dot(x);
        grad.bias += &dy.sum_axis(Axis(0));
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        f(
            join(prefix, "weight"),
            self.weight.shape(),
            self.weight.as_slice().expect("contiguous"),
        );
        f(
            join(prefix, "bias"),
            self.bias.shape(),
            self.bias.as_slice().expect("contiguous"),
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        f(join(prefix, "weight"), self.weight.as_slice_mut().expect("contiguous"));
        f(join(prefix, "bias"), self.bias.as_slice_mut().expect("contiguous"));
    }
}

pub fn relu_inplace(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `grad` wherever the forward activation was clipped.
pub fn relu_backward_inplace(grad: &mut Array2<f64>, activation: &Array2<f64>) {
    ndarray::Zip::from(grad).and(activation).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Plain ReLU multilayer perceptron (no activation after the last layer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Layer inputs recorded by [`Mlp::forward_cached`].
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn new<R: Rng>(widths: &[usize], rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        Self {
            layers: widths.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Linear::zeros(l.inputs(), l.outputs()))
                .collect(),
        }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().expect("non-empty").outputs()
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &ArrayView2<f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(&h.view());
            if i + 1 < self.layers.len() {
                relu_inplace(&mut y);
            }
            inputs.push(h);
            h = y;
        }
        (h, MlpCache { inputs })
    }

    /// Backpropagates `dy`; returns the input gradient.
    pub fn backward(&self, cache: &MlpCache, dy: &ArrayView2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let mut g = dy.to_owned();
        for i in (0..self.layers.len()).rev() {
            let x = &cache.inputs[i];
            let dx = self.layers[i].backward(&x.view(), &g.view(), &mut grad.layers[i]);
            if i > 0 {
                g = dx;
                relu_backward_inplace(&mut g, &cache.inputs[i]);
            } else {
                return dx;
            }
        }
        unreachable!("mlp has at least one layer")
    }
}

impl Params for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layer{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay over a flattened parameter vector.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, num_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<P: Params>(&mut self, params: &mut P, grads: &P, lr: f64) {
        let g = grads.flatten();
        assert_eq!(g.len(), self.m.len(), "optimizer state does not match model");
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut off = 0;
        params.visit_mut("", &mut |_, p| {
            for (i, w) in p.iter_mut().enumerate() {
                let j = off + i;
                let gj = g[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * (mh / (vh.sqrt() + eps) + weight_decay * *w);
            }
            off += p.len();
        });
    }
}

/// One-cycle learning rate: cosine ramp from `floor` to `peak` over the
/// first `warmup` fraction of steps, then cosine decay back to `floor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub floor: f64,
    pub peak: f64,
    pub warmup: f64,
    pub total_steps: usize,
}

impl OneCycle {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            return self.floor;
        }
        let x = step.min(self.total_steps - 1) as f64 / (self.total_steps - 1) as f64;
        let cos_interp = |a: f64, b: f64, t: f64| b + (a - b) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        if x < self.warmup {
            cos_interp(self.floor, self.peak, x / self.warmup)
        } else {
            cos_interp(self.peak, self.floor, (x - self.warmup) / (1.0 - self.warmup))
        }
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Row-wise softmax in place.
pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
}

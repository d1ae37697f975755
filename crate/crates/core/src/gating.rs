//! Image-level router, Gumbel-Softmax routing and the bias-based load
//! balancing loop.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{ExpertBank, ExpertCache};
use crate::nn::{join, Mlp, MlpCache, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouterConfig {
    pub hidden: Vec<usize>,
    pub tau_start: f64,
    pub tau_end: f64,
    pub gamma: f64,
    pub eta: f64,
    /// Enables the usage-driven bias correction.
    pub load_balancing: bool,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            tau_start: 1.0,
            tau_end: 0.1,
            gamma: 0.99,
            eta: 0.01,
            load_balancing: true,
        }
    }
}

/// Router MLP plus the gradient-free balancing state.
#[derive(Debug, Clone, PartialEq)]
pub struct Router {
    pub mlp: Mlp,
    pub bias: Array1<f64>,
    pub usage: Array1<f64>,
    pub tau: f64,
    pub gamma: f64,
    pub eta: f64,
    pub load_balancing: bool,
    pub step: u64,
}

impl Router {
    pub fn new(cfg: &RouterConfig, d: usize, k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("router needs at least one expert"));
        }
        check_tau(cfg.tau_start)?;
        check_gamma(cfg.gamma)?;
        check_eta(cfg.eta)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x524f_5554);
        let mut widths = vec![d];
        widths.extend(&cfg.hidden);
        widths.push(k);
        Ok(Self {
            mlp: Mlp::new(&widths, &mut rng),
            bias: Array1::zeros(k),
            usage: Array1::from_elem(k, 1.0 / k as f64),
            tau: cfg.tau_start,
            gamma: cfg.gamma,
            eta: cfg.eta,
            load_balancing: cfg.load_balancing,
            step: 0,
        })
    }

    pub fn experts(&self) -> usize {
        self.bias.len()
    }

    /// Adopts the control-loop settings of `cfg`; weights, bias and usage
    /// are kept. Lets a later stage switch balancing on or off.
    pub fn configure(&mut self, cfg: &RouterConfig) -> Result<()> {
        check_gamma(cfg.gamma)?;
        check_eta(cfg.eta)?;
        self.gamma = cfg.gamma;
        self.eta = cfg.eta;
        self.load_balancing = cfg.load_balancing;
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.inputs()
    }

    /// One control step: EMA of usage from a batch-mean routing vector, then
    /// the bias correction when balancing is enabled.
    pub fn observe(&mut self, alpha: &[f64]) -> Result<()> {
        let u = ema_update(self.usage.as_slice().expect("contiguous"), alpha, self.gamma)?;
        self.usage = Array1::from(u);
        if self.load_balancing {
            let b = bias_update(
                self.bias.as_slice().expect("contiguous"),
                self.usage.as_slice().expect("contiguous"),
                self.eta,
            )?;
            self.bias = Array1::from(b);
        }
        self.step += 1;
        Ok(())
    }

    pub fn param_bytes(&self, elem_size: usize) -> usize {
        self.mlp.num_params() * elem_size
    }
}

impl Params for Router {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        self.mlp.visit(&join(prefix, "mlp"), f);
        f(join(prefix, "bias"), self.bias.shape(), self.bias.as_slice().expect("contiguous"));
        f(join(prefix, "usage"), self.usage.shape(), self.usage.as_slice().expect("contiguous"));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
        f(join(prefix, "bias"), self.bias.as_slice_mut().expect("contiguous"));
        f(join(prefix, "usage"), self.usage.as_slice_mut().expect("contiguous"));
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be positive, got {tau}")))
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if (0.0..=1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(Error::invalid(format!("EMA decay must lie in [0, 1], got {gamma}")))
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("bias rate must be positive, got {eta}")))
    }
}

/// Raw logits for a batch of embeddings (`B x D` to `B x K`).
pub fn route_logits_batch(router: &Router, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != router.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "router input",
            expected: router.input_dim(),
            got: x.ncols(),
        });
    }
    Ok(router.mlp.forward(x))
}

pub fn route_logits(router: &Router, x: &ArrayView1<f64>) -> Result<Array1<f64>> {
    let x2 = x.view().insert_axis(Axis(0));
    Ok(route_logits_batch(router, &x2)?.row(0).to_owned())
}

pub fn biased_logits(z: &[f64], b: &[f64]) -> Vec<f64> {
    assert_eq!(z.len(), b.len(), "logit and bias lengths differ");
    z.iter().zip(b).map(|(z, b)| z + b).collect()
}

/// Standard Gumbel samples `-ln(-ln U)`.
pub fn sample_gumbel<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    (0..k)
        .map(|_| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// `softmax((z + g) / tau)`; `noise = None` is the noise-free evaluation.
pub fn gumbel_softmax(z: &[f64], tau: f64, noise: Option<&[f64]>) -> Result<Vec<f64>> {
    check_tau(tau)?;
    let perturbed: Vec<f64> = match noise {
        Some(g) => {
            if g.len() != z.len() {
                return Err(Error::DimensionMismatch {
                    context: "gumbel noise",
                    expected: z.len(),
                    got: g.len(),
                });
            }
            z.iter().zip(g).map(|(z, g)| (z + g) / tau).collect()
        }
        None => z.iter().map(|z| z / tau).collect(),
    };
    Ok(crate::nn::softmax(&perturbed))
}

/// Vector-Jacobian product of [`gumbel_softmax`] w.r.t. its logits.
pub fn gumbel_softmax_backward(alpha: &[f64], dalpha: &[f64], tau: f64) -> Vec<f64> {
    let dot: f64 = alpha.iter().zip(dalpha).map(|(a, d)| a * d).sum();
    alpha.iter().zip(dalpha).map(|(a, d)| a * (d - dot) / tau).collect()
}

pub fn ema_update(u: &[f64], alpha: &[f64], gamma: f64) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    if u.len() != alpha.len() {
        return Err(Error::DimensionMismatch {
            context: "usage update",
            expected: u.len(),
            got: alpha.len(),
        });
    }
    Ok(u.iter().zip(alpha).map(|(u, a)| gamma * u + (1.0 - gamma) * a).collect())
}

/// `b_k - eta * (u_k - mean(u))`; leaves the sum of `b` unchanged.
pub fn bias_update(b: &[f64], u: &[f64], eta: f64) -> Result<Vec<f64>> {
    check_eta(eta)?;
    if u.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "bias update",
            expected: b.len(),
            got: u.len(),
        });
    }
    let mean = u.iter().sum::<f64>() / u.len() as f64;
    Ok(b.iter().zip(u).map(|(b, u)| b - eta * (u - mean)).collect())
}

/// Noise-free argmax of the biased logits; ties go to the lowest index.
pub fn argmax_lowest(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

pub fn select_expert_infer(router: &Router, x: &ArrayView1<f64>) -> Result<usize> {
    let z = route_logits(router, x)?;
    let zt = biased_logits(z.as_slice().expect("contiguous"), router.bias.as_slice().expect("contiguous"));
    Ok(argmax_lowest(&zt))
}

/// One routed image in a mixture batch.
pub struct MoeInput<'a> {
    pub embedding: ArrayView1<'a, f64>,
    /// `N x D` local descriptors of the pixels to predict.
    pub descriptors: ArrayView2<'a, f64>,
}

pub struct MoeCache {
    router_cache: MlpCache,
    /// Per image, per expert.
    expert_caches: Vec<Vec<ExpertCache>>,
    expert_outputs: Vec<Vec<Array2<f64>>>,
    pub alpha: Array2<f64>,
    tau: f64,
}

pub struct MoeOutput {
    /// Per image `N x 3` fused coordinates.
    pub coords: Vec<Array2<f64>>,
    /// `B x K` routing weights.
    pub alpha: Array2<f64>,
    pub cache: MoeCache,
}

/// Soft fusion `sum_k alpha_k E_k(f)` with caller-supplied Gumbel noise
/// (`B x K`). Pure: no balancing side effects.
pub fn moe_forward(
    router: &Router,
    bank: &ExpertBank,
    inputs: &[MoeInput<'_>],
    noise: &ArrayView2<f64>,
) -> Result<MoeOutput> {
    let k = router.experts();
    if bank.len() != k {
        return Err(Error::DimensionMismatch {
            context: "expert bank size",
            expected: k,
            got: bank.len(),
        });
    }
    if inputs.is_empty() {
        return Err(Error::Empty("mixture batch"));
    }
    if noise.dim() != (inputs.len(), k) {
        return Err(Error::invalid("gumbel noise must be batch x experts"));
    }
    let d = router.input_dim();
    let mut emb = Array2::zeros((inputs.len(), d));
    for (i, inp) in inputs.iter().enumerate() {
        if inp.embedding.len() != d {
            return Err(Error::DimensionMismatch {
                context: "router input",
                expected: d,
                got: inp.embedding.len(),
            });
        }
        emb.row_mut(i).assign(&inp.embedding);
    }
    let (z, router_cache) = router.mlp.forward_cached(&emb.view());
    let mut alpha = Array2::zeros((inputs.len(), k));
    for i in 0..inputs.len() {
        let zt = biased_logits(z.row(i).as_slice().expect("contiguous"), router.bias.as_slice().expect("contiguous"));
        let a = gumbel_softmax(&zt, router.tau, Some(noise.row(i).as_slice().expect("contiguous")))?;
        alpha.row_mut(i).assign(&ArrayView1::from(&a));
    }
    let mut coords = Vec::with_capacity(inputs.len());
    let mut expert_caches = Vec::with_capacity(inputs.len());
    let mut expert_outputs = Vec::with_capacity(inputs.len());
    for (i, inp) in inputs.iter().enumerate() {
        let mut fused = Array2::zeros((inp.descriptors.nrows(), 3));
        let mut caches = Vec::with_capacity(k);
        let mut outs = Vec::with_capacity(k);
        for (e, expert) in bank.experts.iter().enumerate() {
            let (y, c) = expert.forward_cached(&bank.decoder, &inp.descriptors)?;
            fused.scaled_add(alpha[(i, e)], &y);
            caches.push(c);
            outs.push(y);
        }
        coords.push(fused);
        expert_caches.push(caches);
        expert_outputs.push(outs);
    }
    Ok(MoeOutput {
        coords,
        alpha: alpha.clone(),
        cache: MoeCache {
            router_cache,
            expert_caches,
            expert_outputs,
            alpha,
            tau: router.tau,
        },
    })
}

/// Backpropagates `dL/dcoords` into router-MLP and expert gradients.
pub fn moe_backward(
    router: &Router,
    bank: &ExpertBank,
    cache: &MoeCache,
    dcoords: &[Array2<f64>],
    router_grad: &mut Mlp,
    expert_grads: Option<&mut [crate::experts::ExpertHead]>,
) {
    let (b, k) = cache.alpha.dim();
    let mut dz = Array2::zeros((b, k));
    for i in 0..b {
        let dalpha: Vec<f64> = (0..k)
            .map(|e| (&cache.expert_outputs[i][e] * &dcoords[i]).sum())
            .collect();
        let g = gumbel_softmax_backward(cache.alpha.row(i).as_slice().expect("contiguous"), &dalpha, cache.tau);
        dz.row_mut(i).assign(&ArrayView1::from(&g));
    }
    router.mlp.backward(&cache.router_cache, &dz.view(), router_grad);
    if let Some(grads) = expert_grads {
        for i in 0..b {
            for (e, expert) in bank.experts.iter().enumerate() {
                let w = cache.alpha[(i, e)];
                if w == 0.0 {
                    continue;
                }
                let dy = &dcoords[i] * w;
                expert.backward(&bank.decoder, &cache.expert_caches[i][e], &dy.view(), &mut grads[e]);
            }
        }
    }
}

/// Training-mode fusion: samples Gumbel noise, fuses, then runs one
/// balancing step on the batch-mean routing weights.
pub fn moe_forward_train<R: Rng>(
    router: &mut Router,
    bank: &ExpertBank,
    inputs: &[MoeInput<'_>],
    rng: &mut R,
) -> Result<MoeOutput> {
    let k = router.experts();
    let mut noise = Array2::zeros((inputs.len(), k));
    for mut row in noise.rows_mut() {
        row.assign(&Array1::from(sample_gumbel(rng, k)));
    }
    let out = moe_forward(router, bank, inputs, &noise.view())?;
    let mean = out.alpha.mean_axis(Axis(0)).expect("non-empty batch");
    router.observe(mean.as_slice().expect("contiguous"))?;
    Ok(out)
}

/// Closed-loop balancing simulation over a two-region stream. Region A
/// (probability `p_a`) yields logits `(m, 0)`, region B yields `(0, m)`.
/// Returns per-step selected experts (Gumbel-max samples) and the bias trace.
pub fn simulate_balancing(
    p_a: f64,
    margin: f64,
    steps: usize,
    cfg: &RouterConfig,
    seed: u64,
) -> Result<(Vec<usize>, Vec<[f64; 2]>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut router = Router {
        mlp: Mlp { layers: Vec::new() },
        bias: Array1::zeros(2),
        usage: Array1::from_elem(2, 0.5),
        tau: cfg.tau_start,
        gamma: cfg.gamma,
        eta: cfg.eta,
        load_balancing: cfg.load_balancing,
        step: 0,
    };
    let mut picks = Vec::with_capacity(steps);
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let z = if rng.random_bool(p_a) { [margin, 0.0] } else { [0.0, margin] };
        let zt = biased_logits(&z, router.bias.as_slice().expect("contiguous"));
        let g = sample_gumbel(&mut rng, 2);
        let alpha = gumbel_softmax(&zt, router.tau, Some(&g))?;
        picks.push(argmax_lowest(&alpha));
        router.observe(&alpha)?;
        trace.push([router.bias[0], router.bias[1]]);
    }
    Ok((picks, trace))
}

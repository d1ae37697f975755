//! Scene-coordinate experts and the shared multimodal position decoder.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::Vector3;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, relu_backward_inplace, relu_inplace, Linear, Params};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centers: Vec<Vector3<f64>>,
    pub assignment: Vec<usize>,
}

fn nearest(centers: &[Vector3<f64>], p: &Vector3<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = (p - c).norm_squared();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Lloyd iterations from a k-means++ seeding. Empty clusters are re-seeded
/// with the point farthest from its current center.
pub fn kmeans(points: &[Vector3<f64>], k: usize, seed: u64, iters: usize) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if points.len() < k {
        return Err(Error::invalid(format!(
            "k-means needs at least k = {k} points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::invalid("k-means input contains non-finite positions"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4b4d_4541);
    let mut chosen = vec![false; points.len()];
    let first = rng.random_range(0..points.len());
    chosen[first] = true;
    let mut centers = vec![points[first]];
    let mut d2: Vec<f64> = points.iter().map(|p| (p - points[first]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut idx = d2.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            // Only duplicates remain: take any unused point.
            chosen.iter().position(|c| !c).expect("points.len() >= k")
        };
        chosen[pick] = true;
        centers.push(points[pick]);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min((p - points[pick]).norm_squared());
        }
    }

    let mut assignment = vec![usize::MAX; points.len()];
    for _ in 0..iters.max(1) {
        let mut changed = false;
        for (a, p) in assignment.iter_mut().zip(points) {
            let (i, _) = nearest(&centers, p);
            if *a != i {
                *a = i;
                changed = true;
            }
        }
        let mut sums = vec![Vector3::zeros(); k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignment.iter().zip(points) {
            sums[a] += p;
            counts[a] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j] / counts[j] as f64;
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let (far, _) = points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, (p - centers[assignment[i]]).norm_squared()))
                    .fold((0, -1.0), |best, x| if x.1 > best.1 { x } else { best });
                counts[assignment[far]] -= 1;
                assignment[far] = j;
                counts[j] = 1;
                centers[j] = points[far];
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(KMeans { centers, assignment })
}

pub fn kmeans_centers(points: &[Vector3<f64>], k: usize, seed: u64, iters: usize) -> Result<Vec<Vector3<f64>>> {
    Ok(kmeans(points, k, seed, iters)?.centers)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionDecoder {
    /// `k x 3`, meters.
    pub centers: Array2<f64>,
}

impl PositionDecoder {
    pub fn new(centers: &[Vector3<f64>]) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::Empty("decoder centers"));
        }
        if centers.iter().any(|c| !c.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid("decoder centers must be finite"));
        }
        Ok(Self {
            centers: Array2::from_shape_fn((centers.len(), 3), |(i, j)| centers[i][j]),
        })
    }

    pub fn k(&self) -> usize {
        self.centers.nrows()
    }

    pub fn center(&self, i: usize) -> Vector3<f64> {
        Vector3::new(self.centers[(i, 0)], self.centers[(i, 1)], self.centers[(i, 2)])
    }
}

impl Params for PositionDecoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        f(join(prefix, "centers"), self.centers.shape(), self.centers.as_slice().expect("contiguous"));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        f(join(prefix, "centers"), self.centers.as_slice_mut().expect("contiguous"));
    }
}

/// Softmax-weighted convex combination of the centers plus `offset`.
pub fn decode_position(logits: &[f64], offset: &Vector3<f64>, dec: &PositionDecoder) -> Result<Vector3<f64>> {
    if logits.len() != dec.k() {
        return Err(Error::DimensionMismatch {
            context: "decoder logits",
            expected: dec.k(),
            got: logits.len(),
        });
    }
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("decoder logits contain NaN"));
    }
    let w = crate::nn::softmax(logits);
    let mut c = *offset;
    for (i, wi) in w.iter().enumerate() {
        c += dec.center(i) * *wi;
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    pub width: usize,
    pub blocks: usize,
    pub head_width: usize,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            width: 128,
            blocks: 1,
            head_width: 128,
        }
    }
}

impl ExpertConfig {
    /// Parameter count for input dimension `d` and `k` decoder centers,
    /// without instantiating weights.
    pub fn param_count(&self, d: usize, k: usize) -> usize {
        let lin = |i: usize, o: usize| i * o + o;
        lin(d, self.width)
            + 2 * self.blocks * lin(self.width, self.width)
            + lin(self.width, self.head_width)
            + lin(self.head_width, k + 3)
            + 1
    }
}

/// Residual MLP mapping a descriptor to `k` decoder logits and an offset.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertHead {
    pub input: Linear,
    pub blocks: Vec<(Linear, Linear)>,
    pub head: Linear,
    pub output: Linear,
    /// Log of the offset scale in meters (length 1).
    pub log_scale: Array1<f64>,
}

pub struct ExpertCache {
    x: Array2<f64>,
    /// Residual stream after the input layer and after every block.
    hs: Vec<Array2<f64>>,
    /// Inner activation of every block.
    acts: Vec<Array2<f64>>,
    hh: Array2<f64>,
    weights: Array2<f64>,
    offset_raw: Array2<f64>,
}

impl ExpertHead {
    pub fn new(cfg: &ExpertConfig, d: usize, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4558_5054);
        let input = Linear::new(d, cfg.width, &mut rng);
        let blocks = (0..cfg.blocks)
            .map(|_| {
                let a = Linear::new(cfg.width, cfg.width, &mut rng);
                let mut b = Linear::new(cfg.width, cfg.width, &mut rng);
                // Start residual branches near identity.
                b.weight.mapv_inplace(|v| v * 0.1);
                (a, b)
            })
            .collect();
        let head = Linear::new(cfg.width, cfg.head_width, &mut rng);
        let mut output = Linear::new(cfg.head_width, k + 3, &mut rng);
        output.weight.mapv_inplace(|v| v * 0.1);
        Self {
            input,
            blocks,
            head,
            output,
            log_scale: Array1::zeros(1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |l: &Linear| Linear::zeros(l.inputs(), l.outputs());
        Self {
            input: z(&self.input),
            blocks: self.blocks.iter().map(|(a, b)| (z(a), z(b))).collect(),
            head: z(&self.head),
            output: z(&self.output),
            log_scale: Array1::zeros(1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input.inputs()
    }

    pub fn k(&self) -> usize {
        self.output.outputs() - 3
    }

    /// Biases the decoder logits towards a Gaussian prior around `mean`, so
    /// the untrained expert predicts points near its region.
    pub fn init_prior(&mut self, dec: &PositionDecoder, mean: &Vector3<f64>, sigma: f64) {
        for i in 0..dec.k() {
            self.output.bias[i] = -(dec.center(i) - mean).norm_squared() / (2.0 * sigma * sigma);
        }
    }

    pub fn zero_output_layer(&mut self) {
        self.output.weight.fill(0.0);
        self.output.bias.fill(0.0);
    }

    pub fn param_bytes(&self, elem_size: usize) -> usize {
        self.num_params() * elem_size
    }

    fn check(&self, x: &ArrayView2<f64>, dec: &PositionDecoder) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "expert input",
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        if dec.k() != self.k() {
            return Err(Error::DimensionMismatch {
                context: "decoder centers",
                expected: self.k(),
                got: dec.k(),
            });
        }
        Ok(())
    }

    /// `N x D` descriptors to `N x 3` scene coordinates.
    pub fn forward(&self, dec: &PositionDecoder, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(dec, x)?.0)
    }

    pub fn forward_cached(&self, dec: &PositionDecoder, x: &ArrayView2<f64>) -> Result<(Array2<f64>, ExpertCache)> {
        self.check(x, dec)?;
        let mut h = self.input.forward(x);
        relu_inplace(&mut h);
        let mut hs = vec![h];
        let mut acts = Vec::with_capacity(self.blocks.len());
        for (a, b) in &self.blocks {
            let prev = hs.last().expect("non-empty");
            let mut inner = a.forward(&prev.view());
            relu_inplace(&mut inner);
            let mut next = b.forward(&inner.view());
            next += prev;
            relu_inplace(&mut next);
            acts.push(inner);
            hs.push(next);
        }
        let mut hh = self.head.forward(&hs.last().expect("non-empty").view());
        relu_inplace(&mut hh);
        let out = self.output.forward(&hh.view());
        let k = self.k();
        let mut weights = out.slice(s![.., ..k]).to_owned();
        crate::nn::softmax_rows(&mut weights);
        let offset_raw = out.slice(s![.., k..]).to_owned();
        let scale = self.log_scale[0].exp();
        let mut pos = weights.dot(&dec.centers);
        pos.scaled_add(scale, &offset_raw);
        Ok((
            pos,
            ExpertCache {
                x: x.to_owned(),
                hs,
                acts,
                hh,
                weights,
                offset_raw,
            },
        ))
    }

    /// Accumulates parameter gradients for `dL/dpos` and returns `dL/dx`.
    pub fn backward(
        &self,
        dec: &PositionDecoder,
        cache: &ExpertCache,
        dpos: &ArrayView2<f64>,
        grad: &mut ExpertHead,
    ) -> Array2<f64> {
        let k = self.k();
        let scale = self.log_scale[0].exp();
        grad.log_scale[0] += scale * (&cache.offset_raw * dpos).sum();
        let dw = dpos.dot(&dec.centers.t());
        let inner = (&dw * &cache.weights).sum_axis(Axis(1)).insert_axis(Axis(1));
        let dlogits = &cache.weights * &(&dw - &inner);
        let mut dout = Array2::zeros((dpos.nrows(), k + 3));
        dout.slice_mut(s![.., ..k]).assign(&dlogits);
        dout.slice_mut(s![.., k..]).assign(&(dpos * scale));

        let mut g = self.output.backward(&cache.hh.view(), &dout.view(), &mut grad.output);
        relu_backward_inplace(&mut g, &cache.hh);
        let last = cache.hs.last().expect("non-empty");
        let mut g = self.head.backward(&last.view(), &g.view(), &mut grad.head);
        for i in (0..self.blocks.len()).rev() {
            relu_backward_inplace(&mut g, &cache.hs[i + 1]);
            let (a, b) = &self.blocks[i];
            let (ga, gb) = &mut grad.blocks[i];
            let mut da = b.backward(&cache.acts[i].view(), &g.view(), gb);
            relu_backward_inplace(&mut da, &cache.acts[i]);
            g += &a.backward(&cache.hs[i].view(), &da.view(), ga);
        }
        relu_backward_inplace(&mut g, &cache.hs[0]);
        self.input.backward(&cache.x.view(), &g.view(), &mut grad.input)
    }
}

impl Params for ExpertHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        self.input.visit(&join(prefix, "input"), f);
        for (i, (a, b)) in self.blocks.iter().enumerate() {
            a.visit(&join(prefix, &format!("block{i}.fc0")), f);
            b.visit(&join(prefix, &format!("block{i}.fc1")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
        self.output.visit(&join(prefix, "output"), f);
        f(join(prefix, "log_scale"), self.log_scale.shape(), self.log_scale.as_slice().expect("contiguous"));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        self.input.visit_mut(&join(prefix, "input"), f);
        for (i, (a, b)) in self.blocks.iter_mut().enumerate() {
            a.visit_mut(&join(prefix, &format!("block{i}.fc0")), f);
            b.visit_mut(&join(prefix, &format!("block{i}.fc1")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
        f(join(prefix, "log_scale"), self.log_scale.as_slice_mut().expect("contiguous"));
    }
}

/// Single-descriptor convenience wrapper around [`ExpertHead::forward`].
pub fn expert_forward(expert: &ExpertHead, dec: &PositionDecoder, f: &[f64]) -> Result<Vector3<f64>> {
    let x = ArrayView2::from_shape((1, f.len()), f).map_err(|e| Error::invalid(e.to_string()))?;
    let y = expert.forward(dec, &x)?;
    Ok(Vector3::new(y[(0, 0)], y[(0, 1)], y[(0, 2)]))
}

/// All experts of a scene plus per-expert evaluation counters.
#[derive(Debug)]
pub struct ExpertBank {
    pub experts: Vec<ExpertHead>,
    pub decoder: PositionDecoder,
    evaluations: Vec<AtomicU64>,
}

impl Clone for ExpertBank {
    fn clone(&self) -> Self {
        Self::new(self.experts.clone(), self.decoder.clone())
    }
}

impl PartialEq for ExpertBank {
    fn eq(&self, other: &Self) -> bool {
        self.experts == other.experts && self.decoder == other.decoder
    }
}

impl ExpertBank {
    pub fn new(experts: Vec<ExpertHead>, decoder: PositionDecoder) -> Self {
        let evaluations = experts.iter().map(|_| AtomicU64::new(0)).collect();
        Self {
            experts,
            decoder,
            evaluations,
        }
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    /// Evaluates expert `k` on a batch of descriptors; counts as one
    /// activation.
    pub fn predict(&self, k: usize, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let expert = self.experts.get(k).ok_or_else(|| {
            Error::invalid(format!("expert index {k} out of range for {} experts", self.len()))
        })?;
        let y = expert.forward(&self.decoder, x)?;
        self.evaluations[k].fetch_add(1, Ordering::Relaxed);
        Ok(y)
    }

    pub fn evaluation_counts(&self) -> Vec<u64> {
        self.evaluations.iter().map(|c| c.load(Ordering::Relaxed)).collect()
    }

    pub fn reset_counters(&self) {
        for c in &self.evaluations {
            c.store(0, Ordering::Relaxed);
        }
    }

    pub fn expert_bytes(&self, elem_size: usize) -> usize {
        self.experts.first().map_or(0, |e| e.param_bytes(elem_size))
    }
}

impl Params for ExpertBank {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        self.decoder.visit(&join(prefix, "decoder"), f);
        for (i, e) in self.experts.iter().enumerate() {
            e.visit(&join(prefix, &format!("expert{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
        for (i, e) in self.experts.iter_mut().enumerate() {
            e.visit_mut(&join(prefix, &format!("expert{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{point_loss, CameraIntrinsics, ReprojLossConfig, RigidPose};
    use nalgebra::Vector2;
    use rand_distr::{Distribution, StandardNormal};

    fn rand_points(n: usize, seed: u64, scale: f64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-scale..scale)))
            .collect()
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let pts = rand_points(100, 1, 3.0);
        let c = kmeans_centers(&pts, 1, 0, 50).unwrap();
        let mean = pts.iter().sum::<Vector3<f64>>() / 100.0;
        assert!((c[0] - mean).norm() < 1e-12);
    }

    #[test]
    fn kmeans_saturated() {
        let pts = rand_points(12, 2, 3.0);
        let c = kmeans_centers(&pts, 12, 4, 50).unwrap();
        for p in &pts {
            assert!(c.iter().any(|q| (p - q).norm() < 1e-12));
        }
        assert!(kmeans_centers(&pts, 13, 4, 50).is_err());
        assert!(kmeans_centers(&pts, 0, 4, 50).is_err());
    }

    #[test]
    fn kmeans_separated_blobs() {
        let r = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let offsets = [Vector3::zeros(), Vector3::new(100.0 * r, 0.0, 0.0)];
        let mut pts = Vec::new();
        for o in &offsets {
            for _ in 0..200 {
                let v: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
                pts.push(o + v.normalize() * r * rng.random_range(0.0f64..1.0).cbrt());
            }
        }
        for seed in 0..10 {
            let c = kmeans_centers(&pts, 2, seed, 100).unwrap();
            for b in 0..offsets.len() {
                let blob = &pts[b * 200..(b + 1) * 200];
                let mean = blob.iter().sum::<Vector3<f64>>() / 200.0;
                assert!(c.iter().any(|q| (q - mean).norm() < 0.1 * r));
            }
        }
        assert_eq!(kmeans(&pts, 2, 7, 100).unwrap(), kmeans(&pts, 2, 7, 100).unwrap());
    }

    #[test]
    fn kmeans_reseeds_empty_clusters() {
        // Many duplicates force an empty cluster during seeding.
        let mut pts = vec![Vector3::zeros(); 10];
        pts.push(Vector3::new(1.0, 0.0, 0.0));
        let km = kmeans(&pts, 3, 0, 20).unwrap();
        let mut counts = [0; 3];
        for &a in &km.assignment {
            counts[a] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
    }

    fn decoder(k: usize, seed: u64) -> PositionDecoder {
        PositionDecoder::new(&rand_points(k, seed, 5.0)).unwrap()
    }

    #[test]
    fn decode_trivial_cases() {
        let dec = decoder(5, 1);
        let mut logits = vec![-40.0; 5];
        logits[0] = 40.0;
        let off = Vector3::new(0.1, -0.2, 0.3);
        let p = decode_position(&logits, &off, &dec).unwrap();
        assert!((p - (dec.center(0) + off)).norm() < 1e-9);

        let dec2 = PositionDecoder::new(&[Vector3::zeros(), Vector3::new(2.0, 0.0, 0.0)]).unwrap();
        let p = decode_position(&[0.3, 0.3], &Vector3::zeros(), &dec2).unwrap();
        assert!((p - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-15);

        assert!(decode_position(&[f64::NAN, 0.0], &Vector3::zeros(), &dec2).is_err());
        assert!(decode_position(&[0.0], &Vector3::zeros(), &dec2).is_err());
        assert!(PositionDecoder::new(&[]).is_err());
    }

    /// Projected-gradient solve of min ||C^T w - p|| over the simplex.
    fn simplex_residual(dec: &PositionDecoder, p: &Vector3<f64>) -> f64 {
        let k = dec.k();
        let mut w = vec![1.0 / k as f64; k];
        let lip: f64 = (0..k).map(|i| dec.center(i).norm_squared()).sum::<f64>().max(1e-12);
        for _ in 0..20_000 {
            let r: Vector3<f64> = (0..k).map(|i| dec.center(i) * w[i]).sum::<Vector3<f64>>() - p;
            for i in 0..k {
                w[i] -= dec.center(i).dot(&r) / lip;
            }
            // Euclidean projection onto the simplex.
            let mut u = w.clone();
            u.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let mut css = 0.0;
            let mut theta = 0.0;
            for (j, uj) in u.iter().enumerate() {
                css += uj;
                let t = (css - 1.0) / (j + 1) as f64;
                if uj - t > 0.0 {
                    theta = t;
                }
            }
            for wi in &mut w {
                *wi = (*wi - theta).max(0.0);
            }
        }
        ((0..k).map(|i| dec.center(i) * w[i]).sum::<Vector3<f64>>() - p).norm()
    }

    #[test]
    fn decoded_mean_is_in_convex_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..10 {
            let dec = decoder(6, trial);
            let logits: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let w = crate::nn::softmax(&logits);
            assert!(w.iter().all(|&x| x >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let p = decode_position(&logits, &Vector3::zeros(), &dec).unwrap();
            assert!(simplex_residual(&dec, &p) < 1e-6);
            let max_norm = (0..6).map(|i| dec.center(i).norm()).fold(0.0, f64::max);
            let off = Vector3::new(0.5, 0.1, -2.0);
            let q = decode_position(&logits, &off, &dec).unwrap();
            assert!(q.norm() <= max_norm + off.norm() + 1e-12);
            let shifted: Vec<f64> = logits.iter().map(|v| v + 17.0).collect();
            let q2 = decode_position(&shifted, &off, &dec).unwrap();
            assert!((q - q2).norm() < 1e-7);
        }
        // A point outside the hull is detected by the same oracle.
        let dec = PositionDecoder::new(&[Vector3::zeros(), Vector3::x()]).unwrap();
        assert!(simplex_residual(&dec, &Vector3::new(0.5, 1.0, 0.0)) > 0.5);
    }

    fn small_cfg() -> ExpertConfig {
        ExpertConfig {
            width: 12,
            blocks: 2,
            head_width: 8,
        }
    }

    #[test]
    fn zero_output_layer_gives_centroid() {
        let dec = decoder(7, 3);
        let mut e = ExpertHead::new(&small_cfg(), 5, 7, 0);
        e.zero_output_layer();
        let p = expert_forward(&e, &dec, &[0.3, -1.0, 2.0, 0.0, 0.5]).unwrap();
        let centroid = (0..7).map(|i| dec.center(i)).sum::<Vector3<f64>>() / 7.0;
        assert!((p - centroid).norm() < 1e-12);
        assert!(expert_forward(&e, &dec, &[0.0; 4]).is_err());
        assert!(e.forward(&decoder(6, 3), &Array2::zeros((1, 5)).view()).is_err());
    }

    #[test]
    fn prior_initialization_targets_region() {
        let dec = decoder(20, 5);
        let mut e = ExpertHead::new(&small_cfg(), 5, 20, 0);
        e.zero_output_layer();
        let target = dec.center(3);
        e.init_prior(&dec, &target, 0.5);
        let p = expert_forward(&e, &dec, &[0.0; 5]).unwrap();
        assert!((p - target).norm() < 1.0);
    }

    #[test]
    fn batched_matches_single() {
        let dec = decoder(9, 6);
        let e = ExpertHead::new(&small_cfg(), 5, 9, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Array2::from_shape_fn((17, 5), |_| rng.random_range(-1.0..1.0));
        let y = e.forward(&dec, &x.view()).unwrap();
        for i in 0..17 {
            let p = expert_forward(&e, &dec, x.row(i).as_slice().unwrap()).unwrap();
            for j in 0..3 {
                assert!((p[j] - y[(i, j)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn param_bytes_are_exact() {
        let cfg = small_cfg();
        let e = ExpertHead::new(&cfg, 5, 9, 1);
        let mut manual = 0;
        e.visit("", &mut |_, shape, _| manual += shape.iter().product::<usize>() * 4);
        assert_eq!(e.param_bytes(4), manual);
        assert_eq!(cfg.param_count(5, 9), e.num_params());
    }

    #[test]
    fn reprojection_gradient_matches_finite_differences() {
        let k = CameraIntrinsics::centered(100.0, 128, 128).unwrap();
        let cfg = ReprojLossConfig::default();
        for trial in 0..5u64 {
            let dec = PositionDecoder::new(&rand_points(6, trial + 10, 1.0)).unwrap();
            let mut e = ExpertHead::new(&small_cfg(), 4, 6, trial);
            let mean = (0..6).map(|i| dec.center(i)).sum::<Vector3<f64>>() / 6.0;
            e.init_prior(&dec, &mean, 1.0);
            let pose = RigidPose::look_at(&Vector3::new(0.0, -6.0, 0.5), &mean, &Vector3::z()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let x = Array2::from_shape_fn((8, 4), |_| rng.random_range(-1.0..1.0));
            let pixels: Vec<Vector2<f64>> = (0..8)
                .map(|_| Vector2::new(rng.random_range(20.0..100.0), rng.random_range(20.0..100.0)))
                .collect();
            let clamp = 30.0;
            let loss = |e: &ExpertHead| -> f64 {
                let y = e.forward(&dec, &x.view()).unwrap();
                (0..8)
                    .map(|i| {
                        let p = Vector3::new(y[(i, 0)], y[(i, 1)], y[(i, 2)]);
                        point_loss(&p, &pixels[i], &pose, &k, clamp, &cfg).value
                    })
                    .sum()
            };
            let (y, cache) = e.forward_cached(&dec, &x.view()).unwrap();
            let mut dpos = Array2::zeros((8, 3));
            for i in 0..8 {
                let p = Vector3::new(y[(i, 0)], y[(i, 1)], y[(i, 2)]);
                let pl = point_loss(&p, &pixels[i], &pose, &k, clamp, &cfg);
                for j in 0..3 {
                    dpos[(i, j)] = pl.grad[j];
                }
            }
            let mut grad = e.zeros_like();
            e.backward(&dec, &cache, &dpos.view(), &mut grad);
            let analytic = grad.flatten();
            let base = e.flatten();
            let mut checked = 0;
            for i in (0..base.len()).step_by(7).chain([base.len() - 1]) {
                let mut p = e.clone();
                let mut w = base.clone();
                let h = 1e-5;
                w[i] += h;
                p.load_flat(&w);
                let lp = loss(&p);
                w[i] -= 2.0 * h;
                p.load_flat(&w);
                let fd = (lp - loss(&p)) / (2.0 * h);
                let a = analytic[i];
                // Below this magnitude central differences are dominated by roundoff.
                if fd.abs().max(a.abs()) < 1e-4 {
                    continue;
                }
                assert!((fd - a).abs() <= 1e-4 * fd.abs().max(a.abs()), "trial {trial} param {i}: {fd} vs {a}");
                checked += 1;
            }
            assert!(checked > 20);
        }
    }

    #[test]
    fn bank_counts_activations() {
        let dec = decoder(4, 0);
        let bank = ExpertBank::new(
            (0..3).map(|i| ExpertHead::new(&small_cfg(), 5, 4, i)).collect(),
            dec,
        );
        let x = Array2::zeros((10, 5));
        bank.predict(1, &x.view()).unwrap();
        bank.predict(1, &x.view()).unwrap();
        bank.predict(2, &x.view()).unwrap();
        assert_eq!(bank.evaluation_counts(), vec![0, 2, 1]);
        assert!(bank.predict(3, &x.view()).is_err());
        bank.reset_counters();
        assert_eq!(bank.evaluation_counts(), vec![0, 0, 0]);
    }
}

//! Feed-forward single-view splat reconstruction: learned feature
//! upsampling, bilinear anchor interpolation, a per-pixel Gaussian head and
//! its training against the input image.

use std::time::Instant;

use nalgebra::Vector3;
use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::experts::ExpertBank;
use crate::features::{image_embedding, Encoder, FeatureMap};
use crate::gating::{select_expert_infer, Router};
use crate::geometry::{CameraIntrinsics, RigidPose};
use crate::nn::{join, AdamW, AdamWConfig, Linear, Mlp, MlpCache, OneCycle, Params};
use crate::splat::{
    photometric_loss_grad, psnr, rasterize, rasterize_backward, rasterize_cached, ssim, GaussianSplat, RasterConfig,
    SplatGrad,
};
use crate::trainer::{LogRow, TrainLog};

/// Raw head outputs per pixel: offset(3) log-scale(3) quaternion(4)
/// opacity(1) color(3).
pub const HEAD_OUTPUTS: usize = 14;
pub const MIN_SCALE: f64 = 1e-4;
pub const MAX_SCALE: f64 = 10.0;
/// Scales stay within `[e^lo, e^hi]` pixel footprints; raw 0 maps to one
/// footprint.
const SCALE_LO: f64 = -3.0;
const SCALE_HI: f64 = 0.7;

fn rel_log_scale(raw: f64) -> (f64, f64) {
    let p = -SCALE_LO / (SCALE_HI - SCALE_LO);
    let s = 1.0 / (1.0 + (-(raw + (p / (1.0 - p)).ln())).exp());
    (SCALE_LO + (SCALE_HI - SCALE_LO) * s, (SCALE_HI - SCALE_LO) * s * (1.0 - s))
}

/// Bilinear transposed-convolution kernel for integer upsampling.
fn bilinear_kernel(factor: usize) -> Array2<f64> {
    let size = kernel_size(factor);
    let center = if size % 2 == 1 {
        factor as f64 - 1.0
    } else {
        factor as f64 - 0.5
    };
    Array2::from_shape_fn((size, size), |(i, j)| {
        (1.0 - (i as f64 - center).abs() / factor as f64) * (1.0 - (j as f64 - center).abs() / factor as f64)
    })
}

fn kernel_size(factor: usize) -> usize {
    2 * factor - factor % 2
}

fn kernel_pad(factor: usize) -> usize {
    (factor - factor % 2) / 2
}

/// 1×1 projection to `channels` followed by a depthwise transposed
/// convolution (stride = factor) initialized to bilinear interpolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Upsampler {
    pub proj: Linear,
    /// `channels x k x k`
    pub kernel: Array3<f64>,
    pub bias: Array1<f64>,
    pub factor: usize,
}

pub struct UpsampleCache {
    input: Array2<f64>,
    projected: Array3<f64>,
}

impl Upsampler {
    pub fn new<R: Rng>(d: usize, channels: usize, factor: usize, rng: &mut R) -> Self {
        assert!(factor >= 1, "upsampling factor must be positive");
        let k = bilinear_kernel(factor);
        let mut proj = Linear::new(d, channels, rng);
        proj.weight *= 0.5;
        Self {
            proj,
            kernel: Array3::from_shape_fn((channels, k.nrows(), k.ncols()), |(_, i, j)| k[(i, j)]),
            bias: Array1::zeros(channels),
            factor,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            proj: Linear::zeros(self.proj.inputs(), self.proj.outputs()),
            kernel: Array3::zeros(self.kernel.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
            factor: self.factor,
        }
    }

    pub fn channels(&self) -> usize {
        self.bias.len()
    }

    pub fn forward(&self, fm: &FeatureMap) -> Result<(Array3<f64>, UpsampleCache)> {
        if fm.dim() != self.proj.inputs() {
            return Err(Error::DimensionMismatch {
                context: "upsampler input",
                expected: self.proj.inputs(),
                got: fm.dim(),
            });
        }
        let (h, w, c) = (fm.rows(), fm.cols(), self.channels());
        let input = fm.flat().to_owned();
        let projected = self
            .proj
            .forward(&input.view())
            .into_shape_with_order((h, w, c))
            .expect("row-major cells");
        let f = self.factor;
        let (ks, pad) = (kernel_size(f), kernel_pad(f) as isize);
        let (oh, ow) = (h * f, w * f);
        let mut out = Array3::zeros((oh, ow, c));
        for ((_, _, ch), v) in out.indexed_iter_mut() {
            *v = self.bias[ch];
        }
        for r in 0..h {
            for q in 0..w {
                for i in 0..ks {
                    let y = (r * f + i) as isize - pad;
                    if y < 0 || y >= oh as isize {
                        continue;
                    }
                    for j in 0..ks {
                        let x = (q * f + j) as isize - pad;
                        if x < 0 || x >= ow as isize {
                            continue;
                        }
                        for ch in 0..c {
                            out[(y as usize, x as usize, ch)] += projected[(r, q, ch)] * self.kernel[(ch, i, j)];
                        }
                    }
                }
            }
        }
        Ok((out, UpsampleCache { input, projected }))
    }

    /// Accumulates parameter gradients from `d_out` (`H x W x C`).
    pub fn backward(&self, cache: &UpsampleCache, d_out: &ArrayView3<f64>, grad: &mut Upsampler) {
        let (h, w, c) = cache.projected.dim();
        let f = self.factor;
        let (ks, pad) = (kernel_size(f), kernel_pad(f) as isize);
        let (oh, ow) = (h * f, w * f);
        grad.bias += &d_out.sum_axis(Axis(0)).sum_axis(Axis(0));
        let mut dproj = Array3::zeros((h, w, c));
        for r in 0..h {
            for q in 0..w {
                for i in 0..ks {
                    let y = (r * f + i) as isize - pad;
                    if y < 0 || y >= oh as isize {
                        continue;
                    }
                    for j in 0..ks {
                        let x = (q * f + j) as isize - pad;
                        if x < 0 || x >= ow as isize {
                            continue;
                        }
                        for ch in 0..c {
                            let g = d_out[(y as usize, x as usize, ch)];
                            dproj[(r, q, ch)] += g * self.kernel[(ch, i, j)];
                            grad.kernel[(ch, i, j)] += g * cache.projected[(r, q, ch)];
                        }
                    }
                }
            }
        }
        let dproj = dproj.into_shape_with_order((h * w, c)).expect("contiguous");
        self.proj.backward_params(&cache.input.view(), &dproj.view(), &mut grad.proj);
    }
}

impl Params for Upsampler {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        self.proj.visit(&join(prefix, "proj"), f);
        f(join(prefix, "kernel"), self.kernel.shape(), self.kernel.as_slice().expect("contiguous"));
        f(join(prefix, "bias"), self.bias.shape(), self.bias.as_slice().expect("contiguous"));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
        f(join(prefix, "kernel"), self.kernel.as_slice_mut().expect("contiguous"));
        f(join(prefix, "bias"), self.bias.as_slice_mut().expect("contiguous"));
    }
}

/// Bilinear sample of an `h x w x 3` point map at continuous cell
/// coordinates (`u` along columns, `v` along rows; cell centers at
/// integers), clamped at the border.
pub fn bilinear_sample(points: &ArrayView3<f64>, u: f64, v: f64) -> [f64; 3] {
    let (h, w, _) = points.dim();
    let u = u.clamp(0.0, (w - 1) as f64);
    let v = v.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = (u - x0 as f64, v - y0 as f64);
    std::array::from_fn(|c| {
        let top = points[(y0, x0, c)] * (1.0 - tx) + points[(y0, x1, c)] * tx;
        let bottom = points[(y1, x0, c)] * (1.0 - tx) + points[(y1, x1, c)] * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

/// Upsamples a cell point map by `factor` so that pixel centers sample the
/// map at their continuous cell position.
pub fn upsample_points(points: &ArrayView3<f64>, factor: usize) -> Result<Array3<f64>> {
    let (h, w, c) = points.dim();
    if c != 3 {
        return Err(Error::DimensionMismatch {
            context: "point map channels",
            expected: 3,
            got: c,
        });
    }
    if h == 0 || w == 0 || factor == 0 {
        return Err(Error::Empty("point map"));
    }
    let f = factor as f64;
    let mut out = Array3::zeros((h * factor, w * factor, 3));
    for y in 0..h * factor {
        let v = (y as f64 + 0.5) / f - 0.5;
        for x in 0..w * factor {
            let u = (x as f64 + 0.5) / f - 0.5;
            let p = bilinear_sample(points, u, v);
            for ch in 0..3 {
                out[(y, x, ch)] = p[ch];
            }
        }
    }
    Ok(out)
}

/// Upsampled features next to interpolated anchors, `H x W x (C + 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrid {
    pub data: Array3<f64>,
    pub channels: usize,
}

impl DenseGrid {
    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn features(&self) -> ArrayView3<'_, f64> {
        self.data.slice(s![.., .., ..self.channels])
    }

    pub fn anchors(&self) -> ArrayView3<'_, f64> {
        self.data.slice(s![.., .., self.channels..])
    }

    pub fn anchor(&self, y: usize, x: usize) -> Vector3<f64> {
        let c = self.channels;
        Vector3::new(self.data[(y, x, c)], self.data[(y, x, c + 1)], self.data[(y, x, c + 2)])
    }
}

/// `coords` holds one predicted point per feature cell, row-major
/// (`cells x 3`).
pub fn build_dense_grid(
    fm: &FeatureMap,
    coords: &ArrayView2<f64>,
    upsampler: &Upsampler,
) -> Result<(DenseGrid, UpsampleCache)> {
    if coords.nrows() != fm.cells() || coords.ncols() != 3 {
        return Err(Error::DimensionMismatch {
            context: "point map cells",
            expected: fm.cells(),
            got: coords.nrows(),
        });
    }
    let points = coords
        .to_owned()
        .into_shape_with_order((fm.rows(), fm.cols(), 3))
        .expect("row-major cells");
    let anchors = upsample_points(&points.view(), upsampler.factor)?;
    let (feats, cache) = upsampler.forward(fm)?;
    let c = feats.shape()[2];
    let data = ndarray::concatenate(Axis(2), &[feats.view(), anchors.view()])
        .expect("same spatial size")
        .as_standard_layout()
        .into_owned();
    Ok((DenseGrid { data, channels: c }, cache))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub channels: usize,
    pub hidden: usize,
    /// Allow a learned offset from the anchors.
    pub offset: bool,
    /// Offset bound in units of one pixel's world footprint.
    pub offset_cells: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            hidden: 64,
            offset: true,
            offset_cells: 1.0,
        }
    }
}

/// Trainable part of the render head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderNet {
    pub upsampler: Upsampler,
    pub mlp: Mlp,
}

impl RenderNet {
    pub fn zeros_like(&self) -> Self {
        Self {
            upsampler: self.upsampler.zeros_like(),
            mlp: self.mlp.zeros_like(),
        }
    }
}

impl Params for RenderNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        self.upsampler.visit(&join(prefix, "upsampler"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        self.upsampler.visit_mut(&join(prefix, "upsampler"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderHead {
    pub net: RenderNet,
    /// Anchor normalization `[cx, cy, cz, scale]`, fixed after init.
    pub normalizer: Array1<f64>,
    pub config: HeadConfig,
}

impl Params for RenderHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        self.net.visit(prefix, f);
        f(join(prefix, "normalizer"), self.normalizer.shape(), self.normalizer.as_slice().expect("contiguous"));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        self.net.visit_mut(prefix, f);
        f(join(prefix, "normalizer"), self.normalizer.as_slice_mut().expect("contiguous"));
    }
}

pub struct HeadCache {
    mlp: MlpCache,
    raw: Array2<f64>,
    footprint: Vec<f64>,
    channels: usize,
}

impl RenderHead {
    pub fn new(cfg: &HeadConfig, d: usize, factor: usize, center: Vector3<f64>, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let upsampler = Upsampler::new(d, cfg.channels, factor, &mut rng);
        let mut mlp = Mlp::new(&[cfg.channels + 3, cfg.hidden, cfg.hidden, HEAD_OUTPUTS], &mut rng);
        let last = mlp.layers.last_mut().expect("non-empty");
        last.weight *= 0.1;
        // Start mostly opaque.
        last.bias[10] = 2.0;
        Self {
            net: RenderNet { upsampler, mlp },
            normalizer: Array1::from(vec![center.x, center.y, center.z, scale.max(1e-6)]),
            config: *cfg,
        }
    }

    pub fn factor(&self) -> usize {
        self.net.upsampler.factor
    }

    fn mlp_input(&self, grid: &DenseGrid) -> Array2<f64> {
        let (h, w) = (grid.height(), grid.width());
        let c = grid.channels;
        let mut x = grid.data.clone().into_shape_with_order((h * w, c + 3)).expect("contiguous");
        let n = &self.normalizer;
        for mut row in x.rows_mut() {
            for a in 0..3 {
                row[c + a] = (row[c + a] - n[a]) / n[3];
            }
        }
        x
    }

    /// One splat per grid pixel (row-major). `pose`/`k` describe the view
    /// the grid was built from; they set each pixel's world footprint.
    pub fn forward(
        &self,
        grid: &DenseGrid,
        pose: &RigidPose,
        k: &CameraIntrinsics,
    ) -> Result<(Vec<GaussianSplat>, HeadCache)> {
        if grid.channels != self.net.upsampler.channels() {
            return Err(Error::DimensionMismatch {
                context: "dense grid channels",
                expected: self.net.upsampler.channels(),
                got: grid.channels,
            });
        }
        let x = self.mlp_input(grid);
        let (raw, mlp) = self.net.mlp.forward_cached(&x.view());
        let (h, w) = (grid.height(), grid.width());
        let mut splats = Vec::with_capacity(h * w);
        let mut footprint = Vec::with_capacity(h * w);
        let focal = k.fx.max(k.fy);
        for y in 0..h {
            for xi in 0..w {
                let r = raw.row(y * w + xi);
                let anchor = grid.anchor(y, xi);
                let depth = pose.transform_point(&anchor).z.abs();
                let fp = (depth / focal).clamp(MIN_SCALE, MAX_SCALE);
                footprint.push(fp);
                let bound = if self.config.offset {
                    fp * self.config.offset_cells
                } else {
                    0.0
                };
                let center = anchor + Vector3::new(r[0].tanh(), r[1].tanh(), r[2].tanh()) * bound;
                let log_scale = Vector3::from_fn(|a, _| {
                    (fp.ln() + rel_log_scale(r[3 + a]).0).clamp(MIN_SCALE.ln(), MAX_SCALE.ln())
                });
                let q = [r[6] + 1.0, r[7], r[8], r[9]];
                let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                let rotation = if qn > 1e-12 {
                    q.map(|v| v / qn)
                } else {
                    [1.0, 0.0, 0.0, 0.0]
                };
                splats.push(GaussianSplat {
                    center,
                    log_scale,
                    rotation,
                    opacity: sigmoid(r[10]),
                    color: [sigmoid(r[11]), sigmoid(r[12]), sigmoid(r[13])],
                });
            }
        }
        Ok((
            splats,
            HeadCache {
                mlp,
                raw,
                footprint,
                channels: grid.channels,
            },
        ))
    }

    /// Backpropagates splat gradients into the MLP; returns the gradient
    /// with respect to the upsampled feature channels (`H x W x C`).
    pub fn backward(
        &self,
        cache: &HeadCache,
        splats: &[GaussianSplat],
        d_splats: &[SplatGrad],
        height: usize,
        width: usize,
        grad: &mut RenderNet,
    ) -> Array3<f64> {
        let n = splats.len();
        let mut draw = Array2::zeros((n, HEAD_OUTPUTS));
        for i in 0..n {
            let r = cache.raw.row(i);
            let g = &d_splats[i];
            let s = &splats[i];
            let fp = cache.footprint[i];
            if self.config.offset {
                let bound = fp * self.config.offset_cells;
                for a in 0..3 {
                    let t = r[a].tanh();
                    draw[(i, a)] = g.center[a] * bound * (1.0 - t * t);
                }
            }
            for a in 0..3 {
                let (rel, drel) = rel_log_scale(r[3 + a]);
                let v = fp.ln() + rel;
                if v > MIN_SCALE.ln() && v < MAX_SCALE.ln() {
                    draw[(i, 3 + a)] = g.log_scale[a] * drel;
                }
            }
            let q = [r[6] + 1.0, r[7], r[8], r[9]];
            let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if qn > 1e-12 {
                let qh = s.rotation;
                let proj: f64 = (0..4).map(|a| qh[a] * g.rotation[a]).sum();
                for a in 0..4 {
                    draw[(i, 6 + a)] = (g.rotation[a] - qh[a] * proj) / qn;
                }
            }
            draw[(i, 10)] = g.opacity * s.opacity * (1.0 - s.opacity);
            for a in 0..3 {
                draw[(i, 11 + a)] = g.color[a] * s.color[a] * (1.0 - s.color[a]);
            }
        }
        let dx = self.net.mlp.backward(&cache.mlp, &draw.view(), &mut grad.mlp);
        dx.slice(s![.., ..cache.channels])
            .to_owned()
            .into_shape_with_order((height, width, cache.channels))
            .expect("contiguous")
    }
}

/// Logistic squashing kept strictly inside (0, 1).
fn sigmoid(x: f64) -> f64 {
    (1.0 / (1.0 + (-x).exp())).clamp(1e-9, 1.0 - 1e-9)
}

/// Full forward pass for one view: grid, splats, render.
pub fn gaussian_head(
    head: &RenderHead,
    fm: &FeatureMap,
    coords: &ArrayView2<f64>,
    pose: &RigidPose,
    k: &CameraIntrinsics,
) -> Result<Vec<GaussianSplat>> {
    let (grid, _) = build_dense_grid(fm, coords, &head.net.upsampler)?;
    Ok(head.forward(&grid, pose, k)?.0)
}

/// Loss and gradient of the head parameters for one view.
pub fn render_loss_and_grad(
    head: &RenderHead,
    fm: &FeatureMap,
    coords: &ArrayView2<f64>,
    pose: &RigidPose,
    k: &CameraIntrinsics,
    target: &ArrayView3<f64>,
    raster: &RasterConfig,
    lambda: f64,
) -> Result<(f64, RenderNet)> {
    let (grid, up_cache) = build_dense_grid(fm, coords, &head.net.upsampler)?;
    let (h, w) = (grid.height(), grid.width());
    if target.shape() != [h, w, 3] || k.height != h || k.width != w {
        return Err(Error::invalid(format!(
            "render grid {h}x{w} does not match target {:?} / intrinsics {}x{}",
            target.shape(),
            k.height,
            k.width
        )));
    }
    let (splats, head_cache) = head.forward(&grid, pose, k)?;
    let (image, rcache) = rasterize_cached(&splats, pose, k, raster);
    let (loss, d_image) = photometric_loss_grad(&image.view(), target, lambda)?;
    let d_splats = rasterize_backward(&splats, &rcache, &d_image.view(), raster);
    let mut grad = head.net.zeros_like();
    let d_feat = head.backward(&head_cache, &splats, &d_splats, h, w, &mut grad);
    head.net.upsampler.backward(&up_cache, &d_feat.view(), &mut grad.upsampler);
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub head: HeadConfig,
    pub raster: RasterConfig,
    pub lambda: f64,
    pub epochs: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    /// Standard deviation (meters) of Gaussian noise added to the frozen
    /// coordinates; 0 for clean training.
    pub coord_noise: f64,
    pub seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            head: HeadConfig::default(),
            raster: RasterConfig::default(),
            lambda: 0.2,
            epochs: 6,
            lr_min: 1e-4,
            lr_max: 3e-3,
            coord_noise: 0.0,
            seed: 0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.head.channels == 0 || self.head.hidden == 0 || self.epochs == 0 {
            return Err(Error::Config("render head sizes and epochs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("render.lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.lr_min > 0.0 && self.lr_max >= self.lr_min) {
            return Err(Error::Config("render learning rates must satisfy 0 < lr_min <= lr_max".into()));
        }
        if !(self.coord_noise >= 0.0) {
            return Err(Error::Config("render.coord_noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Frozen-stack inputs of one view.
pub struct RenderInput {
    pub frame: usize,
    pub features: FeatureMap,
    pub expert: usize,
    /// `cells x 3`
    pub coords: Array2<f64>,
}

/// Routes each view to one expert and predicts its point map. Expert
/// counters are not touched.
pub fn prepare_render_inputs(
    dataset: &Dataset,
    frames: &[usize],
    encoder: &Encoder,
    router: &Router,
    bank: &ExpertBank,
    coord_noise: f64,
    seed: u64,
) -> Result<Vec<RenderInput>> {
    let features = crate::trainer::encode_frames(dataset, frames, encoder)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4e4f_4953);
    let normal = Normal::new(0.0, coord_noise.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    frames
        .iter()
        .zip(features)
        .map(|(&frame, fm)| {
            let emb = image_embedding(&fm)?;
            let expert = select_expert_infer(router, &emb.view())?;
            let mut coords = bank.experts[expert].forward(&bank.decoder, &fm.flat())?;
            if coord_noise > 0.0 {
                coords.mapv_inplace(|v| v + normal.sample(&mut rng));
            }
            Ok(RenderInput {
                frame,
                features: fm,
                expert,
                coords,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderStageReport {
    pub final_loss: f64,
    pub steps: usize,
}

/// Trains a fresh head on `inputs`; the localization stack is only read.
pub fn train_render_head(
    dataset: &Dataset,
    inputs: &[RenderInput],
    cfg: &RenderConfig,
    optimizer: AdamWConfig,
    log: &mut TrainLog,
) -> Result<(RenderHead, RenderStageReport)> {
    cfg.validate()?;
    let first = inputs.first().ok_or(Error::Empty("render training views"))?;
    let factor = {
        let f = &dataset.frames[first.frame];
        if f.height() % first.features.rows() != 0 {
            return Err(Error::invalid("image height is not a multiple of the feature grid"));
        }
        f.height() / first.features.rows()
    };
    let (center, scale) = anchor_statistics(inputs);
    let mut head = RenderHead::new(&cfg.head, first.features.dim(), factor, center, scale, cfg.seed);
    let total = inputs.len() * cfg.epochs;
    let sched = OneCycle {
        floor: cfg.lr_min,
        peak: cfg.lr_max,
        warmup: 0.25,
        total_steps: total,
    };
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: 0.0,
            ..optimizer
        },
        head.net.num_params(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5245_4e44);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut step = 0;
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &i in &order {
            let inp = &inputs[i];
            let f = &dataset.frames[inp.frame];
            let lr = sched.lr(step);
            let (loss, grad) = render_loss_and_grad(
                &head,
                &inp.features,
                &inp.coords.view(),
                &f.pose,
                &f.intrinsics,
                &f.image.view(),
                &cfg.raster,
                cfg.lambda,
            )?;
            if !loss.is_finite() || !grad.all_finite() {
                return Err(Error::Divergence(format!("render loss {loss} at step {step}")));
            }
            opt.step(&mut head.net, &grad, lr);
            epoch_loss += loss / inputs.len() as f64;
            log.rows.push(LogRow {
                stage: "render".into(),
                expert: Some(inp.expert),
                step,
                loss,
                lr,
                clamp: 0.0,
                tau: None,
                usage: Vec::new(),
                bias: Vec::new(),
            });
            step += 1;
        }
        final_loss = epoch_loss;
    }
    Ok((head, RenderStageReport { final_loss, steps: step }))
}

/// Mean anchor and RMS spread over every cell of every view.
fn anchor_statistics(inputs: &[RenderInput]) -> (Vector3<f64>, f64) {
    let mut sum = Vector3::zeros();
    let mut n = 0.0f64;
    for inp in inputs {
        for r in inp.coords.rows() {
            sum += Vector3::new(r[0], r[1], r[2]);
            n += 1.0;
        }
    }
    let mean = sum / n.max(1.0);
    let mut ss = 0.0;
    for inp in inputs {
        for r in inp.coords.rows() {
            ss += (Vector3::new(r[0], r[1], r[2]) - mean).norm_squared();
        }
    }
    (mean, (ss / n.max(1.0)).sqrt().max(1e-3))
}

pub const RENDER_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderViewMetrics {
    pub frame: usize,
    pub split: String,
    pub expert: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderReport {
    pub schema_version: u32,
    pub views: Vec<RenderViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_seconds: f64,
}

impl RenderReport {
    /// Timing fields are excluded so identical runs serialize identically.
    pub fn to_json(&self, include_timing: bool) -> Result<String> {
        let mut r = self.clone();
        if !include_timing {
            r.mean_seconds = 0.0;
            for v in &mut r.views {
                v.seconds = 0.0;
            }
        }
        Ok(serde_json::to_string_pretty(&r)?)
    }
}

/// Renders each input at its own view and scores it against the image.
pub fn evaluate_rendering(dataset: &Dataset, head: &RenderHead, inputs: &[RenderInput], raster: &RasterConfig) -> Result<RenderReport> {
    if inputs.is_empty() {
        return Err(Error::Empty("render evaluation views"));
    }
    let mut views = Vec::with_capacity(inputs.len());
    for inp in inputs {
        let f = &dataset.frames[inp.frame];
        let start = Instant::now();
        let splats = gaussian_head(head, &inp.features, &inp.coords.view(), &f.pose, &f.intrinsics)?;
        let image = rasterize(&splats, &f.pose, &f.intrinsics, raster);
        let seconds = start.elapsed().as_secs_f64();
        views.push(RenderViewMetrics {
            frame: inp.frame,
            split: f.split.as_str().to_string(),
            expert: inp.expert,
            psnr: psnr(&image.view(), &f.image.view(), 1.0)?,
            ssim: ssim(&image.view(), &f.image.view(), 1.0)?,
            seconds,
        });
    }
    let n = views.len() as f64;
    Ok(RenderReport {
        schema_version: RENDER_SCHEMA_VERSION,
        mean_psnr: views.iter().map(|v| v.psnr).sum::<f64>() / n,
        mean_ssim: views.iter().map(|v| v.ssim).sum::<f64>() / n,
        mean_seconds: views.iter().map(|v| v.seconds).sum::<f64>() / n,
        views,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat::photometric_loss;

    fn rand_fm(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> FeatureMap {
        FeatureMap {
            descriptors: Array3::from_shape_fn((h, w, d), |_| rng.random_range(-1.0..1.0)),
            stride: 4,
        }
    }

    fn rand_coords(rng: &mut ChaCha8Rng, cells: usize) -> Array2<f64> {
        Array2::from_shape_fn((cells, 3), |(_, c)| {
            if c == 2 {
                rng.random_range(2.5..3.5)
            } else {
                rng.random_range(-0.4..0.4)
            }
        })
    }

    #[test]
    fn constant_points_give_constant_anchors() {
        let pts = Array3::from_shape_fn((3, 4, 3), |(_, _, c)| c as f64 + 1.5);
        let up = upsample_points(&pts.view(), 4).unwrap();
        assert_eq!(up.dim(), (12, 16, 3));
        for ((_, _, c), v) in up.indexed_iter() {
            assert!((v - (c as f64 + 1.5)).abs() < 1e-15);
        }
    }

    #[test]
    fn factor_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts = Array3::from_shape_fn((5, 6, 3), |_| rng.random_range(-5.0..5.0));
        assert_eq!(upsample_points(&pts.view(), 1).unwrap(), pts);
    }

    #[test]
    fn interpolation_exact_at_cell_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = Array3::from_shape_fn((4, 5, 3), |_| rng.random_range(-5.0..5.0));
        for r in 0..4 {
            for c in 0..5 {
                let v = bilinear_sample(&pts.view(), c as f64, r as f64);
                for ch in 0..3 {
                    assert!((v[ch] - pts[(r, c, ch)]).abs() < 1e-6);
                }
            }
        }
        // odd factor puts a pixel center exactly on each cell center
        let up = upsample_points(&pts.view(), 3).unwrap();
        for r in 0..4 {
            for c in 0..5 {
                for ch in 0..3 {
                    assert!((up[(3 * r + 1, 3 * c + 1, ch)] - pts[(r, c, ch)]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn bilinear_kernel_reproduces_interior_interpolation() {
        // With identity projection and a linear ramp, the transposed conv
        // equals bilinear interpolation away from the border.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut up = Upsampler::new(1, 1, 4, &mut rng);
        up.proj.weight.fill(1.0);
        let fm = FeatureMap {
            descriptors: Array3::from_shape_fn((4, 4, 1), |(r, c, _)| r as f64 * 2.0 + c as f64),
            stride: 4,
        };
        let (out, _) = up.forward(&fm).unwrap();
        for y in 4..12 {
            for x in 4..12 {
                let u = (x as f64 + 0.5) / 4.0 - 0.5;
                let v = (y as f64 + 0.5) / 4.0 - 0.5;
                assert!((out[(y, x, 0)] - (2.0 * v + u)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grid_dimension_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fm = rand_fm(&mut rng, 3, 3, 4);
        let up = Upsampler::new(4, 2, 4, &mut rng);
        let coords = Array2::zeros((8, 3));
        assert!(build_dense_grid(&fm, &coords.view(), &up).is_err());
        let wrong = Upsampler::new(5, 2, 4, &mut rng);
        assert!(build_dense_grid(&fm, &Array2::zeros((9, 3)).view(), &wrong).is_err());
    }

    #[test]
    fn head_outputs_respect_ranges_and_offset_bound() {
        let k = CameraIntrinsics::centered(20.0, 16, 16).unwrap();
        let pose = RigidPose::identity();
        for seed in 0..6 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fm = rand_fm(&mut rng, 4, 4, 6);
            let coords = rand_coords(&mut rng, 16);
            let cfg = HeadConfig {
                channels: 4,
                hidden: 8,
                offset: true,
                offset_cells: rng.random_range(0.5..3.0),
            };
            let mut head = RenderHead::new(&cfg, 6, 4, Vector3::new(0.0, 0.0, 3.0), 1.0, seed);
            // Large random weights to exercise the squashing.
            head.net.mlp.visit_mut("", &mut |_, d| d.iter_mut().for_each(|v| *v = rng.random_range(-5.0..5.0)));
            let (grid, _) = build_dense_grid(&fm, &coords.view(), &head.net.upsampler).unwrap();
            let (splats, _) = head.forward(&grid, &pose, &k).unwrap();
            assert_eq!(splats.len(), 16 * 16);
            for (i, s) in splats.iter().enumerate() {
                s.validate().unwrap();
                assert!(s.opacity > 0.0 && s.opacity < 1.0);
                assert!(s.color.iter().all(|c| *c > 0.0 && *c < 1.0));
                assert!(s.log_scale.iter().all(|l| *l >= MIN_SCALE.ln() - 1e-12 && *l <= MAX_SCALE.ln() + 1e-12));
                let anchor = grid.anchor(i / 16, i % 16);
                let bound = (anchor.z / 20.0) * cfg.offset_cells;
                assert!((s.center - anchor).amax() <= bound * (1.0 + 1e-12));
            }
            head.config.offset = false;
            let (fixed, _) = head.forward(&grid, &pose, &k).unwrap();
            for (i, s) in fixed.iter().enumerate() {
                assert_eq!(s.center, grid.anchor(i / 16, i % 16));
            }
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let k = CameraIntrinsics::centered(12.0, 8, 8).unwrap();
        let pose = RigidPose::identity();
        let raster = RasterConfig {
            background: [0.2, 0.3, 0.4],
            cutoff_sigma: 30.0,
            ..Default::default()
        };
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
            let fm = rand_fm(&mut rng, 2, 2, 3);
            let coords = rand_coords(&mut rng, 4);
            let target = Array3::from_shape_fn((8, 8, 3), |_| rng.random_range(0.0..1.0));
            let cfg = HeadConfig {
                channels: 3,
                hidden: 6,
                offset: true,
                offset_cells: 1.0,
            };
            let mut head = RenderHead::new(&cfg, 3, 4, Vector3::new(0.0, 0.0, 3.0), 0.5, seed);
            head.net
                .visit_mut("", &mut |_, d| d.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2)));
            let loss = |h: &RenderHead| {
                let splats = gaussian_head(h, &fm, &coords.view(), &pose, &k).unwrap();
                let img = rasterize(&splats, &pose, &k, &raster);
                photometric_loss(&img.view(), &target.view(), 0.2).unwrap()
            };
            let (l0, grad) =
                render_loss_and_grad(&head, &fm, &coords.view(), &pose, &k, &target.view(), &raster, 0.2).unwrap();
            assert!((l0 - loss(&head)).abs() < 1e-12);
            let flat = head.net.flatten();
            let g = grad.flatten();
            assert!(g.iter().any(|v| v.abs() > 1e-8));
            let h = 1e-6;
            let mut checked = 0;
            for i in (0..flat.len()).step_by(3) {
                if g[i].abs() < 1e-5 {
                    continue;
                }
                let mut p = head.clone();
                let mut v = flat.clone();
                v[i] += h;
                p.net.load_flat(&v);
                let up = loss(&p);
                v[i] -= 2.0 * h;
                p.net.load_flat(&v);
                let down = loss(&p);
                let num = (up - down) / (2.0 * h);
                let rel = (num - g[i]).abs() / num.abs().max(g[i].abs());
                assert!(rel < 1e-4, "seed {seed} param {i}: {} vs {num}", g[i]);
                checked += 1;
            }
            assert!(checked > 10);
        }
    }
}

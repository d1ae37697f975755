//! Anisotropic Gaussian splats: projection, depth-sorted alpha compositing
//! with an analytic backward pass, photometric loss, image metrics and PLY
//! interchange.

use std::io::{BufRead, BufReader, Read, Write};
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, RigidPose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSplat {
    pub center: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub color: [f64; 3],
}

impl GaussianSplat {
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_matrix(&self.rotation)
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let s = Matrix3::from_diagonal(&self.log_scale.map(|l| (2.0 * l).exp()));
        r * s * r.transpose()
    }

    pub fn validate(&self) -> Result<()> {
        let qn = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (qn - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("quaternion norm {qn} is not 1")));
        }
        if !(self.opacity >= 0.0 && self.opacity <= 1.0) {
            return Err(Error::invalid(format!("opacity {} outside [0, 1]", self.opacity)));
        }
        if !(self.center.iter().chain(self.log_scale.iter()).all(|v| v.is_finite())) {
            return Err(Error::invalid("non-finite splat geometry"));
        }
        Ok(())
    }
}

/// Gradient of a scalar with respect to every field of a [`GaussianSplat`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SplatGrad {
    pub center: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub color: [f64; 3],
}

fn quat_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RasterConfig {
    pub background: [f64; 3],
    /// Added to the 2D covariance diagonal (pixels²) so sub-pixel splats
    /// still cover a pixel.
    pub dilation: f64,
    pub near: f64,
    /// Splats contribute to pixels within this many standard deviations.
    pub cutoff_sigma: f64,
    pub max_alpha: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            dilation: 0.3,
            near: 0.01,
            cutoff_sigma: 3.0,
            max_alpha: 0.99,
        }
    }
}

// Forward-mode dual number over the 10 geometric splat parameters
// (center, log-scale, quaternion); gives an exact projection Jacobian.
const NP: usize = 10;

#[derive(Clone, Copy)]
struct Dual {
    v: f64,
    d: [f64; NP],
}

impl Dual {
    fn c(v: f64) -> Self {
        Self { v, d: [0.0; NP] }
    }

    fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; NP];
        d[i] = 1.0;
        Self { v, d }
    }

    fn chain(self, v: f64, dv: f64) -> Self {
        Self {
            v,
            d: self.d.map(|x| x * dv),
        }
    }

    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }

    fn scale(self, s: f64) -> Self {
        self.chain(self.v * s, s)
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a += b;
        }
        Dual { v: self.v + o.v, d }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        self + (-o)
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        self.scale(-1.0)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        let mut d = [0.0; NP];
        for i in 0..NP {
            d[i] = self.d[i] * o.v + self.v * o.d[i];
        }
        Dual { v: self.v * o.v, d }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.v;
        let mut d = [0.0; NP];
        for i in 0..NP {
            d[i] = (self.d[i] * o.v - self.v * o.d[i]) * inv * inv;
        }
        Dual { v: self.v * inv, d }
    }
}

/// Screen-space footprint of one splat in one view.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedSplat {
    pub mean: [f64; 2],
    /// Inverse 2D covariance `[[a, b], [b, c]]` as `(a, b, c)`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub radius: f64,
    pub visible: bool,
    /// d(mean x, mean y, a, b, c) / d(center, log-scale, quaternion).
    jac: [[f64; NP]; 5],
}

pub fn project_splat(s: &GaussianSplat, pose: &RigidPose, k: &CameraIntrinsics, cfg: &RasterConfig) -> ProjectedSplat {
    let mu = [0, 1, 2].map(|i| Dual::var(s.center[i], i));
    let sc = [0, 1, 2].map(|i| Dual::var(s.log_scale[i], 3 + i).exp());
    let [w, x, y, z] = [0, 1, 2, 3].map(|i| Dual::var(s.rotation[i], 6 + i));
    let one = Dual::c(1.0);
    let two = |a: Dual| a.scale(2.0);
    let rq = [
        [one - two(y * y + z * z), two(x * y - w * z), two(x * z + w * y)],
        [two(x * y + w * z), one - two(x * x + z * z), two(y * z - w * x)],
        [two(x * z - w * y), two(y * z + w * x), one - two(x * x + y * y)],
    ];
    let rc = &pose.rotation;
    let pc: [Dual; 3] = [0, 1, 2].map(|i| {
        (0..3).fold(Dual::c(pose.translation[i]), |acc, j| acc + mu[j].scale(rc[(i, j)]))
    });
    let invisible = ProjectedSplat {
        mean: [0.0; 2],
        conic: [0.0; 3],
        depth: pc[2].v,
        radius: 0.0,
        visible: false,
        jac: [[0.0; NP]; 5],
    };
    if !(pc[2].v > cfg.near) {
        return invisible;
    }
    // M = Rc * Rq * diag(scale); camera covariance = M Mᵀ.
    let m: [[Dual; 3]; 3] = [0, 1, 2].map(|i| {
        [0, 1, 2].map(|j| (0..3).fold(Dual::c(0.0), |acc, l| acc + rq[l][j].scale(rc[(i, l)])) * sc[j])
    });
    let iz = one / pc[2];
    let jrow = [
        [iz.scale(k.fx), Dual::c(0.0), -(pc[0] * iz * iz).scale(k.fx)],
        [Dual::c(0.0), iz.scale(k.fy), -(pc[1] * iz * iz).scale(k.fy)],
    ];
    let t: [[Dual; 3]; 2] =
        [0, 1].map(|a| [0, 1, 2].map(|j| (0..3).fold(Dual::c(0.0), |acc, i| acc + jrow[a][i] * m[i][j])));
    let dot = |u: &[Dual; 3], v: &[Dual; 3]| u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    let s00 = dot(&t[0], &t[0]) + Dual::c(cfg.dilation);
    let s01 = dot(&t[0], &t[1]);
    let s11 = dot(&t[1], &t[1]) + Dual::c(cfg.dilation);
    let det = s00 * s11 - s01 * s01;
    if !(det.v > 0.0) || !det.v.is_finite() {
        return invisible;
    }
    let outs = [
        (pc[0] * iz).scale(k.fx) + Dual::c(k.cx),
        (pc[1] * iz).scale(k.fy) + Dual::c(k.cy),
        s11 / det,
        -(s01 / det),
        s00 / det,
    ];
    let half_tr = 0.5 * (s00.v + s11.v);
    let lmax = half_tr + (0.25 * (s00.v - s11.v).powi(2) + s01.v * s01.v).sqrt();
    ProjectedSplat {
        mean: [outs[0].v, outs[1].v],
        conic: [outs[2].v, outs[3].v, outs[4].v],
        depth: pc[2].v,
        radius: cfg.cutoff_sigma * lmax.sqrt(),
        visible: outs.iter().all(|o| o.v.is_finite()),
        jac: outs.map(|o| o.d),
    }
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    splat: u32,
    alpha: f64,
    /// Transmittance before this splat.
    t: f64,
    gauss: f64,
    dx: f64,
    dy: f64,
}

/// Per-pixel compositing record needed by [`rasterize_backward`].
pub struct RasterCache {
    height: usize,
    width: usize,
    projected: Vec<ProjectedSplat>,
    offsets: Vec<usize>,
    entries: Vec<Entry>,
    final_t: Vec<f64>,
}

impl RasterCache {
    /// Number of (pixel, splat) pairs composited.
    pub fn pairs(&self) -> usize {
        self.entries.len()
    }
}

pub fn rasterize(splats: &[GaussianSplat], pose: &RigidPose, k: &CameraIntrinsics, cfg: &RasterConfig) -> Array3<f64> {
    rasterize_cached(splats, pose, k, cfg).0
}

/// Renders `k.height x k.width x 3`. Splats are composited front to back
/// in order of camera depth (index breaks ties), so the result does not
/// depend on input order.
pub fn rasterize_cached(
    splats: &[GaussianSplat],
    pose: &RigidPose,
    k: &CameraIntrinsics,
    cfg: &RasterConfig,
) -> (Array3<f64>, RasterCache) {
    let (h, w) = (k.height, k.width);
    let projected: Vec<ProjectedSplat> = splats.iter().map(|s| project_splat(s, pose, k, cfg)).collect();
    let mut order: Vec<usize> = (0..splats.len()).filter(|&i| projected[i].visible).collect();
    order.sort_by(|&a, &b| projected[a].depth.total_cmp(&projected[b].depth).then(a.cmp(&b)));

    // Two-pass counting sort into per-pixel lists, already depth ordered.
    let cut2 = cfg.cutoff_sigma * cfg.cutoff_sigma;
    let covers = |p: &ProjectedSplat, x: usize, y: usize| {
        let dx = x as f64 + 0.5 - p.mean[0];
        let dy = y as f64 + 0.5 - p.mean[1];
        let [a, b, c] = p.conic;
        a * dx * dx + 2.0 * b * dx * dy + c * dy * dy <= cut2
    };
    let bbox = |p: &ProjectedSplat| {
        let [mx, my] = p.mean;
        let x0 = (mx - p.radius).floor().max(0.0);
        let y0 = (my - p.radius).floor().max(0.0);
        let x1 = (mx + p.radius).ceil().min(w as f64 - 1.0);
        let y1 = (my + p.radius).ceil().min(h as f64 - 1.0);
        (x0 <= x1 && y0 <= y1).then(|| (x0 as usize, y0 as usize, x1 as usize, y1 as usize))
    };
    let mut counts = vec![0usize; h * w + 1];
    for &i in &order {
        let p = &projected[i];
        if let Some((x0, y0, x1, y1)) = bbox(p) {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if covers(p, x, y) {
                        counts[y * w + x + 1] += 1;
                    }
                }
            }
        }
    }
    for px in 0..h * w {
        counts[px + 1] += counts[px];
    }
    let mut cursor = counts.clone();
    let mut flat = vec![0u32; counts[h * w]];
    for &i in &order {
        let p = &projected[i];
        if let Some((x0, y0, x1, y1)) = bbox(p) {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if covers(p, x, y) {
                        flat[cursor[y * w + x]] = i as u32;
                        cursor[y * w + x] += 1;
                    }
                }
            }
        }
    }

    let mut image = Array3::zeros((h, w, 3));
    let mut offsets = Vec::with_capacity(h * w + 1);
    let mut entries = Vec::with_capacity(flat.len());
    let mut final_t = Vec::with_capacity(h * w);
    offsets.push(0);
    for y in 0..h {
        for x in 0..w {
            let mut t = 1.0;
            let mut rgb = [0.0; 3];
            for &i in &flat[counts[y * w + x]..counts[y * w + x + 1]] {
                let p = &projected[i as usize];
                let s = &splats[i as usize];
                let dx = x as f64 + 0.5 - p.mean[0];
                let dy = y as f64 + 0.5 - p.mean[1];
                let [a, b, c] = p.conic;
                let gauss = (-0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)).exp();
                let alpha = (s.opacity * gauss).min(cfg.max_alpha);
                for ch in 0..3 {
                    rgb[ch] += t * alpha * s.color[ch];
                }
                entries.push(Entry {
                    splat: i,
                    alpha,
                    t,
                    gauss,
                    dx,
                    dy,
                });
                t *= 1.0 - alpha;
            }
            for ch in 0..3 {
                image[(y, x, ch)] = rgb[ch] + t * cfg.background[ch];
            }
            final_t.push(t);
            offsets.push(entries.len());
        }
    }
    (
        image,
        RasterCache {
            height: h,
            width: w,
            projected,
            offsets,
            entries,
            final_t,
        },
    )
}

/// Backpropagates `d_image` (same shape as the render) to every splat.
pub fn rasterize_backward(
    splats: &[GaussianSplat],
    cache: &RasterCache,
    d_image: &ArrayView3<f64>,
    cfg: &RasterConfig,
) -> Vec<SplatGrad> {
    let n = splats.len();
    let mut d_color = vec![[0.0; 3]; n];
    let mut d_opacity = vec![0.0; n];
    // d(mean x, mean y, a, b, c) per splat.
    let mut d_proj = vec![[0.0; 5]; n];
    for y in 0..cache.height {
        for x in 0..cache.width {
            let px = y * cache.width + x;
            let g = [d_image[(y, x, 0)], d_image[(y, x, 1)], d_image[(y, x, 2)]];
            let dot = |c: &[f64; 3]| c[0] * g[0] + c[1] * g[1] + c[2] * g[2];
            let mut rest = cache.final_t[px] * dot(&cfg.background);
            for e in cache.entries[cache.offsets[px]..cache.offsets[px + 1]].iter().rev() {
                let i = e.splat as usize;
                let s = &splats[i];
                let cg = dot(&s.color);
                for ch in 0..3 {
                    d_color[i][ch] += e.t * e.alpha * g[ch];
                }
                let d_alpha = e.t * cg - rest / (1.0 - e.alpha);
                rest += e.t * e.alpha * cg;
                if s.opacity * e.gauss >= cfg.max_alpha {
                    continue;
                }
                d_opacity[i] += d_alpha * e.gauss;
                // alpha = o * exp(-q / 2)
                let dq = -0.5 * e.alpha * d_alpha;
                let [a, b, c] = cache.projected[i].conic;
                let dp = &mut d_proj[i];
                dp[0] -= dq * 2.0 * (a * e.dx + b * e.dy);
                dp[1] -= dq * 2.0 * (b * e.dx + c * e.dy);
                dp[2] += dq * e.dx * e.dx;
                dp[3] += dq * 2.0 * e.dx * e.dy;
                dp[4] += dq * e.dy * e.dy;
            }
        }
    }
    (0..n)
        .map(|i| {
            let mut geo = [0.0; NP];
            let jac = &cache.projected[i].jac;
            for (r, row) in jac.iter().enumerate() {
                for p in 0..NP {
                    geo[p] += row[p] * d_proj[i][r];
                }
            }
            SplatGrad {
                center: Vector3::new(geo[0], geo[1], geo[2]),
                log_scale: Vector3::new(geo[3], geo[4], geo[5]),
                rotation: [geo[6], geo[7], geo[8], geo[9]],
                opacity: d_opacity[i],
                color: d_color[i],
            }
        })
        .collect()
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable "same" Gaussian filter with zero padding. The kernel is
/// symmetric, so this is also its own adjoint.
fn blur(x: &Array2<f64>, win: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = x.dim();
    let half = (SSIM_WINDOW / 2) as isize;
    let mut tmp = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (t, wt) in win.iter().enumerate() {
                let cc = c as isize + t as isize - half;
                if cc >= 0 && (cc as usize) < w {
                    acc += wt * x[(r, cc as usize)];
                }
            }
            tmp[(r, c)] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (t, wt) in win.iter().enumerate() {
                let rr = r as isize + t as isize - half;
                if rr >= 0 && (rr as usize) < h {
                    acc += wt * tmp[(rr as usize, c)];
                }
            }
            out[(r, c)] = acc;
        }
    }
    out
}

/// Sum of the SSIM map of one channel and, optionally, its gradient with
/// respect to `x`.
fn ssim_channel(x: &ArrayView2<f64>, y: &ArrayView2<f64>, peak: f64, want_grad: bool) -> (f64, Option<Array2<f64>>) {
    let win = gaussian_window();
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let x = x.to_owned();
    let y = y.to_owned();
    let mx = blur(&x, &win);
    let my = blur(&y, &win);
    let xx = blur(&(&x * &x), &win);
    let yy = blur(&(&y * &y), &win);
    let xy = blur(&(&x * &y), &win);
    let (h, w) = x.dim();
    let mut total = 0.0;
    let mut sa = Array2::zeros((h, w));
    let mut sc = Array2::zeros((h, w));
    let mut se = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let (a, b) = (mx[(r, c)], my[(r, c)]);
            let n1 = 2.0 * a * b + c1;
            let n2 = 2.0 * (xy[(r, c)] - a * b) + c2;
            let d1 = a * a + b * b + c1;
            let d2 = (xx[(r, c)] - a * a) + (yy[(r, c)] - b * b) + c2;
            let s = n1 * n2 / (d1 * d2);
            total += s;
            if want_grad {
                sa[(r, c)] = s * (2.0 * b / n1 - 2.0 * b / n2 - 2.0 * a / d1 + 2.0 * a / d2);
                sc[(r, c)] = -s / d2;
                se[(r, c)] = 2.0 * s / n2;
            }
        }
    }
    if !want_grad {
        return (total, None);
    }
    let ga = blur(&sa, &win);
    let gc = blur(&sc, &win);
    let ge = blur(&se, &win);
    let grad = &ga + &(&gc * &x * 2.0) + &(&ge * &y);
    (total, Some(grad))
}

fn check_shapes(a: &ArrayView3<f64>, b: &ArrayView3<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!("image shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::Empty("image"));
    }
    Ok(())
}

/// Mean SSIM over pixels and channels (Gaussian 11×11 window, σ = 1.5).
pub fn ssim(a: &ArrayView3<f64>, b: &ArrayView3<f64>, peak: f64) -> Result<f64> {
    check_shapes(a, b)?;
    let ch = a.shape()[2];
    let mut total = 0.0;
    for c in 0..ch {
        total += ssim_channel(&a.index_axis(Axis(2), c), &b.index_axis(Axis(2), c), peak, false).0;
    }
    Ok(total / a.len() as f64)
}

pub fn mse(a: &ArrayView3<f64>, b: &ArrayView3<f64>) -> Result<f64> {
    check_shapes(a, b)?;
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

pub const PSNR_CAP_DB: f64 = 100.0;

pub fn psnr(render: &ArrayView3<f64>, target: &ArrayView3<f64>, peak: f64) -> Result<f64> {
    let m = mse(render, target)?;
    if m < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// `(1 − λ)·MSE + λ·(1 − SSIM)/2` on images in `[0, 1]`.
pub fn photometric_loss(render: &ArrayView3<f64>, target: &ArrayView3<f64>, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    let m = mse(render, target)?;
    let s = if lambda > 0.0 { ssim(render, target, 1.0)? } else { 1.0 };
    Ok((1.0 - lambda) * m + lambda * (1.0 - s) * 0.5)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// Loss and its gradient with respect to `render`.
pub fn photometric_loss_grad(
    render: &ArrayView3<f64>,
    target: &ArrayView3<f64>,
    lambda: f64,
) -> Result<(f64, Array3<f64>)> {
    check_lambda(lambda)?;
    check_shapes(render, target)?;
    let n = render.len() as f64;
    let diff = render - target;
    let m = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let mut grad = diff * (2.0 * (1.0 - lambda) / n);
    let mut ssim_sum = 0.0;
    if lambda > 0.0 {
        for c in 0..render.shape()[2] {
            let (s, g) = ssim_channel(&render.index_axis(Axis(2), c), &target.index_axis(Axis(2), c), 1.0, true);
            ssim_sum += s;
            let g = g.expect("gradient requested");
            let mut slot = grad.index_axis_mut(Axis(2), c);
            slot.scaled_add(-lambda * 0.5 / n, &g);
        }
    } else {
        ssim_sum = n;
    }
    let loss = (1.0 - lambda) * m + lambda * (1.0 - ssim_sum / n) * 0.5;
    Ok((loss, grad))
}

/// Zeroth-order spherical-harmonic constant used by the PLY color layout.
const SH_C0: f64 = 0.282_094_791_773_878_14;

const PLY_PROPERTIES: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2",
    "rot_3",
];

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Binary little-endian PLY in the usual Gaussian-splat layout.
pub fn write_ply<W: Write>(splats: &[GaussianSplat], mut out: W) -> Result<()> {
    writeln!(out, "ply")?;
    writeln!(out, "format binary_little_endian 1.0")?;
    writeln!(out, "element vertex {}", splats.len())?;
    for p in PLY_PROPERTIES {
        writeln!(out, "property float {p}")?;
    }
    writeln!(out, "end_header")?;
    let mut buf = Vec::with_capacity(splats.len() * PLY_PROPERTIES.len() * 4);
    for s in splats {
        let vals = [
            s.center.x,
            s.center.y,
            s.center.z,
            (s.color[0] - 0.5) / SH_C0,
            (s.color[1] - 0.5) / SH_C0,
            (s.color[2] - 0.5) / SH_C0,
            logit(s.opacity),
            s.log_scale.x,
            s.log_scale.y,
            s.log_scale.z,
            s.rotation[0],
            s.rotation[1],
            s.rotation[2],
            s.rotation[3],
        ];
        for v in vals {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn export_splats(splats: &[GaussianSplat], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_ply(splats, std::io::BufWriter::new(file))
}

pub fn read_ply<R: Read>(input: R) -> Result<Vec<GaussianSplat>> {
    let mut reader = BufReader::new(input);
    let bad = |msg: String| Error::invalid(format!("PLY: {msg}"));
    let mut line = String::new();
    let mut count = None;
    let mut props = Vec::new();
    let mut first = true;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(bad("missing end_header".into()));
        }
        let l = line.trim_end();
        if first {
            if l != "ply" {
                return Err(bad("missing magic".into()));
            }
            first = false;
            continue;
        }
        let parts: Vec<&str> = l.split_whitespace().collect();
        match parts.as_slice() {
            ["format", fmt, _] if *fmt != "binary_little_endian" => {
                return Err(bad(format!("unsupported format {fmt}")));
            }
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|e| bad(format!("vertex count: {e}")))?);
            }
            ["property", "float", name] => props.push(name.to_string()),
            ["property", ty, _] => return Err(bad(format!("unsupported property type {ty}"))),
            ["end_header"] => break,
            _ => {}
        }
    }
    let n = count.ok_or_else(|| bad("no vertex element".into()))?;
    let idx = |name: &str| {
        props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| bad(format!("missing property {name}")))
    };
    let cols: Vec<usize> = PLY_PROPERTIES.iter().map(|p| idx(p)).collect::<Result<_>>()?;
    let stride = props.len();
    let mut raw = vec![0u8; n * stride * 4];
    reader
        .read_exact(&mut raw)
        .map_err(|_| bad(format!("expected {n} vertices")))?;
    let mut out = Vec::with_capacity(n);
    for v in 0..n {
        let f = |c: usize| {
            let o = (v * stride + cols[c]) * 4;
            f32::from_le_bytes([raw[o], raw[o + 1], raw[o + 2], raw[o + 3]]) as f64
        };
        out.push(GaussianSplat {
            center: Vector3::new(f(0), f(1), f(2)),
            color: [0.5 + SH_C0 * f(3), 0.5 + SH_C0 * f(4), 0.5 + SH_C0 * f(5)],
            opacity: sigmoid(f(6)),
            log_scale: Vector3::new(f(7), f(8), f(9)),
            rotation: [f(10), f(11), f(12), f(13)],
        });
    }
    Ok(out)
}

pub fn import_splats(path: &Path) -> Result<Vec<GaussianSplat>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    read_ply(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> (RigidPose, CameraIntrinsics) {
        (RigidPose::identity(), CameraIntrinsics::centered(40.0, 32, 32).unwrap())
    }

    fn iso(center: Vector3<f64>, scale: f64, opacity: f64, color: [f64; 3]) -> GaussianSplat {
        GaussianSplat {
            center,
            log_scale: Vector3::repeat(scale.ln()),
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity,
            color,
        }
    }

    fn random_splats(rng: &mut ChaCha8Rng, n: usize) -> Vec<GaussianSplat> {
        (0..n)
            .map(|_| {
                let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                GaussianSplat {
                    center: Vector3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(2.0..4.0)),
                    log_scale: Vector3::from_fn(|_, _| rng.random_range(-3.0..-1.5)),
                    rotation: q.map(|v| v / qn),
                    opacity: rng.random_range(0.2..0.8),
                    color: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
                }
            })
            .collect()
    }

    #[test]
    fn single_splat_peaks_at_principal_point() {
        let (pose, k) = cam();
        let s = iso(Vector3::new(0.0, 0.0, 3.0), 0.2, 0.95, [1.0; 3]);
        let img = rasterize(&[s], &pose, &k, &RasterConfig::default());
        let mut best = (0, 0, f64::MIN);
        for y in 0..32 {
            for x in 0..32 {
                if img[(y, x, 0)] > best.2 {
                    best = (y, x, img[(y, x, 0)]);
                }
            }
        }
        assert!((15..=16).contains(&best.0) && (15..=16).contains(&best.1), "{best:?}");
        // radially decreasing along the row through the center
        for x in 16..31 {
            assert!(img[(16, x, 0)] >= img[(16, x + 1, 0)] - 1e-12);
        }
    }

    #[test]
    fn transparent_splats_give_background() {
        let (pose, k) = cam();
        let cfg = RasterConfig {
            background: [0.2, 0.4, 0.6],
            ..Default::default()
        };
        let s = iso(Vector3::new(0.0, 0.0, 3.0), 0.3, 0.0, [1.0; 3]);
        let img = rasterize(&[s, s], &pose, &k, &cfg);
        for ((_, _, c), v) in img.indexed_iter() {
            assert_eq!(*v, cfg.background[c]);
        }
        let empty = rasterize(&[], &pose, &k, &cfg);
        assert_eq!(empty, img);
    }

    #[test]
    fn compositing_matches_hand_computation() {
        let (pose, k) = cam();
        let cfg = RasterConfig::default();
        let near = iso(Vector3::new(0.0, 0.0, 2.0), 0.1, 0.6, [1.0, 0.0, 0.0]);
        let far = iso(Vector3::new(0.01, 0.0, 4.0), 0.2, 0.7, [0.0, 1.0, 0.5]);
        let img = rasterize(&[far, near], &pose, &k, &cfg);
        let (x, y) = (16usize, 16usize);
        let alpha = |s: &GaussianSplat| {
            let p = project_splat(s, &pose, &k, &cfg);
            let dx = x as f64 + 0.5 - p.mean[0];
            let dy = y as f64 + 0.5 - p.mean[1];
            let [a, b, c] = p.conic;
            (s.opacity * (-0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)).exp()).min(0.99)
        };
        let (a1, a2) = (alpha(&near), alpha(&far));
        for ch in 0..3 {
            let expect = near.color[ch] * a1 + far.color[ch] * a2 * (1.0 - a1);
            assert!((img[(y, x, ch)] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn projected_covariance_matches_jacobian_form() {
        let (_, k) = cam();
        let pose = RigidPose::look_at(&Vector3::new(0.3, -0.2, -1.0), &Vector3::new(0.0, 0.0, 3.0), &Vector3::y()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_splats(&mut rng, 1)[0];
        let cfg = RasterConfig {
            dilation: 0.0,
            ..Default::default()
        };
        let p = project_splat(&s, &pose, &k, &cfg);
        let pc = pose.transform_point(&s.center);
        let j = crate::geometry::projection_jacobian(&k, &pc);
        let sig = j * pose.rotation * s.covariance() * pose.rotation.transpose() * j.transpose();
        let inv = sig.try_inverse().unwrap();
        assert!((inv[(0, 0)] - p.conic[0]).abs() < 1e-9 * inv.norm());
        assert!((inv[(0, 1)] - p.conic[1]).abs() < 1e-9 * inv.norm());
        assert!((inv[(1, 1)] - p.conic[2]).abs() < 1e-9 * inv.norm());
    }

    #[test]
    fn order_invariance_and_range() {
        let (pose, k) = cam();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut splats = random_splats(&mut rng, 40);
        let cfg = RasterConfig {
            background: [0.3, 0.5, 0.1],
            ..Default::default()
        };
        let a = rasterize(&splats, &pose, &k, &cfg);
        splats.reverse();
        splats.swap(3, 17);
        let b = rasterize(&splats, &pose, &k, &cfg);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-6);
            assert!((0.0..=1.0).contains(x));
        }
    }

    #[test]
    fn raster_gradients_match_finite_differences() {
        let (pose, k) = cam();
        let cfg = RasterConfig {
            background: [0.1, 0.2, 0.3],
            cutoff_sigma: 20.0,
            ..Default::default()
        };
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let splats = random_splats(&mut rng, 6);
            let weights = Array3::from_shape_fn((32, 32, 3), |_| rng.random_range(-1.0..1.0));
            let f = |s: &[GaussianSplat]| (rasterize(s, &pose, &k, &cfg) * &weights).sum();
            let (_, cache) = rasterize_cached(&splats, &pose, &k, &cfg);
            let grads = rasterize_backward(&splats, &cache, &weights.view(), &cfg);
            let h = 1e-6;
            for i in 0..splats.len() {
                let mut fields: Vec<(f64, Box<dyn Fn(&mut GaussianSplat, f64)>)> = Vec::new();
                for a in 0..3 {
                    fields.push((grads[i].center[a], Box::new(move |s, d| s.center[a] += d)));
                    fields.push((grads[i].log_scale[a], Box::new(move |s, d| s.log_scale[a] += d)));
                    fields.push((grads[i].color[a], Box::new(move |s, d| s.color[a] += d)));
                }
                for a in 0..4 {
                    fields.push((grads[i].rotation[a], Box::new(move |s, d| s.rotation[a] += d)));
                }
                fields.push((grads[i].opacity, Box::new(|s, d| s.opacity += d)));
                for (g, perturb) in &fields {
                    let mut p = splats.clone();
                    perturb(&mut p[i], h);
                    let up = f(&p);
                    let mut m = splats.clone();
                    perturb(&mut m[i], -h);
                    let down = f(&m);
                    let num = (up - down) / (2.0 * h);
                    let rel = (num - g).abs() / num.abs().max(g.abs()).max(1e-3);
                    assert!(rel < 1e-4, "seed {seed} splat {i}: analytic {g} numeric {num}");
                }
            }
        }
    }

    #[test]
    fn photometric_arithmetic() {
        let half = Array3::from_elem((16, 16, 3), 0.5);
        let black = Array3::zeros((16, 16, 3));
        assert!((photometric_loss(&half.view(), &black.view(), 0.0).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(photometric_loss(&half.view(), &half.view(), 0.2).unwrap(), 0.0);
        assert!(photometric_loss(&half.view(), &Array3::zeros((8, 16, 3)).view(), 0.2).is_err());
        assert!(photometric_loss(&half.view(), &black.view(), 1.5).is_err());
    }

    #[test]
    fn metric_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Array3::from_shape_fn((20, 24, 3), |_| rng.random_range(0.0..1.0));
        let b = Array3::from_shape_fn((20, 24, 3), |_| rng.random_range(0.0..1.0));
        assert_eq!(psnr(&a.view(), &a.view(), 1.0).unwrap(), PSNR_CAP_DB);
        assert!((ssim(&a.view(), &a.view(), 1.0).unwrap() - 1.0).abs() < 1e-12);
        let s1 = ssim(&a.view(), &b.view(), 1.0).unwrap();
        let s2 = ssim(&b.view(), &a.view(), 1.0).unwrap();
        assert!((s1 - s2).abs() < 1e-9);
        let c = &a + 0.1;
        assert!((psnr(&c.view(), &a.view(), 1.0).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn photometric_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let r = Array3::from_shape_fn((18, 20, 3), |_| rng.random_range(0.0..1.0));
            let t = Array3::from_shape_fn((18, 20, 3), |_| rng.random_range(0.0..1.0));
            let (_, g) = photometric_loss_grad(&r.view(), &t.view(), 0.2).unwrap();
            let h = 1e-6;
            for _ in 0..20 {
                let idx = (rng.random_range(3..15), rng.random_range(3..17), rng.random_range(0..3));
                let mut p = r.clone();
                p[idx] += h;
                let mut m = r.clone();
                m[idx] -= h;
                let num = (photometric_loss(&p.view(), &t.view(), 0.2).unwrap()
                    - photometric_loss(&m.view(), &t.view(), 0.2).unwrap())
                    / (2.0 * h);
                let rel = (num - g[idx]).abs() / num.abs().max(g[idx].abs());
                assert!(rel < 1e-4, "{idx:?}: {num} vs {}", g[idx]);
            }
        }
    }

    #[test]
    fn ply_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let splats = random_splats(&mut rng, 25);
        let mut bytes = Vec::new();
        write_ply(&splats, &mut bytes).unwrap();
        let text = String::from_utf8_lossy(&bytes[..200]);
        assert!(text.contains("element vertex 25"));
        let back = read_ply(bytes.as_slice()).unwrap();
        assert_eq!(back.len(), 25);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * a.abs().max(1.0);
        for (a, b) in splats.iter().zip(&back) {
            for i in 0..3 {
                assert!(close(a.center[i], b.center[i]));
                assert!(close(a.log_scale[i], b.log_scale[i]));
                assert!(close(a.color[i], b.color[i]));
            }
            for i in 0..4 {
                assert!(close(a.rotation[i], b.rotation[i]));
            }
            assert!(close(a.opacity, b.opacity));
        }
        let mut empty = Vec::new();
        write_ply(&[], &mut empty).unwrap();
        assert!(read_ply(empty.as_slice()).unwrap().is_empty());
        assert!(read_ply(&bytes[..bytes.len() - 3]).is_err());
    }
}

//! Patch encoder, image embedding and the shuffled training buffer.

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, RigidPose};
use crate::nn::{join, Params};

/// Square convolution over `H x W x C` tensors, computed with im2col.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `out x (k * k * in)`, patch-major then channel.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        let fan_in = kernel * kernel * cin;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        Self {
            weight: Array2::from_shape_fn((cout, fan_in), |_| normal.sample(rng)),
            bias: Array1::zeros(cout),
            kernel,
            stride,
            pad,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
            ..*self
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.ncols() / (self.kernel * self.kernel)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn im2col(&self, x: &ArrayView3<f64>) -> Array2<f64> {
        let (h, w, c) = x.dim();
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let k = self.kernel;
        let mut cols = Array2::zeros((ho * wo, k * k * c));
        for oy in 0..ho {
            for ox in 0..wo {
                let mut row = cols.row_mut(oy * wo + ox);
                let row = row.as_slice_mut().expect("contiguous");
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = &mut row[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                        for (ch, d) in dst.iter_mut().enumerate() {
                            *d = x[(iy as usize, ix as usize, ch)];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Returns the output and the im2col matrix needed for the backward pass.
    pub fn forward(&self, x: &ArrayView3<f64>) -> (Array3<f64>, Array2<f64>) {
        let (h, w, _) = x.dim();
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let cols = self.im2col(x);
        let mut y = cols.dot(&self.weight.t());
        y += &self.bias;
        let y = y.into_shape_with_order((ho, wo, self.out_channels())).expect("shape");
        (y, cols)
    }

    /// Accumulates parameter gradients; returns the input gradient when
    /// `input_dims` is given.
    pub fn backward(
        &self,
        cols: &Array2<f64>,
        dy: &ArrayView3<f64>,
        grad: &mut Conv2d,
        input_dims: Option<(usize, usize, usize)>,
    ) -> Option<Array3<f64>> {
        let (ho, wo, cout) = dy.dim();
        let dy2 = dy.to_shape((ho * wo, cout)).expect("shape");
        grad.weight += &dy2.t().dot(cols);
        grad.bias += &dy2.sum_axis(Axis(0));
        let (h, w, c) = input_dims?;
        let dcols = dy2.dot(&self.weight);
        let k = self.kernel;
        let mut dx = Array3::zeros((h, w, c));
        for oy in 0..ho {
            for ox in 0..wo {
                let row = dcols.row(oy * wo + ox);
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        for ch in 0..c {
                            dx[(iy as usize, ix as usize, ch)] += row[(ky * k + kx) * c + ch];
                        }
                    }
                }
            }
        }
        Some(dx)
    }
}

impl Params for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        f(join(prefix, "weight"), self.weight.shape(), self.weight.as_slice().expect("contiguous"));
        f(join(prefix, "bias"), self.bias.shape(), self.bias.as_slice().expect("contiguous"));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        f(join(prefix, "weight"), self.weight.as_slice_mut().expect("contiguous"));
        f(join(prefix, "bias"), self.bias.as_slice_mut().expect("contiguous"));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Widths of the three stride-2 blocks.
    pub channels: [usize; 3],
    pub descriptor_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64],
            descriptor_dim: 64,
        }
    }
}

/// Three 4x4 stride-2 convolutions followed by a 1x1 projection: total
/// stride 8, receptive field 22 px centered on `8 * i + 4`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub convs: Vec<Conv2d>,
}

pub const ENCODER_STRIDE: usize = 8;

pub struct EncoderCache {
    cols: Vec<Array2<f64>>,
    /// Post-activation output of every hidden block.
    acts: Vec<Array3<f64>>,
    dims: Vec<(usize, usize, usize)>,
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x454e_434f);
        let [c1, c2, c3] = cfg.channels;
        Self {
            convs: vec![
                Conv2d::new(3, c1, 4, 2, 1, &mut rng),
                Conv2d::new(c1, c2, 4, 2, 1, &mut rng),
                Conv2d::new(c2, c3, 4, 2, 1, &mut rng),
                Conv2d::new(c3, cfg.descriptor_dim, 1, 1, 0, &mut rng),
            ],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            convs: self.convs.iter().map(Conv2d::zeros_like).collect(),
        }
    }

    pub fn descriptor_dim(&self) -> usize {
        self.convs.last().expect("non-empty").out_channels()
    }

    fn check(&self, image: &ArrayView3<f64>) -> Result<()> {
        let (h, w, c) = image.dim();
        if c != 3 {
            return Err(Error::DimensionMismatch {
                context: "encoder input channels",
                expected: 3,
                got: c,
            });
        }
        if h == 0 || w == 0 || h % ENCODER_STRIDE != 0 || w % ENCODER_STRIDE != 0 {
            return Err(Error::invalid(format!(
                "image {w}x{h} is not divisible by the encoder stride {ENCODER_STRIDE}"
            )));
        }
        Ok(())
    }

    pub fn encode(&self, image: &ArrayView3<f64>) -> Result<FeatureMap> {
        Ok(self.encode_cached(image)?.0)
    }

    pub fn encode_cached(&self, image: &ArrayView3<f64>) -> Result<(FeatureMap, EncoderCache)> {
        self.check(image)?;
        let mut x = image.mapv(|v| v - 0.5);
        let mut cols = Vec::with_capacity(self.convs.len());
        let mut acts = Vec::with_capacity(self.convs.len());
        let mut dims = Vec::with_capacity(self.convs.len());
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            dims.push(x.dim());
            let (mut y, c) = conv.forward(&x.view());
            if i < last {
                y.mapv_inplace(|v| v.max(0.0));
                acts.push(y.clone());
            }
            cols.push(c);
            x = y;
        }
        Ok((
            FeatureMap {
                descriptors: x,
                stride: ENCODER_STRIDE,
            },
            EncoderCache { cols, acts, dims },
        ))
    }

    /// Backpropagates descriptor gradients (`cells x D`, row-major over the
    /// feature grid) into parameter gradients.
    pub fn backward(&self, cache: &EncoderCache, d_desc: &ArrayView2<f64>, grad: &mut Encoder) {
        let last = self.convs.len() - 1;
        let (h, w, _) = cache.acts[last - 1].dim();
        let mut dy = d_desc
            .to_shape((h, w, self.descriptor_dim()))
            .expect("descriptor gradient shape")
            .to_owned();
        for i in (0..self.convs.len()).rev() {
            let need_input = i > 0;
            let dx = self.convs[i].backward(
                &cache.cols[i],
                &dy.view(),
                &mut grad.convs[i],
                need_input.then_some(cache.dims[i]),
            );
            if let Some(mut dx) = dx {
                let act = &cache.acts[i - 1];
                ndarray::Zip::from(&mut dx).and(act).for_each(|g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
                dy = dx;
            }
        }
    }
}

impl Params for Encoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&join(prefix, &format!("conv{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("conv{i}")), f);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    /// `(H / stride) x (W / stride) x D`
    pub descriptors: Array3<f64>,
    pub stride: usize,
}

impl FeatureMap {
    pub fn rows(&self) -> usize {
        self.descriptors.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.descriptors.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.descriptors.shape()[2]
    }

    pub fn cells(&self) -> usize {
        self.rows() * self.cols()
    }

    /// Image-plane center of cell `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> Vector2<f64> {
        let s = self.stride as f64;
        Vector2::new(col as f64 * s + s * 0.5, row as f64 * s + s * 0.5)
    }

    /// Descriptors as a `cells x D` matrix, row-major over the grid.
    pub fn flat(&self) -> ArrayView2<'_, f64> {
        self.descriptors
            .view()
            .into_shape_with_order((self.cells(), self.dim()))
            .expect("contiguous feature map")
    }

    pub fn pixel_centers(&self) -> Vec<Vector2<f64>> {
        (0..self.rows())
            .flat_map(|r| (0..self.cols()).map(move |c| (r, c)))
            .map(|(r, c)| self.pixel_center(r, c))
            .collect()
    }
}

/// Spatial mean of all descriptors.
pub fn image_embedding(fm: &FeatureMap) -> Result<Array1<f64>> {
    if fm.cells() == 0 {
        return Err(Error::Empty("feature map"));
    }
    Ok(fm.flat().mean_axis(Axis(0)).expect("non-empty"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub max_rotation_deg: f64,
    pub scale_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_rotation_deg: 15.0,
            scale_range: [0.67, 1.5],
        }
    }
}

/// An image resampled under in-plane rotation and scaling, with the camera
/// model updated to match. `valid` marks pixels that came from the source.
#[derive(Debug, Clone)]
pub struct AugmentedView {
    pub image: Array3<f64>,
    pub valid: ndarray::Array2<bool>,
    pub intrinsics: CameraIntrinsics,
    pub pose: RigidPose,
}

fn bilinear(image: &ArrayView3<f64>, x: f64, y: f64) -> Option<[f64; 3]> {
    let (h, w, _) = image.dim();
    // Continuous pixel-center convention: index i sits at i + 0.5.
    let (fx, fy) = (x - 0.5, y - 0.5);
    if fx < 0.0 || fy < 0.0 || fx > (w - 1) as f64 || fy > (h - 1) as f64 {
        return None;
    }
    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        *o = (1.0 - ay) * ((1.0 - ax) * image[(y0, x0, c)] + ax * image[(y0, x1, c)])
            + ay * ((1.0 - ax) * image[(y1, x0, c)] + ax * image[(y1, x1, c)]);
    }
    Some(out)
}

/// Rotates the image by `angle` (radians) about the principal point and
/// scales it by `scale`. The camera rotates about its optical axis by the
/// same angle, so projections stay consistent (exact for `fx == fy`).
pub fn augment_view(
    image: &ArrayView3<f64>,
    k: &CameraIntrinsics,
    pose: &RigidPose,
    angle: f64,
    scale: f64,
) -> AugmentedView {
    let (h, w, _) = image.dim();
    let round8 = |n: f64| ((n / ENCODER_STRIDE as f64).round().max(1.0) as usize) * ENCODER_STRIDE;
    let (nw, nh) = (round8(w as f64 * scale), round8(h as f64 * scale));
    let nk = CameraIntrinsics {
        fx: k.fx * scale,
        fy: k.fy * scale,
        cx: k.cx * nw as f64 / w as f64,
        cy: k.cy * nh as f64 / h as f64,
        width: nw,
        height: nh,
    };
    let (c, s) = (angle.cos(), angle.sin());
    let mut out = Array3::zeros((nh, nw, 3));
    let mut valid = ndarray::Array2::from_elem((nh, nw), false);
    for y in 0..nh {
        for x in 0..nw {
            // p' = s R (p - c) + c'  =>  p = c + R^T (p' - c') / s
            let dx = (x as f64 + 0.5 - nk.cx) / scale;
            let dy = (y as f64 + 0.5 - nk.cy) / scale;
            let sx = k.cx + c * dx + s * dy;
            let sy = k.cy - s * dx + c * dy;
            if let Some(rgb) = bilinear(image, sx, sy) {
                valid[(y, x)] = true;
                for ch in 0..3 {
                    out[(y, x, ch)] = rgb[ch];
                }
            }
        }
    }
    let rz: Matrix3<f64> = Rotation3::from_axis_angle(&Vector3::z_axis(), angle).into_inner();
    let new_pose = RigidPose {
        rotation: rz * pose.rotation,
        translation: rz * pose.translation,
    };
    AugmentedView {
        image: out,
        valid,
        intrinsics: nk,
        pose: new_pose,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BufferView {
    pub frame: usize,
    pub pose: RigidPose,
    pub intrinsics: CameraIntrinsics,
}

/// Flat, shuffled pool of `(descriptor, pixel, view)` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBuffer {
    /// `N x D`
    pub descriptors: Array2<f64>,
    pub pixels: Vec<Vector2<f64>>,
    /// Index into `views` per entry.
    pub view: Vec<usize>,
    pub views: Vec<BufferView>,
    pub capacity: usize,
}

impl TrainingBuffer {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.descriptors.ncols()
    }
}

/// Encodes `frames` of the dataset (optionally augmented), keeps every cell
/// whose center maps inside the source image, subsamples uniformly to
/// `capacity` and shuffles.
pub fn fill_buffer(
    dataset: &Dataset,
    frames: &[usize],
    encoder: &Encoder,
    capacity: usize,
    augment: Option<&AugmentConfig>,
    seed: u64,
) -> Result<TrainingBuffer> {
    if capacity == 0 {
        return Err(Error::invalid("buffer capacity must be positive"));
    }
    if frames.is_empty() || dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4255_4646);
    let d = encoder.descriptor_dim();
    let mut views = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut pixels = Vec::new();
    let mut view_idx = Vec::new();
    // Augmented passes draw fresh transforms until the pool can fill the buffer.
    let max_passes = if augment.is_some() { 16 } else { 1 };
    for _pass in 0..max_passes {
        let mut order: Vec<usize> = frames.to_vec();
        if augment.is_some() {
            order.shuffle(&mut rng);
        }
        for &fi in &order {
            let frame = dataset
                .frames
                .get(fi)
                .ok_or_else(|| Error::invalid(format!("frame index {fi} out of range")))?;
            let (image, valid, k, pose) = match augment {
                Some(a) => {
                    let angle = rng.random_range(-a.max_rotation_deg..=a.max_rotation_deg).to_radians();
                    let scale = rng.random_range(a.scale_range[0]..=a.scale_range[1]);
                    let av = augment_view(&frame.image.view(), &frame.intrinsics, &frame.pose, angle, scale);
                    (av.image, Some(av.valid), av.intrinsics, av.pose)
                }
                None => (frame.image.clone(), None, frame.intrinsics, frame.pose),
            };
            if !pose.is_finite() {
                return Err(Error::invalid(format!("frame {fi} has a non-finite pose")));
            }
            let fm = encoder.encode(&image.view())?;
            let vi = views.len();
            views.push(BufferView {
                frame: fi,
                pose,
                intrinsics: k,
            });
            for r in 0..fm.rows() {
                for c in 0..fm.cols() {
                    let px = fm.pixel_center(r, c);
                    let inside = match &valid {
                        Some(v) => v[(px.y as usize, px.x as usize)],
                        None => true,
                    };
                    if !inside || !k.contains(&px) {
                        continue;
                    }
                    rows.push(fm.descriptors.slice(s![r, c, ..]).to_vec());
                    pixels.push(px);
                    view_idx.push(vi);
                }
            }
        }
        if rows.len() >= capacity {
            break;
        }
    }
    let mut keep: Vec<usize> = (0..rows.len()).collect();
    keep.shuffle(&mut rng);
    keep.truncate(capacity);
    let n = keep.len();
    let mut descriptors = Array2::zeros((n, d));
    let mut out_pixels = Vec::with_capacity(n);
    let mut out_view = Vec::with_capacity(n);
    for (dst, &src) in keep.iter().enumerate() {
        descriptors.row_mut(dst).assign(&ndarray::ArrayView1::from(&rows[src]));
        out_pixels.push(pixels[src]);
        out_view.push(view_idx[src]);
    }
    Ok(TrainingBuffer {
        descriptors,
        pixels: out_pixels,
        view: out_view,
        views,
        capacity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Frame, Split};
    use crate::geometry::project;

    fn small_encoder() -> Encoder {
        Encoder::new(
            &EncoderConfig {
                channels: [4, 6, 8],
                descriptor_dim: 5,
            },
            1,
        )
    }

    fn noise_image(h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((h, w, 3), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn output_shape_contract() {
        let cfg = EncoderConfig::default();
        let enc = Encoder::new(&cfg, 0);
        let fm = enc.encode(&Array3::zeros((128, 128, 3)).view()).unwrap();
        assert_eq!(fm.descriptors.dim(), (16, 16, cfg.descriptor_dim));
        assert_eq!(fm.pixel_center(0, 0), Vector2::new(4.0, 4.0));
        assert!(enc.encode(&Array3::zeros((100, 128, 3)).view()).is_err());
    }

    #[test]
    fn encoding_is_deterministic_and_finite() {
        let enc = small_encoder();
        let img = noise_image(32, 48, 3);
        assert_eq!(enc.encode(&img.view()).unwrap(), enc.encode(&img.view()).unwrap());
        for v in [0.0, 1.0] {
            let fm = enc.encode(&Array3::from_elem((32, 32, 3), v).view()).unwrap();
            assert!(fm.descriptors.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn receptive_field_locality() {
        let enc = small_encoder();
        let img = noise_image(64, 64, 5);
        let base = enc.encode(&img.view()).unwrap();
        for &(py, px) in &[(0usize, 0usize), (13, 40), (31, 32), (63, 17)] {
            let mut pert = img.clone();
            pert[(py, px, 1)] += 0.7;
            let fm = enc.encode(&pert.view()).unwrap();
            for r in 0..fm.rows() {
                for c in 0..fm.cols() {
                    // Cell i covers input rows/cols [8i - 7, 8i + 14].
                    let covers = |p: usize, i: usize| {
                        let p = p as isize;
                        let i = i as isize;
                        p >= 8 * i - 7 && p <= 8 * i + 14
                    };
                    let changed = (0..fm.dim())
                        .any(|d| (fm.descriptors[(r, c, d)] - base.descriptors[(r, c, d)]).abs() > 0.0);
                    if !(covers(py, r) && covers(px, c)) {
                        assert!(!changed, "cell ({r},{c}) changed for pixel ({py},{px})");
                    }
                }
            }
        }
    }

    #[test]
    fn embedding_is_mean_pool() {
        let fm = FeatureMap {
            descriptors: Array3::from_elem((3, 4, 2), 0.25),
            stride: 8,
        };
        assert_eq!(image_embedding(&fm).unwrap().to_vec(), vec![0.25, 0.25]);

        let enc = small_encoder();
        let fm = enc.encode(&noise_image(32, 40, 8).view()).unwrap();
        let e = image_embedding(&fm).unwrap();
        let mut brute = vec![0.0; fm.dim()];
        for r in 0..fm.rows() {
            for c in 0..fm.cols() {
                for d in 0..fm.dim() {
                    brute[d] += fm.descriptors[(r, c, d)];
                }
            }
        }
        for d in 0..fm.dim() {
            assert!((brute[d] / fm.cells() as f64 - e[d]).abs() < 1e-6);
        }
        // Permuting cells leaves the pool unchanged.
        let mut perm = fm.clone();
        for d in 0..fm.dim() {
            perm.descriptors[(0, 0, d)] = fm.descriptors[(1, 2, d)];
            perm.descriptors[(1, 2, d)] = fm.descriptors[(0, 0, d)];
        }
        let ep = image_embedding(&perm).unwrap();
        for d in 0..fm.dim() {
            assert!((ep[d] - e[d]).abs() < 1e-12);
        }
        let empty = FeatureMap {
            descriptors: Array3::zeros((0, 0, 2)),
            stride: 8,
        };
        assert!(image_embedding(&empty).is_err());
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let enc = small_encoder();
        let img = noise_image(16, 24, 9);
        let (fm, cache) = enc.encode_cached(&img.view()).unwrap();
        let target = Array2::from_shape_fn((fm.cells(), fm.dim()), |(i, j)| ((i + 2 * j) as f64).sin());
        let loss = |e: &Encoder| {
            let f = e.encode(&img.view()).unwrap();
            (&f.flat() - &target).mapv(|v| v * v).sum() * 0.5
        };
        let dy = &fm.flat() - &target;
        let mut grad = enc.zeros_like();
        enc.backward(&cache, &dy.view(), &mut grad);
        let analytic = grad.flatten();
        let base = enc.flatten();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..60 {
            let i = rng.random_range(0..base.len());
            let mut p = enc.clone();
            let mut w = base.clone();
            w[i] += 1e-6;
            p.load_flat(&w);
            let lp = loss(&p);
            w[i] -= 2e-6;
            p.load_flat(&w);
            let fd = (lp - loss(&p)) / 2e-6;
            let a = analytic[i];
            assert!((fd - a).abs() <= 1e-4 * fd.abs().max(a.abs()).max(1e-5), "{i}: {fd} vs {a}");
        }
    }

    fn toy_dataset(n: usize, size: usize) -> Dataset {
        let k = CameraIntrinsics::centered(60.0, size, size).unwrap();
        Dataset::new(
            (0..n)
                .map(|i| Frame {
                    image: noise_image(size, size, i as u64),
                    intrinsics: k,
                    pose: RigidPose::identity(),
                    split: Split::Map,
                    image_path: None,
                    region: None,
                    gt: None,
                })
                .collect(),
        )
    }

    #[test]
    fn buffer_sampling_is_uniform_over_views() {
        let ds = toy_dataset(10, 128);
        let enc = small_encoder();
        let frames: Vec<usize> = (0..10).collect();
        let buf = fill_buffer(&ds, &frames, &enc, 1000, None, 4).unwrap();
        assert_eq!(buf.len(), 1000);
        let mut counts = [0usize; 10];
        for &v in &buf.view {
            counts[buf.views[v].frame] += 1;
        }
        // Multinomial sd with p = 0.1, n = 1000.
        let sd = (1000.0f64 * 0.1 * 0.9).sqrt();
        for c in counts {
            assert!((c as f64 - 100.0).abs() <= 5.0 * sd, "{counts:?}");
        }
        for (px, &v) in buf.pixels.iter().zip(&buf.view) {
            let view = &buf.views[v];
            assert!(view.intrinsics.contains(px));
            assert!(view.pose.is_finite());
        }
        assert_eq!(buf, fill_buffer(&ds, &frames, &enc, 1000, None, 4).unwrap());
        assert!(fill_buffer(&ds, &frames, &enc, 0, None, 4).is_err());
        assert!(fill_buffer(&Dataset::default(), &[], &enc, 10, None, 4).is_err());
    }

    #[test]
    fn buffer_cells_pass_chi_square() {
        // 10k draws over 4 views x 16 cells; every (view, cell) pair equally likely.
        let ds = toy_dataset(4, 32);
        let enc = small_encoder();
        let frames: Vec<usize> = (0..4).collect();
        let mut counts = vec![0usize; 64];
        let mut draws = 0;
        let mut seed = 0;
        while draws < 10_000 {
            let buf = fill_buffer(&ds, &frames, &enc, 10, None, seed).unwrap();
            for (px, &v) in buf.pixels.iter().zip(&buf.view) {
                let cell = (px.y as usize / 8) * 4 + px.x as usize / 8;
                counts[buf.views[v].frame * 16 + cell] += 1;
            }
            draws += buf.len();
            seed += 1;
        }
        let expected = draws as f64 / 64.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // Upper 0.001 quantile of chi-square with 63 degrees of freedom.
        assert!(chi2 < 103.44, "chi2 = {chi2}");
    }

    #[test]
    fn augmentation_keeps_projections_consistent() {
        let k = CameraIntrinsics::centered(80.0, 64, 64).unwrap();
        let pose = RigidPose::look_at(
            &Vector3::new(0.0, -4.0, 1.0),
            &Vector3::zeros(),
            &Vector3::z(),
        )
        .unwrap();
        let img = noise_image(64, 64, 1);
        let av = augment_view(&img.view(), &k, &pose, 0.2, 1.25);
        assert_eq!(av.image.dim(), (80, 80, 3));
        let pt = Vector3::new(0.3, 0.2, -0.1);
        let p0 = project(&pose, &k, &pt).pixel;
        let p1 = project(&av.pose, &av.intrinsics, &pt).pixel;
        // Resampled color at p1 equals the source color at p0.
        let src = bilinear(&img.view(), p0.x, p0.y).unwrap();
        let dst = bilinear(&av.image.view(), p1.x, p1.y).unwrap();
        for c in 0..3 {
            assert!((src[c] - dst[c]).abs() < 0.1, "{src:?} {dst:?}");
        }
        let id = augment_view(&img.view(), &k, &pose, 0.0, 1.0);
        assert!(id.image.iter().zip(img.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

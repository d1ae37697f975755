//! Procedural multi-region scenes with exact ground truth.
//!
//! Each region is a textured sphere of colored points. Texture is a smooth
//! function of surface position (region palette, orientation-dependent tint,
//! a sinusoidal pattern) plus small per-point noise, so patches are locally
//! discriminative and globally region-specific.

use nalgebra::{Rotation3, UnitQuaternion, Vector2, Vector3};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Frame, GroundTruth, Split};
use crate::error::{Error, Result};
use crate::geometry::{project, CameraIntrinsics, RigidPose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub regions: usize,
    pub points_per_region: usize,
    /// Minimum distance between region centroids (meters).
    pub separation: f64,
    /// Sphere radius of every region (meters).
    pub blob_radius: f64,
    pub tint_amplitude: f64,
    pub pattern_amplitude: f64,
    /// Pattern frequency in cycles per meter.
    pub pattern_frequency: f64,
    pub noise_amplitude: f64,
    pub background: [f64; 3],
    /// `[source, target]`: region `target` reuses the texture of `source`.
    pub repeated_texture: Option<[usize; 2]>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            regions: 4,
            points_per_region: 40_000,
            separation: 20.0,
            blob_radius: 2.0,
            tint_amplitude: 0.22,
            pattern_amplitude: 0.12,
            pattern_frequency: 1.2,
            noise_amplitude: 0.03,
            background: [0.05, 0.05, 0.05],
            repeated_texture: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub points: Vec<Vector3<f64>>,
    pub colors: Vec<[f64; 3]>,
    pub region_label: Vec<usize>,
    pub centroids: Vec<Vector3<f64>>,
    pub blob_radius: f64,
    pub diameter: f64,
    pub background: [f64; 3],
    pub seed: u64,
}

impl SyntheticScene {
    pub fn regions(&self) -> usize {
        self.centroids.len()
    }

    /// Nearest-centroid region of a world point.
    pub fn classify(&self, p: &Vector3<f64>) -> usize {
        self.centroids
            .iter()
            .enumerate()
            .map(|(i, c)| (i, (p - c).norm_squared()))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
            .0
    }
}

#[derive(Debug, Clone)]
struct RegionTexture {
    palette: [f64; 3],
    orientation: Rotation3<f64>,
    pattern_dir: Vector3<f64>,
    pattern_phase: [f64; 3],
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn random_unit<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn random_rotation<R: Rng>(rng: &mut R) -> Rotation3<f64> {
    let q = nalgebra::Quaternion::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    );
    UnitQuaternion::from_quaternion(q).to_rotation_matrix()
}

/// Region centroids on a square grid with spacing `separation`, centered on
/// the origin.
fn region_centroids(k: usize, separation: f64) -> Vec<Vector3<f64>> {
    let cols = (k as f64).sqrt().ceil() as usize;
    let rows = k.div_ceil(cols);
    let ox = (cols - 1) as f64 * 0.5;
    let oy = (rows - 1) as f64 * 0.5;
    (0..k)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            Vector3::new((c as f64 - ox) * separation, (r as f64 - oy) * separation, 0.0)
        })
        .collect()
}

pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<SyntheticScene> {
    if cfg.regions == 0 {
        return Err(Error::invalid("scene needs at least one region"));
    }
    if !(cfg.separation >= 0.0) || !(cfg.blob_radius > 0.0) {
        return Err(Error::invalid("separation must be >= 0 and blob radius > 0"));
    }
    if cfg.points_per_region == 0 {
        return Err(Error::invalid("points_per_region must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids = region_centroids(cfg.regions, cfg.separation);
    let mut textures: Vec<RegionTexture> = (0..cfg.regions)
        .map(|r| {
            let hue = (r as f64 * 0.618_033_988_75 + rng.random_range(0.0..0.05)).fract();
            RegionTexture {
                palette: hsv_to_rgb(hue, 0.55, 0.6),
                orientation: random_rotation(&mut rng),
                pattern_dir: random_unit(&mut rng),
                pattern_phase: [
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.0..std::f64::consts::TAU),
                ],
            }
        })
        .collect();
    if let Some([src, dst]) = cfg.repeated_texture {
        if src >= cfg.regions || dst >= cfg.regions {
            return Err(Error::invalid("repeated_texture region index out of range"));
        }
        textures[dst] = textures[src].clone();
    }

    let n = cfg.regions * cfg.points_per_region;
    let mut points = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut region_label = Vec::with_capacity(n);
    let tau = std::f64::consts::TAU;
    for (r, (c, tex)) in centroids.iter().zip(&textures).enumerate() {
        for _ in 0..cfg.points_per_region {
            let normal = random_unit(&mut rng);
            let local = normal * cfg.blob_radius;
            let tint = tex.orientation * normal;
            let s = tex.pattern_dir.dot(&local) * cfg.pattern_frequency * tau;
            let mut rgb = [0.0; 3];
            for ch in 0..3 {
                let pattern = (s + tex.pattern_phase[ch]).sin();
                let noise = rng.random_range(-1.0..1.0);
                rgb[ch] = (tex.palette[ch]
                    + cfg.tint_amplitude * tint[ch]
                    + cfg.pattern_amplitude * pattern
                    + cfg.noise_amplitude * noise)
                    .clamp(0.0, 1.0);
            }
            points.push(c + local);
            colors.push(rgb);
            region_label.push(r);
        }
    }
    let diameter = point_set_diameter(&points, &centroids);
    Ok(SyntheticScene {
        points,
        colors,
        region_label,
        centroids,
        blob_radius: cfg.blob_radius,
        diameter,
        background: cfg.background,
        seed,
    })
}

/// Maximum projected extent over a dense set of directions (including every
/// centroid-to-centroid axis). Converges to the true diameter from below.
pub fn point_set_diameter(points: &[Vector3<f64>], anchors: &[Vector3<f64>]) -> f64 {
    let mut dirs: Vec<Vector3<f64>> = Vec::new();
    for i in 0..anchors.len() {
        for j in i + 1..anchors.len() {
            let d = anchors[j] - anchors[i];
            if d.norm() > 1e-9 {
                dirs.push(d.normalize());
            }
        }
    }
    // Fibonacci sphere for the remaining directions.
    let m = 400;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    for i in 0..m {
        let y = 1.0 - 2.0 * (i as f64 + 0.5) / m as f64;
        let r = (1.0 - y * y).sqrt();
        let th = golden * i as f64;
        dirs.push(Vector3::new(r * th.cos(), y, r * th.sin()));
    }
    let mut best: f64 = 0.0;
    let mut best_dir = dirs[0];
    for d in &dirs {
        let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            let v = d.dot(p);
            (lo.min(v), hi.max(v))
        });
        if hi - lo > best {
            best = hi - lo;
            best_dir = *d;
        }
    }
    // Refine with the two extreme points along the best axis.
    let (imin, imax) = points.iter().enumerate().fold((0, 0), |(a, b), (i, p)| {
        let v = best_dir.dot(p);
        (
            if v < best_dir.dot(&points[a]) { i } else { a },
            if v > best_dir.dot(&points[b]) { i } else { b },
        )
    });
    best.max((points[imax] - points[imin]).norm())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectorySpec {
    pub frames_per_region: usize,
    pub orbit_radius: [f64; 2],
    /// Camera elevation above the region's horizontal plane (degrees).
    pub elevation_deg: [f64; 2],
    pub look_at_jitter_deg: f64,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Every n-th frame of each region is held out as a query view.
    pub query_every: usize,
    pub min_visible_points: usize,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            frames_per_region: 32,
            orbit_radius: [4.0, 5.0],
            elevation_deg: [-5.0, 35.0],
            look_at_jitter_deg: 3.0,
            width: 128,
            height: 128,
            focal: 110.0,
            query_every: 4,
            min_visible_points: 100,
        }
    }
}

impl TrajectorySpec {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::centered(self.focal, self.width, self.height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryFrame {
    pub pose: RigidPose,
    pub region: usize,
}

fn count_visible(scene: &SyntheticScene, pose: &RigidPose, k: &CameraIntrinsics, need: usize) -> usize {
    let mut n = 0;
    for p in &scene.points {
        let pr = project(pose, k, p);
        if pr.valid && k.contains(&pr.pixel) {
            n += 1;
            if n >= need {
                break;
            }
        }
    }
    n
}

/// Orbits every region, looking at its centroid with a small angular jitter.
/// Azimuths are stratified so consecutive frames sweep around the region.
pub fn generate_trajectory(
    scene: &SyntheticScene,
    spec: &TrajectorySpec,
    seed: u64,
) -> Result<Vec<TrajectoryFrame>> {
    if spec.frames_per_region < 8 {
        return Err(Error::invalid("frames_per_region must be at least 8"));
    }
    if !(spec.orbit_radius[0] > 0.0 && spec.orbit_radius[1] >= spec.orbit_radius[0]) {
        return Err(Error::invalid("orbit radius range must be positive and ordered"));
    }
    let k = spec.intrinsics()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7452_4a4a);
    let mut frames = Vec::with_capacity(scene.regions() * spec.frames_per_region);
    for (region, c) in scene.centroids.iter().enumerate() {
        for f in 0..spec.frames_per_region {
            let mut attempt = 0;
            let pose = loop {
                if attempt >= 1000 {
                    return Err(Error::Infeasible(format!(
                        "no pose for region {region} frame {f} sees {} points after 1000 attempts",
                        spec.min_visible_points
                    )));
                }
                attempt += 1;
                let az = std::f64::consts::TAU * (f as f64 + rng.random_range(0.0..1.0))
                    / spec.frames_per_region as f64;
                let el = rng
                    .random_range(spec.elevation_deg[0]..=spec.elevation_deg[1])
                    .to_radians();
                let radius = rng.random_range(spec.orbit_radius[0]..=spec.orbit_radius[1]);
                let eye = c + Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * radius;
                let jitter = Rotation3::from_axis_angle(
                    &nalgebra::Unit::new_normalize(random_unit(&mut rng)),
                    rng.random_range(0.0..=spec.look_at_jitter_deg).to_radians(),
                );
                let target = eye + jitter * (c - eye);
                let Ok(pose) = RigidPose::look_at(&eye, &target, &Vector3::z()) else {
                    continue;
                };
                if count_visible(scene, &pose, &k, spec.min_visible_points) >= spec.min_visible_points {
                    break pose;
                }
            };
            frames.push(TrajectoryFrame { pose, region });
        }
    }
    Ok(frames)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    /// `H x W x 3`, in `[0, 1]`.
    pub image: Array3<f64>,
    /// World coordinate of the nearest point per pixel.
    pub coords: Array3<f64>,
    pub valid: Array2<bool>,
    /// Camera-frame depth, zero where invalid.
    pub depth: Array2<f64>,
}

/// Z-buffered square point splats of half-width `splat_radius` pixels.
pub fn render_view(
    scene: &SyntheticScene,
    pose: &RigidPose,
    k: &CameraIntrinsics,
    splat_radius: usize,
) -> RenderedView {
    let (w, h) = (k.width, k.height);
    let mut zbuf = Array2::from_elem((h, w), f64::INFINITY);
    let mut owner = Array2::from_elem((h, w), usize::MAX);
    let r = splat_radius as i64;
    for (i, p) in scene.points.iter().enumerate() {
        let pr = project(pose, k, p);
        if !pr.valid || !pr.pixel.iter().all(|v| v.is_finite()) {
            continue;
        }
        let (u, v) = (pr.pixel.x.floor(), pr.pixel.y.floor());
        if u < -(r as f64) || v < -(r as f64) || u >= (w as i64 + r) as f64 || v >= (h as i64 + r) as f64 {
            continue;
        }
        let (u, v) = (u as i64, v as i64);
        for y in (v - r).max(0)..=(v + r).min(h as i64 - 1) {
            for x in (u - r).max(0)..=(u + r).min(w as i64 - 1) {
                let (yy, xx) = (y as usize, x as usize);
                if pr.depth < zbuf[(yy, xx)] {
                    zbuf[(yy, xx)] = pr.depth;
                    owner[(yy, xx)] = i;
                }
            }
        }
    }
    let mut image = Array3::zeros((h, w, 3));
    let mut coords = Array3::zeros((h, w, 3));
    let mut valid = Array2::from_elem((h, w), false);
    let mut depth = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let o = owner[(y, x)];
            if o == usize::MAX {
                for c in 0..3 {
                    image[(y, x, c)] = scene.background[c];
                }
                continue;
            }
            valid[(y, x)] = true;
            depth[(y, x)] = zbuf[(y, x)];
            for c in 0..3 {
                image[(y, x, c)] = scene.colors[o][c];
                coords[(y, x, c)] = scene.points[o][c];
            }
        }
    }
    RenderedView {
        image,
        coords,
        valid,
        depth,
    }
}

/// Rounds to 8-bit levels so the in-memory image equals its PNG encoding.
pub fn quantize_u8(image: &mut Array3<f64>) {
    image.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub trajectory: TrajectorySpec,
    pub splat_radius: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            scene: SceneConfig::default(),
            trajectory: TrajectorySpec::default(),
            splat_radius: 1,
        }
    }
}

/// Scene, trajectory and rendered frames with ground truth attached.
pub fn build_dataset(cfg: &SynthConfig) -> Result<(SyntheticScene, Dataset)> {
    let scene = generate_scene(&cfg.scene, cfg.seed)?;
    let traj = generate_trajectory(&scene, &cfg.trajectory, cfg.seed)?;
    let k = cfg.trajectory.intrinsics()?;
    let q = cfg.trajectory.query_every.max(1);
    let mut per_region = vec![0usize; scene.regions()];
    let frames = traj
        .iter()
        .map(|tf| {
            let mut view = render_view(&scene, &tf.pose, &k, cfg.splat_radius);
            quantize_u8(&mut view.image);
            let idx = per_region[tf.region];
            per_region[tf.region] += 1;
            let split = if q > 1 && idx % q == q - 1 { Split::Query } else { Split::Map };
            Frame {
                image: view.image,
                intrinsics: k,
                pose: tf.pose,
                split,
                image_path: None,
                region: Some(tf.region),
                gt: Some(GroundTruth {
                    coords: view.coords,
                    valid: view.valid,
                    depth: view.depth,
                }),
            }
        })
        .collect();
    Ok((scene, Dataset::new(frames)))
}

/// Pixel-center coordinates of pixel `(row, col)`.
pub fn pixel_center(row: usize, col: usize) -> Vector2<f64> {
    Vector2::new(col as f64 + 0.5, row as f64 + 0.5)
}

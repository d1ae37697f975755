//! PnP-RANSAC from dense scene-coordinate predictions, and evaluation
//! metrics.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Matrix6, SMatrix, SVector, Vector2, Vector3, Vector4, Vector6};
use ndarray::ArrayView3;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::ExpertBank;
use crate::features::{image_embedding, Encoder, FeatureMap};
use crate::gating::{select_expert_infer, Router};
use crate::geometry::{nearest_rotation, project_camera, projection_jacobian, so3_exp, CameraIntrinsics, Correspondence, RigidPose};
use crate::nn::Params;

pub const MIN_CORRESPONDENCES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PnpConfig {
    pub threshold_px: f64,
    pub max_iters: usize,
    pub confidence: f64,
    /// A pose is accepted only with at least this fraction of inliers (and
    /// never fewer than twelve).
    pub min_inlier_ratio: f64,
    pub lm_iters: usize,
    /// Inlier scene points must spread, along their second principal axis,
    /// at least this fraction of their mean depth; nearly collinear or
    /// coincident points leave the pose unconstrained.
    pub min_spread_ratio: f64,
}

impl Default for PnpConfig {
    fn default() -> Self {
        Self {
            threshold_px: 10.0,
            max_iters: 10_000,
            confidence: 0.99,
            min_inlier_ratio: 0.1,
            lm_iters: 50,
            min_spread_ratio: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    pub pose: RigidPose,
    pub inliers: usize,
    pub inlier_ratio: f64,
    pub iterations: usize,
    pub success: bool,
}

impl PoseEstimate {
    fn failure(iterations: usize) -> Self {
        Self {
            pose: RigidPose::identity(),
            inliers: 0,
            inlier_ratio: 0.0,
            iterations,
            success: false,
        }
    }
}

/// Linear pose from at least six correspondences. Returns `None` for
/// degenerate configurations.
pub fn dlt_pose(corrs: &[&Correspondence], k: &CameraIntrinsics) -> Option<RigidPose> {
    let n = corrs.len();
    if n < MIN_CORRESPONDENCES {
        return None;
    }
    // Similarity normalization of the 3D points.
    let centroid = corrs.iter().map(|c| c.scene_point).sum::<Vector3<f64>>() / n as f64;
    let mean_dist = corrs.iter().map(|c| (c.scene_point - centroid).norm()).sum::<f64>() / n as f64;
    if !(mean_dist > 1e-12) || !mean_dist.is_finite() {
        return None;
    }
    let s = 3f64.sqrt() / mean_dist;
    let mut t = Matrix4::identity() * s;
    t[(3, 3)] = 1.0;
    t.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-centroid * s));

    let mut ata = SMatrix::<f64, 12, 12>::zeros();
    for c in corrs {
        let x = (c.scene_point - centroid) * s;
        let xh = Vector4::new(x.x, x.y, x.z, 1.0);
        let r = k.ray(&c.pixel);
        let mut r1 = SVector::<f64, 12>::zeros();
        let mut r2 = SVector::<f64, 12>::zeros();
        for j in 0..4 {
            r1[j] = xh[j];
            r1[8 + j] = -r.x * xh[j];
            r2[4 + j] = xh[j];
            r2[8 + j] = -r.y * xh[j];
        }
        ata += r1 * r1.transpose() + r2 * r2.transpose();
    }
    let eig = ata.symmetric_eigen();
    let mut order: Vec<usize> = (0..12).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let max_ev = eig.eigenvalues[order[11]];
    // A second (near-)null direction means the solution is not unique.
    if !(max_ev > 0.0) || eig.eigenvalues[order[1]] < 1e-10 * max_ev {
        return None;
    }
    let v = eig.eigenvectors.column(order[0]);
    let pn = Matrix3x4::from_fn(|r, c| v[r * 4 + c]);
    let mut p = pn * t;
    let m = p.fixed_view::<3, 3>(0, 0).into_owned();
    if m.determinant() < 0.0 {
        p = -p;
    }
    let m = p.fixed_view::<3, 3>(0, 0).into_owned();
    let sv = m.svd(false, false).singular_values;
    let scale = sv.mean();
    if !(scale > 1e-15) {
        return None;
    }
    let rotation = nearest_rotation(&m);
    let translation = p.column(3) / scale;
    let pose = RigidPose { rotation, translation };
    // Cheirality: most points must lie in front of the camera.
    let front = corrs.iter().filter(|c| pose.transform_point(&c.scene_point).z > 0.0).count();
    if 2 * front <= n || !pose.is_finite() {
        return None;
    }
    Some(pose)
}

fn residual(pose: &RigidPose, k: &CameraIntrinsics, c: &Correspondence) -> Option<Vector2<f64>> {
    let pc = pose.transform_point(&c.scene_point);
    let p = project_camera(k, &pc);
    p.valid.then(|| p.pixel - c.pixel)
}

fn count_inliers(pose: &RigidPose, k: &CameraIntrinsics, corrs: &[Correspondence], thr2: f64) -> usize {
    corrs
        .iter()
        .filter(|c| residual(pose, k, c).is_some_and(|r| r.norm_squared() < thr2))
        .count()
}

/// Sum of squared reprojection errors (points behind the camera count as
/// infinite).
pub fn squared_reprojection_cost(pose: &RigidPose, k: &CameraIntrinsics, corrs: &[&Correspondence]) -> f64 {
    corrs
        .iter()
        .map(|c| residual(pose, k, c).map_or(f64::INFINITY, |r| r.norm_squared()))
        .sum()
}

/// Levenberg-Marquardt on the squared reprojection error with a
/// left-multiplied rotation update. Steps are only taken when the cost
/// decreases, so the result is never worse than the input.
pub fn refine_pose_lm(pose: &RigidPose, k: &CameraIntrinsics, corrs: &[&Correspondence], iters: usize) -> RigidPose {
    let mut current = *pose;
    let mut cost = squared_reprojection_cost(&current, k, corrs);
    if !cost.is_finite() {
        return current;
    }
    let mut lambda = 1e-3;
    for _ in 0..iters {
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for c in corrs {
            let pc = current.transform_point(&c.scene_point);
            let r = project_camera(k, &pc).pixel - c.pixel;
            let jp = projection_jacobian(k, &pc);
            let mut jx = SMatrix::<f64, 3, 6>::zeros();
            jx.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-crate::geometry::skew(&pc)));
            jx.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
            let j = jp * jx;
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut a = jtj;
            for d in 0..6 {
                a[(d, d)] += lambda * jtj[(d, d)].max(1e-9);
            }
            let Some(delta) = a.cholesky().map(|ch| ch.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let w = Vector3::new(delta[0], delta[1], delta[2]);
            let dt = Vector3::new(delta[3], delta[4], delta[5]);
            let dr = so3_exp(&w);
            let cand = RigidPose {
                rotation: nearest_rotation(&(dr * current.rotation)),
                translation: dr * current.translation + dt,
            };
            let c2 = squared_reprojection_cost(&cand, k, corrs);
            if c2 < cost {
                let rel = (cost - c2) / cost.max(1e-300);
                current = cand;
                cost = c2;
                lambda = (lambda * 0.1).max(1e-12);
                improved = rel > 1e-15;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    current
}

/// Hypothesize-and-verify over minimal six-point DLT solutions, with
/// adaptive stopping, followed by refinement on the inlier set.
pub fn solve_pnp_ransac(corrs: &[Correspondence], k: &CameraIntrinsics, cfg: &PnpConfig, seed: u64) -> PoseEstimate {
    let n = corrs.len();
    if n < MIN_CORRESPONDENCES {
        return PoseEstimate::failure(0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x504e_5052);
    let thr2 = cfg.threshold_px * cfg.threshold_px;
    let mut best: Option<(RigidPose, usize)> = None;
    let mut needed = cfg.max_iters;
    let mut iterations = 0;
    while iterations < needed.min(cfg.max_iters) {
        iterations += 1;
        let idx = sample(&mut rng, n, MIN_CORRESPONDENCES);
        let sample_corrs: Vec<&Correspondence> = idx.iter().map(|i| &corrs[i]).collect();
        let Some(pose) = dlt_pose(&sample_corrs, k) else {
            continue;
        };
        let inl = count_inliers(&pose, k, corrs, thr2);
        if best.is_none_or(|(_, b)| inl > b) {
            best = Some((pose, inl));
            let w = inl as f64 / n as f64;
            let p_good = w.powi(MIN_CORRESPONDENCES as i32);
            needed = if p_good >= 1.0 - 1e-12 {
                iterations
            } else if p_good <= 0.0 {
                cfg.max_iters
            } else {
                let est = ((1.0 - cfg.confidence).ln() / (1.0 - p_good).ln()).ceil();
                if est.is_finite() {
                    est.max(1.0) as usize
                } else {
                    cfg.max_iters
                }
            };
        }
    }
    // A minimal sample always fits itself; support must come from beyond it.
    let required = (2 * MIN_CORRESPONDENCES).max((cfg.min_inlier_ratio * n as f64).ceil() as usize);
    let Some((mut pose, _)) = best else {
        return PoseEstimate::failure(iterations);
    };
    // Alternate linear re-fit / LM refinement on the current inlier set.
    for _ in 0..3 {
        let inl: Vec<&Correspondence> = corrs
            .iter()
            .filter(|c| residual(&pose, k, c).is_some_and(|r| r.norm_squared() < thr2))
            .collect();
        if inl.len() < MIN_CORRESPONDENCES {
            break;
        }
        let refined = refine_pose_lm(&pose, k, &inl, cfg.lm_iters);
        let before = count_inliers(&pose, k, corrs, thr2);
        if count_inliers(&refined, k, corrs, thr2) < before {
            break;
        }
        pose = refined;
    }
    // Chance outliers inside the gate bias the least-squares fit. Trim to
    // three robust sigmas of the inlier residuals and refit.
    for _ in 0..3 {
        let scored: Vec<(f64, &Correspondence)> = corrs
            .iter()
            .filter_map(|c| residual(&pose, k, c).map(|r| (r.norm(), c)))
            .filter(|(e, _)| e * e < thr2)
            .collect();
        if scored.len() < 2 * MIN_CORRESPONDENCES {
            break;
        }
        let mut errs: Vec<f64> = scored.iter().map(|(e, _)| *e).collect();
        errs.sort_by(f64::total_cmp);
        let gate = 3.0 * 1.4826 * errs[errs.len() / 2];
        let kept: Vec<&Correspondence> = scored.iter().filter(|(e, _)| *e <= gate).map(|(_, c)| *c).collect();
        if kept.len() == scored.len() || kept.len() < MIN_CORRESPONDENCES {
            break;
        }
        let refined = refine_pose_lm(&pose, k, &kept, cfg.lm_iters);
        if count_inliers(&refined, k, corrs, thr2) < count_inliers(&pose, k, corrs, thr2) {
            break;
        }
        pose = refined;
    }
    let inlier_set: Vec<&Correspondence> = corrs
        .iter()
        .filter(|c| residual(&pose, k, c).is_some_and(|r| r.norm_squared() < thr2))
        .collect();
    let inliers = inlier_set.len();
    let constrained = well_spread(&pose, &inlier_set, cfg.min_spread_ratio);
    PoseEstimate {
        pose,
        inliers,
        inlier_ratio: inliers as f64 / n as f64,
        iterations,
        success: inliers >= required && pose.is_finite() && constrained,
    }
}

fn well_spread(pose: &RigidPose, corrs: &[&Correspondence], ratio: f64) -> bool {
    if corrs.len() < MIN_CORRESPONDENCES {
        return false;
    }
    let n = corrs.len() as f64;
    let mean = corrs.iter().map(|c| c.scene_point).sum::<Vector3<f64>>() / n;
    let cov = corrs
        .iter()
        .map(|c| (c.scene_point - mean) * (c.scene_point - mean).transpose())
        .sum::<Matrix3<f64>>()
        / n;
    let mut eig: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let depth = corrs.iter().map(|c| pose.transform_point(&c.scene_point).z).sum::<f64>() / n;
    eig[1].max(0.0).sqrt() >= ratio * depth.abs()
}

/// Correspondences from a dense prediction over a feature grid.
pub fn dense_correspondences(fm: &FeatureMap, coords: &ndarray::Array2<f64>) -> Vec<Correspondence> {
    fm.pixel_centers()
        .into_iter()
        .zip(coords.rows())
        .map(|(px, c)| Correspondence::new(px, Vector3::new(c[0], c[1], c[2])))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameLocalization {
    pub estimate: PoseEstimate,
    pub expert: usize,
}

/// Route an already-encoded frame, evaluate the single selected expert (or
/// `forced_expert`) and solve for the pose.
pub fn localize_features(
    fm: &FeatureMap,
    router: &Router,
    bank: &ExpertBank,
    k: &CameraIntrinsics,
    cfg: &PnpConfig,
    forced_expert: Option<usize>,
    seed: u64,
) -> Result<FrameLocalization> {
    let expert = match forced_expert {
        Some(e) => e,
        None => {
            let emb = image_embedding(fm)?;
            select_expert_infer(router, &emb.view())?
        }
    };
    let coords = bank.predict(expert, &fm.flat())?;
    let corrs = dense_correspondences(fm, &coords);
    Ok(FrameLocalization {
        estimate: solve_pnp_ransac(&corrs, k, cfg, seed),
        expert,
    })
}

pub fn localize_frame(
    image: &ArrayView3<f64>,
    encoder: &Encoder,
    router: &Router,
    bank: &ExpertBank,
    k: &CameraIntrinsics,
    cfg: &PnpConfig,
    seed: u64,
) -> Result<FrameLocalization> {
    let fm = encoder.encode(image)?;
    localize_features(&fm, router, bank, k, cfg, None, seed)
}

/// Lower-middle order statistic.
pub fn lower_median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("median of no values"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v[(v.len() - 1) / 2])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MedianErrors {
    /// Over successful frames only; `None` when every frame failed.
    pub translation_cm: Option<f64>,
    pub rotation_deg: Option<f64>,
    /// Failures counted as infinite error.
    pub translation_cm_all: f64,
    pub rotation_deg_all: f64,
    pub failures: usize,
    pub frames: usize,
}

/// `estimates[i] = None` marks a failed frame.
pub fn median_errors(estimates: &[Option<RigidPose>], ground_truth: &[RigidPose]) -> Result<MedianErrors> {
    if estimates.is_empty() {
        return Err(Error::Empty("no estimates"));
    }
    if estimates.len() != ground_truth.len() {
        return Err(Error::DimensionMismatch {
            context: "median_errors ground truth",
            expected: estimates.len(),
            got: ground_truth.len(),
        });
    }
    let mut t_ok = Vec::new();
    let mut r_ok = Vec::new();
    let mut t_all = Vec::new();
    let mut r_all = Vec::new();
    for (e, gt) in estimates.iter().zip(ground_truth) {
        match e {
            Some(p) => {
                let t = p.center_distance(gt) * 100.0;
                let r = p.rotation_error_deg(gt);
                t_ok.push(t);
                r_ok.push(r);
                t_all.push(t);
                r_all.push(r);
            }
            None => {
                t_all.push(f64::INFINITY);
                r_all.push(f64::INFINITY);
            }
        }
    }
    Ok(MedianErrors {
        translation_cm: lower_median(&t_ok).ok(),
        rotation_deg: lower_median(&r_ok).ok(),
        translation_cm_all: lower_median(&t_all)?,
        rotation_deg_all: lower_median(&r_all)?,
        failures: estimates.len() - t_ok.len(),
        frames: estimates.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapSize {
    /// Encoder + router + decoder + one expert.
    pub activated_bytes: usize,
    /// Same with all experts.
    pub total_bytes: usize,
    pub expert_bytes: usize,
    pub experts: usize,
}

impl MapSize {
    pub fn from_parts(shared_bytes: usize, expert_bytes: usize, experts: usize) -> Self {
        Self {
            activated_bytes: shared_bytes + expert_bytes,
            total_bytes: shared_bytes + experts * expert_bytes,
            expert_bytes,
            experts,
        }
    }
}

pub fn activated_map_size(router: &Router, bank: &ExpertBank, encoder: &Encoder, elem_size: usize) -> MapSize {
    let shared = encoder.num_params() * elem_size + router.param_bytes(elem_size) + bank.decoder.num_params() * elem_size;
    MapSize::from_parts(shared, bank.expert_bytes(elem_size), bank.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame: usize,
    pub expert: usize,
    pub success: bool,
    /// `None` for failed frames.
    pub translation_cm: Option<f64>,
    pub rotation_deg: Option<f64>,
    pub inliers: usize,
    pub inlier_ratio: f64,
    pub ransac_iterations: usize,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub schema_version: u32,
    pub frames: Vec<FrameResult>,
    pub median_translation_cm: Option<f64>,
    pub median_rotation_deg: Option<f64>,
    /// Median with failures counted as infinite; `None` when that median is
    /// itself a failure.
    pub median_translation_cm_with_failures: Option<f64>,
    pub median_rotation_deg_with_failures: Option<f64>,
    pub failure_rate: f64,
    pub frames_evaluated: usize,
    pub map_size: MapSize,
    pub expert_evaluations: Vec<u64>,
}

impl LocalizationReport {
    pub fn new(
        frames: Vec<FrameResult>,
        estimates: &[Option<RigidPose>],
        ground_truth: &[RigidPose],
        map_size: MapSize,
        expert_evaluations: Vec<u64>,
    ) -> Result<Self> {
        let m = median_errors(estimates, ground_truth)?;
        let finite = |v: f64| v.is_finite().then_some(v);
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            median_translation_cm: m.translation_cm,
            median_rotation_deg: m.rotation_deg,
            median_translation_cm_with_failures: finite(m.translation_cm_all),
            median_rotation_deg_with_failures: finite(m.rotation_deg_all),
            failure_rate: m.failures as f64 / m.frames as f64,
            frames_evaluated: m.frames,
            frames,
            map_size,
            expert_evaluations,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        let mut out = String::from("frame,expert,success,translation_cm,rotation_deg,inliers,inlier_ratio\n");
        for f in &self.frames {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                f.frame,
                f.expert,
                f.success,
                fmt(f.translation_cm),
                fmt(f.rotation_deg),
                f.inliers,
                f.inlier_ratio
            ));
        }
        out
    }
}

/// Evaluates every frame of `frames` (already encoded) and builds a report.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_localization(
    features: &[(usize, FeatureMap, CameraIntrinsics, RigidPose)],
    router: &Router,
    bank: &ExpertBank,
    encoder: &Encoder,
    cfg: &PnpConfig,
    forced_expert: Option<usize>,
    seed: u64,
    elem_size: usize,
) -> Result<LocalizationReport> {
    bank.reset_counters();
    let mut frames = Vec::with_capacity(features.len());
    let mut estimates = Vec::with_capacity(features.len());
    let mut gts = Vec::with_capacity(features.len());
    for (frame, fm, k, gt) in features {
        let loc = localize_features(fm, router, bank, k, cfg, forced_expert, seed.wrapping_add(*frame as u64))?;
        let est = loc.estimate;
        let (t, r) = if est.success {
            (Some(est.pose.center_distance(gt) * 100.0), Some(est.pose.rotation_error_deg(gt)))
        } else {
            (None, None)
        };
        frames.push(FrameResult {
            frame: *frame,
            expert: loc.expert,
            success: est.success,
            translation_cm: t,
            rotation_deg: r,
            inliers: est.inliers,
            inlier_ratio: est.inlier_ratio,
            ransac_iterations: est.iterations,
        });
        estimates.push(est.success.then_some(est.pose));
        gts.push(*gt);
    }
    LocalizationReport::new(
        frames,
        &estimates,
        &gts,
        activated_map_size(router, bank, encoder, elem_size),
        bank.evaluation_counts(),
    )
}

/// Map-size accounting for a given architecture without allocating it.
pub fn map_size_for(
    encoder_params: usize,
    descriptor_dim: usize,
    router_hidden: &[usize],
    experts: usize,
    expert: &crate::experts::ExpertConfig,
    decoder_k: usize,
    elem_size: usize,
) -> MapSize {
    let mut widths = vec![descriptor_dim];
    widths.extend(router_hidden);
    widths.push(experts);
    let router: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    let shared = (encoder_params + router + decoder_k * 3) * elem_size;
    MapSize::from_parts(shared, expert.param_count(descriptor_dim, decoder_k) * elem_size, experts)
}

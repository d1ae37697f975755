//! Three-stage training: experts (with the encoder on the first cluster),
//! gate, then joint fine-tuning with soft routing and load balancing.

use nalgebra::{Vector2, Vector3};
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::experts::{kmeans, ExpertBank, ExpertConfig, ExpertHead, PositionDecoder};
use crate::features::{fill_buffer, image_embedding, AugmentConfig, Encoder, EncoderConfig, FeatureMap, TrainingBuffer};
use crate::gating::{argmax_lowest, moe_backward, moe_forward_train, route_logits_batch, MoeInput, Router, RouterConfig};
use crate::geometry::{clamp_schedule, point_loss, CameraIntrinsics, ReprojLossConfig, RigidPose};
use crate::nn::{softmax_rows, AdamW, AdamWConfig, OneCycle, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Freshly initialized, untrained models.
    Init,
    Experts,
    Gate,
    Joint,
    Render,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Experts => "experts",
            Stage::Gate => "gate",
            Stage::Joint => "joint",
            Stage::Render => "render",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "init" => Some(Stage::Init),
            "experts" => Some(Stage::Experts),
            "gate" => Some(Stage::Gate),
            "joint" => Some(Stage::Joint),
            "render" => Some(Stage::Render),
            _ => None,
        }
    }

    /// Stage that must have been completed before this one.
    pub fn prerequisite(&self) -> Option<Stage> {
        match self {
            Stage::Init | Stage::Experts => None,
            Stage::Gate => Some(Stage::Experts),
            Stage::Joint => Some(Stage::Gate),
            Stage::Render => Some(Stage::Joint),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertStageConfig {
    /// Optimization steps for the encoder and the first expert.
    pub encoder_steps: usize,
    pub encoder_images_per_step: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    pub clamp_start: f64,
    pub clamp_end: f64,
    pub augment: bool,
    pub augmentation: AugmentConfig,
}

impl Default for ExpertStageConfig {
    fn default() -> Self {
        Self {
            encoder_steps: 300,
            encoder_images_per_step: 2,
            epochs: 30,
            batch_size: 512,
            buffer_capacity: 100_000,
            lr_min: 2e-4,
            lr_max: 2e-3,
            clamp_start: 50.0,
            clamp_end: 1.0,
            augment: true,
            augmentation: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateStageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    /// Soft clamp used when scoring experts per view to derive labels.
    pub label_clamp: f64,
}

impl Default for GateStageConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            lr_min: 2e-4,
            lr_max: 2e-3,
            label_clamp: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointStageConfig {
    pub epochs: usize,
    pub images_per_batch: usize,
    pub cells_per_image: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    pub clamp: f64,
}

impl Default for JointStageConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            images_per_batch: 8,
            cells_per_image: 256,
            lr_min: 5e-6,
            lr_max: 5e-5,
            clamp: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub experts: usize,
    pub decoder_k: usize,
    pub encoder: EncoderConfig,
    pub expert: ExpertConfig,
    #[serde(rename = "gating")]
    pub router: RouterConfig,
    pub expert_stage: ExpertStageConfig,
    pub gate_stage: GateStageConfig,
    pub joint_stage: JointStageConfig,
    pub loss: ReprojLossConfig,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            experts: 4,
            decoder_k: 50,
            encoder: EncoderConfig::default(),
            expert: ExpertConfig::default(),
            router: RouterConfig::default(),
            expert_stage: ExpertStageConfig::default(),
            gate_stage: GateStageConfig::default(),
            joint_stage: JointStageConfig::default(),
            loss: ReprojLossConfig::default(),
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("experts", self.experts),
            ("decoder_k", self.decoder_k),
            ("expert_stage.epochs", self.expert_stage.epochs),
            ("expert_stage.batch_size", self.expert_stage.batch_size),
            ("expert_stage.buffer_capacity", self.expert_stage.buffer_capacity),
            ("expert_stage.encoder_images_per_step", self.expert_stage.encoder_images_per_step),
            ("gate_stage.epochs", self.gate_stage.epochs),
            ("gate_stage.batch_size", self.gate_stage.batch_size),
            ("joint_stage.images_per_batch", self.joint_stage.images_per_batch),
            ("joint_stage.cells_per_image", self.joint_stage.cells_per_image),
            ("encoder.descriptor_dim", self.encoder.descriptor_dim),
            ("expert.width", self.expert.width),
            ("expert.head_width", self.expert.head_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let rates = [
            ("expert_stage.lr_min", self.expert_stage.lr_min),
            ("expert_stage.lr_max", self.expert_stage.lr_max),
            ("expert_stage.clamp_start", self.expert_stage.clamp_start),
            ("expert_stage.clamp_end", self.expert_stage.clamp_end),
            ("gate_stage.lr_min", self.gate_stage.lr_min),
            ("gate_stage.lr_max", self.gate_stage.lr_max),
            ("gate_stage.label_clamp", self.gate_stage.label_clamp),
            ("joint_stage.lr_min", self.joint_stage.lr_min),
            ("joint_stage.lr_max", self.joint_stage.lr_max),
            ("joint_stage.clamp", self.joint_stage.clamp),
            ("router.tau_start", self.router.tau_start),
            ("router.tau_end", self.router.tau_end),
            ("router.eta", self.router.eta),
        ];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.router.gamma) {
            return Err(Error::Config(format!("router.gamma must lie in [0, 1], got {}", self.router.gamma)));
        }
        Ok(())
    }
}

/// One row of a stage's metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub stage: String,
    /// Expert being trained, when the stage trains one at a time.
    pub expert: Option<usize>,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub clamp: f64,
    pub tau: Option<f64>,
    pub usage: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let k = self.rows.iter().map(|r| r.usage.len().max(r.bias.len())).max().unwrap_or(0);
        let mut out = String::from("stage,expert,step,loss,lr,clamp,tau");
        for i in 0..k {
            out.push_str(&format!(",usage_{i}"));
        }
        for i in 0..k {
            out.push_str(&format!(",bias_{i}"));
        }
        out.push('\n');
        let opt = |v: Option<String>| v.unwrap_or_default();
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}",
                r.stage,
                opt(r.expert.map(|e| e.to_string())),
                r.step,
                r.loss,
                r.lr,
                r.clamp,
                opt(r.tau.map(|t| t.to_string()))
            ));
            for i in 0..k {
                out.push_str(&format!(",{}", opt(r.usage.get(i).map(|v| v.to_string()))));
            }
            for i in 0..k {
                out.push_str(&format!(",{}", opt(r.bias.get(i).map(|v| v.to_string()))));
            }
            out.push('\n');
        }
        out
    }

    /// Loss series of one expert (or of the whole log for `None`).
    pub fn losses(&self, stage: &str, expert: Option<usize>) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.stage == stage && (expert.is_none() || r.expert == expert))
            .map(|r| r.loss)
            .collect()
    }
}

fn guard(loss: f64, stage: &str, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("{stage} stage: loss {loss} at step {step}")))
    }
}

/// K-Means on camera centers; every cluster is nonempty.
pub fn cluster_scene(poses: &[RigidPose], k: usize, seed: u64) -> Result<Vec<usize>> {
    if poses.len() < k {
        return Err(Error::invalid(format!("{} views cannot form {k} clusters", poses.len())));
    }
    let centers: Vec<Vector3<f64>> = poses.iter().map(|p| p.camera_center()).collect();
    Ok(kmeans(&centers, k, seed, 100)?.assignment)
}

/// Per-frame views (index, pose, intrinsics) of `frames`.
fn frame_views(dataset: &Dataset, frames: &[usize]) -> Result<Vec<(RigidPose, CameraIntrinsics)>> {
    frames
        .iter()
        .map(|&i| {
            dataset
                .frames
                .get(i)
                .map(|f| (f.pose, f.intrinsics))
                .ok_or_else(|| Error::invalid(format!("frame index {i} out of range")))
        })
        .collect()
}

/// Decoder centers from all training cameras, scene-wide.
pub fn build_decoder(dataset: &Dataset, frames: &[usize], k: usize, seed: u64) -> Result<PositionDecoder> {
    let centers: Vec<Vector3<f64>> = frame_views(dataset, frames)?
        .iter()
        .map(|(p, _)| p.camera_center())
        .collect();
    PositionDecoder::new(&kmeans(&centers, k.min(centers.len()), seed ^ 0xdec0, 100)?.centers)
}

/// Fresh encoder and expert bank. Each expert's decoder logits start at a
/// Gaussian prior around its cluster's mean camera position.
pub fn init_models(
    dataset: &Dataset,
    frames: &[usize],
    assignment: &[usize],
    cfg: &TrainConfig,
) -> Result<(Encoder, ExpertBank)> {
    cfg.validate()?;
    if frames.len() != assignment.len() {
        return Err(Error::DimensionMismatch {
            context: "cluster assignment",
            expected: frames.len(),
            got: assignment.len(),
        });
    }
    let encoder = Encoder::new(&cfg.encoder, cfg.seed);
    let decoder = build_decoder(dataset, frames, cfg.decoder_k, cfg.seed)?;
    let views = frame_views(dataset, frames)?;
    let mut experts = Vec::with_capacity(cfg.experts);
    for e in 0..cfg.experts {
        let members: Vec<Vector3<f64>> = views
            .iter()
            .zip(assignment)
            .filter(|(_, &a)| a == e)
            .map(|((p, _), _)| p.camera_center())
            .collect();
        if members.is_empty() {
            return Err(Error::invalid(format!("cluster {e} has no views")));
        }
        let mean = members.iter().sum::<Vector3<f64>>() / members.len() as f64;
        let spread = (members.iter().map(|c| (c - mean).norm_squared()).sum::<f64>() / members.len() as f64)
            .sqrt()
            .max(1e-3);
        let mut head = ExpertHead::new(&cfg.expert, cfg.encoder.descriptor_dim, decoder.k(), cfg.seed.wrapping_add(e as u64 * 7919));
        head.init_prior(&decoder, &mean, spread);
        experts.push(head);
    }
    Ok((encoder, ExpertBank::new(experts, decoder)))
}

/// Mean robust loss over a batch and `dL/dpos` rows.
fn batch_loss(
    pos: &Array2<f64>,
    pixels: &[Vector2<f64>],
    views: &[(RigidPose, CameraIntrinsics)],
    clamp: f64,
    cfg: &ReprojLossConfig,
) -> (f64, Array2<f64>) {
    let n = pos.nrows();
    let mut grad = Array2::zeros((n, 3));
    let mut total = 0.0;
    for i in 0..n {
        let p = Vector3::new(pos[(i, 0)], pos[(i, 1)], pos[(i, 2)]);
        let (pose, k) = &views[i];
        let pl = point_loss(&p, &pixels[i], pose, k, clamp, cfg);
        total += pl.value;
        for j in 0..3 {
            grad[(i, j)] = pl.grad[j] / n as f64;
        }
    }
    (total / n as f64, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertStageReport {
    pub final_losses: Vec<f64>,
    pub buffer_sizes: Vec<usize>,
}

/// Joint encoder + first-expert training on whole images of cluster 0.
fn train_encoder(
    dataset: &Dataset,
    frames: &[usize],
    encoder: &mut Encoder,
    bank: &mut ExpertBank,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<()> {
    let sc = &cfg.expert_stage;
    if sc.encoder_steps == 0 {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x454e_4354);
    let mut enc_opt = AdamW::new(cfg.optimizer, encoder.num_params());
    let mut exp_opt = AdamW::new(cfg.optimizer, bank.experts[0].num_params());
    let sched = OneCycle {
        floor: sc.lr_min,
        peak: sc.lr_max,
        warmup: 0.25,
        total_steps: sc.encoder_steps,
    };
    for step in 0..sc.encoder_steps {
        let lr = sched.lr(step);
        let clamp = clamp_schedule(sc.clamp_start, sc.clamp_end, step as f64 / sc.encoder_steps as f64);
        let mut enc_grad = encoder.zeros_like();
        let mut exp_grad = bank.experts[0].zeros_like();
        let mut loss = 0.0;
        for _ in 0..sc.encoder_images_per_step {
            let fi = frames[rng.random_range(0..frames.len())];
            let frame = &dataset.frames[fi];
            let (image, pose, k) = if sc.augment {
                let a = &sc.augmentation;
                let angle = rng.random_range(-a.max_rotation_deg..=a.max_rotation_deg).to_radians();
                let scale = rng.random_range(a.scale_range[0]..=a.scale_range[1]);
                let av = crate::features::augment_view(&frame.image.view(), &frame.intrinsics, &frame.pose, angle, scale);
                (av.image, av.pose, av.intrinsics)
            } else {
                (frame.image.clone(), frame.pose, frame.intrinsics)
            };
            let (fm, cache) = encoder.encode_cached(&image.view())?;
            let x = fm.flat().to_owned();
            let (pos, ecache) = bank.experts[0].forward_cached(&bank.decoder, &x.view())?;
            let pixels = fm.pixel_centers();
            let views = vec![(pose, k); pixels.len()];
            let (l, mut dpos) = batch_loss(&pos, &pixels, &views, clamp, &cfg.loss);
            dpos /= sc.encoder_images_per_step as f64;
            loss += l / sc.encoder_images_per_step as f64;
            let dx = bank.experts[0].backward(&bank.decoder, &ecache, &dpos.view(), &mut exp_grad);
            encoder.backward(&cache, &dx.view(), &mut enc_grad);
        }
        guard(loss, "experts", step)?;
        enc_opt.step(encoder, &enc_grad, lr);
        exp_opt.step(&mut bank.experts[0], &exp_grad, lr);
        log.rows.push(LogRow {
            stage: "encoder".into(),
            expert: Some(0),
            step,
            loss,
            lr,
            clamp,
            tau: None,
            usage: Vec::new(),
            bias: Vec::new(),
        });
    }
    Ok(())
}

/// Buffer-based training of one expert; returns the final-epoch mean loss.
pub fn train_expert_on_buffer(
    expert: &mut ExpertHead,
    decoder: &PositionDecoder,
    buffer: &TrainingBuffer,
    cfg: &TrainConfig,
    expert_index: usize,
    log: &mut TrainLog,
) -> Result<f64> {
    let sc = &cfg.expert_stage;
    let n = buffer.len();
    if n == 0 {
        return Err(Error::Empty("training buffer"));
    }
    let batch = sc.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(batch);
    let total = steps_per_epoch * sc.epochs;
    let sched = OneCycle {
        floor: sc.lr_min,
        peak: sc.lr_max,
        warmup: 0.25,
        total_steps: total,
    };
    let mut opt = AdamW::new(cfg.optimizer, expert.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x4255_4600 + expert_index as u64));
    let mut order: Vec<usize> = (0..n).collect();
    let views: Vec<(RigidPose, CameraIntrinsics)> = buffer.views.iter().map(|v| (v.pose, v.intrinsics)).collect();
    let mut step = 0;
    let mut last_epoch_loss = f64::NAN;
    for _epoch in 0..sc.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let lr = sched.lr(step);
            let clamp = clamp_schedule(sc.clamp_start, sc.clamp_end, step as f64 / total.max(1) as f64);
            let x = buffer.descriptors.select(Axis(0), chunk);
            let pixels: Vec<Vector2<f64>> = chunk.iter().map(|&i| buffer.pixels[i]).collect();
            let bviews: Vec<(RigidPose, CameraIntrinsics)> = chunk.iter().map(|&i| views[buffer.view[i]]).collect();
            let (pos, cache) = expert.forward_cached(decoder, &x.view())?;
            let (loss, dpos) = batch_loss(&pos, &pixels, &bviews, clamp, &cfg.loss);
            guard(loss, "experts", step)?;
            let mut grad = expert.zeros_like();
            expert.backward(decoder, &cache, &dpos.view(), &mut grad);
            opt.step(expert, &grad, lr);
            epoch_loss += loss * chunk.len() as f64 / n as f64;
            log.rows.push(LogRow {
                stage: "experts".into(),
                expert: Some(expert_index),
                step,
                loss,
                lr,
                clamp,
                tau: None,
                usage: Vec::new(),
                bias: Vec::new(),
            });
            step += 1;
        }
        last_epoch_loss = epoch_loss;
    }
    Ok(last_epoch_loss)
}

/// Stage 1: the encoder is trained with the first expert on whole images of
/// cluster 0 and then frozen; every expert is then trained on a buffer of
/// its cluster's descriptors.
pub fn pretrain_experts(
    dataset: &Dataset,
    frames: &[usize],
    assignment: &[usize],
    cfg: &TrainConfig,
    encoder: &mut Encoder,
    bank: &mut ExpertBank,
    log: &mut TrainLog,
) -> Result<ExpertStageReport> {
    cfg.validate()?;
    if frames.len() != assignment.len() {
        return Err(Error::DimensionMismatch {
            context: "cluster assignment",
            expected: frames.len(),
            got: assignment.len(),
        });
    }
    if bank.len() != cfg.experts {
        return Err(Error::DimensionMismatch {
            context: "expert bank size",
            expected: cfg.experts,
            got: bank.len(),
        });
    }
    let clusters: Vec<Vec<usize>> = (0..cfg.experts)
        .map(|e| frames.iter().zip(assignment).filter(|(_, &a)| a == e).map(|(&f, _)| f).collect())
        .collect();
    if let Some(e) = clusters.iter().position(|c| c.is_empty()) {
        return Err(Error::invalid(format!("cluster {e} has no views")));
    }
    train_encoder(dataset, &clusters[0], encoder, bank, cfg, log)?;
    let mut final_losses = Vec::with_capacity(cfg.experts);
    let mut buffer_sizes = Vec::with_capacity(cfg.experts);
    let augment = cfg.expert_stage.augment.then_some(&cfg.expert_stage.augmentation);
    for (e, members) in clusters.iter().enumerate() {
        let buffer = fill_buffer(
            dataset,
            members,
            encoder,
            cfg.expert_stage.buffer_capacity,
            augment,
            cfg.seed.wrapping_add(e as u64),
        )?;
        buffer_sizes.push(buffer.len());
        let decoder = bank.decoder.clone();
        let loss = train_expert_on_buffer(&mut bank.experts[e], &decoder, &buffer, cfg, e, log)?;
        final_losses.push(loss);
    }
    Ok(ExpertStageReport {
        final_losses,
        buffer_sizes,
    })
}

/// Encodes `frames` with the frozen encoder.
pub fn encode_frames(dataset: &Dataset, frames: &[usize], encoder: &Encoder) -> Result<Vec<FeatureMap>> {
    use rayon::prelude::*;
    frames
        .par_iter()
        .map(|&i| {
            let f = dataset
                .frames
                .get(i)
                .ok_or_else(|| Error::invalid(format!("frame index {i} out of range")))?;
            encoder.encode(&f.image.view())
        })
        .collect()
}

/// Mean soft-clamped reprojection loss of every expert on one view.
pub fn per_view_expert_losses(
    fm: &FeatureMap,
    pose: &RigidPose,
    k: &CameraIntrinsics,
    bank: &ExpertBank,
    clamp: f64,
    cfg: &ReprojLossConfig,
) -> Result<Vec<f64>> {
    let pixels = fm.pixel_centers();
    let views = vec![(*pose, *k); pixels.len()];
    bank.experts
        .iter()
        .map(|e| {
            let pos = e.forward(&bank.decoder, &fm.flat())?;
            Ok(batch_loss(&pos, &pixels, &views, clamp, cfg).0)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateStageReport {
    pub labels: Vec<usize>,
    pub train_accuracy: f64,
    pub final_loss: f64,
}

/// Label per view: the expert with the lowest robust loss (lowest index on
/// ties).
pub fn gate_labels(
    dataset: &Dataset,
    frames: &[usize],
    features: &[FeatureMap],
    bank: &ExpertBank,
    cfg: &TrainConfig,
) -> Result<Vec<usize>> {
    frames
        .iter()
        .zip(features)
        .map(|(&fi, fm)| {
            let f = &dataset.frames[fi];
            let losses = per_view_expert_losses(fm, &f.pose, &f.intrinsics, bank, cfg.gate_stage.label_clamp, &cfg.loss)?;
            let neg: Vec<f64> = losses.iter().map(|l| -l).collect();
            Ok(argmax_lowest(&neg))
        })
        .collect()
}

pub fn embeddings(features: &[FeatureMap]) -> Result<Array2<f64>> {
    let first = features.first().ok_or(Error::Empty("feature maps"))?;
    let mut out = Array2::zeros((features.len(), first.dim()));
    for (i, fm) in features.iter().enumerate() {
        out.row_mut(i).assign(&image_embedding(fm)?);
    }
    Ok(out)
}

/// Noise-free top-1 accuracy of the router's biased logits against labels.
pub fn gate_accuracy(router: &Router, emb: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("labels"));
    }
    let z = route_logits_batch(router, &emb.view())?;
    let correct = z
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &l)| {
            let zt: Vec<f64> = row.iter().zip(&router.bias).map(|(a, b)| a + b).collect();
            argmax_lowest(&zt) == l
        })
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Stage 2: cross-entropy on argmin-loss labels. Experts are read-only;
/// no Gumbel noise and no balancing updates.
pub fn pretrain_gate(
    dataset: &Dataset,
    frames: &[usize],
    encoder: &Encoder,
    bank: &ExpertBank,
    router: &mut Router,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<GateStageReport> {
    cfg.validate()?;
    if router.experts() != bank.len() {
        return Err(Error::DimensionMismatch {
            context: "router outputs",
            expected: bank.len(),
            got: router.experts(),
        });
    }
    if frames.is_empty() {
        return Err(Error::Empty("gate training views"));
    }
    let features = encode_frames(dataset, frames, encoder)?;
    let labels = gate_labels(dataset, frames, &features, bank, cfg)?;
    let emb = embeddings(&features)?;
    let final_loss = fit_router(router, &emb, &labels, cfg, log)?;
    Ok(GateStageReport {
        train_accuracy: gate_accuracy(router, &emb, &labels)?,
        labels,
        final_loss,
    })
}

/// Cross-entropy fit of the router MLP to per-view labels; returns the
/// last batch loss.
pub fn fit_router(router: &mut Router, emb: &Array2<f64>, labels: &[usize], cfg: &TrainConfig, log: &mut TrainLog) -> Result<f64> {
    if labels.len() != emb.nrows() {
        return Err(Error::DimensionMismatch {
            context: "router labels",
            expected: emb.nrows(),
            got: labels.len(),
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= router.experts()) {
        return Err(Error::invalid(format!("label {l} out of range for {} experts", router.experts())));
    }
    let gc = &cfg.gate_stage;
    let n = labels.len();
    if n == 0 {
        return Err(Error::Empty("router labels"));
    }
    let batch = gc.batch_size.min(n);
    let total = n.div_ceil(batch) * gc.epochs;
    let sched = OneCycle {
        floor: gc.lr_min,
        peak: gc.lr_max,
        warmup: 0.25,
        total_steps: total,
    };
    let mut opt = AdamW::new(cfg.optimizer, router.mlp.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4741_5445);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    let mut final_loss = f64::NAN;
    for _ in 0..gc.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let lr = sched.lr(step);
            let x = emb.select(Axis(0), chunk);
            let (mut z, cache) = router.mlp.forward_cached(&x.view());
            z += &router.bias;
            softmax_rows(&mut z);
            let mut loss = 0.0;
            let mut dz = z.clone();
            for (r, &i) in chunk.iter().enumerate() {
                loss -= z[(r, labels[i])].max(1e-300).ln();
                dz[(r, labels[i])] -= 1.0;
            }
            loss /= chunk.len() as f64;
            dz /= chunk.len() as f64;
            guard(loss, "gate", step)?;
            let mut grad = router.mlp.zeros_like();
            router.mlp.backward(&cache, &dz.view(), &mut grad);
            opt.step(&mut router.mlp, &grad, lr);
            final_loss = loss;
            log.rows.push(LogRow {
                stage: "gate".into(),
                expert: None,
                step,
                loss,
                lr,
                clamp: gc.label_clamp,
                tau: None,
                usage: router.usage.to_vec(),
                bias: router.bias.to_vec(),
            });
            step += 1;
        }
    }
    Ok(final_loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointStageReport {
    pub final_loss: f64,
    pub usage: Vec<f64>,
    pub bias: Vec<f64>,
    /// Hard (argmax) routing counts per expert over the whole stage.
    pub selections: Vec<usize>,
}

/// Stage 3: soft Gumbel-Softmax fusion over all experts, reprojection loss,
/// gradient step on experts and router MLP, then one balancing step per
/// batch. `frames` may repeat views to skew the stream.
pub fn joint_finetune(
    dataset: &Dataset,
    frames: &[usize],
    encoder: &Encoder,
    bank: &mut ExpertBank,
    router: &mut Router,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<JointStageReport> {
    cfg.validate()?;
    if router.experts() != bank.len() {
        return Err(Error::DimensionMismatch {
            context: "router outputs",
            expected: bank.len(),
            got: router.experts(),
        });
    }
    if frames.is_empty() {
        return Err(Error::Empty("joint training views"));
    }
    router.configure(&cfg.router)?;
    let jc = &cfg.joint_stage;
    let features = encode_frames(dataset, frames, encoder)?;
    let emb = embeddings(&features)?;
    let views = frame_views(dataset, frames)?;
    let n = frames.len();
    let per_batch = jc.images_per_batch.min(n);
    let steps_per_epoch = n.div_ceil(per_batch);
    let total = steps_per_epoch * jc.epochs;
    let sched = OneCycle {
        floor: jc.lr_min,
        peak: jc.lr_max,
        warmup: 0.25,
        total_steps: total,
    };
    let mut router_opt = AdamW::new(cfg.optimizer, router.mlp.num_params());
    let mut expert_opts: Vec<AdamW> = bank.experts.iter().map(|e| AdamW::new(cfg.optimizer, e.num_params())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4a4f_494e);
    let mut order: Vec<usize> = (0..n).collect();
    let mut selections = vec![0usize; bank.len()];
    let mut step = 0;
    let mut final_loss = f64::NAN;
    for _ in 0..jc.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(per_batch) {
            let lr = sched.lr(step);
            let progress = if total > 1 { step as f64 / (total - 1) as f64 } else { 1.0 };
            router.tau = cfg.router.tau_start * (cfg.router.tau_end / cfg.router.tau_start).powf(progress);
            let mut cells: Vec<Vec<usize>> = Vec::with_capacity(chunk.len());
            let mut descs: Vec<Array2<f64>> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let fm = &features[i];
                let take = jc.cells_per_image.min(fm.cells());
                let idx = rand::seq::index::sample(&mut rng, fm.cells(), take).into_vec();
                descs.push(fm.flat().select(Axis(0), &idx));
                cells.push(idx);
            }
            let embs: Vec<Array1<f64>> = chunk.iter().map(|&i| emb.row(i).to_owned()).collect();
            let inputs: Vec<MoeInput> = embs
                .iter()
                .zip(&descs)
                .map(|(e, d)| MoeInput {
                    embedding: e.view(),
                    descriptors: d.view(),
                })
                .collect();
            let out = moe_forward_train(router, bank, &inputs, &mut rng)?;
            let total_cells: usize = cells.iter().map(Vec::len).sum();
            let mut loss = 0.0;
            let mut dcoords = Vec::with_capacity(chunk.len());
            for (b, &i) in chunk.iter().enumerate() {
                let centers = features[i].pixel_centers();
                let pixels: Vec<Vector2<f64>> = cells[b].iter().map(|&c| centers[c]).collect();
                let v = vec![views[i]; pixels.len()];
                let (l, mut g) = batch_loss(&out.coords[b], &pixels, &v, jc.clamp, &cfg.loss);
                let w = pixels.len() as f64 / total_cells as f64;
                loss += l * w;
                g *= w;
                dcoords.push(g);
                selections[argmax_lowest(out.alpha.row(b).as_slice().expect("contiguous"))] += 1;
            }
            guard(loss, "joint", step)?;
            let mut rgrad = router.mlp.zeros_like();
            let mut egrads: Vec<ExpertHead> = bank.experts.iter().map(ExpertHead::zeros_like).collect();
            moe_backward(router, bank, &out.cache, &dcoords, &mut rgrad, Some(&mut egrads));
            router_opt.step(&mut router.mlp, &rgrad, lr);
            for ((e, opt), g) in bank.experts.iter_mut().zip(&mut expert_opts).zip(&egrads) {
                opt.step(e, g, lr);
            }
            final_loss = loss;
            log.rows.push(LogRow {
                stage: "joint".into(),
                expert: None,
                step,
                loss,
                lr,
                clamp: jc.clamp,
                tau: Some(router.tau),
                usage: router.usage.to_vec(),
                bias: router.bias.to_vec(),
            });
            step += 1;
        }
    }
    Ok(JointStageReport {
        final_loss,
        usage: router.usage.to_vec(),
        bias: router.bias.to_vec(),
        selections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::Router;
    use crate::geometry::project;
    use crate::synth::{build_dataset, generate_scene, generate_trajectory, SceneConfig, SynthConfig, TrajectorySpec};

    fn small_dataset(regions: usize, frames_per_region: usize, seed: u64) -> Dataset {
        let cfg = SynthConfig {
            seed,
            scene: SceneConfig {
                regions,
                points_per_region: 12_000,
                ..Default::default()
            },
            trajectory: TrajectorySpec {
                frames_per_region,
                width: 64,
                height: 64,
                focal: 55.0,
                ..Default::default()
            },
            ..Default::default()
        };
        build_dataset(&cfg).unwrap().1
    }

    fn small_config(experts: usize) -> TrainConfig {
        let mut cfg = TrainConfig {
            seed: 5,
            experts,
            decoder_k: 16,
            ..Default::default()
        };
        cfg.encoder = EncoderConfig {
            channels: [8, 16, 32],
            descriptor_dim: 32,
        };
        cfg.expert = ExpertConfig {
            width: 64,
            blocks: 1,
            head_width: 64,
        };
        cfg.router.hidden = vec![32];
        cfg.expert_stage.encoder_steps = 150;
        cfg.expert_stage.epochs = 12;
        cfg.expert_stage.batch_size = 256;
        cfg.expert_stage.buffer_capacity = 20_000;
        cfg.expert_stage.augment = false;
        cfg.gate_stage.epochs = 30;
        cfg
    }

    fn assignment(ds: &Dataset, map: &[usize], k: usize, seed: u64) -> Vec<usize> {
        let poses: Vec<_> = map.iter().map(|&i| ds.frames[i].pose).collect();
        cluster_scene(&poses, k, seed).unwrap()
    }

    #[test]
    fn clustering_contracts() {
        let scene = generate_scene(&SceneConfig::default(), 2).unwrap();
        let traj = generate_trajectory(&scene, &TrajectorySpec::default(), 2).unwrap();
        let poses: Vec<_> = traj.iter().map(|f| f.pose).collect();
        assert!(cluster_scene(&poses, 1, 0).unwrap().iter().all(|&a| a == 0));
        assert!(cluster_scene(&poses[..3], 4, 0).is_err());
        let a = cluster_scene(&poses, 4, 9).unwrap();
        assert_eq!(a, cluster_scene(&poses, 4, 9).unwrap());
        // Agreement with the region labels under the best label permutation.
        let mut best = 0;
        let mut perm = [0, 1, 2, 3];
        let mut permute = |p: &[usize; 4]| {
            let hits = traj.iter().zip(&a).filter(|(f, &c)| p[c] == f.region).count();
            best = best.max(hits);
        };
        heap_permutations(&mut perm, 4, &mut permute);
        assert!(best as f64 >= 0.95 * traj.len() as f64, "{best}/{}", traj.len());
    }

    fn heap_permutations(p: &mut [usize; 4], k: usize, f: &mut impl FnMut(&[usize; 4])) {
        if k == 1 {
            f(p);
            return;
        }
        for i in 0..k {
            heap_permutations(p, k - 1, f);
            let j = if k % 2 == 0 { i } else { 0 };
            p.swap(j, k - 1);
        }
    }

    fn train_single_region() -> (Dataset, Encoder, ExpertBank, TrainLog, ExpertStageReport) {
        let ds = small_dataset(1, 16, 4);
        let map = ds.map_indices();
        let cfg = small_config(1);
        let a = assignment(&ds, &map, 1, cfg.seed);
        let (mut enc, mut bank) = init_models(&ds, &map, &a, &cfg).unwrap();
        let mut log = TrainLog::default();
        let rep = pretrain_experts(&ds, &map, &a, &cfg, &mut enc, &mut bank, &mut log).unwrap();
        (ds, enc, bank, log, rep)
    }

    #[test]
    fn single_region_expert_fits_and_is_deterministic() {
        let (ds, enc, bank, log, rep) = train_single_region();
        let map = ds.map_indices();
        let mut errors = Vec::new();
        for (&i, fm) in map.iter().zip(encode_frames(&ds, &map, &enc).unwrap()) {
            let f = &ds.frames[i];
            let gt = f.gt.as_ref().unwrap();
            let pred = bank.experts[0].forward(&bank.decoder, &fm.flat()).unwrap();
            for (c, px) in fm.pixel_centers().iter().enumerate() {
                if !gt.valid[(px.y as usize, px.x as usize)] {
                    continue;
                }
                let p = Vector3::new(pred[(c, 0)], pred[(c, 1)], pred[(c, 2)]);
                let pr = project(&f.pose, &f.intrinsics, &p);
                errors.push(if pr.valid { (pr.pixel - px).norm() } else { f64::INFINITY });
            }
        }
        errors.sort_by(f64::total_cmp);
        let median = errors[errors.len() / 2];
        assert!(median < 5.0, "median reprojection {median:.2} px");

        let losses = log.losses("experts", Some(0));
        assert!(losses.iter().all(|l| l.is_finite()));
        let w = 100.min(losses.len() / 2);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        assert!(mean(&losses[losses.len() - w..]) < mean(&losses[..w]));
        let enc_losses = log.losses("encoder", Some(0));
        let w = 100.min(enc_losses.len() / 2);
        assert!(mean(&enc_losses[enc_losses.len() - w..]) < mean(&enc_losses[..w]));

        let (_, enc2, bank2, _, rep2) = train_single_region();
        assert!((rep.final_losses[0] - rep2.final_losses[0]).abs() < 1e-5);
        assert_eq!(enc, enc2);
        assert_eq!(bank, bank2);
    }

    #[test]
    fn gate_stage_is_isolated_and_trivial_for_one_expert() {
        let ds = small_dataset(2, 8, 6);
        let map = ds.map_indices();
        let mut cfg = small_config(1);
        cfg.gate_stage.epochs = 2;
        let a = assignment(&ds, &map, 1, cfg.seed);
        let (enc, bank) = init_models(&ds, &map, &a, &cfg).unwrap();
        let mut router = Router::new(&cfg.router, cfg.encoder.descriptor_dim, 1, 0).unwrap();
        let before = bank.clone();
        let rep = pretrain_gate(&ds, &map, &enc, &bank, &mut router, &cfg, &mut TrainLog::default()).unwrap();
        assert_eq!(rep.train_accuracy, 1.0);
        assert_eq!(bank, before);

        let mut cfg = small_config(2);
        cfg.gate_stage.epochs = 2;
        cfg.joint_stage.epochs = 1;
        let a = assignment(&ds, &map, 2, cfg.seed);
        let (enc, mut bank) = init_models(&ds, &map, &a, &cfg).unwrap();
        let mut router = Router::new(&cfg.router, cfg.encoder.descriptor_dim, 2, 0).unwrap();
        let frozen = bank.clone();
        let router_before = router.clone();
        pretrain_gate(&ds, &map, &enc, &bank, &mut router, &cfg, &mut TrainLog::default()).unwrap();
        assert_eq!(bank, frozen);
        assert_eq!(router.bias, router_before.bias);
        assert_eq!(router.usage, router_before.usage);
        let enc_before = enc.clone();
        joint_finetune(&ds, &map, &enc, &mut bank, &mut router, &cfg, &mut TrainLog::default()).unwrap();
        assert_eq!(enc, enc_before);
        assert_ne!(bank, frozen);
    }

    /// Routes a 90/10 region-skewed stream through joint training with the
    /// router pre-fit to the regions; returns max/min usage and the log.
    fn skewed_joint(load_balancing: bool) -> (f64, TrainLog) {
        let ds = small_dataset(2, 10, 8);
        let map = ds.map_indices();
        let mut cfg = small_config(2);
        cfg.router.load_balancing = load_balancing;
        cfg.router.eta = 0.05;
        // 400 steps: several usage-EMA time constants.
        cfg.joint_stage.epochs = 20;
        cfg.joint_stage.images_per_batch = 4;
        cfg.joint_stage.cells_per_image = 8;
        let regions: Vec<usize> = map.iter().map(|&i| ds.frames[i].region.unwrap()).collect();
        let (enc, mut bank) = init_models(&ds, &map, &regions, &cfg).unwrap();
        let mut router = Router::new(&cfg.router, cfg.encoder.descriptor_dim, 2, cfg.seed).unwrap();
        let feats = encode_frames(&ds, &map, &enc).unwrap();
        let emb = embeddings(&feats).unwrap();
        cfg.gate_stage.epochs = 300;
        fit_router(&mut router, &emb, &regions, &cfg, &mut TrainLog::default()).unwrap();
        assert_eq!(gate_accuracy(&router, &emb, &regions).unwrap(), 1.0);
        let r0: Vec<usize> = map.iter().zip(&regions).filter(|(_, &r)| r == 0).map(|(&i, _)| i).collect();
        let r1: Vec<usize> = map.iter().zip(&regions).filter(|(_, &r)| r == 1).map(|(&i, _)| i).collect();
        let mut stream = Vec::new();
        for round in 0..8 {
            for k in 0..9 {
                stream.push(r0[(round * 9 + k) % r0.len()]);
            }
            stream.push(r1[round % r1.len()]);
        }
        let mut log = TrainLog::default();
        let rep = joint_finetune(&ds, &stream, &enc, &mut bank, &mut router, &cfg, &mut log).unwrap();
        let hi = rep.usage.iter().cloned().fold(f64::MIN, f64::max);
        let lo = rep.usage.iter().cloned().fold(f64::MAX, f64::min);
        (hi / lo, log)
    }

    #[test]
    fn balancing_flattens_a_skewed_stream() {
        let (ratio_off, log_off) = skewed_joint(false);
        assert!(ratio_off > 3.0, "without balancing the ratio is {ratio_off:.2}");
        assert!(log_off.rows.iter().all(|r| r.bias.iter().all(|&b| b == 0.0)));
        let (ratio_on, log_on) = skewed_joint(true);
        assert!(ratio_on <= 1.5, "with balancing the ratio is {ratio_on:.2}");
        for r in &log_on.rows {
            assert!(r.bias.iter().sum::<f64>().abs() < 1e-6);
        }
    }
}

//! On-disk formats: dataset manifests, PNG images, checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4};
use ndarray::Array3;
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::dataset::{Dataset, Frame, Split};
use crate::error::{Error, Result};
use crate::experts::{ExpertBank, ExpertHead, PositionDecoder};
use crate::features::Encoder;
use crate::gating::Router;
use crate::geometry::{nearest_rotation, CameraIntrinsics, RigidPose};
use crate::nn::Params;
use crate::render::RenderHead;
use crate::trainer::Stage;

pub const MANIFEST_MAGIC: &str = "mace-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const POSE_TOLERANCE: f64 = 1e-3;

pub fn load_png(path: &Path) -> Result<Array3<f64>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

pub fn save_png(image: &Array3<f64>, path: &Path) -> Result<()> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::DimensionMismatch {
            context: "png channels",
            expected: 3,
            got: c,
        });
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        for ch in 0..3 {
            p[ch] = (image[(y as usize, x as usize, ch)].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    buf.save(path)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoseConvention {
    WorldToCamera,
    CameraToWorld,
}

/// Validates a 4×4 pose; exact rotations are kept bit-for-bit, small
/// deviations are projected back onto SO(3).
fn pose_from_matrix(m: &Matrix4<f64>) -> Result<RigidPose> {
    let p = RigidPose::from_matrix(m, POSE_TOLERANCE)?;
    let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
    let ortho = (r.transpose() * r - Matrix3::identity()).amax();
    Ok(if ortho <= 4.0 * f64::EPSILON {
        RigidPose {
            rotation: r,
            translation: p.translation,
        }
    } else {
        RigidPose {
            rotation: nearest_rotation(&r),
            translation: p.translation,
        }
    })
}

/// Reads a manifest: header lines `mace-manifest 1` and
/// `poses world_to_camera|camera_to_world`, an optional `root <dir>`, then
/// one frame per line: `split image fx fy cx cy m00 .. m33 [region]` (4×4
/// row-major). Paths are relative to the root, which defaults to the
/// manifest directory. `#` starts a comment.
pub fn load_dataset(manifest: &Path) -> Result<Dataset> {
    if !manifest.exists() {
        return Err(Error::MissingFile(manifest.to_path_buf()));
    }
    let text = fs::read_to_string(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut root = base.clone();
    let perr = |line: usize, message: String| Error::Parse {
        path: manifest.to_path_buf(),
        line,
        message,
    };
    let mut convention = None;
    let mut seen_magic = false;
    let mut frames = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        if !seen_magic {
            if tok.len() != 2 || tok[0] != MANIFEST_MAGIC {
                return Err(perr(ln, format!("expected `{MANIFEST_MAGIC} {MANIFEST_VERSION}` header")));
            }
            if tok[1] != MANIFEST_VERSION.to_string() {
                return Err(perr(ln, format!("unsupported manifest version {}", tok[1])));
            }
            seen_magic = true;
            continue;
        }
        if tok[0] == "root" {
            let dir = tok.get(1).ok_or_else(|| perr(ln, "`root` needs a path".into()))?;
            root = base.join(dir);
            continue;
        }
        if tok[0] == "poses" {
            convention = Some(match tok.get(1).copied() {
                Some("world_to_camera") => PoseConvention::WorldToCamera,
                Some("camera_to_world") => PoseConvention::CameraToWorld,
                other => return Err(perr(ln, format!("unknown pose convention {other:?}"))),
            });
            continue;
        }
        let conv = convention.ok_or_else(|| perr(ln, "frame before `poses` header".into()))?;
        if tok.len() != 22 && tok.len() != 23 {
            return Err(perr(ln, format!("expected 22 or 23 fields, found {}", tok.len())));
        }
        let split = Split::parse(tok[0]).ok_or_else(|| perr(ln, format!("unknown split `{}`", tok[0])))?;
        let nums: Vec<f64> = tok[2..22]
            .iter()
            .map(|t| t.parse::<f64>().map_err(|e| perr(ln, format!("bad number `{t}`: {e}"))))
            .collect::<Result<_>>()?;
        let region = tok
            .get(22)
            .map(|t| t.parse::<usize>().map_err(|e| perr(ln, format!("bad region `{t}`: {e}"))))
            .transpose()?;
        let m = Matrix4::from_row_slice(&nums[4..20]);
        let pose = pose_from_matrix(&m).map_err(|e| perr(ln, e.to_string()))?;
        let pose = match conv {
            PoseConvention::WorldToCamera => pose,
            PoseConvention::CameraToWorld => pose.inverse(),
        };
        let image_path = root.join(tok[1]);
        if !image_path.exists() {
            return Err(perr(ln, format!("missing image {}", image_path.display())));
        }
        let image = load_png(&image_path)?;
        let (h, w, _) = image.dim();
        let intrinsics =
            CameraIntrinsics::new(nums[0], nums[1], nums[2], nums[3], w, h).map_err(|e| perr(ln, e.to_string()))?;
        frames.push(Frame {
            image,
            intrinsics,
            pose,
            split,
            image_path: Some(PathBuf::from(tok[1])),
            region,
            gt: None,
        });
    }
    if !seen_magic {
        return Err(perr(1, "empty manifest".into()));
    }
    if frames.is_empty() {
        return Err(Error::Empty("dataset manifest has no frames"));
    }
    Ok(Dataset::new(frames))
}

/// Writes `images/NNNNNN.png` plus `manifest.txt` under `dir` and returns
/// the manifest path. Poses are written world-to-camera with shortest
/// round-trip float formatting.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("images"))?;
    let mut out = format!("{MANIFEST_MAGIC} {MANIFEST_VERSION}\nposes world_to_camera\n");
    out.push_str("# split image fx fy cx cy pose(4x4 row-major) [region]\n");
    for (i, f) in dataset.frames.iter().enumerate() {
        let rel = format!("images/{i:06}.png");
        save_png(&f.image, &dir.join(&rel))?;
        let k = &f.intrinsics;
        write!(out, "{} {rel} {} {} {} {}", f.split.as_str(), k.fx, k.fy, k.cx, k.cy).expect("string write");
        let m = f.pose.to_matrix();
        for r in 0..4 {
            for c in 0..4 {
                write!(out, " {}", m[(r, c)]).expect("string write");
            }
        }
        if let Some(region) = f.region {
            write!(out, " {region}").expect("string write");
        }
        out.push('\n');
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, out)?;
    Ok(path)
}

pub const CHECKPOINT_VERSION: u32 = 1;
const INDEX_FILE: &str = "index.txt";
const BLOB_FILE: &str = "blob.bin";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Text index plus one little-endian f64 blob.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub stage: Stage,
    pub seed: u64,
    /// Compact JSON snapshot of the effective configuration.
    pub config: String,
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn config(&self) -> Result<PipelineConfig> {
        serde_json::from_str(&self.config).map_err(|e| Error::Config(format!("checkpoint config snapshot: {e}")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Config(format!("checkpoint is missing `{key}`")))
    }

    pub fn require_stage(&self, allowed: &[Stage]) -> Result<()> {
        if allowed.contains(&self.stage) {
            return Ok(());
        }
        Err(Error::StageMismatch {
            expected: allowed.iter().map(Stage::as_str).collect::<Vec<_>>().join(", "),
            found: self.stage.as_str().to_string(),
        })
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut index = format!("mace-checkpoint {}\n", ckpt.version);
    writeln!(index, "stage {}", ckpt.stage.as_str()).expect("string write");
    writeln!(index, "seed {}", ckpt.seed).expect("string write");
    for (k, v) in &ckpt.meta {
        if k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(Error::invalid(format!("meta entry `{k}` is not writable")));
        }
        writeln!(index, "meta {k} {v}").expect("string write");
    }
    if ckpt.config.contains('\n') {
        return Err(Error::invalid("config snapshot must be single-line JSON"));
    }
    writeln!(index, "config {}", ckpt.config).expect("string write");
    for a in &ckpt.arrays {
        if a.shape.iter().product::<usize>() != a.data.len() {
            return Err(Error::DimensionMismatch {
                context: "checkpoint array",
                expected: a.shape.iter().product(),
                got: a.data.len(),
            });
        }
        let start = blob.len();
        for v in &a.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        let shape = a.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        writeln!(
            index,
            "array {} f64 [{shape}] {start} {} {}",
            a.name,
            blob.len() - start,
            sha256_hex(&blob[start..])
        )
        .expect("string write");
    }
    fs::write(dir.join(BLOB_FILE), &blob)?;
    fs::write(dir.join(INDEX_FILE), index)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let index_path = dir.join(INDEX_FILE);
    let blob_path = dir.join(BLOB_FILE);
    for p in [&index_path, &blob_path] {
        if !p.exists() {
            return Err(Error::MissingFile(p.clone()));
        }
    }
    let text = fs::read_to_string(&index_path)?;
    let blob = fs::read(&blob_path)?;
    let perr = |line: usize, message: String| Error::Parse {
        path: index_path.clone(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, head) = lines.next().ok_or_else(|| Error::Truncated("empty index".into()))?;
    let version: u32 = head
        .strip_prefix("mace-checkpoint ")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| perr(1, "not a checkpoint index".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut stage = None;
    let mut seed = None;
    let mut config = None;
    let mut meta = BTreeMap::new();
    let mut arrays = Vec::new();
    for (i, line) in lines {
        let ln = i + 1;
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        match key {
            "stage" => stage = Some(Stage::parse(rest).ok_or_else(|| perr(ln, format!("unknown stage `{rest}`")))?),
            "seed" => seed = Some(rest.parse::<u64>().map_err(|e| perr(ln, e.to_string()))?),
            "config" => config = Some(rest.to_string()),
            "meta" => {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.insert(k.to_string(), v.to_string());
            }
            "array" => {
                let t: Vec<&str> = rest.split_whitespace().collect();
                if t.len() != 6 || t[1] != "f64" {
                    return Err(perr(ln, "malformed array entry".into()));
                }
                let shape: Vec<usize> = t[2]
                    .trim_start_matches('[')
                    .trim_end_matches(']')
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|d| d.parse::<usize>().map_err(|e| perr(ln, e.to_string())))
                    .collect::<Result<_>>()?;
                let offset: usize = t[3].parse().map_err(|_| perr(ln, "bad offset".into()))?;
                let len: usize = t[4].parse().map_err(|_| perr(ln, "bad length".into()))?;
                if len != shape.iter().product::<usize>() * 8 {
                    return Err(perr(ln, format!("array `{}` length does not match its shape", t[0])));
                }
                let bytes = blob
                    .get(offset..offset + len)
                    .ok_or_else(|| Error::Truncated(format!("blob ends before array `{}`", t[0])))?;
                if sha256_hex(bytes) != t[5] {
                    return Err(Error::Checksum(t[0].to_string()));
                }
                let data = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect();
                arrays.push(NamedArray {
                    name: t[0].to_string(),
                    shape,
                    data,
                });
            }
            "" => {}
            other => return Err(perr(ln, format!("unknown index entry `{other}`"))),
        }
    }
    Ok(Checkpoint {
        version,
        stage: stage.ok_or_else(|| Error::Truncated("index has no stage".into()))?,
        seed: seed.ok_or_else(|| Error::Truncated("index has no seed".into()))?,
        config: config.ok_or_else(|| Error::Truncated("index has no config".into()))?,
        meta,
        arrays,
    })
}

/// Every trained component of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub encoder: Encoder,
    pub bank: ExpertBank,
    pub router: Router,
    pub head: Option<RenderHead>,
}

fn push_arrays<P: Params>(model: &P, prefix: &str, out: &mut Vec<NamedArray>) {
    model.visit(prefix, &mut |name, shape, data| {
        out.push(NamedArray {
            name,
            shape: shape.to_vec(),
            data: data.to_vec(),
        })
    });
}

fn fill_arrays<P: Params>(model: &mut P, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
    let mut shapes = Vec::new();
    model.visit(prefix, &mut |name, shape, _| shapes.push((name, shape.to_vec())));
    for (name, shape) in &shapes {
        let a = ckpt
            .array(name)
            .ok_or_else(|| Error::Config(format!("checkpoint has no array `{name}`")))?;
        if &a.shape != shape {
            return Err(Error::Config(format!("array `{name}` has shape {:?}, expected {shape:?}", a.shape)));
        }
    }
    let mut i = 0;
    model.visit_mut(prefix, &mut |_, data| {
        data.copy_from_slice(&ckpt.array(&shapes[i].0).expect("checked above").data);
        i += 1;
    });
    Ok(())
}

impl ModelState {
    pub fn to_checkpoint(&self, stage: Stage, config: &PipelineConfig) -> Result<Checkpoint> {
        let mut arrays = Vec::new();
        push_arrays(&self.encoder, "encoder", &mut arrays);
        push_arrays(&self.bank, "bank", &mut arrays);
        push_arrays(&self.router, "router", &mut arrays);
        let mut meta = BTreeMap::new();
        meta.insert("decoder_k".into(), self.bank.decoder.k().to_string());
        meta.insert("experts".into(), self.bank.len().to_string());
        meta.insert("router.step".into(), self.router.step.to_string());
        meta.insert("router.tau".into(), format!("{:?}", self.router.tau));
        if let Some(head) = &self.head {
            push_arrays(head, "render", &mut arrays);
            meta.insert("render.factor".into(), head.factor().to_string());
            meta.insert("render.channels".into(), head.config.channels.to_string());
            meta.insert("render.hidden".into(), head.config.hidden.to_string());
            meta.insert("render.offset".into(), head.config.offset.to_string());
            meta.insert("render.offset_cells".into(), format!("{:?}", head.config.offset_cells));
        }
        Ok(Checkpoint {
            version: CHECKPOINT_VERSION,
            stage,
            seed: config.train.seed,
            config: serde_json::to_string(config)?,
            meta,
            arrays,
        })
    }

    /// Rebuilds models with the checkpoint's architecture and loads every
    /// array by name.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = ckpt.config()?;
        let tc = &cfg.train;
        let k = ckpt.meta_usize("decoder_k")?;
        let n = ckpt.meta_usize("experts")?;
        let d = tc.encoder.descriptor_dim;
        let mut encoder = Encoder::new(&tc.encoder, 0);
        let experts = (0..n).map(|_| ExpertHead::new(&tc.expert, d, k, 0)).collect();
        let centers = vec![nalgebra::Vector3::zeros(); k];
        let mut bank = ExpertBank::new(experts, PositionDecoder::new(&centers)?);
        let mut router = Router::new(&tc.router, d, n, 0)?;
        fill_arrays(&mut encoder, "encoder", ckpt)?;
        fill_arrays(&mut bank, "bank", ckpt)?;
        fill_arrays(&mut router, "router", ckpt)?;
        router.step = ckpt.meta_usize("router.step")? as u64;
        router.tau = ckpt
            .meta
            .get("router.tau")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Config("checkpoint is missing `router.tau`".into()))?;
        let head = if ckpt.meta.contains_key("render.factor") {
            let hc = crate::render::HeadConfig {
                channels: ckpt.meta_usize("render.channels")?,
                hidden: ckpt.meta_usize("render.hidden")?,
                offset: ckpt.meta.get("render.offset").is_some_and(|v| v == "true"),
                offset_cells: ckpt
                    .meta
                    .get("render.offset_cells")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Config("checkpoint is missing `render.offset_cells`".into()))?,
            };
            let mut head =
                RenderHead::new(&hc, d, ckpt.meta_usize("render.factor")?, nalgebra::Vector3::zeros(), 1.0, 0);
            fill_arrays(&mut head, "render", ckpt)?;
            Some(head)
        } else {
            None
        };
        Ok(Self {
            encoder,
            bank,
            router,
            head,
        })
    }
}

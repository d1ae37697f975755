//! In-memory frames shared by synthetic generation, manifest ingestion and
//! every training stage.

use std::path::PathBuf;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraIntrinsics, RigidPose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Map,
    Query,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Map => "map",
            Split::Query => "query",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "map" | "train" => Some(Split::Map),
            "query" | "test" => Some(Split::Query),
            _ => None,
        }
    }
}

/// Per-pixel ground truth, only available for synthetic data.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub coords: Array3<f64>,
    pub valid: Array2<bool>,
    pub depth: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// `H x W x 3` RGB in `[0, 1]`.
    pub image: Array3<f64>,
    pub intrinsics: CameraIntrinsics,
    /// World-to-camera.
    pub pose: RigidPose,
    pub split: Split,
    pub image_path: Option<PathBuf>,
    /// Region of interest label for synthetic trajectories.
    pub region: Option<usize>,
    pub gt: Option<GroundTruth>,
}

impl Frame {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub frames: Vec<Frame>,
}

impl Dataset {
    pub fn new(frames: Vec<Frame>) -> Self {
        Self { frames }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.frames
            .iter()
            .enumerate()
            .filter(|(_, f)| f.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn map_indices(&self) -> Vec<usize> {
        self.indices(Split::Map)
    }

    pub fn query_indices(&self) -> Vec<usize> {
        self.indices(Split::Query)
    }
}

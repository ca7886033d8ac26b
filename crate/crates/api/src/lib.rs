//! Request, response and event bodies of the TileGAN HTTP API.
//!
//! Binary payloads (PNG images, TGF1 fields) travel as standard base64
//! strings. See `API.md` at the repository root for the endpoint list.

use serde::{Deserialize, Serialize};

/// Axis-aligned rectangle, in cells or pixels depending on context.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Region {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn is_empty(&self) -> bool {
        self.w == 0 || self.h == 0
    }

    pub fn intersects(&self, other: &Region) -> bool {
        !self.is_empty()
            && !other.is_empty()
            && self.x < other.x + other.w
            && other.x < self.x + self.w
            && self.y < other.y + other.h
            && other.y < self.y + self.h
    }
}

/// Overrides for the synthesis energy; unset fields keep their defaults.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyOverrides {
    pub lambda_visual: Option<f64>,
    pub lambda_latent: Option<f64>,
    pub lambda_cluster: Option<f64>,
    /// Stop once energy falls to this fraction of its initial value.
    pub threshold_relative: Option<f64>,
    /// Stop once energy falls to this value. Wins over the relative form.
    pub threshold_absolute: Option<f64>,
    pub max_refine_steps: Option<usize>,
    pub top_k: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreateField {
    /// Base64 PNG of the guidance map.
    pub guidance_png: String,
    pub cells_x: usize,
    pub cells_y: usize,
    /// Base64 TGF1 field to load instead of tiling from the guidance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_tgf1: Option<String>,
    #[serde(default)]
    pub params: EnergyOverrides,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Energy {
    pub total: f64,
    pub matching: f64,
    pub neighbour: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineState {
    Idle,
    Running,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopCause {
    Threshold,
    StepCap,
    Requested,
    Error,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineStatus {
    pub state: RefineState,
    /// Steps taken by the current or most recent run.
    pub steps: usize,
    pub last_stop: Option<StopCause>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldInfo {
    pub id: u64,
    /// Bumped by every change to the field's latents, guidance or image.
    pub revision: u64,
    pub level: usize,
    pub crop: usize,
    pub cells_x: usize,
    pub cells_y: usize,
    /// Rendered image size in pixels.
    pub width: usize,
    pub height: usize,
    pub tile_size: usize,
    /// Zoom level at which one tile covers the whole image.
    pub max_zoom: u32,
    pub energy: Option<Energy>,
    pub refine: RefineStatus,
    pub can_undo: bool,
    pub can_redo: bool,
}

/// Where an interpolation endpoint comes from: `{"sample": 12}` or
/// `{"cell": [3, 4]}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Sample(u32),
    Cell([usize; 2]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EditRequest {
    Brush {
        rect: Region,
        cluster: u32,
        seed: u64,
    },
    Clone {
        src: Region,
        dst: [usize; 2],
    },
    ShuffleClone {
        src: Region,
        dst: [usize; 2],
        seed: u64,
    },
    Noise {
        rect: Region,
        sigma: f32,
        seed: u64,
    },
    Interpolate {
        cell: [usize; 2],
        a: Source,
        b: Source,
        t: f32,
    },
    /// Pastes a base64 PNG into the guidance map at pixel `at`.
    Guidance {
        at: [usize; 2],
        patch_png: String,
    },
    Undo,
    Redo,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dirty {
    pub cells: Region,
    pub pixels: Region,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditResponse {
    /// False for an undo or redo with nothing to act on.
    pub applied: bool,
    pub revision: u64,
    pub dirty: Dirty,
    pub energy: Option<Energy>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineAction {
    Start,
    Stop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineRequest {
    pub action: RefineAction,
    /// Seed for cell selection; defaults to the field id.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterInfo {
    pub cluster: u32,
    pub members: usize,
    /// Base64 PNG of the cluster centre in representative space.
    pub thumbnail_png: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeSource {
    Edit,
    Undo,
    Redo,
    Refine,
}

/// One line of the `/fields/{id}/events` stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Dirty { field: u64, revision: u64, source: ChangeSource, dirty: Dirty },
    Energy { field: u64, revision: u64, energy: Energy },
    Refine { field: u64, revision: u64, status: RefineStatus },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

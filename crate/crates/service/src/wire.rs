//! JSON wire types. Images travel as raw RGB8 rows, base64-encoded.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use congan::data::{from_rgb8, to_rgb8, ShapeMeta};
use congan::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireImage {
    pub width: usize,
    pub height: usize,
    pub rgb8: String,
}

impl WireImage {
    pub fn from_tensor(image: &Tensor<f32>) -> Result<Self, ServiceError> {
        let (width, height, bytes) = to_rgb8(image).map_err(ServiceError::internal)?;
        Ok(Self {
            width,
            height,
            rgb8: STANDARD.encode(bytes),
        })
    }

    pub fn to_tensor(&self) -> Result<Tensor<f32>, ServiceError> {
        let bytes = STANDARD
            .decode(&self.rgb8)
            .map_err(|e| ServiceError::Unprocessable(format!("rgb8 payload is not base64: {e}")))?;
        from_rgb8(self.width, self.height, &bytes).map_err(|e| ServiceError::Unprocessable(e.to_string()))
    }
}

/// A reference to a constraint image as sent by clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ImageRef {
    Dataset(usize),
    Upload(WireImage),
    PreviousOutput(usize),
}

/// A resolved reference as recorded in the session log; uploads and
/// previous outputs are kept by value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoredRef {
    Dataset(usize),
    Upload(WireImage),
    PreviousOutput { seed: usize, image: WireImage },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    pub checkpoint_id: String,
    #[serde(default = "default_seeds")]
    pub n_seeds: usize,
    #[serde(default)]
    pub rng_seed: Option<u64>,
}

fn default_seeds() -> usize {
    3
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AddConstraintRequest {
    pub positive: ImageRef,
    pub negative: ImageRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub positive: StoredRef,
    pub negative: StoredRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutput {
    pub seed: usize,
    pub image: WireImage,
    pub phi: Vec<f64>,
    /// One flag per history entry, in history order.
    pub satisfied: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub id: String,
    pub checkpoint_id: String,
    pub space_id: String,
    pub n_seeds: usize,
    pub z: Vec<Vec<f32>>,
    pub history: Vec<HistoryEntry>,
    pub outputs: Vec<SeedOutput>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub id: String,
    pub kind: String,
    pub iteration: u64,
    pub image_size: usize,
    pub space_id: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: usize,
    pub split: String,
    pub meta: ShapeMeta,
    pub image: WireImage,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImagePage {
    pub total: usize,
    pub offset: usize,
    pub items: Vec<ImageEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub detail: String,
}

//! Sessions and their append-only event logs.
//!
//! A session's state is a pure function of its log: the header fixes the
//! checkpoint and the noise vectors, and each event either appends a
//! constraint or undoes the most recent one. Outputs are regenerated from
//! the surviving constraints after every event.

use std::path::Path;
use std::sync::Arc;

use congan::data::{quantize, Dataset};
use congan::eval::ConditionalGenerator;
use congan::training::{sample_z, ModelKind, TrainedModel};
use congan::{Constraint, SemanticSpace, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;
use crate::wire::{HistoryEntry, ImageRef, SeedOutput, SessionState, StoredRef, WireImage};

pub const LOG_FORMAT: &str = "congan-session/1";

/// A generator the service can run, with the φ its satisfaction flags use.
pub struct ModelEntry {
    pub id: String,
    pub kind: String,
    pub iteration: u64,
    pub image_size: usize,
    pub space: SemanticSpace,
    pub generator: Arc<dyn ConditionalGenerator + Send + Sync>,
}

impl ModelEntry {
    pub fn from_trained(id: impl Into<String>, model: TrainedModel) -> Self {
        Self {
            id: id.into(),
            kind: ModelKind::Congan.as_str().into(),
            iteration: model.iteration,
            image_size: model.config.generator.image_size,
            space: model.space.clone(),
            generator: Arc::new(model),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub format: String,
    pub session_id: String,
    pub checkpoint_id: String,
    pub space_id: String,
    pub rng_seed: u64,
    pub z: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    AddConstraint { positive: StoredRef, negative: StoredRef },
    Undo,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionLog {
    pub header: LogHeader,
    pub events: Vec<LogEvent>,
}

impl SessionLog {
    /// Header line followed by one line per event.
    pub fn to_jsonl(&self) -> String {
        let mut s = serde_json::to_string(&self.header).expect("header serializes");
        s.push('\n');
        for e in &self.events {
            s.push_str(&serde_json::to_string(e).expect("event serializes"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self, ServiceError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let corrupt = |what: String| ServiceError::Unprocessable(format!("corrupt session log: {what}"));
        let header: LogHeader = serde_json::from_str(lines.next().ok_or_else(|| corrupt("empty".into()))?)
            .map_err(|e| corrupt(format!("header: {e}")))?;
        if header.format != LOG_FORMAT {
            return Err(corrupt(format!("unknown format {:?}", header.format)));
        }
        let events = lines
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| corrupt(format!("event {i}: {e}"))))
            .collect::<Result<_, _>>()?;
        Ok(Self { header, events })
    }

    pub fn write(&self, path: &Path) -> Result<(), ServiceError> {
        std::fs::write(path, self.to_jsonl()).map_err(ServiceError::internal)
    }

    pub fn read(path: &Path) -> Result<Self, ServiceError> {
        Self::from_jsonl(&std::fs::read_to_string(path).map_err(ServiceError::internal)?)
    }
}

pub struct Session {
    log: SessionLog,
    model: Arc<ModelEntry>,
    dataset: Option<Arc<Dataset>>,
    history: Vec<HistoryEntry>,
    resolved: Vec<Constraint<Tensor<f32>>>,
    z: Vec<Tensor<f32>>,
    outputs: Vec<SeedOutput>,
}

impl Session {
    pub fn create(
        id: String,
        model: Arc<ModelEntry>,
        dataset: Option<Arc<Dataset>>,
        n_seeds: usize,
        rng_seed: u64,
    ) -> Result<Self, ServiceError> {
        if n_seeds < 1 {
            return Err(ServiceError::Unprocessable("n_seeds must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let (dist, n_z) = (model.generator.z_dist(), model.generator.n_z());
        let z: Vec<Vec<f32>> = (0..n_seeds)
            .map(|_| sample_z(dist, n_z, &mut rng).data().to_vec())
            .collect();
        let header = LogHeader {
            format: LOG_FORMAT.into(),
            session_id: id,
            checkpoint_id: model.id.clone(),
            space_id: model.space.id(),
            rng_seed,
            z,
        };
        Self::from_header(header, model, dataset)
    }

    fn from_header(header: LogHeader, model: Arc<ModelEntry>, dataset: Option<Arc<Dataset>>) -> Result<Self, ServiceError> {
        let n_z = model.generator.n_z();
        let z = header
            .z
            .iter()
            .map(|v| {
                if v.len() != n_z {
                    return Err(ServiceError::Unprocessable(format!("noise vector has {} entries, model wants {n_z}", v.len())));
                }
                Tensor::new(&[n_z], v.clone()).map_err(ServiceError::internal)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            log: SessionLog {
                header,
                events: Vec::new(),
            },
            model,
            dataset,
            history: Vec::new(),
            resolved: Vec::new(),
            z,
            outputs: Vec::new(),
        })
    }

    /// Rebuilds a session by applying every logged event to `model`.
    pub fn replay(log: &SessionLog, model: Arc<ModelEntry>, dataset: Option<Arc<Dataset>>) -> Result<Self, ServiceError> {
        if log.header.checkpoint_id != model.id {
            return Err(ServiceError::Conflict(format!(
                "log was recorded against checkpoint {:?}, replaying against {:?}",
                log.header.checkpoint_id, model.id
            )));
        }
        if log.header.space_id != model.space.id() {
            return Err(ServiceError::Conflict(format!(
                "log semantic space {:?} differs from checkpoint's {:?}",
                log.header.space_id,
                model.space.id()
            )));
        }
        let mut s = Self::from_header(log.header.clone(), model, dataset)?;
        for e in &log.events {
            s.apply(e.clone())?;
        }
        Ok(s)
    }

    pub fn id(&self) -> &str {
        &self.log.header.session_id
    }

    pub fn log(&self) -> &SessionLog {
        &self.log
    }

    pub fn outputs(&self) -> &[SeedOutput] {
        &self.outputs
    }

    pub fn add_constraint(&mut self, positive: ImageRef, negative: ImageRef) -> Result<(), ServiceError> {
        let positive = self.store(positive)?;
        let negative = self.store(negative)?;
        self.apply(LogEvent::AddConstraint { positive, negative })
    }

    pub fn undo(&mut self) -> Result<(), ServiceError> {
        if self.history.is_empty() {
            return Err(ServiceError::Conflict("nothing to undo".into()));
        }
        self.apply(LogEvent::Undo)
    }

    /// Validates and applies `event`; on error nothing changes.
    fn apply(&mut self, event: LogEvent) -> Result<(), ServiceError> {
        let mut history = self.history.clone();
        let mut resolved = self.resolved.clone();
        match &event {
            LogEvent::AddConstraint { positive, negative } => {
                resolved.push(Constraint::new(self.resolve(positive)?, self.resolve(negative)?));
                history.push(HistoryEntry {
                    positive: positive.clone(),
                    negative: negative.clone(),
                });
            }
            LogEvent::Undo => {
                if history.pop().is_none() {
                    return Err(ServiceError::Conflict("nothing to undo".into()));
                }
                resolved.pop();
            }
        }
        let outputs = self.render(&resolved)?;
        self.history = history;
        self.resolved = resolved;
        self.outputs = outputs;
        self.log.events.push(event);
        Ok(())
    }

    /// Turns a client reference into its logged form.
    fn store(&self, r: ImageRef) -> Result<StoredRef, ServiceError> {
        Ok(match r {
            ImageRef::Dataset(id) => StoredRef::Dataset(id),
            ImageRef::Upload(img) => StoredRef::Upload(img),
            ImageRef::PreviousOutput(seed) => {
                if self.outputs.is_empty() {
                    return Err(ServiceError::Conflict("no output has been generated yet".into()));
                }
                let out = self.outputs.get(seed).ok_or_else(|| {
                    ServiceError::Unprocessable(format!("seed {seed} out of range 0..{}", self.outputs.len()))
                })?;
                StoredRef::PreviousOutput {
                    seed,
                    image: out.image.clone(),
                }
            }
        })
    }

    fn resolve(&self, r: &StoredRef) -> Result<Tensor<f32>, ServiceError> {
        let img = match r {
            StoredRef::Dataset(id) => {
                let ds = self
                    .dataset
                    .as_ref()
                    .ok_or_else(|| ServiceError::Unprocessable("no dataset is loaded".into()))?;
                ds.images
                    .get(*id)
                    .cloned()
                    .ok_or_else(|| ServiceError::Unprocessable(format!("dataset has no image {id}")))?
            }
            StoredRef::Upload(img) | StoredRef::PreviousOutput { image: img, .. } => img.to_tensor()?,
        };
        let n = self.model.image_size;
        if img.shape() != [3, n, n] {
            return Err(ServiceError::Unprocessable(format!(
                "image is {:?}, model works on 3×{n}×{n}",
                img.shape()
            )));
        }
        Ok(img)
    }

    /// Quantized outputs for every seed slot; empty when there are no constraints.
    fn render(&self, resolved: &[Constraint<Tensor<f32>>]) -> Result<Vec<SeedOutput>, ServiceError> {
        if resolved.is_empty() {
            return Ok(Vec::new());
        }
        let space = &self.model.space;
        let cs: Vec<Constraint<&Tensor<f32>>> = resolved.iter().map(|c| Constraint::new(&c.positive, &c.negative)).collect();
        let targets = resolved
            .iter()
            .map(|c| Ok(Constraint::new(space.embed_value(&c.positive)?, space.embed_value(&c.negative)?)))
            .collect::<congan::Result<Vec<_>>>()
            .map_err(ServiceError::internal)?;
        self.z
            .iter()
            .enumerate()
            .map(|(seed, z)| {
                let raw = self.model.generator.generate(&cs, z).map_err(ServiceError::internal)?;
                let image = quantize(&raw).map_err(ServiceError::internal)?;
                let phi = space.embed_value(&image).map_err(ServiceError::internal)?;
                let satisfied = targets
                    .iter()
                    .map(|t| space.satisfies(&phi, &t.positive, &t.negative))
                    .collect::<congan::Result<_>>()
                    .map_err(ServiceError::internal)?;
                Ok(SeedOutput {
                    seed,
                    image: WireImage::from_tensor(&image)?,
                    phi,
                    satisfied,
                })
            })
            .collect()
    }

    pub fn state(&self) -> SessionState {
        SessionState {
            id: self.id().into(),
            checkpoint_id: self.log.header.checkpoint_id.clone(),
            space_id: self.log.header.space_id.clone(),
            n_seeds: self.z.len(),
            z: self.log.header.z.clone(),
            history: self.history.clone(),
            outputs: self.outputs.clone(),
        }
    }
}

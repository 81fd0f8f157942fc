//! Shared service state: a read-only model catalog and dataset, and the
//! session map. Each session sits behind its own mutex so operations on one
//! session are serialized while different sessions proceed independently.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use congan::checkpoint::{Checkpoint, MANIFEST_FILE};
use congan::data::Dataset;
use congan::training::{ModelKind, TrainedModel, CHECKPOINT_DIR};
use parking_lot::{Mutex, RwLock};

use crate::error::ServiceError;
use crate::session::{ModelEntry, Session, SessionLog};
use crate::wire::{CheckpointInfo, CreateSessionRequest, ImageEntry, ImagePage, ImageRef, SessionState, WireImage};

pub const MAX_PAGE: usize = 500;

pub struct Service {
    models: BTreeMap<String, Arc<ModelEntry>>,
    dataset: Option<Arc<Dataset>>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
    log_dir: Option<PathBuf>,
}

impl Service {
    pub fn new(models: Vec<ModelEntry>, dataset: Option<Dataset>, log_dir: Option<PathBuf>) -> Result<Self, ServiceError> {
        let mut map = BTreeMap::new();
        for m in models {
            let id = m.id.clone();
            if map.insert(id.clone(), Arc::new(m)).is_some() {
                return Err(ServiceError::Conflict(format!("duplicate checkpoint id {id:?}")));
            }
        }
        if let Some(dir) = &log_dir {
            std::fs::create_dir_all(dir).map_err(ServiceError::internal)?;
        }
        Ok(Self {
            models: map,
            dataset: dataset.map(Arc::new),
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            log_dir,
        })
    }

    pub fn checkpoints(&self) -> Vec<CheckpointInfo> {
        self.models
            .values()
            .map(|m| CheckpointInfo {
                id: m.id.clone(),
                kind: m.kind.clone(),
                iteration: m.iteration,
                image_size: m.image_size,
                space_id: m.space.id(),
            })
            .collect()
    }

    fn model(&self, id: &str) -> Result<Arc<ModelEntry>, ServiceError> {
        self.models
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("unknown checkpoint {id:?}")))
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ServiceError> {
        self.sessions
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("unknown session {id:?}")))
    }

    fn fresh_id(&self) -> String {
        format!("s{:06}", self.next_id.fetch_add(1, Ordering::Relaxed))
    }

    fn insert(&self, session: Session) -> SessionState {
        let state = session.state();
        self.sessions.write().insert(state.id.clone(), Arc::new(Mutex::new(session)));
        state
    }

    pub fn log_path(&self, id: &str) -> Option<PathBuf> {
        self.log_dir.as_ref().map(|d| d.join(format!("{id}.jsonl")))
    }

    fn persist(&self, s: &Session) -> Result<(), ServiceError> {
        match self.log_path(s.id()) {
            Some(p) => s.log().write(&p),
            None => Ok(()),
        }
    }

    pub fn create_session(&self, req: CreateSessionRequest) -> Result<SessionState, ServiceError> {
        let model = self.model(&req.checkpoint_id)?;
        let rng_seed = req.rng_seed.unwrap_or_else(rand::random);
        let s = Session::create(self.fresh_id(), model, self.dataset.clone(), req.n_seeds, rng_seed)?;
        self.persist(&s)?;
        Ok(self.insert(s))
    }

    pub fn get_state(&self, id: &str) -> Result<SessionState, ServiceError> {
        Ok(self.session(id)?.lock().state())
    }

    pub fn add_constraint(&self, id: &str, positive: ImageRef, negative: ImageRef) -> Result<SessionState, ServiceError> {
        let s = self.session(id)?;
        let mut s = s.lock();
        s.add_constraint(positive, negative)?;
        self.persist(&s)?;
        Ok(s.state())
    }

    pub fn undo(&self, id: &str) -> Result<SessionState, ServiceError> {
        let s = self.session(id)?;
        let mut s = s.lock();
        s.undo()?;
        self.persist(&s)?;
        Ok(s.state())
    }

    pub fn session_log(&self, id: &str) -> Result<SessionLog, ServiceError> {
        Ok(self.session(id)?.lock().log().clone())
    }

    /// Rebuilds a session from its log and registers it under the logged id.
    pub fn replay(&self, log: &SessionLog) -> Result<SessionState, ServiceError> {
        let id = &log.header.session_id;
        if self.sessions.read().contains_key(id) {
            return Err(ServiceError::Conflict(format!("session {id:?} already exists")));
        }
        let model = self.model(&log.header.checkpoint_id)?;
        let s = Session::replay(log, model, self.dataset.clone())?;
        if let Some(n) = id.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()) {
            self.next_id.fetch_max(n + 1, Ordering::Relaxed);
        }
        Ok(self.insert(s))
    }

    /// Replays every `*.jsonl` log in the log directory, in file-name order.
    pub fn restore_sessions(&self) -> Result<usize, ServiceError> {
        let Some(dir) = &self.log_dir else { return Ok(0) };
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(ServiceError::internal)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        for p in &paths {
            self.replay(&SessionLog::read(p)?)?;
        }
        Ok(paths.len())
    }

    fn dataset(&self) -> Result<&Dataset, ServiceError> {
        self.dataset
            .as_deref()
            .ok_or_else(|| ServiceError::NotFound("no dataset is loaded".into()))
    }

    fn image_entry(&self, ds: &Dataset, id: usize) -> Result<ImageEntry, ServiceError> {
        let split = if ds.manifest.split.test.contains(&id) { "test" } else { "train" };
        Ok(ImageEntry {
            id,
            split: split.into(),
            meta: ds.meta[id].clone(),
            image: WireImage::from_tensor(&ds.images[id])?,
        })
    }

    pub fn list_images(&self, offset: usize, limit: usize) -> Result<ImagePage, ServiceError> {
        let ds = self.dataset()?;
        if limit == 0 || limit > MAX_PAGE {
            return Err(ServiceError::Unprocessable(format!("limit must be in 1..={MAX_PAGE}")));
        }
        let end = offset.saturating_add(limit).min(ds.len());
        let items = (offset.min(end)..end)
            .map(|id| self.image_entry(ds, id))
            .collect::<Result<_, _>>()?;
        Ok(ImagePage {
            total: ds.len(),
            offset,
            items,
        })
    }

    pub fn get_image(&self, id: usize) -> Result<ImageEntry, ServiceError> {
        let ds = self.dataset()?;
        if id >= ds.len() {
            return Err(ServiceError::NotFound(format!("unknown image {id}")));
        }
        self.image_entry(ds, id)
    }
}

/// Loads constrained-generator checkpoints from `path`: a checkpoint
/// directory, a training run directory, or a directory containing either.
/// Ids are directory names, with run directories named after the run.
pub fn load_models(path: &Path) -> anyhow::Result<Vec<ModelEntry>> {
    let locate = |d: &Path| -> Option<PathBuf> {
        [d.to_path_buf(), d.join(CHECKPOINT_DIR)]
            .into_iter()
            .find(|c| c.join(MANIFEST_FILE).exists())
    };
    let mut found: Vec<(PathBuf, PathBuf)> = Vec::new();
    if let Some(c) = locate(path) {
        found.push((path.to_path_buf(), c));
    } else {
        for e in std::fs::read_dir(path)? {
            let d = e?.path();
            if let Some(c) = locate(&d) {
                found.push((d, c));
            }
        }
        found.sort();
    }
    let mut out = Vec::new();
    for (d, c) in found {
        if Checkpoint::read_manifest(&c)?.kind != ModelKind::Congan.as_str() {
            continue;
        }
        let id = d
            .canonicalize()?
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into());
        out.push(ModelEntry::from_trained(id, TrainedModel::load(&c)?));
    }
    anyhow::ensure!(!out.is_empty(), "no constrained-generator checkpoint under {}", path.display());
    Ok(out)
}

//! Sessions, prediction versions and fine-tuning jobs.
//!
//! Each session sits behind its own mutex. Jobs are queued on a channel and
//! executed by a fixed pool of workers in submission order.

use std::collections::HashMap;
use std::path::{Component, Path};
use std::sync::{Arc, Mutex, MutexGuard, PoisonError};

use incseg::annotations::{Origin, Point, SparseAnnotations};
use incseg::inference::predict_sliding;
use incseg::losses::LossBreakdown;
use incseg::model::{
    checkpoint, expand_head, snapshot, LabelSpace, ModelSnapshot, SegModel, ENCODER_STRIDE,
};
use incseg::trainer::{finetune_incremental, FinetuneConfig, SelectionMode};
use incseg::{DenseMask, ImageChip};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::mpsc;
use uuid::Uuid;

use crate::config::ServiceConfig;

/// Number of trailing loss records kept in job status.
pub const LOSS_TAIL: usize = 5;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    Internal(String),
}

pub type ServiceResult<T> = Result<T, ServiceError>;

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(PoisonError::into_inner)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub version: usize,
    /// `"checkpoint"` for version 0, otherwise `"job:<id>"`.
    pub source: String,
    pub label_space: LabelSpace,
    #[serde(skip)]
    pub mask: DenseMask,
    pub model_hash: String,
}

pub struct Session {
    pub id: String,
    pub image: Arc<ImageChip>,
    pub checkpoint: String,
    pub model: SegModel,
    /// Taken when the new class is registered.
    pub memory: Option<ModelSnapshot>,
    pub annotations: SparseAnnotations,
    pub predictions: Vec<Arc<Prediction>>,
    pub active_job: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub terms: Option<LossBreakdown>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: String,
    pub session_id: String,
    pub state: JobState,
    pub step: usize,
    pub total_steps: usize,
    pub fraction: f64,
    pub loss_tail: Vec<StepLoss>,
    pub prediction_version: Option<usize>,
    pub error: Option<String>,
    pub memory_hash: String,
    pub config: FinetuneConfig,
}

pub struct QueuedJob {
    pub job_id: String,
    pub session_id: String,
    model: SegModel,
    memory: ModelSnapshot,
    image: Arc<ImageChip>,
    clicks: SparseAnnotations,
    config: FinetuneConfig,
}

pub type JobReceiver = mpsc::UnboundedReceiver<QueuedJob>;

pub struct AppState {
    pub config: ServiceConfig,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    jobs: Mutex<HashMap<String, JobStatus>>,
    queue: mpsc::UnboundedSender<QueuedJob>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ClassRef {
    Id(u8),
    Name(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointIn {
    pub row: usize,
    pub col: usize,
    pub class: ClassRef,
    #[serde(default)]
    pub origin: Option<Origin>,
}

/// Rejects anything but a plain file name inside the checkpoint directory.
fn checkpoint_path(dir: &Path, name: &str) -> ServiceResult<std::path::PathBuf> {
    let p = Path::new(name);
    let mut comps = p.components();
    match (comps.next(), comps.next()) {
        (Some(Component::Normal(_)), None) => Ok(dir.join(p)),
        _ => Err(ServiceError::Unprocessable(format!(
            "checkpoint {name:?} must be a file name inside the checkpoint directory"
        ))),
    }
}

impl AppState {
    pub fn new(config: ServiceConfig) -> (Arc<Self>, JobReceiver) {
        let (tx, rx) = mpsc::unbounded_channel();
        let state = Arc::new(Self {
            config,
            sessions: Mutex::new(HashMap::new()),
            jobs: Mutex::new(HashMap::new()),
            queue: tx,
        });
        (state, rx)
    }

    pub fn session(&self, id: &str) -> ServiceResult<Arc<Mutex<Session>>> {
        lock(&self.sessions)
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("no session {id}")))
    }

    pub fn job(&self, id: &str) -> ServiceResult<JobStatus> {
        lock(&self.jobs)
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("no job {id}")))
    }

    /// Loads the checkpoint and computes prediction version 0. Blocking.
    pub fn create_session(
        &self,
        image: ImageChip,
        checkpoint_name: &str,
    ) -> ServiceResult<Arc<Mutex<Session>>> {
        if image.channels() != 3 {
            return Err(ServiceError::Unprocessable(format!(
                "image has {} channels, expected 3",
                image.channels()
            )));
        }
        let path = checkpoint_path(&self.config.checkpoint_dir, checkpoint_name)?;
        if !path.is_file() {
            return Err(ServiceError::NotFound(format!(
                "checkpoint {checkpoint_name:?} not found"
            )));
        }
        let model =
            checkpoint::load(&path).map_err(|e| ServiceError::Unprocessable(e.to_string()))?;
        if model.label_space().new_class_id().is_some() {
            return Err(ServiceError::Unprocessable(
                "checkpoint already has a registered new class".into(),
            ));
        }
        let pred = predict_sliding(
            &model,
            &image,
            self.config.prediction_window,
            self.config.prediction_overlap,
        )
        .map_err(|e| ServiceError::Unprocessable(e.to_string()))?;
        let id = Uuid::new_v4().simple().to_string();
        let (h, w) = (image.height(), image.width());
        let session = Session {
            id: id.clone(),
            image: Arc::new(image),
            checkpoint: checkpoint_name.to_owned(),
            predictions: vec![Arc::new(Prediction {
                version: 0,
                source: "checkpoint".to_owned(),
                label_space: model.label_space().clone(),
                mask: pred.mask,
                model_hash: model.weights_hash(),
            })],
            model,
            memory: None,
            annotations: SparseAnnotations::new(&id, h, w),
            active_job: None,
        };
        let session = Arc::new(Mutex::new(session));
        lock(&self.sessions).insert(id, session.clone());
        Ok(session)
    }

    /// Freezes the memory network and expands the head. Returns the new id.
    pub fn register_class(
        &self,
        session_id: &str,
        name: &str,
    ) -> ServiceResult<(u8, LabelSpace, String)> {
        let session = self.session(session_id)?;
        let mut s = lock(&session);
        if let Some(existing) = s.model.label_space().new_class_id() {
            return Err(ServiceError::Conflict(format!(
                "class {:?} is already registered in this session",
                s.model.label_space().name(existing).unwrap_or_default()
            )));
        }
        let name = name.trim();
        if name.is_empty() {
            return Err(ServiceError::Unprocessable("class name is empty".into()));
        }
        if s.model.label_space().id_of(name).is_some() {
            return Err(ServiceError::Conflict(format!(
                "class {name:?} already exists"
            )));
        }
        let memory = snapshot(&s.model);
        let expanded = expand_head(&s.model, name, self.config.head_init)
            .map_err(|e| ServiceError::Unprocessable(e.to_string()))?;
        let id = expanded
            .label_space()
            .new_class_id()
            .expect("just registered");
        let space = expanded.label_space().clone();
        let hash = memory.weights_hash().to_owned();
        s.model = expanded;
        s.memory = Some(memory);
        Ok((id, space, hash))
    }

    /// Validates every point before appending any. Returns `(added, total)`.
    pub fn add_annotations(
        &self,
        session_id: &str,
        points: &[PointIn],
    ) -> ServiceResult<(usize, usize)> {
        let session = self.session(session_id)?;
        let mut s = lock(&session);
        let space = s.model.label_space().clone();
        let new_id = space.new_class_id().ok_or_else(|| {
            ServiceError::Conflict("register the new class before annotating".into())
        })?;
        let bg = space.background_id();
        let (h, w) = s.annotations.dims();
        let mut staged = s.annotations.clone();
        for (i, p) in points.iter().enumerate() {
            if p.origin == Some(Origin::PseudoLabel) {
                return Err(ServiceError::Unprocessable(format!(
                    "point {i}: pseudo-labels are generated by the server and cannot be submitted"
                )));
            }
            if p.row >= h || p.col >= w {
                return Err(ServiceError::Unprocessable(format!(
                    "point {i}: ({}, {}) is outside the {h}x{w} image",
                    p.row, p.col
                )));
            }
            let class_id = match &p.class {
                ClassRef::Id(id) => *id,
                ClassRef::Name(n) => space.id_of(n).ok_or_else(|| {
                    ServiceError::Unprocessable(format!("point {i}: unknown class {n:?}"))
                })?,
            };
            if class_id != new_id && class_id != bg {
                return Err(ServiceError::Unprocessable(format!(
                    "point {i}: class {class_id} rejected; clicks may only label the new class or background"
                )));
            }
            staged
                .insert(Point::click(p.row, p.col, class_id))
                .map_err(|e| ServiceError::Unprocessable(format!("point {i}: {e}")))?;
        }
        let added = staged.len() - s.annotations.len();
        s.annotations = staged;
        Ok((added, s.annotations.len()))
    }

    /// Merges `overrides` into the configured defaults and queues a job.
    pub fn start_finetune(
        &self,
        session_id: &str,
        overrides: serde_json::Value,
    ) -> ServiceResult<JobStatus> {
        let session = self.session(session_id)?;
        let mut s = lock(&session);
        let memory = s.memory.clone().ok_or_else(|| {
            ServiceError::Conflict("register the new class before fine-tuning".into())
        })?;
        if let Some(job) = &s.active_job {
            return Err(ServiceError::Conflict(format!(
                "job {job} is still active for this session"
            )));
        }
        if s.annotations.count_origin(Origin::UserClick) == 0 {
            return Err(ServiceError::Unprocessable("no clicks to train on".into()));
        }
        let config = self.merge_config(&overrides, s.image.height().min(s.image.width()))?;
        let job_id = Uuid::new_v4().simple().to_string();
        let status = JobStatus {
            job_id: job_id.clone(),
            session_id: s.id.clone(),
            state: JobState::Queued,
            step: 0,
            total_steps: config.steps,
            fraction: 0.0,
            loss_tail: Vec::new(),
            prediction_version: None,
            error: None,
            memory_hash: memory.weights_hash().to_owned(),
            config: config.clone(),
        };
        lock(&self.jobs).insert(job_id.clone(), status.clone());
        let queued = QueuedJob {
            job_id: job_id.clone(),
            session_id: s.id.clone(),
            model: s.model.clone(),
            memory,
            image: s.image.clone(),
            clicks: s.annotations.clone(),
            config,
        };
        self.queue
            .send(queued)
            .map_err(|_| ServiceError::Internal("job queue is closed".into()))?;
        s.active_job = Some(job_id);
        Ok(status)
    }

    fn merge_config(
        &self,
        overrides: &serde_json::Value,
        min_side: usize,
    ) -> ServiceResult<FinetuneConfig> {
        let serde_json::Value::Object(fields) = overrides else {
            return Err(ServiceError::Unprocessable(
                "fine-tune overrides must be a JSON object".into(),
            ));
        };
        let mut merged = serde_json::to_value(&self.config.finetune)
            .map_err(|e| ServiceError::Internal(e.to_string()))?;
        for (k, v) in fields {
            merged[k] = v.clone();
        }
        let mut cfg: FinetuneConfig = serde_json::from_value(merged)
            .map_err(|e| ServiceError::Unprocessable(format!("fine-tune config: {e}")))?;
        if cfg.selection_mode == SelectionMode::Benchmark {
            return Err(ServiceError::Unprocessable(
                "benchmark selection needs ground truth, which the service does not have".into(),
            ));
        }
        // A default crop larger than the image shrinks to fit; an explicit one is kept.
        if !fields.contains_key("crop_size") && cfg.crop_size > min_side {
            cfg.crop_size = (min_side / ENCODER_STRIDE * ENCODER_STRIDE).max(ENCODER_STRIDE);
        }
        if cfg.crop_size > min_side {
            return Err(ServiceError::Unprocessable(format!(
                "crop_size {} exceeds the image side {min_side}",
                cfg.crop_size
            )));
        }
        cfg.validate()
            .map_err(|e| ServiceError::Unprocessable(e.to_string()))?;
        Ok(cfg)
    }

    pub fn prediction(
        &self,
        session_id: &str,
        version: usize,
    ) -> ServiceResult<(Arc<Prediction>, Option<String>)> {
        let session = self.session(session_id)?;
        let s = lock(&session);
        let pred =
            s.predictions.get(version).cloned().ok_or_else(|| {
                ServiceError::NotFound(format!("no prediction version {version}"))
            })?;
        Ok((pred, s.memory.as_ref().map(|m| m.weights_hash().to_owned())))
    }

    /// Recomputes the memory hash from the stored weights.
    pub fn verify_memory(&self, session_id: &str) -> ServiceResult<Option<bool>> {
        let session = self.session(session_id)?;
        let memory = lock(&session).memory.clone();
        Ok(memory.map(|m| m.verify()))
    }

    fn update_job(&self, job_id: &str, f: impl FnOnce(&mut JobStatus)) {
        if let Some(job) = lock(&self.jobs).get_mut(job_id) {
            if !job.state.is_terminal() {
                f(job);
            }
        }
    }

    /// Runs one queued job to completion. Blocking.
    pub fn run_job(&self, job: QueuedJob) {
        let QueuedJob {
            job_id,
            session_id,
            model,
            memory,
            image,
            clicks,
            config,
        } = job;
        self.update_job(&job_id, |j| j.state = JobState::Running);
        let result = finetune_incremental(model, &memory, &image, &clicks, &config, None, |p| {
            self.update_job(&job_id, |j| {
                j.step = p.step;
                j.fraction = p.fraction();
                j.loss_tail.push(StepLoss {
                    step: p.step,
                    total: p.loss,
                    terms: None,
                });
                let excess = j.loss_tail.len().saturating_sub(LOSS_TAIL);
                j.loss_tail.drain(..excess);
            });
        })
        .and_then(|outcome| {
            let pred = predict_sliding(
                &outcome.model,
                &image,
                self.config.prediction_window,
                self.config.prediction_overlap,
            )?;
            Ok((outcome, pred.mask))
        });
        match result {
            Ok((outcome, mask)) => {
                let tail: Vec<StepLoss> = outcome
                    .trace
                    .steps
                    .iter()
                    .rev()
                    .take(LOSS_TAIL)
                    .rev()
                    .map(|s| StepLoss {
                        step: s.step,
                        total: s.loss.total,
                        terms: Some(s.loss.clone()),
                    })
                    .collect();
                let version = match self.session(&session_id) {
                    Ok(session) => {
                        let mut s = lock(&session);
                        let version = s.predictions.len();
                        s.predictions.push(Arc::new(Prediction {
                            version,
                            source: format!("job:{job_id}"),
                            label_space: outcome.model.label_space().clone(),
                            mask,
                            model_hash: outcome.model.weights_hash(),
                        }));
                        s.model = outcome.model;
                        s.active_job = None;
                        Some(version)
                    }
                    Err(_) => None,
                };
                self.update_job(&job_id, |j| {
                    j.state = JobState::Done;
                    j.step = j.total_steps;
                    j.fraction = 1.0;
                    j.loss_tail = tail;
                    j.prediction_version = version;
                });
            }
            Err(e) => self.fail_job(&job_id, &session_id, e.to_string()),
        }
    }

    pub fn fail_job(&self, job_id: &str, session_id: &str, message: String) {
        log::warn!("job {job_id} failed: {message}");
        if let Ok(session) = self.session(session_id) {
            let mut s = lock(&session);
            if s.active_job.as_deref() == Some(job_id) {
                s.active_job = None;
            }
        }
        self.update_job(job_id, |j| {
            j.state = JobState::Failed;
            j.error = Some(message);
        });
    }
}

/// Spawns `workers` tasks that drain the queue in FIFO order.
pub fn spawn_workers(state: Arc<AppState>, rx: JobReceiver) {
    let rx = Arc::new(tokio::sync::Mutex::new(rx));
    for _ in 0..state.config.workers {
        let state = state.clone();
        let rx = rx.clone();
        tokio::spawn(async move {
            loop {
                let Some(job) = rx.lock().await.recv().await else {
                    break;
                };
                let (job_id, session_id) = (job.job_id.clone(), job.session_id.clone());
                let st = state.clone();
                if tokio::task::spawn_blocking(move || st.run_job(job))
                    .await
                    .is_err()
                {
                    state.fail_job(&job_id, &session_id, "fine-tuning worker panicked".into());
                }
            }
        });
    }
}

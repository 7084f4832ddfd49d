//! Job records, the on-disk store and the bounded worker pool.
//!
//! All state transitions go through [`JobTable`] under one mutex; workers
//! only compute, then hand their result back to the table.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::Notify;

use magicmix_core::io::image::encode_png;
use magicmix_core::io::{sha256_hex, write_atomic};
use magicmix_core::magicmix::SweepCell;
use magicmix_core::request::{run_mix, run_sweep, MixRequest, SweepRequest};
use magicmix_core::par::Execution;

use crate::registry::Registry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "request", rename_all = "lowercase")]
pub enum JobSpec {
    Mix(MixRequest),
    Sweep(SweepRequest),
}

impl JobSpec {
    pub fn model(&self) -> Option<&str> {
        match self {
            JobSpec::Mix(r) => r.model.as_deref(),
            JobSpec::Sweep(r) => r.model.as_deref(),
        }
    }

    pub fn dataset(&self) -> Option<&str> {
        match self {
            JobSpec::Mix(r) => r.dataset.as_deref(),
            JobSpec::Sweep(r) => r.dataset.as_deref(),
        }
    }
}

/// Per-cell metadata echoed with the result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellInfo {
    pub index: usize,
    pub row: usize,
    pub col: usize,
    pub nu: f64,
    pub k_min_frac: f64,
    pub k_max_frac: f64,
    pub scale: f64,
    pub seed: u64,
    pub k_min: usize,
    pub k_max: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub state: JobState,
    #[serde(flatten)]
    pub spec: JobSpec,
    pub model_sha256: String,
    pub submitted_at: f64,
    pub started_at: Option<f64>,
    pub finished_at: Option<f64>,
    pub compute_time_s: Option<f64>,
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<CellInfo>,
    pub error: Option<String>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Content address of a job: the hash of its canonical JSON (sorted keys)
/// together with the model weights' hash.
pub fn job_id(spec: &JobSpec, model_sha256: &str) -> String {
    let doc = serde_json::json!({"job": spec, "model_sha256": model_sha256});
    sha256_hex(&serde_json::to_vec(&doc).expect("job specs serialize"))
}

pub struct Submit {
    pub id: String,
    pub state: JobState,
    /// False when an existing job was returned.
    pub created: bool,
}

#[derive(Debug)]
pub enum SubmitError {
    Capacity { queued: usize, limit: usize },
    Io(String),
}

struct Table {
    jobs: BTreeMap<String, JobRecord>,
    queue: VecDeque<String>,
}

/// The single owner of job state.
pub struct JobTable {
    dir: PathBuf,
    queue_capacity: usize,
    inner: Mutex<Table>,
    wake: Notify,
}

impl JobTable {
    /// Opens (or creates) `dir/jobs`, reloading persisted jobs. Jobs that were
    /// queued or running when the previous process stopped are queued again.
    pub fn open(dir: &Path, queue_capacity: usize) -> std::io::Result<Self> {
        let jobs_dir = dir.join("jobs");
        std::fs::create_dir_all(&jobs_dir)?;
        let mut jobs = BTreeMap::new();
        let mut requeue = Vec::new();
        for entry in std::fs::read_dir(&jobs_dir)? {
            let path = entry?.path().join("job.json");
            let Ok(bytes) = std::fs::read(&path) else { continue };
            let Ok(mut rec) = serde_json::from_slice::<JobRecord>(&bytes) else {
                log::warn!("skipping unreadable job record {}", path.display());
                continue;
            };
            if matches!(rec.state, JobState::Queued | JobState::Running) {
                rec.state = JobState::Queued;
                rec.started_at = None;
                requeue.push((rec.submitted_at, rec.id.clone()));
            }
            jobs.insert(rec.id.clone(), rec);
        }
        requeue.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Self {
            dir: jobs_dir,
            queue_capacity,
            inner: Mutex::new(Table {
                jobs,
                queue: requeue.into_iter().map(|(_, id)| id).collect(),
            }),
            wake: Notify::new(),
        })
    }

    pub fn job_dir(&self, id: &str) -> PathBuf {
        self.dir.join(id)
    }

    fn persist(&self, rec: &JobRecord) -> std::io::Result<()> {
        let dir = self.job_dir(&rec.id);
        std::fs::create_dir_all(&dir)?;
        let bytes = serde_json::to_vec_pretty(rec).map_err(std::io::Error::other)?;
        write_atomic(&dir.join("job.json"), &bytes).map_err(std::io::Error::other)
    }

    pub fn get(&self, id: &str) -> Option<JobRecord> {
        self.inner.lock().unwrap().jobs.get(id).cloned()
    }

    pub fn counts(&self) -> (usize, usize) {
        let t = self.inner.lock().unwrap();
        let running = t.jobs.values().filter(|j| j.state == JobState::Running).count();
        (t.queue.len(), running)
    }

    /// Enqueues `spec` unless an identical job exists. Failed jobs are retried.
    pub fn submit(&self, spec: JobSpec, model_sha256: &str) -> Result<Submit, SubmitError> {
        let id = job_id(&spec, model_sha256);
        let mut t = self.inner.lock().unwrap();
        if let Some(existing) = t.jobs.get(&id) {
            if existing.state != JobState::Failed {
                return Ok(Submit {
                    id,
                    state: existing.state,
                    created: false,
                });
            }
        }
        if t.queue.len() >= self.queue_capacity {
            return Err(SubmitError::Capacity {
                queued: t.queue.len(),
                limit: self.queue_capacity,
            });
        }
        let rec = JobRecord {
            id: id.clone(),
            state: JobState::Queued,
            spec,
            model_sha256: model_sha256.to_string(),
            submitted_at: now(),
            started_at: None,
            finished_at: None,
            compute_time_s: None,
            rows: 0,
            cols: 0,
            cells: Vec::new(),
            error: None,
        };
        self.persist(&rec).map_err(|e| SubmitError::Io(e.to_string()))?;
        t.jobs.insert(id.clone(), rec);
        t.queue.push_back(id.clone());
        drop(t);
        self.wake.notify_one();
        Ok(Submit {
            id,
            state: JobState::Queued,
            created: true,
        })
    }

    /// Takes the next queued job and marks it running.
    fn claim(&self) -> Option<JobRecord> {
        let mut t = self.inner.lock().unwrap();
        let id = t.queue.pop_front()?;
        let rec = t.jobs.get_mut(&id)?;
        rec.state = JobState::Running;
        rec.started_at = Some(now());
        let rec = rec.clone();
        if let Err(e) = self.persist(&rec) {
            log::warn!("could not persist job {id}: {e}");
        }
        Some(rec)
    }

    fn complete(&self, id: &str, outcome: Result<Completed, String>) {
        let mut t = self.inner.lock().unwrap();
        let Some(rec) = t.jobs.get_mut(id) else { return };
        rec.finished_at = Some(now());
        match outcome {
            Ok(c) => {
                rec.state = JobState::Done;
                rec.rows = c.rows;
                rec.cols = c.cols;
                rec.cells = c.cells;
                rec.compute_time_s = Some(c.compute_time_s);
            }
            Err(e) => {
                rec.state = JobState::Failed;
                rec.error = Some(e);
            }
        }
        let rec = rec.clone();
        if let Err(e) = self.persist(&rec) {
            log::warn!("could not persist job {id}: {e}");
        }
    }

    /// Waits until a job is available and claims it.
    async fn next(&self) -> JobRecord {
        loop {
            let notified = self.wake.notified();
            if let Some(rec) = self.claim() {
                return rec;
            }
            notified.await;
        }
    }
}

struct Completed {
    rows: usize,
    cols: usize,
    cells: Vec<CellInfo>,
    compute_time_s: f64,
}

fn write_cell(dir: &Path, index: usize, png: &[u8]) -> Result<String, String> {
    write_atomic(&dir.join(format!("cell-{index:03}.png")), png).map_err(|e| e.to_string())?;
    Ok(sha256_hex(png))
}

/// Runs a claimed job to completion on the calling (blocking) thread.
fn compute(rec: &JobRecord, registry: &Registry, dir: &Path, exec: Execution) -> Result<Completed, String> {
    let t0 = Instant::now();
    let model = registry.model(rec.spec.model()).map_err(|e| e.to_string())?;
    let dataset = match rec.spec.dataset() {
        Some(name) => Some(registry.dataset(name).map_err(|e| e.to_string())?),
        None => registry.default_dataset(),
    };
    let dataset = dataset.as_deref();
    let uploads = registry.uploads_dir();
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let cell = |c: &SweepCell, row, col, k_min, k_max, sha256| CellInfo {
        index: c.index,
        row,
        col,
        nu: c.nu,
        k_min_frac: c.k_min_frac,
        k_max_frac: c.k_max_frac,
        scale: c.scale,
        seed: c.seed,
        k_min,
        k_max,
        sha256,
    };
    match &rec.spec {
        JobSpec::Mix(req) => {
            let res = run_mix(model.denoiser(), model.vocabulary(), req, dataset, uploads, false).map_err(|e| e.to_string())?;
            let png = encode_png(&res.x0).map_err(|e| e.to_string())?;
            let sha = write_cell(dir, 0, &png)?;
            let c = SweepCell {
                index: 0,
                nu: req.config.nu,
                k_min_frac: req.config.k_min_frac,
                k_max_frac: req.config.k_max_frac,
                scale: 1.0,
                seed: req.config.seed,
            };
            Ok(Completed {
                rows: 1,
                cols: 1,
                cells: vec![cell(&c, 0, 0, res.window.k_min, res.window.k_max, sha)],
                compute_time_s: t0.elapsed().as_secs_f64(),
            })
        }
        JobSpec::Sweep(req) => {
            let res = run_sweep(model.denoiser(), model.vocabulary(), req, dataset, uploads, exec).map_err(|e| e.to_string())?;
            let mut cells = Vec::with_capacity(res.cells.len());
            for (c, m) in res.cells.iter().zip(&res.results) {
                let png = encode_png(&m.x0).map_err(|e| e.to_string())?;
                let sha = write_cell(dir, c.index, &png)?;
                cells.push(cell(c, c.index / res.cols, c.index % res.cols, m.window.k_min, m.window.k_max, sha));
            }
            if let Some(montage) = &res.montage {
                let png = montage.to_png().map_err(|e| e.to_string())?;
                write_atomic(&dir.join("montage.png"), &png).map_err(|e| e.to_string())?;
            }
            Ok(Completed {
                rows: res.rows,
                cols: res.cols,
                cells,
                compute_time_s: t0.elapsed().as_secs_f64(),
            })
        }
    }
}

/// Spawns `workers` executors that drain the table until the runtime stops.
pub fn spawn_workers(table: Arc<JobTable>, registry: Arc<Registry>, workers: usize, exec: Execution) {
    for _ in 0..workers.max(1) {
        let table = table.clone();
        let registry = registry.clone();
        tokio::spawn(async move {
            loop {
                let rec = table.next().await;
                let id = rec.id.clone();
                let dir = table.job_dir(&id);
                let reg = registry.clone();
                let outcome = tokio::task::spawn_blocking(move || compute(&rec, &reg, &dir, exec))
                    .await
                    .unwrap_or_else(|e| Err(format!("worker panicked: {e}")));
                if let Err(e) = &outcome {
                    log::warn!("job {id} failed: {e}");
                }
                table.complete(&id, outcome);
            }
        });
    }
}

/// Config echo and timings for a finished job, as returned by the API.
pub fn describe(rec: &JobRecord) -> Value {
    serde_json::to_value(rec).unwrap_or(Value::Null)
}

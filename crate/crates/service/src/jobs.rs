//! Persistent job table and its single worker thread. Jobs either train
//! the next model of the project or segment one slide with a model.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use candle_core::DType;
use dial_core::dial::{DialProject, JobMode, JobSpec, Phase};
use dial_core::raster;
use dial_core::segnet::{segment_slide, SegmentationMask};
use dial_core::slide::{tissue_mask, DEFAULT_TISSUE_MAGNIFICATION};
use dial_core::{Error, Result};

pub const JOBS_FILE: &str = "jobs.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobState {
    Queued,
    Running,
    Succeeded,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Succeeded | JobState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JobTask {
    Train { spec: JobSpec },
    Finetune { spec: JobSpec },
    SegmentSlide { slide_id: String, model_tag: String },
}

impl JobTask {
    pub fn training(spec: JobSpec) -> Self {
        match spec.mode {
            JobMode::Train => JobTask::Train { spec },
            JobMode::Finetune => JobTask::Finetune { spec },
        }
    }

    pub fn spec(&self) -> Option<&JobSpec> {
        match self {
            JobTask::Train { spec } | JobTask::Finetune { spec } => Some(spec),
            JobTask::SegmentSlide { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    #[serde(flatten)]
    pub task: JobTask,
    pub state: JobState,
    /// Fraction of the work done; never decreases.
    pub progress: f64,
    pub error: Option<String>,
    /// Checkpoint hash of a trained model, or the segmentation directory
    /// relative to the project root.
    pub result: Option<String>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct JobTable {
    jobs: Vec<JobRecord>,
}

struct Shared {
    table: Mutex<JobTable>,
    wake: Condvar,
    path: PathBuf,
}

/// Jobs live in `jobs.json` next to the project log. One job runs at a
/// time and at most one training job is queued or running; progress is
/// persisted in coarse steps.
#[derive(Clone)]
pub struct JobQueue {
    shared: Arc<Shared>,
}

impl JobQueue {
    /// Loads the table and settles jobs a previous process left unfinished:
    /// a job whose output is on record succeeded, any other is failed, and a
    /// still-pending training phase gets a fresh job.
    pub fn open(project: &DialProject) -> Result<Self> {
        let path = project.root().join(JOBS_FILE);
        let mut table: JobTable = if path.is_file() {
            raster::read_json(&path)?
        } else {
            JobTable::default()
        };
        for job in table.jobs.iter_mut().filter(|j| !j.state.is_terminal()) {
            let done = match &job.task {
                JobTask::Train { spec } | JobTask::Finetune { spec } => project
                    .models()
                    .iter()
                    .find(|m| m.tag == spec.target_tag && m.parent_hash.as_deref() == Some(&spec.parent_hash))
                    .map(|m| m.hash.clone()),
                JobTask::SegmentSlide { slide_id, model_tag } => {
                    let dir = project.segmentation_dir(slide_id, model_tag);
                    SegmentationMask::load(&dir).ok().map(|_| relative(project, &dir))
                }
            };
            match done {
                Some(result) => {
                    job.state = JobState::Succeeded;
                    job.progress = 1.0;
                    job.result = Some(result);
                }
                None => {
                    job.state = JobState::Failed;
                    job.error = Some("interrupted by a service restart".into());
                }
            }
            job.updated_at = Utc::now();
        }
        let queue = Self {
            shared: Arc::new(Shared {
                table: Mutex::new(table),
                wake: Condvar::new(),
                path,
            }),
        };
        queue.persist(&queue.shared.table.lock())?;
        if let Phase::Training { job } = project.phase() {
            queue.submit(JobTask::training((**job).clone()))?;
        }
        Ok(queue)
    }

    fn persist(&self, table: &JobTable) -> Result<()> {
        raster::write_json(&self.shared.path, table)
    }

    pub fn path(&self) -> &Path {
        &self.shared.path
    }

    /// Queues `task`. A training task is refused while another training
    /// job is queued or running, and a segmentation already queued for the
    /// same slide and model is returned instead of a duplicate.
    pub fn submit(&self, task: JobTask) -> Result<JobRecord> {
        let mut table = self.shared.table.lock();
        let active = |j: &&JobRecord| !j.state.is_terminal();
        if task.spec().is_some() {
            if let Some(j) = table.jobs.iter().filter(active).find(|j| j.task.spec().is_some()) {
                return Err(Error::Conflict(format!("training job {} is still {:?}", j.job_id, j.state)));
            }
        } else if let Some(j) = table.jobs.iter().filter(active).find(|j| j.task == task) {
            return Ok(j.clone());
        }
        let now = Utc::now();
        let job = JobRecord {
            job_id: format!("job-{:06}", table.jobs.len() + 1),
            task,
            state: JobState::Queued,
            progress: 0.0,
            error: None,
            result: None,
            created_at: now,
            updated_at: now,
        };
        table.jobs.push(job.clone());
        self.persist(&table)?;
        self.shared.wake.notify_all();
        Ok(job)
    }

    pub fn get(&self, job_id: &str) -> Option<JobRecord> {
        self.shared.table.lock().jobs.iter().find(|j| j.job_id == job_id).cloned()
    }

    pub fn list(&self) -> Vec<JobRecord> {
        self.shared.table.lock().jobs.clone()
    }

    fn update(&self, job_id: &str, persist: bool, f: impl FnOnce(&mut JobRecord)) {
        let mut table = self.shared.table.lock();
        if let Some(j) = table.jobs.iter_mut().find(|j| j.job_id == job_id) {
            if j.state.is_terminal() {
                return;
            }
            f(j);
            j.updated_at = Utc::now();
        }
        if persist {
            if let Err(e) = self.persist(&table) {
                log::error!("could not persist the job table: {e}");
            }
        }
    }

    fn next_queued(&self) -> JobRecord {
        let mut table = self.shared.table.lock();
        loop {
            if let Some(j) = table.jobs.iter().find(|j| j.state == JobState::Queued) {
                return j.clone();
            }
            self.shared.wake.wait(&mut table);
        }
    }

    /// Runs queued jobs forever on a dedicated thread. The project lock is
    /// held only to load inputs and to install or reject the result.
    pub fn spawn_worker(&self, project: Arc<Mutex<DialProject>>) -> std::thread::JoinHandle<()> {
        let queue = self.clone();
        std::thread::Builder::new()
            .name("dial-trainer".into())
            .spawn(move || loop {
                let job = queue.next_queued();
                queue.update(&job.job_id, true, |j| j.state = JobState::Running);
                let outcome = run_job(&queue, &project, &job);
                match outcome {
                    Ok(result) => queue.update(&job.job_id, true, |j| {
                        j.state = JobState::Succeeded;
                        j.progress = 1.0;
                        j.result = Some(result);
                    }),
                    Err(e) => {
                        log::error!("job {} failed: {e}", job.job_id);
                        if let Some(spec) = job.task.spec() {
                            if let Err(e2) = project.lock().record_job_failure(spec, &e.to_string()) {
                                log::error!("could not record the failure of {}: {e2}", job.job_id);
                            }
                        }
                        queue.update(&job.job_id, true, |j| {
                            j.state = JobState::Failed;
                            j.error = Some(e.to_string());
                        });
                    }
                }
            })
            .expect("spawn worker thread")
    }
}

fn relative(project: &DialProject, dir: &Path) -> String {
    dir.strip_prefix(project.root()).unwrap_or(dir).display().to_string()
}

fn run_job(queue: &JobQueue, project: &Mutex<DialProject>, job: &JobRecord) -> Result<String> {
    match &job.task {
        JobTask::Train { spec } | JobTask::Finetune { spec } => train(queue, project, &job.job_id, spec),
        JobTask::SegmentSlide { slide_id, model_tag } => {
            let (net, slide, dir) = {
                let p = project.lock();
                let model = p
                    .models()
                    .iter()
                    .find(|m| &m.tag == model_tag)
                    .ok_or_else(|| Error::NotFound(format!("model {model_tag}")))?;
                let ck = p.load_model(model.iteration)?;
                (ck.instantiate(DType::F32)?, p.slide(slide_id)?, p.segmentation_dir(slide_id, model_tag))
            };
            let tissue = tissue_mask(&slide, DEFAULT_TISSUE_MAGNIFICATION)?;
            let mask = segment_slide(&net, model_tag, &slide, &tissue)?;
            mask.save(&dir, slide.meta().tile_size)?;
            Ok(relative(&project.lock(), &dir))
        }
    }
}

fn train(queue: &JobQueue, project: &Mutex<DialProject>, job_id: &str, spec: &JobSpec) -> Result<String> {
    let prepared = project.lock().prepare_job(spec)?;
    let mut last_saved = 0.0;
    let ck = prepared.run(&mut |p| {
        let p = p.clamp(0.0, 1.0);
        let persist = p - last_saved >= 0.05;
        if persist {
            last_saved = p;
        }
        queue.update(job_id, persist, |j| j.progress = j.progress.max(p));
    })?;
    project.lock().install_model(spec, &ck)?;
    Ok(ck.hash().to_string())
}

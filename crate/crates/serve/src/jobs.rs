//! Edit jobs: the on-disk job directory layout and the in-process store the
//! HTTP service polls.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use radfield::dataset::Dataset;
use radfield::field::{save_checkpoint, RadianceField};
use radfield::mask::MaskSet;
use radfield::pipeline::{repaint, write_loss_csv, EditJob, JobPhase, JobStatus, Providers, RepaintOutcome};
use radfield::planes::Plane;
use radfield::{Error, Result};

pub const FINAL_CHECKPOINT: &str = "final.rpck";
pub const STATUS_FILE: &str = "status.json";
pub const JOB_FILE: &str = "job.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const PRETRAIN_LOSS_FILE: &str = "pretrain_loss.csv";
pub const PREVIEW_DIR: &str = "previews";

pub fn preview_file(step: usize) -> String {
    format!("step_{step:06}.png")
}

/// Runs one edit job, writing into `dir`: the job settings, a status file
/// refreshed at every report, preview PNGs, loss traces and the final
/// checkpoint. `on_status` sees every report together with the path of the
/// preview written for it.
pub fn run_edit(
    dir: &Path,
    base: &RadianceField<f32>,
    masks: &MaskSet,
    dataset: Option<&Dataset>,
    job: &EditJob,
    providers: &Providers,
    job_id: &str,
    on_status: &mut dyn FnMut(&JobStatus, Option<&Path>),
) -> Result<RepaintOutcome> {
    let previews = dir.join(PREVIEW_DIR);
    fs::create_dir_all(&previews).map_err(|e| Error::io(&previews, e))?;
    write_json(&dir.join(JOB_FILE), job)?;
    let status_path = dir.join(STATUS_FILE);
    let mut io_error = None;
    // The done report is held back until the outputs exist on disk.
    let mut done: Option<(JobStatus, Option<PathBuf>)> = None;
    let mut report = |s: &JobStatus, preview: Option<&Plane>| {
        let mut written = None;
        if let Some(p) = preview {
            let path = previews.join(preview_file(s.step));
            match p.write_png(&path) {
                Ok(()) => written = Some(path),
                Err(e) => {
                    io_error.get_or_insert(e);
                }
            }
        }
        if s.phase == JobPhase::Done {
            done = Some((s.clone(), written));
            return;
        }
        if let Err(e) = write_json(&status_path, s) {
            io_error.get_or_insert(e);
        }
        on_status(s, written.as_deref());
    };
    let outcome = repaint(base, masks, dataset, job, providers, job_id, &mut report)?;
    if let Some(e) = io_error {
        return Err(e);
    }
    write_loss_csv(&outcome.trace, &dir.join(LOSS_FILE))?;
    if !outcome.pretrain_trace.is_empty() {
        write_loss_csv(&outcome.pretrain_trace, &dir.join(PRETRAIN_LOSS_FILE))?;
    }
    save_checkpoint(&outcome.field, None, &dir.join(FINAL_CHECKPOINT))?;
    let (status, preview) = done.unwrap_or_else(|| (outcome.status.clone(), None));
    write_json(&status_path, &status)?;
    on_status(&status, preview.as_deref());
    Ok(outcome)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("job data serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct JobRecord {
    pub status: JobStatus,
    pub dir: PathBuf,
    pub latest_preview: Option<PathBuf>,
}

/// Job table plus the single worker slot. Locks are held only to copy or
/// replace a record, so status reads never wait on a running job.
#[derive(Debug, Default)]
pub struct JobStore {
    jobs: Mutex<BTreeMap<String, JobRecord>>,
    active: Mutex<Option<String>>,
}

impl JobStore {
    pub fn get(&self, id: &str) -> Option<JobRecord> {
        self.jobs.lock().unwrap().get(id).cloned()
    }

    pub fn len(&self) -> usize {
        self.jobs.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Claims the worker for `id`, or returns the id of the job holding it.
    pub fn claim(&self, id: &str, dir: PathBuf, total_steps: usize) -> std::result::Result<(), String> {
        let mut active = self.active.lock().unwrap();
        if let Some(running) = active.as_ref() {
            return Err(running.clone());
        }
        *active = Some(id.to_string());
        self.jobs.lock().unwrap().insert(
            id.to_string(),
            JobRecord {
                status: JobStatus {
                    job_id: id.to_string(),
                    phase: JobPhase::Pretrain,
                    step: 0,
                    total_steps,
                    loss: None,
                    preview_view: None,
                    message: None,
                },
                dir,
                latest_preview: None,
            },
        );
        Ok(())
    }

    /// Records a report; a terminal one also frees the worker, so a client
    /// that sees `done` can submit the next job straight away.
    pub fn update(&self, status: &JobStatus, preview: Option<&Path>) {
        if let Some(rec) = self.jobs.lock().unwrap().get_mut(&status.job_id) {
            rec.status = status.clone();
            if let Some(p) = preview {
                rec.latest_preview = Some(p.to_path_buf());
            }
        }
        if status.phase.is_terminal() {
            self.release(&status.job_id);
        }
    }

    /// Marks the job failed unless it already reached a terminal phase.
    pub fn fail(&self, id: &str, message: String) {
        if let Some(rec) = self.jobs.lock().unwrap().get_mut(id) {
            if !rec.status.phase.is_terminal() {
                rec.status.phase = JobPhase::Failed;
                rec.status.message = Some(message);
            }
        }
        self.release(id);
    }

    pub fn release(&self, id: &str) {
        let mut active = self.active.lock().unwrap();
        if active.as_deref() == Some(id) {
            *active = None;
        }
    }
}

/// Everything a background edit needs, owned so it can move to a thread.
pub struct EditTask {
    pub dir: PathBuf,
    pub base: Arc<RadianceField<f32>>,
    pub masks: MaskSet,
    pub dataset: Option<Arc<Dataset>>,
    pub job: EditJob,
    pub providers: Providers,
    pub job_id: String,
}

/// Runs `task` on its own thread, reporting into `store`; the worker slot
/// must already be claimed for `task.job_id`.
pub fn spawn_edit(store: Arc<JobStore>, task: EditTask) -> std::thread::JoinHandle<()> {
    std::thread::spawn(move || {
        let id = task.job_id.clone();
        let result = run_edit(
            &task.dir,
            &task.base,
            &task.masks,
            task.dataset.as_deref(),
            &task.job,
            &task.providers,
            &task.job_id,
            &mut |s, p| store.update(s, p),
        );
        match result {
            Ok(_) => store.release(&id),
            Err(e) => store.fail(&id, e.to_string()),
        }
    })
}

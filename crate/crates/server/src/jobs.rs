//! Persistent FIFO job queue with a single worker.
//!
//! Every state change appends `{event, job}` (u32 little-endian length, then
//! canonical JSON) to the queue log and flushes it before returning. On open
//! the last record per job wins; a job left running by a crash becomes
//! failed with error "interrupted" and is not retried.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use chrono::{DateTime, NaiveDate, Utc};
use pipescan_core::domain::{to_canonical_vec, PipelineParams};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::clock::Clock;

pub const INTERRUPTED: &str = "interrupted";
pub const CANCELLED: &str = "cancelled";
/// Log records beyond one per job tolerated before the log is rewritten.
const COMPACT_SLACK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    AnalyzeInspection,
    RetrainModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Succeeded,
    Failed,
    Cancelled,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Succeeded | JobState::Failed | JobState::Cancelled)
    }

    pub fn parse(s: &str) -> Option<JobState> {
        serde_json::from_value(Value::String(s.to_string())).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzePayload {
    pub inspection_id: String,
    pub model_version_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrainPayload {
    pub dataset_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<PipelineParams>,
}

impl JobKind {
    /// Check a payload against the kind's schema.
    pub fn validate(self, payload: &Value) -> Result<(), String> {
        let nonempty = |field: &str, v: &str| {
            if v.is_empty() {
                Err(format!("{field} must be non-empty"))
            } else {
                Ok(())
            }
        };
        match self {
            JobKind::AnalyzeInspection => {
                let p: AnalyzePayload = serde_json::from_value(payload.clone()).map_err(|e| e.to_string())?;
                nonempty("inspection_id", &p.inspection_id)?;
                nonempty("model_version_id", &p.model_version_id)
            }
            JobKind::RetrainModel => {
                let p: RetrainPayload = serde_json::from_value(payload.clone()).map_err(|e| e.to_string())?;
                nonempty("dataset_id", &p.dataset_id)?;
                if let Some(f) = &p.family {
                    nonempty("family", f)?;
                }
                match p.params {
                    Some(params) => params.validate().map_err(|e| e.to_string()),
                    None => Ok(()),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub kind: JobKind,
    pub payload: Value,
    pub state: JobState,
    pub enqueued_at: Option<DateTime<Utc>>,
    pub started_at: Option<DateTime<Utc>>,
    pub finished_at: Option<DateTime<Utc>>,
    pub result_ref: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Error)]
pub enum JobError {
    #[error("job {0} not found")]
    NotFound(String),
    #[error("job {id} is already {state:?}")]
    Conflict { id: String, state: JobState },
    #[error("invalid payload: {0}")]
    InvalidPayload(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

/// Cooperative cancellation flag handed to a running handler.
#[derive(Debug, Clone, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }
}

/// What the worker runs.
pub trait JobHandler: Send + Sync {
    /// Execute a job. `Ok` carries the result reference; handlers that see
    /// the token fire should return `Err` (recorded as "cancelled").
    fn run(&self, job: &Job, cancel: &CancelToken) -> Result<String, String>;

    /// Called once after a job reaches a terminal state, however it got there.
    fn finalize(&self, _job: &Job) {}
}

#[derive(Serialize, Deserialize)]
struct Record {
    event: Event,
    job: Job,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Event {
    Enqueued,
    Started,
    Finished,
    Cancelled,
}

fn event_for(state: JobState) -> Event {
    match state {
        JobState::Queued => Event::Enqueued,
        JobState::Running => Event::Started,
        JobState::Succeeded | JobState::Failed => Event::Finished,
        JobState::Cancelled => Event::Cancelled,
    }
}

fn encode(event: Event, job: &Job) -> Vec<u8> {
    let body = to_canonical_vec(&Record { event, job: job.clone() }).expect("jobs serialize");
    let mut out = (body.len() as u32).to_le_bytes().to_vec();
    out.extend(body);
    out
}

struct State {
    jobs: Vec<Job>,
    index: HashMap<String, usize>,
    log: File,
    records: usize,
    running: Option<(String, CancelToken)>,
}

pub struct JobQueue {
    name: String,
    path: PathBuf,
    clock: Arc<dyn Clock>,
    handler: Arc<dyn JobHandler>,
    state: Mutex<State>,
    /// Held for the whole of a worker step, so at most one job runs.
    step: Mutex<()>,
    wake: Condvar,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> JobError + '_ {
    move |source| JobError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Replay a log. Returns jobs in first-seen order and the valid byte prefix.
fn replay(bytes: &[u8]) -> (Vec<Job>, usize) {
    let mut jobs: Vec<Job> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut pos = 0;
    while bytes.len() - pos >= 4 {
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        let Some(body) = bytes.get(pos + 4..pos + 4 + len) else { break };
        let Ok(rec) = serde_json::from_slice::<Record>(body) else { break };
        match index.get(&rec.job.id) {
            Some(&i) => jobs[i] = rec.job,
            None => {
                index.insert(rec.job.id.clone(), jobs.len());
                jobs.push(rec.job);
            }
        }
        pos += 4 + len;
    }
    (jobs, pos)
}

impl JobQueue {
    /// Open or create the queue persisted at `path`.
    pub fn open(
        name: impl Into<String>,
        path: impl AsRef<Path>,
        clock: Arc<dyn Clock>,
        handler: Arc<dyn JobHandler>,
    ) -> Result<Self, JobError> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut bytes = Vec::new();
        if path.exists() {
            File::open(&path)
                .and_then(|mut f| f.read_to_end(&mut bytes))
                .map_err(io_err(&path))?;
        }
        let (mut jobs, _valid) = replay(&bytes);
        let now = clock.now();
        let mut interrupted = Vec::new();
        for job in jobs.iter_mut().filter(|j| j.state == JobState::Running) {
            job.state = JobState::Failed;
            job.finished_at = Some(now.max(job.started_at.unwrap_or(now)));
            job.error = Some(INTERRUPTED.into());
            job.result_ref = None;
            interrupted.push(job.clone());
        }
        let index = jobs.iter().enumerate().map(|(i, j)| (j.id.clone(), i)).collect();
        // Rewriting on open drops any torn tail and folds in the recovery.
        let log = Self::write_snapshot(&path, &jobs)?;
        let queue = Self {
            name: name.into(),
            path,
            clock,
            handler,
            state: Mutex::new(State {
                records: jobs.len(),
                jobs,
                index,
                log,
                running: None,
            }),
            step: Mutex::new(()),
            wake: Condvar::new(),
        };
        for job in &interrupted {
            queue.handler.finalize(job);
        }
        Ok(queue)
    }

    fn write_snapshot(path: &Path, jobs: &[Job]) -> Result<File, JobError> {
        let tmp = path.with_extension("tmp");
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        for job in jobs {
            f.write_all(&encode(event_for(job.state), job)).map_err(io_err(&tmp))?;
        }
        f.sync_all().map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))?;
        if let Some(dir) = path.parent() {
            if let Ok(d) = File::open(dir) {
                let _ = d.sync_all();
            }
        }
        OpenOptions::new().append(true).open(path).map_err(io_err(path))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    fn append(&self, st: &mut State, job: &Job) -> Result<(), JobError> {
        st.log
            .write_all(&encode(event_for(job.state), job))
            .and_then(|_| st.log.sync_data())
            .map_err(io_err(&self.path))?;
        st.records += 1;
        if st.records > st.jobs.len() + COMPACT_SLACK {
            st.log = Self::write_snapshot(&self.path, &st.jobs)?;
            st.records = st.jobs.len();
        }
        Ok(())
    }

    /// Append a job; it is durable when this returns.
    pub fn enqueue(&self, kind: JobKind, payload: Value) -> Result<Job, JobError> {
        kind.validate(&payload).map_err(JobError::InvalidPayload)?;
        let mut st = self.state.lock().unwrap();
        let job = Job {
            id: format!("job-{:06}", st.jobs.len() + 1),
            kind,
            payload,
            state: JobState::Queued,
            enqueued_at: Some(self.clock.now()),
            started_at: None,
            finished_at: None,
            result_ref: None,
            error: None,
        };
        let pos = st.jobs.len();
        st.index.insert(job.id.clone(), pos);
        st.jobs.push(job.clone());
        if let Err(e) = self.append(&mut st, &job) {
            st.jobs.pop();
            st.index.remove(&job.id);
            return Err(e);
        }
        drop(st);
        self.wake.notify_all();
        Ok(job)
    }

    pub fn get_job(&self, id: &str) -> Option<Job> {
        let st = self.state.lock().unwrap();
        st.index.get(id).map(|&i| st.jobs[i].clone())
    }

    /// Jobs in enqueue order, optionally only those in `state`.
    pub fn list_jobs(&self, state: Option<JobState>) -> Vec<Job> {
        let st = self.state.lock().unwrap();
        st.jobs
            .iter()
            .filter(|j| state.is_none_or(|s| j.state == s))
            .cloned()
            .collect()
    }

    /// Cancel a queued job outright, or ask a running one to stop. Returns
    /// the job as it stands after the call.
    pub fn cancel(&self, id: &str) -> Result<Job, JobError> {
        let mut st = self.state.lock().unwrap();
        let &i = st.index.get(id).ok_or_else(|| JobError::NotFound(id.to_string()))?;
        match st.jobs[i].state {
            JobState::Queued => {
                let mut job = st.jobs[i].clone();
                job.state = JobState::Cancelled;
                job.finished_at = Some(self.clock.now());
                self.append(&mut st, &job)?;
                st.jobs[i] = job.clone();
                drop(st);
                self.handler.finalize(&job);
                Ok(job)
            }
            JobState::Running => {
                if let Some((rid, token)) = &st.running {
                    if rid == id {
                        token.cancel();
                    }
                }
                Ok(st.jobs[i].clone())
            }
            state => Err(JobError::Conflict { id: id.to_string(), state }),
        }
    }

    /// Run the oldest queued job to completion, if there is one.
    pub fn worker_step(&self) -> Result<Option<Job>, JobError> {
        let _step = self.step.lock().unwrap();
        let Some((job, token)) = self.start_next()? else { return Ok(None) };

        let outcome = catch_unwind(AssertUnwindSafe(|| self.handler.run(&job, &token)))
            .unwrap_or_else(|_| Err("handler panicked".to_string()));

        let mut st = self.state.lock().unwrap();
        let i = st.index[&job.id];
        let mut done = st.jobs[i].clone();
        done.finished_at = Some(self.clock.now().max(done.started_at.unwrap()));
        match outcome {
            Ok(result_ref) => {
                done.state = JobState::Succeeded;
                done.result_ref = Some(result_ref);
            }
            Err(message) => {
                done.state = JobState::Failed;
                done.error = Some(if token.is_cancelled() { CANCELLED.to_string() } else { message });
            }
        }
        st.running = None;
        let logged = self.append(&mut st, &done);
        st.jobs[i] = done.clone();
        drop(st);
        self.handler.finalize(&done);
        logged.map(|_| Some(done))
    }

    fn start_next(&self) -> Result<Option<(Job, CancelToken)>, JobError> {
        let mut st = self.state.lock().unwrap();
        let Some(i) = st.jobs.iter().position(|j| j.state == JobState::Queued) else { return Ok(None) };
        let mut job = st.jobs[i].clone();
        job.state = JobState::Running;
        job.started_at = Some(self.clock.now().max(job.enqueued_at.unwrap()));
        self.append(&mut st, &job)?;
        st.jobs[i] = job.clone();
        let token = CancelToken::default();
        st.running = Some((job.id.clone(), token.clone()));
        Ok(Some((job, token)))
    }

    /// Mark the head job running and stop, as if the process died mid-run.
    #[doc(hidden)]
    pub fn abandon_next(&self) -> Result<Option<Job>, JobError> {
        let _step = self.step.lock().unwrap();
        Ok(self.start_next()?.map(|(j, _)| j))
    }

    pub fn running_count(&self) -> usize {
        self.state.lock().unwrap().jobs.iter().filter(|j| j.state == JobState::Running).count()
    }

    /// Block until a job may be available or `timeout` passes.
    fn wait_for_work(&self, timeout: Duration) {
        let st = self.state.lock().unwrap();
        if st.jobs.iter().any(|j| j.state == JobState::Queued) {
            return;
        }
        let _ = self.wake.wait_timeout(st, timeout).unwrap();
    }
}

/// Something to run once per UTC calendar day.
pub trait DailyHook: Send + Sync {
    fn run(&self, day: NaiveDate);
}

/// The shipped hook does nothing.
pub struct NoopHook;

impl DailyHook for NoopHook {
    fn run(&self, _day: NaiveDate) {}
}

pub struct CronScheduler {
    clock: Arc<dyn Clock>,
    hook: Arc<dyn DailyHook>,
    last: Mutex<Option<NaiveDate>>,
}

impl CronScheduler {
    pub fn new(clock: Arc<dyn Clock>, hook: Arc<dyn DailyHook>) -> Self {
        Self {
            clock,
            hook,
            last: Mutex::new(None),
        }
    }

    /// Run the hook if it has not run yet today. Returns whether it ran.
    pub fn tick(&self) -> bool {
        let today = self.clock.now().date_naive();
        let mut last = self.last.lock().unwrap();
        if *last == Some(today) {
            return false;
        }
        *last = Some(today);
        drop(last);
        self.hook.run(today);
        true
    }
}

/// Background thread driving one queue.
pub struct Worker {
    stop: Arc<AtomicBool>,
    queue: Arc<JobQueue>,
    handle: Option<JoinHandle<()>>,
}

impl Worker {
    pub fn spawn(queue: Arc<JobQueue>, cron: Option<Arc<CronScheduler>>) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let (q, s) = (queue.clone(), stop.clone());
        let handle = std::thread::Builder::new()
            .name(format!("worker-{}", queue.name()))
            .spawn(move || {
                while !s.load(Ordering::SeqCst) {
                    if let Some(c) = &cron {
                        c.tick();
                    }
                    match q.worker_step() {
                        Ok(Some(_)) => {}
                        Ok(None) => q.wait_for_work(Duration::from_millis(200)),
                        Err(e) => {
                            eprintln!("worker {}: {e}", q.name());
                            std::thread::sleep(Duration::from_millis(500));
                        }
                    }
                }
            })
            .expect("spawn worker thread");
        Self {
            stop,
            queue,
            handle: Some(handle),
        }
    }

    /// Finish the current job, then stop.
    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.queue.wake.notify_all();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}

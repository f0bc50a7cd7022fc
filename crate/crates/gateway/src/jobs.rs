//! Background jobs, executed one at a time in submission order.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{mpsc, Arc, Mutex};
use std::thread;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
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

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JobKind {
    DatasetBuild,
    Train,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: u64,
    pub kind: JobKind,
    pub state: JobState,
    /// Fraction in `[0, 1]`.
    pub progress: f64,
    pub message: String,
}

impl JobRecord {
    pub fn new(id: u64, kind: JobKind) -> Self {
        Self {
            id,
            kind,
            state: JobState::Queued,
            progress: 0.0,
            message: "queued".into(),
        }
    }

    /// Moves forward only: states never go back, terminal states are final
    /// and progress never decreases. Returns whether the update applied.
    pub fn advance(&mut self, state: JobState, progress: f64, message: impl Into<String>) -> bool {
        if self.state.is_terminal() || state < self.state {
            return false;
        }
        self.state = state;
        if progress.is_finite() {
            self.progress = progress.clamp(self.progress, 1.0);
        }
        self.message = message.into();
        true
    }
}

type Records = Arc<Mutex<BTreeMap<u64, JobRecord>>>;

/// Handed to a running task to publish progress.
pub struct Progress {
    id: u64,
    records: Records,
}

impl Progress {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn report(&self, fraction: f64, message: impl Into<String>) {
        if let Some(r) = self.records.lock().unwrap().get_mut(&self.id) {
            r.advance(JobState::Running, fraction, message);
        }
    }
}

/// Returns the final message on success.
pub type Task = Box<dyn FnOnce(&Progress) -> Result<String, String> + Send>;

/// Job table plus a single worker thread fed through a FIFO channel.
pub struct JobQueue {
    records: Records,
    sender: Mutex<mpsc::Sender<(u64, Task)>>,
    next_id: Mutex<u64>,
}

impl JobQueue {
    pub fn start() -> Self {
        let records: Records = Arc::default();
        let (sender, receiver) = mpsc::channel::<(u64, Task)>();
        let table = records.clone();
        thread::Builder::new()
            .name("lwe-jobs".into())
            .spawn(move || {
                for (id, task) in receiver {
                    let progress = Progress { id, records: table.clone() };
                    progress.report(0.0, "running");
                    let outcome = catch_unwind(AssertUnwindSafe(|| task(&progress)))
                        .unwrap_or_else(|_| Err("internal fault: job panicked".into()));
                    let mut t = table.lock().unwrap();
                    if let Some(r) = t.get_mut(&id) {
                        match outcome {
                            Ok(msg) => r.advance(JobState::Done, 1.0, msg),
                            Err(msg) => r.advance(JobState::Failed, r.progress, msg),
                        };
                    }
                }
            })
            .expect("spawn job worker");
        Self {
            records,
            sender: Mutex::new(sender),
            next_id: Mutex::new(1),
        }
    }

    /// Registers a queued record and hands the task to the worker.
    pub fn submit(&self, kind: JobKind, task: Task) -> JobRecord {
        let id = {
            let mut next = self.next_id.lock().unwrap();
            let id = *next;
            *next += 1;
            id
        };
        let record = JobRecord::new(id, kind);
        self.records.lock().unwrap().insert(id, record.clone());
        if self.sender.lock().unwrap().send((id, task)).is_err() {
            let mut t = self.records.lock().unwrap();
            let r = t.get_mut(&id).expect("just inserted");
            r.advance(JobState::Failed, 0.0, "internal fault: job worker stopped");
            return r.clone();
        }
        record
    }

    pub fn get(&self, id: u64) -> Option<JobRecord> {
        self.records.lock().unwrap().get(&id).cloned()
    }
}

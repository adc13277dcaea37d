//! Study lifecycle, at-most-once experiment dispatch and result ingestion.
//!
//! [`Orchestrator`] serialises every operation behind one lock. A mutating
//! operation builds an [`Event`] holding all of its non-deterministic inputs,
//! applies it to the in-memory state and appends it to the event store
//! before returning; restarting replays the store.

mod error;
mod event;
mod policy;
mod provisioner;
mod state;
mod store;
mod types;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use chrono::{DateTime, Utc};

pub use error::{OrchestratorError, Result};
pub use event::{Event, LogEntry, MetricEntry};
pub use policy::{Clock, ManualClock, RetryPolicy, SystemClock};
pub use provisioner::{NoopProvisioner, ProvisionError, Provisioner};
pub use store::{EventStore, FileStore, MemoryStore, SCHEMA_VERSION};
pub use types::*;

use crate::analysis::{self, CubeQuery, GroupSummary, ParetoPoint, ParetoQuery, StudyData, RESERVED_COLUMNS};
use crate::expand::{instance_count, normalize_bindings, validate_template, ValidationError, ValidationErrors};
use crate::model::{
    is_identifier, ExperimentId, ExperimentInstance, ExperimentStatus, ParamValue, ParameterDefinition,
    MetricDeclaration, ProvenanceInfo, Study, StudyId, StudyStatus, StudyTemplate, TemplateId, WorkerId,
};
use state::{Applied, State};

/// Upper bound on the experiments one study may expand to.
pub const MAX_STUDY_INSTANCES: u64 = 1_000_000;

/// Template fields supplied by a client; the server assigns id and time.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NewTemplate {
    pub name: String,
    pub script: String,
    #[serde(default)]
    pub parameters: Vec<ParameterDefinition>,
    #[serde(default)]
    pub declared_metrics: Vec<MetricDeclaration>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NewStudy {
    pub template_id: TemplateId,
    /// Parameters left out are bound to all of their template values.
    #[serde(default)]
    pub bound_values: BTreeMap<String, Vec<ParamValue>>,
    #[serde(default = "one")]
    pub repetitions: u32,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub provenance: ProvenanceInfo,
}

fn one() -> u32 {
    1
}

struct Inner {
    state: State,
    store: Box<dyn EventStore>,
    poisoned: bool,
}

pub struct Orchestrator {
    inner: Mutex<Inner>,
    policy: RetryPolicy,
    clock: Arc<dyn Clock>,
}

impl Orchestrator {
    /// Opens the persistent store under `data_dir`, replaying its log.
    pub fn open(data_dir: &Path, policy: RetryPolicy, clock: Arc<dyn Clock>) -> Result<Self> {
        let (store, events) = FileStore::open(data_dir)?;
        Self::from_parts(Box::new(store), events, policy, clock)
    }

    pub fn in_memory(policy: RetryPolicy, clock: Arc<dyn Clock>) -> Self {
        Self::from_parts(Box::new(MemoryStore::new()), Vec::new(), policy, clock)
            .expect("empty replay cannot fail")
    }

    /// Builds an orchestrator from `history` and continues appending to
    /// `store`.
    pub fn from_parts(
        store: Box<dyn EventStore>,
        history: Vec<Event>,
        policy: RetryPolicy,
        clock: Arc<dyn Clock>,
    ) -> Result<Self> {
        policy.validate().map_err(OrchestratorError::InvalidArgument)?;
        let mut state = State::default();
        for (i, event) in history.iter().enumerate() {
            state
                .apply(event, &policy)
                .map_err(|e| OrchestratorError::CorruptLog {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
        }
        Ok(Self {
            inner: Mutex::new(Inner {
                state,
                store,
                poisoned: false,
            }),
            policy,
            clock,
        })
    }

    pub fn policy(&self) -> &RetryPolicy {
        &self.policy
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    fn lock(&self) -> Result<MutexGuard<'_, Inner>> {
        let inner = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        if inner.poisoned {
            return Err(OrchestratorError::Poisoned);
        }
        Ok(inner)
    }

    fn commit(&self, inner: &mut Inner, event: Event) -> Result<Applied> {
        let applied = inner.state.apply(&event, &self.policy)?;
        if let Err(e) = inner.store.append(&event) {
            // Memory is now ahead of the log; refuse further work.
            inner.poisoned = true;
            tracing::error!(error = %e, "event log append failed");
            return Err(e.into());
        }
        Ok(applied)
    }

    pub fn create_template(&self, new: NewTemplate) -> Result<StudyTemplate> {
        let template = StudyTemplate {
            id: TemplateId::random(),
            name: new.name,
            script: new.script,
            parameters: new.parameters,
            declared_metrics: new.declared_metrics,
            created_at: self.now(),
        };
        let mut errors = validate_template(&template);
        errors.extend(column_collisions(&template));
        if !errors.is_empty() {
            return Err(ValidationErrors(errors).into());
        }
        let mut inner = self.lock()?;
        self.commit(&mut inner, Event::TemplateCreated {
            template: template.clone(),
        })?;
        Ok(template)
    }

    pub fn template(&self, id: &TemplateId) -> Result<StudyTemplate> {
        Ok(self.lock()?.state.template(id)?.clone())
    }

    pub fn templates(&self) -> Result<Vec<StudyTemplate>> {
        Ok(self.lock()?.state.templates.values().cloned().collect())
    }

    pub fn create_study(&self, new: NewStudy) -> Result<Study> {
        let mut inner = self.lock()?;
        let template = inner.state.template(&new.template_id)?;
        let mut bound_values = new.bound_values;
        for p in &template.parameters {
            bound_values
                .entry(p.name.clone())
                .or_insert_with(|| p.values.clone());
        }
        normalize_bindings(template, &mut bound_values);
        let study = Study {
            id: StudyId::random(),
            template_id: new.template_id,
            bound_values,
            repetitions: new.repetitions,
            base_seed: new.base_seed,
            provenance: new.provenance,
            status: StudyStatus::Draft,
            created_at: self.now(),
        };
        let errors = crate::expand::validate_study(template, &study);
        if !errors.is_empty() {
            return Err(ValidationErrors(errors).into());
        }
        match instance_count(template, &study) {
            Some(n) if n <= MAX_STUDY_INSTANCES => {}
            _ => {
                return Err(ValidationErrors(vec![ValidationError::new(
                    "bound_values",
                    format!("study expands to more than {MAX_STUDY_INSTANCES} experiments"),
                )])
                .into())
            }
        }
        self.commit(&mut inner, Event::StudyCreated {
            study: study.clone(),
        })?;
        Ok(study)
    }

    pub fn study(&self, id: &StudyId) -> Result<Study> {
        Ok(self.lock()?.state.study(id)?.study.clone())
    }

    pub fn studies(&self) -> Result<Vec<Study>> {
        Ok(self.lock()?.state.studies.values().map(|e| e.study.clone()).collect())
    }

    pub fn start_study(&self, id: &StudyId) -> Result<StudyProgress> {
        let mut inner = self.lock()?;
        let at = self.now();
        self.commit(&mut inner, Event::StudyStarted {
            study_id: id.clone(),
            at,
        })?;
        self.progress_locked(&inner.state, id, at)
    }

    pub fn cancel_study(&self, id: &StudyId) -> Result<StudyProgress> {
        let mut inner = self.lock()?;
        let at = self.now();
        self.commit(&mut inner, Event::StudyCanceled {
            study_id: id.clone(),
            at,
        })?;
        self.progress_locked(&inner.state, id, at)
    }

    pub fn progress(&self, id: &StudyId) -> Result<StudyProgress> {
        let inner = self.lock()?;
        self.progress_locked(&inner.state, id, self.now())
    }

    fn progress_locked(&self, state: &State, id: &StudyId, now: DateTime<Utc>) -> Result<StudyProgress> {
        let entry = state.study(id)?;
        let counts = entry.counts;
        let total = entry.experiments.len() as u64;
        let throughput_per_min = match entry.started_at {
            Some(start) if now > start => {
                let minutes = (now - start).num_milliseconds() as f64 / 60_000.0;
                counts.finished as f64 / minutes
            }
            _ => 0.0,
        };
        let durations: Vec<f64> = entry
            .experiments
            .iter()
            .filter_map(|e| state.experiments[e].duration_ms)
            .map(|ms| ms as f64 / 1000.0)
            .collect();
        let active_workers = state
            .workers
            .values()
            .filter(|w| w.state != WorkerState::Offline && now - w.last_heartbeat <= self.policy.offline_threshold())
            .count();
        let eta_s = if durations.is_empty() || active_workers == 0 {
            None
        } else {
            let mean = durations.iter().sum::<f64>() / durations.len() as f64;
            let remaining = (total - counts.terminal()) as f64;
            Some(remaining * mean / active_workers as f64)
        };
        Ok(StudyProgress {
            study_id: id.clone(),
            status: entry.study.status,
            total,
            counts,
            throughput_per_min,
            eta_s,
        })
    }

    pub fn experiments(&self, study: &StudyId) -> Result<Vec<ExperimentInstance>> {
        let inner = self.lock()?;
        let entry = inner.state.study(study)?;
        Ok(entry
            .experiments
            .iter()
            .map(|id| inner.state.experiments[id].instance.clone())
            .collect())
    }

    pub fn register_worker(&self, labels: BTreeSet<String>) -> Result<WorkerInfo> {
        let mut inner = self.lock()?;
        let worker = WorkerInfo {
            id: WorkerId::random(),
            labels,
            last_heartbeat: self.now(),
            state: WorkerState::Idle,
            current_experiment: None,
        };
        self.commit(&mut inner, Event::WorkerRegistered {
            worker: worker.clone(),
        })?;
        Ok(worker)
    }

    pub fn heartbeat(&self, id: &WorkerId) -> Result<WorkerInfo> {
        let mut inner = self.lock()?;
        let at = self.now();
        self.commit(&mut inner, Event::Heartbeat {
            worker_id: id.clone(),
            at,
        })?;
        Ok(inner.state.worker(id)?.clone())
    }

    /// Workers with `state` reflecting missed heartbeats as of now, even
    /// before the next reap pass records it.
    pub fn workers(&self) -> Result<Vec<WorkerInfo>> {
        let inner = self.lock()?;
        let now = self.now();
        Ok(inner
            .state
            .workers
            .values()
            .map(|w| {
                let mut w = w.clone();
                if now - w.last_heartbeat > self.policy.offline_threshold() {
                    w.state = WorkerState::Offline;
                }
                w
            })
            .collect())
    }

    /// Leases the oldest pending experiment to `worker`, if there is one.
    pub fn acquire_next(&self, worker: &WorkerId) -> Result<Option<Assignment>> {
        let mut inner = self.lock()?;
        let info = inner.state.worker(worker)?;
        if inner.state.worker_leases.contains_key(worker) {
            return Err(OrchestratorError::WorkerBusy(worker.clone()));
        }
        if info.state == WorkerState::Offline {
            return Err(OrchestratorError::WorkerOffline(worker.clone()));
        }
        let Some(next) = inner.state.next_pending().cloned() else {
            return Ok(None);
        };
        let now = self.now();
        let attempt = inner.state.experiments[&next].instance.attempt + 1;
        let lease = Lease {
            experiment_id: next.clone(),
            worker_id: worker.clone(),
            granted_at: now,
            expires_at: now + self.policy.lease_duration(),
            attempt,
        };
        self.commit(&mut inner, Event::LeaseGranted { lease: lease.clone() })?;
        let state = &inner.state;
        let instance = state.experiments[&next].instance.clone();
        let study = &state.studies[&instance.study_id].study;
        let script = state.templates[&study.template_id].script.clone();
        Ok(Some(Assignment {
            parameters: instance.parameter_document(),
            instance,
            script,
            lease,
        }))
    }

    pub fn report_started(&self, experiment: &ExperimentId, worker: &WorkerId) -> Result<()> {
        let mut inner = self.lock()?;
        let at = self.now();
        self.commit(&mut inner, Event::ExperimentStarted {
            experiment_id: experiment.clone(),
            worker_id: worker.clone(),
            at,
        })?;
        Ok(())
    }

    /// Records the outcome of the current attempt and returns the
    /// experiment's new status. A result for an expired lease is discarded.
    pub fn report_result(
        &self,
        experiment: &ExperimentId,
        worker: &WorkerId,
        outcome: Outcome,
    ) -> Result<ExperimentStatus> {
        let mut inner = self.lock()?;
        let at = self.now();
        let event = Event::ResultReported {
            experiment_id: experiment.clone(),
            worker_id: worker.clone(),
            outcome,
            at,
        };
        match self.commit(&mut inner, event) {
            Ok(Applied::Result(status)) => Ok(status),
            Ok(other) => unreachable!("result event applied as {other:?}"),
            Err(e @ OrchestratorError::LeaseExpired(_)) => {
                tracing::warn!(%experiment, %worker, "discarding result for expired lease");
                Err(e)
            }
            Err(e) => Err(e),
        }
    }

    fn offset_for(&self, state: &State, experiment: &ExperimentId, now: DateTime<Utc>) -> Result<u64> {
        let e = state.experiment(experiment)?;
        let start = e.attempts.last().and_then(|a| a.started_at.or(Some(a.granted_at)));
        Ok(start.map_or(0, |s| (now - s).num_milliseconds().max(0) as u64))
    }

    /// Appends metric records; returns the stored records with their
    /// server-assigned sequence numbers.
    pub fn ingest_metrics(&self, experiment: &ExperimentId, records: Vec<MetricInput>) -> Result<Vec<crate::model::MetricRecord>> {
        let mut inner = self.lock()?;
        let state = &inner.state;
        let e = state.experiment(experiment)?;
        let study = &state.studies[&e.instance.study_id].study;
        let template = &state.templates[&study.template_id];
        let mut errors = Vec::new();
        for (i, r) in records.iter().enumerate() {
            if !is_identifier(&r.metric) {
                errors.push(ValidationError::new(format!("records[{i}].metric"), format!("{:?} is not a valid identifier", r.metric)));
            } else if template.parameter(&r.metric).is_some() || RESERVED_COLUMNS.contains(&r.metric.as_str()) {
                errors.push(ValidationError::new(format!("records[{i}].metric"), format!("{:?} collides with a frame column", r.metric)));
            }
            if !r.value.is_finite() {
                errors.push(ValidationError::new(format!("records[{i}].value"), "must be finite"));
            }
        }
        if !errors.is_empty() {
            return Err(ValidationErrors(errors).into());
        }
        let now = self.now();
        let default_offset = self.offset_for(state, experiment, now)?;
        let before = e.metrics.len();
        let entries = records
            .into_iter()
            .map(|r| MetricEntry {
                metric: r.metric,
                value: r.value,
                wall_offset_ms: r.wall_offset_ms.unwrap_or(default_offset),
            })
            .collect();
        self.commit(&mut inner, Event::MetricsIngested {
            experiment_id: experiment.clone(),
            records: entries,
        })?;
        Ok(inner.state.experiments[experiment].metrics[before..].to_vec())
    }

    pub fn ingest_logs(&self, experiment: &ExperimentId, records: Vec<LogInput>) -> Result<usize> {
        let mut inner = self.lock()?;
        let now = self.now();
        let default_offset = self.offset_for(&inner.state, experiment, now)?;
        let entries: Vec<LogEntry> = records
            .into_iter()
            .map(|r| LogEntry {
                level: r.level,
                message: r.message,
                wall_offset_ms: r.wall_offset_ms.unwrap_or(default_offset),
            })
            .collect();
        let n = entries.len();
        self.commit(&mut inner, Event::LogsIngested {
            experiment_id: experiment.clone(),
            records: entries,
        })?;
        Ok(n)
    }

    /// Expires overdue leases and marks silent workers offline as of `now`.
    pub fn reap(&self, now: DateTime<Utc>) -> Result<Vec<ReapAction>> {
        let mut inner = self.lock()?;
        // Only passes that will act are logged.
        let policy = &self.policy;
        let due = inner.state.leases.values().any(|l| now > l.expires_at)
            || inner.state.workers.values().any(|w| {
                w.state != WorkerState::Offline && now - w.last_heartbeat > policy.offline_threshold()
            });
        if !due {
            return Ok(Vec::new());
        }
        match self.commit(&mut inner, Event::Reaped { at: now })? {
            Applied::Reaped(actions) => Ok(actions),
            other => unreachable!("reap applied as {other:?}"),
        }
    }

    pub fn drill_down(&self, experiment: &ExperimentId) -> Result<ExperimentBundle> {
        self.lock()?.state.bundle(experiment)
    }

    /// Consistent copy of one study for the analysis engine.
    pub fn study_data(&self, id: &StudyId) -> Result<StudyData> {
        self.lock()?.state.study_data(id)
    }

    pub fn cube(&self, query: &CubeQuery) -> Result<Vec<GroupSummary>> {
        let data = self.study_data(&query.study_id)?;
        Ok(analysis::run_cube(&data, query)?)
    }

    pub fn pareto(&self, query: &ParetoQuery) -> Result<Vec<ParetoPoint>> {
        let data = self.study_data(&query.study_id)?;
        Ok(analysis::run_pareto(&data, query)?)
    }

    /// Recounts statuses from the instances themselves rather than the
    /// maintained counters.
    pub fn status_counts(&self, study: &StudyId) -> Result<StatusCounts> {
        let inner = self.lock()?;
        let entry = inner.state.study(study)?;
        let mut counts = StatusCounts::default();
        for id in &entry.experiments {
            counts.add(inner.state.experiments[id].instance.status, 1);
        }
        Ok(counts)
    }

    pub fn live_leases(&self) -> Result<Vec<Lease>> {
        Ok(self.lock()?.state.leases.values().cloned().collect())
    }
}

/// Parameter and metric names share one namespace with the fixed frame
/// columns in exports.
fn column_collisions(template: &StudyTemplate) -> Vec<ValidationError> {
    let mut errors = Vec::new();
    for p in &template.parameters {
        if RESERVED_COLUMNS.contains(&p.name.as_str()) {
            errors.push(ValidationError::new(format!("parameters.{}", p.name), "name is reserved for a frame column"));
        }
    }
    for m in &template.declared_metrics {
        if RESERVED_COLUMNS.contains(&m.name.as_str()) {
            errors.push(ValidationError::new(format!("declared_metrics.{}", m.name), "name is reserved for a frame column"));
        } else if template.parameter(&m.name).is_some() {
            errors.push(ValidationError::new(format!("declared_metrics.{}", m.name), "name collides with a parameter"));
        }
    }
    errors
}

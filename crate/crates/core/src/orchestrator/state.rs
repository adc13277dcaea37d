//! In-memory orchestration state and the event-application function.
//!
//! [`State::apply`] is the only mutator. It checks every precondition before
//! touching anything, so an `Err` leaves the state unchanged; this is what
//! lets the orchestrator apply an event first and log it second.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use chrono::{DateTime, Utc};
use indexmap::IndexMap;

use super::error::{OrchestratorError, Result};
use super::event::{Event, LogEntry, MetricEntry};
use super::policy::RetryPolicy;
use super::types::*;
use crate::analysis::{ExperimentData, StudyData};
use crate::expand::{expand_study, validate_study, ValidationErrors};
use crate::model::{
    ExperimentId, ExperimentInstance, ExperimentStatus, LogRecord, MetricRecord, Study, StudyId,
    StudyStatus, StudyTemplate, TemplateId, WorkerId,
};

/// FIFO order across studies: study creation time, then creation sequence,
/// then position in the expansion.
type QueueKey = (DateTime<Utc>, u64, u64, u32, ExperimentId);

#[derive(Debug)]
pub(crate) struct StudyEntry {
    pub study: Study,
    seq: u64,
    pub started_at: Option<DateTime<Utc>>,
    pub experiments: Vec<ExperimentId>,
    pub counts: StatusCounts,
}

#[derive(Debug)]
pub(crate) struct ExperimentEntry {
    pub instance: ExperimentInstance,
    pub metrics: Vec<MetricRecord>,
    next_seq: HashMap<String, u64>,
    pub logs: Vec<LogRecord>,
    pub attempts: Vec<AttemptRecord>,
    /// Wall time of the successful attempt, for ETA estimates.
    pub duration_ms: Option<i64>,
}

/// What an applied event produced.
#[derive(Debug)]
pub(crate) enum Applied {
    Done,
    Result(ExperimentStatus),
    Reaped(Vec<ReapAction>),
}

#[derive(Debug, Default)]
pub(crate) struct State {
    pub templates: IndexMap<TemplateId, StudyTemplate>,
    pub studies: IndexMap<StudyId, StudyEntry>,
    pub experiments: HashMap<ExperimentId, ExperimentEntry>,
    pub workers: IndexMap<WorkerId, WorkerInfo>,
    pub leases: BTreeMap<ExperimentId, Lease>,
    pub worker_leases: HashMap<WorkerId, ExperimentId>,
    queue: BTreeSet<QueueKey>,
    study_seq: u64,
}

impl State {
    pub fn template(&self, id: &TemplateId) -> Result<&StudyTemplate> {
        self.templates
            .get(id)
            .ok_or_else(|| OrchestratorError::UnknownTemplate(id.clone()))
    }

    pub fn study(&self, id: &StudyId) -> Result<&StudyEntry> {
        self.studies
            .get(id)
            .ok_or_else(|| OrchestratorError::UnknownStudy(id.clone()))
    }

    pub fn experiment(&self, id: &ExperimentId) -> Result<&ExperimentEntry> {
        self.experiments
            .get(id)
            .ok_or_else(|| OrchestratorError::UnknownExperiment(id.clone()))
    }

    pub fn worker(&self, id: &WorkerId) -> Result<&WorkerInfo> {
        self.workers
            .get(id)
            .ok_or_else(|| OrchestratorError::UnknownWorker(id.clone()))
    }

    /// Oldest pending experiment across running studies.
    pub fn next_pending(&self) -> Option<&ExperimentId> {
        self.queue.first().map(|k| &k.4)
    }

    fn queue_key(&self, instance: &ExperimentInstance) -> QueueKey {
        let entry = &self.studies[&instance.study_id];
        (
            entry.study.created_at,
            entry.seq,
            instance.combo_index,
            instance.repetition_index,
            instance.id.clone(),
        )
    }

    pub fn study_data(&self, id: &StudyId) -> Result<StudyData> {
        let entry = self.study(id)?;
        let template = self.template(&entry.study.template_id)?.clone();
        let experiments = entry
            .experiments
            .iter()
            .map(|eid| {
                let e = &self.experiments[eid];
                ExperimentData {
                    instance: e.instance.clone(),
                    metrics: e.metrics.clone(),
                }
            })
            .collect();
        Ok(StudyData {
            template,
            study: entry.study.clone(),
            experiments,
        })
    }

    pub fn bundle(&self, id: &ExperimentId) -> Result<ExperimentBundle> {
        let e = self.experiment(id)?;
        let study = &self.study(&e.instance.study_id)?.study;
        Ok(ExperimentBundle {
            instance: e.instance.clone(),
            template_id: study.template_id.clone(),
            attempts: e.attempts.clone(),
            metrics: e.metrics.clone(),
            logs: e.logs.clone(),
            provenance: study.provenance.clone(),
        })
    }

    pub fn apply(&mut self, event: &Event, policy: &RetryPolicy) -> Result<Applied> {
        match event {
            Event::TemplateCreated { template } => {
                if self.templates.contains_key(&template.id) {
                    return Err(OrchestratorError::WrongState(format!(
                        "template {} already exists",
                        template.id
                    )));
                }
                self.templates.insert(template.id.clone(), template.clone());
                Ok(Applied::Done)
            }
            Event::StudyCreated { study } => {
                let template = self.template(&study.template_id)?;
                let errors = validate_study(template, study);
                if !errors.is_empty() {
                    return Err(ValidationErrors(errors).into());
                }
                if self.studies.contains_key(&study.id) {
                    return Err(OrchestratorError::WrongState(format!(
                        "study {} already exists",
                        study.id
                    )));
                }
                self.study_seq += 1;
                self.studies.insert(
                    study.id.clone(),
                    StudyEntry {
                        study: study.clone(),
                        seq: self.study_seq,
                        started_at: None,
                        experiments: Vec::new(),
                        counts: StatusCounts::default(),
                    },
                );
                Ok(Applied::Done)
            }
            Event::StudyStarted { study_id, at } => self.start_study(study_id, *at),
            Event::StudyCanceled { study_id, at } => self.cancel_study(study_id, *at),
            Event::WorkerRegistered { worker } => {
                if self.workers.contains_key(&worker.id) {
                    return Err(OrchestratorError::WrongState(format!(
                        "worker {} already registered",
                        worker.id
                    )));
                }
                self.workers.insert(worker.id.clone(), worker.clone());
                Ok(Applied::Done)
            }
            Event::Heartbeat { worker_id, at } => {
                self.worker(worker_id)?;
                let holds_lease = self.worker_leases.contains_key(worker_id);
                let worker = &mut self.workers[worker_id];
                worker.last_heartbeat = worker.last_heartbeat.max(*at);
                if worker.state == WorkerState::Offline && !holds_lease {
                    worker.state = WorkerState::Idle;
                }
                Ok(Applied::Done)
            }
            Event::LeaseGranted { lease } => self.grant_lease(lease),
            Event::ExperimentStarted {
                experiment_id,
                worker_id,
                at,
            } => {
                let status = self.check_lease(experiment_id, worker_id, *at)?;
                if status == ExperimentStatus::Leased {
                    self.mark_running(experiment_id, *at);
                }
                Ok(Applied::Done)
            }
            Event::ResultReported {
                experiment_id,
                worker_id,
                outcome,
                at,
            } => {
                let status = self.check_lease(experiment_id, worker_id, *at)?;
                if status == ExperimentStatus::Leased {
                    self.mark_running(experiment_id, *at);
                }
                let new_status = self.finish_attempt(experiment_id, outcome, *at, policy);
                Ok(Applied::Result(new_status))
            }
            Event::MetricsIngested {
                experiment_id,
                records,
            } => {
                self.check_ingest(experiment_id)?;
                self.push_metrics(experiment_id, records);
                Ok(Applied::Done)
            }
            Event::LogsIngested {
                experiment_id,
                records,
            } => {
                self.check_ingest(experiment_id)?;
                let e = self.experiments.get_mut(experiment_id).expect("checked");
                e.logs.extend(records.iter().map(|r: &LogEntry| LogRecord {
                    experiment_id: experiment_id.clone(),
                    level: r.level,
                    message: r.message.clone(),
                    wall_offset_ms: r.wall_offset_ms,
                }));
                Ok(Applied::Done)
            }
            Event::Reaped { at } => Ok(Applied::Reaped(self.reap(*at, policy))),
        }
    }

    fn set_status(&mut self, id: &ExperimentId, to: ExperimentStatus) {
        let e = self.experiments.get_mut(id).expect("known experiment");
        let from = e.instance.status;
        assert!(from.can_transition(to), "illegal transition {from} -> {to} for {id}");
        e.instance.status = to;
        let counts = &mut self.studies[&e.instance.study_id].counts;
        counts.add(from, -1);
        counts.add(to, 1);
    }

    fn start_study(&mut self, study_id: &StudyId, at: DateTime<Utc>) -> Result<Applied> {
        let entry = self.study(study_id)?;
        if entry.study.status != StudyStatus::Draft {
            return Err(OrchestratorError::WrongState(format!(
                "study {study_id} is {:?}, not draft",
                entry.study.status
            )));
        }
        let template = self.template(&entry.study.template_id)?;
        let instances = expand_study(template, &entry.study)?;

        let entry = &mut self.studies[study_id];
        entry.study.status = StudyStatus::Running;
        entry.started_at = Some(at);
        entry.counts.pending = instances.len() as u64;
        entry.experiments = instances.iter().map(|i| i.id.clone()).collect();
        for instance in instances {
            let key = self.queue_key(&instance);
            self.queue.insert(key);
            self.experiments.insert(
                instance.id.clone(),
                ExperimentEntry {
                    instance,
                    metrics: Vec::new(),
                    next_seq: HashMap::new(),
                    logs: Vec::new(),
                    attempts: Vec::new(),
                    duration_ms: None,
                },
            );
        }
        Ok(Applied::Done)
    }

    fn cancel_study(&mut self, study_id: &StudyId, at: DateTime<Utc>) -> Result<Applied> {
        let entry = self.study(study_id)?;
        if entry.study.status != StudyStatus::Running {
            return Err(OrchestratorError::WrongState(format!(
                "study {study_id} is {:?}, not running",
                entry.study.status
            )));
        }
        let ids = entry.experiments.clone();
        for id in &ids {
            let status = self.experiments[id].instance.status;
            if status.is_terminal() {
                continue;
            }
            match status {
                ExperimentStatus::Pending => {
                    let key = self.queue_key(&self.experiments[id].instance);
                    self.queue.remove(&key);
                }
                _ => self.release_lease(id, at, AttemptEnd::Canceled),
            }
            self.set_status(id, ExperimentStatus::Canceled);
        }
        self.studies[study_id].study.status = StudyStatus::Canceled;
        Ok(Applied::Done)
    }

    fn grant_lease(&mut self, lease: &Lease) -> Result<Applied> {
        let worker = self.worker(&lease.worker_id)?;
        if worker.state == WorkerState::Offline {
            return Err(OrchestratorError::WorkerOffline(lease.worker_id.clone()));
        }
        if self.worker_leases.contains_key(&lease.worker_id) {
            return Err(OrchestratorError::WorkerBusy(lease.worker_id.clone()));
        }
        let e = self.experiment(&lease.experiment_id)?;
        if e.instance.status != ExperimentStatus::Pending || self.leases.contains_key(&lease.experiment_id) {
            return Err(OrchestratorError::WrongState(format!(
                "experiment {} is {}, not pending",
                lease.experiment_id, e.instance.status
            )));
        }
        if lease.attempt != e.instance.attempt + 1 || lease.expires_at <= lease.granted_at {
            return Err(OrchestratorError::InvalidArgument(format!(
                "malformed lease for {}",
                lease.experiment_id
            )));
        }
        let key = self.queue_key(&e.instance);
        self.queue.remove(&key);
        self.set_status(&lease.experiment_id, ExperimentStatus::Leased);
        let e = self.experiments.get_mut(&lease.experiment_id).expect("checked");
        e.instance.attempt = lease.attempt;
        e.attempts.push(AttemptRecord {
            attempt: lease.attempt,
            worker_id: lease.worker_id.clone(),
            granted_at: lease.granted_at,
            started_at: None,
            ended_at: None,
            end: None,
        });
        let worker = &mut self.workers[&lease.worker_id];
        worker.state = WorkerState::Busy;
        worker.current_experiment = Some(lease.experiment_id.clone());
        self.worker_leases
            .insert(lease.worker_id.clone(), lease.experiment_id.clone());
        self.leases.insert(lease.experiment_id.clone(), lease.clone());
        Ok(Applied::Done)
    }

    /// Verifies that `worker` holds a live lease on `experiment` at `at` and
    /// returns the experiment's status.
    fn check_lease(
        &self,
        experiment: &ExperimentId,
        worker: &WorkerId,
        at: DateTime<Utc>,
    ) -> Result<ExperimentStatus> {
        let e = self.experiment(experiment)?;
        self.worker(worker)?;
        if e.instance.status.is_terminal() {
            return Err(OrchestratorError::AlreadyTerminal(experiment.clone()));
        }
        match self.leases.get(experiment) {
            Some(lease) if &lease.worker_id == worker => {
                if at > lease.expires_at {
                    Err(OrchestratorError::LeaseExpired(experiment.clone()))
                } else {
                    Ok(e.instance.status)
                }
            }
            _ => {
                let expired = e.attempts.iter().rev().any(|a| {
                    &a.worker_id == worker
                        && matches!(a.end, Some(AttemptEnd::LeaseExpired | AttemptEnd::WorkerOffline))
                });
                if expired {
                    Err(OrchestratorError::LeaseExpired(experiment.clone()))
                } else {
                    Err(OrchestratorError::LeaseMismatch {
                        experiment: experiment.clone(),
                        worker: worker.clone(),
                    })
                }
            }
        }
    }

    fn mark_running(&mut self, id: &ExperimentId, at: DateTime<Utc>) {
        self.set_status(id, ExperimentStatus::Running);
        let e = self.experiments.get_mut(id).expect("known experiment");
        if let Some(a) = e.attempts.last_mut() {
            a.started_at = Some(at);
        }
    }

    fn finish_attempt(
        &mut self,
        id: &ExperimentId,
        outcome: &Outcome,
        at: DateTime<Utc>,
        policy: &RetryPolicy,
    ) -> ExperimentStatus {
        let (end, detail) = match outcome {
            Outcome::Success => (AttemptEnd::Succeeded, None),
            Outcome::Failure { detail } => (
                AttemptEnd::Failed {
                    detail: detail.clone(),
                },
                Some(detail.clone()),
            ),
        };
        let started = self.experiments[id]
            .attempts
            .last()
            .and_then(|a| a.started_at.or(Some(a.granted_at)));
        self.release_lease(id, at, end);
        let attempt = self.experiments[id].instance.attempt;
        let new_status = match outcome {
            Outcome::Success => ExperimentStatus::Finished,
            Outcome::Failure { .. } if attempt >= policy.max_attempts => ExperimentStatus::Failed,
            Outcome::Failure { .. } => ExperimentStatus::Pending,
        };
        self.set_status(id, new_status);
        let e = self.experiments.get_mut(id).expect("known experiment");
        e.instance.exit_detail = detail;
        if new_status == ExperimentStatus::Finished {
            e.duration_ms = started.map(|s| (at - s).num_milliseconds().max(0));
        }
        if new_status == ExperimentStatus::Pending {
            let key = self.queue_key(&self.experiments[id].instance);
            self.queue.insert(key);
        }
        self.maybe_finish_study(&self.experiments[id].instance.study_id.clone());
        new_status
    }

    /// Drops the live lease on `id`, closes its attempt record and frees
    /// the worker. Does not touch the experiment status.
    fn release_lease(&mut self, id: &ExperimentId, at: DateTime<Utc>, end: AttemptEnd) {
        let Some(lease) = self.leases.remove(id) else {
            return;
        };
        self.worker_leases.remove(&lease.worker_id);
        if let Some(worker) = self.workers.get_mut(&lease.worker_id) {
            worker.current_experiment = None;
            if worker.state == WorkerState::Busy {
                worker.state = WorkerState::Idle;
            }
        }
        if let Some(a) = self
            .experiments
            .get_mut(id)
            .and_then(|e| e.attempts.last_mut())
        {
            a.ended_at = Some(at);
            a.end = Some(end);
        }
    }

    fn maybe_finish_study(&mut self, study_id: &StudyId) {
        let entry = &mut self.studies[study_id];
        if entry.study.status == StudyStatus::Running
            && entry.counts.terminal() == entry.experiments.len() as u64
        {
            entry.study.status = StudyStatus::Finished;
        }
    }

    fn check_ingest(&self, id: &ExperimentId) -> Result<()> {
        let e = self.experiment(id)?;
        match e.instance.status {
            ExperimentStatus::Leased | ExperimentStatus::Running => Ok(()),
            s if s.is_terminal() => Err(OrchestratorError::TerminalState(id.clone())),
            s => Err(OrchestratorError::WrongState(format!(
                "experiment {id} is {s}; records are accepted only while it runs"
            ))),
        }
    }

    fn push_metrics(&mut self, id: &ExperimentId, records: &[MetricEntry]) {
        let e = self.experiments.get_mut(id).expect("checked");
        for r in records {
            let seq = e.next_seq.entry(r.metric.clone()).or_insert(0);
            e.metrics.push(MetricRecord {
                experiment_id: id.clone(),
                metric: r.metric.clone(),
                seq: *seq,
                value: r.value,
                wall_offset_ms: r.wall_offset_ms,
            });
            *seq += 1;
        }
    }

    /// Marks silent workers offline, then expires overdue leases.
    fn reap(&mut self, at: DateTime<Utc>, policy: &RetryPolicy) -> Vec<ReapAction> {
        let mut actions = Vec::new();
        let mut expire: Vec<(ExperimentId, AttemptEnd)> = Vec::new();

        let silent: Vec<WorkerId> = self
            .workers
            .values()
            .filter(|w| w.state != WorkerState::Offline && at - w.last_heartbeat > policy.offline_threshold())
            .map(|w| w.id.clone())
            .collect();
        for worker_id in silent {
            self.workers[&worker_id].state = WorkerState::Offline;
            actions.push(ReapAction::WorkerOffline {
                worker_id: worker_id.clone(),
            });
            if let Some(exp) = self.worker_leases.get(&worker_id) {
                expire.push((exp.clone(), AttemptEnd::WorkerOffline));
            }
        }
        for (exp, lease) in &self.leases {
            if at > lease.expires_at && !expire.iter().any(|(e, _)| e == exp) {
                expire.push((exp.clone(), AttemptEnd::LeaseExpired));
            }
        }

        for (exp, end) in expire {
            let lease = self.leases[&exp].clone();
            self.release_lease(&exp, at, end);
            let attempt = self.experiments[&exp].instance.attempt;
            let new_status = if attempt >= policy.max_attempts {
                ExperimentStatus::Failed
            } else {
                ExperimentStatus::Pending
            };
            self.set_status(&exp, new_status);
            let e = self.experiments.get_mut(&exp).expect("leased experiment");
            if new_status == ExperimentStatus::Failed {
                e.instance.exit_detail = Some(format!("lease expired on attempt {attempt}"));
            } else {
                let key = self.queue_key(&self.experiments[&exp].instance);
                self.queue.insert(key);
            }
            let study_id = self.experiments[&exp].instance.study_id.clone();
            self.maybe_finish_study(&study_id);
            actions.push(ReapAction::LeaseExpired {
                experiment_id: exp,
                worker_id: lease.worker_id,
                attempt,
                new_status,
            });
        }
        actions
    }
}

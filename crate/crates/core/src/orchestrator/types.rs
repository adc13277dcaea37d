use std::collections::BTreeSet;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::model::{
    ExperimentId, ExperimentInstance, ExperimentStatus, LogLevel, LogRecord, MetricRecord,
    ParameterDocument, ProvenanceInfo, StudyId, StudyStatus, TemplateId, WorkerId,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkerState {
    Idle,
    Busy,
    Offline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerInfo {
    pub id: WorkerId,
    pub labels: BTreeSet<String>,
    pub last_heartbeat: DateTime<Utc>,
    pub state: WorkerState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current_experiment: Option<ExperimentId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub experiment_id: ExperimentId,
    pub worker_id: WorkerId,
    pub granted_at: DateTime<Utc>,
    pub expires_at: DateTime<Utc>,
    pub attempt: u32,
}

/// Work handed to a worker by `acquire_next`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub instance: ExperimentInstance,
    pub script: String,
    pub parameters: ParameterDocument,
    pub lease: Lease,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure { detail: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusCounts {
    pub pending: u64,
    pub leased: u64,
    pub running: u64,
    pub finished: u64,
    pub failed: u64,
    pub canceled: u64,
}

impl StatusCounts {
    pub fn add(&mut self, status: ExperimentStatus, delta: i64) {
        let slot = match status {
            ExperimentStatus::Pending => &mut self.pending,
            ExperimentStatus::Leased => &mut self.leased,
            ExperimentStatus::Running => &mut self.running,
            ExperimentStatus::Finished => &mut self.finished,
            ExperimentStatus::Failed => &mut self.failed,
            ExperimentStatus::Canceled => &mut self.canceled,
        };
        *slot = slot.checked_add_signed(delta).expect("status count underflow");
    }

    pub fn total(&self) -> u64 {
        self.pending + self.leased + self.running + self.finished + self.failed + self.canceled
    }

    pub fn terminal(&self) -> u64 {
        self.finished + self.failed + self.canceled
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyProgress {
    pub study_id: StudyId,
    pub status: StudyStatus,
    pub total: u64,
    pub counts: StatusCounts,
    pub throughput_per_min: f64,
    /// Empty until at least one experiment has finished.
    pub eta_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "end", rename_all = "snake_case")]
pub enum AttemptEnd {
    Succeeded,
    Failed { detail: String },
    LeaseExpired,
    WorkerOffline,
    Canceled,
}

/// One lease of an experiment and how it ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt: u32,
    pub worker_id: WorkerId,
    pub granted_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ended_at: Option<DateTime<Utc>>,
    #[serde(default, flatten, skip_serializing_if = "Option::is_none")]
    pub end: Option<AttemptEnd>,
}

/// Everything recorded about one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentBundle {
    pub instance: ExperimentInstance,
    pub template_id: TemplateId,
    pub attempts: Vec<AttemptRecord>,
    pub metrics: Vec<MetricRecord>,
    pub logs: Vec<LogRecord>,
    pub provenance: ProvenanceInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ReapAction {
    WorkerOffline {
        worker_id: WorkerId,
    },
    LeaseExpired {
        experiment_id: ExperimentId,
        worker_id: WorkerId,
        attempt: u32,
        new_status: ExperimentStatus,
    },
}

/// A metric as submitted by a script, before the server assigns `seq`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricInput {
    pub metric: String,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_offset_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogInput {
    pub level: LogLevel,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_offset_ms: Option<u64>,
}

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::types::{Lease, Outcome, WorkerInfo};
use crate::model::{
    ExperimentId, LogLevel, Study, StudyId, StudyTemplate, WorkerId,
};

/// A metric with its offset resolved; `seq` is assigned on apply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub metric: String,
    pub value: f64,
    pub wall_offset_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub level: LogLevel,
    pub message: String,
    pub wall_offset_ms: u64,
}

/// One state transition, as written to the event log.
///
/// Events carry every non-deterministic input (ids, timestamps, selected
/// experiments) so that replaying the log rebuilds identical state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    TemplateCreated {
        template: StudyTemplate,
    },
    StudyCreated {
        study: Study,
    },
    StudyStarted {
        study_id: StudyId,
        at: DateTime<Utc>,
    },
    StudyCanceled {
        study_id: StudyId,
        at: DateTime<Utc>,
    },
    WorkerRegistered {
        worker: WorkerInfo,
    },
    Heartbeat {
        worker_id: WorkerId,
        at: DateTime<Utc>,
    },
    LeaseGranted {
        lease: Lease,
    },
    ExperimentStarted {
        experiment_id: ExperimentId,
        worker_id: WorkerId,
        at: DateTime<Utc>,
    },
    ResultReported {
        experiment_id: ExperimentId,
        worker_id: WorkerId,
        #[serde(flatten)]
        outcome: Outcome,
        at: DateTime<Utc>,
    },
    MetricsIngested {
        experiment_id: ExperimentId,
        records: Vec<MetricEntry>,
    },
    LogsIngested {
        experiment_id: ExperimentId,
        records: Vec<LogEntry>,
    },
    Reaped {
        at: DateTime<Utc>,
    },
}

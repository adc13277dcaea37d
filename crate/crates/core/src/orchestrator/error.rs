use crate::analysis::AnalysisError;
use crate::expand::ValidationErrors;
use crate::model::{ExperimentId, StudyId, TemplateId, WorkerId};

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("unknown template {0}")]
    UnknownTemplate(TemplateId),
    #[error("unknown study {0}")]
    UnknownStudy(StudyId),
    #[error("unknown worker {0}")]
    UnknownWorker(WorkerId),
    #[error("unknown experiment {0}")]
    UnknownExperiment(ExperimentId),
    #[error("validation failed: {0}")]
    Validation(#[from] ValidationErrors),
    #[error("{0}")]
    WrongState(String),
    #[error("worker {0} already holds a lease")]
    WorkerBusy(WorkerId),
    #[error("worker {0} is offline; send a heartbeat first")]
    WorkerOffline(WorkerId),
    #[error("experiment {experiment} is not leased to worker {worker}")]
    LeaseMismatch {
        experiment: ExperimentId,
        worker: WorkerId,
    },
    #[error("lease on experiment {0} has expired")]
    LeaseExpired(ExperimentId),
    #[error("experiment {0} already reached a terminal state")]
    AlreadyTerminal(ExperimentId),
    #[error("experiment {0} is terminal and accepts no more records")]
    TerminalState(ExperimentId),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("store schema version {found} does not match supported version {expected}")]
    SchemaMismatch { found: u32, expected: u32 },
    #[error("event log corrupt at line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
    #[error("storage failure: {0}")]
    Storage(#[from] std::io::Error),
    #[error("orchestrator is unusable after an earlier storage failure")]
    Poisoned,
}

impl OrchestratorError {
    /// Stable machine-readable code, used as the API error `code`.
    pub fn code(&self) -> &'static str {
        use OrchestratorError::*;
        match self {
            UnknownTemplate(_) => "unknown_template",
            UnknownStudy(_) => "unknown_study",
            UnknownWorker(_) => "unknown_worker",
            UnknownExperiment(_) => "unknown_experiment",
            Validation(_) => "validation",
            WrongState(_) => "wrong_state",
            WorkerBusy(_) => "worker_busy",
            WorkerOffline(_) => "worker_offline",
            LeaseMismatch { .. } => "lease_mismatch",
            LeaseExpired(_) => "lease_expired",
            AlreadyTerminal(_) => "already_terminal",
            TerminalState(_) => "terminal_state",
            InvalidArgument(_) => "invalid_argument",
            Analysis(AnalysisError::UnknownParameter(_)) => "unknown_parameter",
            Analysis(AnalysisError::UnknownMetric(_)) => "unknown_metric",
            Analysis(AnalysisError::NeutralDirection(_)) => "neutral_direction",
            Analysis(AnalysisError::InvalidQuery(_)) => "invalid_query",
            SchemaMismatch { .. } => "schema_mismatch",
            CorruptLog { .. } => "corrupt_log",
            Storage(_) => "storage",
            Poisoned => "poisoned",
        }
    }
}

pub type Result<T, E = OrchestratorError> = std::result::Result<T, E>;

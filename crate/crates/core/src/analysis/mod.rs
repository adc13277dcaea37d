//! OLAP-style analysis over completed experiments.
//!
//! A [`ResultFrame`] joins each experiment's parameter assignment with one
//! reduced value per metric. Cube queries filter, group and summarise a
//! metric as box statistics; Pareto queries mark the non-dominated points
//! of two metrics. All functions here are pure over a [`StudyData`]
//! snapshot.

mod cube;
mod export;
mod frame;
mod pareto;
pub mod stats;

pub use cube::{cube, CubeQuery, Filter, GroupSummary, Predicate};
pub use export::{ExportFormat, ExportRow};
pub use frame::{
    build_frame, ExperimentData, FrameRow, MetricColumn, ParameterColumn, Reducer, ReducerMap,
    ResultFrame, StudyData, RESERVED_COLUMNS,
};
pub use pareto::{frontier_flags, pareto, resolve_direction, ParetoPoint, ParetoQuery};
pub use stats::BoxStats;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AnalysisError {
    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
    #[error("metric {0:?} has no optimisation direction; pass one explicitly")]
    NeutralDirection(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
}

/// Runs a cube query against a study snapshot.
pub fn run_cube(data: &StudyData, query: &CubeQuery) -> Result<Vec<GroupSummary>, AnalysisError> {
    let reducers = ReducerMap::from([(query.metric.clone(), query.reducer)]);
    let frame = build_frame(data, &reducers, query.include_failed)?;
    cube(&frame, &query.metric, &query.filters, &query.group_by)
}

/// Runs a Pareto query against a study snapshot.
pub fn run_pareto(data: &StudyData, query: &ParetoQuery) -> Result<Vec<ParetoPoint>, AnalysisError> {
    let frame = build_frame(data, &query.reducers, query.include_failed)?;
    pareto(
        &frame,
        &query.metric_x,
        query.dir_x,
        &query.metric_y,
        query.dir_y,
        &query.group_by,
    )
}

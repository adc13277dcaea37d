use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::model::{
    Direction, ExperimentId, ExperimentInstance, ExperimentStatus, MetricRecord, ParamValue,
    ParameterKind, Study, StudyId, StudyTemplate,
};

/// Column names every frame carries besides parameters and metrics.
pub const RESERVED_COLUMNS: [&str; 2] = ["repetition_index", "status"];

/// How a metric's record sequence collapses to one value per experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reducer {
    #[default]
    Last,
    First,
    Mean,
    Max,
    Min,
    Sum,
}

impl Reducer {
    /// Applies the reducer to values in seq order; `None` for no values.
    pub fn apply(self, values: &[f64]) -> Option<f64> {
        let (&first, &last) = (values.first()?, values.last()?);
        Some(match self {
            Reducer::Last => last,
            Reducer::First => first,
            Reducer::Mean => values.iter().sum::<f64>() / values.len() as f64,
            Reducer::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Reducer::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
            Reducer::Sum => values.iter().sum(),
        })
    }
}

pub type ReducerMap = BTreeMap<String, Reducer>;

/// One experiment and the metric records it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentData {
    pub instance: ExperimentInstance,
    pub metrics: Vec<MetricRecord>,
}

/// Everything the analysis engine needs about one study, taken from a
/// single consistent snapshot of the store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyData {
    pub template: StudyTemplate,
    pub study: Study,
    pub experiments: Vec<ExperimentData>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterColumn {
    pub name: String,
    pub kind: ParameterKind,
    /// Template value order, used to order groups.
    pub values: Vec<ParamValue>,
}

impl ParameterColumn {
    pub fn rank(&self, value: &ParamValue) -> usize {
        self.values.iter().position(|v| v == value).unwrap_or(usize::MAX)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricColumn {
    pub name: String,
    pub reducer: Reducer,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRow {
    pub experiment_id: ExperimentId,
    pub combo_index: u64,
    pub repetition_index: u32,
    pub status: ExperimentStatus,
    /// Parallel to [`ResultFrame::parameters`].
    pub values: Vec<ParamValue>,
    /// Parallel to [`ResultFrame::metrics`]; `None` when the experiment
    /// never reported the metric.
    pub metrics: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultFrame {
    pub study_id: StudyId,
    pub parameters: Vec<ParameterColumn>,
    pub metrics: Vec<MetricColumn>,
    pub rows: Vec<FrameRow>,
}

impl ResultFrame {
    pub fn parameter_index(&self, name: &str) -> Option<usize> {
        self.parameters.iter().position(|p| p.name == name)
    }

    pub fn metric_index(&self, name: &str) -> Option<usize> {
        self.metrics.iter().position(|m| m.name == name)
    }

    /// Header shared by CSV and JSONL exports.
    pub fn column_names(&self) -> Vec<&str> {
        self.parameters
            .iter()
            .map(|p| p.name.as_str())
            .chain(RESERVED_COLUMNS)
            .chain(self.metrics.iter().map(|m| m.name.as_str()))
            .collect()
    }
}

/// Joins assignments with reduced metric values.
///
/// Rows appear in `(combo_index, repetition_index)` order. Only finished
/// experiments are included, plus failed ones when `include_failed` is set.
/// Metric columns are the declared metrics in declaration order followed by
/// any other observed metric names in lexical order.
pub fn build_frame(
    data: &StudyData,
    reducers: &ReducerMap,
    include_failed: bool,
) -> Result<ResultFrame, AnalysisError> {
    let template = &data.template;
    let parameters: Vec<ParameterColumn> = template
        .parameters
        .iter()
        .map(|p| ParameterColumn {
            name: p.name.clone(),
            kind: p.kind,
            values: p.values.clone(),
        })
        .collect();

    let observed: BTreeSet<&str> = data
        .experiments
        .iter()
        .flat_map(|e| e.metrics.iter().map(|r| r.metric.as_str()))
        .filter(|name| template.metric(name).is_none())
        .collect();
    let metrics: Vec<MetricColumn> = template
        .declared_metrics
        .iter()
        .map(|m| (m.name.as_str(), m.direction))
        .chain(observed.into_iter().map(|name| (name, Direction::Neutral)))
        .map(|(name, direction)| MetricColumn {
            name: name.to_string(),
            reducer: reducers.get(name).copied().unwrap_or_default(),
            direction,
        })
        .collect();
    if let Some(unknown) = reducers
        .keys()
        .find(|k| !metrics.iter().any(|m| &m.name == *k))
    {
        return Err(AnalysisError::UnknownMetric(unknown.clone()));
    }

    let mut included: Vec<&ExperimentData> = data
        .experiments
        .iter()
        .filter(|e| match e.instance.status {
            ExperimentStatus::Finished => true,
            ExperimentStatus::Failed => include_failed,
            _ => false,
        })
        .collect();
    included.sort_by_key(|e| (e.instance.combo_index, e.instance.repetition_index));

    let rows = included
        .into_iter()
        .map(|e| {
            let mut by_metric: BTreeMap<&str, Vec<&MetricRecord>> = BTreeMap::new();
            for record in &e.metrics {
                by_metric.entry(record.metric.as_str()).or_default().push(record);
            }
            let metric_cells = metrics
                .iter()
                .map(|col| {
                    let mut records = by_metric.remove(col.name.as_str())?;
                    records.sort_by_key(|r| r.seq);
                    let values: Vec<f64> = records.iter().map(|r| r.value).collect();
                    col.reducer.apply(&values)
                })
                .collect();
            let values = parameters
                .iter()
                .map(|p| {
                    e.instance
                        .assignment
                        .get(&p.name)
                        .cloned()
                        .ok_or_else(|| AnalysisError::UnknownParameter(p.name.clone()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(FrameRow {
                experiment_id: e.instance.id.clone(),
                combo_index: e.instance.combo_index,
                repetition_index: e.instance.repetition_index,
                status: e.instance.status,
                values,
                metrics: metric_cells,
            })
        })
        .collect::<Result<Vec<_>, AnalysisError>>()?;

    Ok(ResultFrame {
        study_id: data.study.id.clone(),
        parameters,
        metrics,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reducers_follow_sequence_order() {
        let seq = [3.0, 5.0, 4.0];
        assert_eq!(Reducer::Last.apply(&seq), Some(4.0));
        assert_eq!(Reducer::First.apply(&seq), Some(3.0));
        assert_eq!(Reducer::Mean.apply(&seq), Some(4.0));
        assert_eq!(Reducer::Max.apply(&seq), Some(5.0));
        assert_eq!(Reducer::Min.apply(&seq), Some(3.0));
        assert_eq!(Reducer::Sum.apply(&seq), Some(12.0));
        assert_eq!(Reducer::Last.apply(&[]), None);
    }
}

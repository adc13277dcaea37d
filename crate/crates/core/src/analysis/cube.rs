use std::collections::BTreeMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::frame::{FrameRow, Reducer, ResultFrame};
use super::stats::BoxStats;
use super::AnalysisError;
use crate::model::{ParamValue, StudyId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Predicate {
    Equals { value: ParamValue },
    In { values: Vec<ParamValue> },
    /// Inclusive numeric range; non-numeric values never match.
    Range { lo: f64, hi: f64 },
}

impl Predicate {
    pub fn matches(&self, value: &ParamValue) -> bool {
        match self {
            Predicate::Equals { value: v } => v == value,
            Predicate::In { values } => values.contains(value),
            Predicate::Range { lo, hi } => value.as_f64().is_some_and(|x| *lo <= x && x <= *hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Filter {
    pub parameter: String,
    #[serde(flatten)]
    pub predicate: Predicate,
}

impl Filter {
    pub fn equals(parameter: impl Into<String>, value: ParamValue) -> Self {
        Self {
            parameter: parameter.into(),
            predicate: Predicate::Equals { value },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeQuery {
    pub study_id: StudyId,
    pub metric: String,
    #[serde(default)]
    pub reducer: Reducer,
    #[serde(default)]
    pub filters: Vec<Filter>,
    #[serde(default)]
    pub group_by: Vec<String>,
    #[serde(default)]
    pub include_failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group_key: IndexMap<String, ParamValue>,
    #[serde(flatten)]
    pub stats: BoxStats,
}

/// Resolves filter columns and checks predicates, returning a row matcher.
pub(crate) fn compile_filters<'a>(
    frame: &ResultFrame,
    filters: &'a [Filter],
) -> Result<Vec<(usize, &'a Predicate)>, AnalysisError> {
    filters
        .iter()
        .map(|f| {
            let idx = frame
                .parameter_index(&f.parameter)
                .ok_or_else(|| AnalysisError::UnknownParameter(f.parameter.clone()))?;
            if let Predicate::Range { lo, hi } = f.predicate {
                if !(lo <= hi) {
                    return Err(AnalysisError::InvalidQuery(format!(
                        "empty range [{lo}, {hi}] for {}",
                        f.parameter
                    )));
                }
            }
            Ok((idx, &f.predicate))
        })
        .collect()
}

pub(crate) fn row_matches(row: &FrameRow, compiled: &[(usize, &Predicate)]) -> bool {
    compiled.iter().all(|(idx, p)| p.matches(&row.values[*idx]))
}

pub(crate) fn resolve_group_by(
    frame: &ResultFrame,
    group_by: &[String],
) -> Result<Vec<usize>, AnalysisError> {
    group_by
        .iter()
        .map(|name| {
            frame
                .parameter_index(name)
                .ok_or_else(|| AnalysisError::UnknownParameter(name.clone()))
        })
        .collect()
}

/// Partitions `rows` by their values in `group_cols`, ordered by template
/// value rank.
pub(crate) fn partition<'r>(
    frame: &ResultFrame,
    rows: impl Iterator<Item = &'r FrameRow>,
    group_cols: &[usize],
) -> BTreeMap<Vec<usize>, (Vec<ParamValue>, Vec<&'r FrameRow>)> {
    let mut groups: BTreeMap<Vec<usize>, (Vec<ParamValue>, Vec<&FrameRow>)> = BTreeMap::new();
    for row in rows {
        let key: Vec<usize> = group_cols
            .iter()
            .map(|&c| frame.parameters[c].rank(&row.values[c]))
            .collect();
        groups
            .entry(key)
            .or_insert_with(|| (group_cols.iter().map(|&c| row.values[c].clone()).collect(), Vec::new()))
            .1
            .push(row);
    }
    groups
}

/// Filter, group and summarise one metric column of a frame.
///
/// Filters combine conjunctively. Rows whose metric cell is null are
/// skipped, and groups left with no values are omitted.
pub fn cube(
    frame: &ResultFrame,
    metric: &str,
    filters: &[Filter],
    group_by: &[String],
) -> Result<Vec<GroupSummary>, AnalysisError> {
    let metric_idx = frame
        .metric_index(metric)
        .ok_or_else(|| AnalysisError::UnknownMetric(metric.to_string()))?;
    let compiled = compile_filters(frame, filters)?;
    let group_cols = resolve_group_by(frame, group_by)?;

    let rows = frame.rows.iter().filter(|r| row_matches(r, &compiled));
    let groups = partition(frame, rows, &group_cols);
    Ok(groups
        .into_values()
        .filter_map(|(key_values, rows)| {
            let values: Vec<f64> = rows.iter().filter_map(|r| r.metrics[metric_idx]).collect();
            let stats = BoxStats::from_values(&values)?;
            let group_key = group_by.iter().cloned().zip(key_values).collect();
            Some(GroupSummary { group_key, stats })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predicates() {
        let five = ParamValue::number(5.0).unwrap();
        let text = ParamValue::text("Default");
        assert!(Predicate::Equals { value: five.clone() }.matches(&five));
        assert!(!Predicate::Equals { value: five.clone() }.matches(&text));
        assert!(Predicate::In { values: vec![text.clone(), five.clone()] }.matches(&text));
        let range = Predicate::Range { lo: 5.0, hi: 20.0 };
        assert!(range.matches(&five));
        assert!(!range.matches(&text));
        assert!(!range.matches(&ParamValue::number(20.5).unwrap()));
    }

    #[test]
    fn filter_wire_form() {
        let f: Filter = serde_json::from_str(r#"{"parameter":"player","op":"equals","value":"Shaka"}"#).unwrap();
        assert_eq!(f, Filter::equals("player", "Shaka".into()));
        let r: Filter = serde_json::from_str(r#"{"parameter":"mu_bw","op":"range","lo":1,"hi":5}"#).unwrap();
        assert_eq!(r.predicate, Predicate::Range { lo: 1.0, hi: 5.0 });
    }
}

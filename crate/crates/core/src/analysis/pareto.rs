//! Two-objective Pareto frontiers.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::cube::{partition, resolve_group_by};
use super::frame::{ReducerMap, ResultFrame};
use super::stats::mean;
use super::AnalysisError;
use crate::model::{Direction, ExperimentId, ParamValue, StudyId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoQuery {
    pub study_id: StudyId,
    pub metric_x: String,
    /// Overrides the declared direction of `metric_x`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir_x: Option<Direction>,
    pub metric_y: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir_y: Option<Direction>,
    #[serde(default)]
    pub group_by: Vec<String>,
    #[serde(default)]
    pub reducers: ReducerMap,
    #[serde(default)]
    pub include_failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_key: Option<IndexMap<String, ParamValue>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment_id: Option<ExperimentId>,
    pub x: f64,
    pub y: f64,
    pub on_frontier: bool,
}

/// Maps a value onto a "larger is better" scale.
fn oriented(v: f64, dir: Direction) -> f64 {
    match dir {
        Direction::Minimize => -v,
        _ => v,
    }
}

/// Frontier membership for each point: `true` iff no other point is at
/// least as good on both axes and strictly better on one. Directions must
/// be `Maximize` or `Minimize`.
///
/// Runs in O(n log n): points are swept in decreasing x, and a point
/// survives iff it has the best y within its x-tie group and beats every
/// y seen at strictly larger x.
pub fn frontier_flags(points: &[(f64, f64)], dir_x: Direction, dir_y: Direction) -> Vec<bool> {
    let scaled: Vec<(f64, f64)> = points
        .iter()
        .map(|&(x, y)| (oriented(x, dir_x), oriented(y, dir_y)))
        .collect();
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| scaled[b].0.total_cmp(&scaled[a].0));

    let mut flags = vec![false; points.len()];
    let mut best_y = f64::NEG_INFINITY;
    let mut start = 0;
    while start < order.len() {
        let x = scaled[order[start]].0;
        let end = start
            + order[start..]
                .iter()
                .take_while(|&&i| scaled[i].0 == x)
                .count();
        let group = &order[start..end];
        let group_best = group
            .iter()
            .map(|&i| scaled[i].1)
            .fold(f64::NEG_INFINITY, f64::max);
        if group_best > best_y {
            for &i in group {
                flags[i] = scaled[i].1 == group_best;
            }
            best_y = group_best;
        }
        start = end;
    }
    flags
}

/// Resolves an axis direction from an explicit override or the column's
/// declared direction; neutral is rejected.
pub fn resolve_direction(
    frame: &ResultFrame,
    metric: &str,
    explicit: Option<Direction>,
) -> Result<Direction, AnalysisError> {
    let col = frame
        .metrics
        .iter()
        .find(|m| m.name == metric)
        .ok_or_else(|| AnalysisError::UnknownMetric(metric.to_string()))?;
    match explicit.unwrap_or(col.direction) {
        Direction::Neutral => Err(AnalysisError::NeutralDirection(metric.to_string())),
        d => Ok(d),
    }
}

/// Candidate points are per-group means of each metric (or individual
/// experiments when `group_by` is empty); candidates lacking either value
/// are dropped. Output is sorted by ascending x, then y.
pub fn pareto(
    frame: &ResultFrame,
    metric_x: &str,
    dir_x: Option<Direction>,
    metric_y: &str,
    dir_y: Option<Direction>,
    group_by: &[String],
) -> Result<Vec<ParetoPoint>, AnalysisError> {
    let dx = resolve_direction(frame, metric_x, dir_x)?;
    let dy = resolve_direction(frame, metric_y, dir_y)?;
    let ix = frame.metric_index(metric_x).expect("resolved above");
    let iy = frame.metric_index(metric_y).expect("resolved above");
    let group_cols = resolve_group_by(frame, group_by)?;

    let mut candidates: Vec<ParetoPoint> = if group_by.is_empty() {
        frame
            .rows
            .iter()
            .filter_map(|r| {
                Some(ParetoPoint {
                    group_key: None,
                    experiment_id: Some(r.experiment_id.clone()),
                    x: r.metrics[ix]?,
                    y: r.metrics[iy]?,
                    on_frontier: false,
                })
            })
            .collect()
    } else {
        partition(frame, frame.rows.iter(), &group_cols)
            .into_values()
            .filter_map(|(key_values, rows)| {
                let xs: Vec<f64> = rows.iter().filter_map(|r| r.metrics[ix]).collect();
                let ys: Vec<f64> = rows.iter().filter_map(|r| r.metrics[iy]).collect();
                if xs.is_empty() || ys.is_empty() {
                    return None;
                }
                Some(ParetoPoint {
                    group_key: Some(group_by.iter().cloned().zip(key_values).collect()),
                    experiment_id: None,
                    x: mean(&xs),
                    y: mean(&ys),
                    on_frontier: false,
                })
            })
            .collect()
    };

    let coords: Vec<(f64, f64)> = candidates.iter().map(|p| (p.x, p.y)).collect();
    for (point, flag) in candidates.iter_mut().zip(frontier_flags(&coords, dx, dy)) {
        point.on_frontier = flag;
    }
    // Stable sort keeps group/row order among equal coordinates.
    candidates.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    Ok(candidates)
}

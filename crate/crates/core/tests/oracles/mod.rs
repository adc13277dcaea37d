//! Reference implementations written straight from the definitions, used
//! to check the engine. None of them call into the code they check.
#![allow(dead_code)]

use std::collections::BTreeMap;

use chrono::Utc;
use maci_core::analysis::{cube, BoxStats, Filter, FrameRow, MetricColumn, ParameterColumn, Predicate, Reducer, ResultFrame};
use maci_core::model::*;
use rand::Rng;

pub const REL: f64 = 1e-12;

/// Every (assignment, repetition) of the cross product, by recursion.
pub fn brute_force_expansion(
    params: &[(String, Vec<ParamValue>)],
    repetitions: u32,
) -> Vec<(Vec<(String, ParamValue)>, u32)> {
    fn rec(
        params: &[(String, Vec<ParamValue>)],
        prefix: &mut Vec<(String, ParamValue)>,
        out: &mut Vec<Vec<(String, ParamValue)>>,
    ) {
        match params.split_first() {
            None => out.push(prefix.clone()),
            Some(((name, values), rest)) => {
                for v in values {
                    prefix.push((name.clone(), v.clone()));
                    rec(rest, prefix, out);
                    prefix.pop();
                }
            }
        }
    }
    let mut combos = Vec::new();
    rec(params, &mut Vec::new(), &mut combos);
    let mut out = Vec::new();
    for c in combos {
        for r in 0..repetitions {
            let mut sorted = c.clone();
            sorted.sort_by(|a, b| a.0.cmp(&b.0));
            out.push((sorted, r));
        }
    }
    out
}

pub fn random_value<R: Rng>(rng: &mut R) -> ParamValue {
    match rng.random_range(0..3) {
        0 => ParamValue::text(format!("v{}", rng.random_range(0..50))),
        1 => ParamValue::number(rng.random_range(-20..20) as f64 / 4.0).unwrap(),
        _ => ParamValue::Bool(rng.random()),
    }
}

/// Up to `max_params` parameters with up to `max_values` distinct values.
pub fn random_template<R: Rng>(rng: &mut R, max_params: usize, max_values: usize) -> StudyTemplate {
    let n_params = rng.random_range(0..=max_params);
    let parameters = (0..n_params)
        .map(|i| {
            let n_values = rng.random_range(1..=max_values);
            let mut values: Vec<ParamValue> = Vec::new();
            while values.len() < n_values {
                let v = random_value(rng);
                if !values.contains(&v) {
                    values.push(v);
                }
            }
            let kind = if rng.random() { ParameterKind::Configuration } else { ParameterKind::Environment };
            ParameterDefinition::new(format!("p{i}"), kind, values)
        })
        .collect();
    StudyTemplate {
        id: TemplateId::from("tpl"),
        name: "random".into(),
        script: String::new(),
        parameters,
        declared_metrics: vec![],
        created_at: Utc::now(),
    }
}

/// A study binding a random non-empty subset of each parameter's values.
pub fn random_study<R: Rng>(rng: &mut R, template: &StudyTemplate, max_reps: u32) -> Study {
    let bound_values = template
        .parameters
        .iter()
        .map(|p| {
            let mut subset: Vec<ParamValue> = p.values.iter().filter(|_| rng.random_bool(0.6)).cloned().collect();
            if subset.is_empty() {
                subset.push(p.values[rng.random_range(0..p.values.len())].clone());
            }
            (p.name.clone(), subset)
        })
        .collect();
    Study {
        id: StudyId::from("study"),
        template_id: template.id.clone(),
        bound_values,
        repetitions: rng.random_range(1..=max_reps),
        base_seed: rng.random(),
        provenance: ProvenanceInfo::default(),
        status: StudyStatus::Draft,
        created_at: Utc::now(),
    }
}

/// A frame with up to `max_rows` rows over `dims` parameters and one
/// metric `m`, occasionally null.
pub fn random_frame<R: Rng>(rng: &mut R, max_rows: usize, dims: usize) -> ResultFrame {
    let parameters: Vec<ParameterColumn> = (0..dims)
        .map(|i| {
            let n = rng.random_range(1..=4);
            let mut values: Vec<ParamValue> = Vec::new();
            while values.len() < n {
                let v = random_value(rng);
                if !values.contains(&v) {
                    values.push(v);
                }
            }
            ParameterColumn { name: format!("d{i}"), kind: ParameterKind::Configuration, values }
        })
        .collect();
    let n_rows = rng.random_range(0..=max_rows);
    let integer_valued = rng.random_bool(0.3);
    let rows = (0..n_rows)
        .map(|i| {
            let values = parameters
                .iter()
                .map(|p| p.values[rng.random_range(0..p.values.len())].clone())
                .collect();
            let metric = if rng.random_bool(0.05) {
                None
            } else if integer_valued {
                Some(rng.random_range(0..10) as f64)
            } else if rng.random_bool(0.05) {
                Some(rng.random_range(-1e4..1e4))
            } else {
                Some(rng.random_range(0.0..100.0))
            };
            FrameRow {
                experiment_id: ExperimentId(format!("e{i}")),
                combo_index: i as u64,
                repetition_index: 0,
                status: ExperimentStatus::Finished,
                values,
                metrics: vec![metric],
            }
        })
        .collect();
    ResultFrame {
        study_id: StudyId::from("frame"),
        parameters,
        metrics: vec![MetricColumn { name: "m".into(), reducer: Reducer::Last, direction: Direction::Neutral }],
        rows,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NaiveSummary {
    pub key: Vec<ParamValue>,
    pub count: usize,
    pub mean: f64,
    pub std: Option<f64>,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub outliers: Vec<f64>,
}

fn type7(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() as f64 - 1.0) * p;
    let fl = h.floor();
    let i = fl as usize;
    if i + 1 >= sorted.len() {
        return sorted[i];
    }
    sorted[i] + (h - fl) * (sorted[i + 1] - sorted[i])
}

/// Group by nested loops: for every distinct key seen, rescan all rows.
/// `accept` is the conjunctive filter. Groups come back in template rank
/// order.
pub fn naive_cube(
    frame: &ResultFrame,
    group_cols: &[usize],
    accept: &dyn Fn(&FrameRow) -> bool,
) -> Vec<NaiveSummary> {
    let mut keys: Vec<Vec<ParamValue>> = Vec::new();
    for row in &frame.rows {
        if !accept(row) {
            continue;
        }
        let key: Vec<ParamValue> = group_cols.iter().map(|&c| row.values[c].clone()).collect();
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let rank = |key: &Vec<ParamValue>| -> Vec<usize> {
        group_cols
            .iter()
            .zip(key)
            .map(|(&c, v)| frame.parameters[c].values.iter().position(|x| x == v).unwrap())
            .collect()
    };
    keys.sort_by_key(|k| rank(k));

    let mut out = Vec::new();
    for key in keys {
        let mut xs = Vec::new();
        for row in &frame.rows {
            let row_key: Vec<ParamValue> = group_cols.iter().map(|&c| row.values[c].clone()).collect();
            if accept(row) && row_key == key {
                if let Some(v) = row.metrics[0] {
                    xs.push(v);
                }
            }
        }
        if xs.is_empty() {
            continue;
        }
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = (n > 1).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt());
        let q1 = type7(&xs, 0.25);
        let q3 = type7(&xs, 0.75);
        let iqr = q3 - q1;
        let outliers = xs.iter().copied().filter(|&x| x < q1 - 1.5 * iqr || x > q3 + 1.5 * iqr).collect();
        out.push(NaiveSummary {
            key,
            count: n,
            mean,
            std,
            min: xs[0],
            q1,
            median: type7(&xs, 0.5),
            q3,
            max: xs[n - 1],
            outliers,
        });
    }
    out
}

pub fn close(a: f64, b: f64, rel: f64) -> bool {
    a == b || (a - b).abs() <= rel * a.abs().max(b.abs())
}

/// Absolute slack for quantities that cancel to ~0 (a constant group's
/// std), scaled by the data magnitude.
pub fn close_scaled(a: f64, b: f64, rel: f64, scale: f64) -> bool {
    close(a, b, rel) || (a - b).abs() <= rel * scale
}

/// O(n²) dominance check on "larger is better" coordinates after flipping
/// minimised axes.
pub fn brute_force_frontier(points: &[(f64, f64)], max_x: bool, max_y: bool) -> Vec<bool> {
    let better_eq = |a: f64, b: f64, max: bool| if max { a >= b } else { a <= b };
    let better = |a: f64, b: f64, max: bool| if max { a > b } else { a < b };
    points
        .iter()
        .map(|&p| {
            !points.iter().any(|&q| {
                better_eq(q.0, p.0, max_x)
                    && better_eq(q.1, p.1, max_y)
                    && (better(q.0, p.0, max_x) || better(q.1, p.1, max_y))
            })
        })
        .collect()
}

pub fn param_pairs(template: &StudyTemplate, study: &Study) -> Vec<(String, Vec<ParamValue>)> {
    template
        .parameters
        .iter()
        .map(|p| (p.name.clone(), study.bound_values[&p.name].clone()))
        .collect()
}

pub fn assignment_pairs(a: &BTreeMap<String, ParamValue>) -> Vec<(String, ParamValue)> {
    a.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
}

pub fn random_filters<R: Rng>(rng: &mut R, frame: &ResultFrame) -> Vec<Filter> {
    let mut filters = Vec::new();
    for col in &frame.parameters {
        match rng.random_range(0..5) {
            0 => filters.push(Filter {
                parameter: col.name.clone(),
                predicate: Predicate::Equals { value: col.values[rng.random_range(0..col.values.len())].clone() },
            }),
            1 => filters.push(Filter {
                parameter: col.name.clone(),
                predicate: Predicate::In {
                    values: col.values.iter().filter(|_| rng.random_bool(0.5)).cloned().collect(),
                },
            }),
            2 => {
                let lo = rng.random_range(-5.0..2.0);
                filters.push(Filter {
                    parameter: col.name.clone(),
                    predicate: Predicate::Range { lo, hi: lo + rng.random_range(0.0..6.0) },
                })
            }
            _ => {}
        }
    }
    filters
}

pub fn random_group_by<R: Rng>(rng: &mut R, frame: &ResultFrame) -> Vec<String> {
    let mut names: Vec<String> = frame.parameters.iter().map(|p| p.name.clone()).collect();
    names.retain(|_| rng.random_bool(0.5));
    // Shuffle so group order differs from template order.
    for i in (1..names.len()).rev() {
        names.swap(i, rng.random_range(0..=i));
    }
    names
}

/// The oracle's matcher: filters evaluated straight from their definition.
pub fn accepts(frame: &ResultFrame, filters: &[Filter], row: &FrameRow) -> bool {
    filters.iter().all(|f| {
        let idx = frame.parameters.iter().position(|p| p.name == f.parameter).unwrap();
        let v = &row.values[idx];
        match &f.predicate {
            Predicate::Equals { value } => v == value,
            Predicate::In { values } => values.iter().any(|x| x == v),
            Predicate::Range { lo, hi } => match v {
                ParamValue::Number(x) => lo <= x && x <= hi,
                _ => false,
            },
        }
    })
}

/// Compares `cube` against `naive_cube`: exact counts, keys and outliers,
/// relative error at most `REL` on every statistic.
pub fn check_cube(frame: &ResultFrame, filters: &[Filter], group_by: &[String]) -> Result<(), String> {
    let ours = cube(frame, "m", filters, group_by).map_err(|e| e.to_string())?;
    let cols: Vec<usize> = group_by
        .iter()
        .map(|g| frame.parameters.iter().position(|p| &p.name == g).unwrap())
        .collect();
    let oracle = naive_cube(frame, &cols, &|r| accepts(frame, filters, r));
    if ours.len() != oracle.len() {
        return Err(format!("group count {} vs {}", ours.len(), oracle.len()));
    }
    let scale = frame.rows.iter().filter_map(|r| r.metrics[0]).fold(1.0f64, |a, v| a.max(v.abs()));
    for (g, o) in ours.iter().zip(&oracle) {
        let key: Vec<ParamValue> = g.group_key.values().cloned().collect();
        if key != o.key || g.group_key.keys().cloned().collect::<Vec<_>>() != group_by {
            return Err(format!("key {key:?} vs {:?}", o.key));
        }
        let s = &g.stats;
        if s.count as usize != o.count {
            return Err(format!("count {} vs {}", s.count, o.count));
        }
        for (name, a, b) in [
            ("mean", s.mean, o.mean),
            ("min", s.min, o.min),
            ("q1", s.q1, o.q1),
            ("median", s.median, o.median),
            ("q3", s.q3, o.q3),
            ("max", s.max, o.max),
        ] {
            if !close_scaled(a, b, REL, scale) {
                return Err(format!("{name}: {a} vs {b}"));
            }
        }
        match (s.std, o.std) {
            (None, None) => {}
            (Some(a), Some(b)) if close_scaled(a, b, REL, scale) => {}
            other => return Err(format!("std: {other:?}")),
        }
        if s.outliers != o.outliers {
            return Err(format!("outliers {:?} vs {:?}", s.outliers, o.outliers));
        }
        let xs: Vec<f64> = frame
            .rows
            .iter()
            .filter(|r| accepts(frame, filters, r) && cols.iter().zip(&o.key).all(|(&c, v)| &r.values[c] == v))
            .filter_map(|r| r.metrics[0])
            .collect();
        check_box(s, &xs)?;
    }
    Ok(())
}

/// Ordering of the five-number summary and the Tukey-fence outlier rule.
pub fn check_box(s: &BoxStats, xs: &[f64]) -> Result<(), String> {
    if !(s.min <= s.q1 && s.q1 <= s.median && s.median <= s.q3 && s.q3 <= s.max) {
        return Err(format!("unordered summary {s:?}"));
    }
    if !(s.min <= s.whisker_low && s.whisker_high <= s.max) {
        return Err(format!("whiskers outside range {s:?}"));
    }
    let iqr = s.q3 - s.q1;
    let (lo, hi) = (s.q1 - 1.5 * iqr, s.q3 + 1.5 * iqr);
    let mut expected: Vec<f64> = xs.iter().copied().filter(|&x| x < lo || x > hi).collect();
    expected.sort_by(f64::total_cmp);
    if s.outliers != expected {
        return Err(format!("outliers {:?} vs fences giving {expected:?}", s.outliers));
    }
    Ok(())
}

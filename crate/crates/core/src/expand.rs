//! Template/study validation, cross-product expansion and duration estimates.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{
    is_identifier, ExperimentId, ExperimentInstance, ExperimentStatus, ParamValue, Study,
    StudyTemplate,
};
use crate::seed::derive_seed;

/// One violated invariant: `field` locates it (`parameters.player.values`),
/// `reason` says what is wrong.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationError {
    pub field: String,
    pub reason: String,
}

impl ValidationError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.reason)
    }
}

/// A non-empty list of validation errors.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
pub struct ValidationErrors(pub Vec<ValidationError>);

impl ValidationErrors {
    fn check(errors: Vec<ValidationError>) -> Result<(), ValidationErrors> {
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ValidationErrors(errors))
        }
    }
}

fn has_non_finite(v: &ParamValue) -> bool {
    matches!(v, ParamValue::Number(x) if !x.is_finite())
}

pub fn validate_template(template: &StudyTemplate) -> Vec<ValidationError> {
    let mut errors = Vec::new();
    let mut names = HashSet::new();
    for (i, param) in template.parameters.iter().enumerate() {
        let field = if param.name.is_empty() {
            format!("parameters[{i}]")
        } else {
            format!("parameters.{}", param.name)
        };
        if !is_identifier(&param.name) {
            errors.push(ValidationError::new(
                format!("{field}.name"),
                format!("{:?} is not a valid identifier", param.name),
            ));
        }
        if !names.insert(param.name.as_str()) {
            errors.push(ValidationError::new(
                field.clone(),
                format!("duplicate parameter name {:?}", param.name),
            ));
        }
        if param.values.is_empty() {
            errors.push(ValidationError::new(format!("{field}.values"), "value list is empty"));
        }
        let mut seen = HashSet::new();
        for value in &param.values {
            if has_non_finite(value) {
                errors.push(ValidationError::new(
                    format!("{field}.values"),
                    "numbers must be finite",
                ));
            } else if !seen.insert(value) {
                errors.push(ValidationError::new(
                    format!("{field}.values"),
                    format!("duplicate value {value}"),
                ));
            }
        }
    }
    let mut metrics = HashSet::new();
    for (i, metric) in template.declared_metrics.iter().enumerate() {
        let field = if metric.name.is_empty() {
            format!("declared_metrics[{i}]")
        } else {
            format!("declared_metrics.{}", metric.name)
        };
        if !is_identifier(&metric.name) {
            errors.push(ValidationError::new(
                format!("{field}.name"),
                format!("{:?} is not a valid identifier", metric.name),
            ));
        }
        if !metrics.insert(metric.name.as_str()) {
            errors.push(ValidationError::new(
                field,
                format!("duplicate metric name {:?}", metric.name),
            ));
        }
    }
    errors
}

/// Checks a study's bindings against its template. Bound values must be a
/// non-empty, duplicate-free subset of the template values, in template order.
pub fn validate_study(template: &StudyTemplate, study: &Study) -> Vec<ValidationError> {
    let mut errors = Vec::new();
    if study.template_id != template.id {
        errors.push(ValidationError::new(
            "template_id",
            format!("study refers to template {}, not {}", study.template_id, template.id),
        ));
    }
    if study.repetitions == 0 {
        errors.push(ValidationError::new("repetitions", "must be at least 1"));
    }
    for param in &template.parameters {
        let field = format!("bound_values.{}", param.name);
        let Some(bound) = study.bound_values.get(&param.name) else {
            errors.push(ValidationError::new(field, "parameter is not bound"));
            continue;
        };
        if bound.is_empty() {
            errors.push(ValidationError::new(field, "no values bound"));
            continue;
        }
        let mut last_index = None;
        for value in bound {
            match param.index_of(value) {
                None => errors.push(ValidationError::new(
                    field.clone(),
                    format!("value {value} is not declared by the template"),
                )),
                Some(idx) => {
                    if let Some(prev) = last_index {
                        if idx == prev {
                            errors.push(ValidationError::new(
                                field.clone(),
                                format!("duplicate value {value}"),
                            ));
                        } else if idx < prev {
                            errors.push(ValidationError::new(
                                field.clone(),
                                format!("value {value} is out of template order"),
                            ));
                        }
                    }
                    last_index = Some(last_index.map_or(idx, |p: usize| p.max(idx)));
                }
            }
        }
    }
    for name in study.bound_values.keys() {
        if template.parameter(name).is_none() {
            errors.push(ValidationError::new(
                format!("bound_values.{name}"),
                "not a parameter of the template",
            ));
        }
    }
    errors
}

/// Reorders each binding into template order, leaving unknown values and
/// parameters in place for [`validate_study`] to report.
pub fn normalize_bindings(
    template: &StudyTemplate,
    bindings: &mut BTreeMap<String, Vec<ParamValue>>,
) {
    for (name, values) in bindings.iter_mut() {
        if let Some(param) = template.parameter(name) {
            values.sort_by_key(|v| param.index_of(v).unwrap_or(usize::MAX));
        }
    }
}

/// Number of experiments a study expands to, or `None` on overflow.
/// Bindings are assumed valid.
pub fn instance_count(template: &StudyTemplate, study: &Study) -> Option<u64> {
    template
        .parameters
        .iter()
        .map(|p| study.bound_values.get(&p.name).map_or(0, Vec::len) as u64)
        .try_fold(1u64, |acc, n| acc.checked_mul(n))?
        .checked_mul(u64::from(study.repetitions))
}

pub fn experiment_id(study: &Study, combo_index: u64, repetition_index: u32) -> ExperimentId {
    ExperimentId(format!("{}-{combo_index}-{repetition_index}", study.id))
}

/// Materialises the cross product of a study's bindings.
///
/// The first declared parameter varies slowest and the repetition index
/// fastest; `combo_index` is the lexicographic rank of the value-index
/// tuple.
pub fn expand_study(
    template: &StudyTemplate,
    study: &Study,
) -> Result<Vec<ExperimentInstance>, ValidationErrors> {
    ValidationErrors::check(validate_study(template, study))?;
    let bound: Vec<(&str, &[ParamValue])> = template
        .parameters
        .iter()
        .map(|p| (p.name.as_str(), study.bound_values[&p.name].as_slice()))
        .collect();
    let total = instance_count(template, study).ok_or_else(|| {
        ValidationErrors(vec![ValidationError::new(
            "bound_values",
            "instance count overflows 64 bits",
        )])
    })?;

    let mut instances = Vec::with_capacity(usize::try_from(total).unwrap_or(0));
    let mut digits = vec![0usize; bound.len()];
    let mut combo_index = 0u64;
    loop {
        let assignment: BTreeMap<String, ParamValue> = bound
            .iter()
            .zip(&digits)
            .map(|((name, values), &d)| (name.to_string(), values[d].clone()))
            .collect();
        for repetition_index in 0..study.repetitions {
            instances.push(ExperimentInstance {
                id: experiment_id(study, combo_index, repetition_index),
                study_id: study.id.clone(),
                combo_index,
                repetition_index,
                assignment: assignment.clone(),
                seed: derive_seed(study.base_seed, combo_index, u64::from(repetition_index)),
                status: ExperimentStatus::Pending,
                attempt: 0,
                exit_detail: None,
            });
        }
        combo_index += 1;

        // Odometer step: the last parameter is the fastest digit.
        let mut pos = bound.len();
        loop {
            if pos == 0 {
                return Ok(instances);
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] < bound[pos].1.len() {
                break;
            }
            digits[pos] = 0;
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EstimateError {
    #[error("per-experiment duration must be a positive finite number of seconds, got {0}")]
    NonPositiveDuration(f64),
    #[error("parallel worker count must be at least 1")]
    NoWorkers,
    #[error(transparent)]
    Invalid(#[from] ValidationErrors),
}

/// Wall-clock seconds to run a study with `parallel_workers` workers when
/// each experiment takes `per_experiment_s`.
pub fn estimate_duration(
    study: &Study,
    template: &StudyTemplate,
    per_experiment_s: f64,
    parallel_workers: u32,
) -> Result<f64, EstimateError> {
    if !(per_experiment_s.is_finite() && per_experiment_s > 0.0) {
        return Err(EstimateError::NonPositiveDuration(per_experiment_s));
    }
    if parallel_workers == 0 {
        return Err(EstimateError::NoWorkers);
    }
    ValidationErrors::check(validate_study(template, study))?;
    let count = instance_count(template, study).ok_or_else(|| {
        ValidationErrors(vec![ValidationError::new(
            "bound_values",
            "instance count overflows 64 bits",
        )])
    })?;
    let rounds = count.div_ceil(u64::from(parallel_workers));
    Ok(rounds as f64 * per_experiment_s)
}

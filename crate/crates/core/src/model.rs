//! The three-level experiment hierarchy (template, study, experiment) and
//! the records running experiments emit.
//!
//! Every type here serializes with lower_snake_case field names; that form
//! is both the HTTP wire format and the persistence format.

use std::collections::BTreeMap;
use std::fmt;
use std::hash::{Hash, Hasher};

use chrono::{DateTime, Utc};
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            /// A fresh URL-safe 128-bit random id.
            pub fn random() -> Self {
                Self(uuid::Uuid::new_v4().simple().to_string())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

id_type!(TemplateId);
id_type!(StudyId);
id_type!(
    /// Derived deterministically from the study id and the instance's
    /// position in the expansion, so re-expanding a study yields equal ids.
    ExperimentId
);
id_type!(WorkerId);

/// `[A-Za-z_][A-Za-z0-9_]*`
pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// A single parameter value: text, finite number or boolean.
///
/// Serialized as the bare JSON scalar. Numbers compare bitwise after
/// folding `-0.0` into `+0.0`.
#[derive(Debug, Clone)]
pub enum ParamValue {
    Text(String),
    Number(f64),
    Bool(bool),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("parameter values must be finite numbers, got {0}")]
pub struct NonFiniteValue(pub f64);

impl ParamValue {
    pub fn number(v: f64) -> Result<Self, NonFiniteValue> {
        if !v.is_finite() {
            return Err(NonFiniteValue(v));
        }
        Ok(ParamValue::Number(if v == 0.0 { 0.0 } else { v }))
    }

    pub fn text(s: impl Into<String>) -> Self {
        ParamValue::Text(s.into())
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Number(v) => Some(*v),
            _ => None,
        }
    }

    /// Canonical text form used for environment variables and CSV cells.
    /// Numbers use the shortest representation that round-trips.
    pub fn canonical_text(&self) -> String {
        match self {
            ParamValue::Text(s) => s.clone(),
            ParamValue::Number(v) => format_number(*v),
            ParamValue::Bool(b) => b.to_string(),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            ParamValue::Text(_) => 0,
            ParamValue::Number(_) => 1,
            ParamValue::Bool(_) => 2,
        }
    }
}

/// Shortest round-trip decimal form of a finite double (`2`, `0.8`, `7.5`).
pub fn format_number(v: f64) -> String {
    let v = if v == 0.0 { 0.0 } else { v };
    format!("{v}")
}

impl PartialEq for ParamValue {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (ParamValue::Text(a), ParamValue::Text(b)) => a == b,
            (ParamValue::Number(a), ParamValue::Number(b)) => canonical_bits(*a) == canonical_bits(*b),
            (ParamValue::Bool(a), ParamValue::Bool(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for ParamValue {}

impl Hash for ParamValue {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.tag().hash(state);
        match self {
            ParamValue::Text(s) => s.hash(state),
            ParamValue::Number(v) => canonical_bits(*v).hash(state),
            ParamValue::Bool(b) => b.hash(state),
        }
    }
}

fn canonical_bits(v: f64) -> u64 {
    if v == 0.0 {
        0
    } else {
        v.to_bits()
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_text())
    }
}

impl From<&str> for ParamValue {
    fn from(s: &str) -> Self {
        ParamValue::Text(s.to_string())
    }
}

impl From<bool> for ParamValue {
    fn from(b: bool) -> Self {
        ParamValue::Bool(b)
    }
}

impl Serialize for ParamValue {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            ParamValue::Text(s) => serializer.serialize_str(s),
            ParamValue::Number(v) => serializer.serialize_f64(*v),
            ParamValue::Bool(b) => serializer.serialize_bool(*b),
        }
    }
}

impl<'de> Deserialize<'de> for ParamValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct ValueVisitor;

        impl Visitor<'_> for ValueVisitor {
            type Value = ParamValue;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a string, finite number or boolean")
            }

            fn visit_bool<E: de::Error>(self, v: bool) -> Result<ParamValue, E> {
                Ok(ParamValue::Bool(v))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<ParamValue, E> {
                ParamValue::number(v as f64).map_err(E::custom)
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<ParamValue, E> {
                ParamValue::number(v as f64).map_err(E::custom)
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<ParamValue, E> {
                ParamValue::number(v).map_err(E::custom)
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<ParamValue, E> {
                Ok(ParamValue::Text(v.to_string()))
            }

            fn visit_string<E: de::Error>(self, v: String) -> Result<ParamValue, E> {
                Ok(ParamValue::Text(v))
            }
        }

        deserializer.deserialize_any(ValueVisitor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParameterKind {
    Configuration,
    Environment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDefinition {
    pub name: String,
    pub kind: ParameterKind,
    pub values: Vec<ParamValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
}

impl ParameterDefinition {
    pub fn new(name: impl Into<String>, kind: ParameterKind, values: Vec<ParamValue>) -> Self {
        Self {
            name: name.into(),
            kind,
            values,
            unit: None,
        }
    }

    pub fn with_unit(mut self, unit: impl Into<String>) -> Self {
        self.unit = Some(unit.into());
        self
    }

    /// Position of `value` in the declared value list.
    pub fn index_of(&self, value: &ParamValue) -> Option<usize> {
        self.values.iter().position(|v| v == value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Maximize,
    Minimize,
    #[default]
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricDeclaration {
    pub name: String,
    #[serde(default)]
    pub direction: Direction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyTemplate {
    pub id: TemplateId,
    pub name: String,
    pub script: String,
    pub parameters: Vec<ParameterDefinition>,
    #[serde(default)]
    pub declared_metrics: Vec<MetricDeclaration>,
    pub created_at: DateTime<Utc>,
}

impl StudyTemplate {
    pub fn parameter(&self, name: &str) -> Option<&ParameterDefinition> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn metric(&self, name: &str) -> Option<&MetricDeclaration> {
        self.declared_metrics.iter().find(|m| m.name == name)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceInfo {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub commit_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub implementation_version: Option<String>,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyStatus {
    Draft,
    Running,
    Finished,
    Canceled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub id: StudyId,
    pub template_id: TemplateId,
    pub bound_values: BTreeMap<String, Vec<ParamValue>>,
    pub repetitions: u32,
    pub base_seed: u64,
    #[serde(default)]
    pub provenance: ProvenanceInfo,
    pub status: StudyStatus,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentStatus {
    Pending,
    Leased,
    Running,
    Finished,
    Failed,
    Canceled,
}

impl ExperimentStatus {
    pub const ALL: [ExperimentStatus; 6] = [
        ExperimentStatus::Pending,
        ExperimentStatus::Leased,
        ExperimentStatus::Running,
        ExperimentStatus::Finished,
        ExperimentStatus::Failed,
        ExperimentStatus::Canceled,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            ExperimentStatus::Finished | ExperimentStatus::Failed | ExperimentStatus::Canceled
        )
    }

    /// The legal lifecycle edges. `Leased -> Failed` covers a lease that
    /// expires on its final attempt before the worker reported a start.
    pub fn can_transition(self, to: ExperimentStatus) -> bool {
        use ExperimentStatus::*;
        matches!(
            (self, to),
            (Pending, Leased)
                | (Leased, Running)
                | (Running, Finished)
                | (Running, Failed)
                | (Leased, Pending)
                | (Running, Pending)
                | (Leased, Failed)
                | (Pending, Canceled)
                | (Leased, Canceled)
                | (Running, Canceled)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentStatus::Pending => "pending",
            ExperimentStatus::Leased => "leased",
            ExperimentStatus::Running => "running",
            ExperimentStatus::Finished => "finished",
            ExperimentStatus::Failed => "failed",
            ExperimentStatus::Canceled => "canceled",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.as_str() == s)
    }
}

impl fmt::Display for ExperimentStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentInstance {
    pub id: ExperimentId,
    pub study_id: StudyId,
    pub combo_index: u64,
    pub repetition_index: u32,
    pub assignment: BTreeMap<String, ParamValue>,
    pub seed: u64,
    pub status: ExperimentStatus,
    pub attempt: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_detail: Option<String>,
}

impl ExperimentInstance {
    /// The `params.json` document handed to the experiment script.
    pub fn parameter_document(&self) -> ParameterDocument {
        ParameterDocument {
            experiment_id: self.id.clone(),
            seed: self.seed,
            params: self.assignment.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDocument {
    pub experiment_id: ExperimentId,
    pub seed: u64,
    pub params: BTreeMap<String, ParamValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub experiment_id: ExperimentId,
    pub metric: String,
    pub seq: u64,
    pub value: f64,
    pub wall_offset_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogLevel {
    Info,
    Warn,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub experiment_id: ExperimentId,
    pub level: LogLevel,
    pub message: String,
    pub wall_offset_ms: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identifier_syntax() {
        for ok in ["a", "_", "player", "mu_bw", "A1_b2"] {
            assert!(is_identifier(ok), "{ok}");
        }
        for bad in ["", "1bad", "with space", "dash-ed", "ü"] {
            assert!(!is_identifier(bad), "{bad}");
        }
    }

    #[test]
    fn negative_zero_folds_into_zero() {
        let neg = ParamValue::number(-0.0).unwrap();
        let pos = ParamValue::number(0.0).unwrap();
        assert_eq!(neg, pos);
        assert_eq!(neg.canonical_text(), "0");
        // Even a hand-built -0.0 compares equal.
        assert_eq!(ParamValue::Number(-0.0), pos);
    }

    #[test]
    fn non_finite_numbers_rejected() {
        assert!(ParamValue::number(f64::NAN).is_err());
        assert!(ParamValue::number(f64::INFINITY).is_err());
        assert!(serde_json::from_str::<ParamValue>("1e400").is_err());
    }

    #[test]
    fn values_compare_by_tag_and_payload() {
        assert_ne!(ParamValue::text("1"), ParamValue::number(1.0).unwrap());
        assert_ne!(ParamValue::text("true"), ParamValue::Bool(true));
        assert_eq!(ParamValue::number(0.8).unwrap(), ParamValue::number(0.8).unwrap());
    }

    #[test]
    fn value_json_is_bare_scalar() {
        let vals = vec![
            ParamValue::text("Default"),
            ParamValue::number(5.0).unwrap(),
            ParamValue::Bool(false),
        ];
        let json = serde_json::to_string(&vals).unwrap();
        assert_eq!(json, r#"["Default",5.0,false]"#);
        let back: Vec<ParamValue> = serde_json::from_str(r#"["Default",5,false]"#).unwrap();
        assert_eq!(back, vals);
    }

    #[test]
    fn canonical_text_forms() {
        assert_eq!(ParamValue::number(2.0).unwrap().canonical_text(), "2");
        assert_eq!(ParamValue::number(0.8).unwrap().canonical_text(), "0.8");
        assert_eq!(ParamValue::number(-7.5).unwrap().canonical_text(), "-7.5");
        assert_eq!(ParamValue::Bool(true).canonical_text(), "true");
        assert_eq!(ParamValue::text("DASH.JS").canonical_text(), "DASH.JS");
    }

    #[test]
    fn transition_matrix_is_exactly_the_lifecycle() {
        use ExperimentStatus::*;
        let allowed = [
            (Pending, Leased),
            (Leased, Running),
            (Running, Finished),
            (Running, Failed),
            (Leased, Pending),
            (Running, Pending),
            (Leased, Failed),
            (Pending, Canceled),
            (Leased, Canceled),
            (Running, Canceled),
        ];
        for from in ExperimentStatus::ALL {
            for to in ExperimentStatus::ALL {
                assert_eq!(
                    from.can_transition(to),
                    allowed.contains(&(from, to)),
                    "{from} -> {to}"
                );
            }
        }
        for terminal in [Finished, Failed, Canceled] {
            assert!(ExperimentStatus::ALL.iter().all(|&to| !terminal.can_transition(to)));
        }
    }

    #[test]
    fn status_text_round_trips() {
        for st in ExperimentStatus::ALL {
            assert_eq!(ExperimentStatus::parse(st.as_str()), Some(st));
            assert_eq!(serde_json::to_string(&st).unwrap(), format!("\"{st}\""));
        }
    }
}

//! The study file: a template and a study binding in one JSON document.
//!
//! ```json
//! {
//!   "template": {
//!     "name": "mptcp",
//!     "script_path": "toy_sim_swept.py",
//!     "parameters": [{"name": "loss", "kind": "environment", "values": [0, 1]}],
//!     "declared_metrics": [{"name": "throughput", "direction": "maximize"}]
//!   },
//!   "study": {"bound_values": {"loss": [0]}, "repetitions": 3, "base_seed": 7}
//! }
//! ```
//!
//! `script_path` is resolved relative to the file. Exactly one of `script`
//! and `script_path` must be given. A file with `template_id` instead of
//! `template` reuses a template already on the server.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use maci_core::model::{MetricDeclaration, ParamValue, ParameterDefinition, ProvenanceInfo, TemplateId};
use maci_core::orchestrator::{NewStudy, NewTemplate};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script_path: Option<PathBuf>,
    #[serde(default)]
    pub parameters: Vec<ParameterDefinition>,
    #[serde(default)]
    pub declared_metrics: Vec<MetricDeclaration>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySpec {
    #[serde(default)]
    pub bound_values: BTreeMap<String, Vec<ParamValue>>,
    #[serde(default = "one")]
    pub repetitions: u32,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub provenance: ProvenanceInfo,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<TemplateSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_id: Option<TemplateId>,
    #[serde(default)]
    pub study: Option<StudySpec>,
}

#[derive(Debug, thiserror::Error)]
pub enum StudyFileError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {reason}")]
    Invalid { path: PathBuf, reason: String },
}

fn read(path: &Path) -> Result<Vec<u8>, StudyFileError> {
    std::fs::read(path).map_err(|source| StudyFileError::Io { path: path.to_path_buf(), source })
}

fn base_dir(path: &Path) -> &Path {
    path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

impl TemplateSpec {
    /// Resolves the script body; `base` anchors a relative `script_path`.
    pub fn into_new_template(self, base: &Path, origin: &Path) -> Result<NewTemplate, StudyFileError> {
        let invalid = |reason: &str| StudyFileError::Invalid { path: origin.to_path_buf(), reason: reason.into() };
        let script = match (self.script, self.script_path) {
            (Some(s), None) => s,
            (None, Some(p)) => {
                let full = base.join(p);
                String::from_utf8(read(&full)?).map_err(|_| invalid("script is not UTF-8"))?
            }
            (None, None) => return Err(invalid("template needs `script` or `script_path`")),
            (Some(_), Some(_)) => return Err(invalid("template has both `script` and `script_path`")),
        };
        Ok(NewTemplate {
            name: self.name,
            script,
            parameters: self.parameters,
            declared_metrics: self.declared_metrics,
        })
    }
}

/// Where a study's template comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum TemplateSource {
    New(NewTemplate),
    Existing(TemplateId),
}

/// A parsed study file with the script loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedStudy {
    pub template: TemplateSource,
    pub study: StudySpec,
}

impl LoadedStudy {
    pub fn new_study(&self, template_id: TemplateId) -> NewStudy {
        NewStudy {
            template_id,
            bound_values: self.study.bound_values.clone(),
            repetitions: self.study.repetitions,
            base_seed: self.study.base_seed,
            provenance: self.study.provenance.clone(),
        }
    }
}

pub fn load_study_file(path: &Path) -> Result<LoadedStudy, StudyFileError> {
    let bytes = read(path)?;
    let file: StudyFile =
        serde_json::from_slice(&bytes).map_err(|source| StudyFileError::Parse { path: path.to_path_buf(), source })?;
    let invalid = |reason: &str| StudyFileError::Invalid { path: path.to_path_buf(), reason: reason.into() };
    let template = match (file.template, file.template_id) {
        (Some(t), None) => TemplateSource::New(t.into_new_template(base_dir(path), path)?),
        (None, Some(id)) => TemplateSource::Existing(id),
        (None, None) => return Err(invalid("study file needs `template` or `template_id`")),
        (Some(_), Some(_)) => return Err(invalid("study file has both `template` and `template_id`")),
    };
    let mut study = file.study.unwrap_or(StudySpec { repetitions: 1, ..Default::default() });
    fill_provenance(&mut study.provenance, base_dir(path));
    Ok(LoadedStudy { template, study })
}

/// Reads a bare template spec, or the template of a study file.
pub fn load_template_file(path: &Path) -> Result<NewTemplate, StudyFileError> {
    let bytes = read(path)?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|source| StudyFileError::Parse { path: path.to_path_buf(), source })?;
    let spec_value = match value.get("template") {
        Some(t) => t.clone(),
        None => value,
    };
    let spec: TemplateSpec =
        serde_json::from_value(spec_value).map_err(|source| StudyFileError::Parse { path: path.to_path_buf(), source })?;
    spec.into_new_template(base_dir(path), path)
}

/// Best-effort commit of the repository holding the study file.
fn fill_provenance(p: &mut ProvenanceInfo, dir: &Path) {
    if p.commit_id.is_none() {
        let git = |args: &[&str]| {
            Command::new("git")
                .arg("-C")
                .arg(dir)
                .args(args)
                .output()
                .ok()
                .filter(|o| o.status.success())
                .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        };
        if let Some(commit) = git(&["rev-parse", "HEAD"]).filter(|c| !c.is_empty()) {
            p.commit_id = Some(commit);
            if git(&["status", "--porcelain"]).is_some_and(|s| !s.is_empty()) {
                p.extra.entry("dirty".into()).or_insert_with(|| "true".into());
            }
        }
    }
    p.extra
        .entry("maci_version".into())
        .or_insert_with(|| env!("CARGO_PKG_VERSION").to_string());
}

use std::fs;
use std::io;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use maci_core::model::ParameterDocument;

pub const PARAMS_FILE: &str = "params.json";
pub const SCRIPT_FILE: &str = "experiment";
pub const STDOUT_FILE: &str = "stdout.log";
pub const STDERR_FILE: &str = "stderr.log";

/// Per-attempt scratch directory. Created empty; removed by [`cleanup`]
/// unless workspaces are retained.
///
/// [`cleanup`]: Workspace::cleanup
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn create(base: &Path, name: &str, params: &ParameterDocument, script: &str) -> io::Result<Workspace> {
        let root = base.join(name);
        if root.exists() {
            fs::remove_dir_all(&root)?;
        }
        fs::create_dir_all(&root)?;
        let ws = Workspace { root };
        let mut doc = serde_json::to_vec_pretty(params).map_err(io::Error::other)?;
        doc.push(b'\n');
        fs::write(ws.parameters_file(), doc)?;
        fs::write(ws.script_file(), script)?;
        fs::set_permissions(ws.script_file(), fs::Permissions::from_mode(0o755))?;
        Ok(ws)
    }

    pub fn parameters_file(&self) -> PathBuf {
        self.root.join(PARAMS_FILE)
    }

    pub fn script_file(&self) -> PathBuf {
        self.root.join(SCRIPT_FILE)
    }

    pub fn stdout_file(&self) -> PathBuf {
        self.root.join(STDOUT_FILE)
    }

    pub fn stderr_file(&self) -> PathBuf {
        self.root.join(STDERR_FILE)
    }

    /// Last `n` lines of the script's stderr.
    pub fn stderr_tail(&self, n: usize) -> String {
        let text = fs::read_to_string(self.stderr_file()).unwrap_or_default();
        let lines: Vec<&str> = text.lines().collect();
        lines[lines.len().saturating_sub(n)..].join("\n")
    }

    pub fn cleanup(self) {
        if let Err(e) = fs::remove_dir_all(&self.root) {
            tracing::warn!(root = %self.root.display(), error = %e, "could not remove workspace");
        }
    }
}

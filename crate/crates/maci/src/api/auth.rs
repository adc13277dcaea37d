//! Static bearer tokens.
//!
//! A tokens file lists tokens per scope. `admin` tokens are accepted on
//! every route; `worker` tokens on the worker protocol routes; `analysis`
//! tokens on read-only and query routes. With no tokens configured the
//! service runs open.

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use axum::extract::{Request, State};
use axum::http::header::AUTHORIZATION;
use axum::middleware::Next;
use axum::response::Response;
use serde::Deserialize;

use super::error::ApiError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Admin,
    Worker,
    Analysis,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tokens {
    #[serde(default)]
    pub admin: HashSet<String>,
    #[serde(default)]
    pub worker: HashSet<String>,
    #[serde(default)]
    pub analysis: HashSet<String>,
}

impl Tokens {
    /// Reads `{"admin": [...], "worker": [...], "analysis": [...]}`.
    pub fn load(path: &Path) -> anyhow::Result<Tokens> {
        let bytes = std::fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn is_open(&self) -> bool {
        self.admin.is_empty() && self.worker.is_empty() && self.analysis.is_empty()
    }

    pub fn permits(&self, scope: Scope, token: Option<&str>) -> bool {
        if self.is_open() {
            return true;
        }
        let Some(token) = token else { return false };
        self.admin.contains(token)
            || match scope {
                Scope::Admin => false,
                Scope::Worker => self.worker.contains(token),
                Scope::Analysis => self.analysis.contains(token),
            }
    }
}

fn bearer(req: &Request) -> Option<&str> {
    req.headers()
        .get(AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
}

pub async fn require(
    State((tokens, scope)): State<(Arc<Tokens>, Scope)>,
    req: Request,
    next: Next,
) -> Result<Response, ApiError> {
    if tokens.permits(scope, bearer(&req)) {
        Ok(next.run(req).await)
    } else {
        Err(ApiError::unauthorized())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tokens() -> Tokens {
        Tokens {
            admin: ["root".to_string()].into(),
            worker: ["w".to_string()].into(),
            analysis: ["a".to_string()].into(),
        }
    }

    #[test]
    fn open_when_empty() {
        assert!(Tokens::default().permits(Scope::Admin, None));
    }

    #[test]
    fn scopes() {
        let t = tokens();
        assert!(t.permits(Scope::Worker, Some("w")));
        assert!(t.permits(Scope::Worker, Some("root")));
        assert!(!t.permits(Scope::Worker, Some("a")));
        assert!(!t.permits(Scope::Admin, Some("w")));
        assert!(!t.permits(Scope::Analysis, None));
    }
}

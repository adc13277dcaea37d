//! Extension point for machine provisioning. Only manual worker
//! registration is supported; [`NoopProvisioner`] rejects every request.

use std::collections::BTreeSet;

use crate::model::WorkerId;

#[derive(Debug, thiserror::Error)]
pub enum ProvisionError {
    #[error("provisioner {0:?} cannot start machines; register workers manually")]
    Unsupported(String),
    #[error("provisioning failed: {0}")]
    Backend(String),
}

pub trait Provisioner: Send + Sync {
    fn name(&self) -> &str;

    /// Starts `count` machines whose agents will register with `labels`.
    fn provision(&self, count: usize, labels: &BTreeSet<String>) -> Result<Vec<WorkerId>, ProvisionError>;

    fn release(&self, worker: &WorkerId) -> Result<(), ProvisionError>;
}

#[derive(Debug, Default)]
pub struct NoopProvisioner;

impl Provisioner for NoopProvisioner {
    fn name(&self) -> &str {
        "manual"
    }

    fn provision(&self, _count: usize, _labels: &BTreeSet<String>) -> Result<Vec<WorkerId>, ProvisionError> {
        Err(ProvisionError::Unsupported(self.name().into()))
    }

    fn release(&self, _worker: &WorkerId) -> Result<(), ProvisionError> {
        Err(ProvisionError::Unsupported(self.name().into()))
    }
}

//! Service, worker agent and command-line client for running parameter
//! studies on top of `maci-core`.

pub mod api;
pub mod client;
pub mod executor;
pub mod cli;

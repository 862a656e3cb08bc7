//! Command-line shell, configuration, candidate storage and the HTTP rating
//! service around the `bridgelab` core.

pub mod cli;
pub mod config;
pub mod error;
pub mod hub;
pub mod manifest;
pub mod server;
pub mod store;

pub use config::ProjectConfig;
pub use error::{Result, ServiceError};
pub use hub::{export_prefs, Hub};
pub use store::CandidateStore;

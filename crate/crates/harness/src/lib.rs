//! Run configuration, artifact manifests, scenario runners and the acceptance suite.

pub mod acceptance;
pub mod config;
pub mod manifest;
pub mod run;

//! Pipeline orchestration for the hyrom workbench: run configuration,
//! artifact manifests, offline/online stage drivers, and the end-to-end
//! verification suite.

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod verify;

//! Single-loop detector processing: ingest, malfunction detection,
//! imputation, speed estimation and corridor travel-time prediction, plus a
//! synthetic world that supplies ground truth for every stage.

pub mod config;
pub mod exec;
pub mod ingest;
pub mod impute;
pub mod io;
pub mod model;
pub mod predict;
pub mod quality;
pub mod statkit;
pub mod synth;
pub mod velocity;

pub use exec::Exec;
pub use model::*;

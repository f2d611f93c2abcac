//! Experiment tooling around the simulator core: the TOML experiment config,
//! dataset file formats (CSV schema and the IDX importer), append-only chain
//! files, run-directory output, and artifact verification.

pub mod chainfile;
pub mod config;
pub mod dataset;
pub mod output;
pub mod verify;

//! Config-driven experiments: build datasets, train every model for every
//! trial, attack, measure, and write an artifact directory.
//!
//! Layout of an artifact directory:
//!
//! ```text
//! config.toml            normalized copy of the config
//! units.json             unit index with per-unit status
//! units/<model>/trial<t>/  (or units/<variant>/<model>/trial<t>/)
//!     history.csv, metrics.json, model.{fbt,json},
//!     <attack>.{fbt,json}, <attack>_spectrum.{csv,pgm}, ...
//! analysis/              cross-model plots
//! report.csv             model,trial,metric,value,std
//! manifest.json          SHA-256 of every other file
//! ```

mod config;
pub mod plot;
mod report;
mod run;

pub use config::{
    Analysis, AnalysisSettings, DatasetSpec, ExperimentConfig, FamilyName, ModelEntry, TrainOverride, Variant,
    ARTIFACT_ROOT_ENV,
};
pub use report::{Report, Row, UnitMetrics, AGGREGATE, SINGLE_RUN};
pub use run::{
    attack_labels, dynamics_track, emit_report, predictor_templates, prepare_data, run_experiment, run_experiment_in,
    spectral_l1, spectral_pq, spectral_spread, trial_seed, DynamicsPoint, EmitSummary, PreparedData, RunSummary, UnitIndex,
    UnitStatus,
};

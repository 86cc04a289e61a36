//! Synthetic cohorts, model calibration, pipeline orchestration and the
//! end-to-end benchmark.

mod bench;
mod calibrate;
mod cohort;
mod pipeline;

pub use bench::{run_benchmark, BenchConfig, BenchErrors, BenchReport};
pub use calibrate::{
    calibrate, calibrate_dir, load_labelled_cohort, prepare_training, write_calibration, Calibration,
    CalibrationConfig, ComplicationReport, LabelledCohort,
};
pub use cohort::{
    default_missingness, default_prevalence, generate_cohort, generate_patients, planted_effect, read_labels,
    solve_intercept, write_cohort, Cohort, CohortManifest, CohortSpec, ExclusionCounts, ExclusionRules, Latent,
    ManifestEntry, Patient, PatientGenerator, LABELS_FILE, MANIFEST_FILE, REFERENCE_COHORT_SIZE,
};
pub use pipeline::{
    load_scorer, run_pipeline, ApiSection, BusSection, Conservation, EngineSection, IngestSection, Injector,
    ModelsSection, PipelineConfig, PipelineHandle, Producer, StoreSection, DEFAULT_TOPIC,
};

use crate::features::FeatureError;
use crate::ingest::IngestError;
use crate::models::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("labels: {0}")]
    Labels(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("config {path}: {message}")]
    Config { path: String, message: String },
    #[error("{component}: {message}")]
    Startup { component: String, message: String },
    #[error("pipeline unhealthy: {0}")]
    Unhealthy(String),
}

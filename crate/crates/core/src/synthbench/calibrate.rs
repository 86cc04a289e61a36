//! Fits the eight models and their cutoffs on a labelled cohort directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::cohort::{read_labels, LABELS_FILE};
use super::SynthError;
use crate::domain::{AdmissionEnvelope, ComplicationCode, Timestamp};
use crate::features::{
    encode, fit_schema_statistics, generate_variables, impute, remove_outliers, BoundsPolicy, ModelInput,
    RawFeatureVector, VariableSchema,
};
use crate::ingest::{scan_sources, JoinState, SeenFileLedger, SourceConfig};
use crate::models::{
    auroc, crossvalidate, fit_gam, score, youden_cutoff, CalibrationMeta, CvReport, FitConfig, GamModel, ModelError,
    ThresholdTable,
};

#[derive(Clone, Debug)]
pub struct CalibrationConfig {
    pub folds: usize,
    pub seed: u64,
    pub fit: FitConfig,
    pub bounds: BoundsPolicy,
    pub model_version: String,
    pub dataset: String,
    /// ISO date stamped into the threshold table; today when `None`.
    pub date: Option<String>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            folds: 5,
            seed: 1,
            fit: FitConfig::default(),
            bounds: BoundsPolicy::Configured,
            model_version: "gam-1".into(),
            dataset: "synthetic cohort".into(),
            date: None,
        }
    }
}

/// Envelopes and outcomes, row-aligned.
#[derive(Clone, Debug)]
pub struct LabelledCohort {
    pub envelopes: Vec<AdmissionEnvelope>,
    pub labels: Vec<[bool; 8]>,
}

/// Scans and joins a cohort directory and attaches `labels.csv` outcomes.
/// Admissions without labels are an error.
pub fn load_labelled_cohort(dir: impl AsRef<Path>) -> Result<LabelledCohort, SynthError> {
    let dir = dir.as_ref();
    let config = SourceConfig { dirs: vec![dir.to_path_buf()] };
    let batch = scan_sources(&config, &mut SeenFileLedger::in_memory(), 1, Timestamp::EPOCH)?;
    let mut join = JoinState::new(0);
    let mut envelopes = join.apply(batch).envelopes;
    envelopes.sort_by(|a, b| a.key.cmp(&b.key));
    let labels = read_labels(dir.join(LABELS_FILE))?;
    let labels = envelopes
        .iter()
        .map(|e| {
            labels
                .get(&(e.key.patient_id.clone(), e.key.admission_id.clone()))
                .copied()
                .ok_or_else(|| SynthError::Labels(format!("no labels for admission {}", e.key)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LabelledCohort { envelopes, labels })
}

#[derive(Clone, Debug, Serialize)]
pub struct ComplicationReport {
    pub code: ComplicationCode,
    pub n: usize,
    pub positives: usize,
    pub cv: CvReport,
    /// Youden cutoff of the final model on the full cohort.
    pub cutoff: f64,
    pub j: f64,
    pub auroc: f64,
}

#[derive(Clone, Debug)]
pub struct Calibration {
    pub schema: VariableSchema,
    pub models: Vec<GamModel>,
    pub thresholds: ThresholdTable,
    pub reports: BTreeMap<ComplicationCode, ComplicationReport>,
    pub inputs: Vec<ModelInput>,
}

/// Fitted schema statistics and encoded inputs for every row.
pub fn prepare_training(
    envelopes: &[AdmissionEnvelope],
    template: &VariableSchema,
    bounds: BoundsPolicy,
) -> Result<(VariableSchema, Vec<ModelInput>), SynthError> {
    let raw: Vec<RawFeatureVector> = envelopes.iter().map(|e| generate_variables(e, template)).collect();
    let schema = fit_schema_statistics(template, &raw, bounds)?;
    let inputs = raw
        .iter()
        .map(|r| encode(&impute(&remove_outliers(r, &schema), &schema), &schema).map(|(input, _)| input))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((schema, inputs))
}

fn scores(model: &GamModel, inputs: &[ModelInput], rows: &[usize]) -> Result<Vec<f64>, ModelError> {
    rows.iter().map(|i| score(model, &inputs[*i]).map(|s| s.probability)).collect()
}

/// Cross-validates, refits on everything and picks each cutoff by Youden J.
pub fn calibrate(
    cohort: &LabelledCohort,
    template: &VariableSchema,
    config: &CalibrationConfig,
) -> Result<Calibration, SynthError> {
    let (schema, inputs) = prepare_training(&cohort.envelopes, template, config.bounds)?;
    let all: Vec<usize> = (0..inputs.len()).collect();
    let mut models = Vec::new();
    let mut reports = BTreeMap::new();
    let mut cutoffs = BTreeMap::new();
    for code in ComplicationCode::ALL {
        let labels: Vec<bool> = cohort.labels.iter().map(|r| r[code.index()]).collect();
        let cv = crossvalidate(&labels, config.folds, config.seed, |train, test| {
            let rows: Vec<&ModelInput> = train.iter().map(|i| &inputs[*i]).collect();
            let y: Vec<bool> = train.iter().map(|i| labels[*i]).collect();
            let model = fit_gam(code, &config.model_version, &schema, &rows, &y, &config.fit)?;
            Ok((scores(&model, &inputs, train)?, scores(&model, &inputs, test)?))
        })?;
        let rows: Vec<&ModelInput> = inputs.iter().collect();
        let model = fit_gam(code, &config.model_version, &schema, &rows, &labels, &config.fit)?;
        let fitted = scores(&model, &inputs, &all)?;
        let (cutoff, j) = youden_cutoff(&fitted, &labels)?;
        log::info!("{code}: cv auroc {:.4} ± {:.4}, cutoff {cutoff:.4}", cv.mean_auroc, cv.sd_auroc);
        cutoffs.insert(code, cutoff.clamp(1e-6, 1.0 - 1e-6));
        reports.insert(
            code,
            ComplicationReport {
                code,
                n: labels.len(),
                positives: labels.iter().filter(|l| **l).count(),
                auroc: auroc(&fitted, &labels)?,
                cv,
                cutoff,
                j,
            },
        );
        models.push(model);
    }
    let date = config.date.clone().unwrap_or_else(|| chrono::Utc::now().format("%Y-%m-%d").to_string());
    let mut extra = BTreeMap::new();
    extra.insert("patients".into(), serde_json::json!(inputs.len()));
    extra.insert("folds".into(), serde_json::json!(config.folds));
    extra.insert("model_version".into(), serde_json::json!(config.model_version));
    let thresholds =
        ThresholdTable { cutoffs, calibration: Some(CalibrationMeta { dataset: config.dataset.clone(), date, extra }) };
    thresholds.validate()?;
    Ok(Calibration { schema, models, thresholds, reports, inputs })
}

pub fn calibrate_dir(
    dir: impl AsRef<Path>,
    template: &VariableSchema,
    config: &CalibrationConfig,
) -> Result<Calibration, SynthError> {
    calibrate(&load_labelled_cohort(dir)?, template, config)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), SynthError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|source| SynthError::Io { path: path.display().to_string(), source })
}

/// Writes `schema.json`, `thresholds.json`, `report.json` and
/// `models/<code>.json` under `out_dir`.
pub fn write_calibration(calibration: &Calibration, out_dir: impl AsRef<Path>) -> Result<(), SynthError> {
    let out = out_dir.as_ref();
    let models_dir = out.join("models");
    fs::create_dir_all(&models_dir)
        .map_err(|source| SynthError::Io { path: models_dir.display().to_string(), source })?;
    write_json(&out.join("schema.json"), &calibration.schema)?;
    write_json(&out.join("thresholds.json"), &calibration.thresholds)?;
    let report: BTreeMap<_, _> = calibration
        .reports
        .iter()
        .map(|(code, r)| {
            let folds: Vec<_> = r
                .cv
                .folds
                .iter()
                .map(|f| serde_json::json!({"fold": f.fold, "n_test": f.n_test, "auroc": f.auroc, "j": f.j, "cutoff": f.cutoff}))
                .collect();
            let summary = serde_json::json!({
                "n": r.n,
                "positives": r.positives,
                "cutoff": r.cutoff,
                "j": r.j,
                "auroc_in_sample": r.auroc,
                "cv_mean_auroc": r.cv.mean_auroc,
                "cv_sd_auroc": r.cv.sd_auroc,
                "cv_pooled_auroc": r.cv.pooled_auroc,
                "cv_pooled_cutoff": r.cv.pooled_cutoff,
                "folds": folds,
            });
            (*code, summary)
        })
        .collect();
    write_json(&out.join("report.json"), &report)?;
    for model in &calibration.models {
        write_json(&models_dir.join(format!("{}.json", model.complication.as_str().to_lowercase())), model)?;
    }
    Ok(())
}

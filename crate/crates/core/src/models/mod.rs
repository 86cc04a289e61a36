//! Additive risk models: piecewise-linear / table terms on a logistic link,
//! per-complication cutoffs, Youden calibration and cross-validation.
//!
//! `score = logistic(intercept + Σ_j f_j(x_j))`. Continuous terms interpolate
//! linearly between knots and extrapolate flat; nominal terms look up a value
//! per dictionary index.

mod fit;
mod metrics;

pub use fit::{crossvalidate, fit_gam, stratified_folds, CvReport, FitConfig, FoldMetrics};
pub use metrics::{auroc, auroc_bruteforce, youden_at, youden_cutoff};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{ComplicationCode, Contributor, RiskClass};
use crate::features::{ModelInput, VariableKind, VariableSchema};

pub const DEFAULT_TOP_CONTRIBUTORS: usize = 5;

/// The eight published cutoffs, bundled as `thresholds_published.json`.
/// Demo models in `ComplicationCode::ALL` order, for the demo schema.
pub const DEMO_MODELS_JSON: [&str; 8] = [
    include_str!("../../assets/models/aki.json"),
    include_str!("../../assets/models/icu.json"),
    include_str!("../../assets/models/mv.json"),
    include_str!("../../assets/models/wnd.json"),
    include_str!("../../assets/models/cv.json"),
    include_str!("../../assets/models/neu.json"),
    include_str!("../../assets/models/sep.json"),
    include_str!("../../assets/models/vte.json"),
];
/// Youden cutoffs fitted alongside the demo models.
pub const DEMO_THRESHOLDS_JSON: &str = include_str!("../../assets/thresholds_demo.json");

pub const PUBLISHED_THRESHOLDS_JSON: &str = include_str!("../../assets/thresholds_published.json");

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("knots not increasing for {0}")]
    KnotsNotIncreasing(String),
    #[error("{0}: a continuous term needs at least 2 knots")]
    TooFewKnots(String),
    #[error("missing term for variable {0}")]
    MissingTerm(String),
    #[error("term for unknown variable {0}")]
    ExtraTerm(String),
    #[error("duplicate term for variable {0}")]
    DuplicateTerm(String),
    #[error("{variable}: term kind does not match schema")]
    KindMismatch { variable: String },
    #[error("{variable}: table has {got} entries, dictionary has {expected}")]
    TableSize { variable: String, expected: usize, got: usize },
    #[error("{0}: non-finite coefficient")]
    NonFinite(String),
    #[error("schema version mismatch: model built for {model}, active schema is {schema}")]
    VersionMismatch { model: String, schema: String },
    #[error("input has {got} values, model has {expected} terms")]
    LengthMismatch { expected: usize, got: usize },
    #[error("nominal index {index} outside table for {variable}")]
    IndexOutOfRange { variable: String, index: f64 },
    #[error("missing model for {0}")]
    MissingModel(ComplicationCode),
    #[error("missing cutoff for {0}")]
    MissingCutoff(ComplicationCode),
    #[error("cutoff for {0} outside (0,1)")]
    CutoffRange(ComplicationCode),
    #[error("degenerate labels")]
    DegenerateLabels,
    #[error("need at least {folds} positive and {folds} negative examples")]
    TooFewExamples { folds: usize },
    #[error("scores and labels differ in length")]
    LengthDisagree,
    #[error("{path}: {message}")]
    Load { path: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TermShape {
    /// `(x, f)` pairs with strictly increasing x.
    Continuous { knots: Vec<[f64; 2]> },
    /// One value per dictionary index, MISSING included.
    Nominal { table: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub variable: String,
    #[serde(flatten)]
    pub shape: TermShape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GamModel {
    pub complication: ComplicationCode,
    pub model_version: String,
    pub schema_version: String,
    pub intercept: f64,
    pub terms: Vec<Term>,
    /// Reserved ids of terms shared across complications; unused by scoring.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shared_terms: Vec<String>,
}

impl GamModel {
    /// Checks the model against a schema and reorders terms to schema order.
    pub fn aligned(mut self, schema: &VariableSchema) -> Result<Self, ModelError> {
        if self.schema_version != schema.schema_version {
            return Err(ModelError::VersionMismatch {
                model: self.schema_version.clone(),
                schema: schema.schema_version.clone(),
            });
        }
        if !self.intercept.is_finite() {
            return Err(ModelError::NonFinite("intercept".into()));
        }
        let mut by_name: BTreeMap<String, Term> = BTreeMap::new();
        for term in self.terms.drain(..) {
            if schema.index_of(&term.variable).is_none() {
                return Err(ModelError::ExtraTerm(term.variable));
            }
            if by_name.contains_key(&term.variable) {
                return Err(ModelError::DuplicateTerm(term.variable));
            }
            by_name.insert(term.variable.clone(), term);
        }
        for spec in &schema.variables {
            let term = by_name.remove(&spec.name).ok_or_else(|| ModelError::MissingTerm(spec.name.clone()))?;
            validate_term(&term, spec.kind, spec.categories.len())?;
            self.terms.push(term);
        }
        Ok(self)
    }

    pub fn from_json(text: &str, schema: &VariableSchema) -> Result<Self, ModelError> {
        let model: GamModel =
            serde_json::from_str(text).map_err(|e| ModelError::Load { path: "<inline>".into(), message: e.to_string() })?;
        model.aligned(schema)
    }
}

fn validate_term(term: &Term, kind: VariableKind, dictionary: usize) -> Result<(), ModelError> {
    let name = || term.variable.clone();
    match (&term.shape, kind) {
        (TermShape::Continuous { knots }, VariableKind::Continuous) => {
            if knots.len() < 2 {
                return Err(ModelError::TooFewKnots(name()));
            }
            if knots.iter().flatten().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite(name()));
            }
            if knots.windows(2).any(|w| w[0][0] >= w[1][0]) {
                return Err(ModelError::KnotsNotIncreasing(name()));
            }
        }
        (TermShape::Nominal { table }, VariableKind::Nominal) => {
            if table.len() != dictionary {
                return Err(ModelError::TableSize { variable: name(), expected: dictionary, got: table.len() });
            }
            if table.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite(name()));
            }
        }
        _ => return Err(ModelError::KindMismatch { variable: name() }),
    }
    Ok(())
}

/// Reads a model file and validates it against the active schema.
pub fn load_model(path: impl AsRef<Path>, schema: &VariableSchema) -> Result<GamModel, ModelError> {
    let path = path.as_ref();
    let load_err = |message: String| ModelError::Load { path: path.display().to_string(), message };
    let text = std::fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
    let model: GamModel = serde_json::from_str(&text).map_err(|e| load_err(e.to_string()))?;
    model.aligned(schema)
}

pub fn evaluate_term(term: &Term, x: f64) -> Result<f64, ModelError> {
    match &term.shape {
        TermShape::Continuous { knots } => Ok(interpolate(knots, x)),
        TermShape::Nominal { table } => {
            if x < 0.0 || x.fract() != 0.0 || x as usize >= table.len() {
                return Err(ModelError::IndexOutOfRange { variable: term.variable.clone(), index: x });
            }
            Ok(table[x as usize])
        }
    }
}

fn interpolate(knots: &[[f64; 2]], x: f64) -> f64 {
    let first = knots[0];
    let last = knots[knots.len() - 1];
    if x <= first[0] {
        return first[1];
    }
    if x >= last[0] {
        return last[1];
    }
    // first knot with knot.x > x; 1 <= i < len
    let i = knots.partition_point(|k| k[0] <= x);
    let ([x0, f0], [x1, f1]) = (knots[i - 1], knots[i]);
    f0 + (f1 - f0) * (x - x0) / (x1 - x0)
}

pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoredResult {
    pub probability: f64,
    pub linear_predictor: f64,
    pub contributions: Vec<f64>,
}

pub fn score(model: &GamModel, input: &ModelInput) -> Result<ScoredResult, ModelError> {
    if input.len() != model.terms.len() {
        return Err(ModelError::LengthMismatch { expected: model.terms.len(), got: input.len() });
    }
    let contributions =
        model.terms.iter().zip(&input.0).map(|(t, x)| evaluate_term(t, *x)).collect::<Result<Vec<_>, _>>()?;
    let linear_predictor = model.intercept + contributions.iter().sum::<f64>();
    Ok(ScoredResult { probability: logistic(linear_predictor), linear_predictor, contributions })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMeta {
    pub dataset: String,
    pub date: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// Cutoff per complication. On disk a flat JSON map of code → cutoff, with
/// an optional `calibration` object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    #[serde(flatten)]
    pub cutoffs: BTreeMap<ComplicationCode, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationMeta>,
}

impl ThresholdTable {
    pub fn validate(&self) -> Result<(), ModelError> {
        for code in ComplicationCode::ALL {
            let c = *self.cutoffs.get(&code).ok_or(ModelError::MissingCutoff(code))?;
            if !(c > 0.0 && c < 1.0) {
                return Err(ModelError::CutoffRange(code));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let table: ThresholdTable =
            serde_json::from_str(text).map_err(|e| ModelError::Load { path: "<inline>".into(), message: e.to_string() })?;
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModelError::Load { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_json(&text).map_err(|e| match e {
            ModelError::Load { message, .. } => ModelError::Load { path: path.display().to_string(), message },
            other => other,
        })
    }

    /// The published clinical cutoffs.
    pub fn published() -> Self {
        Self::from_json(PUBLISHED_THRESHOLDS_JSON).expect("bundled thresholds are valid")
    }

    /// Cutoffs fitted together with the demo models.
    pub fn demo() -> Self {
        Self::from_json(DEMO_THRESHOLDS_JSON).expect("bundled thresholds are valid")
    }

    pub fn cutoff(&self, code: ComplicationCode) -> f64 {
        self.cutoffs[&code]
    }

    /// High iff `probability >= cutoff`.
    pub fn classify(&self, code: ComplicationCode, probability: f64) -> RiskClass {
        if probability >= self.cutoff(code) {
            RiskClass::High
        } else {
            RiskClass::Low
        }
    }
}

/// One validated model per complication, all built for the same schema.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSet {
    models: BTreeMap<ComplicationCode, GamModel>,
}

impl ModelSet {
    pub fn new(models: impl IntoIterator<Item = GamModel>) -> Result<Self, ModelError> {
        let models: BTreeMap<_, _> = models.into_iter().map(|m| (m.complication, m)).collect();
        for code in ComplicationCode::ALL {
            if !models.contains_key(&code) {
                return Err(ModelError::MissingModel(code));
            }
        }
        Ok(ModelSet { models })
    }

    /// Loads `<dir>/<code>.json` (lowercase code) for every complication.
    pub fn load_dir(dir: impl AsRef<Path>, schema: &VariableSchema) -> Result<Self, ModelError> {
        let dir = dir.as_ref();
        let mut models = Vec::new();
        for code in ComplicationCode::ALL {
            let path = dir.join(format!("{}.json", code.as_str().to_lowercase()));
            if !path.exists() {
                return Err(ModelError::MissingModel(code));
            }
            models.push(load_model(&path, schema)?);
        }
        Self::new(models)
    }

    /// The bundled demo models, fitted on a synthetic cohort.
    pub fn demo(schema: &VariableSchema) -> Result<Self, ModelError> {
        Self::new(DEMO_MODELS_JSON.iter().map(|text| GamModel::from_json(text, schema)).collect::<Result<Vec<_>, _>>()?)
    }

    pub fn get(&self, code: ComplicationCode) -> &GamModel {
        &self.models[&code]
    }

    pub fn iter(&self) -> impl Iterator<Item = &GamModel> {
        self.models.values()
    }

    /// Joined model versions, e.g. `AKI:v1,ICU:v1,...`, or the single
    /// version when all agree.
    pub fn version(&self) -> String {
        let first = &self.models[&ComplicationCode::AKI].model_version;
        if self.models.values().all(|m| &m.model_version == first) {
            return first.clone();
        }
        self.models.iter().map(|(c, m)| format!("{c}:{}", m.model_version)).collect::<Vec<_>>().join(",")
    }
}

/// Scores, classes and contributors for all eight complications.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileFragment {
    pub scores: BTreeMap<ComplicationCode, f64>,
    pub classes: BTreeMap<ComplicationCode, RiskClass>,
    pub contributors: BTreeMap<ComplicationCode, Vec<Contributor>>,
}

/// `top_n` terms by |contribution|, ties broken by schema order.
pub fn top_contributors(schema: &VariableSchema, contributions: &[f64], top_n: usize) -> Vec<Contributor> {
    let mut order: Vec<usize> = (0..contributions.len()).collect();
    order.sort_by(|&a, &b| contributions[b].abs().total_cmp(&contributions[a].abs()).then(a.cmp(&b)));
    order
        .into_iter()
        .take(top_n)
        .map(|j| Contributor { feature: schema.variables[j].name.clone(), contribution: contributions[j] })
        .collect()
}

pub fn score_all(
    models: &ModelSet,
    schema: &VariableSchema,
    input: &ModelInput,
    thresholds: &ThresholdTable,
    top_n: usize,
) -> Result<ProfileFragment, ModelError> {
    let mut out = ProfileFragment { scores: BTreeMap::new(), classes: BTreeMap::new(), contributors: BTreeMap::new() };
    for code in ComplicationCode::ALL {
        let model = models.models.get(&code).ok_or(ModelError::MissingModel(code))?;
        let cutoff = *thresholds.cutoffs.get(&code).ok_or(ModelError::MissingCutoff(code))?;
        let r = score(model, input)?;
        let class = if r.probability >= cutoff { RiskClass::High } else { RiskClass::Low };
        out.scores.insert(code, r.probability);
        out.classes.insert(code, class);
        out.contributors.insert(code, top_contributors(schema, &r.contributions, top_n));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{ExtractionRule, VariableSpec, MISSING};

    fn schema() -> VariableSchema {
        VariableSchema {
            schema_version: "s1".into(),
            variables: vec![
                VariableSpec {
                    name: "age".into(),
                    kind: VariableKind::Continuous,
                    rule: ExtractionRule::Admission { field: "age_years".into() },
                    bounds: Some([0.0, 120.0]),
                    categories: vec![],
                    training_mean: Some(50.0),
                },
                VariableSpec {
                    name: "sex".into(),
                    kind: VariableKind::Nominal,
                    rule: ExtractionRule::Admission { field: "sex".into() },
                    bounds: None,
                    categories: vec!["F".into(), "M".into(), MISSING.into()],
                    training_mean: None,
                },
            ],
        }
    }

    fn cont(knots: &[[f64; 2]]) -> Term {
        Term { variable: "age".into(), shape: TermShape::Continuous { knots: knots.to_vec() } }
    }

    fn nominal(table: &[f64]) -> Term {
        Term { variable: "sex".into(), shape: TermShape::Nominal { table: table.to_vec() } }
    }

    fn model(code: ComplicationCode, intercept: f64) -> GamModel {
        GamModel {
            complication: code,
            model_version: "m1".into(),
            schema_version: "s1".into(),
            intercept,
            terms: vec![nominal(&[0.0, 0.0, 0.0]), cont(&[[0.0, 0.0], [1.0, 0.0]])],
            shared_terms: vec![],
        }
    }

    #[test]
    fn load_examples() {
        let m = model(ComplicationCode::AKI, 0.0).aligned(&schema()).unwrap();
        assert_eq!(m.terms[0].variable, "age");
        let mut bad = model(ComplicationCode::AKI, 0.0);
        bad.terms[1] = cont(&[[1.0, 0.0], [0.5, 1.0]]);
        assert!(bad.aligned(&schema()).unwrap_err().to_string().contains("knots not increasing"));
        let mut bad = model(ComplicationCode::AKI, 0.0);
        bad.terms.remove(1);
        assert!(bad.aligned(&schema()).unwrap_err().to_string().contains("age"));
        let mut bad = model(ComplicationCode::AKI, 0.0);
        bad.schema_version = "other".into();
        assert!(matches!(bad.aligned(&schema()), Err(ModelError::VersionMismatch { .. })));
        let mut bad = model(ComplicationCode::AKI, 0.0);
        bad.terms[0] = nominal(&[0.0, 0.0]);
        assert!(matches!(bad.aligned(&schema()), Err(ModelError::TableSize { .. })));
    }

    #[test]
    fn model_file_round_trip() {
        let m = model(ComplicationCode::VTE, -1.0).aligned(&schema()).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        assert!(text.contains(r#""kind":"continuous""#));
        assert_eq!(GamModel::from_json(&text, &schema()).unwrap(), m);
    }

    #[test]
    fn term_examples() {
        let t = cont(&[[0.0, 0.0], [10.0, 1.0]]);
        assert_eq!(evaluate_term(&t, 5.0).unwrap(), 0.5);
        assert_eq!(evaluate_term(&t, -3.0).unwrap(), 0.0);
        assert_eq!(evaluate_term(&t, 30.0).unwrap(), 1.0);
        let t = nominal(&[0.2, -0.1, 0.0]);
        assert_eq!(evaluate_term(&t, 1.0).unwrap(), -0.1);
        assert!(evaluate_term(&t, 3.0).is_err());
    }

    #[test]
    fn interpolation_hits_knots() {
        let knots = [[0.0, 1.0], [1.0, 3.0], [4.0, -2.0], [5.0, 0.0]];
        for k in knots {
            assert_eq!(interpolate(&knots, k[0]), k[1]);
        }
        assert_eq!(interpolate(&knots, 2.5), 0.5);
    }

    #[test]
    fn score_examples() {
        let m = model(ComplicationCode::AKI, 0.0).aligned(&schema()).unwrap();
        let input = ModelInput(vec![42.0, 1.0]);
        assert_eq!(score(&m, &input).unwrap().probability, 0.5);
        let m = model(ComplicationCode::AKI, (0.35f64 / 0.65).ln()).aligned(&schema()).unwrap();
        assert!((score(&m, &input).unwrap().probability - 0.35).abs() < 1e-15);
        assert!(matches!(score(&m, &ModelInput(vec![1.0])), Err(ModelError::LengthMismatch { .. })));
    }

    #[test]
    fn demo_assets_load() {
        let schema = VariableSchema::demo();
        let set = ModelSet::demo(&schema).unwrap();
        assert_eq!(set.iter().count(), 8);
        assert!(set.iter().all(|m| m.schema_version == schema.schema_version));
        ThresholdTable::demo().validate().unwrap();
    }

    #[test]
    fn published_thresholds() {
        let t = ThresholdTable::published();
        let expected = [0.35, 0.35, 0.13, 0.10, 0.07, 0.07, 0.06, 0.03];
        for (code, v) in ComplicationCode::ALL.into_iter().zip(expected) {
            assert_eq!(t.cutoff(code), v);
            assert_eq!(t.classify(code, v), RiskClass::High);
        }
        assert_eq!(t.classify(ComplicationCode::VTE, 0.029), RiskClass::Low);
    }

    #[test]
    fn threshold_table_requires_all_codes() {
        assert!(matches!(ThresholdTable::from_json(r#"{"AKI":0.3}"#), Err(ModelError::MissingCutoff(_))));
        let mut text = PUBLISHED_THRESHOLDS_JSON.replace("0.35", "1.5");
        assert!(matches!(ThresholdTable::from_json(&text), Err(ModelError::CutoffRange(_))));
        text = PUBLISHED_THRESHOLDS_JSON.trim_end().trim_end_matches('}').to_string()
            + r#","calibration":{"dataset":"demo","date":"2026-01-01"}}"#;
        let t = ThresholdTable::from_json(&text).unwrap();
        assert_eq!(t.calibration.unwrap().dataset, "demo");
    }

    #[test]
    fn all_zero_models_are_high_everywhere() {
        let set = ModelSet::new(ComplicationCode::ALL.map(|c| model(c, 0.0).aligned(&schema()).unwrap())).unwrap();
        let frag = score_all(&set, &schema(), &ModelInput(vec![30.0, 0.0]), &ThresholdTable::published(), 5).unwrap();
        assert!(frag.scores.values().all(|p| *p == 0.5));
        assert!(frag.classes.values().all(|c| *c == RiskClass::High));
    }

    #[test]
    fn boundary_rule_in_score_all() {
        // AKI exactly at 0.35 is High, VTE at 0.029 is Low
        let mut models: Vec<GamModel> = ComplicationCode::ALL.map(|c| model(c, 0.0).aligned(&schema()).unwrap()).into();
        let mut t = ThresholdTable::published();
        let p = score(&models[0], &ModelInput(vec![0.0, 0.0])).unwrap().probability;
        t.cutoffs.insert(ComplicationCode::AKI, p);
        models[7].intercept = (0.029f64 / 0.971).ln();
        let set = ModelSet::new(models).unwrap();
        let frag = score_all(&set, &schema(), &ModelInput(vec![0.0, 0.0]), &t, 5).unwrap();
        assert_eq!(frag.classes[&ComplicationCode::AKI], RiskClass::High);
        assert_eq!(frag.classes[&ComplicationCode::VTE], RiskClass::Low);
    }

    #[test]
    fn missing_model_is_named() {
        let models: Vec<GamModel> = ComplicationCode::ALL
            .into_iter()
            .filter(|c| *c != ComplicationCode::SEP)
            .map(|c| model(c, 0.0))
            .collect();
        assert_eq!(ModelSet::new(models).unwrap_err().to_string(), "missing model for SEP");
    }

    #[test]
    fn contributor_ties_follow_schema_order() {
        let s = schema();
        let top = top_contributors(&s, &[-0.5, 0.5], 5);
        assert_eq!(top[0].feature, "age");
        let top = top_contributors(&s, &[0.1, -0.7], 1);
        assert_eq!(top.len(), 1);
        assert_eq!(top[0].feature, "sex");
    }
}

//! Data engineering: variable generation from an envelope, outlier removal,
//! mean/"MISSING" imputation and dictionary encoding into a numeric vector.
//!
//! Every operation is a pure function of `(input, schema)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{AdmissionEnvelope, Payload, Scalar};

/// Reserved nominal category for absent values.
pub const MISSING: &str = "MISSING";

/// Bundled 20-variable demo schema.
pub const DEMO_SCHEMA_JSON: &str = include_str!("../assets/schema_demo.json");

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("unimputed input")]
    UnimputedInput,
    #[error("input has {got} values, schema has {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("no observed values for: {}", .0.join(", "))]
    NoObservedValues(Vec<String>),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("schema file {path}: {message}")]
    Load { path: String, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariableKind {
    Continuous,
    Nominal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabAggregate {
    Min,
    Max,
    Last,
    Mean,
    Count,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ExtractionRule {
    /// A field of the admission record.
    Admission { field: String },
    /// The first `len` characters of an admission text field (e.g. zip3).
    AdmissionPrefix { field: String, len: usize },
    /// Aggregate over lab rows with `lab_name == name`. `last` orders by `taken_at`.
    Lab { name: String, aggregate: LabAggregate },
    /// "Y"/"N": whether `flag` is among the semicolon-joined `comorbidity_flags`.
    ComorbidityFlag { flag: String },
    MedicationCount,
    ProviderCount,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub kind: VariableKind,
    pub rule: ExtractionRule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training_mean: Option<f64>,
}

impl VariableSpec {
    pub fn category_index(&self, label: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == label)
    }

    pub fn missing_index(&self) -> usize {
        self.category_index(MISSING).expect("validated nominal spec has MISSING")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableSchema {
    pub schema_version: String,
    pub variables: Vec<VariableSpec>,
}

impl VariableSchema {
    pub fn len(&self) -> usize {
        self.variables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variables.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    /// Full check for a schema used in scoring.
    pub fn validate(&self) -> Result<(), FeatureError> {
        self.validate_shape()?;
        for v in &self.variables {
            if v.kind == VariableKind::Continuous {
                match v.training_mean {
                    Some(m) if m.is_finite() => {}
                    _ => return Err(FeatureError::InvalidSchema(format!("{}: training mean missing", v.name))),
                }
                if v.bounds.is_none() {
                    return Err(FeatureError::InvalidSchema(format!("{}: bounds missing", v.name)));
                }
            }
        }
        Ok(())
    }

    /// Checks that hold before statistics are fit.
    pub fn validate_shape(&self) -> Result<(), FeatureError> {
        let mut names = BTreeSet::new();
        for v in &self.variables {
            if !names.insert(v.name.as_str()) {
                return Err(FeatureError::InvalidSchema(format!("duplicate variable {}", v.name)));
            }
            match v.kind {
                VariableKind::Continuous => {
                    if let Some([lo, hi]) = v.bounds {
                        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                            return Err(FeatureError::InvalidSchema(format!("{}: bad bounds", v.name)));
                        }
                    }
                }
                VariableKind::Nominal => {
                    if v.category_index(MISSING).is_none() {
                        return Err(FeatureError::InvalidSchema(format!("{}: dictionary lacks {MISSING}", v.name)));
                    }
                    let unique: BTreeSet<_> = v.categories.iter().collect();
                    if unique.len() != v.categories.len() {
                        return Err(FeatureError::InvalidSchema(format!("{}: duplicate category", v.name)));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, FeatureError> {
        serde_json::from_str(text).map_err(|e| FeatureError::InvalidSchema(e.to_string()))
    }

    /// Loads and fully validates a schema file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, FeatureError> {
        let path = path.as_ref();
        let load_err = |message: String| FeatureError::Load { path: path.display().to_string(), message };
        let text = std::fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
        let schema = Self::from_json(&text).map_err(|e| load_err(e.to_string()))?;
        schema.validate().map_err(|e| load_err(e.to_string()))?;
        Ok(schema)
    }

    pub fn demo() -> Self {
        let schema = Self::from_json(DEMO_SCHEMA_JSON).expect("bundled schema parses");
        schema.validate_shape().expect("bundled schema is well formed");
        schema
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RawValue {
    Number(f64),
    Category(String),
    Missing,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub observed: bool,
    pub outlier_removed: bool,
    pub imputed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawFeature {
    pub value: RawValue,
    pub flags: Provenance,
}

impl RawFeature {
    pub fn observed(value: RawValue) -> Self {
        RawFeature { value, flags: Provenance { observed: true, ..Default::default() } }
    }

    pub fn missing() -> Self {
        RawFeature { value: RawValue::Missing, flags: Provenance::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum FeatureWarning {
    UnknownField { variable: String, field: String },
    Unparsable { variable: String },
    UnknownLabel { variable: String, label: String },
}

impl fmt::Display for FeatureWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureWarning::UnknownField { variable, field } => write!(f, "{variable}: unknown field {field}"),
            FeatureWarning::Unparsable { variable } => write!(f, "{variable}: unparsable value"),
            FeatureWarning::UnknownLabel { variable, label } => write!(f, "{variable}: unknown label {label}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RawFeatureVector {
    pub features: Vec<RawFeature>,
    pub warnings: Vec<FeatureWarning>,
}

impl RawFeatureVector {
    pub fn has_missing(&self) -> bool {
        self.features.iter().any(|f| f.value == RawValue::Missing)
    }
}

/// Fixed-order numeric vector: continuous values as numbers, nominal values
/// as dictionary indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInput(pub Vec<f64>);

impl ModelInput {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn scalar_text(s: &Scalar) -> Option<String> {
    match s {
        Scalar::Null => None,
        Scalar::Text(t) if t.is_empty() => None,
        Scalar::Text(t) => Some(t.clone()),
        Scalar::Number(v) => Some(if v.fract() == 0.0 && v.abs() < 1e15 { format!("{}", *v as i64) } else { v.to_string() }),
    }
}

fn field_value(
    spec: &VariableSpec,
    payload: &Payload,
    field: &str,
    warnings: &mut Vec<FeatureWarning>,
) -> Option<Scalar> {
    match payload.get(field) {
        Some(v) => Some(v.clone()),
        None => {
            warnings.push(FeatureWarning::UnknownField { variable: spec.name.clone(), field: field.to_string() });
            None
        }
    }
}

fn as_kind(spec: &VariableSpec, value: Option<Scalar>, warnings: &mut Vec<FeatureWarning>) -> RawFeature {
    let Some(value) = value else { return RawFeature::missing() };
    if value.is_null() {
        return RawFeature::missing();
    }
    match spec.kind {
        VariableKind::Continuous => match value.as_f64() {
            Some(v) if v.is_finite() => RawFeature::observed(RawValue::Number(v)),
            _ => {
                warnings.push(FeatureWarning::Unparsable { variable: spec.name.clone() });
                RawFeature::missing()
            }
        },
        VariableKind::Nominal => match scalar_text(&value) {
            Some(t) => RawFeature::observed(RawValue::Category(t)),
            None => RawFeature::missing(),
        },
    }
}

fn lab_aggregate(env: &AdmissionEnvelope, name: &str, aggregate: LabAggregate) -> Option<f64> {
    let rows: Vec<(&str, f64)> = env
        .labs
        .iter()
        .filter(|l| l.get("lab_name").and_then(Scalar::as_text) == Some(name))
        .filter_map(|l| {
            let v = l.get("lab_value")?.as_f64()?;
            let t = l.get("taken_at").and_then(Scalar::as_text).unwrap_or("");
            v.is_finite().then_some((t, v))
        })
        .collect();
    if aggregate == LabAggregate::Count {
        return Some(rows.len() as f64);
    }
    if rows.is_empty() {
        return None;
    }
    let values = rows.iter().map(|r| r.1);
    Some(match aggregate {
        LabAggregate::Min => values.fold(f64::INFINITY, f64::min),
        LabAggregate::Max => values.fold(f64::NEG_INFINITY, f64::max),
        LabAggregate::Mean => stable_mean(values).expect("non-empty"),
        // latest taken_at; equal timestamps resolve to the larger value
        LabAggregate::Last => {
            rows.iter().max_by(|a, b| a.0.cmp(b.0).then(a.1.total_cmp(&b.1))).expect("non-empty").1
        }
        LabAggregate::Count => unreachable!(),
    })
}

/// Extracts every schema variable from an envelope.
pub fn generate_variables(env: &AdmissionEnvelope, schema: &VariableSchema) -> RawFeatureVector {
    let mut warnings = Vec::new();
    let features = schema
        .variables
        .iter()
        .map(|spec| match &spec.rule {
            ExtractionRule::Admission { field } => {
                let v = field_value(spec, &env.admission, field, &mut warnings);
                as_kind(spec, v, &mut warnings)
            }
            ExtractionRule::AdmissionPrefix { field, len } => {
                let v = field_value(spec, &env.admission, field, &mut warnings)
                    .and_then(|s| scalar_text(&s))
                    .map(|t| Scalar::Text(t.chars().take(*len).collect()));
                as_kind(spec, v, &mut warnings)
            }
            ExtractionRule::Lab { name, aggregate } => {
                as_kind(spec, lab_aggregate(env, name, *aggregate).map(Scalar::Number), &mut warnings)
            }
            ExtractionRule::ComorbidityFlag { flag } => {
                let v = field_value(spec, &env.admission, "comorbidity_flags", &mut warnings).map(|s| {
                    let text = s.as_text().unwrap_or("");
                    let present = text.split(';').any(|f| f.trim().eq_ignore_ascii_case(flag));
                    Scalar::Text(if present { "Y" } else { "N" }.to_string())
                });
                as_kind(spec, v, &mut warnings)
            }
            ExtractionRule::MedicationCount => RawFeature::observed(RawValue::Number(env.medications.len() as f64)),
            ExtractionRule::ProviderCount => RawFeature::observed(RawValue::Number(env.providers.len() as f64)),
        })
        .collect();
    RawFeatureVector { features, warnings }
}

/// Continuous values outside the closed interval `[lo, hi]` become missing.
pub fn remove_outliers(raw: &RawFeatureVector, schema: &VariableSchema) -> RawFeatureVector {
    let mut out = raw.clone();
    for (f, spec) in out.features.iter_mut().zip(&schema.variables) {
        if let (RawValue::Number(v), Some([lo, hi])) = (&f.value, spec.bounds) {
            if spec.kind == VariableKind::Continuous && !(lo <= *v && *v <= hi) {
                f.value = RawValue::Missing;
                f.flags.outlier_removed = true;
            }
        }
    }
    out
}

/// Continuous missing → training mean, nominal missing → "MISSING".
pub fn impute(raw: &RawFeatureVector, schema: &VariableSchema) -> RawFeatureVector {
    let mut out = raw.clone();
    for (f, spec) in out.features.iter_mut().zip(&schema.variables) {
        if f.value != RawValue::Missing {
            continue;
        }
        f.value = match spec.kind {
            VariableKind::Continuous => RawValue::Number(spec.training_mean.expect("validated schema has means")),
            VariableKind::Nominal => RawValue::Category(MISSING.to_string()),
        };
        f.flags.imputed = true;
    }
    out
}

/// Maps a complete vector to numbers. Unknown labels fall back to the
/// MISSING index with a warning.
pub fn encode(
    raw: &RawFeatureVector,
    schema: &VariableSchema,
) -> Result<(ModelInput, Vec<FeatureWarning>), FeatureError> {
    if raw.features.len() != schema.len() {
        return Err(FeatureError::LengthMismatch { expected: schema.len(), got: raw.features.len() });
    }
    let mut warnings = Vec::new();
    let mut values = Vec::with_capacity(schema.len());
    for (f, spec) in raw.features.iter().zip(&schema.variables) {
        let x = match (&f.value, spec.kind) {
            (RawValue::Missing, _) => return Err(FeatureError::UnimputedInput),
            (RawValue::Number(v), VariableKind::Continuous) => *v,
            (RawValue::Category(label), VariableKind::Nominal) => match spec.category_index(label) {
                Some(i) => i as f64,
                None => {
                    warnings.push(FeatureWarning::UnknownLabel { variable: spec.name.clone(), label: label.clone() });
                    spec.missing_index() as f64
                }
            },
            (RawValue::Number(v), VariableKind::Nominal) => {
                let label = scalar_text(&Scalar::Number(*v)).unwrap_or_default();
                spec.category_index(&label).unwrap_or_else(|| {
                    warnings.push(FeatureWarning::UnknownLabel { variable: spec.name.clone(), label });
                    spec.missing_index()
                }) as f64
            }
            (RawValue::Category(_), VariableKind::Continuous) => {
                warnings.push(FeatureWarning::Unparsable { variable: spec.name.clone() });
                spec.training_mean.ok_or(FeatureError::UnimputedInput)?
            }
        };
        values.push(x);
    }
    Ok((ModelInput(values), warnings))
}

/// Result of the full generate → clean → impute → encode chain.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub raw: RawFeatureVector,
    pub input: ModelInput,
    pub warnings: Vec<FeatureWarning>,
}

pub fn prepare(env: &AdmissionEnvelope, schema: &VariableSchema) -> Result<Prepared, FeatureError> {
    let generated = generate_variables(env, schema);
    let cleaned = impute(&remove_outliers(&generated, schema), schema);
    let (input, mut warnings) = encode(&cleaned, schema)?;
    let mut all = cleaned.warnings.clone();
    all.append(&mut warnings);
    Ok(Prepared { raw: cleaned, input, warnings: all })
}

/// Neumaier-compensated mean; `None` for an empty input.
pub fn stable_mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut comp, mut n) = (0.0f64, 0.0f64, 0usize);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
        n += 1;
    }
    (n > 0).then(|| (sum + comp) / n as f64)
}

/// Linear-interpolation percentile (`q` in [0, 100]) of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BoundsPolicy {
    /// Keep the bounds already in the template.
    Configured,
    /// Replace bounds by the `(lo, hi)` percentiles of the observed values.
    Percentile(f64, f64),
}

pub const DEFAULT_PERCENTILE_CLIP: BoundsPolicy = BoundsPolicy::Percentile(0.5, 99.5);

/// Fills training means (and optionally bounds) from generated training rows.
/// Nominal dictionaries left empty in the template are derived from the data.
pub fn fit_schema_statistics(
    template: &VariableSchema,
    rows: &[RawFeatureVector],
    policy: BoundsPolicy,
) -> Result<VariableSchema, FeatureError> {
    let mut schema = template.clone();
    let mut empty = Vec::new();
    for (j, spec) in schema.variables.iter_mut().enumerate() {
        match spec.kind {
            VariableKind::Continuous => {
                let mut observed: Vec<f64> = rows
                    .iter()
                    .filter_map(|r| match r.features.get(j).map(|f| &f.value) {
                        Some(RawValue::Number(v)) => Some(*v),
                        _ => None,
                    })
                    .collect();
                if observed.is_empty() {
                    empty.push(spec.name.clone());
                    continue;
                }
                observed.sort_by(f64::total_cmp);
                let [lo, hi] = match (policy, spec.bounds) {
                    (BoundsPolicy::Percentile(a, b), _) => [percentile(&observed, a), percentile(&observed, b)],
                    (BoundsPolicy::Configured, Some(b)) => b,
                    // no configured range: keep everything, record the observed span
                    (BoundsPolicy::Configured, None) => [observed[0], observed[observed.len() - 1]],
                };
                let kept = observed.iter().copied().filter(|v| lo <= *v && *v <= hi);
                spec.training_mean = stable_mean(kept);
                if spec.training_mean.is_none() {
                    empty.push(spec.name.clone());
                }
                if spec.bounds.is_none() || matches!(policy, BoundsPolicy::Percentile(..)) {
                    spec.bounds = Some([lo, hi]);
                }
            }
            VariableKind::Nominal => {
                if spec.categories.iter().all(|c| c == MISSING) {
                    let labels: BTreeSet<String> = rows
                        .iter()
                        .filter_map(|r| match r.features.get(j).map(|f| &f.value) {
                            Some(RawValue::Category(c)) if c != MISSING => Some(c.clone()),
                            _ => None,
                        })
                        .collect();
                    spec.categories = labels.into_iter().chain([MISSING.to_string()]).collect();
                }
            }
        }
    }
    if !empty.is_empty() {
        return Err(FeatureError::NoObservedValues(empty));
    }
    schema.validate()?;
    Ok(schema)
}

/// Per-variable warning counts, for metrics.
pub fn count_warnings<'a>(warnings: impl IntoIterator<Item = &'a FeatureWarning>) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    for w in warnings {
        let key = match w {
            FeatureWarning::UnknownField { .. } => "unknown_field",
            FeatureWarning::Unparsable { .. } => "unparsable",
            FeatureWarning::UnknownLabel { .. } => "unknown_label",
        };
        *out.entry(key.to_string()).or_default() += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{AdmissionKey, Timestamp};
    use proptest::prelude::*;

    fn spec_c(name: &str, rule: ExtractionRule, bounds: [f64; 2], mean: f64) -> VariableSpec {
        VariableSpec {
            name: name.into(),
            kind: VariableKind::Continuous,
            rule,
            bounds: Some(bounds),
            categories: vec![],
            training_mean: Some(mean),
        }
    }

    fn spec_n(name: &str, field: &str, cats: &[&str]) -> VariableSpec {
        VariableSpec {
            name: name.into(),
            kind: VariableKind::Nominal,
            rule: ExtractionRule::Admission { field: field.into() },
            bounds: None,
            categories: cats.iter().map(|c| c.to_string()).collect(),
            training_mean: None,
        }
    }

    fn lab_rule(agg: LabAggregate) -> ExtractionRule {
        ExtractionRule::Lab { name: "creatinine".into(), aggregate: agg }
    }

    fn small_schema() -> VariableSchema {
        VariableSchema {
            schema_version: "t1".into(),
            variables: vec![
                spec_c("age", ExtractionRule::Admission { field: "age_years".into() }, [18.0, 110.0], 57.2),
                spec_n("sex", "sex", &["F", "M", MISSING]),
                spec_c("creatinine_max", lab_rule(LabAggregate::Max), [0.1, 20.0], 1.0),
                spec_c("creatinine_last", lab_rule(LabAggregate::Last), [0.1, 20.0], 1.0),
            ],
        }
    }

    fn lab(v: f64, t: &str) -> Payload {
        let mut p = Payload::new();
        p.insert("lab_name".into(), "creatinine".into());
        p.insert("lab_value".into(), v.into());
        p.insert("taken_at".into(), t.into());
        p
    }

    fn envelope(age: Scalar, sex: Scalar, labs: Vec<Payload>) -> AdmissionEnvelope {
        let mut admission = Payload::new();
        admission.insert("age_years".into(), age);
        admission.insert("sex".into(), sex);
        AdmissionEnvelope {
            key: AdmissionKey::new("P", "A", Timestamp(0)),
            admission,
            providers: vec![Payload::new()],
            labs,
            medications: vec![],
            produced_at: Timestamp(0),
        }
    }

    #[test]
    fn extraction_examples() {
        let s = small_schema();
        let env = envelope(
            54.0.into(),
            "F".into(),
            vec![lab(1.1, "2005-01-01T01:00:00.000Z"), lab(2.3, "2005-01-01T03:00:00.000Z"), lab(1.9, "2005-01-01T02:00:00.000Z")],
        );
        let raw = generate_variables(&env, &s);
        assert_eq!(raw.features[0], RawFeature::observed(RawValue::Number(54.0)));
        assert_eq!(raw.features[2].value, RawValue::Number(2.3));
        assert_eq!(raw.features[3].value, RawValue::Number(2.3));
        let raw = generate_variables(&envelope(54.0.into(), "F".into(), vec![]), &s);
        assert_eq!(raw.features[3], RawFeature::missing());
        assert!(raw.warnings.is_empty());
    }

    #[test]
    fn unknown_field_is_warning_not_crash() {
        let mut s = small_schema();
        s.variables[0].rule = ExtractionRule::Admission { field: "height".into() };
        let raw = generate_variables(&envelope(54.0.into(), "F".into(), vec![]), &s);
        assert_eq!(raw.features[0], RawFeature::missing());
        assert_eq!(raw.warnings.len(), 1);
    }

    #[test]
    fn outlier_examples() {
        let s = small_schema();
        let raw = |v: f64| RawFeatureVector {
            features: vec![
                RawFeature::missing(),
                RawFeature::missing(),
                RawFeature::observed(RawValue::Number(v)),
                RawFeature::missing(),
            ],
            warnings: vec![],
        };
        assert_eq!(remove_outliers(&raw(0.9), &s), raw(0.9));
        let out = remove_outliers(&raw(250.0), &s);
        assert_eq!(out.features[2].value, RawValue::Missing);
        assert!(out.features[2].flags.outlier_removed);
        assert_eq!(remove_outliers(&raw(20.0), &s), raw(20.0));
        assert_eq!(remove_outliers(&raw(0.1), &s), raw(0.1));
    }

    #[test]
    fn imputation_examples() {
        let s = small_schema();
        let raw = generate_variables(&envelope(Scalar::Null, Scalar::Null, vec![]), &s);
        let imp = impute(&raw, &s);
        assert_eq!(imp.features[0].value, RawValue::Number(57.2));
        assert!(imp.features[0].flags.imputed);
        assert_eq!(imp.features[1].value, RawValue::Category(MISSING.into()));
        let full = envelope(60.0.into(), "M".into(), vec![lab(1.0, "2005-01-01T00:00:00.000Z")]);
        let raw = generate_variables(&full, &s);
        let imp = impute(&raw, &s);
        assert_eq!(serde_json::to_vec(&imp).unwrap(), serde_json::to_vec(&raw).unwrap());
    }

    #[test]
    fn encoding_examples() {
        let s = small_schema();
        let mut raw = impute(&generate_variables(&envelope(40.0.into(), "F".into(), vec![]), &s), &s);
        let (input, warnings) = encode(&raw, &s).unwrap();
        assert_eq!(input.0[1], 0.0);
        assert!(warnings.is_empty());
        raw.features[1].value = RawValue::Category("OTHER".into());
        let (input, warnings) = encode(&raw, &s).unwrap();
        assert_eq!(input.0[1], 2.0);
        assert_eq!(warnings.len(), 1);
        raw.features[0].value = RawValue::Missing;
        assert_eq!(encode(&raw, &s).unwrap_err().to_string(), "unimputed input");
    }

    fn rows(values: &[Option<f64>]) -> Vec<RawFeatureVector> {
        values
            .iter()
            .map(|v| RawFeatureVector {
                features: vec![v.map_or(RawFeature::missing(), |x| RawFeature::observed(RawValue::Number(x)))],
                warnings: vec![],
            })
            .collect()
    }

    fn one_var() -> VariableSchema {
        let mut s = small_schema();
        s.variables.truncate(1);
        s.variables[0].training_mean = None;
        s.variables[0].bounds = Some([0.0, 10.0]);
        s
    }

    #[test]
    fn fit_examples() {
        let fit = fit_schema_statistics(&one_var(), &rows(&[Some(1.0), Some(2.0), Some(3.0)]), BoundsPolicy::Configured)
            .unwrap();
        assert_eq!(fit.variables[0].training_mean, Some(2.0));
        let fit =
            fit_schema_statistics(&one_var(), &rows(&[Some(1.0), Some(2.0), None, Some(3.0)]), BoundsPolicy::Configured)
                .unwrap();
        assert_eq!(fit.variables[0].training_mean, Some(2.0));
        let err = fit_schema_statistics(&one_var(), &rows(&[None, None]), BoundsPolicy::Configured).unwrap_err();
        assert!(err.to_string().contains("age"));
    }

    #[test]
    fn percentile_clip() {
        let values: Vec<Option<f64>> = (0..=1000).map(|i| Some(i as f64)).collect();
        let fit = fit_schema_statistics(&one_var(), &rows(&values), DEFAULT_PERCENTILE_CLIP).unwrap();
        assert_eq!(fit.variables[0].bounds, Some([5.0, 995.0]));
        assert_eq!(fit.variables[0].training_mean, Some(500.0));
    }

    #[test]
    fn demo_schema_shape() {
        let s = VariableSchema::demo();
        assert_eq!(s.len(), 20);
        s.validate().unwrap();
    }

    #[test]
    fn schema_validation() {
        let mut s = small_schema();
        s.variables[1].categories.retain(|c| c != MISSING);
        assert!(s.validate().is_err());
        let mut s = small_schema();
        s.variables.push(s.variables[0].clone());
        assert!(s.validate().is_err());
    }

    proptest! {
        #[test]
        fn pipeline_total_and_idempotent(age in prop::option::of(-10.0f64..200.0),
                                         sex in prop::option::of("[FMX]"),
                                         labs in prop::collection::vec(-5.0f64..300.0, 0..5)) {
            let s = small_schema();
            let env = envelope(
                age.map_or(Scalar::Null, Scalar::Number),
                sex.map_or(Scalar::Null, Scalar::Text),
                labs.iter().enumerate().map(|(i, v)| lab(*v, &format!("2005-01-01T0{i}:00:00.000Z"))).collect(),
            );
            let p = prepare(&env, &s).unwrap();
            prop_assert_eq!(p.input.len(), s.len());
            prop_assert!(!p.raw.has_missing());
            let raw = generate_variables(&env, &s);
            let once = remove_outliers(&raw, &s);
            prop_assert_eq!(remove_outliers(&once, &s), once.clone());
            let imp = impute(&once, &s);
            prop_assert_eq!(impute(&imp, &s), imp.clone());
            for (before, after) in once.features.iter().zip(&imp.features) {
                prop_assert_eq!(after.flags.imputed, before.value == RawValue::Missing);
            }
            for (j, spec) in s.variables.iter().enumerate() {
                if spec.kind == VariableKind::Nominal {
                    prop_assert!((p.input.0[j] as usize) < spec.categories.len());
                }
            }
        }

        #[test]
        fn mean_imputation_preserves_mean(values in prop::collection::vec(prop::option::of(-1e3f64..1e3), 1..200)) {
            prop_assume!(values.iter().any(Option::is_some));
            let mut s = one_var();
            s.variables[0].bounds = Some([-1e3, 1e3]);
            let fit = fit_schema_statistics(&s, &rows(&values), BoundsPolicy::Configured).unwrap();
            let observed = stable_mean(values.iter().flatten().copied()).unwrap();
            let imputed: Vec<f64> = rows(&values).iter().map(|r| match &impute(r, &fit).features[0].value {
                RawValue::Number(v) => *v,
                _ => unreachable!(),
            }).collect();
            let after = stable_mean(imputed).unwrap();
            prop_assert!((after - observed).abs() <= 1e-12 * observed.abs().max(1.0));
        }
    }
}

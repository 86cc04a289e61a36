//! Seeded synthetic cohort with a planted additive risk model.
//!
//! Distributions are simple parametric stand-ins. Outcomes are drawn from
//! `logistic(alpha_c + s * sum(beta * z))` over standardized latent values, with
//! `alpha_c` solved so the expected prevalence matches the spec.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::SynthError;
use crate::domain::{AdmissionKey, ComplicationCode, Payload, Scalar, SourceKind, SourceRecord, Timestamp};
use crate::ingest::{ADMISSION_COLUMNS, LAB_COLUMNS, MEDICATION_COLUMNS, PROVIDER_COLUMNS};
use crate::models::logistic;

/// 2000-01-01T00:00:00Z
const COHORT_START_MS: i64 = 946_684_800_000;
const COHORT_SPAN_DAYS: f64 = 11.0 * 365.0;
const HOUR_MS: f64 = 3_600_000.0;

pub const ZIP3: [&str; 20] = [
    "320", "321", "322", "323", "326", "327", "328", "329", "330", "331", "334", "336", "337", "338", "339", "342",
    "344", "346", "347", "349",
];
const RACES: [(&str, f64); 5] = [("white", 0.65), ("black", 0.18), ("hispanic", 0.10), ("asian", 0.03), ("other", 0.04)];
const ADMISSION_TYPES: [(&str, f64); 3] = [("elective", 0.55), ("emergency", 0.30), ("urgent", 0.15)];
const SURGERIES: [(&str, f64); 8] = [
    ("CARD", 0.12),
    ("GEN", 0.25),
    ("GYN", 0.08),
    ("NEURO", 0.08),
    ("ORTH", 0.20),
    ("THOR", 0.07),
    ("URO", 0.10),
    ("VASC", 0.10),
];
const COMORBIDITIES: [(&str, f64); 7] =
    [("CHF", 0.10), ("DM", 0.20), ("HTN", 0.35), ("CKD", 0.12), ("COPD", 0.10), ("CAD", 0.15), ("CANCER", 0.12)];
const ESRD_RATE: f64 = 0.02;
const ROLES: [&str; 4] = ["surgeon", "anesthesiologist", "nurse", "resident"];
const DRUGS: [(&str, &str, &str); 8] = [
    ("cefazolin", "2 g", "iv"),
    ("heparin", "5000 units", "sc"),
    ("metoprolol", "25 mg", "po"),
    ("insulin", "4 units", "sc"),
    ("furosemide", "40 mg", "iv"),
    ("vancomycin", "1 g", "iv"),
    ("ondansetron", "4 mg", "iv"),
    ("acetaminophen", "1 g", "po"),
];
/// Per-draw chance that a lab value is recorded as a gross outlier.
const OUTLIER_RATE: f64 = 0.003;

/// Filters applied while generating; rejected candidates are replaced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExclusionRules {
    pub enabled: bool,
    pub min_age_years: f64,
    /// Stays must be strictly longer than this.
    pub min_stay_hours: f64,
    pub exclude_esrd: bool,
    pub require_creatinine: bool,
}

impl Default for ExclusionRules {
    fn default() -> Self {
        ExclusionRules {
            enabled: true,
            min_age_years: 18.0,
            min_stay_hours: 24.0,
            exclude_esrd: true,
            require_creatinine: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub n_patients: usize,
    pub seed: u64,
    pub prevalence: BTreeMap<ComplicationCode, f64>,
    /// Chance a variable is absent: `race`, `zip`, or a lab name.
    pub missingness: BTreeMap<String, f64>,
    pub exclusions: ExclusionRules,
    /// Multiplier on every planted effect.
    pub signal_strength: f64,
    pub files_per_kind: usize,
}

pub fn default_prevalence() -> BTreeMap<ComplicationCode, f64> {
    use ComplicationCode::*;
    [(AKI, 0.15), (ICU, 0.20), (MV, 0.06), (WND, 0.08), (CV, 0.05), (NEU, 0.04), (SEP, 0.04), (VTE, 0.03)].into()
}

pub fn default_missingness() -> BTreeMap<String, f64> {
    [
        ("race", 0.05),
        ("zip", 0.05),
        ("creatinine", 0.03),
        ("hemoglobin", 0.08),
        ("wbc", 0.10),
        ("albumin", 0.20),
        ("glucose", 0.10),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Patient count of the reference cohort.
pub const REFERENCE_COHORT_SIZE: usize = 50_314;

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            n_patients: 1_000,
            seed: 1,
            prevalence: default_prevalence(),
            missingness: default_missingness(),
            exclusions: ExclusionRules::default(),
            signal_strength: 1.6,
            files_per_kind: 1,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        for code in ComplicationCode::ALL {
            match self.prevalence.get(&code) {
                Some(p) if *p > 0.0 && *p < 1.0 => {}
                Some(p) => return Err(SynthError::Spec(format!("prevalence of {code} must be in (0,1), got {p}"))),
                None => return Err(SynthError::Spec(format!("prevalence of {code} missing"))),
            }
        }
        for (name, rate) in &self.missingness {
            if !(0.0..1.0).contains(rate) {
                return Err(SynthError::Spec(format!("missingness of {name} must be in [0,1), got {rate}")));
            }
        }
        if !self.signal_strength.is_finite() || self.signal_strength < 0.0 {
            return Err(SynthError::Spec("signal strength must be finite and non-negative".into()));
        }
        Ok(())
    }

    fn missing_rate(&self, name: &str) -> f64 {
        self.missingness.get(name).copied().unwrap_or(0.0)
    }
}

/// Unobserved per-patient state the outcomes are drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    pub age: f64,
    pub stay_hours: f64,
    pub emergency: bool,
    pub surgery: &'static str,
    pub flags: Vec<&'static str>,
    pub esrd: bool,
    pub creatinine: f64,
    pub hemoglobin: f64,
    pub wbc: f64,
    pub albumin: f64,
    pub glucose: f64,
    pub medications: usize,
    pub creatinine_observed: bool,
}

impl Latent {
    fn has(&self, flag: &str) -> bool {
        self.flags.contains(&flag)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patient {
    pub key: AdmissionKey,
    pub latent: Latent,
    /// Admission first, then providers, labs, medications.
    pub records: Vec<SourceRecord>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionCounts {
    pub under_age: u64,
    pub short_stay: u64,
    pub esrd: u64,
    pub missing_creatinine: u64,
}

impl ExclusionCounts {
    pub fn total(&self) -> u64 {
        self.under_age + self.short_stay + self.esrd + self.missing_creatinine
    }
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, table: &[(T, f64)]) -> T {
    let total: f64 = table.iter().map(|t| t.1).sum();
    let mut u = rng.random::<f64>() * total;
    for (v, w) in table {
        if u < *w {
            return *v;
        }
        u -= w;
    }
    table.last().expect("non-empty table").0
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// Number formatting used both in memory and in the CSV files, so both
/// paths yield identical payloads.
fn fmt2(v: f64) -> String {
    format!("{:.2}", round2(v))
}

/// Endless, deterministic stream of candidate admissions.
pub struct PatientGenerator {
    spec: CohortSpec,
    rng: ChaCha8Rng,
    id_prefix: String,
    next_id: u64,
    excluded: ExclusionCounts,
}

impl PatientGenerator {
    pub fn new(spec: CohortSpec) -> Result<Self, SynthError> {
        spec.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(spec.seed);
        Ok(PatientGenerator { spec, rng, id_prefix: String::new(), next_id: 1, excluded: ExclusionCounts::default() })
    }

    /// Prefix for patient and admission ids, to keep separate streams apart.
    pub fn with_id_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.id_prefix = prefix.into();
        self
    }

    pub fn excluded(&self) -> ExclusionCounts {
        self.excluded
    }

    /// Next admission passing the exclusion rules.
    pub fn next_patient(&mut self) -> Patient {
        loop {
            let latent = self.latent();
            let rules = &self.spec.exclusions;
            let c = &mut self.excluded;
            let slot = if !rules.enabled {
                None
            } else if latent.age < rules.min_age_years {
                Some(&mut c.under_age)
            } else if latent.stay_hours <= rules.min_stay_hours {
                Some(&mut c.short_stay)
            } else if rules.exclude_esrd && latent.esrd {
                Some(&mut c.esrd)
            } else if rules.require_creatinine && !latent.creatinine_observed {
                Some(&mut c.missing_creatinine)
            } else {
                None
            };
            if let Some(count) = slot {
                *count += 1;
                continue;
            }
            let id = self.next_id;
            self.next_id += 1;
            return self.materialize(id, latent);
        }
    }

    fn latent(&mut self) -> Latent {
        let rng = &mut self.rng;
        let age = Normal::new(58.0f64, 17.0).expect("valid normal").sample(rng).round().clamp(1.0, 99.0);
        let a = (age - 58.0) / 17.0;
        let stay_hours = LogNormal::new(96f64.ln(), 0.8).expect("valid lognormal").sample(rng);
        let emergency = pick(rng, &ADMISSION_TYPES) == "emergency";
        let surgery = pick(rng, &SURGERIES);
        let age_factor = (1.0 + 0.5 * a).clamp(0.3, 2.5);
        let flags: Vec<&'static str> =
            COMORBIDITIES.iter().filter(|(_, p)| rng.random_bool((p * age_factor).min(0.9))).map(|(f, _)| *f).collect();
        let esrd = rng.random_bool(ESRD_RATE);
        let has = |f: &str| flags.contains(&f);
        let std_normal = Normal::new(0.0f64, 1.0).expect("valid normal");
        let creatinine = (0.9 + 0.9 * f64::from(has("CKD")) + 3.5 * f64::from(esrd))
            * (0.25 * std_normal.sample(rng) + 0.1 * a).exp();
        let hemoglobin = 12.8 - 0.8 * f64::from(has("CKD")) - 0.5 * f64::from(has("CANCER")) + 1.6 * std_normal.sample(rng);
        let wbc = 8.0 * (0.3 * std_normal.sample(rng) + 0.25 * f64::from(emergency)).exp();
        let albumin =
            3.9 - 0.3 * f64::from(emergency) - 0.3 * f64::from(has("CANCER")) - 0.15 * a + 0.5 * std_normal.sample(rng);
        let glucose = 110.0 + 50.0 * f64::from(has("DM")) + 30.0 * std_normal.sample(rng);
        let lambda = 2.0 + 2.0 * f64::from(has("CHF")) + 1.5 * f64::from(has("DM")) + stay_hours / 96.0;
        let medications = Poisson::new(lambda).expect("positive rate").sample(rng) as usize;
        let creatinine_observed = !rng.random_bool(self.spec.missing_rate("creatinine"));
        Latent {
            age,
            stay_hours,
            emergency,
            surgery,
            flags,
            esrd,
            creatinine: creatinine.max(0.2),
            hemoglobin: hemoglobin.clamp(4.0, 20.0),
            wbc: wbc.clamp(0.5, 60.0),
            albumin: albumin.clamp(1.0, 6.0),
            glucose: glucose.clamp(40.0, 600.0),
            medications,
            creatinine_observed,
        }
    }

    fn materialize(&mut self, id: u64, latent: Latent) -> Patient {
        let spec = &self.spec;
        let rng = &mut self.rng;
        let pid = format!("{}P{id:07}", self.id_prefix);
        let aid = format!("{}A{id:07}", self.id_prefix);
        let start = COHORT_START_MS + (rng.random::<f64>() * COHORT_SPAN_DAYS * 24.0) as i64 * HOUR_MS as i64;
        let admitted_at = Timestamp(start);
        let key = AdmissionKey::new(pid, aid, admitted_at);
        let record = |kind, payload| SourceRecord { kind, key: key.clone(), payload, observed_at: admitted_at };
        let within_stay = |rng: &mut ChaCha8Rng| {
            Scalar::Text(admitted_at.plus_millis((rng.random::<f64>() * latent.stay_hours * HOUR_MS) as i64).to_iso())
        };

        let mut records = Vec::new();
        let mut adm = Payload::new();
        adm.insert("age_years".into(), Scalar::Number(latent.age));
        adm.insert("sex".into(), Scalar::from(if rng.random_bool(0.52) { "F" } else { "M" }));
        let race = pick(rng, &RACES);
        adm.insert("race".into(), if rng.random_bool(spec.missing_rate("race")) { Scalar::Null } else { race.into() });
        let zip = format!("{}{:02}", ZIP3[rng.random_range(0..ZIP3.len())], rng.random_range(0..100));
        adm.insert(
            "zip".into(),
            if rng.random_bool(spec.missing_rate("zip")) { Scalar::Null } else { Scalar::Text(zip) },
        );
        let kind = if latent.emergency {
            "emergency"
        } else if rng.random_bool(0.15 / 0.70) {
            "urgent"
        } else {
            "elective"
        };
        adm.insert("admission_type".into(), kind.into());
        adm.insert("surgery_code".into(), latent.surgery.into());
        let mut flags = latent.flags.clone();
        if latent.esrd {
            flags.push("ESRD");
        }
        adm.insert("comorbidity_flags".into(), Scalar::Text(flags.join(";")));
        adm.insert("stay_hours".into(), Scalar::Text(format!("{:.1}", latent.stay_hours)));
        records.push(record(SourceKind::Admission, adm));

        for _ in 0..rng.random_range(1..=3usize) {
            let mut p = Payload::new();
            p.insert("provider_id".into(), Scalar::Text(format!("D{:04}", rng.random_range(0..2_000))));
            p.insert("provider_role".into(), ROLES[rng.random_range(0..ROLES.len())].into());
            records.push(record(SourceKind::Provider, p));
        }

        let labs: [(&str, f64, &str, f64); 5] = [
            ("creatinine", latent.creatinine, "mg/dL", 0.10),
            ("hemoglobin", latent.hemoglobin, "g/dL", 0.04),
            ("wbc", latent.wbc, "10^3/uL", 0.10),
            ("albumin", latent.albumin, "g/dL", 0.04),
            ("glucose", latent.glucose, "mg/dL", 0.10),
        ];
        for (name, value, units, jitter) in labs {
            let present =
                if name == "creatinine" { latent.creatinine_observed } else { !rng.random_bool(spec.missing_rate(name)) };
            if !present {
                continue;
            }
            for draw in 0..rng.random_range(1..=3usize) {
                // the first draw carries the latent value, so the aggregate sees it
                let v = if draw == 0 { value } else { value * (jitter * (rng.random::<f64>() - 0.5)).exp() };
                let v = if rng.random_bool(OUTLIER_RATE) { v * 1_000.0 } else { v };
                let mut l = Payload::new();
                l.insert("lab_name".into(), name.into());
                l.insert("lab_value".into(), Scalar::Number(round2(v)));
                l.insert("lab_units".into(), units.into());
                l.insert("taken_at".into(), within_stay(rng));
                records.push(record(SourceKind::Lab, l));
            }
        }

        for _ in 0..latent.medications {
            let (drug, dose, route) = DRUGS[rng.random_range(0..DRUGS.len())];
            let mut m = Payload::new();
            m.insert("drug_name".into(), drug.into());
            m.insert("dose".into(), dose.into());
            m.insert("route".into(), route.into());
            m.insert("given_at".into(), within_stay(rng));
            records.push(record(SourceKind::Medication, m));
        }
        Patient { key, latent, records }
    }
}

/// Planted linear predictor of one complication, before the intercept.
pub fn planted_effect(code: ComplicationCode, l: &Latent) -> f64 {
    use ComplicationCode::*;
    let a = (l.age - 58.0) / 17.0;
    let cr = (l.creatinine / 1.0).ln() / 0.45;
    let alb = (3.9 - l.albumin) / 0.55;
    let hb = (12.8 - l.hemoglobin) / 1.7;
    let wbc = (l.wbc / 8.5).ln() / 0.35;
    let glu = (l.glucose - 130.0) / 45.0;
    let meds = (l.medications as f64 - 4.0) / 2.5;
    let f = |flag: &str| f64::from(l.has(flag));
    let em = f64::from(l.emergency);
    let s = |codes: &[&str]| f64::from(codes.contains(&l.surgery));
    match code {
        AKI => 1.1 * cr + 0.4 * a + 0.8 * f("CKD") + 0.3 * f("DM") + 0.4 * f("CHF") + 0.4 * em + 0.6 * s(&["CARD", "VASC"]) + 0.3 * alb + 0.2 * glu,
        ICU => 0.5 * a + 0.3 * a * a + 0.9 * em + 1.0 * s(&["CARD", "THOR", "NEURO"]) + 0.5 * f("CHF") + 0.4 * f("COPD") + 0.4 * hb + 0.4 * wbc + 0.4 * alb,
        MV => 1.0 * f("COPD") + 1.1 * s(&["THOR", "CARD"]) + 0.7 * em + 0.4 * a + 0.5 * alb + 0.4 * wbc,
        WND => 0.8 * f("DM") + 0.6 * glu + 0.6 * s(&["GEN", "ORTH"]) + 0.6 * alb + 0.2 * a + 0.5 * f("CANCER") + 0.3 * meds,
        CV => 1.0 * f("CAD") + 0.8 * f("CHF") + 0.7 * a + 0.9 * s(&["CARD", "VASC"]) + 0.4 * f("HTN") + 0.4 * cr,
        NEU => 0.9 * a + 0.4 * a * a + 1.4 * s(&["NEURO"]) + 0.6 * s(&["CARD"]) + 0.4 * f("HTN") + 0.4 * em,
        SEP => 1.0 * wbc + 0.8 * em + 0.5 * s(&["GEN"]) + 0.6 * alb + 0.4 * f("DM") + 0.5 * f("CANCER"),
        VTE => 1.5 * s(&["ORTH"]) + 1.2 * f("CANCER") + 0.8 * a + 0.5 * meds + 0.9 * s(&["NEURO"]) + 0.4 * em + 0.3 * hb,
    }
}

/// Intercept giving mean `logistic(alpha + effect) == prevalence` (bisection).
pub fn solve_intercept(effects: &[f64], prevalence: f64) -> f64 {
    let mean = |alpha: f64| effects.iter().map(|e| logistic(alpha + e)).sum::<f64>() / effects.len().max(1) as f64;
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mean(mid) < prevalence {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub patients: Vec<Patient>,
    /// Row-aligned with `patients`, indexed by `ComplicationCode::index`.
    pub labels: Vec<[bool; 8]>,
    pub intercepts: BTreeMap<ComplicationCode, f64>,
    pub excluded: ExclusionCounts,
}

/// Generates `n_patients` accepted admissions and their outcomes.
pub fn generate_patients(spec: &CohortSpec) -> Result<Cohort, SynthError> {
    let mut generator = PatientGenerator::new(spec.clone())?;
    let patients: Vec<Patient> = (0..spec.n_patients).map(|_| generator.next_patient()).collect();
    let mut outcome_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x0005_eed0_u64.rotate_left(32));
    let mut labels = vec![[false; 8]; patients.len()];
    let mut intercepts = BTreeMap::new();
    for code in ComplicationCode::ALL {
        let effects: Vec<f64> = patients.iter().map(|p| spec.signal_strength * planted_effect(code, &p.latent)).collect();
        let alpha = solve_intercept(&effects, spec.prevalence[&code]);
        intercepts.insert(code, alpha);
        for (row, e) in labels.iter_mut().zip(&effects) {
            row[code.index()] = outcome_rng.random::<f64>() < logistic(alpha + e);
        }
    }
    Ok(Cohort { patients, labels, intercepts, excluded: generator.excluded() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    /// Source kind prefix, or `labels`.
    pub kind: String,
    pub rows: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub seed: u64,
    pub patients: usize,
    pub files: Vec<ManifestEntry>,
    pub excluded: ExclusionCounts,
    pub observed_prevalence: BTreeMap<ComplicationCode, f64>,
}

pub const LABELS_FILE: &str = "labels.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

fn columns(kind: SourceKind) -> Vec<&'static str> {
    let cols = match kind {
        SourceKind::Admission => ADMISSION_COLUMNS,
        SourceKind::Provider => PROVIDER_COLUMNS,
        SourceKind::Lab => LAB_COLUMNS,
        SourceKind::Medication => MEDICATION_COLUMNS,
    };
    let mut names: Vec<&str> = cols.iter().map(|c| c.name).collect();
    if kind == SourceKind::Admission {
        names.push("stay_hours");
    }
    names
}

fn cell(record: &SourceRecord, column: &str) -> String {
    match column {
        "patient_id" => record.key.patient_id.clone(),
        "admission_id" => record.key.admission_id.clone(),
        "admitted_at" => record.key.admitted_at.to_iso(),
        _ => match record.payload.get(column) {
            Some(Scalar::Text(t)) => t.clone(),
            Some(Scalar::Number(v)) if column == "age_years" => format!("{v:.0}"),
            Some(Scalar::Number(v)) => fmt2(*v),
            Some(Scalar::Null) | None => String::new(),
        },
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> SynthError + '_ {
    move |e| SynthError::Io { path: path.display().to_string(), source: e }
}

/// Writes the four source kinds, the labels file and a manifest.
pub fn write_cohort(cohort: &Cohort, spec: &CohortSpec, out_dir: &Path) -> Result<CohortManifest, SynthError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let files_per_kind = spec.files_per_kind.max(1);
    let mut entries = Vec::new();
    for kind in SourceKind::ALL {
        let header = columns(kind);
        for part in 0..files_per_kind {
            let name = if files_per_kind == 1 {
                format!("{}_cohort.csv", kind.file_prefix())
            } else {
                format!("{}_cohort_{part:03}.csv", kind.file_prefix())
            };
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(&header).map_err(SynthError::Csv)?;
            let mut rows = 0;
            for patient in cohort.patients.iter().skip(part).step_by(files_per_kind) {
                for r in patient.records.iter().filter(|r| r.kind == kind) {
                    w.write_record(header.iter().map(|c| cell(r, c))).map_err(SynthError::Csv)?;
                    rows += 1;
                }
            }
            let bytes = w.into_inner().map_err(|e| SynthError::Csv(e.into_error().into()))?;
            entries.push(write_file(out_dir, &name, kind.file_prefix(), rows, &bytes)?);
        }
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["patient_id", "admission_id"];
    header.extend(ComplicationCode::ALL.iter().map(|c| c.as_str()));
    w.write_record(&header).map_err(SynthError::Csv)?;
    for (p, row) in cohort.patients.iter().zip(&cohort.labels) {
        let mut rec = vec![p.key.patient_id.clone(), p.key.admission_id.clone()];
        rec.extend(row.iter().map(|b| if *b { "1" } else { "0" }.to_string()));
        w.write_record(&rec).map_err(SynthError::Csv)?;
    }
    let bytes = w.into_inner().map_err(|e| SynthError::Csv(e.into_error().into()))?;
    entries.push(write_file(out_dir, LABELS_FILE, "labels", cohort.labels.len(), &bytes)?);

    let n = cohort.labels.len().max(1) as f64;
    let manifest = CohortManifest {
        seed: spec.seed,
        patients: cohort.patients.len(),
        files: entries,
        excluded: cohort.excluded,
        observed_prevalence: ComplicationCode::ALL
            .iter()
            .map(|c| (*c, cohort.labels.iter().filter(|r| r[c.index()]).count() as f64 / n))
            .collect(),
    };
    let path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(manifest)
}

fn write_file(dir: &Path, name: &str, kind: &str, rows: usize, bytes: &[u8]) -> Result<ManifestEntry, SynthError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(io_err(&path))?;
    Ok(ManifestEntry { path: PathBuf::from(name), kind: kind.to_string(), rows, sha256: hex::encode(Sha256::digest(bytes)) })
}

/// Generates and writes a cohort in one step.
pub fn generate_cohort(spec: &CohortSpec, out_dir: impl AsRef<Path>) -> Result<CohortManifest, SynthError> {
    let cohort = generate_patients(spec)?;
    write_cohort(&cohort, spec, out_dir.as_ref())
}

/// Reads `labels.csv`: `(patient_id, admission_id)` → outcomes by code index.
pub fn read_labels(path: impl AsRef<Path>) -> Result<BTreeMap<(String, String), [bool; 8]>, SynthError> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(SynthError::Csv)?;
    let headers = reader.headers().map_err(SynthError::Csv)?.clone();
    let mut index = [usize::MAX; 8];
    for code in ComplicationCode::ALL {
        index[code.index()] = headers
            .iter()
            .position(|h| h == code.as_str())
            .ok_or_else(|| SynthError::Labels(format!("{}: no column {code}", path.display())))?;
    }
    let mut out = BTreeMap::new();
    for (n, row) in reader.records().enumerate() {
        let row = row.map_err(SynthError::Csv)?;
        let bad = || SynthError::Labels(format!("{}: row {} malformed", path.display(), n + 2));
        let mut labels = [false; 8];
        for (slot, col) in labels.iter_mut().zip(index) {
            *slot = match row.get(col) {
                Some("1") => true,
                Some("0") => false,
                _ => return Err(bad()),
            };
        }
        let (Some(pid), Some(aid)) = (row.get(0), row.get(1)) else { return Err(bad()) };
        out.insert((pid.to_string(), aid.to_string()), labels);
    }
    Ok(out)
}

//! Offline fitting: additive logistic fit by per-coefficient Newton steps on
//! binned knots, a 2-parameter logistic recalibration, and stratified k-fold
//! cross-validation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::metrics::{auroc, youden_at, youden_cutoff};
use super::{logistic, GamModel, ModelError, Term, TermShape};
use crate::domain::ComplicationCode;
use crate::features::{percentile, ModelInput, VariableKind, VariableSchema};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FitConfig {
    /// Quantile knots per continuous variable (before de-duplication).
    pub bins: usize,
    pub rounds: usize,
    pub ridge: f64,
    /// Largest absolute change of one coefficient per round.
    pub max_step: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { bins: 8, rounds: 6, ridge: 1.0, max_step: 2.0 }
    }
}

enum Basis {
    /// Per row: lower knot index and interpolation weight of the upper knot.
    Continuous { xs: Vec<f64>, rows: Vec<(u32, f64)> },
    Nominal { size: usize, rows: Vec<u32> },
}

impl Basis {
    fn width(&self) -> usize {
        match self {
            Basis::Continuous { xs, .. } => xs.len(),
            Basis::Nominal { size, .. } => *size,
        }
    }

    fn value(&self, coef: &[f64], i: usize) -> f64 {
        match self {
            Basis::Continuous { rows, .. } => {
                let (k, w) = rows[i];
                let k = k as usize;
                if w == 0.0 {
                    coef[k]
                } else {
                    (1.0 - w) * coef[k] + w * coef[k + 1]
                }
            }
            Basis::Nominal { rows, .. } => coef[rows[i] as usize],
        }
    }
}

fn continuous_basis(column: &[f64], bins: usize) -> Basis {
    let mut sorted = column.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut xs: Vec<f64> =
        (0..=bins.max(1)).map(|k| percentile(&sorted, 100.0 * k as f64 / bins.max(1) as f64)).collect();
    xs.dedup();
    if xs.len() < 2 {
        xs.push(xs[0] + 1.0);
    }
    let rows = column
        .iter()
        .map(|&x| {
            if x <= xs[0] {
                (0, 0.0)
            } else if x >= xs[xs.len() - 1] {
                ((xs.len() - 2) as u32, 1.0)
            } else {
                let i = xs.partition_point(|k| *k <= x);
                ((i - 1) as u32, (x - xs[i - 1]) / (xs[i] - xs[i - 1]))
            }
        })
        .collect();
    Basis::Continuous { xs, rows }
}

/// Fits one complication's additive model to encoded rows.
pub fn fit_gam(
    complication: ComplicationCode,
    model_version: &str,
    schema: &VariableSchema,
    inputs: &[&ModelInput],
    labels: &[bool],
    config: &FitConfig,
) -> Result<GamModel, ModelError> {
    let n = inputs.len();
    if n != labels.len() {
        return Err(ModelError::LengthDisagree);
    }
    let pos = labels.iter().filter(|l| **l).count();
    if pos == 0 || pos == n {
        return Err(ModelError::DegenerateLabels);
    }
    let y: Vec<f64> = labels.iter().map(|l| if *l { 1.0 } else { 0.0 }).collect();
    let bases: Vec<Basis> = schema
        .variables
        .iter()
        .enumerate()
        .map(|(j, spec)| {
            let column: Vec<f64> = inputs.iter().map(|r| r.0[j]).collect();
            match spec.kind {
                VariableKind::Continuous => continuous_basis(&column, config.bins),
                VariableKind::Nominal => {
                    let size = spec.categories.len();
                    Basis::Nominal { size, rows: column.iter().map(|x| (*x as usize).min(size - 1) as u32).collect() }
                }
            }
        })
        .collect();
    let mut coefs: Vec<Vec<f64>> = bases.iter().map(|b| vec![0.0; b.width()]).collect();
    let base_rate = (pos as f64 + 0.5) / (n as f64 + 1.0);
    let mut intercept = (base_rate / (1.0 - base_rate)).ln();
    let mut lp = vec![intercept; n];

    for _ in 0..config.rounds {
        let (mut g, mut h) = (0.0, 0.0);
        for i in 0..n {
            let p = logistic(lp[i]);
            g += y[i] - p;
            h += p * (1.0 - p);
        }
        let step = (g / (h + 1e-9)).clamp(-config.max_step, config.max_step);
        intercept += step;
        lp.iter_mut().for_each(|v| *v += step);

        for (basis, coef) in bases.iter().zip(coefs.iter_mut()) {
            let mut grad = vec![0.0; coef.len()];
            let mut hess = vec![0.0; coef.len()];
            for i in 0..n {
                let p = logistic(lp[i]);
                let (r, q) = (y[i] - p, p * (1.0 - p));
                match basis {
                    Basis::Continuous { rows, .. } => {
                        let (k, w) = rows[i];
                        let k = k as usize;
                        grad[k] += (1.0 - w) * r;
                        hess[k] += (1.0 - w) * (1.0 - w) * q;
                        if w > 0.0 {
                            grad[k + 1] += w * r;
                            hess[k + 1] += w * w * q;
                        }
                    }
                    Basis::Nominal { rows, .. } => {
                        let c = rows[i] as usize;
                        grad[c] += r;
                        hess[c] += q;
                    }
                }
            }
            let old = coef.clone();
            for k in 0..coef.len() {
                let penalized = grad[k] - config.ridge * coef[k];
                coef[k] += (penalized / (hess[k] + config.ridge)).clamp(-config.max_step, config.max_step);
            }
            for (i, z) in lp.iter_mut().enumerate() {
                *z += basis.value(coef, i) - basis.value(&old, i);
            }
        }
    }

    let (a, b) = recalibrate(&lp, &y);
    let terms = schema
        .variables
        .iter()
        .zip(bases.iter().zip(&coefs))
        .map(|(spec, (basis, coef))| Term {
            variable: spec.name.clone(),
            shape: match basis {
                Basis::Continuous { xs, .. } => {
                    TermShape::Continuous { knots: xs.iter().zip(coef).map(|(x, f)| [*x, b * f]).collect() }
                }
                Basis::Nominal { .. } => TermShape::Nominal { table: coef.iter().map(|f| b * f).collect() },
            },
        })
        .collect();
    GamModel {
        complication,
        model_version: model_version.to_string(),
        schema_version: schema.schema_version.clone(),
        intercept: a + b * intercept,
        terms,
        shared_terms: vec![],
    }
    .aligned(schema)
}

/// Logistic regression of `y` on a single predictor: returns `(a, b)`.
fn recalibrate(x: &[f64], y: &[f64]) -> (f64, f64) {
    let (mut a, mut b) = (0.0, 1.0);
    for _ in 0..25 {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (xi, yi) in x.iter().zip(y) {
            let p = logistic(a + b * xi);
            let (r, q) = (yi - p, p * (1.0 - p));
            ga += r;
            gb += r * xi;
            haa += q;
            hab += q * xi;
            hbb += q * xi * xi;
        }
        let det = haa * hbb - hab * hab;
        if det.abs() < 1e-12 {
            break;
        }
        let da = (hbb * ga - hab * gb) / det;
        let db = (haa * gb - hab * ga) / det;
        a += da;
        b += db;
        if da.abs() + db.abs() < 1e-10 {
            break;
        }
    }
    (a, b)
}

/// Stratified fold of every row: positives and negatives are shuffled
/// separately and dealt round-robin.
pub fn stratified_folds(labels: &[bool], folds: usize, seed: u64) -> Result<Vec<usize>, ModelError> {
    let mut pos: Vec<usize> = (0..labels.len()).filter(|i| labels[*i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|i| !labels[*i]).collect();
    if folds < 2 || pos.len() < folds || neg.len() < folds {
        return Err(ModelError::TooFewExamples { folds });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut assignment = vec![0; labels.len()];
    for group in [pos, neg] {
        for (k, i) in group.into_iter().enumerate() {
            assignment[i] = k % folds;
        }
    }
    Ok(assignment)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub auroc: f64,
    /// J on the held-out fold at the cutoff fit on the training folds.
    pub j: f64,
    pub cutoff: f64,
    #[serde(skip)]
    pub test_indices: Vec<usize>,
    #[serde(skip)]
    pub test_scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CvReport {
    pub folds: Vec<FoldMetrics>,
    pub mean_auroc: f64,
    pub sd_auroc: f64,
    pub mean_j: f64,
    pub mean_cutoff: f64,
    /// Cutoff and metrics over the pooled out-of-fold scores.
    pub pooled_cutoff: f64,
    pub pooled_j: f64,
    pub pooled_auroc: f64,
}

/// `fit_score(train, test)` fits on `train` and returns scores for both sets.
pub fn crossvalidate<F>(labels: &[bool], folds: usize, seed: u64, mut fit_score: F) -> Result<CvReport, ModelError>
where
    F: FnMut(&[usize], &[usize]) -> Result<(Vec<f64>, Vec<f64>), ModelError>,
{
    let assignment = stratified_folds(labels, folds, seed)?;
    let mut out = Vec::with_capacity(folds);
    let mut oof = vec![0.0; labels.len()];
    for fold in 0..folds {
        let (test, train): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|i| assignment[*i] == fold);
        let (train_scores, test_scores) = fit_score(&train, &test)?;
        let train_labels: Vec<bool> = train.iter().map(|i| labels[*i]).collect();
        let test_labels: Vec<bool> = test.iter().map(|i| labels[*i]).collect();
        let (cutoff, _) = youden_cutoff(&train_scores, &train_labels)?;
        for (i, s) in test.iter().zip(&test_scores) {
            oof[*i] = *s;
        }
        out.push(FoldMetrics {
            fold,
            n_train: train.len(),
            n_test: test.len(),
            auroc: auroc(&test_scores, &test_labels)?,
            j: youden_at(&test_scores, &test_labels, cutoff)?,
            cutoff,
            test_indices: test,
            test_scores,
        });
    }
    let k = folds as f64;
    let mean = |f: fn(&FoldMetrics) -> f64| out.iter().map(f).sum::<f64>() / k;
    let mean_auroc = mean(|f| f.auroc);
    let sd_auroc = (out.iter().map(|f| (f.auroc - mean_auroc).powi(2)).sum::<f64>() / k).sqrt();
    let (pooled_cutoff, pooled_j) = youden_cutoff(&oof, labels)?;
    Ok(CvReport {
        mean_j: mean(|f| f.j),
        mean_cutoff: mean(|f| f.cutoff),
        mean_auroc,
        sd_auroc,
        pooled_cutoff,
        pooled_j,
        pooled_auroc: auroc(&oof, labels)?,
        folds: out,
    })
}

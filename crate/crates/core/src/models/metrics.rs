//! ROC metrics. Counts are kept as integers so threshold comparisons are exact.

use super::ModelError;

fn class_counts(labels: &[bool]) -> (u64, u64) {
    let pos = labels.iter().filter(|l| **l).count() as u64;
    (pos, labels.len() as u64 - pos)
}

/// Youden J of the rule `score >= t → positive`.
pub fn youden_at(scores: &[f64], labels: &[bool], t: f64) -> Result<f64, ModelError> {
    if scores.len() != labels.len() {
        return Err(ModelError::LengthDisagree);
    }
    let (p, n) = class_counts(labels);
    if p == 0 || n == 0 {
        return Err(ModelError::DegenerateLabels);
    }
    let tp = scores.iter().zip(labels).filter(|(s, l)| **l && **s >= t).count() as u64;
    let tn = scores.iter().zip(labels).filter(|(s, l)| !**l && **s < t).count() as u64;
    Ok(j_value(tp, tn, p, n))
}

/// `tp/p + tn/n - 1` as a single rounding of an exact integer ratio, so
/// equal J values compare equal.
fn j_value(tp: u64, tn: u64, p: u64, n: u64) -> f64 {
    let num = i128::from(tp) * i128::from(n) + i128::from(tn) * i128::from(p) - i128::from(p) * i128::from(n);
    num as f64 / (i128::from(p) * i128::from(n)) as f64
}

/// Cutoff maximizing J over the distinct scores plus one value just above
/// the maximum. Ties go to the smallest cutoff.
pub fn youden_cutoff(scores: &[f64], labels: &[bool]) -> Result<(f64, f64), ModelError> {
    if scores.len() != labels.len() {
        return Err(ModelError::LengthDisagree);
    }
    let (p, n) = class_counts(labels);
    if p == 0 || n == 0 {
        return Err(ModelError::DegenerateLabels);
    }
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Ascending sweep: at candidate t, everything before it is predicted negative.
    let (mut below_pos, mut below_neg) = (0u64, 0u64);
    let mut best: Option<(f64, u64, u64)> = None;
    let better = |tp: u64, tn: u64, best: &Option<(f64, u64, u64)>| match best {
        None => true,
        // J ∝ tp·n + tn·p
        Some((_, btp, btn)) => {
            u128::from(tp) * u128::from(n) + u128::from(tn) * u128::from(p)
                > u128::from(*btp) * u128::from(n) + u128::from(*btn) * u128::from(p)
        }
    };
    let mut i = 0;
    while i < pairs.len() {
        let t = pairs[i].0;
        let (tp, tn) = (p - below_pos, below_neg);
        if better(tp, tn, &best) {
            best = Some((t, tp, tn));
        }
        while i < pairs.len() && pairs[i].0 == t {
            if pairs[i].1 {
                below_pos += 1;
            } else {
                below_neg += 1;
            }
            i += 1;
        }
    }
    let beyond = pairs.last().expect("non-empty").0.next_up();
    if better(0, n, &best) {
        best = Some((beyond, 0, n));
    }
    let (t, tp, tn) = best.expect("at least one candidate");
    Ok((t, j_value(tp, tn, p, n)))
}

/// Mann-Whitney AUROC with ties counted one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, ModelError> {
    if scores.len() != labels.len() {
        return Err(ModelError::LengthDisagree);
    }
    let (p, n) = class_counts(labels);
    if p == 0 || n == 0 {
        return Err(ModelError::DegenerateLabels);
    }
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // doubled concordance: 2 per concordant pair, 1 per tie
    let (mut twice, mut neg_below) = (0u128, 0u128);
    let mut i = 0;
    while i < pairs.len() {
        let t = pairs[i].0;
        let (mut gp, mut gn) = (0u128, 0u128);
        while i < pairs.len() && pairs[i].0 == t {
            if pairs[i].1 {
                gp += 1;
            } else {
                gn += 1;
            }
            i += 1;
        }
        twice += 2 * gp * neg_below + gp * gn;
        neg_below += gn;
    }
    Ok(twice as f64 / (2.0 * p as f64 * n as f64))
}

/// O(P·N) pairwise concordance count.
pub fn auroc_bruteforce(scores: &[f64], labels: &[bool]) -> Result<f64, ModelError> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, l)| **l).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, l)| !**l).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(ModelError::DegenerateLabels);
    }
    let mut total = 0.0;
    for a in &pos {
        for b in &neg {
            total += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(total / (pos.len() as f64 * neg.len() as f64))
}

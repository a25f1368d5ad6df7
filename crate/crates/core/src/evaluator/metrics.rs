use crate::error::{EetError, Result};

/// Sample Pearson correlation. Constant inputs have no defined correlation and are
/// reported as an error rather than 0.
pub fn pearson_cc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(EetError::Data(format!("PCC needs two equal-length vectors of at least 2, got {} and {}", x.len(), y.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EetError::Data("PCC is undefined for a constant vector".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn mse(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(EetError::Data(format!("MSE needs two equal-length nonempty vectors, got {} and {}", x.len(), y.len())));
    }
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

/// Threshold on `scores` maximizing balanced accuracy, where `same[k]` marks positive
/// pairs. Predictions are `score >= threshold`.
pub fn balanced_threshold(scores: &[f64], same: &[bool]) -> Result<f64> {
    let pos = same.iter().filter(|s| **s).count();
    let neg = same.len() - pos;
    if pos == 0 || neg == 0 || scores.len() != same.len() {
        return Err(EetError::Data("calibration needs both same and different pairs".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Threshold below everything: every pair accepted.
    let (mut tp, mut tn) = (pos, 0usize);
    let mut best = (0.5, scores[order[0]]);
    for (k, &i) in order.iter().enumerate() {
        if same[i] {
            tp -= 1;
        } else {
            tn += 1;
        }
        let next = order.get(k + 1).map(|&j| scores[j]);
        if next == Some(scores[i]) {
            continue;
        }
        let bal = 0.5 * (tp as f64 / pos as f64 + tn as f64 / neg as f64);
        if bal > best.0 {
            best = (bal, next.map_or(f64::INFINITY, |n| 0.5 * (scores[i] + n)));
        }
    }
    Ok(best.1)
}

/// Smallest threshold whose false accept rate on `negatives` is at most `far`.
pub fn threshold_at_far(negatives: &[f64], far: f64) -> Result<f64> {
    if negatives.is_empty() {
        return Err(EetError::Data("no different-identity scores".into()));
    }
    let mut sorted = negatives.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    // Allow floor(far * n) accepted negatives; place the threshold just above the next one.
    let allowed = (far * sorted.len() as f64).floor() as usize;
    Ok(match sorted.get(allowed) {
        Some(&s) => s.next_up(),
        None => f64::NEG_INFINITY,
    })
}

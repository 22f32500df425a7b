//! Heuristic comparison metrics and failure-prediction evaluation utilities.
//!
//! These are the conventional specialization metrics the geometric ones are
//! judged against: cosine similarity of expert weights, routing entropy,
//! load imbalance, expert weight overlap, and a validation-loss trend
//! predictor. Cosine similarity and routing entropy are deliberately
//! parameterization-sensitive — `invariance_demonstration` produces the
//! side-by-side evidence — while the Fisher-Rao quantities they are compared
//! to are invariant under reparameterizations that preserve the routing
//! distribution.
//!
//! Score orientation is uniform: higher score = more failure-like.
//! All entropies are in nats.

use serde::{Deserialize, Serialize};

use crate::linalg::{dot, norm2, stable_sum};
use crate::simplex::{fsi, fisher_rao_distance, softmax, ProbabilityVector};
use crate::{Error, Result};

/// A run's failure score paired with its actual outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionScore {
    pub run_id: String,
    /// Higher = more likely failure. Must be finite.
    pub score: f64,
    /// True when the run actually failed.
    pub label: bool,
}

/// Precision/recall/F1 of the failure class at one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when no score exceeded the threshold, making precision
    /// undefined; it is reported as 0 by convention.
    pub no_predicted_positives: bool,
}

/// Plain cosine similarity of two parameter vectors.
pub fn cosine_similarity(theta_a: &[f64], theta_b: &[f64]) -> Result<f64> {
    if theta_a.len() != theta_b.len() {
        return Err(Error::DimensionMismatch {
            context: "cosine_similarity",
            expected: theta_a.len(),
            got: theta_b.len(),
        });
    }
    let (na, nb) = (norm2(theta_a), norm2(theta_b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine_similarity: zero vector"));
    }
    Ok(dot(theta_a, theta_b) / (na * nb))
}

/// Shannon entropy of a routing distribution in nats, with 0 ln 0 := 0.
pub fn routing_entropy(p: &ProbabilityVector) -> f64 {
    let terms: Vec<f64> = p
        .values()
        .iter()
        .map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 })
        .collect();
    stable_sum(&terms)
}

/// Coefficient of variation of per-expert token fractions: population
/// standard deviation divided by the mean fraction.
pub fn load_imbalance(counts: &[u64]) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::invalid("load_imbalance: no experts"));
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid("load_imbalance: zero total count"));
    }
    let n = counts.len() as f64;
    let fractions: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let mean = stable_sum(&fractions) / n;
    let sq_dev: Vec<f64> = fractions.iter().map(|f| (f - mean) * (f - mean)).collect();
    let std = (stable_sum(&sq_dev) / n).sqrt();
    Ok(std / mean)
}

/// Mean pairwise absolute cosine similarity of flattened expert weights.
/// This metric has no standard definition; the absolute-cosine mean is a
/// documented reconstruction used only as a comparison baseline.
pub fn expert_overlap(expert_weights: &[Vec<f64>]) -> Result<f64> {
    if expert_weights.len() < 2 {
        return Err(Error::invalid("expert_overlap: need at least 2 experts"));
    }
    let mut sims = Vec::new();
    for i in 0..expert_weights.len() {
        for j in (i + 1)..expert_weights.len() {
            sims.push(cosine_similarity(&expert_weights[i], &expert_weights[j])?.abs());
        }
    }
    Ok(stable_sum(&sims) / sims.len() as f64)
}

/// Validation-loss trend prediction over (training fraction, loss) points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValLossPrediction {
    /// Failure score: exactly 1 when the binary rule fires, otherwise the
    /// continuous max(slope / (|current| + 1e-8), extrapolation ratio - 1).
    pub score: f64,
    /// The binary rule: slope > 0 with R^2 > 0.7, or the loss extrapolated
    /// to fraction 1.0 exceeding 1.5x the current loss.
    pub flagged: bool,
    pub slope: f64,
    pub r_squared: f64,
    /// Extrapolated loss at fraction 1.0 divided by the current loss.
    pub extrapolation_ratio: f64,
}

/// Fits loss against training fraction by least squares and applies the
/// early-stopping failure rule. Needs at least four points with strictly
/// increasing fractions.
pub fn val_loss_failure_predictor(loss_series: &[(f64, f64)]) -> Result<ValLossPrediction> {
    if loss_series.len() < 4 {
        return Err(Error::invalid(format!(
            "val_loss_failure_predictor: need at least 4 points, got {}",
            loss_series.len()
        )));
    }
    for w in loss_series.windows(2) {
        if !(w[1].0 > w[0].0) {
            return Err(Error::invalid(
                "val_loss_failure_predictor: fractions must be strictly increasing",
            ));
        }
    }
    if loss_series
        .iter()
        .any(|(f, l)| !f.is_finite() || !l.is_finite())
    {
        return Err(Error::invalid(
            "val_loss_failure_predictor: non-finite input point",
        ));
    }
    let n = loss_series.len() as f64;
    let mean_x = loss_series.iter().map(|(x, _)| x).sum::<f64>() / n;
    let mean_y = loss_series.iter().map(|(_, y)| y).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (x, y) in loss_series {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
        syy += (y - mean_y) * (y - mean_y);
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    // R^2 = 1 - SS_res / SS_tot; a perfectly flat series is fully explained
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        let ss_res: f64 = loss_series
            .iter()
            .map(|(x, y)| {
                let r = y - (intercept + slope * x);
                r * r
            })
            .sum();
        1.0 - ss_res / syy
    };
    let current = loss_series.last().unwrap().1;
    let extrapolated = intercept + slope * 1.0;
    let denom = current.abs() + 1e-8;
    let extrapolation_ratio = extrapolated / denom;
    let flagged = (slope > 0.0 && r_squared > 0.7) || extrapolated > 1.5 * current;
    let score = if flagged {
        1.0
    } else {
        (slope / denom).max(extrapolation_ratio - 1.0)
    };
    Ok(ValLossPrediction {
        score,
        flagged,
        slope,
        r_squared,
        extrapolation_ratio,
    })
}

/// Area under the ROC curve by the normalized Mann-Whitney U statistic;
/// tied scores count one half. Requires both outcome classes.
pub fn auc(scores: &[PredictionScore]) -> Result<f64> {
    let positives: Vec<f64> = scores.iter().filter(|s| s.label).map(|s| s.score).collect();
    let negatives: Vec<f64> = scores
        .iter()
        .filter(|s| !s.label)
        .map(|s| s.score)
        .collect();
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::invalid(
            "auc: need at least one failed and one healthy run",
        ));
    }
    if scores.iter().any(|s| !s.score.is_finite()) {
        return Err(Error::invalid("auc: non-finite score"));
    }
    let mut concordant = 0.0;
    for p in &positives {
        for q in &negatives {
            if p > q {
                concordant += 1.0;
            } else if p == q {
                concordant += 0.5;
            }
        }
    }
    Ok(concordant / (positives.len() as f64 * negatives.len() as f64))
}

/// Precision/recall/F1 of the failure class for each threshold, where a run
/// is predicted failing iff its score strictly exceeds the threshold.
pub fn threshold_sweep(
    scores: &[PredictionScore],
    thresholds: &[f64],
) -> Result<Vec<ThresholdReport>> {
    let n_pos = scores.iter().filter(|s| s.label).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid(
            "threshold_sweep: need at least one failed and one healthy run",
        ));
    }
    let mut reports = Vec::with_capacity(thresholds.len());
    for &threshold in thresholds {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for s in scores {
            let predicted = s.score > threshold;
            match (predicted, s.label) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let no_predicted_positives = tp + fp == 0;
        let precision = if no_predicted_positives {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = tp as f64 / (tp + fn_) as f64;
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        reports.push(ThresholdReport {
            threshold,
            precision,
            recall,
            f1,
            no_predicted_positives,
        });
    }
    Ok(reports)
}

/// Machine-checkable side-by-side of heuristic non-invariance and
/// Fisher-Rao invariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    /// cos((1,1),(1,0)) before the diag(1,2) reparameterization.
    pub cosine_before: f64,
    /// cos((1,2),(1,0)) after it.
    pub cosine_after: f64,
    /// after/before; about 0.63, a 37% drop from a pure coordinate change.
    pub cosine_drop_ratio: f64,
    /// Entropy of softmax((1,0)).
    pub entropy_before: f64,
    /// Entropy of softmax((2,0)): logit scaling changes the metric.
    pub entropy_after: f64,
    /// |FSI(p) - FSI(permuted p)|.
    pub fsi_permutation_delta: f64,
    /// |FSI| change under a constant logit shift.
    pub fsi_constant_shift_delta: f64,
    /// |FSI| change under (w, tau) -> (alpha w, alpha tau).
    pub fsi_joint_scaling_delta: f64,
    /// |d(p,q)| change under a common permutation of both arguments.
    pub fisher_rao_permutation_delta: f64,
    /// True when cosine and entropy moved by their documented margins.
    pub heuristics_vary: bool,
    /// True when every Fisher-Rao delta is at most 1e-10.
    pub geometry_invariant: bool,
}

/// Runs the fixed counterexamples and invariance checks.
pub fn invariance_demonstration() -> Result<InvarianceReport> {
    // (a) cosine under a diagonal reparameterization A = diag(1, 2):
    //     theta_1 = (1,1) -> (1,2), theta_2 = (1,0) -> (1,0)
    let cosine_before = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0])?;
    let cosine_after = cosine_similarity(&[1.0, 2.0], &[1.0, 0.0])?;
    let cosine_drop_ratio = cosine_after / cosine_before;

    // (b) entropy under logit scaling (1,0) -> (2,0)
    let entropy_before = routing_entropy(&softmax(&[1.0, 0.0], 1.0)?);
    let entropy_after = routing_entropy(&softmax(&[2.0, 0.0], 1.0)?);

    // (c) Fisher-Rao quantities under routing-preserving transformations
    let logits = [0.9, -0.3, 0.4, 0.1];
    let tau = 1.25;
    let p = softmax(&logits, tau)?;
    let base_fsi = fsi(&p);

    // entry permutation
    let permuted = ProbabilityVector::new(vec![
        p.values()[2],
        p.values()[0],
        p.values()[3],
        p.values()[1],
    ])?;
    let fsi_permutation_delta = (fsi(&permuted) - base_fsi).abs();

    // constant logit shift
    let shifted: Vec<f64> = logits.iter().map(|l| l + 5.0).collect();
    let fsi_constant_shift_delta = (fsi(&softmax(&shifted, tau)?) - base_fsi).abs();

    // joint (w, tau) -> (alpha w, alpha tau) rescaling
    let alpha = 2.0;
    let scaled: Vec<f64> = logits.iter().map(|l| l * alpha).collect();
    let fsi_joint_scaling_delta = (fsi(&softmax(&scaled, alpha * tau)?) - base_fsi).abs();

    // distance under a common permutation of both arguments
    let q = softmax(&[0.2, 0.6, -0.1, 0.3], tau)?;
    let d_base = fisher_rao_distance(&p, &q)?;
    let q_permuted = ProbabilityVector::new(vec![
        q.values()[2],
        q.values()[0],
        q.values()[3],
        q.values()[1],
    ])?;
    let d_permuted = fisher_rao_distance(&permuted, &q_permuted)?;
    let fisher_rao_permutation_delta = (d_permuted - d_base).abs();

    let heuristics_vary = (cosine_before - cosine_after).abs() > 0.2
        && (entropy_before - entropy_after).abs() > 0.2;
    let geometry_invariant = fsi_permutation_delta <= 1e-10
        && fsi_constant_shift_delta <= 1e-10
        && fsi_joint_scaling_delta <= 1e-10
        && fisher_rao_permutation_delta <= 1e-10;

    Ok(InvarianceReport {
        cosine_before,
        cosine_after,
        cosine_drop_ratio,
        entropy_before,
        entropy_after,
        fsi_permutation_delta,
        fsi_constant_shift_delta,
        fsi_joint_scaling_delta,
        fisher_rao_permutation_delta,
        heuristics_vary,
        geometry_invariant,
    })
}

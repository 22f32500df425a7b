//! Synthetic Gaussian-mixture classification task.
//!
//! Inputs are drawn from a mixture of isotropic Gaussians; each cluster
//! carries a class label. The Bayes-optimal accuracy of the task is
//! estimated by Monte Carlo against the exact posterior, giving every run a
//! principled "optimal" reference, and a run counts as a failure when its
//! final accuracy falls below 85% of that optimum.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::simplex::ProbabilityVector;
use crate::{Error, Result};

/// Fraction of the Bayes-optimal accuracy below which a run is a failure.
pub const FAILURE_FRACTION: f64 = 0.85;

/// Mixture of isotropic Gaussian clusters with class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureSpec {
    /// Cluster means, one vector per cluster (all the same dimension).
    pub means: Vec<Vec<f64>>,
    /// Isotropic standard deviation shared by every cluster.
    pub covariance_scale: f64,
    /// Sampling weight of each cluster.
    pub mixture_weights: ProbabilityVector,
    /// Class label of each cluster; classes are 0..n_classes().
    pub cluster_labels: Vec<usize>,
}

impl GaussianMixtureSpec {
    pub fn new(
        means: Vec<Vec<f64>>,
        covariance_scale: f64,
        mixture_weights: ProbabilityVector,
        cluster_labels: Vec<usize>,
    ) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::invalid("gaussian mixture: no clusters"));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::invalid("gaussian mixture: zero-dimensional means"));
        }
        for (i, m) in means.iter().enumerate() {
            if m.len() != dim {
                return Err(Error::DimensionMismatch {
                    context: "gaussian mixture means",
                    expected: dim,
                    got: m.len(),
                });
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "gaussian mixture: mean {i} has a non-finite entry"
                )));
            }
        }
        if !(covariance_scale > 0.0) || !covariance_scale.is_finite() {
            return Err(Error::invalid(format!(
                "gaussian mixture: covariance scale must be positive, got {covariance_scale}"
            )));
        }
        if mixture_weights.len() != means.len() {
            return Err(Error::DimensionMismatch {
                context: "gaussian mixture weights",
                expected: means.len(),
                got: mixture_weights.len(),
            });
        }
        if cluster_labels.len() != means.len() {
            return Err(Error::DimensionMismatch {
                context: "gaussian mixture labels",
                expected: means.len(),
                got: cluster_labels.len(),
            });
        }
        Ok(GaussianMixtureSpec {
            means,
            covariance_scale,
            mixture_weights,
            cluster_labels,
        })
    }

    /// Standard arrangement: clusters on scaled coordinate axes when they
    /// fit (`n_clusters <= input_dim`), otherwise on hypercube corners with
    /// side `separation`. One class per cluster by default
    /// (`cluster_labels[c] = c`), uniform mixture weights.
    pub fn arranged(
        n_clusters: usize,
        input_dim: usize,
        separation: f64,
        covariance_scale: f64,
    ) -> Result<Self> {
        if n_clusters == 0 || input_dim == 0 {
            return Err(Error::invalid(
                "gaussian mixture: need at least one cluster and one dimension",
            ));
        }
        if !(separation > 0.0) {
            return Err(Error::invalid(format!(
                "gaussian mixture: separation must be positive, got {separation}"
            )));
        }
        let means = if n_clusters <= input_dim {
            (0..n_clusters)
                .map(|c| {
                    let mut m = vec![0.0; input_dim];
                    m[c] = separation;
                    m
                })
                .collect()
        } else if input_dim < 64 && n_clusters <= (1usize << input_dim) {
            (0..n_clusters)
                .map(|c| {
                    (0..input_dim)
                        .map(|j| {
                            if (c >> j) & 1 == 1 {
                                separation / 2.0
                            } else {
                                -separation / 2.0
                            }
                        })
                        .collect()
                })
                .collect()
        } else {
            return Err(Error::invalid(format!(
                "gaussian mixture: cannot place {n_clusters} clusters in {input_dim} dimensions"
            )));
        };
        GaussianMixtureSpec::new(
            means,
            covariance_scale,
            ProbabilityVector::uniform(n_clusters)?,
            (0..n_clusters).collect(),
        )
    }

    pub fn input_dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn n_clusters(&self) -> usize {
        self.means.len()
    }

    /// Number of classes: one past the largest cluster label.
    pub fn n_classes(&self) -> usize {
        self.cluster_labels.iter().copied().max().unwrap_or(0) + 1
    }

    /// Exact Bayes classifier: arg max over classes of the posterior mass,
    /// computed with log-sum-exp over this class's clusters. Ties resolve to
    /// the lowest class index.
    pub fn bayes_classify(&self, x: &[f64]) -> usize {
        let inv_two_var = 1.0 / (2.0 * self.covariance_scale * self.covariance_scale);
        let n_classes = self.n_classes();
        let mut class_logmass = vec![f64::NEG_INFINITY; n_classes];
        // collect per-cluster log weights, then logsumexp into classes
        let mut cluster_logs: Vec<(usize, f64)> = Vec::with_capacity(self.n_clusters());
        for (c, mean) in self.means.iter().enumerate() {
            let d2: f64 = mean
                .iter()
                .zip(x)
                .map(|(m, xi)| (xi - m) * (xi - m))
                .sum();
            let lw = self.mixture_weights.values()[c].ln() - d2 * inv_two_var;
            cluster_logs.push((self.cluster_labels[c], lw));
        }
        for k in 0..n_classes {
            let entries: Vec<f64> = cluster_logs
                .iter()
                .filter(|(label, _)| *label == k)
                .map(|(_, lw)| *lw)
                .collect();
            if !entries.is_empty() {
                let max = entries.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = entries.iter().map(|v| (v - max).exp()).sum();
                class_logmass[k] = max + sum.ln();
            }
        }
        let mut best = 0;
        for k in 1..n_classes {
            if class_logmass[k] > class_logmass[best] {
                best = k;
            }
        }
        best
    }
}

/// A batch of labeled samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBatch {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Draws a batch: choose a cluster by mixture weight, then add isotropic
/// Gaussian noise to its mean. Fully determined by the RNG state.
pub fn sample_batch(
    spec: &GaussianMixtureSpec,
    batch_size: usize,
    rng: &mut impl Rng,
) -> LabeledBatch {
    let mut inputs = Vec::with_capacity(batch_size);
    let mut labels = Vec::with_capacity(batch_size);
    let weights = spec.mixture_weights.values();
    for _ in 0..batch_size {
        let u: f64 = rng.gen();
        let mut cluster = weights.len() - 1;
        let mut acc = 0.0;
        for (c, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                cluster = c;
                break;
            }
        }
        let x: Vec<f64> = spec.means[cluster]
            .iter()
            .map(|m| m + spec.covariance_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        inputs.push(x);
        labels.push(spec.cluster_labels[cluster]);
    }
    LabeledBatch { inputs, labels }
}

/// Monte Carlo estimate of the Bayes-optimal accuracy with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BayesAccuracy {
    pub accuracy: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

/// Estimates the best achievable accuracy by classifying Monte Carlo draws
/// with the exact posterior. Requires at least 10,000 draws so the standard
/// error stays below about half a percent.
pub fn bayes_optimal_accuracy(
    spec: &GaussianMixtureSpec,
    n_monte_carlo: usize,
    rng: &mut impl Rng,
) -> Result<BayesAccuracy> {
    if n_monte_carlo < 10_000 {
        return Err(Error::invalid(format!(
            "bayes_optimal_accuracy: need at least 10000 Monte Carlo draws, got {n_monte_carlo}"
        )));
    }
    let mut correct = 0usize;
    // draw in modest chunks to keep memory flat
    let chunk = 4096;
    let mut remaining = n_monte_carlo;
    while remaining > 0 {
        let take = remaining.min(chunk);
        let batch = sample_batch(spec, take, rng);
        for (x, y) in batch.inputs.iter().zip(&batch.labels) {
            if spec.bayes_classify(x) == *y {
                correct += 1;
            }
        }
        remaining -= take;
    }
    let accuracy = correct as f64 / n_monte_carlo as f64;
    let std_error = (accuracy * (1.0 - accuracy) / n_monte_carlo as f64).sqrt();
    Ok(BayesAccuracy {
        accuracy,
        std_error,
        n_samples: n_monte_carlo,
    })
}

/// A run fails when its final accuracy drops below 85% of the optimum.
pub fn is_failure(final_accuracy: f64, optimal_accuracy: f64) -> bool {
    final_accuracy < FAILURE_FRACTION * optimal_accuracy
}

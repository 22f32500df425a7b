//! Per-expert Fisher information estimation and heterogeneity diagnostics.
//!
//! Each expert is scored by the Fisher information of its own class softmax
//! with the router bypassed. Two estimators are provided: a diagonal
//! empirical Fisher (squared per-sample log-likelihood gradients at the
//! observed labels, batch-averaged) and an exact expected-Fisher oracle for
//! tiny models that enumerates classes instead of sampling labels. The
//! heterogeneity matrix combines per-expert FIMs under the marginal routing
//! weights:
//!
//! `H_jk = Fbar_jk - Fbar_jk^2 / tr(Fbar)` with `Fbar = sum_e pbar_e F_e`,
//!
//! and the Fisher heterogeneity score is the ratio of its Frobenius norm to
//! the value at initialization, `FHS(t) = |H(t)|_F / (|H(0)|_F + 1e-8)`.
//! Note `H` is intentionally not a variance across experts: identical
//! expert FIMs still give nonzero `H` (e.g. all-identity FIMs at d=2 give
//! `|H|_F = sqrt(0.5)`); the formula is kept in its literal form.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::{stable_sum, Mat};
use crate::model::{ExpertParams, MoEModelState};
use crate::simplex::{softmax, ProbabilityVector};
use crate::task::LabeledBatch;
use crate::{Error, Result};

/// Denominator guard in the Fisher heterogeneity score.
pub const FHS_EPSILON: f64 = 1e-8;

/// Diagonal Fisher information estimate for one expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalFim {
    pub expert_id: usize,
    /// One non-negative entry per expert parameter (flattening order is
    /// documented on `ExpertParams`).
    pub diag: Vec<f64>,
    pub batch_size_used: usize,
}

/// Expert Fisher heterogeneity matrix, stored by its diagonal (exact when
/// every per-expert FIM is diagonal: all off-diagonal entries are zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityMatrix {
    pub diag: Vec<f64>,
    pub frob_norm: f64,
}

/// Fisher heterogeneity score with its ingredients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FhsValue {
    pub value: f64,
    pub h_frob_now: f64,
    pub h_frob_initial: f64,
    pub epsilon: f64,
}

/// Gradient of `log softmax(expert logits)[label]` with respect to the
/// expert's parameters, router bypassed, flattened in the documented order.
fn expert_loglik_grad(
    model: &MoEModelState,
    expert_id: usize,
    x: &[f64],
    label: usize,
) -> Result<Vec<f64>> {
    let n_classes = model.n_classes();
    if label >= n_classes {
        return Err(Error::invalid(format!(
            "label {label} out of range for {n_classes} classes"
        )));
    }
    match &model.experts[expert_id] {
        ExpertParams::Linear(w) => {
            let q = softmax(&w.matvec(x), 1.0)?.into_values();
            let mut grad = vec![0.0; w.data.len()];
            for c in 0..n_classes {
                let dz = if c == label { 1.0 - q[c] } else { -q[c] };
                for (j, xj) in x.iter().enumerate() {
                    grad[c * w.cols + j] = dz * xj;
                }
            }
            Ok(grad)
        }
        ExpertParams::Mlp { w1, w2 } => {
            let h: Vec<f64> = w1.matvec(x).into_iter().map(f64::tanh).collect();
            let q = softmax(&w2.matvec(&h), 1.0)?.into_values();
            let mut grad = vec![0.0; w1.data.len() + w2.data.len()];
            // second layer: outer(dz, h); first layer: outer((w2^T dz)*(1-h^2), x)
            let dz: Vec<f64> = (0..n_classes)
                .map(|c| if c == label { 1.0 - q[c] } else { -q[c] })
                .collect();
            for c in 0..n_classes {
                for (j, hj) in h.iter().enumerate() {
                    grad[w1.data.len() + c * w2.cols + j] = dz[c] * hj;
                }
            }
            for (j, hj) in h.iter().enumerate() {
                let mut s = 0.0;
                for c in 0..n_classes {
                    s += w2.get(c, j) * dz[c];
                }
                let dpre = s * (1.0 - hj * hj);
                for (k, xk) in x.iter().enumerate() {
                    grad[j * w1.cols + k] = dpre * xk;
                }
            }
            Ok(grad)
        }
    }
}

/// Class probabilities of one expert on one input, router bypassed.
pub fn expert_class_probs(
    model: &MoEModelState,
    expert_id: usize,
    x: &[f64],
) -> Result<ProbabilityVector> {
    if expert_id >= model.n_experts() {
        return Err(Error::invalid(format!(
            "expert {expert_id} out of range for {} experts",
            model.n_experts()
        )));
    }
    softmax(&model.expert_logits(expert_id, x), 1.0)
}

/// Diagonal empirical Fisher for one expert: per-sample log-likelihood
/// gradients at the observed labels, squared elementwise and batch-averaged.
/// The average is order-independent bit for bit (sorted compensated sums).
pub fn estimate_diagonal_fim(
    model: &MoEModelState,
    expert_id: usize,
    batch: &LabeledBatch,
) -> Result<DiagonalFim> {
    if batch.is_empty() {
        return Err(Error::invalid("estimate_diagonal_fim: empty batch"));
    }
    if expert_id >= model.n_experts() {
        return Err(Error::invalid(format!(
            "expert {expert_id} out of range for {} experts",
            model.n_experts()
        )));
    }
    let d = model.experts[expert_id].param_count();
    let b = batch.len();
    // per-coordinate columns of squared gradients, then an order-stable mean
    let mut columns: Vec<Vec<f64>> = vec![Vec::with_capacity(b); d];
    for (x, y) in batch.inputs.iter().zip(&batch.labels) {
        let grad = expert_loglik_grad(model, expert_id, x, *y)?;
        for (col, g) in columns.iter_mut().zip(&grad) {
            col.push(g * g);
        }
    }
    let diag: Vec<f64> = columns
        .iter()
        .map(|col| stable_sum(col) / b as f64)
        .collect();
    Ok(DiagonalFim {
        expert_id,
        diag,
        batch_size_used: b,
    })
}

/// Diagonal empirical Fisher for every expert on a shared batch; experts are
/// independent, so they are scored in parallel over a read-only snapshot.
pub fn estimate_all_diagonal_fims(
    model: &MoEModelState,
    batch: &LabeledBatch,
) -> Result<Vec<DiagonalFim>> {
    (0..model.n_experts())
        .into_par_iter()
        .map(|e| estimate_diagonal_fim(model, e, batch))
        .collect()
}

/// Maximum parameter count a model may have for the exact oracle.
pub const EXACT_FIM_MAX_DIM: usize = 500;

/// Exact expected Fisher of one expert over a fixed input set: the
/// class-enumerated expectation `E_x E_{y~q(.|x)}[grad grad^T]`, no label
/// sampling. Symmetric positive semi-definite by construction.
pub fn exact_fim_oracle(
    model: &MoEModelState,
    expert_id: usize,
    inputs: &[Vec<f64>],
) -> Result<Mat> {
    if inputs.is_empty() {
        return Err(Error::invalid("exact_fim_oracle: empty input set"));
    }
    if expert_id >= model.n_experts() {
        return Err(Error::invalid(format!(
            "expert {expert_id} out of range for {} experts",
            model.n_experts()
        )));
    }
    let d = model.experts[expert_id].param_count();
    if d > EXACT_FIM_MAX_DIM {
        return Err(Error::invalid(format!(
            "exact_fim_oracle: expert has {d} parameters, limit is {EXACT_FIM_MAX_DIM}"
        )));
    }
    let n_classes = model.n_classes();
    let b = inputs.len() as f64;
    let mut fim = Mat::zeros(d, d);
    for x in inputs {
        let q = expert_class_probs(model, expert_id, x)?;
        for y in 0..n_classes {
            let g = expert_loglik_grad(model, expert_id, x, y)?;
            fim.add_outer(q.values()[y] / b, &g, &g);
        }
    }
    Ok(fim)
}

/// Draws one label per input from an expert's own predictive distribution
/// (router bypassed). Used when comparing the empirical estimator against
/// the exact oracle, so both estimate the same quantity.
pub fn sample_expert_labels(
    model: &MoEModelState,
    expert_id: usize,
    inputs: &[Vec<f64>],
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let mut labels = Vec::with_capacity(inputs.len());
    for x in inputs {
        let q = expert_class_probs(model, expert_id, x)?;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = q.len() - 1;
        for (c, p) in q.values().iter().enumerate() {
            acc += p;
            if u < acc {
                chosen = c;
                break;
            }
        }
        labels.push(chosen);
    }
    Ok(labels)
}

/// Routing-weighted mean FIM diagonal `Fbar = sum_e pbar_e F_e` and the
/// heterogeneity matrix `H_jk = Fbar_jk - Fbar_jk^2 / tr(Fbar)`.
pub fn heterogeneity_matrix(
    fims: &[DiagonalFim],
    p_bar: &ProbabilityVector,
) -> Result<HeterogeneityMatrix> {
    if fims.is_empty() {
        return Err(Error::invalid("heterogeneity_matrix: no FIMs supplied"));
    }
    if fims.len() != p_bar.len() {
        return Err(Error::DimensionMismatch {
            context: "heterogeneity_matrix experts",
            expected: p_bar.len(),
            got: fims.len(),
        });
    }
    let d = fims[0].diag.len();
    for f in fims {
        if f.diag.len() != d {
            return Err(Error::DimensionMismatch {
                context: "heterogeneity_matrix FIM dimension",
                expected: d,
                got: f.diag.len(),
            });
        }
        if f.diag.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(
                "heterogeneity_matrix: FIM diagonals must be finite and non-negative",
            ));
        }
    }
    let mean_diag: Vec<f64> = (0..d)
        .map(|j| {
            fims.iter()
                .zip(p_bar.values())
                .map(|(f, w)| w * f.diag[j])
                .sum()
        })
        .collect();
    let trace = stable_sum(&mean_diag);
    if trace <= 0.0 {
        return Err(Error::DegenerateFisherMass);
    }
    // Fbar_jj <= trace, so entries are non-negative in exact arithmetic;
    // clamping the ratio keeps rounding from producing -1 ulp values.
    let diag: Vec<f64> = mean_diag
        .iter()
        .map(|&f| f * (1.0 - (f / trace).min(1.0)))
        .collect();
    let frob_norm = stable_sum(&diag.iter().map(|h| h * h).collect::<Vec<_>>()).sqrt();
    Ok(HeterogeneityMatrix { diag, frob_norm })
}

/// Fisher heterogeneity score relative to the value at initialization.
pub fn fhs(current: &HeterogeneityMatrix, initial: &HeterogeneityMatrix) -> FhsValue {
    FhsValue {
        value: current.frob_norm / (initial.frob_norm + FHS_EPSILON),
        h_frob_now: current.frob_norm,
        h_frob_initial: initial.frob_norm,
        epsilon: FHS_EPSILON,
    }
}

/// Per-step specialization rate bound
/// `eta * sqrt(sum_i g_i^2 / Fbar_ii) / sqrt(1 + h_frob / tr(Fbar))`.
pub fn specialization_rate_bound(
    eta: f64,
    router_grad: &[f64],
    mean_fim_diag: &[f64],
    h_frob: f64,
) -> Result<f64> {
    if router_grad.len() != mean_fim_diag.len() {
        return Err(Error::DimensionMismatch {
            context: "specialization_rate_bound",
            expected: mean_fim_diag.len(),
            got: router_grad.len(),
        });
    }
    if mean_fim_diag.is_empty() {
        return Err(Error::invalid("specialization_rate_bound: empty vectors"));
    }
    if let Some(bad) = mean_fim_diag.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::invalid(format!(
            "specialization_rate_bound: non-positive mean FIM diagonal entry {bad}"
        )));
    }
    if !(h_frob >= 0.0) {
        return Err(Error::invalid(format!(
            "specialization_rate_bound: heterogeneity norm must be non-negative, got {h_frob}"
        )));
    }
    let weighted: Vec<f64> = router_grad
        .iter()
        .zip(mean_fim_diag)
        .map(|(g, f)| g * g / f)
        .collect();
    let trace = stable_sum(mean_fim_diag);
    Ok(eta * stable_sum(&weighted).sqrt() / (1.0 + h_frob / trace).sqrt())
}

/// Concentration bound on the failure probability once FHS exceeds one:
/// `min(1, 2d * exp(-n (FHS-1)^2 / (32 M^2)))`. Only meaningful above the
/// threshold; at desk scale it is often vacuous (clamped to 1), which is
/// reported rather than hidden.
pub fn fhs_failure_probability_bound(
    fhs_value: f64,
    n_experts: usize,
    d: usize,
    m: f64,
) -> Result<f64> {
    if !(m > 0.0) {
        return Err(Error::invalid(format!(
            "fhs_failure_probability_bound: M must be positive, got {m}"
        )));
    }
    if !(fhs_value > 1.0) {
        return Err(Error::invalid(
            "fhs_failure_probability_bound: bound applies only above threshold",
        ));
    }
    if n_experts == 0 || d == 0 {
        return Err(Error::invalid(
            "fhs_failure_probability_bound: n and d must be positive",
        ));
    }
    let exponent = -(n_experts as f64) * (fhs_value - 1.0).powi(2) / (32.0 * m * m);
    Ok((2.0 * d as f64 * exponent.exp()).min(1.0))
}

/// Default scale constant for the failure-probability bound: the largest
/// FIM diagonal entry observed across experts (the operator norm of a
/// diagonal matrix), intended to be taken at initialization.
pub fn max_fim_diagonal_entry(fims: &[DiagonalFim]) -> Result<f64> {
    if fims.is_empty() {
        return Err(Error::invalid("max_fim_diagonal_entry: no FIMs supplied"));
    }
    let mut best = 0.0f64;
    for f in fims {
        for &v in &f.diag {
            best = best.max(v);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ExpertArch, Routing};
    use crate::rng::stream;
    use crate::task::{sample_batch, GaussianMixtureSpec};

    // ----------------------------------------------------------------
    // Oracles, written before the implementations they check.
    // ----------------------------------------------------------------

    /// Dense brute-force evaluator of the heterogeneity formula: embeds the
    /// diagonal FIMs as full matrices, forms the weighted mean, and applies
    /// H_jk = Fbar_jk - Fbar_jk^2 / tr(Fbar) entrywise.
    fn brute_force_heterogeneity(fims: &[Vec<f64>], weights: &[f64]) -> (Vec<Vec<f64>>, f64) {
        let d = fims[0].len();
        let mut mean = vec![vec![0.0; d]; d];
        for (f, w) in fims.iter().zip(weights) {
            for j in 0..d {
                mean[j][j] += w * f[j];
            }
        }
        let trace: f64 = (0..d).map(|j| mean[j][j]).sum();
        let mut h = vec![vec![0.0; d]; d];
        let mut sq = 0.0;
        for j in 0..d {
            for k in 0..d {
                h[j][k] = mean[j][k] - mean[j][k] * mean[j][k] / trace;
                sq += h[j][k] * h[j][k];
            }
        }
        (h, sq.sqrt())
    }

    /// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
    fn jacobi_eigenvalues(m: &Mat) -> Vec<f64> {
        assert_eq!(m.rows, m.cols);
        let n = m.rows;
        let mut a: Vec<Vec<f64>> = (0..n).map(|i| m.row(i).to_vec()).collect();
        for _sweep in 0..100 {
            let mut off = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    off += a[i][j] * a[i][j];
                }
            }
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k][p];
                        let akq = a[k][q];
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p][k];
                        let aqk = a[q][k];
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        (0..n).map(|i| a[i][i]).collect()
    }

    #[test]
    fn jacobi_oracle_recovers_known_eigenvalues() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3
        let m = Mat::from_rows(vec![vec![2.0, 1.0], vec![1.0, 2.0]]);
        let mut eig = jacobi_eigenvalues(&m);
        eig.sort_by(f64::total_cmp);
        assert!((eig[0] - 1.0).abs() < 1e-12);
        assert!((eig[1] - 3.0).abs() < 1e-12);
    }

    fn tiny_model(arch: ExpertArch, seed: u64) -> MoEModelState {
        MoEModelState::init(
            3,
            4,
            3,
            1.0,
            Routing::Dense,
            0.0,
            arch,
            1.0,
            &mut stream(seed, "init"),
        )
        .unwrap()
    }

    fn tiny_batch(n: usize, seed: u64) -> LabeledBatch {
        let spec = GaussianMixtureSpec::arranged(3, 4, 2.0, 1.0).unwrap();
        sample_batch(&spec, n, &mut stream(seed, "data"))
    }

    // ----------------------------------------------------------------
    // Diagonal empirical Fisher
    // ----------------------------------------------------------------

    #[test]
    fn expert_loglik_grad_matches_finite_differences() {
        for arch in [ExpertArch::Linear, ExpertArch::Mlp { hidden: 4 }] {
            let model = tiny_model(arch, 9);
            let x = vec![0.4, -0.7, 0.2, 1.1];
            let eps = 1e-6;
            for y in 0..3 {
                let grad = expert_loglik_grad(&model, 1, &x, y).unwrap();
                for idx in 0..grad.len() {
                    let perturbed = |delta: f64| {
                        let mut m = model.clone();
                        match &mut m.experts[1] {
                            ExpertParams::Linear(w) => w.data[idx] += delta,
                            ExpertParams::Mlp { w1, w2 } => {
                                if idx < w1.data.len() {
                                    w1.data[idx] += delta;
                                } else {
                                    w2.data[idx - w1.data.len()] += delta;
                                }
                            }
                        }
                        expert_class_probs(&m, 1, &x).unwrap().values()[y].ln()
                    };
                    let fd = (perturbed(eps) - perturbed(-eps)) / (2.0 * eps);
                    let rel = (grad[idx] - fd).abs() / grad[idx].abs().max(fd.abs()).max(1e-4);
                    assert!(
                        rel < 1e-5,
                        "grad[{idx}] label {y}: analytic {} vs fd {fd}",
                        grad[idx]
                    );
                }
            }
        }
    }

    #[test]
    fn zero_weight_two_class_hand_example() {
        // zero expert weights -> uniform predictive (1/2, 1/2); the gradient
        // entry for (class c, input j) is (1{c=y} - 0.5) * x_j
        let mut model = MoEModelState::init(
            1,
            2,
            2,
            1.0,
            Routing::Dense,
            0.0,
            ExpertArch::Linear,
            1.0,
            &mut stream(1, "init"),
        )
        .unwrap();
        model.experts[0] = ExpertParams::Linear(Mat::zeros(2, 2));
        let batch = LabeledBatch {
            inputs: vec![vec![1.0, 2.0], vec![3.0, -1.0]],
            labels: vec![0, 1],
        };
        let fim = estimate_diagonal_fim(&model, 0, &batch).unwrap();
        // hand evaluation: sample 1 grads (0.5, 1.0, -0.5, -1.0),
        // sample 2 grads (-1.5, 0.5, 1.5, -0.5); squared means below
        let expected = [1.25, 0.625, 1.25, 0.625];
        for (got, want) in fim.diag.iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
        }
        assert_eq!(fim.batch_size_used, 2);
        assert_eq!(fim.expert_id, 0);
    }

    #[test]
    fn duplicated_batch_gives_identical_fim() {
        let model = tiny_model(ExpertArch::Linear, 2);
        let batch = tiny_batch(16, 3);
        let doubled = LabeledBatch {
            inputs: batch
                .inputs
                .iter()
                .chain(&batch.inputs)
                .cloned()
                .collect(),
            labels: batch.labels.iter().chain(&batch.labels).copied().collect(),
        };
        let a = estimate_diagonal_fim(&model, 0, &batch).unwrap();
        let b = estimate_diagonal_fim(&model, 0, &doubled).unwrap();
        for (x, y) in a.diag.iter().zip(&b.diag) {
            let rel = (x - y).abs() / x.abs().max(1e-300);
            assert!(rel < 1e-14, "{x} vs {y}");
        }
    }

    #[test]
    fn single_sample_fim_is_squared_gradient() {
        let model = tiny_model(ExpertArch::Mlp { hidden: 3 }, 4);
        let batch = tiny_batch(1, 5);
        let fim = estimate_diagonal_fim(&model, 2, &batch).unwrap();
        let grad = expert_loglik_grad(&model, 2, &batch.inputs[0], batch.labels[0]).unwrap();
        for (f, g) in fim.diag.iter().zip(&grad) {
            assert_eq!(*f, g * g);
        }
    }

    #[test]
    fn fim_is_bitwise_invariant_to_sample_order() {
        let model = tiny_model(ExpertArch::Linear, 6);
        let batch = tiny_batch(32, 7);
        let mut rng = stream(8, "shuffle");
        let mut order: Vec<usize> = (0..batch.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let shuffled = LabeledBatch {
            inputs: order.iter().map(|&i| batch.inputs[i].clone()).collect(),
            labels: order.iter().map(|&i| batch.labels[i]).collect(),
        };
        let a = estimate_diagonal_fim(&model, 0, &batch).unwrap();
        let b = estimate_diagonal_fim(&model, 0, &shuffled).unwrap();
        for (x, y) in a.diag.iter().zip(&b.diag) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn parallel_estimation_matches_serial_bitwise() {
        let model = tiny_model(ExpertArch::Linear, 10);
        let batch = tiny_batch(64, 11);
        let all = estimate_all_diagonal_fims(&model, &batch).unwrap();
        assert_eq!(all.len(), 3);
        for (e, fim) in all.iter().enumerate() {
            let solo = estimate_diagonal_fim(&model, e, &batch).unwrap();
            assert_eq!(fim, &solo);
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let model = tiny_model(ExpertArch::Linear, 12);
        let empty = LabeledBatch {
            inputs: vec![],
            labels: vec![],
        };
        assert!(estimate_diagonal_fim(&model, 0, &empty).is_err());
    }

    // ----------------------------------------------------------------
    // Exact oracle
    // ----------------------------------------------------------------

    #[test]
    fn exact_fim_is_symmetric_psd_on_random_tiny_models() {
        for seed in 0..5u64 {
            for arch in [ExpertArch::Linear, ExpertArch::Mlp { hidden: 3 }] {
                let model = tiny_model(arch, 100 + seed);
                let batch = tiny_batch(6, 200 + seed);
                let fim = exact_fim_oracle(&model, 0, &batch.inputs).unwrap();
                for i in 0..fim.rows {
                    for j in 0..fim.cols {
                        assert!((fim.get(i, j) - fim.get(j, i)).abs() < 1e-14);
                    }
                }
                let eig = jacobi_eigenvalues(&fim);
                let min = eig.iter().fold(f64::INFINITY, |a, &b| a.min(b));
                assert!(min >= -1e-10, "min eigenvalue {min}");
            }
        }
    }

    #[test]
    fn exact_fim_matches_scalar_logistic_closed_form() {
        // one input dimension, two classes: F = p(1-p) x^2 * [[1,-1],[-1,1]],
        // so the scalar logistic Fisher p(1-p)x^2 sits on the diagonal
        let mut model = MoEModelState::init(
            1,
            1,
            2,
            1.0,
            Routing::Dense,
            0.0,
            ExpertArch::Linear,
            1.0,
            &mut stream(13, "init"),
        )
        .unwrap();
        model.experts[0] = ExpertParams::Linear(
            Mat::from_rows(vec![vec![0.8], vec![-0.3]]),
        );
        let x = 1.7;
        let fim = exact_fim_oracle(&model, 0, &[vec![x]]).unwrap();
        let p = expert_class_probs(&model, 0, &[x]).unwrap().values()[0];
        let expected = p * (1.0 - p) * x * x;
        assert!((fim.get(0, 0) - expected).abs() < 1e-10);
        assert!((fim.get(1, 1) - expected).abs() < 1e-10);
        assert!((fim.get(0, 1) + expected).abs() < 1e-10);
        assert!((fim.get(1, 0) + expected).abs() < 1e-10);
    }

    #[test]
    fn exact_fim_dimension_limit_enforced() {
        // 30 classes x 20 inputs = 600 parameters > limit
        let model = MoEModelState::init(
            1,
            20,
            30,
            1.0,
            Routing::Dense,
            0.0,
            ExpertArch::Linear,
            1.0,
            &mut stream(14, "init"),
        )
        .unwrap();
        let inputs = vec![vec![0.0; 20]];
        let err = exact_fim_oracle(&model, 0, &inputs).unwrap_err();
        assert!(err.to_string().contains("limit"));
    }

    #[test]
    fn diagonal_estimator_tracks_exact_oracle_under_model_labels() {
        // estimate with labels drawn from the expert's own predictive
        // distribution, so the empirical and expected Fisher agree
        let model = tiny_model(ExpertArch::Linear, 15);
        let spec = GaussianMixtureSpec::arranged(3, 4, 2.0, 1.0).unwrap();
        let inputs = sample_batch(&spec, 10_000, &mut stream(16, "data")).inputs;
        let labels =
            sample_expert_labels(&model, 0, &inputs, &mut stream(17, "labels")).unwrap();
        let batch = LabeledBatch {
            inputs: inputs.clone(),
            labels,
        };
        let estimated = estimate_diagonal_fim(&model, 0, &batch).unwrap();
        let exact = exact_fim_oracle(&model, 0, &inputs).unwrap();
        let exact_diag: Vec<f64> = (0..exact.rows).map(|i| exact.get(i, i)).collect();
        let corr = crate::linalg::pearson_correlation(&estimated.diag, &exact_diag).unwrap();
        assert!(corr >= 0.95, "diagonal correlation {corr}");
    }

    // ----------------------------------------------------------------
    // Heterogeneity matrix and FHS
    // ----------------------------------------------------------------

    fn fims_from(diags: Vec<Vec<f64>>) -> Vec<DiagonalFim> {
        diags
            .into_iter()
            .enumerate()
            .map(|(e, diag)| DiagonalFim {
                expert_id: e,
                diag,
                batch_size_used: 1,
            })
            .collect()
    }

    #[test]
    fn identity_fims_give_known_heterogeneity() {
        // all FIMs identity at d=2: diagonal entries 1 - 1/2 = 0.5 and
        // Frobenius norm sqrt(0.5), for ANY routing weights
        for weights in [vec![0.5, 0.5], vec![0.9, 0.1], vec![0.25, 0.75]] {
            let fims = fims_from(vec![vec![1.0, 1.0], vec![1.0, 1.0]]);
            let p_bar = ProbabilityVector::new(weights).unwrap();
            let h = heterogeneity_matrix(&fims, &p_bar).unwrap();
            assert!((h.diag[0] - 0.5).abs() < 1e-12);
            assert!((h.diag[1] - 0.5).abs() < 1e-12);
            assert!((h.frob_norm - 0.5f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn single_expert_formula_collapse() {
        let fims = fims_from(vec![vec![2.0, 3.0, 5.0]]);
        let p_bar = ProbabilityVector::new(vec![1.0]).unwrap();
        let h = heterogeneity_matrix(&fims, &p_bar).unwrap();
        let trace = 10.0;
        for (j, f) in [2.0, 3.0, 5.0].iter().enumerate() {
            assert!((h.diag[j] - (f - f * f / trace)).abs() < 1e-12);
        }
    }

    #[test]
    fn heterogeneity_matches_brute_force_on_random_instances() {
        let mut rng = stream(18, "fuzz");
        for _ in 0..100 {
            let n = rng.gen_range(1..=8usize);
            let d = rng.gen_range(1..=20usize);
            let diags: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.gen::<f64>() * 3.0).collect())
                .collect();
            let weights: Vec<f64> = {
                let raw: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 0.01).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            };
            let (dense_h, dense_frob) = brute_force_heterogeneity(&diags, &weights);
            let fims = fims_from(diags);
            let p_bar = ProbabilityVector::new(weights).unwrap();
            let h = heterogeneity_matrix(&fims, &p_bar).unwrap();
            for j in 0..d {
                assert!(
                    (h.diag[j] - dense_h[j][j]).abs() < 1e-12,
                    "diag {j}: {} vs {}",
                    h.diag[j],
                    dense_h[j][j]
                );
                for k in 0..d {
                    if j != k {
                        assert_eq!(dense_h[j][k], 0.0);
                    }
                }
            }
            assert!((h.frob_norm - dense_frob).abs() < 1e-10);
            // entries are non-negative since Fbar_jj <= trace
            assert!(h.diag.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn zero_fisher_mass_is_degenerate() {
        let fims = fims_from(vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
        let p_bar = ProbabilityVector::uniform(2).unwrap();
        let err = heterogeneity_matrix(&fims, &p_bar).unwrap_err();
        assert!(err.to_string().contains("degenerate Fisher mass"));
    }

    #[test]
    fn heterogeneity_input_validation() {
        let fims = fims_from(vec![vec![1.0], vec![1.0, 2.0]]);
        let p_bar = ProbabilityVector::uniform(2).unwrap();
        assert!(heterogeneity_matrix(&fims, &p_bar).is_err());
        let fims = fims_from(vec![vec![1.0]]);
        assert!(heterogeneity_matrix(&fims, &p_bar).is_err());
        assert!(heterogeneity_matrix(&[], &p_bar).is_err());
        let fims = fims_from(vec![vec![-1.0, 2.0], vec![1.0, 2.0]]);
        assert!(heterogeneity_matrix(&fims, &p_bar).is_err());
    }

    #[test]
    fn fhs_frozen_cases() {
        let mk = |frob: f64| HeterogeneityMatrix {
            diag: vec![frob],
            frob_norm: frob,
        };
        // current == initial -> exactly h/(h + eps)
        let h = mk(0.7);
        let v = fhs(&h, &h);
        assert_eq!(v.value, 0.7 / (0.7 + 1e-8));
        assert!((v.value - 1.0).abs() < 1e-7);
        // zero current -> 0
        assert_eq!(fhs(&mk(0.0), &mk(0.4)).value, 0.0);
        // ratio 2/4 -> 0.5 within 1e-8 relative
        let v = fhs(&mk(2.0), &mk(4.0));
        assert!((v.value - 0.5).abs() / 0.5 < 1e-8);
        assert_eq!(v.h_frob_now, 2.0);
        assert_eq!(v.h_frob_initial, 4.0);
        assert_eq!(v.epsilon, 1e-8);
    }

    #[test]
    fn fhs_is_scale_free_in_pairs() {
        let mut rng = stream(19, "scale");
        for _ in 0..50 {
            let d = rng.gen_range(1..=10usize);
            let a: Vec<f64> = (0..d).map(|_| rng.gen::<f64>()).collect();
            let b: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() + 0.1).collect();
            let c = rng.gen::<f64>() * 10.0 + 0.1;
            let frob = |v: &[f64]| stable_sum(&v.iter().map(|x| x * x).collect::<Vec<_>>()).sqrt();
            let mk = |v: &[f64]| HeterogeneityMatrix {
                diag: v.to_vec(),
                frob_norm: frob(v),
            };
            let scaled_a: Vec<f64> = a.iter().map(|v| v * c).collect();
            let scaled_b: Vec<f64> = b.iter().map(|v| v * c).collect();
            let base = fhs(&mk(&a), &mk(&b)).value;
            let scaled = fhs(&mk(&scaled_a), &mk(&scaled_b)).value;
            assert!(
                (base - scaled).abs() < 1e-7,
                "fhs not pair-scale-free: {base} vs {scaled}"
            );
        }
    }

    // ----------------------------------------------------------------
    // Bounds
    // ----------------------------------------------------------------

    #[test]
    fn specialization_rate_bound_cases() {
        // zero gradient -> 0
        let v = specialization_rate_bound(0.5, &[0.0, 0.0], &[1.0, 2.0], 1.0).unwrap();
        assert_eq!(v, 0.0);
        // no heterogeneity -> plain eta * |g|_{Fbar^{ -1}}
        let v = specialization_rate_bound(2.0, &[3.0, 4.0], &[1.0, 4.0], 0.0).unwrap();
        let expected = 2.0 * (9.0 / 1.0 + 16.0 / 4.0f64).sqrt();
        assert!((v - expected).abs() < 1e-12);
        // frozen arithmetic example
        let v = specialization_rate_bound(1.0, &[1.0, 0.0], &[1.0, 1.0], 3.0).unwrap();
        assert!((v - 1.0 / 2.5f64.sqrt()).abs() < 1e-12);
        assert!((v - 0.63246).abs() < 1e-5);
        // validation
        assert!(specialization_rate_bound(1.0, &[1.0], &[0.0], 0.0).is_err());
        assert!(specialization_rate_bound(1.0, &[1.0], &[1.0, 2.0], 0.0).is_err());
        assert!(specialization_rate_bound(1.0, &[], &[], 0.0).is_err());
        assert!(specialization_rate_bound(1.0, &[1.0], &[1.0], -1.0).is_err());
    }

    #[test]
    fn failure_probability_bound_cases() {
        // the documented desk-scale case saturates at 1
        let v = fhs_failure_probability_bound(1.5, 8, 10, 1.0).unwrap();
        assert_eq!(v, 1.0);
        // raw value before the clamp is 20 * exp(-1/16)
        let raw = 20.0 * (-0.0625f64).exp();
        assert!((raw - 18.788261256269517).abs() < 1e-12);
        // growing n drives the bound to zero
        let v = fhs_failure_probability_bound(1.5, 100_000, 10, 1.0).unwrap();
        assert!(v < 1e-100);
        // near-threshold values saturate
        let v = fhs_failure_probability_bound(1.0 + 1e-9, 8, 10, 1.0).unwrap();
        assert_eq!(v, 1.0);
        // validation
        assert!(fhs_failure_probability_bound(1.0, 8, 10, 1.0).is_err());
        assert!(fhs_failure_probability_bound(0.5, 8, 10, 1.0).is_err());
        assert!(fhs_failure_probability_bound(1.5, 8, 10, 0.0).is_err());
        assert!(fhs_failure_probability_bound(1.5, 0, 10, 1.0).is_err());
    }

    #[test]
    fn max_fim_entry_helper() {
        let fims = fims_from(vec![vec![0.1, 0.9], vec![0.4, 0.2]]);
        assert_eq!(max_fim_diagonal_entry(&fims).unwrap(), 0.9);
        assert!(max_fim_diagonal_entry(&[]).is_err());
    }
}

//! Mixture-of-experts classifier with a temperature-softmax router.
//!
//! The model is deliberately small and fully explicit: a linear router
//! produces logits `r = W_r x`, dense routing probabilities are
//! `p = softmax(r / tau)`, gates are either `p` itself (dense mode) or the
//! renormalized top-k entries, and the class logits are the gate-weighted
//! mixture of per-expert class logits followed by a softmax. Experts are
//! linear maps or one-hidden-layer tanh networks. All gradients are analytic
//! and checked against central finite differences in the tests.
//!
//! The load-balancing term is `lambda * n * sum_i pbar_i * f_i`, where
//! `pbar` is the batch mean of the dense routing probabilities and `f_i` the
//! fraction of samples whose top-1 expert is `i`; its gradient flows through
//! `pbar` only (the assignment fractions are locally constant).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{dot, Mat};
use crate::simplex::{softmax, ProbabilityVector};
use crate::task::LabeledBatch;
use crate::{Error, Result};

/// Version tag written into every serialized checkpoint.
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Routing mode: dense (every expert active) or sparse top-k.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Routing {
    Dense,
    TopK(usize),
}

/// Parameters of one expert. Flattening order (used by Fisher estimation):
/// linear experts are the row-major class-by-input matrix; MLP experts are
/// the row-major first layer followed by the row-major second layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ExpertParams {
    Linear(Mat),
    Mlp { w1: Mat, w2: Mat },
}

impl ExpertParams {
    pub fn param_count(&self) -> usize {
        match self {
            ExpertParams::Linear(w) => w.data.len(),
            ExpertParams::Mlp { w1, w2 } => w1.data.len() + w2.data.len(),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            ExpertParams::Linear(w) => w.is_finite(),
            ExpertParams::Mlp { w1, w2 } => w1.is_finite() && w2.is_finite(),
        }
    }

    /// All parameters in the documented flattening order.
    pub fn flatten(&self) -> Vec<f64> {
        match self {
            ExpertParams::Linear(w) => w.data.clone(),
            ExpertParams::Mlp { w1, w2 } => w1.data.iter().chain(&w2.data).copied().collect(),
        }
    }

    fn zeros_like(&self) -> ExpertParams {
        match self {
            ExpertParams::Linear(w) => ExpertParams::Linear(Mat::zeros(w.rows, w.cols)),
            ExpertParams::Mlp { w1, w2 } => ExpertParams::Mlp {
                w1: Mat::zeros(w1.rows, w1.cols),
                w2: Mat::zeros(w2.rows, w2.cols),
            },
        }
    }

    fn frobenius_norm_squared(&self) -> f64 {
        match self {
            ExpertParams::Linear(w) => w.data.iter().map(|v| v * v).sum(),
            ExpertParams::Mlp { w1, w2 } => w1
                .data
                .iter()
                .chain(&w2.data)
                .map(|v| v * v)
                .sum(),
        }
    }

    fn add_scaled(&mut self, alpha: f64, other: &ExpertParams) {
        match (self, other) {
            (ExpertParams::Linear(a), ExpertParams::Linear(b)) => a.add_scaled(alpha, b),
            (
                ExpertParams::Mlp { w1: a1, w2: a2 },
                ExpertParams::Mlp { w1: b1, w2: b2 },
            ) => {
                a1.add_scaled(alpha, b1);
                a2.add_scaled(alpha, b2);
            }
            _ => panic!("expert architecture mismatch"),
        }
    }
}

/// Architecture selector for experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExpertArch {
    Linear,
    Mlp { hidden: usize },
}

/// Full trainable state of the mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoEModelState {
    /// Router weights, one row of logit weights per expert.
    pub router_weights: Mat,
    /// Per-expert parameters (all the same architecture).
    pub experts: Vec<ExpertParams>,
    /// Router softmax temperature (> 0).
    pub tau: f64,
    /// Routing mode.
    pub routing: Routing,
    /// Load-balancing weight (>= 0).
    pub lambda: f64,
    /// Number of optimizer steps applied so far.
    pub step: usize,
}

impl MoEModelState {
    /// Initializes a model: router entries are Xavier-uniform scaled by
    /// `router_init_scale`, experts are Xavier-uniform at scale 1.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        n_experts: usize,
        input_dim: usize,
        n_classes: usize,
        tau: f64,
        routing: Routing,
        lambda: f64,
        arch: ExpertArch,
        router_init_scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_experts == 0 || input_dim == 0 || n_classes == 0 {
            return Err(Error::invalid(
                "model dimensions must all be at least one",
            ));
        }
        if !(tau > 0.0) {
            return Err(Error::invalid(format!(
                "router temperature must be positive, got {tau}"
            )));
        }
        if !(lambda >= 0.0) {
            return Err(Error::invalid(format!(
                "load-balancing weight must be non-negative, got {lambda}"
            )));
        }
        if let Routing::TopK(k) = routing {
            if k == 0 || k > n_experts {
                return Err(Error::invalid(format!(
                    "top-k must be in [1, {n_experts}], got {k}"
                )));
            }
        }
        if !(router_init_scale > 0.0) {
            return Err(Error::invalid(format!(
                "router init scale must be positive, got {router_init_scale}"
            )));
        }
        let router_weights = Mat::xavier_uniform(n_experts, input_dim, router_init_scale, rng);
        let experts = (0..n_experts)
            .map(|_| sample_expert(arch, input_dim, n_classes, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(MoEModelState {
            router_weights,
            experts,
            tau,
            routing,
            lambda,
            step: 0,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn input_dim(&self) -> usize {
        self.router_weights.cols
    }

    pub fn n_classes(&self) -> usize {
        match &self.experts[0] {
            ExpertParams::Linear(w) => w.rows,
            ExpertParams::Mlp { w2, .. } => w2.rows,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.router_weights.is_finite() && self.experts.iter().all(ExpertParams::is_finite)
    }

    /// Class logits of a single expert on one input, bypassing the router.
    pub fn expert_logits(&self, expert: usize, x: &[f64]) -> Vec<f64> {
        match &self.experts[expert] {
            ExpertParams::Linear(w) => w.matvec(x),
            ExpertParams::Mlp { w1, w2 } => {
                let h: Vec<f64> = w1.matvec(x).into_iter().map(f64::tanh).collect();
                w2.matvec(&h)
            }
        }
    }
}

fn sample_expert(
    arch: ExpertArch,
    input_dim: usize,
    n_classes: usize,
    rng: &mut impl Rng,
) -> Result<ExpertParams> {
    match arch {
        ExpertArch::Linear => Ok(ExpertParams::Linear(Mat::xavier_uniform(
            n_classes, input_dim, 1.0, rng,
        ))),
        ExpertArch::Mlp { hidden } => {
            if hidden == 0 {
                return Err(Error::invalid("mlp expert needs a non-empty hidden layer"));
            }
            Ok(ExpertParams::Mlp {
                w1: Mat::xavier_uniform(hidden, input_dim, 1.0, rng),
                w2: Mat::xavier_uniform(n_classes, hidden, 1.0, rng),
            })
        }
    }
}

/// Routing decision for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateOutput {
    /// Dense softmax over all experts (pre-top-k).
    pub routing_probs: ProbabilityVector,
    /// Mixture weights, length n: zero off the selected set, summing to one.
    pub gates: Vec<f64>,
    /// Selected expert indices, ascending.
    pub selected: Vec<usize>,
}

/// Top-1 expert of a dense routing distribution (ties -> lowest index).
pub fn top1_expert(routing_probs: &ProbabilityVector) -> usize {
    let values = routing_probs.values();
    let mut best = 0;
    for i in 1..values.len() {
        if values[i] > values[best] {
            best = i;
        }
    }
    best
}

fn gate_one(model: &MoEModelState, x: &[f64]) -> Result<GateOutput> {
    if x.len() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "forward input",
            expected: model.input_dim(),
            got: x.len(),
        });
    }
    let logits = model.router_weights.matvec(x);
    let routing_probs = softmax(&logits, model.tau)?;
    let n = routing_probs.len();
    match model.routing {
        Routing::Dense => Ok(GateOutput {
            gates: routing_probs.values().to_vec(),
            selected: (0..n).collect(),
            routing_probs,
        }),
        Routing::TopK(k) => {
            // order by probability descending, index ascending on ties
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                routing_probs.values()[b]
                    .total_cmp(&routing_probs.values()[a])
                    .then(a.cmp(&b))
            });
            let mut selected: Vec<usize> = order[..k].to_vec();
            selected.sort_unstable();
            let mass: f64 = selected.iter().map(|&i| routing_probs.values()[i]).sum();
            let mut gates = vec![0.0; n];
            for &i in &selected {
                gates[i] = routing_probs.values()[i] / mass;
            }
            Ok(GateOutput {
                routing_probs,
                gates,
                selected,
            })
        }
    }
}

/// Cached activations for one sample, reused by the backward pass.
struct SampleForward {
    gate: GateOutput,
    /// Expert outputs for selected experts: (expert index, hidden, class logits).
    expert_outputs: Vec<(usize, Option<Vec<f64>>, Vec<f64>)>,
    class_probs: Vec<f64>,
}

fn forward_sample(model: &MoEModelState, x: &[f64]) -> Result<SampleForward> {
    let gate = gate_one(model, x)?;
    let n_classes = model.n_classes();
    let mut mixture = vec![0.0; n_classes];
    let mut expert_outputs = Vec::with_capacity(gate.selected.len());
    for &e in &gate.selected {
        let (hidden, logits) = match &model.experts[e] {
            ExpertParams::Linear(w) => (None, w.matvec(x)),
            ExpertParams::Mlp { w1, w2 } => {
                let h: Vec<f64> = w1.matvec(x).into_iter().map(f64::tanh).collect();
                let out = w2.matvec(&h);
                (Some(h), out)
            }
        };
        for (m, l) in mixture.iter_mut().zip(&logits) {
            *m += gate.gates[e] * l;
        }
        expert_outputs.push((e, hidden, logits));
    }
    let class_probs = softmax(&mixture, 1.0)?.into_values();
    Ok(SampleForward {
        gate,
        expert_outputs,
        class_probs,
    })
}

/// Batch forward: per-sample class probabilities and gating decisions.
pub fn forward(
    model: &MoEModelState,
    inputs: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, Vec<GateOutput>)> {
    let mut class_probs = Vec::with_capacity(inputs.len());
    let mut gates = Vec::with_capacity(inputs.len());
    for x in inputs {
        let sf = forward_sample(model, x)?;
        class_probs.push(sf.class_probs);
        gates.push(sf.gate);
    }
    Ok((class_probs, gates))
}

/// Mean dense routing distribution over a set of inputs (pre-top-k).
pub fn marginal_routing(model: &MoEModelState, inputs: &[Vec<f64>]) -> Result<ProbabilityVector> {
    if inputs.is_empty() {
        return Err(Error::invalid("marginal_routing: empty input set"));
    }
    let n = model.n_experts();
    let mut acc = vec![0.0; n];
    for x in inputs {
        let gate = gate_one(model, x)?;
        for (a, p) in acc.iter_mut().zip(gate.routing_probs.values()) {
            *a += p;
        }
    }
    let b = inputs.len() as f64;
    ProbabilityVector::new(acc.into_iter().map(|v| v / b).collect())
}

/// Load-balancing penalty: lambda * n * sum_i pbar_i * f_i, where pbar is the
/// batch-mean dense routing probability and f the top-1 assignment fractions.
pub fn aux_loss(
    routing_probs_batch: &[ProbabilityVector],
    assignments_batch: &[usize],
    lambda: f64,
    n_experts: usize,
) -> Result<f64> {
    if routing_probs_batch.is_empty() {
        return Err(Error::invalid("aux_loss: empty batch"));
    }
    if routing_probs_batch.len() != assignments_batch.len() {
        return Err(Error::DimensionMismatch {
            context: "aux_loss batch",
            expected: routing_probs_batch.len(),
            got: assignments_batch.len(),
        });
    }
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!(
            "aux_loss: lambda must be non-negative, got {lambda}"
        )));
    }
    let b = routing_probs_batch.len() as f64;
    let mut pbar = vec![0.0; n_experts];
    for p in routing_probs_batch {
        if p.len() != n_experts {
            return Err(Error::DimensionMismatch {
                context: "aux_loss routing probs",
                expected: n_experts,
                got: p.len(),
            });
        }
        for (a, v) in pbar.iter_mut().zip(p.values()) {
            *a += v / b;
        }
    }
    let mut fractions = vec![0.0; n_experts];
    for &a in assignments_batch {
        if a >= n_experts {
            return Err(Error::invalid(format!(
                "aux_loss: assignment {a} out of range for {n_experts} experts"
            )));
        }
        fractions[a] += 1.0 / b;
    }
    Ok(lambda * n_experts as f64 * dot(&pbar, &fractions))
}

/// Loss values for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task_loss: f64,
    pub aux_loss: f64,
    pub total: f64,
    /// Frobenius norm of the router gradient of the total loss.
    pub router_grad_norm: f64,
}

/// Gradients with the same shapes as the model parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub router: Mat,
    pub experts: Vec<ExpertParams>,
}

impl Gradients {
    pub fn router_norm(&self) -> f64 {
        self.router.frobenius_norm()
    }

    /// Norm of the full parameter gradient (router and experts together).
    pub fn full_norm(&self) -> f64 {
        let mut total = self.router.data.iter().map(|v| v * v).sum::<f64>();
        for e in &self.experts {
            total += e.frobenius_norm_squared();
        }
        total.sqrt()
    }
}

/// Computes the batch loss and its analytic gradients.
///
/// Cross-entropy of the gated mixture plus the load-balancing penalty; the
/// penalty's gradient flows through the batch-mean routing probabilities
/// while the assignment fractions are treated as locally constant.
pub fn backward(model: &MoEModelState, batch: &LabeledBatch) -> Result<(LossBreakdown, Gradients)> {
    if batch.is_empty() {
        return Err(Error::invalid("backward: empty batch"));
    }
    if batch.inputs.len() != batch.labels.len() {
        return Err(Error::DimensionMismatch {
            context: "backward batch",
            expected: batch.inputs.len(),
            got: batch.labels.len(),
        });
    }
    let n = model.n_experts();
    let n_classes = model.n_classes();
    let b = batch.len() as f64;

    // forward pass with caches
    let mut samples = Vec::with_capacity(batch.len());
    for (x, y) in batch.inputs.iter().zip(&batch.labels) {
        if *y >= n_classes {
            return Err(Error::invalid(format!(
                "backward: label {y} out of range for {n_classes} classes"
            )));
        }
        samples.push(forward_sample(model, x)?);
    }

    // losses; a true-class probability that underflows to zero makes the
    // loss +inf, which callers treat as divergence
    let mut task_loss = 0.0;
    for (sf, y) in samples.iter().zip(&batch.labels) {
        task_loss -= sf.class_probs[*y].ln() / b;
    }
    let routing_probs: Vec<ProbabilityVector> = samples
        .iter()
        .map(|s| s.gate.routing_probs.clone())
        .collect();
    let assignments: Vec<usize> = samples
        .iter()
        .map(|s| top1_expert(&s.gate.routing_probs))
        .collect();
    let aux = aux_loss(&routing_probs, &assignments, model.lambda, n)?;
    let total = task_loss + aux;

    // assignment fractions for the penalty gradient
    let mut fractions = vec![0.0; n];
    for &a in &assignments {
        fractions[a] += 1.0 / b;
    }
    let aux_dp_common: Vec<f64> = fractions
        .iter()
        .map(|f| model.lambda * n as f64 * f / b)
        .collect();

    let mut grad_router = Mat::zeros(n, model.input_dim());
    let mut grad_experts: Vec<ExpertParams> =
        model.experts.iter().map(ExpertParams::zeros_like).collect();

    for ((sf, x), y) in samples.iter().zip(&batch.inputs).zip(&batch.labels) {
        // d task / d mixture logits, already divided by batch size
        let mut dz: Vec<f64> = sf.class_probs.clone();
        dz[*y] -= 1.0;
        for v in &mut dz {
            *v /= b;
        }

        // expert parameter gradients and d task / d gate
        let mut dgate = vec![0.0; n];
        for (e, hidden, logits) in &sf.expert_outputs {
            let g = sf.gate.gates[*e];
            dgate[*e] = dot(logits, &dz);
            match (&mut grad_experts[*e], &model.experts[*e]) {
                (ExpertParams::Linear(gw), ExpertParams::Linear(_)) => {
                    gw.add_outer(g, &dz, x);
                }
                (ExpertParams::Mlp { w1: g1, w2: g2 }, ExpertParams::Mlp { w2, .. }) => {
                    let h = hidden.as_ref().expect("mlp cache");
                    g2.add_outer(g, &dz, h);
                    // backprop through tanh: dpre = (w2^T (g*dz)) * (1 - h^2)
                    let mut dpre = vec![0.0; h.len()];
                    for (j, hj) in h.iter().enumerate() {
                        let mut s = 0.0;
                        for c in 0..n_classes {
                            s += w2.get(c, j) * dz[c];
                        }
                        dpre[j] = g * s * (1.0 - hj * hj);
                    }
                    g1.add_outer(1.0, &dpre, x);
                }
                _ => unreachable!("gradient/parameter architecture mismatch"),
            }
        }

        // d task / d routing probs (through gate renormalization)
        let p = sf.gate.routing_probs.values();
        let mut dp = vec![0.0; n];
        match model.routing {
            Routing::Dense => dp.copy_from_slice(&dgate),
            Routing::TopK(_) => {
                let mass: f64 = sf.gate.selected.iter().map(|&i| p[i]).sum();
                let weighted: f64 = sf
                    .gate
                    .selected
                    .iter()
                    .map(|&i| dgate[i] * p[i])
                    .sum();
                for &i in &sf.gate.selected {
                    dp[i] = dgate[i] / mass - weighted / (mass * mass);
                }
            }
        }
        // penalty gradient through the batch-mean routing probabilities
        for (d, a) in dp.iter_mut().zip(&aux_dp_common) {
            *d += a;
        }

        // d / d router logits via the softmax Jacobian (symmetric)
        let pdp: f64 = p.iter().zip(&dp).map(|(pi, di)| pi * di).sum();
        let dr: Vec<f64> = p
            .iter()
            .zip(&dp)
            .map(|(pi, di)| pi * (di - pdp) / model.tau)
            .collect();
        grad_router.add_outer(1.0, &dr, x);
    }

    let breakdown = LossBreakdown {
        task_loss,
        aux_loss: aux,
        total,
        router_grad_norm: grad_router.frobenius_norm(),
    };
    let grads = Gradients {
        router: grad_router,
        experts: grad_experts,
    };
    Ok((breakdown, grads))
}

/// One plain gradient-descent step. Returns the pre-step loss; errors
/// without touching the model if the loss is not finite.
pub fn train_step(
    model: &mut MoEModelState,
    batch: &LabeledBatch,
    eta: f64,
) -> Result<LossBreakdown> {
    // eta = 0 is allowed: it produces a deliberately frozen trajectory
    if !(eta >= 0.0) {
        return Err(Error::invalid(format!(
            "train_step: learning rate must be non-negative, got {eta}"
        )));
    }
    let (loss, grads) = backward(model, batch)?;
    if !loss.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: model.step,
            task_loss: loss.task_loss,
            aux_loss: loss.aux_loss,
        });
    }
    apply_sgd(model, &grads, eta);
    Ok(loss)
}

/// Applies `W -= eta * grad` to every parameter block and bumps the step.
pub fn apply_sgd(model: &mut MoEModelState, grads: &Gradients, eta: f64) {
    model.router_weights.add_scaled(-eta, &grads.router);
    for (e, g) in model.experts.iter_mut().zip(&grads.experts) {
        e.add_scaled(-eta, g);
    }
    model.step += 1;
}

/// Replaces every expert with a fresh Xavier draw, leaving the router bitwise
/// untouched; optionally halves the balancing weight. The step counter is
/// preserved so training resumes where it left off.
pub fn reinit_experts_keep_router(
    model: &mut MoEModelState,
    rng: &mut impl Rng,
    halve_lambda: bool,
) -> Result<()> {
    let (input_dim, n_classes) = (model.input_dim(), model.n_classes());
    let arch = match &model.experts[0] {
        ExpertParams::Linear(_) => ExpertArch::Linear,
        ExpertParams::Mlp { w1, .. } => ExpertArch::Mlp { hidden: w1.rows },
    };
    for e in model.experts.iter_mut() {
        *e = sample_expert(arch, input_dim, n_classes, rng)?;
    }
    if halve_lambda {
        model.lambda /= 2.0;
    }
    Ok(())
}

/// Replaces the router with a fresh Xavier draw at scale one (used by the
/// full-reinitialization intervention arm).
pub fn reinit_router(model: &mut MoEModelState, rng: &mut impl Rng) {
    let (n, d) = (model.router_weights.rows, model.router_weights.cols);
    model.router_weights = Mat::xavier_uniform(n, d, 1.0, rng);
}

/// Self-describing checkpoint wrapper with a format version.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: MoEModelState,
}

/// Serializes a model checkpoint to JSON text.
pub fn save_checkpoint(model: &MoEModelState) -> Result<String> {
    let cp = Checkpoint {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model: model.clone(),
    };
    Ok(serde_json::to_string_pretty(&cp)?)
}

/// Restores a model from checkpoint text, rejecting unknown format versions.
pub fn load_checkpoint(text: &str) -> Result<MoEModelState> {
    let cp: Checkpoint = serde_json::from_str(text)?;
    if cp.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::invalid(format!(
            "unsupported checkpoint format version {} (expected {})",
            cp.format_version, CHECKPOINT_FORMAT_VERSION
        )));
    }
    if !cp.model.is_finite() {
        return Err(Error::invalid("checkpoint contains non-finite weights"));
    }
    Ok(cp.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::task::{sample_batch, GaussianMixtureSpec};

    fn small_model(routing: Routing, lambda: f64, arch: ExpertArch) -> MoEModelState {
        MoEModelState::init(
            4,
            6,
            3,
            1.0,
            routing,
            lambda,
            arch,
            1.0,
            &mut stream(42, "init"),
        )
        .unwrap()
    }

    fn small_batch(n: usize, seed: u64) -> LabeledBatch {
        let spec = GaussianMixtureSpec::arranged(3, 6, 2.0, 1.0).unwrap();
        sample_batch(&spec, n, &mut stream(seed, "data"))
    }

    // -------------------------------------------------------------
    // Finite-difference oracle: central differences on the total loss.
    // -------------------------------------------------------------
    fn loss_of(model: &MoEModelState, batch: &LabeledBatch) -> f64 {
        backward(model, batch).unwrap().0.total
    }

    fn fd_check(model: &MoEModelState, batch: &LabeledBatch) {
        let eps = 1e-6;
        let (_, grads) = backward(model, batch).unwrap();
        // router block
        for idx in 0..model.router_weights.data.len() {
            let mut plus = model.clone();
            plus.router_weights.data[idx] += eps;
            let mut minus = model.clone();
            minus.router_weights.data[idx] -= eps;
            let fd = (loss_of(&plus, batch) - loss_of(&minus, batch)) / (2.0 * eps);
            let analytic = grads.router.data[idx];
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-4);
            assert!(
                rel < 1e-5,
                "router grad [{idx}]: analytic {analytic} vs fd {fd} (rel {rel})"
            );
        }
        // expert blocks
        for e in 0..model.n_experts() {
            let ncoords = model.experts[e].param_count();
            for idx in 0..ncoords {
                let perturb = |m: &mut MoEModelState, delta: f64| match &mut m.experts[e] {
                    ExpertParams::Linear(w) => w.data[idx] += delta,
                    ExpertParams::Mlp { w1, w2 } => {
                        if idx < w1.data.len() {
                            w1.data[idx] += delta;
                        } else {
                            w2.data[idx - w1.data.len()] += delta;
                        }
                    }
                };
                let mut plus = model.clone();
                perturb(&mut plus, eps);
                let mut minus = model.clone();
                perturb(&mut minus, -eps);
                let fd = (loss_of(&plus, batch) - loss_of(&minus, batch)) / (2.0 * eps);
                let analytic = match &grads.experts[e] {
                    ExpertParams::Linear(w) => w.data[idx],
                    ExpertParams::Mlp { w1, w2 } => {
                        if idx < w1.data.len() {
                            w1.data[idx]
                        } else {
                            w2.data[idx - w1.data.len()]
                        }
                    }
                };
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-4);
                assert!(
                    rel < 1e-5,
                    "expert {e} grad [{idx}]: analytic {analytic} vs fd {fd} (rel {rel})"
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_dense_linear() {
        let model = small_model(Routing::Dense, 0.1, ExpertArch::Linear);
        fd_check(&model, &small_batch(16, 1));
    }

    #[test]
    fn gradients_match_finite_differences_dense_mlp() {
        let model = small_model(Routing::Dense, 0.05, ExpertArch::Mlp { hidden: 5 });
        fd_check(&model, &small_batch(12, 2));
    }

    #[test]
    fn gradients_match_finite_differences_topk_linear() {
        let model = small_model(Routing::TopK(2), 0.1, ExpertArch::Linear);
        fd_check(&model, &small_batch(16, 3));
    }

    #[test]
    fn gradients_match_finite_differences_topk_mlp() {
        let model = small_model(Routing::TopK(1), 0.0, ExpertArch::Mlp { hidden: 4 });
        fd_check(&model, &small_batch(12, 4));
    }

    #[test]
    fn gradients_match_finite_differences_zero_lambda_and_large_lambda() {
        let model = small_model(Routing::Dense, 0.0, ExpertArch::Linear);
        fd_check(&model, &small_batch(10, 5));
        let model = small_model(Routing::Dense, 0.5, ExpertArch::Linear);
        fd_check(&model, &small_batch(10, 6));
    }

    #[test]
    fn loss_breakdown_total_is_exact_sum() {
        let model = small_model(Routing::Dense, 0.2, ExpertArch::Linear);
        let (loss, _) = backward(&model, &small_batch(32, 7)).unwrap();
        assert_eq!(loss.total, loss.task_loss + loss.aux_loss);
        assert!(loss.router_grad_norm > 0.0);
    }

    #[test]
    fn aux_loss_frozen_values() {
        // perfectly uniform routing and assignments: lambda * n * n * (1/n) * (1/n) = lambda
        let n = 4;
        let probs: Vec<ProbabilityVector> =
            (0..n).map(|_| ProbabilityVector::uniform(n).unwrap()).collect();
        let assignments: Vec<usize> = (0..n).collect();
        let v = aux_loss(&probs, &assignments, 0.3, n).unwrap();
        assert!((v - 0.3).abs() < 1e-12, "uniform penalty {v}");

        // full collapse: pbar = f = one-hot -> lambda * n
        let collapsed: Vec<ProbabilityVector> = (0..n)
            .map(|_| ProbabilityVector::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap())
            .collect();
        let v = aux_loss(&collapsed, &vec![0; n], 0.3, n).unwrap();
        assert!((v - 1.2).abs() < 1e-12, "collapsed penalty {v}");

        // mismatched lengths and bad assignments are rejected
        assert!(aux_loss(&probs, &assignments[..2].to_vec(), 0.3, n).is_err());
        assert!(aux_loss(&probs, &vec![7; n], 0.3, n).is_err());
        assert!(aux_loss(&probs, &assignments, -0.1, n).is_err());
    }

    #[test]
    fn topk_equals_dense_when_k_is_n() {
        let dense = small_model(Routing::Dense, 0.1, ExpertArch::Linear);
        let mut topn = dense.clone();
        topn.routing = Routing::TopK(4);
        let batch = small_batch(32, 8);
        let (pd, gd) = forward(&dense, &batch.inputs).unwrap();
        let (pt, gt) = forward(&topn, &batch.inputs).unwrap();
        for (a, b) in pd.iter().zip(&pt) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        for (a, b) in gd.iter().zip(&gt) {
            for (x, y) in a.gates.iter().zip(&b.gates) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_expert_passthrough() {
        let model = MoEModelState::init(
            1,
            5,
            3,
            1.0,
            Routing::Dense,
            0.0,
            ExpertArch::Linear,
            1.0,
            &mut stream(3, "init"),
        )
        .unwrap();
        let x = vec![0.3, -0.2, 0.5, 0.0, 1.0];
        let (probs, gates) = forward(&model, &[x.clone()]).unwrap();
        assert_eq!(gates[0].gates, vec![1.0]);
        let direct = softmax(&model.expert_logits(0, &x), 1.0).unwrap();
        for (a, b) in probs[0].iter().zip(direct.values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn gates_sum_to_one_and_respect_selection() {
        let model = small_model(Routing::TopK(2), 0.0, ExpertArch::Linear);
        let batch = small_batch(64, 9);
        let (_, gates) = forward(&model, &batch.inputs).unwrap();
        for g in &gates {
            assert_eq!(g.selected.len(), 2);
            let sum: f64 = g.gates.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for (i, v) in g.gates.iter().enumerate() {
                if g.selected.contains(&i) {
                    assert!(*v > 0.0);
                } else {
                    assert_eq!(*v, 0.0);
                }
            }
            // selected experts carry the largest dense probabilities
            let min_selected = g
                .selected
                .iter()
                .map(|&i| g.routing_probs.values()[i])
                .fold(f64::INFINITY, f64::min);
            for (i, v) in g.routing_probs.values().iter().enumerate() {
                if !g.selected.contains(&i) {
                    assert!(*v <= min_selected + 1e-15);
                }
            }
        }
    }

    #[test]
    fn router_scale_invariance_of_forward() {
        // scaling router weights and temperature together leaves the model
        // unchanged
        let model = small_model(Routing::Dense, 0.1, ExpertArch::Linear);
        let mut scaled = model.clone();
        let alpha = 3.7;
        scaled.router_weights.scale(alpha);
        scaled.tau *= alpha;
        let batch = small_batch(16, 10);
        let (pa, ga) = forward(&model, &batch.inputs).unwrap();
        let (pb, gb) = forward(&scaled, &batch.inputs).unwrap();
        for (a, b) in pa.iter().zip(&pb) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        for (a, b) in ga.iter().zip(&gb) {
            for (x, y) in a
                .routing_probs
                .values()
                .iter()
                .zip(b.routing_probs.values())
            {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn marginal_routing_of_zero_router_is_uniform() {
        let mut model = small_model(Routing::Dense, 0.0, ExpertArch::Linear);
        model.router_weights = Mat::zeros(4, 6);
        let batch = small_batch(32, 11);
        let m = marginal_routing(&model, &batch.inputs).unwrap();
        for v in m.values() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        assert!(marginal_routing(&model, &[]).is_err());
    }

    #[test]
    fn train_step_reduces_loss_on_average() {
        let mut model = small_model(Routing::Dense, 0.0, ExpertArch::Linear);
        let batch = small_batch(128, 12);
        let first = train_step(&mut model, &batch, 0.1).unwrap();
        let mut last = first;
        for _ in 0..50 {
            last = train_step(&mut model, &batch, 0.1).unwrap();
        }
        assert!(model.step == 51);
        assert!(
            last.total < first.total,
            "loss did not decrease: {} -> {}",
            first.total,
            last.total
        );
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let model = small_model(Routing::Dense, 0.0, ExpertArch::Linear);
        let bad = vec![vec![1.0, 2.0]];
        assert!(forward(&model, &bad).is_err());
        let batch = LabeledBatch {
            inputs: vec![vec![0.0; 6]],
            labels: vec![9],
        };
        assert!(backward(&model, &batch).is_err()); // label out of range
    }

    #[test]
    fn init_validation() {
        let mut rng = stream(1, "init");
        assert!(MoEModelState::init(
            0, 4, 3, 1.0, Routing::Dense, 0.0, ExpertArch::Linear, 1.0, &mut rng
        )
        .is_err());
        assert!(MoEModelState::init(
            4, 4, 3, 0.0, Routing::Dense, 0.0, ExpertArch::Linear, 1.0, &mut rng
        )
        .is_err());
        assert!(MoEModelState::init(
            4, 4, 3, 1.0, Routing::TopK(5), 0.0, ExpertArch::Linear, 1.0, &mut rng
        )
        .is_err());
        assert!(MoEModelState::init(
            4, 4, 3, 1.0, Routing::TopK(0), 0.0, ExpertArch::Linear, 1.0, &mut rng
        )
        .is_err());
        assert!(MoEModelState::init(
            4, 4, 3, 1.0, Routing::Dense, -0.1, ExpertArch::Linear, 1.0, &mut rng
        )
        .is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let model = small_model(Routing::TopK(2), 0.25, ExpertArch::Mlp { hidden: 5 });
        let text = save_checkpoint(&model).unwrap();
        assert!(text.contains("format_version"));
        let restored = load_checkpoint(&text).unwrap();
        assert_eq!(model, restored);
        // version check
        let bumped = text.replace("\"format_version\": 1", "\"format_version\": 99");
        assert!(load_checkpoint(&bumped).is_err());
    }

    #[test]
    fn reinit_experts_keeps_router_bits_and_halves_lambda() {
        let mut model = small_model(Routing::Dense, 0.4, ExpertArch::Linear);
        model.step = 123;
        let router_before = model.router_weights.clone();
        let experts_before = model.experts.clone();
        reinit_experts_keep_router(&mut model, &mut stream(77, "intervention"), true).unwrap();
        assert_eq!(model.router_weights, router_before);
        assert_ne!(model.experts, experts_before);
        assert_eq!(model.lambda, 0.2);
        assert_eq!(model.step, 123);
        // xavier bound respected on the fresh experts
        let bound = (6.0 / (3 + 6) as f64).sqrt();
        for e in &model.experts {
            if let ExpertParams::Linear(w) = e {
                assert!(w.data.iter().all(|v| v.abs() <= bound));
            }
        }
        // without the flag lambda stays put
        let lambda_before = model.lambda;
        reinit_experts_keep_router(&mut model, &mut stream(78, "intervention"), false).unwrap();
        assert_eq!(model.lambda, lambda_before);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = small_model(Routing::Dense, 0.0, ExpertArch::Linear);
        let b = small_model(Routing::Dense, 0.0, ExpertArch::Linear);
        assert_eq!(a, b);
    }

    #[test]
    fn saturated_router_still_produces_finite_outputs() {
        let mut model = small_model(Routing::Dense, 0.0, ExpertArch::Linear);
        model.router_weights.scale(1e4);
        let batch = small_batch(8, 13);
        let (probs, gates) = forward(&model, &batch.inputs).unwrap();
        for p in &probs {
            assert!(p.iter().all(|v| v.is_finite()));
        }
        for g in &gates {
            assert!(g.routing_probs.values().iter().all(|v| v.is_finite()));
        }
    }
}

//! Checkpoint analysis: specialization and heterogeneity trajectories.
//!
//! The analysis walks a sequence of model checkpoints and, for each one,
//! computes the routing-geometry quantities (marginal routing, FSI,
//! per-expert diagonal Fisher matrices, the heterogeneity matrix and its
//! ratio to the initial one) together with the probe-set loss, accuracy,
//! router gradient norm, and the weight/routing baseline metrics. All
//! per-checkpoint quantities are evaluated on a fixed labeled probe set so
//! that trajectory differences reflect the model, not probe resampling.
//!
//! The marginal routing distribution is always the dense softmax over all
//! experts, including for models that route top-k at forward time: the
//! analysis tracks where the router's underlying distribution sits on the
//! simplex, and the sparse gate is a post-processing of that distribution.

use serde::{Deserialize, Serialize};

use crate::baselines::{cosine_similarity, load_imbalance, routing_entropy, expert_overlap};
use crate::config::{ExperimentConfig, OptimizerName};
use crate::fisher::{estimate_all_diagonal_fims, fhs, heterogeneity_matrix, HeterogeneityMatrix};
use crate::model::{backward, marginal_routing, top1_expert, MoEModelState, Routing};
use crate::simplex::{fsi, fsi_max};
use crate::task::{bayes_optimal_accuracy, is_failure, LabeledBatch};
use crate::trainer::{classification_accuracy, expert_vectors, StepOutcome, Trainer};
use crate::rng::stream;
use crate::{Error, Result};

/// One per-checkpoint row of the analysis.
///
/// `router_grad_norm` doubles as the gradient-norm baseline metric — it is
/// the Frobenius norm of the router gradient of the full loss on the probe
/// set at this checkpoint. The two `per_step_geodesic_*` fields describe
/// the optimizer step that arrived at this checkpoint (zero for the initial
/// checkpoint and for runs where the measurement is inactive, i.e. sparse
/// routing, adaptive optimizer, or a zero learning rate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub fsi: f64,
    pub fsi_normalized: f64,
    pub fhs: f64,
    pub h_frob: f64,
    pub task_loss: f64,
    pub accuracy: f64,
    pub router_grad_norm: f64,
    pub per_step_geodesic_deviation: f64,
    pub per_step_geodesic_bound: f64,
    pub cosine_mean: f64,
    pub routing_entropy: f64,
    pub load_imbalance: f64,
    pub expert_overlap: f64,
}

impl TrajectoryRecord {
    pub const CSV_HEADER: [&'static str; 14] = [
        "step",
        "fsi",
        "fsi_normalized",
        "fhs",
        "h_frob",
        "task_loss",
        "accuracy",
        "router_grad_norm",
        "per_step_geodesic_deviation",
        "per_step_geodesic_bound",
        "cosine_mean",
        "routing_entropy",
        "load_imbalance",
        "expert_overlap",
    ];

    pub fn csv_row(&self) -> Result<Vec<String>> {
        use crate::io::float_cell;
        Ok(vec![
            self.step.to_string(),
            float_cell(self.fsi)?,
            float_cell(self.fsi_normalized)?,
            float_cell(self.fhs)?,
            float_cell(self.h_frob)?,
            float_cell(self.task_loss)?,
            float_cell(self.accuracy)?,
            float_cell(self.router_grad_norm)?,
            float_cell(self.per_step_geodesic_deviation)?,
            float_cell(self.per_step_geodesic_bound)?,
            float_cell(self.cosine_mean)?,
            float_cell(self.routing_entropy)?,
            float_cell(self.load_imbalance)?,
            float_cell(self.expert_overlap)?,
        ])
    }
}

/// Outcome of one instrumented training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    /// The exact configuration the run used.
    pub config: ExperimentConfig,
    pub seed: u64,
    pub trajectory: Vec<TrajectoryRecord>,
    /// Accuracy of the final model on a held-out evaluation set; 0.0 for
    /// runs that diverged (the run produced no final model).
    pub final_accuracy: f64,
    /// Estimated best achievable accuracy on the task.
    pub optimal_accuracy: f64,
    pub failed: bool,
    /// `Some("diverged")` when training was cut short by a non-finite
    /// loss or runaway weights; `None` otherwise.
    pub failure_reason: Option<String>,
    /// Heterogeneity score at the checkpoint nearest 10% of training.
    pub fhs_at_10pct: f64,
}

/// Number of optimizer steps between checkpoints for a run of `steps`
/// steps checkpointed every `fraction` of training.
pub fn checkpoint_interval(steps: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "checkpoint fraction must be in (0, 1], got {fraction}"
        )));
    }
    if steps == 0 {
        return Err(Error::invalid("checkpoint_interval: steps must be positive"));
    }
    Ok(((steps as f64 * fraction).round() as usize).max(1))
}

fn mean_pairwise_cosine(vectors: &[Vec<f64>]) -> Result<f64> {
    let n = vectors.len();
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += cosine_similarity(&vectors[i], &vectors[j])?;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Walks model checkpoints in step order and emits one [`TrajectoryRecord`]
/// per checkpoint. Fisher matrices are estimated on the first
/// `fim_batch_size` probe samples; every other per-checkpoint quantity uses
/// the full probe set. The two per-step geodesic fields are left at zero —
/// they belong to the optimizer trajectory, not to checkpoint states, and
/// are filled in by [`run_training_with_diagnostics`].
pub fn igma_analyze(
    checkpoints: &[MoEModelState],
    probe: &LabeledBatch,
    fim_batch_size: usize,
) -> Result<Vec<TrajectoryRecord>> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::invalid("checkpoint analysis needs at least one checkpoint"))?;
    if first.step != 0 {
        return Err(Error::invalid(format!(
            "checkpoint analysis requires the initial (step 0) checkpoint; sequence starts at step {}",
            first.step
        )));
    }
    if checkpoints.windows(2).any(|w| w[1].step <= w[0].step) {
        return Err(Error::invalid(
            "checkpoints must be in strictly increasing step order",
        ));
    }
    if first.n_experts() < 2 {
        return Err(Error::invalid(
            "checkpoint analysis requires at least two experts",
        ));
    }
    if probe.is_empty() {
        return Err(Error::invalid("checkpoint analysis needs a non-empty probe set"));
    }
    if fim_batch_size == 0 {
        return Err(Error::invalid("fim_batch_size must be positive"));
    }
    let fim_batch = LabeledBatch {
        inputs: probe.inputs[..fim_batch_size.min(probe.inputs.len())].to_vec(),
        labels: probe.labels[..fim_batch_size.min(probe.labels.len())].to_vec(),
    };
    let n = first.n_experts();
    let fsi_ceiling = fsi_max(n)?;

    let mut initial_h: Option<HeterogeneityMatrix> = None;
    let mut records = Vec::with_capacity(checkpoints.len());
    for model in checkpoints {
        if model.n_experts() != n {
            return Err(Error::invalid(
                "checkpoints disagree on the number of experts",
            ));
        }
        let p_bar = marginal_routing(model, &probe.inputs)?;
        let fsi_value = fsi(&p_bar);
        let fims = estimate_all_diagonal_fims(model, &fim_batch)?;
        let h = heterogeneity_matrix(&fims, &p_bar)?;
        let h0 = initial_h.get_or_insert_with(|| h.clone());
        let fhs_value = fhs(&h, h0);

        let (loss, _) = backward(model, probe)?;
        let accuracy = classification_accuracy(model, probe)?;

        let vectors = expert_vectors(model);
        let mut counts = vec![0u64; n];
        for x in &probe.inputs {
            let logits = model.router_weights.matvec(x);
            let p = crate::simplex::softmax(&logits, model.tau)?;
            counts[top1_expert(&p)] += 1;
        }

        records.push(TrajectoryRecord {
            step: model.step,
            fsi: fsi_value,
            fsi_normalized: fsi_value / fsi_ceiling,
            fhs: fhs_value.value,
            h_frob: h.frob_norm,
            task_loss: loss.task_loss,
            accuracy,
            router_grad_norm: loss.router_grad_norm,
            per_step_geodesic_deviation: 0.0,
            per_step_geodesic_bound: 0.0,
            cosine_mean: mean_pairwise_cosine(&vectors)?,
            routing_entropy: routing_entropy(&p_bar),
            load_imbalance: load_imbalance(&counts)?,
            expert_overlap: expert_overlap(&vectors)?,
        });
    }
    Ok(records)
}

/// Trains one model under `config` with the given seed, checkpointing at
/// the configured cadence (plus the initial state and the final step), and
/// returns the analyzed trajectory together with the run verdict.
///
/// Divergence truncates the trajectory at the last completed checkpoint;
/// the run is marked failed with reason "diverged" and its final accuracy
/// is reported as 0.0, since the run produced no final model.
pub fn run_training_with_diagnostics(config: &ExperimentConfig, seed: u64) -> Result<RunResult> {
    if config.model.n_experts < 2 {
        return Err(Error::invalid(
            "checkpoint analysis requires at least two experts",
        ));
    }
    let mut trainer = Trainer::new(config, seed)?;
    let total_steps = config.training.steps;
    let interval = checkpoint_interval(total_steps, config.diagnostics.checkpoint_fraction)?;

    let mut snapshots: Vec<MoEModelState> = vec![trainer.model.clone()];
    let mut diverged = false;
    while trainer.steps_done() < total_steps {
        match trainer.step()? {
            StepOutcome::Stepped { .. } => {
                let s = trainer.steps_done();
                if s % interval == 0 || s == total_steps {
                    snapshots.push(trainer.model.clone());
                }
            }
            StepOutcome::Diverged { .. } => {
                diverged = true;
                break;
            }
        }
    }

    let mut trajectory = igma_analyze(
        &snapshots,
        &trainer.probe,
        config.diagnostics.fim_batch_size,
    )?;
    // attach the per-step measurement of the step that arrived at each
    // checkpoint (geodesic trace entry s-1 describes step s-1 -> s)
    for record in trajectory.iter_mut().skip(1) {
        if let Some(m) = trainer.geodesic_trace.get(record.step - 1) {
            record.per_step_geodesic_deviation = m.deviation;
            record.per_step_geodesic_bound = m.bound;
        }
    }

    let optimal_accuracy = bayes_optimal_accuracy(
        &trainer.spec,
        config.diagnostics.bayes_samples,
        &mut stream(seed, "bayes"),
    )?
    .accuracy;
    let final_accuracy = if diverged {
        0.0
    } else {
        let eval = trainer.eval_batch(config.diagnostics.bayes_samples, "eval");
        classification_accuracy(&trainer.model, &eval)?
    };
    let failed = is_failure(final_accuracy, optimal_accuracy);
    let fhs_at_10pct = fhs_nearest(&trajectory, total_steps, 0.1)?;

    Ok(RunResult {
        config: config.clone(),
        seed,
        trajectory,
        final_accuracy,
        optimal_accuracy,
        failed,
        failure_reason: if diverged {
            Some("diverged".to_string())
        } else {
            None
        },
        fhs_at_10pct,
    })
}

fn nearest_record<'a>(
    trajectory: &'a [TrajectoryRecord],
    total_steps: usize,
    fraction: f64,
) -> Result<&'a TrajectoryRecord> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "fhs_at_fraction: fraction must be in (0, 1], got {fraction}"
        )));
    }
    if trajectory.is_empty() {
        return Err(Error::invalid("fhs_at_fraction: empty trajectory"));
    }
    let target = fraction * total_steps as f64;
    let mut best = &trajectory[0];
    let mut best_gap = (best.step as f64 - target).abs();
    for record in &trajectory[1..] {
        let gap = (record.step as f64 - target).abs();
        // strict improvement keeps the earlier checkpoint on ties
        if gap < best_gap {
            best = record;
            best_gap = gap;
        }
    }
    Ok(best)
}

fn fhs_nearest(trajectory: &[TrajectoryRecord], total_steps: usize, fraction: f64) -> Result<f64> {
    Ok(nearest_record(trajectory, total_steps, fraction)?.fhs)
}

/// Heterogeneity score at the checkpoint nearest `fraction` of the
/// configured training length (ties resolve to the earlier checkpoint; a
/// truncated trajectory clamps to its last checkpoint).
pub fn fhs_at_fraction(result: &RunResult, fraction: f64) -> Result<f64> {
    fhs_nearest(&result.trajectory, result.config.training.steps, fraction)
}

/// The full checkpoint record nearest `fraction` of the configured training
/// length, under the same tie and clamping rules as [`fhs_at_fraction`].
pub fn record_at_fraction(result: &RunResult, fraction: f64) -> Result<&TrajectoryRecord> {
    nearest_record(&result.trajectory, result.config.training.steps, fraction)
}

/// One row of the temperature-sweep validation table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeodesicValidationRow {
    pub tau: f64,
    /// Mean over seeds of (sum of per-step deviations / total path length).
    pub measured_fraction: f64,
    /// Mean over seeds of (sum of per-step bounds / total path length).
    pub bound_fraction: f64,
    /// Per-step bound violations, summed across seeds.
    pub violations: usize,
    /// Optimizer steps measured, summed across seeds.
    pub steps_measured: usize,
}

impl GeodesicValidationRow {
    pub const CSV_HEADER: [&'static str; 5] = [
        "tau",
        "measured_fraction",
        "bound_fraction",
        "violations",
        "steps_measured",
    ];

    pub fn csv_row(&self) -> Result<Vec<String>> {
        use crate::io::float_cell;
        Ok(vec![
            float_cell(self.tau)?,
            float_cell(self.measured_fraction)?,
            float_cell(self.bound_fraction)?,
            self.violations.to_string(),
            self.steps_measured.to_string(),
        ])
    }
}

/// Runs one training run per (τ, seed) over `config.campaign.seeds` with
/// the model temperature overridden, measuring every optimizer step against
/// the per-step ceiling, and reports one row per τ.
pub fn geodesic_validation(
    config: &ExperimentConfig,
    taus: &[f64],
) -> Result<Vec<GeodesicValidationRow>> {
    if config.routing() != Routing::Dense {
        return Err(Error::invalid("geodesic validation requires dense routing"));
    }
    if config.training.optimizer != OptimizerName::Gd {
        return Err(Error::invalid(
            "geodesic validation requires plain gradient descent",
        ));
    }
    if !(config.training.eta > 0.0) {
        return Err(Error::invalid(
            "geodesic validation requires a positive learning rate",
        ));
    }
    if taus.is_empty() {
        return Err(Error::invalid("geodesic validation needs at least one temperature"));
    }
    if taus.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::invalid("temperatures must all be positive"));
    }

    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        let mut tau_config = config.clone();
        tau_config.model.tau = tau;
        let mut fractions = Vec::new();
        let mut bound_fractions = Vec::new();
        let mut violations = 0usize;
        let mut steps_measured = 0usize;
        for &seed in &config.campaign.seeds {
            let mut trainer = Trainer::new(&tau_config, seed)?;
            trainer.run_to_completion()?;
            let mut dev_sum = 0.0;
            let mut bound_sum = 0.0;
            let mut disp_sum = 0.0;
            for m in &trainer.geodesic_trace {
                dev_sum += m.deviation;
                bound_sum += m.bound;
                disp_sum += m.displacement;
                if m.deviation > m.bound {
                    violations += 1;
                }
            }
            steps_measured += trainer.geodesic_trace.len();
            if disp_sum > 0.0 {
                fractions.push(dev_sum / disp_sum);
                bound_fractions.push(bound_sum / disp_sum);
            }
        }
        if fractions.is_empty() {
            return Err(Error::invalid(format!(
                "geodesic validation at tau={tau}: no usable measurements (all runs diverged immediately or never moved)"
            )));
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        rows.push(GeodesicValidationRow {
            tau,
            measured_fraction: mean(&fractions),
            bound_fraction: mean(&bound_fractions),
            violations,
            steps_measured,
        });
    }
    Ok(rows)
}

//! Training loop with per-step geometric instrumentation.
//!
//! A `Trainer` owns the model, the task distribution, a fixed probe set,
//! and named deterministic RNG streams, and is cheap to clone: a clone
//! carries identical stream states, so two clones stepped the same number
//! of times see identical batches and produce bit-identical models. That is
//! the mechanism behind matched-seed intervention branching.
//!
//! In dense routing mode under plain gradient descent, every step also
//! measures how far the marginal routing distribution moved from the
//! first-order geodesic prediction. The predicted tangent is the exact
//! first-order change of the batch marginal under the router update
//! (`delta p_x = J_x (-eta G x)` per sample, averaged, mapped through the
//! sqrt embedding), and the measured deviation is compared against the
//! `eta^2 |grad|^2 / (16 tau)` bound using the full-parameter gradient
//! norm. Divergence (non-finite loss or runaway weights) is an outcome,
//! not an error: the trainer records where it happened and refuses further
//! steps.

use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, OptimizerName};
use crate::model::{
    apply_sgd, backward, forward, Gradients, LossBreakdown, MoEModelState, Routing,
};
use crate::rng::stream;
use crate::simplex::{
    fisher_rao_distance, fsi, geodesic_bound, geodesic_step_deviation, softmax, sqrt_embed,
    ProbabilityVector,
};
use crate::task::{sample_batch, GaussianMixtureSpec, LabeledBatch};
use crate::{Error, Result};

/// Weight norms beyond this are treated as divergence: no healthy run on
/// this task family gets anywhere near it, and bounding the norm keeps
/// every downstream product finite.
const WEIGHT_NORM_DIVERGENCE_GUARD: f64 = 1e100;

/// One step's geodesic instrumentation (dense routing + gradient descent).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeodesicStepMeasurement {
    /// Distance between the post-step embedded marginal and the first-order
    /// geodesic prediction (unit-sphere units).
    pub deviation: f64,
    /// The per-step theoretical ceiling eta^2 |grad|^2 / (16 tau).
    pub bound: f64,
    /// Fisher-Rao displacement of the marginal over this step.
    pub displacement: f64,
}

/// What happened when the trainer was asked to advance one step.
#[derive(Debug, Clone)]
pub enum StepOutcome {
    Stepped {
        loss: LossBreakdown,
        geodesic: Option<GeodesicStepMeasurement>,
    },
    /// The run diverged at (or before) this step; the model is frozen in
    /// its last usable state and further stepping repeats this outcome.
    Diverged { at_step: usize },
}

/// Adam moment estimates over the flat parameter vector.
#[derive(Debug, Clone)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

fn flatten_gradients(grads: &Gradients) -> Vec<f64> {
    let mut flat = grads.router.data.clone();
    for e in &grads.experts {
        flat.extend(e.flatten());
    }
    flat
}

/// Subtracts `delta` from the model parameters in flat order (router first,
/// then each expert in the documented flattening order) and bumps the step.
fn apply_flat_update(model: &mut MoEModelState, delta: &[f64]) {
    let mut offset = 0;
    for w in model.router_weights.data.iter_mut() {
        *w -= delta[offset];
        offset += 1;
    }
    for e in model.experts.iter_mut() {
        match e {
            crate::model::ExpertParams::Linear(w) => {
                for v in w.data.iter_mut() {
                    *v -= delta[offset];
                    offset += 1;
                }
            }
            crate::model::ExpertParams::Mlp { w1, w2 } => {
                for v in w1.data.iter_mut().chain(w2.data.iter_mut()) {
                    *v -= delta[offset];
                    offset += 1;
                }
            }
        }
    }
    debug_assert_eq!(offset, delta.len());
    model.step += 1;
}

/// A training run in progress.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub model: MoEModelState,
    pub spec: GaussianMixtureSpec,
    /// Fixed labeled probe set, reused across all checkpoints.
    pub probe: LabeledBatch,
    data_rng: ChaCha8Rng,
    adam: Option<AdamState>,
    pub diverged_at: Option<usize>,
    /// Per-step geodesic measurements (dense + gradient descent only).
    pub geodesic_trace: Vec<GeodesicStepMeasurement>,
    /// Per-step probe FSI values, populated when tracking is enabled.
    pub probe_fsi_trace: Vec<f64>,
    track_probe_fsi: bool,
}

impl Trainer {
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Trainer> {
        config.validate()?;
        let spec = config.task_spec()?;
        let model = MoEModelState::init(
            config.model.n_experts,
            config.task.input_dim,
            spec.n_classes(),
            config.model.tau,
            config.routing(),
            config.model.lambda,
            config.expert_arch(),
            config.model.init_scale,
            &mut stream(seed, "init"),
        )?;
        let probe = sample_batch(&spec, config.diagnostics.probe_size, &mut stream(seed, "probe"));
        let adam = match config.training.optimizer {
            OptimizerName::Gd => None,
            OptimizerName::Adam => {
                let dim = model.router_weights.data.len()
                    + model
                        .experts
                        .iter()
                        .map(|e| e.param_count())
                        .sum::<usize>();
                Some(AdamState {
                    m: vec![0.0; dim],
                    v: vec![0.0; dim],
                    t: 0,
                })
            }
        };
        Ok(Trainer {
            config: config.clone(),
            seed,
            model,
            spec,
            probe,
            data_rng: stream(seed, "data"),
            adam,
            diverged_at: None,
            geodesic_trace: Vec::new(),
            probe_fsi_trace: Vec::new(),
            track_probe_fsi: false,
        })
    }

    /// Turns on per-step probe FSI recording, seeding the trace with the
    /// current value so decreases across the very first step are visible.
    pub fn enable_probe_fsi_tracking(&mut self) -> Result<()> {
        self.track_probe_fsi = true;
        let v = self.probe_fsi()?;
        self.probe_fsi_trace.push(v);
        Ok(())
    }

    /// Marginal routing distribution over the probe set.
    pub fn probe_marginal(&self) -> Result<ProbabilityVector> {
        crate::model::marginal_routing(&self.model, &self.probe.inputs)
    }

    /// FSI of the probe marginal.
    pub fn probe_fsi(&self) -> Result<f64> {
        Ok(fsi(&self.probe_marginal()?))
    }

    /// True once the run has diverged.
    pub fn is_diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    /// Number of optimizer steps applied so far.
    pub fn steps_done(&self) -> usize {
        self.model.step
    }

    /// A freshly sampled evaluation batch on a dedicated stream. The stream
    /// is derived from (seed, purpose), so the same call sequence yields
    /// the same data on every rerun.
    pub fn eval_batch(&self, n: usize, purpose: &str) -> LabeledBatch {
        sample_batch(&self.spec, n, &mut stream(self.seed, purpose))
    }

    fn weights_run_away(&self) -> bool {
        if !self.model.is_finite() {
            return true;
        }
        let mut sq = self
            .model
            .router_weights
            .data
            .iter()
            .map(|v| v * v)
            .sum::<f64>();
        for e in &self.model.experts {
            sq += e.flatten().iter().map(|v| v * v).sum::<f64>();
        }
        !sq.is_finite() || sq.sqrt() > WEIGHT_NORM_DIVERGENCE_GUARD
    }

    /// Advances one optimizer step.
    pub fn step(&mut self) -> Result<StepOutcome> {
        if let Some(at) = self.diverged_at {
            return Ok(StepOutcome::Diverged { at_step: at });
        }
        if self.weights_run_away() {
            self.diverged_at = Some(self.model.step);
            return Ok(StepOutcome::Diverged {
                at_step: self.model.step,
            });
        }
        let batch = sample_batch(
            &self.spec,
            self.config.training.batch_size,
            &mut self.data_rng,
        );
        let (loss, grads) = backward(&self.model, &batch)?;
        if !loss.total.is_finite() {
            self.diverged_at = Some(self.model.step);
            return Ok(StepOutcome::Diverged {
                at_step: self.model.step,
            });
        }
        let eta = self.config.training.eta;
        let measuring = self.model.routing == Routing::Dense
            && self.config.training.optimizer == OptimizerName::Gd
            && eta > 0.0;
        let before = if measuring {
            Some(self.geodesic_before(&batch, &grads, eta)?)
        } else {
            None
        };
        match self.config.training.optimizer {
            OptimizerName::Gd => apply_sgd(&mut self.model, &grads, eta),
            OptimizerName::Adam => self.adam_update(&grads, eta),
        }
        let geodesic = match before {
            Some((p_before, phi_before, tangent, bound)) => {
                let p_after =
                    crate::model::marginal_routing(&self.model, &batch.inputs)?;
                let phi_after = sqrt_embed(&p_after);
                let deviation = geodesic_step_deviation(&phi_before, &phi_after, &tangent)?;
                let displacement = fisher_rao_distance(&p_before, &p_after)?;
                let m = GeodesicStepMeasurement {
                    deviation,
                    bound,
                    displacement,
                };
                self.geodesic_trace.push(m);
                Some(m)
            }
            None => None,
        };
        if self.track_probe_fsi {
            let v = self.probe_fsi()?;
            self.probe_fsi_trace.push(v);
        }
        Ok(StepOutcome::Stepped { loss, geodesic })
    }

    /// Pre-step side of the geodesic measurement: the embedded marginal,
    /// the exact first-order tangent under the upcoming router update, and
    /// the theoretical per-step bound.
    fn geodesic_before(
        &self,
        batch: &LabeledBatch,
        grads: &Gradients,
        eta: f64,
    ) -> Result<(ProbabilityVector, crate::simplex::SphericalPoint, Vec<f64>, f64)> {
        let n = self.model.n_experts();
        let tau = self.model.tau;
        let b = batch.len() as f64;
        let mut p_acc = vec![0.0; n];
        let mut dp_acc = vec![0.0; n];
        for x in &batch.inputs {
            let logits = self.model.router_weights.matvec(x);
            let p = softmax(&logits, tau)?;
            // router logit change under W -> W - eta G: delta r = -eta G x
            let dr: Vec<f64> = grads.router.matvec(x).iter().map(|g| -eta * g).collect();
            // delta p = (1/tau)(diag(p) - p p^T) delta r
            let pdr: f64 = p.values().iter().zip(&dr).map(|(pi, di)| pi * di).sum();
            for i in 0..n {
                let pi = p.values()[i];
                p_acc[i] += pi / b;
                dp_acc[i] += pi * (dr[i] - pdr) / (tau * b);
            }
        }
        let p_before = ProbabilityVector::new(p_acc)?;
        let phi_before = sqrt_embed(&p_before);
        // d(sqrt p)_i = dp_i / (2 sqrt(p_i)). Softmax marginals are interior
        // in exact arithmetic, but saturated routing can underflow a
        // coordinate to exactly zero; the derivative limit there is zero
        // (dp_i vanishes at least linearly in p_i).
        let tangent: Vec<f64> = dp_acc
            .iter()
            .zip(phi_before.coords())
            .map(|(dp, phi)| if *phi > 0.0 { dp / (2.0 * phi) } else { 0.0 })
            .collect();
        let bound = geodesic_bound(eta, grads.full_norm(), tau)?;
        Ok((p_before, phi_before, tangent, bound))
    }

    fn adam_update(&mut self, grads: &Gradients, eta: f64) {
        let state = self.adam.as_mut().expect("adam state present");
        let flat = flatten_gradients(grads);
        state.t += 1;
        let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let bc1 = 1.0 - beta1.powi(state.t as i32);
        let bc2 = 1.0 - beta2.powi(state.t as i32);
        let mut delta = vec![0.0; flat.len()];
        for i in 0..flat.len() {
            state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * flat[i];
            state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * flat[i] * flat[i];
            let m_hat = state.m[i] / bc1;
            let v_hat = state.v[i] / bc2;
            delta[i] = eta * m_hat / (v_hat.sqrt() + eps);
        }
        apply_flat_update(&mut self.model, &delta);
    }

    /// Steps until the configured total, stopping early on divergence.
    pub fn run_to_completion(&mut self) -> Result<()> {
        while self.model.step < self.config.training.steps && !self.is_diverged() {
            self.step()?;
        }
        Ok(())
    }
}

/// Fraction of a labeled batch the model classifies correctly (argmax of
/// the mixture class probabilities; ties resolve to the lowest class).
pub fn classification_accuracy(model: &MoEModelState, batch: &LabeledBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("classification_accuracy: empty batch"));
    }
    let (probs, _) = forward(model, &batch.inputs)?;
    let mut correct = 0usize;
    for (p, y) in probs.iter().zip(&batch.labels) {
        let mut best = 0;
        for c in 1..p.len() {
            if p[c] > p[best] {
                best = c;
            }
        }
        if best == *y {
            correct += 1;
        }
    }
    Ok(correct as f64 / batch.len() as f64)
}

/// Router weight matrix rows as plain vectors (used by weight-space
/// baseline metrics).
pub fn router_rows(model: &MoEModelState) -> Vec<Vec<f64>> {
    (0..model.router_weights.rows)
        .map(|i| model.router_weights.row(i).to_vec())
        .collect()
}

/// Flattened per-expert parameter vectors.
pub fn expert_vectors(model: &MoEModelState) -> Vec<Vec<f64>> {
    model.experts.iter().map(|e| e.flatten()).collect()
}

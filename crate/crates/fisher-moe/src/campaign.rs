//! Campaign machinery: hyperparameter-lottery sampling, the deterministic
//! desk grid, parallel run execution, failure-prediction scoring, and the
//! intervention study.
//!
//! A campaign trains many runs — hyperparameters drawn from a small grid
//! (the "lottery") or enumerated exhaustively (the "desk" grid) — labels
//! each run healthy or failed against the task's estimated optimal
//! accuracy, and asks whether the early-training heterogeneity score
//! separates the two classes better than a validation-loss trend baseline.
//! Flagged runs can then be branched at the early-warning checkpoint into
//! intervention arms that resume training under different
//! reinitialization policies.
//!
//! Everything here is deterministic: lottery draws come from a named
//! stream of the first campaign seed, per-run seeds are derived from it by
//! index, and parallel execution collects results in draw order.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    auc, threshold_sweep, val_loss_failure_predictor, PredictionScore, ThresholdReport,
};
use crate::config::ExperimentConfig;
use crate::diagnostics::{record_at_fraction, run_training_with_diagnostics, RunResult};
use crate::io::float_cell;
use crate::linalg::pearson_correlation;
use crate::model::{reinit_experts_keep_router, reinit_router};
use crate::rng::{derive_seed, stream};
use crate::task::is_failure;
use crate::trainer::{classification_accuracy, Trainer};
use crate::{Error, Result};

/// Fraction of training used as the early-warning horizon: both failure
/// scores look only at checkpoints in the first tenth of the run.
pub const EARLY_HORIZON: f64 = 0.1;

/// A run whose heterogeneity score at the horizon exceeds this is flagged
/// for intervention (its Fisher heterogeneity has grown past its initial
/// value instead of contracting).
pub const FLAG_THRESHOLD: f64 = 1.0;

/// Decision thresholds swept by default when turning heterogeneity scores
/// into a binary failure prediction.
pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.8, 0.9, 1.0, 1.1, 1.2];

/// Intervention arm names, in study order: continue untouched, reinitialize
/// experts keeping the router, the same plus halving the balance weight,
/// and full reinitialization including the router.
pub const ARM_NAMES: [&str; 4] = [
    "continue",
    "reinit-experts",
    "reinit-experts-half-lambda",
    "full-reinit",
];

/// Canonical artifact name for campaign run `index`.
pub fn run_id(index: usize) -> String {
    format!("run-{index:02}")
}

/// One lottery run: the drawn configuration and its training seed.
#[derive(Debug, Clone)]
pub struct LotteryDraw {
    pub index: usize,
    pub config: ExperimentConfig,
    pub seed: u64,
}

/// Draws the campaign's run configurations from the lottery grid.
///
/// Axis values are drawn independently and uniformly, one value per axis
/// per run, in field order (expert count, balance weight, learning rate,
/// router init scale, cluster separation) from the `"lottery"` stream of
/// the first campaign seed. Run `i` trains with a seed derived from that
/// same base seed and `i`, so reruns of the same config reproduce both the
/// draws and every trajectory.
pub fn lottery_draws(config: &ExperimentConfig) -> Result<Vec<LotteryDraw>> {
    config.validate()?;
    let lottery = config.campaign.lottery.clone().unwrap_or_default();
    let base_seed = config.campaign.seeds[0];
    let mut rng = stream(base_seed, "lottery");
    let mut draws = Vec::with_capacity(lottery.runs);
    for index in 0..lottery.runs {
        let n_experts = lottery.n_experts[rng.gen_range(0..lottery.n_experts.len())];
        let lambda = lottery.lambda[rng.gen_range(0..lottery.lambda.len())];
        let eta = lottery.eta[rng.gen_range(0..lottery.eta.len())];
        let init_scale = lottery.init_scale[rng.gen_range(0..lottery.init_scale.len())];
        let separation = lottery.separation[rng.gen_range(0..lottery.separation.len())];

        let mut run = config.clone();
        run.campaign.lottery = None;
        run.model.n_experts = n_experts;
        run.model.lambda = lambda;
        run.model.init_scale = init_scale;
        run.model.routing = lottery.routing;
        run.model.expert_arch = lottery.expert_arch;
        run.training.eta = eta;
        run.training.optimizer = lottery.optimizer;
        run.task.separation = separation;
        run.validate()?;

        draws.push(LotteryDraw {
            index,
            config: run,
            seed: derive_seed(base_seed, index as u64),
        });
    }
    Ok(draws)
}

/// Expands the desk grid into runs: the cross of step-size ladder (outer)
/// and expert counts (inner) is enumerated as config cells, and every cell
/// trains once per campaign seed, ordered by (cell, seed).
///
/// Run `i` for cell `c` and campaign seed `s` trains with a seed derived
/// from `s` and `c`, so adding or removing seeds never disturbs the other
/// runs' trajectories. Nothing is drawn: the grid, the order, and every
/// seed are fixed by the config alone.
pub fn desk_draws(config: &ExperimentConfig) -> Result<Vec<LotteryDraw>> {
    config.validate()?;
    let desk = config
        .campaign
        .desk
        .clone()
        .ok_or_else(|| Error::invalid("desk_draws: config has no campaign.desk section"))?;
    let cells = desk
        .eta
        .iter()
        .flat_map(|&eta| desk.n_experts.iter().map(move |&n| (eta, n)));
    let mut draws = Vec::with_capacity(desk.eta.len() * desk.n_experts.len() * config.campaign.seeds.len());
    for (cell, (eta, n_experts)) in cells.enumerate() {
        for &seed in &config.campaign.seeds {
            let mut run = config.clone();
            run.campaign.desk = None;
            run.model.n_experts = n_experts;
            run.training.eta = eta;
            run.validate()?;
            draws.push(LotteryDraw {
                index: draws.len(),
                config: run,
                seed: derive_seed(seed, cell as u64),
            });
        }
    }
    Ok(draws)
}

/// The campaign's run list: the desk grid when a desk section is present,
/// the lottery otherwise (falling back to the default lottery grid when
/// neither section is given).
pub fn campaign_draws(config: &ExperimentConfig) -> Result<Vec<LotteryDraw>> {
    if config.campaign.desk.is_some() {
        desk_draws(config)
    } else {
        lottery_draws(config)
    }
}

fn thread_pool(parallel: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallel)
        .build()
        .map_err(|e| Error::invalid(format!("could not build worker pool: {e}")))
}

/// Trains every draw and returns the results in draw order. `parallel` is
/// the worker count; 0 uses the machine's available parallelism. The
/// ordering (and every result) is independent of the worker count.
pub fn run_campaign(draws: &[LotteryDraw], parallel: usize) -> Result<Vec<RunResult>> {
    let pool = thread_pool(parallel)?;
    pool.install(|| {
        draws
            .par_iter()
            .map(|d| run_training_with_diagnostics(&d.config, d.seed))
            .collect()
    })
}

/// The validation-loss failure score of one run: the trend-predictor score
/// over the checkpoints inside the early horizon.
///
/// Two blow-up conventions keep the score total on real campaigns: a run
/// whose probe loss is non-finite inside the horizon, or one cut short by
/// divergence before four horizon checkpoints exist, scores exactly 1 (the
/// predictor's own flagged value). A run that is merely *configured* with
/// too few checkpoints is an error, not a failure signal.
pub fn val_loss_score(result: &RunResult) -> Result<f64> {
    let total = result.config.training.steps as f64;
    let points: Vec<(f64, f64)> = result
        .trajectory
        .iter()
        .filter(|r| r.step as f64 / total <= EARLY_HORIZON + 1e-9)
        .map(|r| (r.step as f64 / total, r.task_loss))
        .collect();
    if points.iter().any(|(_, loss)| !loss.is_finite()) {
        return Ok(1.0);
    }
    match val_loss_failure_predictor(&points) {
        Ok(p) => Ok(p.score),
        Err(_) if result.failure_reason.is_some() => Ok(1.0),
        Err(e) => Err(e),
    }
}

/// Per-run line of the campaign summary; also the scatter-plot data joining
/// both failure scores to the run's outcome and drawn hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDigest {
    pub run_id: String,
    pub seed: u64,
    pub n_experts: usize,
    pub lambda: f64,
    pub eta: f64,
    pub init_scale: f64,
    pub separation: f64,
    pub final_accuracy: f64,
    pub optimal_accuracy: f64,
    pub failed: bool,
    pub diverged: bool,
    /// Heterogeneity score at the checkpoint nearest the early horizon.
    pub fhs_at_horizon: f64,
    /// Validation-loss trend score over the same horizon.
    pub val_loss_score: f64,
    pub final_fsi_normalized: f64,
}

impl RunDigest {
    pub const CSV_HEADER: [&'static str; 14] = [
        "run_id",
        "seed",
        "n_experts",
        "lambda",
        "eta",
        "init_scale",
        "separation",
        "final_accuracy",
        "optimal_accuracy",
        "failed",
        "diverged",
        "fhs_at_horizon",
        "val_loss_score",
        "final_fsi_normalized",
    ];

    pub fn csv_row(&self) -> Result<Vec<String>> {
        Ok(vec![
            self.run_id.clone(),
            self.seed.to_string(),
            self.n_experts.to_string(),
            float_cell(self.lambda)?,
            float_cell(self.eta)?,
            float_cell(self.init_scale)?,
            float_cell(self.separation)?,
            float_cell(self.final_accuracy)?,
            float_cell(self.optimal_accuracy)?,
            self.failed.to_string(),
            self.diverged.to_string(),
            float_cell(self.fhs_at_horizon)?,
            float_cell(self.val_loss_score)?,
            float_cell(self.final_fsi_normalized)?,
        ])
    }
}

/// Aggregate outcome of one intervention arm across all flagged runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionOutcome {
    /// Number of flagged runs the arm was applied to.
    pub runs: usize,
    /// Fraction of those runs whose final accuracy reached at least 85% of
    /// the task's estimated optimum.
    pub recovery_rate: f64,
    pub mean_final_accuracy: f64,
}

/// Campaign-level summary: per-run digests, both ranking quality numbers,
/// the threshold sweep, and (when the intervention study ran) the per-arm
/// outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub runs: usize,
    pub failures: usize,
    /// Ranking quality of the heterogeneity score at the early horizon.
    pub auc_fhs: f64,
    /// Ranking quality of the validation-loss trend baseline.
    pub auc_val_loss: f64,
    /// Pearson correlation between final routing concentration and final
    /// accuracy across runs; absent when undefined (a constant column or a
    /// non-finite value).
    #[serde(default)]
    pub corr_fsi_accuracy: Option<f64>,
    /// Pearson correlation between the heterogeneity score at the early
    /// horizon and final accuracy; absent when undefined.
    #[serde(default)]
    pub corr_fhs_accuracy: Option<f64>,
    pub threshold_reports: Vec<ThresholdReport>,
    /// Arm name to outcome; empty unless the intervention study ran.
    pub intervention_outcomes: BTreeMap<String, InterventionOutcome>,
    pub digests: Vec<RunDigest>,
}

/// Pearson correlation as a summary column: `None` instead of an error when
/// the correlation is undefined, and `None` when any value is non-finite
/// (a diverged run can push a score to infinity, and a correlation over
/// such a column means nothing).
fn correlation_column(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return None;
    }
    pearson_correlation(x, y).ok()
}

fn digest(index: usize, result: &RunResult) -> Result<RunDigest> {
    let last = result
        .trajectory
        .last()
        .ok_or_else(|| Error::invalid("campaign run has an empty trajectory"))?;
    Ok(RunDigest {
        run_id: run_id(index),
        seed: result.seed,
        n_experts: result.config.model.n_experts,
        lambda: result.config.model.lambda,
        eta: result.config.training.eta,
        init_scale: result.config.model.init_scale,
        separation: result.config.task.separation,
        final_accuracy: result.final_accuracy,
        optimal_accuracy: result.optimal_accuracy,
        failed: result.failed,
        diverged: result.failure_reason.is_some(),
        fhs_at_horizon: result.fhs_at_10pct,
        val_loss_score: val_loss_score(result)?,
        final_fsi_normalized: last.fsi_normalized,
    })
}

/// Scores and summarizes a finished campaign.
///
/// Both predictors are evaluated as failure rankings over the same runs and
/// labels; the threshold sweep applies to the heterogeneity score. A
/// campaign whose runs all share one outcome has no ranking quality to
/// measure and is rejected as degenerate.
pub fn summarize_campaign(
    results: &[RunResult],
    thresholds: &[f64],
) -> Result<CampaignSummary> {
    if results.is_empty() {
        return Err(Error::invalid("summarize_campaign: no runs"));
    }
    let digests: Vec<RunDigest> = results
        .iter()
        .enumerate()
        .map(|(i, r)| digest(i, r))
        .collect::<Result<_>>()?;

    let failures = digests.iter().filter(|d| d.failed).count();
    if failures == 0 || failures == digests.len() {
        return Err(Error::DegenerateCampaign(format!(
            "all {} runs are {}; prediction quality is undefined on one class",
            digests.len(),
            if failures == 0 { "healthy" } else { "failed" },
        )));
    }

    let fhs_scores: Vec<PredictionScore> = digests
        .iter()
        .map(|d| PredictionScore {
            run_id: d.run_id.clone(),
            score: d.fhs_at_horizon,
            label: d.failed,
        })
        .collect();
    let val_scores: Vec<PredictionScore> = digests
        .iter()
        .map(|d| PredictionScore {
            run_id: d.run_id.clone(),
            score: d.val_loss_score,
            label: d.failed,
        })
        .collect();

    let accuracy: Vec<f64> = digests.iter().map(|d| d.final_accuracy).collect();
    let final_fsi: Vec<f64> = digests.iter().map(|d| d.final_fsi_normalized).collect();
    let horizon_fhs: Vec<f64> = digests.iter().map(|d| d.fhs_at_horizon).collect();

    Ok(CampaignSummary {
        runs: digests.len(),
        failures,
        auc_fhs: auc(&fhs_scores)?,
        auc_val_loss: auc(&val_scores)?,
        corr_fsi_accuracy: correlation_column(&final_fsi, &accuracy),
        corr_fhs_accuracy: correlation_column(&horizon_fhs, &accuracy),
        threshold_reports: threshold_sweep(&fhs_scores, thresholds)?,
        intervention_outcomes: BTreeMap::new(),
        digests,
    })
}

/// Full failure study: results in draw order plus the scored summary.
#[derive(Debug, Clone)]
pub struct FailureStudyOutput {
    pub summary: CampaignSummary,
    pub results: Vec<RunResult>,
}

/// Runs the configured campaign (desk grid or lottery) and scores both
/// failure predictors on it.
pub fn failure_study(config: &ExperimentConfig) -> Result<FailureStudyOutput> {
    let draws = campaign_draws(config)?;
    let results = run_campaign(&draws, config.campaign.parallel)?;
    let summary = summarize_campaign(&results, &DEFAULT_THRESHOLDS)?;
    Ok(FailureStudyOutput { summary, results })
}

/// Outcome of one intervention arm on one flagged run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmOutcome {
    pub final_accuracy: f64,
    pub recovered: bool,
    pub diverged: bool,
}

/// One flagged run's branch point and per-arm outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRun {
    pub run_id: String,
    pub seed: u64,
    /// Step of the checkpoint where the run was flagged and branched.
    pub flag_step: usize,
    pub fhs_at_horizon: f64,
    pub optimal_accuracy: f64,
    pub arms: BTreeMap<String, ArmOutcome>,
}

/// Indices of runs whose heterogeneity score at the horizon crossed the
/// intervention flag.
pub fn flagged_runs(results: &[RunResult]) -> Vec<usize> {
    results
        .iter()
        .enumerate()
        .filter(|(_, r)| r.fhs_at_10pct > FLAG_THRESHOLD)
        .map(|(i, _)| i)
        .collect()
}

/// Retraces one run to `flag_step` and resumes it under every intervention
/// arm, returning each arm's final outcome.
///
/// The retrace is exact: training is deterministic given the config and
/// seed, so stepping a fresh trainer to the flagged checkpoint reproduces
/// the original weights bit for bit, and the `continue` arm finishes
/// identically to the unbranched run. Reinitialization draws come from an
/// `"intervention"` stream keyed by the run seed and arm index, so arms
/// are independent of each other and of the training streams.
pub fn branch_with_interventions(
    config: &ExperimentConfig,
    seed: u64,
    flag_step: usize,
    optimal_accuracy: f64,
) -> Result<BTreeMap<String, ArmOutcome>> {
    if flag_step >= config.training.steps {
        return Err(Error::invalid(format!(
            "branch point {flag_step} is not before the end of training ({})",
            config.training.steps
        )));
    }
    let mut base = Trainer::new(config, seed)?;
    while base.steps_done() < flag_step && !base.is_diverged() {
        base.step()?;
    }
    if base.steps_done() != flag_step {
        return Err(Error::invalid(format!(
            "run diverged at step {} while retracing to branch point {flag_step}",
            base.steps_done()
        )));
    }

    let mut arms = BTreeMap::new();
    for (arm_index, name) in ARM_NAMES.iter().enumerate() {
        let mut branch = base.clone();
        let mut rng = stream(derive_seed(seed, arm_index as u64), "intervention");
        match *name {
            "continue" => {}
            "reinit-experts" => {
                reinit_experts_keep_router(&mut branch.model, &mut rng, false)?;
            }
            "reinit-experts-half-lambda" => {
                reinit_experts_keep_router(&mut branch.model, &mut rng, true)?;
            }
            "full-reinit" => {
                reinit_experts_keep_router(&mut branch.model, &mut rng, false)?;
                reinit_router(&mut branch.model, &mut rng);
            }
            other => return Err(Error::invalid(format!("unknown intervention arm {other}"))),
        }
        branch.run_to_completion()?;
        let diverged = branch.is_diverged();
        let final_accuracy = if diverged {
            0.0
        } else {
            let eval = branch.eval_batch(config.diagnostics.bayes_samples, "eval");
            classification_accuracy(&branch.model, &eval)?
        };
        arms.insert(
            name.to_string(),
            ArmOutcome {
                final_accuracy,
                recovered: !is_failure(final_accuracy, optimal_accuracy),
                diverged,
            },
        );
    }
    Ok(arms)
}

/// Full intervention study: campaign summary with per-arm outcomes filled
/// in, plus the per-run branch results.
#[derive(Debug, Clone)]
pub struct InterventionStudyOutput {
    pub summary: CampaignSummary,
    pub flagged: Vec<InterventionRun>,
    pub results: Vec<RunResult>,
}

fn aggregate_arms(flagged: &[InterventionRun]) -> Result<BTreeMap<String, InterventionOutcome>> {
    let mut outcomes = BTreeMap::new();
    for name in ARM_NAMES {
        let mut recoveries = 0usize;
        let mut accuracy_sum = 0.0;
        for run in flagged {
            let arm = run.arms.get(name).ok_or_else(|| {
                Error::invalid(format!("flagged run {} is missing arm {name}", run.run_id))
            })?;
            recoveries += usize::from(arm.recovered);
            accuracy_sum += arm.final_accuracy;
        }
        outcomes.insert(
            name.to_string(),
            InterventionOutcome {
                runs: flagged.len(),
                recovery_rate: recoveries as f64 / flagged.len() as f64,
                mean_final_accuracy: accuracy_sum / flagged.len() as f64,
            },
        );
    }
    Ok(outcomes)
}

/// Runs the lottery campaign, flags every run whose heterogeneity score at
/// the early horizon crossed [`FLAG_THRESHOLD`], branches each flagged run
/// at that checkpoint into the four intervention arms, and aggregates
/// recovery per arm. A campaign that flags nothing has no intervention to
/// study and is rejected as degenerate.
pub fn intervention_study(config: &ExperimentConfig) -> Result<InterventionStudyOutput> {
    let draws = lottery_draws(config)?;
    let results = run_campaign(&draws, config.campaign.parallel)?;
    let mut summary = summarize_campaign(&results, &DEFAULT_THRESHOLDS)?;

    let flagged_indices = flagged_runs(&results);
    if flagged_indices.is_empty() {
        return Err(Error::DegenerateCampaign(format!(
            "none of the {} runs crossed the intervention flag (heterogeneity score > {} at the {:.0}% horizon)",
            results.len(),
            FLAG_THRESHOLD,
            EARLY_HORIZON * 100.0,
        )));
    }

    let pool = thread_pool(config.campaign.parallel)?;
    let flagged: Vec<InterventionRun> = pool.install(|| {
        flagged_indices
            .par_iter()
            .map(|&i| {
                let result = &results[i];
                let record = record_at_fraction(result, EARLY_HORIZON)?;
                let arms = branch_with_interventions(
                    &result.config,
                    result.seed,
                    record.step,
                    result.optimal_accuracy,
                )?;
                Ok(InterventionRun {
                    run_id: run_id(i),
                    seed: result.seed,
                    flag_step: record.step,
                    fhs_at_horizon: result.fhs_at_10pct,
                    optimal_accuracy: result.optimal_accuracy,
                    arms,
                })
            })
            .collect::<Result<_>>()
    })?;

    summary.intervention_outcomes = aggregate_arms(&flagged)?;
    Ok(InterventionStudyOutput {
        summary,
        flagged,
        results,
    })
}

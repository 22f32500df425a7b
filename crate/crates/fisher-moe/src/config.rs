//! Experiment configuration: a flat, human-editable TOML document with
//! explicit defaults.
//!
//! Every field has a default, so an empty document is a valid config;
//! serializing a parsed config echoes all effective values, which makes
//! archived outputs diffable. Validation errors name the offending
//! `section.key`. The routing mode is written either as the string
//! `"dense"` or as an integer top-k value.

use serde::{Deserialize, Serialize};

use crate::model::{ExpertArch, Routing};
use crate::simplex::ProbabilityVector;
use crate::task::GaussianMixtureSpec;
use crate::{Error, Result};

/// Synthetic task section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub n_clusters: usize,
    pub input_dim: usize,
    pub separation: f64,
    pub covariance_scale: f64,
    /// Relative sampling weight of each cluster (any positive scale, they
    /// are normalized). Uniform when omitted.
    pub mixture_weights: Option<Vec<f64>>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            n_clusters: 4,
            input_dim: 8,
            separation: 3.0,
            covariance_scale: 1.0,
            mixture_weights: None,
        }
    }
}

/// Routing mode as it appears in the config file: `"dense"` or an integer k.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RoutingConfig {
    TopK(usize),
    Named(DenseName),
}

/// The only accepted routing name.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DenseName {
    #[serde(rename = "dense")]
    Dense,
}

/// Model section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_experts: usize,
    pub tau: f64,
    pub routing: RoutingConfig,
    pub lambda: f64,
    /// Multiplies the Xavier bound of the router only.
    pub init_scale: f64,
    pub expert_arch: ExpertArchName,
    /// Hidden width, used only when expert_arch = "mlp".
    pub hidden_dim: usize,
    /// Redundant with the task; when set explicitly they must agree with it.
    pub input_dim: Option<usize>,
    pub n_classes: Option<usize>,
}

/// Expert architecture name in the config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ExpertArchName {
    #[serde(rename = "linear")]
    Linear,
    #[serde(rename = "mlp")]
    Mlp,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_experts: 4,
            tau: 1.0,
            routing: RoutingConfig::Named(DenseName::Dense),
            lambda: 0.01,
            init_scale: 1.0,
            expert_arch: ExpertArchName::Linear,
            hidden_dim: 16,
            input_dim: None,
            n_classes: None,
        }
    }
}

/// Optimizer selector. Plain gradient descent is the mode the theory is
/// stated for; Adam is offered for robustness experiments only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimizerName {
    #[serde(rename = "gd")]
    Gd,
    #[serde(rename = "adam")]
    Adam,
}

/// Training section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub eta: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerName,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            eta: 0.05,
            steps: 2000,
            batch_size: 64,
            optimizer: OptimizerName::Gd,
        }
    }
}

/// Diagnostics section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// Fraction of training between checkpoints (0.025 = 40 checkpoints).
    pub checkpoint_fraction: f64,
    pub fim_batch_size: usize,
    /// Fixed held-out probe set size, reused across checkpoints.
    pub probe_size: usize,
    /// Monte Carlo sample count for the reference accuracy estimate.
    pub bayes_samples: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            checkpoint_fraction: 0.025,
            fim_batch_size: 256,
            probe_size: 2048,
            bayes_samples: 20_000,
        }
    }
}

/// Hyperparameter lottery: each campaign run draws one value per axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LotteryConfig {
    pub runs: usize,
    pub n_experts: Vec<usize>,
    pub lambda: Vec<f64>,
    pub eta: Vec<f64>,
    pub init_scale: Vec<f64>,
    pub separation: Vec<f64>,
    /// Routing mode forced on every lottery run. Sparse top-1 routing makes
    /// collapse and starvation reachable, which the campaign exists to study;
    /// dense routing stays the default everywhere else.
    pub routing: RoutingConfig,
    /// Optimizer forced on every lottery run. Adam's per-parameter step
    /// normalization makes the step-size axis bite independently of loss
    /// curvature, so the top of the grid lands past the stable range on
    /// every draw; plain gradient descent stays the default for single
    /// runs, where the geometry claims under test assume it.
    pub optimizer: OptimizerName,
    /// Expert architecture forced on every lottery run. Two-layer experts
    /// give expert reinitialization something real to reset and make
    /// saturation-style degradation reachable; linear experts are convex
    /// per expert and shrug off every cell of the grid.
    pub expert_arch: ExpertArchName,
}

impl Default for LotteryConfig {
    fn default() -> Self {
        LotteryConfig {
            runs: 40,
            n_experts: vec![4, 8],
            lambda: vec![0.0, 0.01, 0.05, 0.1, 0.5],
            eta: vec![0.003, 0.03, 0.3],
            init_scale: vec![0.001, 1.0, 10.0],
            // Low value: the top step size reliably breaks routing, the
            // rest learn cleanly. High value: the transition zone, where
            // the top step size makes real early progress and only then
            // degrades — the failure class a loss-trend score misses.
            separation: vec![1.0, 1.42],
            routing: RoutingConfig::TopK(1),
            optimizer: OptimizerName::Adam,
            expert_arch: ExpertArchName::Mlp,
        }
    }
}

/// Deterministic desk grid: the full cross of the two axes below, with
/// every cell trained once per campaign seed. Unlike the lottery, nothing
/// is drawn and nothing else is forced — the base config supplies task,
/// model, and optimizer, and only the step size and expert count vary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeskConfig {
    /// Expert counts crossed with every step-size rung.
    pub n_experts: Vec<usize>,
    /// Step-size ladder. The default ladder under plain gradient descent
    /// spans genuine underfitting (the bottom rungs cannot finish within
    /// the step budget) up to comfortable convergence, so run outcomes
    /// range over the whole healthy-to-failed spectrum deterministically.
    pub eta: Vec<f64>,
}

impl Default for DeskConfig {
    fn default() -> Self {
        DeskConfig {
            n_experts: vec![4, 8],
            eta: vec![0.00005, 0.0002, 0.001, 0.005, 0.02],
        }
    }
}

/// Campaign section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CampaignConfig {
    /// Distinct base seeds; single-run commands use the first. The desk
    /// grid repeats every cell once per seed.
    pub seeds: Vec<u64>,
    /// Worker threads for campaign runs; 0 = available parallelism.
    pub parallel: usize,
    pub lottery: Option<LotteryConfig>,
    pub desk: Option<DeskConfig>,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            seeds: (1..=10).collect(),
            parallel: 0,
            lottery: None,
            desk: None,
        }
    }
}

/// Complete experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_dir: String,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub diagnostics: DiagnosticsConfig,
    pub campaign: CampaignConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: "fisher-moe-out".to_string(),
            task: TaskConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            campaign: CampaignConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// The deterministic desk campaign: a gradient-descent step-size ladder
    /// on a two-cluster overlapping task, crossed with two expert counts and
    /// four seeds (40 runs).
    ///
    /// The bottom rungs underfit within the 8000-step budget — their
    /// heterogeneity score stays pinned near its initial value and their
    /// routing marginal never concentrates — while the top rungs converge,
    /// contracting heterogeneity and concentrating routing. Run outcomes
    /// therefore span failed-to-healthy with both early-warning signals
    /// moving monotonically, which is what makes this grid useful as a
    /// correlation fixture: concentration of the final routing marginal
    /// tracks accuracy positively, early heterogeneity tracks it negatively.
    ///
    /// Dense routing with narrow two-layer experts keeps every run in the
    /// regime where those signals are informative; the halved router init
    /// scale starts the routing marginal near uniform so underfit runs
    /// cannot inherit concentration from initialization noise.
    pub fn desk_default() -> ExperimentConfig {
        let mut config = ExperimentConfig::default();
        config.task.n_clusters = 2;
        config.task.separation = 1.6;
        config.model.expert_arch = ExpertArchName::Mlp;
        config.model.hidden_dim = 4;
        config.model.lambda = 0.0;
        config.model.init_scale = 0.5;
        config.training.optimizer = OptimizerName::Gd;
        config.training.steps = 8000;
        config.campaign.seeds = vec![1, 2, 3, 4];
        config.campaign.desk = Some(DeskConfig::default());
        config
    }

    /// Parses TOML text and validates every field.
    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let config: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Serializes the full effective configuration, defaults included.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config render: {e}")))
    }

    /// The routing mode as the model layer understands it.
    pub fn routing(&self) -> Routing {
        match self.model.routing {
            RoutingConfig::Named(DenseName::Dense) => Routing::Dense,
            RoutingConfig::TopK(k) => Routing::TopK(k),
        }
    }

    /// The expert architecture as the model layer understands it.
    pub fn expert_arch(&self) -> ExpertArch {
        match self.model.expert_arch {
            ExpertArchName::Linear => ExpertArch::Linear,
            ExpertArchName::Mlp => ExpertArch::Mlp {
                hidden: self.model.hidden_dim,
            },
        }
    }

    /// Builds the task distribution this config describes.
    pub fn task_spec(&self) -> Result<GaussianMixtureSpec> {
        let spec = GaussianMixtureSpec::arranged(
            self.task.n_clusters,
            self.task.input_dim,
            self.task.separation,
            self.task.covariance_scale,
        )?;
        match &self.task.mixture_weights {
            None => Ok(spec),
            Some(w) => {
                let sum: f64 = w.iter().sum();
                let weights = ProbabilityVector::new(w.iter().map(|v| v / sum).collect())?;
                GaussianMixtureSpec::new(
                    spec.means,
                    spec.covariance_scale,
                    weights,
                    spec.cluster_labels,
                )
            }
        }
    }

    /// Checks all range and consistency constraints, naming `section.key`
    /// in every message.
    pub fn validate(&self) -> Result<()> {
        fn bad(key: &str, why: String) -> Error {
            Error::Config(format!("{key}: {why}"))
        }
        let t = &self.task;
        if t.n_clusters < 2 {
            return Err(bad("task.n_clusters", format!("need at least 2, got {}", t.n_clusters)));
        }
        if t.input_dim == 0 {
            return Err(bad("task.input_dim", "must be positive".into()));
        }
        if !(t.separation > 0.0) {
            return Err(bad("task.separation", format!("must be positive, got {}", t.separation)));
        }
        if !(t.covariance_scale > 0.0) {
            return Err(bad(
                "task.covariance_scale",
                format!("must be positive, got {}", t.covariance_scale),
            ));
        }
        if let Some(w) = &t.mixture_weights {
            if w.len() != t.n_clusters {
                return Err(bad(
                    "task.mixture_weights",
                    format!("need one weight per cluster, got {} for {}", w.len(), t.n_clusters),
                ));
            }
            for (i, v) in w.iter().enumerate() {
                if !(*v > 0.0) || !v.is_finite() {
                    return Err(bad(
                        "task.mixture_weights",
                        format!("entry {i} must be positive and finite, got {v}"),
                    ));
                }
            }
        }
        let m = &self.model;
        if m.n_experts == 0 {
            return Err(bad("model.n_experts", "must be positive".into()));
        }
        if !(m.tau > 0.0) {
            return Err(bad("model.tau", format!("must be positive, got {}", m.tau)));
        }
        if let RoutingConfig::TopK(k) = m.routing {
            if k == 0 || k > m.n_experts {
                return Err(bad(
                    "model.routing",
                    format!("top-k must be in [1, {}], got {k}", m.n_experts),
                ));
            }
        }
        if !(m.lambda >= 0.0) {
            return Err(bad("model.lambda", format!("must be non-negative, got {}", m.lambda)));
        }
        if !(m.init_scale > 0.0) {
            return Err(bad(
                "model.init_scale",
                format!("must be positive, got {}", m.init_scale),
            ));
        }
        if m.expert_arch == ExpertArchName::Mlp && m.hidden_dim == 0 {
            return Err(bad("model.hidden_dim", "must be positive for mlp experts".into()));
        }
        if let Some(d) = m.input_dim {
            if d != t.input_dim {
                return Err(bad(
                    "model.input_dim",
                    format!("disagrees with task.input_dim ({d} vs {})", t.input_dim),
                ));
            }
        }
        if let Some(c) = m.n_classes {
            if c != t.n_clusters {
                return Err(bad(
                    "model.n_classes",
                    format!("disagrees with task.n_clusters ({c} vs {})", t.n_clusters),
                ));
            }
        }
        let tr = &self.training;
        if !(tr.eta >= 0.0) {
            return Err(bad("training.eta", format!("must be non-negative, got {}", tr.eta)));
        }
        if tr.steps == 0 {
            return Err(bad("training.steps", "must be positive".into()));
        }
        if tr.batch_size == 0 {
            return Err(bad("training.batch_size", "must be positive".into()));
        }
        let d = &self.diagnostics;
        if !(d.checkpoint_fraction > 0.0 && d.checkpoint_fraction <= 1.0) {
            return Err(bad(
                "diagnostics.checkpoint_fraction",
                format!("must be in (0, 1], got {}", d.checkpoint_fraction),
            ));
        }
        if d.fim_batch_size == 0 {
            return Err(bad("diagnostics.fim_batch_size", "must be positive".into()));
        }
        if d.probe_size == 0 {
            return Err(bad("diagnostics.probe_size", "must be positive".into()));
        }
        if d.bayes_samples < 10_000 {
            return Err(bad(
                "diagnostics.bayes_samples",
                format!("need at least 10000 for a stable reference, got {}", d.bayes_samples),
            ));
        }
        let c = &self.campaign;
        if c.seeds.is_empty() {
            return Err(bad("campaign.seeds", "must not be empty".into()));
        }
        let mut sorted = c.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != c.seeds.len() {
            return Err(bad("campaign.seeds", "seeds must be distinct".into()));
        }
        if let Some(l) = &c.lottery {
            if l.runs == 0 {
                return Err(bad("campaign.lottery.runs", "must be positive".into()));
            }
            let axes: [(&str, bool); 5] = [
                ("campaign.lottery.n_experts", l.n_experts.is_empty()),
                ("campaign.lottery.lambda", l.lambda.is_empty()),
                ("campaign.lottery.eta", l.eta.is_empty()),
                ("campaign.lottery.init_scale", l.init_scale.is_empty()),
                ("campaign.lottery.separation", l.separation.is_empty()),
            ];
            for (key, empty) in axes {
                if empty {
                    return Err(bad(key, "axis must list at least one value".into()));
                }
            }
            if l.n_experts.iter().any(|&n| n == 0) {
                return Err(bad("campaign.lottery.n_experts", "entries must be positive".into()));
            }
            if l.lambda.iter().any(|v| !(*v >= 0.0)) {
                return Err(bad("campaign.lottery.lambda", "entries must be non-negative".into()));
            }
            if l.eta.iter().any(|v| !(*v >= 0.0)) {
                return Err(bad("campaign.lottery.eta", "entries must be non-negative".into()));
            }
            if l.init_scale.iter().any(|v| !(*v > 0.0)) {
                return Err(bad("campaign.lottery.init_scale", "entries must be positive".into()));
            }
            if l.separation.iter().any(|v| !(*v > 0.0)) {
                return Err(bad("campaign.lottery.separation", "entries must be positive".into()));
            }
            if let RoutingConfig::TopK(k) = l.routing {
                let min_experts = l.n_experts.iter().copied().min().unwrap_or(0);
                if k == 0 || k > min_experts {
                    return Err(bad(
                        "campaign.lottery.routing",
                        format!("top-k must be in [1, {min_experts}] for every drawn width, got {k}"),
                    ));
                }
            }
        }
        if let Some(desk) = &c.desk {
            if c.lottery.is_some() {
                return Err(bad(
                    "campaign.desk",
                    "cannot be combined with campaign.lottery; keep one grid".into(),
                ));
            }
            if desk.n_experts.is_empty() {
                return Err(bad(
                    "campaign.desk.n_experts",
                    "axis must list at least one value".into(),
                ));
            }
            if desk.eta.is_empty() {
                return Err(bad("campaign.desk.eta", "axis must list at least one value".into()));
            }
            if desk.n_experts.iter().any(|&n| n == 0) {
                return Err(bad("campaign.desk.n_experts", "entries must be positive".into()));
            }
            if desk.eta.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(bad(
                    "campaign.desk.eta",
                    "entries must be positive and finite".into(),
                ));
            }
            if let RoutingConfig::TopK(k) = self.model.routing {
                let min_experts = desk.n_experts.iter().copied().min().unwrap_or(0);
                if k > min_experts {
                    return Err(bad(
                        "campaign.desk.n_experts",
                        format!("every width must be at least the routing top-k {k}"),
                    ));
                }
            }
        }
        if self.output_dir.is_empty() {
            return Err(bad("output_dir", "must not be empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_yields_echoed_defaults() {
        let config = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(config, ExperimentConfig::default());
        let rendered = config.to_toml_string().unwrap();
        // all sections and defaults appear in the echo
        for key in [
            "output_dir",
            "[task]",
            "n_clusters = 4",
            "[model]",
            "routing = \"dense\"",
            "lambda = 0.01",
            "[training]",
            "optimizer = \"gd\"",
            "[diagnostics]",
            "checkpoint_fraction = 0.025",
            "[campaign]",
        ] {
            assert!(rendered.contains(key), "echo missing {key}:\n{rendered}");
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let mut config = ExperimentConfig::default();
        config.model.routing = RoutingConfig::TopK(2);
        config.model.expert_arch = ExpertArchName::Mlp;
        config.training.eta = 0.003;
        config.campaign.lottery = Some(LotteryConfig::default());
        config.campaign.seeds = vec![7, 9, 11];
        let text = config.to_toml_string().unwrap();
        let reparsed = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(config, reparsed);
    }

    #[test]
    fn routing_accepts_dense_and_integers() {
        let config = ExperimentConfig::from_toml_str("[model]\nrouting = \"dense\"\n").unwrap();
        assert_eq!(config.routing(), Routing::Dense);
        let config = ExperimentConfig::from_toml_str("[model]\nrouting = 2\n").unwrap();
        assert_eq!(config.routing(), Routing::TopK(2));
        // unknown routing names fail at parse time
        assert!(ExperimentConfig::from_toml_str("[model]\nrouting = \"sparse\"\n").is_err());
        // out-of-range k fails validation with the key named
        let err =
            ExperimentConfig::from_toml_str("[model]\nrouting = 9\n").unwrap_err();
        assert!(err.to_string().contains("model.routing"), "{err}");
    }

    #[test]
    fn validation_names_offending_keys() {
        let cases = [
            ("[task]\nn_clusters = 1\n", "task.n_clusters"),
            ("[task]\nseparation = 0.0\n", "task.separation"),
            ("[model]\ntau = 0.0\n", "model.tau"),
            ("[model]\nlambda = -0.5\n", "model.lambda"),
            ("[model]\ninit_scale = 0.0\n", "model.init_scale"),
            ("[training]\neta = -0.1\n", "training.eta"),
            ("[training]\nsteps = 0\n", "training.steps"),
            (
                "[diagnostics]\ncheckpoint_fraction = 1.5\n",
                "diagnostics.checkpoint_fraction",
            ),
            ("[campaign]\nseeds = []\n", "campaign.seeds"),
            ("[campaign]\nseeds = [3, 3]\n", "campaign.seeds"),
            (
                "[campaign.lottery]\nruns = 0\n",
                "campaign.lottery.runs",
            ),
            (
                "[campaign.lottery]\nlambda = []\n",
                "campaign.lottery.lambda",
            ),
            (
                "[task]\nmixture_weights = [1.0, 1.0]\n",
                "task.mixture_weights",
            ),
            (
                "[task]\nmixture_weights = [1.0, 1.0, 1.0, 0.0]\n",
                "task.mixture_weights",
            ),
            (
                "[campaign.desk]\neta = []\n",
                "campaign.desk.eta",
            ),
            (
                "[campaign.desk]\neta = [0.01, 0.0]\n",
                "campaign.desk.eta",
            ),
            (
                "[campaign.desk]\nn_experts = [4, 0]\n",
                "campaign.desk.n_experts",
            ),
            (
                "[model]\nrouting = 4\n[campaign.desk]\nn_experts = [2, 8]\n",
                "campaign.desk.n_experts",
            ),
            (
                "[campaign.lottery]\nruns = 4\n[campaign.desk]\neta = [0.01]\n",
                "campaign.desk",
            ),
        ];
        for (text, key) in cases {
            let err = ExperimentConfig::from_toml_str(text).unwrap_err();
            assert!(
                err.to_string().contains(key),
                "expected {key} in error for {text:?}, got: {err}"
            );
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml_str("[model]\nlerning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("lerning_rate"), "{err}");
    }

    #[test]
    fn dimension_echo_fields_must_agree_with_task() {
        let ok = ExperimentConfig::from_toml_str(
            "[task]\ninput_dim = 8\nn_clusters = 4\n[model]\ninput_dim = 8\nn_classes = 4\n",
        );
        assert!(ok.is_ok());
        let err = ExperimentConfig::from_toml_str("[model]\ninput_dim = 5\n").unwrap_err();
        assert!(err.to_string().contains("model.input_dim"), "{err}");
        let err = ExperimentConfig::from_toml_str("[model]\nn_classes = 7\n").unwrap_err();
        assert!(err.to_string().contains("model.n_classes"), "{err}");
    }

    #[test]
    fn parse_errors_carry_location_information() {
        let err = ExperimentConfig::from_toml_str("[task\nn_clusters = 4\n").unwrap_err();
        // the TOML parser anchors syntax errors by line
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn default_config_builds_model_and_task() {
        let config = ExperimentConfig::default();
        assert!(config.validate().is_ok());
        let spec = config.task_spec().unwrap();
        assert_eq!(spec.input_dim(), 8);
        assert_eq!(spec.n_classes(), 4);
        assert_eq!(config.expert_arch(), ExpertArch::Linear);
    }

    #[test]
    fn mixture_weights_are_normalized_into_the_task() {
        let config = ExperimentConfig::from_toml_str(
            "[task]\nn_clusters = 4\nmixture_weights = [4.0, 2.0, 1.0, 1.0]\n",
        )
        .unwrap();
        let spec = config.task_spec().unwrap();
        assert_eq!(spec.mixture_weights.values(), &[0.5, 0.25, 0.125, 0.125]);
        // round-trips through the echoed TOML
        let reparsed = ExperimentConfig::from_toml_str(&config.to_toml_string().unwrap()).unwrap();
        assert_eq!(config, reparsed);
        // omitted weights mean uniform
        let uniform = ExperimentConfig::default().task_spec().unwrap();
        assert_eq!(uniform.mixture_weights, ProbabilityVector::uniform(4).unwrap());
    }

    #[test]
    fn desk_preset_validates_and_pins_its_grid() {
        let config = ExperimentConfig::desk_default();
        config.validate().unwrap();
        assert_eq!(config.task.n_clusters, 2);
        assert_eq!(config.task.separation, 1.6);
        assert_eq!(config.model.routing, RoutingConfig::Named(DenseName::Dense));
        assert_eq!(config.model.expert_arch, ExpertArchName::Mlp);
        assert_eq!(config.model.hidden_dim, 4);
        assert_eq!(config.model.lambda, 0.0);
        assert_eq!(config.model.init_scale, 0.5);
        assert_eq!(config.training.optimizer, OptimizerName::Gd);
        assert_eq!(config.training.steps, 8000);
        assert_eq!(config.campaign.seeds, vec![1, 2, 3, 4]);
        let desk = config.campaign.desk.as_ref().unwrap();
        assert_eq!(desk.n_experts, vec![4, 8]);
        assert_eq!(desk.eta, vec![0.00005, 0.0002, 0.001, 0.005, 0.02]);
        assert!(config.campaign.lottery.is_none());
        // the preset survives the TOML round trip like any other config
        let reparsed = ExperimentConfig::from_toml_str(&config.to_toml_string().unwrap()).unwrap();
        assert_eq!(config, reparsed);
    }
}

//! Declarative run configuration: plain TOML with sections, unknown keys
//! rejected. Every experiment is reproducible from a config plus its seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use metricgp::meta::{JacobianMode, MetaConfig};
use metricgp::opt::{OptimizerKind, TrainConfig};
use metricgp::ssl::NystromPolicy;
use metricgp::theory::ConvergenceSpec;
use metricgp::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub annotation: AnnotationSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub personalization: PersonalizationSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub theory: TheorySection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub interactions: PathBuf,
    /// Channel manifest CSV (`name,kind,dim,path`).
    pub channels: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub test_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            test_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotationSection {
    pub window_k: usize,
    pub samples_h: usize,
}

impl Default for AnnotationSection {
    fn default() -> Self {
        Self {
            window_k: 5,
            samples_h: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: usize,
    /// ID-embedding width; the ID distance joins the ensemble when set.
    pub id_dim: Option<usize>,
    pub learn_lambda: bool,
    /// Sigmoid-aggregated ensemble when true; single-channel mode otherwise.
    pub ensemble: bool,
    pub margin_tau: f64,
    pub sigma2_init: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: 8,
            id_dim: None,
            learn_lambda: false,
            ensemble: true,
            margin_tau: 1.0,
            sigma2_init: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub steps: usize,
    pub learning_rate: f64,
    /// one of `plain-gradient`, `momentum`, `adaptive-moment`.
    pub optimizer: String,
    pub batch_items: Option<usize>,
    pub eval_every: usize,
    /// Parameter groups to freeze: `towers`, `lambda`, `id_embed`, `agg`,
    /// `noise`.
    pub freeze: Vec<String>,
    /// `auto`, `never`, or an inducing count for the low-rank objective.
    pub nystrom: String,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            steps: 400,
            learning_rate: 0.01,
            optimizer: "adaptive-moment".into(),
            batch_items: None,
            eval_every: 10,
            freeze: vec![],
            nystrom: "auto".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PersonalizationSection {
    pub inner_rate: f64,
    pub inner_steps: usize,
    pub outer_rate: f64,
    pub outer_steps: usize,
    /// `exact-one-step` or `taylor`.
    pub jacobian: String,
    /// Interpret mixing weights through softplus during adaptation.
    pub nonneg_weights: bool,
    /// Scale each user's inner rate by 1/n_u (mean-NLL convention).
    pub normalize_rate: bool,
}

impl Default for PersonalizationSection {
    fn default() -> Self {
        Self {
            inner_rate: 0.05,
            inner_steps: 1,
            outer_rate: 0.01,
            outer_steps: 20,
            jacobian: "exact-one-step".into(),
            nonneg_weights: true,
            normalize_rate: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub k: usize,
    pub horizon_days: i64,
    /// Per-user weight overrides (`user,h_1..h_p,b` CSV) applied in user
    /// scope when present.
    pub personalized_weights: Option<PathBuf>,
    /// User-scope cohort bounds on rated-item counts.
    pub user_min_items: usize,
    pub max_users: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            k: 10,
            horizon_days: 30,
            personalized_weights: None,
            user_min_items: 2,
            max_users: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheorySection {
    pub n_grid: Vec<usize>,
    pub trials: usize,
    pub dim: usize,
    pub sigma2: f64,
    pub hidden: usize,
    pub draws_per_trial: usize,
    pub heldout_per_point: usize,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for TheorySection {
    fn default() -> Self {
        let d = ConvergenceSpec::default();
        Self {
            n_grid: d.n_grid,
            trials: d.trials,
            dim: d.dim,
            sigma2: d.sigma2,
            hidden: d.hidden,
            draws_per_trial: d.draws_per_trial,
            heldout_per_point: d.heldout_per_point,
            steps: d.train.steps,
            learning_rate: d.train.learning_rate,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split.test_fraction > 0.0 && self.split.test_fraction < 1.0) {
            return Err(Error::Config("split.test_fraction must be in (0, 1)".into()));
        }
        if self.model.hidden == 0 {
            return Err(Error::Config("model.hidden must be at least 1".into()));
        }
        if self.model.margin_tau <= 0.0 {
            return Err(Error::Config("model.margin_tau must be positive".into()));
        }
        if self.model.ensemble && self.model.margin_tau >= 1.0 {
            eprintln!(
                "warning: margin_tau = {} never deactivates the hinge in ensemble mode \
                 (the ensemble distance stays below 1)",
                self.model.margin_tau
            );
        }
        if self.model.sigma2_init <= 0.0 {
            return Err(Error::Config("model.sigma2_init must be positive".into()));
        }
        self.optimizer_kind()?;
        self.nystrom_policy()?;
        self.jacobian_mode()?;
        if self.evaluation.k == 0 {
            return Err(Error::Config("evaluation.k must be at least 1".into()));
        }
        if self.evaluation.horizon_days <= 0 {
            return Err(Error::Config("evaluation.horizon_days must be positive".into()));
        }
        Ok(())
    }

    pub fn optimizer_kind(&self) -> Result<OptimizerKind> {
        match self.training.optimizer.as_str() {
            "plain-gradient" => Ok(OptimizerKind::Sgd),
            "momentum" => Ok(OptimizerKind::Momentum),
            "adaptive-moment" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }

    pub fn nystrom_policy(&self) -> Result<NystromPolicy> {
        match self.training.nystrom.as_str() {
            "auto" => Ok(NystromPolicy::Auto),
            "never" => Ok(NystromPolicy::Never),
            m => m
                .parse::<usize>()
                .map(|m| NystromPolicy::Always { m })
                .map_err(|_| {
                    Error::Config(format!(
                        "training.nystrom must be `auto`, `never` or an inducing count, got {m:?}"
                    ))
                }),
        }
    }

    pub fn jacobian_mode(&self) -> Result<JacobianMode> {
        match self.personalization.jacobian.as_str() {
            "exact-one-step" => Ok(JacobianMode::ExactOneStep),
            "taylor" => Ok(JacobianMode::Taylor),
            other => Err(Error::Config(format!("unknown jacobian mode {other:?}"))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            steps: self.training.steps,
            learning_rate: self.training.learning_rate,
            optimizer: self.optimizer_kind()?,
            batch_items: self.training.batch_items,
            seed: self.seed,
            eval_every: self.training.eval_every,
        })
    }

    pub fn meta_config(&self) -> Result<MetaConfig> {
        Ok(MetaConfig {
            inner_rate: self.personalization.inner_rate,
            inner_steps: self.personalization.inner_steps,
            outer_rate: self.personalization.outer_rate,
            outer_steps: self.personalization.outer_steps,
            jacobian_mode: self.jacobian_mode()?,
            seed: self.seed,
        })
    }

    pub fn theory_spec(&self) -> ConvergenceSpec {
        let mut spec = ConvergenceSpec::default();
        spec.n_grid = self.theory.n_grid.clone();
        spec.trials = self.theory.trials;
        spec.dim = self.theory.dim;
        spec.sigma2 = self.theory.sigma2;
        spec.hidden = self.theory.hidden;
        spec.draws_per_trial = self.theory.draws_per_trial;
        spec.heldout_per_point = self.theory.heldout_per_point;
        spec.train.steps = self.theory.steps;
        spec.train.learning_rate = self.theory.learning_rate;
        spec.seed = self.seed;
        spec
    }

    /// Serialized copy written into every output directory.
    pub fn resolved_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

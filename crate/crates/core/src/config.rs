//! Run configuration: a single JSON document with defaults for every field.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::TaskConfig;
use crate::error::{Error, Result};
use crate::model::{GranularityProfile, ModelConfig};
use crate::schedule::ScheduleParams;

/// How masks are produced during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Learnable thresholds with the adaptive coefficient.
    Leap,
    /// Learnable thresholds with `lambda_reg` fixed at `lambda_max`.
    LeapConstantLambda,
    /// Magnitude masks following the cubic schedule.
    HardCubic,
    /// `sigmoid(score) > s_t` masks with a constant score penalty.
    SoftConstant,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Leap,
        Method::LeapConstantLambda,
        Method::HardCubic,
        Method::SoftConstant,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Leap => "leap",
            Method::LeapConstantLambda => "leap-constant-lambda",
            Method::HardCubic => "hard-cubic",
            Method::SoftConstant => "soft-constant",
        }
    }

    pub fn uses_thresholds(self) -> bool {
        matches!(self, Method::Leap | Method::LeapConstantLambda)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("method", format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    /// Weights and every unpruned parameter; SGD with momentum.
    pub weights: f64,
    /// Thresholds; plain SGD.
    pub sigma: f64,
    /// Importance scores; plain SGD.
    pub scores: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            weights: 0.02,
            sigma: 2500.0,
            scores: 0.5,
        }
    }
}

/// Shape of the cubic ramp used by the baselines. The final sparsity is
/// `1 - target_density` and the ramp ends at the last optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub initial_sparsity: f64,
    pub warmup_steps: u64,
    pub cooldown_steps: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            initial_sparsity: 0.0,
            warmup_steps: 64,
            cooldown_steps: 128,
        }
    }
}

/// Dense teacher training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub min_accuracy: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.1,
            min_accuracy: 0.97,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub method: Method,
    pub profile: GranularityProfile,
    pub target_density: f64,
    pub temperature: f64,
    pub lambda_max: f64,
    pub lambda_min: f64,
    /// Weight of the distillation term; 0 trains on labels only.
    pub alpha: f64,
    pub distill_temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub learning_rates: LearningRates,
    pub momentum: f64,
    /// Global L2 norm limit on weight gradients before the momentum update.
    pub grad_clip: Option<f64>,
    /// Linear warmup length of the weight learning rate, in epochs.
    pub warmup_epochs: f64,
    pub schedule: ScheduleConfig,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub teacher: TeacherConfig,
    /// Required when `alpha > 0` from the command line.
    pub teacher_checkpoint: Option<PathBuf>,
    /// Start the student from the teacher's weights.
    pub init_from_teacher: bool,
    pub log_every: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Leap,
            profile: GranularityProfile::S1,
            target_density: 0.1,
            temperature: 32.0,
            lambda_max: 320.0,
            lambda_min: 10.0,
            alpha: 0.9,
            distill_temperature: 1.0,
            epochs: 10,
            batch_size: 32,
            seed: 17,
            learning_rates: LearningRates::default(),
            momentum: 0.9,
            grad_clip: Some(0.25),
            warmup_epochs: 1.0,
            schedule: ScheduleConfig::default(),
            task: TaskConfig::default(),
            model: ModelConfig::default(),
            teacher: TeacherConfig::default(),
            teacher_checkpoint: None,
            init_from_teacher: true,
            log_every: 20,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be positive and finite, got {v}")))
    }
}

fn nonnegative(field: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be nonnegative and finite, got {v}")))
    }
}

impl RunConfig {
    /// Parse and validate. Syntax errors report their line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| {
            Error::config(
                format!("line {} column {}", e.line(), e.column()),
                e.to_string(),
            )
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate(self.model.seq_len, self.model.vocab)?;
        if !(self.target_density > 0.0 && self.target_density <= 1.0) {
            return Err(Error::config(
                "target_density",
                format!("must lie in (0, 1], got {}", self.target_density),
            ));
        }
        positive("temperature", self.temperature)?;
        positive("lambda_min", self.lambda_min)?;
        if !(self.lambda_max >= self.lambda_min) || !self.lambda_max.is_finite() {
            return Err(Error::config(
                "lambda_max",
                format!("must be finite and at least lambda_min, got {}", self.lambda_max),
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", format!("must lie in [0, 1], got {}", self.alpha)));
        }
        positive("distill_temperature", self.distill_temperature)?;
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        nonnegative("learning_rates.weights", self.learning_rates.weights)?;
        nonnegative("learning_rates.sigma", self.learning_rates.sigma)?;
        nonnegative("learning_rates.scores", self.learning_rates.scores)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", format!("must lie in [0, 1), got {}", self.momentum)));
        }
        if let Some(c) = self.grad_clip {
            positive("grad_clip", c)?;
        }
        nonnegative("warmup_epochs", self.warmup_epochs)?;
        if self.log_every == 0 {
            return Err(Error::config("log_every", "must be positive"));
        }
        if self.teacher.epochs == 0 {
            return Err(Error::config("teacher.epochs", "must be positive"));
        }
        nonnegative("teacher.learning_rate", self.teacher.learning_rate)?;
        if !(0.0..=1.0).contains(&self.teacher.min_accuracy) {
            return Err(Error::config("teacher.min_accuracy", "must lie in [0, 1]"));
        }
        if matches!(self.method, Method::HardCubic | Method::SoftConstant) {
            self.schedule_params()?.validate()?;
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.task.train_size.div_ceil(self.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.epochs as u64
    }

    /// The baseline ramp for this run.
    pub fn schedule_params(&self) -> Result<ScheduleParams> {
        let p = ScheduleParams {
            s0: self.schedule.initial_sparsity,
            sf: 1.0 - self.target_density,
            t0: self.schedule.warmup_steps,
            tc: self.schedule.cooldown_steps,
            tf: self.total_steps(),
        };
        if p.sf <= 0.0 {
            return Err(Error::config(
                "target_density",
                "baseline methods need a target density below 1",
            ));
        }
        Ok(p)
    }
}

/// Command-line overrides applied on top of a loaded file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub method: Option<Method>,
    pub profile: Option<GranularityProfile>,
    pub target_density: Option<f64>,
    pub temperature: Option<f64>,
    pub lambda_max: Option<f64>,
    pub lambda_min: Option<f64>,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl Overrides {
    /// Apply and re-validate.
    pub fn apply(&self, mut config: RunConfig) -> Result<RunConfig> {
        if let Some(v) = self.method {
            config.method = v;
        }
        if let Some(v) = self.profile {
            config.profile = v;
        }
        if let Some(v) = self.target_density {
            config.target_density = v;
        }
        if let Some(v) = self.temperature {
            config.temperature = v;
        }
        if let Some(v) = self.lambda_max {
            config.lambda_max = v;
        }
        if let Some(v) = self.lambda_min {
            config.lambda_min = v;
        }
        if let Some(v) = self.alpha {
            config.alpha = v;
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = &self.out_dir {
            config.out_dir = v.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

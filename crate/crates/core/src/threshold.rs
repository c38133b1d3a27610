//! Learnable per-matrix thresholds and the target-ratio regularizer.
//!
//! Each prunable matrix `i` owns one threshold `σ_i`. Its keep fraction is
//! `k(σ_i) = sigmoid(σ_i / T)`, the global remaining ratio is the
//! element-count weighted mean of the `k(σ_i)`, and the regularizer
//! `(R - R_target)²` is only active while `R ≥ R_target`.

use crate::autodiff::{sigmoid, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Thresholds start at `SIGMA_INIT_SCALE · T`, i.e. `k ≈ 0.9933`.
pub const SIGMA_INIT_SCALE: f64 = 5.0;

/// `sigmoid(σ / T)`.
pub fn threshold_density(sigma: f64, temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::config(
            "temperature",
            format!("must be positive, got {temperature}"),
        ));
    }
    Ok(sigmoid(sigma / temperature))
}

/// Derivative of [`threshold_density`] with respect to `σ`: `k(1-k)/T`.
pub fn threshold_density_slope(sigma: f64, temperature: f64) -> Result<f64> {
    let k = threshold_density(sigma, temperature)?;
    Ok(k * (1.0 - k) / temperature)
}

/// One-sided quadratic penalty: `(R - R_target)²` if `R ≥ R_target`, else `0`.
pub fn sparsity_reg_loss(ratio: f64, target: f64) -> f64 {
    if ratio >= target {
        (ratio - target) * (ratio - target)
    } else {
        0.0
    }
}

/// Subgradient of [`sparsity_reg_loss`] in `R`.
pub fn sparsity_reg_slope(ratio: f64, target: f64) -> f64 {
    if ratio >= target {
        2.0 * (ratio - target)
    } else {
        0.0
    }
}

/// The learnable thresholds together with everything needed to turn them
/// into densities and a regularization penalty.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdBank {
    sigma: Vec<f64>,
    temperature: f64,
    target_ratio: f64,
    lambda_max: f64,
    lambda_min: f64,
    element_counts: Vec<usize>,
}

impl ThresholdBank {
    /// Every `σ_i` starts at `5T`.
    pub fn new(
        element_counts: Vec<usize>,
        temperature: f64,
        target_ratio: f64,
        lambda_max: f64,
        lambda_min: f64,
    ) -> Result<Self> {
        let sigma = vec![SIGMA_INIT_SCALE * temperature; element_counts.len()];
        Self::with_sigma(sigma, element_counts, temperature, target_ratio, lambda_max, lambda_min)
    }

    pub fn with_sigma(
        sigma: Vec<f64>,
        element_counts: Vec<usize>,
        temperature: f64,
        target_ratio: f64,
        lambda_max: f64,
        lambda_min: f64,
    ) -> Result<Self> {
        if element_counts.is_empty() {
            return Err(Error::config("element_counts", "need at least one matrix"));
        }
        if element_counts.contains(&0) {
            return Err(Error::config("element_counts", "every count must be positive"));
        }
        if sigma.len() != element_counts.len() {
            return Err(Error::Dimension(format!(
                "{} thresholds for {} matrices",
                sigma.len(),
                element_counts.len()
            )));
        }
        if sigma.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("threshold".into()));
        }
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::config("temperature", format!("must be positive, got {temperature}")));
        }
        if !(target_ratio > 0.0 && target_ratio <= 1.0) {
            return Err(Error::config(
                "target_density",
                format!("must lie in (0, 1], got {target_ratio}"),
            ));
        }
        if !(lambda_min > 0.0) || !lambda_min.is_finite() {
            return Err(Error::config("lambda_min", format!("must be positive, got {lambda_min}")));
        }
        if !(lambda_max >= lambda_min) || !lambda_max.is_finite() {
            return Err(Error::config(
                "lambda_max",
                format!("must be finite and at least lambda_min ({lambda_min}), got {lambda_max}"),
            ));
        }
        Ok(Self {
            sigma,
            temperature,
            target_ratio,
            lambda_max,
            lambda_min,
            element_counts,
        })
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn sigma_mut(&mut self) -> &mut [f64] {
        &mut self.sigma
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn target_ratio(&self) -> f64 {
        self.target_ratio
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda_min
    }

    pub fn element_counts(&self) -> &[usize] {
        &self.element_counts
    }

    pub fn total_elements(&self) -> usize {
        self.element_counts.iter().sum()
    }

    /// `k(σ_i)` for every matrix.
    pub fn densities(&self) -> Vec<f64> {
        self.sigma
            .iter()
            .map(|s| sigmoid(s / self.temperature))
            .collect()
    }

    /// Error if an optimizer step left any threshold non-finite.
    pub fn check_finite(&self) -> Result<()> {
        match self.sigma.iter().position(|s| !s.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!("threshold {i} is {}", self.sigma[i]))),
            None => Ok(()),
        }
    }
}

/// `Σ k(σ_i)·count_i / Σ count_i`.
pub fn remaining_ratio(bank: &ThresholdBank) -> f64 {
    let total = bank.total_elements() as f64;
    bank.densities()
        .iter()
        .zip(bank.element_counts())
        .map(|(k, &c)| k * c as f64)
        .sum::<f64>()
        / total
}

/// `max(λ_max · L_reg / (1 - R_target)², λ_min)`, with `L_reg` treated as a
/// plain number.
pub fn adaptive_lambda(reg_loss_value: f64, bank: &ThresholdBank) -> Result<f64> {
    if bank.target_ratio >= 1.0 {
        return Err(Error::config(
            "target_density",
            "adaptive coefficient is undefined at a target density of 1",
        ));
    }
    if !(reg_loss_value >= 0.0) {
        return Err(Error::Input(format!(
            "regularization loss must be nonnegative, got {reg_loss_value}"
        )));
    }
    let gap = 1.0 - bank.target_ratio;
    Ok((bank.lambda_max * (reg_loss_value / (gap * gap))).max(bank.lambda_min))
}

/// Snapshot of the regularizer after evaluating it on a graph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegState {
    pub current_ratio: f64,
    pub reg_loss_value: f64,
    pub lambda_reg: f64,
}

/// How the regularization coefficient is chosen each step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaMode {
    Adaptive,
    Constant(f64),
}

/// Graph handles for the thresholds of one step.
#[derive(Clone, Debug)]
pub struct ThresholdVars {
    pub sigma: Vec<Var>,
    /// `k(σ_i)` nodes; these feed the masked products as keep fractions.
    pub keep: Vec<Var>,
    /// `R(σ)`.
    pub ratio: Var,
}

/// Insert every `σ_i` as a tracked leaf and build `k(σ_i)` and `R(σ)`.
pub fn bind_thresholds(g: &mut Graph, bank: &ThresholdBank) -> Result<ThresholdVars> {
    let total = bank.total_elements() as f64;
    let inv_t = 1.0 / bank.temperature;
    let mut sigma = Vec::with_capacity(bank.len());
    let mut keep = Vec::with_capacity(bank.len());
    let mut ratio: Option<Var> = None;
    for (&s, &count) in bank.sigma.iter().zip(&bank.element_counts) {
        let sv = g.leaf(Tensor::scalar(s));
        let scaled = g.scale(sv, inv_t);
        let k = g.sigmoid(scaled);
        let share = g.scale(k, count as f64 / total);
        ratio = Some(match ratio {
            Some(acc) => g.add(acc, share)?,
            None => share,
        });
        sigma.push(sv);
        keep.push(k);
    }
    Ok(ThresholdVars {
        sigma,
        keep,
        ratio: ratio.expect("bank is never empty"),
    })
}

/// Terms of the pruning objective after it has been placed on the graph.
#[derive(Clone, Copy, Debug)]
pub struct LeapObjective {
    pub objective: Var,
    pub reg_loss: Var,
    pub state: RegState,
}

/// `L_pure + λ_reg · L_reg(σ)`, where `L_reg` is differentiated through `R(σ)`
/// and `λ_reg` is a detached number.
pub fn leap_objective(
    g: &mut Graph,
    pure_loss: Var,
    bank: &ThresholdBank,
    vars: &ThresholdVars,
    mode: LambdaMode,
) -> Result<LeapObjective> {
    let target = g.constant(Tensor::scalar(bank.target_ratio));
    let excess = g.sub(vars.ratio, target)?;
    let active = g.relu(excess);
    let reg_loss = g.mul(active, active)?;
    let reg_value = g.scalar_value(reg_loss);
    let lambda_reg = match mode {
        LambdaMode::Constant(v) => v,
        // A target of 1 can never be exceeded, so the penalty is identically
        // zero and the floor of the max applies.
        LambdaMode::Adaptive if bank.target_ratio >= 1.0 => bank.lambda_min,
        LambdaMode::Adaptive => adaptive_lambda(reg_value, bank)?,
    };
    let weighted = g.scale(reg_loss, lambda_reg);
    let objective = g.add(pure_loss, weighted)?;
    Ok(LeapObjective {
        objective,
        reg_loss,
        state: RegState {
            current_ratio: g.scalar_value(vars.ratio),
            reg_loss_value: reg_value,
            lambda_reg,
        },
    })
}

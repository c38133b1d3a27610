//! Baseline pruning rules: cubic sparsity schedule, magnitude masks and the
//! soft-threshold comparison.

use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::mask::{topk_mask, BlockGeometry, BlockMask};
use crate::tensor::Tensor;

/// Parameters of the cubic sparsity ramp. Steps are optimizer steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub s0: f64,
    pub sf: f64,
    pub t0: u64,
    pub tc: u64,
    pub tf: u64,
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.s0) {
            return Err(Error::config("schedule.s0", format!("must lie in [0, 1), got {}", self.s0)));
        }
        if !(self.sf > 0.0 && self.sf <= 1.0) {
            return Err(Error::config("schedule.sf", format!("must lie in (0, 1], got {}", self.sf)));
        }
        if self.s0 > self.sf {
            return Err(Error::config("schedule.s0", "must not exceed sf"));
        }
        if self.tc >= self.tf || self.t0 >= self.tf - self.tc {
            return Err(Error::config(
                "schedule.t0",
                format!(
                    "need 0 <= t0 < tf - tc, got t0={} tc={} tf={}",
                    self.t0, self.tc, self.tf
                ),
            ));
        }
        Ok(())
    }
}

/// Sparsity at step `t`: `s0` before `t0`, `sf` from `tf - tc` on, and
/// `sf + (s0 - sf)(1 - (t - t0)/((tf - tc) - t0))³` in between.
pub fn cubic_sparsity(t: f64, p: &ScheduleParams) -> Result<f64> {
    p.validate()?;
    if !(t >= 0.0) {
        return Err(Error::Input(format!("step must be nonnegative, got {t}")));
    }
    let (t0, end) = (p.t0 as f64, (p.tf - p.tc) as f64);
    Ok(if t < t0 {
        p.s0
    } else if t >= end {
        p.sf
    } else {
        let remaining = 1.0 - (t - t0) / (end - t0);
        p.sf + (p.s0 - p.sf) * remaining.powi(3)
    })
}

/// L1 norm of every `d x d` block.
pub fn block_magnitudes(weight: &Tensor, geometry: &BlockGeometry) -> Result<Tensor> {
    if weight.shape() != (geometry.d_in(), geometry.d_out()) {
        return Err(Error::Dimension(format!(
            "weight {:?} against geometry {}x{}",
            weight.shape(),
            geometry.d_in(),
            geometry.d_out()
        )));
    }
    let d = geometry.block();
    let mut agg = Tensor::zeros(geometry.grid_rows(), geometry.grid_cols());
    for r in 0..geometry.d_in() {
        for c in 0..geometry.d_out() {
            let v = agg.get(r / d, c / d) + weight.get(r, c).abs();
            agg.set(r / d, c / d, v);
        }
    }
    Ok(agg)
}

/// Hard-threshold mask: drop the `sparsity` fraction of blocks with the
/// smallest L1 magnitude.
pub fn magnitude_keep_mask(weight: &Tensor, geometry: &BlockGeometry, sparsity: f64) -> Result<BlockMask> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::Input(format!("sparsity {sparsity} outside [0, 1]")));
    }
    topk_mask(&block_magnitudes(weight, geometry)?, 1.0 - sparsity)
}

/// Soft-threshold mask: keep a block iff `sigmoid(score) > threshold`.
pub fn soft_threshold_mask(score: &Tensor, threshold: f64) -> BlockMask {
    let bits = score.data().iter().map(|&s| sigmoid(s) > threshold).collect();
    BlockMask::from_bits(score.rows(), score.cols(), bits).expect("shape preserved")
}

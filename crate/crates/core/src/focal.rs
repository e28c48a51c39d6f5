//! Binary focal loss and its analytic derivative.
//!
//! `FL(p_t) = -alpha * (1 - p_t)^gamma * ln(p_t)` with `p_t = p` for a positive
//! target and `1 - p` otherwise. `alpha` is a constant scale shared by both
//! classes; with `gamma = 0, alpha = 1` this is binary cross-entropy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FocalError {
    #[error("probability {0} outside the open interval (0, 1)")]
    DomainError(f64),
    #[error("invalid focal loss parameters: alpha = {alpha}, gamma = {gamma}")]
    BadParams { alpha: f64, gamma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalLossParams {
    alpha: f64,
    gamma: f64,
}

impl FocalLossParams {
    /// `alpha` in (0, 1], `gamma` >= 0.
    pub fn new(alpha: f64, gamma: f64) -> Result<Self, FocalError> {
        if !(alpha > 0.0 && alpha <= 1.0) || !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(FocalError::BadParams { alpha, gamma });
        }
        Ok(FocalLossParams { alpha, gamma })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

impl Default for FocalLossParams {
    fn default() -> Self {
        FocalLossParams {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

fn p_t(p: f64, y: bool) -> Result<f64, FocalError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(FocalError::DomainError(p));
    }
    Ok(if y { p } else { 1.0 - p })
}

pub fn focal_loss(p: f64, y: bool, params: &FocalLossParams) -> Result<f64, FocalError> {
    let pt = p_t(p, y)?;
    Ok(-params.alpha * (1.0 - pt).powf(params.gamma) * pt.ln())
}

/// `d FL / d p`.
pub fn focal_loss_grad(p: f64, y: bool, params: &FocalLossParams) -> Result<f64, FocalError> {
    let pt = p_t(p, y)?;
    let q = 1.0 - pt;
    let FocalLossParams { alpha, gamma } = *params;
    let modulating = if gamma == 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0) * pt.ln()
    };
    let d_pt = alpha * (modulating - q.powf(gamma) / pt);
    Ok(if y { d_pt } else { -d_pt })
}

/// Mean focal loss over a batch of probabilities and targets.
pub fn mean_focal_loss(
    probs: &[f64],
    targets: &[bool],
    params: &FocalLossParams,
) -> Result<f64, FocalError> {
    assert_eq!(probs.len(), targets.len(), "probability/target length mismatch");
    if probs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (&p, &y) in probs.iter().zip(targets) {
        total += focal_loss(p, y, params)?;
    }
    Ok(total / probs.len() as f64)
}

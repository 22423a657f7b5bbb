//! Radiance-domain math: gamma lifting, mu-law tonemapping, the training
//! loss, and PSNR in the linear and tonemapped domains.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{clamp_non_negative, Element, Tensor};

/// Display gamma of the simulated and assumed camera response.
pub const GAMMA: f64 = 2.2;

/// Slack allowed when validating values that should lie in `[0, 1]`.
pub const RANGE_SLACK: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TonemapConfig {
    pub mu: f64,
}

impl Default for TonemapConfig {
    fn default() -> Self {
        TonemapConfig { mu: 5000.0 }
    }
}

impl TonemapConfig {
    pub fn new(mu: f64) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::InvalidArgument(format!("mu must be positive, got {}", mu)));
        }
        Ok(TonemapConfig { mu })
    }
}

fn check_unit_range<T: Element>(what: &str, t: &Tensor<T>) -> Result<()> {
    let (lo, hi) = (t.min_value().as_f64(), t.max_value().as_f64());
    if t.is_empty() {
        return Ok(());
    }
    if !(lo >= -RANGE_SLACK && hi <= 1.0 + RANGE_SLACK) {
        return Err(Error::InvalidArgument(format!(
            "{} values must lie in [0, 1], found range [{}, {}]",
            what, lo, hi
        )));
    }
    Ok(())
}

/// Linearize an LDR image taken with `exposure` seconds: `I^2.2 / t`.
pub fn lift_to_hdr<T: Element>(ldr: &Tensor<T>, exposure: f64) -> Result<Tensor<T>> {
    if !(exposure > 0.0 && exposure.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "exposure time must be positive, got {}",
            exposure
        )));
    }
    check_unit_range("LDR", ldr)?;
    let gamma = T::from_f64_lossy(GAMMA);
    let t = T::from_f64_lossy(exposure);
    Ok(ldr.map(|v| clamp_non_negative(v).powf(gamma) / t))
}

/// Scalar mu-law curve, `ln(1 + mu y) / ln(1 + mu)`.
pub fn mu_law_scalar(y: f64, cfg: TonemapConfig) -> f64 {
    (cfg.mu * clamp_non_negative(y)).ln_1p() / cfg.mu.ln_1p()
}

/// Tonemap a tensor with the mu-law curve.
pub fn mu_law<T: Element>(y: &Tensor<T>, cfg: TonemapConfig) -> Result<Tensor<T>> {
    if !y.is_empty() && y.min_value().as_f64() < -RANGE_SLACK {
        return Err(Error::InvalidArgument(format!(
            "mu-law input must be non-negative, found {}",
            y.min_value()
        )));
    }
    let mu = T::from_f64_lossy(cfg.mu);
    let denom = mu.ln_1p();
    Ok(y.map(|v| (mu * clamp_non_negative(v)).ln_1p() / denom))
}

/// Differentiable mu-law on the tape.
pub fn mu_law_var<T: Element>(tape: &Tape<T>, y: Var, cfg: TonemapConfig) -> Var {
    tape.mu_law(y, cfg.mu)
}

/// Mean squared error between the tonemapped prediction and target.
pub fn loss_var<T: Element>(tape: &Tape<T>, prediction: Var, target: Var, cfg: TonemapConfig) -> Result<Var> {
    let (ps, ts) = (tape.shape(prediction), tape.shape(target));
    if ps != ts {
        return Err(Error::ShapeMismatch {
            op: "loss",
            lhs: ps,
            rhs: ts,
        });
    }
    let a = mu_law_var(tape, prediction, cfg);
    let b = mu_law_var(tape, target, cfg);
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// Value of [`loss_var`] for plain tensors.
pub fn loss<T: Element>(prediction: &Tensor<T>, target: &Tensor<T>, cfg: TonemapConfig) -> Result<f64> {
    mse(&mu_law(prediction, cfg)?, &mu_law(target, cfg)?)
}

pub fn mse<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "mse",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(sum / a.len().max(1) as f64)
}

/// PSNR in dB for a peak value of 1; `+inf` when `mse` is zero.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// PSNR in the linear radiance domain.
pub fn psnr_linear<T: Element>(prediction: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    check_unit_range("prediction", prediction)?;
    check_unit_range("target", target)?;
    Ok(psnr_from_mse(mse(prediction, target)?))
}

/// PSNR after mu-law tonemapping both images.
pub fn psnr_tonemapped<T: Element>(prediction: &Tensor<T>, target: &Tensor<T>, cfg: TonemapConfig) -> Result<f64> {
    check_unit_range("prediction", prediction)?;
    check_unit_range("target", target)?;
    psnr_linear(&mu_law(prediction, cfg)?, &mu_law(target, cfg)?)
}

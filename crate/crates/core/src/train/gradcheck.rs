//! Compare tape gradients with central finite differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::cells::derive_seed;
use crate::error::{Error, Result};
use crate::hdr::{loss_var, TonemapConfig};
use crate::layers::{Bound, ParamRegistry};
use crate::network::{FusionNet, SequenceBatch};

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is zero are judged by absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Coordinates sampled per tensor; `None` checks every coordinate.
    pub coords_per_tensor: Option<usize>,
    pub seed: u64,
    /// Finite-difference step relative to `max(1, |theta|)`.
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            coords_per_tensor: Some(200),
            seed: 0,
            step: 1e-4,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub params: Vec<ParamReport>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamReport> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn coordinates(len: usize, limit: Option<usize>, seed: u64) -> Vec<usize> {
    match limit {
        Some(k) if k < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = rand::seq::index::sample(&mut rng, len, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

fn evaluate(registry: &ParamRegistry<f64>, objective: &impl Fn(&Tape<f64>, &Bound) -> Result<Var>) -> Result<f64> {
    let tape = Tape::new();
    let params = registry.bind_frozen(&tape);
    let out = objective(&tape, &params)?;
    tape.value(out).item()
}

/// Check the gradient of a scalar `objective` with respect to every tensor
/// in `registry`.
pub fn check_gradients(
    registry: &ParamRegistry<f64>,
    objective: impl Fn(&Tape<f64>, &Bound) -> Result<Var>,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let tape = Tape::new();
    let params = registry.bind(&tape);
    let out = objective(&tape, &params)?;
    let mut grads = tape.backward(out)?;
    let analytic: Vec<_> = params
        .vars()
        .iter()
        .map(|&v| {
            grads
                .take(v)
                .ok_or_else(|| Error::InvalidArgument("parameter without gradient".into()))
        })
        .collect::<Result<_>>()?;

    let mut probe = registry.clone();
    let mut reports = Vec::with_capacity(registry.len());
    for (id, grad) in analytic.iter().enumerate() {
        let name = registry.by_id(id).0.to_string();
        let coords = coordinates(grad.len(), opts.coords_per_tensor, derive_seed(opts.seed, id as u64));
        let mut report = ParamReport {
            name,
            checked: coords.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &coords {
            let theta = registry.by_id(id).1.data()[i];
            let h = opts.step * theta.abs().max(1.0);
            probe.by_id_mut(id).data_mut()[i] = theta + h;
            let plus = evaluate(&probe, &objective)?;
            probe.by_id_mut(id).data_mut()[i] = theta - h;
            let minus = evaluate(&probe, &objective)?;
            probe.by_id_mut(id).data_mut()[i] = theta;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            let err = relative_error(a, numeric);
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        reports.push(report);
    }
    Ok(GradcheckReport {
        params: reports,
        tolerance: opts.tolerance,
    })
}

/// Gradient check of the training loss of `net` on `batch`.
pub fn gradcheck_net(
    net: &FusionNet<f64>,
    batch: &SequenceBatch<f64>,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let target = batch
        .target
        .clone()
        .ok_or_else(|| Error::InvalidArgument("gradient check needs a ground truth".into()))?;
    let tonemap = TonemapConfig::default();
    check_gradients(
        net.params(),
        |tape, params| {
            let y = net.forward(tape, params, batch)?;
            let t = tape.constant(target.clone());
            loss_var(tape, y, t, tonemap)
        },
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn linear_setup() -> (ParamRegistry<f64>, Tensor<f64>) {
        let mut reg = ParamRegistry::new();
        reg.insert("w", Tensor::from_fn([5], |i| i as f64 * 0.3 - 0.7)).unwrap();
        (reg, Tensor::from_fn([5], |i| 1.0 + i as f64))
    }

    #[test]
    fn linear_model_is_exact() {
        let (reg, x) = linear_setup();
        let report = check_gradients(
            &reg,
            |tape, p| {
                let xv = tape.constant(x.clone());
                Ok(tape.mean(tape.mul(p[0], xv)?))
            },
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() <= 1e-10, "{}", report.max_rel_error());
        assert_eq!(report.checked(), 5);
    }

    #[test]
    fn corrupted_backward_rule_is_caught() {
        // w * w with one factor detached: same forward, half the gradient
        let (reg, _) = linear_setup();
        let square = |detach: bool| {
            move |tape: &Tape<f64>, p: &Bound| {
                let a = if detach { tape.detach(p[0]) } else { p[0] };
                Ok(tape.mean(tape.mul(a, p[0])?))
            }
        };
        let good = check_gradients(&reg, square(false), &GradcheckOptions::default()).unwrap();
        assert!(good.passed(), "{}", good.max_rel_error());
        let bad = check_gradients(&reg, square(true), &GradcheckOptions::default()).unwrap();
        assert!(!bad.passed());
        assert!((bad.max_rel_error() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn sampling_is_seeded_and_bounded() {
        assert_eq!(coordinates(1000, Some(10), 4), coordinates(1000, Some(10), 4));
        assert_ne!(coordinates(1000, Some(10), 4), coordinates(1000, Some(10), 5));
        assert_eq!(coordinates(1000, Some(10), 4).len(), 10);
        assert_eq!(coordinates(7, Some(10), 4), (0..7).collect::<Vec<_>>());
        assert_eq!(coordinates(50, None, 0).len(), 50);
    }
}

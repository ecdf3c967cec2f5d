//! Noise schedule and the forward/reverse diffusion algebra.
//!
//! The reverse update here is deterministic: no fresh noise is injected when
//! stepping from t to t-1. Both subspace components reuse these operations.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cumulative signal fractions, one per step, strictly decreasing.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    alphabar: Vec<f64>,
    pub steps: usize,
}

/// Signal fraction at t = 1 (almost clean).
pub const ABAR_FIRST: f64 = 0.9999;
/// Signal fraction at t = T (almost pure noise).
pub const ABAR_LAST: f64 = 1e-4;
/// Stand-in for alphabar at "step 0", used by the terminal reverse step.
pub const ABAR_FINAL: f64 = 1.0 - 1e-12;

impl NoiseSchedule {
    /// log(alphabar_t) linear in t from log(0.9999) at t=1 to log(1e-4) at t=T.
    pub fn exponential(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Parameter {
                name: "steps",
                detail: format!("need at least 2 steps, got {steps}"),
            });
        }
        let (lo, hi) = (ABAR_FIRST.ln(), ABAR_LAST.ln());
        let alphabar = (0..steps)
            .map(|i| {
                let f = i as f64 / (steps - 1) as f64;
                (lo + f * (hi - lo)).exp()
            })
            .collect();
        Ok(NoiseSchedule { alphabar, steps })
    }

    /// Signal fraction at step `t`, 1-based.
    pub fn abar(&self, t: usize) -> f64 {
        self.alphabar[t - 1]
    }

    /// Signal fraction for the target of a reverse step from `t`.
    /// At t = 1 this is effectively 1, so the last step returns the clean
    /// estimate to numerical precision.
    pub fn abar_prev(&self, t: usize) -> f64 {
        if t > 1 {
            self.alphabar[t - 2]
        } else {
            ABAR_FINAL
        }
    }
}

fn check_abar(abar: f64) -> Result<()> {
    if !(abar > 0.0 && abar < 1.0) {
        return Err(Error::Parameter {
            name: "abar",
            detail: format!("{abar} outside (0,1)"),
        });
    }
    Ok(())
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Dimension {
            op,
            detail: format!("{:?} vs {:?}", a.shape, b.shape),
        });
    }
    Ok(())
}

/// Forward noising: `sqrt(abar) x0 + sqrt(1-abar) eps`.
pub fn q_sample(x0: &Tensor, eps: &Tensor, abar: f64) -> Result<Tensor> {
    check_same_shape("q_sample", x0, eps)?;
    check_abar(abar)?;
    let (sa, sb) = (abar.sqrt(), (1.0 - abar).sqrt());
    let data = x0.data.iter().zip(&eps.data).map(|(x, e)| sa * x + sb * e).collect();
    Tensor::new(&x0.shape, data)
}

/// Shared elementwise kernel for the clean-signal estimate; the autodiff op
/// and the plain function below both use it so their outputs match bit for bit.
#[inline]
pub(crate) fn predict_x0_kernel(x: &[f64], eps: &[f64], abar: f64, out: &mut [f64]) {
    let c = (1.0 - abar).sqrt();
    let inv = 1.0 / abar.sqrt();
    for (o, (xv, ev)) in out.iter_mut().zip(x.iter().zip(eps)) {
        *o = (xv - c * ev) * inv;
    }
}

/// Clean-signal estimate `(x_t - sqrt(1-abar) eps_hat) / sqrt(abar)`.
pub fn predict_x0(x_t: &Tensor, eps_hat: &Tensor, abar: f64) -> Result<Tensor> {
    check_same_shape("predict_x0", x_t, eps_hat)?;
    if abar <= 0.0 {
        return Err(Error::Parameter {
            name: "abar",
            detail: format!("{abar} must be positive"),
        });
    }
    let mut data = vec![0.0; x_t.data.len()];
    predict_x0_kernel(&x_t.data, &eps_hat.data, abar, &mut data);
    Tensor::new(&x_t.shape, data)
}

/// Shared kernel for the deterministic reverse update.
#[inline]
pub(crate) fn reverse_step_kernel(x0: &[f64], eps: &[f64], abar_prev: f64, out: &mut [f64]) {
    let (sa, sb) = (abar_prev.sqrt(), (1.0 - abar_prev).sqrt());
    for (o, (xv, ev)) in out.iter_mut().zip(x0.iter().zip(eps)) {
        *o = sa * xv + sb * ev;
    }
}

/// Deterministic reverse update `sqrt(abar_prev) x0_hat + sqrt(1-abar_prev) eps_hat`.
pub fn reverse_step(x0_hat: &Tensor, eps_hat: &Tensor, abar_prev: f64) -> Result<Tensor> {
    check_same_shape("reverse_step", x0_hat, eps_hat)?;
    check_abar(abar_prev)?;
    let mut data = vec![0.0; x0_hat.data.len()];
    reverse_step_kernel(&x0_hat.data, &eps_hat.data, abar_prev, &mut data);
    Tensor::new(&x0_hat.shape, data)
}

/// Mean squared error between predicted and true noise.
pub fn denoise_loss(net_output: &Tensor, true_eps: &Tensor) -> Result<f64> {
    check_same_shape("denoise_loss", net_output, true_eps)?;
    let n = net_output.data.len() as f64;
    Ok(net_output
        .data
        .iter()
        .zip(&true_eps.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

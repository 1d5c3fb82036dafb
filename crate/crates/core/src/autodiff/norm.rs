use serde::{Deserialize, Serialize};

use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics of one batch-norm layer.
///
/// Starts at mean 0 / variance 1 but counts as uninitialized until the
/// first train-mode pass has folded in real batch statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState<T = f32> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub batches_tracked: u64,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self { running_mean: vec![T::ZERO; channels], running_var: vec![T::ONE; channels], batches_tracked: 0 }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn is_initialized(&self) -> bool {
        self.batches_tracked > 0
    }
}

pub(super) struct Forward<T> {
    pub output: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(super) fn forward<T: Scalar>(
    [b, c, h, w]: [usize; 4],
    x: &[T],
    gamma: &[T],
    beta: &[T],
    state: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<Forward<T>> {
    let hw = h * w;
    let n = b * hw;
    let eps = T::from_f64(BN_EPS);
    let mut mean = vec![T::ZERO; c];
    let mut var = vec![T::ZERO; c];
    match mode {
        Mode::Train => {
            if n < 2 {
                return Err(Error::Config(format!(
                    "batch_norm in train mode needs at least 2 values per channel, got {n}"
                )));
            }
            // two-pass statistics in f64 for stability of the 32-bit path
            for ci in 0..c {
                let mut s = 0.0f64;
                for bi in 0..b {
                    s += x[(bi * c + ci) * hw..][..hw].iter().map(|v| v.to_f64()).sum::<f64>();
                }
                let m = s / n as f64;
                let mut ss = 0.0f64;
                for bi in 0..b {
                    ss += x[(bi * c + ci) * hw..][..hw].iter().map(|v| (v.to_f64() - m).powi(2)).sum::<f64>();
                }
                let v = ss / n as f64;
                mean[ci] = T::from_f64(m);
                var[ci] = T::from_f64(v);
                let unbiased = v * n as f64 / (n - 1) as f64;
                let mom = BN_MOMENTUM;
                let rm = state.running_mean[ci].to_f64();
                let rv = state.running_var[ci].to_f64();
                state.running_mean[ci] = T::from_f64((1.0 - mom) * rm + mom * m);
                state.running_var[ci] = T::from_f64((1.0 - mom) * rv + mom * unbiased);
            }
            state.batches_tracked += 1;
        }
        Mode::Eval => {
            if !state.is_initialized() {
                return Err(Error::State(
                    "batch_norm eval mode before any train-mode pass populated running statistics".into(),
                ));
            }
            mean.copy_from_slice(&state.running_mean);
            var.copy_from_slice(&state.running_var);
        }
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
    let mut output = vec![T::ZERO; x.len()];
    let mut xhat = vec![T::ZERO; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * hw;
            let (m, is, g, be) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
            for i in off..off + hw {
                let xh = (x[i] - m) * is;
                xhat[i] = xh;
                output[i] = g * xh + be;
            }
        }
    }
    Ok(Forward { output, xhat, inv_std })
}

pub(super) struct Backward<T> {
    pub dinput: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

pub(super) fn backward<T: Scalar>(
    [b, c, h, w]: [usize; 4],
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    train: bool,
) -> Backward<T> {
    let hw = h * w;
    let n = T::from_f64((b * hw) as f64);
    let mut dgamma = vec![T::ZERO; c];
    let mut dbeta = vec![T::ZERO; c];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * hw;
            for i in off..off + hw {
                dgamma[ci] += dy[i] * xhat[i];
                dbeta[ci] += dy[i];
            }
        }
    }
    let mut dinput = vec![T::ZERO; dy.len()];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * hw;
            let scale = gamma[ci] * inv_std[ci];
            if train {
                // dx = γ/σ · (dy − mean(dy) − x̂ · mean(dy·x̂))
                let mean_dy = dbeta[ci] / n;
                let mean_dyx = dgamma[ci] / n;
                for i in off..off + hw {
                    dinput[i] = scale * (dy[i] - mean_dy - xhat[i] * mean_dyx);
                }
            } else {
                for i in off..off + hw {
                    dinput[i] = scale * dy[i];
                }
            }
        }
    }
    Backward { dinput, dgamma, dbeta }
}

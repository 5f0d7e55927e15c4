//! Streaming quantile estimation for the keep/discard threshold.
//!
//! A multiplicative stochastic-approximation estimator: each incoming
//! magnitude nudges the running estimate up by a factor `(1 + rho*q)` when the
//! sample exceeds it, or down by `(1 - rho*(1-q))` otherwise. The estimate
//! converges to the q-th quantile of the stream and is the global value
//! threshold used in place of sorting all accumulated gradients. A batched
//! variant folds four magnitudes into one update (the peak hardware rate) by
//! averaging them.
//!
//! The printed recurrence in the source algorithm is self-referential (the
//! update is written in terms of the next estimate); the factor is applied to
//! the previous estimate here, the only reading that defines a computation.

use serde::{Deserialize, Serialize};

/// Initial estimate; fixed, not a hyperparameter.
pub const Q_HAT_INIT: f32 = 1e-6;
/// Adjustment rate; fixed, not a hyperparameter.
pub const RHO: f32 = 1e-3;

/// Running q-th quantile estimate over a stream of non-negative magnitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileEstimator {
    q: f32,
    rho: f32,
    q_hat: f32,
    n: u64,
}

impl QuantileEstimator {
    /// Track the `q`-th quantile, `q` in (0, 1). For a target kept-weight
    /// density `d`, use `q = 1 - d`.
    pub fn new(q: f32) -> Self {
        assert!(q > 0.0 && q < 1.0, "quantile must lie in (0,1), got {q}");
        Self { q, rho: RHO, q_hat: Q_HAT_INIT, n: 0 }
    }

    /// Current threshold estimate.
    #[inline]
    pub fn threshold(&self) -> f32 {
        self.q_hat
    }

    #[inline]
    pub fn q(&self) -> f32 {
        self.q
    }

    /// Updates consumed so far.
    #[inline]
    pub fn count(&self) -> u64 {
        self.n
    }

    /// Feed one magnitude. `delta` must be non-negative (callers pass absolute
    /// values of accumulated gradients); zero is legal and takes the downward
    /// branch.
    #[inline]
    pub fn update(&mut self, delta: f32) {
        assert!(delta >= 0.0, "negative magnitude {delta} fed to quantile estimator");
        if self.q_hat < delta {
            self.q_hat *= 1.0 + self.rho * self.q;
        } else {
            self.q_hat *= 1.0 - self.rho * (1.0 - self.q);
        }
        self.n += 1;
    }

    /// Feed four magnitudes as one averaged update; bit-identical to
    /// `update(mean(deltas))`.
    #[inline]
    pub fn update4(&mut self, deltas: [f32; 4]) {
        for d in deltas {
            assert!(d >= 0.0, "negative magnitude {d} fed to quantile estimator");
        }
        let mean = (deltas[0] + deltas[1] + deltas[2] + deltas[3]) / 4.0;
        self.update(mean);
    }

    /// Serialize estimator state (for checkpoints): (q, rho, q_hat bits, n).
    pub fn to_raw(&self) -> (f32, f32, u32, u64) {
        (self.q, self.rho, self.q_hat.to_bits(), self.n)
    }

    pub fn from_raw(q: f32, rho: f32, q_hat_bits: u32, n: u64) -> Self {
        Self { q, rho, q_hat: f32::from_bits(q_hat_bits), n }
    }
}

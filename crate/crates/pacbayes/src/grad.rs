//! Gradient plumbing for bound-driven training.
//!
//! Minimizing `q = kl_inverse(p(theta), K(theta))` needs the derivative of
//! an implicitly defined function: `q` satisfies `kl(p || q) = K`.
//! Differentiating that constraint gives the two coefficients of the
//! training direction,
//!
//! ```text
//! grad q = c_loss * grad p + c_kl * grad K,
//! c_loss = xi * (ln(q/p) + ln((1-p)/(1-q))),    c_kl = xi,
//! xi     = ((1-p)/(1-q) - p/q)^(-1).
//! ```
//!
//! Both coefficients are strictly positive on `0 < p < q < 1`: pushing
//! either the empirical risk or the complexity budget up can only push the
//! certified risk up. The sign and magnitude of `c_kl` are pinned by the
//! finite-difference checks in the test suite.
//!
//! When training optimizes a differentiable surrogate loss whose scale
//! differs from the loss actually certified, the chain rule contributes
//! one extra factor: the local slope between the two losses. The slope is
//! estimated as a ratio of rolling means by [`SlopeEstimator`], and
//! [`surrogate_coeffs`] folds it into the loss coefficient.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Risks closer than this make the implicit derivative ill conditioned.
pub const SEPARATION_EPS: f64 = 1e-9;

/// Coefficients of a training direction: the multiplier on the empirical
/// loss gradient and the multiplier on the complexity gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientSplit {
    pub loss_coeff: f64,
    pub kl_coeff: f64,
}

fn require_interior(p: f64, q: f64) -> Result<()> {
    if !p.is_finite() || !q.is_finite() || p <= 0.0 || q >= 1.0 || p > q {
        return Err(Error::invalid(format!(
            "implicit coefficients need 0 < p <= q < 1, got p = {p}, q = {q}"
        )));
    }
    let sep = q - p;
    if sep < SEPARATION_EPS {
        return Err(Error::DegenerateSeparation {
            sep,
            eps: SEPARATION_EPS,
        });
    }
    Ok(())
}

/// Scale factor `((1-p)/(1-q) - p/q)^(-1)` of the implicit derivative.
///
/// Requires `0 < p < q < 1` with `q - p >= SEPARATION_EPS`; the
/// denominator is then strictly positive, so `xi > 0`.
pub fn xi(p: f64, q: f64) -> Result<f64> {
    require_interior(p, q)?;
    Ok(1.0 / ((1.0 - p) / (1.0 - q) - p / q))
}

/// Both coefficients of the implicit derivative of the inverted kl bound.
pub fn implicit_coeffs(p: f64, q: f64) -> Result<GradientSplit> {
    let scale = xi(p, q)?;
    let loss_coeff = scale * ((q / p).ln() + ((1.0 - p) / (1.0 - q)).ln());
    Ok(GradientSplit {
        loss_coeff,
        kl_coeff: scale,
    })
}

/// Implicit coefficients evaluated at a surrogate operating point, with
/// the surrogate-to-target slope folded into the loss coefficient:
/// `(slope * c_loss(p, q), c_kl(p, q))`.
pub fn surrogate_coeffs(p: f64, q: f64, slope: f64) -> Result<GradientSplit> {
    if !slope.is_finite() || slope <= 0.0 {
        return Err(Error::invalid(format!("slope = {slope} is not positive")));
    }
    let base = implicit_coeffs(p, q)?;
    Ok(GradientSplit {
        loss_coeff: slope * base.loss_coeff,
        kl_coeff: base.kl_coeff,
    })
}

/// Factor that rescales a surrogate split's complexity coefficient so the
/// modulated split `(b_loss, eta * b_kl)` points along the target split:
/// `eta = (c_kl * b_loss) / (c_loss * b_kl)`.
pub fn modulation_eta(target: GradientSplit, surrogate: GradientSplit) -> Result<f64> {
    for (name, v) in [
        ("target loss_coeff", target.loss_coeff),
        ("target kl_coeff", target.kl_coeff),
        ("surrogate loss_coeff", surrogate.loss_coeff),
        ("surrogate kl_coeff", surrogate.kl_coeff),
    ] {
        if !v.is_finite() || v <= 0.0 {
            return Err(Error::invalid(format!("{name} = {v} is not positive")));
        }
    }
    Ok(target.kl_coeff * surrogate.loss_coeff / (target.loss_coeff * surrogate.kl_coeff))
}

/// Rolling estimate of the slope between a target loss and a surrogate
/// loss, as the ratio of windowed means. Single writer; owned by the
/// training loop.
#[derive(Debug, Clone)]
pub struct SlopeEstimator {
    window: usize,
    targets: VecDeque<f64>,
    surrogates: VecDeque<f64>,
}

impl SlopeEstimator {
    /// Requires `window >= 1`.
    pub fn new(window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::invalid("slope window must be at least 1"));
        }
        Ok(SlopeEstimator {
            window,
            targets: VecDeque::with_capacity(window),
            surrogates: VecDeque::with_capacity(window),
        })
    }

    /// Pushes one paired observation; both must lie in `[0, 1]`.
    pub fn update(&mut self, target_obs: f64, surrogate_obs: f64) -> Result<()> {
        for (name, v) in [("target", target_obs), ("surrogate", surrogate_obs)] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!(
                    "{name} observation {v} is outside [0, 1]"
                )));
            }
        }
        if self.targets.len() == self.window {
            self.targets.pop_front();
            self.surrogates.pop_front();
        }
        self.targets.push_back(target_obs);
        self.surrogates.push_back(surrogate_obs);
        Ok(())
    }

    /// `mean(targets) / mean(surrogates)`, or `None` before any update or
    /// while every surrogate observation is zero.
    pub fn current_slope(&self) -> Option<f64> {
        if self.targets.is_empty() {
            return None;
        }
        let t: f64 = self.targets.iter().sum();
        let s: f64 = self.surrogates.iter().sum();
        if s == 0.0 {
            return None;
        }
        Some(t / s)
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

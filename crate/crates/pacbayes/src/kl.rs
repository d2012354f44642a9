//! Binary relative entropy, its inversion, and closed-form upper bounds.
//!
//! The central quantity is the Bernoulli relative entropy in nats,
//!
//! ```text
//! kl(p || q) = p ln(p/q) + (1 - p) ln((1-p)/(1-q)),    0 ln 0 = 0,
//! ```
//!
//! together with its partial inverse in the second argument,
//!
//! ```text
//! kl_inverse(p, k) = sup { q in [p, 1) : kl(p || q) <= k }.
//! ```
//!
//! A risk certificate for a bounded loss takes an empirical risk `p` and a
//! complexity budget `K` and returns `kl_inverse(p, K)`, or one of five
//! closed-form relaxations of it that trade tightness for an explicit
//! formula. Each relaxation is paired with its exact inversion back to a
//! lower bound on `kl(p || q)`, so relaxation and inversion round-trip.

use crate::error::{Error, Result};

/// Default tolerance used when inverting the kl divergence numerically.
pub const DEFAULT_INVERSION_TOL: f64 = 1e-12;

fn require_unit_closed(name: &str, x: f64) -> Result<()> {
    if x.is_finite() && (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} = {x} is outside [0, 1]")))
    }
}

/// Bernoulli relative entropy `kl(p || q)` in nats.
///
/// Uses the convention `0 ln 0 = 0`, so `p` may sit on either endpoint.
/// A boundary `q` with `p != q` makes the divergence infinite and is
/// reported as [`Error::InfiniteDivergence`] rather than `f64::INFINITY`.
pub fn binary_kl(p: f64, q: f64) -> Result<f64> {
    require_unit_closed("p", p)?;
    require_unit_closed("q", q)?;
    if p == q {
        return Ok(0.0);
    }
    if q == 0.0 || q == 1.0 {
        return Err(Error::InfiniteDivergence { p, q });
    }
    let head = if p == 0.0 { 0.0 } else { p * (p / q).ln() };
    let tail = if p == 1.0 {
        0.0
    } else {
        (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()
    };
    Ok(head + tail)
}

/// Largest `q` in `[p, 1)` with `kl(p || q) <= k`.
///
/// For `q > p` the map `q -> kl(p || q)` is continuous and strictly
/// increasing, so the supremum is found by bisection. The returned value
/// always satisfies `kl(p || q) <= k`, hence stays a valid certificate,
/// and differs from the exact supremum by at most `tol` in divergence.
/// The search interval is capped at `1 - tol`; if even the cap satisfies
/// the constraint, the cap itself is returned.
///
/// Edge cases: `k = 0` returns `p`; `p = 0` uses the closed form
/// `1 - exp(-k)`; `p = 1` returns `1`.
pub fn kl_inverse(p: f64, k: f64, tol: f64) -> Result<f64> {
    require_unit_closed("p", p)?;
    if !k.is_finite() || k < 0.0 {
        return Err(Error::invalid(format!("divergence budget k = {k} is negative")));
    }
    if !tol.is_finite() || tol <= 0.0 || tol >= 1.0 {
        return Err(Error::invalid(format!("tolerance {tol} is outside (0, 1)")));
    }
    if p >= 1.0 {
        return Ok(1.0);
    }
    if k == 0.0 {
        return Ok(p);
    }
    let cap = 1.0 - tol;
    if p == 0.0 {
        // kl(0 || q) = ln(1/(1-q)), solved exactly.
        return Ok((-f64::exp_m1(-k)).min(cap));
    }
    if cap <= p || binary_kl(p, cap)? <= k {
        return Ok(cap.max(p));
    }
    let (mut lo, mut hi) = (p, cap);
    // Bisect until the bracket collapses to adjacent floats; 60 iterations
    // already reach f64 resolution, the loop bound is slack.
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if binary_kl(p, mid)? <= k {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // The lower end keeps kl(p || result) <= k.
    Ok(lo)
}

/// Empirical risk `p` paired with a candidate true risk `q >= p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskPair {
    p: f64,
    q: f64,
}

impl RiskPair {
    /// Requires `0 <= p <= q <= 1`.
    pub fn new(p: f64, q: f64) -> Result<Self> {
        require_unit_closed("p", p)?;
        require_unit_closed("q", q)?;
        if p > q {
            return Err(Error::invalid(format!(
                "risk pair needs p <= q, got p = {p}, q = {q}"
            )));
        }
        Ok(RiskPair { p, q })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn q(&self) -> f64 {
        self.q
    }
}

/// Inputs of the complexity term of a kl-form risk certificate.
///
/// For a posterior/prior divergence `kl_div`, sample count `n` and
/// confidence parameter `delta`, the certificate compares `kl(p || q)`
/// against `(kl_div + ln(2 sqrt(n) / delta)) / n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexityBudget {
    kl_div: f64,
    n: u64,
    delta: f64,
}

impl ComplexityBudget {
    /// Requires `kl_div >= 0`, `n >= 8` and `delta` in `(0, 1)`.
    ///
    /// The floor on `n` keeps `ln(2 sqrt(n)/delta) > 0` for every valid
    /// `delta`, so the budget is always strictly positive.
    pub fn new(kl_div: f64, n: u64, delta: f64) -> Result<Self> {
        if !kl_div.is_finite() || kl_div < 0.0 {
            return Err(Error::invalid(format!("kl_div = {kl_div} is negative")));
        }
        if n < 8 {
            return Err(Error::invalid(format!("sample count n = {n} is below 8")));
        }
        if !delta.is_finite() || delta <= 0.0 || delta >= 1.0 {
            return Err(Error::invalid(format!("delta = {delta} is outside (0, 1)")));
        }
        Ok(ComplexityBudget { kl_div, n, delta })
    }

    pub fn kl_div(&self) -> f64 {
        self.kl_div
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// `(kl_div + ln(2 sqrt(n) / delta)) / n`.
    pub fn complexity_term(&self) -> f64 {
        let n = self.n as f64;
        (self.kl_div + (2.0 * n.sqrt() / self.delta).ln()) / n
    }
}

/// The certificate families: the numeric kl inversion plus five
/// closed-form relaxations of it.
///
/// Formulas, with empirical risk `p` and complexity term `K`:
///
/// | kind      | bound on the true risk                                |
/// |-----------|--------------------------------------------------------|
/// | `Pinsker` | `p + sqrt(K/2)`                                        |
/// | `Pbq`     | `(sqrt(p + K/2) + sqrt(K/2))^2`                        |
/// | `Ts`      | `p + 2K + sqrt(2pK)`                                   |
/// | `Trp`     | `(sqrt(p + K(1-p)/2) + sqrt(K(1-p)/2))^2`              |
/// | `Rts`     | `p + K + sqrt(2pK)`                                    |
///
/// `MaurerInverse` is `kl_inverse(p, K)` itself, the tightest of the six.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoundKind {
    MaurerInverse,
    Pinsker,
    Pbq,
    Ts,
    Trp,
    Rts,
}

impl BoundKind {
    /// Every kind, relaxations first in tie-break order, inversion last.
    pub const ALL: [BoundKind; 6] = [
        BoundKind::Pinsker,
        BoundKind::Pbq,
        BoundKind::Ts,
        BoundKind::Trp,
        BoundKind::Rts,
        BoundKind::MaurerInverse,
    ];

    /// The closed-form kinds in the fixed tie-break order used when two
    /// relaxations are exactly equal.
    pub const RELAXATIONS: [BoundKind; 5] = [
        BoundKind::Pinsker,
        BoundKind::Pbq,
        BoundKind::Ts,
        BoundKind::Trp,
        BoundKind::Rts,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BoundKind::MaurerInverse => "maurer",
            BoundKind::Pinsker => "pinsker",
            BoundKind::Pbq => "pbq",
            BoundKind::Ts => "ts",
            BoundKind::Trp => "trp",
            BoundKind::Rts => "rts",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "maurer" => Ok(BoundKind::MaurerInverse),
            "pinsker" => Ok(BoundKind::Pinsker),
            "pbq" => Ok(BoundKind::Pbq),
            "ts" => Ok(BoundKind::Ts),
            "trp" => Ok(BoundKind::Trp),
            "rts" => Ok(BoundKind::Rts),
            other => Err(Error::invalid(format!(
                "unknown bound kind `{other}` (expected maurer, pinsker, pbq, ts, trp or rts)"
            ))),
        }
    }

    pub fn is_relaxation(self) -> bool {
        self != BoundKind::MaurerInverse
    }
}

impl std::fmt::Display for BoundKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Closed-form upper bound of the given kind at empirical risk `p` and
/// complexity term `k`. Values above 1 are returned raw; clamping is the
/// caller's concern. `MaurerInverse` has no closed form and is rejected.
pub fn relaxed_bound(kind: BoundKind, p: f64, k: f64) -> Result<f64> {
    require_unit_closed("p", p)?;
    if !k.is_finite() || k < 0.0 {
        return Err(Error::invalid(format!("complexity term k = {k} is negative")));
    }
    if k == 0.0 {
        return Ok(p);
    }
    let half = 0.5 * k;
    Ok(match kind {
        BoundKind::MaurerInverse => {
            return Err(Error::invalid(
                "relaxed_bound needs a closed-form kind, not the numeric inversion",
            ))
        }
        BoundKind::Pinsker => p + half.sqrt(),
        BoundKind::Pbq => {
            let s = (p + half).sqrt() + half.sqrt();
            s * s
        }
        BoundKind::Ts => p + 2.0 * k + (2.0 * p * k).sqrt(),
        BoundKind::Trp => {
            let shrunk = half * (1.0 - p);
            let s = (p + shrunk).sqrt() + shrunk.sqrt();
            s * s
        }
        BoundKind::Rts => p + k + (2.0 * p * k).sqrt(),
    })
}

/// Exact inversion of a closed-form bound: the largest complexity term
/// under which the relaxation still certifies `q`, equivalently a lower
/// bound on `kl(p || q)`. Round-trips with [`relaxed_bound`].
pub fn kl_lower_bound(kind: BoundKind, pair: RiskPair) -> Result<f64> {
    let (p, q) = (pair.p(), pair.q());
    if p == q {
        return Ok(0.0);
    }
    let gap = q - p;
    Ok(match kind {
        BoundKind::MaurerInverse => {
            return Err(Error::invalid(
                "kl_lower_bound needs a closed-form kind, not the numeric inversion",
            ))
        }
        BoundKind::Pinsker => 2.0 * gap * gap,
        BoundKind::Pbq => gap * gap / (2.0 * q),
        BoundKind::Ts => (2.0 * q - p - (4.0 * q * p - 3.0 * p * p).sqrt()) / 4.0,
        BoundKind::Trp => gap * gap / (2.0 * q * (1.0 - p)),
        BoundKind::Rts => q - (2.0 * q * p - p * p).sqrt(),
    })
}

//! Side-by-side evaluation of every bound kind over (p, K) grids.
//!
//! A cell holds all six bound values at one grid point together with the
//! tightest closed-form kind. The numeric inversion is always at least as
//! tight as every relaxation, so `tightest` ranges over the relaxations
//! only; that is what makes the map informative.

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::kl::{kl_inverse, relaxed_bound, BoundKind, DEFAULT_INVERSION_TOL};

/// Default grid over empirical risk, log spaced.
pub const DEFAULT_P_RANGE: (f64, f64) = (1e-3, 0.99);
/// Default grid over the complexity term, log spaced.
pub const DEFAULT_K_RANGE: (f64, f64) = (1e-4, 2.0);
/// Default number of points per grid axis.
pub const DEFAULT_GRID_POINTS: usize = 60;

/// Values above this count as vacuous. The numeric inversion never reaches
/// 1 exactly, so it gets a hair of slack below 1 to flag a saturated cap.
const VACUOUS_EDGE: f64 = 1.0 - 1e-9;

/// Bound values keyed by [`BoundKind`], stored in the order of
/// [`BoundKind::ALL`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundValues([f64; 6]);

impl BoundValues {
    fn index(kind: BoundKind) -> usize {
        match kind {
            BoundKind::Pinsker => 0,
            BoundKind::Pbq => 1,
            BoundKind::Ts => 2,
            BoundKind::Trp => 3,
            BoundKind::Rts => 4,
            BoundKind::MaurerInverse => 5,
        }
    }

    pub fn get(&self, kind: BoundKind) -> f64 {
        self.0[Self::index(kind)]
    }

    pub fn iter(&self) -> impl Iterator<Item = (BoundKind, f64)> + '_ {
        BoundKind::ALL.iter().map(|&k| (k, self.get(k)))
    }
}

/// One grid point: raw (unclamped) bound values and the tightest
/// relaxation, ties broken by the fixed order of [`BoundKind::RELAXATIONS`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtlasCell {
    pub p: f64,
    pub k: f64,
    pub values: BoundValues,
    pub tightest: BoundKind,
}

/// Evaluates all six kinds at one point. Requires `p` in `(0, 1)` and
/// `k > 0`.
pub fn compare_bounds(p: f64, k: f64) -> Result<AtlasCell> {
    if !p.is_finite() || p <= 0.0 || p >= 1.0 {
        return Err(Error::invalid(format!("p = {p} is outside (0, 1)")));
    }
    if !k.is_finite() || k <= 0.0 {
        return Err(Error::invalid(format!("complexity term k = {k} is not positive")));
    }
    let mut raw = [0.0; 6];
    for kind in BoundKind::RELAXATIONS {
        raw[BoundValues::index(kind)] = relaxed_bound(kind, p, k)?;
    }
    raw[BoundValues::index(BoundKind::MaurerInverse)] =
        kl_inverse(p, k, DEFAULT_INVERSION_TOL)?;
    let values = BoundValues(raw);

    let mut tightest = BoundKind::RELAXATIONS[0];
    for kind in &BoundKind::RELAXATIONS[1..] {
        if values.get(*kind) < values.get(tightest) {
            tightest = *kind;
        }
    }
    debug_assert!(
        values.get(BoundKind::MaurerInverse) <= values.get(tightest) + 1e-9,
        "numeric inversion must not exceed any relaxation"
    );
    Ok(AtlasCell {
        p,
        k,
        values,
        tightest,
    })
}

/// Evaluates [`compare_bounds`] over the cartesian product of the grids,
/// row-major with `p` as the outer axis.
pub fn tightest_map(p_grid: &[f64], k_grid: &[f64]) -> Result<Vec<AtlasCell>> {
    let mut cells = Vec::with_capacity(p_grid.len() * k_grid.len());
    for &p in p_grid {
        for &k in k_grid {
            cells.push(compare_bounds(p, k)?);
        }
    }
    Ok(cells)
}

/// One point of a fixed-`p` curve: values clamped to `[0, 1]` for display
/// plus a per-kind vacuous flag (raw value at or above 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub k: f64,
    pub clamped: BoundValues,
    pub vacuous: [bool; 6],
}

/// Sweeps the complexity term at a fixed empirical risk.
pub fn emit_curves(p: f64, k_grid: &[f64]) -> Result<Vec<CurvePoint>> {
    let mut points = Vec::with_capacity(k_grid.len());
    for &k in k_grid {
        let cell = compare_bounds(p, k)?;
        let mut clamped = [0.0; 6];
        let mut vacuous = [false; 6];
        for (i, (_, v)) in cell.values.iter().enumerate() {
            clamped[i] = v.min(1.0);
            vacuous[i] = v >= VACUOUS_EDGE;
        }
        points.push(CurvePoint {
            k,
            clamped: BoundValues(clamped),
            vacuous,
        });
    }
    Ok(points)
}

/// `count` points spaced uniformly in log scale over `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Result<Vec<f64>> {
    if !(lo.is_finite() && hi.is_finite()) || lo <= 0.0 || hi <= lo {
        return Err(Error::invalid(format!(
            "log grid needs 0 < lo < hi, got [{lo}, {hi}]"
        )));
    }
    if count < 2 {
        return Err(Error::invalid(format!("log grid needs at least 2 points, got {count}")));
    }
    let (llo, lhi) = (lo.ln(), hi.ln());
    let step = (lhi - llo) / (count - 1) as f64;
    Ok((0..count)
        .map(|i| {
            if i == count - 1 {
                hi
            } else {
                (llo + step * i as f64).exp()
            }
        })
        .collect())
}

pub fn default_p_grid() -> Vec<f64> {
    log_grid(DEFAULT_P_RANGE.0, DEFAULT_P_RANGE.1, DEFAULT_GRID_POINTS)
        .expect("default grid parameters are valid")
}

pub fn default_k_grid() -> Vec<f64> {
    log_grid(DEFAULT_K_RANGE.0, DEFAULT_K_RANGE.1, DEFAULT_GRID_POINTS)
        .expect("default grid parameters are valid")
}

/// Fixed-width float formatting used by every CSV emitter: 17 significant
/// digits, enough to reproduce the f64 bit pattern. Negative zero is
/// folded into plain zero so equal values always print identically.
pub(crate) fn fmt_f64(x: f64) -> String {
    let x = if x == 0.0 { 0.0 } else { x };
    format!("{x:.16e}")
}

/// Writes cells as CSV with header
/// `p,K,pinsker,pbq,ts,trp,rts,maurer,tightest`.
pub fn write_atlas_csv<W: Write>(cells: &[AtlasCell], out: &mut W) -> io::Result<()> {
    writeln!(out, "p,K,pinsker,pbq,ts,trp,rts,maurer,tightest")?;
    for cell in cells {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            fmt_f64(cell.p),
            fmt_f64(cell.k),
            fmt_f64(cell.values.get(BoundKind::Pinsker)),
            fmt_f64(cell.values.get(BoundKind::Pbq)),
            fmt_f64(cell.values.get(BoundKind::Ts)),
            fmt_f64(cell.values.get(BoundKind::Trp)),
            fmt_f64(cell.values.get(BoundKind::Rts)),
            fmt_f64(cell.values.get(BoundKind::MaurerInverse)),
            cell.tightest.name(),
        )?;
    }
    Ok(())
}

/// Writes curve points as CSV with clamped values and per-kind vacuous
/// flags.
pub fn write_curves_csv<W: Write>(p: f64, points: &[CurvePoint], out: &mut W) -> io::Result<()> {
    writeln!(
        out,
        "p,K,pinsker,pbq,ts,trp,rts,maurer,\
         pinsker_vacuous,pbq_vacuous,ts_vacuous,trp_vacuous,rts_vacuous,maurer_vacuous"
    )?;
    for pt in points {
        let flags: Vec<&str> = pt
            .vacuous
            .iter()
            .map(|&v| if v { "true" } else { "false" })
            .collect();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            fmt_f64(p),
            fmt_f64(pt.k),
            fmt_f64(pt.clamped.get(BoundKind::Pinsker)),
            fmt_f64(pt.clamped.get(BoundKind::Pbq)),
            fmt_f64(pt.clamped.get(BoundKind::Ts)),
            fmt_f64(pt.clamped.get(BoundKind::Trp)),
            fmt_f64(pt.clamped.get(BoundKind::Rts)),
            fmt_f64(pt.clamped.get(BoundKind::MaurerInverse)),
            flags.join(","),
        )?;
    }
    Ok(())
}

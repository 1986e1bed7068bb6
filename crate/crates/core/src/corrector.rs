//! Closed-loop correction of the solid-phase concentrations from measured voltage.
//!
//! When the modeled voltage drifts from the measurement by more than a
//! threshold, the measured voltage is converted back to an open-circuit
//! voltage, a pair of boundary stoichiometry shifts that reproduces it under
//! lithium conservation is solved for, and the shift is fed in through a
//! first-order lag.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ocp::OcpCurve;
use crate::output::VoltageBreakdown;
use crate::params::{CellParameters, Side};
use crate::reaction::{bv_overpotential, ElectrodeReaction};
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectorConfig {
    pub enabled: bool,
    /// voltage error that activates a correction, V
    pub threshold: f64,
    /// lag time constants of the applied shift, s
    pub tau_neg: f64,
    pub tau_pos: f64,
    /// search bracket for the positive stoichiometry shift
    pub max_shift: f64,
    /// clip to the bracket edge instead of skipping when the root lies outside it
    pub saturate: bool,
    /// replace the modeled temperature by the measured one when available
    pub override_temperature: bool,
}

impl Default for CorrectorConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            threshold: 0.02,
            tau_neg: 10.0,
            tau_pos: 10.0,
            max_shift: 0.2,
            saturate: true,
            override_temperature: true,
        }
    }
}

impl CorrectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.tau_neg > 0.0 && self.tau_pos > 0.0 && self.max_shift > 0.0) {
            return Err(Error::Config(format!(
                "corrector threshold {} and time constants {}, {} must be positive",
                self.threshold, self.tau_neg, self.tau_pos
            )));
        }
        Ok(())
    }
}

/// Film plus kinetic overpotential difference between the two collector-side boundaries.
pub fn boundary_overpotential<S: Scalar>(
    p: &CellParameters<S>,
    rn: &ElectrodeReaction<S>,
    rp: &ElectrodeReaction<S>,
    t: S,
) -> S {
    let f = p.constants.faraday;
    let (jp, jn) = (rp.jn[3], rn.jn[0]);
    f * p.transport.film_resistance_pos * jp - f * p.transport.film_resistance_neg * jn
        + bv_overpotential(jp, rp.i0[3], t, p)
        - bv_overpotential(jn, rn.i0[0], t, p)
}

/// Open-circuit voltage implied by a measured terminal voltage.
pub fn back_out_ocv<S: Scalar>(
    p: &CellParameters<S>,
    v_measured: S,
    breakdown: &VoltageBreakdown<S>,
    rn: &ElectrodeReaction<S>,
    rp: &ElectrodeReaction<S>,
    t: S,
) -> S {
    v_measured - breakdown.electrolyte_drop() + breakdown.contact - boundary_overpotential(p, rn, rp, t)
}

/// Stoichiometry shifts of one correction event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correction<S> {
    pub dy_pos: S,
    pub dy_neg: S,
    /// the root lay outside the bracket and the shift was clipped
    pub saturated: bool,
}

/// `dy_neg = -ratio * dy_pos` keeps the solid lithium inventory fixed.
pub fn capacity_ratio<S: Scalar>(p: &CellParameters<S>) -> S {
    p.solid_capacity(Side::Pos) / p.solid_capacity(Side::Neg)
}

/// Solves `U+(y+ + dy+) - U-(y- - ratio dy+) = ocv` for `dy+` by bisection.
pub fn solve_correction<S: Scalar>(
    p: &CellParameters<S>,
    ocv: S,
    y_neg: S,
    y_pos: S,
    neg: &OcpCurve<S>,
    pos: &OcpCurve<S>,
    cfg: &CorrectorConfig,
) -> Result<Correction<S>> {
    let rho = capacity_ratio(p);
    let g = |d: S| pos.eval(y_pos + d).0 - neg.eval(y_neg - rho * d).0 - ocv;
    let edge = lit::<S>(1e-6);
    let one = S::one();
    let m = lit::<S>(cfg.max_shift);
    // Keep both shifted stoichiometries inside (0, 1).
    let lo = (-m).max(edge - y_pos).max((y_neg - one + edge) / rho);
    let hi = m.min(one - edge - y_pos).min((y_neg - edge) / rho);
    if !(lo < hi) {
        return Err(Error::CorrectionOutOfRange);
    }
    let (glo, ghi) = (g(lo), g(hi));
    // g decreases in dy+: both OCP terms push the same way.
    if glo < S::zero() || ghi > S::zero() {
        if !cfg.saturate {
            return Err(Error::CorrectionOutOfRange);
        }
        let d = if glo < S::zero() { lo } else { hi };
        return Ok(Correction { dy_pos: d, dy_neg: -rho * d, saturated: true });
    }
    let (mut a, mut b) = (lo, hi);
    let tol = lit::<S>(1e-10).max(lit::<S>(16.0) * S::epsilon() * ocv.abs());
    let mut d = (a + b) / lit(2.0);
    for _ in 0..200 {
        d = (a + b) / lit(2.0);
        let gd = g(d);
        if gd.abs() < tol || b - a < S::epsilon() {
            break;
        }
        if gd > S::zero() {
            a = d;
        } else {
            b = d;
        }
    }
    Ok(Correction { dy_pos: d, dy_neg: -rho * d, saturated: false })
}

/// First-order lag of the applied concentration shift.
pub fn step_shift<S: Scalar>(dcs: S, target: S, tau: S, dt: S) -> S {
    let e = (-dt / tau).exp();
    dcs * e + target * (S::one() - e)
}

/// Shift the lag still delivers after `dcs` if no further correction arrives:
/// `dcs (e + e^2 + ...)` with `e = exp(-h / tau)` for sub-steps of length `h`.
pub fn shift_tail<S: Scalar>(dcs: S, tau: S, h: S) -> S {
    let e = (-h / tau).exp();
    dcs * e / (S::one() - e)
}

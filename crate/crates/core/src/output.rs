//! Terminal voltage assembly and the lumped thermal model.
//!
//! `V = Phi_se(L+) - Phi_se(0-) + sum(dPhi_e) - Rc I`, where each domain's
//! solution-phase drop splits into a concentration-polarization term and an
//! ohmic term.

use crate::electrolyte::ElectrolyteProfile;
use crate::params::{electrolyte_conductivity, CellParameters, Side};
use crate::reaction::{bv_overpotential, ElectrodeReaction};
use crate::scalar::{lit, quad4, Scalar};

/// Domain index into the per-domain arrays of [`VoltageBreakdown`].
pub const NEG: usize = 0;
pub const SEP: usize = 1;
pub const POS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoltageBreakdown<S> {
    pub phi_se_pos: S,
    pub phi_se_neg: S,
    /// concentration polarization per domain (neg, sep, pos), V
    pub polarization: [S; 3],
    /// solution-phase ohmic drop per domain, V
    pub ohmic: [S; 3],
    /// `Rc I`, V
    pub contact: S,
    pub v: S,
}

impl<S: Scalar> VoltageBreakdown<S> {
    /// Total solution-phase potential difference across the cell.
    pub fn electrolyte_drop(&self) -> S {
        self.polarization.iter().copied().sum::<S>() + self.ohmic.iter().copied().sum::<S>()
    }

    /// `V` recomputed from the parts.
    pub fn reassemble(&self) -> S {
        self.phi_se_pos - self.phi_se_neg + self.electrolyte_drop() - self.contact
    }
}

/// Solid-minus-solution potential at an electrode boundary, exact Butler-Volmer inverse.
pub fn phi_se_boundary<S: Scalar>(p: &CellParameters<S>, jn: S, i0: S, u: S, rf: S, t: S) -> S {
    u + p.constants.faraday * rf * jn + bv_overpotential(jn, i0, t, p)
}

/// Concentration polarization `-kd_ratio ln(ce_right / ce_left)`.
pub fn polarization_drop<S: Scalar>(kd_ratio_mean: S, ce_left: S, ce_right: S) -> S {
    -kd_ratio_mean * (ce_right / ce_left).ln()
}

/// Ohmic drop over an electrode from the integrated cumulative flux.
pub fn electrode_ohmic_drop<S: Scalar>(p: &CellParameters<S>, r: &ElectrodeReaction<S>) -> S {
    let e = p.electrode(r.side);
    let g = e.specific_area * p.constants.faraday / r.kappa_mean * r.integral_j();
    match r.side {
        Side::Neg => -g,
        Side::Pos => g,
    }
}

/// Ohmic drop across the separator.
pub fn separator_ohmic_drop<S: Scalar>(current: S, l_sep: S, kappa_eff: S, a_sep: S) -> S {
    -l_sep * current / (kappa_eff * a_sep)
}

/// Assembles the terminal voltage from both electrode solutions and the electrolyte profile.
pub fn terminal_voltage<S: Scalar>(
    p: &CellParameters<S>,
    rn: &ElectrodeReaction<S>,
    rp: &ElectrodeReaction<S>,
    prof: &ElectrolyteProfile<S>,
    t: S,
    current: S,
) -> VoltageBreakdown<S> {
    let tr = &p.transport;
    let phi_se_neg = phi_se_boundary(p, rn.jn[0], rn.i0[0], rn.ocp[0], tr.film_resistance_neg, t);
    let phi_se_pos = phi_se_boundary(p, rp.jn[3], rp.i0[3], rp.ocp[3], tr.film_resistance_pos, t);

    let (ce_a, ce_b) = prof.ce_interfaces();
    let sep_ce = (ce_a + ce_b) / lit(2.0);
    let kappa_sep = p.bruggeman(electrolyte_conductivity(sep_ce, t), p.material.eps_e_sep);
    let kd_sep = (p.kappa_d_ratio(ce_a, t) + p.kappa_d_ratio(ce_b, t)) / lit(2.0);

    let polarization = [
        polarization_drop(rn.kd_ratio_mean, prof.ce_neg(S::zero()), ce_a),
        polarization_drop(kd_sep, ce_a, ce_b),
        polarization_drop(rp.kd_ratio_mean, ce_b, prof.ce_pos(prof.l_pos)),
    ];
    let ohmic = [
        electrode_ohmic_drop(p, rn),
        separator_ohmic_drop(current, p.geometry.thickness_sep, kappa_sep, p.geometry.area_sep),
        electrode_ohmic_drop(p, rp),
    ];
    let mut b = VoltageBreakdown {
        phi_se_pos,
        phi_se_neg,
        polarization,
        ohmic,
        contact: tr.contact_resistance * current,
        v: S::zero(),
    };
    b.v = b.reassemble();
    b
}

/// Reaction heat rate `-F sum A int as jn U dx - I V`, W.
pub fn heat_rate<S: Scalar>(
    p: &CellParameters<S>,
    rn: &ElectrodeReaction<S>,
    rp: &ElectrodeReaction<S>,
    current: S,
    v: S,
) -> S {
    let mut s = S::zero();
    for r in [rn, rp] {
        let e = p.electrode(r.side);
        let prod: [S; 4] = std::array::from_fn(|i| r.jn[i] * r.ocp[i]);
        s += e.area * e.specific_area * e.thickness * quad4(&prod);
    }
    -p.constants.faraday * s - current * v
}

/// Steady temperature for a constant heat rate, K.
pub fn thermal_gain<S: Scalar>(p: &CellParameters<S>, qh: S, t_amb: S) -> S {
    qh / (p.thermal.heat_transfer * p.geometry.area_surface) + t_amb
}

/// Exponential update of the lumped temperature.
pub fn step_temperature<S: Scalar>(p: &CellParameters<S>, t: S, qh: S, t_amb: S, dt: S) -> S {
    let e = (-dt / p.thermal_time_constant()).exp();
    t * e + thermal_gain(p, qh, t_amb) * (S::one() - e)
}

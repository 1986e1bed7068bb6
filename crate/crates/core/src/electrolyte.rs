//! Solution-phase lithium transport.
//!
//! Concentration is parabolic in each electrode (`ae x^2 + be` in the negative,
//! `ae (x - L)^2 + be` in the positive, vertex at the collector) and linear in
//! the separator. The four electrode coefficients follow from the interface
//! matrix; the electrode inventories `Qe` evolve as two coupled first-order
//! processes.
//!
//! The flux-balance row carries the cross-sectional areas and the separator
//! uses a single effective diffusivity, so the molar flow is continuous at
//! both interfaces and `Qe- + Qe+` is conserved exactly.

use crate::error::{Error, Result};
use crate::params::{CellParameters, Side};
use crate::scalar::{lit, to_f64, Scalar};

/// Total solution-phase lithium in each electrode, mol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElectrolyteState<S> {
    pub qe_neg: S,
    pub qe_pos: S,
}

impl<S: Scalar> ElectrolyteState<S> {
    pub fn initial(p: &CellParameters<S>) -> Self {
        Self {
            qe_neg: p.qe_initial(Side::Neg),
            qe_pos: p.qe_initial(Side::Pos),
        }
    }

    pub fn total(&self) -> S {
        self.qe_neg + self.qe_pos
    }
}

/// Effective diffusivities at the interface points, m^2/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterfaceDiffusivities<S> {
    /// negative electrode side of the negative/separator interface
    pub neg: S,
    /// separator side of the negative/separator interface
    pub sep_left: S,
    /// separator side of the separator/positive interface
    pub sep_right: S,
    /// positive electrode side of the separator/positive interface
    pub pos: S,
}

/// Interface matrix and its inverse.
#[derive(Debug, Clone, Copy)]
pub struct InterfaceMatrix<S> {
    pub m: [[S; 4]; 4],
    pub inv: [[S; 4]; 4],
    /// 1-norm condition number of the column- and row-equilibrated matrix
    pub cond: S,
    de: InterfaceDiffusivities<S>,
}

/// Parabola and separator-line coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElectrolyteProfile<S> {
    pub ae_neg: S,
    pub be_neg: S,
    pub ae_pos: S,
    pub be_pos: S,
    /// slope of the separator line in local coordinates `[0, Lsep]`
    pub ae_sep: S,
    pub be_sep: S,
    pub l_neg: S,
    pub l_sep: S,
    pub l_pos: S,
}

/// First-order normal form `tau dQ/dt = -Q + K` for both electrodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QeDynamics<S> {
    pub tau_neg: S,
    pub tau_pos: S,
    pub k_neg: S,
    pub k_pos: S,
}

const COND_LIMIT: f64 = 1e12;

fn invert4<S: Scalar>(a: [[S; 4]; 4]) -> Option<[[S; 4]; 4]> {
    let mut m = a;
    let mut inv = [[S::zero(); 4]; 4];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = S::one();
    }
    for col in 0..4 {
        let piv = (col..4).max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())?;
        if m[piv][col] == S::zero() {
            return None;
        }
        m.swap(col, piv);
        inv.swap(col, piv);
        let d = m[col][col];
        for k in 0..4 {
            m[col][k] /= d;
            inv[col][k] /= d;
        }
        for r in 0..4 {
            if r != col {
                let f = m[r][col];
                if f != S::zero() {
                    for k in 0..4 {
                        m[r][k] = m[r][k] - f * m[col][k];
                        inv[r][k] = inv[r][k] - f * inv[col][k];
                    }
                }
            }
        }
    }
    Some(inv)
}

fn norm1<S: Scalar>(a: &[[S; 4]; 4]) -> S {
    (0..4)
        .map(|c| (0..4).map(|r| a[r][c].abs()).fold(S::zero(), |x, y| x + y))
        .fold(S::zero(), S::max)
}

/// Builds the 4x4 matrix acting on `[ae-, be-, ae+, be+]`.
///
/// Rows: molar-flow balance, concentration continuity, and the two inventory
/// identities `L^3/3 ae + L be = Qe / (A eps_e)`.
pub fn assemble_interface_matrix<S: Scalar>(
    p: &CellParameters<S>,
    de: InterfaceDiffusivities<S>,
) -> Result<InterfaceMatrix<S>> {
    for v in [de.neg, de.sep_left, de.sep_right, de.pos] {
        if !(v > S::zero()) || !v.is_finite() {
            return Err(Error::DegenerateParameter(format!("interface diffusivity {v}")));
        }
    }
    let g = &p.geometry;
    let (ln, ls, lp) = (g.thickness_neg, g.thickness_sep, g.thickness_pos);
    let rn = g.area_neg * de.neg / (g.area_sep * de.sep_left);
    let rp = g.area_pos * de.pos / (g.area_sep * de.sep_right);
    let three = lit::<S>(3.0);
    let z = S::zero();
    let one = S::one();
    let m = [
        [rn * ln, z, rp * lp, z],
        [ln * (ln + rn * ls), one, -lp * (lp + rp * ls), -one],
        [ln * ln * ln / three, ln, z, z],
        [z, z, lp * lp * lp / three, lp],
    ];
    // Equilibrate: unknowns become ae L^2 and be, then every row to unit max.
    let dc = [one / (ln * ln), one, one / (lp * lp), one];
    let mut scaled = m;
    let mut dr = [one; 4];
    for r in 0..4 {
        for c in 0..4 {
            scaled[r][c] = m[r][c] * dc[c];
        }
        let mx = scaled[r].iter().fold(z, |a, v| a.max(v.abs()));
        dr[r] = one / mx;
        for c in 0..4 {
            scaled[r][c] *= dr[r];
        }
    }
    let sinv = invert4(scaled).ok_or(Error::SingularGeometry { cond: f64::INFINITY })?;
    let cond = norm1(&scaled) * norm1(&sinv);
    if !(cond < lit(COND_LIMIT)) {
        return Err(Error::SingularGeometry { cond: to_f64(cond) });
    }
    let mut inv = [[z; 4]; 4];
    for r in 0..4 {
        for c in 0..4 {
            inv[r][c] = dc[r] * sinv[r][c] * dr[c];
        }
    }
    Ok(InterfaceMatrix { m, inv, cond, de })
}

impl<S: Scalar> InterfaceMatrix<S> {
    /// Solves for the profile at the given inventories.
    pub fn solve_profile(&self, p: &CellParameters<S>, st: &ElectrolyteState<S>) -> ElectrolyteProfile<S> {
        let g = &p.geometry;
        let m = &p.material;
        let rhs = [
            S::zero(),
            S::zero(),
            st.qe_neg / (g.area_neg * m.eps_e_neg),
            st.qe_pos / (g.area_pos * m.eps_e_pos),
        ];
        let mut x = [S::zero(); 4];
        for (r, xr) in x.iter_mut().enumerate() {
            *xr = self.inv[r][2] * rhs[2] + self.inv[r][3] * rhs[3];
            let _ = rhs[0] + rhs[1];
        }
        let (ae_neg, be_neg, ae_pos, be_pos) = (x[0], x[1], x[2], x[3]);
        let ln = g.thickness_neg;
        let rn = g.area_neg * self.de.neg / (g.area_sep * self.de.sep_left);
        ElectrolyteProfile {
            ae_neg,
            be_neg,
            ae_pos,
            be_pos,
            ae_sep: lit::<S>(2.0) * rn * ae_neg * ln,
            be_sep: ae_neg * ln * ln + be_neg,
            l_neg: ln,
            l_sep: g.thickness_sep,
            l_pos: g.thickness_pos,
        }
    }

    /// Relative residual of the molar-flow balance row at a profile.
    pub fn flux_residual(&self, prof: &ElectrolyteProfile<S>) -> S {
        let a = self.m[0][0] * prof.ae_neg;
        let b = self.m[0][2] * prof.ae_pos;
        let scale = a.abs().max(b.abs()).max(S::min_positive_value());
        (a + b).abs() / scale
    }

    /// Normal-form coefficients of the inventory dynamics at current `I`
    /// (positive = discharge) and effective diffusivities `De-` at `L-`, `De+` at `0+`.
    pub fn qe_dynamics(&self, p: &CellParameters<S>, current: S) -> Result<QeDynamics<S>> {
        let g = &p.geometry;
        let m = &p.material;
        let an = g.area_neg * m.eps_e_neg;
        let ap = g.area_pos * m.eps_e_pos;
        let q0 = p.qe_total();
        let two = lit::<S>(2.0);
        let src = (S::one() - p.transport.transference) * current / p.constants.faraday;
        let gn = two * g.area_neg * g.thickness_neg * self.de.neg;
        let gp = two * g.area_pos * g.thickness_pos * self.de.pos;
        let li = &self.inv;
        let cn = gn * (li[0][2] / an - li[0][3] / ap);
        let cp = gp * (li[2][3] / ap - li[2][2] / an);
        if !(cn < S::zero()) || !(cp < S::zero()) {
            return Err(Error::ModelDegeneracy(format!(
                "non-positive electrolyte time constant (rates {cn}, {cp})"
            )));
        }
        let tau_neg = -cn.recip();
        let tau_pos = -cp.recip();
        Ok(QeDynamics {
            tau_neg,
            tau_pos,
            k_neg: tau_neg * (gn * li[0][3] * q0 / ap + src),
            k_pos: tau_pos * (gp * li[2][2] * q0 / an - src),
        })
    }
}

/// Zero-order-hold exponential update of both inventories.
pub fn step_qe<S: Scalar>(st: &ElectrolyteState<S>, dynamics: &QeDynamics<S>, dt: S) -> ElectrolyteState<S> {
    let en = (-dt / dynamics.tau_neg).exp();
    let ep = (-dt / dynamics.tau_pos).exp();
    ElectrolyteState {
        qe_neg: st.qe_neg * en + dynamics.k_neg * (S::one() - en),
        qe_pos: st.qe_pos * ep + dynamics.k_pos * (S::one() - ep),
    }
}

impl<S: Scalar> ElectrolyteProfile<S> {
    /// Concentration in the negative electrode, local `x` from the collector.
    pub fn ce_neg(&self, x: S) -> S {
        self.ae_neg * x * x + self.be_neg
    }

    /// Concentration in the separator, local `x` from the negative interface.
    pub fn ce_sep(&self, x: S) -> S {
        self.ae_sep * x + self.be_sep
    }

    /// Concentration in the positive electrode, local `x` from the separator.
    pub fn ce_pos(&self, x: S) -> S {
        let d = x - self.l_pos;
        self.ae_pos * d * d + self.be_pos
    }

    pub fn ce(&self, side: Side, x: S) -> S {
        match side {
            Side::Neg => self.ce_neg(x),
            Side::Pos => self.ce_pos(x),
        }
    }

    /// Concentration at the four collocation points of an electrode.
    pub fn ce_points(&self, side: Side) -> [S; 4] {
        let l = match side {
            Side::Neg => self.l_neg,
            Side::Pos => self.l_pos,
        };
        let mut out = [S::zero(); 4];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.ce(side, l * lit::<S>(i as f64) / lit(3.0));
        }
        out
    }

    /// Concentrations at the two separator interfaces.
    pub fn ce_interfaces(&self) -> (S, S) {
        (self.ce_neg(self.l_neg), self.ce_pos(S::zero()))
    }

    /// Inventory recovered by integrating the profile over an electrode, per `A eps_e`.
    pub fn integral(&self, side: Side) -> S {
        let three = lit::<S>(3.0);
        match side {
            Side::Neg => self.ae_neg * self.l_neg.powi(3) / three + self.be_neg * self.l_neg,
            Side::Pos => self.ae_pos * self.l_pos.powi(3) / three + self.be_pos * self.l_pos,
        }
    }

    /// Smallest concentration over all domains (extremes sit at domain ends).
    pub fn min_ce(&self) -> (S, &'static str) {
        let cands = [
            (self.ce_neg(S::zero()), "negative collector"),
            (self.ce_neg(self.l_neg), "negative/separator interface"),
            (self.ce_pos(S::zero()), "separator/positive interface"),
            (self.ce_pos(self.l_pos), "positive collector"),
        ];
        cands
            .into_iter()
            .fold((S::infinity(), ""), |a, b| if b.0 < a.0 { b } else { a })
    }

    /// Fails when the parabolic ansatz produced a non-positive concentration.
    pub fn validate(&self) -> Result<()> {
        let (c, at) = self.min_ce();
        if !(c > S::zero()) {
            return Err(Error::ProfileValidity { ce: to_f64(c), location: at });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::electrolyte_diffusivity;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn ncm() -> CellParameters<f64> {
        CellParameters::preset("ncm523").unwrap()
    }

    fn uniform_de(p: &CellParameters<f64>) -> InterfaceDiffusivities<f64> {
        let de = electrolyte_diffusivity(1200.0, 298.0).unwrap();
        InterfaceDiffusivities {
            neg: p.bruggeman(de, p.material.eps_e_neg),
            sep_left: p.bruggeman(de, p.material.eps_e_sep),
            sep_right: p.bruggeman(de, p.material.eps_e_sep),
            pos: p.bruggeman(de, p.material.eps_e_pos),
        }
    }

    #[test]
    fn uniform_state_is_a_fixed_point() {
        let p = ncm();
        let lm = assemble_interface_matrix(&p, uniform_de(&p)).unwrap();
        let st = ElectrolyteState::initial(&p);
        let prof = lm.solve_profile(&p, &st);
        assert!(prof.ae_neg.abs() < 1e-3 && prof.ae_pos.abs() < 1e-3);
        assert_relative_eq!(prof.be_neg, 1200.0, max_relative = 1e-12);
        assert_relative_eq!(prof.be_pos, 1200.0, max_relative = 1e-12);
        assert_relative_eq!(prof.be_sep, 1200.0, max_relative = 1e-12);
        let dyn0 = lm.qe_dynamics(&p, 0.0).unwrap();
        let next = step_qe(&st, &dyn0, 1.0);
        assert_relative_eq!(next.qe_neg, st.qe_neg, max_relative = 1e-12);
        assert_relative_eq!(next.qe_pos, st.qe_pos, max_relative = 1e-12);
    }

    #[test]
    fn inventory_rows_match_matrix() {
        let p = ncm();
        let lm = assemble_interface_matrix(&p, uniform_de(&p)).unwrap();
        let st = ElectrolyteState { qe_neg: 3.2e-3, qe_pos: p.qe_total() - 3.2e-3 };
        let prof = lm.solve_profile(&p, &st);
        let ln = p.geometry.thickness_neg;
        let row3 = ln.powi(3) / 3.0 * prof.ae_neg + ln * prof.be_neg;
        assert_relative_eq!(row3, st.qe_neg / (p.geometry.area_neg * p.material.eps_e_neg), max_relative = 1e-10);
        assert_relative_eq!(
            prof.integral(Side::Pos) * p.geometry.area_pos * p.material.eps_e_pos,
            st.qe_pos,
            max_relative = 1e-10
        );
        assert!(lm.flux_residual(&prof) < 1e-9);
        // Concentration continuity at both interfaces.
        let (l, r) = prof.ce_interfaces();
        assert_relative_eq!(prof.ce_sep(0.0), l, max_relative = 1e-12);
        assert_relative_eq!(prof.ce_sep(p.geometry.thickness_sep), r, max_relative = 1e-10);
        // Excess in the negative electrode bends its profile up toward the collector.
        assert!(prof.ce_neg(0.0) > prof.ce_neg(ln));
    }

    #[test]
    fn symmetric_cell_splits_flux_evenly() {
        let mut p = ncm();
        p.geometry.thickness_pos = p.geometry.thickness_neg;
        p.geometry.area_pos = p.geometry.area_neg;
        p.geometry.area_sep = p.geometry.area_neg;
        p.material.eps_e_pos = p.material.eps_e_neg;
        let mut de = uniform_de(&p);
        de.pos = de.neg;
        let lm = assemble_interface_matrix(&p, de).unwrap();
        let q = p.qe_total() / 2.0;
        let prof = lm.solve_profile(&p, &ElectrolyteState { qe_neg: q * 1.01, qe_pos: q * 0.99 });
        assert_relative_eq!(prof.ae_neg, -prof.ae_pos, max_relative = 1e-9);
    }

    #[test]
    fn initial_inventory_value() {
        let p = ncm();
        let st = ElectrolyteState::initial(&p);
        assert_relative_eq!(st.qe_neg, 3.049e-3, max_relative = 1e-3);
    }

    #[test]
    fn rejects_bad_diffusivity() {
        let p = ncm();
        let mut de = uniform_de(&p);
        de.sep_left = 0.0;
        assert!(assemble_interface_matrix(&p, de).is_err());
    }

    #[test]
    fn discharge_drives_negative_side_up() {
        let p = ncm();
        let lm = assemble_interface_matrix(&p, uniform_de(&p)).unwrap();
        let mut st = ElectrolyteState::initial(&p);
        for _ in 0..100 {
            let d = lm.qe_dynamics(&p, 1.7).unwrap();
            st = step_qe(&st, &d, 1.0);
        }
        let prof = lm.solve_profile(&p, &st);
        assert!(prof.ce_neg(0.0) > 1200.0 && prof.ce_pos(p.geometry.thickness_pos) < 1200.0);
        assert!(st.qe_neg > p.qe_initial(Side::Neg));
    }

    #[test]
    fn response_is_monotone_toward_gain() {
        let p = ncm();
        let lm = assemble_interface_matrix(&p, uniform_de(&p)).unwrap();
        let d = lm.qe_dynamics(&p, 3.4).unwrap();
        assert_relative_eq!(d.tau_neg, d.tau_pos, max_relative = 1e-9);
        let mut st = ElectrolyteState::initial(&p);
        let mut gap = (d.k_neg - st.qe_neg).abs();
        for _ in 0..50 {
            st = step_qe(&st, &d, 2.0);
            let g = (d.k_neg - st.qe_neg).abs();
            assert!(g < gap);
            gap = g;
        }
        // Two half steps equal one full step with frozen coefficients.
        let s0 = ElectrolyteState::initial(&p);
        let a = step_qe(&step_qe(&s0, &d, 0.5), &d, 0.5);
        let b = step_qe(&s0, &d, 1.0);
        assert_relative_eq!(a.qe_neg, b.qe_neg, max_relative = 1e-12);
        assert_relative_eq!(a.qe_pos, b.qe_pos, max_relative = 1e-12);
    }

    proptest! {
        #[test]
        fn random_currents_conserve_inventory(currents in proptest::collection::vec(-6.0f64..6.0, 1000)) {
            let p = ncm();
            let mut st = ElectrolyteState::initial(&p);
            let q0 = p.qe_total();
            for i in currents {
                let prof_de = uniform_de(&p);
                let lm = assemble_interface_matrix(&p, prof_de).unwrap();
                let d = lm.qe_dynamics(&p, i).unwrap();
                st = step_qe(&st, &d, 1.0);
            }
            prop_assert!(((st.total() - q0) / q0).abs() < 1e-12);
        }
    }
}

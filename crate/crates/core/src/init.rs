//! Stoichiometry windows, the SOC-OCV curve and initial states.

use crate::electrolyte::ElectrolyteState;
use crate::error::{Error, Result};
use crate::ocp::OcpCurve;
use crate::params::{CellParameters, Side};
use crate::scalar::{lit, to_f64, Scalar};
use crate::solid::SolidState;
use crate::stepper::CellState;

/// Operating stoichiometry ranges of both electrodes.
///
/// At SOC 1 the negative electrode sits at `y1_neg` and the positive at `y0_pos`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StoichiometryWindow<S> {
    pub y0_neg: S,
    pub y1_neg: S,
    pub y0_pos: S,
    pub y1_pos: S,
    pub qc_mah: S,
    pub v_min: S,
    pub v_max: S,
}

/// Stoichiometry span an electrode must cover to deliver `qc_mah`.
pub fn window_width<S: Scalar>(p: &CellParameters<S>, side: Side, qc_mah: S) -> S {
    lit::<S>(3.6) * qc_mah / (p.constants.faraday * p.solid_capacity(side))
}

/// Solves the four window equations: two voltage end points and two capacity spans.
pub fn solve_window<S: Scalar>(
    p: &CellParameters<S>,
    neg: &OcpCurve<S>,
    pos: &OcpCurve<S>,
    v_min: S,
    v_max: S,
    qc_mah: S,
) -> Result<StoichiometryWindow<S>> {
    if !(v_min < v_max) {
        return Err(Error::Window(format!("empty voltage band [{v_min}, {v_max}]")));
    }
    let dn = window_width(p, Side::Neg, qc_mah);
    let dp = window_width(p, Side::Pos, qc_mah);
    for (side, d) in [(Side::Neg, dn), (Side::Pos, dp)] {
        if !(d > S::zero() && d < S::one()) {
            return Err(Error::Capacity { qc_mah: to_f64(qc_mah), side, width: to_f64(d) });
        }
    }
    let tol = lit::<S>(1e-9).max(lit::<S>(64.0) * S::epsilon() * v_max.abs());
    let residual = |yp: S, yn: S| -> (S, S) {
        (
            pos.eval(yp).0 - neg.eval(yn + dn).0 - v_max,
            pos.eval(yp + dp).0 - neg.eval(yn).0 - v_min,
        )
    };
    let hi_p = S::one() - dp;
    let hi_n = S::one() - dn;
    let inside = |yp: S, yn: S| yp > S::zero() && yp < hi_p && yn > S::zero() && yn < hi_n;
    let finish = |yp: S, yn: S| StoichiometryWindow {
        y0_neg: yn,
        y1_neg: yn + dn,
        y0_pos: yp,
        y1_pos: yp + dp,
        qc_mah,
        v_min,
        v_max,
    };

    // Damped Newton from the conventional starting point.
    let (mut yp, mut yn) = (lit::<S>(0.05).min(hi_p / lit(2.0)), lit::<S>(0.02).min(hi_n / lit(2.0)));
    let mut r = residual(yp, yn);
    for _ in 0..100 {
        let norm = r.0.abs().max(r.1.abs());
        if norm < tol {
            return Ok(finish(yp, yn));
        }
        let j11 = pos.eval(yp).1;
        let j12 = -neg.eval(yn + dn).1;
        let j21 = pos.eval(yp + dp).1;
        let j22 = -neg.eval(yn).1;
        let det = j11 * j22 - j12 * j21;
        if det == S::zero() || !det.is_finite() {
            break;
        }
        let sp = (r.0 * j22 - r.1 * j12) / det;
        let sn = (j11 * r.1 - j21 * r.0) / det;
        let mut damp = S::one();
        let mut accepted = false;
        for _ in 0..30 {
            let (tp, tn) = (yp - damp * sp, yn - damp * sn);
            if inside(tp, tn) {
                let rt = residual(tp, tn);
                if rt.0.abs().max(rt.1.abs()) < norm {
                    yp = tp;
                    yn = tn;
                    r = rt;
                    accepted = true;
                    break;
                }
            }
            damp = damp * lit(0.5);
        }
        if !accepted {
            break;
        }
    }

    // Fallback: eliminate y0_pos through the upper-voltage equation, then bisect the lower one.
    let eliminate = |yn: S| -> Option<S> {
        let target = v_max + neg.eval(yn + dn).0;
        pos.inverse_potential(target, S::zero(), hi_p).ok()
    };
    let g = |yn: S| -> Option<S> { eliminate(yn).map(|yp| residual(yp, yn).1) };
    let n = 400;
    let mut prev: Option<(S, S)> = None;
    for k in 1..n {
        let yn = hi_n * lit::<S>(k as f64) / lit(n as f64);
        let Some(gv) = g(yn) else {
            prev = None;
            continue;
        };
        if let Some((ya, ga)) = prev {
            if ga.signum() != gv.signum() {
                let (mut a, mut b, mut fa) = (ya, yn, ga);
                for _ in 0..200 {
                    let m = (a + b) / lit(2.0);
                    let Some(fm) = g(m) else { break };
                    if fm.signum() == fa.signum() {
                        a = m;
                        fa = fm;
                    } else {
                        b = m;
                    }
                    if (b - a) < S::epsilon() {
                        break;
                    }
                }
                let yn = (a + b) / lit(2.0);
                if let Some(yp) = eliminate(yn) {
                    let r = residual(yp, yn);
                    if r.0.abs().max(r.1.abs()) < tol.max(lit(1e-6)) && inside(yp, yn) {
                        return Ok(finish(yp, yn));
                    }
                }
            }
        }
        prev = Some((yn, gv));
    }
    Err(Error::Window(format!(
        "no stoichiometry window for [{v_min}, {v_max}] V at {qc_mah} mAh"
    )))
}

impl<S: Scalar> StoichiometryWindow<S> {
    /// Negative-electrode stoichiometry at a state of charge.
    pub fn y_neg(&self, soc: S) -> S {
        self.y0_neg + soc * (self.y1_neg - self.y0_neg)
    }

    /// Positive-electrode stoichiometry at a state of charge.
    pub fn y_pos(&self, soc: S) -> S {
        self.y1_pos - soc * (self.y1_pos - self.y0_pos)
    }

    /// State of charge implied by a negative-electrode stoichiometry.
    pub fn soc_from_neg(&self, y: S) -> S {
        (y - self.y0_neg) / (self.y1_neg - self.y0_neg)
    }

    /// Open-circuit voltage at a state of charge.
    pub fn ocv(&self, soc: S, neg: &OcpCurve<S>, pos: &OcpCurve<S>) -> S {
        pos.eval(self.y_pos(soc)).0 - neg.eval(self.y_neg(soc)).0
    }

    /// State of charge at which the open-circuit voltage equals `ocv`.
    pub fn soc_from_ocv(&self, ocv: S, neg: &OcpCurve<S>, pos: &OcpCurve<S>) -> Result<S> {
        let lo_v = self.ocv(S::zero(), neg, pos);
        let hi_v = self.ocv(S::one(), neg, pos);
        let slack = lit::<S>(1e-9);
        if !(ocv >= lo_v - slack && ocv <= hi_v + slack) {
            return Err(Error::Init(format!(
                "OCV {ocv} V is outside the operating band [{lo_v}, {hi_v}] V"
            )));
        }
        let (mut a, mut b) = (S::zero(), S::one());
        for _ in 0..200 {
            let m = (a + b) / lit(2.0);
            if self.ocv(m, neg, pos) < ocv {
                a = m;
            } else {
                b = m;
            }
            if b - a < S::epsilon() {
                break;
            }
        }
        Ok((a + b) / lit(2.0))
    }
}

/// Tabulated open-circuit voltage against state of charge.
#[derive(Debug, Clone, PartialEq)]
pub struct SocOcvTable<S> {
    pub soc: Vec<S>,
    pub ocv: Vec<S>,
}

impl<S: Scalar> SocOcvTable<S> {
    /// Linear interpolation of the inverse map.
    pub fn soc_at(&self, ocv: S) -> S {
        let n = self.ocv.len();
        if ocv <= self.ocv[0] {
            return self.soc[0];
        }
        if ocv >= self.ocv[n - 1] {
            return self.soc[n - 1];
        }
        let k = self.ocv.partition_point(|&v| v < ocv).clamp(1, n - 1);
        let (v0, v1) = (self.ocv[k - 1], self.ocv[k]);
        let f = (ocv - v0) / (v1 - v0);
        self.soc[k - 1] + f * (self.soc[k] - self.soc[k - 1])
    }
}

/// Default number of SOC grid points.
pub const SOC_OCV_POINTS: usize = 201;

/// OCV on a uniform SOC grid.
pub fn soc_ocv_curve<S: Scalar>(
    w: &StoichiometryWindow<S>,
    neg: &OcpCurve<S>,
    pos: &OcpCurve<S>,
    n_points: usize,
) -> SocOcvTable<S> {
    let n = n_points.max(2);
    let soc: Vec<S> = (0..n).map(|i| lit::<S>(i as f64) / lit((n - 1) as f64)).collect();
    let ocv = soc.iter().map(|&s| w.ocv(s, neg, pos)).collect();
    SocOcvTable { soc, ocv }
}

/// Initial condition of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialCharge<S> {
    Soc(S),
    Ocv(S),
}

/// Relaxed state at the requested charge and ambient temperature.
pub fn initialize_state<S: Scalar>(
    p: &CellParameters<S>,
    w: &StoichiometryWindow<S>,
    neg: &OcpCurve<S>,
    pos: &OcpCurve<S>,
    init: InitialCharge<S>,
    t_amb: S,
) -> Result<CellState<S>> {
    let soc = match init {
        InitialCharge::Soc(s) => {
            if !(s >= S::zero() && s <= S::one()) {
                return Err(Error::Init(format!("SOC0 = {s} is outside [0, 1]")));
            }
            s
        }
        InitialCharge::Ocv(v) => w.soc_from_ocv(v, neg, pos)?,
    };
    let solid = SolidState::uniform(
        p.material.cs_max_neg * w.y_neg(soc),
        p.material.cs_max_pos * w.y_pos(soc),
    );
    Ok(CellState::new(ElectrolyteState::initial(p), solid, t_amb, p.material.ce0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn setup(name: &str) -> (CellParameters<f64>, OcpCurve<f64>, OcpCurve<f64>) {
        let p = CellParameters::<f64>::preset(name).unwrap();
        let n = OcpCurve::resolve(&p.cell.negative_ocp).unwrap();
        let q = OcpCurve::resolve(&p.cell.positive_ocp).unwrap();
        (p, n, q)
    }

    fn window(name: &str) -> (CellParameters<f64>, OcpCurve<f64>, OcpCurve<f64>, StoichiometryWindow<f64>) {
        let (p, n, q) = setup(name);
        let w = solve_window(&p, &n, &q, p.cell.v_min, p.cell.v_max, p.cell.capacity_mah).unwrap();
        (p, n, q, w)
    }

    #[test]
    fn presets_have_valid_windows() {
        for name in crate::params::PRESETS {
            let (p, n, q, w) = window(name);
            assert!(0.0 < w.y0_neg && w.y0_neg < w.y1_neg && w.y1_neg < 1.0, "{name}: {w:?}");
            assert!(0.0 < w.y0_pos && w.y0_pos < w.y1_pos && w.y1_pos < 1.0, "{name}: {w:?}");
            assert!((q.potential(w.y0_pos).unwrap() - n.potential(w.y1_neg).unwrap() - p.cell.v_max).abs() < 1e-6);
            assert!((q.potential(w.y1_pos).unwrap() - n.potential(w.y0_neg).unwrap() - p.cell.v_min).abs() < 1e-6);
            let cap = |side| p.solid_capacity(side) * p.constants.faraday / 3.6;
            assert_relative_eq!(cap(Side::Neg) * (w.y1_neg - w.y0_neg), w.qc_mah, max_relative = 1e-6);
            assert_relative_eq!(cap(Side::Pos) * (w.y1_pos - w.y0_pos), w.qc_mah, max_relative = 1e-6);
        }
    }

    #[test]
    fn capacity_feasibility() {
        let (p, n, q) = setup("ncm523");
        assert_relative_eq!(window_width(&p, Side::Neg, 5000.0), 2.437, max_relative = 2e-3);
        assert_relative_eq!(window_width(&p, Side::Neg, 1500.0), 0.731, max_relative = 2e-3);
        let e = solve_window(&p, &n, &q, 3.0, 4.2, 5000.0);
        assert!(matches!(e, Err(Error::Capacity { side: Side::Neg, .. })));
    }

    /// Band and capacity of a sub-range `[a, b]` of a solved window's SOC axis.
    fn sub_band(w: &StoichiometryWindow<f64>, n: &OcpCurve<f64>, q: &OcpCurve<f64>, a: f64, b: f64) -> (f64, f64, f64) {
        (w.ocv(a, n, q), w.ocv(b, n, q), w.qc_mah * (b - a))
    }

    #[test]
    fn narrower_band_nests() {
        let (p, n, q, wide) = window("ncm523");
        let (lo, hi, qc) = sub_band(&wide, &n, &q, 0.1, 0.8);
        let narrow = solve_window(&p, &n, &q, lo, hi, qc).unwrap();
        assert_relative_eq!(narrow.y0_neg, wide.y_neg(0.1), max_relative = 1e-6);
        assert_relative_eq!(narrow.y1_neg, wide.y_neg(0.8), max_relative = 1e-6);
        assert_relative_eq!(narrow.y0_pos, wide.y_pos(0.8), max_relative = 1e-6);
        assert_relative_eq!(narrow.y1_pos, wide.y_pos(0.1), max_relative = 1e-6);
    }

    #[test]
    fn soc_ocv_endpoints_and_monotonicity() {
        for name in crate::params::PRESETS {
            let (p, n, q, w) = window(name);
            let tab = soc_ocv_curve(&w, &n, &q, SOC_OCV_POINTS);
            assert_eq!(tab.soc.len(), 201);
            assert!((tab.ocv[0] - p.cell.v_min).abs() < 1e-6);
            assert!((tab.ocv[200] - p.cell.v_max).abs() < 1e-6);
            assert!(tab.ocv.windows(2).all(|v| v[1] > v[0]));
            for k in 1..200 {
                let s = (k as f64 + 0.37) / 200.0;
                let v = w.ocv(s, &n, &q);
                // Plateaus make the inverse ill-conditioned; the table inverse
                // must land in the grid cell that holds `s`.
                let got = tab.soc_at(v);
                assert!(got >= k as f64 / 200.0 - 1e-12 && got <= (k + 1) as f64 / 200.0 + 1e-12, "{name} {s} {got}");
                assert_relative_eq!(tab.soc_at(tab.ocv[k]), tab.soc[k], epsilon = 1e-12);
                assert!((w.soc_from_ocv(v, &n, &q).unwrap() - s).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn initial_state_values() {
        let (p, n, q, w) = window("ncm523");
        let st = initialize_state(&p, &w, &n, &q, InitialCharge::Soc(1.0), 298.0).unwrap();
        for i in 0..4 {
            assert_relative_eq!(st.solid.cs_bulk[0][i], p.material.cs_max_neg * w.y1_neg, max_relative = 1e-14);
            assert_relative_eq!(st.solid.cs_bulk[1][i], p.material.cs_max_pos * w.y0_pos, max_relative = 1e-14);
        }
        assert_eq!(st.solid.w, [[0.0; 4]; 2]);
        assert_relative_eq!(st.electrolyte.qe_neg, 3.049e-3, max_relative = 1e-3);
        assert_eq!(st.t, 298.0);
        assert_eq!(st.dcs, [0.0; 2]);
        let v = w.ocv(0.42, &n, &q);
        let st = initialize_state(&p, &w, &n, &q, InitialCharge::Ocv(v), 298.0).unwrap();
        assert_relative_eq!(st.solid.cs_bulk[0][2] / p.material.cs_max_neg, w.y_neg(0.42), max_relative = 1e-9);
        assert!(initialize_state(&p, &w, &n, &q, InitialCharge::Ocv(4.5), 298.0).is_err());
        assert!(initialize_state(&p, &w, &n, &q, InitialCharge::Soc(1.2), 298.0).is_err());
    }

    /// Residual of the window equations for a candidate window.
    fn residual(w: &StoichiometryWindow<f64>, n: &OcpCurve<f64>, q: &OcpCurve<f64>) -> f64 {
        let r1 = q.eval(w.y0_pos).0 - n.eval(w.y1_neg).0 - w.v_max;
        let r2 = q.eval(w.y1_pos).0 - n.eval(w.y0_neg).0 - w.v_min;
        r1.abs().max(r2.abs())
    }

    #[test]
    fn narrow_bands_can_have_several_roots() {
        // A band carved from SOC [0.363, 0.697] of the ncm811 window admits a
        // second window; the solver may return either, both satisfy the equations.
        let (p, n, q, wide) = window("ncm811");
        let (a, b) = (0.3635, 1.0 - 0.3032);
        let (lo, hi, qc) = sub_band(&wide, &n, &q, a, b);
        let got = solve_window(&p, &n, &q, lo, hi, qc).unwrap();
        assert!(residual(&got, &n, &q) < 1e-6);
        let carved = StoichiometryWindow {
            y0_neg: wide.y_neg(a),
            y1_neg: wide.y_neg(b),
            y0_pos: wide.y_pos(b),
            y1_pos: wide.y_pos(a),
            qc_mah: qc,
            v_min: lo,
            v_max: hi,
        };
        assert!(residual(&carved, &n, &q) < 1e-6);
    }

    proptest! {
        #[test]
        fn solved_windows_satisfy_their_equations(a in 0.0f64..0.45, b in 0.0f64..0.45) {
            let (p, n, q, wide) = window("ncm811");
            let (lo, hi, qc) = sub_band(&wide, &n, &q, a, 1.0 - b);
            let w = solve_window(&p, &n, &q, lo, hi, qc).unwrap();
            prop_assert!(residual(&w, &n, &q) < 1e-6);
            prop_assert!(w.y0_neg > 0.0 && w.y1_neg < 1.0 && w.y0_pos > 0.0 && w.y1_pos < 1.0);
        }

        // Wide bands stay in the region where the root is unique.
        #[test]
        fn nested_voltage_bands_nest_windows(a in 0.0f64..0.12, b in 0.0f64..0.12, shrink in 0.05f64..0.5) {
            let (p, n, q, wide) = window("ncm811");
            let (lo, hi, qc) = sub_band(&wide, &n, &q, a, 1.0 - b);
            let outer = solve_window(&p, &n, &q, lo, hi, qc).unwrap();
            let (a2, b2) = (a + shrink * 0.1, b + shrink * 0.1);
            let (lo, hi, qc) = sub_band(&wide, &n, &q, a2, 1.0 - b2);
            let inner = solve_window(&p, &n, &q, lo, hi, qc).unwrap();
            prop_assert!(inner.y0_neg > outer.y0_neg && inner.y1_neg < outer.y1_neg);
            prop_assert!(inner.y0_pos > outer.y0_pos && inner.y1_pos < outer.y1_pos);
        }
    }
}

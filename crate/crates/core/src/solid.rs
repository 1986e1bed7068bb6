//! Solid-phase diffusion at the collocation points.
//!
//! Each point carries a bulk-average concentration (a pure integrator of the
//! pore-wall flux) and a first-order surface offset `w`, so `css = cs_bulk + w`.

use crate::params::{CellParameters, Side};
use crate::scalar::{lit, Scalar};

/// Collocation points per electrode.
pub const POINTS: usize = 4;

/// Margin kept between `css` and the physical bounds, mol/m^3.
pub const CSS_MARGIN: f64 = 1.0;

/// Bulk and offset concentrations, indexed `[side][point]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolidState<S> {
    pub cs_bulk: [[S; POINTS]; 2],
    pub w: [[S; POINTS]; 2],
}

impl<S: Scalar> SolidState<S> {
    /// Relaxed state with the given bulk concentrations per electrode.
    pub fn uniform(neg: S, pos: S) -> Self {
        Self {
            cs_bulk: [[neg; POINTS], [pos; POINTS]],
            w: [[S::zero(); POINTS]; 2],
        }
    }

    pub fn bulk(&self, side: Side) -> &[S; POINTS] {
        &self.cs_bulk[side.index()]
    }

    pub fn offset(&self, side: Side) -> &[S; POINTS] {
        &self.w[side.index()]
    }

    /// Surface concentrations with the clamp flag.
    pub fn surface(&self, side: Side, cs_max: S) -> ([S; POINTS], bool) {
        let i = side.index();
        let mut out = [S::zero(); POINTS];
        let mut clamped = false;
        for k in 0..POINTS {
            let (c, f) = surface_conc(self.cs_bulk[i][k], self.w[i][k], cs_max);
            out[k] = c;
            clamped |= f;
        }
        (out, clamped)
    }
}

/// Bulk integrator: `d cs_bulk / dt = -3 jn / Rs`. Returns the saturated value and a flag.
pub fn step_bulk<S: Scalar>(cs_bulk: S, jn: S, rs: S, dt: S, cs_max: S) -> (S, bool) {
    let next = cs_bulk - lit::<S>(3.0) * dt * jn / rs;
    saturate(next, cs_max)
}

/// Surface-offset time constant `ks Rs^2 / Ds`, s.
pub fn offset_time_constant<S: Scalar>(ds: S, rs: S, ks: S) -> S {
    ks * rs * rs / ds
}

/// Exponential update of the surface offset toward `-Rs jn / (5 Ds)`.
pub fn step_offset<S: Scalar>(w: S, jn: S, ds: S, rs: S, ks: S, dt: S) -> S {
    let tau = offset_time_constant(ds, rs, ks);
    let gain = -rs * jn / (lit::<S>(5.0) * ds);
    let e = (-dt / tau).exp();
    w * e + gain * (S::one() - e)
}

/// `cs_bulk + w`, clamped into `[margin, cs_max - margin]`.
pub fn surface_conc<S: Scalar>(cs_bulk: S, w: S, cs_max: S) -> (S, bool) {
    saturate(cs_bulk + w, cs_max)
}

fn saturate<S: Scalar>(c: S, cs_max: S) -> (S, bool) {
    let d = lit::<S>(CSS_MARGIN);
    if c < d {
        (d, true)
    } else if c > cs_max - d {
        (cs_max - d, true)
    } else {
        (c, false)
    }
}

/// Electrode-average stoichiometry of the bulk concentration, (1,3,3,1)/8 rule.
pub fn mean_stoichiometry<S: Scalar>(p: &CellParameters<S>, st: &SolidState<S>, side: Side) -> S {
    crate::scalar::quad4(st.bulk(side)) / p.electrode(side).cs_max
}

/// Lithium held in an electrode's solid phase, mol.
pub fn solid_inventory<S: Scalar>(p: &CellParameters<S>, st: &SolidState<S>, side: Side) -> S {
    let e = p.electrode(side);
    e.area * e.thickness * e.eps_s * crate::scalar::quad4(st.bulk(side))
}

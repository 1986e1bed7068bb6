//! Pore-wall flux distribution across each electrode.
//!
//! Butler-Volmer kinetics are linearized around the electrode-average flux,
//! the open-circuit potential is fitted by a cubic over the four collocation
//! points, and the resulting second-order linear ODE for the cumulative flux
//! `J` is solved in closed form:
//!
//! `s (-k1 J + k2 J'') + k3 x^2 + k4 x + k5 = 0`, `s = -1` negative, `+1` positive.
//!
//! In the negative electrode `J(x) = int_0^x jn`; in the positive electrode
//! `J(x) = int_x^L jn`, so `jn = J'` and `jn = -J'` respectively.

use crate::error::{Error, Result};
use crate::ocp::OcpCurve;
use crate::params::{electrolyte_conductivity, CellParameters, JnMode, Side};
use crate::scalar::{lit, mean4, to_f64, Scalar};
use crate::solid::POINTS;

/// Local coordinate of collocation point `i` in an electrode of thickness `l`.
pub fn grid_point<S: Scalar>(l: S, i: usize) -> S {
    if i == POINTS - 1 {
        l
    } else {
        l * lit::<S>(i as f64) / lit(3.0)
    }
}

/// Exchange current density, A/m^2 (symmetric transfer coefficients).
pub fn exchange_current<S: Scalar>(ce: S, css: S, cs_max: S, kr: S) -> S {
    kr * (ce * css * (cs_max - css)).max(S::zero()).sqrt()
}

/// Exact kinetic overpotential for a pore-wall flux, V.
pub fn bv_overpotential<S: Scalar>(jn: S, i0: S, t: S, p: &CellParameters<S>) -> S {
    let f = p.constants.faraday;
    let two = lit::<S>(2.0);
    two * p.constants.gas_constant * t / f * (f * jn / (two * i0)).asinh()
}

/// Tangent line `eta ~ a_jn jn + b_jn` of the kinetic overpotential at `j_mean`.
pub fn linearize_bv<S: Scalar>(p: &CellParameters<S>, t: S, i0_mean: S, j_mean: S) -> (S, S) {
    let f = p.constants.faraday;
    let z = f * j_mean / (lit::<S>(2.0) * i0_mean);
    let a = p.constants.gas_constant * t / (i0_mean * (S::one() + z * z).sqrt());
    let b = bv_overpotential(j_mean, i0_mean, t, p) - a * j_mean;
    (a, b)
}

/// Electrode-average pore-wall flux at current `I` (positive = discharge), mol/m^2/s.
pub fn mean_flux<S: Scalar>(p: &CellParameters<S>, side: Side, current: S) -> S {
    let e = p.electrode(side);
    -side.sign::<S>() * current / (e.specific_area * p.constants.faraday * e.area * e.thickness)
}

/// Interpolating cubic `aP x^3 + bP x^2 + cP x + dP` through the four grid values.
pub fn ocp_cubic_fit<S: Scalar>(u: &[S; 4], l: S) -> [S; 4] {
    // Newton forward differences on s = 3x/L, then expand to monomials.
    let d1 = u[1] - u[0];
    let d2 = u[2] - lit::<S>(2.0) * u[1] + u[0];
    let d3 = u[3] - lit::<S>(3.0) * u[2] + lit::<S>(3.0) * u[1] - u[0];
    let two = lit::<S>(2.0);
    let c3 = d3 / lit(6.0);
    let c2 = d2 / two - d3 / two;
    let c1 = d1 - d2 / two + d3 / lit(3.0);
    let three = lit::<S>(3.0);
    let s = three / l;
    [c3 * s * s * s, c2 * s * s, c1 * s, u[0]]
}

/// Closed-form flux distribution of one electrode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElectrodeReaction<S> {
    pub side: Side,
    pub mode: JnMode,
    pub length: S,
    /// ODE coefficients `k1..k5`
    pub k: [S; 5],
    pub a_jn: S,
    pub b_jn: S,
    /// cubic OCP fit in physical coordinates
    pub ocp_fit: [S; 4],
    /// OCP at the grid points, V
    pub ocp: [S; 4],
    /// exchange current density at the grid points, A/m^2
    pub i0: [S; 4],
    pub i0_mean: S,
    pub j_mean: S,
    pub flux: CumulativeFlux<S>,
    /// effective conductivity averaged over the grid, S/m
    pub kappa_mean: S,
    /// `kappa_D / kappa` averaged over the grid, V
    pub kd_ratio_mean: S,
    pub jn: [S; 4],
    /// OCP evaluated outside its table somewhere on the grid
    pub extrapolated: bool,
}

/// Per-electrode inputs sampled at the collocation points.
#[derive(Debug, Clone, Copy)]
pub struct ElectrodeInputs<S> {
    pub ce: [S; 4],
    pub css: [S; 4],
    /// electrolyte parabola coefficients of this electrode
    pub ae: S,
    pub be: S,
    pub t: S,
    pub current: S,
}

/// Closed-form cumulative flux `J` on `[0, L]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CumulativeFlux<S> {
    pub side: Side,
    pub length: S,
    /// `sqrt(k1 / k2)`, zero when there is no homogeneous part
    pub lambda: S,
    /// amplitudes of `e^(-lambda x)` and `e^(-lambda (L - x))`
    pub c1: S,
    pub c2: S,
    /// particular solution `alpha x^2 + beta x + gamma`
    pub alpha: S,
    pub beta: S,
    pub gamma: S,
}

impl<S: Scalar> CumulativeFlux<S> {
    /// Solves the ODE with coefficients `k` for boundary values `J(0) = j0`, `J(L) = jl`.
    ///
    /// The homogeneous part uses the decaying pair `e^(-lambda x)`,
    /// `e^(-lambda (L - x))` so no growing exponential is evaluated.
    pub fn solve(side: Side, length: S, k: [S; 5], j0: S, jl: S) -> Self {
        let [k1, k2, k3, k4, k5] = k;
        let s = side.sign::<S>();
        let l = length;
        let alpha = s * k3 / k1;
        let beta = s * k4 / k1;
        let gamma = s * (k5 + lit::<S>(2.0) * k2 * k3 / k1) / k1;
        let lambda = (k1 / k2).sqrt();
        let el = (-lambda * l).exp();
        let r0 = j0 - gamma;
        let rl = jl - ((alpha * l + beta) * l + gamma);
        let den = S::one() - el * el;
        Self {
            side,
            length,
            lambda,
            c1: (r0 - el * rl) / den,
            c2: (rl - el * r0) / den,
            alpha,
            beta,
            gamma,
        }
    }

    /// Uniform flux `j` over the electrode.
    pub fn uniform(side: Side, length: S, j: S) -> Self {
        let (beta, gamma) = match side {
            Side::Neg => (j, S::zero()),
            Side::Pos => (-j, j * length),
        };
        Self {
            side,
            length,
            lambda: S::zero(),
            c1: S::zero(),
            c2: S::zero(),
            alpha: S::zero(),
            beta,
            gamma,
        }
    }

    /// `J(x)`.
    pub fn j_cum(&self, x: S) -> S {
        let mut v = (self.alpha * x + self.beta) * x + self.gamma;
        if self.lambda > S::zero() {
            v += self.c1 * (-self.lambda * x).exp() + self.c2 * (-self.lambda * (self.length - x)).exp();
        }
        v
    }

    /// Pore-wall flux at local `x`, mol/m^2/s.
    pub fn jn_at(&self, x: S) -> S {
        let mut d = lit::<S>(2.0) * self.alpha * x + self.beta;
        if self.lambda > S::zero() {
            d += self.lambda
                * (self.c2 * (-self.lambda * (self.length - x)).exp() - self.c1 * (-self.lambda * x).exp());
        }
        match self.side {
            Side::Neg => d,
            Side::Pos => -d,
        }
    }

    /// `int_0^L J dx`.
    pub fn integral_j(&self) -> S {
        let l = self.length;
        let mut v = self.alpha * l * l * l / lit(3.0) + self.beta * l * l / lit(2.0) + self.gamma * l;
        if self.lambda > S::zero() {
            v += (self.c1 + self.c2) * (S::one() - (-self.lambda * l).exp()) / self.lambda;
        }
        v
    }
}

impl<S: Scalar> ElectrodeReaction<S> {
    pub fn j_cum(&self, x: S) -> S {
        self.flux.j_cum(x)
    }

    pub fn jn_at(&self, x: S) -> S {
        self.flux.jn_at(x)
    }

    pub fn integral_j(&self) -> S {
        self.flux.integral_j()
    }

    /// Boundary values of `J` implied by the applied current.
    pub fn boundary_values(p: &CellParameters<S>, side: Side, current: S) -> (S, S) {
        let e = p.electrode(side);
        let total = current / (e.specific_area * e.area * p.constants.faraday);
        match side {
            Side::Neg => (S::zero(), total),
            Side::Pos => (-total, S::zero()),
        }
    }
}

/// Solves the flux distribution of one electrode.
pub fn jn_profile<S: Scalar>(
    p: &CellParameters<S>,
    side: Side,
    mode: JnMode,
    ocp: &OcpCurve<S>,
    inp: &ElectrodeInputs<S>,
) -> Result<ElectrodeReaction<S>> {
    let e = p.electrode(side);
    let l = e.thickness;
    let t = inp.t;
    let f = p.constants.faraday;
    let kr = p.reaction_rate_coeff(side, t);

    let mut ocp_v = [S::zero(); 4];
    let mut i0 = [S::zero(); 4];
    let mut kappa = [S::zero(); 4];
    let mut kd = [S::zero(); 4];
    let mut extrapolated = false;
    for i in 0..POINTS {
        let (u, x) = ocp.potential_flagged(inp.css[i] / e.cs_max)?;
        extrapolated |= x;
        ocp_v[i] = u;
        i0[i] = exchange_current(inp.ce[i], inp.css[i], e.cs_max, kr);
        kappa[i] = p.bruggeman(electrolyte_conductivity(inp.ce[i], t), e.eps_e);
        kd[i] = p.kappa_d_ratio(inp.ce[i], t);
    }
    let kappa_mean = mean4(&kappa);
    let kd_ratio_mean = mean4(&kd);
    let i0_mean = exchange_current(mean4(&inp.ce), mean4(&inp.css), e.cs_max, kr);
    if !(i0_mean > S::zero()) || !(kappa_mean > S::zero()) {
        return Err(Error::ModelDegeneracy(format!(
            "{side:?} electrode: mean exchange current {i0_mean}, conductivity {kappa_mean}"
        )));
    }
    let j_mean = mean_flux(p, side, inp.current);
    let (a_jn, b_jn) = linearize_bv(p, t, i0_mean, j_mean);
    let fit = ocp_cubic_fit(&ocp_v, l);
    let sigma = p.sigma_eff(side);

    let k1 = e.specific_area * f * (sigma.recip() + kappa_mean.recip());
    let k2 = a_jn + f * e.film_resistance;
    let k3 = lit::<S>(-3.0) * fit[0];
    let grad = lit::<S>(2.0) * inp.ae * kd_ratio_mean / inp.be;
    let k4 = grad - lit::<S>(2.0) * fit[1];
    let mut k5 = -inp.current / (e.area * sigma) - fit[2];
    if side == Side::Pos {
        k5 -= grad * l;
    }
    if !(k2 > S::zero()) {
        return Err(Error::KineticsDegeneracy { side, k2: to_f64(k2) });
    }

    let k = [k1, k2, k3, k4, k5];
    let flux = match mode {
        JnMode::Uniform => CumulativeFlux::uniform(side, l, j_mean),
        JnMode::Analytic => {
            let (j0, jl) = ElectrodeReaction::boundary_values(p, side, inp.current);
            CumulativeFlux::solve(side, l, k, j0, jl)
        }
    };
    let mut r = ElectrodeReaction {
        side,
        mode,
        length: l,
        k,
        a_jn,
        b_jn,
        ocp_fit: fit,
        ocp: ocp_v,
        i0,
        i0_mean,
        j_mean,
        flux,
        kappa_mean,
        kd_ratio_mean,
        jn: [S::zero(); 4],
        extrapolated,
    };
    for i in 0..POINTS {
        r.jn[i] = r.jn_at(grid_point(l, i));
    }
    Ok(r)
}

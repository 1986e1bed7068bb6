//! Full-order pseudo-two-dimensional reference model.
//!
//! Finite volumes across the cell thickness and across each particle radius.
//! A step solves the potentials and pore-wall fluxes by Newton iteration
//! (exact Butler-Volmer, charge conservation, Ohm's laws) with the particle
//! surface concentration taken from the implicit radial update, then applies
//! that flux to the particles and to an implicit electrolyte diffusion step.
//! Transport coefficients are lagged one step.
//!
//! The model reads the same parameters and OCP tables as the reduced engine,
//! so the difference between the two is the model reduction alone. It runs in
//! `f64` only.

use crate::error::{Error, Result};
use crate::init::{solve_window, StoichiometryWindow};
use crate::ocp::OcpCurve;
use crate::output::step_temperature;
use crate::params::{electrolyte_conductivity, electrolyte_diffusivity, CellParameters, Side};
use crate::reaction::{exchange_current, grid_point};
use crate::scenario::{PlannedSegment, Scenario, Segment};
use crate::stepper::{hold_voltage, Flags, StepRecord, Termination, Trajectory, MAX_OPEN_PHASE};

/// Largest scaled residual accepted by the Newton solve.
pub const NEWTON_TOL: f64 = 1e-8;
pub const NEWTON_MAX_ITER: usize = 50;
/// Times a failing step is split in half before giving up.
pub const MAX_HALVINGS: usize = 4;

/// Control volumes per region and radial shells per particle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct P2DMesh {
    pub n_neg: usize,
    pub n_sep: usize,
    pub n_pos: usize,
    pub n_r: usize,
}

impl Default for P2DMesh {
    fn default() -> Self {
        Self { n_neg: 51, n_sep: 11, n_pos: 51, n_r: 18 }
    }
}

impl P2DMesh {
    pub fn validate(&self) -> Result<()> {
        if [self.n_neg, self.n_sep, self.n_pos, self.n_r].iter().any(|&n| n < 4) {
            return Err(Error::Config(format!("P2D mesh {self:?} needs at least 4 cells per axis")));
        }
        Ok(())
    }

    /// Every count multiplied by `k`.
    pub fn refined(&self, k: usize) -> Self {
        Self { n_neg: self.n_neg * k, n_sep: self.n_sep * k, n_pos: self.n_pos * k, n_r: self.n_r * k }
    }
}

/// Field state of the full-order model.
#[derive(Debug, Clone, PartialEq)]
pub struct P2DState {
    /// electrolyte concentration per control volume, mol/m^3
    pub ce: Vec<f64>,
    /// shell concentrations, `n_r` per electrode control volume, negative electrode first
    pub cs: Vec<f64>,
    pub phi_e: Vec<f64>,
    /// solid potential per electrode control volume
    pub phi_s: Vec<f64>,
    /// pore-wall flux per electrode control volume, mol/m^2/s
    pub jn: Vec<f64>,
    pub t: f64,
    pub time: f64,
    pub step: u64,
}

/// Running solver statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct P2DStats {
    pub steps: u64,
    pub newton_iterations: u64,
    pub max_newton_iterations: usize,
    pub halvings: u64,
    /// largest `|sum as F jn dV -+ I| / max(|I|, 1e-3 I_1C)` over both electrodes
    pub max_charge_imbalance: f64,
}

/// Electrode control volume.
#[derive(Debug, Clone, Copy)]
struct ElCv {
    side: Side,
    /// global control-volume index
    g: usize,
    /// `A dx as F`, A s m^2/mol
    coef: f64,
    radius: f64,
    cs_max: f64,
    rf: f64,
    /// conductance to the next control volume of the same electrode, S
    gs_right: f64,
}

/// Surface concentration as an affine function of the step's flux, plus the
/// shell responses needed to finish the radial update.
struct Radial {
    css_a: f64,
    css_b: f64,
    a: Vec<f64>,
    b: Vec<f64>,
    ds_clamped: bool,
}

/// Result of advancing over one step, possibly in halved sub-steps.
struct Advanced {
    state: P2DState,
    v: f64,
    qh: f64,
    flags: Flags,
    iterations: usize,
    halvings: u64,
    imbalance: f64,
}

struct Potentials {
    phi_e: Vec<f64>,
    phi_s: Vec<f64>,
    jn: Vec<f64>,
    css: Vec<f64>,
    iterations: usize,
}

pub struct P2D {
    params: CellParameters<f64>,
    neg: OcpCurve<f64>,
    pos: OcpCurve<f64>,
    window: StoichiometryWindow<f64>,
    mesh: P2DMesh,
    dx: Vec<f64>,
    area: Vec<f64>,
    eps: Vec<f64>,
    /// cell-centre coordinate from the negative collector, m
    x: Vec<f64>,
    el: Vec<ElCv>,
    el_of: Vec<Option<usize>>,
    /// shell volumes over `R^3` and face weights `rho^2`
    shell_v: Vec<f64>,
    face_w: Vec<f64>,
    /// surface value from the two outer shells and the surface gradient
    surf_w: [f64; 3],
    pub stats: P2DStats,
}

impl P2D {
    pub fn new(params: CellParameters<f64>, mesh: P2DMesh) -> Result<Self> {
        params.validate()?;
        let neg = OcpCurve::resolve(&params.cell.negative_ocp)?;
        let pos = OcpCurve::resolve(&params.cell.positive_ocp)?;
        Self::with_curves(params, neg, pos, mesh)
    }

    pub fn with_curves(params: CellParameters<f64>, neg: OcpCurve<f64>, pos: OcpCurve<f64>, mesh: P2DMesh) -> Result<Self> {
        mesh.validate()?;
        let window = solve_window(&params, &neg, &pos, params.cell.v_min, params.cell.v_max, params.cell.capacity_mah)?;
        let g = &params.geometry;
        let m = &params.material;
        let regions = [
            (mesh.n_neg, g.thickness_neg, g.area_neg, m.eps_e_neg, Some(Side::Neg)),
            (mesh.n_sep, g.thickness_sep, g.area_sep, m.eps_e_sep, None),
            (mesh.n_pos, g.thickness_pos, g.area_pos, m.eps_e_pos, Some(Side::Pos)),
        ];
        let (mut dx, mut area, mut eps, mut x, mut el, mut el_of) = (vec![], vec![], vec![], vec![], vec![], vec![]);
        let mut x0 = 0.0;
        for (n, l, a, e, side) in regions {
            let h = l / n as f64;
            for k in 0..n {
                dx.push(h);
                area.push(a);
                eps.push(e);
                x.push(x0 + (k as f64 + 0.5) * h);
                el_of.push(side.map(|_| el.len()));
                if let Some(side) = side {
                    let ep = params.electrode(side);
                    el.push(ElCv {
                        side,
                        g: x.len() - 1,
                        coef: a * h * ep.specific_area * params.constants.faraday,
                        radius: ep.radius,
                        cs_max: ep.cs_max,
                        rf: ep.film_resistance,
                        gs_right: if k + 1 < n { params.sigma_eff(side) * a / h } else { 0.0 },
                    });
                }
            }
            x0 += l;
        }
        let nr = mesh.n_r;
        let rho = |j: usize| j as f64 / nr as f64;
        let shell_v = (0..nr).map(|j| (rho(j + 1).powi(3) - rho(j).powi(3)) / 3.0).collect();
        let face_w = (0..=nr).map(|j| rho(j) * rho(j)).collect();
        Ok(Self {
            params,
            neg,
            pos,
            window,
            mesh,
            dx,
            area,
            eps,
            x,
            el,
            el_of,
            shell_v,
            face_w,
            surf_w: surface_weights(nr),
            stats: P2DStats::default(),
        })
    }

    pub fn params(&self) -> &CellParameters<f64> {
        &self.params
    }

    pub fn mesh(&self) -> &P2DMesh {
        &self.mesh
    }

    /// State of charge whose open-circuit voltage is `ocv`.
    pub fn soc_from_ocv(&self, ocv: f64) -> Result<f64> {
        self.window.soc_from_ocv(ocv, &self.neg, &self.pos)
    }

    pub fn window(&self) -> &StoichiometryWindow<f64> {
        &self.window
    }

    fn curve(&self, side: Side) -> &OcpCurve<f64> {
        match side {
            Side::Neg => &self.neg,
            Side::Pos => &self.pos,
        }
    }

    /// Relaxed state at a state of charge of the operating window.
    pub fn initial_state(&self, soc: f64, t_amb: f64) -> Result<P2DState> {
        if !(0.0..=1.0).contains(&soc) {
            return Err(Error::Init(format!("SOC0 = {soc} is outside [0, 1]")));
        }
        let w = &self.window;
        let mut cs = Vec::with_capacity(self.el.len() * self.mesh.n_r);
        let mut phi_s = Vec::with_capacity(self.el.len());
        for cv in &self.el {
            let y = match cv.side {
                Side::Neg => w.y_neg(soc),
                Side::Pos => w.y_pos(soc),
            };
            cs.extend(std::iter::repeat(cv.cs_max * y).take(self.mesh.n_r));
            phi_s.push(self.curve(cv.side).eval(y).0);
        }
        Ok(P2DState {
            ce: vec![self.params.material.ce0; self.dx.len()],
            cs,
            phi_e: vec![0.0; self.dx.len()],
            phi_s,
            jn: vec![0.0; self.el.len()],
            t: t_amb,
            time: 0.0,
            step: 0,
        })
    }

    fn shells<'a>(&self, st: &'a P2DState, e: usize) -> &'a [f64] {
        let nr = self.mesh.n_r;
        &st.cs[e * nr..(e + 1) * nr]
    }

    fn particle_mean(&self, st: &P2DState, e: usize) -> f64 {
        3.0 * self.shells(st, e).iter().zip(&self.shell_v).map(|(c, v)| c * v).sum::<f64>()
    }

    /// Implicit radial diffusion of one particle over `dt` (`None` keeps the shells).
    fn radial(&self, st: &P2DState, e: usize, dt: Option<f64>) -> Radial {
        let cv = &self.el[e];
        let nr = self.mesh.n_r;
        let old = self.shells(st, e);
        let d = self.params.solid_diffusivity(cv.side, self.particle_mean(st, e), st.t);
        let drho = 1.0 / nr as f64;
        let [wn, wm, wg] = self.surf_w;
        // The surface gradient in rho is `-jn R / Ds`.
        let grad = -wg * cv.radius / d.value;
        let Some(dt) = dt else {
            return Radial {
                css_a: wn * old[nr - 1] + wm * old[nr - 2],
                css_b: grad,
                a: old.to_vec(),
                b: vec![0.0; nr],
                ds_clamped: d.clamped,
            };
        };
        let k = d.value / (cv.radius * cv.radius * drho);
        let mut lo = vec![0.0; nr];
        let mut di = vec![0.0; nr];
        let mut up = vec![0.0; nr];
        for j in 0..nr {
            let wl = if j > 0 { k * self.face_w[j] } else { 0.0 };
            let wr = if j + 1 < nr { k * self.face_w[j + 1] } else { 0.0 };
            lo[j] = -wl;
            up[j] = -wr;
            di[j] = self.shell_v[j] / dt + wl + wr;
        }
        let rhs_a: Vec<f64> = (0..nr).map(|j| self.shell_v[j] * old[j] / dt).collect();
        let mut rhs_b = vec![0.0; nr];
        rhs_b[nr - 1] = -1.0 / cv.radius;
        let a = thomas(&lo, &di, &up, &rhs_a);
        let b = thomas(&lo, &di, &up, &rhs_b);
        Radial {
            css_a: wn * a[nr - 1] + wm * a[nr - 2],
            css_b: wn * b[nr - 1] + wm * b[nr - 2] + grad,
            a,
            b,
            ds_clamped: d.clamped,
        }
    }

    /// Effective electrolyte property of each control volume combined into face conductances
    /// (series halves), `n - 1` faces.
    fn faces(&self, prop: &[f64]) -> Vec<f64> {
        (0..prop.len() - 1)
            .map(|g| {
                let r = |k: usize| self.dx[k] / (2.0 * prop[k] * self.area[k]);
                1.0 / (r(g) + r(g + 1))
            })
            .collect()
    }

    fn bruggeman_all(&self, raw: impl Fn(usize) -> Result<f64>) -> Result<Vec<f64>> {
        (0..self.dx.len()).map(|g| Ok(self.params.bruggeman(raw(g)?, self.eps[g]))).collect()
    }

    /// Newton solve for potentials and fluxes with surface concentrations `css_a + css_b jn`.
    fn solve_potentials(&self, st: &P2DState, current: f64, rad: &[Radial]) -> Result<Potentials> {
        let p = &self.params;
        let nx = self.dx.len();
        let ne = self.el.len();
        let t = st.t;
        let f = p.constants.faraday;
        let rt_f = p.constants.gas_constant * t / f;
        let kappa = self.bruggeman_all(|g| Ok(electrolyte_conductivity(st.ce[g], t)))?;
        let gk = self.faces(&kappa);
        let lnce: Vec<f64> = st.ce.iter().map(|c| c.ln()).collect();
        let kd: Vec<f64> = (0..nx - 1)
            .map(|g| 0.5 * (p.kappa_d_ratio(st.ce[g], t) + p.kappa_d_ratio(st.ce[g + 1], t)))
            .collect();
        let kr = [p.reaction_rate_coeff(Side::Neg, t), p.reaction_rate_coeff(Side::Pos, t)];
        let i_scale = p.one_c_current();

        let mut phi_e = st.phi_e.clone();
        let mut phi_s = st.phi_s.clone();
        let mut jn = st.jn.clone();
        phi_e[0] = 0.0;

        // Residuals: electrolyte charge, solid charge (A), kinetics (V), and dB/djn.
        let residuals = |phi_e: &[f64], phi_s: &[f64], jn: &[f64]| {
            let mut re = vec![0.0; nx];
            let mut rs = vec![0.0; ne];
            let mut rb = vec![0.0; ne];
            let mut db = vec![0.0; ne];
            let mut css = vec![0.0; ne];
            for fc in 0..nx - 1 {
                let ie = -gk[fc] * ((phi_e[fc + 1] - phi_e[fc]) + kd[fc] * (lnce[fc + 1] - lnce[fc]));
                re[fc] += ie;
                re[fc + 1] -= ie;
            }
            for (e, cv) in self.el.iter().enumerate() {
                re[cv.g] -= cv.coef * jn[e];
                rs[e] += cv.coef * jn[e];
                if cv.gs_right > 0.0 {
                    let is = -cv.gs_right * (phi_s[e + 1] - phi_s[e]);
                    rs[e] += is;
                    rs[e + 1] -= is;
                }
            }
            // Collector currents enter the first and leave the last solid control volume.
            rs[0] -= current;
            rs[ne - 1] += current;
            for (e, cv) in self.el.iter().enumerate() {
                let r = &rad[e];
                let c = r.css_a + r.css_b * jn[e];
                css[e] = c;
                let (u, du) = self.curve(cv.side).eval(c / cv.cs_max);
                let i0 = exchange_current(st.ce[cv.g], c, cv.cs_max, kr[cv.side.index()]);
                let z = f * jn[e] / (2.0 * i0);
                rb[e] = phi_s[e] - phi_e[cv.g] - u - f * cv.rf * jn[e] - 2.0 * rt_f * z.asinh();
                let di0 = i0 * (cv.cs_max - 2.0 * c) / (2.0 * c * (cv.cs_max - c)) * r.css_b;
                let dz = f / (2.0 * i0) - z / i0 * di0;
                db[e] = -du / cv.cs_max * r.css_b - f * cv.rf - 2.0 * rt_f * dz / (1.0 + z * z).sqrt();
            }
            (re, rs, rb, db, css)
        };
        let merit = |re: &[f64], rs: &[f64], rb: &[f64]| {
            let a = re.iter().chain(rs).fold(0.0f64, |m, v| m.max(v.abs())) / i_scale;
            let b = rb.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if a.is_nan() || b.is_nan() {
                f64::INFINITY
            } else {
                a.max(b)
            }
        };

        let mut res = residuals(&phi_e, &phi_s, &jn);
        let mut norm = merit(&res.0, &res.1, &res.2);
        for it in 0..NEWTON_MAX_ITER {
            if norm < NEWTON_TOL {
                return Ok(Potentials { phi_e, phi_s, jn, css: res.4, iterations: it });
            }
            if !norm.is_finite() {
                break;
            }
            let (re, rs, rb, db, _) = &res;
            // Eliminate djn = -(B + dphi_s - dphi_e) / B' per control volume and solve the
            // block-tridiagonal system in (dphi_e, dphi_s).
            let mut d = vec![[[0.0; 2]; 2]; nx];
            let mut lo = vec![[0.0; 2]; nx];
            let mut up = vec![[0.0; 2]; nx];
            let mut rhs = vec![[0.0; 2]; nx];
            for g in 0..nx {
                let left = if g > 0 { gk[g - 1] } else { 0.0 };
                let right = if g + 1 < nx { gk[g] } else { 0.0 };
                d[g][0][0] = left + right;
                lo[g][0] = -left;
                up[g][0] = -right;
                rhs[g][0] = -re[g];
                match self.el_of[g] {
                    Some(e) => {
                        let cv = &self.el[e];
                        let q = cv.coef / db[e];
                        let sl = if e > 0 && self.el[e - 1].side == cv.side { self.el[e - 1].gs_right } else { 0.0 };
                        d[g][0][0] -= q;
                        d[g][0][1] = q;
                        rhs[g][0] -= q * rb[e];
                        d[g][1][1] = sl + cv.gs_right - q;
                        d[g][1][0] = q;
                        lo[g][1] = -sl;
                        up[g][1] = -cv.gs_right;
                        rhs[g][1] = -rs[e] + q * rb[e];
                    }
                    None => d[g][1][1] = 1.0,
                }
            }
            // Gauge: the electrolyte potential of the first control volume stays at zero.
            d[0][0] = [1.0, 0.0];
            up[0][0] = 0.0;
            rhs[0][0] = 0.0;
            let dx = block_thomas(&d, &lo, &up, &rhs)?;
            let djn: Vec<f64> = self
                .el
                .iter()
                .enumerate()
                .map(|(e, cv)| -(rb[e] + dx[cv.g][1] - dx[cv.g][0]) / db[e])
                .collect();

            let mut lambda = 1.0;
            loop {
                let te: Vec<f64> = (0..nx).map(|g| phi_e[g] + lambda * dx[g][0]).collect();
                let ts: Vec<f64> = self.el.iter().enumerate().map(|(e, cv)| phi_s[e] + lambda * dx[cv.g][1]).collect();
                let tj: Vec<f64> = (0..ne).map(|e| jn[e] + lambda * djn[e]).collect();
                let r = residuals(&te, &ts, &tj);
                let n = merit(&r.0, &r.1, &r.2);
                if n < norm || lambda < 1.0 / 256.0 {
                    phi_e = te;
                    phi_s = ts;
                    jn = tj;
                    res = r;
                    norm = n;
                    break;
                }
                lambda *= 0.5;
            }
        }
        Err(Error::Newton { residual: norm })
    }

    /// Terminal voltage from the solid potentials at both collectors.
    fn terminal_voltage(&self, phi_s: &[f64], current: f64) -> f64 {
        let p = &self.params;
        let (first, last) = (&self.el[0], &self.el[self.el.len() - 1]);
        let drop = |cv: &ElCv| current * self.dx[cv.g] / (2.0 * p.sigma_eff(cv.side) * self.area[cv.g]);
        let neg = phi_s[0] + drop(first);
        let pos = phi_s[phi_s.len() - 1] - drop(last);
        pos - neg - p.transport.contact_resistance * current
    }

    fn heat_rate(&self, jn: &[f64], css: &[f64], current: f64, v: f64) -> f64 {
        let s: f64 = self
            .el
            .iter()
            .enumerate()
            .map(|(e, cv)| cv.coef * jn[e] * self.curve(cv.side).eval(css[e] / cv.cs_max).0)
            .sum();
        -s - current * v
    }

    fn flags(&self, css: &[f64], rad: &[Radial]) -> Flags {
        let mut fl = Flags::empty();
        for (e, cv) in self.el.iter().enumerate() {
            if !self.curve(cv.side).in_table(css[e] / cv.cs_max) {
                fl |= Flags::OCP_EXTRAPOLATED;
            }
            if rad[e].ds_clamped {
                fl |= Flags::DS_CLAMPED;
            }
        }
        fl
    }

    /// Potentials, fluxes and voltage of the present state at `current`, without advancing it.
    pub fn evaluate(&self, st: &P2DState, current: f64) -> Result<(P2DState, f64, Flags)> {
        let rad: Vec<Radial> = (0..self.el.len()).map(|e| self.radial(st, e, None)).collect();
        let pot = self.solve_potentials(st, current, &rad)?;
        let v = self.terminal_voltage(&pot.phi_s, current);
        let flags = self.flags(&pot.css, &rad);
        let mut out = st.clone();
        out.phi_e = pot.phi_e;
        out.phi_s = pot.phi_s;
        out.jn = pot.jn;
        Ok((out, v, flags))
    }

    fn advance(&self, st: &P2DState, current: f64, t_amb: f64, dt: f64) -> Result<Advanced> {
        let p = &self.params;
        let rad: Vec<Radial> = (0..self.el.len()).map(|e| self.radial(st, e, Some(dt))).collect();
        let pot = self.solve_potentials(st, current, &rad)?;
        let v = self.terminal_voltage(&pot.phi_s, current);
        let qh = self.heat_rate(&pot.jn, &pot.css, current, v);
        let flags = self.flags(&pot.css, &rad);

        let mut next = st.clone();
        let nr = self.mesh.n_r;
        for (e, r) in rad.iter().enumerate() {
            for j in 0..nr {
                next.cs[e * nr + j] = r.a[j] + pot.jn[e] * r.b[j];
            }
        }
        // Implicit electrolyte diffusion with the reaction source.
        let t = st.t;
        let de = self.bruggeman_all(|g| electrolyte_diffusivity(st.ce[g], t))?;
        let gd = self.faces(&de);
        let nx = self.dx.len();
        let (mut lo, mut di, mut up, mut rhs) = (vec![0.0; nx], vec![0.0; nx], vec![0.0; nx], vec![0.0; nx]);
        for g in 0..nx {
            let cap = self.eps[g] * self.area[g] * self.dx[g] / dt;
            let l = if g > 0 { gd[g - 1] } else { 0.0 };
            let r = if g + 1 < nx { gd[g] } else { 0.0 };
            lo[g] = -l;
            up[g] = -r;
            di[g] = cap + l + r;
            rhs[g] = cap * st.ce[g];
        }
        let src = (1.0 - p.transport.transference) / p.constants.faraday;
        for (e, cv) in self.el.iter().enumerate() {
            rhs[cv.g] += src * cv.coef * pot.jn[e];
        }
        next.ce = thomas(&lo, &di, &up, &rhs);
        next.t = step_temperature(p, st.t, qh, t_amb, dt);
        next.phi_e = pot.phi_e;
        next.phi_s = pot.phi_s;
        next.jn = pot.jn;
        next.time = st.time + dt;

        let imbalance = self.charge_imbalance(&next.jn, current);
        Ok(Advanced { state: next, v, qh, flags, iterations: pot.iterations, halvings: 0, imbalance })
    }

    /// Relative mismatch between the integrated reaction current of each electrode and `I`.
    pub fn charge_imbalance(&self, jn: &[f64], current: f64) -> f64 {
        let mut sums = [0.0; 2];
        for (e, cv) in self.el.iter().enumerate() {
            sums[cv.side.index()] += cv.coef * jn[e];
        }
        let scale = current.abs().max(1e-3 * self.params.one_c_current());
        ((sums[0] - current).abs()).max((sums[1] + current).abs()) / scale
    }

    /// Advances over `dt`, halving the step up to [`MAX_HALVINGS`] times when Newton fails.
    fn advance_split(&self, st: &P2DState, current: f64, t_amb: f64, dt: f64, depth: usize) -> Result<Advanced> {
        match self.advance(st, current, t_amb, dt) {
            Err(Error::Newton { .. }) if depth < MAX_HALVINGS => {
                let a = self.advance_split(st, current, t_amb, dt / 2.0, depth + 1)?;
                let b = self.advance_split(&a.state, current, t_amb, dt / 2.0, depth + 1)?;
                Ok(Advanced {
                    flags: a.flags | b.flags,
                    iterations: a.iterations.max(b.iterations),
                    halvings: 1 + a.halvings + b.halvings,
                    imbalance: a.imbalance.max(b.imbalance),
                    ..b
                })
            }
            other => other,
        }
    }

    /// One step at constant current; returns the record of the new state.
    pub fn step(&mut self, st: &mut P2DState, current: f64, t_amb: f64, dt: f64) -> Result<StepRecord> {
        let a = self.advance_split(st, current, t_amb, dt, 0)?;
        let s = &mut self.stats;
        s.steps += 1;
        s.newton_iterations += a.iterations as u64;
        s.max_newton_iterations = s.max_newton_iterations.max(a.iterations);
        s.halvings += a.halvings;
        s.max_charge_imbalance = s.max_charge_imbalance.max(a.imbalance);
        let mut next = a.state;
        next.step = st.step + 1;
        next.time = st.time + dt;
        *st = next;
        Ok(self.record(st, current, a.v, a.qh, a.flags))
    }

    /// End-of-step voltage at `current` without changing the state.
    pub fn step_voltage(&self, st: &P2DState, current: f64, t_amb: f64, dt: f64) -> Result<f64> {
        self.advance_split(st, current, t_amb, dt, 0).map(|a| a.v)
    }

    /// Solid plus solution lithium, mol. The solid phase of a control volume holds
    /// `as R / 3` particle volume per unit volume, matching the flux the particles exchange.
    pub fn lithium(&self, st: &P2DState) -> f64 {
        let solid: f64 = (0..self.el.len())
            .map(|e| {
                let cv = &self.el[e];
                cv.coef / self.params.constants.faraday * cv.radius / 3.0 * self.particle_mean(st, e)
            })
            .sum();
        let liquid: f64 = (0..self.dx.len()).map(|g| self.eps[g] * self.area[g] * self.dx[g] * st.ce[g]).sum();
        solid + liquid
    }

    pub fn soc(&self, st: &P2DState) -> f64 {
        let n = self.mesh.n_neg;
        let y = (0..n).map(|e| self.particle_mean(st, e)).sum::<f64>() / (n as f64 * self.params.material.cs_max_neg);
        self.window.soc_from_neg(y)
    }

    fn surface(&self, st: &P2DState, e: usize) -> f64 {
        let r = self.radial(st, e, None);
        r.css_a + r.css_b * st.jn[e]
    }

    /// Samples a per-control-volume electrode field at the four collocation points.
    fn sample_electrode(&self, side: Side, val: impl Fn(usize) -> f64) -> [f64; 4] {
        let (first, n, l) = match side {
            Side::Neg => (0, self.mesh.n_neg, self.params.geometry.thickness_neg),
            Side::Pos => (self.mesh.n_neg, self.mesh.n_pos, self.params.geometry.thickness_pos),
        };
        let h = l / n as f64;
        std::array::from_fn(|i| {
            let x = grid_point(l, i);
            let k = (((x / h) - 0.5).floor().max(0.0) as usize).min(n - 2);
            let (x0, x1) = ((k as f64 + 0.5) * h, (k as f64 + 1.5) * h);
            let (y0, y1) = (val(first + k), val(first + k + 1));
            y0 + (x - x0) / (x1 - x0) * (y1 - y0)
        })
    }

    /// Electrolyte concentration at the collocation points, with interface values from
    /// flux continuity and zero-gradient walls.
    fn sample_ce(&self, st: &P2DState) -> [[f64; 4]; 2] {
        let t = st.t;
        let de: Vec<f64> = (0..self.dx.len())
            .map(|g| {
                let d = electrolyte_diffusivity(st.ce[g], t).unwrap_or(1e-10);
                self.params.bruggeman(d, self.eps[g])
            })
            .collect();
        let face = |g: usize| {
            let w = |k: usize| 2.0 * de[k] * self.area[k] / self.dx[k];
            (w(g) * st.ce[g] + w(g + 1) * st.ce[g + 1]) / (w(g) + w(g + 1))
        };
        let nx = self.dx.len();
        let mut xs = vec![0.0];
        let mut ys = vec![st.ce[0]];
        for g in 0..nx {
            xs.push(self.x[g]);
            ys.push(st.ce[g]);
            if g + 1 < nx && self.el_of[g].map(|e| self.el[e].side) != self.el_of[g + 1].map(|e| self.el[e].side) {
                xs.push(self.x[g] + self.dx[g] / 2.0);
                ys.push(face(g));
            }
        }
        let total = self.x[nx - 1] + self.dx[nx - 1] / 2.0;
        xs.push(total);
        ys.push(st.ce[nx - 1]);
        let at = |x: f64| {
            let k = xs.partition_point(|&v| v < x).clamp(1, xs.len() - 1);
            let (x0, x1) = (xs[k - 1], xs[k]);
            if x1 == x0 {
                return ys[k];
            }
            ys[k - 1] + (x - x0) / (x1 - x0) * (ys[k] - ys[k - 1])
        };
        let g = &self.params.geometry;
        let pos0 = g.thickness_neg + g.thickness_sep;
        [
            std::array::from_fn(|i| at(grid_point(g.thickness_neg, i))),
            std::array::from_fn(|i| at(pos0 + grid_point(g.thickness_pos, i))),
        ]
    }

    fn record(&self, st: &P2DState, current: f64, v: f64, qh: f64, flags: Flags) -> StepRecord {
        let css: Vec<f64> = (0..self.el.len()).map(|e| self.surface(st, e)).collect();
        let per_side = |val: &dyn Fn(usize) -> f64| [self.sample_electrode(Side::Neg, val), self.sample_electrode(Side::Pos, val)];
        let mut qe = [0.0; 2];
        for g in 0..self.dx.len() {
            if let Some(e) = self.el_of[g] {
                qe[self.el[e].side.index()] += self.eps[g] * self.area[g] * self.dx[g] * st.ce[g];
            }
        }
        StepRecord {
            t: st.time,
            current,
            v,
            temperature: st.t,
            soc: self.soc(st),
            ce: self.sample_ce(st),
            css: per_side(&|e| css[e]),
            cs_bulk: per_side(&|e| self.particle_mean(st, e)),
            jn: per_side(&|e| st.jn[e]),
            qe,
            qh,
            flags,
        }
    }

    /// Runs a scenario from a relaxed state at `soc0`.
    pub fn run(&mut self, sc: &Scenario, soc0: f64) -> Result<(Trajectory, P2DState)> {
        sc.validate()?;
        let plan = sc.plan(&self.params)?;
        let mut st = self.initial_state(soc0, sc.t_amb)?;
        let mut tr = Trajectory::new(sc.name.clone(), "p2d", sc.seed);
        match self.run_plan(&mut st, sc, &plan, &mut tr) {
            Ok(term) => tr.termination = term,
            Err(e) if e.is_model_error() => tr.termination = Termination::Failed(e.to_string()),
            Err(e) => return Err(e),
        }
        Ok((tr, st))
    }

    fn run_plan(&mut self, st: &mut P2DState, sc: &Scenario, plan: &[PlannedSegment], tr: &mut Trajectory) -> Result<Termination> {
        let (v_min, v_max) = (self.params.cell.v_min, self.params.cell.v_max);
        let first = match plan.first().map(|s| s.segment) {
            Some(Segment::Current { current, .. }) => current,
            _ => 0.0,
        };
        let (ev, v, flags) = self.evaluate(st, first)?;
        *st = ev;
        let qh = self.heat_rate(&st.jn, &(0..self.el.len()).map(|e| self.surface(st, e)).collect::<Vec<_>>(), first, v);
        tr.records.push(self.record(st, first, v, qh, flags));

        let mut last_i = first;
        let mut cut_phase = None;
        let mut term = Termination::Completed;
        for seg in plan {
            if cut_phase == Some(seg.phase) {
                continue;
            }
            term = Termination::Completed;
            let duration = match seg.segment {
                Segment::Current { duration, .. } | Segment::Voltage { duration, .. } => duration,
            };
            let mut elapsed = 0.0;
            loop {
                let h = match duration {
                    Some(d) => {
                        let left = d - elapsed;
                        if left <= 1e-9 * d.max(1.0) {
                            break;
                        }
                        left.min(sc.dt)
                    }
                    None => {
                        if elapsed >= MAX_OPEN_PHASE {
                            return Err(Error::ModelDegeneracy(format!(
                                "phase {} did not end within {MAX_OPEN_PHASE} s",
                                seg.phase + 1
                            )));
                        }
                        sc.dt
                    }
                };
                let (rec, stop) = match seg.segment {
                    Segment::Current { current, .. } => {
                        let mut rec = self.step(st, current, sc.t_amb, h)?;
                        let cut = (current > 0.0 && rec.v <= v_min) || (current < 0.0 && rec.v >= v_max);
                        if cut {
                            rec.flags |= Flags::CUTOFF;
                        }
                        (rec, cut)
                    }
                    Segment::Voltage { voltage, min_current, .. } => {
                        let one_c = self.params.one_c_current();
                        let snapshot = st.clone();
                        let i = hold_voltage(|i| self.step_voltage(&snapshot, i, sc.t_amb, h), voltage, last_i, one_c)?;
                        if i.abs() < min_current {
                            break;
                        }
                        let mut rec = self.step(st, i, sc.t_amb, h)?;
                        rec.flags |= Flags::CV;
                        (rec, false)
                    }
                };
                last_i = rec.current;
                tr.records.push(rec);
                elapsed += h;
                if stop {
                    cut_phase = Some(seg.phase);
                    term = Termination::CutOff;
                    break;
                }
            }
        }
        Ok(term)
    }
}

/// Weights `(wn, wm, wg)` with `c(1) = wn cN + wm cN-1 + wg c'(1)`, exact for any
/// quadratic profile in `rho` given the two outer shell averages.
fn surface_weights(nr: usize) -> [f64; 3] {
    let h = 1.0 / nr as f64;
    // Shell average of (1 - rho)^k over [1 - (m + 1) h, 1 - m h]; with u = 1 - rho the weight rho^2 is (1 - u)^2.
    let avg = |m: usize, k: i32| {
        let (u0, u1) = (m as f64 * h, (m + 1) as f64 * h);
        let prim = |u: f64| {
            let k = k as f64;
            u.powf(k + 1.0) / (k + 1.0) - 2.0 * u.powf(k + 2.0) / (k + 2.0) + u.powf(k + 3.0) / (k + 3.0)
        };
        let (r0, r1) = (1.0 - u1, 1.0 - u0);
        (prim(u1) - prim(u0)) / ((r1.powi(3) - r0.powi(3)) / 3.0)
    };
    let m = [
        [avg(0, 0), avg(1, 0), 0.0],
        [avg(0, 1), avg(1, 1), -1.0],
        [avg(0, 2), avg(1, 2), 0.0],
    ];
    let rhs = [1.0, 0.0, 0.0];
    let det = |a: &[[f64; 3]; 3]| {
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    };
    let d = det(&m);
    std::array::from_fn(|c| {
        let mut a = m;
        for r in 0..3 {
            a[r][c] = rhs[r];
        }
        det(&a) / d
    })
}

/// Tridiagonal solve (Thomas algorithm) for diagonally dominant systems.
fn thomas(lo: &[f64], di: &[f64], up: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = di.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = up[0] / di[0];
    d[0] = rhs[0] / di[0];
    for i in 1..n {
        let m = di[i] - lo[i] * c[i - 1];
        c[i] = up[i] / m;
        d[i] = (rhs[i] - lo[i] * d[i - 1]) / m;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    d
}

type M2 = [[f64; 2]; 2];

fn inv2(m: &M2) -> Option<M2> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    Some([[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]])
}

fn mul_diag(m: &M2, d: [f64; 2]) -> M2 {
    [[m[0][0] * d[0], m[0][1] * d[1]], [m[1][0] * d[0], m[1][1] * d[1]]]
}

fn mul_vec(m: &M2, v: [f64; 2]) -> [f64; 2] {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

/// Block Thomas algorithm for 2x2 diagonal blocks and diagonal off-diagonal couplings.
fn block_thomas(d: &[M2], lo: &[[f64; 2]], up: &[[f64; 2]], rhs: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    let n = d.len();
    let singular = || Error::Newton { residual: f64::NAN };
    let mut c: Vec<M2> = vec![[[0.0; 2]; 2]; n];
    let mut y = vec![[0.0; 2]; n];
    for i in 0..n {
        let mut m = d[i];
        let mut r = rhs[i];
        if i > 0 {
            for a in 0..2 {
                for b in 0..2 {
                    m[a][b] -= lo[i][a] * c[i - 1][a][b];
                }
                r[a] -= lo[i][a] * y[i - 1][a];
            }
        }
        let inv = inv2(&m).ok_or_else(singular)?;
        c[i] = mul_diag(&inv, up[i]);
        y[i] = mul_vec(&inv, r);
    }
    for i in (0..n - 1).rev() {
        let cx = mul_vec(&c[i], y[i + 1]);
        y[i] = [y[i][0] - cx[0], y[i][1] - cx[1]];
    }
    Ok(y)
}

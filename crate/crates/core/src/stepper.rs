//! Discrete-time engine: parameter refresh, flux solve, inertial updates and
//! outputs, plus scenario execution and constant-voltage holds.
//!
//! Transport coefficients are refreshed from the previous step's
//! concentrations, so every update inside a step is an exact exponential or
//! linear map with frozen coefficients.

use bitflags::bitflags;
use serde::{Deserialize, Serialize};

use crate::corrector::{back_out_ocv, shift_tail, solve_correction, step_shift, CorrectorConfig};
use crate::electrolyte::{
    assemble_interface_matrix, step_qe, ElectrolyteProfile, ElectrolyteState, InterfaceDiffusivities, InterfaceMatrix,
};
use crate::error::{Error, Result};
use crate::init::{initialize_state, solve_window, InitialCharge, StoichiometryWindow};
use crate::ocp::OcpCurve;
use crate::output::{heat_rate, step_temperature, terminal_voltage, VoltageBreakdown};
use crate::params::{electrolyte_diffusivity, CellParameters, JnMode, Side};
use crate::reaction::{jn_profile, ElectrodeInputs, ElectrodeReaction};
use crate::scalar::{lit, to_f64, Scalar};
use crate::scenario::{PlannedSegment, Scenario, Segment};
use crate::solid::{mean_stoichiometry, step_bulk, step_offset, SolidState, CSS_MARGIN, POINTS};
use crate::stabilizer::{SgConfig, Stabilizer};

/// Lowest electrolyte concentration passed to the kinetics, mol/m^3.
pub const CE_FLOOR: f64 = 1.0;

/// Longest a phase without a duration may run before it is abandoned, s.
pub const MAX_OPEN_PHASE: f64 = 100.0 * 3600.0;

/// Terminal-voltage tolerance of the constant-voltage current solve, V.
pub const CV_TOLERANCE: f64 = 1e-4;

/// Secant iterations allowed in the constant-voltage current solve.
pub const CV_MAX_ITER: usize = 20;

/// Default longest internal sub-step, s.
pub const MAX_SUBSTEP: f64 = 1.0;

bitflags! {
    /// Diagnostics attached to each step record.
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
    pub struct Flags: u32 {
        const CSS_CLAMPED = 1;
        const BULK_SATURATED = 1 << 1;
        const DS_CLAMPED = 1 << 2;
        const CE_CLAMPED = 1 << 3;
        const OCP_EXTRAPOLATED = 1 << 4;
        const SMOOTHED = 1 << 5;
        const CORRECTED = 1 << 6;
        const CORRECTION_SATURATED = 1 << 7;
        const CORRECTION_SKIPPED = 1 << 8;
        const SHIFT_LIMITED = 1 << 9;
        const CUTOFF = 1 << 10;
        const CV = 1 << 11;
    }
}

impl Flags {
    /// `|`-joined flag names, empty when no flag is set.
    pub fn names(&self) -> String {
        self.iter_names().map(|(n, _)| n).collect::<Vec<_>>().join("|")
    }

    pub fn parse_names(s: &str) -> Result<Self> {
        let mut f = Flags::empty();
        for name in s.split('|').map(str::trim).filter(|n| !n.is_empty()) {
            f |= Flags::from_name(name).ok_or_else(|| Error::Config(format!("unknown flag `{name}`")))?;
        }
        Ok(f)
    }
}

/// Full dynamic state of the reduced model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellState<S> {
    pub electrolyte: ElectrolyteState<S>,
    pub solid: SolidState<S>,
    /// cell temperature, K
    pub t: S,
    /// applied corrector shifts, mol/m^3
    pub dcs: [S; 2],
    pub step: u64,
    /// elapsed time, s
    pub time: f64,
    /// separator-interface concentrations of the previous evaluation, used to refresh `De`
    pub ce_iface: [S; 2],
}

/// Number of inertial scalars: two inventories, eight bulk, eight offset concentrations and the temperature.
pub const INERTIAL_STATES: usize = 19;

impl<S: Scalar> CellState<S> {
    pub fn new(electrolyte: ElectrolyteState<S>, solid: SolidState<S>, t: S, ce0: S) -> Self {
        Self {
            electrolyte,
            solid,
            t,
            dcs: [S::zero(); 2],
            step: 0,
            time: 0.0,
            ce_iface: [ce0; 2],
        }
    }

    /// The inertial scalars in a fixed order.
    pub fn inertial(&self) -> [S; INERTIAL_STATES] {
        let mut out = [S::zero(); INERTIAL_STATES];
        out[0] = self.electrolyte.qe_neg;
        out[1] = self.electrolyte.qe_pos;
        for s in 0..2 {
            for i in 0..POINTS {
                out[2 + s * POINTS + i] = self.solid.cs_bulk[s][i];
                out[10 + s * POINTS + i] = self.solid.w[s][i];
            }
        }
        out[18] = self.t;
        out
    }
}

/// What a step holds fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Drive<S> {
    /// applied current, A, positive on discharge
    Current(S),
    /// terminal voltage held by solving for the current, V
    Voltage(S),
}

/// Zero-order-hold input of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInput<S> {
    pub drive: Drive<S>,
    /// ambient temperature, K
    pub t_amb: S,
    /// s
    pub dt: S,
}

/// Measured voltage and optional temperature at the end of a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementSample<S> {
    pub v: S,
    pub temperature: Option<S>,
}

/// Measured series for closed-loop runs, linearly interpolated in time.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurements {
    pub t: Vec<f64>,
    pub v: Vec<f64>,
    pub temperature: Option<Vec<f64>>,
}

impl Measurements {
    pub fn new(t: Vec<f64>, v: Vec<f64>, temperature: Option<Vec<f64>>) -> Result<Self> {
        let n = t.len();
        if n == 0 || v.len() != n || temperature.as_ref().is_some_and(|x| x.len() != n) {
            return Err(Error::Config("measurement columns are empty or of unequal length".into()));
        }
        if t.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("measurement times must strictly increase".into()));
        }
        Ok(Self { t, v, temperature })
    }

    /// Measurements taken from a trajectory, e.g. a reference run.
    pub fn from_trajectory(tr: &Trajectory) -> Result<Self> {
        let mut t = Vec::with_capacity(tr.records.len());
        let mut v = Vec::with_capacity(tr.records.len());
        let mut temp = Vec::with_capacity(tr.records.len());
        for r in &tr.records {
            // Zero-length steps can repeat a timestamp; keep the later sample.
            if t.last().is_some_and(|&last| r.t <= last) {
                t.pop();
                v.pop();
                temp.pop();
            }
            t.push(r.t);
            v.push(r.v);
            temp.push(r.temperature);
        }
        Self::new(t, v, Some(temp))
    }

    pub fn sample(&self, t: f64) -> (f64, Option<f64>) {
        let n = self.t.len();
        let k = self.t.partition_point(|&x| x < t);
        let interp = |y: &[f64]| {
            if k == 0 {
                y[0]
            } else if k >= n {
                y[n - 1]
            } else {
                let f = (t - self.t[k - 1]) / (self.t[k] - self.t[k - 1]);
                y[k - 1] + f * (y[k] - y[k - 1])
            }
        };
        (interp(&self.v), self.temperature.as_deref().map(interp))
    }
}

/// Outputs of one step, widened to `f64`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    /// A
    pub current: f64,
    /// V
    pub v: f64,
    /// K
    pub temperature: f64,
    pub soc: f64,
    /// indexed `[side][point]`, mol/m^3
    pub ce: [[f64; POINTS]; 2],
    pub css: [[f64; POINTS]; 2],
    pub cs_bulk: [[f64; POINTS]; 2],
    /// mol/m^2/s
    pub jn: [[f64; POINTS]; 2],
    /// mol
    pub qe: [f64; 2],
    /// W
    pub qh: f64,
    pub flags: Flags,
}

/// Why a run stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Termination {
    /// every phase ran to its end
    Completed,
    /// the last phase stopped at the voltage cut-off
    CutOff,
    /// a model error ended the run (non-strict mode)
    Failed(String),
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Termination::Completed => write!(f, "completed"),
            Termination::CutOff => write!(f, "cut-off"),
            Termination::Failed(m) => write!(f, "failed: {m}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub name: String,
    /// `reduced` or `p2d`
    pub model: String,
    pub seed: Option<u64>,
    pub records: Vec<StepRecord>,
    pub termination: Termination,
}

impl Trajectory {
    pub fn new(name: impl Into<String>, model: impl Into<String>, seed: Option<u64>) -> Self {
        Self {
            name: name.into(),
            model: model.into(),
            seed,
            records: Vec::new(),
            termination: Termination::Completed,
        }
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }

    /// Charge passed, A s, by the trapezoid-free step sum (currents are held over each step).
    pub fn charge_passed(&self) -> f64 {
        self.records.windows(2).map(|w| w[1].current * (w[1].t - w[0].t)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// turn clamps into errors and stop on the first model error
    pub strict: bool,
    /// flux mode for both electrodes, overriding the parameter set
    pub jn_mode: Option<JnMode>,
    /// longest internal sub-step, s; the flux solve is explicit in the
    /// surface concentration and loses stability on steep OCP branches above ~2 s
    pub max_substep: f64,
    pub stabilizer: SgConfig,
    pub corrector: CorrectorConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            strict: false,
            jn_mode: None,
            max_substep: MAX_SUBSTEP,
            stabilizer: SgConfig::default(),
            corrector: CorrectorConfig::default(),
        }
    }
}

/// Everything computed from a state at a given current.
#[derive(Debug, Clone, Copy)]
pub struct Evaluation<S> {
    pub matrix: InterfaceMatrix<S>,
    pub profile: ElectrolyteProfile<S>,
    pub ce: [[S; POINTS]; 2],
    pub css: [[S; POINTS]; 2],
    pub neg: ElectrodeReaction<S>,
    pub pos: ElectrodeReaction<S>,
    pub breakdown: VoltageBreakdown<S>,
    /// W
    pub qh: S,
    pub ce_iface: [S; 2],
    pub flags: Flags,
}

impl<S: Scalar> Evaluation<S> {
    pub fn reaction(&self, side: Side) -> &ElectrodeReaction<S> {
        match side {
            Side::Neg => &self.neg,
            Side::Pos => &self.pos,
        }
    }

    pub fn v(&self) -> S {
        self.breakdown.v
    }
}

/// Reduced-order engine for one cell.
#[derive(Debug, Clone)]
pub struct Engine<S: Scalar> {
    params: CellParameters<S>,
    params64: CellParameters<f64>,
    neg: OcpCurve<S>,
    pos: OcpCurve<S>,
    window: StoichiometryWindow<S>,
    cfg: EngineConfig,
    stabilizer: Stabilizer<S>,
    /// corrector targets awaiting application, mol/m^3
    pending: [S; 2],
}

impl<S: Scalar> Engine<S> {
    /// Engine with the parameter set's OCP curves and its rated capacity window.
    pub fn new(params: CellParameters<S>, cfg: EngineConfig) -> Result<Self> {
        params.validate()?;
        let neg = OcpCurve::resolve(&params.cell.negative_ocp)?;
        let pos = OcpCurve::resolve(&params.cell.positive_ocp)?;
        Self::with_curves(params, neg, pos, cfg)
    }

    pub fn with_curves(params: CellParameters<S>, neg: OcpCurve<S>, pos: OcpCurve<S>, cfg: EngineConfig) -> Result<Self> {
        cfg.corrector.validate()?;
        if !(cfg.max_substep > 0.0) {
            return Err(Error::Config(format!("max_substep = {} s must be positive", cfg.max_substep)));
        }
        let window = solve_window(&params, &neg, &pos, params.cell.v_min, params.cell.v_max, params.cell.capacity_mah)?;
        Ok(Self {
            params64: params.cast(),
            stabilizer: Stabilizer::new(cfg.stabilizer)?,
            params,
            neg,
            pos,
            window,
            cfg,
            pending: [S::zero(); 2],
        })
    }

    pub fn params(&self) -> &CellParameters<S> {
        &self.params
    }

    pub fn window(&self) -> &StoichiometryWindow<S> {
        &self.window
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn curves(&self) -> (&OcpCurve<S>, &OcpCurve<S>) {
        (&self.neg, &self.pos)
    }

    /// Clears the smoothing history and any pending correction.
    pub fn reset(&mut self) {
        self.stabilizer.clear();
        self.pending = [S::zero(); 2];
    }

    pub fn initial_state(&self, init: InitialCharge<S>, t_amb: S) -> Result<CellState<S>> {
        initialize_state(&self.params, &self.window, &self.neg, &self.pos, init, t_amb)
    }

    pub fn soc(&self, st: &CellState<S>) -> S {
        self.window.soc_from_neg(mean_stoichiometry(&self.params, &st.solid, Side::Neg))
    }

    /// Open-circuit voltage at a state of charge of the operating window.
    pub fn ocv(&self, soc: S) -> S {
        self.window.ocv(soc, &self.neg, &self.pos)
    }

    fn mode(&self, side: Side) -> JnMode {
        self.cfg.jn_mode.unwrap_or_else(|| self.params.jn_mode(side))
    }

    /// Solves fluxes, voltage and heat for a state at a given current.
    pub fn evaluate(&self, st: &CellState<S>, current: S) -> Result<Evaluation<S>> {
        let p = &self.params;
        let t = st.t;
        let mut flags = Flags::empty();
        let [ca, cb] = st.ce_iface;
        let half = lit::<S>(0.5);
        let de_sep = p.bruggeman(electrolyte_diffusivity((ca + cb) * half, t)?, p.material.eps_e_sep);
        let de = InterfaceDiffusivities {
            neg: p.bruggeman(electrolyte_diffusivity(ca, t)?, p.material.eps_e_neg),
            sep_left: de_sep,
            sep_right: de_sep,
            pos: p.bruggeman(electrolyte_diffusivity(cb, t)?, p.material.eps_e_pos),
        };
        let matrix = assemble_interface_matrix(p, de)?;
        let mut profile = matrix.solve_profile(p, &st.electrolyte);
        let floor = lit::<S>(CE_FLOOR);
        let (low, at) = profile.min_ce();
        if low < floor {
            if self.cfg.strict {
                return Err(Error::ProfileValidity { ce: to_f64(low), location: at });
            }
            // Depletion happens at a collector, the parabola vertex.
            profile.be_neg = profile.be_neg.max(floor);
            profile.be_pos = profile.be_pos.max(floor);
            profile.validate()?;
            flags |= Flags::CE_CLAMPED;
        }

        let mut ce = [[S::zero(); POINTS]; 2];
        let mut css = [[S::zero(); POINTS]; 2];
        for side in Side::BOTH {
            let s = side.index();
            ce[s] = profile.ce_points(side);
            let (c, clamped) = st.solid.surface(side, p.electrode(side).cs_max);
            css[s] = c;
            if clamped {
                flags |= Flags::CSS_CLAMPED;
            }
        }
        let inputs = |side: Side| {
            let (ae, be) = match side {
                Side::Neg => (profile.ae_neg, profile.be_neg),
                Side::Pos => (profile.ae_pos, profile.be_pos),
            };
            ElectrodeInputs { ce: ce[side.index()], css: css[side.index()], ae, be, t, current }
        };
        let neg = jn_profile(p, Side::Neg, self.mode(Side::Neg), &self.neg, &inputs(Side::Neg))?;
        let pos = jn_profile(p, Side::Pos, self.mode(Side::Pos), &self.pos, &inputs(Side::Pos))?;
        if neg.extrapolated || pos.extrapolated {
            flags |= Flags::OCP_EXTRAPOLATED;
        }
        let breakdown = terminal_voltage(p, &neg, &pos, &profile, t, current);
        let qh = heat_rate(p, &neg, &pos, current, breakdown.v);
        let (a, b) = profile.ce_interfaces();
        Ok(Evaluation { matrix, profile, ce, css, neg, pos, breakdown, qh, ce_iface: [a, b], flags })
    }

    /// Inertial updates over one step from the start-of-step evaluation.
    pub fn advance(&self, st: &CellState<S>, ev: &Evaluation<S>, current: S, t_amb: S, dt: S) -> Result<(CellState<S>, Flags)> {
        let p = &self.params;
        let mut flags = Flags::empty();
        let dynamics = ev.matrix.qe_dynamics(p, current)?;
        let electrolyte = step_qe(&st.electrolyte, &dynamics, dt);

        let mut solid = st.solid;
        for side in Side::BOTH {
            let e = p.electrode(side);
            let s = side.index();
            let jn = &ev.reaction(side).jn;
            for i in 0..POINTS {
                let c = st.solid.cs_bulk[s][i];
                let ds = if self.cfg.strict {
                    p.solid_diffusivity_strict(side, c, st.t)?
                } else {
                    let d = p.solid_diffusivity(side, c, st.t);
                    if d.clamped {
                        flags |= Flags::DS_CLAMPED;
                    }
                    d.value
                };
                let (cb, saturated) = step_bulk(c, jn[i], e.radius, dt, e.cs_max);
                if saturated {
                    flags |= Flags::BULK_SATURATED;
                }
                solid.cs_bulk[s][i] = cb;
                solid.w[s][i] = step_offset(st.solid.w[s][i], jn[i], ds, e.radius, e.ks, dt);
            }
        }

        let c = &self.cfg.corrector;
        let tau = [lit::<S>(c.tau_neg), lit::<S>(c.tau_pos)];
        let dcs: [S; 2] = std::array::from_fn(|s| step_shift(st.dcs[s], self.pending[s], tau[s], dt));
        if dcs.iter().any(|d| *d != S::zero()) {
            let cs_max = [p.material.cs_max_neg, p.material.cs_max_pos];
            let f = shift_fraction(&solid, dcs, cs_max);
            if f < S::one() {
                flags |= Flags::SHIFT_LIMITED;
            }
            for s in 0..2 {
                for i in 0..POINTS {
                    solid.cs_bulk[s][i] += f * dcs[s];
                }
            }
        }

        let next = CellState {
            electrolyte,
            solid,
            t: step_temperature(p, st.t, ev.qh, t_amb, dt),
            dcs,
            step: st.step + 1,
            time: st.time + to_f64(dt),
            ce_iface: ev.ce_iface,
        };
        Ok((next, flags))
    }

    /// Internal sub-step length for an outer step `dt`.
    fn substep(&self, dt: S) -> S {
        dt / lit((to_f64(dt) / self.cfg.max_substep).ceil().max(1.0))
    }

    /// Evaluate-and-advance over `dt`, split into sub-steps no longer than `max_substep`.

    pub fn integrate(&self, st: &CellState<S>, current: S, t_amb: S, dt: S) -> Result<(CellState<S>, Flags)> {
        let n = (to_f64(dt) / self.cfg.max_substep).ceil().max(1.0);
        let h = self.substep(dt);
        let mut cur = *st;
        let mut flags = Flags::empty();
        for _ in 0..n as usize {
            let ev = self.evaluate(&cur, current)?;
            let (next, f) = self.advance(&cur, &ev, current, t_amb, h)?;
            flags |= f | ev.flags;
            cur = next;
        }
        cur.time = st.time + to_f64(dt);
        Ok((cur, flags))
    }

    /// Terminal voltage after one step at `current`, without smoothing or correction.
    pub fn step_voltage(&self, st: &CellState<S>, current: S, t_amb: S, dt: S) -> Result<S> {
        let (next, _) = self.integrate(st, current, t_amb, dt)?;
        Ok(self.evaluate(&next, current)?.breakdown.v)
    }

    /// Current that puts the end-of-step voltage at `target`, by secant iteration from `guess`.
    pub fn cv_hold_current(&self, st: &CellState<S>, target: S, t_amb: S, dt: S, guess: S) -> Result<S> {
        hold_voltage(|i| self.step_voltage(st, i, t_amb, dt), target, guess, self.params.one_c_current())
    }

    /// One full step: evaluate, advance, record, then the smoothing and correction hooks.
    pub fn step(
        &mut self,
        st: &mut CellState<S>,
        input: StepInput<S>,
        measured: Option<MeasurementSample<S>>,
        guess: S,
    ) -> Result<StepRecord> {
        if !(input.dt > S::zero() && input.dt <= lit(crate::scenario::MAX_DT)) {
            return Err(Error::Config(format!("step length {} s outside (0, 10]", input.dt)));
        }
        let (current, cv) = match input.drive {
            Drive::Current(i) => (i, false),
            Drive::Voltage(v) => (self.cv_hold_current(st, v, input.t_amb, input.dt, guess)?, true),
        };
        let (next, mut flags) = self.integrate(st, current, input.t_amb, input.dt)?;
        *st = next;

        let mut ev = self.evaluate(st, current)?;
        let cs_max = [self.params.material.cs_max_neg, self.params.material.cs_max_pos];
        let mut css = ev.css;
        if self.stabilizer.process(&mut st.solid, &mut css, cs_max) {
            flags |= Flags::SMOOTHED;
            ev = self.evaluate(st, current)?;
        }
        flags |= ev.flags;
        if cv {
            flags |= Flags::CV;
        }

        if let Some(m) = measured {
            flags |= self.correct(st, &ev, m, self.substep(input.dt))?;
        }
        Ok(self.record(st, &ev, current, flags))
    }

    /// Sets the pending correction from a measurement and overrides the temperature.
    ///
    /// The correction is solved from the stoichiometry the lag is already heading to,
    /// so a shift still in flight is not requested twice.
    fn correct(&mut self, st: &mut CellState<S>, ev: &Evaluation<S>, m: MeasurementSample<S>, h: S) -> Result<Flags> {
        let c = self.cfg.corrector;
        let mut flags = Flags::empty();
        if !c.enabled {
            return Ok(flags);
        }
        self.pending = [S::zero(); 2];
        if (ev.breakdown.v - m.v).abs() > lit(c.threshold) {
            let p = &self.params;
            let ocv = back_out_ocv(p, m.v, &ev.breakdown, &ev.neg, &ev.pos, st.t);
            let tail_neg = shift_tail(st.dcs[0], lit(c.tau_neg), h);
            let tail_pos = shift_tail(st.dcs[1], lit(c.tau_pos), h);
            let y_neg = (ev.css[0][0] + tail_neg) / p.material.cs_max_neg;
            let y_pos = (ev.css[1][POINTS - 1] + tail_pos) / p.material.cs_max_pos;
            match solve_correction(p, ocv, y_neg, y_pos, &self.neg, &self.pos, &c) {
                Ok(corr) => {
                    self.pending = [p.material.cs_max_neg * corr.dy_neg, p.material.cs_max_pos * corr.dy_pos];
                    flags |= Flags::CORRECTED;
                    if corr.saturated {
                        flags |= Flags::CORRECTION_SATURATED;
                    }
                }
                Err(Error::CorrectionOutOfRange) if !self.cfg.strict => flags |= Flags::CORRECTION_SKIPPED,
                Err(e) => return Err(e),
            }
        }
        if c.override_temperature {
            if let Some(t) = m.temperature {
                st.t = t;
            }
        }
        Ok(flags)
    }

    /// Record of a state and its evaluation.
    pub fn record(&self, st: &CellState<S>, ev: &Evaluation<S>, current: S, flags: Flags) -> StepRecord {
        let wide = |a: &[[S; POINTS]; 2]| a.map(|r| r.map(to_f64));
        StepRecord {
            t: st.time,
            current: to_f64(current),
            v: to_f64(ev.breakdown.v),
            temperature: to_f64(st.t),
            soc: to_f64(self.soc(st)),
            ce: wide(&ev.ce),
            css: wide(&ev.css),
            cs_bulk: wide(&st.solid.cs_bulk),
            jn: [ev.neg.jn.map(to_f64), ev.pos.jn.map(to_f64)],
            qe: [to_f64(st.electrolyte.qe_neg), to_f64(st.electrolyte.qe_pos)],
            qh: to_f64(ev.qh),
            flags,
        }
    }

    /// Runs a scenario from `st`, leaving the final state in `st`.
    ///
    /// Model errors end the run with [`Termination::Failed`] unless the engine is strict.
    pub fn run(&mut self, st: &mut CellState<S>, sc: &Scenario, measured: Option<&Measurements>) -> Result<Trajectory> {
        sc.validate()?;
        let plan = sc.plan(&self.params64)?;
        self.reset();
        let mut tr = Trajectory::new(sc.name.clone(), "reduced", sc.seed);
        match self.run_plan(st, sc, &plan, measured, &mut tr) {
            Ok(term) => tr.termination = term,
            Err(e) if !self.cfg.strict && e.is_model_error() => tr.termination = Termination::Failed(e.to_string()),
            Err(e) => return Err(e),
        }
        Ok(tr)
    }

    fn run_plan(
        &mut self,
        st: &mut CellState<S>,
        sc: &Scenario,
        plan: &[PlannedSegment],
        measured: Option<&Measurements>,
        tr: &mut Trajectory,
    ) -> Result<Termination> {
        let t_amb = lit::<S>(sc.t_amb);
        let (v_min, v_max) = (self.params.cell.v_min, self.params.cell.v_max);
        let first = match plan.first().map(|s| s.segment) {
            Some(Segment::Current { current, .. }) => lit::<S>(current),
            _ => S::zero(),
        };
        let ev = self.evaluate(st, first)?;
        tr.records.push(self.record(st, &ev, first, ev.flags));

        let sample = |t: f64| {
            measured.map(|m| {
                let (v, temp) = m.sample(t);
                MeasurementSample { v: lit::<S>(v), temperature: temp.map(lit::<S>) }
            })
        };
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
                let dt = lit::<S>(h);
                let (rec, stop) = match seg.segment {
                    Segment::Current { current, .. } => {
                        let i = lit::<S>(current);
                        let input = StepInput { drive: Drive::Current(i), t_amb, dt };
                        let mut rec = self.step(st, input, sample(st.time + h), last_i)?;
                        last_i = i;
                        let cut = (i > S::zero() && rec.v <= to_f64(v_min)) || (i < S::zero() && rec.v >= to_f64(v_max));
                        if cut {
                            rec.flags |= Flags::CUTOFF;
                        }
                        (rec, cut)
                    }
                    Segment::Voltage { voltage, min_current, .. } => {
                        let i = self.cv_hold_current(st, lit(voltage), t_amb, dt, last_i)?;
                        if to_f64(i.abs()) < min_current {
                            break;
                        }
                        let input = StepInput { drive: Drive::Current(i), t_amb, dt };
                        let mut rec = self.step(st, input, sample(st.time + h), i)?;
                        rec.flags |= Flags::CV;
                        last_i = i;
                        (rec, false)
                    }
                };
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

/// Secant solve for the current whose end-of-step voltage `v_of(i)` equals `target`.
pub(crate) fn hold_voltage<S: Scalar>(v_of: impl Fn(S) -> Result<S>, target: S, guess: S, one_c: S) -> Result<S> {
    // Solve well below the acceptance tolerance so a slow taper still moves the current.
    let accept = lit::<S>(CV_TOLERANCE);
    let tol = lit::<S>(1e-3 * CV_TOLERANCE).max(lit::<S>(16.0) * S::epsilon() * target.abs());
    let max_move = lit::<S>(2.0) * one_c;
    let f = |i: S| v_of(i).map(|v| v - target);
    let (mut i0, mut f0) = (guess, f(guess)?);
    if f0.abs() < tol {
        return Ok(i0);
    }
    // Voltage falls as the current rises, so a high voltage needs more discharge current.
    let probe = lit::<S>(0.01) * one_c;
    let mut i1 = if f0 > S::zero() { i0 + probe } else { i0 - probe };
    let mut f1 = f(i1)?;
    for _ in 0..CV_MAX_ITER {
        if f1.abs() < tol {
            return Ok(i1);
        }
        let d = f1 - f0;
        if d == S::zero() {
            break;
        }
        let step = (f1 * (i1 - i0) / d).max(-max_move).min(max_move);
        i0 = i1;
        f0 = f1;
        i1 -= step;
        f1 = f(i1)?;
    }
    if f1.abs() < accept {
        return Ok(i1);
    }
    Err(Error::CvSolve { target: to_f64(target), residual: to_f64(f1) })
}

/// Errors that end a non-strict run gracefully rather than aborting it.
/// Largest `f <= 1` keeping every shifted bulk concentration inside the physical range.
fn shift_fraction<S: Scalar>(solid: &SolidState<S>, dcs: [S; 2], cs_max: [S; 2]) -> S {
    let m = lit::<S>(CSS_MARGIN);
    let mut f = S::one();
    for s in 0..2 {
        let d = dcs[s];
        for &c in &solid.cs_bulk[s] {
            if d > S::zero() && c + d > cs_max[s] - m {
                f = f.min((cs_max[s] - m - c) / d);
            } else if d < S::zero() && c + d < m {
                f = f.min((m - c) / d);
            }
        }
    }
    f.max(S::zero())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::electrolyte::ElectrolyteState;
    use crate::output::step_temperature;
    use crate::scenario::Phase;
    use crate::solid::solid_inventory;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn engine(name: &str) -> Engine<f64> {
        Engine::new(CellParameters::preset(name).unwrap(), EngineConfig::default()).unwrap()
    }

    fn input(i: f64, dt: f64) -> StepInput<f64> {
        StepInput { drive: Drive::Current(i), t_amb: 298.0, dt }
    }

    #[test]
    fn rest_is_a_fixed_point() {
        let mut e = engine("ncm523");
        let st0 = e.initial_state(InitialCharge::Soc(0.6), 298.0).unwrap();
        let mut st = st0;
        let rec = e.step(&mut st, input(0.0, 1.0), None, 0.0).unwrap();
        for (a, b) in st.inertial().iter().zip(st0.inertial()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
        assert_relative_eq!(rec.v, e.ocv(0.6), epsilon = 1e-9);
        assert_relative_eq!(rec.soc, 0.6, epsilon = 1e-12);
        assert_eq!(st.step, 1);
        assert_eq!(st.time, 1.0);
    }

    #[test]
    fn nineteen_inertial_states() {
        let e = engine("lfpo");
        let st = e.initial_state(InitialCharge::Soc(0.5), 298.0).unwrap();
        assert_eq!(st.inertial().len(), 19);
        assert_eq!(st.inertial()[18], 298.0);
    }

    #[test]
    fn frozen_coefficient_semigroup() {
        // With coefficients frozen at one evaluation, two half steps of the
        // exponential updates equal one full step.
        let e = engine("ncm523");
        let st = e.initial_state(InitialCharge::Soc(0.8), 298.0).unwrap();
        let ev = e.evaluate(&st, 1.7).unwrap();
        let (full, _) = e.advance(&st, &ev, 1.7, 298.0, 1.0).unwrap();
        let (half, _) = e.advance(&st, &ev, 1.7, 298.0, 0.5).unwrap();
        let (two, _) = e.advance(&half, &ev, 1.7, 298.0, 0.5).unwrap();
        assert_relative_eq!(two.electrolyte.qe_neg, full.electrolyte.qe_neg, max_relative = 1e-12);
        assert_relative_eq!(two.electrolyte.qe_pos, full.electrolyte.qe_pos, max_relative = 1e-12);
        assert_relative_eq!(two.t, full.t, max_relative = 1e-12);
        for s in 0..2 {
            for i in 0..POINTS {
                assert_relative_eq!(two.solid.cs_bulk[s][i], full.solid.cs_bulk[s][i], max_relative = 1e-12);
            }
        }
        // The offset reads Ds from the half-step bulk value, so its maps are checked with Ds fixed.
        let w = step_offset(step_offset(-50.0, 1e-5, 2e-14, 7.5e-6, 1.0 / 28.0, 0.5), 1e-5, 2e-14, 7.5e-6, 1.0 / 28.0, 0.5);
        assert_relative_eq!(w, step_offset(-50.0, 1e-5, 2e-14, 7.5e-6, 1.0 / 28.0, 1.0), max_relative = 1e-12);
        let t = step_temperature(e.params(), 300.0, 2.0, 298.0, 0.5);
        assert_relative_eq!(
            step_temperature(e.params(), t, 2.0, 298.0, 0.5),
            step_temperature(e.params(), 300.0, 2.0, 298.0, 1.0),
            max_relative = 1e-12
        );
    }

    #[test]
    fn one_c_discharge_reaches_cutoff_near_capacity() {
        let mut e = engine("ncm523");
        let mut st = e.initial_state(InitialCharge::Soc(1.0), 298.0).unwrap();
        let sc = Scenario::standard(1, &CellParameters::preset("ncm523").unwrap()).unwrap();
        let tr = e.run(&mut st, &sc, None).unwrap();
        assert_eq!(tr.termination, Termination::CutOff);
        let last = tr.last().unwrap();
        assert!(last.v <= e.params().cell.v_min);
        assert!(last.flags.contains(Flags::CUTOFF));
        assert!(tr.records.windows(2).all(|w| w[1].t > w[0].t));
        // Kinetic polarization near the empty end stops 1C a few percent early.
        let mah = tr.charge_passed() / 3.6;
        let qc = e.params().cell.capacity_mah;
        assert!(mah < qc && mah > 0.94 * qc, "{mah} mAh vs {qc}");
    }

    #[test]
    fn low_rate_discharge_delivers_rated_capacity() {
        let p = CellParameters::preset("ncm523").unwrap();
        let mut e = Engine::new(p.clone(), EngineConfig::default()).unwrap();
        let mut st = e.initial_state(InitialCharge::Soc(1.0), 298.0).unwrap();
        let mut sc = Scenario::standard(1, &p).unwrap();
        sc.phases = vec![crate::scenario::Phase::Cc { current: None, c_rate: Some(0.04), duration: None }];
        sc.dt = 10.0;
        let tr = e.run(&mut st, &sc, None).unwrap();
        assert_eq!(tr.termination, Termination::CutOff);
        let mah = tr.charge_passed() / 3.6;
        assert!((mah - p.cell.capacity_mah).abs() < 0.02 * p.cell.capacity_mah, "{mah}");
    }

    #[test]
    fn cccv_tapers() {
        let p = CellParameters::preset("ncm523").unwrap();
        let mut e = Engine::new(p.clone(), EngineConfig::default()).unwrap();
        let mut st = e.initial_state(InitialCharge::Soc(0.0), 298.0).unwrap();
        let sc = Scenario::standard(4, &p).unwrap();
        let tr = e.run(&mut st, &sc, None).unwrap();
        assert_eq!(tr.termination, Termination::Completed);
        let cv: Vec<&StepRecord> = tr.records.iter().filter(|r| r.flags.contains(Flags::CV)).collect();
        assert!(cv.len() > 10);
        for r in &cv {
            assert!((r.v - p.cell.v_max).abs() < 1e-4);
            assert!(r.current < 0.0);
        }
        assert!(cv.windows(2).all(|w| w[1].current.abs() < w[0].current.abs()));
        assert!(cv.last().unwrap().current.abs() < 0.06 * p.one_c_current());
    }

    #[test]
    fn cv_current_at_present_voltage_is_unchanged() {
        let e = engine("ncm523");
        let st = e.initial_state(InitialCharge::Soc(0.5), 298.0).unwrap();
        let v = e.step_voltage(&st, 1.0, 298.0, 1.0).unwrap();
        assert_eq!(e.cv_hold_current(&st, v, 298.0, 1.0, 1.0).unwrap(), 1.0);
        let hi = e.step_voltage(&st, -2.0, 298.0, 1.0).unwrap();
        let lo = e.step_voltage(&st, -1.0, 298.0, 1.0).unwrap();
        assert!(hi > lo);
        let i = e.cv_hold_current(&st, (hi + lo) / 2.0, 298.0, 1.0, -1.0).unwrap();
        assert!(i < -1.0 && i > -2.0);
    }

    #[test]
    fn deterministic_runs() {
        let p = CellParameters::preset("ncm811").unwrap();
        let sc = Scenario::standard(6, &p).unwrap();
        let run = || {
            let mut e = Engine::new(p.clone(), EngineConfig::default()).unwrap();
            let mut st = e.initial_state(InitialCharge::Soc(1.0), 298.0).unwrap();
            e.run(&mut st, &sc, None).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn perfect_measurements_change_nothing() {
        let p = CellParameters::preset("ncm523").unwrap();
        let sc = Scenario::standard(5, &p).unwrap();
        let mut e = Engine::new(p.clone(), EngineConfig::default()).unwrap();
        let mut st = e.initial_state(InitialCharge::Soc(0.7), 298.0).unwrap();
        let open = e.run(&mut st, &sc, None).unwrap();
        let m = Measurements::from_trajectory(&open).unwrap();
        let mut st = e.initial_state(InitialCharge::Soc(0.7), 298.0).unwrap();
        let closed = e.run(&mut st, &sc, Some(&m)).unwrap();
        assert_eq!(open.records, closed.records);
    }

    #[test]
    fn active_correction_shrinks_the_error() {
        let p = CellParameters::preset("ncm523").unwrap();
        let one_c = p.one_c_current();
        let sc = Scenario {
            phases: vec![Phase::Cc { current: Some(one_c), c_rate: None, duration: Some(300.0) }],
            ..Scenario::standard(1, &p).unwrap()
        };
        let mut e = Engine::new(p, EngineConfig::default()).unwrap();
        let mut st = e.initial_state(InitialCharge::Soc(0.8), 298.0).unwrap();
        let truth = e.run(&mut st, &sc, None).unwrap();
        let m = Measurements::from_trajectory(&truth).unwrap();
        let mut st = e.initial_state(InitialCharge::Soc(0.5), 298.0).unwrap();
        let closed = e.run(&mut st, &sc, Some(&m)).unwrap();
        let err: Vec<f64> = truth.records.iter().zip(&closed.records).map(|(a, b)| (a.v - b.v).abs()).collect();
        let active: Vec<bool> = closed.records.iter().map(|r| r.flags.contains(Flags::CORRECTED)).collect();
        let mut run = 0;
        let mut checked = 0;
        for k in 1..err.len() {
            run = if active[k] { run + 1 } else { 0 };
            if run >= 5 {
                assert!(err[k] <= err[k - 1], "error grew at step {k}: {} -> {}", err[k - 1], err[k]);
                checked += 1;
            }
        }
        assert!(checked >= 5);
        assert!(err[err.len() - 1] < 0.02);
    }

    #[test]
    fn measurement_interpolation() {
        let m = Measurements::new(vec![0.0, 10.0], vec![4.0, 3.0], None).unwrap();
        assert_eq!(m.sample(5.0), (3.5, None));
        assert_eq!(m.sample(-1.0).0, 4.0);
        assert_eq!(m.sample(11.0).0, 3.0);
        assert!(Measurements::new(vec![0.0, 0.0], vec![4.0, 3.0], None).is_err());
    }

    #[test]
    fn flag_names_round_trip() {
        let f = Flags::CUTOFF | Flags::SMOOTHED;
        assert_eq!(f.names(), "SMOOTHED|CUTOFF");
        assert_eq!(Flags::parse_names(&f.names()).unwrap(), f);
        assert_eq!(Flags::parse_names("").unwrap(), Flags::empty());
        assert!(Flags::parse_names("BOGUS").is_err());
    }

    #[test]
    fn shift_is_limited_at_the_bounds() {
        let solid = SolidState::uniform(100.0, 4.9e4);
        let f = shift_fraction(&solid, [-200.0, 500.0], [3.11e4, 4.97e4]);
        assert_relative_eq!(f, 99.0 / 200.0);
        assert_eq!(shift_fraction(&solid, [10.0, -10.0], [3.11e4, 4.97e4]), 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn electrolyte_inventory_conserved(currents in proptest::collection::vec(-2.0f64..2.0, 20..60)) {
            let mut e = engine("ncm811");
            let mut st = e.initial_state(InitialCharge::Soc(0.5), 298.0).unwrap();
            let q0 = ElectrolyteState::initial(e.params()).total();
            let inv0 = solid_inventory(e.params(), &st.solid, Side::Neg) + solid_inventory(e.params(), &st.solid, Side::Pos);
            for i in currents {
                let rec = e.step(&mut st, input(i * 1.7, 1.0), None, 0.0).unwrap();
                prop_assert!(rec.v.is_finite());
            }
            prop_assert!((st.electrolyte.total() - q0).abs() < 1e-12 * q0);
            let inv = solid_inventory(e.params(), &st.solid, Side::Neg) + solid_inventory(e.params(), &st.solid, Side::Pos);
            prop_assert!((inv - inv0).abs() < 1e-3 * inv0);
        }
    }
}

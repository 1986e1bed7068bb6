//! Command-line front end.
//!
//! Exit codes: 0 on a normal run (a voltage cut-off included), 1 when the model
//! fails in strict mode, 2 on usage, configuration or file errors.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::init::{soc_ocv_curve, InitialCharge, SOC_OCV_POINTS};
use crate::io;
use crate::metrics::{compare_trajectories, Field};
use crate::oracle::{P2DMesh, P2D};
use crate::params::{CellParameters, JnMode};
use crate::scenario::Scenario;
use crate::stepper::{Engine, EngineConfig, Termination};

pub const EXIT_MODEL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "cellsim", version, about = "Reduced-order Li-ion cell simulator with a full-order reference solver")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the reduced-order model over a scenario.
    Simulate(SimulateArgs),
    /// Run the full-order reference model over a scenario.
    P2d(P2dArgs),
    /// Compare a model trajectory against a reference trajectory.
    Compare(CompareArgs),
    /// Write the SOC-OCV table of a cell.
    Socv(SocvArgs),
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct CellSource {
    /// parameter file (TOML)
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// built-in parameter set: lfpo, ncm523 or ncm811
    #[arg(long)]
    pub preset: Option<String>,
}

impl CellSource {
    fn load(&self) -> Result<CellParameters<f64>> {
        match (&self.params, &self.preset) {
            (Some(path), _) => CellParameters::from_file(path),
            (None, Some(name)) => CellParameters::preset(name),
            (None, None) => Err(Error::Config("one of --params or --preset is required".into())),
        }
    }
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct ScenarioSource {
    /// scenario file (TOML)
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// built-in scenario number, 1 to 8
    #[arg(long)]
    pub standard: Option<usize>,
}

impl ScenarioSource {
    fn load(&self, p: &CellParameters<f64>) -> Result<Scenario> {
        match (&self.scenario, self.standard) {
            (Some(path), _) => Scenario::from_file(path),
            (None, Some(n)) => Scenario::standard(n, p),
            (None, None) => Err(Error::Config("one of --scenario or --standard is required".into())),
        }
    }
}

#[derive(Debug, Args)]
#[group(multiple = false)]
pub struct Start {
    /// initial state of charge; defaults to the scenario's
    #[arg(long)]
    pub soc0: Option<f64>,
    /// initial open-circuit voltage, V
    #[arg(long)]
    pub ocv0: Option<f64>,
}

impl Start {
    fn resolve(&self, sc: &Scenario) -> Result<InitialCharge<f64>> {
        match (self.soc0, self.ocv0, sc.soc0) {
            (Some(s), _, _) => Ok(InitialCharge::Soc(s)),
            (None, Some(v), _) => Ok(InitialCharge::Ocv(v)),
            (None, None, Some(s)) => Ok(InitialCharge::Soc(s)),
            _ => Err(Error::Config("no initial charge: pass --soc0 or --ocv0".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum JnArg {
    Analytic,
    Uniform,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub cell: CellSource,
    #[command(flatten)]
    pub scenario: ScenarioSource,
    #[command(flatten)]
    pub start: Start,
    /// output CSV, `-` for stdout
    #[arg(long, default_value = "-")]
    pub out: PathBuf,
    /// correct the model from measured voltage
    #[arg(long, requires = "measurements")]
    pub closed_loop: bool,
    /// measurement CSV `t_s, V_measured[, T_measured]`, or a trajectory CSV
    #[arg(long)]
    pub measurements: Option<PathBuf>,
    /// flux distribution for both electrodes, overriding the parameter set
    #[arg(long, value_enum)]
    pub jn_mode: Option<JnArg>,
    /// stop with exit code 1 on the first model error
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct P2dArgs {
    #[command(flatten)]
    pub cell: CellSource,
    #[command(flatten)]
    pub scenario: ScenarioSource,
    #[command(flatten)]
    pub start: Start,
    #[arg(long, default_value = "-")]
    pub out: PathBuf,
    /// control volumes in the negative electrode, separator and positive electrode
    #[arg(long, num_args = 3, value_names = ["NEG", "SEP", "POS"])]
    pub cells: Option<Vec<usize>>,
    /// radial shells per particle
    #[arg(long)]
    pub shells: Option<usize>,
    /// exit with code 1 if the run ends on a model error
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// reference trajectory CSV
    pub reference: PathBuf,
    /// model trajectory CSV
    pub model: PathBuf,
    /// comma-separated fields; all when omitted
    #[arg(long, value_delimiter = ',')]
    pub fields: Vec<String>,
    /// cell used to turn concentrations into stoichiometries
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    /// also write the report as CSV
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SocvArgs {
    #[command(flatten)]
    pub cell: CellSource,
    #[arg(long, default_value_t = SOC_OCV_POINTS)]
    pub points: usize,
    #[arg(long, default_value = "-")]
    pub out: PathBuf,
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_model_error() {
                EXIT_MODEL
            } else {
                EXIT_USAGE
            }
        }
    }
}

fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Simulate(a) => cmd_simulate(a),
        Command::P2d(a) => cmd_p2d(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Socv(a) => cmd_socv(a),
    }
}

fn finish(term: &Termination, strict: bool) -> i32 {
    match term {
        Termination::Failed(msg) => {
            eprintln!("run ended early: {msg}");
            if strict {
                EXIT_MODEL
            } else {
                0
            }
        }
        _ => 0,
    }
}

fn load_measurements(path: &Path) -> Result<crate::stepper::Measurements> {
    // A trajectory file is recognised by its comment header.
    let head = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if head.starts_with('#') {
        crate::stepper::Measurements::from_trajectory(&io::load_trajectory(path)?)
    } else {
        io::read_measurements(path)
    }
}

pub fn cmd_simulate(a: SimulateArgs) -> Result<i32> {
    let p = a.cell.load()?;
    let sc = a.scenario.load(&p)?;
    let init = a.start.resolve(&sc)?;
    let measured = match (&a.measurements, a.closed_loop) {
        (Some(path), true) => Some(load_measurements(path)?),
        (Some(_), false) => return Err(Error::Config("--measurements needs --closed-loop".into())),
        _ => None,
    };
    let cfg = EngineConfig {
        strict: a.strict,
        jn_mode: a.jn_mode.map(|m| match m {
            JnArg::Analytic => JnMode::Analytic,
            JnArg::Uniform => JnMode::Uniform,
        }),
        ..EngineConfig::default()
    };
    let mut e = Engine::new(p, cfg)?;
    let mut st = e.initial_state(init, sc.t_amb)?;
    let tr = e.run(&mut st, &sc, measured.as_ref())?;
    io::with_output(&a.out, |w| io::write_trajectory(w, &tr))?;
    Ok(finish(&tr.termination, a.strict))
}

pub fn cmd_p2d(a: P2dArgs) -> Result<i32> {
    let p = a.cell.load()?;
    let sc = a.scenario.load(&p)?;
    let init = a.start.resolve(&sc)?;
    let mut mesh = P2DMesh::default();
    if let Some(c) = &a.cells {
        (mesh.n_neg, mesh.n_sep, mesh.n_pos) = (c[0], c[1], c[2]);
    }
    if let Some(n) = a.shells {
        mesh.n_r = n;
    }
    let mut o = P2D::new(p, mesh)?;
    let soc0 = match init {
        InitialCharge::Soc(s) => s,
        InitialCharge::Ocv(v) => o.soc_from_ocv(v)?,
    };
    let (tr, _) = o.run(&sc, soc0)?;
    io::with_output(&a.out, |w| io::write_trajectory(w, &tr))?;
    Ok(finish(&tr.termination, a.strict))
}

pub fn cmd_compare(a: CompareArgs) -> Result<i32> {
    let reference = io::load_trajectory(&a.reference)?;
    let model = io::load_trajectory(&a.model)?;
    let fields = if a.fields.is_empty() {
        Field::ALL.to_vec()
    } else {
        a.fields.iter().map(|f| Field::parse(f)).collect::<Result<Vec<_>>>()?
    };
    let cs_max = match (&a.params, &a.preset) {
        (Some(path), _) => Some(CellParameters::<f64>::from_file(path)?),
        (None, Some(name)) => Some(CellParameters::<f64>::preset(name)?),
        _ => None,
    }
    .map(|p| [p.material.cs_max_neg, p.material.cs_max_pos]);
    let needs_cs_max = fields.iter().any(|f| matches!(f, Field::Xs | Field::Xss));
    let cs_max = match cs_max {
        Some(c) => c,
        None if needs_cs_max => return Err(Error::Config("stoichiometry fields need --params or --preset".into())),
        // Unused by the concentration and scalar fields.
        None => [1.0, 1.0],
    };
    let rep = compare_trajectories(&reference, &model, &fields, cs_max)?;
    println!("{}", rep.to_table());
    if let Some(out) = &a.out {
        io::with_output(out, |w| io::write_report(w, &rep))?;
    }
    Ok(0)
}

pub fn cmd_socv(a: SocvArgs) -> Result<i32> {
    let p = a.cell.load()?;
    let e = Engine::new(p, EngineConfig::default())?;
    let (neg, pos) = e.curves();
    let tab = soc_ocv_curve(e.window(), neg, pos, a.points);
    io::with_output(&a.out, |w| io::write_socv(w, &tab))?;
    Ok(0)
}

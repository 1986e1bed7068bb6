use std::path::PathBuf;

use thiserror::Error;

use crate::params::Side;

#[derive(Debug, Error)]
pub enum Error {
    #[error("stoichiometry {y} is outside [0, 1]")]
    Domain { y: f64 },
    #[error("electrolyte diffusivity undefined at T = {t_k} K, ce = {ce} mol/m3 (margin {margin} K < 5 K)")]
    TemperatureOutOfRange { t_k: f64, ce: f64, margin: f64 },
    #[error("degenerate parameter: {0}")]
    DegenerateParameter(String),
    #[error("interface matrix is singular (condition {cond:e})")]
    SingularGeometry { cond: f64 },
    #[error("electrolyte profile invalid: ce = {ce} mol/m3 at {location}")]
    ProfileValidity { ce: f64, location: &'static str },
    #[error("model degeneracy: {0}")]
    ModelDegeneracy(String),
    #[error("kinetics degeneracy on the {side:?} electrode: k2 = {k2}")]
    KineticsDegeneracy { side: Side, k2: f64 },
    #[error("potential {target} V is not bracketed by [{lo}, {hi}] V")]
    NoSolution { target: f64, lo: f64, hi: f64 },
    #[error("capacity {qc_mah} mAh needs a {side:?} window of {width:.4} (must be < 1)")]
    Capacity { qc_mah: f64, side: Side, width: f64 },
    #[error("stoichiometry window not found: {0}")]
    Window(String),
    #[error("initialization: {0}")]
    Init(String),
    #[error("constant-voltage solve did not converge (target {target} V, last residual {residual:e} V)")]
    CvSolve { target: f64, residual: f64 },
    #[error("correction out of range")]
    CorrectionOutOfRange,
    #[error("P2D Newton iteration failed to converge (residual {residual:e})")]
    Newton { residual: f64 },
    #[error("invalid OCP table: {0}")]
    OcpTable(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Whether the error comes from the model rather than from inputs or files.
    pub fn is_model_error(&self) -> bool {
        !matches!(self, Error::Config(_) | Error::Init(_) | Error::Io { .. } | Error::Csv(_) | Error::Toml(_) | Error::OcpTable(_))
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

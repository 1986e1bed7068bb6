//! Reduced-order electrochemical lithium-ion cell model.
//!
//! The engine is generic over the scalar type ([`Scalar`], `f32` or `f64`);
//! the full-order reference solver in [`oracle`] runs in `f64`.

pub mod cli;
pub mod corrector;
pub mod electrolyte;
pub mod error;
pub mod init;
pub mod io;
pub mod metrics;
pub mod ocp;
pub mod oracle;
pub mod output;
pub mod params;
pub mod reaction;
pub mod scalar;
pub mod scenario;
pub mod solid;
pub mod stabilizer;
pub mod stepper;

pub use error::{Error, Result};
pub use params::{CellParameters, JnMode, Side};
pub use scalar::Scalar;
pub use scenario::Scenario;
pub use stepper::{CellState, Engine, EngineConfig, Flags, StepRecord, Termination, Trajectory};

pub type Engine64 = Engine<f64>;
pub type Engine32 = Engine<f32>;
pub type Params64 = CellParameters<f64>;
pub type Params32 = CellParameters<f32>;

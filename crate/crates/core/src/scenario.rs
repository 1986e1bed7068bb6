//! Operating scenarios: ordered phases of current, voltage hold, rest and
//! tabulated current profiles.
//!
//! Currents are positive for discharge. Every phase ends early when the
//! terminal voltage crosses the cut-off in the direction the current drives it.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::CellParameters;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Phase {
    /// Constant current, given in A or as a C-rate.
    Cc {
        #[serde(default)]
        current: Option<f64>,
        #[serde(default)]
        c_rate: Option<f64>,
        /// runs to cut-off when absent
        #[serde(default)]
        duration: Option<f64>,
    },
    /// Constant voltage hold until the current magnitude falls below a floor.
    Cv {
        voltage: f64,
        #[serde(default)]
        min_current: Option<f64>,
        /// floor as a C-rate, default 1/20
        #[serde(default)]
        min_c_rate: Option<f64>,
        #[serde(default)]
        duration: Option<f64>,
    },
    Rest { duration: f64 },
    /// Piecewise-constant current; each row starts a segment, the last row ends the profile.
    Profile {
        #[serde(default)]
        file: Option<PathBuf>,
        #[serde(default)]
        points: Vec<[f64; 2]>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    /// step length, s
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// ambient temperature, K
    #[serde(default = "default_t_amb")]
    pub t_amb: f64,
    /// suggested initial state of charge
    #[serde(default)]
    pub soc0: Option<f64>,
    /// seed of a generated random profile, recorded in outputs
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(rename = "phase")]
    pub phases: Vec<Phase>,
}

fn default_dt() -> f64 {
    1.0
}

fn default_t_amb() -> f64 {
    298.0
}

/// One executable piece of a scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Segment {
    Current { current: f64, duration: Option<f64> },
    Voltage { voltage: f64, min_current: f64, duration: Option<f64> },
}

/// Segment tagged with the phase it came from, so a cut-off can skip the rest of the phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannedSegment {
    pub phase: usize,
    pub segment: Segment,
}

/// Longest supported step, s.
pub const MAX_DT: f64 = 10.0;

/// Names of the standard scenarios, indexed from 1.
pub const STANDARD: [&str; 8] = [
    "cc-1c-298k",
    "cc-2c-298k",
    "cc-4c-298k",
    "cccv-1c-298k",
    "acc-298k",
    "rc-298k",
    "cc-1c-273k",
    "cc-1c-313k",
];

/// Signed C-rates of the alternating profile, 100 s each.
pub const ACC_RATES: [f64; 10] = [2.0, -1.0, 1.0, -1.5, 2.0, -0.5, 1.0, -2.0, 0.5, -0.5];

/// Default seed of the random-current scenario.
pub const RC_SEED: u64 = 20_240_917;

impl Scenario {
    pub fn from_toml_str(src: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut s: Scenario = toml::from_str(src)?;
        if let Some(dir) = base_dir {
            for ph in &mut s.phases {
                if let Phase::Profile { file: Some(f), .. } = ph {
                    if f.is_relative() {
                        *f = dir.join(&*f);
                    }
                }
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&src, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt <= MAX_DT) {
            return Err(Error::Config(format!("dt = {} s must lie in (0, {MAX_DT}]", self.dt)));
        }
        if !(self.t_amb > 0.0) {
            return Err(Error::Config(format!("ambient temperature {} K", self.t_amb)));
        }
        if self.phases.is_empty() {
            return Err(Error::Config("scenario has no phases".into()));
        }
        for (k, ph) in self.phases.iter().enumerate() {
            let bad = |m: &str| Err(Error::Config(format!("phase {}: {m}", k + 1)));
            match ph {
                Phase::Cc { current, c_rate, duration } => {
                    if current.is_some() == c_rate.is_some() {
                        return bad("give exactly one of `current` and `c_rate`");
                    }
                    if duration.is_some_and(|d| !(d > 0.0)) {
                        return bad("duration must be positive");
                    }
                }
                Phase::Cv { voltage, min_current, min_c_rate, duration } => {
                    if !(*voltage > 0.0) || (min_current.is_some() && min_c_rate.is_some()) {
                        return bad("needs a positive voltage and at most one current floor");
                    }
                    if duration.is_some_and(|d| !(d > 0.0)) {
                        return bad("duration must be positive");
                    }
                }
                Phase::Rest { duration } => {
                    if !(*duration > 0.0) {
                        return bad("duration must be positive");
                    }
                }
                Phase::Profile { file, points } => {
                    if file.is_some() == !points.is_empty() {
                        return bad("give exactly one of `file` and `points`");
                    }
                    if !points.is_empty() {
                        check_profile(points)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Expands phases into segments, loading profile files.
    pub fn plan(&self, p: &CellParameters<f64>) -> Result<Vec<PlannedSegment>> {
        let one_c = p.one_c_current();
        let mut out = Vec::new();
        for (k, ph) in self.phases.iter().enumerate() {
            let mut push = |segment| out.push(PlannedSegment { phase: k, segment });
            match ph {
                Phase::Cc { current, c_rate, duration } => {
                    let i = current.unwrap_or_else(|| c_rate.unwrap_or(0.0) * one_c);
                    push(Segment::Current { current: i, duration: *duration });
                }
                Phase::Cv { voltage, min_current, min_c_rate, duration } => {
                    let floor = min_current.unwrap_or_else(|| min_c_rate.unwrap_or(0.05) * one_c);
                    push(Segment::Voltage { voltage: *voltage, min_current: floor.abs(), duration: *duration });
                }
                Phase::Rest { duration } => push(Segment::Current { current: 0.0, duration: Some(*duration) }),
                Phase::Profile { file, points } => {
                    let pts = match file {
                        Some(f) => crate::io::read_profile(f)?,
                        None => points.clone(),
                    };
                    check_profile(&pts)?;
                    for w in pts.windows(2) {
                        push(Segment::Current { current: w[0][1], duration: Some(w[1][0] - w[0][0]) });
                    }
                }
            }
        }
        Ok(out)
    }

    /// One of the eight standard scenarios (1-based).
    pub fn standard(n: usize, p: &CellParameters<f64>) -> Result<Self> {
        let cc = |rate: f64, t_amb: f64| Scenario {
            name: String::new(),
            dt: 1.0,
            t_amb,
            soc0: Some(1.0),
            seed: None,
            phases: vec![Phase::Cc { current: None, c_rate: Some(rate), duration: None }],
        };
        let mut s = match n {
            1 => cc(1.0, 298.0),
            2 => cc(2.0, 298.0),
            3 => cc(4.0, 298.0),
            4 => Scenario {
                soc0: Some(0.0),
                phases: vec![
                    Phase::Cc { current: None, c_rate: Some(-1.0), duration: None },
                    Phase::Cv { voltage: p.cell.v_max, min_current: None, min_c_rate: Some(0.05), duration: None },
                ],
                ..cc(1.0, 298.0)
            },
            5 => {
                let lfp = p.cell.positive_ocp == "lfpo";
                Scenario {
                    soc0: Some(if lfp { 1.0 } else { 0.7 }),
                    phases: ACC_RATES
                        .iter()
                        .map(|&r| Phase::Cc { current: None, c_rate: Some(r), duration: Some(100.0) })
                        .collect(),
                    ..cc(1.0, 298.0)
                }
            }
            6 => random_current(p, RC_SEED, 217.0),
            7 => cc(1.0, 273.0),
            8 => cc(1.0, 313.0),
            _ => return Err(Error::Config(format!("standard scenario {n} does not exist (1..=8)"))),
        };
        s.name = STANDARD[n - 1].to_string();
        Ok(s)
    }
}

/// Random discharge profile: segments of 1 to 10 s at 0 to 3C.
pub fn random_current(p: &CellParameters<f64>, seed: u64, total: f64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let one_c = p.one_c_current();
    let mut pts = Vec::new();
    let mut t = 0.0;
    while t < total {
        pts.push([t, rng.gen_range(0.0..3.0) * one_c]);
        t = (t + f64::from(rng.gen_range(1u32..=10))).min(total);
    }
    pts.push([total, 0.0]);
    Scenario {
        name: "rc-298k".into(),
        dt: 1.0,
        t_amb: 298.0,
        soc0: Some(1.0),
        seed: Some(seed),
        phases: vec![Phase::Profile { file: None, points: pts }],
    }
}

fn check_profile(pts: &[[f64; 2]]) -> Result<()> {
    if pts.len() < 2 {
        return Err(Error::Config("current profile needs at least two rows".into()));
    }
    if pts.windows(2).any(|w| !(w[1][0] > w[0][0])) || pts.iter().any(|r| !r[1].is_finite()) {
        return Err(Error::Config("current profile times must strictly increase".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ncm() -> CellParameters<f64> {
        CellParameters::preset("ncm523").unwrap()
    }

    #[test]
    fn parses_all_phase_kinds() {
        let src = r#"
            name = "mixed"
            dt = 0.5
            [[phase]]
            kind = "cc"
            c_rate = 1.0
            duration = 60
            [[phase]]
            kind = "rest"
            duration = 30
            [[phase]]
            kind = "cv"
            voltage = 4.2
            [[phase]]
            kind = "profile"
            points = [[0, 1.0], [5, -1.0], [7, 0.0]]
        "#;
        let s = Scenario::from_toml_str(src, None).unwrap();
        assert_eq!(s.phases.len(), 4);
        let plan = s.plan(&ncm()).unwrap();
        assert_eq!(plan.len(), 5);
        assert_eq!(plan[0].segment, Segment::Current { current: 1.7, duration: Some(60.0) });
        assert_eq!(plan[2].segment, Segment::Voltage { voltage: 4.2, min_current: 0.085, duration: None });
        assert_eq!(plan[4].segment, Segment::Current { current: -1.0, duration: Some(2.0) });
        assert_eq!(plan[4].phase, 3);
    }

    #[test]
    fn rejects_bad_scenarios() {
        for src in [
            "[[phase]]\nkind = \"cc\"\ncurrent = 1.0\nc_rate = 1.0",
            "[[phase]]\nkind = \"rest\"\nduration = -1",
            "dt = 20\n[[phase]]\nkind = \"rest\"\nduration = 1",
            "[[phase]]\nkind = \"profile\"\npoints = [[0, 1.0], [0, 2.0]]",
            "[[phase]]\nkind = \"warp\"",
            "phase = []",
        ] {
            assert!(Scenario::from_toml_str(src, None).is_err(), "{src}");
        }
    }

    #[test]
    fn standard_set() {
        let p = ncm();
        for n in 1..=8 {
            let s = Scenario::standard(n, &p).unwrap();
            s.validate().unwrap();
            assert_eq!(s.name, STANDARD[n - 1]);
        }
        assert_eq!(Scenario::standard(5, &p).unwrap().soc0, Some(0.7));
        let lfp = CellParameters::preset("lfpo").unwrap();
        assert_eq!(Scenario::standard(5, &lfp).unwrap().soc0, Some(1.0));
        assert!(Scenario::standard(9, &p).is_err());
    }

    #[test]
    fn random_profile_is_seeded() {
        let p = ncm();
        let a = random_current(&p, 7, 217.0);
        let b = random_current(&p, 7, 217.0);
        let c = random_current(&p, 8, 217.0);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let plan = a.plan(&p).unwrap();
        let total: f64 = plan
            .iter()
            .map(|s| match s.segment {
                Segment::Current { duration, current } => {
                    assert!((0.0..=3.0 * 1.7).contains(&current));
                    let d = duration.unwrap();
                    assert!(d > 0.0 && d <= 10.0);
                    d
                }
                Segment::Voltage { .. } => unreachable!(),
            })
            .sum();
        assert!((total - 217.0).abs() < 1e-12);
    }
}

//! Cell parameter sets and the concentration/temperature dependent coefficients.
//!
//! All quantities are SI. Parameter files are TOML with the sections
//! `geometry`, `transport`, `material`, `thermal`, `varying`, `constants`
//! plus a `cell` section describing the operating window and OCP tables.
//! A top-level `preset = "<name>"` key loads a built-in chemistry first and
//! then overrides it field by field.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Scalar};

/// Electrode selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Neg,
    Pos,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Neg, Side::Pos];

    /// `-1` for the negative electrode, `+1` for the positive one.
    pub fn sign<S: Scalar>(self) -> S {
        match self {
            Side::Neg => -S::one(),
            Side::Pos => S::one(),
        }
    }

    pub fn index(self) -> usize {
        match self {
            Side::Neg => 0,
            Side::Pos => 1,
        }
    }
}

/// How the pore-wall flux distribution is computed for an electrode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum JnMode {
    #[default]
    Analytic,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "S: Scalar")]
pub struct Geometry<S> {
    /// kg
    pub mass: S,
    /// m
    pub thickness_neg: S,
    pub thickness_sep: S,
    pub thickness_pos: S,
    /// m^2
    pub area_neg: S,
    pub area_sep: S,
    pub area_pos: S,
    /// cooling surface, m^2
    pub area_surface: S,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "S: Scalar")]
pub struct Transport<S> {
    /// S/m
    pub sigma_neg: S,
    pub sigma_pos: S,
    pub transference: S,
    /// ohm
    pub contact_resistance: S,
    /// ohm m^2
    pub film_resistance_neg: S,
    pub film_resistance_pos: S,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "S: Scalar")]
pub struct Material<S> {
    /// m
    pub radius_neg: S,
    pub radius_pos: S,
    /// 1/m
    pub specific_area_neg: S,
    pub specific_area_pos: S,
    /// mol/m^3
    pub cs_max_neg: S,
    pub cs_max_pos: S,
    pub eps_e_neg: S,
    pub eps_e_sep: S,
    pub eps_e_pos: S,
    pub eps_s_neg: S,
    pub eps_s_pos: S,
    /// mol/m^3
    pub ce0: S,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "S: Scalar")]
pub struct Thermal<S> {
    /// J/kg/K
    pub heat_capacity: S,
    /// W/m^2/K
    pub heat_transfer: S,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "S: Scalar")]
pub struct Constants<S> {
    pub faraday: S,
    pub gas_constant: S,
    pub bruggeman: S,
    /// time-constant factors of the surface-offset process
    pub ks_neg: S,
    pub ks_pos: S,
    pub alpha_a: S,
    pub alpha_c: S,
}

/// Arrhenius coefficients for one active material.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "S: Scalar")]
pub struct MaterialCoeffs<S> {
    /// J/mol
    pub ea_kds: S,
    pub ea_bds: S,
    /// m^2/s
    pub kds_ref: S,
    pub bds_ref: S,
    /// J/mol
    pub ea_kr: S,
    /// A m^2.5 / mol^1.5
    pub kr_ref: S,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "S: Scalar")]
pub struct VaryingParamCoeffs<S> {
    /// K
    pub t_ref: S,
    /// coefficients of (ce/1000)^2, (ce/1000), 1
    pub activity: [S; 3],
    pub neg: MaterialCoeffs<S>,
    pub pos: MaterialCoeffs<S>,
}

/// Operating window and model switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "S: Scalar")]
pub struct CellConfig<S> {
    /// built-in OCP tag or path to a table
    pub negative_ocp: String,
    pub positive_ocp: String,
    pub v_min: S,
    pub v_max: S,
    pub capacity_mah: S,
    #[serde(default)]
    pub jn_mode_neg: JnMode,
    #[serde(default)]
    pub jn_mode_pos: JnMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "S: Scalar")]
pub struct CellParameters<S> {
    pub geometry: Geometry<S>,
    pub transport: Transport<S>,
    pub material: Material<S>,
    pub thermal: Thermal<S>,
    pub constants: Constants<S>,
    pub varying: VaryingParamCoeffs<S>,
    pub cell: CellConfig<S>,
}

/// Per-electrode view of the parameter set.
#[derive(Debug, Clone, Copy)]
pub struct ElectrodeParams<S> {
    pub side: Side,
    pub thickness: S,
    pub area: S,
    pub sigma: S,
    pub film_resistance: S,
    pub radius: S,
    pub specific_area: S,
    pub cs_max: S,
    pub eps_e: S,
    pub eps_s: S,
    pub ks: S,
}

/// Result of a clamped evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clamped<S> {
    pub value: S,
    pub clamped: bool,
}

/// Floor applied to the solid diffusivity, m^2/s.
pub const DS_FLOOR: f64 = 1e-18;
/// Minimum distance from the electrolyte diffusivity singularity, K.
pub const DE_GUARD_K: f64 = 5.0;

pub const PRESETS: [&str; 3] = ["lfpo", "ncm523", "ncm811"];

fn preset_source(name: &str) -> Option<&'static str> {
    match name {
        "lfpo" => Some(include_str!("../data/presets/lfpo.toml")),
        "ncm523" => Some(include_str!("../data/presets/ncm523.toml")),
        "ncm811" => Some(include_str!("../data/presets/ncm811.toml")),
        _ => None,
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn resolve(src: &str) -> Result<toml::Value> {
    let mut user: toml::Value = toml::from_str(src)?;
    let preset = match user.as_table_mut().and_then(|t| t.remove("preset")) {
        None => return Ok(user),
        Some(toml::Value::String(s)) => s,
        Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
    };
    let base_src = preset_source(&preset)
        .ok_or_else(|| Error::Config(format!("unknown preset `{preset}` (known: {PRESETS:?})")))?;
    let mut base: toml::Value = toml::from_str(base_src)?;
    merge(&mut base, user);
    Ok(base)
}

impl<S: Scalar> CellParameters<S> {
    /// Parses a parameter file body, applying `preset` merging and validation.
    pub fn from_toml_str(src: &str) -> Result<Self> {
        let value = resolve(src)?;
        let p: Self = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut p = Self::from_toml_str(&src)?;
        // Relative OCP table paths are resolved next to the parameter file.
        if let Some(dir) = path.parent() {
            for name in [&mut p.cell.negative_ocp, &mut p.cell.positive_ocp] {
                if crate::ocp::builtin(name).is_none() && Path::new(name.as_str()).is_relative() {
                    *name = dir.join(name.as_str()).to_string_lossy().into_owned();
                }
            }
        }
        Ok(p)
    }

    /// Built-in chemistry: `lfpo`, `ncm523` or `ncm811` (all against graphite).
    pub fn preset(name: &str) -> Result<Self> {
        Self::from_toml_str(&format!("preset = \"{name}\""))
    }

    /// Converts the whole set to another scalar type.
    pub fn cast<T: Scalar>(&self) -> CellParameters<T> {
        let v = toml::Value::try_from(self).expect("parameters serialize");
        v.try_into().expect("parameters deserialize")
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        let m = &self.material;
        let t = &self.transport;
        let c = &self.constants;
        let positive = [
            ("geometry.mass", g.mass),
            ("geometry.thickness_neg", g.thickness_neg),
            ("geometry.thickness_sep", g.thickness_sep),
            ("geometry.thickness_pos", g.thickness_pos),
            ("geometry.area_neg", g.area_neg),
            ("geometry.area_sep", g.area_sep),
            ("geometry.area_pos", g.area_pos),
            ("geometry.area_surface", g.area_surface),
            ("material.radius_neg", m.radius_neg),
            ("material.radius_pos", m.radius_pos),
            ("material.specific_area_neg", m.specific_area_neg),
            ("material.specific_area_pos", m.specific_area_pos),
            ("material.cs_max_neg", m.cs_max_neg),
            ("material.cs_max_pos", m.cs_max_pos),
            ("material.ce0", m.ce0),
            ("transport.sigma_neg", t.sigma_neg),
            ("transport.sigma_pos", t.sigma_pos),
            ("thermal.heat_capacity", self.thermal.heat_capacity),
            ("thermal.heat_transfer", self.thermal.heat_transfer),
            ("constants.faraday", c.faraday),
            ("constants.gas_constant", c.gas_constant),
            ("constants.ks_neg", c.ks_neg),
            ("constants.ks_pos", c.ks_pos),
            ("varying.t_ref", self.varying.t_ref),
        ];
        for (name, v) in positive {
            if !(v > S::zero()) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        let fractions = [
            ("material.eps_e_neg", m.eps_e_neg),
            ("material.eps_e_sep", m.eps_e_sep),
            ("material.eps_e_pos", m.eps_e_pos),
            ("material.eps_s_neg", m.eps_s_neg),
            ("material.eps_s_pos", m.eps_s_pos),
            ("transport.transference", t.transference),
        ];
        for (name, v) in fractions {
            if !(v > S::zero() && v < S::one()) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        for side in Side::BOTH {
            let e = self.electrode(side);
            if e.eps_e + e.eps_s > S::one() {
                return Err(Error::Config(format!(
                    "{side:?}: eps_e + eps_s = {} exceeds 1",
                    e.eps_e + e.eps_s
                )));
            }
            let derived = lit::<S>(3.0) * e.eps_s / e.radius;
            let rel = ((e.specific_area - derived) / derived).abs();
            if rel > lit(0.01) {
                return Err(Error::Config(format!(
                    "{side:?}: specific area {} differs from 3 eps_s / Rs = {} by {:.2}%",
                    e.specific_area,
                    derived,
                    to_f64(rel) * 100.0
                )));
            }
        }
        if !(self.cell.v_min < self.cell.v_max) {
            return Err(Error::Config("cell.v_min must be below cell.v_max".into()));
        }
        if !(self.cell.capacity_mah > S::zero()) {
            return Err(Error::Config("cell.capacity_mah must be positive".into()));
        }
        Ok(())
    }

    pub fn electrode(&self, side: Side) -> ElectrodeParams<S> {
        let g = &self.geometry;
        let m = &self.material;
        let t = &self.transport;
        let c = &self.constants;
        match side {
            Side::Neg => ElectrodeParams {
                side,
                thickness: g.thickness_neg,
                area: g.area_neg,
                sigma: t.sigma_neg,
                film_resistance: t.film_resistance_neg,
                radius: m.radius_neg,
                specific_area: m.specific_area_neg,
                cs_max: m.cs_max_neg,
                eps_e: m.eps_e_neg,
                eps_s: m.eps_s_neg,
                ks: c.ks_neg,
            },
            Side::Pos => ElectrodeParams {
                side,
                thickness: g.thickness_pos,
                area: g.area_pos,
                sigma: t.sigma_pos,
                film_resistance: t.film_resistance_pos,
                radius: m.radius_pos,
                specific_area: m.specific_area_pos,
                cs_max: m.cs_max_pos,
                eps_e: m.eps_e_pos,
                eps_s: m.eps_s_pos,
                ks: c.ks_pos,
            },
        }
    }

    pub fn coeffs(&self, side: Side) -> &MaterialCoeffs<S> {
        match side {
            Side::Neg => &self.varying.neg,
            Side::Pos => &self.varying.pos,
        }
    }

    pub fn jn_mode(&self, side: Side) -> JnMode {
        match side {
            Side::Neg => self.cell.jn_mode_neg,
            Side::Pos => self.cell.jn_mode_pos,
        }
    }

    /// `F / (R T)` in 1/V.
    pub fn f_over_rt(&self, t: S) -> S {
        self.constants.faraday / (self.constants.gas_constant * t)
    }

    /// Nominal 1C current in A.
    pub fn one_c_current(&self) -> S {
        self.cell.capacity_mah / lit(1000.0)
    }

    /// Initial solution-phase lithium inventory in each electrode, mol.
    pub fn qe_initial(&self, side: Side) -> S {
        let e = self.electrode(side);
        e.area * e.thickness * e.eps_e * self.material.ce0
    }

    /// Total solution-phase inventory of both electrodes, mol.
    pub fn qe_total(&self) -> S {
        self.qe_initial(Side::Neg) + self.qe_initial(Side::Pos)
    }

    /// Lithium capacity of an electrode per unit stoichiometry, mol.
    pub fn solid_capacity(&self, side: Side) -> S {
        let e = self.electrode(side);
        e.area * e.thickness * e.eps_s * e.cs_max
    }

    /// Lumped thermal time constant, s.
    pub fn thermal_time_constant(&self) -> S {
        self.geometry.mass * self.thermal.heat_capacity
            / (self.thermal.heat_transfer * self.geometry.area_surface)
    }

    fn arrhenius(&self, ea: S, t: S) -> S {
        (-(ea / self.constants.gas_constant) * (t.recip() - self.varying.t_ref.recip())).exp()
    }

    /// Solid diffusivity, affine in the bulk stoichiometry, floored at [`DS_FLOOR`].
    pub fn solid_diffusivity(&self, side: Side, cs_bulk: S, t: S) -> Clamped<S> {
        let co = self.coeffs(side);
        let e = self.electrode(side);
        let k = self.arrhenius(co.ea_kds, t) * co.kds_ref;
        let b = self.arrhenius(co.ea_bds, t) * co.bds_ref;
        let ds = k * (cs_bulk / e.cs_max) + b;
        if ds > lit(DS_FLOOR) {
            Clamped { value: ds, clamped: false }
        } else {
            Clamped { value: lit(DS_FLOOR), clamped: true }
        }
    }

    /// Strict variant of [`Self::solid_diffusivity`].
    pub fn solid_diffusivity_strict(&self, side: Side, cs_bulk: S, t: S) -> Result<S> {
        let d = self.solid_diffusivity(side, cs_bulk, t);
        if d.clamped {
            return Err(Error::DegenerateParameter(format!(
                "{side:?} solid diffusivity is non-positive at cs = {cs_bulk} mol/m3, T = {t} K"
            )));
        }
        Ok(d.value)
    }

    /// Reaction rate constant in A m^2.5 / mol^1.5.
    pub fn reaction_rate_coeff(&self, side: Side, t: S) -> S {
        let co = self.coeffs(side);
        self.arrhenius(co.ea_kr, t) * co.kr_ref
    }

    /// Thermodynamic factor fit in `ce / 1000`.
    pub fn activity_term(&self, ce: S) -> S {
        let [a, b, c] = self.varying.activity;
        let x = ce / lit(1000.0);
        (a * x + b) * x + c
    }

    /// `kappa_D / kappa`: the diffusion-potential prefactor, V.
    pub fn kappa_d_ratio(&self, ce: S, t: S) -> S {
        lit::<S>(2.0) * (self.constants.gas_constant * t / self.constants.faraday)
            * (self.transport.transference - S::one())
            * self.activity_term(ce)
    }

    /// Diffusional conductivity for a given (effective) conductivity, S/m.
    pub fn kappa_d(&self, kappa: S, ce: S, t: S) -> S {
        kappa * self.kappa_d_ratio(ce, t)
    }

    /// Porosity correction for electrolyte transport properties.
    pub fn bruggeman(&self, raw: S, eps: S) -> S {
        raw * eps.powf(self.constants.bruggeman)
    }

    /// Effective solid conductivity of an electrode (linear in the solid fraction).
    pub fn sigma_eff(&self, side: Side) -> S {
        let e = self.electrode(side);
        e.sigma * e.eps_s
    }
}

/// Electrolyte diffusivity correlation, m^2/s (bulk, uncorrected).
pub fn electrolyte_diffusivity<S: Scalar>(ce: S, t: S) -> Result<S> {
    let margin = t - lit(229.0) - lit::<S>(0.005) * ce;
    if !(margin >= lit(DE_GUARD_K)) {
        return Err(Error::TemperatureOutOfRange {
            t_k: to_f64(t),
            ce: to_f64(ce),
            margin: to_f64(margin),
        });
    }
    let exponent = lit::<S>(-8.43) - lit::<S>(54.0) / margin - lit::<S>(2.2e-4) * ce;
    Ok(lit::<S>(10.0).powf(exponent))
}

/// Electrolyte conductivity correlation, S/m (bulk, uncorrected).
pub fn electrolyte_conductivity<S: Scalar>(ce: S, t: S) -> S {
    let c = ce;
    let c2 = c * c;
    let inner = (lit::<S>(0.494e-6) * c2 + lit::<S>(0.668e-3) * c - lit(10.5))
        + (lit::<S>(-8.86e-10) * c2 - lit::<S>(1.78e-5) * c + lit(0.074)) * t
        + (lit::<S>(2.8e-8) * c - lit(6.96e-5)) * t * t;
    c / lit(1e4) * inner * inner
}

//! Accuracy metrics and trajectory comparison.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::stepper::{StepRecord, Trajectory};

fn check(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.len() != yhat.len() || y.len() < 2 {
        return Err(Error::Config(format!(
            "metric inputs need equal lengths >= 2 (got {} and {})",
            y.len(),
            yhat.len()
        )));
    }
    Ok(())
}

/// Coefficient of determination of `yhat` against the reference `y`.
pub fn r2(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check(y, yhat)?;
    if y.iter().all(|v| *v == y[0]) {
        return Err(Error::Config("R2 is undefined for a constant reference".into()));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check(y, yhat)?;
    let s: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((s / y.len() as f64).sqrt())
}

pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check(y, yhat)?;
    let s: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / y.len() as f64)
}

/// Labels of the eight collocation points, negative then positive electrode.
pub const POSITIONS: [&str; 8] = ["n1", "n2", "n3", "n4", "p1", "p2", "p3", "p4"];

/// Quantity compared between trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    V,
    T,
    Soc,
    Ce,
    Css,
    CsBulk,
    /// bulk stoichiometry
    Xs,
    /// surface stoichiometry
    Xss,
    Jn,
    Qe,
    Qh,
}

impl Field {
    pub const ALL: [Field; 11] = [
        Field::V,
        Field::T,
        Field::Soc,
        Field::Ce,
        Field::Css,
        Field::CsBulk,
        Field::Xs,
        Field::Xss,
        Field::Jn,
        Field::Qe,
        Field::Qh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Field::V => "V",
            Field::T => "T",
            Field::Soc => "SOC",
            Field::Ce => "ce",
            Field::Css => "css",
            Field::CsBulk => "cs_bulk",
            Field::Xs => "xs",
            Field::Xss => "xss",
            Field::Jn => "jn",
            Field::Qe => "Qe",
            Field::Qh => "Qh",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown field `{s}`")))
    }

    /// Position labels and per-record extractors; `cs_max` converts concentrations to stoichiometry.
    fn channels(self, cs_max: [f64; 2]) -> Vec<(String, Box<dyn Fn(&StepRecord) -> f64>)> {
        type Pick = fn(&StepRecord) -> &[[f64; 4]; 2];
        let points = |pick: Pick, scale: bool| {
            (0..8)
                .map(move |k| {
                    let (s, i) = (k / 4, k % 4);
                    let d = if scale { cs_max[s] } else { 1.0 };
                    let f: Box<dyn Fn(&StepRecord) -> f64> = Box::new(move |r| pick(r)[s][i] / d);
                    (POSITIONS[k].to_string(), f)
                })
                .collect::<Vec<_>>()
        };
        let single = |f: fn(&StepRecord) -> f64| vec![("cell".to_string(), Box::new(f) as Box<dyn Fn(&StepRecord) -> f64>)];
        match self {
            Field::V => single(|r| r.v),
            Field::T => single(|r| r.temperature),
            Field::Soc => single(|r| r.soc),
            Field::Qh => single(|r| r.qh),
            Field::Ce => points(|r| &r.ce, false),
            Field::Css => points(|r| &r.css, false),
            Field::CsBulk => points(|r| &r.cs_bulk, false),
            Field::Xs => points(|r| &r.cs_bulk, true),
            Field::Xss => points(|r| &r.css, true),
            Field::Jn => points(|r| &r.jn, false),
            Field::Qe => vec![
                ("neg".to_string(), Box::new(|r: &StepRecord| r.qe[0]) as Box<dyn Fn(&StepRecord) -> f64>),
                ("pos".to_string(), Box::new(|r: &StepRecord| r.qe[1])),
            ],
        }
    }
}

/// One row of a comparison report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub field: String,
    pub position: String,
    /// `None` when the reference is constant over the overlap
    pub r2: Option<f64>,
    pub rmse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub rows: Vec<MetricRow>,
}

impl Report {
    pub fn get(&self, field: Field, position: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.field == field.name() && r.position == position)
    }

    /// Fixed-width table grouped by field.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<8} {:<8} {:>12} {:>12} {:>12}\n", "field", "position", "R2", "RMSE", "MAE");
        let mut last = "";
        for r in &self.rows {
            if r.field != last && !last.is_empty() {
                s.push('\n');
            }
            last = &r.field;
            let r2 = r.r2.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(s, "{:<8} {:<8} {:>12} {:>12.6e} {:>12.6e}", r.field, r.position, r2, r.rmse, r.mae);
        }
        s
    }
}

/// Linear interpolation of `(t, y)` at `x`; `t` must be non-decreasing and cover `x`.
fn interp(t: &[f64], y: &[f64], x: f64) -> f64 {
    let k = t.partition_point(|&v| v < x);
    if k == 0 {
        return y[0];
    }
    if k >= t.len() {
        return y[t.len() - 1];
    }
    let (t0, t1) = (t[k - 1], t[k]);
    if t1 == t0 {
        return y[k];
    }
    y[k - 1] + (x - t0) / (t1 - t0) * (y[k] - y[k - 1])
}

/// Compares `b` against the reference `a`, resampling `b` linearly onto `a`'s timestamps
/// inside the common time range.
pub fn compare_trajectories(a: &Trajectory, b: &Trajectory, fields: &[Field], cs_max: [f64; 2]) -> Result<Report> {
    let (Some(b0), Some(b1)) = (b.records.first(), b.records.last()) else {
        return Err(Error::Config("trajectories do not overlap in time".into()));
    };
    let idx: Vec<usize> = (0..a.records.len())
        .filter(|&k| a.records[k].t >= b0.t && a.records[k].t <= b1.t)
        .collect();
    if idx.len() < 2 {
        return Err(Error::Config("trajectories do not overlap in time".into()));
    }
    let tb: Vec<f64> = b.records.iter().map(|r| r.t).collect();
    let mut rows = Vec::new();
    for &field in fields {
        for (pos, f) in field.channels(cs_max) {
            let ya: Vec<f64> = idx.iter().map(|&k| f(&a.records[k])).collect();
            let yb_raw: Vec<f64> = b.records.iter().map(&f).collect();
            let yb: Vec<f64> = idx.iter().map(|&k| interp(&tb, &yb_raw, a.records[k].t)).collect();
            rows.push(MetricRow {
                field: field.name().to_string(),
                position: pos,
                r2: r2(&ya, &yb).ok(),
                rmse: rmse(&ya, &yb)?,
                mae: mae(&ya, &yb)?,
            });
        }
    }
    Ok(Report { rows })
}

//! Open-circuit potential curves of the electrode materials.
//!
//! Tables are two-column text files `y U` with a `# material=<tag>` header.
//! Interpolation is monotone piecewise-cubic Hermite (Fritsch-Carlson), so the
//! interpolant never overshoots the samples and has a continuous derivative.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Scalar};

/// Slope magnitude (V per unit stoichiometry) below which a segment counts as a plateau.
pub const PLATEAU_SLOPE: f64 = 1e-4;

const MIN_SAMPLES: usize = 50;

/// Source text of a built-in table.
pub fn builtin(tag: &str) -> Option<&'static str> {
    match tag {
        "graphite" => Some(include_str!("../data/ocp/graphite.txt")),
        "lfpo" => Some(include_str!("../data/ocp/lfpo.txt")),
        "ncm523" => Some(include_str!("../data/ocp/ncm523.txt")),
        "ncm811" => Some(include_str!("../data/ocp/ncm811.txt")),
        _ => None,
    }
}

#[derive(Debug, Clone)]
pub struct OcpCurve<S> {
    tag: String,
    y: Vec<S>,
    u: Vec<S>,
    /// Hermite derivatives at the knots.
    d: Vec<S>,
    /// `+1` when U increases with y, `-1` when it decreases.
    dir: S,
}

impl<S: Scalar> OcpCurve<S> {
    /// Built-in tag or a path to a table file.
    pub fn resolve(spec: &str) -> Result<Self> {
        match builtin(spec) {
            Some(src) => Self::parse(src),
            None => Self::load(spec),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&src)
    }

    pub fn parse(src: &str) -> Result<Self> {
        let mut tag = None;
        let mut y = Vec::new();
        let mut u = Vec::new();
        for (lineno, line) in src.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(t) = rest.trim().strip_prefix("material=") {
                    tag = Some(t.trim().to_string());
                }
                continue;
            }
            let mut cols = line.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty());
            let mut next = || -> Result<f64> {
                cols.next()
                    .ok_or_else(|| Error::OcpTable(format!("line {}: expected two columns", lineno + 1)))?
                    .parse::<f64>()
                    .map_err(|e| Error::OcpTable(format!("line {}: {e}", lineno + 1)))
            };
            y.push(lit(next()?));
            u.push(lit(next()?));
        }
        let tag = tag.ok_or_else(|| Error::OcpTable("missing `# material=<tag>` header".into()))?;
        Self::from_samples(tag, y, u)
    }

    pub fn from_samples(tag: impl Into<String>, y: Vec<S>, u: Vec<S>) -> Result<Self> {
        let tag = tag.into();
        let n = y.len();
        if n != u.len() {
            return Err(Error::OcpTable("column lengths differ".into()));
        }
        if n < MIN_SAMPLES {
            return Err(Error::OcpTable(format!("{tag}: {n} samples, need at least {MIN_SAMPLES}")));
        }
        let span_tol = lit::<S>(1e-9);
        if y[0] > lit::<S>(0.005) + span_tol || y[n - 1] < lit::<S>(0.995) - span_tol {
            return Err(Error::OcpTable(format!("{tag}: samples must span [0.005, 0.995]")));
        }
        if y[0] < S::zero() || y[n - 1] > S::one() {
            return Err(Error::OcpTable(format!("{tag}: stoichiometry outside [0, 1]")));
        }
        if y.iter().chain(u.iter()).any(|v| !v.is_finite()) {
            return Err(Error::OcpTable(format!("{tag}: non-finite sample")));
        }
        let dir = if u[n - 1] > u[0] { S::one() } else { -S::one() };
        let mut secant = Vec::with_capacity(n - 1);
        for i in 0..n - 1 {
            let h = y[i + 1] - y[i];
            if !(h > S::zero()) {
                return Err(Error::OcpTable(format!("{tag}: stoichiometry not strictly increasing at row {}", i + 2)));
            }
            let s = (u[i + 1] - u[i]) / h;
            if s * dir <= S::zero() && s.abs() >= lit(PLATEAU_SLOPE) {
                return Err(Error::OcpTable(format!(
                    "{tag}: potential not monotone near y = {}",
                    to_f64(y[i])
                )));
            }
            secant.push(s);
        }
        let d = fritsch_carlson(&y, &secant);
        Ok(Self { tag, y, u, d, dir })
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn samples(&self) -> (&[S], &[S]) {
        (&self.y, &self.u)
    }

    /// `+1` for increasing curves, `-1` for decreasing ones.
    pub fn direction(&self) -> S {
        self.dir
    }

    /// True when `y` lies inside the tabulated range.
    pub fn in_table(&self, y: S) -> bool {
        y >= self.y[0] && y <= self.y[self.y.len() - 1]
    }

    /// Potential and slope without domain checks. Outside the table the curve
    /// is continued linearly with the end derivative.
    pub fn eval(&self, y: S) -> (S, S) {
        let n = self.y.len();
        if y <= self.y[0] {
            return (self.u[0] + self.d[0] * (y - self.y[0]), self.d[0]);
        }
        if y >= self.y[n - 1] {
            return (self.u[n - 1] + self.d[n - 1] * (y - self.y[n - 1]), self.d[n - 1]);
        }
        // First knot strictly greater than y.
        let hi = self.y.partition_point(|&v| v <= y);
        let i = hi - 1;
        let h = self.y[hi] - self.y[i];
        let t = (y - self.y[i]) / h;
        let t2 = t * t;
        let t3 = t2 * t;
        let two = lit::<S>(2.0);
        let three = lit::<S>(3.0);
        let h00 = two * t3 - three * t2 + S::one();
        let h10 = t3 - two * t2 + t;
        let h01 = -two * t3 + three * t2;
        let h11 = t3 - t2;
        let value = h00 * self.u[i] + h10 * h * self.d[i] + h01 * self.u[hi] + h11 * h * self.d[hi];
        let dh00 = lit::<S>(6.0) * (t2 - t);
        let dh10 = three * t2 - lit::<S>(4.0) * t + S::one();
        let dh01 = -dh00;
        let dh11 = three * t2 - two * t;
        let slope = (dh00 * self.u[i] + dh01 * self.u[hi]) / h + dh10 * self.d[i] + dh11 * self.d[hi];
        (value, slope)
    }

    fn check_domain(y: S) -> Result<()> {
        if !(y >= S::zero() && y <= S::one()) {
            return Err(Error::Domain { y: to_f64(y) });
        }
        Ok(())
    }

    /// Equilibrium potential, V.
    pub fn potential(&self, y: S) -> Result<S> {
        Self::check_domain(y)?;
        Ok(self.eval(y).0)
    }

    /// Equilibrium potential plus a flag set when the table was extrapolated.
    pub fn potential_flagged(&self, y: S) -> Result<(S, bool)> {
        Self::check_domain(y)?;
        Ok((self.eval(y).0, !self.in_table(y)))
    }

    /// dU/dy, V per unit stoichiometry.
    pub fn potential_slope(&self, y: S) -> Result<S> {
        Self::check_domain(y)?;
        Ok(self.eval(y).1)
    }

    /// Stoichiometry in `[lo, hi]` where the potential equals `target`.
    ///
    /// Safeguarded Newton on a bisection bracket. The Newton slope is kept at
    /// least [`PLATEAU_SLOPE`] in magnitude so flat stretches do not stall it.
    pub fn inverse_potential(&self, target: S, lo: S, hi: S) -> Result<S> {
        Self::check_domain(lo)?;
        Self::check_domain(hi)?;
        let (mut a, mut b) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        // g is nondecreasing in y.
        let g = |y: S| (self.eval(y).0 - target) * self.dir;
        let (ua, ub) = (self.eval(a).0, self.eval(b).0);
        let (ga, gb) = (g(a), g(b));
        let tol = lit::<S>(1e-9).max(lit::<S>(8.0) * S::epsilon() * target.abs());
        if ga.abs() <= tol {
            return Ok(a);
        }
        if gb.abs() <= tol {
            return Ok(b);
        }
        if ga > S::zero() || gb < S::zero() {
            return Err(Error::NoSolution {
                target: to_f64(target),
                lo: to_f64(ua.min(ub)),
                hi: to_f64(ua.max(ub)),
            });
        }
        let floor = lit::<S>(PLATEAU_SLOPE);
        let mut y = (a + b) / lit(2.0);
        for _ in 0..200 {
            let (u, du) = self.eval(y);
            let gy = (u - target) * self.dir;
            if gy.abs() <= tol {
                return Ok(y);
            }
            if gy > S::zero() {
                b = y;
            } else {
                a = y;
            }
            if b - a <= S::epsilon() * lit(4.0) {
                return Ok(y);
            }
            let slope = (du * self.dir).max(floor);
            let step = y - gy / slope;
            y = if step > a && step < b { step } else { (a + b) / lit(2.0) };
        }
        Ok(y)
    }
}

/// Fritsch-Carlson monotone derivatives for knots `x` with secant slopes `s`.
fn fritsch_carlson<S: Scalar>(x: &[S], s: &[S]) -> Vec<S> {
    let n = x.len();
    let mut d = vec![S::zero(); n];
    for i in 1..n - 1 {
        let (s0, s1) = (s[i - 1], s[i]);
        if s0 * s1 <= S::zero() {
            d[i] = S::zero();
        } else {
            // Weighted harmonic mean keeps the cubic inside the data.
            let h0 = x[i] - x[i - 1];
            let h1 = x[i + 1] - x[i];
            let w1 = lit::<S>(2.0) * h1 + h0;
            let w2 = h1 + lit::<S>(2.0) * h0;
            d[i] = (w1 + w2) / (w1 / s0 + w2 / s1);
        }
    }
    d[0] = end_slope(x[1] - x[0], x[2] - x[1], s[0], s[1]);
    d[n - 1] = end_slope(x[n - 1] - x[n - 2], x[n - 2] - x[n - 3], s[n - 2], s[n - 3]);
    d
}

fn end_slope<S: Scalar>(h0: S, h1: S, s0: S, s1: S) -> S {
    let d = ((lit::<S>(2.0) * h0 + h1) * s0 - h0 * s1) / (h0 + h1);
    if d * s0 <= S::zero() {
        S::zero()
    } else if s0 * s1 <= S::zero() && d.abs() > lit::<S>(3.0) * s0.abs() {
        lit::<S>(3.0) * s0
    } else {
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn curve(tag: &str) -> OcpCurve<f64> {
        OcpCurve::resolve(tag).unwrap()
    }

    #[test]
    fn builtin_tables_load_and_decrease() {
        for tag in ["graphite", "lfpo", "ncm523", "ncm811"] {
            let c = curve(tag);
            assert_eq!(c.tag(), tag);
            assert_eq!(c.direction(), -1.0);
            assert!(c.samples().0.len() >= 50);
            let c32: OcpCurve<f32> = OcpCurve::resolve(tag).unwrap();
            assert!((c32.potential(0.5).unwrap() as f64 - c.potential(0.5).unwrap()).abs() < 1e-5);
        }
    }

    #[test]
    fn knots_are_reproduced() {
        let c = curve("ncm811");
        let (y, u) = c.samples();
        for i in [0, 17, 100, 198] {
            assert_eq!(c.potential(y[i]).unwrap(), u[i]);
        }
    }

    #[test]
    fn graphite_decreases_with_lithiation() {
        let c = curve("graphite");
        assert!(c.potential(0.1).unwrap() > c.potential(0.9).unwrap());
        for y in [0.05, 0.3, 0.6, 0.9] {
            assert!(c.potential_slope(y).unwrap() < 0.0);
        }
    }

    #[test]
    fn slope_matches_finite_difference_at_knots() {
        let c = curve("ncm523");
        let (y, _) = c.samples();
        for i in [10, 50, 120, 180] {
            let h = 1e-8;
            let fd = (c.potential(y[i] + h).unwrap() - c.potential(y[i] - h).unwrap()) / (2.0 * h);
            let d = c.potential_slope(y[i]).unwrap();
            assert!(((fd - d) / d).abs() < 1e-6, "knot {i}: {fd} vs {d}");
        }
    }

    #[test]
    fn domain_and_extrapolation() {
        let c = curve("lfpo");
        assert!(matches!(c.potential(-0.1), Err(Error::Domain { .. })));
        assert!(matches!(c.potential(1.1), Err(Error::Domain { .. })));
        let (u, flagged) = c.potential_flagged(0.001).unwrap();
        assert!(flagged);
        assert!(u > c.potential(0.005).unwrap());
        assert!(!c.potential_flagged(0.5).unwrap().1);
    }

    #[test]
    fn inverse_rejects_unbracketed_targets() {
        let c = curve("ncm523");
        let top = c.potential(0.0).unwrap();
        assert!(matches!(c.inverse_potential(top + 0.1, 0.0, 1.0), Err(Error::NoSolution { .. })));
    }

    #[test]
    fn plateau_inverse_has_small_residual() {
        // Flat middle section within the plateau tolerance.
        let n = 101;
        let y: Vec<f64> = (0..n).map(|i| 0.005 + 0.99 * i as f64 / (n - 1) as f64).collect();
        let u: Vec<f64> = y
            .iter()
            .map(|&v| if v < 0.3 { 3.6 - (v - 0.3) } else if v > 0.7 { 3.4 - (v - 0.7) } else { 3.5 - 0.25 * (v - 0.3) })
            .collect();
        let c = OcpCurve::from_samples("flat", y, u).unwrap();
        let target = 3.45;
        let root = c.inverse_potential(target, 0.0, 1.0).unwrap();
        assert!((c.potential(root).unwrap() - target).abs() < 1e-9);
        assert!(root > 0.3 && root < 0.7);
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(OcpCurve::<f64>::parse("0.1 1.0\n").is_err());
        let y: Vec<f64> = (0..60).map(|i| 0.005 + 0.99 * i as f64 / 59.0).collect();
        let mut u: Vec<f64> = y.iter().map(|v| 4.0 - v).collect();
        u[30] += 0.2;
        assert!(OcpCurve::from_samples("bumpy", y.clone(), u).is_err());
        let short: Vec<f64> = y[..40].to_vec();
        assert!(OcpCurve::from_samples("short", short.clone(), short).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(y in 0.01f64..0.99) {
            for tag in ["graphite", "lfpo", "ncm523", "ncm811"] {
                let c = curve(tag);
                let u = c.potential(y).unwrap();
                let back = c.inverse_potential(u, 0.0, 1.0).unwrap();
                prop_assert!((c.potential(back).unwrap() - u).abs() < 1e-9);
                prop_assert!((back - y).abs() < 1e-6, "{} {} {}", tag, y, back);
            }
        }

        #[test]
        fn no_overshoot(y in 0.005f64..0.995) {
            for tag in ["graphite", "lfpo", "ncm523", "ncm811"] {
                let c = curve(tag);
                let (ys, us) = c.samples();
                let hi = ys.partition_point(|&v| v <= y).min(ys.len() - 1).max(1);
                let (a, b) = (us[hi - 1], us[hi]);
                let u = c.potential(y).unwrap();
                prop_assert!(u <= a.max(b) + 1e-12 && u >= a.min(b) - 1e-12);
            }
        }
    }
}

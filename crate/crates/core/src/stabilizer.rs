//! Savitzky-Golay smoothing of the surface-concentration sequences.
//!
//! Smoothing is switched on per collocation point when the recent history
//! alternates, and stays on for one window length. The smoothed current value
//! is written back through the surface offset so bulk lithium is untouched.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Side;
use crate::scalar::{lit, Scalar};
use crate::solid::{SolidState, POINTS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgConfig {
    pub enabled: bool,
    /// polynomial order
    pub order: usize,
    /// odd window length
    pub window: usize,
    /// samples inspected by the detector
    pub lookback: usize,
    /// sign reversals of the first difference needed to trigger
    pub min_reversals: usize,
    /// half the mean absolute step must exceed this fraction of `cs_max`
    pub amplitude_fraction: f64,
}

impl Default for SgConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            order: 2,
            window: 49,
            lookback: 8,
            min_reversals: 5,
            amplitude_fraction: 1e-3,
        }
    }
}

impl SgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window % 2 == 0 || self.order >= self.window || self.lookback < 3 {
            return Err(Error::Config(format!(
                "smoothing window {} must be odd and exceed the order {}; lookback {} must be >= 3",
                self.window, self.order, self.lookback
            )));
        }
        Ok(())
    }
}

/// Least-squares polynomial projection `X (X^T X)^-1 X^T` on abscissae `-(M-1)/2 ..= (M-1)/2`.
///
/// Row-major `M x M`.
pub fn sg_matrix(order: usize, window: usize) -> Vec<f64> {
    let m = window;
    let k = order + 1;
    let half = (m as f64 - 1.0) / 2.0;
    let x: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let xi = i as f64 - half;
            (0..k).map(|p| xi.powi(p as i32)).collect()
        })
        .collect();
    let mut g = vec![vec![0.0; k]; k];
    for row in &x {
        for a in 0..k {
            for b in 0..k {
                g[a][b] += row[a] * row[b];
            }
        }
    }
    let ginv = invert(g);
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            let mut s = 0.0;
            for a in 0..k {
                for b in 0..k {
                    s += x[i][a] * ginv[a][b] * x[j][b];
                }
            }
            out[i * m + j] = s;
        }
    }
    out
}

fn invert(mut a: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut inv: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        inv.swap(c, p);
        let d = a[c][c];
        for j in 0..n {
            a[c][j] /= d;
            inv[c][j] /= d;
        }
        for r in 0..n {
            if r != c {
                let f = a[r][c];
                for j in 0..n {
                    a[r][j] -= f * a[c][j];
                    inv[r][j] -= f * inv[c][j];
                }
            }
        }
    }
    inv
}

/// Alternation test on the last `lookback` samples.
pub fn detect_oscillation<S: Scalar>(history: &[S], cs_max: S, cfg: &SgConfig) -> bool {
    let n = cfg.lookback;
    if history.len() < n {
        return false;
    }
    let tail = &history[history.len() - n..];
    let d: Vec<S> = tail.windows(2).map(|w| w[1] - w[0]).collect();
    let reversals = d
        .windows(2)
        .filter(|w| w[0] * w[1] < S::zero())
        .count();
    let amp = d.iter().map(|v| v.abs()).sum::<S>() / lit::<S>(2.0 * d.len() as f64);
    reversals >= cfg.min_reversals && amp > lit::<S>(cfg.amplitude_fraction) * cs_max
}

/// `B * tail` for the last `M` samples.
pub fn smooth_tail<S: Scalar>(tail: &[S], b: &[f64]) -> Vec<S> {
    let m = tail.len();
    debug_assert_eq!(b.len(), m * m);
    (0..m)
        .map(|i| {
            let row = &b[i * m..(i + 1) * m];
            row.iter().zip(tail).map(|(&w, &v)| lit::<S>(w) * v).sum()
        })
        .collect()
}

/// Per-point histories and smoothing state owned by an engine.
#[derive(Debug, Clone)]
pub struct Stabilizer<S> {
    cfg: SgConfig,
    b: Vec<f64>,
    history: [[VecDeque<S>; POINTS]; 2],
    active: [[usize; POINTS]; 2],
}

impl<S: Scalar> Stabilizer<S> {
    pub fn new(cfg: SgConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            b: sg_matrix(cfg.order, cfg.window),
            cfg,
            history: Default::default(),
            active: [[0; POINTS]; 2],
        })
    }

    pub fn config(&self) -> &SgConfig {
        &self.cfg
    }

    pub fn clear(&mut self) {
        for h in self.history.iter_mut().flatten() {
            h.clear();
        }
        self.active = [[0; POINTS]; 2];
    }

    /// Records the surface concentrations of the latest step and smooths
    /// active points in place. Returns whether any point was smoothed.
    pub fn process(&mut self, solid: &mut SolidState<S>, css: &mut [[S; POINTS]; 2], cs_max: [S; 2]) -> bool {
        if !self.cfg.enabled {
            return false;
        }
        let m = self.cfg.window;
        let mut smoothed = false;
        for side in Side::BOTH {
            let s = side.index();
            for i in 0..POINTS {
                let h = &mut self.history[s][i];
                h.push_back(css[s][i]);
                if h.len() > m {
                    h.pop_front();
                }
                let slice = h.make_contiguous();
                if detect_oscillation(slice, cs_max[s], &self.cfg) {
                    self.active[s][i] = m;
                }
                if self.active[s][i] > 0 {
                    self.active[s][i] -= 1;
                    if slice.len() == m {
                        let out = smooth_tail(slice, &self.b);
                        slice.copy_from_slice(&out);
                        let last = out[m - 1];
                        solid.w[s][i] = last - solid.cs_bulk[s][i];
                        css[s][i] = last;
                        smoothed = true;
                    }
                }
            }
        }
        smoothed
    }
}

//! Successive projections onto the per-feature confidence slabs.
//!
//! The coefficient vector `c` represents `θ_c = Σ_k c_k θ_k`. Projecting onto
//! the slab of feature `k` is a soft-threshold step on the residual coefficient
//! `γ_k = center_k − (G c)_k / v_k` at level `τ_k = sqrt(β_k / v_k)`, and moves
//! `θ_c` by a squared distance `δ_k = v_k (|γ_k| − τ_k)₊²`.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::ConfidenceRadius;
use crate::dictionary::FeatureMatrix;
use crate::error::{Error, Result};
use crate::moments::DesignMoments;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Project onto the slab giving the largest improvement (ties to the smallest index).
    #[default]
    GreedyMax,
    /// Visit the features in order `1..m`, repeatedly.
    RoundRobin,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::GreedyMax => "greedy_max",
            Schedule::RoundRobin => "round_robin",
        })
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "greedy_max" | "greedymax" | "greedy" => Ok(Schedule::GreedyMax),
            "round_robin" | "roundrobin" => Ok(Schedule::RoundRobin),
            _ => Err(Error::config(format!(
                "unknown schedule {s:?}; expected greedy_max or round_robin"
            ))),
        }
    }
}

pub const DEFAULT_MAX_ITER: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    /// Stopping threshold; `1/(2N)` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default)]
    pub schedule: Schedule,
    /// Starting coefficients; zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warm_start: Option<Vec<f64>>,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_max_iter() -> usize {
    DEFAULT_MAX_ITER
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            kappa: None,
            schedule: Schedule::GreedyMax,
            warm_start: None,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

impl SelectorConfig {
    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.kappa = Some(kappa);
        self
    }

    /// The effective κ for a training sample of size `n`.
    pub fn resolve_kappa(&self, n: usize) -> Result<f64> {
        if n == 0 {
            return Err(Error::data("empty training sample"));
        }
        let bound = 1.0 / n as f64;
        match self.kappa {
            None => Ok(0.5 * bound),
            Some(k) if k > 0.0 && k < bound => Ok(k),
            Some(k) => Err(Error::config(format!(
                "kappa must lie in (0, 1/N) = (0, {bound}), got {k}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub n: usize,
    pub chosen: usize,
    pub gamma: f64,
    pub tau: f64,
    pub delta: f64,
    pub update: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub coefficients: Vec<f64>,
    pub kappa: f64,
    pub schedule: Schedule,
    pub trace: Vec<IterationRecord>,
    /// Number of recorded steps, `n₀`.
    pub stopped_at: usize,
}

/// Excesses within a few ulps of the threshold are rounding noise from a
/// previous projection onto the same slab and count as zero.
const BOUNDARY_ULPS: f64 = 8.0 * f64::EPSILON;

/// Soft-threshold step: returns `(update, δ)` with `update = sgn(γ)(|γ| − τ)₊`
/// and `δ = v (|γ| − τ)₊²`.
pub fn soft_threshold_step(gamma: f64, tau: f64, v: f64) -> (f64, f64) {
    let excess = (gamma.abs() - tau).max(0.0);
    let sign = if gamma > 0.0 { 1.0 } else { -1.0 };
    if excess <= BOUNDARY_ULPS * tau {
        (0.0, 0.0)
    } else {
        (sign * excess, v * excess * excess)
    }
}

pub fn soft_threshold(x: f64, tau: f64) -> f64 {
    soft_threshold_step(x, tau, 1.0).0
}

/// `γ_k = center_k − (1/v_k) Σ_j c_j G_jk`
pub fn residual_gamma(c: &[f64], k: usize, moments: &DesignMoments, radius: &ConfidenceRadius) -> f64 {
    let mut gc = 0.0;
    for (j, cj) in c.iter().enumerate() {
        if *cj != 0.0 {
            gc += cj * moments.gram.get(j, k);
        }
    }
    radius.center[k] - gc / radius.v[k]
}

/// Orthogonal projection of `θ_c` onto the slab of feature `k`. Returns the new
/// coefficients and the squared distance moved.
pub fn project_feature(
    c: &[f64],
    k: usize,
    moments: &DesignMoments,
    radius: &ConfidenceRadius,
) -> (Vec<f64>, f64) {
    let mut out = c.to_vec();
    if !radius.is_active(k) {
        return (out, 0.0);
    }
    let gamma = residual_gamma(c, k, moments, radius);
    let (update, delta) = soft_threshold_step(gamma, radius.tau[k], radius.v[k]);
    out[k] += update;
    (out, delta)
}

struct State<'a> {
    moments: &'a DesignMoments,
    radius: &'a ConfidenceRadius,
    c: Vec<f64>,
    gc: Vec<f64>,
    trace: Vec<IterationRecord>,
    steps: usize,
    max_iter: usize,
}

impl State<'_> {
    fn gamma(&self, k: usize) -> f64 {
        self.radius.center[k] - self.gc[k] / self.radius.v[k]
    }

    fn step(&self, k: usize) -> (f64, f64, f64) {
        if !self.radius.is_active(k) {
            return (0.0, 0.0, 0.0);
        }
        let g = self.gamma(k);
        let (u, d) = soft_threshold_step(g, self.radius.tau[k], self.radius.v[k]);
        (g, u, d)
    }

    fn tick(&mut self) -> Result<()> {
        self.steps += 1;
        if self.steps > self.max_iter {
            return Err(Error::numerical(format!(
                "selection did not stop within {} iterations",
                self.max_iter
            )));
        }
        Ok(())
    }

    fn apply(&mut self, k: usize, gamma: f64, update: f64, delta: f64) {
        self.c[k] += update;
        self.moments.gram.add_scaled_column(&mut self.gc, k, update);
        self.trace.push(IterationRecord {
            n: self.trace.len() + 1,
            chosen: k,
            gamma,
            tau: self.radius.tau[k],
            delta,
            update,
        });
    }
}

const PARALLEL_SCAN: usize = 4096;

/// Runs the projection loop from `config.warm_start` (or zero) until the best
/// available improvement falls below κ.
pub fn run_selection(
    moments: &DesignMoments,
    radius: &ConfidenceRadius,
    n_train: usize,
    config: &SelectorConfig,
) -> Result<Selection> {
    let m = moments.m();
    if radius.m() != m {
        return Err(Error::config(format!(
            "radius has {} features but the moments have {m}",
            radius.m()
        )));
    }
    let kappa = config.resolve_kappa(n_train)?;
    let c = match &config.warm_start {
        Some(w) if w.len() != m => {
            return Err(Error::config(format!(
                "warm start has {} coefficients, expected {m}",
                w.len()
            )))
        }
        Some(w) => w.clone(),
        None => vec![0.0; m],
    };
    let gc = moments.gram.apply(&c);
    let mut st = State {
        moments,
        radius,
        c,
        gc,
        trace: Vec::new(),
        steps: 0,
        max_iter: config.max_iter,
    };
    if (0..m).all(|k| !radius.is_active(k)) {
        warn!("no selectable feature; returning the starting point");
    } else {
        match config.schedule {
            Schedule::GreedyMax => greedy(&mut st, kappa)?,
            Schedule::RoundRobin => round_robin(&mut st, kappa)?,
        }
    }
    let stopped_at = st.trace.len();
    Ok(Selection {
        coefficients: st.c,
        kappa,
        schedule: config.schedule,
        trace: st.trace,
        stopped_at,
    })
}

fn greedy(st: &mut State<'_>, kappa: f64) -> Result<()> {
    let m = st.c.len();
    loop {
        st.tick()?;
        let steps: Vec<(f64, f64, f64)> = if m >= PARALLEL_SCAN {
            (0..m).into_par_iter().map(|k| st.step(k)).collect()
        } else {
            (0..m).map(|k| st.step(k)).collect()
        };
        let mut best = 0.0;
        let mut chosen = None;
        for (k, s) in steps.iter().enumerate() {
            if s.2 > best {
                best = s.2;
                chosen = Some(k);
            }
        }
        if let Some(k) = chosen {
            let (g, u, d) = steps[k];
            st.apply(k, g, u, d);
        }
        if best < kappa {
            return Ok(());
        }
    }
}

fn round_robin(st: &mut State<'_>, kappa: f64) -> Result<()> {
    let m = st.c.len();
    loop {
        let mut best: f64 = 0.0;
        for k in 0..m {
            st.tick()?;
            let (g, u, d) = st.step(k);
            if d > 0.0 {
                st.apply(k, g, u, d);
            }
            best = best.max(d);
        }
        if best < kappa {
            return Ok(());
        }
    }
}

/// `θ̂(x_i) = Σ_k c_k θ_k(x_i)` for every row of `features`.
pub fn predict_matrix(c: &[f64], features: &FeatureMatrix) -> Result<Vec<f64>> {
    if features.n_features() != c.len() {
        return Err(Error::config(format!(
            "{} coefficients for {} features",
            c.len(),
            features.n_features()
        )));
    }
    let cv = ndarray::ArrayView1::from(c);
    Ok(features.values().dot(&cv).to_vec())
}

/// Clamps every coefficient to `[-B, B]`; only meaningful for orthonormal features.
pub fn clip_coefficients(c: &[f64], b: f64, moments: &DesignMoments) -> Result<Vec<f64>> {
    if !moments.is_identity() {
        return Err(Error::config(
            "coefficient clipping needs orthonormal features (identity moments)",
        ));
    }
    if b.is_nan() || b < 0.0 {
        return Err(Error::config(format!("clipping bound must be >= 0, got {b}")));
    }
    Ok(c.iter().map(|v| v.clamp(-b, b)).collect())
}

//! Synthetic models, exact risks, coverage studies and rate experiments.
//!
//! Every replicate draws from its own ChaCha stream keyed by
//! `(seed, experiment tag, N, replicate)`, and results are collected in job
//! order, so reports do not depend on the number of worker threads.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{confidence_radius, BoundSpec, BoundVariant, ConfidenceRadius, LabelMode, SubExp};
use crate::data::{fmt_f64, Dataset, DesignPoint};
use crate::dictionary::{build_haar_on, build_trigonometric, FeatureDictionary};
use crate::error::{Error, Result};
use crate::moments::{empirical_test_moments, exact_moments, Sampler};
use crate::selector::{clip_coefficients, run_selection, Schedule, SelectorConfig};
use crate::stats::{compute_stats, streaming_train_stats};

/// Zero-mean noise added to `f(X)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Noise {
    None,
    Gaussian { sigma: f64 },
    Uniform { a: f64 },
    Rademacher { a: f64 },
}

impl Noise {
    pub fn second_moment(&self) -> f64 {
        match *self {
            Noise::None => 0.0,
            Noise::Gaussian { sigma } => sigma * sigma,
            Noise::Uniform { a } => a * a / 3.0,
            Noise::Rademacher { a } => a * a,
        }
    }

    /// Almost-sure bound on `|η|`, when there is one.
    pub fn sup_bound(&self) -> Option<f64> {
        match *self {
            Noise::None => Some(0.0),
            Noise::Gaussian { .. } => None,
            Noise::Uniform { a } | Noise::Rademacher { a } => Some(a.abs()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Noise::None => 0.0,
            Noise::Gaussian { sigma } => Normal::new(0.0, sigma)
                .expect("validated sigma")
                .sample(rng),
            Noise::Uniform { a } => a * (2.0 * rng.random::<f64>() - 1.0),
            Noise::Rademacher { a } => {
                if rng.random::<bool>() {
                    a
                } else {
                    -a
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let p = match *self {
            Noise::None => 0.0,
            Noise::Gaussian { sigma } => sigma,
            Noise::Uniform { a } | Noise::Rademacher { a } => a,
        };
        if !(p >= 0.0 && p.is_finite()) {
            return Err(Error::config(format!("noise parameter must be >= 0, got {p}")));
        }
        Ok(())
    }
}

/// Orthonormal basis in which the truth is expanded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Basis {
    /// Trigonometric basis on `[0, 1]`.
    Trigonometric,
    /// Haar basis on `[lo, hi]`.
    Haar { lo: f64, hi: f64 },
}

impl Basis {
    /// The first `m` basis functions.
    pub fn dictionary(&self, m: usize) -> Result<FeatureDictionary> {
        match *self {
            Basis::Trigonometric => build_trigonometric(m),
            Basis::Haar { lo, hi } => {
                if m < 2 || !m.is_power_of_two() {
                    return Err(Error::config(format!(
                        "a Haar dictionary has 2^(J+1) features; {m} is not of that form"
                    )));
                }
                build_haar_on(m.trailing_zeros() - 1, lo, hi)
            }
        }
    }

    pub fn sampler(&self) -> Sampler {
        match *self {
            Basis::Trigonometric => Sampler::unit_interval(),
            Basis::Haar { lo, hi } => Sampler::Uniform { lo, hi, dim: 1 },
        }
    }

    /// `max_k sup_x |θ_k(x)|` over the first `m` basis functions.
    pub fn feature_sup(&self, m: usize) -> f64 {
        match *self {
            Basis::Trigonometric => {
                if m > 1 {
                    std::f64::consts::SQRT_2
                } else {
                    1.0
                }
            }
            Basis::Haar { .. } => ((m / 2).max(1) as f64).sqrt(),
        }
    }
}

/// Declared smoothness of the truth, carried into reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Regularity {
    Unspecified,
    Sobolev { beta: f64 },
    Besov { s: f64, p: f64, q: f64 },
}

fn default_amplitude() -> f64 {
    1.0
}

fn default_terms() -> usize {
    4096
}

fn default_levels() -> u32 {
    11
}

fn default_half_width() -> f64 {
    1.0
}

fn default_spike() -> f64 {
    1.0 / 3.0
}

/// How to build the truth coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TruthSpec {
    /// `f_k = amplitude · (−1)^{k+1} · k^{−(β + 1/2) − 0.01}` on the trigonometric basis.
    Sobolev {
        beta: f64,
        #[serde(default = "default_amplitude")]
        amplitude: f64,
        #[serde(default = "default_terms")]
        terms: usize,
    },
    /// One Haar coefficient per level, at the cell containing `spike`, with
    /// magnitude `amplitude · 2^{−j(s + 1/2 − 1/p)}` (p = 1): a Besov `B_{s,1,∞}` truth on `[−A, A]`.
    Besov {
        s: f64,
        #[serde(default = "default_amplitude")]
        amplitude: f64,
        #[serde(default = "default_levels")]
        levels: u32,
        #[serde(default = "default_half_width")]
        a: f64,
        #[serde(default = "default_spike")]
        spike: f64,
    },
    /// Explicit coefficients.
    Coefficients { basis: Basis, coefficients: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub truth: TruthSpec,
    pub noise: Noise,
}

/// `Y = f(X) + η` with `f = Σ_k f_k θ_k` in an orthonormal basis and `X` uniform.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticModel {
    pub basis: Basis,
    pub truth: Vec<f64>,
    pub noise: Noise,
    pub regularity: Regularity,
    /// A bound on `sup |f|`.
    pub sup_bound: f64,
    truth_dict: FeatureDictionary,
}

impl SyntheticModel {
    pub fn new(basis: Basis, truth: Vec<f64>, noise: Noise, regularity: Regularity) -> Result<Self> {
        noise.validate()?;
        if truth.is_empty() {
            return Err(Error::config("truth has no coefficients"));
        }
        if truth.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("truth coefficients must be finite"));
        }
        let truth_dict = match basis {
            Basis::Trigonometric => build_trigonometric(truth.len())?,
            Basis::Haar { .. } => basis.dictionary(truth.len())?,
        };
        let sup_bound = sup_norm_bound(&basis, &truth_dict, &truth)?;
        Ok(SyntheticModel {
            basis,
            truth,
            noise,
            regularity,
            sup_bound,
            truth_dict,
        })
    }

    pub fn from_spec(spec: &ModelSpec) -> Result<Self> {
        match &spec.truth {
            TruthSpec::Sobolev {
                beta,
                amplitude,
                terms,
            } => SyntheticModel::sobolev(*beta, *amplitude, *terms, spec.noise),
            TruthSpec::Besov {
                s,
                amplitude,
                levels,
                a,
                spike,
            } => SyntheticModel::besov(*s, *amplitude, *levels, *a, *spike, spec.noise),
            TruthSpec::Coefficients {
                basis,
                coefficients,
            } => SyntheticModel::new(*basis, coefficients.clone(), spec.noise, Regularity::Unspecified),
        }
    }

    pub fn sobolev(beta: f64, amplitude: f64, terms: usize, noise: Noise) -> Result<Self> {
        if beta.is_nan() || beta <= 0.0 || terms == 0 {
            return Err(Error::config("Sobolev truth needs beta > 0 and at least one term"));
        }
        let decay = beta + 0.5 + 0.01;
        let truth = (1..=terms)
            .map(|k| {
                let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                amplitude * sign * (k as f64).powf(-decay)
            })
            .collect();
        SyntheticModel::new(Basis::Trigonometric, truth, noise, Regularity::Sobolev { beta })
    }

    pub fn besov(s: f64, amplitude: f64, levels: u32, a: f64, spike: f64, noise: Noise) -> Result<Self> {
        if s.is_nan() || s <= 1.0 {
            return Err(Error::config("Besov truth with p = 1 needs s > 1"));
        }
        if a.is_nan() || a <= 0.0 || !(-a..=a).contains(&spike) {
            return Err(Error::config("Besov truth needs a > 0 and spike in [-a, a]"));
        }
        let m = 1usize << (levels + 1);
        let mut truth = vec![0.0; m];
        let t = (spike + a) / (2.0 * a);
        for j in 0..=levels {
            let cells = 1usize << j;
            let cell = ((t * cells as f64).floor() as usize).min(cells - 1);
            truth[cells + cell] = amplitude * 2f64.powf(-(j as f64) * (s - 0.5));
        }
        truth[0] = 0.5 * amplitude;
        SyntheticModel::new(
            Basis::Haar { lo: -a, hi: a },
            truth,
            noise,
            Regularity::Besov { s, p: 1.0, q: f64::INFINITY },
        )
    }

    pub fn f(&self, points: &[DesignPoint]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(points.len());
        self.truth_dict.for_each_row(points, |_, row| {
            out.push(row.iter().zip(&self.truth).map(|(t, c)| t * c).sum());
        })?;
        Ok(out)
    }

    /// A bound on `|Y|`, when the noise is bounded.
    pub fn y_bound(&self) -> Option<f64> {
        self.noise.sup_bound().map(|e| self.sup_bound + e)
    }
}

/// Rigorous bound on `sup |f|`: the exact maximum for Haar truths (piecewise
/// constant on the finest cells), and for trigonometric truths a grid maximum
/// plus half a grid step times a Lipschitz constant.
fn sup_norm_bound(basis: &Basis, dict: &FeatureDictionary, truth: &[f64]) -> Result<f64> {
    let eval_max = |xs: &[DesignPoint]| -> Result<f64> {
        let mut best: f64 = 0.0;
        dict.for_each_row(xs, |_, row| {
            let v: f64 = row.iter().zip(truth).map(|(t, c)| t * c).sum();
            best = best.max(v.abs());
        })?;
        Ok(best)
    };
    match *basis {
        Basis::Haar { lo, hi } => {
            let cells = truth.len();
            let xs: Vec<DesignPoint> = (0..cells)
                .map(|i| DesignPoint::scalar(lo + (hi - lo) * (i as f64 + 0.5) / cells as f64))
                .collect();
            eval_max(&xs)
        }
        Basis::Trigonometric => {
            if truth.len() == 1 {
                return Ok(truth[0].abs());
            }
            const GRID: usize = 1 << 14;
            let xs: Vec<DesignPoint> = (0..=GRID)
                .map(|i| DesignPoint::scalar(i as f64 / GRID as f64))
                .collect();
            let grid_max = eval_max(&xs)?;
            let lipschitz: f64 = truth
                .iter()
                .enumerate()
                .skip(1)
                .map(|(k, c)| c.abs() * std::f64::consts::SQRT_2 * 2.0 * std::f64::consts::PI * k.div_ceil(2) as f64)
                .sum();
            Ok(grid_max + 0.5 / GRID as f64 * lipschitz)
        }
    }
}

fn rng_for(seed: u64, tag: u64, n: usize, replicate: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&tag.to_le_bytes());
    key[16..24].copy_from_slice(&(n as u64).to_le_bytes());
    key[24..].copy_from_slice(&(replicate as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Draws `(k_test + 1) N` i.i.d. pairs; the labels of the last `k_test N` are kept hidden.
pub fn generate<R: Rng + ?Sized>(model: &SyntheticModel, n: usize, k_test: usize, rng: &mut R) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::config("N must be >= 1"));
    }
    let total = (k_test + 1) * n;
    let sampler = model.basis.sampler();
    let xs: Vec<DesignPoint> = (0..total).map(|_| sampler.draw(rng)).collect();
    let fx = model.f(&xs)?;
    let ys: Vec<f64> = fx.iter().map(|f| f + model.noise.sample(rng)).collect();
    let mut xs = xs;
    let test_x = xs.split_off(n);
    let mut ys = ys;
    let test_y = ys.split_off(n);
    Dataset::new(xs, ys, test_x, Some(test_y))
}

/// `generate` with the replicate stream of `seed`.
pub fn generate_seeded(model: &SyntheticModel, n: usize, k_test: usize, seed: u64) -> Result<Dataset> {
    generate(model, n, k_test, &mut rng_for(seed, 0, n, 0))
}

/// `‖θ_c − f‖²_P` by Parseval: `Σ_{k≤m}(c_k − f_k)² + Σ_{k>m} f_k²`.
pub fn exact_excess_risk(model: &SyntheticModel, basis: &Basis, coefficients: &[f64]) -> Result<f64> {
    if *basis != model.basis {
        return Err(Error::config(format!(
            "coefficients are in basis {basis:?} but the truth is in {:?}",
            model.basis
        )));
    }
    let k = coefficients.len().max(model.truth.len());
    Ok((0..k)
        .map(|i| {
            let c = coefficients.get(i).copied().unwrap_or(0.0);
            let f = model.truth.get(i).copied().unwrap_or(0.0);
            (c - f) * (c - f)
        })
        .sum())
}

/// Bound constants implied by the model, so the deviation inequalities are honest.
pub fn honest_bound(
    model: &SyntheticModel,
    variant: BoundVariant,
    epsilon: f64,
    mode: LabelMode,
    n: usize,
    k_test: usize,
    m: usize,
) -> Result<BoundSpec> {
    let mut spec = BoundSpec::new(variant, epsilon).with_mode(mode);
    let sigma2 = model.noise.second_moment();
    let y_bound = model.y_bound();
    let need_y_bound = || {
        y_bound.ok_or_else(|| {
            Error::config(format!(
                "{variant} needs bounded responses but the model noise {:?} is unbounded",
                model.noise
            ))
        })
    };
    match variant {
        BoundVariant::IndExact => {
            spec = spec.with_b(model.sup_bound).with_sigma2(sigma2);
        }
        BoundVariant::IndVarFirstOrder | BoundVariant::IndSvm => {}
        BoundVariant::TrBasicBounded | BoundVariant::TrVariance => {
            if mode == LabelMode::Deployment {
                spec = spec.with_b(need_y_bound()?);
            }
        }
        BoundVariant::TrFirstOrder => {
            // P exp(|Y|) ≤ B_Y
            let big = match (y_bound, model.noise) {
                (Some(b), _) => b.exp(),
                (None, Noise::Gaussian { sigma }) => 2.0 * (model.sup_bound + 0.5 * sigma * sigma).exp(),
                _ => unreachable!("only gaussian noise is unbounded"),
            };
            spec = spec.with_b_y(1.0, big.max(1.0));
        }
        BoundVariant::TrGeneralK => {
            // |θ Y| ≤ T M, so β_h = L/(T M) gives B_h = exp(L) with L = log(4(k+1)mN/ε)
            let t = model.basis.feature_sup(m);
            let scale = t * need_y_bound()?;
            let l = (4.0 * (k_test as f64 + 1.0) * m as f64 * n as f64 / epsilon).ln();
            spec.subexp = Some(vec![if scale > 0.0 {
                SubExp {
                    beta_h: l / scale,
                    big_b_h: l.exp(),
                }
            } else {
                SubExp {
                    beta_h: 1.0,
                    big_b_h: 1.0,
                }
            }]);
        }
    }
    Ok(spec)
}

/// Wall-clock cap. Jobs that have not started when it expires are skipped.
#[derive(Debug, Clone, Copy)]
pub struct Budget {
    deadline: Option<Instant>,
}

impl Budget {
    pub fn unlimited() -> Self {
        Budget { deadline: None }
    }

    pub fn seconds(secs: f64) -> Self {
        Budget {
            deadline: Some(Instant::now() + std::time::Duration::from_secs_f64(secs.max(0.0))),
        }
    }

    fn expired(&self) -> bool {
        self.deadline.is_some_and(|d| Instant::now() >= d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    RateSobolev,
    RateBesov,
    Coverage,
    Transductive,
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExperimentKind::RateSobolev => "rate-sobolev",
            ExperimentKind::RateBesov => "rate-besov",
            ExperimentKind::Coverage => "coverage",
            ExperimentKind::Transductive => "transductive",
        })
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
            Error::config(format!(
                "unknown experiment kind {s:?}; expected rate-sobolev, rate-besov, coverage or transductive"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub replicate: usize,
    pub mse: f64,
    pub coverage_event: bool,
    pub seed: u64,
    /// Whether every selection step satisfied the risk-decrease inequality.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain_holds: Option<bool>,
    /// Test mse of the zero predictor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub median_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub std_err: f64,
    pub intercept: f64,
    /// Abscissa: `log(N / log N)`; ordinate: `log(median mse)`.
    pub regressor: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub rows: Vec<GridRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub medians: Vec<MedianRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope: Option<SlopeFit>,
    /// Fraction of replicates where the bound held for every feature, per variant.
    pub coverage: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain_frequency: Option<f64>,
    pub replicates_completed: usize,
    pub replicates_requested: usize,
    pub partial: bool,
}

impl ExperimentReport {
    fn assemble(kind: ExperimentKind, variant: BoundVariant, results: Vec<Option<GridRow>>) -> Self {
        let requested = results.len();
        let rows: Vec<GridRow> = results.into_iter().flatten().collect();
        let completed = rows.len();
        let mut coverage = BTreeMap::new();
        if completed > 0 {
            let hits = rows.iter().filter(|r| r.coverage_event).count();
            coverage.insert(variant.to_string(), hits as f64 / completed as f64);
        }
        let chains: Vec<bool> = rows.iter().filter_map(|r| r.chain_holds).collect();
        let chain_frequency = (!chains.is_empty())
            .then(|| chains.iter().filter(|c| **c).count() as f64 / chains.len() as f64);
        ExperimentReport {
            kind,
            rows,
            medians: Vec::new(),
            slope: None,
            coverage,
            chain_frequency,
            replicates_completed: completed,
            replicates_requested: requested,
            partial: completed < requested,
        }
    }

    /// Flat CSV with columns `N,replicate,mse,coverage_event,seed`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["N", "replicate", "mse", "coverage_event", "seed"])?;
        for r in &self.rows {
            w.write_record([
                r.n.to_string(),
                r.replicate.to_string(),
                fmt_f64(r.mse),
                r.coverage_event.to_string(),
                r.seed.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Ordinary least squares `y = a + b x`; returns `(b, se(b), a)`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    let n = x.len();
    if n < 3 || y.len() != n {
        return Err(Error::config("slope fit needs at least 3 points"));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(Error::config("slope fit needs at least two distinct abscissae"));
    }
    let b = sxy / sxx;
    let a = my - b * mx;
    let ssr: f64 = x.iter().zip(y).map(|(u, v)| (v - a - b * u).powi(2)).sum();
    let se = (ssr / (nf - 2.0) / sxx).sqrt();
    Ok((b, se, a))
}

/// Per-coefficient confidence event for an orthonormal basis: `v (center_k − f_k)² ≤ β_k`.
fn inductive_event(radius: &ConfidenceRadius, model: &SyntheticModel) -> bool {
    (0..radius.m()).all(|k| {
        let f = model.truth.get(k).copied().unwrap_or(0.0);
        let d = radius.center[k] - f;
        radius.v[k] * d * d <= radius.beta[k]
    })
}

fn run_jobs<T, F>(jobs: Vec<(usize, usize)>, budget: Budget, f: F) -> Result<Vec<Option<T>>>
where
    T: Send,
    F: Fn(usize, usize) -> Result<T> + Sync,
{
    jobs.into_par_iter()
        .map(|(n, r)| {
            if budget.expired() {
                Ok(None)
            } else {
                f(n, r).map(Some)
            }
        })
        .collect()
}

fn default_sigma_multiplier() -> f64 {
    1.0
}

fn default_rate_grid() -> Vec<usize> {
    vec![64, 128, 256, 512, 1024, 2048, 4096]
}

fn default_replicates() -> usize {
    20
}

/// Rule for the dictionary size as a function of `N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeRule {
    /// `m = N`
    Linear,
    /// `m = 2^{⌊log₂ N⌋}`
    PowerOfTwo,
}

impl SizeRule {
    pub fn apply(&self, n: usize) -> usize {
        match self {
            SizeRule::Linear => n,
            SizeRule::PowerOfTwo => 1usize << (usize::BITS - 1 - n.leading_zeros()),
        }
    }
}

/// Rule for the confidence level as a function of `N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EpsilonRule {
    /// `ε = N^{−2}`
    InverseSquare,
    Fixed { epsilon: f64 },
}

impl EpsilonRule {
    pub fn apply(&self, n: usize) -> f64 {
        match *self {
            EpsilonRule::InverseSquare => 1.0 / (n as f64 * n as f64),
            EpsilonRule::Fixed { epsilon } => epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateConfig {
    pub model: ModelSpec,
    #[serde(default = "default_rate_grid")]
    pub grid: Vec<usize>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    pub m_rule: SizeRule,
    #[serde(default = "default_epsilon_rule")]
    pub epsilon_rule: EpsilonRule,
    /// The rate estimator is a single round-robin pass.
    #[serde(default = "default_rate_schedule")]
    pub schedule: Schedule,
    /// Multiplies the noise level handed to the bound; 1 is the honest value.
    #[serde(default = "default_sigma_multiplier")]
    pub sigma_multiplier: f64,
}

fn default_epsilon_rule() -> EpsilonRule {
    EpsilonRule::InverseSquare
}

fn default_rate_schedule() -> Schedule {
    Schedule::RoundRobin
}

impl RateConfig {
    pub fn sobolev_default() -> Self {
        RateConfig {
            model: ModelSpec {
                truth: TruthSpec::Sobolev {
                    beta: 1.0,
                    amplitude: 1.0,
                    terms: 4096,
                },
                noise: Noise::None,
            },
            grid: default_rate_grid(),
            replicates: default_replicates(),
            m_rule: SizeRule::Linear,
            epsilon_rule: EpsilonRule::InverseSquare,
            schedule: Schedule::RoundRobin,
            sigma_multiplier: 1.0,
        }
    }

    pub fn besov_default() -> Self {
        RateConfig {
            model: ModelSpec {
                truth: TruthSpec::Besov {
                    s: 1.5,
                    amplitude: 1.0,
                    levels: 11,
                    a: 1.0,
                    spike: default_spike(),
                },
                noise: Noise::None,
            },
            m_rule: SizeRule::PowerOfTwo,
            ..RateConfig::sobolev_default()
        }
    }
}

/// Fit with `IndExact`, clip at `B`, and measure the exact excess risk, over a grid of `N`.
pub fn rate_experiment(kind: ExperimentKind, cfg: &RateConfig, seed: u64, budget: Budget) -> Result<ExperimentReport> {
    if cfg.grid.len() < 4 || cfg.grid.iter().any(|&n| n < 32) {
        return Err(Error::config("rate experiments need at least 4 grid values, each >= 32"));
    }
    if cfg.replicates == 0 {
        return Err(Error::config("replicates must be >= 1"));
    }
    let model = SyntheticModel::from_spec(&cfg.model)?;
    let sigma2 = model.noise.second_moment() * cfg.sigma_multiplier * cfg.sigma_multiplier;
    let jobs: Vec<(usize, usize)> = cfg
        .grid
        .iter()
        .flat_map(|&n| (0..cfg.replicates).map(move |r| (n, r)))
        .collect();
    let results = run_jobs(jobs, budget, |n, r| {
        let mut rng = rng_for(seed, 1, n, r);
        let ds = generate(&model, n, 0, &mut rng)?;
        let m = cfg.m_rule.apply(n);
        let dict = model.basis.dictionary(m)?;
        let moments = exact_moments(&dict)?;
        let stats = streaming_train_stats(&dict, &ds.train_x, &ds.train_y)?;
        let spec = BoundSpec::new(BoundVariant::IndExact, cfg.epsilon_rule.apply(n))
            .with_b(model.sup_bound)
            .with_sigma2(sigma2);
        let radius = confidence_radius(&spec, &stats, &moments, None)?;
        let sel = run_selection(
            &moments,
            &radius,
            n,
            &SelectorConfig::default().with_schedule(cfg.schedule),
        )?;
        let clipped = clip_coefficients(&sel.coefficients, model.sup_bound, &moments)?;
        Ok(GridRow {
            n,
            replicate: r,
            mse: exact_excess_risk(&model, &model.basis, &clipped)?,
            coverage_event: inductive_event(&radius, &model),
            seed,
            chain_holds: None,
            baseline_mse: None,
        })
    })?;
    let mut report = ExperimentReport::assemble(kind, BoundVariant::IndExact, results);
    for &n in &cfg.grid {
        let mut v: Vec<f64> = report.rows.iter().filter(|r| r.n == n).map(|r| r.mse).collect();
        if !v.is_empty() {
            report.medians.push(MedianRow {
                n,
                median_mse: median(&mut v),
            });
        }
    }
    if report.medians.len() >= 3 && report.medians.iter().all(|m| m.median_mse > 0.0) {
        let x: Vec<f64> = report
            .medians
            .iter()
            .map(|m| (m.n as f64 / (m.n as f64).ln()).ln())
            .collect();
        let y: Vec<f64> = report.medians.iter().map(|m| m.median_mse.ln()).collect();
        let (slope, std_err, intercept) = ols_slope(&x, &y)?;
        report.slope = Some(SlopeFit {
            slope,
            std_err,
            intercept,
            regressor: "log(N/log N)".to_string(),
        });
    }
    Ok(report)
}

fn default_coverage_n() -> usize {
    128
}

fn default_coverage_m() -> usize {
    64
}

fn default_coverage_replicates() -> usize {
    500
}

fn default_k_test() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub model: ModelSpec,
    pub variant: BoundVariant,
    pub epsilon: f64,
    #[serde(default)]
    pub mode: LabelMode,
    #[serde(rename = "N", default = "default_coverage_n")]
    pub n: usize,
    #[serde(default = "default_coverage_m")]
    pub m: usize,
    /// Test multiplier for transductive variants.
    #[serde(default = "default_k_test")]
    pub k_test: usize,
    #[serde(default = "default_coverage_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub schedule: Schedule,
}

impl CoverageConfig {
    /// The conforming model used by default: a short trigonometric expansion with bounded noise.
    pub fn default_model() -> ModelSpec {
        ModelSpec {
            truth: TruthSpec::Coefficients {
                basis: Basis::Trigonometric,
                coefficients: vec![0.5, 0.4, -0.3, 0.2, -0.1, 0.05, 0.0, 0.1],
            },
            noise: Noise::Uniform { a: 0.5 },
        }
    }
}

/// Fraction of replicates in which the variant's event holds for all `m` features.
pub fn coverage_study(cfg: &CoverageConfig, seed: u64, budget: Budget) -> Result<ExperimentReport> {
    if cfg.replicates < 100 {
        return Err(Error::config("coverage studies need at least 100 replicates"));
    }
    let model = SyntheticModel::from_spec(&cfg.model)?;
    let dict = model.basis.dictionary(cfg.m)?;
    let transductive = cfg.variant.is_transductive();
    let k_test = if transductive { cfg.k_test } else { 0 };
    if transductive && k_test == 0 {
        return Err(Error::config("transductive coverage needs k_test >= 1"));
    }
    // Fails early on hypothesis mismatches.
    honest_bound(&model, cfg.variant, cfg.epsilon, cfg.mode, cfg.n, k_test, cfg.m)?;
    let jobs: Vec<(usize, usize)> = (0..cfg.replicates).map(|r| (cfg.n, r)).collect();
    let results = run_jobs(jobs, budget, |n, r| {
        let mut rng = rng_for(seed, 2, n, r);
        let ds = generate(&model, n, k_test, &mut rng)?;
        let spec = honest_bound(&model, cfg.variant, cfg.epsilon, cfg.mode, n, k_test, cfg.m)?;
        if transductive {
            let t = transductive_replicate(&ds, &dict, &spec, &SelectorConfig::default().with_schedule(cfg.schedule))?;
            Ok(GridRow {
                n,
                replicate: r,
                mse: t.test_mse,
                coverage_event: t.event,
                seed,
                chain_holds: Some(t.chain_holds),
                baseline_mse: Some(t.baseline_mse),
            })
        } else {
            let moments = exact_moments(&dict)?;
            let stats = streaming_train_stats(&dict, &ds.train_x, &ds.train_y)?;
            let radius = confidence_radius(&spec, &stats, &moments, None)?;
            let sel = run_selection(&moments, &radius, n, &SelectorConfig::default().with_schedule(cfg.schedule))?;
            Ok(GridRow {
                n,
                replicate: r,
                mse: exact_excess_risk(&model, &model.basis, &sel.coefficients)?,
                coverage_event: inductive_event(&radius, &model),
                seed,
                chain_holds: None,
                baseline_mse: None,
            })
        }
    })?;
    Ok(ExperimentReport::assemble(ExperimentKind::Coverage, cfg.variant, results))
}

/// Outcome of one transductive run against the hidden test labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TransductiveOutcome {
    pub test_mse: f64,
    pub baseline_mse: f64,
    /// `∀h: r₂(C^h α₁^h θ_h) − r₂(α₂^h θ_h) ≤ β_h`
    pub event: bool,
    /// `r₂(θ⁽ⁿ⁾) ≤ r₂(θ⁽ⁿ⁻¹⁾) − d₂²(θ⁽ⁿ⁾, θ⁽ⁿ⁻¹⁾) + 1e−9` at every step
    pub chain_holds: bool,
    pub radius: ConfidenceRadius,
    pub steps: usize,
}

/// Runs the transductive algorithm and scores it with the hidden labels.
pub fn transductive_replicate(
    ds: &Dataset,
    dict: &FeatureDictionary,
    spec: &BoundSpec,
    config: &SelectorConfig,
) -> Result<TransductiveOutcome> {
    let hidden = ds
        .hidden_y
        .as_deref()
        .ok_or_else(|| Error::config("scoring a transductive run needs the hidden test labels"))?;
    let k = ds.test_multiplier()?;
    let n = ds.n_train();
    let features = dict.evaluate(&ds.all_points())?;
    let label_stats = compute_stats(&features, &ds.train_y, Some(hidden), None)?;
    let stats = match spec.mode {
        LabelMode::Simulation => label_stats.clone(),
        LabelMode::Deployment => compute_stats(&features, &ds.train_y, None, None)?,
    };
    let moments = empirical_test_moments(&features, n, k)?;
    let radius = confidence_radius(spec, &stats, &moments, None)?;
    let sel = run_selection(&moments, &radius, n, config)?;

    let event = (0..radius.m()).all(|h| {
        if !radius.is_active(h) {
            return true;
        }
        let l = label_stats.features[h].test.as_ref().and_then(|t| t.labeled.as_ref());
        let alpha2 = l.map(|l| l.ty_mean).unwrap_or(0.0) / radius.v[h];
        let d = radius.center[h] - alpha2;
        radius.v[h] * d * d <= radius.beta[h]
    });

    let test = features.slice_rows(n..features.n_rows());
    let kn = (k * n) as f64;
    let r2 = |pred: &[f64]| -> f64 {
        pred.iter().zip(hidden).map(|(p, y)| (y - p) * (y - p)).sum::<f64>() / kn
    };
    let mut pred = vec![0.0; k * n];
    let baseline_mse = r2(&pred);
    let mut current = baseline_mse;
    let mut chain_holds = true;
    for rec in &sel.trace {
        for (p, t) in pred.iter_mut().zip(test.column(rec.chosen)) {
            *p += rec.update * t;
        }
        let next = r2(&pred);
        if next > current - rec.delta + 1e-9 {
            chain_holds = false;
        }
        current = next;
    }
    Ok(TransductiveOutcome {
        test_mse: current,
        baseline_mse,
        event,
        chain_holds,
        radius,
        steps: sel.stopped_at,
    })
}

fn default_transductive_n() -> usize {
    64
}

fn default_transductive_m() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransductiveConfig {
    pub model: ModelSpec,
    pub variant: BoundVariant,
    pub epsilon: f64,
    #[serde(default)]
    pub mode: LabelMode,
    #[serde(rename = "N", default = "default_transductive_n")]
    pub n: usize,
    #[serde(default = "default_transductive_m")]
    pub m: usize,
    #[serde(default = "default_k_test")]
    pub k_test: usize,
    #[serde(default = "default_coverage_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub schedule: Schedule,
}

impl TransductiveConfig {
    /// A dominant constant with bounded noise. At desk-scale N the bounded-response
    /// bound only admits steps when one coefficient carries most of `sup |Y|`.
    pub fn default_model() -> ModelSpec {
        ModelSpec {
            truth: TruthSpec::Coefficients {
                basis: Basis::Trigonometric,
                coefficients: vec![3.0],
            },
            noise: Noise::Uniform { a: 0.5 },
        }
    }
}

/// Runs the transductive algorithm end to end on simulated exchangeable samples.
pub fn transductive_experiment(cfg: &TransductiveConfig, seed: u64, budget: Budget) -> Result<ExperimentReport> {
    if !cfg.variant.is_transductive() {
        return Err(Error::config(format!("{} is not a transductive bound", cfg.variant)));
    }
    if cfg.replicates == 0 || cfg.k_test == 0 {
        return Err(Error::config("transductive experiments need replicates >= 1 and k_test >= 1"));
    }
    let model = SyntheticModel::from_spec(&cfg.model)?;
    let dict = model.basis.dictionary(cfg.m)?;
    honest_bound(&model, cfg.variant, cfg.epsilon, cfg.mode, cfg.n, cfg.k_test, cfg.m)?;
    let jobs: Vec<(usize, usize)> = (0..cfg.replicates).map(|r| (cfg.n, r)).collect();
    let results = run_jobs(jobs, budget, |n, r| {
        let mut rng = rng_for(seed, 3, n, r);
        let ds = generate(&model, n, cfg.k_test, &mut rng)?;
        let spec = honest_bound(&model, cfg.variant, cfg.epsilon, cfg.mode, n, cfg.k_test, cfg.m)?;
        let t = transductive_replicate(&ds, &dict, &spec, &SelectorConfig::default().with_schedule(cfg.schedule))?;
        Ok(GridRow {
            n,
            replicate: r,
            mse: t.test_mse,
            coverage_event: t.event,
            seed,
            chain_holds: Some(t.chain_holds),
            baseline_mse: Some(t.baseline_mse),
        })
    })?;
    Ok(ExperimentReport::assemble(ExperimentKind::Transductive, cfg.variant, results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn noiseless_constant_truth() {
        let model = SyntheticModel::new(Basis::Trigonometric, vec![0.7], Noise::None, Regularity::Unspecified).unwrap();
        let ds = generate_seeded(&model, 10, 1, 3).unwrap();
        assert!(ds.train_y.iter().all(|y| *y == 0.7));
        assert!(ds.hidden_y.as_ref().unwrap().iter().all(|y| *y == 0.7));
        assert_eq!(model.sup_bound, 0.7);
    }

    #[test]
    fn generation_is_deterministic() {
        let model = SyntheticModel::sobolev(1.0, 1.0, 64, Noise::Gaussian { sigma: 0.3 }).unwrap();
        let a = generate_seeded(&model, 20, 2, 11).unwrap();
        let b = generate_seeded(&model, 20, 2, 11).unwrap();
        let c = generate_seeded(&model, 20, 2, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.n_test(), 40);
    }

    #[test]
    fn noise_is_centered() {
        let mut rng = rng_for(5, 9, 0, 0);
        for noise in [Noise::Gaussian { sigma: 1.0 }, Noise::Uniform { a: 1.0 }, Noise::Rademacher { a: 1.0 }] {
            let n = 1_000_000;
            let mean = (0..n).map(|_| noise.sample(&mut rng)).sum::<f64>() / n as f64;
            let sd = noise.second_moment().sqrt();
            assert!(mean.abs() <= 5.0 * sd / 1e3, "{noise:?}: {mean}");
        }
    }

    #[test]
    fn excess_risk_examples() {
        let model = SyntheticModel::new(Basis::Trigonometric, vec![2.0], Noise::None, Regularity::Unspecified).unwrap();
        assert_eq!(exact_excess_risk(&model, &Basis::Trigonometric, &[2.0]).unwrap(), 0.0);
        assert_eq!(exact_excess_risk(&model, &Basis::Trigonometric, &[0.0]).unwrap(), 4.0);
        assert_eq!(exact_excess_risk(&model, &Basis::Trigonometric, &[2.0, 1.0]).unwrap(), 1.0);
        let haar = Basis::Haar { lo: 0.0, hi: 1.0 };
        assert_eq!(exact_excess_risk(&model, &haar, &[2.0]).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn excess_risk_matches_monte_carlo() {
        let model = SyntheticModel::sobolev(1.0, 1.0, 16, Noise::None).unwrap();
        let c: Vec<f64> = (0..12).map(|k| 0.3 * ((k as f64) * 1.7).sin()).collect();
        let exact = exact_excess_risk(&model, &Basis::Trigonometric, &c).unwrap();
        let dict = build_trigonometric(12).unwrap();
        let mut rng = rng_for(1, 7, 0, 0);
        let n = 10_000_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        let batch = 100_000;
        for _ in 0..n / batch {
            let xs: Vec<DesignPoint> = (0..batch).map(|_| DesignPoint::scalar(rng.random())).collect();
            let fx = model.f(&xs).unwrap();
            let mut i = 0;
            dict.for_each_row(&xs, |_, row| {
                let p: f64 = row.iter().zip(&c).map(|(t, c)| t * c).sum();
                let d = (p - fx[i]).powi(2);
                sum += d;
                sum2 += d * d;
                i += 1;
            })
            .unwrap();
        }
        let mean = sum / n as f64;
        let se = ((sum2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - exact).abs() <= 3.0 * se, "mc {mean} exact {exact} se {se}");
    }

    #[test]
    fn sup_bounds_cover_the_truth() {
        let model = SyntheticModel::sobolev(1.0, 1.0, 256, Noise::None).unwrap();
        let xs: Vec<DesignPoint> = (0..100_003).map(|i| DesignPoint::scalar(i as f64 / 100_002.0)).collect();
        let fmax = model.f(&xs).unwrap().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(model.sup_bound >= fmax);
        assert!(model.sup_bound <= 1.05 * fmax);
        let besov = SyntheticModel::besov(1.5, 1.0, 6, 1.0, 1.0 / 3.0, Noise::None).unwrap();
        let xs: Vec<DesignPoint> = (0..10_001).map(|i| DesignPoint::scalar(-1.0 + 2.0 * i as f64 / 10_000.0)).collect();
        let fmax = besov.f(&xs).unwrap().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert_abs_diff_eq!(besov.sup_bound, fmax, epsilon = 1e-12);
    }

    #[test]
    fn size_and_epsilon_rules() {
        assert_eq!(SizeRule::PowerOfTwo.apply(100), 64);
        assert_eq!(SizeRule::PowerOfTwo.apply(128), 128);
        assert_eq!(SizeRule::Linear.apply(100), 100);
        assert_eq!(EpsilonRule::InverseSquare.apply(10), 0.01);
    }

    #[test]
    fn ols_recovers_a_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let (b, se, a) = ols_slope(&x, &y).unwrap();
        assert_abs_diff_eq!(b, -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(a, 2.0, epsilon = 1e-12);
        assert!(se < 1e-12);
    }

    #[test]
    fn unbounded_noise_rejected_for_bounded_variant() {
        let cfg = CoverageConfig {
            model: ModelSpec {
                truth: TruthSpec::Coefficients {
                    basis: Basis::Trigonometric,
                    coefficients: vec![1.0],
                },
                noise: Noise::Gaussian { sigma: 1.0 },
            },
            variant: BoundVariant::TrBasicBounded,
            epsilon: 0.1,
            mode: LabelMode::Deployment,
            n: 16,
            m: 4,
            k_test: 1,
            replicates: 100,
            schedule: Schedule::GreedyMax,
        };
        assert_eq!(coverage_study(&cfg, 1, Budget::unlimited()).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn experiment_kind_names() {
        assert_eq!("rate-sobolev".parse::<ExperimentKind>().unwrap(), ExperimentKind::RateSobolev);
        assert_eq!(ExperimentKind::RateBesov.to_string(), "rate-besov");
        assert!("rates".parse::<ExperimentKind>().is_err());
    }
}

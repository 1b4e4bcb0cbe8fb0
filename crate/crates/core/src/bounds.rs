//! Per-feature confidence radii `β(ε, k)`.
//!
//! Every variant keeps only the observable leading terms of its deviation
//! inequality. Logs are natural. A radius also fixes the center `C_k α̂_k` of the
//! confidence slab, since the leave-one-out variant recenters on a reduced sample.
//!
//! Transductive variants have two label modes. In `deployment` the unobservable
//! test-label sums are replaced by majorants built from declared constants; in
//! `simulation` they are computed from the hidden test labels.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::DesignMoments;
use crate::stats::{FeatureStats, SampleStats, TestStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BoundVariant {
    IndExact,
    IndVarFirstOrder,
    IndSvm,
    TrBasicBounded,
    TrFirstOrder,
    TrVariance,
    TrGeneralK,
}

impl BoundVariant {
    pub const ALL: [BoundVariant; 7] = [
        BoundVariant::IndExact,
        BoundVariant::IndVarFirstOrder,
        BoundVariant::IndSvm,
        BoundVariant::TrBasicBounded,
        BoundVariant::TrFirstOrder,
        BoundVariant::TrVariance,
        BoundVariant::TrGeneralK,
    ];

    pub fn is_transductive(self) -> bool {
        matches!(
            self,
            BoundVariant::TrBasicBounded
                | BoundVariant::TrFirstOrder
                | BoundVariant::TrVariance
                | BoundVariant::TrGeneralK
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            BoundVariant::IndExact => "IndExact",
            BoundVariant::IndVarFirstOrder => "IndVarFirstOrder",
            BoundVariant::IndSvm => "IndSvm",
            BoundVariant::TrBasicBounded => "TrBasicBounded",
            BoundVariant::TrFirstOrder => "TrFirstOrder",
            BoundVariant::TrVariance => "TrVariance",
            BoundVariant::TrGeneralK => "TrGeneralK",
        }
    }
}

impl fmt::Display for BoundVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BoundVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BoundVariant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<&str> = BoundVariant::ALL.iter().map(|v| v.name()).collect();
                Error::config(format!(
                    "unknown bound variant {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    #[default]
    Deployment,
    Simulation,
}

/// Sub-exponential constants with `P exp(β_h |θ_h(X) Y|) ≤ B_h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubExp {
    pub beta_h: f64,
    #[serde(rename = "B_h")]
    pub big_b_h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSpec {
    pub variant: BoundVariant,
    pub epsilon: f64,
    /// Bound on `|f|` (inductive) or on `|Y|` (transductive).
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<f64>,
    /// One entry for all features, or one per feature.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subexp: Option<Vec<SubExp>>,
    /// Constants with `P exp(b_y |Y|) ≤ B_y`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_y: Option<f64>,
    #[serde(rename = "B_y", default, skip_serializing_if = "Option::is_none")]
    pub big_b_y: Option<f64>,
    #[serde(default)]
    pub mode: LabelMode,
}

impl BoundSpec {
    pub fn new(variant: BoundVariant, epsilon: f64) -> Self {
        BoundSpec {
            variant,
            epsilon,
            b: None,
            sigma2: None,
            subexp: None,
            b_y: None,
            big_b_y: None,
            mode: LabelMode::Deployment,
        }
    }

    pub fn with_b(mut self, b: f64) -> Self {
        self.b = Some(b);
        self
    }

    pub fn with_sigma2(mut self, s: f64) -> Self {
        self.sigma2 = Some(s);
        self
    }

    pub fn with_subexp(mut self, beta_h: f64, big_b_h: f64) -> Self {
        self.subexp = Some(vec![SubExp { beta_h, big_b_h }]);
        self
    }

    pub fn with_b_y(mut self, b_y: f64, big_b_y: f64) -> Self {
        self.b_y = Some(b_y);
        self.big_b_y = Some(big_b_y);
        self
    }

    pub fn with_mode(mut self, mode: LabelMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.epsilon;
        if !(e > 0.0 && e < 1.0) {
            return Err(Error::config(format!("epsilon must lie in (0, 1), got {e}")));
        }
        let nonneg = |name: &str, v: Option<f64>| match v {
            Some(x) if !(x >= 0.0 && x.is_finite()) => Err(Error::config(format!(
                "{name} must be a finite nonnegative number, got {x}"
            ))),
            _ => Ok(()),
        };
        nonneg("B", self.b)?;
        nonneg("sigma2", self.sigma2)?;
        if let Some(list) = &self.subexp {
            if list.is_empty() {
                return Err(Error::config("subexp is empty"));
            }
            for s in list {
                if !(s.beta_h > 0.0 && s.beta_h.is_finite()) {
                    return Err(Error::config(format!("subexp beta_h must be > 0, got {}", s.beta_h)));
                }
                if !(s.big_b_h >= 1.0 && s.big_b_h.is_finite()) {
                    return Err(Error::config(format!("subexp B_h must be >= 1, got {}", s.big_b_h)));
                }
            }
        }
        if let Some(b) = self.b_y {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::config(format!("b_y must be > 0, got {b}")));
            }
        }
        if let Some(b) = self.big_b_y {
            if !(b >= 1.0 && b.is_finite()) {
                return Err(Error::config(format!("B_y must be >= 1, got {b}")));
            }
        }
        if self.mode == LabelMode::Simulation && !self.variant.is_transductive() {
            return Err(Error::config(format!(
                "simulation mode only applies to transductive variants, not {}",
                self.variant
            )));
        }
        Ok(())
    }

    fn require(&self, name: &str, v: Option<f64>) -> Result<f64> {
        v.ok_or_else(|| {
            Error::config(format!("bound variant {} requires field `{name}`", self.variant))
        })
    }

    fn subexp_for(&self, h: usize, m: usize) -> Result<SubExp> {
        let list = self.subexp.as_ref().ok_or_else(|| {
            Error::config(format!(
                "bound variant {} requires field `subexp`",
                self.variant
            ))
        })?;
        match list.len() {
            1 => Ok(list[0]),
            l if l == m => Ok(list[h]),
            l => Err(Error::config(format!(
                "subexp has {l} entries; expected 1 or one per feature ({m})"
            ))),
        }
    }
}

/// The confidence slab of every feature: center `C_k α̂_k`, radius `β` and
/// coefficient threshold `τ_k = sqrt(β / v_k)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfidenceRadius {
    pub variant: BoundVariant,
    pub epsilon: f64,
    pub mode: LabelMode,
    pub v: Vec<f64>,
    pub center: Vec<f64>,
    pub beta: Vec<f64>,
    pub tau: Vec<f64>,
    pub observables: BTreeMap<String, Vec<f64>>,
}

impl ConfidenceRadius {
    pub fn m(&self) -> usize {
        self.beta.len()
    }

    /// Whether feature `k` can be selected.
    pub fn is_active(&self, k: usize) -> bool {
        self.v[k] > 0.0 && self.tau[k].is_finite()
    }
}

// Scalar formulas. All take natural logs and return β.

/// `4[1 + log(2m/ε)]/N · [s2y2/v + B² + σ²]`
pub fn ind_exact_beta(n: usize, m: usize, eps: f64, t2y2_mean: f64, v: f64, b: f64, sigma2: f64) -> f64 {
    let n = n as f64;
    let l = (2.0 * m as f64 / eps).ln();
    4.0 * (1.0 + l) / n * (t2y2_mean / v + b * b + sigma2)
}

/// `2 log(4m/ε)/N · V̂/v`
pub fn ind_var_first_order_beta(n: usize, m: usize, eps: f64, var: f64, v: f64) -> f64 {
    let l = (4.0 * m as f64 / eps).ln();
    2.0 * l / n as f64 * var / v
}

/// `2 log(2Nm′/ε)/(N−1) · V̂_loo/v`
pub fn ind_svm_beta(n: usize, mprime: usize, eps: f64, loo_var: f64, v: f64) -> f64 {
    let l = (2.0 * n as f64 * mprime as f64 / eps).ln();
    2.0 * l / (n as f64 - 1.0) * loo_var / v
}

/// `4[B_term + s2y2/test_sq] · log(2m/ε)/N`; `b_term` is `B²` or the test-label ratio.
pub fn tr_basic_bounded_beta(n: usize, m: usize, eps: f64, b_term: f64, t2y2_mean: f64, test_sq: f64) -> f64 {
    let l = (2.0 * m as f64 / eps).ln();
    4.0 * (b_term + t2y2_mean / test_sq) * l / n as f64
}

/// Simulation form: `8 log(4m/ε)/N · [ratio + sqrt((1/N) Σ_{2N} θ⁴Y⁴ · log(2m/ε)/(2N))]`
pub fn tr_first_order_sim_beta(n: usize, m: usize, eps: f64, ratio: f64, t4y4_sum: f64) -> f64 {
    let nf = n as f64;
    let mf = m as f64;
    let l4 = (4.0 * mf / eps).ln();
    let l2 = (2.0 * mf / eps).ln();
    8.0 * l4 / nf * (ratio + (t4y4_sum / nf * l2 / (2.0 * nf)).sqrt())
}

/// Deployment form with `P exp(b_Y |Y|) ≤ B_Y`:
/// `8 log(8m/ε)/N · [ratio + sqrt((1/N) Σ_{2N} θ⁴ · log(4m/ε) · log⁴(4N B_Y/ε) / (2N b_Y⁴))]`
pub fn tr_first_order_dep_beta(n: usize, m: usize, eps: f64, ratio: f64, t4_sum: f64, b_y: f64, big_b_y: f64) -> f64 {
    let nf = n as f64;
    let mf = m as f64;
    let l8 = (8.0 * mf / eps).ln();
    let l4 = (4.0 * mf / eps).ln();
    let ly = (4.0 * nf * big_b_y / eps).ln();
    8.0 * l8 / nf * (ratio + (t4_sum / nf * l4 * ly.powi(4) / (2.0 * nf * b_y.powi(4))).sqrt())
}

/// `1/(1 − 2 log(4m/ε)/N)`, or an error when the denominator is not positive.
pub fn tr_variance_prefactor(n: usize, m: usize, eps: f64) -> Result<f64> {
    let l = (4.0 * m as f64 / eps).ln();
    let d = 1.0 - 2.0 * l / n as f64;
    if d <= 0.0 {
        return Err(Error::config(format!(
            "variance bound inapplicable at this N/eps: N = {n} <= 2 log(4m/eps) = {}",
            2.0 * l
        )));
    }
    Ok(1.0 / d)
}

/// `P · 4 log(4m/ε)/N · V₁/test_sq + P · 2(2+√2)(log(6m/ε)/N)^{3/2} · sqrt((1/N) Σ_{2N} θ⁴Y⁴)/test_sq`
pub fn tr_variance_beta(n: usize, m: usize, eps: f64, v1: f64, fourth_sum: f64, test_sq: f64) -> Result<f64> {
    let p = tr_variance_prefactor(n, m, eps)?;
    let nf = n as f64;
    let l4 = (4.0 * m as f64 / eps).ln();
    let l6 = (6.0 * m as f64 / eps).ln();
    let first = p * 4.0 * l4 / nf * v1 / test_sq;
    let second = p * 2.0 * (2.0 + std::f64::consts::SQRT_2) * (l6 / nf).powf(1.5) * (fourth_sum / nf).sqrt() / test_sq;
    Ok(first + second)
}

/// `(1+1/k)²/test_sq · [2𝕍 L/N + 2 L^{3/2} S³/(3 N^{3/2} 𝕍^{1/2}) + L² S⁶/(9 N² 𝕍²)]`
/// with `L = log(4m/ε)` and `S` the majorant `(2/β_h) log(4(k+1)mN B_h/ε)`.
///
/// Zero variance with a positive `S` gives an infinite radius.
pub fn tr_general_k_terms(n: usize, k: usize, l: f64, s: f64, var: f64, test_sq: f64) -> f64 {
    let nf = n as f64;
    let kf = k as f64;
    let pre = (1.0 + 1.0 / kf).powi(2) / test_sq;
    let t1 = 2.0 * var * l / nf;
    let (t3, t4) = if s == 0.0 {
        (0.0, 0.0)
    } else if var == 0.0 {
        (f64::INFINITY, f64::INFINITY)
    } else {
        (
            2.0 * l.powf(1.5) * s.powi(3) / (3.0 * nf.powf(1.5) * var.sqrt()),
            l * l * s.powi(6) / (9.0 * nf * nf * var * var),
        )
    };
    pre * (t1 + t3 + t4)
}

pub fn tr_general_k_majorant(n: usize, k: usize, m: usize, eps: f64, sub: SubExp) -> f64 {
    let arg = 4.0 * (k as f64 + 1.0) * m as f64 * n as f64 * sub.big_b_h / eps;
    2.0 / sub.beta_h * arg.ln()
}

pub fn tr_general_k_beta(n: usize, k: usize, m: usize, eps: f64, sub: SubExp, var: f64, test_sq: f64) -> f64 {
    let l = (4.0 * m as f64 / eps).ln();
    let s = tr_general_k_majorant(n, k, m, eps, sub);
    tr_general_k_terms(n, k, l, s, var, test_sq)
}

struct Builder {
    variant: BoundVariant,
    spec: BoundSpec,
    v: Vec<f64>,
    center: Vec<f64>,
    beta: Vec<f64>,
    observables: BTreeMap<String, Vec<f64>>,
}

impl Builder {
    fn new(spec: &BoundSpec, m: usize) -> Self {
        Builder {
            variant: spec.variant,
            spec: spec.clone(),
            v: Vec::with_capacity(m),
            center: Vec::with_capacity(m),
            beta: Vec::with_capacity(m),
            observables: BTreeMap::new(),
        }
    }

    fn observe(&mut self, name: &str, value: f64) {
        self.observables.entry(name.to_string()).or_default().push(value);
    }

    fn push(&mut self, v: f64, center: f64, beta: f64) {
        self.v.push(v);
        if v > 0.0 {
            self.center.push(center);
            self.beta.push(beta.max(0.0));
        } else {
            self.center.push(0.0);
            self.beta.push(f64::INFINITY);
        }
    }

    fn finish(self) -> ConfidenceRadius {
        let tau = self
            .v
            .iter()
            .zip(&self.beta)
            .map(|(v, b)| if *v > 0.0 { (b / v).sqrt() } else { f64::INFINITY })
            .collect();
        ConfidenceRadius {
            variant: self.variant,
            epsilon: self.spec.epsilon,
            mode: self.spec.mode,
            v: self.v,
            center: self.center,
            beta: self.beta,
            tau,
            observables: self.observables,
        }
    }
}

fn check_dims(stats: &SampleStats, v: &[f64]) -> Result<()> {
    if stats.m() != v.len() {
        return Err(Error::config(format!(
            "{} features in the statistics but {} second moments",
            stats.m(),
            v.len()
        )));
    }
    if stats.m() == 0 {
        return Err(Error::config("empty dictionary"));
    }
    Ok(())
}

fn require_k1(spec: &BoundSpec, stats: &SampleStats) -> Result<()> {
    if stats.k_test != 1 {
        return Err(Error::config(format!(
            "{} needs a test sample of the same size as the training sample (k = 1), got k = {}; use TrGeneralK",
            spec.variant, stats.k_test
        )));
    }
    Ok(())
}

fn test_of<'a>(spec: &BoundSpec, f: &'a FeatureStats) -> Result<&'a TestStats> {
    f.test.as_ref().ok_or_else(|| {
        Error::config(format!("{} needs unlabeled test points", spec.variant))
    })
}

fn labeled_test_of<'a>(spec: &BoundSpec, f: &'a FeatureStats) -> Result<&'a crate::stats::TestLabelStats> {
    test_of(spec, f)?.labeled.as_ref().ok_or_else(|| {
        Error::config(format!(
            "{} in simulation mode needs the hidden test labels",
            spec.variant
        ))
    })
}

/// Inductive bound with bounded `f` and known noise level.
pub fn ind_exact(stats: &SampleStats, v: &[f64], spec: &BoundSpec) -> Result<ConfidenceRadius> {
    check_dims(stats, v)?;
    let b = spec.require("B", spec.b)?;
    let sigma2 = spec.require("sigma2", spec.sigma2)?;
    let (n, m) = (stats.n_train, stats.m());
    let mut out = Builder::new(spec, m);
    for (f, &vk) in stats.features.iter().zip(v) {
        out.observe("train_t2y2_mean", f.train_t2y2_mean);
        let beta = ind_exact_beta(n, m, spec.epsilon, f.train_t2y2_mean, vk, b, sigma2);
        out.push(vk, f.train_ty_mean / vk, beta);
    }
    Ok(out.finish())
}

/// Inductive first-order bound driven by the empirical variance of `Y θ_k(X)`.
pub fn ind_var_first_order(stats: &SampleStats, v: &[f64], spec: &BoundSpec) -> Result<ConfidenceRadius> {
    check_dims(stats, v)?;
    let (n, m) = (stats.n_train, stats.m());
    if n < 2 {
        return Err(Error::config("IndVarFirstOrder needs N >= 2"));
    }
    let mut out = Builder::new(spec, m);
    for (f, &vk) in stats.features.iter().zip(v) {
        out.observe("ty_var", f.train_ty_var);
        let beta = ind_var_first_order_beta(n, m, spec.epsilon, f.train_ty_var, vk);
        out.push(vk, f.train_ty_mean / vk, beta);
    }
    Ok(out.finish())
}

/// Leave-one-out bound for dictionaries made of `m′` features per training point.
pub fn ind_svm(stats: &SampleStats, v: &[f64], mprime: usize, spec: &BoundSpec) -> Result<ConfidenceRadius> {
    check_dims(stats, v)?;
    let n = stats.n_train;
    if n < 2 {
        return Err(Error::config("IndSvm needs N >= 2 (no leave-one-out sample at N = 1)"));
    }
    if mprime == 0 {
        return Err(Error::config("IndSvm needs m' >= 1"));
    }
    let mut out = Builder::new(spec, stats.m());
    for (f, &vk) in stats.features.iter().zip(v) {
        let loo = f.loo.as_ref().ok_or_else(|| {
            Error::config("IndSvm needs a dictionary whose features are owned by training points")
        })?;
        out.observe("loo_ty_var", loo.ty_var);
        out.observe("owner", loo.owner as f64);
        let beta = ind_svm_beta(n, mprime, spec.epsilon, loo.ty_var, vk);
        out.push(vk, loo.ty_mean / vk, beta);
    }
    Ok(out.finish())
}

/// Transductive bound for `|Y| ≤ B`, `k = 1`.
pub fn tr_basic_bounded(stats: &SampleStats, v: &[f64], spec: &BoundSpec) -> Result<ConfidenceRadius> {
    check_dims(stats, v)?;
    require_k1(spec, stats)?;
    let (n, m) = (stats.n_train, stats.m());
    let b = match spec.mode {
        LabelMode::Deployment => Some(spec.require("B", spec.b)?),
        LabelMode::Simulation => None,
    };
    let mut out = Builder::new(spec, m);
    for (f, &vk) in stats.features.iter().zip(v) {
        let b_term = match b {
            Some(b) => b * b,
            None => labeled_test_of(spec, f)?.t2y2_mean / vk,
        };
        out.observe("train_t2y2_mean", f.train_t2y2_mean);
        out.observe("label_term", b_term);
        let beta = tr_basic_bounded_beta(n, m, spec.epsilon, b_term, f.train_t2y2_mean, vk);
        out.push(vk, f.train_ty_mean / vk, beta);
    }
    Ok(out.finish())
}

/// Transductive first-order bound, `k = 1`.
pub fn tr_first_order(stats: &SampleStats, v: &[f64], spec: &BoundSpec) -> Result<ConfidenceRadius> {
    check_dims(stats, v)?;
    require_k1(spec, stats)?;
    let (n, m) = (stats.n_train, stats.m());
    let consts = match spec.mode {
        LabelMode::Deployment => match (spec.b_y, spec.big_b_y) {
            (Some(b), Some(bb)) => Some((b, bb)),
            _ => {
                return Err(Error::config(
                    "TrFirstOrder needs the test labels (simulation mode) or the constants `b_y` and `B_y`",
                ))
            }
        },
        LabelMode::Simulation => None,
    };
    let mut out = Builder::new(spec, m);
    for (f, &vk) in stats.features.iter().zip(v) {
        let ratio = f.train_t2y2_mean / vk;
        let beta = match consts {
            Some((b_y, big_b_y)) => {
                let t4 = f.train_t4_sum + test_of(spec, f)?.t4_sum;
                out.observe("fourth_moment_sum", t4);
                tr_first_order_dep_beta(n, m, spec.epsilon, ratio, t4, b_y, big_b_y)
            }
            None => {
                let t4y4 = f.train_t4y4_sum + labeled_test_of(spec, f)?.t4y4_sum;
                out.observe("fourth_moment_sum", t4y4);
                tr_first_order_sim_beta(n, m, spec.epsilon, ratio, t4y4)
            }
        };
        out.observe("ratio", ratio);
        out.push(vk, f.train_ty_mean / vk, beta);
    }
    Ok(out.finish())
}

/// Transductive variance bound, `k = 1`.
///
/// In deployment mode the fourth-moment factor is majorized by `B⁴ Σ_{2N} θ⁴`.
pub fn tr_variance(stats: &SampleStats, v: &[f64], spec: &BoundSpec) -> Result<ConfidenceRadius> {
    check_dims(stats, v)?;
    require_k1(spec, stats)?;
    let (n, m) = (stats.n_train, stats.m());
    tr_variance_prefactor(n, m, spec.epsilon)?;
    let b = match spec.mode {
        LabelMode::Deployment => Some(spec.require("B", spec.b)?),
        LabelMode::Simulation => None,
    };
    let mut out = Builder::new(spec, m);
    for (f, &vk) in stats.features.iter().zip(v) {
        let fourth = match b {
            Some(b) => b.powi(4) * (f.train_t4_sum + test_of(spec, f)?.t4_sum),
            None => f.train_t4y4_sum + labeled_test_of(spec, f)?.t4y4_sum,
        };
        out.observe("v1", f.train_ty_var);
        out.observe("fourth_moment_sum", fourth);
        let beta = tr_variance_beta(n, m, spec.epsilon, f.train_ty_var, fourth, vk)?;
        out.push(vk, f.train_ty_mean / vk, beta);
    }
    Ok(out.finish())
}

/// Transductive bound for any test multiplier `k ≥ 1`.
pub fn tr_general_k(stats: &SampleStats, v: &[f64], spec: &BoundSpec) -> Result<ConfidenceRadius> {
    check_dims(stats, v)?;
    let (n, k, m) = (stats.n_train, stats.k_test, stats.m());
    if k == 0 {
        return Err(Error::config("TrGeneralK needs unlabeled test points (k >= 1)"));
    }
    let mut out = Builder::new(spec, m);
    for (h, (f, &vk)) in stats.features.iter().zip(v).enumerate() {
        let sub = spec.subexp_for(h, m)?;
        let s = tr_general_k_majorant(n, k, m, spec.epsilon, sub);
        out.observe("variance", f.train_ty_var);
        out.observe("s_majorant", s);
        let l = (4.0 * m as f64 / spec.epsilon).ln();
        let beta = tr_general_k_terms(n, k, l, s, f.train_ty_var, vk);
        out.push(vk, f.train_ty_mean / vk, beta);
    }
    Ok(out.finish())
}

/// Computes the radius of `spec.variant`, taking `v_k` from `moments`.
///
/// `mprime` is the number of features per training point, used by `IndSvm` only.
pub fn confidence_radius(
    spec: &BoundSpec,
    stats: &SampleStats,
    moments: &DesignMoments,
    mprime: Option<usize>,
) -> Result<ConfidenceRadius> {
    spec.validate()?;
    let v = moments.diag();
    if spec.variant.is_transductive() && stats.k_test == 0 {
        return Err(Error::config(format!(
            "{} is a transductive bound and needs unlabeled test points",
            spec.variant
        )));
    }
    if !spec.variant.is_transductive() && stats.k_test != 0 {
        return Err(Error::config(format!(
            "{} is an inductive bound; drop the test points or use a transductive variant",
            spec.variant
        )));
    }
    let mut r = match spec.variant {
        BoundVariant::IndExact => ind_exact(stats, &v, spec),
        BoundVariant::IndVarFirstOrder => ind_var_first_order(stats, &v, spec),
        BoundVariant::IndSvm => {
            let mp = match mprime {
                Some(mp) => mp,
                None if stats.m().is_multiple_of(stats.n_train) => stats.m() / stats.n_train,
                None => {
                    return Err(Error::config(
                        "IndSvm needs m = N * m' features (m' per training point)",
                    ))
                }
            };
            ind_svm(stats, &v, mp, spec)
        }
        BoundVariant::TrBasicBounded => tr_basic_bounded(stats, &v, spec),
        BoundVariant::TrFirstOrder => tr_first_order(stats, &v, spec),
        BoundVariant::TrVariance => tr_variance(stats, &v, spec),
        BoundVariant::TrGeneralK => tr_general_k(stats, &v, spec),
    }?;
    for (k, d) in moments.degenerate.iter().enumerate() {
        if *d {
            r.beta[k] = f64::INFINITY;
            r.tau[k] = f64::INFINITY;
            r.center[k] = 0.0;
        }
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::FeatureMatrix;
    use crate::stats::compute_stats;
    use approx::assert_abs_diff_eq;

    const E: f64 = std::f64::consts::E;

    fn const_stats(rows: usize, train_y: &[f64], test_y: Option<&[f64]>) -> SampleStats {
        let f = FeatureMatrix::from_rows(&vec![vec![1.0]; rows]).unwrap();
        compute_stats(&f, train_y, test_y, None).unwrap()
    }

    #[test]
    fn ind_exact_examples() {
        assert_abs_diff_eq!(ind_exact_beta(4, 1, 2.0 / E, 0.0, 1.0, 0.0, 1.0), 2.0, epsilon = 1e-12);
        let s = const_stats(3, &[0.0; 3], None);
        let spec = BoundSpec::new(BoundVariant::IndExact, 0.1).with_b(0.0).with_sigma2(0.0);
        assert_eq!(ind_exact(&s, &[1.0], &spec).unwrap().beta, vec![0.0]);
        let a = ind_exact_beta(10, 3, 0.1, 0.7, 1.3, 1.0, 0.5);
        let b = ind_exact_beta(20, 3, 0.1, 0.7, 1.3, 1.0, 0.5);
        assert_abs_diff_eq!(a / b, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn ind_exact_missing_sigma_names_field() {
        let s = const_stats(3, &[1.0; 3], None);
        let spec = BoundSpec::new(BoundVariant::IndExact, 0.1).with_b(1.0);
        let err = ind_exact(&s, &[1.0], &spec).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("sigma2"), "{err}");
    }

    #[test]
    fn ind_var_first_order_examples() {
        let f = FeatureMatrix::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        let s = compute_stats(&f, &[1.0, 1.0], None, None).unwrap();
        let spec = BoundSpec::new(BoundVariant::IndVarFirstOrder, 4.0 / E);
        let r = ind_var_first_order(&s, &[1.0], &spec).unwrap();
        assert_abs_diff_eq!(r.beta[0], 1.0, epsilon = 1e-12);
        let s = const_stats(4, &[2.0; 4], None);
        assert_eq!(ind_var_first_order(&s, &[1.0], &spec).unwrap().beta, vec![0.0]);
        assert_abs_diff_eq!(
            ind_var_first_order_beta(9, 2, 0.1, 3.0, 0.5),
            3.0 * ind_var_first_order_beta(9, 2, 0.1, 1.0, 0.5),
            epsilon = 1e-12
        );
    }

    #[test]
    fn ind_svm_examples() {
        let f = FeatureMatrix::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        let s = compute_stats(&f, &[0.0; 3], None, Some(&[0])).unwrap();
        let spec = BoundSpec::new(BoundVariant::IndSvm, 0.1);
        assert_eq!(ind_svm(&s, &[1.0], 1, &spec).unwrap().beta, vec![0.0]);

        let eps = 0.1;
        let one = ind_svm_beta(3, 1, eps, 1.0, 1.0);
        let two = ind_svm_beta(3, 2, eps, 1.0, 1.0);
        assert_abs_diff_eq!(two / one, (12.0 / eps).ln() / (6.0 / eps).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(
            (12.0 / eps).ln() - (6.0 / eps).ln(),
            2f64.ln(),
            epsilon = 1e-12
        );

        let s = compute_stats(&f, &[1.0, 2.0, 3.0], None, Some(&[0])).unwrap();
        let r = ind_svm(&s, &[1.0], 1, &spec).unwrap();
        assert_abs_diff_eq!(r.observables["loo_ty_var"][0], 0.25);
        assert_abs_diff_eq!(r.center[0], 2.5);
        assert_abs_diff_eq!(r.beta[0], 2.0 * (6.0 / eps).ln() / 2.0 * 0.25, epsilon = 1e-12);

        let f1 = FeatureMatrix::from_rows(&[vec![1.0]]).unwrap();
        let s1 = compute_stats(&f1, &[1.0], None, Some(&[0])).unwrap();
        assert!(ind_svm(&s1, &[1.0], 1, &spec).is_err());
    }

    #[test]
    fn tr_basic_bounded_examples() {
        let spec = BoundSpec::new(BoundVariant::TrBasicBounded, 2.0 / E).with_b(1.0);
        let s = const_stats(8, &[1.0, -1.0, 1.0, -1.0], None);
        let r = tr_basic_bounded(&s, &[1.0], &spec).unwrap();
        assert_abs_diff_eq!(r.beta[0], 2.0, epsilon = 1e-12);

        let zero = BoundSpec::new(BoundVariant::TrBasicBounded, 0.1).with_b(0.0);
        let s = const_stats(8, &[0.0; 4], None);
        assert_eq!(tr_basic_bounded(&s, &[1.0], &zero).unwrap().beta, vec![0.0]);

        let s3 = const_stats(9, &[1.0; 3], None);
        let err = tr_basic_bounded(&s3, &[1.0], &spec).unwrap_err();
        assert!(err.to_string().contains("TrGeneralK"), "{err}");
    }

    #[test]
    fn tr_basic_bounded_is_invariant_under_train_permutation() {
        let rows = vec![vec![0.3, 1.0], vec![-0.7, 2.0], vec![1.1, 0.5], vec![0.2, 0.1], vec![0.9, 1.0], vec![0.4, 0.6]];
        let ys = [1.0, -0.5, 0.25];
        let spec = BoundSpec::new(BoundVariant::TrBasicBounded, 0.1).with_b(1.0);
        let f = FeatureMatrix::from_rows(&rows).unwrap();
        let s = compute_stats(&f, &ys, None, None).unwrap();
        let v: Vec<f64> = s.features.iter().map(|f| f.test.as_ref().unwrap().sq_mean).collect();
        let a = tr_basic_bounded(&s, &v, &spec).unwrap();
        let perm = vec![rows[2].clone(), rows[0].clone(), rows[1].clone(), rows[3].clone(), rows[4].clone(), rows[5].clone()];
        let s2 = compute_stats(&FeatureMatrix::from_rows(&perm).unwrap(), &[ys[2], ys[0], ys[1]], None, None).unwrap();
        let b = tr_basic_bounded(&s2, &v, &spec).unwrap();
        for (x, y) in a.beta.iter().zip(&b.beta) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-15);
        }
    }

    #[test]
    fn tr_first_order_examples() {
        let eps = 0.2;
        let spec = BoundSpec::new(BoundVariant::TrFirstOrder, eps).with_mode(LabelMode::Simulation);
        let s = const_stats(8, &[1.0; 4], Some(&[1.0; 4]));
        let r = tr_first_order(&s, &[1.0], &spec).unwrap();
        let l4 = (4.0 / eps).ln();
        let l2 = (2.0 / eps).ln();
        let oracle = 8.0 * l4 / 4.0 * (1.0 + (8.0 / 4.0 * l2 / 8.0).sqrt());
        assert_abs_diff_eq!(r.beta[0], oracle, epsilon = 1e-12);

        let s0 = const_stats(8, &[0.0; 4], Some(&[0.0; 4]));
        assert_eq!(tr_first_order(&s0, &[1.0], &spec).unwrap().beta, vec![0.0]);

        let dep = BoundSpec::new(BoundVariant::TrFirstOrder, eps);
        let err = tr_first_order(&s, &[1.0], &dep).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let hidden = const_stats(8, &[1.0; 4], None);
        assert!(tr_first_order(&hidden, &[1.0], &spec).is_err());
        let dep = dep.with_b_y(1.0, 3.0);
        let r = tr_first_order(&hidden, &[1.0], &dep).unwrap();
        let oracle = 8.0 * (8.0 / eps).ln() / 4.0
            * (1.0 + (2.0 * (4.0 / eps).ln() * (48.0 / eps).ln().powi(4) / 8.0).sqrt());
        assert_abs_diff_eq!(r.beta[0], oracle, epsilon = 1e-12);
    }

    #[test]
    fn tr_variance_examples() {
        assert_abs_diff_eq!(tr_variance_prefactor(100, 1, 0.05).unwrap(), 1.0960, epsilon = 1e-4);
        let spec = BoundSpec::new(BoundVariant::TrVariance, 0.1).with_b(0.0);
        let s = const_stats(200, &[3.0; 100], None);
        assert_eq!(tr_variance(&s, &[1.0], &spec).unwrap().beta, vec![0.0]);
        let small = const_stats(8, &[1.0; 4], None);
        let err = tr_variance(&small, &[1.0], &spec).unwrap_err();
        assert!(err.to_string().contains("inapplicable"), "{err}");
    }

    #[test]
    fn tr_general_k_examples() {
        assert_abs_diff_eq!(tr_general_k_terms(10, 1, 1.0, 0.0, 1.0, 1.0), 4.0 * 2.0 / 10.0);
        assert_eq!(tr_general_k_terms(10, 3, 2.0, 0.0, 0.0, 1.0), 0.0);
        assert_eq!(tr_general_k_terms(10, 3, 2.0, 1.0, 0.0, 1.0), f64::INFINITY);
        // the sweep decreases once the variance term dominates the log-power terms
        let sub = SubExp { beta_h: 10.0, big_b_h: 2.0 };
        let betas: Vec<f64> = [1, 2, 4, 8]
            .iter()
            .map(|&k| tr_general_k_beta(10_000, k, 10, 0.1, sub, 1.0, 1.0))
            .collect();
        assert!(betas.windows(2).all(|w| w[1] < w[0]), "{betas:?}");
        let spec = BoundSpec::new(BoundVariant::TrGeneralK, 0.1);
        let s = const_stats(8, &[1.0, 2.0, 3.0, 4.0], None);
        assert_eq!(tr_general_k(&s, &[1.0], &spec).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn third_term_constants() {
        // 16 L^{3/2} log³/(3 β³ N^{3/2} V^{1/2}) + 64 L² log⁶/(9 β⁶ N² V²)
        let (n, k, m, eps, var, test_sq) = (50, 2, 7, 0.05, 0.3, 0.8);
        let sub = SubExp { beta_h: 1.5, big_b_h: 3.0 };
        let l = (4.0 * m as f64 / eps).ln();
        let lg = (4.0 * 3.0 * m as f64 * n as f64 * 3.0 / eps).ln();
        let nf = n as f64;
        let expected = (1.5f64).powi(2) / test_sq
            * (2.0 * var * l / nf
                + 16.0 * l.powf(1.5) * lg.powi(3) / (3.0 * 1.5f64.powi(3) * nf.powf(1.5) * var.sqrt())
                + 64.0 * l * l * lg.powi(6) / (9.0 * 1.5f64.powi(6) * nf * nf * var * var));
        let got = tr_general_k_beta(n, k, m, eps, sub, var, test_sq);
        assert_abs_diff_eq!(got / expected, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = BoundSpec::new(BoundVariant::TrGeneralK, 0.05)
            .with_subexp(1.0, 2.0)
            .with_mode(LabelMode::Simulation);
        let s = serde_json::to_string(&spec).unwrap();
        assert!(s.contains("\"B_h\":2.0"), "{s}");
        let back: BoundSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, spec);
        let parsed: BoundSpec =
            serde_json::from_str(r#"{"variant":"IndExact","epsilon":0.1,"B":1,"sigma2":0.5}"#).unwrap();
        assert_eq!(parsed.b, Some(1.0));
        assert_eq!(parsed.mode, LabelMode::Deployment);
    }

    #[test]
    fn spec_validation() {
        for eps in [0.0, 1.0, -0.5, f64::NAN] {
            assert!(BoundSpec::new(BoundVariant::IndExact, eps).validate().is_err());
        }
        assert!(BoundSpec::new(BoundVariant::IndExact, 0.1).with_b(-1.0).validate().is_err());
        assert!(BoundSpec::new(BoundVariant::TrGeneralK, 0.1).with_subexp(0.0, 2.0).validate().is_err());
        assert!(BoundSpec::new(BoundVariant::TrGeneralK, 0.1).with_subexp(1.0, 0.5).validate().is_err());
        assert!(BoundSpec::new(BoundVariant::IndExact, 0.1)
            .with_mode(LabelMode::Simulation)
            .validate()
            .is_err());
        assert_eq!("trvariance".parse::<BoundVariant>().unwrap(), BoundVariant::TrVariance);
        assert!("nope".parse::<BoundVariant>().is_err());
    }

    #[test]
    fn all_variants_nonincreasing_in_epsilon() {
        let eps_grid = [0.01, 0.05, 0.1, 0.3, 0.6, 0.9];
        let nonincreasing = |f: &dyn Fn(f64) -> f64| {
            let vals: Vec<f64> = eps_grid.iter().map(|&e| f(e)).collect();
            assert!(vals.iter().all(|v| *v >= 0.0));
            assert!(vals.windows(2).all(|w| w[1] <= w[0]), "{vals:?}");
        };
        nonincreasing(&|e| ind_exact_beta(50, 8, e, 0.4, 1.0, 1.0, 0.2));
        nonincreasing(&|e| ind_var_first_order_beta(50, 8, e, 0.4, 1.0));
        nonincreasing(&|e| ind_svm_beta(50, 2, e, 0.4, 1.0));
        nonincreasing(&|e| tr_basic_bounded_beta(50, 8, e, 1.0, 0.4, 0.9));
        nonincreasing(&|e| tr_first_order_sim_beta(50, 8, e, 0.4, 30.0));
        nonincreasing(&|e| tr_first_order_dep_beta(50, 8, e, 0.4, 30.0, 1.0, 2.0));
        nonincreasing(&|e| tr_variance_beta(500, 8, e, 0.4, 30.0, 0.9).unwrap());
        nonincreasing(&|e| tr_general_k_beta(500, 2, 8, e, SubExp { beta_h: 1.0, big_b_h: 2.0 }, 0.4, 0.9));
    }

    #[test]
    fn all_variants_nonincreasing_in_n() {
        let grid = [200, 400, 800, 1600];
        let check = |f: &dyn Fn(usize) -> f64| {
            let vals: Vec<f64> = grid.iter().map(|&n| f(n)).collect();
            assert!(vals.windows(2).all(|w| w[1] <= w[0]), "{vals:?}");
        };
        check(&|n| ind_exact_beta(n, 8, 0.1, 0.4, 1.0, 1.0, 0.2));
        check(&|n| ind_var_first_order_beta(n, 8, 0.1, 0.4, 1.0));
        check(&|n| tr_basic_bounded_beta(n, 8, 0.1, 1.0, 0.4, 0.9));
        // fourth-moment sums grow with N
        check(&|n| tr_first_order_sim_beta(n, 8, 0.1, 0.4, 2.0 * n as f64));
        check(&|n| tr_variance_beta(n, 8, 0.1, 0.4, 2.0 * n as f64, 0.9).unwrap());
    }
}

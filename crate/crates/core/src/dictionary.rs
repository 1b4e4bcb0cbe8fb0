//! Finite feature families and their evaluation on design points.
//!
//! Feature indices are fixed per kind:
//! - `Trigonometric`: `1, √2 cos(2πx), √2 sin(2πx), √2 cos(4πx), ...`
//! - `Haar`: `φ, ψ_{0,1}, ψ_{1,1}, ψ_{1,2}, ψ_{2,1}, ...`
//! - `MultiscaleGaussian`: scale-major, then centers in lexicographic order
//! - `KernelPca`: eigenvalue-descending, sign-canonicalized
//!
//! Data-dependent kinds sort their input points lexicographically at
//! construction, so permuting the points yields the same dictionary.

use std::cmp::Ordering;
use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::data::DesignPoint;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DictionaryKind {
    Trigonometric,
    Haar,
    GaussianKernel,
    MultiscaleGaussian,
    KernelPca,
    ExplicitMatrix,
}

/// Positive semidefinite kernel used by kernel PCA dictionaries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Kernel {
    /// `exp(-gamma * |x - x'|^2 / 2)`
    Gaussian { gamma: f64 },
    /// `<x, x'>`
    Linear,
}

impl Kernel {
    pub fn eval(&self, a: &DesignPoint, b: &DesignPoint) -> f64 {
        match *self {
            Kernel::Gaussian { gamma } => gaussian(gamma, a.squared_distance(b)),
            Kernel::Linear => a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum(),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Kernel::Gaussian { gamma } if !(gamma > 0.0 && gamma.is_finite()) => Err(
                Error::config(format!("gaussian kernel scale must be positive, got {gamma}")),
            ),
            _ => Ok(()),
        }
    }
}

#[inline]
fn gaussian(gamma: f64, sq_dist: f64) -> f64 {
    (-gamma * sq_dist / 2.0).exp()
}

/// Eigen-features `k_l(x) = Σ_i e^l_i K(X_i, x)` of a kernel Gram matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelPca {
    pub kernel: Kernel,
    /// Design points in canonical (lexicographic) order.
    pub design: Vec<DesignPoint>,
    /// Retained eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// `eigenvectors[l][i] = e^l_i`, unit norm, first nonzero entry positive.
    pub eigenvectors: Vec<Vec<f64>>,
}

/// A finite, deterministic family of features `θ_1, ..., θ_m`.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureDictionary {
    Trigonometric {
        m: usize,
    },
    Haar {
        levels: u32,
        lo: f64,
        hi: f64,
    },
    GaussianKernel {
        centers: Vec<DesignPoint>,
        gamma: f64,
    },
    MultiscaleGaussian {
        centers: Vec<DesignPoint>,
        scales: Vec<f64>,
    },
    KernelPca(KernelPca),
    /// A precomputed feature matrix; rows are the sample rows it was built for.
    ExplicitMatrix(FeatureMatrix),
}

fn lexicographic(a: &DesignPoint, b: &DesignPoint) -> Ordering {
    for (x, y) in a.0.iter().zip(&b.0) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    a.dim().cmp(&b.dim())
}

fn canonical_points(points: &[DesignPoint]) -> Result<Vec<DesignPoint>> {
    let d = points
        .first()
        .map(DesignPoint::dim)
        .ok_or_else(|| Error::config("dictionary needs at least one point"))?;
    for (i, p) in points.iter().enumerate() {
        if p.dim() != d || d == 0 {
            return Err(Error::data(format!(
                "point {i} has dimension {}, expected {d}",
                p.dim()
            )));
        }
        if p.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(format!("point {i} has a non-finite coordinate")));
        }
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(lexicographic);
    Ok(sorted)
}

pub fn build_trigonometric(m: usize) -> Result<FeatureDictionary> {
    if m == 0 {
        return Err(Error::config("trigonometric dictionary needs m >= 1"));
    }
    Ok(FeatureDictionary::Trigonometric { m })
}

/// Haar system on `[0, 1]` with levels `0..=levels`; `m = 2^(levels+1)`.
pub fn build_haar(levels: u32) -> Result<FeatureDictionary> {
    build_haar_on(levels, 0.0, 1.0)
}

/// Haar system orthonormal for the uniform distribution on `[lo, hi]`.
pub fn build_haar_on(levels: u32, lo: f64, hi: f64) -> Result<FeatureDictionary> {
    if levels > 30 {
        return Err(Error::config(format!("haar levels {levels} too large")));
    }
    if !(lo < hi && lo.is_finite() && hi.is_finite()) {
        return Err(Error::config(format!("invalid haar interval [{lo}, {hi}]")));
    }
    Ok(FeatureDictionary::Haar { levels, lo, hi })
}

pub fn build_gaussian_kernel(centers: &[DesignPoint], gamma: f64) -> Result<FeatureDictionary> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::config(format!("gaussian scale must be positive, got {gamma}")));
    }
    Ok(FeatureDictionary::GaussianKernel {
        centers: canonical_points(centers)?,
        gamma,
    })
}

/// Gaussian features `exp(-γ_s d²(x, c_i)/2)` for every (scale, center) pair.
pub fn build_multiscale_gaussian(
    centers: &[DesignPoint],
    scales: &[f64],
) -> Result<FeatureDictionary> {
    if scales.is_empty() {
        return Err(Error::config("multiscale dictionary needs at least one scale"));
    }
    if let Some(s) = scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(Error::config(format!("gaussian scale must be positive, got {s}")));
    }
    Ok(FeatureDictionary::MultiscaleGaussian {
        centers: canonical_points(centers)?,
        scales: scales.to_vec(),
    })
}

/// Kernel PCA over `design`, keeping the `top` leading eigen-features.
pub fn build_kernel_pca(
    design: &[DesignPoint],
    kernel: Kernel,
    top: usize,
) -> Result<FeatureDictionary> {
    kernel.validate()?;
    let design = canonical_points(design)?;
    let n = design.len();
    if top == 0 || top > n {
        return Err(Error::config(format!(
            "kernel PCA top must lie in 1..={n}, got {top}"
        )));
    }
    let gram = Array2::from_shape_fn((n, n), |(i, j)| kernel.eval(&design[i], &design[j]));
    let (eigenvalues, eigenvectors) = diagonalize_kernel_matrix(&gram, top)?;
    Ok(FeatureDictionary::KernelPca(KernelPca {
        kernel,
        design,
        eigenvalues,
        eigenvectors,
    }))
}

/// Symmetric eigendecomposition of a kernel matrix, descending, sign-canonicalized.
///
/// Eigenvalues in `[-tol, 0)` are reported as 0; anything below `-tol` is an error,
/// with `tol = 1e-8 * max(1, λ_max)`.
pub fn diagonalize_kernel_matrix(
    gram: &Array2<f64>,
    top: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = gram.nrows();
    if gram.ncols() != n {
        return Err(Error::numerical("kernel matrix is not square"));
    }
    if gram.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("kernel matrix has non-finite entries"));
    }
    let mat = DMatrix::from_fn(n, n, |i, j| 0.5 * (gram[[i, j]] + gram[[j, i]]));
    let eig = SymmetricEigen::try_new(mat, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::numerical("kernel eigendecomposition did not converge"))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lmax = eig.eigenvalues[order[0]].max(0.0);
    let tol = 1e-8 * lmax.max(1.0);
    if let Some(&worst) = order.last() {
        let lmin = eig.eigenvalues[worst];
        if lmin < -tol {
            return Err(Error::numerical(format!(
                "kernel matrix is not positive semidefinite: eigenvalue {lmin}"
            )));
        }
    }
    let mut values = Vec::with_capacity(top);
    let mut vectors = Vec::with_capacity(top);
    for &idx in order.iter().take(top) {
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let pivot = v.iter().copied().find(|x| x.abs() > 1e-12).unwrap_or(1.0);
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        values.push(eig.eigenvalues[idx].max(0.0));
        vectors.push(v);
    }
    Ok((values, vectors))
}

impl FeatureDictionary {
    pub fn kind(&self) -> DictionaryKind {
        match self {
            FeatureDictionary::Trigonometric { .. } => DictionaryKind::Trigonometric,
            FeatureDictionary::Haar { .. } => DictionaryKind::Haar,
            FeatureDictionary::GaussianKernel { .. } => DictionaryKind::GaussianKernel,
            FeatureDictionary::MultiscaleGaussian { .. } => DictionaryKind::MultiscaleGaussian,
            FeatureDictionary::KernelPca(_) => DictionaryKind::KernelPca,
            FeatureDictionary::ExplicitMatrix(_) => DictionaryKind::ExplicitMatrix,
        }
    }

    /// Number of features.
    pub fn len(&self) -> usize {
        match self {
            FeatureDictionary::Trigonometric { m } => *m,
            FeatureDictionary::Haar { levels, .. } => 1usize << (levels + 1),
            FeatureDictionary::GaussianKernel { centers, .. } => centers.len(),
            FeatureDictionary::MultiscaleGaussian { centers, scales } => {
                centers.len() * scales.len()
            }
            FeatureDictionary::KernelPca(k) => k.eigenvalues.len(),
            FeatureDictionary::ExplicitMatrix(f) => f.n_features(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trigonometric and Haar families are orthonormal under their uniform design.
    pub fn is_orthonormal(&self) -> bool {
        matches!(
            self,
            FeatureDictionary::Trigonometric { .. } | FeatureDictionary::Haar { .. }
        )
    }

    /// For dictionaries built from sample points (one block of features per point),
    /// the index of the training point owning each feature. Used by leave-one-out
    /// statistics; `None` when a feature's center is not among `train`.
    pub fn owners(&self, train: &[DesignPoint]) -> Option<Vec<usize>> {
        let centers = match self {
            FeatureDictionary::GaussianKernel { centers, .. } => centers,
            FeatureDictionary::MultiscaleGaussian { centers, .. } => centers,
            _ => return None,
        };
        let per_center: Option<Vec<usize>> = centers
            .iter()
            .map(|c| train.iter().position(|t| t == c))
            .collect();
        let per_center = per_center?;
        Some(
            (0..self.len())
                .map(|k| per_center[k % centers.len()])
                .collect(),
        )
    }

    fn check_point(&self, idx: usize, p: &DesignPoint) -> Result<()> {
        if p.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(format!("point {idx} has a non-finite coordinate")));
        }
        match self {
            FeatureDictionary::Trigonometric { .. } => {
                if p.dim() != 1 || !(0.0..=1.0).contains(&p.0[0]) {
                    return Err(Error::data(format!(
                        "point {idx} ({:?}) is outside the trigonometric domain [0, 1]",
                        p.0
                    )));
                }
            }
            FeatureDictionary::Haar { lo, hi, .. } => {
                if p.dim() != 1 || !(*lo..=*hi).contains(&p.0[0]) {
                    return Err(Error::data(format!(
                        "point {idx} ({:?}) is outside the haar domain [{lo}, {hi}]",
                        p.0
                    )));
                }
            }
            FeatureDictionary::GaussianKernel { centers, .. }
            | FeatureDictionary::MultiscaleGaussian { centers, .. } => {
                if p.dim() != centers[0].dim() {
                    return Err(Error::data(format!(
                        "point {idx} has dimension {}, dictionary expects {}",
                        p.dim(),
                        centers[0].dim()
                    )));
                }
            }
            FeatureDictionary::KernelPca(k) => {
                if p.dim() != k.design[0].dim() {
                    return Err(Error::data(format!(
                        "point {idx} has dimension {}, dictionary expects {}",
                        p.dim(),
                        k.design[0].dim()
                    )));
                }
            }
            FeatureDictionary::ExplicitMatrix(_) => {
                return Err(Error::config(
                    "an explicit feature matrix cannot be evaluated at new points",
                ))
            }
        }
        Ok(())
    }

    /// Writes `θ_1(x), ..., θ_m(x)` into `out`. The point must already be validated.
    fn fill_row(&self, x: &DesignPoint, out: &mut [f64]) {
        match self {
            FeatureDictionary::Trigonometric { m } => {
                let t = x.0[0];
                out[0] = 1.0;
                let mut k = 1;
                let mut j = 1.0;
                while k < *m {
                    let (s, c) = (2.0 * PI * j * t).sin_cos();
                    out[k] = SQRT_2 * c;
                    if k + 1 < *m {
                        out[k + 1] = SQRT_2 * s;
                    }
                    k += 2;
                    j += 1.0;
                }
            }
            FeatureDictionary::Haar { levels, lo, hi } => {
                let t = (x.0[0] - lo) / (hi - lo);
                out.iter_mut().for_each(|v| *v = 0.0);
                out[0] = 1.0;
                for j in 0..=*levels {
                    let cells = 1usize << j;
                    let s = t * cells as f64;
                    let cell = (s.floor() as usize).min(cells - 1);
                    let frac = s - cell as f64;
                    let amp = (cells as f64).sqrt();
                    out[cells + cell] = if frac < 0.5 { amp } else { -amp };
                }
            }
            FeatureDictionary::GaussianKernel { centers, gamma } => {
                for (o, c) in out.iter_mut().zip(centers) {
                    *o = gaussian(*gamma, x.squared_distance(c));
                }
            }
            FeatureDictionary::MultiscaleGaussian { centers, scales } => {
                let n = centers.len();
                for (i, c) in centers.iter().enumerate() {
                    let d2 = x.squared_distance(c);
                    for (s, gamma) in scales.iter().enumerate() {
                        out[s * n + i] = gaussian(*gamma, d2);
                    }
                }
            }
            FeatureDictionary::KernelPca(k) => {
                let kx: Vec<f64> = k.design.iter().map(|d| k.kernel.eval(d, x)).collect();
                for (o, e) in out.iter_mut().zip(&k.eigenvectors) {
                    *o = e.iter().zip(&kx).map(|(a, b)| a * b).sum();
                }
            }
            FeatureDictionary::ExplicitMatrix(_) => unreachable!("checked by check_point"),
        }
    }

    /// Feature values at a single point.
    pub fn eval_point(&self, x: &DesignPoint) -> Result<Vec<f64>> {
        self.check_point(0, x)?;
        let mut row = vec![0.0; self.len()];
        self.fill_row(x, &mut row);
        Ok(row)
    }

    /// Streams feature rows point by point without materializing the matrix.
    pub fn for_each_row<F>(&self, points: &[DesignPoint], mut f: F) -> Result<()>
    where
        F: FnMut(usize, &[f64]),
    {
        let mut row = vec![0.0; self.len()];
        for (i, p) in points.iter().enumerate() {
            self.check_point(i, p)?;
            self.fill_row(p, &mut row);
            f(i, &row);
        }
        Ok(())
    }

    /// `values[(i, k)] = θ_k(points[i])`.
    pub fn evaluate(&self, points: &[DesignPoint]) -> Result<FeatureMatrix> {
        let m = self.len();
        let mut values = Array2::zeros((points.len(), m));
        for (i, p) in points.iter().enumerate() {
            self.check_point(i, p)?;
            let mut row = values.row_mut(i);
            let slice = row
                .as_slice_mut()
                .expect("rows of a standard-layout array are contiguous");
            self.fill_row(p, slice);
        }
        FeatureMatrix::new(values)
    }
}

/// `n × m` matrix of feature values; rows are sample points, columns are features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Array2<f64>,
}

impl FeatureMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(((i, k), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "feature matrix entry ({i}, {k}) is not finite"
            )));
        }
        Ok(FeatureMatrix { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::data("feature matrix rows have different lengths"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let values = Array2::from_shape_vec((n, m), flat)
            .map_err(|e| Error::data(format!("bad feature matrix shape: {e}")))?;
        Self::new(values)
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    pub fn column(&self, k: usize) -> ArrayView1<'_, f64> {
        self.values.column(k)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.values.outer_iter().map(|r| r.to_vec()).collect()
    }

    /// Rows `range` as a new matrix.
    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> FeatureMatrix {
        FeatureMatrix {
            values: self.values.slice(ndarray::s![range, ..]).to_owned(),
        }
    }

    /// Columns that vanish identically on `rows`.
    pub fn degenerate_columns(&self, rows: std::ops::Range<usize>) -> Vec<bool> {
        let block = self.values.slice(ndarray::s![rows, ..]);
        block
            .columns()
            .into_iter()
            .map(|c| c.iter().all(|v| *v == 0.0))
            .collect()
    }
}

// ---- JSON representation: {kind, m, parameters} ----

#[derive(Serialize, Deserialize)]
struct DictionaryFile {
    kind: DictionaryKind,
    m: usize,
    parameters: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct HaarParams {
    levels: u32,
    #[serde(default)]
    lo: f64,
    #[serde(default = "one")]
    hi: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Serialize, Deserialize)]
struct GaussianParams {
    centers: Vec<DesignPoint>,
    gamma: f64,
}

#[derive(Serialize, Deserialize)]
struct MultiscaleParams {
    centers: Vec<DesignPoint>,
    scales: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ExplicitParams {
    rows: Vec<Vec<f64>>,
}

impl Serialize for FeatureDictionary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::Error as _;
        let parameters: serde_json::Result<serde_json::Value> = match self {
            FeatureDictionary::Trigonometric { .. } => Ok(serde_json::json!({})),
            FeatureDictionary::Haar { levels, lo, hi } => serde_json::to_value(HaarParams {
                levels: *levels,
                lo: *lo,
                hi: *hi,
            }),
            FeatureDictionary::GaussianKernel { centers, gamma } => {
                serde_json::to_value(GaussianParams {
                    centers: centers.clone(),
                    gamma: *gamma,
                })
            }
            FeatureDictionary::MultiscaleGaussian { centers, scales } => {
                serde_json::to_value(MultiscaleParams {
                    centers: centers.clone(),
                    scales: scales.clone(),
                })
            }
            FeatureDictionary::KernelPca(k) => serde_json::to_value(k),
            FeatureDictionary::ExplicitMatrix(f) => {
                serde_json::to_value(ExplicitParams { rows: f.to_rows() })
            }
        };
        let parameters = parameters.map_err(S::Error::custom)?;
        DictionaryFile {
            kind: self.kind(),
            m: self.len(),
            parameters,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for FeatureDictionary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let file = DictionaryFile::deserialize(d)?;
        let p = file.parameters;
        let dict = match file.kind {
            DictionaryKind::Trigonometric => build_trigonometric(file.m),
            DictionaryKind::Haar => {
                let h: HaarParams = serde_json::from_value(p).map_err(D::Error::custom)?;
                build_haar_on(h.levels, h.lo, h.hi)
            }
            DictionaryKind::GaussianKernel => {
                let g: GaussianParams = serde_json::from_value(p).map_err(D::Error::custom)?;
                build_gaussian_kernel(&g.centers, g.gamma)
            }
            DictionaryKind::MultiscaleGaussian => {
                let g: MultiscaleParams = serde_json::from_value(p).map_err(D::Error::custom)?;
                build_multiscale_gaussian(&g.centers, &g.scales)
            }
            DictionaryKind::KernelPca => {
                let k: KernelPca = serde_json::from_value(p).map_err(D::Error::custom)?;
                validate_kernel_pca(&k).map(|_| FeatureDictionary::KernelPca(k))
            }
            DictionaryKind::ExplicitMatrix => {
                let e: ExplicitParams = serde_json::from_value(p).map_err(D::Error::custom)?;
                FeatureMatrix::from_rows(&e.rows).map(FeatureDictionary::ExplicitMatrix)
            }
        }
        .map_err(D::Error::custom)?;
        if dict.len() != file.m {
            return Err(D::Error::custom(format!(
                "dictionary declares m = {} but its parameters define {} features",
                file.m,
                dict.len()
            )));
        }
        Ok(dict)
    }
}

fn validate_kernel_pca(k: &KernelPca) -> Result<()> {
    k.kernel.validate()?;
    if k.design.is_empty() {
        return Err(Error::config("kernel PCA dictionary has no design points"));
    }
    if k.eigenvalues.len() != k.eigenvectors.len() {
        return Err(Error::config("kernel PCA eigenvalue/eigenvector count mismatch"));
    }
    if k.eigenvectors.iter().any(|e| e.len() != k.design.len()) {
        return Err(Error::config("kernel PCA eigenvector length differs from design size"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scalar_points;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trigonometric_values() {
        let d = build_trigonometric(1).unwrap();
        assert_eq!(d.eval_point(&0.3.into()).unwrap(), vec![1.0]);
        let d = build_trigonometric(3).unwrap();
        assert_eq!(d.eval_point(&0.0.into()).unwrap(), vec![1.0, SQRT_2, 0.0]);
        assert!(build_trigonometric(0).is_err());
    }

    #[test]
    fn trigonometric_quadrature_gram_is_identity() {
        // midpoint rule with 10^6 nodes
        let d = build_trigonometric(3).unwrap();
        let n = 1_000_000;
        let mut g = [[0.0; 3]; 3];
        for i in 0..n {
            let x = (i as f64 + 0.5) / n as f64;
            let r = d.eval_point(&x.into()).unwrap();
            for a in 0..3 {
                for b in 0..3 {
                    g[a][b] += r[a] * r[b] / n as f64;
                }
            }
        }
        for a in 0..3 {
            for b in 0..3 {
                let e = if a == b { 1.0 } else { 0.0 };
                assert!((g[a][b] - e).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn haar_signs_and_size() {
        let d = build_haar(0).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.eval_point(&0.25.into()).unwrap()[1], 1.0);
        assert_eq!(d.eval_point(&0.75.into()).unwrap()[1], -1.0);
        assert_eq!(build_haar(1).unwrap().len(), 4);
        // right endpoint belongs to the last cell
        let d2 = build_haar(1).unwrap();
        assert_eq!(d2.eval_point(&1.0.into()).unwrap(), vec![1.0, -1.0, 0.0, -SQRT_2]);
    }

    #[test]
    fn haar_monte_carlo_gram() {
        let d = build_haar(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<DesignPoint> = (0..100_000).map(|_| rng.random::<f64>().into()).collect();
        let f = d.evaluate(&pts).unwrap();
        let g = f.values().t().dot(f.values()) / pts.len() as f64;
        for a in 0..8 {
            for b in 0..8 {
                let e = if a == b { 1.0 } else { 0.0 };
                assert!((g[[a, b]] - e).abs() < 2e-2, "{a},{b}: {}", g[[a, b]]);
            }
        }
    }

    #[test]
    fn haar_on_symmetric_interval() {
        let d = build_haar_on(0, -2.0, 2.0).unwrap();
        assert_eq!(d.eval_point(&(-1.0).into()).unwrap(), vec![1.0, 1.0]);
        assert_eq!(d.eval_point(&1.0.into()).unwrap(), vec![1.0, -1.0]);
        assert!(d.eval_point(&3.0.into()).is_err());
    }

    #[test]
    fn out_of_domain_point_names_index() {
        let d = build_trigonometric(2).unwrap();
        let err = d.evaluate(&scalar_points(&[0.5, 1.5])).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("point 1"), "{err}");
    }

    #[test]
    fn gaussian_values() {
        let c = DesignPoint(vec![0.3, -1.0]);
        let d = build_multiscale_gaussian(&[c.clone()], &[5.0]).unwrap();
        assert_eq!(d.eval_point(&c).unwrap(), vec![1.0]);
        let d = build_multiscale_gaussian(&scalar_points(&[0.0]), &[2.0]).unwrap();
        assert_eq!(d.eval_point(&1.0.into()).unwrap(), vec![(-1.0f64).exp()]);
        assert!(build_multiscale_gaussian(&[], &[1.0]).is_err());
        assert!(build_multiscale_gaussian(&scalar_points(&[0.0]), &[0.0]).is_err());
        assert!(build_multiscale_gaussian(&scalar_points(&[0.0]), &[]).is_err());
    }

    #[test]
    fn multiscale_size_follows_centers_times_scales() {
        let train = scalar_points(&[0.1, 0.5, 0.2, 0.9, 0.7]);
        let scales: Vec<f64> = (1..=3).map(|j| 2f64.powi(j)).collect();
        let d = build_multiscale_gaussian(&train, &scales).unwrap();
        assert_eq!(d.len(), 15);
        let owners = d.owners(&train).unwrap();
        // sorted centers 0.1, 0.2, 0.5, 0.7, 0.9 -> train rows 0, 2, 1, 4, 3
        assert_eq!(&owners[..5], &[0, 2, 1, 4, 3]);
        assert_eq!(&owners[5..10], &owners[..5]);
    }

    #[test]
    fn multiscale_matrix_matches_scalar_formula() {
        let centers = scalar_points(&[0.2, 0.8]);
        let scales = [1.5, 6.0];
        let pts = scalar_points(&[0.0, 0.5, 0.9]);
        let f = build_multiscale_gaussian(&centers, &scales)
            .unwrap()
            .evaluate(&pts)
            .unwrap();
        assert_eq!(f.values().dim(), (3, 4));
        for (i, x) in [0.0, 0.5, 0.9].iter().enumerate() {
            for (s, g) in scales.iter().enumerate() {
                for (j, c) in [0.2, 0.8].iter().enumerate() {
                    let expected = (-g * (x - c) * (x - c) / 2.0).exp();
                    assert_abs_diff_eq!(f.values()[[i, s * 2 + j]], expected, epsilon = 1e-15);
                }
            }
        }
    }

    #[test]
    fn kernel_pca_rank_one() {
        let pts = scalar_points(&[1.0, 1.0]);
        let (vals, vecs) = {
            let gram = Array2::from_shape_fn((2, 2), |(i, j)| {
                Kernel::Linear.eval(&pts[i], &pts[j])
            });
            diagonalize_kernel_matrix(&gram, 2).unwrap()
        };
        assert_abs_diff_eq!(vals[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(vals[1], 0.0, epsilon = 1e-12);
        assert!(vecs[0][0] > 0.0);
    }

    #[test]
    fn kernel_pca_identity_matrix() {
        let gram = Array2::eye(3);
        let (vals, vecs) = diagonalize_kernel_matrix(&gram, 3).unwrap();
        assert_eq!(vals.len(), 3);
        for v in &vals {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-12);
        }
        // each eigen-feature is an indicator of one sample point
        for e in &vecs {
            let nz: Vec<f64> = e.iter().copied().filter(|x| x.abs() > 1e-12).collect();
            assert_eq!(nz.len(), 1);
            assert_abs_diff_eq!(nz[0], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn kernel_pca_reconstruction_and_orthonormality() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<DesignPoint> = (0..5)
            .map(|_| DesignPoint(vec![rng.random::<f64>(), rng.random::<f64>()]))
            .collect();
        let k = Kernel::Gaussian { gamma: 3.0 };
        let gram = Array2::from_shape_fn((5, 5), |(i, j)| k.eval(&pts[i], &pts[j]));
        let (vals, vecs) = diagonalize_kernel_matrix(&gram, 5).unwrap();
        for w in vals.windows(2) {
            assert!(w[0] >= w[1]);
        }
        let mut recon = Array2::<f64>::zeros((5, 5));
        for (l, e) in vecs.iter().enumerate() {
            for i in 0..5 {
                for j in 0..5 {
                    recon[[i, j]] += vals[l] * e[i] * e[j];
                }
            }
            // K e = λ e
            for i in 0..5 {
                let ke: f64 = (0..5).map(|j| gram[[i, j]] * e[j]).sum();
                assert_abs_diff_eq!(ke, vals[l] * e[i], epsilon = 1e-8);
            }
            for (l2, e2) in vecs.iter().enumerate() {
                let dot: f64 = e.iter().zip(e2).map(|(a, b)| a * b).sum();
                let expected = if l == l2 { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(dot, expected, epsilon = 1e-10);
            }
        }
        for (a, b) in recon.iter().zip(gram.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-10);
        }
    }

    #[test]
    fn kernel_pca_rejects_indefinite_matrix() {
        let gram = ndarray::arr2(&[[0.0, 1.0], [1.0, 0.0]]);
        let err = diagonalize_kernel_matrix(&gram, 1).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        assert!(err.to_string().contains("-1"), "{err}");
    }

    #[test]
    fn data_dependent_kinds_are_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<DesignPoint> = (0..7).map(|_| rng.random::<f64>().into()).collect();
        let perm = [3usize, 0, 6, 2, 5, 1, 4];
        let permuted: Vec<DesignPoint> = perm.iter().map(|&i| pts[i].clone()).collect();
        let builders: Vec<Box<dyn Fn(&[DesignPoint]) -> FeatureDictionary>> = vec![
            Box::new(|p| build_gaussian_kernel(p, 4.0).unwrap()),
            Box::new(|p| build_multiscale_gaussian(p, &[2.0, 8.0]).unwrap()),
            Box::new(|p| build_kernel_pca(p, Kernel::Gaussian { gamma: 10.0 }, 4).unwrap()),
        ];
        for build in &builders {
            let a = build(&pts).evaluate(&pts).unwrap();
            let b = build(&permuted).evaluate(&permuted).unwrap();
            for (r, &src) in perm.iter().enumerate() {
                for k in 0..a.n_features() {
                    assert_abs_diff_eq!(
                        b.values()[[r, k]],
                        a.values()[[src, k]],
                        epsilon = 1e-9
                    );
                }
            }
        }
    }

    #[test]
    fn gaussian_features_are_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let centers: Vec<DesignPoint> = (0..4).map(|_| rng.random::<f64>().into()).collect();
        let d = build_multiscale_gaussian(&centers, &[0.5, 2.0, 64.0]).unwrap();
        let pts: Vec<DesignPoint> = (0..50).map(|_| (rng.random::<f64>() * 3.0).into()).collect();
        let f = d.evaluate(&pts).unwrap();
        assert!(f.values().iter().all(|v| *v > 0.0 && *v <= 1.0));
    }

    #[test]
    fn evaluation_is_deterministic() {
        let d = build_trigonometric(9).unwrap();
        let pts = scalar_points(&[0.123, 0.456]);
        let a = d.evaluate(&pts).unwrap();
        let b = d.evaluate(&pts).unwrap();
        assert!(a
            .values()
            .iter()
            .zip(b.values().iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn json_round_trip_preserves_evaluation() {
        let pts = scalar_points(&[0.1, 0.4, 0.45, 0.9]);
        let dicts = vec![
            build_trigonometric(5).unwrap(),
            build_haar_on(2, -1.0, 1.0).unwrap(),
            build_gaussian_kernel(&pts, 3.0).unwrap(),
            build_multiscale_gaussian(&pts, &[2.0, 4.0]).unwrap(),
            build_kernel_pca(&pts, Kernel::Gaussian { gamma: 2.0 }, 3).unwrap(),
        ];
        for d in dicts {
            let s = serde_json::to_string(&d).unwrap();
            let v: serde_json::Value = serde_json::from_str(&s).unwrap();
            assert_eq!(v["m"].as_u64().unwrap() as usize, d.len());
            let back: FeatureDictionary = serde_json::from_str(&s).unwrap();
            assert_eq!(back, d);
            let a = d.evaluate(&pts).unwrap();
            let b = back.evaluate(&pts).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn json_rejects_inconsistent_m() {
        let s = r#"{"kind":"haar","m":3,"parameters":{"levels":1}}"#;
        assert!(serde_json::from_str::<FeatureDictionary>(s).is_err());
        let s = r#"{"kind":"haar","m":4,"parameters":{"levels":1}}"#;
        assert_eq!(
            serde_json::from_str::<FeatureDictionary>(s).unwrap(),
            build_haar(1).unwrap()
        );
    }

    #[test]
    fn degenerate_columns_are_flagged() {
        let f = FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(f.degenerate_columns(0..2), vec![false, true]);
        assert_eq!(f.degenerate_columns(2..3), vec![true, false]);
    }
}

//! Second moments of the features under the design distribution.
//!
//! The selector only ever sees a [`DesignMoments`]: the inductive engine gets it
//! from the known design law (exactly, by Monte-Carlo, or from a file) and the
//! transductive engine from the empirical measure of the test design points.
//!
//! The empirical test inner product is normalized by `1/(kN)`, the same factor
//! as the test distance `d₂`, so that `‖θ‖₂² = d₂(θ, 0)²`.

use std::io::Read;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DesignPoint;
use crate::dictionary::{FeatureDictionary, FeatureMatrix};
use crate::error::{Error, Result};

/// Where a Gram matrix came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Provenance {
    Exact,
    MonteCarlo { samples: usize, seed: u64 },
    EmpiricalTest { n_train: usize, k: usize },
    EmpiricalAll { rows: usize },
    UserSupplied { file: String },
}

/// Symmetric PSD matrix `G_{jk} = <θ_j, θ_k>`.
#[derive(Debug, Clone, PartialEq)]
pub enum Gram {
    Identity(usize),
    Dense(Array2<f64>),
}

impl Gram {
    pub fn dim(&self) -> usize {
        match self {
            Gram::Identity(m) => *m,
            Gram::Dense(g) => g.nrows(),
        }
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        match self {
            Gram::Identity(_) => {
                if j == k {
                    1.0
                } else {
                    0.0
                }
            }
            Gram::Dense(g) => g[[j, k]],
        }
    }

    /// `target += scale * G[:, j]`
    pub fn add_scaled_column(&self, target: &mut [f64], j: usize, scale: f64) {
        match self {
            Gram::Identity(_) => target[j] += scale,
            Gram::Dense(g) => {
                for (t, v) in target.iter_mut().zip(g.column(j)) {
                    *t += scale * v;
                }
            }
        }
    }

    /// `G c`
    pub fn apply(&self, c: &[f64]) -> Vec<f64> {
        match self {
            Gram::Identity(_) => c.to_vec(),
            Gram::Dense(g) => g.dot(&ndarray::ArrayView1::from(c)).to_vec(),
        }
    }

    /// `cᵀ G c`
    pub fn quadratic_form(&self, c: &[f64]) -> f64 {
        self.apply(c).iter().zip(c).map(|(a, b)| a * b).sum()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        match self {
            Gram::Identity(m) => Array2::eye(*m),
            Gram::Dense(g) => g.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMoments {
    pub gram: Gram,
    pub provenance: Provenance,
    /// Features with `v_k = 0`; they are never selected.
    pub degenerate: Vec<bool>,
}

impl DesignMoments {
    fn from_gram(gram: Gram, provenance: Provenance) -> Self {
        let m = gram.dim();
        let degenerate: Vec<bool> = (0..m)
            .map(|k| {
                let v = gram.get(k, k);
                !(v > 0.0 && v.is_finite())
            })
            .collect();
        let n_deg = degenerate.iter().filter(|d| **d).count();
        if n_deg > 0 {
            warn!("{n_deg} of {m} features have zero second moment and are excluded from selection");
        }
        DesignMoments {
            gram,
            provenance,
            degenerate,
        }
    }

    pub fn m(&self) -> usize {
        self.gram.dim()
    }

    /// `v_k = <θ_k, θ_k>`
    pub fn v(&self, k: usize) -> f64 {
        self.gram.get(k, k)
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.m()).map(|k| self.v(k)).collect()
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.gram, Gram::Identity(_))
    }

    /// Checks symmetry (1e-12) and positive semidefiniteness (smallest eigenvalue >= -1e-8).
    pub fn validate(&self) -> Result<()> {
        if let Gram::Dense(g) = &self.gram {
            check_symmetric(g)?;
            let min = min_eigenvalue(g)?;
            if min < -PSD_TOLERANCE {
                return Err(Error::numerical(format!(
                    "gram matrix is not positive semidefinite: eigenvalue {min}"
                )));
            }
        }
        Ok(())
    }
}

/// Eigenvalues in `(-PSD_TOLERANCE, 0)` are clipped; below that is an error.
pub const PSD_TOLERANCE: f64 = 1e-8;
const SYMMETRY_TOLERANCE: f64 = 1e-12;

fn check_symmetric(g: &Array2<f64>) -> Result<()> {
    if g.nrows() != g.ncols() {
        return Err(Error::numerical(format!(
            "gram matrix is {}x{}, not square",
            g.nrows(),
            g.ncols()
        )));
    }
    for ((j, k), v) in g.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::numerical(format!("gram entry ({j}, {k}) is not finite")));
        }
        if (v - g[[k, j]]).abs() > SYMMETRY_TOLERANCE {
            return Err(Error::numerical(format!(
                "gram matrix is not symmetric at ({j}, {k}): {v} vs {}",
                g[[k, j]]
            )));
        }
    }
    Ok(())
}

fn to_nalgebra(g: &Array2<f64>) -> DMatrix<f64> {
    let n = g.nrows();
    DMatrix::from_fn(n, n, |i, j| g[[i, j]])
}

fn min_eigenvalue(g: &Array2<f64>) -> Result<f64> {
    if g.nrows() == 0 {
        return Ok(0.0);
    }
    let eig = SymmetricEigen::try_new(to_nalgebra(g), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::numerical("gram eigendecomposition did not converge"))?;
    Ok(eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Clips tiny negative eigenvalues to zero, rejecting anything below `-PSD_TOLERANCE`.
pub fn repair_psd(g: &Array2<f64>) -> Result<Array2<f64>> {
    check_symmetric(g)?;
    let n = g.nrows();
    let eig = SymmetricEigen::try_new(to_nalgebra(g), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::numerical("gram eigendecomposition did not converge"))?;
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -PSD_TOLERANCE {
        return Err(Error::numerical(format!(
            "gram matrix is not positive semidefinite: eigenvalue {min}"
        )));
    }
    if min >= 0.0 {
        return Ok(g.clone());
    }
    let mut vals = eig.eigenvalues.clone();
    vals.iter_mut().for_each(|v| *v = v.max(0.0));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        0.5 * (rebuilt[(i, j)] + rebuilt[(j, i)])
    }))
}

/// Identity Gram for families orthonormal under the uniform design.
pub fn exact_moments(dict: &FeatureDictionary) -> Result<DesignMoments> {
    if !dict.is_orthonormal() {
        return Err(Error::config(format!(
            "exact moments are only known for orthonormal dictionaries; use Monte-Carlo moments for {:?}",
            dict.kind()
        )));
    }
    Ok(DesignMoments::from_gram(
        Gram::Identity(dict.len()),
        Provenance::Exact,
    ))
}

/// Design law used to draw Monte-Carlo points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Sampler {
    /// Independent uniform coordinates on `[lo, hi]^dim`.
    Uniform {
        lo: f64,
        hi: f64,
        #[serde(default = "default_dim")]
        dim: usize,
    },
}

fn default_dim() -> usize {
    1
}

impl Sampler {
    pub fn unit_interval() -> Self {
        Sampler::Uniform {
            lo: 0.0,
            hi: 1.0,
            dim: 1,
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DesignPoint {
        match *self {
            Sampler::Uniform { lo, hi, dim } => {
                DesignPoint((0..dim).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect())
            }
        }
    }
}

const MC_BATCH: usize = 1024;

/// `G = (1/M) Σ_s φ(x_s) φ(x_s)ᵀ` over `M` sampler draws.
///
/// Draws are split into fixed batches, each with its own ChaCha stream, and the
/// batch sums are reduced in batch order; the result does not depend on the
/// number of worker threads.
pub fn monte_carlo_moments(
    dict: &FeatureDictionary,
    sampler: &Sampler,
    samples: usize,
    seed: u64,
) -> Result<DesignMoments> {
    if samples == 0 {
        return Err(Error::config("Monte-Carlo moments need at least one sample"));
    }
    let m = dict.len();
    let n_batches = samples.div_ceil(MC_BATCH);
    let partials: Vec<Result<Array2<f64>>> = (0..n_batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let count = MC_BATCH.min(samples - b * MC_BATCH);
            let pts: Vec<DesignPoint> = (0..count).map(|_| sampler.draw(&mut rng)).collect();
            let f = dict.evaluate(&pts)?;
            Ok(f.values().t().dot(f.values()))
        })
        .collect();
    let mut g = Array2::<f64>::zeros((m, m));
    for p in partials {
        g += &p?;
    }
    g /= samples as f64;
    symmetrize(&mut g);
    Ok(DesignMoments::from_gram(
        Gram::Dense(g),
        Provenance::MonteCarlo { samples, seed },
    ))
}

fn symmetrize(g: &mut Array2<f64>) {
    let n = g.nrows();
    for j in 0..n {
        for k in (j + 1)..n {
            let v = 0.5 * (g[[j, k]] + g[[k, j]]);
            g[[j, k]] = v;
            g[[k, j]] = v;
        }
    }
}

/// `G_{jh} = (1/(kN)) Σ_{i=N+1}^{(k+1)N} θ_j(X_i) θ_h(X_i)` over the test rows.
pub fn empirical_test_moments(
    features: &FeatureMatrix,
    n_train: usize,
    k: usize,
) -> Result<DesignMoments> {
    let n_test = n_train * k;
    if n_test == 0 {
        return Err(Error::config(
            "empirical test moments need at least one test point (k * N > 0)",
        ));
    }
    if features.n_rows() != n_train + n_test {
        return Err(Error::data(format!(
            "feature matrix has {} rows, expected (k+1)N = {}",
            features.n_rows(),
            n_train + n_test
        )));
    }
    let test = features
        .values()
        .slice_axis(Axis(0), ndarray::Slice::from(n_train..));
    let mut g = test.t().dot(&test);
    g /= n_test as f64;
    Ok(DesignMoments::from_gram(
        Gram::Dense(g),
        Provenance::EmpiricalTest { n_train, k },
    ))
}

/// Empirical Gram over every row of `features`.
pub fn empirical_moments(features: &FeatureMatrix) -> Result<DesignMoments> {
    let n = features.n_rows();
    if n == 0 {
        return Err(Error::data("empirical moments of an empty sample"));
    }
    let v = features.values();
    let g = v.t().dot(v) / n as f64;
    Ok(DesignMoments::from_gram(
        Gram::Dense(g),
        Provenance::EmpiricalAll { rows: n },
    ))
}

/// Reads a headerless `m × m` CSV Gram matrix, validating symmetry and PSD.
pub fn read_user_gram<R: Read>(reader: R, label: &str) -> Result<DesignMoments> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::data(format!("gram row {}: {e}", i + 1)))?;
        let row: Result<Vec<f64>> = rec
            .iter()
            .enumerate()
            .map(|(j, f)| {
                f.parse::<f64>().map_err(|_| {
                    Error::data(format!(
                        "gram row {}, column {}: cannot parse {f:?}",
                        i + 1,
                        j + 1
                    ))
                })
            })
            .collect();
        rows.push(row?);
    }
    let m = rows.len();
    if m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(Error::data(format!("gram file {label} is not a square matrix")));
    }
    let g = Array2::from_shape_fn((m, m), |(i, j)| rows[i][j]);
    let g = repair_psd(&g)?;
    Ok(DesignMoments::from_gram(
        Gram::Dense(g),
        Provenance::UserSupplied {
            file: label.to_string(),
        },
    ))
}

pub fn read_user_gram_file(path: &Path) -> Result<DesignMoments> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    read_user_gram(f, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scalar_points;
    use crate::dictionary::{build_gaussian_kernel, build_haar, build_trigonometric};
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;

    #[test]
    fn exact_moments_for_orthonormal_kinds() {
        let m = exact_moments(&build_trigonometric(4).unwrap()).unwrap();
        assert_eq!(m.gram.to_dense(), Array2::<f64>::eye(4));
        let m = exact_moments(&build_haar(1).unwrap()).unwrap();
        assert_eq!(m.gram.to_dense(), Array2::<f64>::eye(4));
        let g = build_gaussian_kernel(&scalar_points(&[0.5]), 1.0).unwrap();
        let err = exact_moments(&g).unwrap_err();
        assert!(err.to_string().contains("Monte-Carlo"), "{err}");
    }

    #[test]
    fn single_sample_is_rank_one() {
        // Sampler with a degenerate interval always returns the same point.
        let d = build_trigonometric(3).unwrap();
        let s = Sampler::Uniform {
            lo: 0.3,
            hi: 0.3,
            dim: 1,
        };
        let m = monte_carlo_moments(&d, &s, 1, 0).unwrap();
        let phi = d.eval_point(&0.3.into()).unwrap();
        for j in 0..3 {
            for k in 0..3 {
                assert_abs_diff_eq!(m.gram.get(j, k), phi[j] * phi[k], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn monte_carlo_trigonometric_is_near_identity() {
        let d = build_trigonometric(3).unwrap();
        let m = monte_carlo_moments(&d, &Sampler::unit_interval(), 1_000_000, 42).unwrap();
        let g = m.gram.to_dense();
        let err = (&g - &Array2::<f64>::eye(3))
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(err <= 5e-3, "max deviation {err}");
        assert_eq!(
            m.provenance,
            Provenance::MonteCarlo {
                samples: 1_000_000,
                seed: 42
            }
        );
    }

    #[test]
    fn monte_carlo_two_seeds_agree() {
        let d = build_gaussian_kernel(&scalar_points(&[0.25, 0.75]), 8.0).unwrap();
        let a = monte_carlo_moments(&d, &Sampler::unit_interval(), 100_000, 1).unwrap();
        let b = monte_carlo_moments(&d, &Sampler::unit_interval(), 100_000, 2).unwrap();
        for j in 0..2 {
            for k in 0..2 {
                assert!((a.gram.get(j, k) - b.gram.get(j, k)).abs() < 2e-2);
            }
        }
    }

    #[test]
    fn monte_carlo_is_thread_count_independent() {
        let d = build_trigonometric(5).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| monte_carlo_moments(&d, &Sampler::unit_interval(), 10_000, 9).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn monte_carlo_variance_halves_when_samples_double() {
        let d = build_trigonometric(3).unwrap();
        let var = |samples: usize| {
            let vals: Vec<f64> = (0..30)
                .map(|s| {
                    monte_carlo_moments(&d, &Sampler::unit_interval(), samples, 1000 + s)
                        .unwrap()
                        .gram
                        .get(0, 1)
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / 30.0;
            vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 29.0
        };
        let ratio = var(2000) / var(4000);
        // F(29, 29) ratio around 2; a 0.9..4.5 window is roughly a 99% band
        assert!((0.9..4.5).contains(&ratio), "variance ratio {ratio}");
    }

    #[test]
    fn empirical_test_moments_constant_feature() {
        let f = FeatureMatrix::from_rows(&[vec![1.0], vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        let m = empirical_test_moments(&f, 2, 1).unwrap();
        assert_eq!(m.gram.to_dense(), arr2(&[[1.0]]));
    }

    #[test]
    fn empirical_test_moments_orthogonal_indicators() {
        let f = FeatureMatrix::from_rows(&[
            vec![5.0, 5.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ])
        .unwrap();
        let m = empirical_test_moments(&f, 1, 2).unwrap();
        assert_eq!(m.gram.to_dense(), arr2(&[[0.5, 0.0], [0.0, 0.5]]));
    }

    #[test]
    fn empirical_test_moments_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, k, m) = (4, 2, 3);
        let rows: Vec<Vec<f64>> = (0..(k + 1) * n)
            .map(|_| (0..m).map(|_| rng.random::<f64>() - 0.5).collect())
            .collect();
        let f = FeatureMatrix::from_rows(&rows).unwrap();
        let g = empirical_test_moments(&f, n, k).unwrap();
        for j in 0..m {
            for h in 0..m {
                let mut s = 0.0;
                for row in rows.iter().skip(n) {
                    s += row[j] * row[h];
                }
                assert_abs_diff_eq!(g.gram.get(j, h), s / (k * n) as f64, epsilon = 1e-12);
            }
        }
        // invariant under permutations of the test rows
        let mut permuted = rows.clone();
        permuted[n..].reverse();
        let g2 = empirical_test_moments(&FeatureMatrix::from_rows(&permuted).unwrap(), n, k).unwrap();
        for (a, b) in g.gram.to_dense().iter().zip(g2.gram.to_dense().iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-14);
        }
    }

    #[test]
    fn empirical_test_moments_errors() {
        let f = FeatureMatrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(empirical_test_moments(&f, 2, 0).unwrap_err().exit_code(), 2);
        assert_eq!(empirical_test_moments(&f, 1, 2).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn degenerate_feature_is_flagged() {
        let f = FeatureMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let m = empirical_test_moments(&f, 1, 1).unwrap();
        assert_eq!(m.degenerate, vec![false, true]);
    }

    #[test]
    fn user_gram_validation() {
        let ok = read_user_gram("1,0.5\n0.5,1\n".as_bytes(), "mem").unwrap();
        assert_eq!(ok.gram.to_dense(), arr2(&[[1.0, 0.5], [0.5, 1.0]]));
        let asym = read_user_gram("1,0.5\n0.4,1\n".as_bytes(), "mem").unwrap_err();
        assert_eq!(asym.exit_code(), 4);
        let indefinite = read_user_gram("1,2\n2,1\n".as_bytes(), "mem").unwrap_err();
        assert!(indefinite.to_string().contains("positive semidefinite"));
        let ragged = read_user_gram("1,2\n2\n".as_bytes(), "mem").unwrap_err();
        assert_eq!(ragged.exit_code(), 3);
    }

    #[test]
    fn tiny_negative_eigenvalues_are_clipped() {
        let eps = 1e-10;
        let g = arr2(&[[1.0, 1.0], [1.0, 1.0 - eps]]);
        let r = repair_psd(&g).unwrap();
        assert!(min_eigenvalue(&r).unwrap() >= -1e-14);
        assert!((&r - &g).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn quadratic_forms_are_nonnegative() {
        use rand::{Rng, SeedableRng};
        let d = build_gaussian_kernel(&scalar_points(&[0.1, 0.2, 0.5, 0.9]), 20.0).unwrap();
        let m = monte_carlo_moments(&d, &Sampler::unit_interval(), 5000, 3).unwrap();
        m.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let c: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let norm2: f64 = c.iter().map(|v| v * v).sum();
            assert!(m.gram.quadratic_form(&c) >= -1e-8 * norm2);
        }
    }
}

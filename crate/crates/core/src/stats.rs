//! Per-feature sample statistics consumed by the bounds.

use serde::Serialize;

use crate::data::DesignPoint;
use crate::dictionary::{FeatureDictionary, FeatureMatrix};
use crate::error::{Error, Result};

/// Statistics of one feature over the training rows, and over the test rows when present.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureStats {
    /// `(1/N) Σ_train θ²`
    pub train_sq_mean: f64,
    /// `(1/N) Σ_train θ² Y²`
    pub train_t2y2_mean: f64,
    /// `(1/N) Σ_train θ Y`
    pub train_ty_mean: f64,
    /// `(1/N) Σ_train (θ Y − mean)²`
    pub train_ty_var: f64,
    pub train_t4_sum: f64,
    pub train_t4y4_sum: f64,
    pub test: Option<TestStats>,
    pub loo: Option<LeaveOneOut>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestStats {
    /// `(1/(kN)) Σ_test θ²`
    pub sq_mean: f64,
    pub t4_sum: f64,
    /// Only available when the test labels are known (simulations).
    pub labeled: Option<TestLabelStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestLabelStats {
    /// `(1/(kN)) Σ_test θ² Y²`
    pub t2y2_mean: f64,
    pub t4y4_sum: f64,
    /// `(1/(kN)) Σ_test θ Y`
    pub ty_mean: f64,
    /// `(1/(kN)) Σ_test (θ Y − mean)²`
    pub ty_var: f64,
}

/// Training statistics with the owning point of the feature removed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeaveOneOut {
    pub owner: usize,
    /// `(1/(N−1)) Σ_{j≠i} θ Y`
    pub ty_mean: f64,
    /// `(1/(N−1)) Σ_{j≠i} (θ Y − mean)²`
    pub ty_var: f64,
    /// `(1/(N−1)) Σ_{j≠i} θ²`
    pub sq_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleStats {
    pub n_train: usize,
    /// Test multiplier `k`; zero in the inductive setting.
    pub k_test: usize,
    pub features: Vec<FeatureStats>,
}

impl SampleStats {
    pub fn m(&self) -> usize {
        self.features.len()
    }

    pub fn has_test_labels(&self) -> bool {
        self.features
            .iter()
            .all(|f| f.test.as_ref().is_some_and(|t| t.labeled.is_some()))
            && !self.features.is_empty()
    }
}

fn mean_var(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let mut n = 0usize;
    let mut sum = 0.0;
    for v in values.clone() {
        sum += v;
        n += 1;
    }
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var)
}

/// Computes statistics from a feature matrix whose first `train_y.len()` rows
/// are the training points and whose remaining rows are the test points.
///
/// `owners[k]` names the training row that generated feature `k`; when given,
/// leave-one-out statistics are filled in.
pub fn compute_stats(
    features: &FeatureMatrix,
    train_y: &[f64],
    test_y: Option<&[f64]>,
    owners: Option<&[usize]>,
) -> Result<SampleStats> {
    let n = train_y.len();
    if n == 0 {
        return Err(Error::data("empty training sample"));
    }
    let rows = features.n_rows();
    if rows < n {
        return Err(Error::data(format!(
            "feature matrix has {rows} rows but there are {n} training labels"
        )));
    }
    let n_test = rows - n;
    if !n_test.is_multiple_of(n) {
        return Err(Error::data(format!(
            "test size {n_test} is not a multiple of the training size {n}"
        )));
    }
    let k_test = n_test / n;
    if let Some(ty) = test_y {
        if ty.len() != n_test {
            return Err(Error::data(format!(
                "{} test labels for {n_test} test rows",
                ty.len()
            )));
        }
    }
    if let Some(o) = owners {
        if o.len() != features.n_features() {
            return Err(Error::data("owner list does not match the number of features"));
        }
        if let Some(bad) = o.iter().find(|&&i| i >= n) {
            return Err(Error::data(format!("feature owner {bad} is not a training row")));
        }
    }
    let nf = n as f64;
    let out = (0..features.n_features())
        .map(|k| {
            let col = features.column(k);
            let train = col.slice(ndarray::s![..n]);
            let ty = train.iter().zip(train_y).map(|(t, y)| t * y);
            let (ty_mean, ty_var) = mean_var(ty.clone());
            let test = (n_test > 0).then(|| {
                let test = col.slice(ndarray::s![n..]);
                let kn = n_test as f64;
                let labeled = test_y.map(|ys| {
                    let ty = test.iter().zip(ys).map(|(t, y)| t * y);
                    let (ty_mean, ty_var) = mean_var(ty.clone());
                    TestLabelStats {
                        t2y2_mean: ty.clone().map(|v| v * v).sum::<f64>() / kn,
                        t4y4_sum: ty.map(|v| v.powi(4)).sum(),
                        ty_mean,
                        ty_var,
                    }
                });
                TestStats {
                    sq_mean: test.iter().map(|t| t * t).sum::<f64>() / kn,
                    t4_sum: test.iter().map(|t| t.powi(4)).sum(),
                    labeled,
                }
            });
            let loo = owners.filter(|_| n >= 2).map(|o| {
                let i = o[k];
                let others = train
                    .iter()
                    .zip(train_y)
                    .enumerate()
                    .filter(move |(j, _)| *j != i)
                    .map(|(_, (t, y))| (*t, *y));
                let (mean, var) = mean_var(others.clone().map(|(t, y)| t * y));
                LeaveOneOut {
                    owner: i,
                    ty_mean: mean,
                    ty_var: var,
                    sq_mean: others.map(|(t, _)| t * t).sum::<f64>() / (n - 1) as f64,
                }
            });
            FeatureStats {
                train_sq_mean: train.iter().map(|t| t * t).sum::<f64>() / nf,
                train_t2y2_mean: ty.clone().map(|v| v * v).sum::<f64>() / nf,
                train_ty_mean: ty_mean,
                train_ty_var: ty_var,
                train_t4_sum: train.iter().map(|t| t.powi(4)).sum(),
                train_t4y4_sum: ty.map(|v| v.powi(4)).sum(),
                test,
                loo,
            }
        })
        .collect();
    Ok(SampleStats {
        n_train: n,
        k_test,
        features: out,
    })
}

/// Training statistics computed row by row, without materializing the feature
/// matrix. Uses Welford updates for the variance of `θ Y`.
pub fn streaming_train_stats(
    dict: &FeatureDictionary,
    train_x: &[DesignPoint],
    train_y: &[f64],
) -> Result<SampleStats> {
    let n = train_y.len();
    if n == 0 {
        return Err(Error::data("empty training sample"));
    }
    if train_x.len() != n {
        return Err(Error::data(format!(
            "{} training points but {n} labels",
            train_x.len()
        )));
    }
    let m = dict.len();
    let mut sq = vec![0.0; m];
    let mut t2y2 = vec![0.0; m];
    let mut mean = vec![0.0; m];
    let mut m2 = vec![0.0; m];
    let mut t4 = vec![0.0; m];
    let mut t4y4 = vec![0.0; m];
    dict.for_each_row(train_x, |i, row| {
        let y = train_y[i];
        let count = (i + 1) as f64;
        for (k, &t) in row.iter().enumerate() {
            let ty = t * y;
            let t2 = t * t;
            sq[k] += t2;
            t2y2[k] += ty * ty;
            t4[k] += t2 * t2;
            t4y4[k] += (ty * ty) * (ty * ty);
            let d = ty - mean[k];
            mean[k] += d / count;
            m2[k] += d * (ty - mean[k]);
        }
    })?;
    let nf = n as f64;
    let features = (0..m)
        .map(|k| FeatureStats {
            train_sq_mean: sq[k] / nf,
            train_t2y2_mean: t2y2[k] / nf,
            train_ty_mean: mean[k],
            train_ty_var: (m2[k] / nf).max(0.0),
            train_t4_sum: t4[k],
            train_t4y4_sum: t4y4[k],
            test: None,
            loo: None,
        })
        .collect();
    Ok(SampleStats {
        n_train: n,
        k_test: 0,
        features,
    })
}

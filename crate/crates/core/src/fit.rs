//! End-to-end fitting in the inductive and transductive settings.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::bounds::{confidence_radius, BoundSpec, BoundVariant, ConfidenceRadius, LabelMode};
use crate::data::{Dataset, DesignPoint};
use crate::dictionary::{FeatureDictionary, FeatureMatrix};
use crate::error::{Error, Result};
use crate::moments::{empirical_test_moments, DesignMoments, Provenance};
use crate::selector::{predict_matrix, run_selection, IterationRecord, Schedule, SelectorConfig};
use crate::stats::{compute_stats, streaming_train_stats, SampleStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Inductive,
    Transductive,
}

/// A fitted estimator `θ̂ = Σ_k c_k θ_k` with the trace of the run that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionModel {
    pub setting: Setting,
    pub dictionary: FeatureDictionary,
    pub bound: BoundSpec,
    pub moments: Provenance,
    pub coefficients: Vec<f64>,
    pub kappa: f64,
    pub schedule: Schedule,
    pub stopped_at: usize,
    pub trace: Vec<IterationRecord>,
}

impl SelectionModel {
    pub fn predict(&self, points: &[DesignPoint]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(points.len());
        self.dictionary.for_each_row(points, |_, row| {
            out.push(row.iter().zip(&self.coefficients).map(|(t, c)| t * c).sum());
        })?;
        Ok(out)
    }

    /// Indices of the features with a nonzero coefficient.
    pub fn selected(&self) -> Vec<usize> {
        self.coefficients
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != 0.0)
            .map(|(k, _)| k)
            .collect()
    }
}

/// Everything computed along the way, for inspection and tests.
#[derive(Debug, Clone)]
pub struct Fit {
    pub model: SelectionModel,
    pub radius: ConfidenceRadius,
    pub stats: SampleStats,
    pub moments: DesignMoments,
    /// Predictions on the test design points (transductive only).
    pub predictions: Option<Vec<f64>>,
}

/// Feature values at `points`; an explicit matrix is used as given.
pub fn feature_matrix(dict: &FeatureDictionary, points: &[DesignPoint]) -> Result<FeatureMatrix> {
    match dict {
        FeatureDictionary::ExplicitMatrix(f) => {
            if f.n_rows() != points.len() {
                return Err(Error::data(format!(
                    "explicit feature matrix has {} rows but there are {} points",
                    f.n_rows(),
                    points.len()
                )));
            }
            Ok(f.clone())
        }
        _ => dict.evaluate(points),
    }
}

/// Per-feature radii for an inductive fit, without running the selector.
pub fn inductive_radius(
    ds: &Dataset,
    dict: &FeatureDictionary,
    moments: &DesignMoments,
    spec: &BoundSpec,
) -> Result<(SampleStats, ConfidenceRadius)> {
    if spec.variant.is_transductive() {
        return Err(Error::config(format!(
            "{} is a transductive bound; use the transductive command",
            spec.variant
        )));
    }
    if moments.m() != dict.len() {
        return Err(Error::config(format!(
            "moments describe {} features but the dictionary has {}",
            moments.m(),
            dict.len()
        )));
    }
    let stats = match (spec.variant, dict) {
        (BoundVariant::IndSvm, _) => {
            let owners = dict.owners(&ds.train_x).ok_or_else(|| {
                Error::config("IndSvm needs a kernel dictionary centered at the training points")
            })?;
            let f = feature_matrix(dict, &ds.train_x)?;
            compute_stats(&f, &ds.train_y, None, Some(&owners))?
        }
        (_, FeatureDictionary::ExplicitMatrix(_)) => {
            compute_stats(&feature_matrix(dict, &ds.train_x)?, &ds.train_y, None, None)?
        }
        _ => streaming_train_stats(dict, &ds.train_x, &ds.train_y)?,
    };
    let mprime = match spec.variant {
        BoundVariant::IndSvm => Some(dict.len() / ds.n_train().max(1)),
        _ => None,
    };
    let radius = confidence_radius(spec, &stats, moments, mprime)?;
    Ok((stats, radius))
}

/// Fits from labeled training data and known design moments.
pub fn fit_inductive(
    ds: &Dataset,
    dict: FeatureDictionary,
    moments: DesignMoments,
    spec: &BoundSpec,
    config: &SelectorConfig,
) -> Result<Fit> {
    let (stats, radius) = inductive_radius(ds, &dict, &moments, spec)?;
    let sel = run_selection(&moments, &radius, ds.n_train(), config)?;
    let model = SelectionModel {
        setting: Setting::Inductive,
        dictionary: dict,
        bound: spec.clone(),
        moments: moments.provenance.clone(),
        coefficients: sel.coefficients,
        kappa: sel.kappa,
        schedule: sel.schedule,
        stopped_at: sel.stopped_at,
        trace: sel.trace,
    };
    Ok(Fit {
        model,
        radius,
        stats,
        moments,
        predictions: None,
    })
}

/// Features, statistics, empirical test moments and radii for a transductive fit.
pub fn transductive_radius(
    ds: &Dataset,
    dict: &FeatureDictionary,
    spec: &BoundSpec,
) -> Result<(FeatureMatrix, SampleStats, DesignMoments, ConfidenceRadius)> {
    if !spec.variant.is_transductive() {
        return Err(Error::config(format!(
            "{} is an inductive bound; use the fit command",
            spec.variant
        )));
    }
    let k = ds.test_multiplier()?;
    let features = feature_matrix(dict, &ds.all_points())?;
    let test_y = match spec.mode {
        LabelMode::Simulation => Some(ds.hidden_y.as_deref().ok_or_else(|| {
            Error::config("simulation mode needs the hidden test labels")
        })?),
        LabelMode::Deployment => None,
    };
    let stats = compute_stats(&features, &ds.train_y, test_y, None)?;
    let moments = empirical_test_moments(&features, ds.n_train(), k)?;
    let radius = confidence_radius(spec, &stats, &moments, None)?;
    Ok((features, stats, moments, radius))
}

/// Fits on labeled training points and predicts the `kN` unlabeled test points.
pub fn fit_transductive(
    ds: &Dataset,
    dict: FeatureDictionary,
    spec: &BoundSpec,
    config: &SelectorConfig,
) -> Result<Fit> {
    let (features, stats, moments, radius) = transductive_radius(ds, &dict, spec)?;
    let sel = run_selection(&moments, &radius, ds.n_train(), config)?;
    let test = features.slice_rows(ds.n_train()..features.n_rows());
    let predictions = predict_matrix(&sel.coefficients, &test)?;
    let model = SelectionModel {
        setting: Setting::Transductive,
        dictionary: dict,
        bound: spec.clone(),
        moments: moments.provenance.clone(),
        coefficients: sel.coefficients,
        kappa: sel.kappa,
        schedule: sel.schedule,
        stopped_at: sel.stopped_at,
        trace: sel.trace,
    };
    Ok(Fit {
        model,
        radius,
        stats,
        moments,
        predictions: Some(predictions),
    })
}

/// The model returned when there is nothing to predict: zero coefficients, empty trace.
pub fn vacuous_transductive_model(
    ds: &Dataset,
    dict: FeatureDictionary,
    spec: &BoundSpec,
    config: &SelectorConfig,
) -> Result<SelectionModel> {
    warn!("empty test set; nothing to predict");
    let kappa = config.resolve_kappa(ds.n_train())?;
    Ok(SelectionModel {
        setting: Setting::Transductive,
        coefficients: vec![0.0; dict.len()],
        dictionary: dict,
        bound: spec.clone(),
        moments: Provenance::EmpiricalTest {
            n_train: ds.n_train(),
            k: 0,
        },
        kappa,
        schedule: config.schedule,
        stopped_at: 0,
        trace: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scalar_points;
    use crate::dictionary::build_trigonometric;
    use crate::moments::exact_moments;

    #[test]
    fn inductive_fit_on_constant_signal() {
        let xs = scalar_points(&(0..2000).map(|i| (i as f64 + 0.5) / 2000.0).collect::<Vec<_>>());
        let ds = Dataset::labeled(xs.clone(), vec![1.0; 2000]).unwrap();
        let d = build_trigonometric(3).unwrap();
        let mom = exact_moments(&d).unwrap();
        let spec = BoundSpec::new(BoundVariant::IndExact, 0.5).with_b(1.0).with_sigma2(0.0);
        let fit = fit_inductive(&ds, d, mom, &spec, &SelectorConfig::default()).unwrap();
        assert!(fit.model.coefficients[0] > 0.0);
        assert_eq!(fit.model.stopped_at, fit.model.trace.len());
        let pred = fit.model.predict(&xs).unwrap();
        assert_eq!(pred.len(), 2000);
        assert_eq!(fit.model.selected(), vec![0]);
        let json = serde_json::to_string(&fit.model).unwrap();
        let back: SelectionModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, fit.model);
    }

    #[test]
    fn transductive_variant_is_rejected_inductively() {
        let ds = Dataset::labeled(scalar_points(&[0.1, 0.2]), vec![1.0, 2.0]).unwrap();
        let d = build_trigonometric(2).unwrap();
        let mom = exact_moments(&d).unwrap();
        let spec = BoundSpec::new(BoundVariant::TrBasicBounded, 0.1).with_b(1.0);
        let err = fit_inductive(&ds, d, mom, &spec, &SelectorConfig::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}

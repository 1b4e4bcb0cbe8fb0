use projsel::bounds::{BoundSpec, BoundVariant, LabelMode};
use projsel::data::Dataset;
use projsel::experiments::{
    coverage_study, generate_seeded, rate_experiment, transductive_experiment, Basis, Budget, CoverageConfig,
    EpsilonRule, ExperimentKind, ModelSpec, Noise, RateConfig, SizeRule, SyntheticModel, TransductiveConfig,
    TruthSpec,
};
use projsel::fit::transductive_radius;
use projsel::selector::Schedule;

fn coverage_cfg(replicates: usize) -> CoverageConfig {
    CoverageConfig {
        model: CoverageConfig::default_model(),
        variant: BoundVariant::IndExact,
        epsilon: 0.25,
        mode: LabelMode::Deployment,
        n: 128,
        m: 64,
        k_test: 1,
        replicates,
        schedule: Schedule::GreedyMax,
    }
}

#[test]
fn coverage_runs_agree_within_binomial_noise() {
    let a = coverage_study(&coverage_cfg(100), 17, Budget::unlimited()).unwrap();
    let b = coverage_study(&coverage_cfg(500), 17, Budget::unlimited()).unwrap();
    let pa = a.coverage["IndExact"];
    let pb = b.coverage["IndExact"];
    let slack = 3.0 * (0.25f64 * 0.75 / 100.0).sqrt();
    assert!((pa - pb).abs() <= slack, "{pa} vs {pb}");
    assert!(pa >= 0.75 - slack);
    // the first 100 replicates are shared
    assert_eq!(a.rows[..], b.rows[..100]);
}

#[test]
fn noiseless_truth_in_span_has_vanishing_risk() {
    let cfg = RateConfig {
        model: ModelSpec {
            truth: TruthSpec::Coefficients {
                basis: Basis::Trigonometric,
                coefficients: vec![0.8, 0.5, -0.4],
            },
            noise: Noise::None,
        },
        grid: vec![64, 256, 1024, 4096],
        replicates: 5,
        m_rule: SizeRule::Linear,
        epsilon_rule: EpsilonRule::InverseSquare,
        schedule: Schedule::RoundRobin,
        sigma_multiplier: 1.0,
    };
    let rep = rate_experiment(ExperimentKind::RateSobolev, &cfg, 5, Budget::unlimited()).unwrap();
    let med: Vec<f64> = rep.medians.iter().map(|m| m.median_mse).collect();
    for w in med.windows(2) {
        assert!(w[1] <= w[0], "{med:?}");
    }
    assert!(med[3] < 0.5 * med[0], "{med:?}");
}

#[test]
fn transductive_beats_zero_predictor_without_noise() {
    let cfg = TransductiveConfig {
        model: ModelSpec {
            truth: TruthSpec::Coefficients {
                basis: Basis::Trigonometric,
                coefficients: vec![3.0],
            },
            noise: Noise::None,
        },
        variant: BoundVariant::TrBasicBounded,
        epsilon: 0.1,
        mode: LabelMode::Deployment,
        n: 64,
        m: 32,
        k_test: 1,
        replicates: 100,
        schedule: Schedule::GreedyMax,
    };
    let rep = transductive_experiment(&cfg, 8, Budget::unlimited()).unwrap();
    for r in &rep.rows {
        assert!(r.mse < r.baseline_mse.unwrap(), "{r:?}");
    }
    assert_eq!(rep.chain_frequency, Some(1.0));
}

#[test]
fn general_k_bound_shrinks_with_more_test_points() {
    let model = SyntheticModel::from_spec(&TransductiveConfig::default_model()).unwrap();
    let big = generate_seeded(&model, 200, 3, 21).unwrap();
    let dict = Basis::Trigonometric.dictionary(8).unwrap();
    let spec = BoundSpec::new(BoundVariant::TrGeneralK, 0.1).with_subexp(5.0, 1e6);
    let k1 = Dataset::new(big.train_x.clone(), big.train_y.clone(), big.test_x[..200].to_vec(), None).unwrap();
    let k3 = big.without_hidden_labels();
    let (_, _, _, r1) = transductive_radius(&k1, &dict, &spec).unwrap();
    let (_, _, _, r3) = transductive_radius(&k3, &dict, &spec).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&r3.beta) < mean(&r1.beta), "{} vs {}", mean(&r3.beta), mean(&r1.beta));
}

#[test]
fn besov_experiment_reports_a_slope() {
    let mut cfg = RateConfig::besov_default();
    cfg.grid = vec![64, 128, 256, 512];
    cfg.replicates = 3;
    let rep = rate_experiment(ExperimentKind::RateBesov, &cfg, 2, Budget::unlimited()).unwrap();
    assert_eq!(rep.medians.len(), 4);
    assert!(rep.slope.unwrap().slope.is_finite());
    assert_eq!(rep.coverage["IndExact"], 1.0);
}

#[test]
fn replicate_streams_do_not_depend_on_grid() {
    let mut cfg = RateConfig::sobolev_default();
    cfg.model.truth = TruthSpec::Sobolev {
        beta: 1.0,
        amplitude: 1.0,
        terms: 256,
    };
    cfg.grid = vec![32, 64, 128, 256];
    cfg.replicates = 2;
    let a = rate_experiment(ExperimentKind::RateSobolev, &cfg, 3, Budget::unlimited()).unwrap();
    cfg.grid = vec![64, 128, 256, 512];
    let b = rate_experiment(ExperimentKind::RateSobolev, &cfg, 3, Budget::unlimited()).unwrap();
    assert_eq!(a.rows[2..], b.rows[..6]);
}

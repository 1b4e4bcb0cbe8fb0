//! Command-line driver: `fit`, `transduce`, `bounds` and `experiment`.
//!
//! A run is described by a [`RunConfig`], read from `--config` and then
//! overridden by flags. The resolved config and the seed are embedded in every
//! artifact; passing an artifact back as `--config` reproduces it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::bounds::{BoundSpec, BoundVariant, ConfidenceRadius, LabelMode, SubExp};
use crate::data::{fmt_f64, read_labeled_file, read_unlabeled_file, Dataset, DesignPoint};
use crate::dictionary::{
    build_gaussian_kernel, build_haar_on, build_kernel_pca, build_multiscale_gaussian,
    build_trigonometric, FeatureDictionary, FeatureMatrix, Kernel,
};
use crate::error::{Error, Result};
use crate::experiments::{
    coverage_study, rate_experiment, transductive_experiment, Budget, CoverageConfig,
    ExperimentKind, ExperimentReport, RateConfig, TransductiveConfig,
};
use crate::fit::{
    fit_inductive, fit_transductive, inductive_radius, transductive_radius,
    vacuous_transductive_model, SelectionModel,
};
use crate::moments::{exact_moments, monte_carlo_moments, read_user_gram_file, DesignMoments, Sampler};
use crate::selector::{Schedule, SelectorConfig};
use crate::stats::SampleStats;

pub const TOOL: &str = "projsel";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "projsel", version, about = "Feature selection by projection onto confidence regions")]
pub struct Cli {
    /// JSON run config (or an artifact produced by a previous run)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for replicate and scan parallelism
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Machine-readable stdout
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit from labeled data and known design moments
    Fit(FitArgs),
    /// Fit on labeled data and predict unlabeled test points
    Transduce(FitArgs),
    /// Print per-feature confidence radii
    Bounds(FitArgs),
    /// Run a simulation experiment
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args, Default)]
pub struct FitArgs {
    /// Labeled CSV (x1..xd,y)
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Unlabeled CSV (x1..xd) of test design points
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Dictionary as inline JSON, e.g. '{"kind":"trigonometric","m":5}'
    #[arg(long)]
    pub dictionary: Option<String>,
    /// Bound variant; repeat to compare variants in `bounds`
    #[arg(long = "variant")]
    pub variants: Vec<BoundVariant>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Bound on |f| (inductive) or |Y| (transductive)
    #[arg(long = "B")]
    pub b: Option<f64>,
    #[arg(long)]
    pub sigma2: Option<f64>,
    #[arg(long)]
    pub mode: Option<LabelMode>,
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub schedule: Option<Schedule>,
}

#[derive(Debug, Args, Default)]
pub struct ExperimentArgs {
    /// rate-sobolev, rate-besov, coverage or transductive
    #[arg(long)]
    pub kind: Option<ExperimentKind>,
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Wall-clock cap in seconds
    #[arg(long)]
    pub budget_secs: Option<f64>,
}

impl std::str::FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "deployment" => Ok(LabelMode::Deployment),
            "simulation" => Ok(LabelMode::Simulation),
            _ => Err(Error::config(format!("unknown label mode {s:?}"))),
        }
    }
}

/// Where the points of a data-dependent dictionary come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointSource {
    /// Training points for `fit`, training and test points for `transduce`.
    #[default]
    Auto,
    Train,
    All,
}

fn zero() -> f64 {
    0.0
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DictionarySpec {
    Trigonometric {
        m: usize,
    },
    Haar {
        levels: u32,
        #[serde(default = "zero")]
        lo: f64,
        #[serde(default = "one")]
        hi: f64,
    },
    GaussianKernel {
        gamma: f64,
        #[serde(default)]
        centers: PointSource,
    },
    MultiscaleGaussian {
        scales: Vec<f64>,
        #[serde(default)]
        centers: PointSource,
    },
    KernelPca {
        kernel: Kernel,
        top: usize,
        #[serde(default)]
        design: PointSource,
    },
    /// CSV with a header row and one column per feature, one row per sample row.
    ExplicitMatrix {
        file: PathBuf,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum MomentsSpec {
    /// Identity Gram for orthonormal dictionaries on their natural design law.
    #[default]
    Exact,
    /// Seeded with the run seed.
    MonteCarlo {
        samples: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sampler: Option<Sampler>,
    },
    /// Headerless `m × m` CSV.
    UserGram {
        file: PathBuf,
    },
}

/// Bound constants; the variant list comes from `--variant` or `variants`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundConfig {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub variants: Vec<BoundVariant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subexp: Option<Vec<SubExp>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_y: Option<f64>,
    #[serde(rename = "B_y", default, skip_serializing_if = "Option::is_none")]
    pub big_b_y: Option<f64>,
    #[serde(default)]
    pub mode: LabelMode,
}

impl BoundConfig {
    fn spec(&self, variant: BoundVariant) -> Result<BoundSpec> {
        let epsilon = self
            .epsilon
            .ok_or_else(|| Error::config("missing field epsilon (confidence level)"))?;
        let spec = BoundSpec {
            variant,
            epsilon,
            b: self.b,
            sigma2: self.sigma2,
            subexp: self.subexp.clone(),
            b_y: self.b_y,
            big_b_y: self.big_b_y,
            mode: self.mode,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn specs(&self) -> Result<Vec<BoundSpec>> {
        if self.variants.is_empty() {
            return Err(Error::config("missing field variant (bound variant)"));
        }
        self.variants.iter().map(|v| self.spec(*v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExperimentSpec {
    RateSobolev(RateConfig),
    RateBesov(RateConfig),
    Coverage(CoverageConfig),
    Transductive(TransductiveConfig),
}

impl ExperimentSpec {
    pub fn default_for(kind: ExperimentKind) -> Self {
        match kind {
            ExperimentKind::RateSobolev => ExperimentSpec::RateSobolev(RateConfig::sobolev_default()),
            ExperimentKind::RateBesov => ExperimentSpec::RateBesov(RateConfig::besov_default()),
            ExperimentKind::Coverage => ExperimentSpec::Coverage(CoverageConfig {
                model: CoverageConfig::default_model(),
                variant: BoundVariant::IndExact,
                epsilon: 0.25,
                mode: LabelMode::Deployment,
                n: 128,
                m: 64,
                k_test: 1,
                replicates: 500,
                schedule: Schedule::GreedyMax,
            }),
            ExperimentKind::Transductive => ExperimentSpec::Transductive(TransductiveConfig {
                model: TransductiveConfig::default_model(),
                variant: BoundVariant::TrBasicBounded,
                epsilon: 0.1,
                mode: LabelMode::Deployment,
                n: 64,
                m: 32,
                k_test: 1,
                replicates: 500,
                schedule: Schedule::GreedyMax,
            }),
        }
    }

    pub fn kind(&self) -> ExperimentKind {
        match self {
            ExperimentSpec::RateSobolev(_) => ExperimentKind::RateSobolev,
            ExperimentSpec::RateBesov(_) => ExperimentKind::RateBesov,
            ExperimentSpec::Coverage(_) => ExperimentKind::Coverage,
            ExperimentSpec::Transductive(_) => ExperimentKind::Transductive,
        }
    }

    fn set_replicates(&mut self, r: usize) {
        match self {
            ExperimentSpec::RateSobolev(c) | ExperimentSpec::RateBesov(c) => c.replicates = r,
            ExperimentSpec::Coverage(c) => c.replicates = r,
            ExperimentSpec::Transductive(c) => c.replicates = r,
        }
    }
}

/// Fully resolved run description. Thread count is deliberately absent: it
/// never changes results.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dictionary: Option<DictionarySpec>,
    #[serde(default)]
    pub moments: MomentsSpec,
    #[serde(default)]
    pub bound: BoundConfig,
    #[serde(default)]
    pub selector: SelectorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_secs: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Header shared by every JSON artifact.
#[derive(Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
}

#[derive(Serialize)]
struct Artifact<'a, T: Serialize> {
    #[serde(flatten)]
    provenance: &'a Provenance,
    #[serde(flatten)]
    body: T,
}

#[derive(Serialize)]
struct ModelBody<'a> {
    model: &'a SelectionModel,
}

#[derive(Serialize)]
struct ReportBody<'a> {
    report: &'a ExperimentReport,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BoundsRow {
    pub k: usize,
    pub v: f64,
    pub alpha: f64,
    #[serde(rename = "C")]
    pub c: f64,
    /// `β(ε,k)` per variant, in the requested order.
    pub beta: Vec<f64>,
    pub tau: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BoundsTable {
    pub variants: Vec<BoundVariant>,
    pub rows: Vec<BoundsRow>,
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("config {} is not valid JSON: {e}", path.display())))?;
    let is_artifact = value.get("tool").is_some() && value.get("config").is_some();
    let (cfg, seed) = if is_artifact {
        let seed = value.get("seed").and_then(|s| s.as_u64());
        (value["config"].clone(), seed)
    } else {
        (value, None)
    };
    let mut cfg: RunConfig = serde_json::from_value(cfg)
        .map_err(|e| Error::config(format!("config {}: {e}", path.display())))?;
    if cfg.seed.is_none() {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply_fit_flags(cfg: &mut RunConfig, a: &FitArgs) -> Result<()> {
    if a.train.is_some() {
        cfg.train.clone_from(&a.train);
    }
    if a.test.is_some() {
        cfg.test.clone_from(&a.test);
    }
    if let Some(d) = &a.dictionary {
        cfg.dictionary = Some(
            serde_json::from_str(d).map_err(|e| Error::config(format!("--dictionary: {e}")))?,
        );
    }
    if !a.variants.is_empty() {
        cfg.bound.variants.clone_from(&a.variants);
    }
    let b = &mut cfg.bound;
    b.epsilon = a.epsilon.or(b.epsilon);
    b.b = a.b.or(b.b);
    b.sigma2 = a.sigma2.or(b.sigma2);
    if let Some(mode) = a.mode {
        b.mode = mode;
    }
    if a.kappa.is_some() {
        cfg.selector.kappa = a.kappa;
    }
    if let Some(s) = a.schedule {
        cfg.selector.schedule = s;
    }
    Ok(())
}

fn read_feature_csv(path: &Path) -> Result<FeatureMatrix> {
    let file = fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(j, s)| {
                s.trim().parse::<f64>().map_err(|_| {
                    Error::data(format!(
                        "{}: row {}, column {}: {s:?} is not a number",
                        path.display(),
                        i + 1,
                        j + 1
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    FeatureMatrix::from_rows(&rows)
}

fn build_dictionary(spec: &DictionarySpec, ds: &Dataset, transductive: bool) -> Result<FeatureDictionary> {
    let points = |src: PointSource| -> Vec<DesignPoint> {
        match (src, transductive) {
            (PointSource::Train, _) | (PointSource::Auto, false) => ds.train_x.clone(),
            (PointSource::All, _) | (PointSource::Auto, true) => ds.all_points(),
        }
    };
    match spec {
        DictionarySpec::Trigonometric { m } => build_trigonometric(*m),
        DictionarySpec::Haar { levels, lo, hi } => build_haar_on(*levels, *lo, *hi),
        DictionarySpec::GaussianKernel { gamma, centers } => build_gaussian_kernel(&points(*centers), *gamma),
        DictionarySpec::MultiscaleGaussian { scales, centers } => {
            build_multiscale_gaussian(&points(*centers), scales)
        }
        DictionarySpec::KernelPca { kernel, top, design } => build_kernel_pca(&points(*design), *kernel, *top),
        DictionarySpec::ExplicitMatrix { file } => read_feature_csv(file).map(FeatureDictionary::ExplicitMatrix),
    }
}

fn resolve_moments(spec: &MomentsSpec, dict: &FeatureDictionary, ds: &Dataset, seed: u64) -> Result<DesignMoments> {
    let moments = match spec {
        MomentsSpec::Exact => exact_moments(dict)?,
        MomentsSpec::MonteCarlo { samples, sampler } => {
            let sampler = sampler.clone().unwrap_or(Sampler::Uniform {
                lo: 0.0,
                hi: 1.0,
                dim: ds.dim().unwrap_or(1),
            });
            monte_carlo_moments(dict, &sampler, *samples, seed)?
        }
        MomentsSpec::UserGram { file } => read_user_gram_file(file)?,
    };
    if moments.m() != dict.len() {
        return Err(Error::config(format!(
            "moments describe {} features but the dictionary has {}",
            moments.m(),
            dict.len()
        )));
    }
    Ok(moments)
}

fn require_path<'a>(p: &'a Option<PathBuf>, field: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::config(format!("missing field {field} (use --{field})")))
}

fn load_dataset(cfg: &RunConfig, with_test: bool) -> Result<Dataset> {
    let (xs, ys) = read_labeled_file(require_path(&cfg.train, "train")?)?;
    let test = if with_test {
        read_unlabeled_file(require_path(&cfg.test, "test")?)?
    } else {
        Vec::new()
    };
    Dataset::new(xs, ys, test, None)
}

fn require_dictionary(cfg: &RunConfig) -> Result<&DictionarySpec> {
    cfg.dictionary
        .as_ref()
        .ok_or_else(|| Error::config("missing field dictionary (use --dictionary)"))
}

fn write_file(dir: &Path, name: &str, contents: &[u8]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v)?;
    s.push(b'\n');
    Ok(s)
}

fn summary(model: &SelectionModel) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "setting: {:?}", model.setting);
    let _ = writeln!(s, "bound: {} (epsilon = {})", model.bound.variant, model.bound.epsilon);
    let _ = writeln!(s, "features: {}", model.coefficients.len());
    let _ = writeln!(s, "steps (n0): {}", model.stopped_at);
    let _ = writeln!(s, "kappa: {}", fmt_f64(model.kappa));
    let sel = model.selected();
    let _ = writeln!(s, "selected ({}): {:?}", sel.len(), sel);
    let _ = writeln!(s, "trace head:");
    let _ = writeln!(s, "  n  feature  gamma  tau  delta  update");
    for r in model.trace.iter().take(10) {
        let _ = writeln!(
            s,
            "  {}  {}  {}  {}  {}  {}",
            r.n,
            r.chosen,
            fmt_f64(r.gamma),
            fmt_f64(r.tau),
            fmt_f64(r.delta),
            fmt_f64(r.update)
        );
    }
    if model.trace.len() > 10 {
        let _ = writeln!(s, "  ... {} more", model.trace.len() - 10);
    }
    s
}

fn emit_model(cli: &Cli, prov: &Provenance, model: &SelectionModel, out: &Path) -> Result<()> {
    let artifact = Artifact {
        provenance: prov,
        body: ModelBody { model },
    };
    write_file(out, "model.json", &to_json(&artifact)?)?;
    let text = summary(model);
    write_file(out, "summary.txt", text.as_bytes())?;
    if cli.json {
        println!(
            "{}",
            serde_json::json!({
                "steps": model.stopped_at,
                "selected": model.selected(),
                "coefficients": model.coefficients,
            })
        );
    } else {
        print!("{text}");
    }
    Ok(())
}

fn cmd_fit(cli: &Cli, cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let ds = load_dataset(cfg, false)?;
    let dict = build_dictionary(require_dictionary(cfg)?, &ds, false)?;
    let specs = cfg.bound.specs()?;
    let moments = resolve_moments(&cfg.moments, &dict, &ds, seed)?;
    let fit = fit_inductive(&ds, dict, moments, &specs[0], &cfg.selector)?;
    let prov = provenance(cfg, seed);
    emit_model(cli, &prov, &fit.model, out)
}

fn cmd_transduce(cli: &Cli, cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let ds = load_dataset(cfg, true)?;
    let specs = cfg.bound.specs()?;
    let spec = &specs[0];
    if spec.mode == LabelMode::Simulation {
        return Err(Error::config("simulation mode needs hidden test labels, which transduce never reads"));
    }
    let dict = build_dictionary(require_dictionary(cfg)?, &ds, true)?;
    let (model, predictions) = if ds.n_test() == 0 {
        (vacuous_transductive_model(&ds, dict, spec, &cfg.selector)?, Vec::new())
    } else {
        let fit = fit_transductive(&ds, dict, spec, &cfg.selector)?;
        let p = fit.predictions.unwrap_or_default();
        (fit.model, p)
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["row", "prediction"])?;
    for (i, p) in predictions.iter().enumerate() {
        w.write_record([i.to_string(), fmt_f64(*p)])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    write_file(out, "predictions.csv", &bytes)?;
    let prov = provenance(cfg, seed);
    emit_model(cli, &prov, &model, out)
}

fn table_columns(stats: &SampleStats, radius: &ConfidenceRadius) -> Vec<(f64, f64, f64)> {
    (0..radius.m())
        .map(|k| {
            let f = &stats.features[k];
            let v = radius.v[k];
            let alpha = if f.train_sq_mean > 0.0 {
                f.train_ty_mean / f.train_sq_mean
            } else {
                0.0
            };
            let c = if v > 0.0 { f.train_sq_mean / v } else { 0.0 };
            (v, alpha, c)
        })
        .collect()
}

/// Per-feature radii for every requested variant.
pub fn bounds_table(cfg: &RunConfig, seed: u64) -> Result<BoundsTable> {
    let specs = cfg.bound.specs()?;
    let transductive = specs[0].variant.is_transductive();
    if specs.iter().any(|s| s.variant.is_transductive() != transductive) {
        return Err(Error::config("bounds compares variants of one setting at a time"));
    }
    let ds = load_dataset(cfg, transductive)?;
    let dict = build_dictionary(require_dictionary(cfg)?, &ds, transductive)?;
    let mut base = None;
    let mut radii = Vec::new();
    if transductive {
        for spec in &specs {
            let (_, stats, _, radius) = transductive_radius(&ds, &dict, spec)?;
            base.get_or_insert_with(|| table_columns(&stats, &radius));
            radii.push(radius);
        }
    } else {
        let moments = resolve_moments(&cfg.moments, &dict, &ds, seed)?;
        for spec in &specs {
            let (stats, radius) = inductive_radius(&ds, &dict, &moments, spec)?;
            base.get_or_insert_with(|| table_columns(&stats, &radius));
            radii.push(radius);
        }
    }
    let rows = base
        .unwrap_or_default()
        .into_iter()
        .enumerate()
        .map(|(k, (v, alpha, c))| BoundsRow {
            k,
            v,
            alpha,
            c,
            beta: radii.iter().map(|r| r.beta[k]).collect(),
            tau: radii.iter().map(|r| r.tau[k]).collect(),
        })
        .collect();
    Ok(BoundsTable {
        variants: specs.iter().map(|s| s.variant).collect(),
        rows,
    })
}

fn cmd_bounds(cli: &Cli, cfg: &RunConfig, seed: u64) -> Result<()> {
    let table = bounds_table(cfg, seed)?;
    if cli.json {
        let prov = provenance(cfg, seed);
        let artifact = Artifact {
            provenance: &prov,
            body: &table,
        };
        print!("{}", String::from_utf8_lossy(&to_json(&artifact)?));
        return Ok(());
    }
    let mut header = vec!["k".to_string(), "v".into(), "alpha".into(), "C".into()];
    for v in &table.variants {
        header.push(format!("beta[{v}]"));
        header.push(format!("tau[{v}]"));
    }
    println!("{}", header.join("\t"));
    for r in &table.rows {
        let mut cols = vec![r.k.to_string(), fmt_f64(r.v), fmt_f64(r.alpha), fmt_f64(r.c)];
        for (b, t) in r.beta.iter().zip(&r.tau) {
            cols.push(fmt_f64(*b));
            cols.push(fmt_f64(*t));
        }
        println!("{}", cols.join("\t"));
    }
    Ok(())
}

fn cmd_experiment(cli: &Cli, cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let spec = cfg
        .experiment
        .as_ref()
        .ok_or_else(|| Error::config("missing field experiment (use --kind)"))?;
    let budget = cfg.budget_secs.map(Budget::seconds).unwrap_or_else(Budget::unlimited);
    let started = std::time::Instant::now();
    let report = match spec {
        ExperimentSpec::RateSobolev(c) => rate_experiment(ExperimentKind::RateSobolev, c, seed, budget)?,
        ExperimentSpec::RateBesov(c) => rate_experiment(ExperimentKind::RateBesov, c, seed, budget)?,
        ExperimentSpec::Coverage(c) => coverage_study(c, seed, budget)?,
        ExperimentSpec::Transductive(c) => transductive_experiment(c, seed, budget)?,
    };
    let prov = provenance(cfg, seed);
    let artifact = Artifact {
        provenance: &prov,
        body: ReportBody { report: &report },
    };
    write_file(out, "report.json", &to_json(&artifact)?)?;
    let mut csv_bytes = Vec::new();
    report.write_csv(&mut csv_bytes)?;
    write_file(out, "report.csv", &csv_bytes)?;
    if cli.json {
        println!("{}", serde_json::to_string(&report)?);
    } else {
        println!("experiment: {}", report.kind);
        println!(
            "replicates: {}/{}",
            report.replicates_completed, report.replicates_requested
        );
        for m in &report.medians {
            println!("N = {}: median mse {}", m.n, fmt_f64(m.median_mse));
        }
        if let Some(s) = &report.slope {
            println!("slope: {} (se {})", fmt_f64(s.slope), fmt_f64(s.std_err));
        }
        for (v, c) in &report.coverage {
            println!("coverage[{v}]: {}", fmt_f64(*c));
        }
        if let Some(c) = report.chain_frequency {
            println!("risk-decrease chain frequency: {}", fmt_f64(c));
        }
        // wall-clock time stays out of the artifacts so they are byte-reproducible
        println!("runtime: {:.2}s", started.elapsed().as_secs_f64());
    }
    if report.partial {
        return Err(Error::Budget(format!(
            "{} of {} replicates finished; partial report written to {}",
            report.replicates_completed,
            report.replicates_requested,
            out.display()
        )));
    }
    Ok(())
}

fn provenance(cfg: &RunConfig, seed: u64) -> Provenance {
    Provenance {
        tool: TOOL.to_string(),
        version: VERSION.to_string(),
        seed,
        config: cfg.clone(),
    }
}

/// Resolves the config for `cli` (file, then flags).
pub fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    match &cli.command {
        Command::Fit(a) | Command::Transduce(a) | Command::Bounds(a) => apply_fit_flags(&mut cfg, a)?,
        Command::Experiment(a) => {
            match (a.kind, &cfg.experiment) {
                (Some(k), Some(e)) if e.kind() == k => {}
                (Some(k), _) => cfg.experiment = Some(ExperimentSpec::default_for(k)),
                (None, _) => {}
            }
            if let (Some(r), Some(e)) = (a.replicates, cfg.experiment.as_mut()) {
                e.set_replicates(r);
            }
            cfg.budget_secs = a.budget_secs.or(cfg.budget_secs);
        }
    }
    cfg.seed = Some(cfg.seed.unwrap_or(0));
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::config("--threads must be >= 1"));
    }
    let cfg = resolve(cli)?;
    let seed = cfg.seed.unwrap_or(0);
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| Error::config(format!("cannot start thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Fit(_) => cmd_fit(cli, &cfg, seed, &out),
        Command::Transduce(_) => cmd_transduce(cli, &cfg, seed, &out),
        Command::Bounds(_) => cmd_bounds(cli, &cfg, seed),
        Command::Experiment(_) => cmd_experiment(cli, &cfg, seed, &out),
    })
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            if matches!(e, Error::Budget(_)) {
                warn!("run stopped early");
            }
            eprintln!("{TOOL}: {e}");
            e.exit_code()
        }
    }
}

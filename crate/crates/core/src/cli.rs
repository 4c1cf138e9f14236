//! Command-line experiment runner.
//!
//! Every subcommand reads a JSON [`ExperimentConfig`], applies flag overrides,
//! and writes CSV/JSON artifacts into the output directory. Each artifact
//! carries the SHA-256 of the effective config, the seed and the crate version.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{run_baseline, BaselineConfig};
use crate::config::RunConfig;
use crate::data::{
    gen_linreg_data, gen_poly_data, load_wisconsin_raw, split_and_standardize, two_moons, ErrorKind, SplitDataset,
};
use crate::engine::{log_log_slope, mse_scaling_probe, JalaEm, ProbeSettings};
use crate::error::{Error, Result};
use crate::evaluation::{
    blr_h_euler, cv_tune, lppd, order_mae, test_error, BlrTuneSpec, Classifier, TuneAlgorithm, TuneGrid,
};
use crate::model::LatentModel;
use crate::models::blr::DEFAULT_PRIOR_VARIANCE;
use crate::models::{BayesianLogistic, ConjugateGaussian, GaussianLinReg, PolynomialReg, StudentTLinReg, TinyBnn};
use crate::rng::{substream, tag};
use crate::selection::{
    is_evidence_student_t, select_error_model, select_order_bic, select_order_jala, ErrorModel, ErrorModelSelection,
    ErrorModelSettings,
};
use crate::trajectory::Trajectory;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const THREADS_ENV: &str = "JARZMLE_THREADS";

/// Version string embedded in every artifact.
pub fn version() -> String {
    match option_env!("JARZMLE_GIT_DESCRIBE") {
        Some(d) if !d.is_empty() => format!("{} ({d})", env!("CARGO_PKG_VERSION")),
        _ => env!("CARGO_PKG_VERSION").to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Fit,
    SelectErrorModel,
    SelectOrder,
    Tune,
    ProbeMse,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Fit => "fit",
            ExperimentKind::SelectErrorModel => "select-error-model",
            ExperimentKind::SelectOrder => "select-order",
            ExperimentKind::Tune => "tune",
            ExperimentKind::ProbeMse => "probe-mse",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Conjugate {
        y: f64,
    },
    GaussianLinreg,
    StudentTLinreg,
    Polynomial {
        order: usize,
    },
    Logistic {
        #[serde(default = "default_prior_variance")]
        prior_variance: f64,
    },
    Bnn {
        hidden: usize,
        #[serde(default = "default_classes")]
        classes: usize,
    },
}

fn default_prior_variance() -> f64 {
    DEFAULT_PRIOR_VARIANCE
}

fn default_classes() -> usize {
    2
}

fn default_train_fraction() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// UCI breast-cancer file; relative paths resolve against the config file.
    Wisconsin {
        path: PathBuf,
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
        /// Split seed; the run seed when absent.
        #[serde(default)]
        split_seed: Option<u64>,
    },
    Linreg {
        n_obs: usize,
        n_features: usize,
        alpha: f64,
        sigma: f64,
        errors: ErrorKind,
    },
    Polynomial {
        n_obs: usize,
        order: usize,
        alpha: f64,
        sigma_sq: f64,
    },
    TwoMoons {
        n: usize,
        noise: f64,
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmSpec {
    JalaEm(RunConfig),
    Baseline(BaselineConfig),
}

fn default_orders() -> Vec<usize> {
    (1..=10).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderSelectionSpec {
    #[serde(default = "default_orders")]
    pub orders: Vec<usize>,
    pub run: RunConfig,
}

fn default_tune_particles() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneSpec {
    pub algorithm: TuneAlgorithm,
    #[serde(default = "default_tune_particles")]
    pub n_particles: usize,
    /// Defaults to the grid around the power-iteration step scale.
    #[serde(default)]
    pub grid: Option<TuneGrid>,
    #[serde(default = "default_ess")]
    pub ess_threshold_fraction: f64,
}

fn default_ess() -> f64 {
    1.0 / 1.05
}

fn default_probe_ns() -> Vec<usize> {
    vec![25, 50, 100, 200, 400]
}

fn default_probe_trials() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub theta: Vec<f64>,
    #[serde(default = "default_probe_ns")]
    pub ns: Vec<usize>,
    #[serde(default = "default_probe_trials")]
    pub trials: usize,
    #[serde(default = "default_probe_iterations")]
    pub n_iterations: usize,
    #[serde(default = "default_probe_step")]
    pub langevin_step: f64,
}

fn default_probe_iterations() -> usize {
    ProbeSettings::default().n_iterations
}

fn default_probe_step() -> f64 {
    ProbeSettings::default().langevin_step
}

fn default_repeats() -> usize {
    1
}

/// A full experiment description. The top-level `seed` governs every random
/// stream; seeds inside algorithm sections are overwritten. Repeat `t` uses
/// `seed + t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub data: Option<DataSpec>,
    #[serde(default)]
    pub algorithm: Option<AlgorithmSpec>,
    #[serde(default)]
    pub error_model: Option<ErrorModelSettings>,
    #[serde(default)]
    pub order_selection: Option<OrderSelectionSpec>,
    #[serde(default)]
    pub tune: Option<TuneSpec>,
    #[serde(default)]
    pub probe: Option<ProbeSpec>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Hash of the experiment content; the output location is excluded.
    pub fn sha256(&self) -> String {
        let content = Self {
            output_dir: None,
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&content).expect("config serializes");
        format!("{:x}", Sha256::digest(&bytes))
    }

    /// Checks that the sections needed by the experiment are present and valid.
    pub fn validate(&self) -> Result<()> {
        let missing = |s: &str| Error::InvalidConfig(format!("{} needs a `{s}` section", self.experiment.name()));
        if self.repeats == 0 {
            return Err(Error::InvalidConfig("repeats must be at least 1".into()));
        }
        match self.experiment {
            ExperimentKind::Fit => {
                let model = self.model.as_ref().ok_or_else(|| missing("model"))?;
                match self.algorithm.as_ref().ok_or_else(|| missing("algorithm"))? {
                    AlgorithmSpec::JalaEm(r) => r.validate()?,
                    AlgorithmSpec::Baseline(b) => b.validate()?,
                }
                let ok = matches!(
                    (model, &self.data),
                    (ModelSpec::Conjugate { .. }, None)
                        | (ModelSpec::GaussianLinreg | ModelSpec::StudentTLinreg, Some(DataSpec::Linreg { .. }))
                        | (ModelSpec::Polynomial { .. }, Some(DataSpec::Polynomial { .. }))
                        | (ModelSpec::Logistic { .. }, Some(DataSpec::Wisconsin { .. } | DataSpec::TwoMoons { .. }))
                        | (ModelSpec::Bnn { .. }, Some(DataSpec::Wisconsin { .. } | DataSpec::TwoMoons { .. }))
                );
                if !ok {
                    return Err(Error::InvalidConfig(format!("model {model:?} cannot be paired with data {:?}", self.data)));
                }
            }
            ExperimentKind::SelectErrorModel => {
                if !matches!(self.data, Some(DataSpec::Linreg { .. })) {
                    return Err(missing("data (source linreg)"));
                }
            }
            ExperimentKind::SelectOrder => {
                if !matches!(self.data, Some(DataSpec::Polynomial { .. })) {
                    return Err(missing("data (source polynomial)"));
                }
                let spec = self.order_selection.as_ref().ok_or_else(|| missing("order_selection"))?;
                if spec.orders.is_empty() {
                    return Err(Error::InvalidConfig("order_selection.orders is empty".into()));
                }
                spec.run.validate()?;
            }
            ExperimentKind::Tune => {
                if !matches!(self.data, Some(DataSpec::Wisconsin { .. } | DataSpec::TwoMoons { .. })) {
                    return Err(missing("data (source wisconsin or two_moons)"));
                }
                let t = self.tune.as_ref().ok_or_else(|| missing("tune"))?;
                if let Some(g) = &t.grid {
                    g.validate()?;
                }
            }
            ExperimentKind::ProbeMse => {
                if !matches!(self.model, Some(ModelSpec::Conjugate { .. })) {
                    return Err(missing("model (kind conjugate)"));
                }
                let p = self.probe.as_ref().ok_or_else(|| missing("probe"))?;
                if p.ns.is_empty() || p.ns.contains(&0) || p.trials == 0 || p.theta.len() != 1 {
                    return Err(Error::InvalidConfig("probe needs positive ns, trials and a one-element theta".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "jarzmle", version, about = "JALA-EM experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit one model with JALA-EM or a baseline.
    Fit(CommonArgs),
    /// Compare Gaussian and Student-t error models by marginal likelihood.
    SelectErrorModel(CommonArgs),
    /// Select a polynomial order by marginal likelihood and by BIC.
    SelectOrder(CommonArgs),
    /// Cross-validate Langevin and parameter step sizes.
    Tune(CommonArgs),
    /// Measure how the gradient-estimate MSE scales with particle count.
    ProbeMse(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    repeats: Option<usize>,
    #[arg(long, value_name = "N", env = THREADS_ENV)]
    threads: Option<usize>,
}

/// Artifact header fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub seed: u64,
    pub version: String,
}

impl Provenance {
    fn comments(&self) -> Vec<String> {
        vec![
            format!("config_sha256: {}", self.config_sha256),
            format!("seed: {}", self.seed),
            format!("version: {}", self.version),
        ]
    }
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Runtime(m) => m,
        }
    }
}

/// Whether an error stems from the configuration rather than the algorithm.
fn is_config_error(e: &Error) -> bool {
    matches!(
        e.root(),
        Error::InvalidConfig(_)
            | Error::DimensionMismatch(_)
            | Error::Data { .. }
            | Error::Dataset(_)
            | Error::Json(_)
    )
}

fn classify(e: Error) -> Failure {
    if is_config_error(&e) {
        Failure::Config(e.to_string())
    } else {
        Failure::Runtime(e.to_string())
    }
}

/// Parses arguments, runs the experiment and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let (kind, args) = match cli.command {
        Command::Fit(a) => (ExperimentKind::Fit, a),
        Command::SelectErrorModel(a) => (ExperimentKind::SelectErrorModel, a),
        Command::SelectOrder(a) => (ExperimentKind::SelectOrder, a),
        Command::Tune(a) => (ExperimentKind::Tune, a),
        Command::ProbeMse(a) => (ExperimentKind::ProbeMse, a),
    };

    let mut out_dir = args.out.clone();
    let result = prepare(kind, &args).and_then(|(cfg, base)| {
        out_dir = cfg.output_dir.clone();
        let threads = args.threads.unwrap_or(0);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Failure::Config(format!("thread pool: {e}")))?;
        pool.install(|| execute(&cfg, &base))
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message());
            if let Some(dir) = out_dir {
                let body = serde_json::json!({
                    "exit_code": f.code(),
                    "kind": if f.code() == EXIT_CONFIG { "config" } else { "runtime" },
                    "message": f.message(),
                    "version": version(),
                });
                if fs::create_dir_all(&dir).is_ok() {
                    let _ = fs::write(dir.join("error.json"), serde_json::to_string_pretty(&body).unwrap() + "\n");
                }
            }
            f.code()
        }
    }
}

/// Loads the config, applies overrides and validates it. Returns the
/// effective config and the directory relative paths resolve against.
fn prepare(kind: ExperimentKind, args: &CommonArgs) -> std::result::Result<(ExperimentConfig, PathBuf), Failure> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| Failure::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let mut cfg = ExperimentConfig::from_json(&text).map_err(|e| Failure::Config(e.to_string()))?;
    if cfg.experiment != kind {
        return Err(Failure::Config(format!(
            "config describes `{}` but the `{}` subcommand was given",
            cfg.experiment.name(),
            kind.name()
        )));
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(r) = args.repeats {
        cfg.repeats = r;
    }
    if let Some(o) = &args.out {
        cfg.output_dir = Some(o.clone());
    }
    if cfg.output_dir.is_none() {
        return Err(Failure::Config("no output directory: pass --out or set output_dir".into()));
    }
    cfg.validate().map_err(classify)?;
    let base = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

fn execute(cfg: &ExperimentConfig, base: &Path) -> std::result::Result<(), Failure> {
    let out = cfg.output_dir.clone().expect("validated");
    let prov = Provenance {
        config_sha256: cfg.sha256(),
        seed: cfg.seed,
        version: version(),
    };
    claim_output_dir(&out, &prov)?;
    let r = match cfg.experiment {
        ExperimentKind::Fit => cmd_fit(cfg, base, &out, &prov),
        ExperimentKind::SelectErrorModel => cmd_select_error_model(cfg, &out, &prov),
        ExperimentKind::SelectOrder => cmd_select_order(cfg, &out, &prov),
        ExperimentKind::Tune => cmd_tune(cfg, base, &out, &prov),
        ExperimentKind::ProbeMse => cmd_probe_mse(cfg, &out, &prov),
    };
    r.map_err(classify)?;
    let _ = fs::remove_file(out.join("error.json"));
    Ok(())
}

/// Records the provenance of the output directory, refusing directories that
/// already hold results of a different config.
fn claim_output_dir(out: &Path, prov: &Provenance) -> std::result::Result<(), Failure> {
    fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", out.display())))?;
    let path = out.join("provenance.json");
    if let Ok(text) = fs::read_to_string(&path) {
        let old: Provenance = serde_json::from_str(&text)
            .map_err(|e| Failure::Config(format!("unreadable {}: {e}", path.display())))?;
        if old.config_sha256 != prov.config_sha256 {
            return Err(Failure::Config(format!(
                "{} holds results of config {} but this config hashes to {}",
                out.display(),
                old.config_sha256,
                prov.config_sha256
            )));
        }
    }
    write_json(&path, prov).map_err(classify)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Serialize)]
struct WithProvenance<'a, T: Serialize> {
    provenance: &'a Provenance,
    #[serde(flatten)]
    body: T,
}

fn write_report<T: Serialize>(path: &Path, prov: &Provenance, body: T) -> Result<()> {
    write_json(path, &WithProvenance { provenance: prov, body })
}

fn create(path: &Path) -> Result<fs::File> {
    Ok(fs::File::create(path)?)
}

/// Output directory of repeat `t`.
fn repeat_dir(out: &Path, repeats: usize, t: usize) -> Result<PathBuf> {
    let dir = if repeats == 1 { out.to_path_buf() } else { out.join(format!("repeat_{t:03}")) };
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads or generates a labelled dataset and splits it.
fn classification_split(spec: &DataSpec, base: &Path, seed: u64) -> Result<SplitDataset> {
    match spec {
        DataSpec::Wisconsin {
            path,
            train_fraction,
            split_seed,
        } => {
            let raw = load_wisconsin_raw(resolve(base, path))?;
            split_and_standardize(&raw, *train_fraction, split_seed.unwrap_or(seed))
        }
        DataSpec::TwoMoons { n, noise, train_fraction } => {
            split_and_standardize(&two_moons(*n, *noise, seed), *train_fraction, seed)
        }
        _ => Err(Error::InvalidConfig("expected a classification data source".into())),
    }
}

#[derive(Serialize)]
struct FitSummary {
    theta_final: Vec<f64>,
    iterations_run: usize,
    resample_count: usize,
    log_z0: Option<f64>,
    log_z0_method: Option<&'static str>,
    log_evidence_final: Option<f64>,
    test_lppd: Option<f64>,
    test_error: Option<f64>,
}

/// Result of a single fit before it is written out.
struct Fitted {
    theta_final: Vec<f64>,
    particles: Vec<f64>,
    dim: usize,
    weights: Option<Vec<f64>>,
    trajectory: Trajectory,
    iterations_run: usize,
    log_evidence_final: Option<f64>,
    cloud: Option<crate::cloud::ParticleCloud>,
}

fn fit_with<M: LatentModel>(model: &M, algorithm: &AlgorithmSpec, seed: u64, log_z0: f64) -> Result<Fitted> {
    match algorithm {
        AlgorithmSpec::JalaEm(run) => {
            let fit = JalaEm::new(model, run.clone().with_seed(seed), log_z0).run()?;
            Ok(Fitted {
                theta_final: fit.theta_final,
                particles: fit.cloud.positions().to_vec(),
                dim: model.dim_x(),
                weights: Some(fit.weights_final),
                trajectory: fit.trajectory,
                iterations_run: fit.iterations_run,
                log_evidence_final: Some(fit.log_evidence_final),
                cloud: Some(fit.cloud),
            })
        }
        AlgorithmSpec::Baseline(b) => {
            let r = run_baseline(model, &b.clone().with_seed(seed))?;
            Ok(Fitted {
                theta_final: r.theta_final,
                particles: r.particles,
                dim: r.dim,
                weights: None,
                trajectory: r.trajectory,
                iterations_run: r.iterations_run,
                log_evidence_final: None,
                cloud: None,
            })
        }
    }
}

fn theta_init(algorithm: &AlgorithmSpec) -> &[f64] {
    match algorithm {
        AlgorithmSpec::JalaEm(r) => &r.theta_init,
        AlgorithmSpec::Baseline(b) => &b.theta_init,
    }
}

fn write_particles<W: Write>(mut out: W, f: &Fitted, comments: &[String]) -> Result<()> {
    if let Some(cloud) = &f.cloud {
        return cloud.write_csv(out, comments);
    }
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["particle".to_string()];
    header.extend((0..f.dim).map(|j| format!("x_{j}")));
    w.write_record(&header)?;
    for (i, p) in f.particles.chunks(f.dim).enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(p.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_fit(cfg: &ExperimentConfig, base: &Path, out: &Path, prov: &Provenance) -> Result<()> {
    let model_spec = cfg.model.as_ref().expect("validated");
    let algorithm = cfg.algorithm.as_ref().expect("validated");
    (0..cfg.repeats).into_par_iter().try_for_each(|t| {
        let seed = cfg.seed + t as u64;
        let dir = repeat_dir(out, cfg.repeats, t)?;
        let mut prov = prov.clone();
        prov.seed = seed;
        let comments = prov.comments();
        let theta0 = theta_init(algorithm);

        let (fitted, log_z0, method, metrics) = match (model_spec, &cfg.data) {
            (ModelSpec::Conjugate { y }, _) => {
                let m = ConjugateGaussian::new(*y);
                let z0 = m.log_marginal(theta0.first().copied().unwrap_or(0.0));
                (fit_with(&m, algorithm, seed, z0)?, Some(z0), Some("analytic"), None)
            }
            (ModelSpec::GaussianLinreg, Some(DataSpec::Linreg { n_obs, n_features, alpha, sigma, errors })) => {
                let d = gen_linreg_data(*n_obs, *n_features, *alpha, *sigma, *errors, seed);
                let m = GaussianLinReg::new(d.x, d.y)?;
                crate::selection::check_theta(&m, theta0)?;
                let z0 = m.log_evidence(theta0)?;
                (fit_with(&m, algorithm, seed, z0)?, Some(z0), Some("analytic"), None)
            }
            (ModelSpec::StudentTLinreg, Some(DataSpec::Linreg { n_obs, n_features, alpha, sigma, errors })) => {
                let d = gen_linreg_data(*n_obs, *n_features, *alpha, *sigma, *errors, seed);
                let m = StudentTLinReg::new(d.x, d.y)?;
                crate::selection::check_theta(&m, theta0)?;
                let mut th = theta0.to_vec();
                m.project_theta(&mut th);
                let samples = ErrorModelSettings::default().is_samples;
                let is = is_evidence_student_t(&m, &th, samples, &mut substream(seed, tag::IMPORTANCE, 0, 0))?;
                (fit_with(&m, algorithm, seed, is.log_z)?, Some(is.log_z), Some("importance_sampling"), None)
            }
            (ModelSpec::Polynomial { order }, Some(DataSpec::Polynomial { n_obs, order: p_star, alpha, sigma_sq })) => {
                let d = gen_poly_data(*n_obs, *p_star, *alpha, *sigma_sq, seed);
                let m = PolynomialReg::new(&d.x, d.y, *order)?;
                crate::selection::check_theta(&m, theta0)?;
                let z0 = m.linear().log_evidence(theta0)?;
                (fit_with(&m, algorithm, seed, z0)?, Some(z0), Some("analytic"), None)
            }
            (ModelSpec::Logistic { prior_variance }, Some(data)) => {
                let split = classification_split(data, base, seed)?;
                write_json(&dir.join("split.json"), &split.metadata())?;
                let m = BayesianLogistic::new(split.train.features.clone(), split.train.targets.clone(), *prior_variance)?;
                let f = fit_with(&m, algorithm, seed, 0.0)?;
                let metrics = classification_metrics(&m, &f, &split);
                (f, None, None, Some(metrics))
            }
            (ModelSpec::Bnn { hidden, classes }, Some(data)) => {
                let split = classification_split(data, base, seed)?;
                write_json(&dir.join("split.json"), &split.metadata())?;
                let m = TinyBnn::new(split.train.features.clone(), split.train.class_labels(), *hidden, *classes)?;
                let f = fit_with(&m, algorithm, seed, 0.0)?;
                let metrics = classification_metrics(&m, &f, &split);
                (f, None, None, Some(metrics))
            }
            _ => return Err(Error::InvalidConfig("unsupported model/data pairing".into())),
        };

        fitted.trajectory.write_csv(create(&dir.join("trajectory.csv"))?, &comments)?;
        write_particles(create(&dir.join("particles.csv"))?, &fitted, &comments)?;
        let (test_lppd, test_err) = metrics.map_or((None, None), |(a, b)| (Some(a), Some(b)));
        let summary = FitSummary {
            theta_final: fitted.theta_final.clone(),
            iterations_run: fitted.iterations_run,
            resample_count: fitted.trajectory.resample_count(),
            log_z0,
            log_z0_method: method,
            log_evidence_final: fitted.log_evidence_final.filter(|_| log_z0.is_some()),
            test_lppd,
            test_error: test_err,
        };
        write_report(&dir.join("fit.json"), &prov, summary)
    })
}

fn classification_metrics<C: Classifier>(model: &C, f: &Fitted, split: &SplitDataset) -> (f64, f64) {
    let labels = split.test.class_labels();
    if labels.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let w = f.weights.as_deref();
    (
        lppd(model, &f.particles, f.dim, w, &split.test.features, &labels),
        test_error(model, &f.particles, f.dim, w, &split.test.features, &labels),
    )
}

#[derive(Serialize)]
struct ErrorModelTrial {
    repeat: usize,
    seed: u64,
    selection: ErrorModelSelection,
}

#[derive(Serialize)]
struct ErrorModelReport {
    truth: ErrorModel,
    correct_rate: f64,
    trials: Vec<ErrorModelTrial>,
}

fn cmd_select_error_model(cfg: &ExperimentConfig, out: &Path, prov: &Provenance) -> Result<()> {
    let Some(DataSpec::Linreg { n_obs, n_features, alpha, sigma, errors }) = &cfg.data else {
        unreachable!("validated")
    };
    let settings = cfg.error_model.clone().unwrap_or_default();
    let truth = match errors {
        ErrorKind::Gaussian => ErrorModel::Gaussian,
        ErrorKind::StudentT { .. } => ErrorModel::StudentT,
    };
    let trials: Vec<ErrorModelTrial> = (0..cfg.repeats)
        .into_par_iter()
        .map(|t| {
            let seed = cfg.seed + t as u64;
            let d = gen_linreg_data(*n_obs, *n_features, *alpha, *sigma, *errors, seed);
            let selection = select_error_model(&d.x, &d.y, &settings, seed)?;
            Ok(ErrorModelTrial { repeat: t, seed, selection })
        })
        .collect::<Result<_>>()?;

    let mut csv_out = create(&out.join("evidence_trajectories.csv"))?;
    for c in prov.comments() {
        writeln!(csv_out, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(csv_out);
    w.write_record(["repeat", "model", "k", "log_evidence"])?;
    for trial in &trials {
        for rep in [&trial.selection.gaussian, &trial.selection.student_t] {
            for (k, z) in rep.log_z_trajectory.iter().enumerate() {
                w.write_record([trial.repeat.to_string(), rep.model.clone(), k.to_string(), z.to_string()])?;
            }
        }
    }
    w.flush()?;

    let correct = trials.iter().filter(|t| t.selection.decision == truth).count();
    let report = ErrorModelReport {
        truth,
        correct_rate: correct as f64 / trials.len() as f64,
        trials,
    };
    write_report(&out.join("report.json"), prov, report)
}

#[derive(Serialize)]
struct OrderTrial {
    repeat: usize,
    seed: u64,
    jala_em: usize,
    bic: usize,
    log_evidence: Vec<(usize, f64)>,
}

#[derive(Serialize)]
struct OrderReport {
    true_order: usize,
    mae_jala_em: f64,
    mae_bic: f64,
    trials: Vec<OrderTrial>,
}

fn cmd_select_order(cfg: &ExperimentConfig, out: &Path, prov: &Provenance) -> Result<()> {
    let Some(DataSpec::Polynomial { n_obs, order, alpha, sigma_sq }) = &cfg.data else {
        unreachable!("validated")
    };
    let spec = cfg.order_selection.as_ref().expect("validated");
    let trials: Vec<OrderTrial> = (0..cfg.repeats)
        .into_par_iter()
        .map(|t| {
            let seed = cfg.seed + t as u64;
            let d = gen_poly_data(*n_obs, *order, *alpha, *sigma_sq, seed);
            let run = spec.run.clone().with_seed(seed);
            let jala = select_order_jala(&d.x, &d.y, &spec.orders, &run)?;
            let bic = select_order_bic(&d.x, &d.y, &spec.orders)?;
            let log_evidence = spec.orders.iter().copied().zip(jala.reports.iter().map(|r| r.log_z_final)).collect();
            Ok(OrderTrial {
                repeat: t,
                seed,
                jala_em: jala.selected,
                bic,
                log_evidence,
            })
        })
        .collect::<Result<_>>()?;

    let mut csv_out = create(&out.join("trials.csv"))?;
    for c in prov.comments() {
        writeln!(csv_out, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(csv_out);
    w.write_record(["repeat", "seed", "jala_em_order", "bic_order"])?;
    for t in &trials {
        w.write_record([t.repeat.to_string(), t.seed.to_string(), t.jala_em.to_string(), t.bic.to_string()])?;
    }
    w.flush()?;

    let jala: Vec<usize> = trials.iter().map(|t| t.jala_em).collect();
    let bic: Vec<usize> = trials.iter().map(|t| t.bic).collect();
    let report = OrderReport {
        true_order: *order,
        mae_jala_em: order_mae(&jala, *order),
        mae_bic: order_mae(&bic, *order),
        trials,
    };
    write_report(&out.join("report.json"), prov, report)
}

#[derive(Serialize)]
struct TuneChoice {
    algorithm: TuneAlgorithm,
    h_euler: f64,
    particle_step: f64,
    theta_step: f64,
    mean_validation_lppd: f64,
}

fn cmd_tune(cfg: &ExperimentConfig, base: &Path, out: &Path, prov: &Provenance) -> Result<()> {
    let spec = cfg.tune.as_ref().expect("validated");
    let data = cfg.data.as_ref().expect("validated");
    let split = classification_split(data, base, cfg.seed)?;
    write_json(&out.join("split.json"), &split.metadata())?;
    let sigma0_sq = DEFAULT_PRIOR_VARIANCE;
    let h = blr_h_euler(&split.train.features, sigma0_sq, cfg.seed)?;
    let grid = spec.grid.clone().unwrap_or_else(|| TuneGrid::around(h));
    let mut tune_spec = BlrTuneSpec::new(spec.algorithm, spec.n_particles);
    tune_spec.ess_threshold_fraction = spec.ess_threshold_fraction;
    let outcome = cv_tune(&tune_spec, &split.train, &grid, cfg.seed)?;
    outcome.write_report(create(&out.join("tuning_report.csv"))?, &prov.comments())?;
    let choice = TuneChoice {
        algorithm: spec.algorithm,
        h_euler: h,
        particle_step: outcome.chosen.particle_step,
        theta_step: outcome.chosen.theta_step,
        mean_validation_lppd: outcome.mean_lppd,
    };
    write_report(&out.join("chosen.json"), prov, choice)
}

#[derive(Serialize)]
struct ProbeReport {
    log_log_slope: f64,
    mse: Vec<(usize, f64)>,
}

fn cmd_probe_mse(cfg: &ExperimentConfig, out: &Path, prov: &Provenance) -> Result<()> {
    let Some(ModelSpec::Conjugate { y }) = cfg.model else {
        unreachable!("validated")
    };
    let p = cfg.probe.as_ref().expect("validated");
    let settings = ProbeSettings {
        n_iterations: p.n_iterations,
        langevin_step: p.langevin_step,
        seed: cfg.seed,
    };
    let points = mse_scaling_probe(&ConjugateGaussian::new(y), &p.theta, &p.ns, p.trials, settings)?;
    let mut csv_out = create(&out.join("mse.csv"))?;
    for c in prov.comments() {
        writeln!(csv_out, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(csv_out);
    w.write_record(["n_particles", "mse"])?;
    for (n, m) in &points {
        w.write_record([n.to_string(), m.to_string()])?;
    }
    w.flush()?;
    let report = ProbeReport {
        log_log_slope: log_log_slope(&points),
        mse: points,
    };
    write_report(&out.join("report.json"), prov, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let ok = r#"{"experiment":"probe-mse","model":{"kind":"conjugate","y":2.0},"probe":{"theta":[0.0]}}"#;
        ExperimentConfig::from_json(ok).unwrap().validate().unwrap();
        let bad = r#"{"experiment":"probe-mse","model":{"kind":"conjugate","y":2.0},"probe":{"theta":[0.0]},"x":1}"#;
        assert!(ExperimentConfig::from_json(bad).is_err());
        let nested = r#"{"experiment":"probe-mse","model":{"kind":"conjugate","y":2.0,"z":1},"probe":{"theta":[0.0]}}"#;
        assert!(ExperimentConfig::from_json(nested).is_err());
    }

    #[test]
    fn missing_sections_fail_validation() {
        let c = ExperimentConfig::from_json(r#"{"experiment":"fit","model":{"kind":"conjugate","y":2.0}}"#).unwrap();
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        let c = ExperimentConfig::from_json(
            r#"{"experiment":"fit","model":{"kind":"logistic"},
                "algorithm":{"jala_em":{"n_particles":10,"n_iterations":5,"langevin_step":0.1,
                "optimizer":{"kind":"sgd","gamma":0.1},"theta_init":[0.0]}}}"#,
        )
        .unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let text = r#"{"experiment":"probe-mse","model":{"kind":"conjugate","y":2.0},"probe":{"theta":[0.0]}}"#;
        let a = ExperimentConfig::from_json(text).unwrap();
        let mut b = a.clone();
        assert_eq!(a.sha256(), b.sha256());
        assert_eq!(a.sha256().len(), 64);
        b.seed = 1;
        assert_ne!(a.sha256(), b.sha256());
    }

    #[test]
    fn error_classes() {
        assert!(is_config_error(&Error::InvalidConfig("x".into())));
        assert!(is_config_error(&Error::InvalidConfig("x".into()).at_iteration(3)));
        assert!(!is_config_error(&Error::ParticleDiverged.at_iteration(3)));
    }
}

//! The subcommands. Each one is a pure function of the configuration and
//! the seed; the file-writing wrappers live at the bottom.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mnar_ssl::format::{model_from_json, model_to_json, read_dataset, truth_from_json, truth_to_json, write_dataset};
use mnar_ssl::mcartest::{lr_statistic, TestReport};
use mnar_ssl::mechanism::{class_prior_from_model, mle_fit, moment_estimator_with_eps, ClassPrior, TraceRow};
use mnar_ssl::rng;
use mnar_ssl::scenario::{apply_mask, synth_gaussian_mixture};
use mnar_ssl::study::{run_replicates, Summary};
use mnar_ssl::train::{normalized_phi_mse, train_debiased, CurveRow, Evaluation, MetricsReport};
use mnar_ssl::{Dataset, Mechanism, ModelParams, SealedTruth};
use serde::{Deserialize, Serialize};

use crate::config::{EstimateMethod, Init, PathsConfig, Pipeline, RunConfig};
use crate::error::CliError;

// Independent random streams derived from the run seed.
const STREAM_POOL: u64 = 0;
const STREAM_TEST: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_ESTIMATE: u64 = 3;
const STREAM_TRAIN: u64 = 4;
const STREAM_TEST_MCAR: u64 = 5;
const STREAM_MASK: u64 = 6;

/// A generated dataset with everything needed to score estimates on it.
pub struct Generated {
    pub dataset: Dataset,
    pub truth: SealedTruth,
    pub test: Dataset,
    pub oracle: ModelParams,
}

pub fn generate(config: &RunConfig, seed: u64) -> Result<Generated, CliError> {
    let data = config.data()?;
    let scenario = config.scenario()?;
    let mixture = data.mixture()?;
    let pool = synth_gaussian_mixture(&mixture, &mut rng::split(seed, STREAM_POOL))?;
    let mask_seed = seed.wrapping_add(scenario.seed);
    let (dataset, truth) = apply_mask(&pool, scenario, &mut rng::split(mask_seed, STREAM_MASK))?;
    dataset.validate()?;
    let test = synth_gaussian_mixture(&data.test_mixture()?, &mut rng::split(seed, STREAM_TEST))?;
    Ok(Generated {
        dataset,
        truth,
        test,
        oracle: mixture.bayes_params()?,
    })
}

pub fn initial_model(config: &RunConfig, ds: &Dataset, seed: u64) -> ModelParams {
    let arch = config.model.architecture;
    match config.model.init {
        Init::Zeros => ModelParams::zeros(arch, ds.dim(), ds.n_classes()),
        Init::Random => ModelParams::random(arch, ds.dim(), ds.n_classes(), &mut rng::split(seed, STREAM_INIT)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateOutput {
    pub method: EstimateMethod,
    pub n: usize,
    pub n_labeled: usize,
    pub phi: Vec<f64>,
    /// Unclamped moment estimate.
    pub raw: Option<Vec<f64>>,
    pub prior: Option<Vec<f64>>,
    /// Final Lagrange multiplier of the maximum-likelihood fit.
    pub multiplier: Option<f64>,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
    #[serde(skip)]
    pub model: Option<ModelParams>,
}

/// Runs the configured estimator. `model` is the theta used by
/// `moment_model` and the starting point of `mle`.
pub fn estimate(
    config: &RunConfig,
    ds: &Dataset,
    model: Option<&ModelParams>,
    seed: u64,
) -> Result<EstimateOutput, CliError> {
    ds.validate()?;
    let eps = config.mle.eps_phi;
    let base = |method, phi: Vec<f64>| EstimateOutput {
        method,
        n: ds.n(),
        n_labeled: ds.n_labeled(),
        phi,
        raw: None,
        prior: None,
        multiplier: None,
        trace: Vec::new(),
        model: None,
    };
    match config.estimate.method {
        method @ (EstimateMethod::MomentKnownPrior | EstimateMethod::MomentModel) => {
            let prior = if method == EstimateMethod::MomentKnownPrior {
                let p = match (&config.estimate.prior, &config.data) {
                    (Some(p), _) => p.clone(),
                    (None, Some(data)) => data.prior(),
                    (None, None) => return Err(CliError::Config("moment_known_prior needs estimate.prior".into())),
                };
                ClassPrior::user(p)?
            } else {
                let theta = model.ok_or_else(|| CliError::Config("moment_model needs paths.model".into()))?;
                class_prior_from_model(theta, ds)?
            };
            let est = moment_estimator_with_eps(ds, &prior, eps)?;
            Ok(EstimateOutput {
                raw: Some(est.raw),
                prior: Some(prior.p),
                ..base(method, est.phi.into_vec())
            })
        }
        EstimateMethod::Mle => {
            let theta0 = match model {
                Some(m) => m.clone(),
                None => initial_model(config, ds, seed),
            };
            let fit = mle_fit(ds, &theta0, &config.mle, &mut rng::split(seed, STREAM_ESTIMATE))?;
            Ok(EstimateOutput {
                multiplier: Some(fit.multiplier),
                trace: fit.trace,
                model: Some(fit.theta),
                ..base(EstimateMethod::Mle, fit.phi.into_vec())
            })
        }
    }
}

pub struct TrainOutput {
    pub model: ModelParams,
    pub phi: Vec<f64>,
    pub report: MetricsReport,
}

pub fn train(
    config: &RunConfig,
    ds: &Dataset,
    theta0: &ModelParams,
    phi: Option<&Mechanism>,
    test: Option<&Dataset>,
    phi_star: Option<&[f64]>,
    seed: u64,
) -> Result<TrainOutput, CliError> {
    let test_truth = test.map(SealedTruth::from_complete).transpose()?;
    let eval = Evaluation {
        test: test.zip(test_truth.as_ref()),
        phi_star,
    };
    let out = train_debiased(
        ds,
        theta0,
        &config.train,
        phi,
        &mut rng::split(seed, STREAM_TRAIN),
        eval,
    )?;
    Ok(TrainOutput {
        model: out.theta,
        phi: out.phi.into_vec(),
        report: out.report,
    })
}

pub fn test_mcar(config: &RunConfig, ds: &Dataset, theta: &ModelParams, seed: u64) -> Result<TestReport, CliError> {
    Ok(lr_statistic(
        ds,
        theta,
        &config.test,
        &mut rng::split(seed, STREAM_TEST_MCAR),
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    /// The report the single-run subcommand would write.
    pub report: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOutput {
    pub pipeline: Pipeline,
    pub base_seed: u64,
    pub replicates: Vec<ReplicateRecord>,
    pub summary: BTreeMap<String, Summary>,
}

/// Generates a dataset and runs the pipeline for seeds `seed, seed + 1, ...`.
///
/// The frozen theta of `test_mcar` and the model of `moment_model` are the
/// Bayes classifier of the generating mixture.
pub fn study(config: &RunConfig, seed: u64) -> Result<StudyOutput, CliError> {
    let pipeline = config.study.pipeline;
    let records = run_replicates(config.study.replicates, seed, |r, s| {
        replicate(config, pipeline, s)
            .map(|(metrics, report)| ReplicateRecord {
                replicate: r,
                seed: s,
                metrics,
                report,
            })
            .map_err(|e| match e {
                CliError::Core(e) => e,
                other => mnar_ssl::Error::InvalidArgument(other.to_string()),
            })
    })?;
    let mut names: Vec<&String> = records.iter().flat_map(|r| r.metrics.keys()).collect();
    names.sort();
    names.dedup();
    let summary = names
        .into_iter()
        .filter_map(|name| {
            let values: Vec<f64> = records.iter().filter_map(|r| r.metrics.get(name).copied()).collect();
            Summary::of(&values).map(|s| (name.clone(), s))
        })
        .collect();
    Ok(StudyOutput {
        pipeline,
        base_seed: seed,
        replicates: records,
        summary,
    })
}

type Metrics = BTreeMap<String, f64>;

fn replicate(config: &RunConfig, pipeline: Pipeline, seed: u64) -> Result<(Metrics, serde_json::Value), CliError> {
    let g = generate(config, seed)?;
    let mut m = Metrics::new();
    let phi_star = g.truth.phi_star();
    let report = match pipeline {
        Pipeline::Estimate => {
            let out = estimate(config, &g.dataset, Some(&g.oracle), seed)?;
            for (k, v) in out.phi.iter().enumerate() {
                m.insert(format!("phi_{}", k + 1), *v);
            }
            let score = phi_star.map(|s| score(&out.phi, s)).transpose()?;
            if let Some(s) = &score {
                m.insert("phi_mse".into(), s.normalized_mse);
            }
            serde_json::to_value(&out).expect("serializable")
        }
        Pipeline::Train => {
            let theta0 = initial_model(config, &g.dataset, seed);
            let out = train(config, &g.dataset, &theta0, None, Some(&g.test), phi_star, seed)?;
            let r = &out.report;
            for (name, v) in [
                ("accuracy", r.accuracy),
                ("test_loss", r.test_loss),
                ("phi_mse", r.phi_mse),
            ] {
                if let Some(v) = v {
                    m.insert(name.into(), v);
                }
            }
            for (k, v) in r.per_class_accuracy.iter().enumerate() {
                if let Some(v) = v {
                    m.insert(format!("accuracy_class_{}", k + 1), *v);
                }
            }
            serde_json::to_value(&out.report).expect("serializable")
        }
        Pipeline::TestMcar => {
            let rep = test_mcar(config, &g.dataset, &g.oracle, seed)?;
            m.insert("statistic".into(), rep.statistic);
            m.insert("p_value".into(), rep.p_value);
            m.insert("reject".into(), if rep.reject { 1.0 } else { 0.0 });
            serde_json::to_value(&rep).expect("serializable")
        }
    };
    Ok((m, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub phi_star: Vec<f64>,
    /// `||phi - phi_star||^2 / ||phi_star||^2`
    pub normalized_mse: f64,
}

fn score(phi: &[f64], phi_star: &[f64]) -> Result<Score, CliError> {
    Ok(Score {
        phi_star: phi_star.to_vec(),
        normalized_mse: normalized_phi_mse(phi, phi_star)?,
    })
}

// ---------------------------------------------------------------------------
// File wrappers

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn write_dataset_file(path: &Path, ds: &Dataset) -> Result<(), CliError> {
    let mut buf = Vec::new();
    write_dataset(ds, &mut buf)?;
    write(path, std::str::from_utf8(&buf).expect("utf-8"))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let ds = read_dataset(file).map_err(|e| match e {
        mnar_ssl::Error::Format { line, reason } => CliError::Config(format!("{}:{line}: {reason}", path.display())),
        other => other.into(),
    })?;
    ds.validate()?;
    Ok(ds)
}

pub fn load_model(path: &Path) -> Result<ModelParams, CliError> {
    Ok(model_from_json(&read(path)?)?)
}

fn load_truth(path: &Path) -> Result<SealedTruth, CliError> {
    Ok(truth_from_json(&read(path)?)?)
}

fn load_phi(path: &Path) -> Result<Mechanism, CliError> {
    #[derive(Deserialize)]
    struct PhiFile {
        phi: Vec<f64>,
    }
    let file: PhiFile = serde_json::from_str(&read(path)?).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Mechanism::new(file.phi)?)
}

fn trace_tsv(trace: &[TraceRow]) -> String {
    let k = trace.first().map_or(0, |t| t.phi.len());
    let mut s = String::from("epoch\tnll\tresidual");
    for c in 1..=k {
        write!(s, "\tphi_{c}").unwrap();
    }
    s.push('\n');
    for t in trace {
        write!(s, "{}\t{}\t{}", t.epoch, t.nll, t.residual).unwrap();
        for v in &t.phi {
            write!(s, "\t{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

fn curves_csv(curves: &[CurveRow]) -> String {
    let k = curves.first().map_or(0, |c| c.phi.len());
    let mut s = String::from("epoch,objective,test_accuracy,test_loss,phi_mse");
    for c in 1..=k {
        write!(s, ",phi_{c}").unwrap();
    }
    s.push('\n');
    let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
    for c in curves {
        write!(
            s,
            "{},{},{},{},{}",
            c.epoch,
            c.objective,
            opt(c.test_accuracy),
            opt(c.test_loss),
            opt(c.phi_mse)
        )
        .unwrap();
        for v in &c.phi {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Files written by `generate`, relative to the output directory.
pub const DATASET_FILE: &str = "dataset.csv";
pub const TEST_FILE: &str = "sealed/test.csv";
pub const TRUTH_FILE: &str = "sealed/truth.json";
pub const ORACLE_FILE: &str = "oracle_model.json";

pub fn cmd_generate(config: &RunConfig, seed: u64, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let g = generate(config, seed)?;
    let files = [DATASET_FILE, TEST_FILE, TRUTH_FILE, ORACLE_FILE].map(|f| out.join(f));
    write_dataset_file(&files[0], &g.dataset)?;
    write_dataset_file(&files[1], &g.test)?;
    write(&files[2], &(truth_to_json(&g.truth)? + "\n"))?;
    write(&files[3], &(model_to_json(&g.oracle)? + "\n"))?;
    log::info!(
        "generated n = {} ({} labeled), per-class labeled counts {:?}",
        g.dataset.n(),
        g.dataset.n_labeled(),
        g.dataset.labeled_counts()
    );
    Ok(files.to_vec())
}

pub fn cmd_estimate(config: &RunConfig, seed: u64, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let ds = load_dataset(&PathsConfig::require(&config.paths.dataset, "dataset")?)?;
    let model = config.paths.model.as_deref().map(load_model).transpose()?;
    let result = estimate(config, &ds, model.as_ref(), seed)?;
    let mut files = vec![out.join("phi.json")];
    write(&files[0], &json(&result))?;
    if !result.trace.is_empty() {
        files.push(out.join("trace.tsv"));
        write(&files[1], &trace_tsv(&result.trace))?;
    }
    if let Some(m) = &result.model {
        let p = out.join("model.json");
        write(&p, &(model_to_json(m)? + "\n"))?;
        files.push(p);
    }
    // The sealed truth is opened only after every estimate has been written.
    if let Some(truth_path) = &config.paths.truth {
        let truth = load_truth(truth_path)?;
        if let Some(star) = truth.phi_star() {
            let p = out.join("score.json");
            write(&p, &json(&score(&result.phi, star)?))?;
            files.push(p);
        }
    }
    Ok(files)
}

pub fn cmd_train(config: &RunConfig, seed: u64, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let ds = load_dataset(&PathsConfig::require(&config.paths.dataset, "dataset")?)?;
    let theta0 = match &config.paths.model {
        Some(p) => load_model(p)?,
        None => initial_model(config, &ds, seed),
    };
    let phi = config.paths.phi.as_deref().map(load_phi).transpose()?;
    let test = config.paths.test.as_deref().map(load_dataset).transpose()?;
    let truth = config.paths.truth.as_deref().map(load_truth).transpose()?;
    let result = train(
        config,
        &ds,
        &theta0,
        phi.as_ref(),
        test.as_ref(),
        truth.as_ref().and_then(SealedTruth::phi_star),
        seed,
    )?;
    let files = ["model.json", "report.json", "curves.csv"].map(|f| out.join(f));
    write(&files[0], &(model_to_json(&result.model)? + "\n"))?;
    write(&files[1], &json(&result.report))?;
    write(&files[2], &curves_csv(&result.report.curves))?;
    Ok(files.to_vec())
}

pub fn cmd_test_mcar(config: &RunConfig, seed: u64, out: &Path) -> Result<(Vec<PathBuf>, String), CliError> {
    let ds = load_dataset(&PathsConfig::require(&config.paths.dataset, "dataset")?)?;
    let theta = match &config.paths.model {
        Some(p) => load_model(p)?,
        None if config.test.theta == mnar_ssl::mcartest::ThetaMode::Joint => initial_model(config, &ds, seed),
        None => return Err(CliError::Config("frozen-theta test needs paths.model".into())),
    };
    let report = test_mcar(config, &ds, &theta, seed)?;
    let path = out.join("test_report.json");
    write(&path, &json(&report))?;
    Ok((vec![path], report.summary()))
}

pub fn cmd_study(config: &RunConfig, seed: u64, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let result = study(config, seed)?;
    let mut csv = String::from("metric,mean,sd,n\n");
    for (name, s) in &result.summary {
        writeln!(csv, "{name},{},{},{}", s.mean, s.sd, s.n).unwrap();
    }
    let files = ["study.json", "summary.csv"].map(|f| out.join(f));
    write(&files[0], &json(&result))?;
    write(&files[1], &csv)?;
    Ok(files.to_vec())
}

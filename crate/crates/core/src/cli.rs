//! Command-line driver behind the `omedr` binary.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::estimators::{estimate, mean_observed_imputation, relative_error, true_inaccuracy, Estimator, EstimatorInputs};
use crate::io::{binarize, from_kv, read_triples, sha256_hex, Triple};
use crate::losses::LossKind;
use crate::metrics::evaluate_ranking;
use crate::models::{write_checkpoint, Checkpoint};
use crate::noise::identify_error_params;
use crate::synthbench::{read_instance_dir, sample_instance, BenchmarkSpec, PredKind};
use crate::training::{
    fit_denoised_traced, pretrain_noisy_model, train_prediction_traced, train_propensity, AltTrainConfig, BaseMethod, TrainTrace,
};
use crate::types::{ErrorParams, ImputationMatrix, PredictionMatrix, PropensityMatrix, RatingDataset, SeededRng};

const DATASET_FORMAT: &str = "omedr-dataset";
const RUN_FORMAT: &str = "omedr-run";
const ALL_ESTIMATORS: &str = "naive,eib,ips,dr,ome,ome_eib,ome_ips,ome_dr";

/// Exit status for bad input.
pub const EXIT_VALIDATION: i32 = 2;
/// Exit status for failed computations.
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "omedr", version, about = "Noise-corrected debiased recommendation: estimators, training and benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a semi-synthetic benchmark instance directory.
    Synth(SynthArgs),
    /// Evaluate inaccuracy estimators on an instance directory.
    Estimate(EstimateArgs),
    /// Train a prediction model and evaluate its ranking quality.
    Train(TrainArgs),
    /// Binarize rating triples into a dataset directory.
    Ingest(IngestArgs),
    /// Relative-error table over many seeds.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Benchmark spec in `key = value` form.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed in the benchmark config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RhoMode {
    /// Rates recorded in the instance manifest.
    True,
    /// Rates identified from a pretrained noisy-rate model.
    Estimated,
    /// Rates passed with `--rho`.
    Given,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PropensitySource {
    /// `p_hat.csv`
    Hat,
    /// `p_true.csv`
    True,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ImputationKind {
    /// Mean observed error, surrogate for the noise-corrected estimators.
    Mean,
    Zero,
}

#[derive(Debug, Clone, Args)]
pub struct EstimatorArgs {
    /// Comma-separated estimator names.
    #[arg(long, value_delimiter = ',', default_value = ALL_ESTIMATORS)]
    pub estimators: Vec<String>,
    #[arg(long, value_enum, default_value = "hat")]
    pub propensities: PropensitySource,
    #[arg(long, value_enum, default_value = "mean")]
    pub imputation: ImputationKind,
    /// `squared` or `cross_entropy[:eps]`.
    #[arg(long, default_value = "squared")]
    pub loss: String,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub instance: PathBuf,
    #[command(flatten)]
    pub est: EstimatorArgs,
    #[arg(long, value_enum, default_value = "true")]
    pub rho_mode: RhoMode,
    /// `rho01,rho10` for `--rho-mode given`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub rho: Option<Vec<f64>>,
    /// Training config for `--rho-mode estimated`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the training seeds for `--rho-mode estimated`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainMethod {
    Naive,
    Eib,
    Ips,
    Dr,
    #[value(name = "ome_alt")]
    OmeAlt,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Instance directory, ingested dataset directory or raw triples file.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub method: TrainMethod,
    /// Training config in `key = value` form.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every training seed and drives the held-out split.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Cutoff for NDCG and recall.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Binarization threshold for raw triples.
    #[arg(long, default_value_t = 3.0)]
    pub threshold: f64,
    /// Share of observed triples held out for evaluation on real data.
    #[arg(long, default_value_t = 0.1)]
    pub test_fraction: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 3.0)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Benchmark spec in `key = value` form.
    #[arg(long)]
    pub config: PathBuf,
    /// Number of seeds.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    /// First seed; the benchmark config's seed when absent.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Prediction matrices to sweep; the benchmark config's when absent.
    #[arg(long, value_delimiter = ',')]
    pub pred_kinds: Option<Vec<String>>,
    #[command(flatten)]
    pub est: EstimatorArgs,
    /// Worker threads; each run owns its generator.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Estimate(a) => cmd_estimate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Ingest(a) => cmd_ingest(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))
}

fn hash_line(hash: &str) -> String {
    format!("# manifest_sha256={hash}\n")
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text)?;
        }
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn load_spec(path: &Path, seed: Option<u64>) -> Result<BenchmarkSpec> {
    let mut spec = BenchmarkSpec::from_config(&read_text(path)?)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    Ok(spec)
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = load_spec(&a.config, a.seed)?;
    let inst = sample_instance(&spec)?;
    for w in &inst.warnings {
        eprintln!("warning: {w}");
    }
    let hash = inst.write_dir(&a.out)?;
    eprintln!("wrote {} (manifest_sha256={hash})", a.out.display());
    Ok(())
}

fn parse_estimators(names: &[String]) -> Result<Vec<Estimator>> {
    if names.is_empty() {
        return Err(Error::InvalidArgument("no estimators requested".into()));
    }
    names.iter().map(|n| n.parse()).collect()
}

/// One estimator's outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRow {
    pub estimator: Estimator,
    pub value: std::result::Result<f64, String>,
    pub p_star: f64,
}

impl EstimateRow {
    pub fn relative_error(&self) -> Option<f64> {
        self.value.as_ref().ok().and_then(|v| relative_error(self.p_star, *v).ok())
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Evaluates each estimator; missing components become row errors. `rho`
/// feeds the noise-corrected estimators and may itself be an error.
pub fn estimate_rows(
    dataset: &RatingDataset,
    prediction: &PredictionMatrix,
    p_hat: Option<&PropensityMatrix>,
    kinds: &[Estimator],
    rho: &std::result::Result<ErrorParams, String>,
    imputation: ImputationKind,
    loss: LossKind,
) -> Result<Vec<EstimateRow>> {
    let p_star = true_inaccuracy(prediction, dataset.require_truth()?, loss)?;
    let row = |kind: Estimator| -> std::result::Result<f64, String> {
        let rho = if kind.corrects_noise() { Some(rho.clone()?) } else { None };
        let e_bar = match imputation {
            ImputationKind::Mean => mean_observed_imputation(dataset, prediction, loss, rho.as_ref()).map_err(|e| e.to_string())?,
            ImputationKind::Zero => ImputationMatrix::zeros(dataset.n_users, dataset.n_items),
        };
        let mut inputs = EstimatorInputs::new(dataset, prediction, loss).with_imputation(&e_bar);
        if let Some(p) = p_hat {
            inputs = inputs.with_propensities(p);
        }
        if let Some(r) = rho {
            inputs = inputs.with_error_params(r);
        }
        estimate(kind, &inputs).map_err(|e| e.to_string())
    };
    Ok(kinds
        .iter()
        .map(|&k| EstimateRow {
            estimator: k,
            value: row(k),
            p_star,
        })
        .collect())
}

pub const ESTIMATE_HEADER: &str = "estimator,value,p_star,re,error";

fn estimate_csv_line(r: &EstimateRow) -> String {
    let (value, err) = match &r.value {
        Ok(v) => (v.to_string(), String::new()),
        Err(e) => (String::new(), csv_field(e)),
    };
    format!("{},{value},{},{},{err}\n", r.estimator, r.p_star, fmt_opt(r.relative_error()))
}

fn load_alt_config(path: Option<&Path>, seed: Option<u64>) -> Result<AltTrainConfig> {
    let mut cfg = match path {
        Some(p) => from_kv::<AltTrainConfig>(&read_text(p)?)?,
        None => AltTrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.prediction.seed = s;
        cfg.imputation.seed = s;
        cfg.propensity.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_estimate(a: &EstimateArgs) -> Result<()> {
    let kinds = parse_estimators(&a.est.estimators)?;
    let loss: LossKind = a.est.loss.parse()?;
    let inst = read_instance_dir(&a.instance)?;
    let prediction = inst.prediction.as_ref().ok_or(Error::MissingComponent("pred.csv"))?;
    let p_hat = match a.est.propensities {
        PropensitySource::Hat => inst.p_hat.as_ref(),
        PropensitySource::True => inst.p_true.as_ref(),
    };
    let rho: std::result::Result<ErrorParams, String> = match a.rho_mode {
        RhoMode::True => Ok(inst.manifest.spec.rho),
        RhoMode::Given => {
            match a.rho.as_deref() {
                Some(&[r01, r10]) => Ok(ErrorParams::new(r01, r10)?),
                _ => return Err(Error::InvalidArgument("--rho-mode given needs --rho RHO01,RHO10".into())),
            }
        }
        RhoMode::Estimated => {
            let cfg = load_alt_config(a.config.as_deref(), a.seed)?;
            pretrain_noisy_model(&inst.dataset, cfg.pretrain_method, p_hat, &cfg.pretrain_config())
                .and_then(|q| identify_error_params(&q, cfg.k_extreme))
                .map(|id| id.params)
                .map_err(|e| format!("rate estimation failed: {e}"))
        }
    };
    let rows = estimate_rows(&inst.dataset, prediction, p_hat, &kinds, &rho, a.est.imputation, loss)?;
    let mut text = hash_line(&inst.manifest_sha256);
    if a.rho_mode != RhoMode::True {
        if let Ok(r) = &rho {
            let _ = writeln!(text, "# rho01_hat={} rho10_hat={}", r.rho01(), r.rho10());
        }
    }
    text.push_str(ESTIMATE_HEADER);
    text.push('\n');
    for r in &rows {
        text.push_str(&estimate_csv_line(r));
    }
    emit(a.out.as_deref(), &text)
}

fn to_u8_triples(triples: &[Triple]) -> Vec<(usize, usize, u8)> {
    triples.iter().map(|&(u, i, r)| (u, i, u8::from(r == 1.0))).collect()
}

fn dims_of(triples: &[Triple]) -> (usize, usize) {
    let n = triples.iter().map(|t| t.0).max().map_or(0, |x| x + 1);
    let m = triples.iter().map(|t| t.1).max().map_or(0, |x| x + 1);
    (n, m)
}

fn read_triples_file(path: &Path) -> Result<(Vec<Triple>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))?;
    Ok((read_triples(&bytes[..])?, bytes))
}

#[derive(Debug, Serialize)]
struct DatasetManifest<'a> {
    format: &'a str,
    version: &'a str,
    n_users: usize,
    n_items: usize,
    n_observed: usize,
    threshold: f64,
    source_sha256: String,
}

pub fn cmd_ingest(a: &IngestArgs) -> Result<()> {
    if !a.threshold.is_finite() {
        return Err(Error::InvalidArgument("threshold must be finite".into()));
    }
    let (raw, bytes) = read_triples_file(&a.input)?;
    let triples = binarize(&raw, a.threshold);
    let (n, m) = dims_of(&triples);
    let dataset = RatingDataset::from_triples(n, m, &to_u8_triples(&triples))?;
    let manifest = DatasetManifest {
        format: DATASET_FORMAT,
        version: env!("CARGO_PKG_VERSION"),
        n_users: n,
        n_items: m,
        n_observed: dataset.n_observed(),
        threshold: a.threshold,
        source_sha256: sha256_hex(&bytes),
    };
    fs::create_dir_all(&a.out)?;
    let manifest_text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(a.out.join("manifest.json"), &manifest_text)?;
    let mut w = BufWriter::new(fs::File::create(a.out.join("ratings.tsv"))?);
    w.write_all(hash_line(&sha256_hex(manifest_text.as_bytes())).as_bytes())?;
    crate::io::write_triples(&dataset, &mut w)?;
    w.flush()?;
    eprintln!("wrote {} ({} users, {} items, {} ratings)", a.out.display(), n, m, dataset.n_observed());
    Ok(())
}

/// Training data plus what to evaluate against.
struct TrainInput {
    dataset: RatingDataset,
    p_hat: Option<PropensityMatrix>,
    /// Labels and candidate mask for the evaluation.
    eval_labels: ndarray::Array2<f64>,
    eval_mask: Option<ndarray::Array2<f64>>,
    input_sha256: String,
    kind: &'static str,
}

fn manifest_format(dir: &Path) -> Result<String> {
    let bytes = fs::read(dir.join("manifest.json")).map_err(|e| Error::InvalidArgument(format!("{}: {e}", dir.display())))?;
    let v: serde_json::Value = serde_json::from_slice(&bytes)?;
    Ok(v.get("format").and_then(|f| f.as_str()).unwrap_or_default().to_string())
}

/// Splits observed triples into train and test parts by `seed`.
fn held_out(triples: &[Triple], fraction: f64, seed: u64) -> Result<TrainInput> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument("--test-fraction must lie in (0, 1)".into()));
    }
    let (n, m) = dims_of(triples);
    let mut order: Vec<usize> = (0..triples.len()).collect();
    order.shuffle(&mut SeededRng::new(seed).fork(7));
    let n_test = ((triples.len() as f64 * fraction).round() as usize).clamp(1, triples.len().saturating_sub(1).max(1));
    let (test_idx, train_idx) = order.split_at(n_test);
    let pick = |idx: &[usize]| -> Vec<(usize, usize, u8)> { to_u8_triples(&idx.iter().map(|&j| triples[j]).collect::<Vec<_>>()) };
    let train = RatingDataset::from_triples(n, m, &pick(train_idx))?;
    let test = RatingDataset::from_triples(n, m, &pick(test_idx))?;
    Ok(TrainInput {
        dataset: train,
        p_hat: None,
        eval_labels: test.observed_ratings,
        eval_mask: Some(test.observed_mask),
        input_sha256: String::new(),
        kind: "held_out",
    })
}

fn load_train_input(a: &TrainArgs, seed: u64) -> Result<TrainInput> {
    if a.input.is_dir() {
        let format = manifest_format(&a.input)?;
        if format == DATASET_FORMAT {
            let manifest_bytes = fs::read(a.input.join("manifest.json"))?;
            let triples = read_triples(BufReader::new(fs::File::open(a.input.join("ratings.tsv"))?))?;
            let mut input = held_out(&triples, a.test_fraction, seed)?;
            input.input_sha256 = sha256_hex(&manifest_bytes);
            return Ok(input);
        }
        let inst = read_instance_dir(&a.input)?;
        let eval_labels = inst.dataset.require_truth()?.clone();
        return Ok(TrainInput {
            dataset: inst.dataset,
            p_hat: inst.p_hat,
            eval_labels,
            eval_mask: None,
            input_sha256: inst.manifest_sha256,
            kind: "ground_truth",
        });
    }
    let (raw, bytes) = read_triples_file(&a.input)?;
    let mut input = held_out(&binarize(&raw, a.threshold), a.test_fraction, seed)?;
    input.input_sha256 = sha256_hex(&bytes);
    Ok(input)
}

fn method_name(m: TrainMethod) -> &'static str {
    match m {
        TrainMethod::Naive => "naive",
        TrainMethod::Eib => "eib",
        TrainMethod::Ips => "ips",
        TrainMethod::Dr => "dr",
        TrainMethod::OmeAlt => "ome_alt",
    }
}

fn write_trace(dir: &Path, hash: &str, trace: &TrainTrace) -> Result<()> {
    let mut text = hash_line(hash);
    text.push_str(&trace.to_csv());
    fs::write(dir.join("trace.csv"), text)?;
    Ok(())
}

fn write_ckpt(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_checkpoint(ckpt, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    if a.k == 0 {
        return Err(Error::InvalidArgument("--k must be at least 1".into()));
    }
    let cfg = load_alt_config(a.config.as_deref(), a.seed)?;
    let seed = a.seed.unwrap_or(cfg.prediction.seed);
    let input = load_train_input(a, seed)?;

    fs::create_dir_all(&a.out)?;
    let manifest = json!({
        "format": RUN_FORMAT,
        "version": env!("CARGO_PKG_VERSION"),
        "command": "train",
        "method": method_name(a.method),
        "input_sha256": input.input_sha256,
        "evaluation": input.kind,
        "seed": seed,
        "k": a.k,
        "test_fraction": a.test_fraction,
        "threshold": a.threshold,
        "config": cfg,
    });
    let manifest_text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(a.out.join("manifest.json"), &manifest_text)?;
    let hash = sha256_hex(manifest_text.as_bytes());

    let propensities = |dataset: &RatingDataset| -> Result<PropensityMatrix> {
        match &input.p_hat {
            Some(p) => Ok(p.clone()),
            None => train_propensity(dataset, &cfg.propensity)?.model.to_propensity_matrix(cfg.propensity_floor),
        }
    };
    let mut trace = TrainTrace::default();
    let result = (|| -> Result<(crate::models::FactorModel, Option<crate::models::ImputationModel>)> {
        match a.method {
            TrainMethod::OmeAlt => {
                let p = propensities(&input.dataset)?;
                let out = fit_denoised_traced(&input.dataset, Some(&p), &cfg, &mut trace)?;
                Ok((out.fit.prediction, Some(out.fit.imputation)))
            }
            m => {
                let method = match m {
                    TrainMethod::Naive => BaseMethod::Naive,
                    TrainMethod::Eib => BaseMethod::Eib,
                    TrainMethod::Ips => BaseMethod::Ips,
                    _ => BaseMethod::Dr,
                };
                let p = if method.needs_propensities() { Some(propensities(&input.dataset)?) } else { None };
                let fit = train_prediction_traced(&input.dataset, method, p.as_ref(), &cfg.pretrain_config(), &mut trace)?;
                Ok((fit.model, fit.imputation))
            }
        }
    })();
    write_trace(&a.out, &hash, &trace)?;
    let (model, imputation) = result?;
    for w in &trace.warnings {
        eprintln!("warning: {w}");
    }

    write_ckpt(&a.out.join("model.ckpt"), &Checkpoint::Factor(model.clone()))?;
    if let Some(e) = imputation {
        write_ckpt(&a.out.join("imputation.ckpt"), &Checkpoint::Imputation(e))?;
    }
    let scores = model.predict_all();
    let report = evaluate_ranking(scores.values(), &input.eval_labels, input.eval_mask.as_ref(), a.k)?;
    let mut text = hash_line(&hash);
    text.push_str("metric,value\n");
    let _ = writeln!(text, "auc,{}", report.auc);
    let _ = writeln!(text, "ndcg@{},{}", a.k, report.ndcg);
    let _ = writeln!(text, "recall@{},{}", a.k, report.recall);
    fs::write(a.out.join("eval.csv"), &text)?;
    eprintln!("auc {:.4} ndcg@{k} {:.4} recall@{k} {:.4}", report.auc, report.ndcg, report.recall, k = a.k);
    Ok(())
}

/// Rows of one (prediction matrix, seed) run of a sweep.
fn sweep_run(spec: &BenchmarkSpec, kinds: &[Estimator], est: &EstimatorArgs, loss: LossKind) -> Result<Vec<EstimateRow>> {
    let inst = sample_instance(spec)?;
    let p = match est.propensities {
        PropensitySource::Hat => &inst.p_hat,
        PropensitySource::True => &inst.p_true,
    };
    estimate_rows(&inst.dataset, &inst.prediction, Some(p), kinds, &Ok(spec.rho), est.imputation, loss)
}

pub const SWEEP_HEADER: &str = "pred_kind,seed,estimator,value,p_star,re,error";

pub fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    if a.seeds == 0 {
        return Err(Error::InvalidArgument("--seeds must be at least 1".into()));
    }
    if a.jobs == 0 {
        return Err(Error::InvalidArgument("--jobs must be at least 1".into()));
    }
    let base = load_spec(&a.config, None)?;
    let first = a.seed.unwrap_or(base.seed);
    let kinds = parse_estimators(&a.est.estimators)?;
    let loss: LossKind = a.est.loss.parse()?;
    let pred_kinds: Vec<PredKind> = match &a.pred_kinds {
        Some(names) => names.iter().map(|n| n.parse()).collect::<Result<_>>()?,
        None => vec![base.pred_kind],
    };
    let jobs: Vec<BenchmarkSpec> = pred_kinds
        .iter()
        .flat_map(|&k| {
            let base = &base;
            (0..a.seeds).map(move |s| BenchmarkSpec {
                pred_kind: k,
                seed: first + s,
                ..base.clone()
            })
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start {} workers: {e}", a.jobs)))?;
    let results: Vec<Result<Vec<EstimateRow>>> = pool.install(|| jobs.par_iter().map(|s| sweep_run(s, &kinds, &a.est, loss)).collect());

    let mut text = hash_line(&base.sha256());
    text.push_str(SWEEP_HEADER);
    text.push('\n');
    let mut all = Vec::with_capacity(jobs.len());
    for (spec, rows) in jobs.iter().zip(results) {
        let rows = rows?;
        for r in &rows {
            let _ = write!(text, "{},{},", spec.pred_kind, spec.seed);
            text.push_str(&estimate_csv_line(r));
        }
        all.push((spec.pred_kind, rows));
    }
    for &pk in &pred_kinds {
        for (j, kind) in kinds.iter().enumerate() {
            let runs: Vec<&EstimateRow> = all.iter().filter(|(k, _)| *k == pk).map(|(_, rows)| &rows[j]).collect();
            let ok: Vec<(f64, f64)> = runs.iter().filter_map(|r| Some((*r.value.as_ref().ok()?, r.relative_error()?))).collect();
            let n = ok.len() as f64;
            let p_star = runs.iter().map(|r| r.p_star).sum::<f64>() / runs.len() as f64;
            if ok.is_empty() {
                let _ = writeln!(text, "{pk},mean,{kind},,{p_star},,no successful runs");
            } else {
                let value = ok.iter().map(|x| x.0).sum::<f64>() / n;
                let re = ok.iter().map(|x| x.1).sum::<f64>() / n;
                let _ = writeln!(text, "{pk},mean,{kind},{value},{p_star},{re},");
            }
        }
    }
    emit(a.out.as_deref(), &text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn help_exits_zero_and_bad_flags_exit_two() {
        assert_eq!(run(["omedr", "--help"]), 0);
        assert_eq!(run(["omedr", "synth", "--bogus"]), EXIT_VALIDATION);
    }

    #[test]
    fn exit_codes_split_validation_from_runtime() {
        assert_eq!(exit_code(&Error::config("alpha", "bad")), EXIT_VALIDATION);
        assert_eq!(
            exit_code(&Error::Divergence {
                epoch: 1,
                what: "nan".into()
            }),
            EXIT_RUNTIME
        );
    }

    #[test]
    fn csv_fields_with_commas_are_quoted() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("plain"), "plain");
    }
}

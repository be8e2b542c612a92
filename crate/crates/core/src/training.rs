//! Model fitting: propensity regression, the plain debiased MF trainers, the
//! noisy-rate pretraining and the alternating denoise loop.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{estimate, Estimator, EstimatorInputs};
use crate::losses::LossKind;
use crate::models::{
    sgd_step_imputation, sgd_step_propensity, sgd_step_surrogate, FactorModel, ImputationModel, ImputationObjective, Optimizer,
    PairWeighting, PropensityModel, SgdConfig, SurrogateObjective,
};
use crate::noise::{rho_from_prediction_extremes, NoisyRateModel};
use crate::types::{check_dim, ErrorParams, PropensityMatrix, RatingDataset, SeededRng, DEFAULT_PROPENSITY_FLOOR};

/// Debiasing scheme used to fit a prediction model without noise correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BaseMethod {
    Naive,
    Eib,
    #[default]
    Ips,
    Dr,
}

impl BaseMethod {
    pub fn needs_propensities(self) -> bool {
        matches!(self, BaseMethod::Ips | BaseMethod::Dr)
    }

    fn uses_imputation(self) -> bool {
        matches!(self, BaseMethod::Eib | BaseMethod::Dr)
    }

    fn estimator(self) -> Estimator {
        match self {
            BaseMethod::Naive => Estimator::Naive,
            BaseMethod::Eib => Estimator::Eib,
            BaseMethod::Ips => Estimator::Ips,
            BaseMethod::Dr => Estimator::Dr,
        }
    }
}

impl fmt::Display for BaseMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaseMethod::Naive => "naive",
            BaseMethod::Eib => "eib",
            BaseMethod::Ips => "ips",
            BaseMethod::Dr => "dr",
        })
    }
}

impl FromStr for BaseMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "naive" => Ok(BaseMethod::Naive),
            "eib" => Ok(BaseMethod::Eib),
            "ips" => Ok(BaseMethod::Ips),
            "dr" => Ok(BaseMethod::Dr),
            other => Err(Error::InvalidArgument(format!("unknown training method `{other}`"))),
        }
    }
}

/// Settings for a single prediction model fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictionConfig {
    pub dim: usize,
    pub loss: LossKind,
    pub prediction: SgdConfig,
    /// Used by the methods with an imputation model.
    pub imputation: SgdConfig,
    /// Share of the observed pairs held out for early stopping. Only used
    /// when `prediction.patience > 0`.
    pub holdout_fraction: f64,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        PredictionConfig {
            dim: 8,
            loss: LossKind::SquaredError,
            prediction: SgdConfig::default(),
            imputation: SgdConfig::default(),
            holdout_fraction: 0.1,
        }
    }
}

impl PredictionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("dim", "must be at least 1"));
        }
        self.prediction.validate()?;
        self.imputation.validate()?;
        check_holdout(self.holdout_fraction)
    }
}

fn check_holdout(h: f64) -> Result<()> {
    if (0.0..0.5).contains(&h) {
        Ok(())
    } else {
        Err(Error::config("holdout_fraction", "must lie in [0, 0.5)"))
    }
}

/// Settings for the alternating denoise loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AltTrainConfig {
    pub outer_loops: usize,
    pub steps_prediction: usize,
    pub steps_imputation: usize,
    /// Flip rates used by the first prediction phase.
    pub rho_init: ErrorParams,
    /// Extreme group size read from the noisy-rate model.
    pub k_extreme: usize,
    /// Keep `rho_init` for the whole run instead of refreshing it.
    pub freeze_rho: bool,
    /// Start the prediction model from the pretrained noisy-rate model
    /// when one is supplied.
    pub warm_start: bool,
    pub pretrain_method: BaseMethod,
    pub dim: usize,
    pub loss: LossKind,
    pub prediction: SgdConfig,
    pub imputation: SgdConfig,
    pub propensity: SgdConfig,
    pub propensity_floor: f64,
    pub holdout_fraction: f64,
}

impl Default for AltTrainConfig {
    fn default() -> Self {
        AltTrainConfig {
            outer_loops: 30,
            steps_prediction: 10,
            steps_imputation: 10,
            rho_init: ErrorParams::noiseless(),
            k_extreme: 1,
            freeze_rho: false,
            warm_start: true,
            pretrain_method: BaseMethod::Ips,
            dim: 8,
            loss: LossKind::SquaredError,
            prediction: SgdConfig::default(),
            imputation: SgdConfig::default(),
            propensity: SgdConfig {
                learning_rate: 1.0,
                batch_size: 0,
                weight_decay: 0.0,
                max_epochs: 200,
                ..SgdConfig::default()
            },
            propensity_floor: DEFAULT_PROPENSITY_FLOOR,
            holdout_fraction: 0.1,
        }
    }
}

impl AltTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_prediction == 0 {
            return Err(Error::config("steps_prediction", "must be at least 1"));
        }
        if self.steps_imputation == 0 {
            return Err(Error::config("steps_imputation", "must be at least 1"));
        }
        if self.k_extreme == 0 {
            return Err(Error::config("k_extreme", "must be at least 1"));
        }
        if self.dim == 0 {
            return Err(Error::config("dim", "must be at least 1"));
        }
        if !(self.propensity_floor > 0.0 && self.propensity_floor <= 1.0) {
            return Err(Error::config("propensity_floor", "must lie in (0, 1]"));
        }
        self.prediction.validate()?;
        self.imputation.validate()?;
        self.propensity.validate()?;
        check_holdout(self.holdout_fraction)
    }

    /// Configuration used to pretrain the noisy-rate model.
    pub fn pretrain_config(&self) -> PredictionConfig {
        PredictionConfig {
            dim: self.dim,
            loss: self.loss,
            prediction: self.prediction,
            imputation: self.imputation,
            holdout_fraction: self.holdout_fraction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub outer_loop: usize,
    pub rho: ErrorParams,
    /// The refreshed rates were clamped into the valid region.
    pub clamped: bool,
    pub objective: f64,
    pub val_metric: f64,
}

/// One record per completed outer loop (or epoch) plus warnings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
    pub warnings: Vec<String>,
}

impl TrainTrace {
    pub const CSV_HEADER: &'static str = "loop,rho01_hat,rho10_hat,objective,val_metric";

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last_rho(&self) -> Option<ErrorParams> {
        self.records.last().map(|r| r.rho)
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.records {
            writeln!(w, "{},{},{},{},{}", r.outer_loop, r.rho.rho01(), r.rho.rho10(), r.objective, r.val_metric)?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("trace CSV is ASCII")
    }

    fn push(&mut self, record: TraceRecord) {
        if record.clamped {
            self.warnings.push(format!(
                "loop {}: refreshed error rates clamped to ({}, {})",
                record.outer_loop,
                record.rho.rho01(),
                record.rho.rho10()
            ));
        }
        self.records.push(record);
    }
}

/// Endless shuffled stream of pairs.
struct BatchStream {
    pairs: Vec<(usize, usize)>,
    pos: usize,
    rng: SeededRng,
}

impl BatchStream {
    fn new(pairs: Vec<(usize, usize)>, rng: SeededRng) -> Self {
        let mut s = BatchStream { pairs, pos: 0, rng };
        s.pairs.shuffle(&mut s.rng);
        s
    }

    /// Next `size` pairs; an epoch boundary ends the batch early.
    fn next_batch(&mut self, size: usize) -> &[(usize, usize)] {
        if self.pos >= self.pairs.len() {
            self.pairs.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let start = self.pos;
        self.pos = (start + size).min(self.pairs.len());
        &self.pairs[start..self.pos]
    }

    fn epoch_batches(&mut self, size: usize) -> Vec<Vec<(usize, usize)>> {
        self.pairs.shuffle(&mut self.rng);
        self.pos = self.pairs.len();
        self.pairs.chunks(size.max(1)).map(<[_]>::to_vec).collect()
    }
}

fn all_pairs(n: usize, m: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|u| (0..m).map(move |i| (u, i))).collect()
}

fn at_epoch<T>(epoch: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Divergence { what, .. } => Error::Divergence { epoch, what },
        other => other,
    })
}

/// A propensity model together with the loss recorded before each epoch's
/// updates (the exact full-data loss in full-batch mode).
#[derive(Debug, Clone)]
pub struct PropensityFit {
    pub model: PropensityModel,
    pub epoch_losses: Vec<f64>,
}

/// Logistic regression of the observation indicator over all pairs.
pub fn train_propensity(dataset: &RatingDataset, config: &SgdConfig) -> Result<PropensityFit> {
    config.validate()?;
    let (n, m) = dataset.dim();
    let mut model = PropensityModel::zeros(n, m);
    let mut opt = Optimizer::new(config, model.as_slice().len());
    let mut stream = BatchStream::new(all_pairs(n, m), SeededRng::new(config.seed).fork(0));
    let batch = config.effective_batch(n * m);
    let mut epoch_losses = Vec::with_capacity(config.max_epochs);
    for epoch in 0..config.max_epochs {
        let mut total = 0.0;
        let mut count = 0usize;
        for b in stream.epoch_batches(batch) {
            let value = at_epoch(epoch, sgd_step_propensity(&mut model, dataset, &b, &mut opt))?;
            total += value * b.len() as f64;
            count += b.len();
        }
        let loss = total / count.max(1) as f64;
        if !loss.is_finite() || !model.is_finite() {
            return Err(Error::Divergence {
                epoch,
                what: "propensity loss is not finite".into(),
            });
        }
        epoch_losses.push(loss);
    }
    Ok(PropensityFit { model, epoch_losses })
}

/// Observed pairs split into a training part and a validation slice.
struct Holdout {
    train: RatingDataset,
    train_pairs: Vec<(usize, usize)>,
    val: Option<RatingDataset>,
    fraction: f64,
}

fn split_holdout(dataset: &RatingDataset, fraction: f64, rng: &mut SeededRng) -> Holdout {
    let mut observed = dataset.observed_pairs();
    let n_val = (fraction * observed.len() as f64).round() as usize;
    if n_val == 0 || n_val >= observed.len() {
        return Holdout {
            train: dataset.clone(),
            train_pairs: observed,
            val: None,
            fraction: 0.0,
        };
    }
    observed.shuffle(rng);
    let (val_pairs, train_pairs) = observed.split_at(n_val);
    let mut train = dataset.clone();
    let mut val = dataset.clone();
    val.observed_mask.fill(0.0);
    for &(u, i) in val_pairs {
        train.observed_mask[[u, i]] = 0.0;
        val.observed_mask[[u, i]] = 1.0;
    }
    let mut train_pairs = train_pairs.to_vec();
    train_pairs.sort_unstable();
    Holdout {
        train,
        train_pairs,
        val: Some(val),
        fraction,
    }
}

/// Propensities of landing in a slice that keeps a `share` of observed pairs.
fn scaled_propensities(p_hat: &PropensityMatrix, share: f64) -> Result<PropensityMatrix> {
    PropensityMatrix::new(p_hat.values() * share, p_hat.floor() * share)
}

/// Everything the objective and validation metric need for one method.
struct Weights {
    train: Option<PropensityMatrix>,
    val: Option<PropensityMatrix>,
}

fn holdout_weights(p_hat: Option<&PropensityMatrix>, holdout: &Holdout) -> Result<Weights> {
    match p_hat {
        None => Ok(Weights { train: None, val: None }),
        Some(p) if holdout.val.is_none() => Ok(Weights {
            train: Some(p.clone()),
            val: None,
        }),
        Some(p) => Ok(Weights {
            train: Some(scaled_propensities(p, 1.0 - holdout.fraction)?),
            val: Some(scaled_propensities(p, holdout.fraction)?),
        }),
    }
}

fn evaluate(
    kind: Estimator,
    dataset: &RatingDataset,
    model: &FactorModel,
    p_hat: Option<&PropensityMatrix>,
    imputation: Option<&ImputationModel>,
    rho: ErrorParams,
    loss: LossKind,
) -> Result<f64> {
    let preds = model.predict_all();
    let e_bar = imputation.map(ImputationModel::predict_all).transpose()?;
    let mut inputs = EstimatorInputs::new(dataset, &preds, loss).with_error_params(rho);
    if let Some(p) = p_hat {
        inputs = inputs.with_propensities(p);
    }
    if let Some(e) = e_bar.as_ref() {
        inputs = inputs.with_imputation(e);
    }
    estimate(kind, &inputs)
}

fn noise_corrected(kind: Estimator) -> Estimator {
    match kind {
        Estimator::Naive => Estimator::OmeNaive,
        Estimator::Eib => Estimator::OmeEib,
        Estimator::Ips => Estimator::OmeIps,
        Estimator::Dr => Estimator::OmeDr,
        other => other,
    }
}

/// Early-stopping bookkeeping shared by the trainers.
struct BestSoFar<T> {
    patience: usize,
    best: Option<(f64, T)>,
    since: usize,
}

impl<T: Clone> BestSoFar<T> {
    fn new(patience: usize) -> Self {
        BestSoFar {
            patience,
            best: None,
            since: 0,
        }
    }

    /// Records a score; returns true when training should stop.
    fn observe(&mut self, score: f64, state: impl FnOnce() -> T) -> bool {
        if self.patience == 0 {
            return false;
        }
        match &self.best {
            Some((b, _)) if score >= *b => {
                self.since += 1;
                self.since >= self.patience
            }
            _ => {
                self.best = Some((score, state()));
                self.since = 0;
                false
            }
        }
    }

    fn into_best(self) -> Option<T> {
        self.best.map(|(_, s)| s)
    }
}

/// Output of a prediction model fit.
#[derive(Debug, Clone)]
pub struct PredictionFit {
    pub model: FactorModel,
    pub imputation: Option<ImputationModel>,
    pub trace: TrainTrace,
}

/// Fits an MF prediction model with one of the uncorrected debiasing
/// methods. Naive and IPS run epochs over observed pairs; EIB and DR train
/// jointly with an imputation model, with epoch-sized phases.
pub fn train_prediction(
    dataset: &RatingDataset,
    method: BaseMethod,
    p_hat: Option<&PropensityMatrix>,
    config: &PredictionConfig,
) -> Result<PredictionFit> {
    train_prediction_traced(dataset, method, p_hat, config, &mut TrainTrace::default())
}

/// [`train_prediction`] recording into `trace`, which keeps the completed
/// epochs when training fails.
pub fn train_prediction_traced(
    dataset: &RatingDataset,
    method: BaseMethod,
    p_hat: Option<&PropensityMatrix>,
    config: &PredictionConfig,
    trace: &mut TrainTrace,
) -> Result<PredictionFit> {
    config.validate()?;
    let p_hat = resolve_propensities(dataset, method, p_hat)?;
    if method.uses_imputation() {
        let n_pairs = dataset.n_pairs();
        let n_obs = dataset.n_observed().max(1);
        let alt = AltTrainConfig {
            outer_loops: config.prediction.max_epochs,
            steps_prediction: n_pairs.div_ceil(config.prediction.effective_batch(n_pairs)),
            steps_imputation: n_obs.div_ceil(config.imputation.effective_batch(n_obs)),
            freeze_rho: true,
            dim: config.dim,
            loss: config.loss,
            prediction: config.prediction,
            imputation: config.imputation,
            holdout_fraction: config.holdout_fraction,
            ..AltTrainConfig::default()
        };
        let (model, imputation) = joint_loop(dataset, p_hat, None, None, &alt, method.estimator(), trace)?;
        return Ok(PredictionFit {
            model,
            imputation: Some(imputation),
            trace: trace.clone(),
        });
    }
    let model = observed_only_fit(dataset, method, p_hat, config, trace)?;
    Ok(PredictionFit {
        model,
        imputation: None,
        trace: trace.clone(),
    })
}

fn resolve_propensities<'a>(
    dataset: &RatingDataset,
    method: BaseMethod,
    p_hat: Option<&'a PropensityMatrix>,
) -> Result<Option<&'a PropensityMatrix>> {
    if !method.needs_propensities() {
        return Ok(None);
    }
    let p = p_hat.ok_or(Error::MissingComponent("propensities"))?;
    check_dim("propensities", dataset.dim(), p.dim())?;
    Ok(Some(p))
}

fn observed_only_fit(
    dataset: &RatingDataset,
    method: BaseMethod,
    p_hat: Option<&PropensityMatrix>,
    config: &PredictionConfig,
    trace: &mut TrainTrace,
) -> Result<FactorModel> {
    let sgd = &config.prediction;
    let (n, m) = dataset.dim();
    let root = SeededRng::new(sgd.seed);
    let mut model = FactorModel::init(n, m, config.dim, &mut root.fork(0))?;
    let holdout_fraction = if sgd.patience > 0 { config.holdout_fraction } else { 0.0 };
    let holdout = split_holdout(dataset, holdout_fraction, &mut root.fork(1));
    if holdout.train_pairs.is_empty() {
        return Err(Error::EmptyObservedSet);
    }
    let weights = holdout_weights(p_hat, &holdout)?;
    let weighting = weights.train.as_ref().map_or(PairWeighting::Uniform, PairWeighting::InversePropensity);
    let objective = SurrogateObjective {
        dataset: &holdout.train,
        weighting,
        imputation: None,
        rho: ErrorParams::noiseless(),
        loss: config.loss,
        weight_decay: sgd.weight_decay,
    };
    let kind = method.estimator();
    let mut opt = Optimizer::new(sgd, model.params.as_slice().len());
    let mut stream = BatchStream::new(holdout.train_pairs.clone(), root.fork(2));
    let batch = sgd.effective_batch(holdout.train_pairs.len());
    let mut best = BestSoFar::new(sgd.patience);
    for epoch in 0..sgd.max_epochs {
        for b in stream.epoch_batches(batch) {
            at_epoch(epoch, sgd_step_surrogate(&mut model, &objective, &b, &mut opt))?;
        }
        if !model.params.is_finite() {
            return Err(Error::Divergence {
                epoch,
                what: "prediction parameters are not finite".into(),
            });
        }
        let value = evaluate(kind, &holdout.train, &model, weights.train.as_ref(), None, objective.rho, config.loss)?;
        let val_metric = match &holdout.val {
            Some(val) => evaluate(kind, val, &model, weights.val.as_ref(), None, objective.rho, config.loss)?,
            None => value,
        };
        trace.push(TraceRecord {
            outer_loop: epoch,
            rho: objective.rho,
            clamped: false,
            objective: value,
            val_metric,
        });
        if best.observe(val_metric, || model.clone()) {
            break;
        }
    }
    if let Some(b) = best.into_best() {
        model = b;
    }
    Ok(model)
}

/// Fits `h` on the observed noisy labels with an uncorrected method and
/// exports its predictions as the noisy positive rate.
pub fn pretrain_noisy_model(
    dataset: &RatingDataset,
    method: BaseMethod,
    p_hat: Option<&PropensityMatrix>,
    config: &PredictionConfig,
) -> Result<NoisyRateModel> {
    let fit = train_prediction(dataset, method, p_hat, config)?;
    NoisyRateModel::new(fit.model.predict_all().values().clone())
}

/// Final models and per-loop trace of the alternating loop.
#[derive(Debug, Clone)]
pub struct AltTrainOutput {
    pub prediction: FactorModel,
    pub imputation: ImputationModel,
    pub trace: TrainTrace,
}

/// Alternating denoise training with the noise-corrected DR objective.
///
/// Each outer loop takes `steps_prediction` D-batch steps on the prediction
/// model, finds the extreme prediction pairs over all of D, re-reads the
/// error rates from the frozen noisy-rate model at those pairs, then takes
/// `steps_imputation` O-batch steps on the imputation model.
///
/// `init` seeds the prediction model when `warm_start` is set; it is
/// normally the model behind `noisy`.
pub fn alternating_denoise_train(
    dataset: &RatingDataset,
    p_hat: &PropensityMatrix,
    noisy: &NoisyRateModel,
    init: Option<&FactorModel>,
    config: &AltTrainConfig,
) -> Result<AltTrainOutput> {
    alternating_denoise_train_traced(dataset, p_hat, noisy, init, config, &mut TrainTrace::default())
}

/// [`alternating_denoise_train`] recording into `trace`.
pub fn alternating_denoise_train_traced(
    dataset: &RatingDataset,
    p_hat: &PropensityMatrix,
    noisy: &NoisyRateModel,
    init: Option<&FactorModel>,
    config: &AltTrainConfig,
    trace: &mut TrainTrace,
) -> Result<AltTrainOutput> {
    config.validate()?;
    check_dim("propensities", dataset.dim(), p_hat.dim())?;
    check_dim("noisy rate model", dataset.dim(), noisy.dim())?;
    if let Some(f) = init {
        check_dim("initial prediction model", dataset.dim(), (f.params.n_users(), f.params.n_items()))?;
        if f.params.dim() != config.dim {
            return Err(Error::config("dim", "does not match the initial prediction model"));
        }
    }
    let init = init.filter(|_| config.warm_start);
    let (prediction, imputation) = joint_loop(dataset, Some(p_hat), Some(noisy), init, config, Estimator::Dr, trace)?;
    Ok(AltTrainOutput {
        prediction,
        imputation,
        trace: trace.clone(),
    })
}

/// Propensities, noisy-rate model and alternating loop in one call.
/// Propensities are fitted when not supplied.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub p_hat: PropensityMatrix,
    pub noisy: NoisyRateModel,
    /// The model behind `noisy`.
    pub pretrained: FactorModel,
    pub fit: AltTrainOutput,
}

pub fn fit_denoised(dataset: &RatingDataset, p_hat: Option<&PropensityMatrix>, config: &AltTrainConfig) -> Result<PipelineOutput> {
    fit_denoised_traced(dataset, p_hat, config, &mut TrainTrace::default())
}

/// [`fit_denoised`] recording the alternating loop into `trace`.
pub fn fit_denoised_traced(
    dataset: &RatingDataset,
    p_hat: Option<&PropensityMatrix>,
    config: &AltTrainConfig,
    trace: &mut TrainTrace,
) -> Result<PipelineOutput> {
    config.validate()?;
    let p_hat = match p_hat {
        Some(p) => p.clone(),
        None => train_propensity(dataset, &config.propensity)?
            .model
            .to_propensity_matrix(config.propensity_floor)?,
    };
    let pretrained = train_prediction(dataset, config.pretrain_method, Some(&p_hat), &config.pretrain_config())?.model;
    let noisy = NoisyRateModel::new(pretrained.predict_all().values().clone())?;
    let fit = alternating_denoise_train_traced(dataset, &p_hat, &noisy, Some(&pretrained), config, trace)?;
    Ok(PipelineOutput {
        p_hat,
        noisy,
        pretrained,
        fit,
    })
}

fn joint_loop(
    dataset: &RatingDataset,
    p_hat: Option<&PropensityMatrix>,
    noisy: Option<&NoisyRateModel>,
    init: Option<&FactorModel>,
    config: &AltTrainConfig,
    base: Estimator,
    trace: &mut TrainTrace,
) -> Result<(FactorModel, ImputationModel)> {
    let (n, m) = dataset.dim();
    let pred_root = SeededRng::new(config.prediction.seed);
    let imp_root = SeededRng::new(config.imputation.seed);
    let mut prediction = match init {
        Some(f) => f.clone(),
        None => FactorModel::init(n, m, config.dim, &mut pred_root.fork(0))?,
    };
    let mut imputation = ImputationModel::init(n, m, config.dim, &mut imp_root.fork(0))?;
    if config.outer_loops == 0 {
        return Ok((prediction, imputation));
    }

    let holdout_fraction = if config.prediction.patience > 0 { config.holdout_fraction } else { 0.0 };
    let holdout = split_holdout(dataset, holdout_fraction, &mut pred_root.fork(1));
    if holdout.train_pairs.is_empty() {
        return Err(Error::EmptyObservedSet);
    }
    let weights = holdout_weights(p_hat, &holdout)?;
    let weighting = weights.train.as_ref().map_or(PairWeighting::Uniform, PairWeighting::InversePropensity);
    let kind = if noisy.is_some() { noise_corrected(base) } else { base };

    let mut pred_opt = Optimizer::new(&config.prediction, prediction.params.as_slice().len());
    let mut imp_opt = Optimizer::new(&config.imputation, imputation.params.as_slice().len());
    let mut d_stream = BatchStream::new(all_pairs(n, m), pred_root.fork(2));
    let mut o_stream = BatchStream::new(holdout.train_pairs.clone(), imp_root.fork(1));
    let d_batch = config.prediction.effective_batch(n * m);
    let o_batch = config.imputation.effective_batch(holdout.train_pairs.len());

    let mut rho = config.rho_init;
    let mut best = BestSoFar::new(config.prediction.patience);
    for outer in 0..config.outer_loops {
        let objective = SurrogateObjective {
            dataset: &holdout.train,
            weighting,
            imputation: Some(&imputation),
            rho,
            loss: config.loss,
            weight_decay: config.prediction.weight_decay,
        };
        for _ in 0..config.steps_prediction {
            let b = d_stream.next_batch(d_batch);
            at_epoch(outer, sgd_step_surrogate(&mut prediction, &objective, b, &mut pred_opt))?;
        }
        if !prediction.params.is_finite() {
            return Err(Error::Divergence {
                epoch: outer,
                what: "prediction parameters are not finite".into(),
            });
        }

        let mut clamped = false;
        if let (Some(q), false) = (noisy, config.freeze_rho) {
            let preds = prediction.predict_all();
            (rho, clamped) = rho_from_prediction_extremes(q, &preds, config.k_extreme)?;
        }

        let imp_objective = ImputationObjective {
            dataset: &holdout.train,
            predictions: &prediction,
            weighting,
            rho,
            loss: config.loss,
            weight_decay: config.imputation.weight_decay,
        };
        for _ in 0..config.steps_imputation {
            let b = o_stream.next_batch(o_batch);
            at_epoch(outer, sgd_step_imputation(&mut imputation, &imp_objective, b, &mut imp_opt))?;
        }
        if !imputation.params.is_finite() {
            return Err(Error::Divergence {
                epoch: outer,
                what: "imputation parameters are not finite".into(),
            });
        }

        let value = evaluate(kind, &holdout.train, &prediction, weights.train.as_ref(), Some(&imputation), rho, config.loss)?;
        let val_metric = match &holdout.val {
            Some(val) => evaluate(kind, val, &prediction, weights.val.as_ref(), Some(&imputation), rho, config.loss)?,
            None => value,
        };
        if !value.is_finite() {
            return Err(Error::Divergence {
                epoch: outer,
                what: "objective is not finite".into(),
            });
        }
        trace.push(TraceRecord {
            outer_loop: outer,
            rho,
            clamped,
            objective: value,
            val_metric,
        });
        if best.observe(val_metric, || (prediction.clone(), imputation.clone())) {
            break;
        }
    }
    if let Some((p, e)) = best.into_best() {
        prediction = p;
        imputation = e;
    }
    Ok((prediction, imputation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    fn bernoulli_dataset(n: usize, m: usize, p_obs: f64, seed: u64) -> RatingDataset {
        let mut rng = SeededRng::new(seed);
        let mask = Array2::from_shape_fn((n, m), |_| if rng.random_bool(p_obs) { 1.0 } else { 0.0 });
        let ratings = Array2::from_shape_fn((n, m), |(u, i)| if mask[[u, i]] == 1.0 && (u + i) % 2 == 0 { 1.0 } else { 0.0 });
        RatingDataset::new(mask, ratings, None).unwrap()
    }

    fn full_batch(epochs: usize, lr: f64) -> SgdConfig {
        SgdConfig {
            learning_rate: lr,
            batch_size: 0,
            weight_decay: 0.0,
            max_epochs: epochs,
            ..SgdConfig::default()
        }
    }

    #[test]
    fn zero_epoch_propensity_fit_is_the_initial_model() {
        let d = bernoulli_dataset(4, 5, 0.5, 1);
        let fit = train_propensity(&d, &full_batch(0, 1.0)).unwrap();
        assert_eq!(fit.model, PropensityModel::zeros(4, 5));
        assert!(fit.epoch_losses.is_empty());
    }

    #[test]
    fn fully_observed_propensities_approach_one() {
        let d = RatingDataset::new(Array2::ones((5, 5)), Array2::zeros((5, 5)), None).unwrap();
        let fit = train_propensity(&d, &full_batch(200, 1.0)).unwrap();
        assert!(fit.model.predict_all().iter().all(|&p| p > 0.95));
    }

    #[test]
    fn mcar_propensities_match_the_rate() {
        let d = bernoulli_dataset(100, 100, 0.3, 2);
        let fit = train_propensity(&d, &full_batch(200, 1.0)).unwrap();
        let mean = fit.model.predict_all().mean().unwrap();
        assert!((mean - 0.3).abs() < 0.05, "{mean}");
        for w in fit.epoch_losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn zero_epoch_pretraining_is_nearly_one_half() {
        let d = bernoulli_dataset(6, 7, 0.5, 3);
        let cfg = PredictionConfig {
            prediction: full_batch(0, 0.1),
            ..PredictionConfig::default()
        };
        let q = pretrain_noisy_model(&d, BaseMethod::Naive, None, &cfg).unwrap();
        assert!(q.values().iter().all(|v| (v - 0.5).abs() < 1e-3));
    }

    #[test]
    fn zero_outer_loops_returns_initial_models() {
        let d = bernoulli_dataset(5, 6, 0.5, 4);
        let p = PropensityMatrix::ones(5, 6);
        let q = NoisyRateModel::new(Array2::from_elem((5, 6), 0.5)).unwrap();
        let cfg = AltTrainConfig {
            outer_loops: 0,
            ..AltTrainConfig::default()
        };
        let out = alternating_denoise_train(&d, &p, &q, None, &cfg).unwrap();
        assert!(out.trace.is_empty());
        let init = FactorModel::init(5, 6, cfg.dim, &mut SeededRng::new(cfg.prediction.seed).fork(0)).unwrap();
        assert_eq!(out.prediction, init);
    }

    fn frozen_predictions(lr_imputation: f64) -> AltTrainConfig {
        AltTrainConfig {
            prediction: SgdConfig {
                learning_rate: 0.0,
                ..SgdConfig::default()
            },
            imputation: SgdConfig {
                learning_rate: lr_imputation,
                ..SgdConfig::default()
            },
            ..AltTrainConfig::default()
        }
    }

    #[test]
    fn refresh_reads_the_noisy_rate_at_prediction_extremes() {
        let d = bernoulli_dataset(10, 12, 0.4, 5);
        let p = PropensityMatrix::with_default_floor(Array2::from_elem((10, 12), 0.4)).unwrap();
        let cfg = AltTrainConfig {
            outer_loops: 7,
            ..frozen_predictions(0.05)
        };
        let init = FactorModel::init(10, 12, cfg.dim, &mut SeededRng::new(cfg.prediction.seed).fork(0)).unwrap();
        let ext = crate::noise::find_extreme_pairs(&init.predict_all());
        let mut q = Array2::from_elem((10, 12), 0.5);
        q[ext.max] = 0.8;
        q[ext.min] = 0.1;
        let q = NoisyRateModel::new(q).unwrap();
        let out = alternating_denoise_train(&d, &p, &q, None, &cfg).unwrap();
        assert_eq!(out.trace.len(), 7);
        for r in &out.trace.records {
            assert!((r.rho.rho01() - 0.2).abs() < 1e-12 && (r.rho.rho10() - 0.1).abs() < 1e-12);
            assert!(r.objective.is_finite() && !r.clamped);
        }
        let csv = out.trace.to_csv();
        assert_eq!(csv.lines().count(), 8);
        assert!(csv.starts_with(TrainTrace::CSV_HEADER));
    }

    #[test]
    fn clamped_refresh_is_warned() {
        let d = bernoulli_dataset(4, 4, 0.6, 7);
        let p = PropensityMatrix::ones(4, 4);
        // Flat noisy rate: 1 - 0.5 + 0.5 = 1, which must be clamped.
        let q = NoisyRateModel::new(Array2::from_elem((4, 4), 0.5)).unwrap();
        let cfg = AltTrainConfig {
            outer_loops: 2,
            ..frozen_predictions(0.0)
        };
        let out = alternating_denoise_train(&d, &p, &q, None, &cfg).unwrap();
        for r in &out.trace.records {
            assert!(r.clamped);
            assert!(r.rho.rho01() + r.rho.rho10() < 1.0 - crate::types::RHO_MARGIN);
        }
        assert_eq!(out.trace.warnings.len(), 2);
    }

    #[test]
    fn training_is_deterministic() {
        let d = bernoulli_dataset(8, 9, 0.5, 8);
        let p = PropensityMatrix::ones(8, 9);
        let cfg = PredictionConfig::default();
        let a = train_prediction(&d, BaseMethod::Dr, Some(&p), &cfg).unwrap();
        let b = train_prediction(&d, BaseMethod::Dr, Some(&p), &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.imputation, b.imputation);
    }

    #[test]
    fn ips_requires_propensities() {
        let d = bernoulli_dataset(3, 3, 0.5, 9);
        let err = train_prediction(&d, BaseMethod::Ips, None, &PredictionConfig::default()).unwrap_err();
        assert!(matches!(err, Error::MissingComponent(_)));
    }

    #[test]
    fn patience_stops_early_and_keeps_the_best() {
        let d = bernoulli_dataset(20, 20, 0.5, 10);
        let cfg = PredictionConfig {
            prediction: SgdConfig {
                learning_rate: 5.0,
                max_epochs: 200,
                patience: 2,
                ..SgdConfig::default()
            },
            ..PredictionConfig::default()
        };
        let fit = train_prediction(&d, BaseMethod::Naive, None, &cfg).unwrap();
        assert!(fit.trace.len() < 200);
        let best = fit.trace.records.iter().map(|r| r.val_metric).fold(f64::INFINITY, f64::min);
        assert!(best.is_finite());
    }

    #[test]
    fn method_names_round_trip() {
        for m in [BaseMethod::Naive, BaseMethod::Eib, BaseMethod::Ips, BaseMethod::Dr] {
            assert_eq!(m.to_string().parse::<BaseMethod>().unwrap(), m);
        }
        assert!("ome".parse::<BaseMethod>().is_err());
    }
}

//! Prediction-inaccuracy estimators over partially observed, possibly noisy
//! feedback, plus the closed-form bias of the noise-corrected doubly robust
//! estimator.
//!
//! Every estimator is a mean over all of `D` (or over `O` for the naive pair)
//! accumulated in row-major order, so results are bit-reproducible. Per-pair
//! terms share the shapes
//!
//! ```text
//! EIB:  (1 - o) e_imp + o * err
//! IPS:  (o / p) * err
//! DR:   (1 - o / p) e_imp + (o / p) * err
//! ```
//!
//! where `err` is the plain loss for the classic estimators and the surrogate
//! loss for the noise-corrected ones. With `rho = (0, 0)` the surrogate is
//! bitwise the plain loss, which makes the degeneration identities exact.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossKind, SurrogatePair};
use crate::types::{
    check_dim, ErrorParams, ImputationMatrix, PredictionMatrix, PropensityMatrix, RatingDataset,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Naive,
    Eib,
    Ips,
    Dr,
    /// Surrogate loss averaged over the observed set; corrects noise only.
    OmeNaive,
    OmeEib,
    OmeIps,
    OmeDr,
}

impl Estimator {
    pub const ALL: [Estimator; 8] = [
        Estimator::Naive,
        Estimator::Eib,
        Estimator::Ips,
        Estimator::Dr,
        Estimator::OmeNaive,
        Estimator::OmeEib,
        Estimator::OmeIps,
        Estimator::OmeDr,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Naive => "naive",
            Estimator::Eib => "eib",
            Estimator::Ips => "ips",
            Estimator::Dr => "dr",
            Estimator::OmeNaive => "ome",
            Estimator::OmeEib => "ome_eib",
            Estimator::OmeIps => "ome_ips",
            Estimator::OmeDr => "ome_dr",
        }
    }

    pub fn needs_propensities(&self) -> bool {
        matches!(
            self,
            Estimator::Ips | Estimator::Dr | Estimator::OmeIps | Estimator::OmeDr
        )
    }

    pub fn needs_imputation(&self) -> bool {
        matches!(
            self,
            Estimator::Eib | Estimator::Dr | Estimator::OmeEib | Estimator::OmeDr
        )
    }

    pub fn corrects_noise(&self) -> bool {
        matches!(
            self,
            Estimator::OmeNaive | Estimator::OmeEib | Estimator::OmeIps | Estimator::OmeDr
        )
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('-', "_");
        Estimator::ALL
            .into_iter()
            .find(|e| e.name() == s || (s == "ome_naive" && *e == Estimator::OmeNaive))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown estimator `{s}`")))
    }
}

/// Everything an estimator may read. Plain EIB/DR take their imputed errors
/// from `e_bar` as well; the caller decides what those numbers mean.
#[derive(Debug, Clone, Copy)]
pub struct EstimatorInputs<'a> {
    pub dataset: &'a RatingDataset,
    pub predictions: &'a PredictionMatrix,
    pub p_hat: Option<&'a PropensityMatrix>,
    pub e_bar: Option<&'a ImputationMatrix>,
    pub rho_hat: Option<ErrorParams>,
    pub loss: LossKind,
}

impl<'a> EstimatorInputs<'a> {
    pub fn new(dataset: &'a RatingDataset, predictions: &'a PredictionMatrix, loss: LossKind) -> Self {
        EstimatorInputs {
            dataset,
            predictions,
            p_hat: None,
            e_bar: None,
            rho_hat: None,
            loss,
        }
    }

    pub fn with_propensities(mut self, p_hat: &'a PropensityMatrix) -> Self {
        self.p_hat = Some(p_hat);
        self
    }

    pub fn with_imputation(mut self, e_bar: &'a ImputationMatrix) -> Self {
        self.e_bar = Some(e_bar);
        self
    }

    pub fn with_error_params(mut self, rho: ErrorParams) -> Self {
        self.rho_hat = Some(rho);
        self
    }

    fn shape(&self) -> Result<(usize, usize)> {
        let dim = self.dataset.dim();
        check_dim("predictions", dim, self.predictions.dim())?;
        check_dim("observed_mask", dim, self.dataset.observed_mask.dim())?;
        check_dim("observed_ratings", dim, self.dataset.observed_ratings.dim())?;
        if let Some(p) = self.p_hat {
            check_dim("propensities", dim, p.dim())?;
        }
        if let Some(e) = self.e_bar {
            check_dim("imputed errors", dim, e.dim())?;
        }
        Ok(dim)
    }

    fn propensities(&self) -> Result<&'a PropensityMatrix> {
        self.p_hat.ok_or(Error::MissingComponent("propensities"))
    }

    fn imputation(&self) -> Result<&'a ImputationMatrix> {
        self.e_bar.ok_or(Error::MissingComponent("imputed errors"))
    }

    fn rho(&self) -> Result<ErrorParams> {
        self.rho_hat.ok_or(Error::MissingComponent("error parameters"))
    }

    #[inline]
    fn observed(&self, u: usize, i: usize) -> f64 {
        self.dataset.observed_mask[[u, i]]
    }

    #[inline]
    fn label(&self, u: usize, i: usize) -> bool {
        self.dataset.observed_ratings[[u, i]] == 1.0
    }

    /// Loss of the observed label at an observed pair.
    #[inline]
    fn plain_error(&self, u: usize, i: usize) -> f64 {
        self.loss.eval(self.predictions.get(u, i), self.label(u, i))
    }

    #[inline]
    fn surrogate_error(&self, u: usize, i: usize, rho: &ErrorParams) -> f64 {
        SurrogatePair::at(self.loss, self.predictions.get(u, i), rho).select(self.label(u, i))
    }
}

/// Mean true loss over all pairs: the quantity every estimator targets.
pub fn true_inaccuracy(predictions: &PredictionMatrix, true_ratings: &Array2<f64>, loss: LossKind) -> Result<f64> {
    check_dim("true_ratings", predictions.dim(), true_ratings.dim())?;
    let (n, m) = predictions.dim();
    let mut sum = 0.0;
    for u in 0..n {
        for i in 0..m {
            sum += loss.eval(predictions.get(u, i), true_ratings[[u, i]] == 1.0);
        }
    }
    Ok(sum / (n * m) as f64)
}

/// Per-pair error at observed pairs; the pair is skipped when unobserved.
trait PairError {
    fn at(&self, inputs: &EstimatorInputs<'_>, u: usize, i: usize) -> f64;
}

struct Plain;

impl PairError for Plain {
    #[inline]
    fn at(&self, inputs: &EstimatorInputs<'_>, u: usize, i: usize) -> f64 {
        inputs.plain_error(u, i)
    }
}

struct Surrogate(ErrorParams);

impl PairError for Surrogate {
    #[inline]
    fn at(&self, inputs: &EstimatorInputs<'_>, u: usize, i: usize) -> f64 {
        inputs.surrogate_error(u, i, &self.0)
    }
}

fn naive_with(inputs: &EstimatorInputs<'_>, err: &impl PairError) -> Result<f64> {
    let (n, m) = inputs.shape()?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for u in 0..n {
        for i in 0..m {
            if inputs.observed(u, i) == 1.0 {
                sum += err.at(inputs, u, i);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyObservedSet);
    }
    Ok(sum / count as f64)
}

fn eib_with(inputs: &EstimatorInputs<'_>, err: &impl PairError) -> Result<f64> {
    let (n, m) = inputs.shape()?;
    let e_bar = inputs.imputation()?;
    let mut sum = 0.0;
    for u in 0..n {
        for i in 0..m {
            let o = inputs.observed(u, i);
            let e = if o == 1.0 { err.at(inputs, u, i) } else { 0.0 };
            sum += (1.0 - o) * e_bar.get(u, i) + o * e;
        }
    }
    Ok(sum / (n * m) as f64)
}

fn ips_with(inputs: &EstimatorInputs<'_>, err: &impl PairError) -> Result<f64> {
    let (n, m) = inputs.shape()?;
    let p_hat = inputs.propensities()?;
    let mut sum = 0.0;
    for u in 0..n {
        for i in 0..m {
            let o = inputs.observed(u, i);
            let e = if o == 1.0 { err.at(inputs, u, i) } else { 0.0 };
            let w = o / p_hat.get(u, i);
            sum += w * e;
        }
    }
    Ok(sum / (n * m) as f64)
}

fn dr_with(inputs: &EstimatorInputs<'_>, err: &impl PairError) -> Result<f64> {
    let (n, m) = inputs.shape()?;
    let p_hat = inputs.propensities()?;
    let e_bar = inputs.imputation()?;
    let mut sum = 0.0;
    for u in 0..n {
        for i in 0..m {
            let o = inputs.observed(u, i);
            let e = if o == 1.0 { err.at(inputs, u, i) } else { 0.0 };
            let w = o / p_hat.get(u, i);
            sum += (1.0 - w) * e_bar.get(u, i) + w * e;
        }
    }
    Ok(sum / (n * m) as f64)
}

/// Mean observed loss; biased under MNAR observation and under noise.
pub fn estimate_naive(inputs: &EstimatorInputs<'_>) -> Result<f64> {
    naive_with(inputs, &Plain)
}

pub fn estimate_eib(inputs: &EstimatorInputs<'_>) -> Result<f64> {
    eib_with(inputs, &Plain)
}

pub fn estimate_ips(inputs: &EstimatorInputs<'_>) -> Result<f64> {
    ips_with(inputs, &Plain)
}

pub fn estimate_dr(inputs: &EstimatorInputs<'_>) -> Result<f64> {
    dr_with(inputs, &Plain)
}

pub fn estimate_ome_naive(inputs: &EstimatorInputs<'_>) -> Result<f64> {
    naive_with(inputs, &Surrogate(inputs.rho()?))
}

/// Unobserved pairs contribute `e_bar`; observed pairs their surrogate loss.
pub fn estimate_ome_eib(inputs: &EstimatorInputs<'_>) -> Result<f64> {
    eib_with(inputs, &Surrogate(inputs.rho()?))
}

pub fn estimate_ome_ips(inputs: &EstimatorInputs<'_>) -> Result<f64> {
    ips_with(inputs, &Surrogate(inputs.rho()?))
}

/// Unbiased for the true inaccuracy when the flip rates are right and either
/// `e_bar` equals the surrogate error or `p_hat` equals the true propensity.
pub fn estimate_ome_dr(inputs: &EstimatorInputs<'_>) -> Result<f64> {
    dr_with(inputs, &Surrogate(inputs.rho()?))
}

pub fn estimate(kind: Estimator, inputs: &EstimatorInputs<'_>) -> Result<f64> {
    match kind {
        Estimator::Naive => estimate_naive(inputs),
        Estimator::Eib => estimate_eib(inputs),
        Estimator::Ips => estimate_ips(inputs),
        Estimator::Dr => estimate_dr(inputs),
        Estimator::OmeNaive => estimate_ome_naive(inputs),
        Estimator::OmeEib => estimate_ome_eib(inputs),
        Estimator::OmeIps => estimate_ome_ips(inputs),
        Estimator::OmeDr => estimate_ome_dr(inputs),
    }
}

/// `|target - estimate| / target`.
pub fn relative_error(target: f64, estimate: f64) -> Result<f64> {
    if !(target > 0.0) {
        return Err(Error::NonPositiveTarget(target));
    }
    Ok((target - estimate).abs() / target)
}

/// Errors on observed pairs (surrogate when `rho` is given), zero elsewhere.
pub fn observed_errors(dataset: &RatingDataset, predictions: &PredictionMatrix, loss: LossKind, rho: Option<&ErrorParams>) -> Result<Array2<f64>> {
    check_dim("predictions", dataset.dim(), predictions.dim())?;
    let mut out = Array2::zeros(dataset.dim());
    for ((u, i), v) in out.indexed_iter_mut() {
        if dataset.is_observed(u, i) {
            let pred = predictions.get(u, i);
            let label = dataset.observed_ratings[[u, i]] == 1.0;
            *v = match rho {
                Some(r) => SurrogatePair::at(loss, pred, r).select(label),
                None => loss.eval(pred, label),
            };
        }
    }
    Ok(out)
}

/// Constant imputation equal to the mean observed (surrogate) error.
pub fn mean_observed_imputation(dataset: &RatingDataset, predictions: &PredictionMatrix, loss: LossKind, rho: Option<&ErrorParams>) -> Result<ImputationMatrix> {
    let errs = observed_errors(dataset, predictions, loss, rho)?;
    let count = dataset.n_observed();
    if count == 0 {
        return Err(Error::EmptyObservedSet);
    }
    let mean = errs.iter().sum::<f64>() / count as f64;
    ImputationMatrix::constant(dataset.n_users, dataset.n_items, mean)
}

/// Weights of the bias decomposition for true rates `rho` and assumed rates
/// `rho_hat`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OmegaWeights {
    pub w11: f64,
    pub w01: f64,
    pub w10: f64,
    pub w00: f64,
}

impl OmegaWeights {
    pub fn new(rho: &ErrorParams, rho_hat: &ErrorParams) -> Self {
        let denom = rho_hat.spread();
        OmegaWeights {
            w11: (1.0 - rho.rho01() - rho_hat.rho10()) / denom,
            w01: (rho.rho01() - rho_hat.rho01()) / denom,
            w10: (rho.rho10() - rho_hat.rho10()) / denom,
            w00: (1.0 - rho_hat.rho01() - rho.rho10()) / denom,
        }
    }
}

/// Inputs of the closed-form OME-DR bias.
#[derive(Debug, Clone, Copy)]
pub struct BiasOracleInputs<'a> {
    pub predictions: &'a PredictionMatrix,
    pub true_ratings: &'a Array2<f64>,
    pub p_true: &'a Array2<f64>,
    pub p_hat: &'a PropensityMatrix,
    pub e_bar: &'a ImputationMatrix,
    pub rho_true: ErrorParams,
    pub rho_hat: ErrorParams,
    pub loss: LossKind,
}

/// Signed expected error `E[OME-DR] - P*` over observation and flip noise.
///
/// The `(1 - o / p_hat) e_bar` term enters at its expectation
/// `(1 - p / p_hat) e_bar`.
pub fn bias_ome_dr_signed(inp: &BiasOracleInputs<'_>) -> Result<f64> {
    let dim = inp.predictions.dim();
    check_dim("true_ratings", dim, inp.true_ratings.dim())?;
    check_dim("p_true", dim, inp.p_true.dim())?;
    check_dim("propensities", dim, inp.p_hat.dim())?;
    check_dim("imputed errors", dim, inp.e_bar.dim())?;
    let w = OmegaWeights::new(&inp.rho_true, &inp.rho_hat);
    let (n, m) = dim;
    let mut sum = 0.0;
    for u in 0..n {
        for i in 0..m {
            let p = inp.p_true[[u, i]];
            let ph = inp.p_hat.get(u, i);
            let f = inp.predictions.get(u, i);
            let l1 = inp.loss.eval(f, true);
            let l0 = inp.loss.eval(f, false);
            sum += (1.0 - p / ph) * inp.e_bar.get(u, i);
            sum += if inp.true_ratings[[u, i]] == 1.0 {
                (p * w.w11 - ph) / ph * l1 + p * w.w01 / ph * l0
            } else {
                p * w.w10 / ph * l1 + (p * w.w00 - ph) / ph * l0
            };
        }
    }
    Ok(sum / (n * m) as f64)
}

/// Absolute bias of the OME-DR estimator.
pub fn bias_ome_dr_oracle(inp: &BiasOracleInputs<'_>) -> Result<f64> {
    bias_ome_dr_signed(inp).map(f64::abs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy() -> (RatingDataset, PredictionMatrix) {
        let d = RatingDataset::new(
            array![[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]],
            array![[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]],
            Some(array![[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]]),
        )
        .unwrap();
        let p = PredictionMatrix::new(array![[0.7, 0.2, 0.4], [0.1, 0.9, 0.6]]).unwrap();
        (d, p)
    }

    #[test]
    fn true_inaccuracy_examples() {
        let p = PredictionMatrix::new(array![[0.3, 0.8]]).unwrap();
        let v = true_inaccuracy(&p, &array![[1.0, 0.0]], LossKind::SquaredError).unwrap();
        assert!((v - 0.565).abs() < 1e-15);

        let p = PredictionMatrix::new(Array2::from_elem((3, 4), 0.5)).unwrap();
        let truth = array![[1.0, 0.0, 0.0, 1.0], [0.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0, 0.0]];
        let v = true_inaccuracy(&p, &truth, LossKind::SquaredError).unwrap();
        assert!((v - 0.25).abs() < 1e-15);

        let truth = array![[1.0, 0.0], [0.0, 1.0]];
        let p = PredictionMatrix::new(truth.mapv(|r| if r == 1.0 { 1.0 - 1e-9 } else { 1e-9 })).unwrap();
        assert!(true_inaccuracy(&p, &truth, LossKind::SquaredError).unwrap() < 1e-11);
    }

    #[test]
    fn missing_truth_is_an_error() {
        let (mut d, _) = toy();
        d.true_ratings = None;
        assert!(matches!(d.require_truth(), Err(Error::MissingComponent(_))));
    }

    #[test]
    fn naive_on_singleton_and_empty() {
        let d = RatingDataset::new(
            array![[0.0, 0.0], [0.0, 1.0]],
            array![[0.0, 0.0], [0.0, 1.0]],
            None,
        )
        .unwrap();
        let p = PredictionMatrix::new(array![[0.5, 0.5], [0.5, 0.3]]).unwrap();
        let inp = EstimatorInputs::new(&d, &p, LossKind::SquaredError);
        assert!((estimate_naive(&inp).unwrap() - 0.49).abs() < 1e-15);

        let empty = RatingDataset::new(Array2::zeros((2, 2)), Array2::zeros((2, 2)), None).unwrap();
        let inp = EstimatorInputs::new(&empty, &p, LossKind::SquaredError);
        assert!(matches!(estimate_naive(&inp), Err(Error::EmptyObservedSet)));
    }

    #[test]
    fn full_observation_with_unit_propensity_collapses_to_naive() {
        let (mut d, p) = toy();
        d.observed_mask.fill(1.0);
        let ones = PropensityMatrix::ones(2, 3);
        let imp = ImputationMatrix::constant(2, 3, 0.37).unwrap();
        let inp = EstimatorInputs::new(&d, &p, LossKind::SquaredError)
            .with_propensities(&ones)
            .with_imputation(&imp);
        let naive = estimate_naive(&inp).unwrap();
        for e in [Estimator::Eib, Estimator::Ips, Estimator::Dr] {
            assert!((estimate(e, &inp).unwrap() - naive).abs() < 1e-15, "{e}");
        }
        // With no noise, naive over a fully observed matrix is the full-D mean.
        let full = true_inaccuracy(&p, &d.observed_ratings, LossKind::SquaredError).unwrap();
        assert!((naive - full).abs() < 1e-15);
    }

    #[test]
    fn no_observation_gives_mean_imputation() {
        let (mut d, p) = toy();
        d.observed_mask.fill(0.0);
        let imp = ImputationMatrix::new(array![[0.1, 0.2, 0.3], [0.4, -0.5, 0.6]]).unwrap();
        let inp = EstimatorInputs::new(&d, &p, LossKind::SquaredError)
            .with_imputation(&imp)
            .with_error_params(ErrorParams::new(0.2, 0.1).unwrap());
        let mean = imp.values().sum() / 6.0;
        assert!((estimate_ome_eib(&inp).unwrap() - mean).abs() < 1e-15);
    }

    #[test]
    fn missing_components_are_reported() {
        let (d, p) = toy();
        let inp = EstimatorInputs::new(&d, &p, LossKind::SquaredError);
        assert!(matches!(estimate_ips(&inp), Err(Error::MissingComponent("propensities"))));
        assert!(matches!(estimate_eib(&inp), Err(Error::MissingComponent("imputed errors"))));
        assert!(matches!(estimate_ome_ips(&inp), Err(Error::MissingComponent(_))));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (d, p) = toy();
        let ones = PropensityMatrix::ones(3, 2);
        let inp = EstimatorInputs::new(&d, &p, LossKind::SquaredError).with_propensities(&ones);
        assert!(matches!(estimate_ips(&inp), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn relative_error_examples() {
        assert!((relative_error(0.5, 0.45).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(relative_error(0.3, 0.3).unwrap(), 0.0);
        assert!((relative_error(0.2, 0.26).unwrap() - 0.3).abs() < 1e-12);
        assert!(relative_error(0.0, 0.1).is_err());
        assert!(relative_error(-1.0, 0.1).is_err());
    }

    #[test]
    fn omega_weights_at_correct_rates() {
        let rho = ErrorParams::new(0.2, 0.1).unwrap();
        let w = OmegaWeights::new(&rho, &rho);
        assert_eq!(w.w11, 1.0);
        assert_eq!(w.w00, 1.0);
        assert_eq!(w.w01, 0.0);
        assert_eq!(w.w10, 0.0);
    }

    #[test]
    fn oracle_vanishes_under_correct_specification() {
        let (d, p) = toy();
        let p_true = array![[0.3, 0.6, 0.9], [0.2, 0.5, 0.8]];
        let p_hat = PropensityMatrix::new(p_true.clone(), 0.05).unwrap();
        let e_bar = ImputationMatrix::new(array![[0.5, -1.0, 2.0], [0.0, 0.3, 7.0]]).unwrap();
        let rho = ErrorParams::new(0.2, 0.1).unwrap();
        let b = bias_ome_dr_oracle(&BiasOracleInputs {
            predictions: &p,
            true_ratings: d.true_ratings.as_ref().unwrap(),
            p_true: &p_true,
            p_hat: &p_hat,
            e_bar: &e_bar,
            rho_true: rho,
            rho_hat: rho,
            loss: LossKind::SquaredError,
        })
        .unwrap();
        assert!(b < 1e-15, "{b}");
    }

    /// Brute-force expectation over every observation pattern and every flip
    /// pattern of a 1x3 instance.
    #[test]
    fn oracle_matches_exhaustive_expectation() {
        let p_true = array![[0.3, 0.6, 0.9]];
        let truth = array![[1.0, 0.0, 1.0]];
        let preds = PredictionMatrix::new(array![[0.7, 0.35, 0.2]]).unwrap();
        let p_hat = PropensityMatrix::new(array![[0.5, 0.4, 0.7]], 0.05).unwrap();
        let e_bar = ImputationMatrix::new(array![[0.2, -0.1, 0.4]]).unwrap();
        let rho = ErrorParams::new(0.25, 0.15).unwrap();
        let rho_hat = ErrorParams::new(0.1, 0.3).unwrap();
        let loss = LossKind::SquaredError;

        let p_star = true_inaccuracy(&preds, &truth, loss).unwrap();
        let mut expectation = 0.0;
        for obs_bits in 0..8u32 {
            for flip_bits in 0..8u32 {
                let mut prob = 1.0;
                let mut mask = Array2::zeros((1, 3));
                let mut ratings = Array2::zeros((1, 3));
                for i in 0..3 {
                    let o = obs_bits >> i & 1 == 1;
                    let flipped = flip_bits >> i & 1 == 1;
                    prob *= if o { p_true[[0, i]] } else { 1.0 - p_true[[0, i]] };
                    let flip_rate = if truth[[0, i]] == 1.0 { rho.rho01() } else { rho.rho10() };
                    prob *= if flipped { flip_rate } else { 1.0 - flip_rate };
                    mask[[0, i]] = if o { 1.0 } else { 0.0 };
                    let r = if flipped { 1.0 - truth[[0, i]] } else { truth[[0, i]] };
                    ratings[[0, i]] = r;
                }
                let d = RatingDataset::new(mask, ratings, None).unwrap();
                let inp = EstimatorInputs::new(&d, &preds, loss)
                    .with_propensities(&p_hat)
                    .with_imputation(&e_bar)
                    .with_error_params(rho_hat);
                expectation += prob * estimate_ome_dr(&inp).unwrap();
            }
        }
        let oracle = bias_ome_dr_signed(&BiasOracleInputs {
            predictions: &preds,
            true_ratings: &truth,
            p_true: &p_true,
            p_hat: &p_hat,
            e_bar: &e_bar,
            rho_true: rho,
            rho_hat,
            loss,
        })
        .unwrap();
        assert!((expectation - p_star - oracle).abs() < 1e-12, "{} vs {}", expectation - p_star, oracle);
    }

    /// MNAR toy: a positive-heavy observed set makes naive differ from the
    /// full-matrix target; checked by enumerating every observation pattern.
    #[test]
    fn naive_is_biased_under_mnar() {
        let truth = array![[1.0, 0.0]];
        let p_true = [0.9, 0.1];
        let preds = PredictionMatrix::new(array![[0.6, 0.6]]).unwrap();
        let loss = LossKind::SquaredError;
        let p_star = true_inaccuracy(&preds, &truth, loss).unwrap();
        let mut expectation = 0.0;
        let mut mass = 0.0;
        for bits in 1..4u32 {
            let mask = array![[(bits & 1) as f64, (bits >> 1 & 1) as f64]];
            let prob: f64 = (0..2)
                .map(|i| if mask[[0, i]] == 1.0 { p_true[i] } else { 1.0 - p_true[i] })
                .product();
            let d = RatingDataset::new(mask, truth.clone(), None).unwrap();
            expectation += prob * estimate_naive(&EstimatorInputs::new(&d, &preds, loss)).unwrap();
            mass += prob;
        }
        let conditional = expectation / mass;
        assert!((conditional - p_star).abs() > 0.05, "{conditional} vs {p_star}");
    }

    #[test]
    fn estimator_names_round_trip() {
        for e in Estimator::ALL {
            assert_eq!(e.name().parse::<Estimator>().unwrap(), e);
        }
        assert_eq!("OME-DR".parse::<Estimator>().unwrap(), Estimator::OmeDr);
    }
}

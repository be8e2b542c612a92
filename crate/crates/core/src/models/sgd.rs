use serde::{Deserialize, Serialize};

use super::{sigmoid, FactorModel, ImputationModel, PropensityModel};
use crate::error::{Error, Result};
use crate::losses::{surrogate_derivative, LossKind, SurrogatePair};
use crate::types::{ErrorParams, PropensityMatrix, RatingDataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam {
        #[serde(default = "adam_beta1")]
        beta1: f64,
        #[serde(default = "adam_beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
}

fn adam_beta1() -> f64 {
    0.9
}

fn adam_beta2() -> f64 {
    0.999
}

fn adam_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: adam_beta1(),
            beta2: adam_beta2(),
            eps: adam_eps(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    /// 0 means full batch.
    pub batch_size: usize,
    /// L2 strength on embeddings; biases are never decayed.
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.05,
            batch_size: 512,
            weight_decay: 1e-5,
            max_epochs: 20,
            patience: 0,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be a non-negative number"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be a non-negative number"));
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::config("optimizer", "adam needs beta1, beta2 in [0,1) and eps > 0"));
            }
        }
        Ok(())
    }

    /// Batch size actually used over `n` candidates.
    pub fn effective_batch(&self, n: usize) -> usize {
        if self.batch_size == 0 {
            n.max(1)
        } else {
            self.batch_size.min(n.max(1))
        }
    }
}

/// Applies gradient updates in place.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    steps: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Optimizer {
    pub fn new(config: &SgdConfig, n_params: usize) -> Self {
        let moments = matches!(config.optimizer, OptimizerKind::Adam { .. });
        Optimizer {
            kind: config.optimizer,
            learning_rate: config.learning_rate,
            steps: 0,
            first: if moments { vec![0.0; n_params] } else { Vec::new() },
            second: if moments { vec![0.0; n_params] } else { Vec::new() },
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn apply(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<()> {
        if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                epoch: self.steps as usize,
                what: format!("non-finite gradient component {bad} at step {}", self.steps),
            });
        }
        self.steps += 1;
        let lr = self.learning_rate;
        if lr == 0.0 {
            return Ok(());
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (t, g) in theta.iter_mut().zip(grad) {
                    *t -= lr * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let k = self.steps as i32;
                let c1 = 1.0 - beta1.powi(k);
                let c2 = 1.0 - beta2.powi(k);
                for (j, (t, &g)) in theta.iter_mut().zip(grad).enumerate() {
                    let m = &mut self.first[j];
                    let v = &mut self.second[j];
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *t -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// Per-pair weight applied to observed losses.
#[derive(Debug, Clone, Copy)]
pub enum PairWeighting<'a> {
    Uniform,
    InversePropensity(&'a PropensityMatrix),
}

impl PairWeighting<'_> {
    #[inline]
    fn weight(&self, u: usize, i: usize) -> f64 {
        match self {
            PairWeighting::Uniform => 1.0,
            PairWeighting::InversePropensity(p) => 1.0 / p.get(u, i),
        }
    }
}

/// Mini-batch estimate of the doubly robust training objective
///
/// ```text
/// (1/B) sum_b [ (1 - o w) e_bar + o w l~(f, r) ] + 0.5 wd |emb|^2
/// ```
///
/// With `w = 1 / p_hat` and an imputation model this is the OME-DR
/// objective; with uniform weights, no imputation and observed-only batches
/// it is plain (surrogate) MF regression. `e_bar` does not depend on the
/// prediction parameters, so only observed pairs carry gradient.
#[derive(Debug, Clone, Copy)]
pub struct SurrogateObjective<'a> {
    pub dataset: &'a RatingDataset,
    pub weighting: PairWeighting<'a>,
    pub imputation: Option<&'a ImputationModel>,
    pub rho: ErrorParams,
    pub loss: LossKind,
    pub weight_decay: f64,
}

impl SurrogateObjective<'_> {
    #[inline]
    fn label(&self, u: usize, i: usize) -> bool {
        self.dataset.observed_ratings[[u, i]] == 1.0
    }
}

pub fn surrogate_batch_objective(model: &FactorModel, obj: &SurrogateObjective<'_>, batch: &[(usize, usize)]) -> f64 {
    let mut sum = 0.0;
    for &(u, i) in batch {
        let o = obj.dataset.observed_mask[[u, i]];
        let w = o * obj.weighting.weight(u, i);
        let e_bar = obj.imputation.map_or(0.0, |m| m.predict(u, i));
        let err = if o == 1.0 {
            SurrogatePair::at(obj.loss, model.predict(u, i), &obj.rho).select(obj.label(u, i))
        } else {
            0.0
        };
        sum += (1.0 - w) * e_bar + w * err;
    }
    sum / batch.len().max(1) as f64 + model.params.l2_penalty(obj.weight_decay)
}

pub fn surrogate_batch_gradient(model: &FactorModel, obj: &SurrogateObjective<'_>, batch: &[(usize, usize)]) -> Vec<f64> {
    let p = &model.params;
    let mut grad = vec![0.0; p.as_slice().len()];
    let scale = 1.0 / batch.len().max(1) as f64;
    for &(u, i) in batch {
        if obj.dataset.observed_mask[[u, i]] != 1.0 {
            continue;
        }
        let (pred, slope) = model.predict_with_slope(u, i);
        if slope == 0.0 {
            continue;
        }
        let d = surrogate_derivative(obj.loss, pred, obj.label(u, i), &obj.rho);
        p.add_score_gradient(u, i, scale * obj.weighting.weight(u, i) * d * slope, &mut grad);
    }
    p.add_l2_gradient(obj.weight_decay, &mut grad);
    grad
}

/// One descent step of the prediction model; returns the batch objective
/// evaluated before the step.
pub fn sgd_step_surrogate(model: &mut FactorModel, obj: &SurrogateObjective<'_>, batch: &[(usize, usize)], opt: &mut Optimizer) -> Result<f64> {
    let value = surrogate_batch_objective(model, obj, batch);
    let grad = surrogate_batch_gradient(model, obj, batch);
    opt.apply(model.params.as_mut_slice(), &grad)?;
    Ok(value)
}

/// Weighted squared gap between the surrogate error of the current
/// prediction model and the imputed error, over observed pairs:
///
/// ```text
/// (1/B) sum_b o w (e~ - e_bar)^2 + 0.5 wd |emb|^2
/// ```
#[derive(Debug, Clone, Copy)]
pub struct ImputationObjective<'a> {
    pub dataset: &'a RatingDataset,
    pub predictions: &'a FactorModel,
    pub weighting: PairWeighting<'a>,
    pub rho: ErrorParams,
    pub loss: LossKind,
    pub weight_decay: f64,
}

impl ImputationObjective<'_> {
    /// Surrogate error `e~` of the observed label at `(u, i)`.
    #[inline]
    pub fn target(&self, u: usize, i: usize) -> f64 {
        let label = self.dataset.observed_ratings[[u, i]] == 1.0;
        SurrogatePair::at(self.loss, self.predictions.predict(u, i), &self.rho).select(label)
    }
}

pub fn imputation_batch_objective(model: &ImputationModel, obj: &ImputationObjective<'_>, batch: &[(usize, usize)]) -> f64 {
    let mut sum = 0.0;
    for &(u, i) in batch {
        if obj.dataset.observed_mask[[u, i]] != 1.0 {
            continue;
        }
        let gap = obj.target(u, i) - model.predict(u, i);
        sum += obj.weighting.weight(u, i) * gap * gap;
    }
    sum / batch.len().max(1) as f64 + model.params.l2_penalty(obj.weight_decay)
}

pub fn imputation_batch_gradient(model: &ImputationModel, obj: &ImputationObjective<'_>, batch: &[(usize, usize)]) -> Vec<f64> {
    let p = &model.params;
    let mut grad = vec![0.0; p.as_slice().len()];
    let scale = 1.0 / batch.len().max(1) as f64;
    for &(u, i) in batch {
        if obj.dataset.observed_mask[[u, i]] != 1.0 {
            continue;
        }
        let gap = model.predict(u, i) - obj.target(u, i);
        p.add_score_gradient(u, i, scale * 2.0 * obj.weighting.weight(u, i) * gap, &mut grad);
    }
    p.add_l2_gradient(obj.weight_decay, &mut grad);
    grad
}

pub fn sgd_step_imputation(model: &mut ImputationModel, obj: &ImputationObjective<'_>, batch: &[(usize, usize)], opt: &mut Optimizer) -> Result<f64> {
    let value = imputation_batch_objective(model, obj, batch);
    let grad = imputation_batch_gradient(model, obj, batch);
    opt.apply(model.params.as_mut_slice(), &grad)?;
    Ok(value)
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Binary cross-entropy of the observation indicator:
/// `(1/B) sum_b -o ln p - (1 - o) ln(1 - p)` with `p = sigmoid(logit)`.
pub fn propensity_batch_objective(model: &PropensityModel, dataset: &RatingDataset, batch: &[(usize, usize)]) -> f64 {
    let mut sum = 0.0;
    for &(u, i) in batch {
        let z = model.logit(u, i);
        sum += softplus(z) - dataset.observed_mask[[u, i]] * z;
    }
    sum / batch.len().max(1) as f64
}

pub fn propensity_batch_gradient(model: &PropensityModel, dataset: &RatingDataset, batch: &[(usize, usize)]) -> Vec<f64> {
    let mut grad = vec![0.0; model.as_slice().len()];
    let scale = 1.0 / batch.len().max(1) as f64;
    for &(u, i) in batch {
        let resid = sigmoid(model.logit(u, i)) - dataset.observed_mask[[u, i]];
        model.add_logit_gradient(u, i, scale * resid, &mut grad);
    }
    grad
}

pub fn sgd_step_propensity(model: &mut PropensityModel, dataset: &RatingDataset, batch: &[(usize, usize)], opt: &mut Optimizer) -> Result<f64> {
    let value = propensity_batch_objective(model, dataset, batch);
    let grad = propensity_batch_gradient(model, dataset, batch);
    opt.apply(model.as_mut_slice(), &grad)?;
    Ok(value)
}

//! Trainable components: the matrix-factorization prediction model, the
//! MF-shaped imputation model and the logistic-regression propensity model.
//!
//! Parameters live in one flat vector per model so optimizers, gradient
//! checks and checkpoints all see the same layout.

mod checkpoint;
mod sgd;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use sgd::{
    imputation_batch_gradient, imputation_batch_objective, propensity_batch_gradient,
    propensity_batch_objective, sgd_step_imputation, sgd_step_propensity, sgd_step_surrogate,
    surrogate_batch_gradient, surrogate_batch_objective, ImputationObjective, Optimizer,
    OptimizerKind, PairWeighting, SgdConfig, SurrogateObjective,
};

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::{ImputationMatrix, PredictionMatrix, PropensityMatrix, SeededRng, OUTPUT_EPS};

/// Standard deviation of the embedding initialization.
pub const INIT_STD: f64 = 0.01;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Embeddings and biases of a factorization `u.v + b_u + b_i + b0`.
///
/// Layout: user embeddings (N*d), item embeddings (M*d), user biases (N),
/// item biases (M), global bias (1).
#[derive(Debug, Clone, PartialEq)]
pub struct FactorParams {
    n_users: usize,
    n_items: usize,
    dim: usize,
    theta: Vec<f64>,
}

impl FactorParams {
    pub fn zeros(n_users: usize, n_items: usize, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be >= 1".into()));
        }
        Ok(FactorParams {
            n_users,
            n_items,
            dim,
            theta: vec![0.0; (n_users + n_items) * (dim + 1) + 1],
        })
    }

    /// Embeddings drawn i.i.d. N(0, INIT_STD^2), biases zero.
    pub fn init(n_users: usize, n_items: usize, dim: usize, rng: &mut SeededRng) -> Result<Self> {
        let mut p = Self::zeros(n_users, n_items, dim)?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        let n_emb = p.n_embedding();
        for v in &mut p.theta[..n_emb] {
            *v = normal.sample(rng);
        }
        Ok(p)
    }

    pub fn from_parts(n_users: usize, n_items: usize, dim: usize, theta: Vec<f64>) -> Result<Self> {
        let p = Self::zeros(n_users, n_items, dim)?;
        if theta.len() != p.theta.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                p.theta.len(),
                theta.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite parameter".into()));
        }
        Ok(FactorParams { theta, ..p })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of embedding entries; they occupy the front of the vector.
    pub fn n_embedding(&self) -> usize {
        (self.n_users + self.n_items) * self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    #[inline]
    fn user_off(&self, u: usize) -> usize {
        u * self.dim
    }

    #[inline]
    fn item_off(&self, i: usize) -> usize {
        (self.n_users + i) * self.dim
    }

    #[inline]
    fn user_bias_idx(&self, u: usize) -> usize {
        self.n_embedding() + u
    }

    #[inline]
    fn item_bias_idx(&self, i: usize) -> usize {
        self.n_embedding() + self.n_users + i
    }

    #[inline]
    fn global_idx(&self) -> usize {
        self.theta.len() - 1
    }

    pub fn user_embedding(&self, u: usize) -> &[f64] {
        &self.theta[self.user_off(u)..self.user_off(u) + self.dim]
    }

    pub fn item_embedding(&self, i: usize) -> &[f64] {
        &self.theta[self.item_off(i)..self.item_off(i) + self.dim]
    }

    pub fn user_bias(&self, u: usize) -> f64 {
        self.theta[self.user_bias_idx(u)]
    }

    pub fn item_bias(&self, i: usize) -> f64 {
        self.theta[self.item_bias_idx(i)]
    }

    pub fn global_bias(&self) -> f64 {
        self.theta[self.global_idx()]
    }

    pub fn set_global_bias(&mut self, b: f64) {
        let g = self.global_idx();
        self.theta[g] = b;
    }

    #[inline]
    pub fn score(&self, u: usize, i: usize) -> f64 {
        let ue = self.user_embedding(u);
        let ie = self.item_embedding(i);
        let dot: f64 = ue.iter().zip(ie).map(|(a, b)| a * b).sum();
        dot + self.user_bias(u) + self.item_bias(i) + self.global_bias()
    }

    /// `grad += coeff * d score(u, i) / d theta`.
    #[inline]
    pub fn add_score_gradient(&self, u: usize, i: usize, coeff: f64, grad: &mut [f64]) {
        let (uo, io, d) = (self.user_off(u), self.item_off(i), self.dim);
        for k in 0..d {
            grad[uo + k] += coeff * self.theta[io + k];
            grad[io + k] += coeff * self.theta[uo + k];
        }
        grad[self.user_bias_idx(u)] += coeff;
        grad[self.item_bias_idx(i)] += coeff;
        grad[self.global_idx()] += coeff;
    }

    /// `0.5 * wd * |embeddings|^2`.
    pub fn l2_penalty(&self, weight_decay: f64) -> f64 {
        if weight_decay == 0.0 {
            return 0.0;
        }
        0.5 * weight_decay * self.theta[..self.n_embedding()].iter().map(|v| v * v).sum::<f64>()
    }

    pub fn add_l2_gradient(&self, weight_decay: f64, grad: &mut [f64]) {
        if weight_decay == 0.0 {
            return;
        }
        for (g, v) in grad.iter_mut().zip(&self.theta[..self.n_embedding()]) {
            *g += weight_decay * v;
        }
    }

    fn map_all(&self, f: impl Fn(f64) -> f64 + Sync) -> Array2<f64> {
        let (n, m) = (self.n_users, self.n_items);
        let mut out = vec![0.0; n * m];
        out.par_chunks_mut(m.max(1)).enumerate().for_each(|(u, row)| {
            for (i, v) in row.iter_mut().enumerate() {
                *v = f(self.score(u, i));
            }
        });
        Array2::from_shape_vec((n, m), out).expect("shape matches")
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }
}

/// Prediction model `f(u, i) = sigmoid(score)` clipped to
/// `[OUTPUT_EPS, 1 - OUTPUT_EPS]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    pub params: FactorParams,
}

impl FactorModel {
    pub fn new(params: FactorParams) -> Self {
        FactorModel { params }
    }

    pub fn init(n_users: usize, n_items: usize, dim: usize, rng: &mut SeededRng) -> Result<Self> {
        FactorParams::init(n_users, n_items, dim, rng).map(Self::new)
    }

    pub fn zeros(n_users: usize, n_items: usize, dim: usize) -> Result<Self> {
        FactorParams::zeros(n_users, n_items, dim).map(Self::new)
    }

    #[inline]
    pub fn predict(&self, u: usize, i: usize) -> f64 {
        sigmoid(self.params.score(u, i)).clamp(OUTPUT_EPS, 1.0 - OUTPUT_EPS)
    }

    /// Prediction and its derivative with respect to the score; the
    /// derivative is zero where the output clip is active.
    #[inline]
    pub fn predict_with_slope(&self, u: usize, i: usize) -> (f64, f64) {
        let s = sigmoid(self.params.score(u, i));
        if s < OUTPUT_EPS {
            (OUTPUT_EPS, 0.0)
        } else if s > 1.0 - OUTPUT_EPS {
            (1.0 - OUTPUT_EPS, 0.0)
        } else {
            (s, s * (1.0 - s))
        }
    }

    pub fn predict_all(&self) -> PredictionMatrix {
        PredictionMatrix::new(
            self.params
                .map_all(|z| sigmoid(z).clamp(OUTPUT_EPS, 1.0 - OUTPUT_EPS)),
        )
        .expect("sigmoid outputs are finite")
    }
}

/// Imputation model: same factorization with a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputationModel {
    pub params: FactorParams,
}

impl ImputationModel {
    pub fn new(params: FactorParams) -> Self {
        ImputationModel { params }
    }

    pub fn init(n_users: usize, n_items: usize, dim: usize, rng: &mut SeededRng) -> Result<Self> {
        FactorParams::init(n_users, n_items, dim, rng).map(Self::new)
    }

    pub fn zeros(n_users: usize, n_items: usize, dim: usize) -> Result<Self> {
        FactorParams::zeros(n_users, n_items, dim).map(Self::new)
    }

    #[inline]
    pub fn predict(&self, u: usize, i: usize) -> f64 {
        self.params.score(u, i)
    }

    pub fn predict_all(&self) -> Result<ImputationMatrix> {
        ImputationMatrix::new(self.params.map_all(|z| z))
    }
}

/// Logistic propensity model `sigmoid(w_u + w_i + beta_u + gamma_i)`: the
/// one-hot user/item feature specialization of `sigmoid(w.x + beta_u + gamma_i)`.
///
/// Layout: w_user (N), w_item (M), beta_user (N), gamma_item (M).
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityModel {
    n_users: usize,
    n_items: usize,
    psi: Vec<f64>,
}

impl PropensityModel {
    pub fn zeros(n_users: usize, n_items: usize) -> Self {
        PropensityModel {
            n_users,
            n_items,
            psi: vec![0.0; 2 * (n_users + n_items)],
        }
    }

    pub fn from_parts(n_users: usize, n_items: usize, psi: Vec<f64>) -> Result<Self> {
        if psi.len() != 2 * (n_users + n_items) {
            return Err(Error::InvalidArgument(format!(
                "expected {} propensity parameters, got {}",
                2 * (n_users + n_items),
                psi.len()
            )));
        }
        if psi.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite parameter".into()));
        }
        Ok(PropensityModel {
            n_users,
            n_items,
            psi,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.psi
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.psi
    }

    #[inline]
    fn indices(&self, u: usize, i: usize) -> [usize; 4] {
        let (n, m) = (self.n_users, self.n_items);
        [u, n + i, n + m + u, 2 * n + m + i]
    }

    #[inline]
    pub fn logit(&self, u: usize, i: usize) -> f64 {
        self.indices(u, i).iter().map(|&j| self.psi[j]).sum()
    }

    #[inline]
    pub fn add_logit_gradient(&self, u: usize, i: usize, coeff: f64, grad: &mut [f64]) {
        for j in self.indices(u, i) {
            grad[j] += coeff;
        }
    }

    #[inline]
    pub fn predict(&self, u: usize, i: usize) -> f64 {
        sigmoid(self.logit(u, i))
    }

    pub fn predict_all(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.n_users, self.n_items), |(u, i)| self.predict(u, i))
    }

    /// Exported propensities clipped to `[floor, 1 - 1e-6]`.
    pub fn to_propensity_matrix(&self, floor: f64) -> Result<PropensityMatrix> {
        let hi = 1.0 - 1e-6;
        let raw = self.predict_all().mapv(|p| p.clamp(floor.min(hi), hi));
        PropensityMatrix::new(raw, floor)
    }

    pub fn is_finite(&self) -> bool {
        self.psi.iter().all(|v| v.is_finite())
    }
}

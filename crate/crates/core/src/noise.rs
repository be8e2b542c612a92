//! Identification of the flip rates under weak separability.
//!
//! With `q(x) = P(r = 1 | x)` the noisy positive rate,
//! `q = (1 - rho01 - rho10) P(r* = 1 | x) + rho10`, so `q` and the clean rate
//! share argmin/argmax. If the clean rate reaches 0 and 1 somewhere, then
//! `rho10 = min q` and `rho01 = 1 - max q`.

use std::cmp::Ordering;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::types::{check_dim, ErrorParams, PredictionMatrix};

/// Estimates of `P(r = 1 | x)` over all pairs, entries in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyRateModel {
    q: Array2<f64>,
}

impl NoisyRateModel {
    pub fn new(q: Array2<f64>) -> Result<Self> {
        if let Some(v) = q.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::Domain {
                what: "noisy positive rate must lie in (0, 1)",
                value: *v,
            });
        }
        Ok(NoisyRateModel { q })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.q
    }

    pub fn dim(&self) -> (usize, usize) {
        self.q.dim()
    }

    #[inline]
    pub fn get(&self, u: usize, i: usize) -> f64 {
        self.q[[u, i]]
    }
}

/// Identified rates plus diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Identification {
    pub params: ErrorParams,
    /// The raw rates had to be moved into the valid region.
    pub clamped: bool,
    /// The top and bottom groups have identical means, so nothing separates
    /// positives from negatives.
    pub no_separation: bool,
}

/// Recommended extreme-group size for estimated (noisy) rate matrices.
pub fn recommended_k(n_pairs: usize) -> usize {
    ((0.001 * n_pairs as f64).ceil() as usize).max(1)
}

/// Row-major indices of the `k` smallest and `k` largest entries, each
/// returned in ascending index order. Ties go to the smaller index.
pub fn extreme_groups(values: &Array2<f64>, k: usize) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    let (n, m) = values.dim();
    let total = n * m;
    if k == 0 || k > total / 2 {
        return Err(Error::InvalidArgument(format!(
            "k_extreme must lie in [1, {}], got {k}",
            total / 2
        )));
    }
    let flat: Vec<f64> = values.iter().copied().collect();
    let mut order: Vec<usize> = (0..total).collect();
    let by_low = |a: &usize, b: &usize| flat[*a].total_cmp(&flat[*b]).then(a.cmp(b));
    let by_high = |a: &usize, b: &usize| flat[*b].total_cmp(&flat[*a]).then(a.cmp(b));

    let mut pick = |cmp: &dyn Fn(&usize, &usize) -> Ordering| {
        order.select_nth_unstable_by(k - 1, cmp);
        let mut idx = order[..k].to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|j| (j / m, j % m)).collect::<Vec<_>>()
    };
    let low = pick(&by_low);
    let high = pick(&by_high);
    Ok((low, high))
}

/// `rho01 = 1 - mean(top k of q)`, `rho10 = mean(bottom k of q)`.
///
/// Ties are broken toward the smaller row-major index on both ends.
pub fn identify_error_params(q: &NoisyRateModel, k_extreme: usize) -> Result<Identification> {
    let (low, high) = extreme_groups(q.values(), k_extreme)?;
    let low_mean = mean_at(q, &low);
    let high_mean = mean_at(q, &high);
    let (params, clamped) = ErrorParams::clamped(1.0 - high_mean, low_mean);
    Ok(Identification {
        params,
        clamped,
        no_separation: high_mean <= low_mean,
    })
}

fn mean_at(q: &NoisyRateModel, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(u, i)| q.get(u, i)).sum::<f64>() / pairs.len() as f64
}

/// Reads `q` at the extreme pairs of the prediction model: the `k` highest
/// predictions give `rho01 = 1 - mean q`, the `k` lowest give
/// `rho10 = mean q`. With `k = 1` this is the single argmin/argmax rule.
pub fn rho_from_prediction_extremes(q: &NoisyRateModel, predictions: &PredictionMatrix, k: usize) -> Result<(ErrorParams, bool)> {
    check_dim("noisy rate model", predictions.dim(), q.dim())?;
    let (low, high) = if k == 1 {
        let p = find_extreme_pairs(predictions);
        (vec![p.min], vec![p.max])
    } else {
        extreme_groups(predictions.values(), k)?
    };
    Ok(ErrorParams::clamped(1.0 - mean_at(q, &high), mean_at(q, &low)))
}

/// Argmin and argmax pairs of a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtremePairs {
    pub min: (usize, usize),
    pub max: (usize, usize),
}

/// First (row-major) argmin and argmax of the predictions.
pub fn find_extreme_pairs(predictions: &PredictionMatrix) -> ExtremePairs {
    extreme_pairs_of(predictions.values())
}

pub(crate) fn extreme_pairs_of(values: &Array2<f64>) -> ExtremePairs {
    let mut min = ((0, 0), f64::INFINITY);
    let mut max = ((0, 0), f64::NEG_INFINITY);
    for (idx, &v) in values.indexed_iter() {
        if v.total_cmp(&min.1) == Ordering::Less {
            min = (idx, v);
        }
        if v.total_cmp(&max.1) == Ordering::Greater {
            max = (idx, v);
        }
    }
    ExtremePairs {
        min: min.0,
        max: max.0,
    }
}

/// Reads the noisy rate at given extreme pairs:
/// `rho01 = 1 - q(max pair)`, `rho10 = q(min pair)`, clamped to validity.
pub fn rho_at_pairs(q: &NoisyRateModel, pairs: &ExtremePairs) -> (ErrorParams, bool) {
    ErrorParams::clamped(1.0 - q.get(pairs.max.0, pairs.max.1), q.get(pairs.min.0, pairs.min.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{SeededRng, RHO_MARGIN};
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn plug_in_extremes() {
        let q = NoisyRateModel::new(array![[0.85, 0.3], [0.10, 0.5]]).unwrap();
        let id = identify_error_params(&q, 1).unwrap();
        assert!((id.params.rho01() - 0.15).abs() < 1e-12);
        assert!((id.params.rho10() - 0.10).abs() < 1e-12);
        assert!(!id.clamped && !id.no_separation);
    }

    #[test]
    fn linkage_inverts_exactly_at_separable_extremes() {
        let (r01, r10) = (0.2, 0.1);
        let gamma = array![[0.0, 0.3, 1.0], [0.5, 0.7, 0.1]];
        let q = NoisyRateModel::new(gamma.mapv(|g| (1.0 - r01 - r10) * g + r10)).unwrap();
        let id = identify_error_params(&q, 1).unwrap();
        assert!((id.params.rho01() - r01).abs() < 1e-15);
        assert!((id.params.rho10() - r10).abs() < 1e-15);
    }

    #[test]
    fn constant_rate_is_flagged_and_clamped() {
        let q = NoisyRateModel::new(Array2::from_elem((3, 3), 0.5)).unwrap();
        let id = identify_error_params(&q, 1).unwrap();
        assert!(id.no_separation && id.clamped);
        assert!(id.params.rho01() + id.params.rho10() <= 1.0 - RHO_MARGIN);
        assert!((id.params.rho01() - 0.5).abs() < 1e-5);
    }

    #[test]
    fn k_is_bounded() {
        let q = NoisyRateModel::new(Array2::from_elem((2, 2), 0.5)).unwrap();
        assert!(identify_error_params(&q, 0).is_err());
        assert!(identify_error_params(&q, 3).is_err());
        assert!(identify_error_params(&q, 2).is_ok());
    }

    #[test]
    fn top_k_ties_prefer_earlier_index() {
        // Top-2 must be {0.9 at 0, 0.8 at 1}; the second 0.8 at index 3 loses.
        let q = NoisyRateModel::new(array![[0.9, 0.8, 0.2, 0.8]]).unwrap();
        let id = identify_error_params(&q, 2).unwrap();
        assert!((id.params.rho01() - (1.0 - 0.85)).abs() < 1e-12);
        assert!((id.params.rho10() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn extreme_pair_examples() {
        let p = PredictionMatrix::new(array![[0.1, 0.9], [0.5, 0.5]]).unwrap();
        assert_eq!(find_extreme_pairs(&p), ExtremePairs { min: (0, 0), max: (0, 1) });
        let p = PredictionMatrix::new(Array2::from_elem((2, 3), 0.4)).unwrap();
        assert_eq!(find_extreme_pairs(&p), ExtremePairs { min: (0, 0), max: (0, 0) });
        let p = PredictionMatrix::new(array![[0.2, 0.9], [0.9, 0.3]]).unwrap();
        assert_eq!(find_extreme_pairs(&p).max, (0, 1));
    }

    #[test]
    fn linkage_preserves_extremes() {
        let mut rng = SeededRng::new(11);
        for _ in 0..50 {
            let gamma = Array2::from_shape_fn((7, 9), |_| rng.random::<f64>());
            let a = rng.random_range(0.0..0.45);
            let b = rng.random_range(0.0..0.45);
            let q = gamma.mapv(|g| (1.0 - a - b) * g + b);
            assert_eq!(extreme_pairs_of(&gamma), extreme_pairs_of(&q));
        }
    }

    /// Larger extreme groups average out additive noise in an estimated rate.
    #[test]
    fn larger_groups_reduce_error_on_noisy_rates() {
        let (r01, r10) = (0.2, 0.1);
        let ks = [1usize, 5, 25];
        let mut err = [0.0f64; 3];
        for seed in 0..20 {
            let mut rng = SeededRng::new(seed);
            // 10% of pairs at each separable extreme.
            let gamma = Array2::from_shape_fn((50, 50), |_| {
                let x: f64 = rng.random();
                if x < 0.1 {
                    0.0
                } else if x > 0.9 {
                    1.0
                } else {
                    rng.random()
                }
            });
            let q = gamma.mapv(|g| {
                let noise: f64 = rng.random_range(-0.05..0.05);
                ((1.0 - r01 - r10) * g + r10 + noise).clamp(1e-3, 1.0 - 1e-3)
            });
            let q = NoisyRateModel::new(q).unwrap();
            for (slot, &k) in err.iter_mut().zip(&ks) {
                let id = identify_error_params(&q, k).unwrap();
                *slot += (id.params.rho01() - r01).abs() + (id.params.rho10() - r10).abs();
            }
        }
        assert!(err[0] >= err[1] && err[1] >= err[2], "{err:?}");
    }
}

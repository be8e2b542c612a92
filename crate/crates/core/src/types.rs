//! Shared data model: rating datasets, per-pair matrices, error rates and
//! the seeded generator every stochastic routine takes.
//!
//! All matrices are dense `N x M` arrays indexed `[user, item]` and walked in
//! row-major order wherever a reduction happens.

use std::fmt;

use ndarray::Array2;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Margin kept between `rho01 + rho10` and 1.
pub const RHO_MARGIN: f64 = 1e-6;

/// Default clipping floor for learned propensities.
pub const DEFAULT_PROPENSITY_FLOOR: f64 = 0.05;

/// Output clipping for probability predictions.
pub const OUTPUT_EPS: f64 = 1e-6;

/// Observed binary feedback over a user/item universe.
///
/// `observed_ratings` is only meaningful where `observed_mask` is 1. The pair
/// index `(u, i)` doubles as the feature vector of the pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingDataset {
    pub n_users: usize,
    pub n_items: usize,
    pub observed_mask: Array2<f64>,
    pub observed_ratings: Array2<f64>,
    pub true_ratings: Option<Array2<f64>>,
}

/// One broken dataset invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Shape {
        what: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    MaskNotBinary { user: usize, item: usize, value: f64 },
    RatingNotBinary { user: usize, item: usize, value: f64 },
    TruthNotBinary { user: usize, item: usize, value: f64 },
    ErrorParams { rho01: f64, rho10: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape {
                what,
                expected,
                found,
            } => write!(f, "{what} has shape {found:?}, expected {expected:?}"),
            Violation::MaskNotBinary { user, item, value } => {
                write!(f, "observation mask at ({user},{item}) is {value}, not 0/1")
            }
            Violation::RatingNotBinary { user, item, value } => {
                write!(f, "observed rating at ({user},{item}) is {value}, not 0/1")
            }
            Violation::TruthNotBinary { user, item, value } => {
                write!(f, "true rating at ({user},{item}) is {value}, not 0/1")
            }
            Violation::ErrorParams { rho01, rho10 } => write!(
                f,
                "rho01+rho10 >= 1 (rho01={rho01}, rho10={rho10}) or a rate is negative"
            ),
        }
    }
}

fn is_binary(v: f64) -> bool {
    v == 0.0 || v == 1.0
}

/// Lists every invariant the dataset (and, optionally, a pair of error rates
/// carried alongside it in a config) breaks. Empty means valid.
pub fn validate_dataset(d: &RatingDataset, rho: Option<(f64, f64)>) -> Vec<Violation> {
    let mut out = Vec::new();
    let shape = (d.n_users, d.n_items);
    let mut check_shape = |what, m: &Array2<f64>| {
        if m.dim() != shape {
            out.push(Violation::Shape {
                what,
                expected: shape,
                found: m.dim(),
            });
            false
        } else {
            true
        }
    };
    let mask_ok = check_shape("observed_mask", &d.observed_mask);
    let ratings_ok = check_shape("observed_ratings", &d.observed_ratings);
    let truth_ok = match &d.true_ratings {
        Some(t) => check_shape("true_ratings", t),
        None => true,
    };

    if mask_ok {
        for ((u, i), &o) in d.observed_mask.indexed_iter() {
            if !is_binary(o) {
                out.push(Violation::MaskNotBinary {
                    user: u,
                    item: i,
                    value: o,
                });
            } else if o == 1.0 && ratings_ok {
                let r = d.observed_ratings[[u, i]];
                if !is_binary(r) {
                    out.push(Violation::RatingNotBinary {
                        user: u,
                        item: i,
                        value: r,
                    });
                }
            }
        }
    }
    if truth_ok {
        if let Some(t) = &d.true_ratings {
            for ((u, i), &r) in t.indexed_iter() {
                if !is_binary(r) {
                    out.push(Violation::TruthNotBinary {
                        user: u,
                        item: i,
                        value: r,
                    });
                }
            }
        }
    }
    if let Some((rho01, rho10)) = rho {
        if ErrorParams::new(rho01, rho10).is_err() {
            out.push(Violation::ErrorParams { rho01, rho10 });
        }
    }
    out
}

impl RatingDataset {
    pub fn new(
        observed_mask: Array2<f64>,
        observed_ratings: Array2<f64>,
        true_ratings: Option<Array2<f64>>,
    ) -> Result<Self> {
        let (n_users, n_items) = observed_mask.dim();
        let d = RatingDataset {
            n_users,
            n_items,
            observed_mask,
            observed_ratings,
            true_ratings,
        };
        d.check()?;
        Ok(d)
    }

    /// Builds a dataset from observed `(user, item, rating)` triples. Later
    /// duplicates overwrite earlier ones.
    pub fn from_triples(
        n_users: usize,
        n_items: usize,
        triples: &[(usize, usize, u8)],
    ) -> Result<Self> {
        let mut mask = Array2::zeros((n_users, n_items));
        let mut ratings = Array2::zeros((n_users, n_items));
        for &(u, i, r) in triples {
            if u >= n_users || i >= n_items {
                return Err(Error::InvalidDataset(format!(
                    "pair ({u},{i}) outside {n_users}x{n_items}"
                )));
            }
            mask[[u, i]] = 1.0;
            ratings[[u, i]] = f64::from(r);
        }
        Self::new(mask, ratings, None)
    }

    pub fn check(&self) -> Result<()> {
        let v = validate_dataset(self, None);
        match v.first() {
            None => Ok(()),
            Some(first) => Err(Error::InvalidDataset(format!(
                "{first} ({} violation(s))",
                v.len()
            ))),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        (self.n_users, self.n_items)
    }

    pub fn n_pairs(&self) -> usize {
        self.n_users * self.n_items
    }

    pub fn is_observed(&self, u: usize, i: usize) -> bool {
        self.observed_mask[[u, i]] == 1.0
    }

    pub fn n_observed(&self) -> usize {
        self.observed_mask.iter().filter(|&&o| o == 1.0).count()
    }

    /// Observed pairs in row-major order.
    pub fn observed_pairs(&self) -> Vec<(usize, usize)> {
        self.observed_mask
            .indexed_iter()
            .filter(|(_, &o)| o == 1.0)
            .map(|(idx, _)| idx)
            .collect()
    }

    pub fn observed_triples(&self) -> Vec<(usize, usize, u8)> {
        self.observed_pairs()
            .into_iter()
            .map(|(u, i)| (u, i, self.observed_ratings[[u, i]] as u8))
            .collect()
    }

    pub fn require_truth(&self) -> Result<&Array2<f64>> {
        self.true_ratings
            .as_ref()
            .ok_or(Error::MissingComponent("true ratings"))
    }
}

/// Class-conditional flip rates: `rho01 = P(r=0 | r*=1)` (false negative)
/// and `rho10 = P(r=1 | r*=0)` (false positive).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawErrorParams", into = "RawErrorParams")]
pub struct ErrorParams {
    rho01: f64,
    rho10: f64,
}

#[derive(Serialize, Deserialize)]
struct RawErrorParams {
    rho01: f64,
    rho10: f64,
}

impl TryFrom<RawErrorParams> for ErrorParams {
    type Error = Error;
    fn try_from(r: RawErrorParams) -> Result<Self> {
        ErrorParams::new(r.rho01, r.rho10)
    }
}

impl From<ErrorParams> for RawErrorParams {
    fn from(p: ErrorParams) -> Self {
        RawErrorParams {
            rho01: p.rho01,
            rho10: p.rho10,
        }
    }
}

impl ErrorParams {
    pub fn new(rho01: f64, rho10: f64) -> Result<Self> {
        let ok = rho01.is_finite()
            && rho10.is_finite()
            && rho01 >= 0.0
            && rho10 >= 0.0
            && rho01 + rho10 < 1.0 - RHO_MARGIN;
        if ok {
            Ok(ErrorParams { rho01, rho10 })
        } else {
            Err(Error::InvalidErrorParams {
                rho01,
                rho10,
                margin: RHO_MARGIN,
            })
        }
    }

    pub fn noiseless() -> Self {
        ErrorParams {
            rho01: 0.0,
            rho10: 0.0,
        }
    }

    /// Projects arbitrary rates into the valid region: negatives go to 0 and
    /// an over-large sum is shrunk proportionally to `1 - 2 * RHO_MARGIN`.
    /// The flag reports whether anything moved.
    pub fn clamped(rho01: f64, rho10: f64) -> (Self, bool) {
        let a = if rho01.is_finite() { rho01.max(0.0) } else { 0.0 };
        let b = if rho10.is_finite() { rho10.max(0.0) } else { 0.0 };
        let mut moved = a != rho01 || b != rho10;
        let target = 1.0 - 2.0 * RHO_MARGIN;
        let (a, b) = if a + b >= 1.0 - RHO_MARGIN {
            moved = true;
            let s = target / (a + b);
            (a * s, b * s)
        } else {
            (a, b)
        };
        (ErrorParams { rho01: a, rho10: b }, moved)
    }

    pub fn rho01(&self) -> f64 {
        self.rho01
    }

    pub fn rho10(&self) -> f64 {
        self.rho10
    }

    /// `1 - rho01 - rho10`, strictly positive.
    pub fn spread(&self) -> f64 {
        1.0 - self.rho01 - self.rho10
    }

    pub fn is_noiseless(&self) -> bool {
        self.rho01 == 0.0 && self.rho10 == 0.0
    }
}

impl fmt::Display for ErrorParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(rho01={}, rho10={})", self.rho01, self.rho10)
    }
}

/// Learned observation probabilities, every entry in `[floor, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityMatrix {
    values: Array2<f64>,
    floor: f64,
}

impl PropensityMatrix {
    /// Entries below `floor` are clipped up to it; non-finite, non-positive
    /// or >1 entries are rejected.
    pub fn new(mut values: Array2<f64>, floor: f64) -> Result<Self> {
        if !(floor > 0.0 && floor <= 1.0) {
            return Err(Error::Domain {
                what: "propensity floor must lie in (0, 1]",
                value: floor,
            });
        }
        for v in values.iter_mut() {
            if !(v.is_finite() && *v > 0.0 && *v <= 1.0) {
                return Err(Error::Domain {
                    what: "propensity must lie in (0, 1]",
                    value: *v,
                });
            }
            if *v < floor {
                *v = floor;
            }
        }
        Ok(PropensityMatrix { values, floor })
    }

    pub fn with_default_floor(values: Array2<f64>) -> Result<Self> {
        Self::new(values, DEFAULT_PROPENSITY_FLOOR)
    }

    pub fn ones(n_users: usize, n_items: usize) -> Self {
        PropensityMatrix {
            values: Array2::ones((n_users, n_items)),
            floor: DEFAULT_PROPENSITY_FLOOR,
        }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    #[inline]
    pub fn get(&self, u: usize, i: usize) -> f64 {
        self.values[[u, i]]
    }
}

/// Predicted positive-preference probabilities, clipped into
/// `[OUTPUT_EPS, 1 - OUTPUT_EPS]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    values: Array2<f64>,
}

impl PredictionMatrix {
    pub fn new(mut values: Array2<f64>) -> Result<Self> {
        for v in values.iter_mut() {
            if !v.is_finite() {
                return Err(Error::Domain {
                    what: "prediction must be finite",
                    value: *v,
                });
            }
            *v = v.clamp(OUTPUT_EPS, 1.0 - OUTPUT_EPS);
        }
        Ok(PredictionMatrix { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    #[inline]
    pub fn get(&self, u: usize, i: usize) -> f64 {
        self.values[[u, i]]
    }
}

/// Imputed (surrogate) errors; may be negative.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputationMatrix {
    values: Array2<f64>,
}

impl ImputationMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain {
                what: "imputed error must be finite",
                value: *v,
            });
        }
        Ok(ImputationMatrix { values })
    }

    pub fn zeros(n_users: usize, n_items: usize) -> Self {
        ImputationMatrix {
            values: Array2::zeros((n_users, n_items)),
        }
    }

    pub fn constant(n_users: usize, n_items: usize, value: f64) -> Result<Self> {
        Self::new(Array2::from_elem((n_users, n_items), value))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    #[inline]
    pub fn get(&self, u: usize, i: usize) -> f64 {
        self.values[[u, i]]
    }
}

/// Seeded, reproducible random stream. Equal seeds give equal streams on
/// every platform.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream keyed by `stream`; does not advance `self`.
    pub fn fork(&self, stream: u64) -> SeededRng {
        let mut child = ChaCha8Rng::seed_from_u64(self.seed);
        child.set_stream(stream.wrapping_add(1));
        SeededRng {
            seed: self.seed,
            inner: child,
        }
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

pub(crate) fn check_dim(what: &'static str, expected: (usize, usize), found: (usize, usize)) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            what,
            expected,
            found,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, RngCore};

    fn two_by_two() -> RatingDataset {
        RatingDataset::new(
            array![[1.0, 0.0], [1.0, 1.0]],
            array![[1.0, 0.0], [0.0, 1.0]],
            Some(array![[1.0, 1.0], [0.0, 1.0]]),
        )
        .unwrap()
    }

    #[test]
    fn well_formed_dataset_has_no_violations() {
        assert!(validate_dataset(&two_by_two(), None).is_empty());
    }

    #[test]
    fn fractional_observed_rating_is_reported() {
        let mut d = two_by_two();
        d.observed_ratings[[1, 0]] = 0.5;
        let v = validate_dataset(&d, None);
        assert_eq!(
            v,
            vec![Violation::RatingNotBinary {
                user: 1,
                item: 0,
                value: 0.5
            }]
        );
        assert!(v[0].to_string().contains("(1,0)"));
    }

    #[test]
    fn unobserved_cells_may_hold_anything() {
        let mut d = two_by_two();
        d.observed_ratings[[0, 1]] = 0.5;
        assert!(validate_dataset(&d, None).is_empty());
    }

    #[test]
    fn error_params_in_config_are_checked() {
        let v = validate_dataset(&two_by_two(), Some((0.6, 0.5)));
        assert_eq!(v.len(), 1);
        assert!(v[0].to_string().contains("rho01+rho10 >= 1"));
    }

    #[test]
    fn clamping_keeps_params_valid() {
        let (p, moved) = ErrorParams::clamped(0.5, 0.5);
        assert!(moved);
        assert!(ErrorParams::new(p.rho01(), p.rho10()).is_ok());
        assert!((p.rho01() - p.rho10()).abs() < 1e-15);
        let (p, moved) = ErrorParams::clamped(0.2, -0.1);
        assert!(moved);
        assert_eq!((p.rho01(), p.rho10()), (0.2, 0.0));
    }

    #[test]
    fn propensities_are_clipped_not_rejected() {
        let p = PropensityMatrix::new(array![[0.01, 0.5]], 0.05).unwrap();
        assert_eq!(p.get(0, 0), 0.05);
        assert!(PropensityMatrix::new(array![[0.0, 0.5]], 0.05).is_err());
        assert!(PropensityMatrix::new(array![[1.2]], 0.05).is_err());
    }

    #[test]
    fn equal_seeds_give_equal_streams() {
        let mut a = SeededRng::new(7);
        let mut b = SeededRng::new(7);
        let xs: Vec<u64> = (0..16).map(|_| a.random()).collect();
        let ys: Vec<u64> = (0..16).map(|_| b.random()).collect();
        assert_eq!(xs, ys);
        let mut f1 = a.fork(3);
        let mut f2 = b.fork(3);
        assert_eq!(f1.next_u64(), f2.next_u64());
        assert_ne!(a.fork(1).next_u64(), a.fork(2).next_u64());
    }

    proptest! {
        #[test]
        fn construction_rejects_sum_at_or_above_margin(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let res = ErrorParams::new(a, b);
            prop_assert_eq!(res.is_ok(), a + b < 1.0 - RHO_MARGIN);
        }
    }
}

//! Pointwise losses and their noise-corrected surrogates.
//!
//! For flip rates `rho = (rho01, rho10)` the surrogate pair
//!
//! ```text
//! l~(f, 1) = ((1 - rho10) l(f, 1) - rho01 l(f, 0)) / (1 - rho01 - rho10)
//! l~(f, 0) = ((1 - rho01) l(f, 0) - rho10 l(f, 1)) / (1 - rho01 - rho10)
//! ```
//!
//! satisfies `E[l~(f, r) | r*] = l(f, r*)`. Surrogates may be negative and are
//! never clamped.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ErrorParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(try_from = "String", into = "String")]
pub enum LossKind {
    #[default]
    SquaredError,
    /// Binary cross-entropy with both log arguments floored at `eps`.
    CrossEntropyClipped { eps: f64 },
}

impl LossKind {
    pub fn cross_entropy(eps: f64) -> Result<Self> {
        if eps > 0.0 && eps <= 0.1 {
            Ok(LossKind::CrossEntropyClipped { eps })
        } else {
            Err(Error::Domain {
                what: "cross-entropy clip must lie in (0, 0.1]",
                value: eps,
            })
        }
    }

    /// `l(pred, label)` without domain checks.
    #[inline]
    pub fn eval(&self, pred: f64, label: bool) -> f64 {
        match *self {
            LossKind::SquaredError => {
                let d = pred - if label { 1.0 } else { 0.0 };
                d * d
            }
            LossKind::CrossEntropyClipped { eps } => {
                if label {
                    -pred.max(eps).ln()
                } else {
                    -(1.0 - pred).max(eps).ln()
                }
            }
        }
    }

    /// `d l(pred, label) / d pred`.
    #[inline]
    pub fn derivative(&self, pred: f64, label: bool) -> f64 {
        match *self {
            LossKind::SquaredError => 2.0 * (pred - if label { 1.0 } else { 0.0 }),
            LossKind::CrossEntropyClipped { eps } => {
                if label {
                    if pred > eps {
                        -1.0 / pred
                    } else {
                        0.0
                    }
                } else if 1.0 - pred > eps {
                    1.0 / (1.0 - pred)
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::SquaredError => f.write_str("squared"),
            LossKind::CrossEntropyClipped { eps } => write!(f, "cross_entropy:{eps}"),
        }
    }
}

impl From<LossKind> for String {
    fn from(k: LossKind) -> String {
        k.to_string()
    }
}

impl TryFrom<String> for LossKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for LossKind {
    type Err = Error;

    /// `squared`, `cross_entropy` (eps 1e-6) or `cross_entropy:<eps>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "squared" | "mse" | "squared_error" => Ok(LossKind::SquaredError),
            "cross_entropy" | "bce" => LossKind::cross_entropy(1e-6),
            _ => match s.strip_prefix("cross_entropy:") {
                Some(eps) => {
                    let eps: f64 = eps
                        .parse()
                        .map_err(|_| Error::InvalidArgument(format!("bad clip in `{s}`")))?;
                    LossKind::cross_entropy(eps)
                }
                None => Err(Error::InvalidArgument(format!("unknown loss `{s}`"))),
            },
        }
    }
}

fn check_pred(pred: f64) -> Result<()> {
    if pred > 0.0 && pred < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain {
            what: "prediction must lie in (0, 1)",
            value: pred,
        })
    }
}

pub fn point_loss(kind: LossKind, pred: f64, label: bool) -> Result<f64> {
    check_pred(pred)?;
    Ok(kind.eval(pred, label))
}

/// Surrogate values for both possible observed labels at one prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogatePair {
    /// `l~(f, 1)`
    pub positive: f64,
    /// `l~(f, 0)`
    pub negative: f64,
}

impl SurrogatePair {
    #[inline]
    pub fn from_losses(loss_pos: f64, loss_neg: f64, rho: &ErrorParams) -> Self {
        let (r01, r10) = (rho.rho01(), rho.rho10());
        let denom = 1.0 - r01 - r10;
        SurrogatePair {
            positive: ((1.0 - r10) * loss_pos - r01 * loss_neg) / denom,
            negative: ((1.0 - r01) * loss_neg - r10 * loss_pos) / denom,
        }
    }

    #[inline]
    pub fn at(kind: LossKind, pred: f64, rho: &ErrorParams) -> Self {
        Self::from_losses(kind.eval(pred, true), kind.eval(pred, false), rho)
    }

    #[inline]
    pub fn select(&self, label: bool) -> f64 {
        if label {
            self.positive
        } else {
            self.negative
        }
    }
}

/// `l~(pred, observed_label)` under the flip rates `rho`.
pub fn surrogate_loss(kind: LossKind, pred: f64, observed_label: bool, rho: &ErrorParams) -> Result<f64> {
    check_pred(pred)?;
    Ok(SurrogatePair::at(kind, pred, rho).select(observed_label))
}

/// `d l~(pred, label) / d pred`.
#[inline]
pub fn surrogate_derivative(kind: LossKind, pred: f64, label: bool, rho: &ErrorParams) -> f64 {
    SurrogatePair::from_losses(kind.derivative(pred, true), kind.derivative(pred, false), rho).select(label)
}

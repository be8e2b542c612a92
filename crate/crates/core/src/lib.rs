pub mod cli;
pub mod error;
pub mod estimators;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod noise;
pub mod synthbench;
pub mod training;
pub mod types;

pub use error::{Error, Result};
pub use estimators::{estimate, Estimator, EstimatorInputs};
pub use losses::{point_loss, surrogate_loss, LossKind};
pub use noise::{identify_error_params, Identification, NoisyRateModel};
pub use types::{ErrorParams, ImputationMatrix, PredictionMatrix, PropensityMatrix, RatingDataset, SeededRng};

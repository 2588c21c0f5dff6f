//! Query-adaptive latent ensemble for aggregating binary relevance judges.
//!
//! Each judge's competence on a query is a latent Gaussian variable whose prior
//! is predicted from the query embedding. Observed votes and a gated consensus
//! interaction refine that posterior by a damped fixed-point iteration, and the
//! final accept / fallback decision thresholds a Monte Carlo estimate of
//! `P(y = 1 | votes, query)`.

pub mod baselines;
pub mod data;
pub mod energy;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod nn;
pub mod simulator;
pub mod toy;
pub mod training;

pub use data::{load_dataset, read_dataset, save_dataset, split_dataset, Dataset, LabeledInstance};
pub use energy::{load_params, save_params, EnsembleParams, GateVector, ModelDims, PriorParams};
pub use error::{Error, Result};
pub use inference::{infer, infer_dataset, InferenceConfig, PosteriorState, Prediction};
pub use metrics::{evaluate, MetricsReport};
pub use training::{train, TrainConfig, TrainReport};

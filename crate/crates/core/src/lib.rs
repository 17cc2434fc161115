//! Generalized probabilistic principal component analysis.
//!
//! Estimates the loading matrix of the latent factor model
//! `Y = A Z + ε` where the rows of `Z` are independent Gaussian processes
//! over the inputs and `AᵀA = I`. The factors are integrated out and the
//! loadings, kernel ranges, signal-to-noise ratios and noise variance are
//! estimated by maximum marginal likelihood.
//!
//! ```no_run
//! use gppca::{fit, predict, FitConfig, OutputMatrix};
//! # fn main() -> gppca::Result<()> {
//! let y = nalgebra::DMatrix::<f64>::zeros(8, 200);
//! let model = fit(&OutputMatrix::on_regular_grid(y)?, &FitConfig::new(4))?;
//! let p = predict(&model, &[100.5])?;
//! println!("{}", p.mean);
//! # Ok(())
//! # }
//! ```

pub mod baselines;
pub mod dense;
pub mod error;
pub mod fit;
pub mod hyperopt;
pub mod io;
pub mod kernels;
pub mod likelihood;
pub mod linalg;
pub mod mean;
pub mod metrics;
pub mod model;
pub mod predict;
pub mod sim;
pub mod stiefel;

pub use baselines::{ly_loadings, pca_loadings, ppca_loadings, SubspaceEstimate};
pub use error::{GppcaError, Result};
pub use fit::{fit, fit_with_design, profile_log_likelihood, FitConfig, FitReport, FittedModel, InnerPolicy};
pub use kernels::{build_correlation_matrix, kernel_eval, InputGrid, KernelFamily, KernelSpec};
pub use likelihood::{
    estimate_loadings_shared, estimate_noise_variance, g_matrix, stiefel_gradient, stiefel_objective,
};
pub use mean::{
    build_mean_design, estimate_loadings_mean, noise_variance_mean, profile_log_likelihood_mean,
    regression_posterior_mean, Covariates, MeanBasis, MeanDesign,
};
pub use metrics::{avg_mse, largest_principal_angle, prediction_scores, ScoreReport};
pub use model::{HyperParams, LoadingMatrix, OutputMatrix};
pub use predict::{conditional_predict, field_posterior, predict, predict_with_mean, FieldPosterior, PredictiveNormal};
pub use sim::{run_experiment, sample_uniform_stiefel, simulate_dataset, ExperimentReport, Method, Scenario};
pub use stiefel::{cayley_retraction, optimize_on_stiefel, StiefelOptions, StiefelReport};

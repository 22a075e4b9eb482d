//! Physics-regularized training: shadow-GP regularizer, ELBO estimation and
//! the stochastic optimization loop.

mod adam;
mod elbo;
mod pseudo;
mod residuals;
mod train;

pub use adam::{adam_step, AdamState};
pub use elbo::{elbo_estimate, ElboEstimate, Objective, ParamLayout, ShadowGP, VehicleData, SHADOW_JITTER};
pub use pseudo::{sample_pseudo_inputs, ZSampling};
pub use residuals::{residuals_at_sample, EquationResiduals};
pub use train::{
    default_hyperparams, fit_marginal_likelihood, init_shadow, smooth_trace, train, train_from, write_trace_csv,
    Termination, TraceRow, TrainConfig, TrainOutcome, TrainedModel,
};

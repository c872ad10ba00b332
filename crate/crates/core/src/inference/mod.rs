//! Variational objectives, the annealed Langevin flow and the training loop.

mod estimators;
mod langevin;
mod optim;
mod schedule;
pub mod toy;
mod train;

pub use estimators::{
    ais_elbo, iw_elbo, mf_elbo, AisTrace, Context, DriftScale, ElboTerms, Estimate, FlowConfig, LatentKl, Method,
    Noise, NoiseShape,
};
pub use langevin::{
    backward_noise, log_transition_ratio, next_step_size, precision_trace_bound, transition_logpdf, ula_step, StepSizeState,
};
pub use optim::{Optimizer, OptimizerKind};
pub use schedule::{initial_logits, make_schedule, AnnealMode, AnnealingSchedule};
pub use train::{
    default_step_size, elbo_and_grads, eval_rng, evaluate, objective, observed_mse, train, EvalReport, TrainConfig,
    Trainer,
};

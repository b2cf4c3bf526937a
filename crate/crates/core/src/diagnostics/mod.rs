//! Clean/noisy evaluation, loss-gap trend tests and FLOPs accounting.

mod eval;
mod flops;
mod regression;

pub use eval::{build_eval_set, eval_sc_loss, eval_sc_loss_with, perfect_generator, ContextMode, EvalSet};
pub use flops::{flops_per_step, normalized_cumulative_flops, FlopsInput, FlopsReport, REFERENCE_STEPS};
pub use regression::{gap_series, ols, ols_trend_test, GapSeries, RegressionResult};

//! Error metrics, model comparison and report emission.

mod compare;
pub mod metrics;
mod report;

pub use compare::{
    compare_models, quantity_dim, CompareOptions, Estimator, EvalReport, PredictionSet, ReportRow, TestTrajectory,
};
pub use report::{elbo_plot, emit_plots, emit_report, file_stem, metric_bar_chart, scatter_plot, write_report_csv};

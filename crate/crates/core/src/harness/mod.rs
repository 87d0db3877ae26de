//! Training, evaluation, and gradient checking.

mod gradcheck;
mod metrics;
mod optim;
mod probe;
mod train;

pub use gradcheck::{
    default_grad_check, eval_loss, grad_check, gradcheck_config, rel_err, GradCheckReport, ParamCheck,
    FD_STEP, REL_FLOOR,
};
pub use metrics::{
    agent_errors, evaluate, evaluate_with, predict_scenes, report, top_k_modes, KMetrics, MetricReport, Scored,
    METRICS_HEADER, MISS_THRESHOLD,
};
pub use optim::Optim;
pub use probe::{maneuver_clustering, ClusterReport};
pub use train::{
    batch_indices, train, train_model, train_observed, train_split, write_curve, CurveRow, StepInfo,
    TrainOutcome, CURVE_HEADER,
};

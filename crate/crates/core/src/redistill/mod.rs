//! Distillation based redaction for nonlinear conditioners.

mod distill;
mod loss;
mod schedule;
mod spec;

pub use distill::{
    distill_conditioner, distill_parallel, distill_sequential, distill_sequential_probed, Anneal,
    ConditionerTrace, DistillConfig, DistillReport, OptimizerKind, Stage2Probe, StudentInit,
};
pub use loss::{distill_loss, loss_terms, mean_distance, Metric};
pub use schedule::{lambda_at, layer_schedules, Schedule};
pub use spec::{RedactionSpec, SpecFile};

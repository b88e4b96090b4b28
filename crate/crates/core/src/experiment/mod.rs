//! Config-driven pipelines: train a teacher, redact, evaluate, attack and
//! write a reproducible report.

mod config;
mod plot;
mod presets;
mod run;

pub use config::{
    phase_seed, AttackSection, ExperimentConfig, Method, ModelConfig, RedactionConfig,
    SEEDED_SECTIONS,
};
pub use plot::plot_panels;
pub use presets::{preset, PRESETS};
pub use run::{
    attack_outcome, attack_rows, distill_any, faithfulness_rows, frozen_intact, hex_digest,
    load_generator, loss_rows, par_map, quality_rows, run_experiment, run_experiment_with,
    save_generator, summarize_distill, AttackOutcome, BlockLoss, DistillSummary, Failure,
    RunReport, TeacherSummary, VariantReport, ATTACK_HEADER, ATTACK_NOTICE, FAITHFULNESS_HEADER,
    LOSS_HEADER, QUALITY_HEADER, REPORT_SCHEMA,
};

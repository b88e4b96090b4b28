//! Synthetic conditional tasks and toy generators trained by MMD.

mod generator;
mod mmd;
mod task;
mod train;

pub use generator::{
    cond_prefix, ConditionalGenerator, GeneratorArch, Topology, DEFAULT_LATENT, MAIN_PREFIX,
};
pub use mmd::{median_bandwidth, mmd2, mmd2_node, pairwise_sq_dist};
pub use task::{SyntheticTask, TaskSpec, COLORS, DEFAULT_SIGMA, PARTS};
pub use train::{
    conditional_bandwidths, train_generator, BandwidthPolicy, TrainConfig, TrainReport,
};

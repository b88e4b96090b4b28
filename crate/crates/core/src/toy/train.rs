use serde::{Deserialize, Serialize};

use super::generator::ConditionalGenerator;
use super::mmd::{median_bandwidth, mmd2_node};
use super::task::SyntheticTask;
use crate::conditional::Conditional;
use crate::error::{Error, Result};
use crate::nn::{Adam, Ctx, Optimizer};
use crate::rng::{derive_seed, rng};
use crate::tensor::{NodeId, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum BandwidthPolicy {
    Fixed { h: f64 },
    MedianHeuristic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Samples per conditional per step.
    pub batch: usize,
    pub lr: f64,
    pub bandwidth: BandwidthPolicy,
    /// Multiples of the base bandwidth summed in the training kernel.
    #[serde(default = "default_scales")]
    pub scales: Vec<f64>,
    pub seed: u64,
}

fn default_scales() -> Vec<f64> {
    vec![1.0, 2.0, 4.0, 8.0]
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch: 32,
            lr: 0.01,
            bandwidth: BandwidthPolicy::MedianHeuristic,
            scales: default_scales(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::config(
                "train.batch",
                "need at least 2 samples per conditional",
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if let BandwidthPolicy::Fixed { h } = self.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::config("train.bandwidth.h", "must be positive"));
            }
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::config(
                "train.scales",
                "must be a nonempty list of positive factors",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// `(step, loss)` before each update.
    pub trace: Vec<(usize, f64)>,
    /// Frozen base bandwidth per training conditional.
    pub bandwidths: Vec<f64>,
}

/// Base kernel bandwidth per conditional, fixed for a whole run.
pub fn conditional_bandwidths(
    task: &SyntheticTask,
    conds: &[Conditional],
    policy: &BandwidthPolicy,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    conds
        .iter()
        .enumerate()
        .map(|(i, c)| match policy {
            BandwidthPolicy::Fixed { h } => Ok(*h),
            BandwidthPolicy::MedianHeuristic => {
                let mut r = rng(derive_seed(seed, &format!("bandwidth/{i}")));
                Ok(median_bandwidth(&task.sample(c, n, &mut r)?))
            }
        })
        .collect()
}

/// `[rows, total]` matrix picking rows `start..start + rows`.
pub(crate) fn selector(start: usize, rows: usize, total: usize) -> Tensor {
    let mut s = Tensor::zeros(&[rows, total]);
    for i in 0..rows {
        s.set(i, start + i, 1.0);
    }
    s
}

/// Fits `g` to the task by minimizing the mean per-conditional MMD^2 with
/// Adam. Parameters marked frozen are left untouched.
pub fn train_generator(
    g: &mut ConditionalGenerator,
    task: &SyntheticTask,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let conds = task.conditionals();
    let bandwidths = conditional_bandwidths(task, &conds, &cfg.bandwidth, 4 * cfg.batch, cfg.seed)?;
    let mut data_rng = rng(derive_seed(cfg.seed, "train/data"));
    let mut z_rng = rng(derive_seed(cfg.seed, "train/latent"));
    let mut opt = Adam::new(cfg.lr);
    let b = cfg.batch;
    let total = b * conds.len();
    let batch_conds: Vec<Conditional> = conds
        .iter()
        .flat_map(|c| std::iter::repeat_n(c.clone(), b))
        .collect();
    let batch = g.encode(&batch_conds)?;
    let selectors: Vec<Tensor> = (0..conds.len())
        .map(|i| selector(i * b, b, total))
        .collect();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let z = g.sample_latent(total, &mut z_rng);
        let mut ctx = Ctx::training(&[]);
        let x = g.forward(&mut ctx, &z, &batch)?;
        let mut loss: Option<NodeId> = None;
        for (i, c) in conds.iter().enumerate() {
            let s = ctx.input(selectors[i].clone());
            let xc = ctx.graph.matmul(s, x)?;
            let y = ctx.input(task.sample(c, b, &mut data_rng)?);
            let scales: Vec<f64> = cfg.scales.iter().map(|f| f * bandwidths[i]).collect();
            let term = mmd2_node(&mut ctx.graph, xc, y, &scales)?;
            loss = Some(match loss {
                Some(l) => ctx.graph.add(l, term)?,
                None => term,
            });
        }
        let loss = ctx.graph.scale(
            loss.expect("task has conditionals"),
            1.0 / conds.len() as f64,
        )?;
        let value = ctx.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                msg: format!("loss {value}"),
            });
        }
        trace.push((step, value));
        ctx.graph.backward(loss)?;
        opt.step(g, &ctx).map_err(|e| Error::Divergence {
            step,
            msg: e.to_string(),
        })?;
    }
    Ok(TrainReport { trace, bandwidths })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Parameterized;
    use crate::toy::generator::GeneratorArch;
    use crate::toy::mmd::mmd2;

    fn quality(g: &ConditionalGenerator, task: &SyntheticTask, seed: u64) -> f64 {
        let mut r = rng(seed);
        let conds = task.conditionals();
        let mut total = 0.0;
        for c in &conds {
            let x = g.sample(c, 200, &mut r).unwrap();
            let y = task.sample(c, 200, &mut r).unwrap();
            total += mmd2(&x, &y, median_bandwidth(&y)).unwrap();
        }
        total / conds.len() as f64
    }

    #[test]
    fn training_reduces_mmd() {
        let task = SyntheticTask::kgon(3).unwrap();
        let mut g =
            ConditionalGenerator::build(&GeneratorArch::affine_single(&task, 4, vec![16]), 1)
                .unwrap();
        let before = quality(&g, &task, 9);
        let cfg = TrainConfig {
            steps: 300,
            batch: 24,
            lr: 0.02,
            ..TrainConfig::default()
        };
        let report = train_generator(&mut g, &task, &cfg).unwrap();
        let after = quality(&g, &task, 9);
        assert!(after < 0.5 * before, "{before} -> {after}");
        let head: f64 = report.trace[..20].iter().map(|t| t.1).sum();
        let tail: f64 = report.trace[report.trace.len() - 20..]
            .iter()
            .map(|t| t.1)
            .sum();
        assert!(tail < head);
    }

    #[test]
    fn zero_steps_change_nothing() {
        let task = SyntheticTask::kgon(3).unwrap();
        let mut g =
            ConditionalGenerator::build(&GeneratorArch::affine_single(&task, 4, vec![8]), 1)
                .unwrap();
        let before = g.clone();
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let report = train_generator(&mut g, &task, &cfg).unwrap();
        assert!(report.trace.is_empty());
        assert_eq!(g, before);
    }

    #[test]
    fn training_is_deterministic() {
        let task = SyntheticTask::kgon(3).unwrap();
        let cfg = TrainConfig {
            steps: 15,
            batch: 8,
            ..TrainConfig::default()
        };
        let run = || {
            let mut g =
                ConditionalGenerator::build(&GeneratorArch::affine_single(&task, 4, vec![8]), 2)
                    .unwrap();
            train_generator(&mut g, &task, &cfg).unwrap();
            g.param_values()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_reports_step() {
        let task = SyntheticTask::kgon(3).unwrap();
        let mut g =
            ConditionalGenerator::build(&GeneratorArch::affine_single(&task, 4, vec![8]), 2)
                .unwrap();
        g.main[0][0].weight.value = g.main[0][0].weight.value.map(|_| f64::NAN);
        let cfg = TrainConfig {
            steps: 5,
            batch: 4,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_generator(&mut g, &task, &cfg),
            Err(Error::Divergence { step: 0, .. })
        ));
    }
}

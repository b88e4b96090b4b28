//! Discrete square-attack search for conditionals that recover a redacted
//! concept.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditional::Conditional;
use crate::error::{Error, Result};
use crate::metrics::{corr, Sampler};
use crate::redistill::RedactionSpec;
use crate::rng::{derive_index, derive_seed, normal_tensor, rng};
use crate::toy::SyntheticTask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub iterations: usize,
    pub candidates: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            iterations: 16,
            candidates: 32,
            seed: 13,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates == 0 {
            return Err(Error::config("attack.candidates", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub target: Conditional,
    pub reference: Conditional,
    /// Conditional held by the search after the last iteration.
    pub adversarial: Conditional,
    /// Best conditional seen, starting from the target itself.
    pub best: Conditional,
    pub best_corr: f64,
    /// `corr(G'(z|c_adv), c)` after each iteration.
    pub trace: Vec<f64>,
    /// Running maximum of the trace and the starting value.
    pub best_trace: Vec<f64>,
    pub success: bool,
}

fn score(
    model: &dyn Sampler,
    task: &SyntheticTask,
    conds: &[Conditional],
    z: &crate::Tensor,
    c: &Conditional,
) -> Result<Vec<f64>> {
    let zs = crate::Tensor::vstack(&vec![z.clone(); conds.len()])?;
    let x = model.generate(conds, &zs)?;
    (0..conds.len()).map(|i| corr(x.row(i), c, task)).collect()
}

/// Greedy single-token search maximizing `corr(G'(z|.), c)` with a fixed
/// latent. Success means the best conditional found yields a sample closer
/// to `c` than to `c_hat`.
pub fn square_attack(
    model: &dyn Sampler,
    task: &SyntheticTask,
    target: &Conditional,
    reference: &Conditional,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    let vocab = task.vocab_size();
    if vocab == 0 {
        return Err(Error::InvalidArgument("empty vocabulary".into()));
    }
    if target.is_empty() {
        return Err(Error::InvalidConditional("empty conditional".into()));
    }
    let mut r = rng(cfg.seed);
    let z = normal_tensor(&mut r, &[1, model.latent_dim()], 1.0);
    let mut adversarial = target.clone();
    let mut best = target.clone();
    let mut best_corr = score(model, task, std::slice::from_ref(target), &z, target)?[0];
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut best_trace = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let s = r.random_range(0..adversarial.len());
        let candidates: Vec<Conditional> = (0..cfg.candidates)
            .map(|_| adversarial.with_token(s, r.random_range(0..vocab)))
            .collect();
        let scores = score(model, task, &candidates, &z, target)?;
        let mut pick = 0;
        for (i, v) in scores.iter().enumerate() {
            if *v > scores[pick] {
                pick = i;
            }
        }
        adversarial = candidates[pick].clone();
        trace.push(scores[pick]);
        if scores[pick] > best_corr {
            best_corr = scores[pick];
            best = adversarial.clone();
        }
        best_trace.push(best_corr);
    }
    let x = model.generate(std::slice::from_ref(&best), &z)?;
    let success = corr(x.row(0), target, task)? > corr(x.row(0), reference, task)?;
    Ok(AttackResult {
        target: target.clone(),
        reference: reference.clone(),
        adversarial,
        best,
        best_corr,
        trace,
        best_trace,
        success,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub rate: f64,
    pub attacks: usize,
    pub results: Vec<AttackResult>,
}

/// Runs `n` attacks on conditionals drawn uniformly from the redacted set.
/// Attack `k` uses the seed `derive_index(cfg.seed, k)`.
pub fn attack_success_rate(
    model: &dyn Sampler,
    task: &SyntheticTask,
    spec: &RedactionSpec,
    cfg: &AttackConfig,
    n: usize,
) -> Result<AttackSummary> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "attack count must be positive".into(),
        ));
    }
    let (_, redacted) = spec.partition(&task.conditionals());
    if redacted.is_empty() {
        return Err(Error::EmptyBatch("redacted conditionals"));
    }
    let mut r = rng(derive_seed(cfg.seed, "attack-targets"));
    let mut results = Vec::with_capacity(n);
    for k in 0..n {
        let c = &redacted[r.random_range(0..redacted.len())];
        let run = AttackConfig {
            seed: derive_index(cfg.seed, k as u64),
            ..cfg.clone()
        };
        results.push(square_attack(model, task, c, &spec.reference(c)?, &run)?);
    }
    let wins = results.iter().filter(|a| a.success).count();
    Ok(AttackSummary {
        rate: wins as f64 / n as f64,
        attacks: n,
        results,
    })
}

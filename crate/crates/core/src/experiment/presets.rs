use super::config::{
    phase_seed, AttackSection, ExperimentConfig, Method, ModelConfig, RedactionConfig,
};
use crate::error::{Error, Result};
use crate::metrics::EvalConfig;
use crate::nn::{ConditionerSpec, EmbeddingKind};
use crate::redistill::{Anneal, DistillConfig, Metric, OptimizerKind, Schedule};
use crate::toy::{BandwidthPolicy, TaskSpec, TrainConfig, DEFAULT_SIGMA};

pub const PRESETS: [&str; 5] = [
    "mnist-analog",
    "blue-to-red",
    "residual-voice",
    "yellow-red",
    "mirror-attack",
];

fn names(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn train(seed: u64, steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch: 32,
        lr: 0.01,
        bandwidth: BandwidthPolicy::MedianHeuristic,
        scales: vec![1.0, 2.0, 4.0, 8.0],
        seed: phase_seed(seed, "train"),
    }
}

fn eval(seed: u64) -> EvalConfig {
    EvalConfig {
        trials: 500,
        mismatches: 100,
        quality_samples: 200,
        seed: phase_seed(seed, "eval"),
    }
}

fn distill(seed: u64, metric: Metric, steps: usize, lr: f64) -> DistillConfig {
    DistillConfig::new(metric, steps, 8, lr, phase_seed(seed, "distill"))
}

fn adam(seed: u64, metric: Metric, steps: usize, batch: usize) -> DistillConfig {
    let mut d = DistillConfig::new(metric, steps, batch, 0.003, phase_seed(seed, "distill"));
    d.optimizer = OptimizerKind::Adam;
    d
}

fn attack(seed: u64, attacks: usize, ablation: bool) -> AttackSection {
    AttackSection {
        iterations: 16,
        candidates: 32,
        seed: phase_seed(seed, "attack"),
        attacks,
        ablation,
    }
}

/// 10-gon labels 0..3 rerouted to `9 - c` by the closed form.
fn mnist_analog() -> ExperimentConfig {
    let seed = 3;
    ExperimentConfig {
        name: "mnist-analog".into(),
        seed,
        output_dir: None,
        task: TaskSpec::Kgon {
            k: 10,
            sigma: DEFAULT_SIGMA,
        },
        model: ModelConfig::Single {
            conditioner: ConditionerSpec::Affine {
                labels: 10,
                embed_dim: 10,
                rep_dim: 12,
                embedding: EmbeddingKind::OneHot,
            },
            hidden: vec![32],
        },
        train: train(seed, 1000),
        redaction: RedactionConfig {
            method: Method::ClosedForm,
            redact: names(&["0", "1", "2", "3"]),
            reference: names(&["9", "8", "7", "6"]),
        },
        distill: None,
        sweep_schedules: Vec::new(),
        eval: eval(seed),
        attack: Some(attack(seed, 50, false)),
        plot: true,
    }
}

/// Cascaded token model with every caption containing `blue` redacted to
/// the same caption with `red`.
fn blue_to_red() -> ExperimentConfig {
    let seed = 7;
    ExperimentConfig {
        name: "blue-to-red".into(),
        seed,
        output_dir: None,
        task: TaskSpec::TokenAttr {
            dim: 4,
            sigma: DEFAULT_SIGMA,
        },
        model: ModelConfig::Cascaded {
            embed_dim: 6,
            hidden: vec![32],
        },
        train: train(seed, 1500),
        redaction: RedactionConfig {
            method: Method::Distill,
            redact: names(&["blue"]),
            reference: names(&["red"]),
        },
        distill: Some(adam(seed, Metric::L2Squared, 3000, 32)),
        sweep_schedules: Vec::new(),
        eval: eval(seed),
        attack: Some(attack(seed, 50, false)),
        plot: false,
    }
}

/// Six-block residual model distilled in parallel under every layer schedule.
fn residual_voice() -> ExperimentConfig {
    let seed = 11;
    let mut d = adam(seed, Metric::L1, 3000, 8);
    d.alpha = 0.02;
    d.beta = 0.1;
    d.rewriter = true;
    ExperimentConfig {
        name: "residual-voice".into(),
        seed,
        output_dir: None,
        task: TaskSpec::TokenAttr {
            dim: 2,
            sigma: DEFAULT_SIGMA,
        },
        model: ModelConfig::Residual {
            embed_dim: 6,
            blocks: 6,
            cycle: 3,
            state_dim: 8,
            width: 8,
        },
        train: train(seed, 1500),
        redaction: RedactionConfig {
            method: Method::Distill,
            redact: names(&["yellow"]),
            reference: names(&["red"]),
        },
        distill: Some(d),
        sweep_schedules: Schedule::ALL.to_vec(),
        eval: eval(seed),
        attack: None,
        plot: true,
    }
}

/// Two colors redacted at once, with a capacity prefix, fixed variance and
/// annealed lambda.
fn yellow_red() -> ExperimentConfig {
    let seed = 13;
    let mut d = adam(seed, Metric::L2Squared, 3000, 32);
    d.capacity_prefix = Some(8);
    d.anneal = Some(Anneal { min: 1.0, max: 3.0 });
    ExperimentConfig {
        name: "yellow-red".into(),
        seed,
        output_dir: None,
        task: TaskSpec::TokenAttr {
            dim: 4,
            sigma: DEFAULT_SIGMA,
        },
        model: ModelConfig::Cascaded {
            embed_dim: 6,
            hidden: vec![32],
        },
        train: train(seed, 1500),
        redaction: RedactionConfig {
            method: Method::Distill,
            redact: names(&["yellow", "red"]),
            reference: names(&["black", "black"]),
        },
        distill: Some(d),
        sweep_schedules: Vec::new(),
        eval: eval(seed),
        attack: Some(attack(seed, 50, false)),
        plot: false,
    }
}

/// Nonlinear label model with half of a 10-gon mirrored onto the other half,
/// attacked before and after redaction and against a `lambda = 0` ablation.
fn mirror_attack() -> ExperimentConfig {
    let seed = 17;
    let d = distill(seed, Metric::L2Squared, 1000, 0.05);
    ExperimentConfig {
        name: "mirror-attack".into(),
        seed,
        output_dir: None,
        task: TaskSpec::Kgon {
            k: 10,
            sigma: DEFAULT_SIGMA,
        },
        model: ModelConfig::Single {
            conditioner: ConditionerSpec::Mlp {
                hidden: vec![16],
                rep_dim: 4,
            },
            hidden: vec![32],
        },
        train: train(seed, 1500),
        redaction: RedactionConfig {
            method: Method::Distill,
            redact: names(&["0", "1", "2", "3", "4"]),
            reference: names(&["9", "8", "7", "6", "5"]),
        },
        distill: Some(d),
        sweep_schedules: Vec::new(),
        eval: eval(seed),
        attack: Some(attack(seed, 100, true)),
        plot: true,
    }
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    match name {
        "mnist-analog" => Ok(mnist_analog()),
        "blue-to-red" => Ok(blue_to_red()),
        "residual-voice" => Ok(residual_voice()),
        "yellow-red" => Ok(yellow_red()),
        "mirror-attack" => Ok(mirror_attack()),
        other => Err(Error::config(
            "preset",
            format!(
                "unknown preset {other:?}; choose one of {}",
                PRESETS.join(", ")
            ),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in PRESETS {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap();
            assert_eq!(cfg.name, name);
            let text = cfg.to_toml_string().unwrap();
            assert_eq!(
                ExperimentConfig::from_toml_str(&text).unwrap(),
                cfg,
                "{name}"
            );
        }
        assert!(preset("nope").is_err());
    }
}

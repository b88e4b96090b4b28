use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::closedform::LabelRedactionPlan;
use crate::error::{Error, Result};
use crate::metrics::EvalConfig;
use crate::nn::ConditionerSpec;
use crate::redistill::{DistillConfig, RedactionSpec, Schedule};
use crate::rng::derive_seed;
use crate::toy::{GeneratorArch, SyntheticTask, TaskSpec, Topology, TrainConfig};

/// Generator shape, sized from the task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "topology", rename_all = "kebab-case")]
pub enum ModelConfig {
    Single {
        conditioner: ConditionerSpec,
        hidden: Vec<usize>,
    },
    Cascaded {
        embed_dim: usize,
        hidden: Vec<usize>,
    },
    Residual {
        embed_dim: usize,
        blocks: usize,
        cycle: usize,
        state_dim: usize,
        width: usize,
    },
}

impl ModelConfig {
    pub fn arch(&self, task: &SyntheticTask) -> Result<GeneratorArch> {
        let arch = match self {
            ModelConfig::Single {
                conditioner,
                hidden,
            } => GeneratorArch::single(task, conditioner.clone(), hidden.clone()),
            ModelConfig::Cascaded { embed_dim, hidden } => {
                GeneratorArch::cascaded(task, *embed_dim, hidden.clone())?
            }
            ModelConfig::Residual {
                embed_dim,
                blocks,
                cycle,
                state_dim,
                width,
            } => GeneratorArch::residual(task, *embed_dim, *blocks, *cycle, *state_dim, *width),
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn topology(&self) -> Topology {
        match self {
            ModelConfig::Single { .. } => Topology::Single,
            ModelConfig::Cascaded { .. } => Topology::Cascaded,
            ModelConfig::Residual { .. } => Topology::Residual,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ClosedForm,
    Distill,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RedactionConfig {
    pub method: Method,
    /// Redacted tokens by name.
    pub redact: Vec<String>,
    /// Replacement token for each redacted token.
    pub reference: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_candidates")]
    pub candidates: usize,
    pub seed: u64,
    /// Attacks per model.
    pub attacks: usize,
    /// Also distill and attack a model with `lambda = 0`.
    #[serde(default)]
    pub ablation: bool,
}

fn default_iterations() -> usize {
    16
}

fn default_candidates() -> usize {
    32
}

impl AttackSection {
    pub fn config(&self) -> AttackConfig {
        AttackConfig {
            iterations: self.iterations,
            candidates: self.candidates,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub redaction: RedactionConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distill: Option<DistillConfig>,
    /// One distillation per listed schedule instead of `distill.schedule`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep_schedules: Vec<Schedule>,
    pub eval: EvalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackSection>,
    #[serde(default)]
    pub plot: bool,
}

/// Seed of a phase derived from the global seed. The top 11 bits are dropped
/// so the value fits every plain-text config format.
pub fn phase_seed(global: u64, phase: &str) -> u64 {
    derive_seed(global, phase) >> 11
}

/// Sections whose `seed` defaults to `phase_seed(seed, section)`.
pub const SEEDED_SECTIONS: [&str; 4] = ["train", "distill", "eval", "attack"];

fn fill_toml(table: &mut toml::Table) -> Result<()> {
    let global = table
        .get("seed")
        .and_then(toml::Value::as_integer)
        .ok_or_else(|| Error::config("seed", "missing or not a nonnegative integer"))?;
    let global = u64::try_from(global).map_err(|_| Error::config("seed", "must be nonnegative"))?;
    for section in SEEDED_SECTIONS {
        if section == "eval" && !table.contains_key("eval") {
            table.insert("eval".into(), toml::Value::Table(toml::Table::new()));
        }
        if let Some(toml::Value::Table(t)) = table.get_mut(section) {
            if !t.contains_key("seed") {
                t.insert(
                    "seed".into(),
                    toml::Value::Integer(phase_seed(global, section) as i64),
                );
            }
        }
    }
    Ok(())
}

fn fill_json(value: &mut serde_json::Value) -> Result<()> {
    let global = value
        .get("seed")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::config("seed", "missing or not a nonnegative integer"))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::config("config", "expected an object"))?;
    for section in SEEDED_SECTIONS {
        if section == "eval" && !obj.contains_key("eval") {
            obj.insert("eval".into(), serde_json::json!({}));
        }
        if let Some(serde_json::Value::Object(t)) = obj.get_mut(section) {
            t.entry("seed")
                .or_insert(serde_json::json!(phase_seed(global, section)));
        }
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parses a TOML config; missing phase seeds are derived from `seed`.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Toml(e.to_string()))?;
        Self::from_toml_table(table)
    }

    pub fn from_toml_table(mut table: toml::Table) -> Result<Self> {
        fill_toml(&mut table)?;
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Toml(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }

    /// Parses a JSON config, e.g. the echo in a report.
    pub fn from_json_value(mut value: serde_json::Value) -> Result<Self> {
        fill_json(&mut value)?;
        Ok(serde_json::from_value(value)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_value(serde_json::from_str(&text)?)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn task(&self) -> Result<SyntheticTask> {
        SyntheticTask::new(self.task.clone())
    }

    pub fn spec(&self, task: &SyntheticTask) -> Result<RedactionSpec> {
        let r = &self.redaction;
        let spec = RedactionSpec::from_names(task, &r.redact, &r.reference)?;
        spec.validate(task)?;
        if spec.is_empty() {
            return Err(Error::config("redaction.redact", "nothing to redact"));
        }
        Ok(spec)
    }

    /// Label plan for closed-form runs.
    pub fn plan(&self, task: &SyntheticTask) -> Result<LabelRedactionPlan> {
        let spec = self.spec(task)?;
        if task.seq_len() != 1 {
            return Err(Error::config(
                "redaction.method",
                "closed form needs a label task",
            ));
        }
        LabelRedactionPlan::new(task.vocab_size(), &spec.pairs())
    }

    /// Checks every section before any phase runs.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("name", "must be a nonempty plain file name"));
        }
        let task = self.task()?;
        self.model.arch(&task)?;
        self.train.validate()?;
        self.spec(&task)?;
        let topology = self.model.topology();
        match self.redaction.method {
            Method::ClosedForm => {
                let affine = matches!(
                    &self.model,
                    ModelConfig::Single {
                        conditioner: ConditionerSpec::Affine { .. },
                        ..
                    }
                );
                if !affine {
                    return Err(Error::config(
                        "redaction.method",
                        "closed form needs a single-stage affine conditioner",
                    ));
                }
                self.plan(&task)?;
                if self.distill.is_some() || !self.sweep_schedules.is_empty() {
                    return Err(Error::config(
                        "distill",
                        "closed-form runs take no distillation section",
                    ));
                }
                if self.attack.as_ref().is_some_and(|a| a.ablation) {
                    return Err(Error::config(
                        "attack.ablation",
                        "the ablation needs a distillation run",
                    ));
                }
            }
            Method::Distill => {
                let d = self.distill.as_ref().ok_or_else(|| {
                    Error::config("distill", "required when redaction.method = \"distill\"")
                })?;
                d.validate(topology)?;
                if !self.sweep_schedules.is_empty() && topology != Topology::Residual {
                    return Err(Error::config(
                        "sweep_schedules",
                        "schedules apply to residual generators only",
                    ));
                }
            }
        }
        let e = &self.eval;
        if e.trials == 0 || e.mismatches == 0 || e.quality_samples < 2 {
            return Err(Error::config(
                "eval",
                "need trials >= 1, mismatches >= 1 and quality_samples >= 2",
            ));
        }
        if let Some(a) = &self.attack {
            a.config().validate()?;
            if a.attacks == 0 {
                return Err(Error::config("attack.attacks", "must be positive"));
            }
        }
        if self.plot && task.output_dim() != 2 {
            return Err(Error::config("plot", "sample plots need a 2-D task"));
        }
        Ok(())
    }
}

//! Versioned JSON checkpoints: parameter name to shape and flat values, plus
//! metadata and the architecture needed to rebuild the model.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::param::Parameterized;
use crate::error::{Error, Result};
use crate::jsonfmt;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "redact-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub seed: u64,
    pub topology: String,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    #[serde(default)]
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub metadata: Metadata,
    pub architecture: serde_json::Value,
    pub params: BTreeMap<String, ParamRecord>,
}

impl Checkpoint {
    pub fn capture(
        model: &impl Parameterized,
        metadata: Metadata,
        architecture: serde_json::Value,
    ) -> Self {
        let mut params = BTreeMap::new();
        model.visit(&mut |p| {
            params.insert(
                p.name.clone(),
                ParamRecord {
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().to_vec(),
                    frozen: p.frozen,
                },
            );
        });
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            metadata,
            architecture,
            params,
        }
    }

    /// Copies stored values into `model`. Every parameter of the model must
    /// be present with a matching shape.
    pub fn restore_into(&self, model: &mut impl Parameterized) -> Result<()> {
        let mut failure = None;
        model.visit_mut(&mut |p| {
            if failure.is_some() {
                return;
            }
            match self.params.get(&p.name) {
                None => failure = Some(format!("missing parameter {}", p.name)),
                Some(rec) if rec.shape != p.value.shape() => {
                    failure = Some(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        p.name,
                        rec.shape,
                        p.value.shape()
                    ))
                }
                Some(rec) => match Tensor::new(rec.shape.clone(), rec.values.clone()) {
                    Ok(t) => {
                        p.value = t;
                        p.frozen = rec.frozen;
                    }
                    Err(e) => failure = Some(format!("parameter {}: {e}", p.name)),
                },
            }
        });
        match failure {
            Some(msg) => Err(Error::Checkpoint(msg)),
            None => Ok(()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        for (name, rec) in &self.params {
            if rec.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        jsonfmt::to_string_pretty(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {}",
                ck.version
            )));
        }
        for (name, rec) in &ck.params {
            if rec.shape.iter().product::<usize>() != rec.values.len() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?} does not hold {} values",
                    rec.shape,
                    rec.values.len()
                )));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{init_parameters, Activation, Init};

    #[test]
    fn round_trip_is_bit_exact() {
        let model = init_parameters("main", &[3, 7, 2], Init::Normal(1.3), Activation::Tanh, 11);
        let meta = Metadata {
            seed: 11,
            topology: "single".into(),
            step: 40,
        };
        let ck = Checkpoint::capture(&model, meta, serde_json::json!({"sizes": [3, 7, 2]}));
        let text = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ck);
        let mut fresh =
            init_parameters("main", &[3, 7, 2], Init::Normal(1.3), Activation::Tanh, 12);
        back.restore_into(&mut fresh).unwrap();
        for (a, b) in model
            .param_values()
            .values()
            .zip(fresh.param_values().values())
        {
            let same = a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same);
        }
    }

    #[test]
    fn missing_or_misshapen_parameters_fail() {
        let model = init_parameters("main", &[2, 2], Init::Xavier, Activation::Tanh, 0);
        let meta = Metadata {
            seed: 0,
            topology: "single".into(),
            step: 0,
        };
        let ck = Checkpoint::capture(&model, meta, serde_json::Value::Null);
        let mut other = init_parameters("main", &[2, 3], Init::Xavier, Activation::Tanh, 0);
        assert!(matches!(
            ck.restore_into(&mut other),
            Err(Error::Checkpoint(_))
        ));
        let mut renamed = init_parameters("aux", &[2, 2], Init::Xavier, Activation::Tanh, 0);
        assert!(matches!(
            ck.restore_into(&mut renamed),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn rejects_wrong_version() {
        let text = r#"{"format":"redact-checkpoint","version":9,"metadata":{"seed":0,"topology":"x","step":0},"architecture":null,"params":{}}"#;
        assert!(matches!(
            Checkpoint::from_json(text),
            Err(Error::Checkpoint(_))
        ));
    }
}

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditional::Conditional;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const COLORS: [&str; 5] = ["red", "blue", "yellow", "black", "white"];
pub const PARTS: [&str; 3] = ["wing", "belly", "beak"];

const COLOR_AXIS: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];
const PART_AXIS: [f64; 3] = [-1.0, 0.0, 1.0];
const COLOR_AXIS2: [f64; 5] = [0.5, -0.5, 1.0, -1.0, 0.0];
const PART_AXIS2: [f64; 3] = [0.5, -0.5, 0.0];

pub const DEFAULT_SIGMA: f64 = 0.1;

fn default_sigma() -> f64 {
    DEFAULT_SIGMA
}

fn default_dim() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TaskSpec {
    /// Labels on the vertices of the unit regular k-gon.
    Kgon {
        k: usize,
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
    /// Two-token captions `[color, part]`.
    TokenAttr {
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
}

/// Synthetic conditional data: `p(x | c) = N(mu(c), sigma^2 I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    spec: TaskSpec,
}

impl SyntheticTask {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        match &spec {
            TaskSpec::Kgon { k, sigma } => {
                if *k < 2 {
                    return Err(Error::config("task.k", "need at least two labels"));
                }
                check_sigma(*sigma)?;
            }
            TaskSpec::TokenAttr { dim, sigma } => {
                if *dim != 2 && *dim != 4 {
                    return Err(Error::config(
                        "task.dim",
                        format!("must be 2 or 4, got {dim}"),
                    ));
                }
                check_sigma(*sigma)?;
            }
        }
        Ok(Self { spec })
    }

    pub fn kgon(k: usize) -> Result<Self> {
        Self::new(TaskSpec::Kgon {
            k,
            sigma: DEFAULT_SIGMA,
        })
    }

    pub fn token_attr(dim: usize) -> Result<Self> {
        Self::new(TaskSpec::TokenAttr {
            dim,
            sigma: DEFAULT_SIGMA,
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn sigma(&self) -> f64 {
        match self.spec {
            TaskSpec::Kgon { sigma, .. } | TaskSpec::TokenAttr { sigma, .. } => sigma,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.spec {
            TaskSpec::Kgon { .. } => 2,
            TaskSpec::TokenAttr { dim, .. } => dim,
        }
    }

    pub fn vocab(&self) -> Vec<String> {
        match self.spec {
            TaskSpec::Kgon { k, .. } => (0..k).map(|i| i.to_string()).collect(),
            TaskSpec::TokenAttr { .. } => COLORS
                .iter()
                .chain(PARTS.iter())
                .map(|s| s.to_string())
                .collect(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self.spec {
            TaskSpec::Kgon { k, .. } => k,
            TaskSpec::TokenAttr { .. } => COLORS.len() + PARTS.len(),
        }
    }

    /// Tokens per conditional.
    pub fn seq_len(&self) -> usize {
        match self.spec {
            TaskSpec::Kgon { .. } => 1,
            TaskSpec::TokenAttr { .. } => 2,
        }
    }

    pub fn token_id(&self, name: &str) -> Result<usize> {
        self.vocab()
            .iter()
            .position(|t| t == name)
            .ok_or_else(|| Error::InvalidConditional(format!("unknown token {name:?}")))
    }

    pub fn parse(&self, text: &str) -> Result<Conditional> {
        let tokens = text
            .split_whitespace()
            .map(|t| self.token_id(t))
            .collect::<Result<Vec<_>>>()?;
        let c = Conditional(tokens);
        self.validate(&c)?;
        Ok(c)
    }

    pub fn describe(&self, c: &Conditional) -> String {
        let vocab = self.vocab();
        c.tokens()
            .iter()
            .map(|&t| vocab.get(t).cloned().unwrap_or_else(|| format!("<{t}>")))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Every valid conditional, in a fixed order.
    pub fn conditionals(&self) -> Vec<Conditional> {
        match self.spec {
            TaskSpec::Kgon { k, .. } => (0..k).map(Conditional::label).collect(),
            TaskSpec::TokenAttr { .. } => (0..COLORS.len())
                .flat_map(|c| (0..PARTS.len()).map(move |p| Conditional(vec![c, COLORS.len() + p])))
                .collect(),
        }
    }

    pub fn validate(&self, c: &Conditional) -> Result<()> {
        let ok = match self.spec {
            TaskSpec::Kgon { k, .. } => c.len() == 1 && c.tokens()[0] < k,
            TaskSpec::TokenAttr { .. } => {
                c.len() == 2
                    && c.tokens()[0] < COLORS.len()
                    && (COLORS.len()..COLORS.len() + PARTS.len()).contains(&c.tokens()[1])
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConditional(format!(
                "{c} is not a conditional of this task"
            )))
        }
    }

    pub fn mean(&self, c: &Conditional) -> Result<Vec<f64>> {
        self.validate(c)?;
        Ok(match self.spec {
            TaskSpec::Kgon { k, .. } => {
                let angle = std::f64::consts::TAU * c.tokens()[0] as f64 / k as f64;
                vec![angle.cos(), angle.sin()]
            }
            TaskSpec::TokenAttr { dim, .. } => {
                let color = c.tokens()[0];
                let part = c.tokens()[1] - COLORS.len();
                let mut m = vec![COLOR_AXIS[color], PART_AXIS[part]];
                if dim == 4 {
                    m.extend([COLOR_AXIS2[color], PART_AXIS2[part]]);
                }
                m
            }
        })
    }

    /// `n` draws from `p(x | c)` as an `[n, dim]` tensor.
    pub fn sample(&self, c: &Conditional, n: usize, rng: &mut impl Rng) -> Result<Tensor> {
        let mu = self.mean(c)?;
        let sigma = self.sigma();
        let mut data = Vec::with_capacity(n * mu.len());
        for _ in 0..n {
            for m in &mu {
                data.push(m + sigma * rng.sample::<f64, _>(StandardNormal));
            }
        }
        Tensor::new(vec![n, mu.len()], data)
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::config(
            "task.sigma",
            format!("must be positive, got {sigma}"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;

    #[test]
    fn kgon_vertex_zero() {
        let t = SyntheticTask::kgon(4).unwrap();
        let m = t.mean(&Conditional::label(0)).unwrap();
        assert_eq!(m, vec![1.0, 0.0]);
        let tiny = SyntheticTask::new(TaskSpec::Kgon {
            k: 4,
            sigma: 1e-300,
        })
        .unwrap();
        let s = tiny
            .sample(&Conditional::label(0), 50, &mut rng(0))
            .unwrap();
        for row in 0..50 {
            assert_eq!(s.get(row, 0), 1.0);
            assert!(s.get(row, 1).abs() < 1e-250);
        }
    }

    #[test]
    fn sample_mean_within_clt_bound() {
        let t = SyntheticTask::token_attr(4).unwrap();
        let c = t.parse("yellow belly").unwrap();
        let n = 10_000;
        let s = t.sample(&c, n, &mut rng(1)).unwrap();
        let mu = t.mean(&c).unwrap();
        for (d, m) in mu.iter().enumerate() {
            let mean: f64 = (0..n).map(|i| s.get(i, d)).sum::<f64>() / n as f64;
            assert!((mean - m).abs() < 4.0 * 0.1 / (n as f64).sqrt());
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let t = SyntheticTask::kgon(3).unwrap();
        let a = t.sample(&Conditional::label(2), 20, &mut rng(5)).unwrap();
        let b = t.sample(&Conditional::label(2), 20, &mut rng(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn one_attribute_changes_one_coordinate() {
        let t = SyntheticTask::token_attr(2).unwrap();
        let a = t.mean(&t.parse("blue wing").unwrap()).unwrap();
        let b = t.mean(&t.parse("red wing").unwrap()).unwrap();
        assert_ne!(a[0], b[0]);
        assert_eq!(a[1], b[1]);
    }

    #[test]
    fn means_are_injective() {
        for t in [
            SyntheticTask::token_attr(2).unwrap(),
            SyntheticTask::token_attr(4).unwrap(),
            SyntheticTask::kgon(10).unwrap(),
        ] {
            let all = t.conditionals();
            for i in 0..all.len() {
                for j in i + 1..all.len() {
                    assert_ne!(t.mean(&all[i]).unwrap(), t.mean(&all[j]).unwrap());
                }
            }
        }
        assert_eq!(
            SyntheticTask::token_attr(2).unwrap().conditionals().len(),
            15
        );
    }

    #[test]
    fn invalid_conditionals_are_rejected() {
        let t = SyntheticTask::token_attr(2).unwrap();
        assert!(t.mean(&Conditional(vec![5, 1])).is_err());
        assert!(t.parse("green wing").is_err());
        assert!(SyntheticTask::kgon(4)
            .unwrap()
            .mean(&Conditional::label(4))
            .is_err());
        assert!(SyntheticTask::new(TaskSpec::Kgon { k: 4, sigma: 0.0 }).is_err());
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let spec = TaskSpec::TokenAttr { dim: 4, sigma: 0.1 };
        let text = toml::to_string(&spec).unwrap();
        assert!(text.contains("token-attr"));
        let back: TaskSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }
}

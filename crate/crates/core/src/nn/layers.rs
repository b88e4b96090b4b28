use rand::Rng;
use serde::{Deserialize, Serialize};

use super::param::{Ctx, Param, Parameterized};
use crate::error::Result;
use crate::rng::{normal_tensor, rng, uniform_tensor};
use crate::tensor::{NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    /// Glorot uniform weights, zero bias.
    Xavier,
    /// Normal weights with the given standard deviation, zero bias.
    Normal(f64),
    Zeros,
}

/// `activation(x W^T + b)` over a row-major batch `x: [batch, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: Param,
    pub bias: Param,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(
        name: &str,
        input: usize,
        output: usize,
        activation: Activation,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = match init {
            Init::Xavier => {
                let bound = (6.0 / (input + output) as f64).sqrt();
                uniform_tensor(rng, &[output, input], bound)
            }
            Init::Normal(std) => normal_tensor(rng, &[output, input], std),
            Init::Zeros => Tensor::zeros(&[output, input]),
        };
        Self {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[1, output])),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> Result<NodeId> {
        let batch = ctx.value(x).rows();
        let w = ctx.param(&self.weight);
        let b = ctx.param(&self.bias);
        let wt = ctx.graph.transpose(w)?;
        let xw = ctx.graph.matmul(x, wt)?;
        let ones = ctx.input(Tensor::ones(&[batch, 1]));
        let bias = ctx.graph.matmul(ones, b)?;
        let pre = ctx.graph.add(xw, bias)?;
        match self.activation {
            Activation::Tanh => ctx.graph.tanh(pre),
            Activation::Relu => ctx.graph.relu(pre),
            Activation::Sigmoid => ctx.graph.sigmoid(pre),
            Activation::Linear => Ok(pre),
        }
    }

    /// Renames parameters under a new prefix.
    pub fn renamed(mut self, name: &str) -> Self {
        self.weight.name = format!("{name}.weight");
        self.bias.name = format!("{name}.bias");
        self
    }
}

impl Parameterized for DenseLayer {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Stack of dense layers: hidden layers use `hidden`, the last one `last`.
pub fn build_stack(
    name: &str,
    sizes: &[usize],
    hidden: Activation,
    last: Activation,
    init: Init,
    rng: &mut impl Rng,
) -> Vec<DenseLayer> {
    let n = sizes.len().saturating_sub(1);
    (0..n)
        .map(|i| {
            let act = if i + 1 == n { last } else { hidden };
            DenseLayer::new(
                &format!("{name}.{i}"),
                sizes[i],
                sizes[i + 1],
                act,
                init,
                rng,
            )
        })
        .collect()
}

/// Deterministic per-seed parameter initialization for a layer stack.
pub fn init_parameters(
    name: &str,
    sizes: &[usize],
    init: Init,
    activation: Activation,
    seed: u64,
) -> Vec<DenseLayer> {
    let mut r = rng(seed);
    build_stack(name, sizes, activation, Activation::Linear, init, &mut r)
}

pub fn stack_forward(layers: &[DenseLayer], ctx: &mut Ctx, x: NodeId) -> Result<NodeId> {
    layers.iter().try_fold(x, |h, layer| layer.forward(ctx, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::module_gradient_check;

    #[test]
    fn same_seed_same_parameters() {
        let a = init_parameters("m", &[3, 5, 2], Init::Xavier, Activation::Tanh, 4);
        let b = init_parameters("m", &[3, 5, 2], Init::Xavier, Activation::Tanh, 4);
        assert_eq!(a, b);
        let c = init_parameters("m", &[3, 5, 2], Init::Xavier, Activation::Tanh, 5);
        assert_ne!(a.param_values(), c.param_values());
    }

    #[test]
    fn dense_forward_matches_manual() {
        let mut r = rng(1);
        let mut layer = DenseLayer::new("d", 3, 2, Activation::Tanh, Init::Xavier, &mut r);
        layer.bias.value = Tensor::row_vector(vec![0.1, -0.2]);
        let x = Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![0.0, 0.3, -0.7]]).unwrap();
        let mut ctx = Ctx::inference();
        let xi = ctx.input(x.clone());
        let y = layer.forward(&mut ctx, xi).unwrap();
        let out = ctx.value(y);
        for b in 0..2 {
            for o in 0..2 {
                let mut s = layer.bias.value.get(0, o);
                for i in 0..3 {
                    s += layer.weight.value.get(o, i) * x.get(b, i);
                }
                assert!((out.get(b, o) - s.tanh()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn each_activation_passes_gradient_check() {
        for (seed, act) in [Activation::Tanh, Activation::Sigmoid, Activation::Linear]
            .into_iter()
            .enumerate()
        {
            let mut r = rng(seed as u64);
            let layer = DenseLayer::new("d", 4, 3, act, Init::Xavier, &mut r);
            let x = normal_tensor(&mut r, &[2, 4], 1.0);
            let err = module_gradient_check(
                |ctx, xi| {
                    let y = layer.forward(ctx, xi)?;
                    ctx.graph.sum(y)
                },
                &x,
                1e-6,
            )
            .unwrap();
            assert!(err <= 1e-5, "{act:?}: {err}");
        }
    }
}

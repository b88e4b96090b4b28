//! Network building blocks on top of the tape.

mod checkpoint;
mod conditioner;
mod gated;
mod layers;
mod optim;
mod param;

pub use checkpoint::{Checkpoint, Metadata, ParamRecord, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use conditioner::{
    AffineConditioner, BlockConditioner, BlockOutput, CapacityPrefix, CondBatch, Conditioner,
    ConditionerSpec, EmbeddingKind, GaussianHead, MlpConditioner, SeqConditioner, TextEncoder,
    WordConditioner,
};
pub use gated::{GatedRewriter, TRANS_LEAKY_SLOPE};
pub use layers::{build_stack, init_parameters, stack_forward, Activation, DenseLayer, Init};
pub use optim::{collect_grads, Adam, Optimizer, Sgd};
pub use param::{param_digest, Ctx, Param, Parameterized};

use crate::error::{Error, Result};
use crate::tensor::{gradient_check, NodeId, Tensor};

/// [`gradient_check`] for closures that run modules through a [`Ctx`].
pub fn module_gradient_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Ctx, NodeId) -> Result<NodeId>,
{
    gradient_check(
        |g, xi| {
            let mut ctx = Ctx::from_graph(std::mem::take(g));
            let out = f(&mut ctx, xi);
            *g = ctx.into_graph();
            out
        },
        x,
        eps,
    )
}

/// [`gradient_check`] with respect to parameter `name` of `model`; `f` runs
/// the forward pass and must read the parameter through [`Ctx::param`].
pub fn param_gradient_check<M, F>(model: &M, name: &str, f: F, eps: f64) -> Result<f64>
where
    M: Parameterized + ?Sized,
    F: Fn(&mut Ctx) -> Result<NodeId>,
{
    let value = model
        .param_values()
        .remove(name)
        .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name:?}")))?;
    gradient_check(
        |g, xi| {
            let mut ctx = Ctx::from_graph(std::mem::take(g));
            ctx.bind(name, xi);
            let out = f(&mut ctx);
            *g = ctx.into_graph();
            out
        },
        &value,
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, rng};

    #[test]
    fn parameter_gradient_check_sees_the_parameter() {
        let mut r = rng(0);
        let layer = DenseLayer::new("d", 3, 2, Activation::Tanh, Init::Xavier, &mut r);
        let x = normal_tensor(&mut r, &[4, 3], 1.0);
        let f = |ctx: &mut Ctx| {
            let xi = ctx.input(x.clone());
            let y = layer.forward(ctx, xi)?;
            let y2 = ctx.graph.hadamard(y, y)?;
            ctx.graph.sum(y2)
        };
        for name in ["d.weight", "d.bias"] {
            assert!(param_gradient_check(&layer, name, f, 1e-6).unwrap() <= 1e-6);
        }
        assert!(param_gradient_check(&layer, "nope", f, 1e-6).is_err());
        // A forward pass that ignores the parameter has zero gradient both ways.
        let g = |ctx: &mut Ctx| {
            let xi = ctx.input(x.clone());
            ctx.graph.sum(xi)
        };
        assert_eq!(
            param_gradient_check(&layer, "d.weight", g, 1e-6).unwrap(),
            0.0
        );
    }
}

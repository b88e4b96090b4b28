use std::collections::{BTreeMap, HashMap};

use super::param::{Ctx, Parameterized};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients of every trainable parameter bound in `ctx` after `backward`.
pub fn collect_grads(model: &(impl Parameterized + ?Sized), ctx: &Ctx) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    model.visit(&mut |p| {
        if p.frozen {
            return;
        }
        if let Some(id) = ctx.bound_node(&p.name) {
            if ctx.graph.node(id).requires_grad() {
                out.insert(p.name.clone(), ctx.graph.grad_or_zero(id));
            }
        }
    });
    out
}

pub trait Optimizer {
    /// Applies one update. Frozen parameters and parameters without an entry
    /// in `grads` are left untouched.
    fn apply(
        &mut self,
        model: &mut dyn Parameterized,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()>;

    fn step(&mut self, model: &mut dyn Parameterized, ctx: &Ctx) -> Result<()> {
        let grads = collect_grads(model, ctx);
        self.apply(model, &grads)
    }
}

fn check_finite(grads: &BTreeMap<String, Tensor>) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    Ok(())
}

/// Plain stochastic gradient descent with a fixed learning rate.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn apply(
        &mut self,
        model: &mut dyn Parameterized,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        check_finite(grads)?;
        let lr = self.lr;
        model.visit_mut(&mut |p| {
            if p.frozen {
                return;
            }
            if let Some(g) = grads.get(&p.name) {
                for (w, d) in p.value.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * d;
                }
            }
        });
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: HashMap::new(),
        }
    }
}

impl Optimizer for Adam {
    fn apply(
        &mut self,
        model: &mut dyn Parameterized,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        check_finite(grads)?;
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let moments = &mut self.moments;
        model.visit_mut(&mut |p| {
            if p.frozen {
                return;
            }
            let Some(g) = grads.get(&p.name) else { return };
            let n = g.numel();
            let (m, v) = moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (i, (w, d)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * d;
                v[i] = b2 * v[i] + (1.0 - b2) * d * d;
                *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        });
        Ok(())
    }
}

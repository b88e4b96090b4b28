use rand::Rng;

use super::layers::{Activation, DenseLayer, Init};
use super::param::{Ctx, Param, Parameterized};
use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tensor};

/// Negative slope of the leaky activation inside the transformation block.
pub const TRANS_LEAKY_SLOPE: f64 = 0.4;

/// Gated rewriting module replacing a block conditioner's output layer:
///
/// `y = conv(v) * gate(v) + conv(trans(v)) * (1 - gate(v))`
///
/// The gate starts at exactly 0.5 everywhere (zero weights and bias under a
/// sigmoid).
#[derive(Clone, Debug, PartialEq)]
pub struct GatedRewriter {
    pub conv: DenseLayer,
    pub gate: DenseLayer,
    pub trans_in: DenseLayer,
    pub trans_out: DenseLayer,
}

impl GatedRewriter {
    pub fn new(name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let conv = DenseLayer::new(
            &format!("{name}.conv"),
            input,
            output,
            Activation::Linear,
            Init::Xavier,
            rng,
        );
        Self::around(name, conv, rng)
    }

    /// Wraps an existing output layer, keeping its weights.
    pub fn around(name: &str, conv: DenseLayer, rng: &mut impl Rng) -> Self {
        let (input, output) = (conv.in_dim(), conv.out_dim());
        Self {
            conv: conv.renamed(&format!("{name}.conv")),
            gate: DenseLayer::new(
                &format!("{name}.gate"),
                input,
                output,
                Activation::Sigmoid,
                Init::Zeros,
                rng,
            ),
            trans_in: DenseLayer::new(
                &format!("{name}.trans.0"),
                input,
                input,
                Activation::Linear,
                Init::Xavier,
                rng,
            ),
            trans_out: DenseLayer::new(
                &format!("{name}.trans.1"),
                input,
                input,
                Activation::Linear,
                Init::Xavier,
                rng,
            ),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.conv.out_dim()
    }

    pub fn gate_forward(&self, ctx: &mut Ctx, v: NodeId) -> Result<NodeId> {
        self.gate.forward(ctx, v)
    }

    pub fn forward(&self, ctx: &mut Ctx, v: NodeId) -> Result<NodeId> {
        let width = ctx.value(v).cols();
        if width != self.conv.in_dim() {
            return Err(Error::Shape {
                op: "gated_forward",
                lhs: ctx.value(v).shape().to_vec(),
                rhs: self.conv.weight.value.shape().to_vec(),
            });
        }
        let direct = self.conv.forward(ctx, v)?;
        let gate = self.gate.forward(ctx, v)?;
        let t = self.trans_in.forward(ctx, v)?;
        let t = ctx.graph.leaky_relu(t, TRANS_LEAKY_SLOPE)?;
        let t = self.trans_out.forward(ctx, t)?;
        let rewritten = self.conv.forward(ctx, t)?;
        let shape = ctx.value(gate).shape().to_vec();
        let ones = ctx.input(Tensor::ones(&shape));
        let neg_gate = ctx.graph.scale(gate, -1.0)?;
        let inv_gate = ctx.graph.add(ones, neg_gate)?;
        let keep = ctx.graph.hadamard(direct, gate)?;
        let swap = ctx.graph.hadamard(rewritten, inv_gate)?;
        ctx.graph.add(keep, swap)
    }
}

impl Parameterized for GatedRewriter {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.conv.visit(f);
        self.gate.visit(f);
        self.trans_in.visit(f);
        self.trans_out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_mut(f);
        self.gate.visit_mut(f);
        self.trans_in.visit_mut(f);
        self.trans_out.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::module_gradient_check;
    use crate::rng::{normal_tensor, rng};

    fn eval(g: &GatedRewriter, v: &Tensor) -> Tensor {
        let mut ctx = Ctx::inference();
        let vi = ctx.input(v.clone());
        let y = g.forward(&mut ctx, vi).unwrap();
        ctx.value(y).clone()
    }

    fn dense(layer: &DenseLayer, x: &Tensor) -> Tensor {
        let mut ctx = Ctx::inference();
        let xi = ctx.input(x.clone());
        let y = layer.forward(&mut ctx, xi).unwrap();
        ctx.value(y).clone()
    }

    #[test]
    fn gate_is_one_half_at_init() {
        let mut r = rng(3);
        let g = GatedRewriter::new("g", 5, 4, &mut r);
        assert!(g.gate.weight.value.data().iter().all(|&w| w == 0.0));
        for _ in 0..10 {
            let v = normal_tensor(&mut r, &[3, 5], 3.0);
            let gate = dense(&g.gate, &v);
            assert!(gate.data().iter().all(|&x| x == 0.5));
        }
    }

    #[test]
    fn init_output_is_average_of_branches() {
        let mut r = rng(4);
        let g = GatedRewriter::new("g", 5, 4, &mut r);
        let v = normal_tensor(&mut r, &[3, 5], 1.0);
        let y = eval(&g, &v);
        let direct = dense(&g.conv, &v);
        let mut ctx = Ctx::inference();
        let vi = ctx.input(v.clone());
        let t = g.trans_in.forward(&mut ctx, vi).unwrap();
        let t = ctx.graph.leaky_relu(t, 0.4).unwrap();
        let t = g.trans_out.forward(&mut ctx, t).unwrap();
        let rewritten = dense(&g.conv, ctx.value(t));
        let expect = direct.zip_map(&rewritten, |a, b| 0.5 * a + 0.5 * b);
        assert!(y.max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn saturated_gate_passes_conv_through() {
        let mut r = rng(5);
        let mut g = GatedRewriter::new("g", 3, 2, &mut r);
        g.gate.bias.value = Tensor::row_vector(vec![1000.0, 1000.0]);
        let v = normal_tensor(&mut r, &[4, 3], 1.0);
        let y = eval(&g, &v);
        assert!(y.max_abs_diff(&dense(&g.conv, &v)) < 1e-12);
    }

    #[test]
    fn matches_direct_formula() {
        // Independent evaluation of the formula with explicit loops.
        let mut r = rng(6);
        let mut g = GatedRewriter::new("g", 4, 3, &mut r);
        g.gate.weight.value = normal_tensor(&mut r, &[3, 4], 0.7);
        g.gate.bias.value = normal_tensor(&mut r, &[1, 3], 0.3);
        let v = normal_tensor(&mut r, &[2, 4], 1.0);
        let lin = |l: &DenseLayer, x: &[f64]| -> Vec<f64> {
            (0..l.out_dim())
                .map(|o| {
                    l.bias.value.get(0, o)
                        + (0..l.in_dim())
                            .map(|i| l.weight.value.get(o, i) * x[i])
                            .sum::<f64>()
                })
                .collect()
        };
        let y = eval(&g, &v);
        for b in 0..2 {
            let x = v.row(b);
            let conv = lin(&g.conv, x);
            let gate: Vec<f64> = lin(&g.gate, x)
                .iter()
                .map(|s| 1.0 / (1.0 + (-s).exp()))
                .collect();
            let t: Vec<f64> = lin(&g.trans_in, x)
                .iter()
                .map(|&s| if s > 0.0 { s } else { 0.4 * s })
                .collect();
            let t = lin(&g.trans_out, &t);
            let conv_t = lin(&g.conv, &t);
            for o in 0..3 {
                let expect = conv[o] * gate[o] + conv_t[o] * (1.0 - gate[o]);
                assert!((y.get(b, o) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_wrong_width() {
        let mut r = rng(7);
        let g = GatedRewriter::new("g", 4, 3, &mut r);
        let mut ctx = Ctx::inference();
        let v = ctx.input(Tensor::zeros(&[2, 5]));
        assert!(matches!(g.forward(&mut ctx, v), Err(Error::Shape { .. })));
    }

    #[test]
    fn passes_gradient_check() {
        let mut r = rng(8);
        let mut g = GatedRewriter::new("g", 4, 3, &mut r);
        g.gate.weight.value = normal_tensor(&mut r, &[3, 4], 0.5);
        let v = normal_tensor(&mut r, &[2, 4], 1.0);
        let err = module_gradient_check(
            |ctx, vi| {
                let y = g.forward(ctx, vi)?;
                let y2 = ctx.graph.hadamard(y, y)?;
                ctx.graph.sum(y2)
            },
            &v,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "{err}");
    }
}

//! Reverse-mode differentiation over an append-only tape.
//!
//! Every node refers only to nodes created before it, so the tape is acyclic
//! by construction and reverse insertion order is a valid backward order.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Differentiable primitive operations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Subtract,
    Scale(f64),
    Hadamard,
    ConcatLast,
    Tanh,
    Relu,
    Sigmoid,
    Exp,
    Transpose,
    Mean,
    Sum,
    L2Norm,
    SquaredDistance,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Subtract => "subtract",
            Primitive::Scale(_) => "scale",
            Primitive::Hadamard => "hadamard",
            Primitive::ConcatLast => "concat",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Exp => "exp",
            Primitive::Transpose => "transpose",
            Primitive::Mean => "mean",
            Primitive::Sum => "sum",
            Primitive::L2Norm => "l2norm",
            Primitive::SquaredDistance => "squared_distance",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Primitive::MatMul
            | Primitive::Add
            | Primitive::Subtract
            | Primitive::Hadamard
            | Primitive::ConcatLast
            | Primitive::SquaredDistance => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Apply(Primitive, Vec<NodeId>),
}

/// One recorded value with the rule that produced it.
#[derive(Clone, Debug)]
pub struct TapeNode {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

impl TapeNode {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn inputs(&self) -> &[NodeId] {
        match &self.op {
            Op::Leaf => &[],
            Op::Apply(_, ids) => ids,
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(Error::Shape {
            op: "transpose",
            lhs: a.shape().to_vec(),
            rhs: vec![],
        });
    }
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

fn concat_last(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
        return Err(Error::Shape {
            op: "concat",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    let (ca, cb) = (a.cols(), b.cols());
    let outer = a.numel() / ca;
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for r in 0..outer {
        data.extend_from_slice(&a.data()[r * ca..(r + 1) * ca]);
        data.extend_from_slice(&b.data()[r * cb..(r + 1) * cb]);
    }
    let mut shape = sa.to_vec();
    *shape.last_mut().unwrap() = ca + cb;
    Tensor::new(shape, data)
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Forward value of a primitive; shared by the tape and by callers that
/// only need values.
pub fn forward(op: Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
    if inputs.len() != op.arity() {
        return Err(Error::InvalidArgument(format!(
            "{} takes {} inputs, got {}",
            op.name(),
            op.arity(),
            inputs.len()
        )));
    }
    let a = inputs[0];
    Ok(match op {
        Primitive::MatMul => matmul(a, inputs[1])?,
        Primitive::Add => {
            same_shape("add", a, inputs[1])?;
            a.zip_map(inputs[1], |x, y| x + y)
        }
        Primitive::Subtract => {
            same_shape("subtract", a, inputs[1])?;
            a.zip_map(inputs[1], |x, y| x - y)
        }
        Primitive::Scale(s) => a.map(|x| s * x),
        Primitive::Hadamard => {
            same_shape("hadamard", a, inputs[1])?;
            a.zip_map(inputs[1], |x, y| x * y)
        }
        Primitive::ConcatLast => concat_last(a, inputs[1])?,
        Primitive::Tanh => a.map(f64::tanh),
        Primitive::Relu => a.map(|x| if x > 0.0 { x } else { 0.0 }),
        Primitive::Sigmoid => a.map(sigmoid),
        Primitive::Exp => a.map(f64::exp),
        Primitive::Transpose => transpose(a)?,
        Primitive::Mean => Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64),
        Primitive::Sum => Tensor::scalar(a.data().iter().sum()),
        Primitive::L2Norm => Tensor::scalar(a.norm()),
        Primitive::SquaredDistance => {
            same_shape("squared_distance", a, inputs[1])?;
            Tensor::scalar(
                a.data()
                    .iter()
                    .zip(inputs[1].data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum(),
            )
        }
    })
}

/// Gradient contributions of one node to each of its inputs.
fn backward_rule(op: Primitive, ins: &[&Tensor], out: &Tensor, up: &Tensor) -> Vec<Tensor> {
    let a = ins[0];
    match op {
        Primitive::MatMul => {
            let b = ins[1];
            let bt = transpose(b).expect("rank checked in forward");
            let at = transpose(a).expect("rank checked in forward");
            vec![
                matmul(up, &bt).expect("shapes checked in forward"),
                matmul(&at, up).expect("shapes checked in forward"),
            ]
        }
        Primitive::Add => vec![up.clone(), up.clone()],
        Primitive::Subtract => vec![up.clone(), up.map(|g| -g)],
        Primitive::Scale(s) => vec![up.map(|g| s * g)],
        Primitive::Hadamard => vec![
            up.zip_map(ins[1], |g, y| g * y),
            up.zip_map(a, |g, x| g * x),
        ],
        Primitive::ConcatLast => {
            let (ca, cb) = (a.cols(), ins[1].cols());
            let outer = a.numel() / ca;
            let mut ga = Vec::with_capacity(a.numel());
            let mut gb = Vec::with_capacity(ins[1].numel());
            for r in 0..outer {
                let row = &up.data()[r * (ca + cb)..(r + 1) * (ca + cb)];
                ga.extend_from_slice(&row[..ca]);
                gb.extend_from_slice(&row[ca..]);
            }
            vec![
                Tensor::new(a.shape().to_vec(), ga).unwrap(),
                Tensor::new(ins[1].shape().to_vec(), gb).unwrap(),
            ]
        }
        Primitive::Tanh => vec![up.zip_map(out, |g, y| g * (1.0 - y * y))],
        // Subgradient 0 at the kink.
        Primitive::Relu => vec![up.zip_map(a, |g, x| if x > 0.0 { g } else { 0.0 })],
        Primitive::Sigmoid => vec![up.zip_map(out, |g, y| g * y * (1.0 - y))],
        Primitive::Exp => vec![up.zip_map(out, |g, y| g * y)],
        Primitive::Transpose => vec![transpose(up).expect("rank checked in forward")],
        Primitive::Mean => {
            let g = up.item() / a.numel() as f64;
            vec![Tensor::full(a.shape(), g)]
        }
        Primitive::Sum => vec![Tensor::full(a.shape(), up.item())],
        Primitive::L2Norm => {
            let n = out.item();
            let g = up.item();
            if n == 0.0 {
                vec![Tensor::zeros(a.shape())]
            } else {
                vec![a.map(|x| g * x / n)]
            }
        }
        Primitive::SquaredDistance => {
            let g = up.item();
            let da = a.zip_map(ins[1], |x, y| 2.0 * g * (x - y));
            let db = da.map(|v| -v);
            vec![da, db]
        }
    }
}

/// An append-only tape of tensor operations.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<TapeNode>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(TapeNode {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn node(&self, id: NodeId) -> &TapeNode {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Applies `op` to `inputs`, recording a node when any input requires a
    /// gradient.
    pub fn apply(&mut self, op: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = forward(op, &values)?;
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        self.nodes.push(TapeNode {
            op: Op::Apply(op, inputs.to_vec()),
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Subtract, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.apply(Primitive::Scale(s), &[a])
    }
    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Hadamard, &[a, b])
    }
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::ConcatLast, &[a, b])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Tanh, &[a])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Relu, &[a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sigmoid, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Transpose, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mean, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sum, &[a])
    }
    pub fn l2norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::L2Norm, &[a])
    }
    pub fn squared_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::SquaredDistance, &[a, b])
    }

    /// `relu(x) - slope * relu(-x)`.
    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        let pos = self.relu(a)?;
        let neg_in = self.scale(a, -1.0)?;
        let neg = self.relu(neg_in)?;
        let neg = self.scale(neg, -slope)?;
        self.add(pos, neg)
    }

    /// Elementwise absolute value as `relu(x) + relu(-x)`.
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.leaky_relu(a, -1.0)
    }

    /// Populates gradients for every node that requires one.
    ///
    /// Gradients accumulate additively when a node feeds several consumers.
    /// Calling `backward` again discards the previous gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(up) = self.grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Op::Apply(op, inputs) = &node.op {
                if !inputs.iter().any(|i| self.nodes[i.0].requires_grad) {
                    self.grads[idx] = Some(up);
                    continue;
                }
                let ins: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                let contribs = backward_rule(*op, &ins, &node.value, &up);
                for (input, g) in inputs.iter().zip(contribs) {
                    if !self.nodes[input.0].requires_grad {
                        continue;
                    }
                    match &mut self.grads[input.0] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            self.grads[idx] = Some(up);
        }
        Ok(())
    }

    /// Gradient of the last `backward` loss with respect to `id`, if any
    /// flowed there.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Like [`Graph::grad`], but detached or unreached nodes yield zeros.
    pub fn grad_or_zero(&self, id: NodeId) -> Tensor {
        self.grad(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(id).shape()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let a = t(&[
            vec![1.0, -2.0, 3.5],
            vec![0.25, 4.0, -1.0],
            vec![7.0, 0.0, 2.0],
        ]);
        let out = forward(Primitive::MatMul, &[&Tensor::identity(3), &a]).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn sigmoid_of_zero() {
        let out = forward(Primitive::Sigmoid, &[&Tensor::zeros(&[2, 3])]).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn squared_distance_to_self() {
        let a = t(&[vec![1.0, 2.0], vec![3.0, -4.0]]);
        let out = forward(Primitive::SquaredDistance, &[&a, &a]).unwrap();
        assert_eq!(out.item(), 0.0);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = forward(Primitive::MatMul, &[&a, &b]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
        let err = forward(Primitive::Add, &[&a, &Tensor::zeros(&[3, 2])]).unwrap_err();
        assert!(err.to_string().contains("add"));
    }

    #[test]
    fn linear_map_gradient() {
        // loss = sum(W x) with x fixed => each row of dW equals x^T.
        let mut g = Graph::new();
        let w = g.leaf(t(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 2.0]]), true);
        let x = g.constant(t(&[vec![0.3], vec![-1.2], vec![2.0]]));
        let y = g.matmul(w, x).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        let gw = g.grad(w).unwrap();
        for i in 0..2 {
            assert_eq!(gw.row(i), &[0.3, -1.2, 2.0]);
        }
    }

    #[test]
    fn squared_norm_gradient() {
        let mut g = Graph::new();
        let xv = t(&[vec![1.5, -2.0, 0.25]]);
        let x = g.leaf(xv.clone(), true);
        let z = g.constant(Tensor::zeros(&[1, 3]));
        let d = g.squared_distance(x, z).unwrap();
        g.backward(d).unwrap();
        assert_eq!(g.grad(x).unwrap(), &xv.map(|v| 2.0 * v));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[2, 2]), true);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn detached_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[1, 2]), true);
        let c = g.constant(Tensor::ones(&[1, 2]));
        let y = g.hadamard(x, c).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad_or_zero(c), Tensor::zeros(&[1, 2]));
    }

    #[test]
    fn reused_leaf_accumulates() {
        // f(x) = sum(x*x) + sum(tanh(x)); per-use grads computed separately.
        let xv = t(&[vec![0.3, -0.7], vec![1.1, 0.2]]);
        let mut g = Graph::new();
        let x = g.leaf(xv.clone(), true);
        let sq = g.hadamard(x, x).unwrap();
        let a = g.sum(sq).unwrap();
        let th = g.tanh(x).unwrap();
        let b = g.sum(th).unwrap();
        let loss = g.add(a, b).unwrap();
        g.backward(loss).unwrap();
        let both = g.grad(x).unwrap().clone();

        let mut g1 = Graph::new();
        let x1 = g1.leaf(xv.clone(), true);
        let sq = g1.hadamard(x1, x1).unwrap();
        let a = g1.sum(sq).unwrap();
        g1.backward(a).unwrap();
        let mut g2 = Graph::new();
        let x2 = g2.leaf(xv, true);
        let th = g2.tanh(x2).unwrap();
        let b = g2.sum(th).unwrap();
        g2.backward(b).unwrap();
        let mut expect = g1.grad(x1).unwrap().clone();
        expect.add_assign(g2.grad(x2).unwrap());
        assert!(both.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn concat_splits_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[vec![1.0], vec![2.0]]), true);
        let b = g.leaf(t(&[vec![3.0, 4.0], vec![5.0, 6.0]]), true);
        let c = g.concat(a, b).unwrap();
        assert_eq!(g.value(c).row(1), &[2.0, 5.0, 6.0]);
        let w = g.constant(t(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]));
        let p = g.hadamard(c, w).unwrap();
        let loss = g.sum(p).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1.0, 4.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[2.0, 3.0, 5.0, 6.0]);
    }
}

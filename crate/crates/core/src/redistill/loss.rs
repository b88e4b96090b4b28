use serde::{Deserialize, Serialize};

use super::spec::RedactionSpec;
use crate::conditional::Conditional;
use crate::error::{Error, Result};
use crate::nn::{Conditioner, Ctx, TextEncoder};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    L1,
    L2Squared,
}

/// `mean_rows ||a - b||` with the given metric.
pub fn mean_distance(g: &mut Graph, a: NodeId, b: NodeId, metric: Metric) -> Result<NodeId> {
    let rows = g.value(a).rows();
    if rows == 0 {
        return Err(Error::EmptyBatch("distillation batch"));
    }
    let d = g.sub(a, b)?;
    let e = match metric {
        Metric::L1 => g.abs(d)?,
        Metric::L2Squared => g.hadamard(d, d)?,
    };
    let s = g.sum(e)?;
    g.scale(s, 1.0 / rows as f64)
}

/// Imitation term plus `lambda` times the projection term. Either part may be
/// absent (an empty set); at least one must be present.
pub fn loss_terms(
    ctx: &mut Ctx,
    valid: Option<(NodeId, &Tensor)>,
    redacted: Option<(NodeId, &Tensor)>,
    lambda: f64,
    metric: Metric,
) -> Result<(NodeId, f64, f64)> {
    let mut parts = Vec::new();
    let mut values = (0.0, 0.0);
    if let Some((student, target)) = valid {
        let t = ctx.input(target.clone());
        let v = mean_distance(&mut ctx.graph, student, t, metric)?;
        values.0 = ctx.value(v).item();
        parts.push(v);
    }
    if let Some((student, target)) = redacted {
        let t = ctx.input(target.clone());
        let r = mean_distance(&mut ctx.graph, student, t, metric)?;
        values.1 = ctx.value(r).item();
        parts.push(ctx.graph.scale(r, lambda)?);
    }
    let total = match parts.as_slice() {
        [] => return Err(Error::EmptyBatch("distillation batches")),
        [one] => *one,
        [a, b] => ctx.graph.add(*a, *b)?,
        _ => unreachable!(),
    };
    Ok((total, values.0, values.1))
}

/// `mean ||H'(c) - H(c)||` over `valid` plus `lambda * mean ||H'(c) - H(c_hat)||`
/// over `redacted`, as a scalar tensor.
#[allow(clippy::too_many_arguments)]
pub fn distill_loss(
    student: &Conditioner,
    teacher: &Conditioner,
    encoder: &TextEncoder,
    valid: &[Conditional],
    redacted: &[Conditional],
    spec: &RedactionSpec,
    lambda: f64,
    metric: Metric,
) -> Result<Tensor> {
    if valid.is_empty() {
        return Err(Error::EmptyBatch("valid conditionals"));
    }
    if redacted.is_empty() {
        return Err(Error::EmptyBatch("redacted conditionals"));
    }
    let refs = redacted
        .iter()
        .map(|c| spec.reference(c))
        .collect::<Result<Vec<_>>>()?;
    let vb = encoder.encode(valid)?;
    let rb = encoder.encode(redacted)?;
    let hb = encoder.encode(&refs)?;
    let tv = teacher.represent(&vb, None)?;
    let tr = teacher.represent(&hb, None)?;
    let mut ctx = Ctx::inference();
    let sv = student.forward(&mut ctx, &vb, None)?;
    let sr = student.forward(&mut ctx, &rb, None)?;
    let (loss, _, _) = loss_terms(&mut ctx, Some((sv, &tv)), Some((sr, &tr)), lambda, metric)?;
    Ok(ctx.value(loss).clone())
}

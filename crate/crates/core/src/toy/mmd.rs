//! Biased squared maximum mean discrepancy with an RBF kernel.

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

fn check(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.rows() == 0 || y.rows() == 0 {
        return Err(Error::EmptyBatch("mmd sample set"));
    }
    if x.cols() != y.cols() {
        return Err(Error::Shape {
            op: "mmd2",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_bandwidth(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "kernel bandwidth must be positive, got {h}"
        )))
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kernel_mean(x: &Tensor, y: &Tensor, h: f64) -> f64 {
    let g = -1.0 / (2.0 * h * h);
    let mut s = 0.0;
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            s += (g * sq_dist(x.row(i), y.row(j))).exp();
        }
    }
    s / (x.rows() * y.rows()) as f64
}

/// V-statistic estimate of `MMD^2` with `k(x, y) = exp(-|x - y|^2 / 2h^2)`.
pub fn mmd2(x: &Tensor, y: &Tensor, bandwidth: f64) -> Result<f64> {
    check(x, y)?;
    check_bandwidth(bandwidth)?;
    // Canonical argument order.
    let (a, b) = if (x.rows(), x.data()).partial_cmp(&(y.rows(), y.data()))
        == Some(std::cmp::Ordering::Greater)
    {
        (y, x)
    } else {
        (x, y)
    };
    let v = kernel_mean(a, a, bandwidth) + kernel_mean(b, b, bandwidth)
        - 2.0 * kernel_mean(a, b, bandwidth);
    Ok(v.max(0.0))
}

/// Median of pairwise distances between distinct rows; 1 when degenerate.
pub fn median_bandwidth(x: &Tensor) -> f64 {
    let mut d = Vec::new();
    for i in 0..x.rows() {
        for j in i + 1..x.rows() {
            d.push(sq_dist(x.row(i), x.row(j)).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let m = if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    };
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// `[n, m]` matrix of squared distances between rows, on the tape.
pub fn pairwise_sq_dist(g: &mut Graph, x: NodeId, y: NodeId) -> Result<NodeId> {
    let (n, d) = (g.value(x).rows(), g.value(x).cols());
    let m = g.value(y).rows();
    if g.value(y).cols() != d {
        return Err(Error::Shape {
            op: "pairwise_sq_dist",
            lhs: g.value(x).shape().to_vec(),
            rhs: g.value(y).shape().to_vec(),
        });
    }
    let ones_d = g.constant(Tensor::ones(&[d, 1]));
    let xx = g.hadamard(x, x)?;
    let sx = g.matmul(xx, ones_d)?;
    let ones_m = g.constant(Tensor::ones(&[1, m]));
    let a = g.matmul(sx, ones_m)?;
    let yy = g.hadamard(y, y)?;
    let sy = g.matmul(yy, ones_d)?;
    let syt = g.transpose(sy)?;
    let ones_n = g.constant(Tensor::ones(&[n, 1]));
    let b = g.matmul(ones_n, syt)?;
    let yt = g.transpose(y)?;
    let xy = g.matmul(x, yt)?;
    let xy2 = g.scale(xy, -2.0)?;
    let ab = g.add(a, b)?;
    g.add(ab, xy2)
}

fn kernel_mean_node(g: &mut Graph, d2: NodeId, h: f64) -> Result<NodeId> {
    let e = g.scale(d2, -1.0 / (2.0 * h * h))?;
    let k = g.exp(e)?;
    g.mean(k)
}

/// Differentiable `MMD^2` summed over several bandwidths.
pub fn mmd2_node(g: &mut Graph, x: NodeId, y: NodeId, bandwidths: &[f64]) -> Result<NodeId> {
    if bandwidths.is_empty() {
        return Err(Error::InvalidArgument("no kernel bandwidths".into()));
    }
    for &h in bandwidths {
        check_bandwidth(h)?;
    }
    let dxx = pairwise_sq_dist(g, x, x)?;
    let dyy = pairwise_sq_dist(g, y, y)?;
    let dxy = pairwise_sq_dist(g, x, y)?;
    let mut total: Option<NodeId> = None;
    for &h in bandwidths {
        let kxx = kernel_mean_node(g, dxx, h)?;
        let kyy = kernel_mean_node(g, dyy, h)?;
        let kxy = kernel_mean_node(g, dxy, h)?;
        let kxy2 = g.scale(kxy, -2.0)?;
        let s = g.add(kxx, kyy)?;
        let term = g.add(s, kxy2)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("nonempty bandwidths"))
}

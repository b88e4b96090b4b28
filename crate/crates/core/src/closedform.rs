//! Exact redaction of discrete labels in affine conditioners `H(c_i) = M v_i`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Conditioner;
use crate::tensor::Tensor;
use crate::toy::ConditionalGenerator;

/// Relative singular-value threshold below which embedding vectors count as
/// linearly dependent.
pub const RANK_TOLERANCE: f64 = 1e-8;
/// `|u_j^T v_j|` below this multiple of `||v_j||` makes the system singular.
pub const SINGULAR_TOLERANCE: f64 = 1e-10;

/// Labels to redact and the reference label each one is rerouted to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PlanFile", into = "PlanFile")]
pub struct LabelRedactionPlan {
    labels: usize,
    refs: BTreeMap<usize, usize>,
}

/// On-disk form of a plan: `redact[i]` is sent to `reference[i]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlanFile {
    pub labels: usize,
    pub redact: Vec<usize>,
    pub reference: Vec<usize>,
}

impl TryFrom<PlanFile> for LabelRedactionPlan {
    type Error = Error;
    fn try_from(f: PlanFile) -> Result<Self> {
        if f.redact.len() != f.reference.len() {
            return Err(Error::InvalidPlan(format!(
                "{} redacted labels but {} references",
                f.redact.len(),
                f.reference.len()
            )));
        }
        let pairs: Vec<(usize, usize)> = f.redact.into_iter().zip(f.reference).collect();
        LabelRedactionPlan::new(f.labels, &pairs)
    }
}

impl From<LabelRedactionPlan> for PlanFile {
    fn from(p: LabelRedactionPlan) -> Self {
        PlanFile {
            labels: p.labels,
            redact: p.refs.keys().copied().collect(),
            reference: p.refs.values().copied().collect(),
        }
    }
}

impl LabelRedactionPlan {
    /// `pairs` lists `(j, ref(j))` with 0-based labels below `labels`.
    pub fn new(labels: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidPlan("redacted set is empty".into()));
        }
        let mut refs = BTreeMap::new();
        for &(j, r) in pairs {
            if j >= labels || r >= labels {
                return Err(Error::InvalidPlan(format!(
                    "label pair ({j}, {r}) outside 0..{labels}"
                )));
            }
            if refs.insert(j, r).is_some() {
                return Err(Error::InvalidPlan(format!("label {j} listed twice")));
            }
        }
        if refs.len() >= labels {
            return Err(Error::InvalidPlan(format!(
                "cannot redact {} of {labels} labels",
                refs.len()
            )));
        }
        for (&j, &r) in &refs {
            if refs.contains_key(&r) {
                return Err(Error::InvalidPlan(format!(
                    "reference {r} of label {j} is itself redacted"
                )));
            }
        }
        Ok(Self { labels, refs })
    }

    /// The map `c -> 9 - c` style plan sending each label in `redacted` to
    /// `labels - 1 - c`.
    pub fn mirrored(labels: usize, redacted: &[usize]) -> Result<Self> {
        let pairs: Vec<(usize, usize)> = redacted
            .iter()
            .map(|&j| (j, labels.saturating_sub(1).saturating_sub(j)))
            .collect();
        Self::new(labels, &pairs)
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    /// Redacted labels in ascending order.
    pub fn redacted(&self) -> Vec<usize> {
        self.refs.keys().copied().collect()
    }

    /// Non-redacted labels in ascending order.
    pub fn kept(&self) -> Vec<usize> {
        (0..self.labels)
            .filter(|i| !self.refs.contains_key(i))
            .collect()
    }

    pub fn is_redacted(&self, label: usize) -> bool {
        self.refs.contains_key(&label)
    }

    pub fn reference(&self, label: usize) -> Option<usize> {
        self.refs.get(&label).copied()
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.refs.iter().map(|(&j, &r)| (j, r)).collect()
    }

    /// One-hot selector over the kept labels picking `ref(j)`.
    pub fn eta(&self, j: usize) -> Result<Vec<f64>> {
        let r = self
            .reference(j)
            .ok_or_else(|| Error::InvalidPlan(format!("label {j} is not redacted")))?;
        let kept = self.kept();
        let pos = kept
            .iter()
            .position(|&i| i == r)
            .expect("reference is kept");
        let mut eta = vec![0.0; kept.len()];
        eta[pos] = 1.0;
        Ok(eta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedactionCertificate {
    pub preservation_error: f64,
    pub projection_error: f64,
}

impl RedactionCertificate {
    pub fn max_error(&self) -> f64 {
        self.preservation_error.max(self.projection_error)
    }
}

pub(crate) fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

pub(crate) fn from_matrix(m: &DMatrix<f64>) -> Tensor {
    let mut data = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            data.push(m[(i, j)]);
        }
    }
    Tensor::new(vec![m.nrows(), m.ncols()], data).expect("matrix extents")
}

fn check_rank(v: &DMatrix<f64>) -> Result<()> {
    let k = v.ncols();
    if v.nrows() < k {
        return Err(Error::RankDeficient(format!(
            "{k} vectors in dimension {}",
            v.nrows()
        )));
    }
    let svd = v.clone().svd(false, true);
    let s = &svd.singular_values;
    let smax = s.max();
    let (imin, smin) = s.argmin();
    if smax == 0.0 || smin / smax < RANK_TOLERANCE {
        let vt = svd.v_t.expect("requested right singular vectors");
        let coeffs = vt.row(imin);
        let mut involved: Vec<(usize, f64)> = coeffs.iter().copied().enumerate().collect();
        involved.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()));
        let names: Vec<String> = involved
            .iter()
            .take_while(|(_, c)| c.abs() > 1e-3)
            .map(|(i, c)| format!("{c:+.3}*v{i}"))
            .collect();
        return Err(Error::RankDeficient(format!(
            "singular value ratio {:.3e}; near dependence {} ~ 0",
            if smax == 0.0 { 0.0 } else { smin / smax },
            names.join(" ")
        )));
    }
    Ok(())
}

fn complement_of(v: &DMatrix<f64>, j: usize) -> DVector<f64> {
    let vj = v.column(j).into_owned();
    let others: Vec<usize> = (0..v.ncols()).filter(|&i| i != j).collect();
    let mut u = vj.clone();
    if !others.is_empty() {
        let rest = v.select_columns(&others);
        let q = rest.qr().q();
        // Projection applied twice (reorthogonalization).
        for _ in 0..2 {
            let coef = q.transpose() * &u;
            u -= &q * coef;
        }
    }
    let n = u.norm();
    u / n
}

/// Unit vector orthogonal to every `v_i` with `i != j`, with `u^T v_j > 0`.
///
/// `v` holds the embedding vectors as columns, shape `[embed_dim, k]`.
pub fn complement_basis(v: &Tensor, j: usize) -> Result<Vec<f64>> {
    let vm = to_matrix(v);
    if j >= vm.ncols() {
        return Err(Error::InvalidArgument(format!(
            "label {j} outside 0..{}",
            vm.ncols()
        )));
    }
    check_rank(&vm)?;
    Ok(complement_of(&vm, j).iter().copied().collect())
}

fn check_shapes(m: &Tensor, v: &Tensor, plan: &LabelRedactionPlan) -> Result<()> {
    if m.rank() != 2 || v.rank() != 2 || m.cols() != v.rows() {
        return Err(Error::Shape {
            op: "redact_labels",
            lhs: m.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    if v.cols() != plan.labels() {
        return Err(Error::InvalidPlan(format!(
            "plan covers {} labels but there are {} embedding vectors",
            plan.labels(),
            v.cols()
        )));
    }
    Ok(())
}

/// `M' = M + W U^T` with `W = M (V_{-J} Y_{-J} - V_J) (U^T V_J)^{-1}`.
pub fn redact_labels(m: &Tensor, v: &Tensor, plan: &LabelRedactionPlan) -> Result<Tensor> {
    check_shapes(m, v, plan)?;
    let mm = to_matrix(m);
    let vm = to_matrix(v);
    check_rank(&vm)?;
    let redacted = plan.redacted();
    let kept = plan.kept();
    let re = vm.nrows();

    let mut u = DMatrix::zeros(re, redacted.len());
    for (col, &j) in redacted.iter().enumerate() {
        u.set_column(col, &complement_of(&vm, j));
    }
    let vj = vm.select_columns(&redacted);
    let vk = vm.select_columns(&kept);
    let mut y = DMatrix::zeros(kept.len(), redacted.len());
    for (col, &j) in redacted.iter().enumerate() {
        y.set_column(col, &DVector::from_vec(plan.eta(j)?));
    }

    let utv = u.transpose() * &vj;
    for (col, &j) in redacted.iter().enumerate() {
        let d = utv[(col, col)];
        if d.abs() < SINGULAR_TOLERANCE * vm.column(j).norm() {
            return Err(Error::Singular(format!("u^T v_{j} = {d:e}")));
        }
    }
    let inv = utv
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("U^T V_J is not invertible".into()))?;
    let w = &mm * (&vk * &y - &vj) * inv;
    Ok(from_matrix(&(mm + w * u.transpose())))
}

/// Single-label update `M (I + (1/u^T v_j)(V_{-j} eta_{-j} - v_j) u^T)`.
pub fn redact_single_label(m: &Tensor, v: &Tensor, j: usize, reference: usize) -> Result<Tensor> {
    let plan = LabelRedactionPlan::new(v.cols(), &[(j, reference)])?;
    check_shapes(m, v, &plan)?;
    let mm = to_matrix(m);
    let vm = to_matrix(v);
    check_rank(&vm)?;
    let u = complement_of(&vm, j);
    let vj = vm.column(j).into_owned();
    let uv = u.dot(&vj);
    if uv.abs() < SINGULAR_TOLERANCE * vj.norm() {
        return Err(Error::Singular(format!("u^T v_{j} = {uv:e}")));
    }
    let vk = vm.select_columns(&plan.kept());
    let target = vk * DVector::from_vec(plan.eta(j)?);
    let re = vm.nrows();
    let update = DMatrix::identity(re, re) + (target - vj) * u.transpose() / uv;
    Ok(from_matrix(&(mm * update)))
}

/// One-hot case: each redacted column of `M` is replaced by its reference
/// column.
pub fn redact_onehot(m: &Tensor, plan: &LabelRedactionPlan) -> Result<Tensor> {
    if m.rank() != 2 || m.cols() != plan.labels() {
        return Err(Error::InvalidPlan(format!(
            "one-hot plan over {} labels for map of shape {:?}",
            plan.labels(),
            m.shape()
        )));
    }
    let mut out = m.clone();
    for (j, r) in plan.pairs() {
        for row in 0..m.rows() {
            out.set(row, j, m.get(row, r));
        }
    }
    Ok(out)
}

fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

/// Checks both redaction conditions on every embedding vector.
pub fn verify_redaction(
    m: &Tensor,
    m_new: &Tensor,
    v: &Tensor,
    plan: &LabelRedactionPlan,
) -> Result<RedactionCertificate> {
    check_shapes(m, v, plan)?;
    if m.shape() != m_new.shape() {
        return Err(Error::Shape {
            op: "verify_redaction",
            lhs: m.shape().to_vec(),
            rhs: m_new.shape().to_vec(),
        });
    }
    let mm = to_matrix(m);
    let mn = to_matrix(m_new);
    let vm = to_matrix(v);
    let mut preservation: f64 = 0.0;
    for i in plan.kept() {
        let vi = vm.column(i);
        preservation = preservation.max(rel(&(&mn * vi), &(&mm * vi)));
    }
    let vk = vm.select_columns(&plan.kept());
    let mut projection: f64 = 0.0;
    for j in plan.redacted() {
        let target = &mm * (&vk * DVector::from_vec(plan.eta(j)?));
        projection = projection.max(rel(&(&mn * vm.column(j)), &target));
    }
    Ok(RedactionCertificate {
        preservation_error: preservation,
        projection_error: projection,
    })
}

/// Applies [`redact_labels`] to the affine conditioner of a single-stage
/// generator. Only `cond0.map` changes.
pub fn redact_affine_generator(
    g: &ConditionalGenerator,
    plan: &LabelRedactionPlan,
) -> Result<(ConditionalGenerator, RedactionCertificate)> {
    let mut out = g.clone();
    let Some(Conditioner::Affine(a)) = out.conditioners.first_mut() else {
        return Err(Error::InvalidArgument(
            "closed-form redaction needs an affine label conditioner".into(),
        ));
    };
    let m_new = redact_labels(&a.map.value, &a.embedding.value, plan)?;
    let cert = verify_redaction(&a.map.value, &m_new, &a.embedding.value, plan)?;
    a.map.value = m_new;
    Ok((out, cert))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, rng};

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn one_hot_complement_is_unit_vector() {
        let v = Tensor::identity(4);
        for j in 0..4 {
            let u = complement_basis(&v, j).unwrap();
            for (i, x) in u.iter().enumerate() {
                assert!((x - if i == j { 1.0 } else { 0.0 }).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_vector_complement() {
        // v1 = (1, 0), v2 = (1, 1) as columns.
        let v = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let u = complement_basis(&v, 0).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert!(
            (u[0] - s).abs() < 1e-15 && (u[1] + s).abs() < 1e-15,
            "{u:?}"
        );
    }

    #[test]
    fn random_complement_satisfies_constraints() {
        let mut r = rng(21);
        let v = normal_tensor(&mut r, &[8, 5], 1.0);
        for j in 0..5 {
            let u = complement_basis(&v, j).unwrap();
            assert!((dot(&u, &u) - 1.0).abs() < 1e-14);
            for i in 0..5 {
                let vi = v.column(i);
                let p = dot(&u, &vi);
                if i == j {
                    assert!(p > 0.0);
                } else {
                    assert!(p.abs() <= 1e-10 * dot(&vi, &vi).sqrt());
                }
            }
        }
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let v = Tensor::from_rows(&[
            vec![1.0, 2.0, 0.0],
            vec![1.0, 2.0, 1.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let err = complement_basis(&v, 0).unwrap_err();
        let Error::RankDeficient(msg) = err else {
            panic!("{err}")
        };
        assert!(msg.contains("v0") && msg.contains("v1"), "{msg}");
    }

    #[test]
    fn one_hot_single_label_copies_reference_column() {
        let mut r = rng(3);
        let m = normal_tensor(&mut r, &[6, 4], 1.0);
        let plan = LabelRedactionPlan::new(4, &[(1, 3)]).unwrap();
        let out = redact_labels(&m, &Tensor::identity(4), &plan).unwrap();
        for row in 0..6 {
            assert!((out.get(row, 1) - m.get(row, 3)).abs() < 1e-14);
            for c in [0, 2, 3] {
                assert!((out.get(row, c) - m.get(row, c)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn duplicate_columns_need_no_correction() {
        let mut r = rng(4);
        let mut m = normal_tensor(&mut r, &[3, 3], 1.0);
        for row in 0..3 {
            let x = m.get(row, 2);
            m.set(row, 0, x);
        }
        let plan = LabelRedactionPlan::new(3, &[(0, 2)]).unwrap();
        let out = redact_labels(&m, &Tensor::identity(3), &plan).unwrap();
        assert!(out.max_abs_diff(&m) < 1e-15);
    }

    #[test]
    fn seeded_multi_label_instance() {
        // k = 5, r = 8, labels {1, 3} sent to {5, 2} in one-based terms.
        let mut r = rng(5);
        let v = normal_tensor(&mut r, &[8, 5], 1.0);
        let m = normal_tensor(&mut r, &[8, 8], 1.0);
        let plan = LabelRedactionPlan::new(5, &[(0, 4), (2, 1)]).unwrap();
        let out = redact_labels(&m, &v, &plan).unwrap();
        // Direct check over every label.
        for i in 0..5 {
            let target = match i {
                0 => 4,
                2 => 1,
                other => other,
            };
            let vi = v.column(i);
            let vt = v.column(target);
            for row in 0..8 {
                let got: f64 = (0..8).map(|c| out.get(row, c) * vi[c]).sum();
                let want: f64 = (0..8).map(|c| m.get(row, c) * vt[c]).sum();
                assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
            }
        }
        let cert = verify_redaction(&m, &out, &v, &plan).unwrap();
        assert!(cert.max_error() <= 1e-9, "{cert:?}");
    }

    #[test]
    fn single_label_formula_agrees() {
        let mut r = rng(6);
        let v = normal_tensor(&mut r, &[7, 4], 1.0);
        let m = normal_tensor(&mut r, &[5, 7], 1.0);
        let plan = LabelRedactionPlan::new(4, &[(2, 0)]).unwrap();
        let a = redact_labels(&m, &v, &plan).unwrap();
        let b = redact_single_label(&m, &v, 2, 0).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn onehot_block_formula() {
        let mut r = rng(7);
        let m = normal_tensor(&mut r, &[3, 4], 1.0);
        let plan = LabelRedactionPlan::new(4, &[(1, 3)]).unwrap();
        let out = redact_onehot(&m, &plan).unwrap();
        for row in 0..3 {
            assert_eq!(out.get(row, 1), m.get(row, 3));
            assert_eq!(out.get(row, 0), m.get(row, 0));
        }
    }

    #[test]
    fn mirrored_plan_over_ten_labels() {
        let mut r = rng(8);
        let m = normal_tensor(&mut r, &[10, 10], 1.0);
        let plan = LabelRedactionPlan::mirrored(10, &[0, 1, 2, 3]).unwrap();
        let out = redact_onehot(&m, &plan).unwrap();
        for (j, src) in [(0, 9), (1, 8), (2, 7), (3, 6)] {
            for row in 0..10 {
                assert_eq!(out.get(row, j), m.get(row, src));
            }
        }
    }

    #[test]
    fn all_but_one_with_common_reference() {
        let mut r = rng(9);
        let m = normal_tensor(&mut r, &[4, 5], 1.0);
        let pairs: Vec<(usize, usize)> = [0, 1, 3, 4].iter().map(|&j| (j, 2)).collect();
        let plan = LabelRedactionPlan::new(5, &pairs).unwrap();
        let out = redact_onehot(&m, &plan).unwrap();
        for j in 0..5 {
            for row in 0..4 {
                assert_eq!(out.get(row, j), m.get(row, 2));
            }
        }
    }

    #[test]
    fn identity_edit_has_zero_preservation_error() {
        let mut r = rng(10);
        let v = normal_tensor(&mut r, &[6, 4], 1.0);
        let m = normal_tensor(&mut r, &[3, 6], 1.0);
        let plan = LabelRedactionPlan::new(4, &[(3, 1)]).unwrap();
        let cert = verify_redaction(&m, &m, &v, &plan).unwrap();
        assert_eq!(cert.preservation_error, 0.0);
        assert!(cert.projection_error > 0.0);
    }

    #[test]
    fn perturbation_is_flagged() {
        let mut r = rng(11);
        let v = Tensor::identity(4);
        let m = normal_tensor(&mut r, &[3, 4], 1.0);
        let plan = LabelRedactionPlan::new(4, &[(0, 1)]).unwrap();
        let exact = redact_labels(&m, &v, &plan).unwrap();
        let noise = normal_tensor(&mut r, &[3, 4], 1e-3);
        let noisy = exact.zip_map(&noise, |a, b| a + b);
        let cert = verify_redaction(&m, &noisy, &v, &plan).unwrap();
        assert!(
            cert.preservation_error > 1e-5 && cert.preservation_error < 1e-2,
            "{cert:?}"
        );
    }

    #[test]
    fn invalid_plans() {
        assert!(LabelRedactionPlan::new(3, &[]).is_err());
        assert!(LabelRedactionPlan::new(3, &[(0, 3)]).is_err());
        assert!(LabelRedactionPlan::new(3, &[(0, 1), (1, 2)]).is_err());
        assert!(LabelRedactionPlan::new(2, &[(0, 1), (1, 0)]).is_err());
        assert!(LabelRedactionPlan::new(3, &[(0, 0)]).is_err());
    }

    #[test]
    fn eta_indexes_kept_labels_in_order() {
        let plan = LabelRedactionPlan::new(5, &[(1, 4), (2, 0)]).unwrap();
        assert_eq!(plan.kept(), vec![0, 3, 4]);
        assert_eq!(plan.eta(1).unwrap(), vec![0.0, 0.0, 1.0]);
        assert_eq!(plan.eta(2).unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn plan_file_round_trip() {
        let plan = LabelRedactionPlan::new(5, &[(1, 4), (2, 0)]).unwrap();
        let text = serde_json::to_string(&plan).unwrap();
        let back: LabelRedactionPlan = serde_json::from_str(&text).unwrap();
        assert_eq!(back, plan);
        let bad = r#"{"labels":3,"redact":[0],"reference":[0]}"#;
        assert!(serde_json::from_str::<LabelRedactionPlan>(bad).is_err());
    }
}

//! Reconstruction, edge and contrastive triplet losses, and the weighted
//! totals optimised by the training loops.
//!
//! Every function records onto the graph of its inputs and returns a scalar
//! [`Var`], so the result can be fed straight into `Graph::backward`.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub rec: f64,
    pub edge: f64,
    pub mesh_cc: f64,
    pub mesh_ss: f64,
    pub point: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rec: 1000.0,
            edge: 0.5,
            mesh_cc: 1.0,
            mesh_ss: 1.0,
            point: 1.0,
            margin: 1.0,
        }
    }
}

impl LossWeights {
    /// The baseline: reconstruction and edge terms only.
    pub fn baseline() -> Self {
        LossWeights {
            mesh_cc: 0.0,
            mesh_ss: 0.0,
            point: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.rec, self.edge, self.mesh_cc, self.mesh_ss, self.point, self.margin];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: Var<'_, T>, b: Var<'_, T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, &b.shape(), format!("{:?}", a.shape())));
    }
    Ok(())
}

fn zero<'g, T: Scalar>(like: Var<'g, T>) -> Var<'g, T> {
    like.graph().constant(Tensor::scalar(T::zero()))
}

/// `(1/3N) * ||pred - gt||_F^2`.
pub fn rec_loss<'g, T: Scalar>(pred: Var<'g, T>, gt: Var<'g, T>) -> Result<Var<'g, T>> {
    same_shape("rec_loss", pred, gt)?;
    let d = pred.sub(gt)?;
    d.mul(d)?.mean_all()
}

/// Mean over edges of `| |pred_j - pred_k| / |ref_j - ref_k| - 1 |`.
///
/// Without edges the loss is zero.
pub fn edge_loss<'g, T: Scalar>(
    pred: Var<'g, T>,
    reference: &Tensor<T>,
    edges: &[(usize, usize)],
) -> Result<Var<'g, T>> {
    if pred.shape() != reference.shape() {
        return Err(Error::shape(
            "edge_loss",
            reference.shape(),
            format!("{:?}", pred.shape()),
        ));
    }
    if edges.is_empty() {
        return Ok(zero(pred));
    }
    let n = reference.rows();
    if let Some(&(j, k)) = edges.iter().find(|&&(j, k)| j >= n || k >= n) {
        return Err(Error::IndexOutOfRange {
            index: j.max(k),
            len: n,
        });
    }
    let (js, ks): (Vec<usize>, Vec<usize>) = edges.iter().copied().unzip();
    let lengths = |x: Var<'g, T>| -> Result<Var<'g, T>> {
        let d = x.gather_rows(&js)?.sub(x.gather_rows(&ks)?)?;
        d.mul(d)?.sum_axis(1)?.sqrt()
    };
    // same ops as the prediction, so a perfect prediction cancels exactly
    let ref_len = lengths(pred.graph().constant(reference.clone()))?;
    let mut inv_len = Vec::with_capacity(edges.len());
    for (e, &l) in ref_len.value().data().iter().enumerate() {
        if !(l > T::zero()) {
            return Err(Error::ZeroLengthEdge(js[e], ks[e]));
        }
        inv_len.push(T::one() / l);
    }
    let inv = pred.graph().constant(Tensor::matrix(edges.len(), 1, inv_len)?);
    lengths(pred)?.sub(ref_len)?.abs()?.mul(inv)?.mean_all()
}

/// `lambda_rec * rec(pred; gt) + lambda_edge * edge(pred; id_input)`.
pub fn supervised_loss<'g, T: Scalar>(
    pred: Var<'g, T>,
    gt: Var<'g, T>,
    id_input: &Tensor<T>,
    edges: &[(usize, usize)],
    w: &LossWeights,
) -> Result<Var<'g, T>> {
    let rec = rec_loss(pred, gt)?;
    let edge = edge_loss(pred, id_input, edges)?;
    rec.mul_scalar(T::from_f64_lossy(w.rec))?
        .add(edge.mul_scalar(T::from_f64_lossy(w.edge))?)
}

/// Cross-consistency: reconstruct the pose input, edges from the identity
/// input.
pub fn cc_loss<'g, T: Scalar>(
    pred: Var<'g, T>,
    pose_input: Var<'g, T>,
    id_input: &Tensor<T>,
    edges: &[(usize, usize)],
    w: &LossWeights,
) -> Result<Var<'g, T>> {
    supervised_loss(pred, pose_input, id_input, edges, w)
}

/// Self-consistency: same form as [`cc_loss`], applied to the second-pass
/// output.
pub fn sc_loss<'g, T: Scalar>(
    pred: Var<'g, T>,
    pose_input: Var<'g, T>,
    id_input: &Tensor<T>,
    edges: &[(usize, usize)],
    w: &LossWeights,
) -> Result<Var<'g, T>> {
    supervised_loss(pred, pose_input, id_input, edges, w)
}

pub fn unsup_loss<'g, T: Scalar>(cc: Var<'g, T>, sc: Var<'g, T>) -> Result<Var<'g, T>> {
    cc.add(sc)
}

/// Per-row `|a_j - p_j| - |a_j - n_j|`, an `N x 1` column.
fn distance_gap<'g, T: Scalar>(op: &'static str, a: Var<'g, T>, p: Var<'g, T>, n: Var<'g, T>) -> Result<Var<'g, T>> {
    same_shape(op, a, p)?;
    same_shape(op, a, n)?;
    a.sub(p)?.l2_norm_rows()?.sub(a.sub(n)?.l2_norm_rows()?)
}

/// Hinge applied once to the mesh-averaged distance gap:
/// `(m + mean_j(|a_j - p_j| - |a_j - n_j|))+`.
pub fn mesh_triplet<'g, T: Scalar>(a: Var<'g, T>, p: Var<'g, T>, n: Var<'g, T>, margin: f64) -> Result<Var<'g, T>> {
    distance_gap("mesh_triplet", a, p, n)?
        .mean_all()?
        .add_scalar(T::from_f64_lossy(margin))?
        .relu_hinge()
}

/// Hinge applied at every point, then averaged:
/// `mean_j (m + |a_j - p_j| - |a_j - n_j|)+`.
pub fn point_triplet_with_negatives<'g, T: Scalar>(
    a: Var<'g, T>,
    p: Var<'g, T>,
    n: Var<'g, T>,
    margin: f64,
) -> Result<Var<'g, T>> {
    distance_gap("point_triplet", a, p, n)?
        .add_scalar(T::from_f64_lossy(margin))?
        .relu_hinge()?
        .mean_all()
}

/// Point triplet whose negative for row `j` is row `j + 1` of `u`, wrapping
/// around at the end.
pub fn point_triplet<'g, T: Scalar>(w: Var<'g, T>, u: Var<'g, T>, margin: f64) -> Result<Var<'g, T>> {
    let n = u.shape()[0];
    if n < 2 {
        return Err(Error::InvalidArgument(
            "point_triplet: need at least two points for a negative".into(),
        ));
    }
    let shifted: Vec<usize> = (0..n).map(|j| (j + 1) % n).collect();
    point_triplet_with_negatives(w, u, u.gather_rows(&shifted)?, margin)
}

/// Identity and pose channels of one latent feature.
#[derive(Clone, Copy, Debug)]
pub struct SplitFeature<'g, T: Scalar> {
    pub id: Var<'g, T>,
    pub pose: Var<'g, T>,
}

impl<'g, T: Scalar> SplitFeature<'g, T> {
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        Ok(SplitFeature {
            id: self.id.gather_rows(idx)?,
            pose: self.pose.gather_rows(idx)?,
        })
    }
}

/// Mesh contrastive loss for cross-consistency, with `x1`, `x2` the pose and
/// identity inputs and `w` the warped output, all row-aligned.
pub fn mesh_cc_loss<'g, T: Scalar>(
    x1: &SplitFeature<'g, T>,
    w: &SplitFeature<'g, T>,
    x2: &SplitFeature<'g, T>,
    margin: f64,
) -> Result<Var<'g, T>> {
    mesh_triplet(x1.pose, w.pose, x2.pose, margin)?.add(mesh_triplet(x1.id, x2.id, w.id, margin)?)
}

/// Row index of the single one in each row of a binary matrix.
pub fn one_hot_indices<T: Scalar>(b: &Tensor<T>) -> Result<Vec<usize>> {
    let (n, c) = b.dims2("one_hot_indices")?;
    (0..n)
        .map(|r| {
            let row = b.row(r);
            let ones: Vec<usize> = (0..c).filter(|&k| row[k] == T::one()).collect();
            let zeros = row.iter().filter(|&&v| v == T::zero()).count();
            if ones.len() == 1 && zeros == c - 1 {
                Ok(ones[0])
            } else {
                Err(Error::InvalidArgument(format!("row {r} of B is not one-hot")))
            }
        })
        .collect()
}

/// Mesh contrastive loss for the two-identity case. `w` and `u` live on the
/// identity mesh, `v` on the pose mesh; `b` (`N_u x N_v`, one-hot rows)
/// brings `v`'s features into `u`'s vertex order.
pub fn mesh_ss_loss<'g, T: Scalar>(
    w: &SplitFeature<'g, T>,
    v: &SplitFeature<'g, T>,
    u: &SplitFeature<'g, T>,
    b: &Tensor<T>,
    margin: f64,
) -> Result<Var<'g, T>> {
    let idx = one_hot_indices(b)?;
    if idx.len() != u.id.shape()[0] || b.cols() != v.id.shape()[0] {
        return Err(Error::shape(
            "mesh_ss_loss",
            b.shape(),
            format!("[{}, {}]", u.id.shape()[0], v.id.shape()[0]),
        ));
    }
    let bv = v.gather_rows(&idx)?;
    mesh_triplet(w.pose, bv.pose, u.pose, margin)?.add(mesh_triplet(w.id, u.id, bv.id, margin)?)
}

fn weighted<'g, T: Scalar>(acc: Var<'g, T>, term: Var<'g, T>, w: f64) -> Result<Var<'g, T>> {
    acc.add(term.mul_scalar(T::from_f64_lossy(w))?)
}

/// `L_s + lambda_ms * L_mesh_ss + lambda_p * L_point`.
pub fn labelled_total<'g, T: Scalar>(
    supervised: Var<'g, T>,
    mesh_ss: Var<'g, T>,
    point: Var<'g, T>,
    w: &LossWeights,
) -> Result<Var<'g, T>> {
    weighted(weighted(supervised, mesh_ss, w.mesh_ss)?, point, w.point)
}

/// `L_us + lambda_mc * L_mesh_cc + lambda_ms * L_mesh_ss + lambda_p * L_point`.
pub fn unlabelled_total<'g, T: Scalar>(
    unsup: Var<'g, T>,
    mesh_cc: Var<'g, T>,
    mesh_ss: Var<'g, T>,
    point: Var<'g, T>,
    w: &LossWeights,
) -> Result<Var<'g, T>> {
    let acc = weighted(unsup, mesh_cc, w.mesh_cc)?;
    let acc = weighted(acc, mesh_ss, w.mesh_ss)?;
    weighted(acc, point, w.point)
}

//! Evaluation metrics: pointwise mesh distance, Chamfer distance and earth
//! mover's distance, all computed in double precision.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type Point = [f64; 3];

/// Scale factors of the CSV report columns.
pub const PMD_UNIT: f64 = 1e4;
pub const CD_UNIT: f64 = 1e4;
pub const EMD_UNIT: f64 = 1e3;

pub const CSV_HEADER: &str = "pair_id,pmd,cd,emd,n_points,seconds";

/// Chamfer falls back to brute force below this many points.
const KD_THRESHOLD: usize = 256;

pub fn points_of<T: Scalar>(t: &Tensor<T>) -> Result<Vec<Point>> {
    let (n, c) = t.dims2("points")?;
    if c != 3 {
        return Err(Error::shape("points", t.shape(), "[N, 3]"));
    }
    Ok((0..n)
        .map(|i| {
            let r = t.row(i);
            [r[0].as_f64(), r[1].as_f64(), r[2].as_f64()]
        })
        .collect())
}

fn sq_dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Order-sensitive mean squared coordinate error, `(1/3N) * sum |p - g|^2`.
pub fn pmd(pred: &[Point], gt: &[Point]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("pmd", &[gt.len(), 3], format!("[{}, 3]", pred.len())));
    }
    if pred.is_empty() {
        return Err(Error::NoVertices);
    }
    let s: f64 = pred.iter().zip(gt).map(|(a, b)| sq_dist(a, b)).sum();
    Ok(s / (3 * pred.len()) as f64)
}

fn mean_nearest(from: &[Point], nearest: impl Fn(&Point) -> f64) -> f64 {
    from.iter().map(nearest).sum::<f64>() / from.len() as f64
}

fn brute_nearest(q: &Point, to: &[Point]) -> f64 {
    to.iter().map(|p| sq_dist(q, p)).fold(f64::INFINITY, f64::min)
}

/// Chamfer distance by exhaustive search.
pub fn chamfer_brute(p: &[Point], q: &[Point]) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::NoVertices);
    }
    Ok(mean_nearest(p, |x| brute_nearest(x, q)) + mean_nearest(q, |x| brute_nearest(x, p)))
}

/// Mean squared nearest-neighbour distance from `p` to `q` plus from `q` to
/// `p`. Uses a k-d tree for larger inputs; the result is identical to
/// [`chamfer_brute`].
pub fn chamfer(p: &[Point], q: &[Point]) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::NoVertices);
    }
    if p.len().max(q.len()) < KD_THRESHOLD {
        return chamfer_brute(p, q);
    }
    let tq = KdTree::new(q);
    let tp = KdTree::new(p);
    Ok(mean_nearest(p, |x| tq.nearest_sq(x)) + mean_nearest(q, |x| tp.nearest_sq(x)))
}

/// Static k-d tree over a borrowed point set.
pub struct KdTree<'a> {
    points: &'a [Point],
    // Implicit balanced tree: the median of idx[lo..hi] sits at the midpoint.
    idx: Vec<usize>,
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Point]) -> Self {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        build(points, &mut idx, 0);
        KdTree { points, idx }
    }

    /// Squared distance to the nearest stored point.
    pub fn nearest_sq(&self, q: &Point) -> f64 {
        let mut best = f64::INFINITY;
        self.search(q, 0, self.idx.len(), 0, &mut best);
        best
    }

    fn search(&self, q: &Point, lo: usize, hi: usize, depth: usize, best: &mut f64) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = &self.points[self.idx[mid]];
        let d = sq_dist(q, p);
        if d < *best {
            *best = d;
        }
        let axis = depth % 3;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, near.0, near.1, depth + 1, best);
        // A single squared term never exceeds the rounded full sum, so this
        // bound cannot skip the true nearest point.
        if diff * diff <= *best {
            self.search(q, far.0, far.1, depth + 1, best);
        }
    }
}

fn build(points: &[Point], idx: &mut [usize], depth: usize) {
    if idx.len() <= 1 {
        return;
    }
    let axis = depth % 3;
    let mid = idx.len() / 2;
    idx.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
    let (left, right) = idx.split_at_mut(mid);
    build(points, left, depth + 1);
    build(points, &mut right[1..], depth + 1);
}

/// Minimum-cost perfect matching on a dense square cost matrix
/// (shortest augmenting paths with potentials, `O(n^3)`). Returns the column
/// assigned to each row.
pub fn solve_assignment(cost: &[f64], n: usize) -> Result<Vec<usize>> {
    if cost.len() != n * n {
        return Err(Error::shape("assignment", &[cost.len()], format!("{n}x{n} costs")));
    }
    if let Some(i) = cost.iter().position(|c| !c.is_finite()) {
        return Err(Error::NonFinite {
            op: "assignment",
            index: i,
        });
    }
    // 1-based arrays; column 0 is a virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[row_of[j] - 1] = j - 1;
    }
    Ok(assign)
}

fn check_same_size(p: &[Point], q: &[Point]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::shape("emd", &[q.len(), 3], format!("[{}, 3]", p.len())));
    }
    if p.is_empty() {
        return Err(Error::NoVertices);
    }
    Ok(())
}

fn matching_cost(p: &[Point], q: &[Point], assign: &[usize]) -> f64 {
    let s: f64 = p.iter().zip(assign).map(|(a, &j)| sq_dist(a, &q[j]).sqrt()).sum();
    s / p.len() as f64
}

/// Earth mover's distance: the mean Euclidean distance under the optimal
/// bijection between two equally sized point sets.
pub fn emd(p: &[Point], q: &[Point]) -> Result<f64> {
    check_same_size(p, q)?;
    let n = p.len();
    let mut cost = Vec::with_capacity(n * n);
    for a in p {
        cost.extend(q.iter().map(|b| sq_dist(a, b).sqrt()));
    }
    let assign = solve_assignment(&cost, n)?;
    Ok(matching_cost(p, q, &assign))
}

/// Earth mover's distance by trying every permutation (tiny inputs only).
pub fn emd_exhaustive(p: &[Point], q: &[Point]) -> Result<f64> {
    check_same_size(p, q)?;
    if p.len() > 9 {
        return Err(Error::InvalidArgument("emd_exhaustive: at most 9 points".into()));
    }
    let mut perm: Vec<usize> = (0..p.len()).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |a| best = best.min(matching_cost(p, q, a)));
    Ok(best)
}

fn permute(a: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == a.len() {
        visit(a);
        return;
    }
    for i in k..a.len() {
        a.swap(k, i);
        permute(a, k + 1, visit);
        a.swap(k, i);
    }
}

/// Metrics of one prediction against its ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub pmd: f64,
    pub cd: f64,
    pub emd: f64,
    pub n_points: usize,
    pub seconds: f64,
}

impl MetricReport {
    pub fn compute(pred: &[Point], gt: &[Point]) -> Result<Self> {
        let start = Instant::now();
        let pmd = pmd(pred, gt)?;
        let cd = chamfer(pred, gt)?;
        let emd = emd(pred, gt)?;
        Ok(MetricReport {
            pmd,
            cd,
            emd,
            n_points: pred.len(),
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// CSV row in report units (PMD and CD x 1e4, EMD x 1e3).
    pub fn csv_row(&self, pair_id: &str) -> String {
        format!(
            "{pair_id},{:.6},{:.6},{:.6},{},{:.6}",
            self.pmd * PMD_UNIT,
            self.cd * CD_UNIT,
            self.emd * EMD_UNIT,
            self.n_points,
            self.seconds
        )
    }

    /// Arithmetic mean of several reports; `n_points` is the rounded mean.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let k = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
        Some(MetricReport {
            pmd: avg(|r| r.pmd),
            cd: avg(|r| r.cd),
            emd: avg(|r| r.emd),
            n_points: (avg(|r| r.n_points as f64)).round() as usize,
            seconds: avg(|r| r.seconds),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pmd_hand_case() {
        assert_eq!(pmd(&[[1.0, 2.0, 2.0]], &[[0.0; 3]]).unwrap(), 3.0);
        assert!(pmd(&[[0.0; 3]], &[]).is_err());
    }

    #[test]
    fn chamfer_hand_case() {
        assert_eq!(chamfer(&[[0.0; 3]], &[[1.0, 0.0, 0.0]]).unwrap(), 2.0);
        assert!(chamfer(&[], &[[0.0; 3]]).is_err());
    }

    #[test]
    fn emd_hand_case() {
        let p = [[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let q = [[1.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        assert_eq!(emd(&p, &q).unwrap(), 1.0);
        assert_eq!(emd_exhaustive(&p, &q).unwrap(), 1.0);
        assert!(emd(&p, &q[..1]).is_err());
    }

    #[test]
    fn assignment_small_matrix() {
        let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
        let a = solve_assignment(&cost, 3).unwrap();
        let total: f64 = a.iter().enumerate().map(|(i, &j)| cost[i * 3 + j]).sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn kd_tree_on_a_grid() {
        let pts: Vec<Point> = (0..300)
            .map(|i| [(i % 7) as f64, (i / 7 % 6) as f64, (i / 42) as f64 * 0.5])
            .collect();
        let q: Vec<Point> = (0..300)
            .map(|i| [i as f64 * 0.02, 1.3, 2.1 - i as f64 * 0.01])
            .collect();
        assert_eq!(chamfer(&pts, &q).unwrap(), chamfer_brute(&pts, &q).unwrap());
    }

    #[test]
    fn report_units() {
        let r = MetricReport {
            pmd: 1e-4,
            cd: 2e-4,
            emd: 3e-3,
            n_points: 5,
            seconds: 0.0,
        };
        assert_eq!(r.csv_row("p"), "p,1.000000,2.000000,3.000000,5,0.000000");
    }
}

//! Central-difference verification of analytic gradients, plus a registry
//! that exercises every kernel kind and every loss.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autograd::{Graph, OpKind, Var};
use crate::error::{Error, Result};
use crate::losses::{self, LossWeights, SplitFeature};
use crate::network::{binarize_transport, GeneratorParams, ModelDims, OtConfig};
use crate::tensor::Tensor;

/// Scalar-valued function of several tensors, recorded on the given graph.
pub type Objective = Box<dyn for<'g> Fn(&[Var<'g, f64>]) -> Result<Var<'g, f64>>>;

#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub tol: f64,
    pub passed: bool,
    /// Coordinates left out because the step crossed a non-smooth point.
    pub skipped: usize,
}

fn evaluate(f: &Objective, xs: &[Tensor<f64>]) -> Result<f64> {
    let g = Graph::new();
    let vars: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
    let out = f(&vars)?;
    if !out.value().is_scalar() {
        return Err(Error::NotScalar(out.shape()));
    }
    Ok(out.item())
}

/// Compares the tape gradient of `f` at `xs` with central differences
/// `(f(x + h e_i) - f(x - h e_i)) / 2h`, coordinate by coordinate.
///
/// The relative error of a coordinate is `|a - n| / max(|a|, |n|, s)`, where
/// the floor `s` is `1e-4` times the largest numeric gradient entry, so
/// entries that are negligible on the scale of the whole gradient are
/// judged absolutely.
pub fn finite_difference_check_multi(f: &Objective, xs: &[Tensor<f64>], h: f64, tol: f64) -> Result<FdReport> {
    fd_check(f, xs, h, tol, Probe::default())
}

/// Single-input form of [`finite_difference_check_multi`].
pub fn finite_difference_check(
    f: impl for<'g> Fn(Var<'g, f64>) -> Result<Var<'g, f64>> + 'static,
    x: &Tensor<f64>,
    h: f64,
    tol: f64,
) -> Result<FdReport> {
    let obj: Objective = Box::new(move |v| f(v[0]));
    fd_check(&obj, std::slice::from_ref(x), h, tol, Probe::default())
}

/// A kink left inside the stencil biases the central difference by at most
/// a quarter of the one-sided slope mismatch, so this keeps such bias well
/// under the usual tolerance. Smooth coordinates only trip it when
/// `h |f''| / |f'|` exceeds it.
const KINK_RATIO: f64 = 2e-4;

#[derive(Clone, Copy, Debug)]
struct Probe {
    /// Factor applied to the analytic gradient; anything but 1 must fail.
    corrupt: f64,
    /// Skip coordinates whose one-sided slopes disagree by more than
    /// [`KINK_RATIO`], i.e. where the step probably straddles a kink.
    skip_kinks: bool,
}

impl Default for Probe {
    fn default() -> Self {
        Probe {
            corrupt: 1.0,
            skip_kinks: false,
        }
    }
}

fn fd_check(f: &Objective, xs: &[Tensor<f64>], h: f64, tol: f64, probe: Probe) -> Result<FdReport> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step {h} must be positive")));
    }
    let g = Graph::new();
    let vars: Vec<_> = xs.iter().map(|x| g.variable(x.clone())).collect();
    let loss = f(&vars)?;
    if !loss.item().is_finite() {
        return Err(Error::NonFiniteValue {
            what: "objective at the base point".into(),
        });
    }
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| grads.get_or_zeros(v).map(|a| a * probe.corrupt))
        .collect();

    let f0 = loss.item();
    let mut numeric = Vec::with_capacity(xs.len());
    let mut kinks = Vec::new();
    let mut coord = 0;
    for (k, x) in xs.iter().enumerate() {
        let mut num = Tensor::zeros(x.shape());
        for i in 0..x.numel() {
            let mut shifted = xs.to_vec();
            shifted[k].data_mut()[i] = x.data()[i] + h;
            let fp = evaluate(f, &shifted)?;
            shifted[k].data_mut()[i] = x.data()[i] - h;
            let fm = evaluate(f, &shifted)?;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite {
                    op: "finite_difference_check",
                    index: coord,
                });
            }
            num.data_mut()[i] = (fp - fm) / (2.0 * h);
            let (right, left) = (fp - f0, f0 - fm);
            if probe.skip_kinks && (right - left).abs() > KINK_RATIO * right.abs().max(left.abs()) {
                kinks.push((k, i, (right - left).abs() / (2.0 * h)));
            }
            coord += 1;
        }
        numeric.push(num);
    }

    let scale = numeric
        .iter()
        .flat_map(|t| t.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-4 * scale).max(1e-12);
    // A jump this small cannot push the coordinate over the tolerance.
    kinks.retain(|&(_, _, jump)| jump > tol * floor);
    let mut worst = None;
    let mut max_rel = 0.0f64;
    for (k, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (i, (&ai, &ni)) in a.data().iter().zip(n.data()).enumerate() {
            if kinks.iter().any(|&(kk, ii, _)| (kk, ii) == (k, i)) {
                continue;
            }
            let rel = (ai - ni).abs() / ai.abs().max(ni.abs()).max(floor);
            if rel > max_rel || worst.is_none() {
                max_rel = max_rel.max(rel);
                worst = Some((k, i));
            }
        }
    }
    Ok(FdReport {
        max_rel_error: max_rel,
        worst,
        tol,
        passed: max_rel <= tol,
        skipped: kinks.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Ops,
    Losses,
}

type Build = Box<dyn Fn(usize, &mut Xoshiro256PlusPlus) -> (Vec<Tensor<f64>>, Objective)>;
type UnaryOp = for<'g> fn(Var<'g, f64>) -> Result<Var<'g, f64>>;
type BinaryOp = for<'g> fn(Var<'g, f64>, Var<'g, f64>) -> Result<Var<'g, f64>>;
type Gen = fn(&[usize], &mut Xoshiro256PlusPlus) -> Tensor<f64>;

/// One registered gradient check.
pub struct GradItem {
    pub name: &'static str,
    pub group: Group,
    /// Finite-difference step. Deep composites need a smaller one because
    /// their curvature dominates the central-difference error.
    pub step: f64,
    /// Built from ReLU layers, so a step may straddle a kink.
    pub piecewise: bool,
    build: Build,
}

impl GradItem {
    fn new(
        name: &'static str,
        group: Group,
        build: impl Fn(usize, &mut Xoshiro256PlusPlus) -> (Vec<Tensor<f64>>, Objective) + 'static,
    ) -> Self {
        GradItem {
            name,
            group,
            step: DEFAULT_STEP,
            piecewise: false,
            build: Box::new(build),
        }
    }

    fn piecewise(mut self, step: f64) -> Self {
        self.step = step;
        self.piecewise = true;
        self
    }
}

/// Number of input shapes every item is checked on.
pub const SHAPES: usize = 3;

fn shape(variant: usize) -> (usize, usize) {
    [(3, 2), (5, 3), (8, 4)][variant % SHAPES]
}

fn any(shape: &[usize], rng: &mut Xoshiro256PlusPlus) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

fn positive(shape: &[usize], rng: &mut Xoshiro256PlusPlus) -> Tensor<f64> {
    Tensor::uniform(shape, 0.5, 1.5, rng)
}

/// Entries of magnitude in `[0.2, 1]` with random signs, away from kinks.
fn signed(shape: &[usize], rng: &mut Xoshiro256PlusPlus) -> Tensor<f64> {
    let mut t: Tensor<f64> = Tensor::uniform(shape, 0.2, 1.0, rng);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Reduces a tensor to a scalar through a fixed random weighting.
fn probe<'g>(v: Var<'g, f64>, r: &Tensor<f64>) -> Result<Var<'g, f64>> {
    if r.shape() != v.shape() {
        return Err(Error::shape("probe", r.shape(), format!("{:?}", v.shape())));
    }
    v.mul(v.graph().constant(r.clone()))?.mean_all()
}

/// Random probe weights matching an op's output shape, drawn after the
/// inputs so every shape variant gets fresh values.
fn probe_for(out_shape: &[usize], rng: &mut Xoshiro256PlusPlus) -> Tensor<f64> {
    any(out_shape, rng)
}

fn output_shape(f: &dyn Fn(&[Var<'_, f64>]) -> Result<Vec<usize>>, xs: &[Tensor<f64>]) -> Vec<usize> {
    let g = Graph::new();
    let vars: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
    f(&vars).expect("registry item builds")
}

fn unary(name: &'static str, gen: Gen, op: UnaryOp) -> GradItem {
    GradItem::new(name, Group::Ops, move |s, rng| {
        let (n, c) = shape(s);
        let xs = vec![gen(&[n, c], rng)];
        let out = output_shape(&|v| Ok(op(v[0])?.shape()), &xs);
        let r = probe_for(&out, rng);
        (xs, Box::new(move |v| probe(op(v[0])?, &r)))
    })
}

/// Two-input op; `second` gives the second operand's shape from `(n, c)`.
fn binary(name: &'static str, second: fn(usize, usize) -> Vec<usize>, gen: Gen, op: BinaryOp) -> GradItem {
    GradItem::new(name, Group::Ops, move |s, rng| {
        let (n, c) = shape(s);
        let xs = vec![gen(&[n, c], rng), gen(&second(n, c), rng)];
        let out = output_shape(&|v| Ok(op(v[0], v[1])?.shape()), &xs);
        let r = probe_for(&out, rng);
        (xs, Box::new(move |v| probe(op(v[0], v[1])?, &r)))
    })
}

fn op_items() -> Vec<GradItem> {
    vec![
        GradItem::new(OpKind::PointwiseLinear.name(), Group::Ops, |s, rng| {
            let (n, c) = shape(s);
            let xs = vec![any(&[n, c], rng), any(&[c, c + 1], rng), any(&[1, c + 1], rng)];
            let r = any(&[n, c + 1], rng);
            (xs, Box::new(move |v| probe(v[0].pointwise_linear(v[1], v[2])?, &r)))
        }),
        GradItem::new(OpKind::Conv1dK3.name(), Group::Ops, |s, rng| {
            let (n, c) = shape(s);
            let xs = vec![any(&[n, c], rng), any(&[3, c, 2], rng), any(&[1, 2], rng)];
            let r = any(&[n, 2], rng);
            (xs, Box::new(move |v| probe(v[0].conv1d_k3(v[1], v[2])?, &r)))
        }),
        unary(OpKind::Relu.name(), signed, |v| v.relu()),
        binary(OpKind::Add.name(), |n, c| vec![n, c], any, |a, b| a.add(b)),
        binary(OpKind::Sub.name(), |n, c| vec![n, c], any, |a, b| a.sub(b)),
        binary(OpKind::Mul.name(), |n, c| vec![n, c], any, |a, b| a.mul(b)),
        binary(OpKind::AddRow.name(), |_, c| vec![1, c], any, |a, b| a.add_row(b)),
        binary(OpKind::MulRow.name(), |_, c| vec![1, c], any, |a, b| a.mul_row(b)),
        unary(OpKind::MulScalar.name(), any, |v| v.mul_scalar(-1.7)),
        unary(OpKind::AddScalar.name(), any, |v| v.add_scalar(0.3)?.exp()),
        binary(OpKind::Matmul.name(), |_, c| vec![c, 3], any, |a, b| a.matmul(b)),
        unary(OpKind::InstanceNorm.name(), any, |v| v.instance_norm()),
        unary(OpKind::MeanAll.name(), any, |v| v.exp()?.mean_all()?.log()),
        GradItem::new(OpKind::SumAxis.name(), Group::Ops, |s, rng| {
            let (n, c) = shape(s);
            let x = any(&[n, c], rng);
            let (r0, r1) = (any(&[1, c], rng), any(&[n, 1], rng));
            let f: Objective = Box::new(move |v| {
                let cols = probe(v[0].exp()?.sum_axis(0)?, &r0)?;
                cols.add(probe(v[0].exp()?.sum_axis(1)?, &r1)?)
            });
            (vec![x], f)
        }),
        unary(OpKind::L2NormRows.name(), any, |v| v.l2_norm_rows()),
        unary(OpKind::ChannelSlice.name(), any, |v| v.channel_slice(1, v.shape()[1])),
        binary(
            OpKind::ConcatChannels.name(),
            |n, _| vec![n, 2],
            any,
            |a, b| a.concat_channels(b),
        ),
        unary(OpKind::Exp.name(), any, |v| v.exp()),
        unary(OpKind::Log.name(), positive, |v| v.log()),
        unary(OpKind::Abs.name(), signed, |v| v.abs()),
        unary(OpKind::Sqrt.name(), positive, |v| v.sqrt()),
        unary(OpKind::Sigmoid.name(), any, |v| v.sigmoid()),
        unary(OpKind::ReluHinge.name(), signed, |v| v.relu_hinge()),
        // The blocked input is pinned to its base value, so its central
        // difference is exactly the zero the tape must report.
        GradItem::new(OpKind::StopGradient.name(), Group::Ops, |s, rng| {
            let (n, c) = shape(s);
            let x = any(&[n, c], rng);
            let pinned = x.clone();
            let r = any(&[n, c], rng);
            let f: Objective = Box::new(move |v| {
                let g = v[0].graph();
                let frozen = v[0].mul_scalar(0.0)?.add(g.constant(pinned.clone()))?;
                probe(v[0].mul(frozen.stop_gradient()?)?, &r)
            });
            (vec![x], f)
        }),
        unary(OpKind::GatherRows.name(), any, |v| {
            let n = v.shape()[0];
            let idx: Vec<usize> = (0..n + 2).map(|i| (i * 2 + 1) % n).collect();
            v.gather_rows(&idx)
        }),
        binary(
            OpKind::CosineCost.name(),
            |n, c| vec![n + 1, c],
            signed,
            |a, b| a.cosine_cost(b),
        ),
        // The last shape adds one far outlier cost, which selects the
        // log-domain iteration while the remaining entries keep the plan soft.
        // A uniformly wide cost range would make the plan nearly binary and
        // the check dominated by round-off.
        GradItem::new(OpKind::Sinkhorn.name(), Group::Ops, |s, rng| {
            let (n, _) = shape(s);
            let log_domain = s + 1 == SHAPES;
            let (hi, eps) = if log_domain { (0.2, 0.02) } else { (1.0, 0.1) };
            let mut x = Tensor::uniform(&[n, n + 1], 0.0, hi, rng);
            if log_domain {
                let j = rng.gen_range(0..n + 1);
                x.data_mut()[j] = 20.0;
            }
            let r = any(&[n, n + 1], rng);
            (vec![x], Box::new(move |v| probe(v[0].sinkhorn(eps, 20)?, &r)))
        }),
        unary(OpKind::RowNormalize.name(), positive, |v| v.row_normalize()),
    ]
}

fn edges_ring(n: usize) -> Vec<(usize, usize)> {
    (0..n).map(|i| (i.min((i + 1) % n), i.max((i + 1) % n))).collect()
}

fn split<'g>(f: Var<'g, f64>, d_id: usize) -> Result<SplitFeature<'g, f64>> {
    let d = f.shape()[1];
    Ok(SplitFeature {
        id: f.channel_slice(0, d_id)?,
        pose: f.channel_slice(d_id, d)?,
    })
}

fn random_one_hot(rows: usize, cols: usize, rng: &mut Xoshiro256PlusPlus) -> Tensor<f64> {
    let mut b = Tensor::zeros(&[rows, cols]);
    for r in 0..rows {
        b.data_mut()[r * cols + rng.gen_range(0..cols)] = 1.0;
    }
    b
}

/// Weights with moderate magnitudes so no single term swamps the rest.
fn check_weights() -> LossWeights {
    LossWeights {
        rec: 10.0,
        edge: 0.5,
        mesh_cc: 1.0,
        mesh_ss: 1.0,
        point: 1.0,
        margin: 1.0,
    }
}

fn loss_items() -> Vec<GradItem> {
    let rows = |s: usize| shape(s).0 + 1;
    let width = |s: usize| shape(s).1 + 2;
    vec![
        GradItem::new("rec_loss", Group::Losses, move |s, rng| {
            let n = rows(s);
            let gt = any(&[n, 3], rng);
            let xs = vec![any(&[n, 3], rng)];
            (
                xs,
                Box::new(move |v| losses::rec_loss(v[0], v[0].graph().constant(gt.clone()))),
            )
        }),
        GradItem::new("edge_loss", Group::Losses, move |s, rng| {
            let n = rows(s);
            let reference = any(&[n, 3], rng);
            let xs = vec![any(&[n, 3], rng)];
            let edges = edges_ring(n);
            (xs, Box::new(move |v| losses::edge_loss(v[0], &reference, &edges)))
        }),
        GradItem::new("supervised_loss", Group::Losses, move |s, rng| {
            let n = rows(s);
            let (gt, id) = (any(&[n, 3], rng), any(&[n, 3], rng));
            let xs = vec![any(&[n, 3], rng)];
            let edges = edges_ring(n);
            let w = check_weights();
            (
                xs,
                Box::new(move |v| {
                    let gt = v[0].graph().constant(gt.clone());
                    losses::supervised_loss(v[0], gt, &id, &edges, &w)
                }),
            )
        }),
        GradItem::new("cc_loss", Group::Losses, move |s, rng| {
            let n = rows(s);
            let (x1, x2) = (any(&[n, 3], rng), any(&[n, 3], rng));
            let xs = vec![any(&[n, 3], rng)];
            let edges = edges_ring(n);
            let w = check_weights();
            (
                xs,
                Box::new(move |v| {
                    let x1 = v[0].graph().constant(x1.clone());
                    losses::cc_loss(v[0], x1, &x2, &edges, &w)
                }),
            )
        }),
        GradItem::new("sc_loss", Group::Losses, move |s, rng| {
            let n = rows(s);
            let (x1, x2) = (any(&[n, 3], rng), any(&[n, 3], rng));
            let xs = vec![any(&[n, 3], rng)];
            let edges = edges_ring(n);
            let w = check_weights();
            (
                xs,
                Box::new(move |v| {
                    let x1 = v[0].graph().constant(x1.clone());
                    losses::sc_loss(v[0], x1, &x2, &edges, &w)
                }),
            )
        }),
        GradItem::new("unsup_loss", Group::Losses, move |s, rng| {
            let n = rows(s);
            let (x1, x2) = (any(&[n, 3], rng), any(&[n, 3], rng));
            let xs = vec![any(&[n, 3], rng), any(&[n, 3], rng)];
            let edges = edges_ring(n);
            let w = check_weights();
            (
                xs,
                Box::new(move |v| {
                    let x1v = v[0].graph().constant(x1.clone());
                    let cc = losses::cc_loss(v[0], x1v, &x2, &edges, &w)?;
                    let sc = losses::sc_loss(v[1], x1v, &x2, &edges, &w)?;
                    losses::unsup_loss(cc, sc)
                }),
            )
        }),
        GradItem::new("mesh_triplet", Group::Losses, move |s, rng| {
            let (n, d) = (rows(s), width(s));
            let xs = vec![any(&[n, d], rng), any(&[n, d], rng), any(&[n, d], rng)];
            (xs, Box::new(|v| losses::mesh_triplet(v[0], v[1], v[2], 1.0)))
        }),
        GradItem::new("point_triplet", Group::Losses, move |s, rng| {
            let (n, d) = (rows(s), width(s));
            let xs = vec![any(&[n, d], rng), any(&[n, d], rng)];
            (xs, Box::new(|v| losses::point_triplet(v[0], v[1], 1.0)))
        }),
        GradItem::new("mesh_cc_loss", Group::Losses, move |s, rng| {
            let (n, d) = (rows(s), width(s));
            let xs = vec![any(&[n, d], rng), any(&[n, d], rng), any(&[n, d], rng)];
            (
                xs,
                Box::new(|v| {
                    let (x1, w, x2) = (split(v[0], 2)?, split(v[1], 2)?, split(v[2], 2)?);
                    losses::mesh_cc_loss(&x1, &w, &x2, 1.0)
                }),
            )
        }),
        GradItem::new("mesh_ss_loss", Group::Losses, move |s, rng| {
            let (n, d) = (rows(s), width(s));
            let xs = vec![any(&[n, d], rng), any(&[n + 2, d], rng), any(&[n, d], rng)];
            let b = random_one_hot(n, n + 2, rng);
            (
                xs,
                Box::new(move |v| {
                    let (w, pv, u) = (split(v[0], 2)?, split(v[1], 2)?, split(v[2], 2)?);
                    losses::mesh_ss_loss(&w, &pv, &u, &b, 1.0)
                }),
            )
        }),
        GradItem::new("labelled_total", Group::Losses, move |s, rng| {
            let (n, d) = (rows(s), width(s));
            let (gt, id) = (any(&[n, 3], rng), any(&[n, 3], rng));
            let b = random_one_hot(n, n + 1, rng);
            let edges = edges_ring(n);
            let w = check_weights();
            // prediction, F(w), F(v), F(u)
            let xs = vec![
                any(&[n, 3], rng),
                any(&[n, d], rng),
                any(&[n + 1, d], rng),
                any(&[n, d], rng),
            ];
            (
                xs,
                Box::new(move |v| {
                    let gt = v[0].graph().constant(gt.clone());
                    let sup = losses::supervised_loss(v[0], gt, &id, &edges, &w)?;
                    let (fw, fv, fu) = (split(v[1], 2)?, split(v[2], 2)?, split(v[3], 2)?);
                    let ss = losses::mesh_ss_loss(&fw, &fv, &fu, &b, w.margin)?;
                    let point = losses::point_triplet(v[1], v[3], w.margin)?;
                    losses::labelled_total(sup, ss, point, &w)
                }),
            )
        }),
        GradItem::new("unlabelled_total", Group::Losses, move |s, rng| {
            let (n, d) = (rows(s), width(s));
            let (x1, x2) = (any(&[n, 3], rng), any(&[n, 3], rng));
            let b = random_one_hot(n, n, rng);
            let edges = edges_ring(n);
            let w = check_weights();
            // two predictions, then F(x1), F(w), F(x2)
            let xs = vec![
                any(&[n, 3], rng),
                any(&[n, 3], rng),
                any(&[n, d], rng),
                any(&[n, d], rng),
                any(&[n, d], rng),
            ];
            (
                xs,
                Box::new(move |v| {
                    let x1v = v[0].graph().constant(x1.clone());
                    let cc = losses::cc_loss(v[0], x1v, &x2, &edges, &w)?;
                    let sc = losses::sc_loss(v[1], x1v, &x2, &edges, &w)?;
                    let us = losses::unsup_loss(cc, sc)?;
                    let (f1, fw, f2) = (split(v[2], 2)?, split(v[3], 2)?, split(v[4], 2)?);
                    let mcc = losses::mesh_cc_loss(&f1, &fw, &f2, w.margin)?;
                    let mss = losses::mesh_ss_loss(&fw, &f1, &f2, &b, w.margin)?;
                    let point = losses::point_triplet(v[3], v[4], w.margin)?;
                    losses::unlabelled_total(us, mcc, mss, point, &w)
                }),
            )
        }),
        GradItem::new("labelled_pipeline", Group::Losses, move |s, rng| {
            let n = rows(s) + 1;
            let dims = ModelDims {
                d1: 4,
                d2: 5,
                d3: 6,
                d_id: 4,
                d_pose: 2,
                d_corr: 5,
                r1: 6,
                r2: 5,
                r3: 4,
                disentangle: true,
            };
            let params = GeneratorParams::<f64>::init(dims, rng.gen()).expect("valid dims");
            let ot = OtConfig {
                eps: 0.1,
                iterations: 10,
            };
            let (gt, id) = (any(&[n, 3], rng), any(&[n, 3], rng));
            let pose = any(&[n + 1, 3], rng);
            // B is piecewise constant; pin it at the base point.
            let b = {
                let g = Graph::new();
                let net = params.bind(&g);
                let out = net
                    .generate(g.constant(pose.clone()), g.constant(id.clone()), &ot)
                    .expect("generator runs");
                binarize_transport(&out.plan.value()).0
            };
            let edges = edges_ring(n);
            let w = check_weights();
            (
                vec![pose, id.clone()],
                Box::new(move |v| {
                    let g = v[0].graph();
                    let net = params.bind(g);
                    let out = net.generate(v[0], v[1], &ot)?;
                    let gt = g.constant(gt.clone());
                    let sup = losses::supervised_loss(out.output, gt, &id, &edges, &w)?;
                    let fw = net.feature_extract(out.warped)?;
                    let ss = losses::mesh_ss_loss(
                        &fw.split()?,
                        &out.feat_pose.split()?,
                        &out.feat_id.split()?,
                        &b,
                        w.margin,
                    )?;
                    let point = losses::point_triplet(fw.values, out.feat_id.values, w.margin)?;
                    losses::labelled_total(sup, ss, point, &w)
                }),
            )
        })
        .piecewise(1e-6),
    ]
}

/// Every registered check: one per kernel kind, then every loss.
pub fn registry() -> Vec<GradItem> {
    let mut items = op_items();
    items.extend(loss_items());
    items
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Ops,
    Losses,
    All,
}

impl std::str::FromStr for Which {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Which::Ops),
            "losses" => Ok(Which::Losses),
            "all" => Ok(Which::All),
            _ => Err(Error::InvalidArgument(format!(
                "unknown gradcheck selection `{s}` (ops, losses, all)"
            ))),
        }
    }
}

impl Which {
    fn includes(self, g: Group) -> bool {
        matches!(
            (self, g),
            (Which::All, _) | (Which::Ops, Group::Ops) | (Which::Losses, Group::Losses)
        )
    }
}

#[derive(Clone, Debug)]
pub struct ItemReport {
    pub name: &'static str,
    pub group: Group,
    /// Worst relative error over all shapes.
    pub max_rel_error: f64,
    pub passed: bool,
    pub seconds: f64,
}

pub const DEFAULT_STEP: f64 = 1e-5;

/// Runs every selected item on [`SHAPES`] input shapes. Naming an item in
/// `corrupt` scales its analytic gradient by 1.1 before comparison, which
/// must make that item fail.
pub fn run(which: Which, tol: f64, seed: u64, corrupt: Option<&str>) -> Result<Vec<ItemReport>> {
    let mut out = Vec::new();
    for (k, item) in registry().into_iter().enumerate() {
        if !which.includes(item.group) {
            continue;
        }
        let start = Instant::now();
        let factor = if corrupt == Some(item.name) { 1.1 } else { 1.0 };
        let mut worst = 0.0f64;
        for s in 0..SHAPES {
            let mix = seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add((k as u64) << 8 | s as u64);
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(mix);
            let (xs, f) = (item.build)(s, &mut rng);
            let probe = Probe {
                corrupt: factor,
                skip_kinks: item.piecewise,
            };
            let rep = fd_check(&f, &xs, item.step, tol, probe)?;
            worst = worst.max(rep.max_rel_error);
        }
        out.push(ItemReport {
            name: item.name,
            group: item.group,
            max_rel_error: worst,
            passed: worst <= tol,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(out)
}

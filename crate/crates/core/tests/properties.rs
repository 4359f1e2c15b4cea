use proptest::prelude::*;

use pose_transfer::autograd::INSTANCE_NORM_EPS;
use pose_transfer::losses::{edge_loss, mesh_triplet, point_triplet, rec_loss};
use pose_transfer::mesh::{load_mesh, random_reorder, save_mesh, zero_center, MeshFormat};
use pose_transfer::metrics::{chamfer, emd, pmd, Point};
use pose_transfer::network::{binarize_transport, ModelDims};
use pose_transfer::synthetic::{make_mesh, sample_identity, sample_pose, SamplingRanges, MIN_EDGE};
use pose_transfer::trainer::lr_at;
use pose_transfer::{GeneratorParams, Graph, Mesh, Tensor, TrainingConfig};
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-1.0f64..1.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn sized_matrix(max_rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    (2..=max_rows).prop_flat_map(move |n| matrix(n, cols))
}

fn points(max: usize) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 2..=max)
}

/// Orthogonal matrix from a product of two Householder reflections.
fn orthogonal(d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (
        prop::collection::vec(-1.0f64..1.0, d),
        prop::collection::vec(-1.0f64..1.0, d),
    )
        .prop_filter_map("degenerate reflection", move |(a, b)| {
            let reflect = |v: &[f64]| -> Option<Vec<Vec<f64>>> {
                let nn: f64 = v.iter().map(|x| x * x).sum();
                (nn > 1e-3).then(|| {
                    (0..d)
                        .map(|i| (0..d).map(|j| (i == j) as u8 as f64 - 2.0 * v[i] * v[j] / nn).collect())
                        .collect()
                })
            };
            let (p, q) = (reflect(&a)?, reflect(&b)?);
            Some(
                (0..d)
                    .map(|i| (0..d).map(|j| (0..d).map(|k| p[i][k] * q[k][j]).sum()).collect())
                    .collect(),
            )
        })
}

fn transform(t: &Tensor<f64>, q: &[Vec<f64>]) -> Tensor<f64> {
    let (n, d) = (t.rows(), t.cols());
    let data = (0..n)
        .flat_map(|r| (0..d).map(move |j| (0..d).map(|k| t.get2(r, k) * q[k][j]).sum::<f64>()))
        .collect();
    Tensor::matrix(n, d, data).unwrap()
}

fn rotate_points(p: &[Point], q: &[Vec<f64>]) -> Vec<Point> {
    p.iter()
        .map(|v| std::array::from_fn(|j| (0..3).map(|k| v[k] * q[k][j]).sum()))
        .collect()
}

fn tiny_dims() -> ModelDims {
    ModelDims {
        d1: 4,
        d2: 6,
        d3: 8,
        d_id: 5,
        d_pose: 3,
        d_corr: 6,
        r1: 8,
        r2: 6,
        r3: 4,
        disentangle: true,
    }
}

fn ring_mesh(n: usize, coords: &[f64]) -> Mesh {
    let verts: Vec<[f32; 3]> = coords
        .chunks(3)
        .take(n)
        .map(|c| [c[0] as f32, c[1] as f32, c[2] as f32])
        .collect();
    let faces: Vec<[usize; 3]> = (1..n - 1).map(|i| [0, i, i + 1]).collect();
    Mesh::new("ring", verts, faces).unwrap()
}

fn mesh_strategy() -> impl Strategy<Value = Mesh> {
    (3usize..12).prop_flat_map(|n| prop::collection::vec(-2.0f64..2.0, n * 3).prop_map(move |c| ring_mesh(n, &c)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // tensor core

    #[test]
    fn stop_gradient_contributes_exactly_zero(x in matrix(4, 3), r in matrix(4, 3)) {
        let g = Graph::new();
        let (v, other) = (g.variable(x.clone()), g.variable(x));
        let loss = v.stop_gradient().unwrap().mul(g.constant(r)).unwrap()
            .add(other.mul(other).unwrap()).unwrap().mean_all().unwrap();
        let grads = g.backward(loss).unwrap();
        prop_assert!(grads.get_or_zeros(v).data().iter().all(|d| d.to_bits() == 0));
    }

    #[test]
    fn replay_is_bitwise_identical(x in matrix(5, 3), y in matrix(6, 3)) {
        let run = || {
            let g = Graph::new();
            let (a, b) = (g.variable(x.clone()), g.variable(y.clone()));
            let loss = a.cosine_cost(b).unwrap().sinkhorn(0.1, 10).unwrap().row_normalize().unwrap()
                .matmul(b).unwrap().l2_norm_rows().unwrap().mean_all().unwrap();
            let grads = g.backward(loss).unwrap();
            (loss.item().to_bits(), grads.get_or_zeros(a), grads.get_or_zeros(b))
        };
        let (l1, a1, b1) = run();
        let (l2, a2, b2) = run();
        prop_assert_eq!(l1, l2);
        prop_assert_eq!(a1, a2);
        prop_assert_eq!(b1, b2);
    }

    #[test]
    fn instance_norm_standardises_channels(x in sized_matrix(12, 3), scale in 0.5f64..20.0) {
        let x = x.map(|v| v * scale);
        let (n, c) = (x.rows(), x.cols());
        let g = Graph::new();
        let y = (*g.constant(x.clone()).instance_norm().unwrap().value()).clone();
        for j in 0..c {
            let col = |t: &Tensor<f64>| (0..n).map(|i| t.get2(i, j)).collect::<Vec<_>>();
            let moments = |v: &[f64]| {
                let m = v.iter().sum::<f64>() / n as f64;
                (m, v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n as f64)
            };
            let (_, s2) = moments(&col(&x));
            prop_assume!(s2 >= 1e-3);
            let (mu, var) = moments(&col(&y));
            prop_assert!(mu.abs() <= 1e-6);
            prop_assert!((var - s2 / (s2 + INSTANCE_NORM_EPS)).abs() <= 1e-9);
            if s2 >= 0.1 {
                prop_assert!((var - 1.0).abs() <= 1e-4);
            }
        }
    }

    // mesh io

    #[test]
    fn reorder_is_reproducible_bijection(m in mesh_strategy(), seed in any::<u64>()) {
        let (a, pa) = random_reorder(&m, seed).unwrap();
        let (b, pb) = random_reorder(&m, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(&pa, &pb);
        prop_assert!(pa.is_bijection());
        for (old, &new) in pa.mapping.iter().enumerate() {
            prop_assert_eq!(m.vertices()[old], a.vertices()[new]);
        }
        prop_assert_eq!(a.edges().len(), m.edges().len());
    }

    #[test]
    fn zero_center_idempotent_and_translation_invariant(
        m in mesh_strategy(),
        t in prop::array::uniform3(-5.0f32..5.0),
    ) {
        let c = zero_center(&m);
        let cc = zero_center(&c);
        let ct = zero_center(&m.translated(t));
        let (lo, hi) = c.bounding_box();
        for k in 0..3 {
            prop_assert!((lo[k] + hi[k]).abs() <= 1e-6);
        }
        for ((a, b), d) in c.vertices().iter().zip(cc.vertices()).zip(ct.vertices()) {
            for k in 0..3 {
                prop_assert!((a[k] - b[k]).abs() <= 1e-6);
                prop_assert!((a[k] - d[k]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn obj_and_ply_round_trip(m in mesh_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        for (name, fmt) in [("m.obj", MeshFormat::Obj), ("m.ply", MeshFormat::Ply)] {
            let p = dir.path().join(name);
            save_mesh(&m, &p, fmt).unwrap();
            let back = load_mesh(&p).unwrap();
            prop_assert_eq!(back.vertices(), m.vertices());
            prop_assert_eq!(back.faces(), m.faces());
        }
    }

    // network

    #[test]
    fn transport_plan_invariants(f in sized_matrix(9, 4), h in sized_matrix(9, 4)) {
        let g = Graph::new();
        let plan = g.constant(f).cosine_cost(g.constant(h)).unwrap().sinkhorn(0.05, 30).unwrap();
        let t = (*plan.row_normalize().unwrap().value()).clone();
        prop_assert!(t.data().iter().all(|&v| v >= 0.0));
        for r in 0..t.rows() {
            prop_assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-5);
        }
        let (b, idx) = binarize_transport(&plan.value());
        let raw = plan.value();
        for r in 0..b.rows() {
            prop_assert_eq!(b.row(r).iter().filter(|&&v| v == 1.0).count(), 1);
            prop_assert_eq!(b.row(r).iter().filter(|&&v| v == 0.0).count(), b.cols() - 1);
            let max = raw.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(raw.get2(r, idx[r]), max);
        }
    }

    #[test]
    fn latent_channels_partition_features(x in sized_matrix(10, 3), seed in 0u64..1000) {
        let p = GeneratorParams::<f64>::init(tiny_dims(), seed).unwrap();
        let g = Graph::new();
        let f = p.bind(&g).feature_extract(g.constant(x)).unwrap();
        let (id, pose) = (f.identity().unwrap(), f.pose().unwrap());
        prop_assert_eq!(id.shape()[1] + pose.shape()[1], f.values.shape()[1]);
        let joined = id.concat_channels(pose).unwrap();
        prop_assert_eq!(&*joined.value(), &*f.values.value());
    }

    #[test]
    fn feature_extractor_is_order_equivariant(x in sized_matrix(10, 3), seed in any::<u64>()) {
        let p = GeneratorParams::<f64>::init(tiny_dims(), 5).unwrap();
        let n = x.rows();
        let perm = pose_transfer::Permutation::random(n, seed).inverse();
        let g = Graph::new();
        let net = p.bind(&g);
        let f = net.feature_extract(g.constant(x.clone())).unwrap().values.value().gather_rows(&perm);
        let fp = net.feature_extract(g.constant(x.gather_rows(&perm))).unwrap().values.value().as_ref().clone();
        prop_assert!(fp.max_abs_diff(&f) <= 1e-9);
    }

    #[test]
    fn style_path_ignores_identity_pose_channels(x in sized_matrix(8, 3), w in sized_matrix(8, 3)) {
        prop_assume!(x.rows() == w.rows());
        let p = GeneratorParams::<f64>::init(tiny_dims(), 9).unwrap();
        let g = Graph::new();
        let net = p.bind(&g);
        let f = net.feature_extract(g.constant(x)).unwrap();
        let feats = g.variable((*f.values.value()).clone());
        let style = feats.channel_slice(0, tiny_dims().d_id).unwrap();
        let out = net.refine(g.constant(w), style).unwrap();
        let grads = g.backward(out.mean_all().unwrap()).unwrap();
        let gf = grads.get_or_zeros(feats);
        for r in 0..gf.rows() {
            prop_assert!(gf.row(r)[tiny_dims().d_id..].iter().all(|v| v.to_bits() == 0));
        }
    }

    // losses

    #[test]
    fn losses_are_non_negative_and_zero_when_perfect(a in matrix(6, 3), b in matrix(6, 3), c in matrix(6, 3)) {
        let g = Graph::new();
        let (va, vb, vc) = (g.constant(a.clone()), g.constant(b), g.constant(c));
        let edges: Vec<(usize, usize)> = (0..5).map(|i| (i, i + 1)).collect();
        prop_assume!(a.rows() == 6);
        prop_assert!(rec_loss(va, vb).unwrap().item() >= 0.0);
        prop_assert_eq!(rec_loss(va, va).unwrap().item(), 0.0);
        if let Ok(l) = edge_loss(vb, &a, &edges) {
            prop_assert!(l.item() >= 0.0);
            prop_assert_eq!(edge_loss(va, &a, &edges).unwrap().item(), 0.0);
        }
        prop_assert!(mesh_triplet(va, vb, vc, 1.0).unwrap().item() >= 0.0);
        prop_assert!(point_triplet(va, vb, 1.0).unwrap().item() >= 0.0);
    }

    #[test]
    fn triplets_invariant_under_orthogonal_maps(
        a in matrix(5, 4), p in matrix(5, 4), n in matrix(5, 4), q in orthogonal(4), margin in 0.0f64..2.0,
    ) {
        let eval = |a: &Tensor<f64>, p: &Tensor<f64>, n: &Tensor<f64>| {
            let g = Graph::new();
            let (va, vp, vn) = (g.constant(a.clone()), g.constant(p.clone()), g.constant(n.clone()));
            (mesh_triplet(va, vp, vn, margin).unwrap().item(), point_triplet(va, vp, margin).unwrap().item())
        };
        let (m0, p0) = eval(&a, &p, &n);
        let (m1, p1) = eval(&transform(&a, &q), &transform(&p, &q), &transform(&n, &q));
        prop_assert!((m0 - m1).abs() <= 1e-9);
        prop_assert!((p0 - p1).abs() <= 1e-9);
    }

    #[test]
    fn point_triplet_upper_bound(w in matrix(6, 4), u in matrix(6, 4), margin in 0.0f64..2.0) {
        let g = Graph::new();
        let l = point_triplet(g.constant(w.clone()), g.constant(u.clone()), margin).unwrap().item();
        let max_dist = (0..6)
            .map(|j| w.row(j).iter().zip(u.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        prop_assert!(l <= margin + max_dist + 1e-9);
    }

    // metrics

    #[test]
    fn chamfer_and_emd_ignore_order_and_are_symmetric(p in points(12), seed in any::<u64>()) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let q: Vec<Point> = p.iter().map(|v| {
            let t: Tensor<f64> = Tensor::uniform(&[3], -0.3, 0.3, &mut rng);
            std::array::from_fn(|k| v[k] + t.data()[k])
        }).collect();
        let perm = pose_transfer::Permutation::random(q.len(), seed ^ 1).inverse();
        let qp: Vec<Point> = perm.iter().map(|&i| q[i]).collect();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(1.0);
        prop_assert!(close(chamfer(&p, &q).unwrap(), chamfer(&p, &qp).unwrap()));
        prop_assert!(close(emd(&p, &q).unwrap(), emd(&p, &qp).unwrap()));
        prop_assert!(close(chamfer(&p, &q).unwrap(), chamfer(&q, &p).unwrap()));
        prop_assert!(close(emd(&p, &q).unwrap(), emd(&q, &p).unwrap()));
    }

    #[test]
    fn metrics_invariant_under_common_rotation(p in points(10), q in points(10), rot in orthogonal(3)) {
        prop_assume!(p.len() == q.len());
        let (pr, qr) = (rotate_points(&p, &rot), rotate_points(&q, &rot));
        prop_assert!((pmd(&p, &q).unwrap() - pmd(&pr, &qr).unwrap()).abs() <= 1e-5);
        prop_assert!((chamfer(&p, &q).unwrap() - chamfer(&pr, &qr).unwrap()).abs() <= 1e-5);
        prop_assert!((emd(&p, &q).unwrap() - emd(&pr, &qr).unwrap()).abs() <= 1e-5);
    }

    #[test]
    fn emd_bounded_below_by_centroid_gap(p in points(10), q in points(10)) {
        prop_assume!(p.len() == q.len());
        let centroid = |s: &[Point]| -> Point {
            std::array::from_fn(|k| s.iter().map(|v| v[k]).sum::<f64>() / s.len() as f64)
        };
        let (cp, cq) = (centroid(&p), centroid(&q));
        let gap = (0..3).map(|k| (cp[k] - cq[k]).powi(2)).sum::<f64>().sqrt();
        prop_assert!(emd(&p, &q).unwrap() >= gap - 1e-12);
    }

    #[test]
    fn self_comparison_scores_zero(p in points(12)) {
        prop_assert_eq!(pmd(&p, &p).unwrap(), 0.0);
        prop_assert_eq!(chamfer(&p, &p).unwrap(), 0.0);
        prop_assert_eq!(emd(&p, &p).unwrap(), 0.0);
    }

    // synthetic data

    #[test]
    fn generated_meshes_keep_min_edge_and_separate_poses(seed in any::<u64>()) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let ranges = SamplingRanges::default();
        let id = sample_identity(0, 3, &ranges, &mut rng);
        let p1 = sample_pose(0, 3, &ranges, &mut rng);
        let p2 = sample_pose(1, 3, &ranges, &mut rng);
        let a = make_mesh(&id, &p1, 4, 6).unwrap();
        let b = make_mesh(&id, &p2, 4, 6).unwrap();
        prop_assert!(a.min_edge_length().unwrap() >= MIN_EDGE);
        prop_assert!(b.min_edge_length().unwrap() >= MIN_EDGE);
        let pts = |m: &Mesh| m.vertices().iter().map(|v| v.map(|c| c as f64)).collect::<Vec<Point>>();
        prop_assert_eq!(pmd(&pts(&a), &pts(&a)).unwrap(), 0.0);
        let differ = p1.angles.iter().zip(&p2.angles).any(|(x, y)| (x - y).abs() > 1e-3);
        if differ {
            prop_assert!(pmd(&pts(&a), &pts(&b)).unwrap() > 0.0);
        }
    }

    // trainer

    #[test]
    fn lr_schedule_non_increasing_and_ends_at_zero(
        epochs in 1usize..400, lr0 in 1e-6f64..1e-1, mut ps in prop::collection::vec(0.0f64..1.0, 2..20),
    ) {
        let cfg = TrainingConfig { epochs, lr0, ..TrainingConfig::default() };
        ps.sort_by(f64::total_cmp);
        let lrs: Vec<f64> = ps.iter().map(|p| lr_at(p * epochs as f64, &cfg)).collect();
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(lrs.iter().all(|&l| (0.0..=lr0).contains(&l)));
        prop_assert_eq!(lr_at(epochs as f64, &cfg), 0.0);
    }
}

#[test]
fn pmd_depends_on_order_while_chamfer_and_emd_do_not() {
    let p: Vec<Point> = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
    let q: Vec<Point> = vec![p[2], p[0], p[1]];
    assert!(pmd(&p, &q).unwrap() > 0.0);
    assert_eq!(chamfer(&p, &q).unwrap(), 0.0);
    assert_eq!(emd(&p, &q).unwrap(), 0.0);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let g = Graph::new();
    let x = g.variable(Tensor::matrix(1, 3, vec![-1.0, 0.0, 2.0]).unwrap());
    let grads = g.backward(x.relu().unwrap().mean_all().unwrap()).unwrap();
    assert_eq!(grads.get_or_zeros(x).data(), &[0.0, 0.0, 1.0 / 3.0]);
}

//! The generator: a shared pointwise feature extractor, an optimal-transport
//! correspondence module that warps the pose input onto the identity
//! input's vertex order, and a refinement decoder built from elastic
//! instance-normalisation residual blocks.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::optim::{BoundParams, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Layer widths. `d3` is the latent width and splits into `d_id + d_pose`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub d1: usize,
    pub d2: usize,
    pub d3: usize,
    pub d_id: usize,
    pub d_pose: usize,
    pub d_corr: usize,
    pub r1: usize,
    pub r2: usize,
    pub r3: usize,
    /// When false the refinement style path sees all latent channels
    /// instead of only the identity channels.
    pub disentangle: bool,
}

impl ModelDims {
    /// Full-width layout.
    pub fn full() -> Self {
        ModelDims {
            d1: 64,
            d2: 128,
            d3: 256,
            d_id: 128,
            d_pose: 128,
            d_corr: 256,
            r1: 1024,
            r2: 512,
            r3: 256,
            disentangle: true,
        }
    }

    /// Full layout with every width divided by `divisor` (1, 4 or 8).
    pub fn scaled(divisor: usize) -> Result<Self> {
        if ![1, 4, 8].contains(&divisor) {
            return Err(Error::InvalidArgument(format!(
                "dims divisor must be 1, 4 or 8, got {divisor}"
            )));
        }
        let f = Self::full();
        Ok(ModelDims {
            d1: f.d1 / divisor,
            d2: f.d2 / divisor,
            d3: f.d3 / divisor,
            d_id: f.d_id / divisor,
            d_pose: f.d_pose / divisor,
            d_corr: f.d_corr / divisor,
            r1: f.r1 / divisor,
            r2: f.r2 / divisor,
            r3: f.r3 / divisor,
            disentangle: true,
        })
    }

    pub fn d_latent(&self) -> usize {
        self.d3
    }

    /// Width of the features that condition refinement.
    pub fn d_style(&self) -> usize {
        if self.disentangle {
            self.d_id
        } else {
            self.d3
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.d1,
            self.d2,
            self.d3,
            self.d_id,
            self.d_pose,
            self.d_corr,
            self.r1,
            self.r2,
            self.r3,
        ];
        if widths.contains(&0) {
            return Err(Error::DimMismatch(format!("zero width in {self:?}")));
        }
        if self.d_id + self.d_pose != self.d3 {
            return Err(Error::DimMismatch(format!(
                "d_id + d_pose = {} but latent width is {}",
                self.d_id + self.d_pose,
                self.d3
            )));
        }
        if !(self.r1 >= self.r2 && self.r2 >= self.r3) {
            return Err(Error::DimMismatch("refinement widths must be non-increasing".into()));
        }
        Ok(())
    }

    /// Flat encoding used by checkpoints.
    pub fn to_vec(&self) -> Vec<usize> {
        vec![
            self.d1,
            self.d2,
            self.d3,
            self.d_id,
            self.d_pose,
            self.d_corr,
            self.r1,
            self.r2,
            self.r3,
            self.disentangle as usize,
        ]
    }

    pub fn from_slice(v: &[usize]) -> Result<Self> {
        match *v {
            [d1, d2, d3, d_id, d_pose, d_corr, r1, r2, r3, dis] if dis <= 1 => {
                let dims = ModelDims {
                    d1,
                    d2,
                    d3,
                    d_id,
                    d_pose,
                    d_corr,
                    r1,
                    r2,
                    r3,
                    disentangle: dis == 1,
                };
                dims.validate()?;
                Ok(dims)
            }
            _ => Err(Error::DimMismatch(format!("cannot decode dims from {v:?}"))),
        }
    }
}

/// Sinkhorn settings of the correspondence module.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OtConfig {
    pub eps: f64,
    pub iterations: usize,
}

impl Default for OtConfig {
    fn default() -> Self {
        OtConfig {
            eps: 0.05,
            iterations: 30,
        }
    }
}

/// Number of residual blocks in the feature extractor.
pub const FEATURE_BLOCKS: usize = 4;

/// Named weights of the whole generator.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams<T> {
    pub dims: ModelDims,
    pub store: ParamStore<T>,
}

fn add_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Xoshiro256PlusPlus,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    taps: usize,
) -> Result<()> {
    let bound = (6.0 / (fan_in * taps) as f64).sqrt();
    let shape: Vec<usize> = if taps == 1 {
        vec![fan_in, fan_out]
    } else {
        vec![taps, fan_in, fan_out]
    };
    store.insert(format!("{name}.w"), Tensor::uniform(&shape, -bound, bound, rng))?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]))
}

fn add_elain_block<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Xoshiro256PlusPlus,
    name: &str,
    width: usize,
    style: usize,
) -> Result<()> {
    for norm in ["n1", "n2"] {
        add_linear(store, rng, &format!("{name}.{norm}.style"), style, width, 1)?;
        add_linear(store, rng, &format!("{name}.{norm}.gate"), width, width, 1)?;
    }
    add_linear(store, rng, &format!("{name}.conv_a"), width, width, 1)?;
    add_linear(store, rng, &format!("{name}.conv_b"), width, width, 1)
}

impl<T: Scalar> GeneratorParams<T> {
    /// Fan-in scaled uniform initialisation, zero biases.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let r = &mut rng;
        add_linear(&mut s, r, "f.l1", 3, dims.d1, 1)?;
        add_linear(&mut s, r, "f.l2", dims.d1, dims.d2, 1)?;
        add_linear(&mut s, r, "f.l3", dims.d2, dims.d3, 1)?;
        for k in 0..FEATURE_BLOCKS {
            add_linear(&mut s, r, &format!("f.rb{k}.a"), dims.d3, dims.d3, 1)?;
            add_linear(&mut s, r, &format!("f.rb{k}.b"), dims.d3, dims.d3, 1)?;
        }
        add_linear(&mut s, r, "c.proj_id", dims.d3, dims.d_corr, 1)?;
        add_linear(&mut s, r, "c.proj_pose", dims.d3, dims.d_corr, 1)?;
        add_linear(&mut s, r, "r.entry", 3, dims.r1, 3)?;
        add_linear(&mut s, r, "r.pw1", dims.r1, dims.r1, 1)?;
        add_elain_block(&mut s, r, "r.rb1", dims.r1, dims.d_style())?;
        add_linear(&mut s, r, "r.pw2", dims.r1, dims.r2, 1)?;
        add_elain_block(&mut s, r, "r.rb2", dims.r2, dims.d_style())?;
        add_linear(&mut s, r, "r.pw3", dims.r2, dims.r3, 1)?;
        add_elain_block(&mut s, r, "r.rb3", dims.r3, dims.d_style())?;
        add_linear(&mut s, r, "r.out", dims.r3, 3, 1)?;
        Ok(GeneratorParams { dims, store: s })
    }

    pub fn bind<'g>(&self, graph: &'g Graph<T>) -> Bound<'g, T> {
        Bound {
            dims: self.dims,
            params: self.store.bind(graph),
            graph,
        }
    }

    /// Checks that every expected tensor exists with the expected shape.
    pub fn check_against(&self, dims: &ModelDims) -> Result<()> {
        let reference = GeneratorParams::<T>::init(*dims, 0)?;
        if reference.store.len() != self.store.len() {
            return Err(Error::DimMismatch(format!(
                "expected {} tensors, found {}",
                reference.store.len(),
                self.store.len()
            )));
        }
        for (name, t) in reference.store.iter() {
            let mine = self
                .store
                .get(name)
                .map_err(|_| Error::DimMismatch(format!("missing tensor `{name}`")))?;
            if mine.shape() != t.shape() {
                return Err(Error::DimMismatch(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    mine.shape(),
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Runs the generator on two preprocessed meshes without recording
    /// gradients.
    pub fn transfer(&self, pose: &Mesh, identity: &Mesh, ot: &OtConfig) -> Result<Transfer<T>> {
        let g = Graph::new();
        let net = self.bind(&g);
        let pose_pts = g.constant(pose.to_tensor());
        let id_pts = g.constant(identity.to_tensor());
        let out = net.generate(pose_pts, id_pts, ot)?;
        Ok(Transfer {
            warped: (*out.warped.value()).clone(),
            output: (*out.output.value()).clone(),
            plan: (*out.plan.value()).clone(),
            binary: out.binary,
        })
    }
}

/// Plain tensors produced by [`GeneratorParams::transfer`].
#[derive(Clone, Debug)]
pub struct Transfer<T> {
    pub warped: Tensor<T>,
    pub output: Tensor<T>,
    pub plan: Tensor<T>,
    pub binary: Tensor<T>,
}

/// Latent features of one mesh; identity channels first.
#[derive(Clone, Copy, Debug)]
pub struct LatentFeature<'g, T: Scalar> {
    pub values: Var<'g, T>,
    pub d_id: usize,
    pub d_pose: usize,
}

impl<'g, T: Scalar> LatentFeature<'g, T> {
    pub fn identity(&self) -> Result<Var<'g, T>> {
        self.values.channel_slice(0, self.d_id)
    }

    pub fn pose(&self) -> Result<Var<'g, T>> {
        self.values.channel_slice(self.d_id, self.d_id + self.d_pose)
    }

    pub fn split(&self) -> Result<crate::losses::SplitFeature<'g, T>> {
        Ok(crate::losses::SplitFeature {
            id: self.identity()?,
            pose: self.pose()?,
        })
    }
}

/// Everything one generator pass produces.
#[derive(Clone, Debug)]
pub struct Generated<'g, T: Scalar> {
    pub feat_pose: LatentFeature<'g, T>,
    pub feat_id: LatentFeature<'g, T>,
    /// Raw Sinkhorn plan, rows summing to `1/N_id`.
    pub plan: Var<'g, T>,
    pub warped: Var<'g, T>,
    pub output: Var<'g, T>,
    pub binary: Tensor<T>,
    pub argmax: Vec<usize>,
}

/// Generator weights registered on a graph.
pub struct Bound<'g, T: Scalar> {
    pub dims: ModelDims,
    pub params: BoundParams<'g, T>,
    graph: &'g Graph<T>,
}

impl<'g, T: Scalar> Bound<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    fn linear(&self, x: Var<'g, T>, name: &str) -> Result<Var<'g, T>> {
        let w = self.params.get(&format!("{name}.w"))?;
        let b = self.params.get(&format!("{name}.b"))?;
        let cin = w.shape()[0];
        if x.shape().get(1) != Some(&cin) {
            return Err(Error::DimMismatch(format!(
                "`{name}` expects {cin} input channels, got shape {:?}",
                x.shape()
            )));
        }
        x.pointwise_linear(w, b)
    }

    /// Per-vertex latent features. Only kernel-size-1 layers are used, so
    /// permuting the input rows permutes the output rows.
    pub fn feature_extract(&self, points: Var<'g, T>) -> Result<LatentFeature<'g, T>> {
        let shape = points.shape();
        if shape.len() != 2 || shape[1] != 3 {
            return Err(Error::shape("feature_extract", &shape, "[N, 3]"));
        }
        if shape[0] < 2 {
            return Err(Error::InvalidArgument(
                "feature_extract: need at least two points".into(),
            ));
        }
        let mut h = points;
        for l in ["f.l1", "f.l2", "f.l3"] {
            h = self.linear(h, l)?.instance_norm()?.relu()?;
        }
        for k in 0..FEATURE_BLOCKS {
            let y = h.instance_norm()?.relu()?;
            let y = self.linear(y, &format!("f.rb{k}.a"))?;
            let y = y.instance_norm()?.relu()?;
            let y = self.linear(y, &format!("f.rb{k}.b"))?;
            h = h.add(y)?;
        }
        Ok(LatentFeature {
            values: h,
            d_id: self.dims.d_id,
            d_pose: self.dims.d_pose,
        })
    }

    /// Entropic transport plan between the identity and pose vertices.
    pub fn correspondence(
        &self,
        feat_id: &LatentFeature<'g, T>,
        feat_pose: &LatentFeature<'g, T>,
        ot: &OtConfig,
    ) -> Result<Var<'g, T>> {
        let f = self.linear(feat_id.values, "c.proj_id")?;
        let g = self.linear(feat_pose.values, "c.proj_pose")?;
        f.cosine_cost(g)?.sinkhorn(T::from_f64_lossy(ot.eps), ot.iterations)
    }

    /// Elastic instance normalisation of `h` conditioned on `style`.
    fn elain(&self, h: Var<'g, T>, style: Var<'g, T>, name: &str) -> Result<Var<'g, T>> {
        let s = self.linear(style, &format!("{name}.style"))?;
        let mu = s.mean_rows()?;
        let centred = s.add_row(mu.mul_scalar(-T::one())?)?;
        let sigma = centred
            .mul(centred)?
            .mean_rows()?
            .add_scalar(T::from_f64_lossy(crate::autograd::INSTANCE_NORM_EPS))?
            .sqrt()?;
        let gate = self.linear(mu, &format!("{name}.gate"))?.sigmoid()?;
        let styled = h.instance_norm()?.mul_row(sigma)?.add_row(mu)?;
        styled.sub(h)?.mul_row(gate)?.add(h)
    }

    fn elain_block(&self, h: Var<'g, T>, style: Var<'g, T>, name: &str) -> Result<Var<'g, T>> {
        let y = self.elain(h, style, &format!("{name}.n1"))?.relu()?;
        let y = self.linear(y, &format!("{name}.conv_a"))?;
        let y = self.elain(y, style, &format!("{name}.n2"))?.relu()?;
        let y = self.linear(y, &format!("{name}.conv_b"))?;
        h.add(y)
    }

    /// Final vertex positions from the warped mesh and the style features
    /// (identity channels only unless the ablation flag is set).
    pub fn refine(&self, warped: Var<'g, T>, style: Var<'g, T>) -> Result<Var<'g, T>> {
        let (ws, ss) = (warped.shape(), style.shape());
        if ws.len() != 2 || ws[1] != 3 {
            return Err(Error::shape("refine", &ws, "[N, 3]"));
        }
        if ss.len() != 2 || ss[0] != ws[0] || ss[1] != self.dims.d_style() {
            return Err(Error::DimMismatch(format!(
                "refine style features {ss:?}, expected [{}, {}]",
                ws[0],
                self.dims.d_style()
            )));
        }
        let entry_w = self.params.get("r.entry.w")?;
        let entry_b = self.params.get("r.entry.b")?;
        let mut h = warped.conv1d_k3(entry_w, entry_b)?.relu()?;
        h = self.linear(h, "r.pw1")?.relu()?;
        h = self.elain_block(h, style, "r.rb1")?;
        h = self.linear(h, "r.pw2")?.relu()?;
        h = self.elain_block(h, style, "r.rb2")?;
        h = self.linear(h, "r.pw3")?.relu()?;
        h = self.elain_block(h, style, "r.rb3")?;
        self.linear(h, "r.out")
    }

    /// Full pass: features of both inputs with shared weights, transport,
    /// warp and refinement. The output follows the identity input's vertex
    /// order.
    pub fn generate(&self, pose_points: Var<'g, T>, id_points: Var<'g, T>, ot: &OtConfig) -> Result<Generated<'g, T>> {
        let feat_pose = self.feature_extract(pose_points)?;
        let feat_id = self.feature_extract(id_points)?;
        self.generate_from_features(pose_points, feat_pose, feat_id, ot)
    }

    /// As [`Bound::generate`] with precomputed features.
    pub fn generate_from_features(
        &self,
        pose_points: Var<'g, T>,
        feat_pose: LatentFeature<'g, T>,
        feat_id: LatentFeature<'g, T>,
        ot: &OtConfig,
    ) -> Result<Generated<'g, T>> {
        let plan = self.correspondence(&feat_id, &feat_pose, ot)?;
        let warped = warp(plan, pose_points)?;
        let style = if self.dims.disentangle {
            feat_id.identity()?
        } else {
            feat_id.values
        };
        let output = self.refine(warped, style)?;
        let (binary, argmax) = binarize_transport(&plan.value());
        Ok(Generated {
            feat_pose,
            feat_id,
            plan,
            warped,
            output,
            binary,
            argmax,
        })
    }
}

/// Warped vertices: the row-normalised plan applied to the pose vertices.
pub fn warp<'g, T: Scalar>(plan: Var<'g, T>, pose_points: Var<'g, T>) -> Result<Var<'g, T>> {
    let (ps, xs) = (plan.shape(), pose_points.shape());
    if ps.len() != 2 || xs.len() != 2 || ps[1] != xs[0] || xs[1] != 3 {
        return Err(Error::shape(
            "warp",
            &xs,
            format!("[{}, 3]", ps.get(1).copied().unwrap_or(0)),
        ));
    }
    plan.row_normalize()?.matmul(pose_points)
}

/// One-hot row maxima of a plan, lowest index winning ties, together with
/// the selected column of every row.
pub fn binarize_transport<T: Scalar>(plan: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let (n, c) = (plan.rows(), plan.cols());
    let mut b = Tensor::zeros(&[n, c]);
    let mut idx = Vec::with_capacity(n);
    for r in 0..n {
        let row = plan.row(r);
        let mut best = 0;
        for k in 1..c {
            if row[k] > row[best] {
                best = k;
            }
        }
        b.data_mut()[r * c + best] = T::one();
        idx.push(best);
    }
    (b, idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_dims() -> ModelDims {
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

    fn points(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        Tensor::uniform(&[n, 3], -1.0, 1.0, &mut rng)
    }

    #[test]
    fn scaled_dims() {
        let d = ModelDims::scaled(8).unwrap();
        assert_eq!((d.d1, d.d2, d.d3, d.d_id, d.d_pose), (8, 16, 32, 16, 16));
        assert_eq!((d.d_corr, d.r1, d.r2, d.r3), (32, 128, 64, 32));
        assert!(ModelDims::scaled(3).is_err());
        assert_eq!(ModelDims::from_slice(&d.to_vec()).unwrap(), d);
        let bad = ModelDims { d_id: 10, ..d };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn feature_shape_and_split() {
        let p = GeneratorParams::<f64>::init(tiny_dims(), 1).unwrap();
        let g = Graph::new();
        let net = p.bind(&g);
        let f = net.feature_extract(g.constant(points(7, 2))).unwrap();
        assert_eq!(f.values.shape(), vec![7, 8]);
        let joined = f.identity().unwrap().concat_channels(f.pose().unwrap()).unwrap();
        assert_eq!(*joined.value(), *f.values.value());
    }

    #[test]
    fn features_are_permutation_equivariant() {
        let p = GeneratorParams::<f64>::init(tiny_dims(), 3).unwrap();
        let x = points(9, 4);
        let perm = [3, 0, 8, 1, 7, 2, 6, 4, 5];
        let g = Graph::new();
        let net = p.bind(&g);
        let f = net.feature_extract(g.constant(x.clone())).unwrap();
        let fp = net.feature_extract(g.constant(x.gather_rows(&perm))).unwrap();
        let expected = f.values.value().gather_rows(&perm);
        assert!(fp.values.value().max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn binarize_examples() {
        let t = Tensor::<f64>::from_rows(&[vec![0.2, 0.5, 0.3], vec![0.4, 0.4, 0.2]]).unwrap();
        let (b, idx) = binarize_transport(&t);
        assert_eq!(b.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(idx, vec![1, 0]);
        let perm = Tensor::<f64>::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(binarize_transport(&perm).0, perm);
    }

    #[test]
    fn warp_examples() {
        let g = Graph::new();
        let x = points(4, 5);
        let id = g.constant(Tensor::identity(4));
        let w = warp(id, g.constant(x.clone())).unwrap();
        assert!(w.value().max_abs_diff(&x) < 1e-15);
        let uniform = g.constant(Tensor::full(&[2, 4], 0.125));
        let w = warp(uniform, g.constant(x.clone())).unwrap();
        for a in 0..3 {
            let c: f64 = (0..4).map(|r| x.get2(r, a)).sum::<f64>() / 4.0;
            assert!((w.value().get2(0, a) - c).abs() < 1e-12);
            assert!((w.value().get2(1, a) - c).abs() < 1e-12);
        }
    }

    #[test]
    fn generate_shapes_follow_identity_input() {
        let p = GeneratorParams::<f64>::init(tiny_dims(), 6).unwrap();
        let g = Graph::new();
        let net = p.bind(&g);
        let out = net
            .generate(
                g.constant(points(11, 7)),
                g.constant(points(6, 8)),
                &OtConfig::default(),
            )
            .unwrap();
        assert_eq!(out.output.shape(), vec![6, 3]);
        assert_eq!(out.plan.shape(), vec![6, 11]);
        assert_eq!(out.argmax.len(), 6);
    }

    #[test]
    fn zero_output_layer_gives_zero_output() {
        let mut p = GeneratorParams::<f64>::init(tiny_dims(), 9).unwrap();
        *p.store.get_mut("r.out.w").unwrap() = Tensor::zeros(&[4, 3]);
        for blk in ["r.rb1", "r.rb2", "r.rb3"] {
            for n in ["n1", "n2"] {
                let b = p.store.get_mut(&format!("{blk}.{n}.gate.b")).unwrap();
                *b = b.map(|_| -1e3);
            }
        }
        let g = Graph::new();
        let net = p.bind(&g);
        let style = g.constant(points(5, 1).cast::<f64>());
        let style = style
            .concat_channels(g.constant(points(5, 2)))
            .unwrap()
            .channel_slice(0, 5)
            .unwrap();
        let out = net.refine(g.constant(points(5, 3)), style).unwrap();
        assert!(out.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn check_against_detects_mismatch() {
        let p = GeneratorParams::<f32>::init(tiny_dims(), 0).unwrap();
        assert!(p.check_against(&tiny_dims()).is_ok());
        let other = ModelDims { r3: 2, ..tiny_dims() };
        assert!(matches!(p.check_against(&other), Err(Error::DimMismatch(_))));
    }
}

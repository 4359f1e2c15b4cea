//! Supervised, unsupervised and semi-supervised training: work-item
//! schedules, an access-audited data layer, the two optimisation steps and
//! held-out evaluation.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autograd::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::losses::{
    edge_loss, labelled_total, mesh_cc_loss, mesh_ss_loss, point_triplet, rec_loss, unlabelled_total, LossWeights,
};
use crate::mesh::{preprocess, zero_center, Mesh, Permutation};
use crate::metrics::{points_of, MetricReport};
use crate::network::{Bound, GeneratorParams, LatentFeature, ModelDims, OtConfig};
use crate::optim::{adam_step, AdamState};
use crate::scalar::Scalar;
use crate::synthetic::{Dataset, ManifestEntry};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Supervised,
    Unsupervised,
    Semi,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Supervised => "supervised",
            Mode::Unsupervised => "unsupervised",
            Mode::Semi => "semi",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Mode::Supervised),
            "unsupervised" => Ok(Mode::Unsupervised),
            "semi" => Ok(Mode::Semi),
            _ => Err(Error::InvalidArgument(format!(
                "unknown mode `{s}` (supervised, unsupervised, semi)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    /// Weight initialisation.
    pub init: u64,
    /// Work-item sampling.
    pub shuffle: u64,
    /// Per-epoch vertex reordering.
    pub reorder: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            init: 0,
            shuffle: 1,
            reorder: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub mode: Mode,
    pub epochs: usize,
    /// Independent triples per optimisation step; their losses are averaged.
    pub batch_size: usize,
    pub lr0: f64,
    pub weights: LossWeights,
    pub ot: OtConfig,
    pub dims: ModelDims,
    pub seeds: Seeds,
    /// Semi mode only: labelled steps before this epoch, unlabelled after.
    /// `None` alternates every iteration.
    pub stage_switch_epoch: Option<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            mode: Mode::Supervised,
            epochs: 200,
            batch_size: 2,
            lr0: 1e-4,
            weights: LossWeights::default(),
            ot: OtConfig::default(),
            dims: ModelDims::full(),
            seeds: Seeds::default(),
            stage_switch_epoch: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr0 {} must be positive", self.lr0)));
        }
        if !(self.ot.eps > 0.0 && self.ot.eps.is_finite()) || self.ot.iterations == 0 {
            return Err(Error::InvalidArgument(format!(
                "Sinkhorn needs eps > 0 and at least one iteration, got {:?}",
                self.ot
            )));
        }
        self.weights.validate()?;
        self.dims.validate()
    }

    /// `key=value` lines describing the run, for log headers.
    pub fn describe(&self) -> Vec<String> {
        let w = &self.weights;
        let mut out = vec![
            format!("mode={}", self.mode),
            format!("epochs={}", self.epochs),
            format!("batch_size={}", self.batch_size),
            format!("lr={}", self.lr0),
            format!("lambda_rec={}", w.rec),
            format!("lambda_edge={}", w.edge),
            format!("lambda_mesh_cc={}", w.mesh_cc),
            format!("lambda_mesh_ss={}", w.mesh_ss),
            format!("lambda_point={}", w.point),
            format!("margin={}", w.margin),
            format!("sinkhorn_eps={}", self.ot.eps),
            format!("sinkhorn_iters={}", self.ot.iterations),
            format!(
                "dims={}",
                self.dims
                    .to_vec()
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join(":")
            ),
            format!("seed_init={}", self.seeds.init),
            format!("seed_shuffle={}", self.seeds.shuffle),
            format!("seed_reorder={}", self.seeds.reorder),
        ];
        if let Some(s) = self.stage_switch_epoch {
            out.push(format!("stage_switch_epoch={s}"));
        }
        out
    }
}

/// Learning rate at `progress` epochs into training: constant for the
/// first half, then linear down to zero at the last epoch.
pub fn lr_at(progress: f64, cfg: &TrainingConfig) -> f64 {
    let total = cfg.epochs as f64;
    let decay = total - total / 2.0;
    cfg.lr0 * ((total - progress) / decay).clamp(0.0, 1.0)
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    seed ^ a.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_add(1).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

fn rng_for(seed: u64, epoch: usize, stream: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(mix(seed, epoch as u64, stream))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MeshKey {
    pub identity: usize,
    pub pose: usize,
}

impl MeshKey {
    pub fn new(identity: usize, pose: usize) -> Self {
        MeshKey { identity, pose }
    }
}

impl fmt::Display for MeshKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "id{}_pose{}", self.identity, self.pose)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AccessCounts {
    /// Meshes read as network inputs.
    pub inputs: usize,
    /// Meshes read as supervision targets.
    pub ground_truth: usize,
}

/// Training meshes keyed by identity and pose. Every read during training
/// goes through [`EpochData`], which counts input and ground-truth reads
/// separately.
#[derive(Debug)]
pub struct TrainData {
    meshes: BTreeMap<MeshKey, (Mesh, bool)>,
    inputs: Cell<usize>,
    ground_truth: Cell<usize>,
}

impl TrainData {
    pub fn new(entries: &[ManifestEntry], meshes: &[Mesh]) -> Result<Self> {
        if entries.len() != meshes.len() {
            return Err(Error::Data(format!(
                "{} manifest rows but {} meshes",
                entries.len(),
                meshes.len()
            )));
        }
        let mut map = BTreeMap::new();
        for (e, m) in entries.iter().zip(meshes) {
            let key = MeshKey::new(e.identity, e.pose);
            if map.insert(key, (m.clone(), e.labelled)).is_some() {
                return Err(Error::Data(format!("duplicate manifest row for {key}")));
            }
        }
        // Meshes of one identity share a vertex order, which only makes
        // sense when they share connectivity.
        let mut first: BTreeMap<usize, &Mesh> = BTreeMap::new();
        for (key, (m, _)) in &map {
            let reference = *first.entry(key.identity).or_insert(m);
            if reference.num_vertices() != m.num_vertices() || reference.edges() != m.edges() {
                return Err(Error::Data(format!(
                    "{key} does not share the topology of identity {}'s other meshes",
                    key.identity
                )));
            }
        }
        Ok(TrainData {
            meshes: map,
            inputs: Cell::new(0),
            ground_truth: Cell::new(0),
        })
    }

    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        Self::new(&ds.entries, &ds.meshes)
    }

    /// Keeps only the meshes accepted by `keep(key, labelled)`.
    pub fn retain(mut self, keep: impl Fn(MeshKey, bool) -> bool) -> Self {
        self.meshes.retain(|&k, (_, lab)| keep(k, *lab));
        self
    }

    pub fn len(&self) -> usize {
        self.meshes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meshes.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = (MeshKey, bool)> + '_ {
        self.meshes.iter().map(|(&k, (_, lab))| (k, *lab))
    }

    pub fn access_counts(&self) -> AccessCounts {
        AccessCounts {
            inputs: self.inputs.get(),
            ground_truth: self.ground_truth.get(),
        }
    }

    pub fn reset_counts(&self) {
        self.inputs.set(0);
        self.ground_truth.set(0);
    }

    fn partition(&self, labelled: Option<bool>) -> Partition {
        let mut poses: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut keys = Vec::new();
        for (&k, (_, lab)) in &self.meshes {
            if labelled.is_none_or(|want| want == *lab) {
                poses.entry(k.identity).or_default().push(k.pose);
                keys.push(k);
            }
        }
        Partition { poses, keys }
    }

    /// Preprocesses every mesh for one epoch: one random vertex order per
    /// identity, shared by all its poses, then per-mesh centring.
    pub fn prepare<T: Scalar>(&self, epoch: usize, seed: u64) -> Result<EpochData<'_, T>> {
        let mut perms: BTreeMap<usize, Permutation> = BTreeMap::new();
        let mut items = BTreeMap::new();
        for (&key, (mesh, _)) in &self.meshes {
            let perm = perms.entry(key.identity).or_insert_with(|| {
                Permutation::random(mesh.num_vertices(), mix(seed, epoch as u64, key.identity as u64))
            });
            let m = zero_center(&perm.apply(mesh)?);
            items.insert(
                key,
                Prepared {
                    points: m.to_tensor(),
                    edges: m.edges().to_vec(),
                },
            );
        }
        Ok(EpochData { data: self, items })
    }
}

struct Partition {
    poses: BTreeMap<usize, Vec<usize>>,
    keys: Vec<MeshKey>,
}

impl Partition {
    /// Keys whose identity has at least one other pose in the partition.
    fn pairable(&self) -> Vec<MeshKey> {
        self.keys
            .iter()
            .copied()
            .filter(|k| self.poses[&k.identity].len() >= 2)
            .collect()
    }
}

/// One preprocessed mesh.
#[derive(Clone, Debug)]
pub struct Prepared<T> {
    pub points: Tensor<T>,
    pub edges: Vec<(usize, usize)>,
}

/// Preprocessed meshes of one epoch with audited access.
pub struct EpochData<'d, T> {
    data: &'d TrainData,
    items: BTreeMap<MeshKey, Prepared<T>>,
}

impl<T> EpochData<'_, T> {
    fn lookup(&self, key: MeshKey) -> Result<&Prepared<T>> {
        self.items
            .get(&key)
            .ok_or_else(|| Error::Data(format!("no mesh for {key}")))
    }

    pub fn input(&self, key: MeshKey) -> Result<&Prepared<T>> {
        let p = self.lookup(key)?;
        self.data.inputs.set(self.data.inputs.get() + 1);
        Ok(p)
    }

    /// Supervision target; refuses meshes outside the labelled partition.
    pub fn ground_truth(&self, key: MeshKey) -> Result<&Prepared<T>> {
        let p = self.lookup(key)?;
        if !self.data.meshes[&key].1 {
            return Err(Error::Data(format!("{key} is unlabelled and cannot be a target")));
        }
        self.data.ground_truth.set(self.data.ground_truth.get() + 1);
        Ok(p)
    }
}

/// Pose input `x^{A1}`, identity input `x^{B2}` and target `x^{B1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabelledTriple {
    pub pose: MeshKey,
    pub identity: MeshKey,
    pub target: MeshKey,
}

/// `x^{A1}` and `x^{A2}` share an identity; `x^{B3}` has another.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnlabelledTriple {
    pub a1: MeshKey,
    pub a2: MeshKey,
    pub b3: MeshKey,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tag {
    L,
    U,
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tag::L => "L",
            Tag::U => "U",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WorkItem {
    Labelled(Vec<LabelledTriple>),
    /// `case` is the semi-supervised sampling case (0, 1 or 2); `None` in
    /// purely unsupervised training.
    Unlabelled {
        case: Option<usize>,
        triples: Vec<UnlabelledTriple>,
    },
}

impl WorkItem {
    pub fn tag(&self) -> Tag {
        match self {
            WorkItem::Labelled(_) => Tag::L,
            WorkItem::Unlabelled { .. } => Tag::U,
        }
    }
}

fn pick<T: Copy>(items: &[T], rng: &mut Xoshiro256PlusPlus) -> T {
    items[rng.gen_range(0..items.len())]
}

fn labelled_triple(anchor: MeshKey, part: &Partition, rng: &mut Xoshiro256PlusPlus) -> Result<LabelledTriple> {
    let candidates: Vec<usize> = part
        .poses
        .iter()
        .filter(|(&id, poses)| id != anchor.identity && poses.len() >= 2 && poses.contains(&anchor.pose))
        .map(|(&id, _)| id)
        .collect();
    if candidates.is_empty() {
        return Err(Error::Data(format!(
            "no other labelled identity has pose {} and a second pose",
            anchor.pose
        )));
    }
    let b = pick(&candidates, rng);
    let others: Vec<usize> = part.poses[&b].iter().copied().filter(|&p| p != anchor.pose).collect();
    Ok(LabelledTriple {
        pose: anchor,
        identity: MeshKey::new(b, pick(&others, rng)),
        target: MeshKey::new(b, anchor.pose),
    })
}

fn unlabelled_triple(
    anchor: MeshKey,
    pair: &Partition,
    third: &Partition,
    rng: &mut Xoshiro256PlusPlus,
) -> Result<UnlabelledTriple> {
    let own: Vec<usize> = pair.poses[&anchor.identity]
        .iter()
        .copied()
        .filter(|&p| p != anchor.pose)
        .collect();
    if own.is_empty() {
        return Err(Error::Data(format!("identity {} has a single pose", anchor.identity)));
    }
    let a2 = MeshKey::new(anchor.identity, pick(&own, rng));
    let others: Vec<MeshKey> = third
        .keys
        .iter()
        .copied()
        .filter(|k| k.identity != anchor.identity)
        .collect();
    if others.is_empty() {
        return Err(Error::Data(format!(
            "no mesh of an identity other than {}",
            anchor.identity
        )));
    }
    Ok(UnlabelledTriple {
        a1: anchor,
        a2,
        b3: pick(&others, rng),
    })
}

fn supervised_items(data: &TrainData, cfg: &TrainingConfig, epoch: usize) -> Result<Vec<WorkItem>> {
    let part = data.partition(Some(true));
    if part.keys.is_empty() {
        return Err(Error::Data("no labelled meshes".into()));
    }
    let mut rng = rng_for(cfg.seeds.shuffle, epoch, 0);
    let mut anchors = part.keys.clone();
    anchors.shuffle(&mut rng);
    anchors
        .chunks(cfg.batch_size)
        .map(|chunk| {
            chunk
                .iter()
                .map(|&a| labelled_triple(a, &part, &mut rng))
                .collect::<Result<Vec<_>>>()
                .map(WorkItem::Labelled)
        })
        .collect()
}

fn unsupervised_items(data: &TrainData, cfg: &TrainingConfig, epoch: usize) -> Result<Vec<WorkItem>> {
    // Labels are irrelevant here: every mesh is only ever an input.
    let all = data.partition(None);
    let mut anchors = all.pairable();
    if anchors.is_empty() {
        return Err(Error::Data("no identity has two poses".into()));
    }
    let mut rng = rng_for(cfg.seeds.shuffle, epoch, 0);
    anchors.shuffle(&mut rng);
    anchors
        .chunks(cfg.batch_size)
        .map(|chunk| {
            let triples = chunk
                .iter()
                .map(|&a| unlabelled_triple(a, &all, &all, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            Ok(WorkItem::Unlabelled { case: None, triples })
        })
        .collect()
}

/// Labelled and unlabelled steps for one semi-supervised epoch. Labelled
/// steps are exactly those of supervised training; each is followed by an
/// unlabelled step whose sampling case is the running unlabelled-step
/// count modulo 3:
///
/// * 0: identity pair from the unlabelled part, third mesh labelled;
/// * 1: identity pair from the labelled part, third mesh unlabelled;
/// * 2: all three unlabelled.
///
/// Without unlabelled meshes this is supervised training.
pub fn semi_schedule(data: &TrainData, cfg: &TrainingConfig, epoch: usize) -> Result<Vec<WorkItem>> {
    let lab = data.partition(Some(true));
    let unl = data.partition(Some(false));
    if lab.keys.is_empty() {
        return Err(Error::Data("semi-supervised training needs labelled meshes".into()));
    }
    let l_items = supervised_items(data, cfg, epoch)?;
    if unl.keys.is_empty() {
        return Ok(l_items);
    }
    let (use_l, use_u) = match cfg.stage_switch_epoch {
        Some(s) if epoch < s => (true, false),
        Some(_) => (false, true),
        None => (true, true),
    };
    let u_epochs_before = match cfg.stage_switch_epoch {
        Some(s) => epoch.saturating_sub(s),
        None => epoch,
    };
    let count = l_items.len();
    let mut n_u = u_epochs_before * count;
    let mut rng = rng_for(cfg.seeds.shuffle, epoch, 1);
    let mut out = Vec::with_capacity(2 * count);
    for item in l_items {
        if use_l {
            out.push(item);
        }
        if use_u {
            let case = n_u % 3;
            let (pair, third) = match case {
                0 => (&unl, &lab),
                1 => (&lab, &unl),
                _ => (&unl, &unl),
            };
            let anchors = pair.pairable();
            if anchors.is_empty() {
                return Err(Error::Data(format!(
                    "sampling case {case} needs an identity with two poses"
                )));
            }
            let triples = (0..cfg.batch_size)
                .map(|_| {
                    let a = pick(&anchors, &mut rng);
                    unlabelled_triple(a, pair, third, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(WorkItem::Unlabelled {
                case: Some(case),
                triples,
            });
            n_u += 1;
        }
    }
    Ok(out)
}

/// Work items of one epoch for the configured mode.
pub fn schedule(data: &TrainData, cfg: &TrainingConfig, epoch: usize) -> Result<Vec<WorkItem>> {
    match cfg.mode {
        Mode::Supervised => supervised_items(data, cfg, epoch),
        Mode::Unsupervised => unsupervised_items(data, cfg, epoch),
        Mode::Semi => semi_schedule(data, cfg, epoch),
    }
}

/// Loss terms of one sample. Unweighted components are kept for logging;
/// terms with zero weight are not evaluated and stay `None`.
pub struct Terms<'g, T: Scalar> {
    pub rec: Var<'g, T>,
    pub edge: Var<'g, T>,
    pub mesh_cc: Option<Var<'g, T>>,
    pub mesh_ss: Option<Var<'g, T>>,
    pub point: Option<Var<'g, T>>,
    pub total: Var<'g, T>,
    /// Unsupervised only: the first self-consistency output, before the
    /// stop-gradient that feeds it to the second pass.
    pub first_pass: Option<Var<'g, T>>,
}

fn zero<'g, T: Scalar>(g: &'g Graph<T>) -> Var<'g, T> {
    g.constant(Tensor::scalar(T::zero()))
}

fn weighted_sum<'g, T: Scalar>(terms: &[(Var<'g, T>, f64)]) -> Result<Var<'g, T>> {
    let mut acc = terms[0].0.mul_scalar(T::from_f64_lossy(terms[0].1))?;
    for &(v, w) in &terms[1..] {
        acc = acc.add(v.mul_scalar(T::from_f64_lossy(w))?)?;
    }
    Ok(acc)
}

fn sum_vars<'g, T: Scalar>(vars: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = acc.add(v)?;
    }
    Ok(acc)
}

/// One labelled sample borrowed from an epoch.
pub struct LabelledSample<'a, T> {
    pub pose: &'a Tensor<T>,
    pub identity: &'a Prepared<T>,
    pub target: &'a Tensor<T>,
}

/// One unlabelled sample borrowed from an epoch.
pub struct UnlabelledSample<'a, T> {
    pub a1: &'a Tensor<T>,
    pub a2: &'a Prepared<T>,
    pub b3: &'a Tensor<T>,
}

/// Labelled objective: reconstruction and edge terms on the output, the
/// mesh triplet on (warp, pose input, identity input) with the binarised
/// plan, and the point triplet on (warp, identity input).
pub fn labelled_objective<'g, T: Scalar>(
    net: &Bound<'g, T>,
    s: &LabelledSample<'_, T>,
    cfg: &TrainingConfig,
) -> Result<Terms<'g, T>> {
    let g = net.graph();
    let w = &cfg.weights;
    let gen = net.generate(
        g.constant(s.pose.clone()),
        g.constant(s.identity.points.clone()),
        &cfg.ot,
    )?;
    let rec = rec_loss(gen.output, g.constant(s.target.clone()))?;
    let edge = edge_loss(gen.output, &s.identity.points, &s.identity.edges)?;
    let supervised = weighted_sum(&[(rec, w.rec), (edge, w.edge)])?;
    let (mut mesh_ss, mut point) = (None, None);
    if w.mesh_ss != 0.0 || w.point != 0.0 {
        let fw = net.feature_extract(gen.warped)?;
        if w.mesh_ss != 0.0 {
            mesh_ss = Some(mesh_ss_loss(
                &fw.split()?,
                &gen.feat_pose.split()?,
                &gen.feat_id.split()?,
                &gen.binary,
                w.margin,
            )?);
        }
        if w.point != 0.0 {
            point = Some(point_triplet(fw.values, gen.feat_id.values, w.margin)?);
        }
    }
    let total = labelled_total(
        supervised,
        mesh_ss.unwrap_or_else(|| zero(g)),
        point.unwrap_or_else(|| zero(g)),
        w,
    )?;
    Ok(Terms {
        rec,
        edge,
        mesh_cc: None,
        mesh_ss,
        point,
        total,
        first_pass: None,
    })
}

/// How the second self-consistency pass receives the first pass output.
pub enum SecondPass<'g, T: Scalar> {
    /// Through a stop-gradient, as in training.
    Detached,
    /// Stop-gradient plus an extra offset.
    Offset(Var<'g, T>),
    /// A fixed tensor in place of the first-pass output.
    Frozen(Tensor<T>),
}

pub fn unlabelled_objective<'g, T: Scalar>(
    net: &Bound<'g, T>,
    s: &UnlabelledSample<'_, T>,
    cfg: &TrainingConfig,
) -> Result<Terms<'g, T>> {
    unlabelled_objective_with(net, s, cfg, SecondPass::Detached)
}

/// Unlabelled objective. Cross-consistency transfers `x^{A1}`'s pose onto
/// `x^{A2}` and must give back `x^{A1}`; self-consistency sends the pose
/// of `x^{A1}` to `x^{B3}` and back onto `x^{A2}`.
pub fn unlabelled_objective_with<'g, T: Scalar>(
    net: &Bound<'g, T>,
    s: &UnlabelledSample<'_, T>,
    cfg: &TrainingConfig,
    second: SecondPass<'g, T>,
) -> Result<Terms<'g, T>> {
    let g = net.graph();
    let (w, ot) = (&cfg.weights, &cfg.ot);
    let x_a1 = g.constant(s.a1.clone());
    let x_a2 = g.constant(s.a2.points.clone());
    let x_b3 = g.constant(s.b3.clone());
    let f_a1 = net.feature_extract(x_a1)?;
    let f_a2 = net.feature_extract(x_a2)?;
    let f_b3 = net.feature_extract(x_b3)?;

    let cc = net.generate_from_features(x_a1, f_a1, f_a2, ot)?;
    let sc1 = net.generate_from_features(x_a1, f_a1, f_b3, ot)?;
    let hat_b1 = match second {
        SecondPass::Detached => sc1.output.stop_gradient()?,
        SecondPass::Offset(d) => sc1.output.stop_gradient()?.add(d)?,
        SecondPass::Frozen(t) => g.constant(t),
    };
    let f_hat = net.feature_extract(hat_b1)?;
    let sc2 = net.generate_from_features(hat_b1, f_hat, f_a2, ot)?;

    let rec = rec_loss(cc.output, x_a1)?.add(rec_loss(sc2.output, x_a1)?)?;
    let edge =
        edge_loss(cc.output, &s.a2.points, &s.a2.edges)?.add(edge_loss(sc2.output, &s.a2.points, &s.a2.edges)?)?;
    let unsup = weighted_sum(&[(rec, w.rec), (edge, w.edge)])?;

    let (mut mesh_cc, mut mesh_ss, mut point) = (None, None, None);
    let need_cc = w.mesh_cc != 0.0 || w.point != 0.0;
    let need_sc = w.mesh_ss != 0.0 || w.point != 0.0;
    let fw_cc = if need_cc {
        Some(net.feature_extract(cc.warped)?)
    } else {
        None
    };
    let fw_sc: Option<(LatentFeature<'g, T>, LatentFeature<'g, T>)> = if need_sc {
        Some((net.feature_extract(sc1.warped)?, net.feature_extract(sc2.warped)?))
    } else {
        None
    };
    if w.mesh_cc != 0.0 {
        let fw = fw_cc.as_ref().unwrap();
        mesh_cc = Some(mesh_cc_loss(&f_a1.split()?, &fw.split()?, &f_a2.split()?, w.margin)?);
    }
    if let (true, Some((fw1, fw2))) = (w.mesh_ss != 0.0, fw_sc.as_ref()) {
        let first = mesh_ss_loss(&fw1.split()?, &f_a1.split()?, &f_b3.split()?, &sc1.binary, w.margin)?;
        let second = mesh_ss_loss(&fw2.split()?, &f_hat.split()?, &f_a2.split()?, &sc2.binary, w.margin)?;
        mesh_ss = Some(first.add(second)?);
    }
    if w.point != 0.0 {
        let (fw1, fw2) = fw_sc.as_ref().unwrap();
        point = Some(sum_vars(&[
            point_triplet(fw_cc.as_ref().unwrap().values, f_a2.values, w.margin)?,
            point_triplet(fw1.values, f_b3.values, w.margin)?,
            point_triplet(fw2.values, f_a2.values, w.margin)?,
        ])?);
    }
    let total = unlabelled_total(
        unsup,
        mesh_cc.unwrap_or_else(|| zero(g)),
        mesh_ss.unwrap_or_else(|| zero(g)),
        point.unwrap_or_else(|| zero(g)),
        w,
    )?;
    Ok(Terms {
        rec,
        edge,
        mesh_cc,
        mesh_ss,
        point,
        total,
        first_pass: Some(sc1.output),
    })
}

/// Batch-averaged loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Components {
    pub rec: f64,
    pub edge: f64,
    pub mesh_cc: f64,
    pub mesh_ss: f64,
    pub point: f64,
    pub total: f64,
}

impl Components {
    fn all_finite(&self) -> bool {
        [self.rec, self.edge, self.mesh_cc, self.mesh_ss, self.point, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn value<T: Scalar>(v: Option<Var<'_, T>>) -> f64 {
    v.map_or(0.0, |v| v.item().as_f64())
}

/// Averages the batch, back-propagates and applies one Adam update. Nothing
/// is updated when a loss value or gradient is not finite.
fn optimise<T: Scalar>(
    params: &mut GeneratorParams<T>,
    adam: &mut AdamState<T>,
    lr: f64,
    build: impl for<'g> FnOnce(&Bound<'g, T>) -> Result<Vec<Terms<'g, T>>>,
) -> Result<Components> {
    let g = Graph::new();
    let net = params.bind(&g);
    let terms = build(&net)?;
    if terms.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let k = terms.len() as f64;
    let total = sum_vars(&terms.iter().map(|t| t.total).collect::<Vec<_>>())?.mul_scalar(T::from_f64_lossy(1.0 / k))?;
    let avg = |f: &dyn Fn(&Terms<'_, T>) -> f64| terms.iter().map(f).sum::<f64>() / k;
    let c = Components {
        rec: avg(&|t| t.rec.item().as_f64()),
        edge: avg(&|t| t.edge.item().as_f64()),
        mesh_cc: avg(&|t| value(t.mesh_cc)),
        mesh_ss: avg(&|t| value(t.mesh_ss)),
        point: avg(&|t| value(t.point)),
        total: total.item().as_f64(),
    };
    if !c.all_finite() {
        return Err(Error::NonFiniteValue {
            what: format!("loss components {c:?}"),
        });
    }
    let grads = net.params.gradients(&g.backward(total)?);
    if let Some((name, _)) = grads.iter().find(|(_, t)| !t.all_finite()) {
        return Err(Error::NonFiniteValue {
            what: format!("gradient of `{name}`"),
        });
    }
    drop(net);
    adam_step(&mut params.store, &grads, adam, lr)?;
    Ok(c)
}

/// One Adam step on the labelled objective averaged over `batch`.
pub fn supervised_step<T: Scalar>(
    params: &mut GeneratorParams<T>,
    adam: &mut AdamState<T>,
    batch: &[LabelledSample<'_, T>],
    cfg: &TrainingConfig,
    lr: f64,
) -> Result<Components> {
    optimise(params, adam, lr, |net| {
        batch.iter().map(|s| labelled_objective(net, s, cfg)).collect()
    })
}

/// One Adam step on the unlabelled objective averaged over `batch`.
pub fn unsupervised_step<T: Scalar>(
    params: &mut GeneratorParams<T>,
    adam: &mut AdamState<T>,
    batch: &[UnlabelledSample<'_, T>],
    cfg: &TrainingConfig,
    lr: f64,
) -> Result<Components> {
    optimise(params, adam, lr, |net| {
        batch.iter().map(|s| unlabelled_objective(net, s, cfg)).collect()
    })
}

pub const LOG_HEADER: &str = "epoch,iter,mode,lr,l_rec,l_edge,l_mesh_cc,l_mesh_ss,l_point,total";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub iter: usize,
    pub tag: Tag,
    pub lr: f64,
    pub values: Components,
}

impl LossRecord {
    pub fn csv_line(&self) -> String {
        let c = &self.values;
        format!(
            "{},{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.epoch, self.iter, self.tag, self.lr, c.rec, c.edge, c.mesh_cc, c.mesh_ss, c.point, c.total
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LossRecord>,
}

impl TrainLog {
    /// CSV text; `comments` become leading `# ` lines.
    pub fn to_csv(&self, comments: &[String]) -> String {
        let mut s = String::new();
        for c in comments {
            s.push_str("# ");
            s.push_str(c);
            s.push('\n');
        }
        s.push_str(LOG_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        s
    }
}

/// Parameters, optimiser state and log of one training run.
pub struct Trainer<'d, T: Scalar> {
    cfg: TrainingConfig,
    data: &'d TrainData,
    pub params: GeneratorParams<T>,
    pub adam: AdamState<T>,
    epoch: usize,
    pub log: TrainLog,
}

impl<'d, T: Scalar> Trainer<'d, T> {
    pub fn new(cfg: TrainingConfig, data: &'d TrainData) -> Result<Self> {
        cfg.validate()?;
        let params = GeneratorParams::init(cfg.dims, cfg.seeds.init)?;
        Ok(Trainer {
            cfg,
            data,
            params,
            adam: AdamState::new(),
            epoch: 0,
            log: TrainLog::default(),
        })
    }

    /// Continues from a checkpoint taken at an epoch boundary.
    pub fn resume(cfg: TrainingConfig, data: &'d TrainData, ck: Checkpoint<T>) -> Result<Self> {
        cfg.validate()?;
        if ck.params.dims != cfg.dims {
            return Err(Error::DimMismatch(format!(
                "checkpoint has {:?}, configuration asks for {:?}",
                ck.params.dims, cfg.dims
            )));
        }
        ck.params.check_against(&cfg.dims)?;
        Ok(Trainer {
            cfg,
            data,
            params: ck.params,
            adam: ck.adam,
            epoch: ck.epoch,
            log: TrainLog::default(),
        })
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.cfg
    }

    /// Next epoch to run.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            params: self.params.clone(),
            adam: self.adam.clone(),
            ot: self.cfg.ot,
            epoch: self.epoch,
        }
    }

    /// Runs one epoch and returns its records. On a non-finite loss or
    /// gradient the offending step is not applied and the error names it.
    pub fn run_epoch(&mut self) -> Result<&[LossRecord]> {
        if self.is_done() {
            return Err(Error::InvalidArgument(format!(
                "all {} epochs have already run",
                self.cfg.epochs
            )));
        }
        let epoch = self.epoch;
        let items = schedule(self.data, &self.cfg, epoch)?;
        let prepared = self.data.prepare::<T>(epoch, self.cfg.seeds.reorder)?;
        let start = self.log.records.len();
        let n = items.len() as f64;
        for (iter, item) in items.iter().enumerate() {
            let lr = lr_at(epoch as f64 + iter as f64 / n, &self.cfg);
            let outcome = self.run_item(&prepared, item, lr);
            let values = outcome.map_err(|e| match e {
                Error::NonFiniteValue { what } => Error::Diverged { epoch, iter, what },
                Error::NonFinite { op, index } => Error::Diverged {
                    epoch,
                    iter,
                    what: format!("{op} received a non-finite value at flat index {index}"),
                },
                other => other,
            })?;
            self.log.records.push(LossRecord {
                epoch,
                iter,
                tag: item.tag(),
                lr,
                values,
            });
        }
        self.epoch += 1;
        Ok(&self.log.records[start..])
    }

    fn run_item(&mut self, data: &EpochData<'_, T>, item: &WorkItem, lr: f64) -> Result<Components> {
        match item {
            WorkItem::Labelled(triples) => {
                let batch = triples
                    .iter()
                    .map(|t| {
                        Ok(LabelledSample {
                            pose: &data.input(t.pose)?.points,
                            identity: data.input(t.identity)?,
                            target: &data.ground_truth(t.target)?.points,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                supervised_step(&mut self.params, &mut self.adam, &batch, &self.cfg, lr)
            }
            WorkItem::Unlabelled { triples, .. } => {
                let batch = triples
                    .iter()
                    .map(|t| {
                        Ok(UnlabelledSample {
                            a1: &data.input(t.a1)?.points,
                            a2: data.input(t.a2)?,
                            b3: &data.input(t.b3)?.points,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                unsupervised_step(&mut self.params, &mut self.adam, &batch, &self.cfg, lr)
            }
        }
    }

    /// Runs the remaining epochs, calling `after_epoch` after each one.
    pub fn run(&mut self, mut after_epoch: impl FnMut(&Self) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            self.run_epoch()?;
            after_epoch(self)?;
        }
        Ok(())
    }
}

/// Evaluation preprocessing: the pose and identity meshes get independent
/// fixed reorderings derived from `seed`, the target follows the identity
/// mesh's order, and every mesh is centred on its own bounding box.
pub fn prepare_eval(
    pose: &Mesh,
    identity: &Mesh,
    target: Option<&Mesh>,
    seed: u64,
) -> Result<(Mesh, Mesh, Option<Mesh>)> {
    let (p, _) = preprocess(pose, mix(seed, 1, 0))?;
    let (i, perm) = preprocess(identity, mix(seed, 2, 0))?;
    let t = match target {
        Some(t) => {
            if t.num_vertices() != identity.num_vertices() {
                return Err(Error::Data(format!(
                    "target has {} vertices, identity mesh {}",
                    t.num_vertices(),
                    identity.num_vertices()
                )));
            }
            Some(zero_center(&perm.apply(t)?))
        }
        None => None,
    };
    Ok((p, i, t))
}

/// Transfers `pose` onto `identity` and scores the output against
/// `target`, the identity in the pose's posture.
pub fn evaluate_pair<T: Scalar>(
    params: &GeneratorParams<T>,
    pose: &Mesh,
    identity: &Mesh,
    target: &Mesh,
    ot: &OtConfig,
    seed: u64,
) -> Result<MetricReport> {
    let (p, i, t) = prepare_eval(pose, identity, Some(target), seed)?;
    let out = params.transfer(&p, &i, ot)?;
    MetricReport::compute(&points_of(&out.output)?, &points_of(&t.unwrap().to_tensor::<f64>())?)
}

/// Point-wise mesh distance only, skipping the costlier metrics.
pub fn pair_pmd<T: Scalar>(
    params: &GeneratorParams<T>,
    pose: &Mesh,
    identity: &Mesh,
    target: &Mesh,
    ot: &OtConfig,
    seed: u64,
) -> Result<f64> {
    let (p, i, t) = prepare_eval(pose, identity, Some(target), seed)?;
    let out = params.transfer(&p, &i, ot)?;
    crate::metrics::pmd(&points_of(&out.output)?, &points_of(&t.unwrap().to_tensor::<f64>())?)
}

/// Output and warped meshes of one transfer, both carrying the identity
/// mesh's faces and original vertex order. Coordinates stay centred.
#[derive(Clone, Debug)]
pub struct TransferredMeshes {
    pub output: Mesh,
    pub warped: Mesh,
}

pub fn transfer_meshes<T: Scalar>(
    params: &GeneratorParams<T>,
    pose: &Mesh,
    identity: &Mesh,
    ot: &OtConfig,
    seed: u64,
) -> Result<TransferredMeshes> {
    let (p, _) = preprocess(pose, mix(seed, 1, 0))?;
    let (i, perm) = preprocess(identity, mix(seed, 2, 0))?;
    let out = params.transfer(&p, &i, ot)?;
    // row mapping[old] of the network output belongs to original vertex old
    Ok(TransferredMeshes {
        output: identity.with_tensor(&out.output.gather_rows(&perm.mapping))?,
        warped: identity.with_tensor(&out.warped.gather_rows(&perm.mapping))?,
    })
}

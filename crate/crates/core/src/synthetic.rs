//! Articulated tube meshes with independent identity (segment lengths and
//! radii) and pose (joint angles) factors, so the ground truth of any
//! identity/pose combination is available exactly.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::mesh::{load_mesh, save_mesh, Mesh, MeshFormat};

/// Shortest edge any generated mesh may contain.
pub const MIN_EDGE: f64 = 1e-4;
/// Lower bound on segment lengths and radii.
pub const MIN_EXTENT: f64 = 0.02;

pub const MANIFEST_NAME: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "identity_id,pose_id,labelled,relative_path";

#[derive(Clone, Debug, PartialEq)]
pub struct IdentitySpec {
    pub id: usize,
    pub lengths: Vec<f64>,
    pub radii: Vec<f64>,
}

impl IdentitySpec {
    pub fn validate(&self) -> Result<()> {
        if self.lengths.len() < 2 || self.lengths.len() != self.radii.len() {
            return Err(Error::InvalidArgument(format!(
                "identity {}: need matching lengths and radii for at least 2 segments",
                self.id
            )));
        }
        if self
            .lengths
            .iter()
            .chain(&self.radii)
            .any(|&v| !(v > MIN_EXTENT) || !v.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "identity {}: lengths and radii must exceed {MIN_EXTENT}",
                self.id
            )));
        }
        Ok(())
    }

    pub fn segments(&self) -> usize {
        self.lengths.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseSpec {
    pub id: usize,
    pub angles: Vec<f64>,
}

impl PoseSpec {
    pub fn validate(&self) -> Result<()> {
        if self.angles.iter().any(|a| !(a.abs() <= PI / 2.0)) {
            return Err(Error::InvalidArgument(format!(
                "pose {}: joint angles must lie in [-pi/2, pi/2]",
                self.id
            )));
        }
        Ok(())
    }
}

/// Sampling ranges for random identities and poses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingRanges {
    pub length: (f64, f64),
    pub radius: (f64, f64),
    pub angle: (f64, f64),
}

impl Default for SamplingRanges {
    fn default() -> Self {
        SamplingRanges {
            length: (0.25, 0.55),
            radius: (0.04, 0.12),
            angle: (-PI / 3.0, PI / 3.0),
        }
    }
}

pub fn sample_identity<R: Rng>(id: usize, segments: usize, ranges: &SamplingRanges, rng: &mut R) -> IdentitySpec {
    let lengths = (0..segments)
        .map(|_| rng.gen_range(ranges.length.0..ranges.length.1))
        .collect();
    let radii = (0..segments)
        .map(|_| rng.gen_range(ranges.radius.0..ranges.radius.1))
        .collect();
    IdentitySpec { id, lengths, radii }
}

pub fn sample_pose<R: Rng>(id: usize, segments: usize, ranges: &SamplingRanges, rng: &mut R) -> PoseSpec {
    let angles = (0..segments - 1)
        .map(|_| rng.gen_range(ranges.angle.0..ranges.angle.1))
        .collect();
    PoseSpec { id, angles }
}

/// Vertex count of a tube with `segments` segments.
pub fn vertex_count(segments: usize, rings: usize, sides: usize) -> usize {
    segments * rings * sides + 2
}

/// Sweeps circles along a planar chain bent by the pose's joint angles.
///
/// Vertex layout: start cap, then rings segment by segment (each ring's
/// `sides` vertices in angular order), then the end cap. The layout and the
/// faces depend only on `(segments, rings, sides)`.
pub fn make_mesh(id: &IdentitySpec, pose: &PoseSpec, rings: usize, sides: usize) -> Result<Mesh> {
    id.validate()?;
    pose.validate()?;
    let j = id.segments();
    if pose.angles.len() != j - 1 {
        return Err(Error::InvalidArgument(format!(
            "pose {} has {} angles for {j} segments",
            pose.id,
            pose.angles.len()
        )));
    }
    if rings < 2 || sides < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 rings and 3 sides, got {rings} and {sides}"
        )));
    }

    let mut verts: Vec<[f64; 3]> = Vec::with_capacity(vertex_count(j, rings, sides));
    verts.push([0.0; 3]);
    let mut start = [0.0f64, 0.0];
    let mut heading = 0.0f64;
    for s in 0..j {
        if s > 0 {
            heading += pose.angles[s - 1];
        }
        let (dir, normal) = ([heading.cos(), heading.sin()], [-heading.sin(), heading.cos()]);
        let (len, rho) = (id.lengths[s], id.radii[s]);
        for r in 0..rings {
            let t = (r as f64 + 0.5) / rings as f64 * len;
            let c = [start[0] + t * dir[0], start[1] + t * dir[1]];
            for k in 0..sides {
                let phi = 2.0 * PI * k as f64 / sides as f64;
                let (cp, sp) = (rho * phi.cos(), rho * phi.sin());
                verts.push([c[0] + cp * normal[0], c[1] + cp * normal[1], sp]);
            }
        }
        start = [start[0] + len * dir[0], start[1] + len * dir[1]];
    }
    verts.push([start[0], start[1], 0.0]);

    let faces = tube_faces(j * rings, sides);
    let mesh = Mesh::new(
        format!("id{}_pose{}", id.id, pose.id),
        verts.iter().map(|v| v.map(|x| x as f32)).collect(),
        faces,
    )?;
    check_edges(&mesh)?;
    Ok(mesh)
}

fn tube_faces(total_rings: usize, sides: usize) -> Vec<[usize; 3]> {
    let ring = |g: usize, k: usize| 1 + g * sides + k % sides;
    let end = 1 + total_rings * sides;
    let mut faces = Vec::with_capacity(2 * sides * total_rings);
    for k in 0..sides {
        faces.push([0, ring(0, k + 1), ring(0, k)]);
    }
    for g in 0..total_rings - 1 {
        for k in 0..sides {
            let (a0, a1, b0, b1) = (ring(g, k), ring(g, k + 1), ring(g + 1, k), ring(g + 1, k + 1));
            faces.push([a0, a1, b1]);
            faces.push([a0, b1, b0]);
        }
    }
    for k in 0..sides {
        faces.push([end, ring(total_rings - 1, k), ring(total_rings - 1, k + 1)]);
    }
    faces
}

fn check_edges(mesh: &Mesh) -> Result<()> {
    match mesh.min_edge_length() {
        Some(l) if l < MIN_EDGE => Err(Error::InvalidMesh(format!(
            "{}: edge of length {l:e} is shorter than {MIN_EDGE:e}",
            mesh.name
        ))),
        _ => Ok(()),
    }
}

/// Adds independent uniform noise in `[-amplitude, amplitude]` to every
/// coordinate.
pub fn add_noise(mesh: &Mesh, amplitude: f64, seed: u64) -> Result<Mesh> {
    if amplitude == 0.0 {
        return Ok(mesh.clone());
    }
    if !(amplitude > 0.0) {
        return Err(Error::InvalidArgument(format!("noise amplitude {amplitude}")));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let verts = mesh
        .vertices()
        .iter()
        .map(|v| v.map(|x| (x as f64 + rng.gen_range(-amplitude..=amplitude)) as f32))
        .collect();
    let noisy = mesh.with_vertices(verts)?;
    check_edges(&noisy)?;
    Ok(noisy)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub n_ids: usize,
    pub n_poses: usize,
    pub seed: u64,
    /// Fraction of identities and of poses kept for the labelled part.
    pub split: f64,
    pub segments: usize,
    pub rings: usize,
    pub sides: usize,
    pub noise: f64,
    pub ranges: SamplingRanges,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_ids: 4,
            n_poses: 4,
            seed: 0,
            split: 1.0,
            segments: 5,
            rings: 6,
            sides: 10,
            noise: 0.0,
            ranges: SamplingRanges::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub identity: usize,
    pub pose: usize,
    pub labelled: bool,
    pub path: String,
}

impl ManifestEntry {
    pub fn to_line(&self) -> String {
        format!("{},{},{},{}", self.identity, self.pose, self.labelled as u8, self.path)
    }
}

/// Generated meshes together with their manifest rows.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub identities: Vec<IdentitySpec>,
    pub poses: Vec<PoseSpec>,
    pub entries: Vec<ManifestEntry>,
    pub meshes: Vec<Mesh>,
}

fn kept_count(split: f64, n: usize) -> usize {
    if split <= 0.0 {
        0
    } else {
        ((split * n as f64).round() as usize).clamp(1, n)
    }
}

fn choose(n: usize, k: usize, rng: &mut Xoshiro256PlusPlus) -> Vec<bool> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let mut keep = vec![false; n];
    for &i in &order[..k] {
        keep[i] = true;
    }
    keep
}

/// Samples identities and poses and builds every mesh of the split: kept
/// identities in kept poses are labelled, the remaining identities in the
/// remaining poses are unlabelled.
pub fn make_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.n_ids < 2 || cfg.n_poses < 2 {
        return Err(Error::InvalidArgument("need at least 2 identities and 2 poses".into()));
    }
    if !(0.0..=1.0).contains(&cfg.split) {
        return Err(Error::InvalidArgument(format!("split {} outside [0, 1]", cfg.split)));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let identities: Vec<_> = (0..cfg.n_ids)
        .map(|i| sample_identity(i, cfg.segments, &cfg.ranges, &mut rng))
        .collect();
    let poses: Vec<_> = (0..cfg.n_poses)
        .map(|p| sample_pose(p, cfg.segments, &cfg.ranges, &mut rng))
        .collect();
    let keep_id = choose(cfg.n_ids, kept_count(cfg.split, cfg.n_ids), &mut rng);
    let keep_pose = choose(cfg.n_poses, kept_count(cfg.split, cfg.n_poses), &mut rng);

    let mut entries = Vec::new();
    let mut meshes = Vec::new();
    for id in &identities {
        for pose in &poses {
            let (ki, kp) = (keep_id[id.id], keep_pose[pose.id]);
            if ki != kp {
                continue;
            }
            let mut mesh = make_mesh(id, pose, cfg.rings, cfg.sides)?;
            if cfg.noise > 0.0 {
                let noise_seed = cfg.seed ^ ((id.id as u64) << 32 | pose.id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                mesh = add_noise(&mesh, cfg.noise, noise_seed)?;
            }
            entries.push(ManifestEntry {
                identity: id.id,
                pose: pose.id,
                labelled: ki,
                path: format!("meshes/id{:03}_pose{:03}.obj", id.id, pose.id),
            });
            meshes.push(mesh);
        }
    }
    Ok(Dataset {
        identities,
        poses,
        entries,
        meshes,
    })
}

impl Dataset {
    /// Writes every mesh as OBJ plus `manifest.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir.join("meshes"))?;
        let mut manifest = String::from(MANIFEST_HEADER);
        manifest.push('\n');
        for (e, m) in self.entries.iter().zip(&self.meshes) {
            save_mesh(m, dir.join(&e.path), MeshFormat::Obj)?;
            manifest.push_str(&e.to_line());
            manifest.push('\n');
        }
        let path = dir.join(MANIFEST_NAME);
        fs::write(&path, manifest)?;
        Ok(path)
    }

    pub fn labelled_count(&self) -> usize {
        self.entries.iter().filter(|e| e.labelled).count()
    }
}

/// Reads manifest rows; paths stay relative to the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (i == 0 && line == MANIFEST_HEADER) {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let fields: Vec<&str> = line.splitn(4, ',').collect();
        let [id, pose, lab, rel] = fields[..] else {
            return Err(bad("expected 4 comma-separated fields"));
        };
        out.push(ManifestEntry {
            identity: id.parse().map_err(|_| bad("bad identity id"))?,
            pose: pose.parse().map_err(|_| bad("bad pose id"))?,
            labelled: match lab {
                "0" => false,
                "1" => true,
                _ => return Err(bad("labelled must be 0 or 1")),
            },
            path: rel.to_string(),
        });
    }
    Ok(out)
}

/// Loads the meshes named by a manifest.
pub fn load_manifest(path: &Path) -> Result<(Vec<ManifestEntry>, Vec<Mesh>)> {
    let entries = read_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let meshes = entries
        .iter()
        .map(|e| load_mesh(base.join(&e.path)))
        .collect::<Result<Vec<_>>>()?;
    Ok((entries, meshes))
}

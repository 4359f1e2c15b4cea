//! Triangle meshes, ASCII OBJ/PLY input and output, and the two
//! preprocessing steps applied to every network input: random vertex
//! reordering followed by bounding-box centring.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fixed seed used for reordering at evaluation time.
pub const DEFAULT_EVAL_SEED: u64 = 9001;

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub name: String,
    vertices: Vec<[f32; 3]>,
    faces: Option<Vec<[usize; 3]>>,
    edges: Vec<(usize, usize)>,
}

fn edges_from_faces(faces: &[[usize; 3]]) -> Vec<(usize, usize)> {
    let mut set = BTreeSet::new();
    for f in faces {
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            if a != b {
                set.insert((a.min(b), a.max(b)));
            }
        }
    }
    set.into_iter().collect()
}

impl Mesh {
    /// Triangle mesh; the edge set is derived from the faces.
    pub fn new(name: impl Into<String>, vertices: Vec<[f32; 3]>, faces: Vec<[usize; 3]>) -> Result<Self> {
        if vertices.is_empty() {
            return Err(Error::NoVertices);
        }
        let n = vertices.len();
        for f in &faces {
            for &i in f {
                if i >= n {
                    return Err(Error::IndexOutOfRange { index: i, len: n });
                }
            }
        }
        let edges = edges_from_faces(&faces);
        Ok(Mesh {
            name: name.into(),
            vertices,
            faces: Some(faces),
            edges,
        })
    }

    /// Vertices with an explicit edge set and no faces.
    pub fn point_cloud(name: impl Into<String>, vertices: Vec<[f32; 3]>, edges: Vec<(usize, usize)>) -> Result<Self> {
        if vertices.is_empty() {
            return Err(Error::NoVertices);
        }
        let n = vertices.len();
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::IndexOutOfRange {
                    index: a.max(b),
                    len: n,
                });
            }
            if a == b {
                return Err(Error::InvalidMesh(format!("self-loop at vertex {a}")));
            }
            set.insert((a.min(b), a.max(b)));
        }
        Ok(Mesh {
            name: name.into(),
            vertices,
            faces: None,
            edges: set.into_iter().collect(),
        })
    }

    pub fn vertices(&self) -> &[[f32; 3]] {
        &self.vertices
    }

    pub fn faces(&self) -> Option<&[[usize; 3]]> {
        self.faces.as_deref()
    }

    /// Unordered unique pairs `(i, j)` with `i < j`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    /// Same topology with new coordinates.
    pub fn with_vertices(&self, vertices: Vec<[f32; 3]>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::InvalidMesh(format!(
                "expected {} vertices, got {}",
                self.vertices.len(),
                vertices.len()
            )));
        }
        Ok(Mesh {
            vertices,
            ..self.clone()
        })
    }

    /// Same topology with coordinates taken from an `N x 3` tensor.
    pub fn with_tensor<T: Scalar>(&self, t: &Tensor<T>) -> Result<Self> {
        let (n, c) = t.dims2("mesh")?;
        if c != 3 || n != self.vertices.len() {
            return Err(Error::shape("mesh", t.shape(), format!("[{}, 3]", self.vertices.len())));
        }
        let verts = (0..n)
            .map(|i| {
                let r = t.row(i);
                [r[0].as_f64() as f32, r[1].as_f64() as f32, r[2].as_f64() as f32]
            })
            .collect();
        self.with_vertices(verts)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .vertices
            .iter()
            .flat_map(|v| v.iter().map(|&x| T::from_f64_lossy(x as f64)))
            .collect();
        Tensor::matrix(self.vertices.len(), 3, data).expect("non-empty mesh")
    }

    pub fn translated(&self, t: [f32; 3]) -> Mesh {
        let vertices = self
            .vertices
            .iter()
            .map(|v| [v[0] + t[0], v[1] + t[1], v[2] + t[2]])
            .collect();
        Mesh {
            vertices,
            ..self.clone()
        }
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounding_box(&self) -> ([f32; 3], [f32; 3]) {
        let mut lo = [f32::INFINITY; 3];
        let mut hi = [f32::NEG_INFINITY; 3];
        for v in &self.vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        (lo, hi)
    }

    /// Shortest edge length, `None` without edges.
    pub fn min_edge_length(&self) -> Option<f64> {
        self.edges
            .iter()
            .map(|&(a, b)| dist(self.vertices[a], self.vertices[b]))
            .reduce(f64::min)
    }
}

fn dist(a: [f32; 3], b: [f32; 3]) -> f64 {
    (0..3)
        .map(|i| {
            let d = a[i] as f64 - b[i] as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// A bijection on `[0, N)`: `mapping[old] = new`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    pub mapping: Vec<usize>,
    pub seed: u64,
}

impl Permutation {
    /// Uniform random permutation of `n` indices (Fisher-Yates on a
    /// xoshiro256++ stream seeded with `seed`).
    pub fn random(n: usize, seed: u64) -> Self {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        // order[new] = old
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut mapping = vec![0; n];
        for (new, &old) in order.iter().enumerate() {
            mapping[old] = new;
        }
        Permutation { mapping, seed }
    }

    pub fn identity(n: usize) -> Self {
        Permutation {
            mapping: (0..n).collect(),
            seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    /// `inverse[new] = old`.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.mapping.len()];
        for (old, &new) in self.mapping.iter().enumerate() {
            inv[new] = old;
        }
        inv
    }

    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.mapping.len()];
        self.mapping
            .iter()
            .all(|&m| m < seen.len() && !std::mem::replace(&mut seen[m], true))
    }

    /// Reorders a mesh: vertex `old` moves to position `mapping[old]` and
    /// all face and edge indices follow it.
    pub fn apply(&self, mesh: &Mesh) -> Result<Mesh> {
        let n = mesh.num_vertices();
        if self.mapping.len() != n {
            return Err(Error::InvalidMesh(format!(
                "permutation of {} indices applied to {n} vertices",
                self.mapping.len()
            )));
        }
        let inv = self.inverse();
        let vertices = inv.iter().map(|&old| mesh.vertices[old]).collect();
        let m = &self.mapping;
        let faces = mesh
            .faces
            .as_ref()
            .map(|fs| fs.iter().map(|f| [m[f[0]], m[f[1]], m[f[2]]]).collect::<Vec<_>>());
        let edges = match &faces {
            Some(fs) => edges_from_faces(fs),
            None => {
                let mut e: Vec<_> = mesh
                    .edges
                    .iter()
                    .map(|&(a, b)| (m[a].min(m[b]), m[a].max(m[b])))
                    .collect();
                e.sort_unstable();
                e
            }
        };
        Ok(Mesh {
            name: mesh.name.clone(),
            vertices,
            faces,
            edges,
        })
    }
}

/// Randomly and reproducibly reorders the vertices of `mesh`.
pub fn random_reorder(mesh: &Mesh, seed: u64) -> Result<(Mesh, Permutation)> {
    let perm = Permutation::random(mesh.num_vertices(), seed);
    Ok((perm.apply(mesh)?, perm))
}

/// Translates so the bounding box is centred on the origin.
pub fn zero_center(mesh: &Mesh) -> Mesh {
    let (lo, hi) = mesh.bounding_box();
    let shift = [0, 1, 2].map(|a| (-(lo[a] as f64 + hi[a] as f64) / 2.0) as f32);
    mesh.translated(shift)
}

/// Reorder, then centre: the fixed preprocessing order.
pub fn preprocess(mesh: &Mesh, seed: u64) -> Result<(Mesh, Permutation)> {
    let (reordered, perm) = random_reorder(mesh, seed)?;
    Ok((zero_center(&reordered), perm))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Ply,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "obj" => Some(MeshFormat::Obj),
            "ply" => Some(MeshFormat::Ply),
            _ => None,
        }
    }
}

/// Reads an ASCII OBJ or PLY file, chosen by extension or, failing that,
/// by the `ply` magic line.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("mesh").to_string();
    let format = MeshFormat::from_path(path).unwrap_or(if text.starts_with("ply") {
        MeshFormat::Ply
    } else {
        MeshFormat::Obj
    });
    match format {
        MeshFormat::Obj => parse_obj(&text, path, name),
        MeshFormat::Ply => parse_ply(&text, path, name),
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: PathBuf::from(path),
        line,
        msg: msg.into(),
    }
}

fn parse_coords<'a>(mut it: impl Iterator<Item = &'a str>, path: &Path, line: usize) -> Result<[f32; 3]> {
    let mut v = [0f32; 3];
    for slot in v.iter_mut() {
        let tok = it
            .next()
            .ok_or_else(|| parse_err(path, line, "expected three coordinates"))?;
        let x: f64 = tok
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad coordinate `{tok}`")))?;
        *slot = x as f32;
    }
    Ok(v)
}

/// Adds the fan triangulation of a polygon.
fn push_polygon(faces: &mut Vec<[usize; 3]>, poly: &[usize], path: &Path, line: usize) -> Result<()> {
    if poly.len() < 3 {
        return Err(parse_err(path, line, "face with fewer than three vertices"));
    }
    for k in 1..poly.len() - 1 {
        faces.push([poly[0], poly[k], poly[k + 1]]);
    }
    Ok(())
}

fn parse_obj(text: &str, path: &Path, name: String) -> Result<Mesh> {
    let mut vertices = Vec::new();
    let mut polys: Vec<(usize, Vec<i64>)> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut it = line.split_whitespace();
        let Some(tag) = it.next() else { continue };
        match tag {
            "v" => vertices.push(parse_coords(it, path, line_no)?),
            "f" => {
                let idx = it
                    .map(|tok| {
                        let head = tok.split('/').next().unwrap_or("");
                        head.parse::<i64>()
                            .map_err(|_| parse_err(path, line_no, format!("bad face index `{tok}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                polys.push((line_no, idx));
            }
            "vt" | "vn" | "vp" | "o" | "g" | "s" | "usemtl" | "mtllib" | "l" | "p" => {}
            other => return Err(parse_err(path, line_no, format!("unknown record `{other}`"))),
        }
    }
    if vertices.is_empty() {
        return Err(Error::NoVertices);
    }
    let n = vertices.len();
    let mut faces = Vec::new();
    for (line_no, idx) in polys {
        let resolved = idx
            .into_iter()
            .map(|i| {
                let r = if i > 0 { i - 1 } else { n as i64 + i };
                if i == 0 || r < 0 || r >= n as i64 {
                    Err(Error::IndexOutOfRange {
                        index: i.unsigned_abs() as usize,
                        len: n,
                    })
                } else {
                    Ok(r as usize)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        push_polygon(&mut faces, &resolved, path, line_no)?;
    }
    Mesh::new(name, vertices, faces)
}

struct PlyElement {
    name: String,
    count: usize,
    props: Vec<String>,
}

fn parse_ply(text: &str, path: &Path, name: String) -> Result<Mesh> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_err(path, 1, "missing `ply` magic")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut header_done = false;
    for (ln, line) in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] => {}
            ["format", fmt, ..] => return Err(parse_err(path, ln, format!("unsupported PLY format `{fmt}`"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", el, count] => elements.push(PlyElement {
                name: el.to_string(),
                count: count.parse().map_err(|_| parse_err(path, ln, "bad element count"))?,
                props: Vec::new(),
            }),
            ["property", "list", _, _, prop] | ["property", _, prop] => match elements.last_mut() {
                Some(el) => el.props.push(prop.to_string()),
                None => return Err(parse_err(path, ln, "property before element")),
            },
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(parse_err(path, ln, format!("unexpected header line `{line}`"))),
        }
    }
    if !header_done {
        return Err(parse_err(path, 0, "missing end_header"));
    }

    let mut body = lines.filter(|(_, l)| !l.is_empty());
    let mut vertices = Vec::new();
    let mut polys: Vec<(usize, Vec<usize>)> = Vec::new();
    for el in &elements {
        for _ in 0..el.count {
            let (ln, line) = body
                .next()
                .ok_or_else(|| parse_err(path, 0, format!("truncated `{}` element", el.name)))?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            match el.name.as_str() {
                "vertex" => {
                    let pos = |axis: &str| {
                        el.props
                            .iter()
                            .position(|p| p == axis)
                            .ok_or_else(|| parse_err(path, ln, format!("vertex lacks `{axis}`")))
                    };
                    let (ix, iy, iz) = (pos("x")?, pos("y")?, pos("z")?);
                    let get = |i: usize| -> Result<f32> {
                        toks.get(i)
                            .and_then(|t| t.parse::<f64>().ok())
                            .map(|v| v as f32)
                            .ok_or_else(|| parse_err(path, ln, "bad vertex record"))
                    };
                    vertices.push([get(ix)?, get(iy)?, get(iz)?]);
                }
                "face" => {
                    let nums = toks
                        .iter()
                        .map(|t| t.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| parse_err(path, ln, "bad face record"))?;
                    let (&count, rest) = nums
                        .split_first()
                        .ok_or_else(|| parse_err(path, ln, "empty face record"))?;
                    if rest.len() < count {
                        return Err(parse_err(path, ln, "face record shorter than its count"));
                    }
                    polys.push((ln, rest[..count].to_vec()));
                }
                _ => {}
            }
        }
    }
    if vertices.is_empty() {
        return Err(Error::NoVertices);
    }
    let n = vertices.len();
    let mut faces = Vec::new();
    for (ln, poly) in polys {
        if let Some(&bad) = poly.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { index: bad, len: n });
        }
        push_polygon(&mut faces, &poly, path, ln)?;
    }
    if faces.is_empty() {
        Mesh::point_cloud(name, vertices, Vec::new())
    } else {
        Mesh::new(name, vertices, faces)
    }
}

/// Writes an ASCII OBJ or PLY file with six decimal places per coordinate.
pub fn save_mesh(mesh: &Mesh, path: impl AsRef<Path>, format: MeshFormat) -> Result<()> {
    let mut out = String::new();
    let faces = mesh.faces().unwrap_or(&[]);
    match format {
        MeshFormat::Obj => {
            for v in mesh.vertices() {
                let _ = writeln!(out, "v {} {} {}", v[0], v[1], v[2]);
            }
            for f in faces {
                let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
            }
        }
        MeshFormat::Ply => {
            out.push_str("ply\nformat ascii 1.0\n");
            let _ = writeln!(out, "element vertex {}", mesh.num_vertices());
            out.push_str("property float x\nproperty float y\nproperty float z\n");
            let _ = writeln!(out, "element face {}", faces.len());
            out.push_str("property list uchar int vertex_indices\nend_header\n");
            for v in mesh.vertices() {
                let _ = writeln!(out, "{} {} {}", v[0], v[1], v[2]);
            }
            for f in faces {
                let _ = writeln!(out, "3 {} {} {}", f[0], f[1], f[2]);
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

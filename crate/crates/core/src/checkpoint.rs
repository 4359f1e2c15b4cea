//! Binary checkpoint container: little-endian, `MAPC` magic, version 1, then
//! named tensors with `f32` payloads. Adam moments are stored as
//! `<name>/m` and `<name>/v`; bookkeeping values use a `__` prefix.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{GeneratorParams, ModelDims, OtConfig};
use crate::optim::{AdamState, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MAPC";
pub const VERSION: u32 = 1;

const STEP: &str = "__step";
const DIMS: &str = "__dims";
const SINKHORN: &str = "__sinkhorn";
const EPOCH: &str = "__epoch";

/// Everything needed to resume training at an epoch boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub params: GeneratorParams<T>,
    pub adam: AdamState<T>,
    pub ot: OtConfig,
    /// Index of the next epoch to run.
    pub epoch: usize,
}

fn push_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) -> Result<()> {
    let bytes = name.as_bytes();
    let len = u16::try_from(bytes.len()).map_err(|_| Error::Checkpoint(format!("tensor name `{name}` is too long")))?;
    let rank =
        u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("tensor `{name}` has too many dimensions")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(bytes);
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("dimension {d} too large")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    Ok(())
}

fn small<T: Scalar>(values: &[f64]) -> Tensor<T> {
    Tensor::new(
        vec![values.len()],
        values.iter().map(|&v| T::from_f64_lossy(v)).collect(),
    )
    .expect("length matches")
}

pub fn encode<T: Scalar>(ck: &Checkpoint<T>) -> Result<Vec<u8>> {
    let mut named: Vec<(String, Tensor<T>)> = Vec::new();
    for (name, t) in ck.params.store.iter() {
        named.push((name.clone(), t.clone()));
        // Moments that were never touched are stored as zeros so every
        // parameter has both entries.
        let m = ck.adam.m.get(name).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        let v = ck.adam.v.get(name).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        named.push((format!("{name}/m"), m));
        named.push((format!("{name}/v"), v));
    }
    let dims: Vec<f64> = ck.params.dims.to_vec().iter().map(|&d| d as f64).collect();
    named.push((DIMS.into(), small(&dims)));
    named.push((SINKHORN.into(), small(&[ck.ot.eps, ck.ot.iterations as f64])));
    named.push((STEP.into(), small(&[ck.adam.step as f64])));
    named.push((EPOCH.into(), small(&[ck.epoch as f64])));

    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in &named {
        push_tensor(&mut out, name, t)?;
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Reads every named tensor of a container.
pub fn decode_tensors<T: Scalar>(bytes: &[u8]) -> Result<BTreeMap<String, Tensor<T>>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel.saturating_mul(4) > bytes.len() - r.pos {
            return Err(Error::Truncated);
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(T::from_f64_lossy(r.f32()? as f64));
        }
        if out.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

fn take_meta<T: Scalar>(tensors: &mut BTreeMap<String, Tensor<T>>, name: &str, len: usize) -> Result<Vec<f64>> {
    let t = tensors
        .remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing `{name}`")))?;
    if t.numel() != len {
        return Err(Error::Checkpoint(format!(
            "`{name}` holds {} values, expected {len}",
            t.numel()
        )));
    }
    Ok(t.data().iter().map(|v| v.as_f64()).collect())
}

fn as_count(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v.is_finite() {
        Ok(v as usize)
    } else {
        Err(Error::Checkpoint(format!("`{what}` is not a count: {v}")))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut tensors = decode_tensors::<T>(bytes)?;
    let dims_raw = take_meta(&mut tensors, DIMS, 10)?;
    let dims_vec = dims_raw
        .iter()
        .map(|&v| as_count(v, DIMS))
        .collect::<Result<Vec<_>>>()?;
    let dims = ModelDims::from_slice(&dims_vec)?;
    let sk = take_meta(&mut tensors, SINKHORN, 2)?;
    // The payload is f32; go back through its shortest decimal form so a
    // value such as 0.05 is recovered exactly.
    let eps: f64 = format!("{}", sk[0] as f32).parse().expect("float formatting");
    let ot = OtConfig {
        eps,
        iterations: as_count(sk[1], SINKHORN)?,
    };
    let step = as_count(take_meta(&mut tensors, STEP, 1)?[0], STEP)? as u64;
    let epoch = as_count(take_meta(&mut tensors, EPOCH, 1)?[0], EPOCH)?;

    let mut store = ParamStore::new();
    let mut adam = AdamState::new();
    adam.step = step;
    let names: Vec<String> = tensors
        .keys()
        .filter(|k| !k.ends_with("/m") && !k.ends_with("/v"))
        .cloned()
        .collect();
    for name in names {
        let value = tensors.remove(&name).unwrap();
        for (suffix, slot) in [("/m", &mut adam.m), ("/v", &mut adam.v)] {
            let moment = tensors
                .remove(&format!("{name}{suffix}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing `{name}{suffix}`")))?;
            if moment.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}{suffix}` shape differs from its parameter"
                )));
            }
            slot.insert(name.clone(), moment);
        }
        store.insert(name, value)?;
    }
    if let Some(stray) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("moment `{stray}` has no parameter")));
    }
    let params = GeneratorParams { dims, store };
    params.check_against(&dims)?;
    Ok(Checkpoint {
        params,
        adam,
        ot,
        epoch,
    })
}

/// Writes through a temporary file and a rename, so an interrupted save
/// never replaces a good checkpoint with a partial one.
pub fn save_checkpoint<T: Scalar>(ck: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(ck)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        let dims = ModelDims::scaled(8).unwrap();
        let params = GeneratorParams::<f32>::init(dims, 3).unwrap();
        let mut adam = AdamState::new();
        for (name, t) in params.store.iter() {
            adam.m.insert(name.clone(), t.map(|x| x * 0.5));
            adam.v.insert(name.clone(), t.map(|x| x * x));
        }
        adam.step = 17;
        Checkpoint {
            params,
            adam,
            ot: OtConfig::default(),
            epoch: 4,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let back: Checkpoint<f32> = decode(&encode(&ck).unwrap()).unwrap();
        assert_eq!(back, ck);
        for (name, t) in ck.params.store.iter() {
            let other = back.params.store.get(name).unwrap();
            let bits = |x: &Tensor<f32>| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t), bits(other));
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample()).unwrap();
        assert_eq!(&bytes[..4], b"MAPC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let n = sample().params.store.len() as u32;
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3 * n + 4);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let bytes = encode(&sample()).unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"NOPE");
        assert!(matches!(decode::<f32>(&bad), Err(Error::BadMagic(m)) if &m == b"NOPE"));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode::<f32>(&bad), Err(Error::BadVersion(2))));
        for cut in [2, 11, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(decode::<f32>(&bytes[..cut]), Err(Error::Truncated)),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn save_and_load_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mapc");
        let ck = sample();
        save_checkpoint(&ck, &path).unwrap();
        assert_eq!(load_checkpoint::<f32>(&path).unwrap(), ck);
        assert!(!dir.path().join("model.mapc.tmp").exists());
    }
}

//! Checksummed binary container for named f64 arrays.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! u32 format version
//! u32 array count
//! per array:
//!   u32 name byte length, then the UTF-8 name
//!   u8  dtype tag (1 = f64)
//!   u32 rank, then u64 per dimension
//!   f64 payload in row-major order
//! u32 CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! f64 values persist as raw bits, so a load/save cycle reproduces the
//! file byte for byte.

use std::path::Path;

use ndarray::ArrayD;

use super::DataError;
use crate::diffcore::ParamStore;
use crate::hyperdist::{HyperSchema, MemberDistribution};

pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

fn crc32(bytes: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(bytes);
    h.finalize()
}

/// Serialize named arrays to `path`, replacing any existing file atomically.
pub fn checkpoint_save(
    path: impl AsRef<Path>,
    arrays: &[(String, ArrayD<f64>)],
) -> Result<(), DataError> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, value) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(value.ndim() as u32).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&crc32(&out).to_le_bytes());

    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &out)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &'static str) -> Result<&'a [u8], DataError> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(DataError::Truncated { what })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Load every named array from a checkpoint file.
pub fn checkpoint_load(path: impl AsRef<Path>) -> Result<Vec<(String, ArrayD<f64>)>, DataError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 {
        return Err(DataError::Truncated { what: "header" });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let expect = u32::from_le_bytes(trailer.try_into().unwrap());
    if crc32(body) != expect {
        return Err(DataError::ChecksumMismatch);
    }

    let mut r = Reader {
        bytes: body,
        pos: 0,
    };
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(DataError::VersionMismatch {
            got: version,
            want: CHECKPOINT_VERSION,
        });
    }
    let count = r.u32("array count")? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|_| DataError::Truncated { what: "utf-8 name" })?;
        let dtype = r.take(1, "dtype")?[0];
        if dtype != DTYPE_F64 {
            return Err(DataError::Truncated { what: "dtype tag" });
        }
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let len: usize = shape.iter().product();
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            let raw = r.take(8, "payload")?;
            values.push(f64::from_le_bytes(raw.try_into().unwrap()));
        }
        let arr = ArrayD::from_shape_vec(shape, values)
            .map_err(|_| DataError::Truncated { what: "shape" })?;
        arrays.push((name, arr));
    }
    Ok(arrays)
}

/// All parameters of a store as named arrays, in registration order.
pub fn store_to_arrays(store: &ParamStore) -> Vec<(String, ArrayD<f64>)> {
    store
        .iter()
        .map(|(name, value, _)| (name.to_string(), value.clone()))
        .collect()
}

/// Overwrite a store's parameters from named arrays; every parameter in
/// the store must be present with its exact shape.
pub fn restore_store(
    arrays: &[(String, ArrayD<f64>)],
    store: &mut ParamStore,
) -> Result<(), DataError> {
    for i in 0..store.len() {
        let name = store.name(i).to_string();
        let found = arrays
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| DataError::MissingArray { name: name.clone() })?;
        if found.1.shape() != store.value(i).shape() {
            return Err(DataError::ShapeMismatch {
                name,
                got: found.1.shape().to_vec(),
                want: store.value(i).shape().to_vec(),
            });
        }
        store.value_mut(i).assign(&found.1);
    }
    Ok(())
}

/// Per-member bound arrays under the names `dist.{k}.log_lower` and
/// `dist.{k}.log_upper`.
pub fn dists_to_arrays(dists: &[MemberDistribution]) -> Vec<(String, ArrayD<f64>)> {
    let mut out = Vec::with_capacity(2 * dists.len());
    for (k, d) in dists.iter().enumerate() {
        out.push((
            format!("dist.{k}.log_lower"),
            ArrayD::from_shape_vec(vec![d.dims()], d.log_lower().to_vec()).unwrap(),
        ));
        out.push((
            format!("dist.{k}.log_upper"),
            ArrayD::from_shape_vec(vec![d.dims()], d.log_upper().to_vec()).unwrap(),
        ));
    }
    out
}

/// Rebuild `members` distributions from their checkpoint arrays.
pub fn dists_from_arrays(
    arrays: &[(String, ArrayD<f64>)],
    schema: &HyperSchema,
    members: usize,
) -> Result<Vec<MemberDistribution>, DataError> {
    let mut out = Vec::with_capacity(members);
    for k in 0..members {
        let get = |suffix: &str| {
            let name = format!("dist.{k}.{suffix}");
            arrays
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, v)| v.iter().copied().collect::<Vec<f64>>())
                .ok_or(DataError::MissingArray { name })
        };
        let lower = get("log_lower")?;
        let upper = get("log_upper")?;
        out.push(MemberDistribution::from_log_bounds(&lower, &upper, schema));
    }
    Ok(out)
}

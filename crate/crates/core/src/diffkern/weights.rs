//! Weight file format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "3DVW"
//! version u32
//! records repeated until 4 bytes remain:
//!   path_len u32, path bytes (utf-8)
//!   dtype    u8   (0 = f64, 1 = f32)
//!   rank     u8
//!   extents  rank x u64
//!   data     product(extents) x 8 or 4 bytes
//! crc32   u32 over every preceding byte
//! ```
//!
//! The store's RNG seed travels as a reserved record `__meta.seed` holding
//! the raw bit pattern.

use super::store::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use std::path::Path;

pub const WEIGHT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"3DVW";
const META_SEED: &str = "__meta.seed";

pub fn save_weights(store: &ParameterStore, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::with_capacity(64 + store.total_values() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&store.version().to_le_bytes());
    write_record(&mut buf, META_SEED, &[1], &[f64::from_bits(store.seed())]);
    for (p, t) in store.iter() {
        write_record(&mut buf, p, t.shape(), t.data());
    }
    let mut h = crc32fast::Hasher::new();
    h.update(&buf);
    buf.extend_from_slice(&h.finalize().to_le_bytes());
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_record(buf: &mut Vec<u8>, path: &str, shape: &[usize], data: &[f64]) {
    buf.extend_from_slice(&(path.len() as u32).to_le_bytes());
    buf.extend_from_slice(path.as_bytes());
    buf.push(0u8); // f64
    buf.push(shape.len() as u8);
    for &e in shape {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn load_weights(path: &Path) -> Result<ParameterStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let p = path.display().to_string();
    let corrupt = |d: &str| Error::CorruptFile(format!("{p}: {d}"));

    if bytes.len() < MAGIC.len() + 4 + 4 {
        return Err(corrupt("file shorter than header + checksum"));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let mut h = crc32fast::Hasher::new();
    h.update(body);
    if h.finalize() != stored_crc {
        return Err(corrupt("checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != WEIGHT_FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: WEIGHT_FORMAT_VERSION });
    }

    let mut store = ParameterStore::new(0);
    store.set_version(version);
    let mut off = 8usize;
    let mut seed: Option<u64> = None;
    while off < body.len() {
        let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
            if *off + n > body.len() {
                return Err(corrupt("truncated record"));
            }
            let s = &body[*off..*off + n];
            *off += n;
            Ok(s)
        };
        let path_len = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut off, path_len)?.to_vec())
            .map_err(|_| corrupt("non-utf8 parameter path"))?;
        let dtype = take(&mut off, 1)?[0];
        let rank = take(&mut off, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match dtype {
            0 => take(&mut off, n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            1 => take(&mut off, n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            other => return Err(corrupt(&format!("unknown dtype tag {other}"))),
        };
        if name == META_SEED {
            if n != 1 {
                return Err(corrupt("malformed seed record"));
            }
            seed = Some(data[0].to_bits());
        } else {
            store.insert(&name, Tensor::new(shape, data));
        }
    }
    let mut out = ParameterStore::new(seed.unwrap_or(0));
    out.set_version(version);
    for (p, t) in store.iter() {
        out.insert(p, t.clone());
    }
    Ok(out)
}

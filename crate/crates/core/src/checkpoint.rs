//! Flat binary tensor container.
//!
//! Layout, all integers little-endian:
//! `"IDET"`, version `u32`, record count `u32`, then per record: name length
//! `u32`, UTF-8 name, rank `u32`, `rank` dims as `u64`, values as `f32`.

use std::fs;
use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"IDET";
pub const VERSION: u32 = 1;

pub fn encode(records: &[(String, &Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn take<const N: usize>(cur: &mut Cursor<&[u8]>, path: &Path, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    cur.read_exact(&mut buf)
        .map_err(|_| Error::parse(path, format!("truncated while reading {what}")))?;
    Ok(buf)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut cur = Cursor::new(bytes);
    if &take::<4>(&mut cur, path, "magic")? != MAGIC {
        return Err(Error::parse(path, "bad magic; not a checkpoint"));
    }
    let version = u32::from_le_bytes(take(&mut cur, path, "version")?);
    if version != VERSION {
        return Err(Error::parse(path, format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut cur, path, "record count")?) as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for r in 0..count {
        let len = u32::from_le_bytes(take(&mut cur, path, "name length")?) as usize;
        let remaining = bytes.len() - cur.position() as usize;
        if len > remaining {
            return Err(Error::parse(path, format!("record {r}: name length {len} exceeds file")));
        }
        let mut name = vec![0u8; len];
        cur.read_exact(&mut name).expect("length checked");
        let name = String::from_utf8(name).map_err(|_| Error::parse(path, format!("record {r}: name is not UTF-8")))?;
        let rank = u32::from_le_bytes(take(&mut cur, path, "rank")?) as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut cur, path, "dims")?) as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let remaining = (bytes.len() - cur.position() as usize) / 4;
        let numel = match numel {
            Some(n) if n <= remaining => n,
            _ => return Err(Error::parse(path, format!("record {name}: shape {shape:?} exceeds file"))),
        };
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f32::from_le_bytes(take(&mut cur, path, "values")?));
        }
        let t = Tensor::new(&shape, data).map_err(|e| Error::parse(path, format!("record {name}: {e}")))?;
        records.push((name, t));
    }
    if cur.position() as usize != bytes.len() {
        return Err(Error::parse(path, "trailing bytes after last record"));
    }
    Ok(records)
}

pub fn write(path: &Path, records: &[(String, &Tensor<f32>)]) -> Result<()> {
    fs::write(path, encode(records)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Path of the configuration block stored next to a checkpoint.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

pub fn write_sidecar(path: &Path, kv: &KeyValues) -> Result<()> {
    kv.write(&sidecar_path(path))
}

pub fn read_sidecar(path: &Path) -> Result<KeyValues> {
    KeyValues::read(&sidecar_path(path))
}

/// Every parameter of the store, in store order, as f32 records.
pub fn store_records<T: Scalar>(store: &ParamStore<T>) -> Vec<(String, Tensor<f32>)> {
    store.iter().map(|(_, p)| (p.name.clone(), p.value.cast())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let a = Tensor::<f32>::from_fn(&[2, 3], |i| (i as f32).sin() * 1e-3);
        let b = Tensor::<f32>::scalar(f32::MIN_POSITIVE);
        let recs = vec![("a/w".to_string(), &a), ("b".to_string(), &b)];
        let bytes = encode(&recs);
        let back = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back[0].0, "a/w");
        assert_eq!(back[0].1, a);
        assert_eq!(back[1].1, b);
        assert_eq!(encode(&back.iter().map(|(n, t)| (n.clone(), t)).collect::<Vec<_>>()), bytes);
    }

    #[test]
    fn truncation_is_a_parse_error() {
        let a = Tensor::<f32>::ones(&[4]);
        let bytes = encode(&[("w".to_string(), &a)]);
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut], Path::new("m")), Err(Error::Parse { .. })), "{cut}");
        }
    }
}

//! WDT1 checkpoint format.
//!
//! Layout (little-endian throughout): magic bytes "WDT1", u32 tensor count,
//! then per tensor: u16 name length, UTF-8 name, u8 rank, u32 extents, raw
//! f64 values. Tensors are written in sorted-name order, which is also the
//! parameter store's canonical iteration order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::numel;

const MAGIC: &[u8; 4] = b"WDT1";

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let count = u32::try_from(store.len())
        .map_err(|_| Error::Checkpoint("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, p) in store.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("name too long: {}", name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(p.shape.len())
            .map_err(|_| Error::Checkpoint(format!("rank too large for {}", name)))?;
        out.push(rank);
        for d in &p.shape {
            let d = u32::try_from(*d)
                .map_err(|_| Error::Checkpoint(format!("extent too large in {}", name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Decodes checkpoint bytes; rejects anything malformed without panicking.
pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let end = pos
            .checked_add(n)
            .filter(|e| *e <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &bytes[*pos..end];
        *pos = end;
        Ok(s)
    };

    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut store = ParamStore::new();
    let mut prev_name: Option<String> = None;
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?
            .to_string();
        if let Some(prev) = &prev_name {
            if *prev >= name {
                return Err(Error::Checkpoint(format!(
                    "tensor names out of order: {:?} then {:?}",
                    prev, name
                )));
            }
        }
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let n = shape.iter().try_fold(1usize, |acc, d| acc.checked_mul(*d)).ok_or_else(
            || Error::Checkpoint(format!("extent overflow in {}", name)),
        )?;
        if n != numel(&shape) {
            return Err(Error::Checkpoint("inconsistent shape".into()));
        }
        let raw = take(&mut pos, n.checked_mul(8).ok_or_else(|| {
            Error::Checkpoint(format!("value count overflow in {}", name))
        })?)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(&name, shape, data);
        prev_name = Some(name);
    }
    if pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(store)
}

/// Checks that a loaded store matches an expected layout exactly.
pub fn check_compatible(loaded: &ParamStore, expected: &ParamStore) -> Result<()> {
    if loaded.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "tensor count mismatch: checkpoint {} vs model {}",
            loaded.len(),
            expected.len()
        )));
    }
    for ((ln, lp), (en, ep)) in loaded.iter().zip(expected.iter()) {
        if ln != en {
            return Err(Error::Checkpoint(format!("name mismatch: {} vs {}", ln, en)));
        }
        if lp.shape != ep.shape {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {}: {:?} vs {:?}",
                ln, lp.shape, ep.shape
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn sample_store() -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        store.insert("a.w", vec![2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
        store.insert("b.scalar", vec![1], vec![-0.25]);
        store.insert("z.bias", vec![4], vec![0.0, 1.5, f64::MIN_POSITIVE, -0.0]);
        store
    }

    #[test]
    fn roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.wdt1");
        let store = sample_store();
        save(&store, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(store, loaded);
        // Byte-stable: saving the loaded store reproduces the file exactly.
        let path2 = dir.path().join("m2.wdt1");
        save(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.wdt1");
        save(&sample_store(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());

        for cut in [0, 3, 7, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err(), "accepted truncation at {}", cut);
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn rejects_unsorted_names() {
        // Handcraft a two-tensor file with names out of order.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"WDT1");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        for name in ["b", "a"] {
            bytes.extend_from_slice(&(name.len() as u16).to_le_bytes());
            bytes.extend_from_slice(name.as_bytes());
            bytes.push(1);
            bytes.extend_from_slice(&1u32.to_le_bytes());
            bytes.extend_from_slice(&1.0f64.to_le_bytes());
        }
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn compatibility_check() {
        let a = sample_store();
        let mut b = sample_store();
        check_compatible(&a, &b).unwrap();
        b.get_mut("a.w").unwrap().shape = vec![3, 2];
        assert!(check_compatible(&a, &b).is_err());
    }
}

//! Versioned binary checkpoint.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"HYATT1"
//! u32 config_len, config_len bytes of JSON
//! u32 entry_count
//! per entry: u32 name_len, name, u8 trainable, u32 rank, rank × u32 dims, u64 offset
//! raw f32 data, entries back to back, offsets relative to the data start
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{HyattConfig, HyattNet};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"HYATT1";

pub fn encode(cfg: &HyattConfig, store: &ParamStore<f32>) -> Result<Vec<u8>> {
    let cfg_json = serde_json::to_vec(cfg).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, cfg_json.len())?;
    out.extend_from_slice(&cfg_json);
    put_u32(&mut out, store.len())?;
    let mut offset = 0u64;
    for e in store.entries() {
        put_u32(&mut out, e.name.len())?;
        out.extend_from_slice(e.name.as_bytes());
        out.push(u8::from(e.trainable));
        put_u32(&mut out, e.value.rank())?;
        for &d in e.value.shape() {
            put_u32(&mut out, d)?;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * e.value.len() as u64;
    }
    for e in store.entries() {
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(HyattConfig, ParamStore<f32>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let cfg_len = r.u32()? as usize;
    let cfg: HyattConfig =
        serde_json::from_slice(r.take(cfg_len)?).map_err(|e| Error::Format(format!("config: {e}")))?;
    let count = r.u32()? as usize;
    let mut headers = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("name is not UTF-8".into()))?;
        let trainable = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Format(format!("bad trainable flag {b}"))),
        };
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = r.u64()?;
        headers.push((name, trainable, shape, offset));
    }
    let data = &bytes[r.pos..];
    let mut store = ParamStore::new();
    let mut expected = 0u64;
    for (name, trainable, shape, offset) in headers {
        if offset != expected {
            return Err(Error::Format(format!("{name}: offset {offset}, expected {expected}")));
        }
        let n: usize = shape.iter().product();
        let start = offset as usize;
        let end = start + 4 * n;
        let raw = data
            .get(start..end)
            .ok_or_else(|| Error::Format(format!("{name}: data truncated")))?;
        let vals = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(&shape, vals).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        if store.find(&name).is_some() {
            return Err(Error::Format(format!("duplicate entry {name}")));
        }
        store.add(name, t, trainable);
        expected = end as u64;
    }
    if expected as usize != data.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            data.len() - expected as usize
        )));
    }
    Ok((cfg, store))
}

/// Decode and check the tensors against the architecture the config describes.
pub fn restore(bytes: &[u8]) -> Result<(HyattNet, ParamStore<f32>)> {
    let (cfg, loaded) = decode(bytes)?;
    let (net, mut store) = HyattNet::new::<f32>(&cfg)?;
    store
        .load_from(&loaded)
        .map_err(|e| Error::Format(format!("architecture mismatch: {e}")))?;
    for (a, b) in store.entries().iter().zip(loaded.entries()) {
        if a.trainable != b.trainable {
            return Err(Error::Format(format!("{}: trainable flag mismatch", a.name)));
        }
    }
    Ok((net, store))
}

pub fn save(path: &Path, cfg: &HyattConfig, store: &ParamStore<f32>) -> Result<()> {
    std::fs::write(path, encode(cfg, store)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(HyattNet, ParamStore<f32>)> {
    restore(&std::fs::read(path)?)
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add(
            "a.weight",
            Tensor::new(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, f32::MIN_POSITIVE, 7.0]).unwrap(),
            true,
        );
        s.add("a.running_var", Tensor::new(&[2], vec![1.0, 0.25]).unwrap(), false);
        s
    }

    #[test]
    fn encode_decode_encode_is_identical() {
        let cfg = HyattConfig::compact();
        let bytes = encode(&cfg, &tiny_store()).unwrap();
        assert_eq!(&bytes[..6], MAGIC);
        let (cfg2, store2) = decode(&bytes).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(store2, tiny_store());
        assert_eq!(encode(&cfg2, &store2).unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let cfg = HyattConfig::compact();
        let bytes = encode(&cfg, &tiny_store()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::Format(_))));
    }

    #[test]
    fn restore_rejects_foreign_tensors() {
        let cfg = HyattConfig::compact();
        let bytes = encode(&cfg, &tiny_store()).unwrap();
        assert!(restore(&bytes).is_err());
    }
}

//! Parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! [0..8)    magic  b"FBCKPT01"
//! [8..16)   u64    header length in bytes
//! [16..)    UTF-8 JSON header:
//!           {"format":"fusionbench-checkpoint","version":1,
//!            "params":[{"name":..,"shape":[..],"offset":..,"trainable":..}, ..]}
//! [..]      f64 values, row-major, concatenated; `offset` counts f64
//!           elements from the start of this block
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FBCKPT01";
const FORMAT: &str = "fusionbench-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub params: Vec<ParamEntry>,
}

pub fn header(store: &ParamStore) -> Header {
    let mut offset = 0;
    let params = store
        .iter()
        .map(|(name, t)| {
            let e = ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                trainable: t.requires_grad(),
            };
            offset += t.numel();
            e
        })
        .collect();
    Header {
        format: FORMAT.into(),
        version: 1,
        params,
    }
}

pub fn to_bytes(store: &ParamStore) -> Vec<u8> {
    let head = serde_json::to_vec(&header(store)).expect("header serializes");
    let total: usize = store.iter().map(|(_, t)| t.numel()).sum();
    let mut out = Vec::with_capacity(16 + head.len() + 8 * total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    for (_, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<ParamStore> {
    let bad = |m: &str| Error::format(origin, m);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("header length exceeds file"))?;
    let head: Header =
        serde_json::from_slice(&bytes[16..body_start]).map_err(|e| bad(&format!("header: {e}")))?;
    if head.format != FORMAT || head.version != 1 {
        return Err(bad("unsupported checkpoint format or version"));
    }
    let body = &bytes[body_start..];
    if body.len() % 8 != 0 {
        return Err(bad("data block is not a whole number of f64 values"));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut store = ParamStore::new();
    for p in head.params {
        let n: usize = p.shape.iter().product();
        let data = values
            .get(p.offset..p.offset + n)
            .ok_or_else(|| bad(&format!("parameter {} runs past the data block", p.name)))?
            .to_vec();
        let t = Tensor::new(&p.shape, data).map_err(|e| bad(&e.to_string()))?;
        if p.trainable {
            store.add(p.name, t);
        } else {
            store.add_buffer(p.name, t);
        }
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

/// Copies values from `src` into `dst`, matching parameters by name and
/// shape.
pub fn restore_into(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Contract(format!(
            "checkpoint has {} tensors, model expects {}",
            src.len(),
            dst.len()
        )));
    }
    let ids: Vec<_> = dst.ids().collect();
    for id in ids {
        let name = dst.name(id).to_string();
        let sid = src
            .find(&name)
            .ok_or_else(|| Error::Contract(format!("checkpoint lacks {name}")))?;
        let s = src.get(sid);
        if s.shape() != dst.get(id).shape() {
            return Err(Error::Contract(format!("shape mismatch for {name}")));
        }
        dst.get_mut(id).data_mut().copy_from_slice(s.data());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_preserves_every_bit(seed in any::<u64>(), sizes in prop::collection::vec((1usize..5, 1usize..4), 1..5)) {
            let mut rng = CounterRng::new(seed);
            let mut store = ParamStore::new();
            for (i, (r, c)) in sizes.iter().enumerate() {
                let data = (0..r * c).map(|_| rng.normal() * 1e3).collect();
                let t = Tensor::new(&[*r, *c], data).unwrap();
                if i % 2 == 0 { store.add(format!("p{i}"), t); } else { store.add_buffer(format!("b{i}"), t); }
            }
            let back = from_bytes(&to_bytes(&store), Path::new("mem")).unwrap();
            prop_assert_eq!(back.checksum(), store.checksum());
            prop_assert_eq!(back.num_trainable(), store.num_trainable());
        }
    }

    #[test]
    fn header_offsets_are_cumulative() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros(&[2, 3]));
        store.add_buffer("b", Tensor::zeros(&[4]));
        store.add("c", Tensor::zeros(&[1]));
        let h = header(&store);
        let offsets: Vec<usize> = h.params.iter().map(|p| p.offset).collect();
        assert_eq!(offsets, vec![0, 6, 10]);
        assert!(!h.params[1].trainable);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros(&[2, 2]));
        let mut bytes = to_bytes(&store);
        bytes.truncate(bytes.len() - 8);
        assert!(matches!(from_bytes(&bytes, Path::new("x")), Err(Error::Format { .. })));
        assert!(matches!(from_bytes(b"nonsense", Path::new("x")), Err(Error::Format { .. })));
    }
}

//! `KNNI` index file: header, coarse centroids, CSR-style inverted lists,
//! then either the keys in list order (no PQ) or the PQ codebook plus
//! per-record codes. Little-endian throughout.

use std::path::Path;

use super::ivf::IvfIndex;
use super::pq::PqCodebook;
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"KNNI";
const VERSION: u32 = 2;

impl IvfIndex {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(self.dim as u32);
        w.u64(self.count as u64);
        w.u32(self.nlist() as u32);
        w.u32(self.nprobe as u32);
        let (m, bits) = match &self.pq {
            Some((cb, _)) => (cb.m() as u32, cb.bits()),
            None => (0, 0),
        };
        w.u32(m);
        w.u32(bits);
        w.f32s(&self.centroids);
        let mut offset = 0u64;
        w.u64(0);
        for list in &self.lists {
            offset += list.len() as u64;
            w.u64(offset);
        }
        for list in &self.lists {
            w.u32s(list);
        }
        match &self.pq {
            Some((cb, codes)) => {
                w.f32s(cb.codewords());
                w.bytes(codes);
            }
            None => {
                for keys in &self.list_keys {
                    w.f32s(keys);
                }
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return r.err(format!("unsupported index version {version}"));
        }
        let dim = r.u32()? as usize;
        let count = r.u64()? as usize;
        let nlist = r.u32()? as usize;
        let nprobe = r.u32()? as usize;
        let m = r.u32()? as usize;
        let bits = r.u32()?;
        if dim == 0 || nlist == 0 || count < nlist || nprobe == 0 || nprobe > nlist {
            return r.err("inconsistent index header");
        }
        let n_centroids = nlist
            .checked_mul(dim)
            .ok_or_else(|| format_err(&r, "centroid matrix size overflows"))?;
        let centroids = r.f32s(n_centroids)?;
        let mut offsets = Vec::with_capacity(nlist + 1);
        for _ in 0..=nlist {
            offsets.push(r.u64()? as usize);
        }
        if offsets[0] != 0
            || offsets.windows(2).any(|w| w[0] > w[1])
            || offsets[nlist] != count
        {
            return r.err("inverted-list offsets are not a partition of the records");
        }
        let at = r.offset();
        let ids = r.u32s(count)?;
        let mut seen = vec![false; count];
        for &id in &ids {
            let id = id as usize;
            if id >= count || seen[id] {
                return Err(Error::Format {
                    offset: at,
                    message: format!("record id {id} out of range or repeated"),
                });
            }
            seen[id] = true;
        }
        let lists: Vec<Vec<u32>> = offsets
            .windows(2)
            .map(|w| ids[w[0]..w[1]].to_vec())
            .collect();
        let mut list_keys = Vec::new();
        let pq = if m == 0 {
            let n_keys = count
                .checked_mul(dim)
                .ok_or_else(|| format_err(&r, "key matrix size overflows"))?;
            let keys = r.f32s(n_keys)?;
            if keys.iter().any(|k| !k.is_finite()) {
                return r.err("stored keys must be finite");
            }
            list_keys = offsets
                .windows(2)
                .map(|w| keys[w[0] * dim..w[1] * dim].to_vec())
                .collect();
            None
        } else {
            let at = r.offset();
            if !dim.is_multiple_of(m) || !(bits == 4 || bits == 8) {
                return r.err("invalid PQ shape in header");
            }
            let codewords = r.f32s(dim << bits)?;
            let cb = PqCodebook::from_parts(dim, m, bits, codewords).map_err(|e| Error::Format {
                offset: at,
                message: e.to_string(),
            })?;
            let codes = r.take(count.saturating_mul(m))?.to_vec();
            if codes.iter().any(|&c| c as usize >= cb.ksub()) {
                return r.err("PQ code out of range");
            }
            Some((cb, codes))
        };
        if !r.is_empty() {
            return r.err("trailing bytes after index");
        }
        Ok(Self {
            dim,
            count,
            centroids,
            lists,
            list_keys,
            pq,
            nprobe,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn format_err(r: &Reader<'_>, message: &str) -> Error {
    Error::Format {
        offset: r.offset(),
        message: message.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::Datastore;
    use crate::index::{IvfParams, PqParams};
    use crate::lm::TokenId;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ds() -> Datastore {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 200;
        let keys = (0..n * 8).map(|_| rng.random::<f32>()).collect();
        let values = (0..n).map(|i| TokenId(i as u32 % 5)).collect();
        Datastore::from_parts(8, keys, values, vec![1.0; n], "").unwrap()
    }

    #[test]
    fn roundtrip_plain_and_pq() {
        let ds = ds();
        let plain = IvfIndex::build(&ds, &IvfParams::new(6, 1)).unwrap();
        assert_eq!(IvfIndex::from_bytes(&plain.to_bytes()).unwrap(), plain);
        let mut p = IvfParams::new(6, 1);
        p.pq = Some(PqParams::new(2, 4, 1));
        let pq = IvfIndex::build(&ds, &p).unwrap();
        assert_eq!(IvfIndex::from_bytes(&pq.to_bytes()).unwrap(), pq);
    }

    #[test]
    fn corrupt_inputs() {
        let ds = ds();
        let idx = IvfIndex::build(&ds, &IvfParams::new(4, 1)).unwrap();
        let mut bytes = idx.to_bytes();
        assert!(matches!(
            IvfIndex::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format { .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            IvfIndex::from_bytes(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}

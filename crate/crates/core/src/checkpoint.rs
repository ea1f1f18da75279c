//! `SEPNORM1` checkpoint files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "SEPNORM1"
//! version    u32      currently 1
//! echo       u32 length + UTF-8 bytes  (run configuration, key=value lines)
//! step       u64
//! rng        32-byte ChaCha seed, u64 stream, u128 word position
//! records    u32 count, then per record:
//!              u32 name length + UTF-8 name
//!              u32 rank + rank × u64 extents
//!              product(extents) × f64 values
//! ```
//!
//! Records appear in parameter registration order, buffers (BN running
//! statistics) included.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SEPNORM1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub echo: String,
    pub step: u64,
    pub rng: RngState,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, echo: String, step: u64, rng: RngState) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            echo,
            step,
            rng,
            params: store
                .iter()
                .map(|p| ParamRecord {
                    name: p.name.clone(),
                    value: p.value.clone(),
                })
                .collect(),
        }
    }

    /// Copies every record into `store`. The record set must match the
    /// store's parameters exactly, names and shapes.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Contract(format!(
                "checkpoint holds {} tensors, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for rec in &self.params {
            let id = store
                .find(&rec.name)
                .ok_or_else(|| Error::Contract(format!("checkpoint tensor {} is not part of the model", rec.name)))?;
            store.set_value(id, rec.value.clone())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        put_str(&mut out, &self.echo);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for rec in &self.params {
            put_str(&mut out, &rec.name);
            out.extend_from_slice(&(rec.value.rank() as u32).to_le_bytes());
            for &e in rec.value.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in rec.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a SEPNORM1 checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let echo = r.string()?;
        let step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let values = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let value = Tensor::new(shape, values).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
            params.push(ParamRecord { name, value });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        Ok(Self {
            version,
            echo,
            step,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 in checkpoint".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(4);
        for _ in 0..13 {
            rng.next_u32();
        }
        let state = RngState::capture(&rng);
        let mut resumed = state.restore();
        assert_eq!(rng.next_u64(), resumed.next_u64());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_fn(vec![2, 2], |i| i as f64));
        let ck = Checkpoint::from_store(&store, "k=v\n".into(), 3, RngState::capture(&ChaCha8Rng::seed_from_u64(0)));
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], b"SEPNORM1");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}

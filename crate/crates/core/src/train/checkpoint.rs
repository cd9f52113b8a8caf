//! Binary checkpoints.
//!
//! ```text
//! "G3CNCKPT" | u32 version | u32 len, config JSON | u64 epoch
//! u32 count, tensors (parameters) | u32 count, tensors (momentum)
//! tensor = u32 len, name UTF-8 | u32 rank | u64 dims[rank] | f64 data[..]
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::network::Network;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"G3CNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub params: Vec<(String, Tensor)>,
    pub momentum: Vec<(String, Tensor)>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32("name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = self.u32("rank")? as usize;
        let mut shape = Vec::new();
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = self.u64("dimension")? as usize;
            count = count.checked_mul(d).ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
            shape.push(d);
        }
        let bytes = count
            .checked_mul(8)
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
        let raw = self.take(bytes, &name)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok((name, Tensor::new(shape, data)?))
    }

    fn tensors(&mut self) -> Result<Vec<(String, Tensor)>> {
        let n = self.u32("tensor count")?;
        (0..n).map(|_| self.tensor()).collect()
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config)?;
        out.extend((cfg.len() as u32).to_le_bytes());
        out.extend(cfg);
        out.extend((self.epoch as u64).to_le_bytes());
        for group in [&self.params, &self.momentum] {
            out.extend((group.len() as u32).to_le_bytes());
            for (name, t) in group {
                put_tensor(&mut out, name, t);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        let len = r.u32("config length")? as usize;
        let config: TrainConfig = serde_json::from_slice(r.take(len, "config")?)?;
        let epoch = r.u64("epoch")? as usize;
        let params = r.tensors()?;
        let momentum = r.tensors()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { config, epoch, params, momentum })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rebuilds the network from the configuration snapshot and loads every tensor.
    pub fn build_network(&self) -> Result<Network> {
        let graph = self.config.network.skeleton.resolve(None)?.build()?;
        let mut net = Network::new(self.config.network.clone(), graph, &mut ChaCha8Rng::seed_from_u64(0))?;
        net.load_params(&self.params)?;
        Ok(net)
    }
}

//! Binary checkpoint files.
//!
//! Layout (little-endian): magic `XMCK`, version `u32`, config fingerprint
//! `u64`, completed epochs `u32`, then the tensor block (count `u32`, then
//! per tensor: name length `u32`, UTF-8 name, rank `u32`, extents `u32`×rank,
//! `f32` payload), the optimizer block (momentum `f32` and a tensor block of
//! velocities), the RNG block (top-level seed `u64`), the metrics block
//! (row count `u32`, rows of `u32 u32 f64×5`), the canonical config text
//! (length `u32` + UTF-8) and a CRC32 of everything before it.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::MetricsRow;

const MAGIC: &[u8; 4] = b"XMCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: u64,
    /// Epochs completed when the checkpoint was taken.
    pub epoch: u32,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub momentum: f32,
    pub velocity: Vec<(String, Tensor<f32>)>,
    pub seed: u64,
    pub metrics: Vec<MetricsRow>,
    pub config: String,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Contract(format!("{v} does not fit a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensors(out: &mut Vec<u8>, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    put_u32(out, tensors.len())?;
    for (name, t) in tensors {
        put_u32(out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.rank())?;
        for &e in t.shape() {
            put_u32(out, e)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt("checkpoint truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Corrupt("checkpoint string is not UTF-8".into()))
    }

    fn tensors(&mut self) -> Result<Vec<(String, Tensor<f32>)>> {
        let count = self.u32()? as usize;
        let mut out = Vec::new();
        for _ in 0..count {
            let name = self.string()?;
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
            let numel = numel
                .filter(|&n| n.saturating_mul(4) <= self.bytes.len())
                .ok_or_else(|| Error::Corrupt(format!("tensor `{name}` has an impossible shape")))?;
            let raw = self.take(numel * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Corrupt(format!("tensor `{name}`: {e}")))?;
            out.push((name, t));
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        put_tensors(&mut out, &self.tensors)?;
        out.extend_from_slice(&self.momentum.to_le_bytes());
        put_tensors(&mut out, &self.velocity)?;
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_u32(&mut out, self.metrics.len())?;
        for m in &self.metrics {
            put_u32(&mut out, m.epoch)?;
            put_u32(&mut out, m.stage)?;
            for v in [m.lr, m.train_loss, m.val_rank1, m.val_rank5, m.val_rank10] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_u32(&mut out, self.config.len())?;
        out.extend_from_slice(self.config.as_bytes());
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version} is not supported (expected {VERSION})"
            )));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().unwrap()) {
            return Err(Error::Corrupt("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, at: 8 };
        let fingerprint = r.u64()?;
        let epoch = r.u32()?;
        let tensors = r.tensors()?;
        let momentum = r.f32()?;
        let velocity = r.tensors()?;
        let seed = r.u64()?;
        let rows = r.u32()? as usize;
        let mut metrics = Vec::new();
        for _ in 0..rows {
            metrics.push(MetricsRow {
                epoch: r.u32()? as usize,
                stage: r.u32()? as usize,
                lr: r.f64()?,
                train_loss: r.f64()?,
                val_rank1: r.f64()?,
                val_rank5: r.f64()?,
                val_rank10: r.f64()?,
            });
        }
        let config = r.string()?;
        if r.at != body.len() {
            return Err(Error::Corrupt("trailing bytes in checkpoint".into()));
        }
        Ok(Self {
            fingerprint,
            epoch,
            tensors,
            momentum,
            velocity,
            seed,
            metrics,
            config,
        })
    }

    /// Writes to a temporary file beside `path` and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        tmp.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

//! Weight checkpoint format. All integers are little-endian.
//!
//! ```text
//! offset  size      field
//! 0       8         magic b"CCNTMODL"
//! 8       4   u32   format version (1)
//! 12      4   u32   input size
//! 16      4   u32   grid factor
//! 20      4   u32   embedding dim
//! 24      4   u32   category count
//! 28      8   u64   init seed
//! 36      4   u32   stage count n
//! 40      4n  u32   stage widths
//! ..      4   u32   block count m
//! then m blocks, in parameter declaration order:
//!         4   u32   rank r
//!         4r  u32   dims
//!         8k  f64   values, k = product of dims
//! ```
//!
//! The configuration echo fully determines the architecture, so decoding
//! rebuilds the model from it and requires every block's shape to match.
//! Trailing bytes after the last block are rejected.

use std::path::Path;

use super::{CountModel, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CCNTMODL";
pub const CHECKPOINT_VERSION: u32 = 1;

const CONTEXT: &str = "checkpoint";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Decode {
                context: CONTEXT,
                reason: format!("truncated while reading {what}"),
                position: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn fail(&self, position: usize, reason: String) -> Error {
        Error::Decode {
            context: CONTEXT,
            reason,
            position,
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl CountModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(64 + 8 * self.param_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_u32(&mut out, c.input_size);
        put_u32(&mut out, c.grid_factor);
        put_u32(&mut out, c.embed_dim);
        put_u32(&mut out, c.categories);
        out.extend_from_slice(&c.seed.to_le_bytes());
        put_u32(&mut out, c.widths.len());
        for &w in &c.widths {
            put_u32(&mut out, w);
        }
        put_u32(&mut out, self.params.len());
        for p in &self.params {
            put_u32(&mut out, p.shape.len());
            for &d in &p.shape {
                put_u32(&mut out, d);
            }
            for v in &p.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            let at = magic.iter().zip(CHECKPOINT_MAGIC).position(|(a, b)| a != b).unwrap_or(0);
            return Err(r.fail(at, "bad magic".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                context: CONTEXT,
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let input_size = r.u32("input size")? as usize;
        let grid_factor = r.u32("grid factor")? as usize;
        let embed_dim = r.u32("embedding dim")? as usize;
        let categories = r.u32("category count")? as usize;
        let seed = r.u64("seed")?;
        let stages_at = r.pos;
        let stages = r.u32("stage count")? as usize;
        if stages > 8 {
            return Err(r.fail(stages_at, format!("stage count {stages} out of range")));
        }
        let widths = (0..stages)
            .map(|_| r.u32("stage width").map(|w| w as usize))
            .collect::<Result<Vec<_>>>()?;
        let config = ModelConfig {
            input_size,
            grid_factor,
            widths,
            embed_dim,
            categories,
            seed,
        };
        let config_end = r.pos;
        let mut model = CountModel::new(config)
            .map_err(|e| r.fail(config_end, format!("invalid configuration echo: {e}")))?;

        let count_at = r.pos;
        let blocks = r.u32("block count")? as usize;
        if blocks != model.params.len() {
            return Err(r.fail(
                count_at,
                format!("expected {} weight blocks, found {blocks}", model.params.len()),
            ));
        }
        for p in model.params.iter_mut() {
            let block_at = r.pos;
            let rank = r.u32("block rank")? as usize;
            if rank != p.shape.len() {
                return Err(r.fail(block_at, format!("block {} has rank {rank}, expected {}", p.name, p.shape.len())));
            }
            for &expected in &p.shape {
                let dim_at = r.pos;
                let d = r.u32("block dim")? as usize;
                if d != expected {
                    return Err(r.fail(dim_at, format!("block {} dim {d}, expected {expected}", p.name)));
                }
            }
            let raw = r.take(8 * p.values.len(), "weights")?;
            for (v, chunk) in p.values.iter_mut().zip(raw.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        if r.pos != buf.len() {
            return Err(r.fail(r.pos, format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

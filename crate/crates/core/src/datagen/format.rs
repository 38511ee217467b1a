//! Corpus container. All integers are little-endian.
//!
//! ```text
//! header
//!   8        magic b"CCNTCORP"
//!   4  u32   format version (1)
//!   8  u64   total file length in bytes, trailer included
//!   1  u8    split tag (0 train, 1 val, 2 test)
//!   4  u32   spec length L
//!   L        scene spec as UTF-8 TOML
//!   4  u32   record count
//! record, repeated
//!   8  u64   scene id
//!   4  u32   query category
//!   4  u32   width W
//!   4  u32   height H
//!   8  f64   background level
//!   8WH f64  pixels, raw rows top to bottom
//!   4  u32   instance count, then per instance:
//!       4  u32   category
//!       1  u8    1 if a mask follows, 0 for a sub-pixel instance
//!       4  u32   run count R (mask only)
//!       8R       runs as (u32 start, u32 length) over row-major indices
//!   4  u32   positive point count, then (u32 x, u32 y) pairs
//!   4  u32   negative point count, then (u32 x, u32 y) pairs
//! trailer
//!   4  u32   CRC-32 of every preceding byte
//! ```
//!
//! Decoding checks magic, version and declared length first, then the
//! checksum, and only then parses records.

use std::path::Path;

use super::{Corpus, CorpusEntry, Sample, SceneSpec, Split};
use crate::error::{Error, Result};
use crate::raster::{Image, Instance, InstanceMask, Point, PointAnnotations, Scene};

pub const CORPUS_MAGIC: &[u8; 8] = b"CCNTCORP";
pub const CORPUS_VERSION: u32 = 1;

const CONTEXT: &str = "corpus";
const HEADER_FIXED: usize = 8 + 4 + 8;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("corpus field exceeds u32");
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_points(out: &mut Vec<u8>, points: &[Point]) {
    put_u32(out, points.len());
    for p in points {
        out.extend_from_slice(&p.x.to_le_bytes());
        out.extend_from_slice(&p.y.to_le_bytes());
    }
}

impl Corpus {
    pub fn to_bytes(&self) -> Vec<u8> {
        let spec = toml::to_string(&self.spec).expect("scene spec serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CORPUS_MAGIC);
        out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
        out.extend_from_slice(&0u64.to_le_bytes());
        out.push(self.split.tag());
        put_u32(&mut out, spec.len());
        out.extend_from_slice(spec.as_bytes());
        put_u32(&mut out, self.entries.len());
        for e in &self.entries {
            let s = &e.sample;
            out.extend_from_slice(&e.id.to_le_bytes());
            out.extend_from_slice(&s.category.to_le_bytes());
            put_u32(&mut out, s.scene.image.width);
            put_u32(&mut out, s.scene.image.height);
            out.extend_from_slice(&s.scene.background.to_le_bytes());
            for v in &s.scene.image.pixels {
                out.extend_from_slice(&v.to_le_bytes());
            }
            put_u32(&mut out, s.scene.instances.len());
            for inst in &s.scene.instances {
                out.extend_from_slice(&inst.category.to_le_bytes());
                match &inst.mask {
                    None => out.push(0),
                    Some(m) => {
                        out.push(1);
                        let runs = m.runs();
                        put_u32(&mut out, runs.len());
                        for (start, len) in runs {
                            out.extend_from_slice(&start.to_le_bytes());
                            out.extend_from_slice(&len.to_le_bytes());
                        }
                    }
                }
            }
            put_points(&mut out, &s.points.positive);
            put_points(&mut out, &s.points.negative);
        }
        let total = (out.len() + 4) as u64;
        out[12..20].copy_from_slice(&total.to_le_bytes());
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0, end: buf.len() };
        let magic = r.take(8, "magic")?;
        if magic != CORPUS_MAGIC {
            let at = magic.iter().zip(CORPUS_MAGIC).position(|(a, b)| a != b).unwrap_or(0);
            return Err(r.fail(at, "bad magic"));
        }
        let version = r.u32("version")?;
        if version != CORPUS_VERSION {
            return Err(Error::Version {
                context: CONTEXT,
                found: version,
                supported: CORPUS_VERSION,
            });
        }
        let declared = r.u64("length")?;
        if declared < (HEADER_FIXED + 4) as u64 {
            return Err(r.fail(12, format!("declared length {declared} shorter than the header")));
        }
        if (buf.len() as u64) < declared {
            return Err(r.fail(
                buf.len(),
                format!("truncated: {} of {declared} bytes present", buf.len()),
            ));
        }
        if (buf.len() as u64) > declared {
            return Err(r.fail(declared as usize, format!("{} trailing bytes", buf.len() as u64 - declared)));
        }
        let body_end = buf.len() - 4;
        let stored = u32::from_le_bytes(buf[body_end..].try_into().unwrap());
        let computed = crc32fast::hash(&buf[..body_end]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        r.end = body_end;

        let split_at = r.pos;
        let tag = r.take(1, "split")?[0];
        let split = Split::from_tag(tag).ok_or_else(|| r.fail(split_at, format!("unknown split tag {tag}")))?;
        let spec_len = r.u32("spec length")? as usize;
        let spec_at = r.pos;
        let spec_bytes = r.take(spec_len, "spec")?;
        let spec_text =
            std::str::from_utf8(spec_bytes).map_err(|e| r.fail(spec_at + e.valid_up_to(), "spec is not UTF-8"))?;
        let spec: SceneSpec =
            toml::from_str(spec_text).map_err(|e| r.fail(spec_at, format!("bad spec: {}", e.message())))?;

        let count = r.u32("record count")?;
        let mut entries = Vec::new();
        for _ in 0..count {
            entries.push(r.entry()?);
        }
        if r.pos != r.end {
            return Err(r.fail(r.pos, format!("{} unparsed bytes before the trailer", r.end - r.pos)));
        }
        Ok(Corpus { spec, split, entries })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    end: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, position: usize, reason: impl Into<String>) -> Error {
        Error::Decode {
            context: CONTEXT,
            reason: reason.into(),
            position,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.end - self.pos < n {
            return Err(self.fail(self.end, format!("truncated while reading {what}")));
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

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn points(&mut self, width: usize, height: usize) -> Result<Vec<Point>> {
        let n = self.u32("point count")?;
        let mut out = Vec::new();
        for _ in 0..n {
            let at = self.pos;
            let x = self.u32("point")?;
            let y = self.u32("point")?;
            if x as usize >= width || y as usize >= height {
                return Err(self.fail(at, format!("point ({x}, {y}) outside {width}x{height}")));
            }
            out.push(Point::new(x, y));
        }
        Ok(out)
    }

    fn entry(&mut self) -> Result<CorpusEntry> {
        let id = self.u64("scene id")?;
        let category = self.u32("category")?;
        let dims_at = self.pos;
        let width = self.u32("width")? as usize;
        let height = self.u32("height")? as usize;
        let background = self.f64("background")?;
        let n = width
            .checked_mul(height)
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= self.end - self.pos))
            .ok_or_else(|| self.fail(dims_at, format!("image {width}x{height} exceeds the remaining bytes")))?;
        let raw = self.take(8 * n, "pixels")?;
        let pixels = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let instances_n = self.u32("instance count")?;
        let mut instances = Vec::new();
        for _ in 0..instances_n {
            let cat = self.u32("instance category")?;
            let flag_at = self.pos;
            let mask = match self.take(1, "mask flag")?[0] {
                0 => None,
                1 => {
                    let runs_at = self.pos;
                    let runs_n = self.u32("run count")?;
                    let mut runs = Vec::new();
                    for _ in 0..runs_n {
                        let start = self.u32("run")?;
                        let len = self.u32("run")?;
                        runs.push((start, len));
                    }
                    Some(
                        InstanceMask::from_runs(width, height, &runs)
                            .map_err(|e| self.fail(runs_at, format!("bad mask: {e}")))?,
                    )
                }
                f => return Err(self.fail(flag_at, format!("bad mask flag {f}"))),
            };
            instances.push(Instance { category: cat, mask });
        }
        let positive = self.points(width, height)?;
        let negative = self.points(width, height)?;
        Ok(CorpusEntry {
            id,
            sample: Sample {
                scene: Scene {
                    image: Image { width, height, pixels },
                    background,
                    instances,
                },
                points: PointAnnotations { positive, negative },
                category,
            },
        })
    }
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, corpus.to_bytes())?;
    Ok(())
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    Corpus::from_bytes(&std::fs::read(path)?)
}

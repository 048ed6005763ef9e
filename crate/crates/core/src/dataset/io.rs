//! Binary sample container.
//!
//! ```text
//! "ABSWDAT1"
//! u64 geometry id, f64 inv_lmo, f64 z0
//! u64 building count, then 5 x f64 per building (cx, cy, width, depth, height)
//! u64 terrain, obstacle and volume point counts
//! f32 arrays: terrain xyz, obstacle xyz, volume xyz, volume fields (7 per point)
//! ```
//! Everything little-endian, row-major.

use std::fs;
use std::path::Path;

use super::geometry::{Building, GeometrySample};
use super::FlowSample;
use crate::error::{Error, Result};
use crate::profiles::StabilityParams;
use crate::tensor::Matrix;

pub const SAMPLE_MAGIC: &[u8; 8] = b"ABSWDAT1";
const MAX_POINTS: u64 = 1 << 28;

pub fn encode_sample(s: &FlowSample) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(SAMPLE_MAGIC);
    out.extend_from_slice(&s.geometry_id.to_le_bytes());
    out.extend_from_slice(&s.stability.inv_lmo.to_le_bytes());
    out.extend_from_slice(&s.stability.z0.to_le_bytes());
    out.extend_from_slice(&(s.geometry.buildings.len() as u64).to_le_bytes());
    for b in &s.geometry.buildings {
        for v in [b.cx, b.cy, b.width, b.depth, b.height] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for m in [&s.terrain, &s.obstacles, &s.volume] {
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    }
    for m in [&s.terrain, &s.obstacles, &s.volume, &s.fields] {
        for &v in m.as_slice() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        let at = self.pos as u64;
        let n = self.u64(what)?;
        if n > MAX_POINTS {
            return Err(Error::Format {
                offset: at,
                msg: format!("implausible {what} {n}"),
            });
        }
        Ok(n as usize)
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Matrix> {
        let bytes = self.take(4 * rows * cols, what)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

pub fn decode_sample(buf: &[u8]) -> Result<FlowSample> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic")? != SAMPLE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "not a sample file (bad magic)".into(),
        });
    }
    let geometry_id = r.u64("geometry id")?;
    let stability = StabilityParams {
        inv_lmo: r.f64("inverse Obukhov length")?,
        z0: r.f64("roughness length")?,
    };
    let n_b = r.count("building count")?;
    let mut buildings = Vec::with_capacity(n_b.min(4096));
    for _ in 0..n_b {
        let mut v = [0.0; 5];
        for x in &mut v {
            *x = r.f64("building")?;
        }
        buildings.push(Building {
            cx: v[0],
            cy: v[1],
            width: v[2],
            depth: v[3],
            height: v[4],
        });
    }
    let nt = r.count("terrain point count")?;
    let no = r.count("obstacle point count")?;
    let nv = r.count("volume point count")?;
    let terrain = r.matrix(nt, 3, "terrain points")?;
    let obstacles = r.matrix(no, 3, "obstacle points")?;
    let volume = r.matrix(nv, 3, "volume points")?;
    let fields = r.matrix(nv, 7, "volume fields")?;
    if r.pos != buf.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: format!("{} trailing bytes after the declared arrays", buf.len() - r.pos),
        });
    }
    Ok(FlowSample {
        geometry_id,
        geometry: GeometrySample { buildings },
        stability,
        terrain,
        obstacles,
        volume,
        fields,
    })
}

pub fn write_sample(sample: &FlowSample, path: &Path) -> Result<()> {
    fs::write(path, encode_sample(sample))?;
    Ok(())
}

pub fn read_sample(path: &Path) -> Result<FlowSample> {
    decode_sample(&fs::read(path)?)
}

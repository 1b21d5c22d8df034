//! Bundle files.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        6 bytes  "IMLUT1"
//! version      u16
//! K            u8       kernel count
//! B            u8       branch count
//! kernels      u8 length + ASCII kernel code, e.g. "NLC"
//! Q_w          u8       levels per axis of the weight tables
//! Q_r          u8       levels per axis of the refiner tables
//! G            u8       scale grid size
//! grid         G x f32
//! tables, in order lut_w[0..B], lut_s, lut_r[0..B], each:
//!   scale      f32
//!   offset     f32
//!   payload    4-D tables: Q^4 * out_dim x i8, value = offset + scale * q
//!              scale table: G * K x f32 (scale 1, offset 0)
//! ```

use std::fs;
use std::path::Path;

use super::{Lut4D, LutBundle, LutS};
use crate::binio::{put_f32s, put_string, Reader};
use crate::error::{Error, Result};
use crate::kernels::KernelSet;

pub const MAGIC: &[u8; 6] = b"IMLUT1";
pub const VERSION: u16 = 1;

/// Signed 8-bit codes with an affine dequantization.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTable {
    pub scale: f32,
    pub offset: f32,
    pub codes: Vec<i8>,
}

impl QuantizedTable {
    pub fn dequantize(&self) -> Vec<f64> {
        self.codes.iter().map(|&q| dequant(self.scale, self.offset, q)).collect()
    }
}

#[inline]
fn dequant(scale: f32, offset: f32, q: i8) -> f64 {
    offset as f64 + scale as f64 * q as f64
}

/// Map `[min, max]` onto codes `-128..=127`.
pub fn quantize_table(values: &[f64]) -> QuantizedTable {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if values.is_empty() {
        return QuantizedTable { scale: 0.0, offset: 0.0, codes: Vec::new() };
    }
    let scale = ((hi - lo) / 255.0) as f32;
    if scale == 0.0 {
        return QuantizedTable { scale: 0.0, offset: lo as f32, codes: vec![0; values.len()] };
    }
    let offset = (lo + 128.0 * scale as f64) as f32;
    let codes = values
        .iter()
        .map(|&v| ((v - offset as f64) / scale as f64).round().clamp(-128.0, 127.0) as i8)
        .collect();
    QuantizedTable { scale, offset, codes }
}

fn levels_u8(t: &Lut4D) -> Result<u8> {
    u8::try_from(t.levels()).map_err(|_| Error::contract(format!("{} levels do not fit the header", t.levels())))
}

fn step_for_levels(levels: u8, at: u64) -> Result<u32> {
    let levels = levels as u32;
    if levels >= 2 && 256 % (levels - 1) == 0 {
        let step = 256 / (levels - 1);
        if Lut4D::levels_for(step).is_ok() {
            return Ok(step);
        }
    }
    Err(Error::format_at(at, format!("unsupported level count {levels}")))
}

pub fn serialize(bundle: &LutBundle) -> Result<Vec<u8>> {
    let grid = bundle.lut_s().grid();
    let grid_len = u8::try_from(grid.len()).map_err(|_| Error::contract("scale grid longer than 255"))?;
    let mut out = Vec::with_capacity(bundle.entry_count() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(bundle.k() as u8);
    out.push(bundle.branches() as u8);
    put_string(&mut out, &bundle.kernel_set().code());
    out.push(levels_u8(&bundle.lut_w()[0])?);
    out.push(levels_u8(&bundle.lut_r()[0])?);
    out.push(grid_len);
    for &g in grid {
        out.extend_from_slice(&(g as f32).to_le_bytes());
    }
    for t in bundle.lut_w() {
        put_lut(&mut out, t);
    }
    out.extend_from_slice(&1f32.to_le_bytes());
    out.extend_from_slice(&0f32.to_le_bytes());
    put_f32s(&mut out, bundle.lut_s().entries());
    for t in bundle.lut_r() {
        put_lut(&mut out, t);
    }
    Ok(out)
}

fn put_lut(out: &mut Vec<u8>, t: &Lut4D) {
    let q = quantize_table(t.entries());
    out.extend_from_slice(&q.scale.to_le_bytes());
    out.extend_from_slice(&q.offset.to_le_bytes());
    out.extend(q.codes.iter().map(|&c| c as u8));
}

fn read_lut4d(r: &mut Reader, step: u32, out_dim: usize) -> Result<Lut4D> {
    let scale = r.f32("table scale")?;
    let offset = r.f32("table offset")?;
    let n = Lut4D::levels_for(step)?.pow(4) * out_dim;
    let at = r.offset();
    let codes = r.take(n, "table payload")?;
    let data: Vec<f64> = codes.iter().map(|&c| dequant(scale, offset, c as i8)).collect();
    Lut4D::new(step, out_dim, data).map_err(|e| Error::format_at(at, e.to_string()))
}

pub fn deserialize(buf: &[u8]) -> Result<LutBundle> {
    let mut r = Reader::new(buf);
    r.magic(MAGIC)?;
    let at = r.offset();
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::format_at(at, format!("unsupported bundle version {version}")));
    }
    let k = r.u8("kernel count")? as usize;
    let at = r.offset();
    let branches = r.u8("branch count")? as usize;
    if !(1..=3).contains(&branches) {
        return Err(Error::format_at(at, format!("invalid branch count {branches}")));
    }
    let at = r.offset();
    let code = r.string("kernel code")?;
    let ks = KernelSet::parse(&code).map_err(|e| Error::format_at(at, e.to_string()))?;
    if ks.len() != k {
        return Err(Error::format_at(at, format!("kernel code {code} does not have {k} kernels")));
    }
    let at = r.offset();
    let step_w = step_for_levels(r.u8("Q_w")?, at)?;
    let at = r.offset();
    let step_r = step_for_levels(r.u8("Q_r")?, at)?;
    let g = r.u8("grid size")? as usize;
    let grid: Vec<f64> = (0..g).map(|_| r.f32("scale grid").map(f64::from)).collect::<Result<_>>()?;

    let lut_w = (0..branches).map(|_| read_lut4d(&mut r, step_w, k)).collect::<Result<Vec<_>>>()?;
    let at = r.offset();
    let (scale, offset) = (r.f32("table scale")?, r.f32("table offset")?);
    if scale != 1.0 || offset != 0.0 {
        return Err(Error::format_at(at, "scale table must be stored unquantized"));
    }
    let s_data = r.f32s(g * k, "scale table")?;
    let lut_s = LutS::new(grid, k, s_data).map_err(|e| Error::format_at(at, e.to_string()))?;
    let lut_r = (0..branches).map(|_| read_lut4d(&mut r, step_r, 1)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    LutBundle::new(ks, lut_w, lut_s, lut_r)
}

pub fn save(bundle: &LutBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, serialize(bundle)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<LutBundle> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    deserialize(&buf)
}

impl LutBundle {
    /// The tables exactly as a save and reload would return them.
    pub fn quantized(&self) -> Result<LutBundle> {
        deserialize(&serialize(self)?)
    }

    pub fn serialized_len(&self) -> Result<usize> {
        Ok(serialize(self)?.len())
    }
}

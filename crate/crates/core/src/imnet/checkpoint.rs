//! Parameter checkpoints.
//!
//! Layout (little-endian): `b"IMNET"`, u16 version, u8 K, u8 B, u16 N,
//! u8-length-prefixed kernel code, then every parameter tensor as raw f32 in
//! declaration order (see [`ImNetParams::tensors`]).

use std::fs;
use std::path::Path;

use super::mlp::Mlp;
use super::scale::{encoded_len, ScaleModulator, MODULATOR_HIDDEN};
use super::{ImNetParams, HIDDEN};
use crate::binio::{put_f32s, put_string, Reader};
use crate::error::{Error, Result};
use crate::kernels::KernelSet;

pub const MAGIC: &[u8; 5] = b"IMNET";
pub const VERSION: u16 = 1;

pub fn to_bytes(p: &ImNetParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * p.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(p.k() as u8);
    out.push(p.branches() as u8);
    out.extend_from_slice(&(p.order() as u16).to_le_bytes());
    put_string(&mut out, &p.kernel_set().code());
    for t in p.tensors() {
        put_f32s(&mut out, t);
    }
    out
}

pub fn from_bytes(buf: &[u8]) -> Result<ImNetParams> {
    let mut r = Reader::new(buf);
    r.magic(MAGIC)?;
    let at = r.offset();
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::format_at(at, format!("unsupported checkpoint version {version}")));
    }
    let k = r.u8("kernel count")? as usize;
    let at = r.offset();
    let branches = r.u8("branch count")? as usize;
    if !(1..=3).contains(&branches) {
        return Err(Error::format_at(at, format!("invalid branch count {branches}")));
    }
    let order = r.u16("scale order")? as usize;
    let at = r.offset();
    let code = r.string("kernel code")?;
    let ks = KernelSet::parse(&code).map_err(|e| Error::format_at(at, e.to_string()))?;
    if ks.len() != k {
        return Err(Error::format_at(at, format!("kernel code {code} does not have {k} kernels")));
    }

    let mut p = ImNetParams::from_parts(
        ks,
        vec![Mlp::zeros(&[4, HIDDEN, HIDDEN, k]); branches],
        vec![Mlp::zeros(&[4, HIDDEN, HIDDEN, 1]); branches],
        ScaleModulator::from_mlp(order, Mlp::zeros(&[encoded_len(order), MODULATOR_HIDDEN, k]))?,
    )?;
    for t in p.tensors_mut() {
        let vals = r.f32s(t.len(), "parameters")?;
        t.copy_from_slice(&vals);
    }
    r.finish()?;
    Ok(p)
}

pub fn save(p: &ImNetParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(p)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ImNetParams> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}

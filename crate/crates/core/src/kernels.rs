//! Interpolation kernels and the separable arbitrary-scale resampler.
//!
//! Coordinates follow the half-pixel-center convention
//! `src = (dst + 0.5) / r - 0.5`, taps are renormalized per output pixel and
//! out-of-range source indices are clamped (edge replication).

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::imgio::Plane;

const BICUBIC_A: f64 = -0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Kernel {
    Nearest,
    Bilinear,
    Bicubic,
    Lanczos2,
    Lanczos3,
}

impl Kernel {
    pub const ALL: [Kernel; 5] = [
        Kernel::Nearest,
        Kernel::Bilinear,
        Kernel::Bicubic,
        Kernel::Lanczos2,
        Kernel::Lanczos3,
    ];

    /// Radius in source pixels outside which the weight is zero.
    pub fn support(self) -> f64 {
        match self {
            Kernel::Nearest => 0.5,
            Kernel::Bilinear => 1.0,
            Kernel::Bicubic | Kernel::Lanczos2 => 2.0,
            Kernel::Lanczos3 => 3.0,
        }
    }

    /// Taps per axis under the cost model (`2 * support`).
    pub fn taps(self) -> u64 {
        (2.0 * self.support()) as u64
    }

    pub fn code(self) -> &'static str {
        match self {
            Kernel::Nearest => "N",
            Kernel::Bilinear => "L",
            Kernel::Bicubic => "C",
            Kernel::Lanczos2 => "Z",
            Kernel::Lanczos3 => "Z3",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Nearest => "nearest",
            Kernel::Bilinear => "bilinear",
            Kernel::Bicubic => "bicubic",
            Kernel::Lanczos2 => "lanczos2",
            Kernel::Lanczos3 => "lanczos3",
        }
    }

    pub fn from_name(name: &str) -> Result<Kernel> {
        Kernel::ALL
            .into_iter()
            .find(|k| k.name() == name.to_ascii_lowercase() || k.code() == name)
            .ok_or_else(|| Error::contract(format!("unknown kernel {name:?}")))
    }

    #[inline]
    pub fn weight(self, x: f64) -> f64 {
        kernel_weight(self, x)
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[inline]
fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else if x.fract() == 0.0 {
        // exact zeros at the integers keep unit-scale resampling exact
        0.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Closed-form kernel value at offset `x` (source pixels).
pub fn kernel_weight(kernel: Kernel, x: f64) -> f64 {
    let ax = x.abs();
    match kernel {
        // half-open [-0.5, 0.5): the left boundary belongs to the kernel
        Kernel::Nearest => {
            if (-0.5..0.5).contains(&x) {
                1.0
            } else {
                0.0
            }
        }
        Kernel::Bilinear => (1.0 - ax).max(0.0),
        Kernel::Bicubic => {
            let a = BICUBIC_A;
            if ax <= 1.0 {
                ((a + 2.0) * ax - (a + 3.0)) * ax * ax + 1.0
            } else if ax < 2.0 {
                ((a * ax - 5.0 * a) * ax + 8.0 * a) * ax - 4.0 * a
            } else {
                0.0
            }
        }
        Kernel::Lanczos2 => lanczos(x, 2.0),
        Kernel::Lanczos3 => lanczos(x, 3.0),
    }
}

#[inline]
fn lanczos(x: f64, n: f64) -> f64 {
    if x.abs() < n {
        sinc(x) * sinc(x / n)
    } else {
        0.0
    }
}

/// Ordered, duplicate-free list of mixing kernels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KernelSet {
    kernels: Vec<Kernel>,
}

impl KernelSet {
    pub fn new(kernels: Vec<Kernel>) -> Result<Self> {
        if kernels.is_empty() {
            return Err(Error::contract("kernel set must not be empty"));
        }
        for (i, k) in kernels.iter().enumerate() {
            if kernels[..i].contains(k) {
                return Err(Error::contract(format!("duplicate kernel {k} in set")));
            }
        }
        Ok(KernelSet { kernels })
    }

    /// Parse a code string such as `NLC`, `NLCZ` or `NLZ3`.
    pub fn parse(code: &str) -> Result<Self> {
        let bytes = code.as_bytes();
        let mut kernels = Vec::new();
        let mut i = 0;
        while i < bytes.len() {
            let k = match bytes[i] {
                b'N' => Kernel::Nearest,
                b'L' => Kernel::Bilinear,
                b'C' => Kernel::Bicubic,
                b'Z' => match bytes.get(i + 1) {
                    Some(b'3') => {
                        i += 1;
                        Kernel::Lanczos3
                    }
                    Some(b'2') => {
                        i += 1;
                        Kernel::Lanczos2
                    }
                    _ => Kernel::Lanczos2,
                },
                other => {
                    return Err(Error::contract(format!(
                        "unknown kernel code {:?} in {code:?}",
                        other as char
                    )))
                }
            };
            kernels.push(k);
            i += 1;
        }
        KernelSet::new(kernels)
    }

    pub fn code(&self) -> String {
        self.kernels.iter().map(|k| k.code()).collect()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn kernels(&self) -> &[Kernel] {
        &self.kernels
    }

    pub fn iter(&self) -> impl Iterator<Item = Kernel> + '_ {
        self.kernels.iter().copied()
    }
}

impl FromStr for KernelSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KernelSet::parse(s)
    }
}

impl fmt::Display for KernelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code())
    }
}

/// Output length `round(r * n)` with round-half-up.
#[inline]
pub fn scaled_len(n: usize, r: f64) -> usize {
    (r * n as f64 + 0.5).floor() as usize
}

fn check_scale(r: f64) -> Result<()> {
    if r.is_finite() && r > 0.0 {
        Ok(())
    } else {
        Err(Error::contract(format!("scale must be positive and finite, got {r}")))
    }
}

/// Normalized taps of a 1-D resampling operator.
#[derive(Clone, Debug)]
pub struct AxisTaps {
    n_in: usize,
    n_out: usize,
    // taps of output `o` live in `start[o]..start[o + 1]`
    start: Vec<usize>,
    index: Vec<usize>,
    weight: Vec<f64>,
}

impl AxisTaps {
    pub fn new(n_in: usize, r: f64, kernel: Kernel, antialias: bool) -> Result<Self> {
        check_scale(r)?;
        if n_in == 0 {
            return Err(Error::contract("cannot resample an empty axis"));
        }
        let n_out = scaled_len(n_in, r);
        let filter_scale = if antialias && r < 1.0 { r } else { 1.0 };
        let support = kernel.support() / filter_scale;
        let mut start = Vec::with_capacity(n_out + 1);
        let mut index = Vec::new();
        let mut weight = Vec::new();
        for o in 0..n_out {
            start.push(index.len());
            let center = (o as f64 + 0.5) / r - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let first = weight.len();
            for i in lo..=hi {
                let w = kernel.weight((i as f64 - center) * filter_scale);
                if w != 0.0 {
                    index.push(i.clamp(0, n_in as isize - 1) as usize);
                    weight.push(w);
                }
            }
            let total: f64 = weight[first..].iter().sum();
            if total == 0.0 {
                return Err(Error::contract(format!(
                    "kernel {kernel} has no support at output {o}"
                )));
            }
            for w in &mut weight[first..] {
                *w /= total;
            }
        }
        start.push(index.len());
        Ok(AxisTaps { n_in, n_out, start, index, weight })
    }

    #[inline]
    pub fn n_in(&self) -> usize {
        self.n_in
    }

    #[inline]
    pub fn n_out(&self) -> usize {
        self.n_out
    }

    /// `(source index, weight)` taps of output `o`.
    pub fn taps(&self, o: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.start[o]..self.start[o + 1];
        self.index[range.clone()].iter().copied().zip(self.weight[range].iter().copied())
    }
}

/// Separable 2-D resampling operator for fixed input dims, scales and kernel.
///
/// The operator is linear, so [`Resampler::apply_transpose`] gives the exact
/// adjoint used when back-propagating through upsampled weight maps.
#[derive(Clone, Debug)]
pub struct Resampler {
    rows: AxisTaps,
    cols: AxisTaps,
}

impl Resampler {
    pub fn new(
        height: usize,
        width: usize,
        r_h: f64,
        r_w: f64,
        kernel: Kernel,
        antialias: bool,
    ) -> Result<Self> {
        Ok(Resampler {
            rows: AxisTaps::new(height, r_h, kernel, antialias)?,
            cols: AxisTaps::new(width, r_w, kernel, antialias)?,
        })
    }

    pub fn in_dims(&self) -> (usize, usize) {
        (self.rows.n_in, self.cols.n_in)
    }

    pub fn out_dims(&self) -> (usize, usize) {
        (self.rows.n_out, self.cols.n_out)
    }

    pub fn apply(&self, src: &Plane) -> Result<Plane> {
        if src.dims() != self.in_dims() {
            return Err(Error::contract(format!(
                "resampler built for {:?}, got {:?}",
                self.in_dims(),
                src.dims()
            )));
        }
        let (h_in, w_in) = self.in_dims();
        let (h_out, w_out) = self.out_dims();
        let s = src.data();
        // horizontal pass: h_in x w_out
        let mut tmp = vec![0.0; h_in * w_out];
        for y in 0..h_in {
            let row = &s[y * w_in..(y + 1) * w_in];
            let out = &mut tmp[y * w_out..(y + 1) * w_out];
            for (x, o) in out.iter_mut().enumerate() {
                *o = self.cols.taps(x).map(|(i, w)| row[i] * w).sum();
            }
        }
        // vertical pass
        let mut dst = vec![0.0; h_out * w_out];
        for y in 0..h_out {
            let out = &mut dst[y * w_out..(y + 1) * w_out];
            for (i, w) in self.rows.taps(y) {
                let row = &tmp[i * w_out..(i + 1) * w_out];
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += w * v;
                }
            }
        }
        Plane::new(h_out, w_out, dst)
    }

    /// Adjoint of [`Resampler::apply`]: maps an output-sized plane back to
    /// input size.
    pub fn apply_transpose(&self, grad: &Plane) -> Result<Plane> {
        if grad.dims() != self.out_dims() {
            return Err(Error::contract(format!(
                "transpose expects {:?}, got {:?}",
                self.out_dims(),
                grad.dims()
            )));
        }
        let (h_in, w_in) = self.in_dims();
        let (h_out, w_out) = self.out_dims();
        let g = grad.data();
        let mut tmp = vec![0.0; h_in * w_out];
        for y in 0..h_out {
            let gin = &g[y * w_out..(y + 1) * w_out];
            for (i, w) in self.rows.taps(y) {
                let row = &mut tmp[i * w_out..(i + 1) * w_out];
                for (t, &v) in row.iter_mut().zip(gin) {
                    *t += w * v;
                }
            }
        }
        let mut dst = vec![0.0; h_in * w_in];
        for y in 0..h_in {
            let trow = &tmp[y * w_out..(y + 1) * w_out];
            let out = &mut dst[y * w_in..(y + 1) * w_in];
            for (x, &v) in trow.iter().enumerate() {
                for (i, w) in self.cols.taps(x) {
                    out[i] += w * v;
                }
            }
        }
        Plane::new(h_in, w_in, dst)
    }
}

/// Resample `img` by `(r_h, r_w)` with one kernel. Never clamps values.
pub fn resample(img: &Plane, r_h: f64, r_w: f64, kernel: Kernel, antialias: bool) -> Result<Plane> {
    Resampler::new(img.height(), img.width(), r_h, r_w, kernel, antialias)?.apply(img)
}

/// One upsampling per kernel of the set, in set order.
pub fn resample_set(img: &Plane, ks: &KernelSet, r_h: f64, r_w: f64) -> Result<Vec<Plane>> {
    ks.iter().map(|k| resample(img, r_h, r_w, k, false)).collect()
}

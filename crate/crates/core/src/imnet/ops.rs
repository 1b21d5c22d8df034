//! Weight modulation, mixing, pseudo ground-truth weights and losses.

use crate::error::{Error, Result};
use crate::imgio::Plane;
use crate::kernels::{resample, KernelSet};

/// Which raster a set of weight planes is defined on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resolution {
    Lr,
    Hr,
}

/// `K` per-pixel weight planes, one per kernel of the set.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMaps {
    pub planes: Vec<Plane>,
    pub resolution: Resolution,
    /// Per-pixel weights are non-negative and sum to one.
    pub normalized: bool,
}

impl WeightMaps {
    pub fn new(planes: Vec<Plane>, resolution: Resolution, normalized: bool) -> Result<Self> {
        let dims = planes
            .first()
            .ok_or_else(|| Error::contract("weight maps need at least one plane"))?
            .dims();
        if planes.iter().any(|p| p.dims() != dims) {
            return Err(Error::contract("weight planes differ in size"));
        }
        Ok(WeightMaps { planes, resolution, normalized })
    }

    pub fn k(&self) -> usize {
        self.planes.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.planes[0].dims()
    }

    /// Largest deviation of a per-pixel weight sum from one.
    pub fn max_sum_error(&self) -> f64 {
        (0..self.planes[0].len())
            .map(|i| (self.planes.iter().map(|p| p.data()[i]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-wise softmax of `logits` (`rows x k`, row-major) in place.
pub fn softmax_rows(logits: &mut [f64], k: usize) {
    for row in logits.chunks_exact_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

/// Scale each LR plane by its modulation entry and upsample it with its own
/// kernel. The result is deliberately left unnormalized.
pub fn modulate_and_upsample(
    w: &WeightMaps,
    s: &[f64],
    ks: &KernelSet,
    r_h: f64,
    r_w: f64,
) -> Result<WeightMaps> {
    if w.resolution != Resolution::Lr {
        return Err(Error::contract("modulate_and_upsample expects LR weight maps"));
    }
    if w.k() != ks.len() || s.len() != ks.len() {
        return Err(Error::contract(format!(
            "K mismatch: {} planes, {} modulation entries, {} kernels",
            w.k(),
            s.len(),
            ks.len()
        )));
    }
    let planes = w
        .planes
        .iter()
        .zip(s)
        .zip(ks.iter())
        .map(|((plane, &sk), kernel)| resample(&plane.map(|v| sk * v), r_h, r_w, kernel, false))
        .collect::<Result<Vec<_>>>()?;
    WeightMaps::new(planes, Resolution::Hr, false)
}

/// Per-pixel `sum_k image_k * weight_k`; values are not clamped.
pub fn mix(images: &[Plane], w: &WeightMaps) -> Result<Plane> {
    if images.len() != w.k() {
        return Err(Error::contract(format!("{} images for {} weight planes", images.len(), w.k())));
    }
    let dims = w.dims();
    if images.iter().any(|img| img.dims() != dims) {
        return Err(Error::contract("mix: image and weight dims differ"));
    }
    let mut out = Plane::zeros(dims.0, dims.1);
    for (img, plane) in images.iter().zip(&w.planes) {
        for ((o, &a), &b) in out.data_mut().iter_mut().zip(img.data()).zip(plane.data()) {
            *o += a * b;
        }
    }
    Ok(out)
}

/// Temperature-softmax of negative per-kernel deviations from `gt`,
/// measured on the 0-255 scale.
pub fn pseudo_gt_weights(sr_set: &[Plane], gt: &Plane, beta: f64) -> Result<WeightMaps> {
    if beta.is_nan() || beta <= 0.0 {
        return Err(Error::contract(format!("beta must be positive, got {beta}")));
    }
    if sr_set.is_empty() || sr_set.iter().any(|p| p.dims() != gt.dims()) {
        return Err(Error::contract("pseudo-GT inputs must be non-empty and match the GT size"));
    }
    let k = sr_set.len();
    let n = gt.len();
    let mut logits = vec![0.0; n * k];
    for (kk, sr) in sr_set.iter().enumerate() {
        for (i, (&a, &g)) in sr.data().iter().zip(gt.data()).enumerate() {
            logits[i * k + kk] = -beta * (255.0 * (a - g)).abs();
        }
    }
    softmax_rows(&mut logits, k);
    let planes = (0..k)
        .map(|kk| Plane::new(gt.height(), gt.width(), (0..n).map(|i| logits[i * k + kk]).collect()))
        .collect::<Result<Vec<_>>>()?;
    WeightMaps::new(planes, Resolution::Hr, true)
}

/// Mean squared reconstruction error.
pub fn loss_rec(sr: &Plane, gt: &Plane) -> Result<f64> {
    if sr.dims() != gt.dims() || sr.is_empty() {
        return Err(Error::contract("loss_rec: dimension mismatch"));
    }
    let sse: f64 = sr.data().iter().zip(gt.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sse / sr.len() as f64)
}

/// Mean over kernels and pixels of squared weight differences.
pub fn loss_guide(w: &WeightMaps, wbar: &WeightMaps) -> Result<f64> {
    if w.k() != wbar.k() || w.dims() != wbar.dims() {
        return Err(Error::contract("loss_guide: shape mismatch"));
    }
    let mut sse = 0.0;
    for (a, b) in w.planes.iter().zip(&wbar.planes) {
        sse += a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    }
    Ok(sse / (w.k() * w.planes[0].len()) as f64)
}

pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_BETA: f64 = 0.1;

pub fn loss_total(rec: f64, guide: f64, lambda: f64) -> f64 {
    rec + lambda * guide
}

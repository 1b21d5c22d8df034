use ndarray::Array2;

use super::mlp::MlpCache;
use super::ops::{loss_guide, loss_rec, pseudo_gt_weights, softmax_rows, Resolution, WeightMaps};
use super::scale::ModulatorCache;
use super::{check_min_dims, gather_indices, gather_matrix, rotation_count, ImNetParams};
use crate::error::{Error, Result};
use crate::imgio::{Image, Plane};
use crate::kernels::Resampler;

/// Branch- and rotation-averaged predictor logits, `h * w` rows of `K`.
pub fn predictor_logits(p: &ImNetParams, lr: &Plane, ensemble: bool) -> Result<Vec<f64>> {
    let (h, w) = lr.dims();
    check_min_dims(h, w, "LR input")?;
    let k = p.k();
    let n = h * w;
    let rots = rotation_count(ensemble);
    let inv = 1.0 / (rots * p.branches()) as f64;
    let mut acc = vec![0.0; n * k];
    for (pattern, mlp) in p.patterns().iter().zip(p.predictor()) {
        let idx = gather_indices(h, w, *pattern, rots);
        let out = mlp.infer(gather_matrix(lr.data(), &idx).view());
        let out = out.as_slice().expect("standard layout");
        for rot in 0..rots {
            let block = &out[rot * n * k..(rot + 1) * n * k];
            for (a, &v) in acc.iter_mut().zip(block) {
                *a += v;
            }
        }
    }
    acc.iter_mut().for_each(|v| *v *= inv);
    Ok(acc)
}

pub(crate) fn logits_to_weights(mut logits: Vec<f64>, h: usize, w: usize, k: usize) -> Result<WeightMaps> {
    softmax_rows(&mut logits, k);
    split_planes(&logits, h, w, k, Resolution::Lr, true)
}

pub(crate) fn split_planes(
    rows: &[f64],
    h: usize,
    w: usize,
    k: usize,
    resolution: Resolution,
    normalized: bool,
) -> Result<WeightMaps> {
    let n = h * w;
    let planes = (0..k)
        .map(|kk| Plane::new(h, w, (0..n).map(|i| rows[i * k + kk]).collect()))
        .collect::<Result<Vec<_>>>()?;
    WeightMaps::new(planes, resolution, normalized)
}

/// Normalized per-pixel mixing weights on the LR grid.
pub fn forward_weight_predictor(p: &ImNetParams, lr: &Plane, ensemble: bool) -> Result<WeightMaps> {
    let logits = predictor_logits(p, lr, ensemble)?;
    logits_to_weights(logits, lr.height(), lr.width(), p.k())
}

/// Averaged refiner residual. Branch inputs are the pixels of `x` clamped to
/// `[0, 1]`, the domain the refiner table covers.
pub fn refiner_residual(p: &ImNetParams, x: &Plane, ensemble: bool) -> Result<Plane> {
    let (h, w) = x.dims();
    check_min_dims(h, w, "refiner input")?;
    let n = h * w;
    let rots = rotation_count(ensemble);
    let inv = 1.0 / (rots * p.branches()) as f64;
    let clamped: Vec<f64> = x.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let mut acc = vec![0.0; n];
    for (pattern, mlp) in p.patterns().iter().zip(p.refiner()) {
        let idx = gather_indices(h, w, *pattern, rots);
        let out = mlp.infer(gather_matrix(&clamped, &idx).view());
        for (i, &v) in out.iter().enumerate() {
            acc[i % n] += v;
        }
    }
    acc.iter_mut().for_each(|v| *v *= inv);
    Plane::new(h, w, acc)
}

/// `clamp(x + residual, 0, 1)`.
pub fn forward_refiner(p: &ImNetParams, x: &Plane, ensemble: bool) -> Result<Image> {
    let res = refiner_residual(p, x, ensemble)?;
    let mut out = x.clone();
    out.data_mut().iter_mut().zip(res.data()).for_each(|(o, r)| *o += r);
    Ok(out.clamp01())
}

/// Reconstruction and guidance loss of one training sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleLoss {
    pub rec: f64,
    pub guide: f64,
}

/// Cached forward pass of the full network on one LR input, always with the
/// four-rotation ensemble.
#[derive(Debug)]
pub struct SampleForward {
    lr_dims: (usize, usize),
    pred_caches: Vec<MlpCache>,
    pub weights: WeightMaps,
    pub s: Vec<f64>,
    mod_cache: ModulatorCache,
    resamplers: Vec<Resampler>,
    pub sr_set: Vec<Plane>,
    pub wsr: WeightMaps,
    pub mixed: Plane,
    ref_idx: Vec<Vec<[usize; 4]>>,
    ref_caches: Vec<MlpCache>,
    pre_clamp: Plane,
    pub output: Plane,
}

impl SampleForward {
    pub fn run(p: &ImNetParams, lr: &Plane, r_h: f64, r_w: f64) -> Result<Self> {
        let (h, w) = lr.dims();
        check_min_dims(h, w, "LR input")?;
        let k = p.k();
        let n = h * w;
        let rots = 4;
        let inv = 1.0 / (rots * p.branches()) as f64;

        let mut logits = vec![0.0; n * k];
        let mut pred_caches = Vec::with_capacity(p.branches());
        for (pattern, mlp) in p.patterns().iter().zip(p.predictor()) {
            let idx = gather_indices(h, w, *pattern, rots);
            let (out, cache) = mlp.forward_cached(gather_matrix(lr.data(), &idx));
            for (i, &v) in out.iter().enumerate() {
                logits[i % (n * k)] += v;
            }
            pred_caches.push(cache);
        }
        logits.iter_mut().for_each(|v| *v *= inv);
        let weights = logits_to_weights(logits, h, w, k)?;

        let (s, mod_cache) = p.modulator().forward_cached((r_h * r_w).sqrt())?;
        let resamplers = p
            .kernel_set()
            .iter()
            .map(|kernel| Resampler::new(h, w, r_h, r_w, kernel, false))
            .collect::<Result<Vec<_>>>()?;
        let sr_set = resamplers.iter().map(|rs| rs.apply(lr)).collect::<Result<Vec<_>>>()?;
        let wsr_planes = resamplers
            .iter()
            .zip(&weights.planes)
            .zip(&s)
            .map(|((rs, plane), &sk)| rs.apply(&plane.map(|v| sk * v)))
            .collect::<Result<Vec<_>>>()?;
        let wsr = WeightMaps::new(wsr_planes, Resolution::Hr, false)?;
        let mixed = super::ops::mix(&sr_set, &wsr)?;

        let (hh, ww) = mixed.dims();
        check_min_dims(hh, ww, "HR output")?;
        let nh = hh * ww;
        let clamped: Vec<f64> = mixed.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let mut residual = vec![0.0; nh];
        let mut ref_idx = Vec::with_capacity(p.branches());
        let mut ref_caches = Vec::with_capacity(p.branches());
        for (pattern, mlp) in p.patterns().iter().zip(p.refiner()) {
            let idx = gather_indices(hh, ww, *pattern, rots);
            let (out, cache) = mlp.forward_cached(gather_matrix(&clamped, &idx));
            for (i, &v) in out.iter().enumerate() {
                residual[i % nh] += v;
            }
            ref_idx.push(idx);
            ref_caches.push(cache);
        }
        let pre: Vec<f64> = mixed
            .data()
            .iter()
            .zip(&residual)
            .map(|(m, r)| m + r * inv)
            .collect();
        let pre_clamp = Plane::new(hh, ww, pre)?;
        let output = pre_clamp.map(|v| v.clamp(0.0, 1.0));

        Ok(SampleForward {
            lr_dims: (h, w),
            pred_caches,
            weights,
            s,
            mod_cache,
            resamplers,
            sr_set,
            wsr,
            mixed,
            ref_idx,
            ref_caches,
            pre_clamp,
            output,
        })
    }

    /// Losses against `gt`, with gradients of `weight * (rec + lambda * guide)`
    /// accumulated into `grads`.
    pub fn loss_and_backward(
        &self,
        p: &ImNetParams,
        gt: &Plane,
        lambda: f64,
        beta: f64,
        weight: f64,
        grads: &mut ImNetParams,
    ) -> Result<SampleLoss> {
        let rec = loss_rec(&self.output, gt)?;
        let wbar = pseudo_gt_weights(&self.sr_set, gt, beta)?;
        let guide = loss_guide(&self.wsr, &wbar)?;

        let n = gt.len() as f64;
        let d_out = Plane::new(
            gt.height(),
            gt.width(),
            self.output
                .data()
                .iter()
                .zip(gt.data())
                .map(|(o, g)| weight * 2.0 * (o - g) / n)
                .collect(),
        )?;
        let gscale = weight * lambda * 2.0 / (p.k() as f64 * n);
        let d_wsr: Vec<Plane> = self
            .wsr
            .planes
            .iter()
            .zip(&wbar.planes)
            .map(|(a, b)| {
                Plane::new(
                    gt.height(),
                    gt.width(),
                    a.data().iter().zip(b.data()).map(|(x, y)| gscale * (x - y)).collect(),
                )
            })
            .collect::<Result<_>>()?;
        self.backward(p, &d_out, Some(&d_wsr), grads)?;
        Ok(SampleLoss { rec, guide })
    }

    /// Reverse pass for upstream gradients on the output and, optionally,
    /// directly on the HR weight maps.
    pub fn backward(
        &self,
        p: &ImNetParams,
        d_out: &Plane,
        d_wsr: Option<&[Plane]>,
        grads: &mut ImNetParams,
    ) -> Result<()> {
        if d_out.dims() != self.output.dims() {
            return Err(Error::contract("output gradient has the wrong shape"));
        }
        if grads.k() != p.k() || grads.branches() != p.branches() {
            return Err(Error::contract("gradient buffer does not match parameters"));
        }
        let k = p.k();
        let (h, w) = self.lr_dims;
        let n = h * w;
        let (hh, ww) = self.output.dims();
        let nh = hh * ww;
        let inv = 1.0 / (4 * p.branches()) as f64;

        // output clamp
        let dy: Vec<f64> = d_out
            .data()
            .iter()
            .zip(self.pre_clamp.data())
            .map(|(&d, &y)| if (0.0..=1.0).contains(&y) { d } else { 0.0 })
            .collect();

        // refiner: direct path plus the path through its clamped inputs
        let mut dx = dy.clone();
        let mixed = self.mixed.data();
        for b in 0..p.branches() {
            let upstream = Array2::from_shape_fn((4 * nh, 1), |(r, _)| dy[r % nh] * inv);
            let dinput = p.refiner()[b]
                .backward(&self.ref_caches[b], upstream, &mut grads.refiner_mut()[b], true)
                .expect("input gradient requested");
            for (row, ix) in self.ref_idx[b].iter().enumerate() {
                for (m, &i) in ix.iter().enumerate() {
                    if (0.0..=1.0).contains(&mixed[i]) {
                        dx[i] += dinput[[row, m]];
                    }
                }
            }
        }

        // mixing, upsampling and modulation
        let mut ds = vec![0.0; k];
        let mut dweights = vec![0.0; n * k];
        for kk in 0..k {
            let mut dwsr: Vec<f64> = dx.iter().zip(self.sr_set[kk].data()).map(|(a, b)| a * b).collect();
            if let Some(extra) = d_wsr {
                dwsr.iter_mut().zip(extra[kk].data()).for_each(|(a, b)| *a += b);
            }
            let dhat = self.resamplers[kk].apply_transpose(&Plane::new(hh, ww, dwsr)?)?;
            let wk = self.weights.planes[kk].data();
            ds[kk] = dhat.data().iter().zip(wk).map(|(a, b)| a * b).sum();
            for (i, &g) in dhat.data().iter().enumerate() {
                dweights[i * k + kk] = self.s[kk] * g;
            }
        }

        // softmax
        let mut dlogits = vec![0.0; n * k];
        for i in 0..n {
            let wrow: Vec<f64> = (0..k).map(|kk| self.weights.planes[kk].data()[i]).collect();
            let drow = &dweights[i * k..(i + 1) * k];
            let dot: f64 = wrow.iter().zip(drow).map(|(a, b)| a * b).sum();
            for kk in 0..k {
                dlogits[i * k + kk] = wrow[kk] * (drow[kk] - dot);
            }
        }

        for b in 0..p.branches() {
            let upstream = Array2::from_shape_fn((4 * n, k), |(r, c)| dlogits[(r % n) * k + c] * inv);
            p.predictor()[b].backward(&self.pred_caches[b], upstream, &mut grads.predictor_mut()[b], false);
        }

        p.modulator().backward(&self.mod_cache, &ds, grads.modulator_mut());
        Ok(())
    }
}

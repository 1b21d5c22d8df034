//! LUT-aware fine-tuning: every stored entry is a parameter. A lookup is
//! linear in the entries it touches, so its gradient is the simplex weights;
//! the scale table routes gradient to the selected bin.

use log::info;

use super::{LutBundle, Simplex};
use crate::error::{Error, Result};
use crate::imgio::{to_code, Plane};
use crate::imnet::ops::{loss_guide, loss_rec, mix, pseudo_gt_weights, softmax_rows, Resolution, WeightMaps};
use crate::imnet::{check_min_dims, gather_indices, SampleLoss};
use crate::kernels::Resampler;
use crate::train::{adam_update, iteration_rng, sample_batch, Dataset, StepStats, TrainConfig};

/// Fine-tuning defaults: 2000 iterations at a learning rate of 1e-4.
pub fn finetune_config() -> TrainConfig {
    TrainConfig { iterations: 2000, lr: 1e-4, ..TrainConfig::default() }
}

/// Cached forward pass of the table pipeline on one LR input, with the
/// four-rotation ensemble.
#[derive(Debug)]
pub struct LutForward {
    lr_dims: (usize, usize),
    w_simplex: Vec<Vec<Simplex>>,
    pub weights: WeightMaps,
    s_index: usize,
    pub s: Vec<f64>,
    resamplers: Vec<Resampler>,
    pub sr_set: Vec<Plane>,
    pub wsr: WeightMaps,
    pub mixed: Plane,
    r_simplex: Vec<Vec<Simplex>>,
    pre_clamp: Plane,
    pub output: Plane,
}

impl LutForward {
    pub fn run(bundle: &LutBundle, lr: &Plane, r_h: f64, r_w: f64) -> Result<Self> {
        let (h, w) = lr.dims();
        check_min_dims(h, w, "LR input")?;
        let k = bundle.k();
        let n = h * w;
        let inv = 1.0 / (4 * bundle.branches()) as f64;

        let codes = lr.to_codes();
        let mut logits = vec![0.0; n * k];
        let mut w_simplex = Vec::with_capacity(bundle.branches());
        for (pattern, table) in bundle.patterns().into_iter().zip(bundle.lut_w()) {
            let idx = gather_indices(h, w, pattern, 4);
            let mut simplices = Vec::with_capacity(idx.len());
            for (row, ix) in idx.iter().enumerate() {
                let i = row % n;
                let (verts, weights) = table.simplex(ix.map(|j| codes[j]));
                for (&v, &wt) in verts.iter().zip(&weights) {
                    for c in 0..k {
                        logits[i * k + c] += inv * wt * table.entries()[v + c];
                    }
                }
                simplices.push((verts, weights));
            }
            w_simplex.push(simplices);
        }
        softmax_rows(&mut logits, k);
        let weights = WeightMaps::new(
            (0..k)
                .map(|c| Plane::new(h, w, (0..n).map(|i| logits[i * k + c]).collect()))
                .collect::<Result<_>>()?,
            Resolution::Lr,
            true,
        )?;

        let r_eff = (r_h * r_w).sqrt();
        bundle.lut_s().nearest(r_eff)?;
        let s_index = bundle.lut_s().nearest_index(r_eff);
        let s = bundle.lut_s().entry(s_index).to_vec();
        let resamplers = bundle
            .kernel_set()
            .iter()
            .map(|kernel| Resampler::new(h, w, r_h, r_w, kernel, false))
            .collect::<Result<Vec<_>>>()?;
        let sr_set = resamplers.iter().map(|rs| rs.apply(lr)).collect::<Result<Vec<_>>>()?;
        let wsr = WeightMaps::new(
            resamplers
                .iter()
                .zip(&weights.planes)
                .zip(&s)
                .map(|((rs, plane), &sk)| rs.apply(&plane.map(|v| sk * v)))
                .collect::<Result<_>>()?,
            Resolution::Hr,
            false,
        )?;
        let mixed = mix(&sr_set, &wsr)?;

        let (hh, ww) = mixed.dims();
        check_min_dims(hh, ww, "HR output")?;
        let nh = hh * ww;
        let xcodes: Vec<u8> = mixed.data().iter().map(|&v| to_code(v)).collect();
        let mut residual = vec![0.0; nh];
        let mut r_simplex = Vec::with_capacity(bundle.branches());
        for (pattern, table) in bundle.patterns().into_iter().zip(bundle.lut_r()) {
            let idx = gather_indices(hh, ww, pattern, 4);
            let mut simplices = Vec::with_capacity(idx.len());
            for (row, ix) in idx.iter().enumerate() {
                let sx = table.simplex(ix.map(|j| xcodes[j]));
                residual[row % nh] += inv * sx.0.iter().zip(&sx.1).map(|(&v, &wt)| wt * table.entries()[v]).sum::<f64>();
                simplices.push(sx);
            }
            r_simplex.push(simplices);
        }
        let pre_clamp = Plane::new(hh, ww, mixed.data().iter().zip(&residual).map(|(a, b)| a + b).collect())?;
        let output = pre_clamp.map(|v| v.clamp(0.0, 1.0));
        Ok(LutForward {
            lr_dims: (h, w),
            w_simplex,
            weights,
            s_index,
            s,
            resamplers,
            sr_set,
            wsr,
            mixed,
            r_simplex,
            pre_clamp,
            output,
        })
    }

    /// Losses against `gt`; gradients of `weight * (rec + lambda * guide)` are
    /// added to `grads`, laid out like [`LutBundle::tables`]. The refiner
    /// tables see 8-bit codes, so no gradient flows through their inputs.
    pub fn loss_and_backward(
        &self,
        bundle: &LutBundle,
        gt: &Plane,
        lambda: f64,
        beta: f64,
        weight: f64,
        grads: &mut [Vec<f64>],
    ) -> Result<SampleLoss> {
        if gt.dims() != self.output.dims() {
            return Err(Error::contract("ground truth does not match the output size"));
        }
        let rec = loss_rec(&self.output, gt)?;
        let wbar = pseudo_gt_weights(&self.sr_set, gt, beta)?;
        let guide = loss_guide(&self.wsr, &wbar)?;

        let k = bundle.k();
        let b = bundle.branches();
        let (h, w) = self.lr_dims;
        let n = h * w;
        let (hh, ww) = self.output.dims();
        let nh = (hh * ww) as f64;
        let inv = 1.0 / (4 * b) as f64;

        let dy: Vec<f64> = self
            .output
            .data()
            .iter()
            .zip(gt.data())
            .zip(self.pre_clamp.data())
            .map(|((o, g), &y)| if (0.0..=1.0).contains(&y) { weight * 2.0 * (o - g) / nh } else { 0.0 })
            .collect();

        for (br, simplices) in self.r_simplex.iter().enumerate() {
            let g = &mut grads[b + 1 + br];
            for (row, (verts, wts)) in simplices.iter().enumerate() {
                let d = dy[row % dy.len()] * inv;
                for (&v, &wt) in verts.iter().zip(wts) {
                    g[v] += d * wt;
                }
            }
        }

        let gscale = weight * lambda * 2.0 / (k as f64 * nh);
        let mut dweights = vec![0.0; n * k];
        for c in 0..k {
            let dwsr: Vec<f64> = dy
                .iter()
                .zip(self.sr_set[c].data())
                .zip(self.wsr.planes[c].data().iter().zip(wbar.planes[c].data()))
                .map(|((d, sr), (a, bb))| d * sr + gscale * (a - bb))
                .collect();
            let dhat = self.resamplers[c].apply_transpose(&Plane::new(hh, ww, dwsr)?)?;
            let wk = self.weights.planes[c].data();
            grads[b][self.s_index * k + c] += dhat.data().iter().zip(wk).map(|(x, y)| x * y).sum::<f64>();
            for (i, &g) in dhat.data().iter().enumerate() {
                dweights[i * k + c] = self.s[c] * g;
            }
        }

        let mut dlogits = vec![0.0; n * k];
        for i in 0..n {
            let dot: f64 = (0..k).map(|c| self.weights.planes[c].data()[i] * dweights[i * k + c]).sum();
            for c in 0..k {
                dlogits[i * k + c] = self.weights.planes[c].data()[i] * (dweights[i * k + c] - dot);
            }
        }
        for (br, simplices) in self.w_simplex.iter().enumerate() {
            let g = &mut grads[br];
            for (row, (verts, wts)) in simplices.iter().enumerate() {
                let dl = &dlogits[(row % n) * k..(row % n + 1) * k];
                for (&v, &wt) in verts.iter().zip(wts) {
                    for c in 0..k {
                        g[v + c] += inv * wt * dl[c];
                    }
                }
            }
        }
        Ok(SampleLoss { rec, guide })
    }
}

fn zero_grads(bundle: &LutBundle) -> Vec<Vec<f64>> {
    bundle.tables().iter().map(|t| vec![0.0; t.len()]).collect()
}

/// One Adam step on every table entry over a batch.
fn finetune_step(
    bundle: &mut LutBundle,
    m: &mut [Vec<f64>],
    v: &mut [Vec<f64>],
    step: u64,
    batch: &crate::train::Batch,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    let mut grads = zero_grads(bundle);
    let weight = 1.0 / batch.samples.len() as f64;
    let mut stats = StepStats { rec: 0.0, guide: 0.0 };
    for sample in &batch.samples {
        let fwd = LutForward::run(bundle, &sample.lr, batch.r, batch.r)?;
        let loss = fwd.loss_and_backward(bundle, &sample.hr, cfg.lambda, cfg.beta, weight, &mut grads)?;
        stats.rec += loss.rec * weight;
        stats.guide += loss.guide * weight;
    }
    if !(stats.rec.is_finite() && stats.guide.is_finite()) {
        return Err(Error::NonFinite { iteration: step as usize - 1, rec: stats.rec, guide: stats.guide });
    }
    let grads: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
    adam_update(
        bundle.tables_mut(),
        &grads,
        m.iter_mut().map(|x| x.as_mut_slice()).collect(),
        v.iter_mut().map(|x| x.as_mut_slice()).collect(),
        step,
        cfg.lr,
        false,
    );
    Ok(stats)
}

/// Adam over all table entries for `cfg.iterations` steps at full precision;
/// quantization happens only when the bundle is saved.
pub fn finetune(bundle: &LutBundle, ds: &Dataset, cfg: &TrainConfig) -> Result<LutBundle> {
    cfg.validate()?;
    let mut out = bundle.clone();
    let mut m = zero_grads(bundle);
    let mut v = zero_grads(bundle);
    for it in 0..cfg.iterations {
        let batch = sample_batch(ds, cfg, &mut iteration_rng(cfg.seed, it))?;
        let stats = finetune_step(&mut out, &mut m, &mut v, it as u64 + 1, &batch, cfg)?;
        if (it + 1) % 100 == 0 {
            info!("finetune iter {}: rec {:.4e} guide {:.4e}", it + 1, stats.rec, stats.guide);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imnet::ImNetParams;
    use crate::kernels::KernelSet;
    use crate::synth;
    use crate::train::TRAIN_SCALES;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bundle(seed: u64) -> LutBundle {
        let mut p = ImNetParams::init(KernelSet::parse("NLC").unwrap(), 3, 4, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in p.tensors_mut() {
            t.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        }
        LutBundle::transfer(&p, 64, 32, &TRAIN_SCALES).unwrap()
    }

    fn random_plane(h: usize, w: usize, seed: u64) -> Plane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Plane::from_fn(h, w, |_, _| rng.random_range(0.1..0.9))
    }

    fn loss(b: &LutBundle, lr: &Plane, gt: &Plane) -> f64 {
        let f = LutForward::run(b, lr, 2.0, 2.0).unwrap();
        let wbar = pseudo_gt_weights(&f.sr_set, gt, 0.1).unwrap();
        loss_rec(&f.output, gt).unwrap() + 0.1 * loss_guide(&f.wsr, &wbar).unwrap()
    }

    fn check_entries(b: &LutBundle, tables: &[usize], lr: &Plane, gt: &Plane) {
        let f = LutForward::run(b, lr, 2.0, 2.0).unwrap();
        let mut grads = zero_grads(b);
        f.loss_and_backward(b, gt, 0.1, 0.1, 1.0, &mut grads).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut checked = 0;
        let mut attempts = 0;
        while checked < 12 && attempts < 20_000 {
            attempts += 1;
            let t = tables[rng.random_range(0..tables.len())];
            // pick touched entries half of the time
            let i = if rng.random_bool(0.5) {
                match grads[t].iter().position(|&g| g != 0.0 && rng.random_bool(0.02)) {
                    Some(i) => i,
                    None => continue,
                }
            } else {
                rng.random_range(0..grads[t].len())
            };
            let g = grads[t][i];
            let eps = 1e-5;
            let mut q = b.clone();
            q.tables_mut()[t][i] += eps;
            let up = loss(&q, lr, gt);
            q.tables_mut()[t][i] -= 2.0 * eps;
            let down = loss(&q, lr, gt);
            let fd = (up - down) / (2.0 * eps);
            if fd.abs() < 1e-9 && g.abs() < 1e-9 {
                continue;
            }
            let rel = (fd - g).abs() / fd.abs().max(g.abs());
            assert!(rel <= 1e-3, "table {t}[{i}]: fd {fd} vs analytic {g}");
            checked += 1;
        }
        assert!(checked >= 6, "only {checked} informative entries");
    }

    #[test]
    fn weight_and_scale_gradients_match_finite_differences() {
        let mut b = bundle(1);
        for t in b.lut_r.iter_mut() {
            t.entries_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let lr = random_plane(6, 6, 2);
        let gt = random_plane(12, 12, 3);
        check_entries(&b, &[0, 1, 2, 3], &lr, &gt);
    }

    #[test]
    fn refiner_gradients_match_finite_differences() {
        let b = bundle(4);
        let lr = random_plane(6, 6, 5);
        let gt = random_plane(12, 12, 6);
        check_entries(&b, &[4, 5, 6], &lr, &gt);
    }

    #[test]
    fn forward_matches_table_building_blocks() {
        let b = bundle(7);
        let lr = random_plane(7, 6, 8);
        let f = LutForward::run(&b, &lr, 2.0, 3.0).unwrap();
        let w = b.predict_weights(&lr, true).unwrap();
        for (pa, pb) in f.weights.planes.iter().zip(&w.planes) {
            assert!(pa.max_abs_diff(pb) < 1e-12);
        }
        let refined = b.refine(&f.mixed, true).unwrap();
        assert!(f.output.max_abs_diff(&refined) < 1e-12);
    }

    #[test]
    fn zero_iterations_leave_bundle_unchanged() {
        let b = bundle(9);
        let ds = Dataset::from_images([synth::scene(40, 40, 0)]);
        let cfg = TrainConfig { iterations: 0, batch: 1, patch: 8, ..finetune_config() };
        assert_eq!(finetune(&b, &ds, &cfg).unwrap(), b);
    }

    #[test]
    fn finetuning_reduces_loss_on_a_repeated_batch() {
        let mut b = bundle(10);
        let ds = Dataset::from_images((0..2).map(|i| synth::scene(40, 40, i)));
        let cfg = TrainConfig { batch: 2, patch: 8, scales: vec![2.0], lr: 1e-3, ..finetune_config() };
        let batch = sample_batch(&ds, &cfg, &mut iteration_rng(0, 0)).unwrap();
        let mut m = zero_grads(&b);
        let mut v = zero_grads(&b);
        let first = finetune_step(&mut b, &mut m, &mut v, 1, &batch, &cfg).unwrap();
        let mut last = first;
        for step in 2..=30 {
            last = finetune_step(&mut b, &mut m, &mut v, step, &batch, &cfg).unwrap();
        }
        let total = |s: StepStats| s.rec + cfg.lambda * s.guide;
        assert!(total(last) < total(first));
    }
}

//! Look-up tables sampled from a trained network, 4-D simplex interpolation
//! and the network-free building blocks of the upscaling pipeline.

mod finetune;
mod format;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::imgio::{to_code, Plane};
use crate::imnet::ops::{softmax_rows, Resolution, WeightMaps};
use crate::imnet::{check_min_dims, gather_indices, rotation_count, ImNetParams, Pattern};
use crate::kernels::KernelSet;
use crate::train::TRAIN_SCALES;

pub use finetune::{finetune, finetune_config, LutForward};
pub use format::{deserialize, load, quantize_table, save, serialize, QuantizedTable, MAGIC, VERSION};

pub const DEFAULT_STEP_W: u32 = 32;
pub const DEFAULT_STEP_R: u32 = 16;

/// Lattice pixel code of level `q`.
#[inline]
fn lattice(step: u32, q: usize) -> u32 {
    (step * q as u32).min(255)
}

/// Four-input table over the lattice `min(step * q, 255)`, entries indexed
/// `[q0][q1][q2][q3][out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Lut4D {
    step: u32,
    levels: usize,
    out_dim: usize,
    data: Vec<f64>,
}

/// Simplex vertices (flat entry offsets) and barycentric weights of one lookup.
pub type Simplex = ([usize; 5], [f64; 5]);

impl Lut4D {
    /// Steps are powers of two from 2 to 64.
    pub fn levels_for(step: u32) -> Result<usize> {
        if !step.is_power_of_two() || !(2..=64).contains(&step) {
            return Err(Error::contract(format!("LUT step must be a power of two in 2..=64, got {step}")));
        }
        Ok(256 / step as usize + 1)
    }

    pub fn new(step: u32, out_dim: usize, data: Vec<f64>) -> Result<Self> {
        let levels = Lut4D::levels_for(step)?;
        if out_dim == 0 || data.len() != levels.pow(4) * out_dim {
            return Err(Error::contract(format!(
                "LUT payload has {} values, expected {}",
                data.len(),
                levels.pow(4) * out_dim
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("LUT entries must be finite"));
        }
        Ok(Lut4D { step, levels, out_dim, data })
    }

    pub fn zeros(step: u32, out_dim: usize) -> Result<Self> {
        let levels = Lut4D::levels_for(step)?;
        Lut4D::new(step, out_dim, vec![0.0; levels.pow(4) * out_dim])
    }

    /// Sample `f` at every lattice tuple, given as values in `[0, 1]`.
    pub fn from_fn(step: u32, out_dim: usize, mut f: impl FnMut([f64; 4]) -> Vec<f64>) -> Result<Self> {
        sample_lattice(step, out_dim, |inputs| {
            Ok(inputs.rows().into_iter().flat_map(|r| f([r[0], r[1], r[2], r[3]])).collect())
        })
    }

    pub fn step(&self) -> u32 {
        self.step
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn entries(&self) -> &[f64] {
        &self.data
    }

    pub fn entries_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn lattice_value(&self, q: usize) -> u32 {
        lattice(self.step, q)
    }

    pub fn entry(&self, q: [usize; 4]) -> &[f64] {
        let i = self.flat(q);
        &self.data[i..i + self.out_dim]
    }

    fn flat(&self, q: [usize; 4]) -> usize {
        let l = self.levels;
        (((q[0] * l + q[1]) * l + q[2]) * l + q[3]) * self.out_dim
    }

    /// Vertices and weights of the 4-simplex containing `p`.
    pub fn simplex(&self, p: [u8; 4]) -> Simplex {
        self.simplex_at(p.map(f64::from))
    }

    /// [`Lut4D::simplex`] at real-valued codes in `[0, 255]`.
    pub fn simplex_at(&self, p: [f64; 4]) -> Simplex {
        let l = self.levels;
        let strides = [l * l * l * self.out_dim, l * l * self.out_dim, l * self.out_dim, self.out_dim];
        let mut base = 0;
        let mut frac = [0.0; 4];
        for i in 0..4 {
            let q = ((p[i] / self.step as f64).floor() as usize).min(l - 2);
            let lo = lattice(self.step, q) as f64;
            let hi = lattice(self.step, q + 1) as f64;
            frac[i] = (p[i] - lo) / (hi - lo);
            base += q * strides[i];
        }
        let mut order = [0, 1, 2, 3];
        // stable: equal fractions keep ascending axis order
        order.sort_by(|&a, &b| frac[b].partial_cmp(&frac[a]).unwrap());
        let mut verts = [base; 5];
        let mut weights = [0.0; 5];
        weights[0] = 1.0 - frac[order[0]];
        for m in 0..4 {
            verts[m + 1] = verts[m] + strides[order[m]];
            let next = if m < 3 { frac[order[m + 1]] } else { 0.0 };
            weights[m + 1] = frac[order[m]] - next;
        }
        (verts, weights)
    }

    /// Interpolated value at real-valued codes.
    pub fn eval_at(&self, p: [f64; 4]) -> Vec<f64> {
        let (verts, weights) = self.simplex_at(p);
        let mut out = vec![0.0; self.out_dim];
        for (&v, &w) in verts.iter().zip(&weights) {
            for (o, e) in out.iter_mut().zip(&self.data[v..v + self.out_dim]) {
                *o += w * e;
            }
        }
        out
    }

    /// Add `scale` times the interpolated value at `p` to `acc`.
    #[inline]
    pub fn accumulate(&self, p: [u8; 4], scale: f64, acc: &mut [f64]) {
        let (verts, weights) = self.simplex(p);
        for (&v, &w) in verts.iter().zip(&weights) {
            if w == 0.0 {
                continue;
            }
            let entry = &self.data[v..v + self.out_dim];
            for (a, e) in acc.iter_mut().zip(entry) {
                *a += scale * w * e;
            }
        }
    }

    pub fn lookup(&self, p: [u8; 4]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim];
        self.accumulate(p, 1.0, &mut out);
        out
    }

    /// [`Lut4D::lookup`] for untrusted integer codes.
    pub fn tetra_lookup(&self, p: [i64; 4]) -> Result<Vec<f64>> {
        let mut codes = [0u8; 4];
        for (c, &v) in codes.iter_mut().zip(&p) {
            *c = u8::try_from(v).map_err(|_| Error::contract(format!("pixel code {v} outside 0..=255")))?;
        }
        Ok(self.lookup(codes))
    }
}

const TRANSFER_CHUNK: usize = 1 << 16;

/// Lattice tuples `start..end` (in table order) as network input rows.
pub fn lattice_inputs(step: u32, start: usize, end: usize) -> Result<Array2<f64>> {
    let l = Lut4D::levels_for(step)?;
    let end = end.min(l.pow(4));
    let v: Vec<f64> = (0..l).map(|q| lattice(step, q) as f64 / 255.0).collect();
    Ok(Array2::from_shape_fn((end.saturating_sub(start), 4), |(i, j)| {
        let q = ((start + i) / l.pow(3 - j as u32)) % l;
        v[q]
    }))
}

/// Evaluate `f` on every lattice tuple, chunk by chunk.
fn sample_lattice(step: u32, out_dim: usize, mut f: impl FnMut(Array2<f64>) -> Result<Vec<f64>>) -> Result<Lut4D> {
    let total = Lut4D::levels_for(step)?.pow(4);
    let mut data = Vec::with_capacity(total * out_dim);
    let mut start = 0;
    while start < total {
        let end = (start + TRANSFER_CHUNK).min(total);
        let out = f(lattice_inputs(step, start, end)?)?;
        if out.len() != (end - start) * out_dim {
            return Err(Error::contract("sampled function has the wrong output size"));
        }
        data.extend(out);
        start = end;
    }
    Lut4D::new(step, out_dim, data)
}

/// Per-kernel modulation vectors at a fixed grid of scales.
#[derive(Clone, Debug, PartialEq)]
pub struct LutS {
    grid: Vec<f64>,
    k: usize,
    data: Vec<f64>,
}

impl LutS {
    pub fn new(grid: Vec<f64>, k: usize, data: Vec<f64>) -> Result<Self> {
        if grid.is_empty() || grid.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::contract("scale grid must be non-empty and strictly increasing"));
        }
        if grid.iter().chain(&data).any(|v| !v.is_finite()) || grid[0] <= 0.0 {
            return Err(Error::contract("scale table must be finite with positive scales"));
        }
        if k == 0 || data.len() != grid.len() * k {
            return Err(Error::contract("scale table size does not match its grid"));
        }
        Ok(LutS { grid, k, data })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn entries(&self) -> &[f64] {
        &self.data
    }

    pub fn entries_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Grid index nearest to `r`; exact midpoints go to the lower scale.
    pub fn nearest_index(&self, r: f64) -> usize {
        let mut best = 0;
        for (i, g) in self.grid.iter().enumerate() {
            if (g - r).abs() < (self.grid[best] - r).abs() {
                best = i;
            }
        }
        best
    }

    pub fn entry(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    pub fn nearest(&self, r: f64) -> Result<&[f64]> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::contract(format!("scale must be positive, got {r}")));
        }
        Ok(self.entry(self.nearest_index(r)))
    }
}

/// The deployable artifact: weight tables, scale table and refiner tables.
#[derive(Clone, Debug, PartialEq)]
pub struct LutBundle {
    kernel_set: KernelSet,
    lut_w: Vec<Lut4D>,
    lut_s: LutS,
    lut_r: Vec<Lut4D>,
}

impl LutBundle {
    pub fn new(kernel_set: KernelSet, lut_w: Vec<Lut4D>, lut_s: LutS, lut_r: Vec<Lut4D>) -> Result<Self> {
        let k = kernel_set.len();
        Pattern::for_branches(lut_w.len())?;
        if lut_r.len() != lut_w.len() {
            return Err(Error::contract("weight and refiner tables differ in branch count"));
        }
        if lut_w.iter().any(|t| t.out_dim != k) || lut_s.k != k {
            return Err(Error::contract(format!("tables do not match {k} kernels")));
        }
        if lut_r.iter().any(|t| t.out_dim != 1) {
            return Err(Error::contract("refiner tables must have one output"));
        }
        let same_step = |ts: &[Lut4D]| ts.windows(2).all(|p| p[0].step == p[1].step);
        if !same_step(&lut_w) || !same_step(&lut_r) {
            return Err(Error::contract("branches of one table kind must share a step"));
        }
        Ok(LutBundle { kernel_set, lut_w, lut_s, lut_r })
    }

    /// Sample a network at the given steps and scale grid.
    pub fn transfer(p: &ImNetParams, step_w: u32, step_r: u32, grid: &[f64]) -> Result<Self> {
        LutBundle::new(
            p.kernel_set().clone(),
            transfer_weight_lut(p, step_w)?,
            transfer_scale_lut(p, grid)?,
            transfer_refiner_lut(p, step_r)?,
        )
    }

    pub fn transfer_default(p: &ImNetParams) -> Result<Self> {
        LutBundle::transfer(p, DEFAULT_STEP_W, DEFAULT_STEP_R, &TRAIN_SCALES)
    }

    /// Constant tables: uniform mixing, unit modulation, zero residual.
    pub fn identity(kernel_set: KernelSet, branches: usize, step_w: u32, step_r: u32) -> Result<Self> {
        let k = kernel_set.len();
        let lut_w = (0..branches).map(|_| Lut4D::zeros(step_w, k)).collect::<Result<_>>()?;
        let lut_r = (0..branches).map(|_| Lut4D::zeros(step_r, 1)).collect::<Result<_>>()?;
        let lut_s = LutS::new(TRAIN_SCALES.to_vec(), k, vec![1.0; TRAIN_SCALES.len() * k])?;
        LutBundle::new(kernel_set, lut_w, lut_s, lut_r)
    }

    pub fn kernel_set(&self) -> &KernelSet {
        &self.kernel_set
    }

    pub fn k(&self) -> usize {
        self.kernel_set.len()
    }

    pub fn branches(&self) -> usize {
        self.lut_w.len()
    }

    pub fn patterns(&self) -> Vec<Pattern> {
        Pattern::for_branches(self.branches()).expect("validated branch count")
    }

    pub fn lut_w(&self) -> &[Lut4D] {
        &self.lut_w
    }

    pub fn lut_s(&self) -> &LutS {
        &self.lut_s
    }

    pub fn lut_r(&self) -> &[Lut4D] {
        &self.lut_r
    }

    pub fn step_w(&self) -> u32 {
        self.lut_w[0].step
    }

    pub fn step_r(&self) -> u32 {
        self.lut_r[0].step
    }

    /// Entry slices in storage order: weight tables, scale table, refiner tables.
    pub fn tables(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.lut_w.iter().map(|t| t.entries()).collect();
        out.push(self.lut_s.entries());
        out.extend(self.lut_r.iter().map(|t| t.entries()));
        out
    }

    pub fn tables_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.lut_w.iter_mut().map(|t| t.entries_mut()).collect();
        out.push(self.lut_s.entries_mut());
        out.extend(self.lut_r.iter_mut().map(|t| t.entries_mut()));
        out
    }

    pub fn entry_count(&self) -> usize {
        self.tables().iter().map(|t| t.len()).sum()
    }

    /// Branch- and rotation-averaged logits from table lookups on 8-bit codes.
    pub fn logits(&self, codes: &[u8], h: usize, w: usize, ensemble: bool) -> Result<Vec<f64>> {
        check_min_dims(h, w, "LR input")?;
        let k = self.k();
        let n = h * w;
        let rots = rotation_count(ensemble);
        let inv = 1.0 / (rots * self.branches()) as f64;
        let mut acc = vec![0.0; n * k];
        for (pattern, table) in self.patterns().into_iter().zip(&self.lut_w) {
            for (row, ix) in gather_indices(h, w, pattern, rots).iter().enumerate() {
                let i = row % n;
                table.accumulate(ix.map(|j| codes[j]), inv, &mut acc[i * k..(i + 1) * k]);
            }
        }
        Ok(acc)
    }

    /// Normalized LR weight maps for an image.
    pub fn predict_weights(&self, lr: &Plane, ensemble: bool) -> Result<WeightMaps> {
        let (h, w) = lr.dims();
        let mut logits = self.logits(&lr.to_codes(), h, w, ensemble)?;
        softmax_rows(&mut logits, self.k());
        let planes = (0..self.k())
            .map(|kk| Plane::new(h, w, (0..h * w).map(|i| logits[i * self.k() + kk]).collect()))
            .collect::<Result<Vec<_>>>()?;
        WeightMaps::new(planes, Resolution::Lr, true)
    }

    /// Averaged refiner residual looked up at the 8-bit codes of `x`.
    pub fn residual(&self, x: &Plane, ensemble: bool) -> Result<Plane> {
        let (h, w) = x.dims();
        check_min_dims(h, w, "refiner input")?;
        let codes: Vec<u8> = x.data().iter().map(|&v| to_code(v)).collect();
        let n = h * w;
        let rots = rotation_count(ensemble);
        let inv = 1.0 / (rots * self.branches()) as f64;
        let mut acc = vec![0.0; n];
        for (pattern, table) in self.patterns().into_iter().zip(&self.lut_r) {
            for (row, ix) in gather_indices(h, w, pattern, rots).iter().enumerate() {
                let i = row % n;
                table.accumulate(ix.map(|j| codes[j]), inv, &mut acc[i..i + 1]);
            }
        }
        Plane::new(h, w, acc)
    }

    /// `clamp(x + residual, 0, 1)`.
    pub fn refine(&self, x: &Plane, ensemble: bool) -> Result<Plane> {
        let res = self.residual(x, ensemble)?;
        Plane::new(
            x.height(),
            x.width(),
            x.data().iter().zip(res.data()).map(|(a, b)| (a + b).clamp(0.0, 1.0)).collect(),
        )
    }
}

/// Predictor logits at every lattice tuple, one table per branch.
pub fn transfer_weight_lut(p: &ImNetParams, step: u32) -> Result<Vec<Lut4D>> {
    p.predictor()
        .iter()
        .map(|mlp| sample_lattice(step, p.k(), |x| Ok(mlp.infer(x.view()).into_raw_vec_and_offset().0)))
        .collect()
}

/// Refiner residual at every lattice tuple, one table per branch.
pub fn transfer_refiner_lut(p: &ImNetParams, step: u32) -> Result<Vec<Lut4D>> {
    p.refiner()
        .iter()
        .map(|mlp| sample_lattice(step, 1, |x| Ok(mlp.infer(x.view()).into_raw_vec_and_offset().0)))
        .collect()
}

/// Modulation vectors at each grid scale.
pub fn transfer_scale_lut(p: &ImNetParams, grid: &[f64]) -> Result<LutS> {
    let mut data = Vec::with_capacity(grid.len() * p.k());
    for &r in grid {
        data.extend(p.forward_scale_mod(r)?);
    }
    LutS::new(grid.to_vec(), p.k(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_lut(step: u32, out_dim: usize, seed: u64) -> Lut4D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Lut4D::from_fn(step, out_dim, |_| (0..out_dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_params(seed: u64) -> ImNetParams {
        let mut p = ImNetParams::init(KernelSet::parse("NLC").unwrap(), 3, 4, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for t in p.tensors_mut() {
            t.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        }
        p
    }

    #[test]
    fn sizes_and_levels() {
        assert_eq!(Lut4D::levels_for(32).unwrap(), 9);
        assert_eq!(Lut4D::levels_for(16).unwrap(), 17);
        assert_eq!(Lut4D::levels_for(64).unwrap(), 5);
        assert!(Lut4D::levels_for(1).is_err());
        assert!(Lut4D::levels_for(24).is_err());
        assert!(Lut4D::levels_for(128).is_err());
        let t = Lut4D::zeros(32, 3).unwrap();
        assert_eq!(t.entries().len(), 6561 * 3);
        assert_eq!(t.lattice_value(8), 255);
        assert_eq!(t.lattice_value(7), 224);
        assert!(Lut4D::new(32, 3, vec![0.0; 10]).is_err());
    }

    #[test]
    fn lattice_points_are_exact() {
        let t = random_lut(32, 3, 1);
        for q in [[0, 0, 0, 0], [8, 8, 8, 8], [1, 7, 3, 8], [8, 0, 5, 2]] {
            let p = q.map(|qi| t.lattice_value(qi) as u8);
            assert_eq!(t.lookup(p), t.entry(q));
        }
    }

    #[test]
    fn equal_fractions_follow_the_diagonal() {
        let t = random_lut(32, 2, 2);
        let p = [32 + 8, 64 + 8, 8, 96 + 8];
        let f = 0.25;
        let lo = t.entry([1, 2, 0, 3]);
        let hi = t.entry([2, 3, 1, 4]);
        let got = t.lookup(p);
        for c in 0..2 {
            assert!((got[c] - ((1.0 - f) * lo[c] + f * hi[c])).abs() < 1e-15);
        }
    }

    #[test]
    fn scalar_simplex_oracle() {
        // p = (40, 10, 20, 0) at step 32: f = (0.25, 0.3125, 0.625, 0),
        // order axes 2, 1, 0, 3
        let t = random_lut(32, 1, 3);
        let v = |q: [usize; 4]| t.entry(q)[0];
        let expect = (1.0 - 0.625) * v([1, 0, 0, 0])
            + (0.625 - 0.3125) * v([1, 0, 1, 0])
            + (0.3125 - 0.25) * v([1, 1, 1, 0])
            + 0.25 * v([2, 1, 1, 0]);
        assert!((t.lookup([40, 10, 20, 0])[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn top_cell_is_renormalized() {
        let t = Lut4D::from_fn(32, 1, |v| vec![v[0]]).unwrap();
        let out = t.lookup([255, 0, 0, 0])[0];
        assert_eq!(out, 1.0);
        let mid = t.lookup([240, 0, 0, 0])[0];
        assert!((mid - 240.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_codes_rejected() {
        let t = Lut4D::zeros(64, 1).unwrap();
        assert!(t.tetra_lookup([0, 256, 0, 0]).is_err());
        assert!(t.tetra_lookup([-1, 0, 0, 0]).is_err());
        assert_eq!(t.tetra_lookup([0, 255, 3, 9]).unwrap(), vec![0.0]);
    }

    proptest! {
        #[test]
        fn reproduces_affine_functions(
            a in prop::array::uniform4(-2.0f64..2.0),
            c in -1.0f64..1.0,
            p in prop::array::uniform4(0u8..=255),
            exp in 3u32..=6,
        ) {
            let step = 1 << exp;
            let f = |v: [f64; 4]| c + (0..4).map(|i| a[i] * v[i]).sum::<f64>();
            let t = Lut4D::from_fn(step, 1, |v| vec![f(v)]).unwrap();
            let expect = f(p.map(|x| x as f64 / 255.0));
            prop_assert!((t.lookup(p)[0] - expect).abs() < 1e-12);
        }

        #[test]
        fn weights_form_a_partition_of_unity(p in prop::array::uniform4(0u8..=255)) {
            let t = Lut4D::zeros(16, 1).unwrap();
            let (_, w) = t.simplex(p);
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn continuous_across_codes(
            p in prop::array::uniform4(0u8..=254),
            axis in 0usize..4,
            seed in 0u64..4,
        ) {
            // the step between neighbouring codes is bounded by the local slope
            let t = random_lut(32, 1, seed);
            let mut q = p;
            q[axis] += 1;
            let jump = (t.lookup(p)[0] - t.lookup(q)[0]).abs();
            prop_assert!(jump <= 2.0 * 2.0 / 31.0 + 1e-9);
        }
    }

    #[test]
    fn continuous_across_cell_boundaries() {
        let t = random_lut(32, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let mut p = [0.0; 4].map(|_: f64| rng.random_range(0.0..255.0));
            let axis = rng.random_range(0..4);
            p[axis] = 32.0 * rng.random_range(1..8) as f64;
            let (mut lo, mut hi) = (p, p);
            lo[axis] -= 1e-10;
            hi[axis] += 1e-10;
            let (a, b) = (t.eval_at(lo), t.eval_at(hi));
            for c in 0..2 {
                assert!((a[c] - b[c]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn scale_table_lookup() {
        let s = LutS::new(TRAIN_SCALES.to_vec(), 1, (0..7).map(|i| i as f64).collect()).unwrap();
        assert_eq!(s.nearest(2.0).unwrap(), &[1.0]);
        assert_eq!(s.nearest(2.3).unwrap(), &[2.0]);
        assert_eq!(s.nearest(2.25).unwrap(), &[1.0]);
        assert_eq!(s.nearest(1.0).unwrap(), &[0.0]);
        assert_eq!(s.nearest(9.0).unwrap(), &[6.0]);
        assert!(s.nearest(0.0).is_err());
        assert!(LutS::new(vec![2.0, 1.0], 1, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn transfer_matches_network_at_lattice_points() {
        let p = random_params(7);
        let lut_w = transfer_weight_lut(&p, 32).unwrap();
        let lut_r = transfer_refiner_lut(&p, 64).unwrap();
        for (b, table) in lut_w.iter().enumerate() {
            for q in [[0, 0, 0, 0], [3, 8, 1, 5], [8, 8, 8, 8]] {
                let x = q.map(|qi| table.lattice_value(qi) as f64 / 255.0);
                assert_eq!(table.lookup(q.map(|qi| table.lattice_value(qi) as u8)), p.predictor()[b].infer_one(&x));
            }
        }
        let x = [0.0, 64.0 / 255.0, 1.0, 192.0 / 255.0];
        assert_eq!(lut_r[2].entry([0, 1, 4, 3]), p.refiner()[2].infer_one(&x).as_slice());
        let s = transfer_scale_lut(&p, &TRAIN_SCALES).unwrap();
        assert_eq!(s.grid().len(), 7);
        assert_eq!(s.nearest(2.0).unwrap(), p.forward_scale_mod(2.0).unwrap().as_slice());
    }

    #[test]
    fn zero_init_transfers_to_identity() {
        let p = ImNetParams::init(KernelSet::parse("NLC").unwrap(), 3, 16, 0).unwrap();
        let b = LutBundle::transfer_default(&p).unwrap();
        assert_eq!(b, LutBundle::identity(KernelSet::parse("NLC").unwrap(), 3, 32, 16).unwrap());
        assert_eq!(b.lut_w().iter().map(|t| t.entries().len()).sum::<usize>(), 59_049);
        assert_eq!(b.lut_r().iter().map(|t| t.entries().len()).sum::<usize>(), 250_563);
    }

    #[test]
    fn lut_weights_match_network_on_lattice_images() {
        let p = random_params(8);
        let bundle = LutBundle::transfer(&p, 32, 16, &TRAIN_SCALES).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lr = Plane::from_fn(6, 7, |_, _| lattice(32, rng.random_range(0..9)) as f64 / 255.0);
        let a = bundle.predict_weights(&lr, true).unwrap();
        let b = crate::imnet::forward_weight_predictor(&p, &lr, true).unwrap();
        for (pa, pb) in a.planes.iter().zip(&b.planes) {
            assert!(pa.max_abs_diff(pb) < 1e-12);
        }
        let x = Plane::from_fn(5, 6, |_, _| lattice(16, rng.random_range(0..17)) as f64 / 255.0);
        let ra = bundle.refine(&x, true).unwrap();
        let rb = crate::imnet::forward_refiner(&p, &x, true).unwrap();
        assert!(ra.max_abs_diff(&rb) < 1e-12);
    }

    #[test]
    fn bundle_validation() {
        let ks = KernelSet::parse("NL").unwrap();
        let w = vec![Lut4D::zeros(32, 2).unwrap()];
        let r = vec![Lut4D::zeros(16, 1).unwrap()];
        let s = LutS::new(vec![2.0], 2, vec![1.0, 1.0]).unwrap();
        assert!(LutBundle::new(ks.clone(), w.clone(), s.clone(), r.clone()).is_ok());
        assert!(LutBundle::new(KernelSet::parse("NLC").unwrap(), w.clone(), s.clone(), r.clone()).is_err());
        assert!(LutBundle::new(ks.clone(), w.clone(), s.clone(), vec![]).is_err());
        assert!(LutBundle::new(ks, w, s, vec![Lut4D::zeros(16, 2).unwrap()]).is_err());
    }
}

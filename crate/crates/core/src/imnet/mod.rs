//! The trainable interpolation-mixing network: weight predictor, scale
//! modulator and refiner, each with an explicit backward pass.

pub mod checkpoint;
pub mod mlp;
mod model;
pub mod ops;
pub mod scale;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::KernelSet;

pub use mlp::{Dense, Mlp};
pub use model::{
    forward_refiner, forward_weight_predictor, predictor_logits, refiner_residual, SampleForward,
    SampleLoss,
};
pub use ops::{
    loss_guide, loss_rec, loss_total, mix, modulate_and_upsample, pseudo_gt_weights, Resolution,
    WeightMaps, DEFAULT_BETA, DEFAULT_LAMBDA,
};
pub use scale::{encode_scale, ScaleModulator};

/// Hidden width of predictor and refiner branches.
pub const HIDDEN: usize = 64;
pub const DEFAULT_ORDER: usize = 16;
pub const DEFAULT_BRANCHES: usize = 3;

/// Four-pixel sampling pattern of one branch, as `(row, col)` offsets from
/// the anchor pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    S,
    D,
    Y,
}

impl Pattern {
    pub fn offsets(self) -> [(isize, isize); 4] {
        match self {
            Pattern::S => [(0, 0), (0, 1), (1, 0), (1, 1)],
            Pattern::D => [(0, 0), (0, 2), (2, 0), (2, 2)],
            Pattern::Y => [(0, 0), (1, 1), (1, -1), (2, 0)],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Pattern::S => "S",
            Pattern::D => "D",
            Pattern::Y => "Y",
        }
    }

    /// Patterns used for `branches` parallel branches (S, then D, then Y).
    pub fn for_branches(branches: usize) -> Result<Vec<Pattern>> {
        match branches {
            1..=3 => Ok([Pattern::S, Pattern::D, Pattern::Y][..branches].to_vec()),
            _ => Err(Error::contract(format!("branch count must be 1..=3, got {branches}"))),
        }
    }
}

/// Rotate an offset by `quarter` quarter-turns.
#[inline]
pub fn rotate_offset((dr, dc): (isize, isize), quarter: usize) -> (isize, isize) {
    let (mut r, mut c) = (dr, dc);
    for _ in 0..quarter % 4 {
        (r, c) = (c, -r);
    }
    (r, c)
}

/// Number of rotations evaluated per pixel.
#[inline]
pub fn rotation_count(ensemble: bool) -> usize {
    if ensemble {
        4
    } else {
        1
    }
}

/// Flat source indices of every pattern sample, row `rot * h * w + pixel`,
/// with edge replication.
pub fn gather_indices(h: usize, w: usize, pattern: Pattern, rotations: usize) -> Vec<[usize; 4]> {
    let mut out = Vec::with_capacity(rotations * h * w);
    for rot in 0..rotations {
        let offs = pattern.offsets().map(|o| rotate_offset(o, rot));
        for y in 0..h as isize {
            for x in 0..w as isize {
                out.push(offs.map(|(dr, dc)| {
                    let yy = (y + dr).clamp(0, h as isize - 1) as usize;
                    let xx = (x + dc).clamp(0, w as isize - 1) as usize;
                    yy * w + xx
                }));
            }
        }
    }
    out
}

/// Network input rows for a gather table.
pub(crate) fn gather_matrix(values: &[f64], idx: &[[usize; 4]]) -> Array2<f64> {
    let mut data = Vec::with_capacity(idx.len() * 4);
    for ix in idx {
        data.extend(ix.iter().map(|&i| values[i]));
    }
    Array2::from_shape_vec((idx.len(), 4), data).expect("gather shape")
}

pub fn check_min_dims(h: usize, w: usize, what: &str) -> Result<()> {
    if h < 3 || w < 3 {
        return Err(Error::contract(format!("{what} must be at least 3x3, got {h}x{w}")));
    }
    Ok(())
}

/// All trainable parameters plus the structural choices they depend on.
#[derive(Clone, Debug, PartialEq)]
pub struct ImNetParams {
    kernel_set: KernelSet,
    patterns: Vec<Pattern>,
    predictor: Vec<Mlp>,
    refiner: Vec<Mlp>,
    modulator: ScaleModulator,
}

impl ImNetParams {
    /// Random hidden layers, zero output layers: the initial network mixes
    /// with uniform weights, unit modulation and an identity refiner.
    pub fn init(kernel_set: KernelSet, branches: usize, order: usize, seed: u64) -> Result<Self> {
        let patterns = Pattern::for_branches(branches)?;
        let k = kernel_set.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let predictor = (0..branches)
            .map(|_| Mlp::init(&[4, HIDDEN, HIDDEN, k], true, &mut rng))
            .collect();
        let refiner = (0..branches)
            .map(|_| Mlp::init(&[4, HIDDEN, HIDDEN, 1], true, &mut rng))
            .collect();
        let modulator = ScaleModulator::init(order, k, &mut rng);
        Ok(ImNetParams { kernel_set, patterns, predictor, refiner, modulator })
    }

    pub fn from_parts(
        kernel_set: KernelSet,
        predictor: Vec<Mlp>,
        refiner: Vec<Mlp>,
        modulator: ScaleModulator,
    ) -> Result<Self> {
        let k = kernel_set.len();
        let patterns = Pattern::for_branches(predictor.len())?;
        if refiner.len() != predictor.len() {
            return Err(Error::contract("predictor and refiner branch counts differ"));
        }
        let shape_ok = predictor.iter().all(|m| m.in_dim() == 4 && m.out_dim() == k)
            && refiner.iter().all(|m| m.in_dim() == 4 && m.out_dim() == 1)
            && modulator.mlp().out_dim() == k;
        if !shape_ok {
            return Err(Error::contract("inconsistent layer shapes for kernel set"));
        }
        Ok(ImNetParams { kernel_set, patterns, predictor, refiner, modulator })
    }

    pub fn kernel_set(&self) -> &KernelSet {
        &self.kernel_set
    }

    pub fn k(&self) -> usize {
        self.kernel_set.len()
    }

    pub fn branches(&self) -> usize {
        self.patterns.len()
    }

    pub fn patterns(&self) -> &[Pattern] {
        &self.patterns
    }

    pub fn order(&self) -> usize {
        self.modulator.order()
    }

    pub fn predictor(&self) -> &[Mlp] {
        &self.predictor
    }

    pub fn predictor_mut(&mut self) -> &mut [Mlp] {
        &mut self.predictor
    }

    pub fn refiner(&self) -> &[Mlp] {
        &self.refiner
    }

    pub fn refiner_mut(&mut self) -> &mut [Mlp] {
        &mut self.refiner
    }

    pub fn modulator(&self) -> &ScaleModulator {
        &self.modulator
    }

    pub fn modulator_mut(&mut self) -> &mut ScaleModulator {
        &mut self.modulator
    }

    pub fn forward_scale_mod(&self, r: f64) -> Result<Vec<f64>> {
        self.modulator.forward(r)
    }

    pub fn zeros_like(&self) -> Self {
        ImNetParams {
            kernel_set: self.kernel_set.clone(),
            patterns: self.patterns.clone(),
            predictor: self.predictor.iter().map(Mlp::zeros_like).collect(),
            refiner: self.refiner.iter().map(Mlp::zeros_like).collect(),
            modulator: self.modulator.zeros_like(),
        }
    }

    /// Parameter slices in declaration order: predictor branches, refiner
    /// branches, scale modulator.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for m in self.predictor.iter().chain(&self.refiner) {
            out.extend(m.tensors());
        }
        out.extend(self.modulator.mlp().tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for m in self.predictor.iter_mut().chain(self.refiner.iter_mut()) {
            out.extend(m.tensors_mut());
        }
        out.extend(self.modulator.mlp_mut().tensors_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Round every parameter to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn scale_by(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn add_assign(&mut self, other: &ImNetParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;

use super::mlp::{Mlp, MlpCache};
use crate::error::{Error, Result};

pub const MODULATOR_HIDDEN: usize = 32;

/// Sinusoidal scale encoding, length `2 (order + 1) + 1`:
/// `[sin(2^0 pi r/10), cos(2^0 pi r/10), ..., sin(2^N pi r/10), cos(2^N pi r/10), r]`.
pub fn encode_scale(r: f64, order: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_len(order));
    for i in 0..=order {
        let a = (1u64 << i) as f64 * PI * r / 10.0;
        out.push(a.sin());
        out.push(a.cos());
    }
    out.push(r);
    out
}

pub fn encoded_len(order: usize) -> usize {
    2 * (order + 1) + 1
}

/// Maps a target scale to a per-kernel modulation vector `s = 1 + tanh(z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleModulator {
    order: usize,
    mlp: Mlp,
}

#[derive(Debug)]
pub struct ModulatorCache {
    mlp: MlpCache,
    z: Vec<f64>,
}

impl ScaleModulator {
    pub fn init(order: usize, k: usize, rng: &mut impl Rng) -> Self {
        ScaleModulator {
            order,
            mlp: Mlp::init(&[encoded_len(order), MODULATOR_HIDDEN, k], true, rng),
        }
    }

    pub fn from_mlp(order: usize, mlp: Mlp) -> Result<Self> {
        if mlp.in_dim() != encoded_len(order) {
            return Err(Error::contract(format!(
                "modulator input {} does not match order {order}",
                mlp.in_dim()
            )));
        }
        Ok(ScaleModulator { order, mlp })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn zeros_like(&self) -> Self {
        ScaleModulator { order: self.order, mlp: self.mlp.zeros_like() }
    }

    pub fn forward(&self, r: f64) -> Result<Vec<f64>> {
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::contract(format!("scale must be positive, got {r}")));
        }
        if !self.mlp.is_finite() {
            return Err(Error::contract("scale modulator has non-finite parameters"));
        }
        let z = self.mlp.infer_one(&encode_scale(r, self.order));
        Ok(z.iter().map(|z| 1.0 + z.tanh()).collect())
    }

    pub fn forward_cached(&self, r: f64) -> Result<(Vec<f64>, ModulatorCache)> {
        let s = self.forward(r)?;
        let enc = encode_scale(r, self.order);
        let input = Array2::from_shape_vec((1, enc.len()), enc).expect("encoding shape");
        let (z, mlp) = self.mlp.forward_cached(input);
        let z = z.into_raw_vec_and_offset().0;
        Ok((s, ModulatorCache { mlp, z }))
    }

    /// Accumulate gradients given `ds = dL/ds`.
    pub fn backward(&self, cache: &ModulatorCache, ds: &[f64], grads: &mut ScaleModulator) {
        let dz: Vec<f64> = ds
            .iter()
            .zip(&cache.z)
            .map(|(d, z)| {
                let t = z.tanh();
                d * (1.0 - t * t)
            })
            .collect();
        let dz = Array2::from_shape_vec((1, dz.len()), dz).expect("gradient shape");
        self.mlp.backward(&cache.mlp, dz, &mut grads.mlp, false);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encoding_values() {
        let e = encode_scale(2.0, 0);
        assert_eq!(e.len(), 3);
        assert!((e[0] - 0.587785252292473).abs() < 1e-12);
        assert!((e[1] - 0.809016994374947).abs() < 1e-12);
        assert_eq!(e[2], 2.0);
        assert_eq!(encode_scale(3.0, 16).len(), 35);
        let tiny = encode_scale(1e-12, 0);
        assert!(tiny[0].abs() < 1e-11 && (tiny[1] - 1.0).abs() < 1e-12 && tiny[2] < 1e-11);
    }

    #[test]
    fn zero_init_modulation_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = ScaleModulator::init(16, 3, &mut rng);
        assert_eq!(m.forward(2.0).unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn outputs_in_open_range_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = ScaleModulator::init(4, 3, &mut rng);
        for l in m.mlp_mut().layers_mut() {
            l.w.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        }
        for r in [1.0, 1.5, 2.7, 4.5, 8.0] {
            let s = m.forward(r).unwrap();
            assert!(s.iter().all(|&v| v > 0.0 && v < 2.0));
            assert_eq!(s, m.forward(r).unwrap());
        }
    }

    #[test]
    fn non_finite_params_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = ScaleModulator::init(2, 2, &mut rng);
        m.mlp_mut().layers_mut()[0].w[[0, 0]] = f64::NAN;
        assert!(matches!(m.forward(2.0), Err(Error::Contract(_))));
        assert!(m.forward(-1.0).is_err());
    }
}

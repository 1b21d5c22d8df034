//! Fully connected ReLU networks with a hand-written backward pass.
//!
//! Rows of the input matrix are independent samples; every layer is a single
//! GEMM so whole images go through a branch in one call.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

const INFER_CHUNK: usize = 8192;

/// Affine layer `y = x W + b` with `W` stored as `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Dense { w: Array2::zeros((n_in, n_out)), b: Array1::zeros(n_out) }
    }

    fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::from_shape_fn((x.nrows(), self.b.len()), |(_, j)| self.b[j]);
        general_mat_mul(1.0, x, &self.w, 1.0, &mut out);
        out
    }
}

/// Per-call intermediates needed by [`Mlp::backward`].
#[derive(Debug)]
pub struct MlpCache {
    input: Array2<f64>,
    // post-ReLU activations of the hidden layers
    hidden: Vec<Array2<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least one layer");
        Mlp { layers: sizes.windows(2).map(|p| Dense::zeros(p[0], p[1])).collect() }
    }

    /// He-uniform hidden layers with zero biases. With `zero_last` the output
    /// layer starts at zero, so the network initially outputs exactly zero.
    pub fn init(sizes: &[usize], zero_last: bool, rng: &mut impl Rng) -> Self {
        let mut mlp = Mlp::zeros(sizes);
        let n = mlp.layers.len();
        for (i, layer) in mlp.layers.iter_mut().enumerate() {
            if zero_last && i + 1 == n {
                continue;
            }
            let bound = (6.0 / layer.w.nrows() as f64).sqrt();
            layer.w.mapv_inplace(|_| rng.random_range(-bound..bound) as f32 as f64);
        }
        mlp
    }

    pub fn from_layers(layers: Vec<Dense>) -> Self {
        Mlp { layers }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().b.len()
    }

    /// Layer widths, input first.
    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.in_dim()).chain(self.layers.iter().map(|l| l.b.len())).collect()
    }

    pub fn zeros_like(&self) -> Self {
        Mlp::zeros(&self.sizes())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Parameter slices in declaration order (`w0, b0, w1, b1, ...`).
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.as_slice().unwrap(), l.b.as_slice().unwrap()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.w.as_slice_mut().unwrap(), l.b.as_slice_mut().unwrap()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn forward_view(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut cur = self.layers[0].forward(&x);
        for layer in &self.layers[1..] {
            cur.mapv_inplace(|v| v.max(0.0));
            cur = layer.forward(&cur.view());
        }
        cur
    }

    pub fn forward_cached(&self, input: Array2<f64>) -> (Array2<f64>, MlpCache) {
        let mut hidden = Vec::with_capacity(self.layers.len() - 1);
        let mut cur = self.layers[0].forward(&input.view());
        for layer in &self.layers[1..] {
            cur.mapv_inplace(|v| v.max(0.0));
            let next = layer.forward(&cur.view());
            hidden.push(cur);
            cur = next;
        }
        (cur, MlpCache { input, hidden })
    }

    /// Forward without caching, processed in row chunks to bound memory.
    pub fn infer(&self, input: ArrayView2<f64>) -> Array2<f64> {
        let rows = input.nrows();
        let mut out = Array2::zeros((rows, self.out_dim()));
        let mut start = 0;
        while start < rows {
            let end = (start + INFER_CHUNK).min(rows);
            let part = self.forward_view(input.slice(s![start..end, ..]));
            out.slice_mut(s![start..end, ..]).assign(&part);
            start = end;
        }
        out
    }

    pub fn infer_one(&self, x: &[f64]) -> Vec<f64> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("input row shape");
        self.infer(view).into_raw_vec_and_offset().0
    }

    /// Accumulate parameter gradients for upstream `dout` into `grads`;
    /// returns the input gradient when `want_input` is set.
    pub fn backward(
        &self,
        cache: &MlpCache,
        dout: Array2<f64>,
        grads: &mut Mlp,
        want_input: bool,
    ) -> Option<Array2<f64>> {
        let mut delta = dout;
        for l in (0..self.layers.len()).rev() {
            let act = if l == 0 { &cache.input } else { &cache.hidden[l - 1] };
            let g = &mut grads.layers[l];
            general_mat_mul(1.0, &act.t(), &delta, 1.0, &mut g.w);
            g.b += &delta.sum_axis(Axis(0));
            if l == 0 && !want_input {
                return None;
            }
            let mut prev = Array2::zeros((delta.nrows(), self.layers[l].w.nrows()));
            general_mat_mul(1.0, &delta, &self.layers[l].w.t(), 0.0, &mut prev);
            if l > 0 {
                prev.zip_mut_with(act, |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            delta = prev;
        }
        Some(delta)
    }
}

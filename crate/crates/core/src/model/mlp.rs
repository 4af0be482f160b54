//! Fully-connected network over a flat parameter vector, with hand-written
//! reverse-mode differentiation.
//!
//! Layer `k` stores its weight as a row-major `out × in` block followed by an
//! `out` bias block. Hidden layers use SiLU; the output layer is linear.

use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl Layer {
    fn weight_len(&self) -> usize {
        self.fan_in * self.fan_out
    }

    fn weight<'a>(&self, params: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape(
            (self.fan_out, self.fan_in),
            &params[self.offset..self.offset + self.weight_len()],
        )
        .expect("layer shape")
    }

    fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        let start = self.offset + self.weight_len();
        &params[start..start + self.fan_out]
    }
}

/// Network topology; parameters live outside so the same topology can
/// evaluate raw and EMA weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    layers: Vec<Layer>,
    param_count: usize,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of each layer (`inputs[0]` is the network input).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Array2<f64>>,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_prime(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

impl Mlp {
    /// `widths = [input, hidden..., output]`.
    pub fn new(widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        let mut offset = 0;
        let layers = widths
            .windows(2)
            .map(|w| {
                let l = Layer {
                    fan_in: w[0],
                    fan_out: w[1],
                    offset,
                };
                offset += l.weight_len() + l.fan_out;
                l
            })
            .collect();
        Mlp {
            layers,
            param_count: offset,
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().fan_out
    }

    /// Fan-in scaled Gaussian weights, zero biases. With `zero_output` the last
    /// layer starts at exactly zero.
    pub fn init_params(&self, rng: &mut Rng, zero_output: bool) -> Vec<f64> {
        let mut params = vec![0.0; self.param_count];
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            if zero_output && k == last {
                continue;
            }
            let normal = Normal::new(0.0, 1.0 / (l.fan_in as f64).sqrt()).expect("finite std");
            for w in &mut params[l.offset..l.offset + l.weight_len()] {
                *w = normal.sample(rng);
            }
        }
        params
    }

    /// Forward pass over a batch (one example per row).
    pub fn forward(&self, params: &[f64], input: ArrayView2<'_, f64>) -> (Array2<f64>, ForwardCache) {
        debug_assert_eq!(params.len(), self.param_count);
        debug_assert_eq!(input.ncols(), self.input_width());
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let mut h = input.to_owned();
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let mut z = h.dot(&l.weight(params).t());
            z += &ArrayView2::from_shape((1, l.fan_out), l.bias(params)).expect("bias");
            inputs.push(h);
            if k == last {
                h = z;
            } else {
                h = z.mapv(silu);
                pre.push(z);
            }
        }
        (h, ForwardCache { inputs, pre })
    }

    /// Output only, without keeping activations.
    pub fn predict(&self, params: &[f64], input: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut h = input.to_owned();
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let mut z = h.dot(&l.weight(params).t());
            z += &ArrayView2::from_shape((1, l.fan_out), l.bias(params)).expect("bias");
            h = if k == last { z } else { z.mapv_into(silu) };
        }
        h
    }

    /// Backpropagates `grad_output` (∂L/∂output, one row per example).
    ///
    /// Parameter gradients are accumulated into `grads`; the gradient with
    /// respect to the network input is returned.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &ForwardCache,
        grad_output: ArrayView2<'_, f64>,
        grads: &mut [f64],
    ) -> Array2<f64> {
        debug_assert_eq!(grads.len(), self.param_count);
        let mut delta = grad_output.to_owned();
        for (k, l) in self.layers.iter().enumerate().rev() {
            if k < self.layers.len() - 1 {
                let z = &cache.pre[k];
                delta.zip_mut_with(z, |d, &zv| *d *= silu_prime(zv));
            }
            let x = &cache.inputs[k];
            let (w_grad, rest) = grads[l.offset..].split_at_mut(l.weight_len());
            let mut w_grad = ArrayViewMut2::from_shape((l.fan_out, l.fan_in), w_grad).expect("shape");
            w_grad += &delta.t().dot(x);
            let b_grad: Array1<f64> = delta.sum_axis(Axis(0));
            for (g, v) in rest[..l.fan_out].iter_mut().zip(b_grad.iter()) {
                *g += v;
            }
            delta = delta.dot(&l.weight(params));
        }
        delta
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};
    use ndarray::array;

    #[test]
    fn layout() {
        let m = Mlp::new(&[3, 4, 2]);
        assert_eq!(m.param_count(), 3 * 4 + 4 + 4 * 2 + 2);
        assert_eq!(m.input_width(), 3);
        assert_eq!(m.output_width(), 2);
    }

    #[test]
    fn zero_output_layer_gives_bias_free_zero() {
        let m = Mlp::new(&[2, 8, 8, 3]);
        let p = m.init_params(&mut substream(0, Stream::Init), true);
        let out = m.predict(&p, array![[0.3, -1.0], [2.0, 5.0]].view());
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_unit_by_hand() {
        // y = w x + b
        let m = Mlp::new(&[1, 1]);
        let p = vec![1.5, -0.25];
        let x = array![[2.0]];
        let (y, cache) = m.forward(&p, x.view());
        assert_eq!(y[[0, 0]], 2.75);
        let mut g = vec![0.0; 2];
        let gx = m.backward(&p, &cache, array![[1.0]].view(), &mut g);
        assert_eq!(g, vec![2.0, 1.0]);
        assert_eq!(gx[[0, 0]], 1.5);
    }

    #[test]
    fn predict_matches_forward() {
        let m = Mlp::new(&[3, 5, 5, 2]);
        let p = m.init_params(&mut substream(3, Stream::Init), false);
        let x = array![[0.1, 0.2, -0.3], [1.0, -2.0, 0.5]];
        assert_eq!(m.predict(&p, x.view()), m.forward(&p, x.view()).0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = Mlp::new(&[3, 6, 5, 2]);
        let mut p = m.init_params(&mut substream(9, Stream::Init), false);
        let x = array![[0.1, 0.2, -0.3], [1.0, -2.0, 0.5], [0.0, 0.7, 0.7]];
        let weights = array![[1.0, -2.0], [0.5, 0.3], [-1.0, 0.2]];
        let loss = |p: &[f64], x: &Array2<f64>| (m.predict(p, x.view()) * &weights).sum();
        let (_, cache) = m.forward(&p, x.view());
        let mut g = vec![0.0; m.param_count()];
        let gx = m.backward(&p, &cache, weights.view(), &mut g);
        let h = 1e-6;
        for i in 0..p.len() {
            let orig = p[i];
            p[i] = orig + h;
            let up = loss(&p, &x);
            p[i] = orig - h;
            let down = loss(&p, &x);
            p[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "param {i}: {fd} vs {}",
                g[i]
            );
        }
        let mut xp = x.clone();
        for ((r, c), &gv) in gx.indexed_iter() {
            let orig = xp[[r, c]];
            xp[[r, c]] = orig + h;
            let up = loss(&p, &xp);
            xp[[r, c]] = orig - h;
            let down = loss(&p, &xp);
            xp[[r, c]] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - gv).abs() <= 1e-6 * (1.0 + fd.abs()));
        }
    }
}

//! Minimal dense network with hand-written backprop: ReLU hidden layers,
//! linear output. Hosts the non-rigid offset, skinning, and fusion heads.

use crate::error::{Error, Result};
use crate::parallel::{self, Reduction};
use nalgebra::Vector3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TinyMlp {
    /// Layer widths `[input, hidden.., output]`.
    pub widths: Vec<usize>,
    /// Per layer, `out × in` row-major.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Parameter gradients, same shapes as [`TinyMlp`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &TinyMlp) -> Self {
        MlpGrads {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn add(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(other.weights.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(other.biases.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
    }
}

/// Batched activations retained for the backward pass: `acts[l]` holds the
/// layer-`l` outputs (post-activation) for all points, `acts[0]` the inputs.
pub struct MlpCache {
    pub n: usize,
    pub acts: Vec<Vec<f64>>,
}

impl TinyMlp {
    /// Kaiming-uniform hidden layers; the output layer is zero-initialized
    /// when `zero_output` is set so the network starts as the zero map.
    pub fn new(widths: &[usize], seed: u64, zero_output: bool) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..widths.len() - 1 {
            let fan_in = widths[l];
            let fan_out = widths[l + 1];
            let last = l == widths.len() - 2;
            let lim = (6.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| {
                    if last && zero_output {
                        // Still consume randomness so sibling nets with the
                        // same seed stay decorrelated.
                        let _ = rng.gen_range(-lim..lim);
                        0.0
                    } else {
                        rng.gen_range(-lim..lim)
                    }
                })
                .collect();
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        TinyMlp {
            widths: widths.to_vec(),
            weights,
            biases,
        }
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Single-input forward pass.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_width());
        let mut a = x.to_vec();
        for l in 0..self.layer_count() {
            a = self.layer_forward(l, &a, l + 1 < self.layer_count());
        }
        a
    }

    fn layer_forward(&self, l: usize, a: &[f64], relu: bool) -> Vec<f64> {
        let (win, wout) = (self.widths[l], self.widths[l + 1]);
        let w = &self.weights[l];
        let mut out = vec![0.0; wout];
        for (j, o) in out.iter_mut().enumerate() {
            let row = &w[j * win..(j + 1) * win];
            let mut acc = self.biases[l][j];
            for (rw, av) in row.iter().zip(a.iter()) {
                acc += rw * av;
            }
            *o = if relu { acc.max(0.0) } else { acc };
        }
        out
    }

    /// Batched forward with retained activations. `xs` is `n × input_width`
    /// row-major.
    pub fn forward_batch(&self, xs: &[f64], n: usize) -> Result<MlpCache> {
        let win = self.input_width();
        if xs.len() != n * win {
            return Err(Error::Config(format!(
                "network input width mismatch: got {} values for {} × {}",
                xs.len(),
                n,
                win
            )));
        }
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layer_count() + 1);
        acts.push(xs.to_vec());
        for l in 0..self.layer_count() {
            let relu = l + 1 < self.layer_count();
            let wout = self.widths[l + 1];
            let win_l = self.widths[l];
            let prev = &acts[l];
            let w = &self.weights[l];
            let b = &self.biases[l];
            let mut out = vec![0.0; n * wout];
            parallel::for_each_chunk_mut(&mut out, wout, |i, row_out| {
                let a = &prev[i * win_l..(i + 1) * win_l];
                for (j, o) in row_out.iter_mut().enumerate() {
                    let row = &w[j * win_l..(j + 1) * win_l];
                    let mut acc = b[j];
                    for (rw, av) in row.iter().zip(a.iter()) {
                        acc += rw * av;
                    }
                    *o = if relu { acc.max(0.0) } else { acc };
                }
            });
            acts.push(out);
        }
        Ok(MlpCache { n, acts })
    }

    /// Output slice of point `i` from a cache.
    pub fn output<'a>(&self, cache: &'a MlpCache, i: usize) -> &'a [f64] {
        let wout = self.output_width();
        &cache.acts[self.layer_count()][i * wout..(i + 1) * wout]
    }

    /// Batched backprop. `grad_out` is `n × output_width`. Returns parameter
    /// gradients (deterministically reduced over points) and input gradients.
    pub fn backward_batch(
        &self,
        cache: &MlpCache,
        grad_out: &[f64],
        mode: Reduction,
    ) -> Result<(MlpGrads, Vec<f64>)> {
        let n = cache.n;
        if grad_out.len() != n * self.output_width() {
            return Err(Error::Usage(format!(
                "upstream gradient has {} values, expected {}",
                grad_out.len(),
                n * self.output_width()
            )));
        }
        if cache.acts.len() != self.layer_count() + 1 {
            return Err(Error::Usage("forward cache missing retained activations".into()));
        }
        let mut grads = MlpGrads::zeros_like(self);
        let mut delta: Vec<f64> = grad_out.to_vec();
        for l in (0..self.layer_count()).rev() {
            let win = self.widths[l];
            let wout = self.widths[l + 1];
            let prev = &cache.acts[l];
            let w = &self.weights[l];

            // Parameter gradients: ordered chunk reduction over points.
            let flat = parallel::reduce_indexed(
                n,
                mode,
                || vec![0.0; wout * win + wout],
                |i| {
                    let mut part = vec![0.0; wout * win + wout];
                    let d = &delta[i * wout..(i + 1) * wout];
                    let a = &prev[i * win..(i + 1) * win];
                    for (j, dj) in d.iter().enumerate() {
                        if *dj != 0.0 {
                            let row = &mut part[j * win..(j + 1) * win];
                            for (rv, av) in row.iter_mut().zip(a.iter()) {
                                *rv += dj * av;
                            }
                        }
                        part[wout * win + j] += dj;
                    }
                    part
                },
                |acc, part| {
                    for (x, y) in acc.iter_mut().zip(part.iter()) {
                        *x += y;
                    }
                },
            );
            grads.weights[l].copy_from_slice(&flat[..wout * win]);
            grads.biases[l].copy_from_slice(&flat[wout * win..]);

            // Input gradients for the previous layer.
            let mut prev_delta = vec![0.0; n * win];
            let relu_below = l > 0;
            parallel::for_each_chunk_mut(&mut prev_delta, win, |i, out_row| {
                let d = &delta[i * wout..(i + 1) * wout];
                for (j, dj) in d.iter().enumerate() {
                    if *dj != 0.0 {
                        let row = &w[j * win..(j + 1) * win];
                        for (o, rv) in out_row.iter_mut().zip(row.iter()) {
                            *o += dj * rv;
                        }
                    }
                }
                if relu_below {
                    let a = &prev[i * win..(i + 1) * win];
                    for (o, av) in out_row.iter_mut().zip(a.iter()) {
                        if *av <= 0.0 {
                            *o = 0.0;
                        }
                    }
                }
            });
            delta = prev_delta;
        }
        Ok((grads, delta))
    }

    /// Flattens all parameters; used by the optimizer and checkpointing.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in 0..self.layer_count() {
            out.extend_from_slice(&self.weights[l]);
            out.extend_from_slice(&self.biases[l]);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut pos = 0;
        for l in 0..self.layer_count() {
            let wlen = self.weights[l].len();
            self.weights[l].copy_from_slice(&flat[pos..pos + wlen]);
            pos += wlen;
            let blen = self.biases[l].len();
            self.biases[l].copy_from_slice(&flat[pos..pos + blen]);
            pos += blen;
        }
        assert_eq!(pos, flat.len());
    }

    pub fn flat_grads(grads: &MlpGrads) -> Vec<f64> {
        let mut out = Vec::new();
        for l in 0..grads.weights.len() {
            out.extend_from_slice(&grads.weights[l]);
            out.extend_from_slice(&grads.biases[l]);
        }
        out
    }
}

/// Sinusoidal positional encoding: raw coordinates followed by
/// `sin(2^k π x), cos(2^k π x)` per octave and coordinate.
pub fn positional_encoding(x: Vector3<f64>, octaves: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 + 6 * octaves);
    out.extend_from_slice(&[x.x, x.y, x.z]);
    for k in 0..octaves {
        let f = (1 << k) as f64 * std::f64::consts::PI;
        for c in 0..3 {
            out.push((f * x[c]).sin());
        }
        for c in 0..3 {
            out.push((f * x[c]).cos());
        }
    }
    out
}

pub fn positional_encoding_width(octaves: usize) -> usize {
    3 + 6 * octaves
}

/// Adjoint of [`positional_encoding`].
pub fn positional_encoding_backward(
    x: Vector3<f64>,
    octaves: usize,
    grad: &[f64],
) -> Vector3<f64> {
    let mut g = Vector3::new(grad[0], grad[1], grad[2]);
    let mut pos = 3;
    for k in 0..octaves {
        let f = (1 << k) as f64 * std::f64::consts::PI;
        for c in 0..3 {
            g[c] += grad[pos + c] * f * (f * x[c]).cos();
        }
        for c in 0..3 {
            g[c] -= grad[pos + 3 + c] * f * (f * x[c]).sin();
        }
        pos += 6;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{fd_grad, rel_err};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Straightforward per-layer oracle evaluation.
    fn naive_forward(net: &TinyMlp, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for l in 0..net.layer_count() {
            let (win, wout) = (net.widths[l], net.widths[l + 1]);
            let mut next = vec![0.0; wout];
            for j in 0..wout {
                let mut acc = net.biases[l][j];
                for k in 0..win {
                    acc += net.weights[l][j * win + k] * a[k];
                }
                next[j] = if l + 1 < net.layer_count() { acc.max(0.0) } else { acc };
            }
            a = next;
        }
        a
    }

    #[test]
    fn zero_output_layer_gives_zero_map() {
        let net = TinyMlp::new(&[7, 16, 16, 5], 3, true);
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..10 {
            let x: Vec<f64> = (0..7).map(|_| rng.gen_range(-2.0..2.0)).collect();
            assert!(net.forward(&x).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn batch_matches_naive_oracle() {
        let net = TinyMlp::new(&[9, 24, 24, 6], 4, false);
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let n = 33;
        let xs: Vec<f64> = (0..n * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cache = net.forward_batch(&xs, n).unwrap();
        for i in 0..n {
            let want = naive_forward(&net, &xs[i * 9..(i + 1) * 9]);
            let got = net.output(&cache, i);
            for (g, w) in got.iter().zip(want.iter()) {
                assert!(rel_err(*g, *w, 1e-12) < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_width_mismatch() {
        let net = TinyMlp::new(&[4, 8, 2], 0, false);
        assert!(net.forward_batch(&[0.0; 9], 2).is_err());
    }

    #[test]
    fn single_linear_layer_closed_form_grads() {
        // L = out · v  →  dL/dW = v ⊗ input, dL/db = v.
        let mut net = TinyMlp::new(&[3, 2], 0, false);
        net.weights[0] = vec![0.1, -0.2, 0.3, 0.5, 0.4, -0.6];
        net.biases[0] = vec![0.05, -0.02];
        let x = [1.5, -0.7, 2.0];
        let v = [2.0, -1.0];
        let cache = net.forward_batch(&x, 1).unwrap();
        let (grads, gin) = net
            .backward_batch(&cache, &v, Reduction::Ordered)
            .unwrap();
        for j in 0..2 {
            for k in 0..3 {
                assert!((grads.weights[0][j * 3 + k] - v[j] * x[k]).abs() < 1e-15);
            }
            assert!((grads.biases[0][j] - v[j]).abs() < 1e-15);
        }
        for k in 0..3 {
            let want = v[0] * net.weights[0][k] + v[1] * net.weights[0][3 + k];
            assert!((gin[k] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let net = TinyMlp::new(&[5, 12, 4], 1, false);
        let xs = vec![0.3; 10 * 5];
        let cache = net.forward_batch(&xs, 10).unwrap();
        let (grads, gin) = net
            .backward_batch(&cache, &vec![0.0; 10 * 4], Reduction::Ordered)
            .unwrap();
        assert!(grads.weights.iter().flatten().all(|v| *v == 0.0));
        assert!(grads.biases.iter().flatten().all(|v| *v == 0.0));
        assert!(gin.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_matches_fd_three_layer() {
        let net = TinyMlp::new(&[6, 10, 8, 3], 5, false);
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let n = 4;
        let xs: Vec<f64> = (0..n * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let up: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let loss_of_params = |flat: &[f64]| {
            let mut p = net.clone();
            p.set_flat_params(flat);
            let cache = p.forward_batch(&xs, n).unwrap();
            (0..n)
                .flat_map(|i| p.output(&cache, i).to_vec())
                .zip(up.iter())
                .map(|(o, u)| o * u)
                .sum()
        };
        let flat0 = net.flat_params();
        let fd = fd_grad(loss_of_params, &flat0, 1e-5);

        let cache = net.forward_batch(&xs, n).unwrap();
        let (grads, gin) = net.backward_batch(&cache, &up, Reduction::Ordered).unwrap();
        let got = TinyMlp::flat_grads(&grads);
        for (g, e) in got.iter().zip(fd.iter()) {
            assert!(rel_err(*g, *e, 1e-6) < 1e-3, "param grad {g} vs {e}");
        }

        // Input gradients.
        let loss_of_inputs = |xv: &[f64]| {
            let cache = net.forward_batch(xv, n).unwrap();
            (0..n)
                .flat_map(|i| net.output(&cache, i).to_vec())
                .zip(up.iter())
                .map(|(o, u)| o * u)
                .sum()
        };
        let fd_in = fd_grad(loss_of_inputs, &xs, 1e-5);
        for (g, e) in gin.iter().zip(fd_in.iter()) {
            assert!(rel_err(*g, *e, 1e-6) < 1e-3, "input grad {g} vs {e}");
        }
    }

    #[test]
    fn param_grads_deterministic_across_runs() {
        let net = TinyMlp::new(&[8, 32, 8], 9, false);
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let n = 3000;
        let xs: Vec<f64> = (0..n * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let up: Vec<f64> = (0..n * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cache = net.forward_batch(&xs, n).unwrap();
        let (g1, _) = net.backward_batch(&cache, &up, Reduction::Ordered).unwrap();
        let (g2, _) = net.backward_batch(&cache, &up, Reduction::Ordered).unwrap();
        for (a, b) in TinyMlp::flat_grads(&g1).iter().zip(TinyMlp::flat_grads(&g2).iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn positional_encoding_backward_matches_fd() {
        let x = Vector3::new(0.23, -0.71, 0.42);
        let octaves = 4;
        let width = positional_encoding_width(octaves);
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let up: Vec<f64> = (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = positional_encoding_backward(x, octaves, &up);
        let fd = fd_grad(
            |v: &[f64]| {
                positional_encoding(Vector3::new(v[0], v[1], v[2]), octaves)
                    .iter()
                    .zip(up.iter())
                    .map(|(e, u)| e * u)
                    .sum()
            },
            &[x.x, x.y, x.z],
            1e-6,
        );
        for k in 0..3 {
            assert!(rel_err(got[k], fd[k], 1e-9) < 1e-6);
        }
    }

    #[test]
    fn flat_params_round_trip() {
        let net = TinyMlp::new(&[4, 6, 2], 7, true);
        let flat = net.flat_params();
        let mut other = TinyMlp::new(&[4, 6, 2], 8, false);
        other.set_flat_params(&flat);
        assert_eq!(net, other);
    }
}

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::layers::store::{Binding, ParamId, ParamStore};

/// Floor on the singular-value estimate; keeps a degenerate (zero) weight
/// from dividing by zero.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Power-iteration state for one spectrally normalized convolution weight.
/// `u` approximates the left singular vector of the O x (I*kH*kW)
/// matricization and persists across forwards.
#[derive(Debug, Clone)]
pub struct SpectralState {
    u: Vec<f64>,
    iters_per_forward: usize,
}

impl SpectralState {
    pub fn new(rng: &mut ChaCha8Rng, out_ch: usize) -> Self {
        let mut u: Vec<f64> = (0..out_ch)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        normalize(&mut u);
        Self {
            u,
            iters_per_forward: 1,
        }
    }

    pub fn from_parts(u: Vec<f64>, iters_per_forward: usize) -> Self {
        Self {
            u,
            iters_per_forward,
        }
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    /// Runs the configured number of power iterations against the raw weight
    /// matricization `w` (rows x cols) and returns the spectral-norm
    /// estimate, floored at [`SIGMA_FLOOR`]. Updates `u` in place.
    pub fn estimate_sigma(&mut self, w: &[f64], rows: usize, cols: usize) -> f64 {
        let mut sigma = SIGMA_FLOOR;
        for _ in 0..self.iters_per_forward {
            // v = normalize(W^T u)
            let mut v = vec![0.0; cols];
            for r in 0..rows {
                let ur = self.u[r];
                if ur == 0.0 {
                    continue;
                }
                for (vc, wc) in v.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                    *vc += ur * wc;
                }
            }
            if !normalize(&mut v) {
                return SIGMA_FLOOR;
            }
            // wv = W v; sigma = |wv|; u = wv / sigma
            let mut wv = vec![0.0; rows];
            for r in 0..rows {
                wv[r] = w[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(&v)
                    .map(|(a, b)| a * b)
                    .sum();
            }
            let norm = l2(&wv);
            if norm < SIGMA_FLOOR {
                return SIGMA_FLOOR;
            }
            for (u, x) in self.u.iter_mut().zip(&wv) {
                *u = x / norm;
            }
            sigma = norm;
        }
        sigma.max(SIGMA_FLOOR)
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) -> bool {
    let n = l2(v);
    if n < SIGMA_FLOOR {
        return false;
    }
    for x in v.iter_mut() {
        *x /= n;
    }
    true
}

/// Convolution with the kernel divided by its largest-singular-value
/// estimate. The estimate is treated as a constant in backward (the scale
/// factor is recorded as scale-by-constant), so gradients reach the raw
/// weight divided by sigma but never differentiate through sigma itself.
#[allow(clippy::too_many_arguments)]
pub fn spectral_conv2d(
    tape: &mut Tape,
    store: &ParamStore,
    bind: &Binding,
    x: Var,
    w: ParamId,
    b: ParamId,
    state: &mut SpectralState,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let wt = store.tensor(w);
    let shape = wt.shape();
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    debug_assert_eq!(state.u.len(), rows);
    let sigma = state.estimate_sigma(wt.data(), rows, cols);
    let w_norm = tape.mul_scalar(bind.var(w), 1.0 / sigma)?;
    tape.conv2d(x, w_norm, bind.var(b), stride, pad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::SeedableRng;

    /// Builds a rank-1 weight matrix sigma * u v^T with unit u, v.
    fn rank_one(rows: usize, cols: usize, sigma: f64) -> Vec<f64> {
        let u: Vec<f64> = (0..rows).map(|i| ((i + 1) as f64).sin()).collect();
        let v: Vec<f64> = (0..cols).map(|i| ((i + 2) as f64).cos()).collect();
        let (nu, nv) = (l2(&u), l2(&v));
        let mut w = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                w[r * cols + c] = sigma * (u[r] / nu) * (v[c] / nv);
            }
        }
        w
    }

    #[test]
    fn rank_one_sigma_recovered_within_two_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (rows, cols) = (4, 18);
        let true_sigma = 3.7;
        let w = rank_one(rows, cols, true_sigma);
        let mut state = SpectralState::new(&mut rng, rows);
        let mut est = 0.0;
        for _ in 0..5 {
            est = state.estimate_sigma(&w, rows, cols);
        }
        // normalized weight's largest singular value = true_sigma / est
        let ratio = true_sigma / est;
        assert!((ratio - 1.0).abs() < 0.02, "ratio {ratio}");
    }

    #[test]
    fn zero_weight_outputs_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParamStore::new();
        let w = store
            .register("d.w", Tensor::zeros(&[2, 1, 3, 3]), true)
            .unwrap();
        let b = store
            .register("d.b", Tensor::new(&[2], vec![0.5, -1.0]).unwrap(), true)
            .unwrap();
        let mut state = SpectralState::new(&mut rng, 2);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let x = tape.leaf(Tensor::full(&[1, 1, 4, 4], 2.0));
        let y = spectral_conv2d(&mut tape, &store, &bind, x, w, b, &mut state, 1, 1).unwrap();
        let out = tape.value(y);
        for c in 0..2 {
            let expect = [0.5, -1.0][c];
            for j in 0..16 {
                assert_eq!(out.data()[c * 16 + j], expect);
            }
        }
    }

    #[test]
    fn doubling_weight_leaves_output_invariant_after_warmup() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let w_data: Vec<f64> = (0..2 * 1 * 3 * 3)
            .map(|i| ((i as f64) * 0.37).sin() * 0.5)
            .collect();
        let x = Tensor::new(&[1, 1, 5, 5], (0..25).map(|i| (i as f64 * 0.11).cos()).collect())
            .unwrap();

        let run = |scale: f64, rng: &mut ChaCha8Rng| {
            let mut store = ParamStore::new();
            let data: Vec<f64> = w_data.iter().map(|v| v * scale).collect();
            let w = store
                .register("d.w", Tensor::new(&[2, 1, 3, 3], data).unwrap(), true)
                .unwrap();
            let b = store.register("d.b", Tensor::zeros(&[2]), true).unwrap();
            let mut state = SpectralState::new(rng, 2);
            // warm up u
            let wt = store.tensor(w).data().to_vec();
            for _ in 0..10 {
                state.estimate_sigma(&wt, 2, 9);
            }
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape);
            let vx = tape.leaf(x.clone());
            let y = spectral_conv2d(&mut tape, &store, &bind, vx, w, b, &mut state, 1, 1).unwrap();
            tape.value(y).data().to_vec()
        };

        let mut rng2 = rng.clone();
        let base = run(1.0, &mut rng);
        let doubled = run(2.0, &mut rng2);
        for (a, b) in base.iter().zip(&doubled) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn sigma_is_constant_to_backward() {
        // Gradient of sum(spectral_conv(x)) wrt w matches finite differences
        // of the *frozen-sigma* function, i.e. sigma treated as a constant:
        // the tape records only the scale, so an FD probe through
        // estimate_sigma would disagree. Check the recorded path instead.
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut store = ParamStore::new();
        let w_t = Tensor::new(&[1, 1, 2, 2], vec![0.4, -0.3, 0.2, 0.9]).unwrap();
        let w = store.register("w", w_t, true).unwrap();
        let b = store.register("b", Tensor::zeros(&[1]), true).unwrap();
        let mut state = SpectralState::new(&mut rng, 1);
        let wt = store.tensor(w).data().to_vec();
        for _ in 0..20 {
            state.estimate_sigma(&wt, 1, 4);
        }
        let sigma = state.estimate_sigma(&wt, 1, 4);

        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let x = tape.leaf(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = spectral_conv2d(&mut tape, &store, &bind, x, w, b, &mut state, 1, 0).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        let gw = tape.grad(bind.var(w)).unwrap();
        // d/dw sum(conv(x, w/sigma)) with x all ones = x-sum / sigma = 1/sigma
        for g in gw {
            assert!((g - 1.0 / sigma).abs() < 1e-9, "{g} vs {}", 1.0 / sigma);
        }
    }
}

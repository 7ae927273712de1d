use crate::error::{Error, Result};
use crate::layers::store::ParamStore;

/// Update rule selector. Adam is the workhorse; SGD exists for tests and
/// tiny fits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer bound to one [`ParamStore`] layout. Moment buffers are keyed by
/// entry index; entries must not be added between steps.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd { lr },
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam {
                lr,
                beta1: ADAM_BETA1,
                beta2: ADAM_BETA2,
                eps: ADAM_EPS,
            },
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one update to every trainable entry and clears their
    /// gradients. Erroring out on a missing gradient catches "step before
    /// backward" misuse. Non-trainable entries are never read or written.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let n = store.len();
        if self.m.len() < n {
            self.m.resize(n, Vec::new());
            self.v.resize(n, Vec::new());
        }
        // Validate first so a failed step leaves parameters untouched.
        for e in store.iter() {
            if e.trainable() && e.tensor().grad().is_none() {
                return Err(Error::MissingGradient(e.name().to_string()));
            }
        }
        self.t += 1;
        let trainable: Vec<(usize, String)> = store
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable())
            .map(|(i, e)| (i, e.name().to_string()))
            .collect();
        for (i, name) in trainable {
            let id = store.id(&name)?;
            let tensor = store.tensor_mut(id);
            let grad = tensor.grad().expect("validated").to_vec();
            match self.kind {
                OptimizerKind::Sgd { lr } => {
                    for (p, g) in tensor.data_mut().iter_mut().zip(&grad) {
                        *p -= lr * g;
                    }
                }
                OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                    if self.m[i].len() != grad.len() {
                        self.m[i] = vec![0.0; grad.len()];
                        self.v[i] = vec![0.0; grad.len()];
                    }
                    let bc1 = 1.0 - beta1.powi(self.t as i32);
                    let bc2 = 1.0 - beta2.powi(self.t as i32);
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (j, (p, g)) in tensor.data_mut().iter_mut().zip(&grad).enumerate() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                        let m_hat = m[j] / bc1;
                        let v_hat = v[j] / bc2;
                        *p -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            tensor.clear_grad();
        }
        Ok(())
    }

    /// Moment buffers named after their parameter entries, for checkpoints.
    pub fn state_entries(&self, store: &ParamStore) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, e) in store.iter().enumerate() {
            if !e.trainable() {
                continue;
            }
            let m = self.m.get(i).cloned().unwrap_or_default();
            let v = self.v.get(i).cloned().unwrap_or_default();
            out.push((format!("m.{}", e.name()), m));
            out.push((format!("v.{}", e.name()), v));
        }
        out
    }

    pub fn restore_state(
        &mut self,
        store: &ParamStore,
        t: u64,
        mut lookup: impl FnMut(&str) -> Option<Vec<f64>>,
    ) {
        self.t = t;
        self.m = vec![Vec::new(); store.len()];
        self.v = vec![Vec::new(); store.len()];
        for (i, e) in store.iter().enumerate() {
            if !e.trainable() {
                continue;
            }
            if let Some(m) = lookup(&format!("m.{}", e.name())) {
                self.m[i] = m;
            }
            if let Some(v) = lookup(&format!("v.{}", e.name())) {
                self.v[i] = v;
            }
        }
    }
}

/// Scales trainable-entry gradients so their global L2 norm is at most
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    let names: Vec<String> = store
        .iter()
        .filter(|e| e.trainable())
        .map(|e| e.name().to_string())
        .collect();
    for name in &names {
        let id = store.id(name).expect("name");
        if let Some(g) = store.tensor(id).grad() {
            sq += g.iter().map(|x| x * x).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for name in &names {
            let id = store.id(name).expect("name");
            let t = store.tensor_mut(id);
            if t.grad().is_some() {
                let scaled: Vec<f64> = t.grad().unwrap().iter().map(|g| g * (scale - 1.0)).collect();
                t.accumulate_grad(&scaled);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};

    #[test]
    fn sgd_basic_step() {
        let mut store = ParamStore::new();
        let id = store.register("p", Tensor::scalar(1.0), true).unwrap();
        store.tensor_mut(id).accumulate_grad(&[1.0]);
        let mut opt = Optimizer::sgd(0.1);
        opt.step(&mut store).unwrap();
        assert!((store.tensor(id).data()[0] - 0.9).abs() < 1e-15);
        assert!(store.tensor(id).grad().is_none(), "gradients cleared");
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        let g = 0.5;
        let lr = 1e-4;
        let mut store = ParamStore::new();
        let id = store.register("p", Tensor::scalar(2.0), true).unwrap();
        store.tensor_mut(id).accumulate_grad(&[g]);
        let mut opt = Optimizer::adam(lr);
        opt.step(&mut store).unwrap();

        // Hand-computed single Adam step:
        // m = (1-b1) g, v = (1-b2) g^2, m_hat = g, v_hat = g^2
        // update = -lr * g / (|g| + eps)
        let m_hat = (1.0 - ADAM_BETA1) * g / (1.0 - ADAM_BETA1);
        let v_hat = (1.0 - ADAM_BETA2) * g * g / (1.0 - ADAM_BETA2);
        let expect = 2.0 - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        assert!((store.tensor(id).data()[0] - expect).abs() < 1e-15);
        // sign-consistent: positive gradient decreases the parameter
        assert!(store.tensor(id).data()[0] < 2.0);
    }

    #[test]
    fn frozen_entry_bit_identical_through_graph_activity() {
        let mut store = ParamStore::new();
        let frozen = store
            .register("frozen", Tensor::new(&[2], vec![0.3, -0.7]).unwrap(), false)
            .unwrap();
        let live = store.register("live", Tensor::full(&[2], 1.0), true).unwrap();
        let before: Vec<u64> = store.tensor(frozen).data().iter().map(|v| v.to_bits()).collect();

        let mut opt = Optimizer::adam(1e-2);
        for _ in 0..3 {
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape);
            let prod = tape.mul(bind.var(frozen), bind.var(live)).unwrap();
            let loss = tape.sum(prod).unwrap();
            tape.backward(loss).unwrap();
            store.export_grads(&tape, &bind);
            opt.step(&mut store).unwrap();
        }
        let after: Vec<u64> = store.tensor(frozen).data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn step_before_backward_is_an_error() {
        let mut store = ParamStore::new();
        store.register("p", Tensor::scalar(1.0), true).unwrap();
        let mut opt = Optimizer::sgd(0.1);
        assert!(matches!(
            opt.step(&mut store),
            Err(Error::MissingGradient(_))
        ));
    }

    #[test]
    fn clip_scales_large_gradients() {
        let mut store = ParamStore::new();
        let id = store.register("p", Tensor::zeros(&[2]), true).unwrap();
        store.tensor_mut(id).accumulate_grad(&[3.0, 4.0]);
        let norm = clip_global_norm(&mut store, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let g = store.tensor(id).grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-12);
        assert!((g[1] - 0.8).abs() < 1e-12);
        // Already-small gradients are untouched.
        store.tensor_mut(id).clear_grad();
        store.tensor_mut(id).accumulate_grad(&[0.1, 0.1]);
        clip_global_norm(&mut store, 1.0);
        assert_eq!(store.tensor(id).grad().unwrap(), &[0.1, 0.1]);
    }
}

use crate::adaptation::LmaModel;
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::layers::Optimizer;
use crate::util::{gather_batch, seeded_rng, shuffled_indices, streams};

#[derive(Debug, Clone)]
pub struct PhaseAConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub latent_dim: usize,
}

impl Default for PhaseAConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 8,
            learning_rate: 1e-4,
            seed: 0,
            latent_dim: 32,
        }
    }
}

/// Trains the morphology autoencoder on target-domain images
/// (reconstruction MSE) and freezes it. Returns the frozen model plus the
/// per-epoch loss log.
pub fn phase_a_train(images: &Tensor, cfg: &PhaseAConfig) -> Result<(LmaModel, Vec<f64>)> {
    let shape = images.shape();
    if shape.is_empty() || shape[0] == 0 {
        return Err(Error::InvalidArgument("empty target dataset".into()));
    }
    let n = shape[0];
    let resolution = shape[2];
    let mut rng = seeded_rng(cfg.seed, streams::LMA_INIT);
    let mut lma = LmaModel::new(resolution, cfg.latent_dim, &mut rng)?;
    let mut opt = Optimizer::adam(cfg.learning_rate);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut shuffle =
            seeded_rng(cfg.seed, streams::SHUFFLE + streams::LMA_TRAIN * 0x1_0000 + epoch as u64);
        let order = shuffled_indices(&mut shuffle, n);
        let mut total = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = gather_batch(images, chunk);
            let mut tape = Tape::new();
            let bind = lma.store.bind(&mut tape);
            let x = tape.leaf(batch);
            let z = lma.encode(&mut tape, &bind, x)?;
            let xh = lma.decode(&mut tape, &bind, z)?;
            let loss = tape.mse(xh, x)?;
            total += tape.value(loss).data()[0];
            batches += 1.0;
            tape.backward(loss)?;
            lma.store.export_grads(&tape, &bind);
            opt.step(&mut lma.store)?;
        }
        log.push(total / batches);
    }
    lma.store.freeze_all();
    Ok((lma, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Optimizer;

    /// Ten distinct smooth images; easy to memorize but far from constant.
    fn tiny_dataset(n: usize, seed: u64) -> Tensor {
        let res = 32;
        let mut data = Vec::with_capacity(n * res * res);
        for i in 0..n {
            let phase = seed as f64 * 0.1 + i as f64;
            for y in 0..res {
                for x in 0..res {
                    let (xf, yf) = (x as f64 / res as f64, y as f64 / res as f64);
                    let v = 0.6 * ((xf * 4.0 + phase).sin() * (yf * 3.0 - phase).cos())
                        + 0.3 * (xf - yf);
                    data.push(v.clamp(-1.0, 1.0));
                }
            }
        }
        Tensor::new(&[n, 1, res, res], data).unwrap()
    }

    #[test]
    fn overfits_a_ten_image_set() {
        let images = tiny_dataset(10, 7);
        let cfg = PhaseAConfig {
            epochs: 60,
            batch_size: 1,
            learning_rate: 3e-3,
            seed: 7,
            latent_dim: 16,
        };
        let (_, log) = phase_a_train(&images, &cfg).unwrap();
        let first = log[0];
        let last = *log.last().unwrap();
        assert!(
            last < 0.1 * first,
            "final loss {last} should be under 10% of initial {first}"
        );
    }

    #[test]
    fn returned_model_is_frozen_and_rejects_steps() {
        let images = tiny_dataset(6, 8);
        let cfg = PhaseAConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-4,
            seed: 8,
            latent_dim: 8,
        };
        let (mut lma, _) = phase_a_train(&images, &cfg).unwrap();
        assert!(lma.store.iter().all(|e| !e.trainable()));
        // An optimizer pass over an all-frozen store is a no-op.
        let before: Vec<Vec<u64>> = lma
            .store
            .iter()
            .map(|e| e.tensor().data().iter().map(|v| v.to_bits()).collect())
            .collect();
        Optimizer::adam(1e-3).step(&mut lma.store).unwrap();
        let after: Vec<Vec<u64>> = lma
            .store
            .iter()
            .map(|e| e.tensor().data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn same_seed_bit_identical_model() {
        let images = tiny_dataset(6, 9);
        let cfg = PhaseAConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-4,
            seed: 9,
            latent_dim: 8,
        };
        let (a, _) = phase_a_train(&images, &cfg).unwrap();
        let (b, _) = phase_a_train(&images, &cfg).unwrap();
        for (ea, eb) in a.store.iter().zip(b.store.iter()) {
            assert!(ea
                .tensor()
                .data()
                .iter()
                .zip(eb.tensor().data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}

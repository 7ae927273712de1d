//! Seeding and small tensor helpers shared across modules.
//!
//! Every random draw in the crate flows through a `ChaCha8Rng` constructed
//! here, with the stream id namespacing the purpose, so independent parts of
//! a run never share or race a generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;

/// Stream ids carve one master seed into independent generators.
pub mod streams {
    pub const VAE_INIT: u64 = 1;
    pub const UNET_INIT: u64 = 2;
    pub const ADAPTER_INIT: u64 = 3;
    pub const LMA_INIT: u64 = 4;
    pub const DISC_INIT: u64 = 5;
    pub const ENCODER_INIT: u64 = 6;
    pub const VAE_TRAIN: u64 = 10;
    pub const UNET_TRAIN: u64 = 11;
    pub const LMA_TRAIN: u64 = 12;
    pub const ADAPT_TRAIN: u64 = 13;
    pub const ENCODER_TRAIN: u64 = 14;
    /// Base for per-epoch shuffles; epoch index is added on top.
    pub const SHUFFLE: u64 = 1 << 32;
    /// Base for per-image sampling; image index is added on top.
    pub const SAMPLE: u64 = 1 << 33;
}

pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn randn_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    Tensor::new(shape, data).expect("randn shape")
}

/// Deterministic Fisher-Yates shuffle of 0..n.
pub fn shuffled_indices(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Gathers rows of a (N, ...) tensor into a new batch tensor.
pub fn gather_batch(data: &Tensor, indices: &[usize]) -> Tensor {
    let shape = data.shape();
    let per: usize = shape[1..].iter().product();
    let mut out = Vec::with_capacity(indices.len() * per);
    for &i in indices {
        out.extend_from_slice(&data.data()[i * per..(i + 1) * per]);
    }
    let mut new_shape = shape.to_vec();
    new_shape[0] = indices.len();
    Tensor::new(&new_shape, out).expect("gather shape")
}

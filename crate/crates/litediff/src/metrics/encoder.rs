use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{Binding, Conv2dLayer, DenseLayer, Optimizer, ParamStore, LEAKY_SLOPE};
use crate::util::{gather_batch, seeded_rng, shuffled_indices, streams};

/// Feature dimension every evaluation embedding uses.
pub const FEATURE_DIM: usize = 32;

/// Small convolutional encoder used only for evaluation. Fitted as an
/// autoencoder on held-out real data (disjoint from anything a generator
/// trained on), then frozen; every arm of a comparison must score against
/// the identical instance, which the content checksum pins.
#[derive(Debug, Clone)]
pub struct EvalEncoder {
    pub store: ParamStore,
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    conv3: Conv2dLayer,
    image_resolution: usize,
}

/// Per-layer activations plus the pooled embedding for one batch.
pub struct FeatureStack {
    /// Intermediate layer outputs, outermost first.
    pub layers: Vec<Tensor>,
    /// (N, FEATURE_DIM) embedding.
    pub embedding: Tensor,
}

impl EvalEncoder {
    pub fn new(image_resolution: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if image_resolution % 8 != 0 {
            return Err(Error::InvalidArgument(format!(
                "image resolution {image_resolution} must be divisible by 8"
            )));
        }
        let mut store = ParamStore::new();
        let conv1 = Conv2dLayer::new(&mut store, rng, "enc.conv1", 1, 8, 3, 2, 1, true)?;
        let conv2 = Conv2dLayer::new(&mut store, rng, "enc.conv2", 8, 16, 3, 2, 1, true)?;
        let conv3 = Conv2dLayer::new(&mut store, rng, "enc.conv3", 16, FEATURE_DIM, 3, 2, 1, true)?;
        Ok(Self {
            store,
            conv1,
            conv2,
            conv3,
            image_resolution,
        })
    }

    pub fn image_resolution(&self) -> usize {
        self.image_resolution
    }

    fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<(Vec<Var>, Var)> {
        let h1 = self.conv1.forward(tape, bind, x)?;
        let h1 = tape.leaky_relu(h1, LEAKY_SLOPE)?;
        let h2 = self.conv2.forward(tape, bind, h1)?;
        let h2 = tape.leaky_relu(h2, LEAKY_SLOPE)?;
        let h3 = self.conv3.forward(tape, bind, h2)?;
        let h3 = tape.leaky_relu(h3, LEAKY_SLOPE)?;
        let pooled = tape.mean_spatial(h3)?;
        Ok((vec![h1, h2, h3], pooled))
    }

    /// Extracts the feature stack for a batch of images, without gradients.
    pub fn features(&self, images: &Tensor) -> Result<FeatureStack> {
        let mut tape = Tape::new();
        let bind = self.store.bind_frozen(&mut tape);
        let x = tape.leaf(images.clone());
        let (layers, pooled) = self.forward(&mut tape, &bind, x)?;
        Ok(FeatureStack {
            layers: layers.iter().map(|&v| tape.value(v).clone()).collect(),
            embedding: tape.value(pooled).clone(),
        })
    }

    /// Embeddings for a whole image set, parallelized across chunks.
    pub fn embed_set(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let n = images.shape()[0];
        let chunks: Vec<Vec<usize>> = (0..n)
            .step_by(16)
            .map(|s| (s..(s + 16).min(n)).collect())
            .collect();
        let embedded: Vec<Vec<Vec<f64>>> = chunks
            .par_iter()
            .map(|idx| {
                let batch = gather_batch(images, idx);
                let stack = self.features(&batch)?;
                Ok(idx
                    .iter()
                    .enumerate()
                    .map(|(row, _)| {
                        stack.embedding.data()[row * FEATURE_DIM..(row + 1) * FEATURE_DIM].to_vec()
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(embedded.into_iter().flatten().collect())
    }

    /// SHA-256 over parameter bytes; identifies the frozen instance in
    /// reports.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for e in self.store.iter() {
            hasher.update(e.name().as_bytes());
            for v in e.tensor().data() {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Fits the evaluation encoder as an autoencoder on a held-out slice and
/// freezes it.
pub struct EncoderFitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for EncoderFitConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

pub fn fit_eval_encoder(images: &Tensor, cfg: &EncoderFitConfig) -> Result<EvalEncoder> {
    let n = images.shape()[0];
    let res = images.shape()[2];
    let mut rng = seeded_rng(cfg.seed, streams::ENCODER_INIT);
    let mut enc = EvalEncoder::new(res, &mut rng)?;

    // throwaway decoder for the reconstruction objective
    let q = res / 8;
    let mut dec_store = ParamStore::new();
    let fc = DenseLayer::new(
        &mut dec_store,
        &mut rng,
        "dec.fc",
        FEATURE_DIM,
        FEATURE_DIM * q * q,
        true,
    )?;
    let dconv1 = Conv2dLayer::new(&mut dec_store, &mut rng, "dec.conv1", FEATURE_DIM, 16, 3, 1, 1, true)?;
    let dconv2 = Conv2dLayer::new(&mut dec_store, &mut rng, "dec.conv2", 16, 8, 3, 1, 1, true)?;
    let dconv3 = Conv2dLayer::new(&mut dec_store, &mut rng, "dec.conv3", 8, 1, 3, 1, 1, true)?;

    let mut opt_enc = Optimizer::adam(cfg.learning_rate);
    let mut opt_dec = Optimizer::adam(cfg.learning_rate);
    for epoch in 0..cfg.epochs {
        let mut shuffle = seeded_rng(
            cfg.seed,
            streams::SHUFFLE + streams::ENCODER_TRAIN * 0x1_0000 + epoch as u64,
        );
        let order = shuffled_indices(&mut shuffle, n);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = gather_batch(images, chunk);
            let b = chunk.len();
            let mut tape = Tape::new();
            let ebind = enc.store.bind(&mut tape);
            let dbind = dec_store.bind(&mut tape);
            let x = tape.leaf(batch);
            let (_, emb) = enc.forward(&mut tape, &ebind, x)?;
            let h = fc.forward(&mut tape, &dbind, emb)?;
            let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
            let h = tape.reshape(h, &[b, FEATURE_DIM, q, q])?;
            let h = tape.up2(h)?;
            let h = dconv1.forward(&mut tape, &dbind, h)?;
            let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
            let h = tape.up2(h)?;
            let h = dconv2.forward(&mut tape, &dbind, h)?;
            let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
            let h = tape.up2(h)?;
            let h = dconv3.forward(&mut tape, &dbind, h)?;
            let xh = tape.tanh(h)?;
            let loss = tape.mse(xh, x)?;
            tape.backward(loss)?;
            enc.store.export_grads(&tape, &ebind);
            dec_store.export_grads(&tape, &dbind);
            opt_enc.step(&mut enc.store)?;
            opt_dec.step(&mut dec_store)?;
        }
    }
    enc.store.freeze_all();
    Ok(enc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::randn_tensor;

    #[test]
    fn features_have_declared_shapes() {
        let mut rng = seeded_rng(80, streams::ENCODER_INIT);
        let enc = EvalEncoder::new(64, &mut rng).unwrap();
        let imgs = randn_tensor(&mut rng, &[3, 1, 64, 64]);
        let stack = enc.features(&imgs).unwrap();
        assert_eq!(stack.embedding.shape(), &[3, FEATURE_DIM]);
        assert_eq!(stack.layers.len(), 3);
        assert_eq!(stack.layers[0].shape(), &[3, 8, 32, 32]);
        assert_eq!(stack.layers[2].shape(), &[3, 32, 8, 8]);
    }

    #[test]
    fn embed_set_matches_feature_rows() {
        let mut rng = seeded_rng(81, streams::ENCODER_INIT);
        let enc = EvalEncoder::new(64, &mut rng).unwrap();
        let imgs = randn_tensor(&mut rng, &[20, 1, 64, 64]);
        let set = enc.embed_set(&imgs).unwrap();
        assert_eq!(set.len(), 20);
        let single = enc
            .features(&gather_batch(&imgs, &[7]))
            .unwrap()
            .embedding;
        assert_eq!(set[7], single.data());
    }

    #[test]
    fn checksum_tracks_content() {
        let mut rng = seeded_rng(82, streams::ENCODER_INIT);
        let enc = EvalEncoder::new(64, &mut rng).unwrap();
        let sum1 = enc.checksum();
        assert_eq!(sum1, enc.checksum());
        let mut enc2 = enc.clone();
        let id = enc2.store.id("enc.conv1.b").unwrap();
        enc2.store.tensor_mut(id).data_mut()[0] += 1.0;
        assert_ne!(sum1, enc2.checksum());
    }
}

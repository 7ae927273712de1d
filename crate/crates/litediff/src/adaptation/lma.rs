use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{Binding, Conv2dLayer, DenseLayer, ParamStore, LEAKY_SLOPE};

/// Morphology autoencoder: a compact CNN encoder to a fixed-length embedding
/// plus a mirrored decoder. Trained on target-domain images, then frozen; the
/// frozen encoder defines the embedding the morphology penalty compares in.
#[derive(Debug, Clone)]
pub struct LmaModel {
    pub store: ParamStore,
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    fc_enc: DenseLayer,
    fc_dec: DenseLayer,
    dconv1: Conv2dLayer,
    dconv2: Conv2dLayer,
    image_resolution: usize,
    latent_dim: usize,
}

impl LmaModel {
    pub fn new(image_resolution: usize, latent_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if image_resolution % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "image resolution {image_resolution} must be divisible by 4"
            )));
        }
        let q = image_resolution / 4;
        let flat = 32 * q * q;
        let mut store = ParamStore::new();
        let conv1 = Conv2dLayer::new(&mut store, rng, "lma.conv1", 1, 16, 3, 2, 1, true)?;
        let conv2 = Conv2dLayer::new(&mut store, rng, "lma.conv2", 16, 32, 3, 2, 1, true)?;
        let fc_enc = DenseLayer::new(&mut store, rng, "lma.fc_enc", flat, latent_dim, true)?;
        let fc_dec = DenseLayer::new(&mut store, rng, "lma.fc_dec", latent_dim, flat, true)?;
        let dconv1 = Conv2dLayer::new(&mut store, rng, "lma.dconv1", 32, 16, 3, 1, 1, true)?;
        let dconv2 = Conv2dLayer::new(&mut store, rng, "lma.dconv2", 16, 1, 3, 1, 1, true)?;
        Ok(Self {
            store,
            conv1,
            conv2,
            fc_enc,
            fc_dec,
            dconv1,
            dconv2,
            image_resolution,
            latent_dim,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn image_resolution(&self) -> usize {
        self.image_resolution
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let r = self.image_resolution;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != r || shape[3] != r {
            return Err(Error::ShapeMismatch {
                left: shape.to_vec(),
                right: vec![shape.first().copied().unwrap_or(1), 1, r, r],
            });
        }
        Ok(())
    }

    /// Image -> (N, latent_dim) morphology embedding.
    pub fn encode(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        self.check_image(tape.value(x).shape())?;
        let n = tape.value(x).shape()[0];
        let q = self.image_resolution / 4;
        let h = self.conv1.forward(tape, bind, x)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let h = self.conv2.forward(tape, bind, h)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let flat = tape.reshape(h, &[n, 32 * q * q])?;
        self.fc_enc.forward(tape, bind, flat)
    }

    /// Embedding -> image in [-1, 1].
    pub fn decode(&self, tape: &mut Tape, bind: &Binding, z: Var) -> Result<Var> {
        let shape = tape.value(z).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.latent_dim {
            return Err(Error::ShapeMismatch {
                left: shape,
                right: vec![0, self.latent_dim],
            });
        }
        let n = shape[0];
        let q = self.image_resolution / 4;
        let h = self.fc_dec.forward(tape, bind, z)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let h = tape.reshape(h, &[n, 32, q, q])?;
        let h = tape.up2(h)?;
        let h = self.dconv1.forward(tape, bind, h)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let h = tape.up2(h)?;
        let h = self.dconv2.forward(tape, bind, h)?;
        tape.tanh(h)
    }

    pub fn encode_eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = self.store.bind_frozen(&mut tape);
        let vx = tape.leaf(x.clone());
        let z = self.encode(&mut tape, &bind, vx)?;
        Ok(tape.value(z).clone())
    }

    pub fn decode_eval(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = self.store.bind_frozen(&mut tape);
        let vz = tape.leaf(z.clone());
        let x = self.decode(&mut tape, &bind, vz)?;
        Ok(tape.value(x).clone())
    }
}

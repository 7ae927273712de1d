use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{Binding, Conv2dLayer, ParamStore, LEAKY_SLOPE};

/// Deterministic convolutional autoencoder bridging image space
/// (N,1,R,R) and latent space (N,C,R/4,R/4). Frozen after base
/// pretraining; gradients still flow through it so decoded images can steer
/// upstream parameters.
#[derive(Debug, Clone)]
pub struct Vae {
    pub store: ParamStore,
    enc1: Conv2dLayer,
    enc2: Conv2dLayer,
    enc3: Conv2dLayer,
    dec1: Conv2dLayer,
    dec2: Conv2dLayer,
    dec3: Conv2dLayer,
    image_resolution: usize,
    latent_channels: usize,
}

impl Vae {
    pub fn new(image_resolution: usize, latent_channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if image_resolution % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "image resolution {image_resolution} must be divisible by 4"
            )));
        }
        let mut store = ParamStore::new();
        let enc1 = Conv2dLayer::new(&mut store, rng, "vae.enc1", 1, 16, 3, 2, 1, true)?;
        let enc2 = Conv2dLayer::new(&mut store, rng, "vae.enc2", 16, 32, 3, 2, 1, true)?;
        let enc3 = Conv2dLayer::new(&mut store, rng, "vae.enc3", 32, latent_channels, 3, 1, 1, true)?;
        let dec1 = Conv2dLayer::new(&mut store, rng, "vae.dec1", latent_channels, 32, 3, 1, 1, true)?;
        let dec2 = Conv2dLayer::new(&mut store, rng, "vae.dec2", 32, 16, 3, 1, 1, true)?;
        let dec3 = Conv2dLayer::new(&mut store, rng, "vae.dec3", 16, 1, 3, 1, 1, true)?;
        Ok(Self {
            store,
            enc1,
            enc2,
            enc3,
            dec1,
            dec2,
            dec3,
            image_resolution,
            latent_channels,
        })
    }

    pub fn image_resolution(&self) -> usize {
        self.image_resolution
    }

    pub fn latent_resolution(&self) -> usize {
        self.image_resolution / 4
    }

    pub fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    pub fn latent_shape(&self, batch: usize) -> Vec<usize> {
        vec![
            batch,
            self.latent_channels,
            self.latent_resolution(),
            self.latent_resolution(),
        ]
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

    fn check_latent(&self, shape: &[usize]) -> Result<()> {
        let r = self.latent_resolution();
        if shape.len() != 4 || shape[1] != self.latent_channels || shape[2] != r || shape[3] != r {
            return Err(Error::ShapeMismatch {
                left: shape.to_vec(),
                right: vec![
                    shape.first().copied().unwrap_or(1),
                    self.latent_channels,
                    r,
                    r,
                ],
            });
        }
        Ok(())
    }

    pub fn encode(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        self.check_image(tape.value(x).shape())?;
        let h = self.enc1.forward(tape, bind, x)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let h = self.enc2.forward(tape, bind, h)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        self.enc3.forward(tape, bind, h)
    }

    /// Decode squashes through tanh so images stay inside [-1, 1].
    pub fn decode(&self, tape: &mut Tape, bind: &Binding, z: Var) -> Result<Var> {
        self.check_latent(tape.value(z).shape())?;
        let h = self.dec1.forward(tape, bind, z)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let h = tape.up2(h)?;
        let h = self.dec2.forward(tape, bind, h)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let h = tape.up2(h)?;
        let h = self.dec3.forward(tape, bind, h)?;
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

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{
    spectral_conv2d, Binding, Conv2dLayer, DenseLayer, ParamStore, SpectralState, LEAKY_SLOPE,
};

/// Pixel-space real/fake classifier: three spectrally normalized stride-2
/// convolutions, global average pooling and a 1-unit head with a clamped
/// sigmoid. Outputs one probability per image.
#[derive(Debug, Clone)]
pub struct PixelDiscriminator {
    pub store: ParamStore,
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    conv3: Conv2dLayer,
    head: DenseLayer,
    spectral: Vec<SpectralState>,
    image_resolution: usize,
}

impl PixelDiscriminator {
    pub fn new(image_resolution: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if image_resolution % 8 != 0 {
            return Err(Error::InvalidArgument(format!(
                "image resolution {image_resolution} must be divisible by 8"
            )));
        }
        let mut store = ParamStore::new();
        let conv1 = Conv2dLayer::new(&mut store, rng, "disc.conv1", 1, 16, 3, 2, 1, true)?;
        let conv2 = Conv2dLayer::new(&mut store, rng, "disc.conv2", 16, 32, 3, 2, 1, true)?;
        let conv3 = Conv2dLayer::new(&mut store, rng, "disc.conv3", 32, 64, 3, 2, 1, true)?;
        let head = DenseLayer::new(&mut store, rng, "disc.head", 64, 1, true)?;
        let spectral = vec![
            SpectralState::new(rng, 16),
            SpectralState::new(rng, 32),
            SpectralState::new(rng, 64),
        ];
        Ok(Self {
            store,
            conv1,
            conv2,
            conv3,
            head,
            spectral,
            image_resolution,
        })
    }

    pub fn image_resolution(&self) -> usize {
        self.image_resolution
    }

    pub fn spectral_states(&self) -> &[SpectralState] {
        &self.spectral
    }

    pub fn set_spectral_states(&mut self, states: Vec<SpectralState>) {
        self.spectral = states;
    }

    /// (N,1,R,R) -> (N,1) probabilities. Runs one power iteration per
    /// spectral layer, so the call mutates normalization state.
    pub fn forward(&mut self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let r = self.image_resolution;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != r || shape[3] != r {
            let batch = shape.first().copied().unwrap_or(1);
            return Err(Error::ShapeMismatch {
                left: shape,
                right: vec![batch, 1, r, r],
            });
        }
        let h = spectral_conv2d(
            tape,
            &self.store,
            bind,
            x,
            self.conv1.w,
            self.conv1.b,
            &mut self.spectral[0],
            2,
            1,
        )?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let h = spectral_conv2d(
            tape,
            &self.store,
            bind,
            h,
            self.conv2.w,
            self.conv2.b,
            &mut self.spectral[1],
            2,
            1,
        )?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let h = spectral_conv2d(
            tape,
            &self.store,
            bind,
            h,
            self.conv3.w,
            self.conv3.b,
            &mut self.spectral[2],
            2,
            1,
        )?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let pooled = tape.mean_spatial(h)?;
        let logit = self.head.forward(tape, bind, pooled)?;
        tape.sigmoid(logit)
    }

    /// Forward on plain tensors without gradient tracking.
    pub fn forward_eval(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = self.store.bind_frozen(&mut tape);
        let vx = tape.leaf(x.clone());
        let p = self.forward(&mut tape, &bind, vx)?;
        Ok(tape.value(p).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_gradients;
    use crate::util::{randn_tensor, seeded_rng, streams};

    #[test]
    fn output_is_probability_per_image() {
        let mut rng = seeded_rng(60, streams::DISC_INIT);
        let mut disc = PixelDiscriminator::new(64, &mut rng).unwrap();
        let x = randn_tensor(&mut rng, &[3, 1, 64, 64]);
        let p = disc.forward_eval(&x).unwrap();
        assert_eq!(p.shape(), &[3, 1]);
        for v in p.data() {
            assert!(*v > 0.0 && *v < 1.0, "{v}");
        }
    }

    #[test]
    fn deterministic_from_identical_state() {
        let mut rng = seeded_rng(61, streams::DISC_INIT);
        let disc = PixelDiscriminator::new(64, &mut rng).unwrap();
        let x = randn_tensor(&mut rng, &[1, 1, 64, 64]);
        let mut a = disc.clone();
        let mut b = disc;
        let pa = a.forward_eval(&x).unwrap();
        let pb = b.forward_eval(&x).unwrap();
        assert_eq!(pa.data()[0].to_bits(), pb.data()[0].to_bits());
    }

    #[test]
    fn wrong_resolution_rejected() {
        let mut rng = seeded_rng(62, streams::DISC_INIT);
        let mut disc = PixelDiscriminator::new(64, &mut rng).unwrap();
        let x = randn_tensor(&mut rng, &[1, 1, 32, 32]);
        assert!(disc.forward_eval(&x).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = seeded_rng(63, streams::DISC_INIT);
        // Small resolution keeps the finite-difference sweep fast.
        let disc = PixelDiscriminator::new(8, &mut rng).unwrap();
        let x = randn_tensor(&mut rng, &[1, 1, 8, 8]).with_grad();
        // Clone per evaluation so every forward starts from the same
        // power-iteration state.
        let report = check_gradients(&[x], 1e-6, &|tape, vars| {
            let mut d = disc.clone();
            let bind = d.store.bind(tape);
            let p = d.forward(tape, &bind, vars[0])?;
            tape.sum(p)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }
}

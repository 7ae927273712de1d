use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{Binding, Conv2dLayer, DenseLayer, GroupNormLayer, ParamStore, LEAKY_SLOPE};

/// Architecture of the toy denoiser. Blocks are indexed 0..2k: k down
/// blocks, one mid block, k up blocks; this indexing is what hook patterns
/// resolve against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UNetSpec {
    pub down_channels: Vec<usize>,
    pub mid_channels: usize,
    pub latent_channels: usize,
    /// Latent H = W.
    pub base_resolution: usize,
    pub t_embed_dim: usize,
    pub cond_dim: usize,
}

impl Default for UNetSpec {
    fn default() -> Self {
        Self {
            down_channels: vec![16, 32, 64],
            mid_channels: 64,
            latent_channels: 4,
            base_resolution: 16,
            t_embed_dim: 32,
            cond_dim: 8,
        }
    }
}

impl UNetSpec {
    pub fn depth(&self) -> usize {
        self.down_channels.len()
    }

    pub fn block_count(&self) -> usize {
        2 * self.depth() + 1
    }

    /// Output channel count of block `idx`; adapters must match it.
    pub fn block_channels(&self, idx: usize) -> usize {
        let k = self.depth();
        if idx < k {
            self.down_channels[idx]
        } else if idx == k {
            self.mid_channels
        } else {
            self.down_channels[2 * k - idx]
        }
    }

    /// Image-space resolution implied by the 4x VAE reduction.
    pub fn image_resolution(&self) -> usize {
        self.base_resolution * 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.down_channels.is_empty() {
            return Err(Error::InvalidArgument(
                "down_channels must be non-empty".into(),
            ));
        }
        if self.base_resolution % (1 << self.depth()) != 0 {
            return Err(Error::InvalidArgument(format!(
                "base resolution {} not divisible by 2^{}",
                self.base_resolution,
                self.depth()
            )));
        }
        if self.t_embed_dim < 2 || self.t_embed_dim % 2 != 0 {
            return Err(Error::InvalidArgument(
                "t_embed_dim must be even and >= 2".into(),
            ));
        }
        Ok(())
    }
}

/// Per-model conditioning input; the null condition is the zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningVector {
    p: Tensor,
}

impl ConditioningVector {
    pub fn new(p: Tensor, cond_dim: usize) -> Result<Self> {
        if p.shape() != [cond_dim] {
            return Err(Error::ShapeMismatch {
                left: p.shape().to_vec(),
                right: vec![cond_dim],
            });
        }
        Ok(Self { p })
    }

    pub fn null(cond_dim: usize) -> Self {
        Self {
            p: Tensor::zeros(&[cond_dim]),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.p
    }

    /// Replicates the vector across a batch: (N, cond_dim).
    pub fn batch(&self, n: usize) -> Tensor {
        let d = self.p.numel();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(self.p.data());
        }
        Tensor::new(&[n, d], data).expect("batched condition")
    }
}

/// Sinusoidal position features for integer timesteps: (N, dim).
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let tv = t as f64;
        for i in 0..half {
            let exponent = if half > 1 {
                i as f64 / (half - 1) as f64
            } else {
                0.0
            };
            let w = (-(10_000.0f64.ln()) * exponent).exp();
            data.push((tv * w).sin());
        }
        for i in 0..half {
            let exponent = if half > 1 {
                i as f64 / (half - 1) as f64
            } else {
                0.0
            };
            let w = (-(10_000.0f64.ln()) * exponent).exp();
            data.push((tv * w).cos());
        }
    }
    Tensor::new(&[ts.len(), dim], data).expect("embedding shape")
}

/// Residual double-conv block with timestep and condition injection.
#[derive(Debug, Clone)]
pub struct ResBlock {
    conv1: Conv2dLayer,
    gn1: GroupNormLayer,
    conv2: Conv2dLayer,
    gn2: GroupNormLayer,
    shortcut: Option<Conv2dLayer>,
    t_proj: DenseLayer,
    p_proj: DenseLayer,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        t_dim: usize,
        cond_dim: usize,
        trainable: bool,
    ) -> Result<Self> {
        let conv1 = Conv2dLayer::new(store, rng, &format!("{name}.conv1"), in_ch, out_ch, 3, 1, 1, trainable)?;
        let gn1 = GroupNormLayer::new(store, &format!("{name}.gn1"), out_ch, trainable)?;
        let conv2 = Conv2dLayer::new(store, rng, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, trainable)?;
        let gn2 = GroupNormLayer::new(store, &format!("{name}.gn2"), out_ch, trainable)?;
        let shortcut = if in_ch != out_ch {
            Some(Conv2dLayer::new(
                store,
                rng,
                &format!("{name}.shortcut"),
                in_ch,
                out_ch,
                1,
                1,
                0,
                trainable,
            )?)
        } else {
            None
        };
        let t_proj = DenseLayer::new(store, rng, &format!("{name}.t_proj"), t_dim, out_ch, trainable)?;
        let p_proj = DenseLayer::new(store, rng, &format!("{name}.p_proj"), cond_dim, out_ch, trainable)?;
        Ok(Self {
            conv1,
            gn1,
            conv2,
            gn2,
            shortcut,
            t_proj,
            p_proj,
        })
    }

    fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: Var,
        t_feat: Var,
        p_feat: Var,
    ) -> Result<Var> {
        let mut h = self.conv1.forward(tape, bind, x)?;
        h = self.gn1.forward(tape, bind, h)?;
        h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let tb = self.t_proj.forward(tape, bind, t_feat)?;
        h = tape.add_channel_bias(h, tb)?;
        let pb = self.p_proj.forward(tape, bind, p_feat)?;
        h = tape.add_channel_bias(h, pb)?;
        h = self.conv2.forward(tape, bind, h)?;
        h = self.gn2.forward(tape, bind, h)?;
        h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let s = match &self.shortcut {
            Some(conv) => conv.forward(tape, bind, x)?,
            None => x,
        };
        tape.add(h, s)
    }
}

/// Captured per-block activations from one forward pass.
#[derive(Debug, Default)]
pub struct ForwardTrace {
    pub block_outputs: Vec<Tensor>,
    pub adapter_applied: Vec<bool>,
}

/// Knobs for instrumented forwards: block-output interception (how adapters
/// attach), activation tracing, and skip ablation for wiring probes.
pub struct ForwardOptions<'h> {
    /// Called with every block's output in block-index order; returns the
    /// (possibly replaced) activation and whether it changed it.
    pub hook: Option<&'h mut dyn FnMut(&mut Tape, usize, Var) -> Result<(Var, bool)>>,
    /// Zeroes the skip tensor of this down-block index before concatenation.
    pub ablate_skip: Option<usize>,
    pub trace: Option<&'h mut ForwardTrace>,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        Self {
            hook: None,
            ablate_skip: None,
            trace: None,
        }
    }
}

/// The denoiser: k down blocks with 2x pooling, a mid block, k up blocks
/// with nearest upsampling and skip concatenation, and a conv head mapping
/// back to latent channels. Predicts the noise component of its input.
#[derive(Debug, Clone)]
pub struct Unet {
    pub spec: UNetSpec,
    t_dense1: DenseLayer,
    t_dense2: DenseLayer,
    down: Vec<ResBlock>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    head_gn: GroupNormLayer,
    head_conv: Conv2dLayer,
}

impl Unet {
    pub fn new(store: &mut ParamStore, spec: &UNetSpec, rng: &mut ChaCha8Rng, trainable: bool) -> Result<Self> {
        spec.validate()?;
        let t_dim = spec.t_embed_dim;
        let t_dense1 = DenseLayer::new(store, rng, "unet.t_embed.fc1", t_dim, t_dim, trainable)?;
        let t_dense2 = DenseLayer::new(store, rng, "unet.t_embed.fc2", t_dim, t_dim, trainable)?;

        let k = spec.depth();
        let mut down = Vec::with_capacity(k);
        let mut in_ch = spec.latent_channels;
        for (i, &out_ch) in spec.down_channels.iter().enumerate() {
            down.push(ResBlock::new(
                store,
                rng,
                &format!("unet.down{i}"),
                in_ch,
                out_ch,
                t_dim,
                spec.cond_dim,
                trainable,
            )?);
            in_ch = out_ch;
        }
        let mid = ResBlock::new(
            store,
            rng,
            "unet.mid",
            in_ch,
            spec.mid_channels,
            t_dim,
            spec.cond_dim,
            trainable,
        )?;
        let mut up = Vec::with_capacity(k);
        let mut prev = spec.mid_channels;
        for j in 0..k {
            let d = k - 1 - j; // paired down block
            let skip_ch = spec.down_channels[d];
            let out_ch = spec.down_channels[d];
            up.push(ResBlock::new(
                store,
                rng,
                &format!("unet.up{j}"),
                prev + skip_ch,
                out_ch,
                t_dim,
                spec.cond_dim,
                trainable,
            )?);
            prev = out_ch;
        }
        let head_gn = GroupNormLayer::new(store, "unet.head.gn", prev, trainable)?;
        let head_conv = Conv2dLayer::new(
            store,
            rng,
            "unet.head.conv",
            prev,
            spec.latent_channels,
            3,
            1,
            1,
            trainable,
        )?;
        Ok(Self {
            spec: spec.clone(),
            t_dense1,
            t_dense2,
            down,
            mid,
            up,
            head_gn,
            head_conv,
        })
    }

    /// Full forward pass. `ts` carries one timestep per batch element;
    /// `cond` is the (N, cond_dim) conditioning matrix.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        z: Var,
        ts: &[usize],
        cond: &Tensor,
        mut opts: ForwardOptions<'_>,
    ) -> Result<Var> {
        let shape = tape.value(z).shape().to_vec();
        let spec = &self.spec;
        if shape.len() != 4
            || shape[1] != spec.latent_channels
            || shape[2] != spec.base_resolution
            || shape[3] != spec.base_resolution
        {
            return Err(Error::ShapeMismatch {
                left: shape,
                right: vec![
                    ts.len(),
                    spec.latent_channels,
                    spec.base_resolution,
                    spec.base_resolution,
                ],
            });
        }
        let n = shape[0];
        if ts.len() != n || cond.shape() != [n, spec.cond_dim] {
            return Err(Error::InvalidArgument(format!(
                "batch {n} needs {n} timesteps and a ({n}, {}) condition",
                spec.cond_dim
            )));
        }

        let emb = tape.constant(timestep_embedding(ts, spec.t_embed_dim));
        let mut t_feat = self.t_dense1.forward(tape, bind, emb)?;
        t_feat = tape.leaky_relu(t_feat, LEAKY_SLOPE)?;
        t_feat = self.t_dense2.forward(tape, bind, t_feat)?;
        let p_feat = tape.constant(cond.clone());

        let apply_block = |tape: &mut Tape,
                               opts: &mut ForwardOptions<'_>,
                               idx: usize,
                               block: &ResBlock,
                               x: Var|
         -> Result<Var> {
            let mut h = block.forward(tape, bind, x, t_feat, p_feat)?;
            let mut applied = false;
            if let Some(hook) = opts.hook.as_mut() {
                let (new_h, changed) = hook(tape, idx, h)?;
                h = new_h;
                applied = changed;
            }
            if let Some(trace) = opts.trace.as_mut() {
                trace.block_outputs.push(tape.value(h).clone());
                trace.adapter_applied.push(applied);
            }
            Ok(h)
        };

        let k = spec.depth();
        let mut skips = Vec::with_capacity(k);
        let mut x = z;
        for (i, block) in self.down.iter().enumerate() {
            let h = apply_block(tape, &mut opts, i, block, x)?;
            skips.push(h);
            x = tape.down2(h)?;
        }
        x = apply_block(tape, &mut opts, k, &self.mid, x)?;
        for (j, block) in self.up.iter().enumerate() {
            let d = k - 1 - j;
            let mut skip = skips[d];
            if opts.ablate_skip == Some(d) {
                let zeros = Tensor::zeros(tape.value(skip).shape());
                skip = tape.constant(zeros);
            }
            let upsampled = tape.up2(x)?;
            let cat = tape.concat_channels(upsampled, skip)?;
            x = apply_block(tape, &mut opts, k + 1 + j, block, cat)?;
        }
        let h = self.head_gn.forward(tape, bind, x)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        self.head_conv.forward(tape, bind, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{randn_tensor, seeded_rng};

    #[test]
    fn spec_block_indexing() {
        let spec = UNetSpec::default();
        assert_eq!(spec.block_count(), 7);
        let chans: Vec<usize> = (0..7).map(|i| spec.block_channels(i)).collect();
        assert_eq!(chans, vec![16, 32, 64, 64, 64, 32, 16]);
    }

    #[test]
    fn embedding_is_deterministic_and_shaped() {
        let a = timestep_embedding(&[1, 7, 199], 32);
        let b = timestep_embedding(&[1, 7, 199], 32);
        assert_eq!(a.shape(), &[3, 32]);
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_preserves_shape_and_is_deterministic() {
        let spec = UNetSpec {
            down_channels: vec![4, 8],
            mid_channels: 8,
            latent_channels: 2,
            base_resolution: 8,
            t_embed_dim: 8,
            cond_dim: 4,
        };
        let mut rng = seeded_rng(5, 0);
        let mut store = ParamStore::new();
        let unet = Unet::new(&mut store, &spec, &mut rng, true).unwrap();
        let z = randn_tensor(&mut rng, &[2, 2, 8, 8]);
        let cond = ConditioningVector::null(4).batch(2);

        let run = || {
            let mut tape = Tape::new();
            let bind = store.bind_frozen(&mut tape);
            let vz = tape.leaf(z.clone());
            let out = unet
                .forward(&mut tape, &bind, vz, &[3, 9], &cond, ForwardOptions::default())
                .unwrap();
            tape.value(out).clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a.shape(), &[2, 2, 8, 8]);
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn skip_ablation_changes_only_downstream_blocks() {
        let spec = UNetSpec {
            down_channels: vec![4, 8],
            mid_channels: 8,
            latent_channels: 2,
            base_resolution: 8,
            t_embed_dim: 8,
            cond_dim: 4,
        };
        let mut rng = seeded_rng(6, 0);
        let mut store = ParamStore::new();
        let unet = Unet::new(&mut store, &spec, &mut rng, false).unwrap();
        let z = randn_tensor(&mut rng, &[1, 2, 8, 8]);
        let cond = ConditioningVector::null(4).batch(1);

        let run = |ablate: Option<usize>| {
            let mut tape = Tape::new();
            let bind = store.bind_frozen(&mut tape);
            let vz = tape.leaf(z.clone());
            let mut trace = ForwardTrace::default();
            unet.forward(
                &mut tape,
                &bind,
                vz,
                &[5],
                &cond,
                ForwardOptions {
                    hook: None,
                    ablate_skip: ablate,
                    trace: Some(&mut trace),
                },
            )
            .unwrap();
            trace.block_outputs
        };

        let clean = run(None);
        // Ablating down block 1's skip: blocks 0..=2 (down, mid) unchanged,
        // block 3 (first up, consumes skip 1) and beyond change.
        let ablated = run(Some(1));
        for b in 0..=2 {
            assert_eq!(clean[b].data(), ablated[b].data(), "block {b} should not change");
        }
        assert_ne!(clean[3].data(), ablated[3].data(), "paired up block must change");
        assert_ne!(clean[4].data(), ablated[4].data(), "downstream block must change");

        // Ablating down block 0's skip: only the last up block changes.
        let ablated0 = run(Some(0));
        for b in 0..=3 {
            assert_eq!(clean[b].data(), ablated0[b].data(), "block {b} should not change");
        }
        assert_ne!(clean[4].data(), ablated0[4].data());
    }

    #[test]
    fn gradients_flow_to_parameters() {
        let spec = UNetSpec {
            down_channels: vec![3, 6],
            mid_channels: 6,
            latent_channels: 2,
            base_resolution: 4,
            t_embed_dim: 4,
            cond_dim: 2,
        };
        let mut rng = seeded_rng(7, 0);
        let mut store = ParamStore::new();
        let unet = Unet::new(&mut store, &spec, &mut rng, true).unwrap();
        let z = randn_tensor(&mut rng, &[1, 2, 4, 4]);
        let eps = randn_tensor(&mut rng, &[1, 2, 4, 4]);
        let cond = ConditioningVector::null(2).batch(1);

        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let vz = tape.leaf(z);
        let out = unet
            .forward(&mut tape, &bind, vz, &[2], &cond, ForwardOptions::default())
            .unwrap();
        let target = tape.leaf(eps);
        let loss = tape.mse(out, target).unwrap();
        tape.backward(loss).unwrap();
        store.export_grads(&tape, &bind);
        let with_grad = store.iter().filter(|e| e.tensor().grad().is_some()).count();
        assert_eq!(with_grad, store.len(), "every parameter receives a gradient");
    }
}

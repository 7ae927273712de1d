use std::collections::BTreeMap;

use crate::adaptation::adapter::{AdapterActivation, AdapterLayer};
use crate::adaptation::pattern::HookPattern;
use crate::autodiff::{Tape, Tensor, Var};
use crate::diffusion::{ForwardOptions, ForwardTrace, Unet};
use crate::error::{Error, Result};
use crate::layers::{Binding, ParamStore};

/// A frozen base denoiser plus adapter modules intercepting block outputs.
/// Base entries and adapter entries share one store, so "the trainable set"
/// is exactly the adapters.
#[derive(Debug, Clone)]
pub struct HookedUnet {
    pub store: ParamStore,
    pub base: Unet,
    adapters: BTreeMap<usize, AdapterLayer>,
    pattern: Option<HookPattern>,
}

impl HookedUnet {
    /// Wraps a frozen base with no adapters; forwards are bit-identical to
    /// the bare model.
    pub fn bare(store: ParamStore, base: Unet) -> Self {
        Self {
            store,
            base,
            adapters: BTreeMap::new(),
            pattern: None,
        }
    }

    /// Creates zero-initialized adapters at every index the pattern resolves
    /// to. The base must already be fully frozen; attaching twice is an
    /// error.
    pub fn attach_adapters(
        &mut self,
        pattern: &HookPattern,
        activation: AdapterActivation,
    ) -> Result<()> {
        if self.pattern.is_some() {
            return Err(Error::AlreadyAttached);
        }
        if self.store.iter().any(|e| e.trainable()) {
            return Err(Error::InvalidArgument(
                "base must be fully frozen before attaching adapters".into(),
            ));
        }
        for idx in pattern.resolve(&self.base.spec)? {
            let channels = self.base.spec.block_channels(idx);
            let adapter =
                AdapterLayer::new(&mut self.store, &format!("adapter.{idx}"), channels, activation)?;
            self.adapters.insert(idx, adapter);
        }
        self.pattern = Some(pattern.clone());
        Ok(())
    }

    pub fn pattern(&self) -> Option<&HookPattern> {
        self.pattern.as_ref()
    }

    pub fn adapter_indices(&self) -> Vec<usize> {
        self.adapters.keys().copied().collect()
    }

    pub fn adapter_activation(&self) -> Option<AdapterActivation> {
        self.adapters.values().next().map(|a| a.activation)
    }

    /// Adapter share of all parameters: adapter count / (adapter + frozen).
    pub fn trainable_fraction(&self) -> f64 {
        let total = self.store.total_params();
        if total == 0 {
            return 0.0;
        }
        self.store.trainable_params() as f64 / total as f64
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        z: Var,
        ts: &[usize],
        cond: &Tensor,
    ) -> Result<Var> {
        self.forward_traced(tape, bind, z, ts, cond, None, None)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        z: Var,
        ts: &[usize],
        cond: &Tensor,
        ablate_skip: Option<usize>,
        trace: Option<&mut ForwardTrace>,
    ) -> Result<Var> {
        let adapters = &self.adapters;
        let mut hook = |tape: &mut Tape, idx: usize, h: Var| -> Result<(Var, bool)> {
            match adapters.get(&idx) {
                Some(adapter) => Ok((adapter.forward(tape, bind, h)?, true)),
                None => Ok((h, false)),
            }
        };
        self.base.forward(
            tape,
            bind,
            z,
            ts,
            cond,
            ForwardOptions {
                hook: Some(&mut hook),
                ablate_skip,
                trace,
            },
        )
    }

    /// Inference forward on plain tensors: fresh tape, no gradient tracking.
    pub fn forward_eval(&self, z: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = self.store.bind_frozen(&mut tape);
        let vz = tape.leaf(z.clone());
        let ts = vec![t; z.shape()[0]];
        let out = self.forward(&mut tape, &bind, vz, &ts, cond)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptation::pattern::ABLATION_PATTERNS;
    use crate::diffusion::{ConditioningVector, UNetSpec};
    use crate::util::{randn_tensor, seeded_rng, streams};

    fn small_spec() -> UNetSpec {
        UNetSpec {
            down_channels: vec![4, 8],
            mid_channels: 8,
            latent_channels: 2,
            base_resolution: 8,
            t_embed_dim: 8,
            cond_dim: 4,
        }
    }

    fn frozen_base(seed: u64, spec: &UNetSpec) -> (ParamStore, Unet) {
        let mut rng = seeded_rng(seed, streams::UNET_INIT);
        let mut store = ParamStore::new();
        let unet = Unet::new(&mut store, spec, &mut rng, true).unwrap();
        store.freeze_all();
        (store, unet)
    }

    #[test]
    fn attach_twice_is_an_error() {
        let spec = small_spec();
        let (store, unet) = frozen_base(1, &spec);
        let mut hooked = HookedUnet::bare(store, unet);
        hooked
            .attach_adapters(&HookPattern::All, AdapterActivation::LeakyRelu)
            .unwrap();
        assert!(matches!(
            hooked.attach_adapters(&HookPattern::All, AdapterActivation::LeakyRelu),
            Err(Error::AlreadyAttached)
        ));
    }

    #[test]
    fn attach_requires_frozen_base() {
        let spec = small_spec();
        let mut rng = seeded_rng(2, streams::UNET_INIT);
        let mut store = ParamStore::new();
        let unet = Unet::new(&mut store, &spec, &mut rng, true).unwrap();
        let mut hooked = HookedUnet::bare(store, unet);
        assert!(hooked
            .attach_adapters(&HookPattern::All, AdapterActivation::LeakyRelu)
            .is_err());
    }

    #[test]
    fn trainable_set_is_exactly_the_adapters() {
        let spec = small_spec();
        let (store, unet) = frozen_base(3, &spec);
        let mut hooked = HookedUnet::bare(store, unet);
        hooked
            .attach_adapters(&HookPattern::Alternate, AdapterActivation::LeakyRelu)
            .unwrap();
        for e in hooked.store.iter() {
            assert_eq!(
                e.trainable(),
                e.name().starts_with("adapter."),
                "{}",
                e.name()
            );
        }
    }

    #[test]
    fn zero_init_identity_under_every_pattern() {
        let spec = small_spec();
        let mut rng = seeded_rng(4, 0);
        let z = randn_tensor(&mut rng, &[1, 2, 8, 8]);
        let cond = ConditioningVector::null(4).batch(1);

        let (store, unet) = frozen_base(4, &spec);
        let bare = HookedUnet::bare(store, unet);
        let reference = bare.forward_eval(&z, 3, &cond).unwrap();

        for pattern in ABLATION_PATTERNS {
            let (store, unet) = frozen_base(4, &spec);
            let mut hooked = HookedUnet::bare(store, unet);
            hooked
                .attach_adapters(&pattern, AdapterActivation::LeakyRelu)
                .unwrap();
            let out = hooked.forward_eval(&z, 3, &cond).unwrap();
            assert!(
                out.data()
                    .iter()
                    .zip(reference.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits()),
                "pattern {:?} not identity at init",
                pattern.descriptor()
            );
        }
    }

    #[test]
    fn empty_custom_pattern_has_zero_fraction() {
        let spec = small_spec();
        let (store, unet) = frozen_base(5, &spec);
        let mut hooked = HookedUnet::bare(store, unet);
        hooked
            .attach_adapters(
                &HookPattern::Custom(vec![false; 5]),
                AdapterActivation::LeakyRelu,
            )
            .unwrap();
        assert_eq!(hooked.trainable_fraction(), 0.0);
    }

    #[test]
    fn fraction_monotone_in_pattern_subsets() {
        let spec = small_spec();
        let fraction_of = |pattern: &HookPattern| {
            let (store, unet) = frozen_base(6, &spec);
            let mut hooked = HookedUnet::bare(store, unet);
            hooked
                .attach_adapters(pattern, AdapterActivation::LeakyRelu)
                .unwrap();
            hooked.trainable_fraction()
        };
        let patterns: Vec<HookPattern> = ABLATION_PATTERNS.to_vec();
        for a in &patterns {
            for b in &patterns {
                let sa = a.resolve(&spec).unwrap();
                let sb = b.resolve(&spec).unwrap();
                if sa.is_subset(&sb) && sa != sb {
                    assert!(
                        fraction_of(a) < fraction_of(b),
                        "{} should have fewer params than {}",
                        a.descriptor(),
                        b.descriptor()
                    );
                }
            }
        }
    }

    #[test]
    fn skip_up_pattern_fires_only_on_down_and_mid() {
        let spec = small_spec();
        let (store, unet) = frozen_base(7, &spec);
        let mut hooked = HookedUnet::bare(store, unet);
        hooked
            .attach_adapters(&HookPattern::SkipUp, AdapterActivation::LeakyRelu)
            .unwrap();
        let mut rng = seeded_rng(7, 0);
        let z = randn_tensor(&mut rng, &[1, 2, 8, 8]);
        let cond = ConditioningVector::null(4).batch(1);

        let mut tape = Tape::new();
        let bind = hooked.store.bind_frozen(&mut tape);
        let vz = tape.leaf(z);
        let mut trace = ForwardTrace::default();
        hooked
            .forward_traced(&mut tape, &bind, vz, &[2], &cond, None, Some(&mut trace))
            .unwrap();
        // k = 2: blocks 0,1 down; 2 mid; 3,4 up
        assert_eq!(trace.adapter_applied, vec![true, true, true, false, false]);
    }
}

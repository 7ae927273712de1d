//! Parameterized building blocks shared by every model in the crate:
//! the parameter store with freeze semantics, dense/conv/group-norm layers,
//! activations, spectrally normalized convolution, losses and optimizers.

mod nn;
mod optim;
mod spectral;
mod store;

pub use nn::{
    activation, bce_loss, default_groups, mse_loss, Activation, Conv2dLayer, DenseLayer,
    GroupNormLayer, GROUP_NORM_EPS, LEAKY_SLOPE,
};
pub use optim::{clip_global_norm, Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use spectral::{spectral_conv2d, SpectralState, SIGMA_FLOOR};
pub use store::{he_normal, normal, Binding, ParamEntry, ParamId, ParamStore};

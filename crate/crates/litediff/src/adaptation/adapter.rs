use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;
use crate::layers::{Binding, Conv2dLayer, GroupNormLayer, ParamStore, LEAKY_SLOPE};

/// Activation inside the residual adapter. Leaky by default; plain ReLU is
/// available behind a config flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterActivation {
    LeakyRelu,
    Relu,
}

impl AdapterActivation {
    pub fn descriptor(self) -> &'static str {
        match self {
            AdapterActivation::LeakyRelu => "leaky_relu",
            AdapterActivation::Relu => "relu",
        }
    }
}

/// Residual adapter: a 1x1 convolution, group norm and activation added back
/// onto the hooked activation. Zero-initialized so a freshly attached adapter
/// is an exact identity.
#[derive(Debug, Clone)]
pub struct AdapterLayer {
    conv: Conv2dLayer,
    gn: GroupNormLayer,
    pub channels: usize,
    pub activation: AdapterActivation,
}

impl AdapterLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        activation: AdapterActivation,
    ) -> Result<Self> {
        let w = store.register(
            &format!("{name}.conv.w"),
            Tensor::zeros(&[channels, channels, 1, 1]),
            true,
        )?;
        let b = store.register(&format!("{name}.conv.b"), Tensor::zeros(&[channels]), true)?;
        let conv = Conv2dLayer {
            w,
            b,
            stride: 1,
            pad: 0,
        };
        let gn = GroupNormLayer::new(store, &format!("{name}.gn"), channels, true)?;
        Ok(Self {
            conv,
            gn,
            channels,
            activation,
        })
    }

    /// `h + act(GN(Conv1x1(h)))`; shape-preserving.
    pub fn forward(&self, tape: &mut Tape, bind: &Binding, h: Var) -> Result<Var> {
        let c = self.conv.forward(tape, bind, h)?;
        let n = self.gn.forward(tape, bind, c)?;
        let a = match self.activation {
            AdapterActivation::LeakyRelu => tape.leaky_relu(n, LEAKY_SLOPE)?,
            AdapterActivation::Relu => tape.relu(n)?,
        };
        tape.add(h, a)
    }
}

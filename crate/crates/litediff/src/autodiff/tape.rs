use crate::autodiff::kernels::{self, ConvGeom, ConvGrads};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`]. A `Var` is only meaningful on
/// the tape that produced it; the tape id catches cross-tape use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    fn idx(self) -> usize {
        self.index as usize
    }
}

static TAPE_IDS: std::sync::atomic::AtomicU32 = std::sync::atomic::AtomicU32::new(1);

/// Sigmoid outputs are clamped this far away from 0 and 1 so the
/// cross-entropy losses never evaluate ln(0).
pub const SIGMOID_CLAMP: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Down2(Var),
    Up2(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    AddChannelBias(Var, Var),
    AddRowBias(Var, Var),
    MeanSpatial(Var),
    ConcatChannels(Var, Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Bce {
        p: Var,
        target: f64,
    },
    PerSampleAffine {
        x: Var,
        y: Var,
        ax: Vec<f64>,
        ay: Vec<f64>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    /// True when this node can influence some `requires_grad` leaf, i.e. the
    /// backward pass must visit it.
    tracked: bool,
    grad: Option<Vec<f64>>,
}

/// Define-by-run recording of operations; rebuilt for every training step.
///
/// Nodes are appended in execution order, so indices are already a topological
/// order and [`Tape::backward`] is a single reverse sweep. Operations whose
/// inputs are all untracked still evaluate but are skipped by backward, which
/// makes a tape with frozen-only leaves a plain forward interpreter.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: TAPE_IDS.fetch_add(1, std::sync::atomic::Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a leaf. Gradients are produced for it iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let tracked = tensor.requires_grad();
        self.push(Op::Leaf, tensor, tracked)
    }

    /// Leaf that never receives gradients, regardless of the tensor's flag.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.push(Op::Leaf, tensor, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.check_var(v);
        &self.nodes[v.idx()].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.check_var(v);
        self.nodes[v.idx()].grad.as_deref()
    }

    fn check_var(&self, v: Var) {
        assert!(
            v.tape == self.id,
            "Var belongs to tape {} but was used on tape {}",
            v.tape,
            self.id
        );
    }

    fn push(&mut self, op: Op, value: Tensor, tracked: bool) -> Var {
        assert!(self.nodes.len() < u32::MAX as usize, "tape overflow");
        self.nodes.push(Node {
            op,
            value,
            tracked,
            grad: None,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() as u32 - 1,
        }
    }

    fn tracked(&self, v: Var) -> bool {
        self.check_var(v);
        self.nodes[v.idx()].tracked
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.check_var(v);
        self.nodes[v.idx()].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.check_var(v);
        self.nodes[v.idx()].value.data()
    }

    fn check_same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Add(a, b), value, tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Sub(a, b), value, tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Mul(a, b), value, tracked))
    }

    /// Scalar broadcast of addition; general broadcasting is unsupported.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.data(a).iter().map(|x| x + c).collect();
        let value = Tensor::new(self.shape(a), data)?;
        let tracked = self.tracked(a);
        Ok(self.push(Op::AddScalar(a), value, tracked))
    }

    /// Scale by a constant (the only multiplicative broadcast supported).
    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.data(a).iter().map(|x| x * c).collect();
        let value = Tensor::new(self.shape(a), data)?;
        let tracked = self.tracked(a);
        Ok(self.push(Op::MulScalar(a, c), value, tracked))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "matmul expects 2-D tensors, got {sa:?} and {sb:?}"
            )));
        }
        if sa[1] != sb[0] {
            return Err(Error::InnerDimMismatch {
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.data(a), self.data(b), &mut out);
        let value = Tensor::new(&[m, n], out)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Matmul { a, b, m, k, n }, value, tracked))
    }

    // ---- convolution and resampling ----------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "conv2d expects NCHW input and OIHW kernel, got {sx:?} and {sw:?}"
            )));
        }
        if sb.len() != 1 || sb[0] != sw[0] {
            return Err(Error::InvalidArgument(format!(
                "conv2d bias shape {sb:?} must be [{}]",
                sw[0]
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if sx[1] != sw[1] {
            return Err(Error::ChannelMismatch {
                input: sx[1],
                expected: sw[1],
            });
        }
        let (in_h, in_w, k_h, k_w) = (sx[2], sx[3], sw[2], sw[3]);
        if k_h > in_h + 2 * pad || k_w > in_w + 2 * pad {
            return Err(Error::KernelTooLarge {
                kernel: vec![k_h, k_w],
                padded: vec![in_h + 2 * pad, in_w + 2 * pad],
            });
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            in_h,
            in_w,
            out_ch: sw[0],
            k_h,
            k_w,
            stride,
            pad,
            out_h: kernels::conv_out_dim(in_h, k_h, stride, pad),
            out_w: kernels::conv_out_dim(in_w, k_w, stride, pad),
        };
        let out = kernels::conv2d_forward(&geom, self.data(x), self.data(w), self.data(b));
        let value = Tensor::new(&[geom.batch, geom.out_ch, geom.out_h, geom.out_w], out)?;
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        Ok(self.push(Op::Conv2d { x, w, b, geom }, value, tracked))
    }

    /// 2x2 average pooling; spatial dims must be even.
    pub fn down2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "down2 expects NCHW, got {s:?}"
            )));
        }
        if s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "down2 requires even spatial dims, got {}x{}",
                s[2], s[3]
            )));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let out = kernels::avg_pool2(n, c, h, w, self.data(x));
        let value = Tensor::new(&[n, c, h / 2, w / 2], out)?;
        let tracked = self.tracked(x);
        Ok(self.push(Op::Down2(x), value, tracked))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn up2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "up2 expects NCHW, got {s:?}"
            )));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let out = kernels::upsample2(n, c, h, w, self.data(x));
        let value = Tensor::new(&[n, c, h * 2, w * 2], out)?;
        let tracked = self.tracked(x);
        Ok(self.push(Op::Up2(x), value, tracked))
    }

    // ---- normalization and activations -------------------------------------

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "group_norm expects NCHW, got {s:?}"
            )));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "channel count {c} not divisible by {groups} groups"
            )));
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::InvalidArgument(format!(
                    "group_norm {name} shape {:?} must be [{c}]",
                    self.shape(v)
                )));
            }
        }
        let ch_per_group = c / groups;
        let group_elems = ch_per_group * h * w;
        let mut mean = vec![0.0; n * groups];
        let mut inv_std = vec![0.0; n * groups];
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut out = vec![0.0; xd.len()];
        for ni in 0..n {
            for gi in 0..groups {
                let start = ni * c * h * w + gi * ch_per_group * h * w;
                let slice = &xd[start..start + group_elems];
                let mu = slice.iter().sum::<f64>() / group_elems as f64;
                let var = slice.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / group_elems as f64;
                let istd = 1.0 / (var + eps).sqrt();
                mean[ni * groups + gi] = mu;
                inv_std[ni * groups + gi] = istd;
                for ci in 0..ch_per_group {
                    let ch = gi * ch_per_group + ci;
                    let off = start + ci * h * w;
                    for j in 0..h * w {
                        let y = (xd[off + j] - mu) * istd;
                        out[off + j] = gd[ch] * y + bd[ch];
                    }
                }
            }
        }
        let value = Tensor::new(&s, out)?;
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        Ok(self.push(
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                inv_std,
            },
            value,
            tracked,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(self.shape(x), data)?;
        let tracked = self.tracked(x);
        Ok(self.push(Op::Relu(x), value, tracked))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) || slope == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "leaky_relu slope must be in (0,1), got {slope}"
            )));
        }
        let data = self
            .data(x)
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        let tracked = self.tracked(x);
        Ok(self.push(Op::LeakyRelu(x, slope), value, tracked))
    }

    /// Sigmoid with outputs clamped to `[SIGMOID_CLAMP, 1 - SIGMOID_CLAMP]`.
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let data = self
            .data(x)
            .iter()
            .map(|&v| {
                let s = 1.0 / (1.0 + (-v).exp());
                s.clamp(SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)
            })
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        let tracked = self.tracked(x);
        Ok(self.push(Op::Sigmoid(x), value, tracked))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v.tanh()).collect();
        let value = Tensor::new(self.shape(x), data)?;
        let tracked = self.tracked(x);
        Ok(self.push(Op::Tanh(x), value, tracked))
    }

    // ---- broadcast-style additions -----------------------------------------

    /// (N,C,H,W) + per-sample per-channel bias (N,C).
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let sb = self.shape(bias);
        if s.len() != 4 || sb.len() != 2 || sb[0] != s[0] || sb[1] != s[1] {
            return Err(Error::ShapeMismatch {
                left: s,
                right: sb.to_vec(),
            });
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let xd = self.data(x);
        let bd = self.data(bias);
        let mut out = xd.to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let bv = bd[ni * c + ci];
                let off = (ni * c + ci) * hw;
                for v in &mut out[off..off + hw] {
                    *v += bv;
                }
            }
        }
        let value = Tensor::new(&s, out)?;
        let tracked = self.tracked(x) || self.tracked(bias);
        Ok(self.push(Op::AddChannelBias(x, bias), value, tracked))
    }

    /// (N,F) + row bias (F).
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let sb = self.shape(bias);
        if s.len() != 2 || sb.len() != 1 || sb[0] != s[1] {
            return Err(Error::ShapeMismatch {
                left: s,
                right: sb.to_vec(),
            });
        }
        let (n, f) = (s[0], s[1]);
        let xd = self.data(x);
        let bd = self.data(bias);
        let mut out = xd.to_vec();
        for ni in 0..n {
            for fi in 0..f {
                out[ni * f + fi] += bd[fi];
            }
        }
        let value = Tensor::new(&s, out)?;
        let tracked = self.tracked(x) || self.tracked(bias);
        Ok(self.push(Op::AddRowBias(x, bias), value, tracked))
    }

    /// Global average pool: (N,C,H,W) -> (N,C).
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "mean_spatial expects NCHW, got {s:?}"
            )));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let xd = self.data(x);
        let mut out = vec![0.0; n * c];
        for i in 0..n * c {
            out[i] = xd[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64;
        }
        let value = Tensor::new(&[n, c], out)?;
        let tracked = self.tracked(x);
        Ok(self.push(Op::MeanSpatial(x), value, tracked))
    }

    /// Concatenates along the channel axis: (N,C1,H,W) ++ (N,C2,H,W).
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(Error::ShapeMismatch {
                left: sa,
                right: sb,
            });
        }
        let (n, c1, c2, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let ad = self.data(a);
        let bd = self.data(b);
        let mut out = vec![0.0; n * (c1 + c2) * hw];
        for ni in 0..n {
            let dst = &mut out[ni * (c1 + c2) * hw..(ni + 1) * (c1 + c2) * hw];
            dst[..c1 * hw].copy_from_slice(&ad[ni * c1 * hw..(ni + 1) * c1 * hw]);
            dst[c1 * hw..].copy_from_slice(&bd[ni * c2 * hw..(ni + 1) * c2 * hw]);
        }
        let value = Tensor::new(&[n, c1 + c2, sa[2], sa[3]], out)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::ConcatChannels(a, b), value, tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() {
            return Err(Error::ShapeMismatch {
                left: self.shape(x).to_vec(),
                right: shape.to_vec(),
            });
        }
        let value = Tensor::new(shape, self.data(x).to_vec())?;
        let tracked = self.tracked(x);
        Ok(self.push(Op::Reshape(x), value, tracked))
    }

    // ---- reductions and losses ----------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.data(x).iter().sum());
        let tracked = self.tracked(x);
        Ok(self.push(Op::Sum(x), value, tracked))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.data(x).len() as f64;
        let value = Tensor::scalar(self.data(x).iter().sum::<f64>() / n);
        let tracked = self.tracked(x);
        Ok(self.push(Op::Mean(x), value, tracked))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b)?;
        let n = self.data(a).len() as f64;
        let s: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let value = Tensor::scalar(s / n);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Mse(a, b), value, tracked))
    }

    /// Mean binary cross-entropy of probabilities `p` against a scalar target
    /// in [0,1]. Elements of `p` must lie strictly inside (0,1); the clamped
    /// sigmoid guarantees this for classifier outputs.
    pub fn bce(&mut self, p: Var, target: f64) -> Result<Var> {
        if !(0.0..=1.0).contains(&target) {
            return Err(Error::InvalidArgument(format!(
                "bce target must be in [0,1], got {target}"
            )));
        }
        let n = self.data(p).len() as f64;
        let s: f64 = self
            .data(p)
            .iter()
            .map(|&q| -(target * q.ln() + (1.0 - target) * (1.0 - q).ln()))
            .sum();
        let value = Tensor::scalar(s / n);
        let tracked = self.tracked(p);
        Ok(self.push(Op::Bce { p, target }, value, tracked))
    }

    /// Per-sample affine combination over the batch axis:
    /// `out[i] = ax[i] * x[i] + ay[i] * y[i]` for sample i. Carries the
    /// per-sample noise schedule coefficients through a minibatch.
    pub fn per_sample_affine(&mut self, x: Var, y: Var, ax: Vec<f64>, ay: Vec<f64>) -> Result<Var> {
        self.check_same_shape(x, y)?;
        let s = self.shape(x).to_vec();
        let batch = s[0];
        if ax.len() != batch || ay.len() != batch {
            return Err(Error::InvalidArgument(format!(
                "per_sample_affine expects {batch} coefficients, got {} and {}",
                ax.len(),
                ay.len()
            )));
        }
        let per = self.data(x).len() / batch;
        let xd = self.data(x);
        let yd = self.data(y);
        let mut out = vec![0.0; xd.len()];
        for i in 0..batch {
            let (cx, cy) = (ax[i], ay[i]);
            for j in i * per..(i + 1) * per {
                out[j] = cx * xd[j] + cy * yd[j];
            }
        }
        let value = Tensor::new(&s, out)?;
        let tracked = self.tracked(x) || self.tracked(y);
        Ok(self.push(Op::PerSampleAffine { x, y, ax, ay }, value, tracked))
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Every tracked node reachable from the
    /// loss receives a gradient; `requires_grad` leaves keep theirs for
    /// [`Tape::grad`]. Calling backward again restarts from clean buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.tape != self.id {
            return Err(Error::InvalidArgument(
                "loss was not produced through this tape".into(),
            ));
        }
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.idx()].grad = Some(vec![1.0]);
        for i in (0..=loss.idx()).rev() {
            if !self.nodes[i].tracked || self.nodes[i].grad.is_none() {
                continue;
            }
            let grad = std::mem::take(&mut self.nodes[i].grad).expect("grad present");
            self.propagate(i, &grad);
            self.nodes[i].grad = Some(grad);
        }
        // Leaves the loss never reached still promise a (zero) gradient.
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

    fn add_grad(&mut self, v: Var, delta: impl FnOnce(&mut [f64])) {
        if !self.tracked(v) {
            return;
        }
        let len = self.nodes[v.idx()].value.numel();
        let slot = self.nodes[v.idx()]
            .grad
            .get_or_insert_with(|| vec![0.0; len]);
        // The closure accumulates into the slot.
        delta(slot);
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&mut self, idx: usize, g: &[f64]) {
        // Inputs always precede `idx`, so reading values of inputs while
        // mutating their grads is index-disjoint from node `idx`.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.add_grad(a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.add_grad(b, |gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            &Op::Sub(a, b) => {
                self.add_grad(a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.add_grad(b, |gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            &Op::Mul(a, b) => {
                let bd = self.data(b).to_vec();
                self.add_grad(a, |ga| {
                    for ((x, y), z) in ga.iter_mut().zip(g).zip(&bd) {
                        *x += y * z;
                    }
                });
                let ad = self.data(a).to_vec();
                self.add_grad(b, |gb| {
                    for ((x, y), z) in gb.iter_mut().zip(g).zip(&ad) {
                        *x += y * z;
                    }
                });
            }
            &Op::AddScalar(a) => {
                self.add_grad(a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            &Op::MulScalar(a, c) => {
                self.add_grad(a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y * c;
                    }
                });
            }
            &Op::Matmul { a, b, m, k, n } => {
                if self.tracked(a) {
                    // dA (m x k) += g (m x n) . B^T (n x k)
                    let bt = kernels::transpose(self.data(b), k, n);
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, &bt, &mut da);
                    self.add_grad(a, |ga| {
                        for (x, y) in ga.iter_mut().zip(&da) {
                            *x += y;
                        }
                    });
                }
                if self.tracked(b) {
                    // dB (k x n) += A^T (k x m) . g (m x n)
                    let at = kernels::transpose(self.data(a), m, k);
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, &at, g, &mut db);
                    self.add_grad(b, |gb| {
                        for (x, y) in gb.iter_mut().zip(&db) {
                            *x += y;
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (x, w, b, geom) = (*x, *w, *b, *geom);
                let need_x = self.tracked(x);
                let need_w = self.tracked(w);
                let need_b = self.tracked(b);
                let mut dx = need_x.then(|| vec![0.0; self.data(x).len()]);
                let mut dw = need_w.then(|| vec![0.0; self.data(w).len()]);
                let mut db = need_b.then(|| vec![0.0; self.data(b).len()]);
                kernels::conv2d_backward(
                    &geom,
                    self.data(x),
                    self.data(w),
                    g,
                    ConvGrads {
                        d_input: dx.as_deref_mut(),
                        d_weight: dw.as_deref_mut(),
                        d_bias: db.as_deref_mut(),
                    },
                );
                if let Some(dx) = dx {
                    self.add_grad(x, |gx| {
                        for (a, b) in gx.iter_mut().zip(&dx) {
                            *a += b;
                        }
                    });
                }
                if let Some(dw) = dw {
                    self.add_grad(w, |gw| {
                        for (a, b) in gw.iter_mut().zip(&dw) {
                            *a += b;
                        }
                    });
                }
                if let Some(db) = db {
                    self.add_grad(b, |gb| {
                        for (a, b) in gb.iter_mut().zip(&db) {
                            *a += b;
                        }
                    });
                }
            }
            &Op::Down2(x) => {
                let s = self.shape(x).to_vec();
                let mut dx = vec![0.0; self.data(x).len()];
                kernels::avg_pool2_backward(s[0], s[1], s[2], s[3], g, &mut dx);
                self.add_grad(x, |gx| {
                    for (a, b) in gx.iter_mut().zip(&dx) {
                        *a += b;
                    }
                });
            }
            &Op::Up2(x) => {
                let s = self.shape(x).to_vec();
                let mut dx = vec![0.0; self.data(x).len()];
                kernels::upsample2_backward(s[0], s[1], s[2], s[3], g, &mut dx);
                self.add_grad(x, |gx| {
                    for (a, b) in gx.iter_mut().zip(&dx) {
                        *a += b;
                    }
                });
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                inv_std,
            } => {
                let (x, gamma, beta, groups) = (*x, *gamma, *beta, *groups);
                let mean = mean.clone();
                let inv_std = inv_std.clone();
                let s = self.shape(x).to_vec();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let ch_per_group = c / groups;
                let group_elems = ch_per_group * h * w;
                let xd = self.data(x).to_vec();
                let gd = self.data(gamma).to_vec();

                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; xd.len()];
                let need_x = self.tracked(x);
                for ni in 0..n {
                    for gi in 0..groups {
                        let start = ni * c * h * w + gi * ch_per_group * h * w;
                        let mu = mean[ni * groups + gi];
                        let istd = inv_std[ni * groups + gi];
                        let mut sum_gy = 0.0;
                        let mut sum_gy_y = 0.0;
                        for ci in 0..ch_per_group {
                            let ch = gi * ch_per_group + ci;
                            let off = start + ci * h * w;
                            for j in 0..h * w {
                                let y = (xd[off + j] - mu) * istd;
                                let gout = g[off + j];
                                dgamma[ch] += gout * y;
                                dbeta[ch] += gout;
                                let gy = gout * gd[ch];
                                sum_gy += gy;
                                sum_gy_y += gy * y;
                            }
                        }
                        if need_x {
                            let m = group_elems as f64;
                            for ci in 0..ch_per_group {
                                let ch = gi * ch_per_group + ci;
                                let off = start + ci * h * w;
                                for j in 0..h * w {
                                    let y = (xd[off + j] - mu) * istd;
                                    let gy = g[off + j] * gd[ch];
                                    dx[off + j] = istd * (gy - sum_gy / m - y * sum_gy_y / m);
                                }
                            }
                        }
                    }
                }
                if need_x {
                    self.add_grad(x, |gx| {
                        for (a, b) in gx.iter_mut().zip(&dx) {
                            *a += b;
                        }
                    });
                }
                self.add_grad(gamma, |gg| {
                    for (a, b) in gg.iter_mut().zip(&dgamma) {
                        *a += b;
                    }
                });
                self.add_grad(beta, |gb| {
                    for (a, b) in gb.iter_mut().zip(&dbeta) {
                        *a += b;
                    }
                });
            }
            &Op::Relu(x) => {
                let xd = self.data(x).to_vec();
                self.add_grad(x, |gx| {
                    for ((a, b), v) in gx.iter_mut().zip(g).zip(&xd) {
                        if *v > 0.0 {
                            *a += b;
                        }
                    }
                });
            }
            &Op::LeakyRelu(x, slope) => {
                let xd = self.data(x).to_vec();
                self.add_grad(x, |gx| {
                    for ((a, b), v) in gx.iter_mut().zip(g).zip(&xd) {
                        *a += if *v >= 0.0 { *b } else { slope * b };
                    }
                });
            }
            &Op::Sigmoid(x) => {
                let yd = self.nodes[idx].value.data().to_vec();
                self.add_grad(x, |gx| {
                    for ((a, b), y) in gx.iter_mut().zip(g).zip(&yd) {
                        *a += b * y * (1.0 - y);
                    }
                });
            }
            &Op::Tanh(x) => {
                let yd = self.nodes[idx].value.data().to_vec();
                self.add_grad(x, |gx| {
                    for ((a, b), y) in gx.iter_mut().zip(g).zip(&yd) {
                        *a += b * (1.0 - y * y);
                    }
                });
            }
            &Op::AddChannelBias(x, bias) => {
                let s = self.shape(x).to_vec();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                self.add_grad(x, |gx| {
                    for (a, b) in gx.iter_mut().zip(g) {
                        *a += b;
                    }
                });
                self.add_grad(bias, |gb| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * hw;
                            gb[ni * c + ci] += g[off..off + hw].iter().sum::<f64>();
                        }
                    }
                });
            }
            &Op::AddRowBias(x, bias) => {
                let s = self.shape(x).to_vec();
                let (n, f) = (s[0], s[1]);
                self.add_grad(x, |gx| {
                    for (a, b) in gx.iter_mut().zip(g) {
                        *a += b;
                    }
                });
                self.add_grad(bias, |gb| {
                    for ni in 0..n {
                        for fi in 0..f {
                            gb[fi] += g[ni * f + fi];
                        }
                    }
                });
            }
            &Op::MeanSpatial(x) => {
                let s = self.shape(x).to_vec();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                self.add_grad(x, |gx| {
                    for i in 0..n * c {
                        let gv = g[i] / hw as f64;
                        for v in &mut gx[i * hw..(i + 1) * hw] {
                            *v += gv;
                        }
                    }
                });
            }
            &Op::ConcatChannels(a, b) => {
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let (n, c1, c2, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                self.add_grad(a, |ga| {
                    for ni in 0..n {
                        let src = &g[ni * (c1 + c2) * hw..ni * (c1 + c2) * hw + c1 * hw];
                        for (x, y) in ga[ni * c1 * hw..(ni + 1) * c1 * hw].iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                });
                self.add_grad(b, |gb| {
                    for ni in 0..n {
                        let src = &g[ni * (c1 + c2) * hw + c1 * hw..(ni + 1) * (c1 + c2) * hw];
                        for (x, y) in gb[ni * c2 * hw..(ni + 1) * c2 * hw].iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                });
            }
            &Op::Reshape(x) => {
                self.add_grad(x, |gx| {
                    for (a, b) in gx.iter_mut().zip(g) {
                        *a += b;
                    }
                });
            }
            &Op::Sum(x) => {
                let gv = g[0];
                self.add_grad(x, |gx| {
                    for a in gx.iter_mut() {
                        *a += gv;
                    }
                });
            }
            &Op::Mean(x) => {
                let n = self.data(x).len() as f64;
                let gv = g[0] / n;
                self.add_grad(x, |gx| {
                    for a in gx.iter_mut() {
                        *a += gv;
                    }
                });
            }
            &Op::Mse(a, b) => {
                let n = self.data(a).len() as f64;
                let diff: Vec<f64> = self
                    .data(a)
                    .iter()
                    .zip(self.data(b))
                    .map(|(x, y)| 2.0 * (x - y) / n)
                    .collect();
                let gv = g[0];
                self.add_grad(a, |ga| {
                    for (x, d) in ga.iter_mut().zip(&diff) {
                        *x += gv * d;
                    }
                });
                self.add_grad(b, |gb| {
                    for (x, d) in gb.iter_mut().zip(&diff) {
                        *x -= gv * d;
                    }
                });
            }
            &Op::Bce { p, target } => {
                let n = self.data(p).len() as f64;
                let pd = self.data(p).to_vec();
                let gv = g[0];
                self.add_grad(p, |gp| {
                    for (x, q) in gp.iter_mut().zip(&pd) {
                        *x += gv * (-(target / q) + (1.0 - target) / (1.0 - q)) / n;
                    }
                });
            }
            Op::PerSampleAffine { x, y, ax, ay } => {
                let (x, y) = (*x, *y);
                let ax = ax.clone();
                let ay = ay.clone();
                let batch = ax.len();
                let per = g.len() / batch;
                self.add_grad(x, |gx| {
                    for i in 0..batch {
                        let c = ax[i];
                        for j in i * per..(i + 1) * per {
                            gx[j] += c * g[j];
                        }
                    }
                });
                self.add_grad(y, |gy| {
                    for i in 0..batch {
                        let c = ay[i];
                        for j in i * per..(i + 1) * per {
                            gy[j] += c * g[j];
                        }
                    }
                });
            }
        }
    }
}

//! Flat-slice numeric kernels behind the tape operations.
//!
//! Everything is row-major f64 with a fixed summation order, so results are
//! bit-reproducible run to run. The GEMM is the saxpy formulation (stream a
//! row of B scaled into a row of C), which the compiler vectorizes well; all
//! convolution passes are expressed through it via im2col.

/// C (m x n) += A (m x k) . B (k x n)
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Dense transpose of an r x c matrix.
pub fn transpose(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = src[i * cols + j];
        }
    }
    out
}

/// Output spatial size of a convolution/pool along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Geometry of one conv2d application, shared by forward and backward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.in_ch * self.k_h * self.k_w
    }
    pub fn out_spatial(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one sample (C,H,W) into a (C*kH*kW) x (outH*outW) matrix.
pub fn im2col(g: &ConvGeom, input: &[f64], col: &mut [f64]) {
    debug_assert_eq!(input.len(), g.in_ch * g.in_h * g.in_w);
    debug_assert_eq!(col.len(), g.patch_len() * g.out_spatial());
    let osp = g.out_spatial();
    col.fill(0.0);
    for ci in 0..g.in_ch {
        let plane = &input[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for kh in 0..g.k_h {
            for kw in 0..g.k_w {
                let row = ((ci * g.k_h + kh) * g.k_w + kw) * osp;
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        continue;
                    }
                    let ih = ih as usize;
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                        if iw < 0 || iw >= g.in_w as isize {
                            continue;
                        }
                        col[row + oh * g.out_w + ow] = plane[ih * g.in_w + iw as usize];
                    }
                }
            }
        }
    }
}

/// Scatter-adds a (C*kH*kW) x (outH*outW) column matrix back onto one input
/// sample; the adjoint of [`im2col`].
pub fn col2im(g: &ConvGeom, col: &[f64], input_grad: &mut [f64]) {
    let osp = g.out_spatial();
    for ci in 0..g.in_ch {
        let plane = &mut input_grad[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for kh in 0..g.k_h {
            for kw in 0..g.k_w {
                let row = ((ci * g.k_h + kh) * g.k_w + kw) * osp;
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        continue;
                    }
                    let ih = ih as usize;
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                        if iw < 0 || iw >= g.in_w as isize {
                            continue;
                        }
                        plane[ih * g.in_w + iw as usize] += col[row + oh * g.out_w + ow];
                    }
                }
            }
        }
    }
}

/// Forward convolution over a batch: output (N,O,outH,outW).
pub fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let osp = g.out_spatial();
    let patch = g.patch_len();
    let mut out = vec![0.0; g.batch * g.out_ch * osp];
    let mut col = vec![0.0; patch * osp];
    let in_stride = g.in_ch * g.in_h * g.in_w;
    let out_stride = g.out_ch * osp;
    for n in 0..g.batch {
        im2col(g, &input[n * in_stride..(n + 1) * in_stride], &mut col);
        let dst = &mut out[n * out_stride..(n + 1) * out_stride];
        gemm(g.out_ch, patch, osp, weight, &col, dst);
        for o in 0..g.out_ch {
            let bv = bias[o];
            for v in &mut dst[o * osp..(o + 1) * osp] {
                *v += bv;
            }
        }
    }
    out
}

/// Backward convolution. Each gradient output is optional so frozen weights
/// and untracked inputs cost nothing.
pub struct ConvGrads<'a> {
    pub d_input: Option<&'a mut [f64]>,
    pub d_weight: Option<&'a mut [f64]>,
    pub d_bias: Option<&'a mut [f64]>,
}

pub fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grads: ConvGrads<'_>,
) {
    let osp = g.out_spatial();
    let patch = g.patch_len();
    let in_stride = g.in_ch * g.in_h * g.in_w;
    let out_stride = g.out_ch * osp;
    let ConvGrads {
        mut d_input,
        mut d_weight,
        mut d_bias,
    } = grads;

    let w_t = d_input
        .is_some()
        .then(|| transpose(weight, g.out_ch, patch));
    let mut col = vec![0.0; patch * osp];
    let mut col_grad = vec![0.0; patch * osp];

    for n in 0..g.batch {
        let go = &grad_out[n * out_stride..(n + 1) * out_stride];

        if let Some(db) = d_bias.as_deref_mut() {
            for o in 0..g.out_ch {
                db[o] += go[o * osp..(o + 1) * osp].iter().sum::<f64>();
            }
        }

        if let Some(dw) = d_weight.as_deref_mut() {
            im2col(g, &input[n * in_stride..(n + 1) * in_stride], &mut col);
            // dW (O x patch) += go (O x osp) . col^T (osp x patch)
            let col_t = transpose(&col, patch, osp);
            gemm(g.out_ch, osp, patch, go, &col_t, dw);
        }

        if let Some(dx) = d_input.as_deref_mut() {
            // col_grad (patch x osp) = W^T (patch x O) . go (O x osp)
            col_grad.fill(0.0);
            gemm(
                patch,
                g.out_ch,
                osp,
                w_t.as_deref().expect("transposed weight"),
                go,
                &mut col_grad,
            );
            col2im(g, &col_grad, &mut dx[n * in_stride..(n + 1) * in_stride]);
        }
    }
}

/// 2x2 average pooling over (N,C,H,W); H and W must be even.
pub fn avg_pool2(batch: usize, ch: usize, h: usize, w: usize, input: &[f64]) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; batch * ch * oh * ow];
    for nc in 0..batch * ch {
        let src = &input[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let base = 2 * y * w + 2 * x;
                dst[y * ow + x] = 0.25 * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(batch: usize, ch: usize, h: usize, w: usize, grad_out: &[f64], d_input: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for nc in 0..batch * ch {
        let go = &grad_out[nc * oh * ow..(nc + 1) * oh * ow];
        let dx = &mut d_input[nc * h * w..(nc + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let g = 0.25 * go[y * ow + x];
                let base = 2 * y * w + 2 * x;
                dx[base] += g;
                dx[base + 1] += g;
                dx[base + w] += g;
                dx[base + w + 1] += g;
            }
        }
    }
}

/// Nearest-neighbour 2x upsampling over (N,C,H,W).
pub fn upsample2(batch: usize, ch: usize, h: usize, w: usize, input: &[f64]) -> Vec<f64> {
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![0.0; batch * ch * oh * ow];
    for nc in 0..batch * ch {
        let src = &input[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
        for y in 0..h {
            for x in 0..w {
                let v = src[y * w + x];
                let base = 2 * y * ow + 2 * x;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + ow] = v;
                dst[base + ow + 1] = v;
            }
        }
    }
    out
}

pub fn upsample2_backward(batch: usize, ch: usize, h: usize, w: usize, grad_out: &[f64], d_input: &mut [f64]) {
    let (oh, ow) = (h * 2, w * 2);
    debug_assert_eq!(grad_out.len(), batch * ch * oh * ow);
    for nc in 0..batch * ch {
        let go = &grad_out[nc * oh * ow..(nc + 1) * oh * ow];
        let dx = &mut d_input[nc * h * w..(nc + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let base = 2 * y * ow + 2 * x;
                dx[y * w + x] += go[base] + go[base + 1] + go[base + ow] + go[base + ow + 1];
            }
        }
    }
}

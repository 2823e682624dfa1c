//! The fixed layer catalog: shape rules, initialization, and analytic
//! forward/backward kernels over batched tensors.

use serde::{Deserialize, Serialize};

use super::gemm::{gemm, Mat};
use super::rng::RngStream;
use super::tensor::{Shape3, Tensor};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Fully connected over the flattened `C·H·W` input; output is `out×1×1`.
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    LeakyRelu {
        slope: f64,
    },
    Relu,
    Sigmoid,
    BatchNorm {
        channels: usize,
    },
    NearestUpsample {
        factor: usize,
    },
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::LeakyRelu { .. } => "leaky_relu",
            LayerSpec::Relu => "relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::NearestUpsample { .. } => "nearest_upsample",
        }
    }

    /// Output shape for a given input shape, or a description of why the
    /// layer cannot accept it.
    pub fn output_shape(&self, input: Shape3) -> Result<Shape3, String> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                if input.numel() != inputs {
                    return Err(format!(
                        "dense expects {inputs} flattened inputs, got {input}"
                    ));
                }
                if outputs == 0 {
                    return Err("dense needs at least one output".into());
                }
                Ok(Shape3::new(outputs, 1, 1))
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if kernel % 2 == 0 {
                    return Err(format!("conv2d kernel must be odd, got {kernel}"));
                }
                if stride == 0 {
                    return Err("conv2d stride must be at least 1".into());
                }
                if input.c != in_channels {
                    return Err(format!(
                        "conv2d expects {in_channels} input channels, got {}",
                        input.c
                    ));
                }
                if out_channels == 0 {
                    return Err("conv2d needs at least one output channel".into());
                }
                let ph = input.h + 2 * padding;
                let pw = input.w + 2 * padding;
                if ph < kernel || pw < kernel {
                    return Err(format!("input {input} smaller than kernel {kernel}"));
                }
                Ok(Shape3::new(
                    out_channels,
                    (ph - kernel) / stride + 1,
                    (pw - kernel) / stride + 1,
                ))
            }
            LayerSpec::LeakyRelu { slope } => {
                if !slope.is_finite() {
                    return Err("leaky_relu slope must be finite".into());
                }
                Ok(input)
            }
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(input),
            LayerSpec::BatchNorm { channels } => {
                if input.c != channels {
                    return Err(format!(
                        "batch_norm over {channels} channels, got {}",
                        input.c
                    ));
                }
                Ok(input)
            }
            LayerSpec::NearestUpsample { factor } => {
                if factor == 0 {
                    return Err("upsample factor must be at least 1".into());
                }
                Ok(Shape3::new(input.c, input.h * factor, input.w * factor))
            }
        }
    }

    /// Parameter blocks `(suffix, values, learnable)` for this layer.
    pub(crate) fn init_params(&self, rng: &mut RngStream) -> Vec<(&'static str, Vec<f64>, bool)> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                let bound = (6.0 / (inputs + outputs) as f64).sqrt();
                let w = (0..inputs * outputs)
                    .map(|_| rng.uniform_range(-bound, bound))
                    .collect();
                vec![("weight", w, true), ("bias", vec![0.0; outputs], true)]
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let kk = kernel * kernel;
                let bound = (6.0 / ((in_channels + out_channels) * kk) as f64).sqrt();
                let w = (0..out_channels * in_channels * kk)
                    .map(|_| rng.uniform_range(-bound, bound))
                    .collect();
                vec![("weight", w, true), ("bias", vec![0.0; out_channels], true)]
            }
            LayerSpec::BatchNorm { channels } => vec![
                ("gamma", vec![1.0; channels], true),
                ("beta", vec![0.0; channels], true),
                ("running_mean", vec![0.0; channels], false),
                ("running_var", vec![1.0; channels], false),
            ],
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(spec: &LayerSpec, input: Shape3, output: Shape3) -> Self {
        match *spec {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => ConvGeom {
                cin: in_channels,
                cout: out_channels,
                k: kernel,
                stride,
                pad: padding,
                h: input.h,
                w: input.w,
                ho: output.h,
                wo: output.w,
            },
            _ => unreachable!("ConvGeom for non-conv layer"),
        }
    }

    fn ckk(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn hwo(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let hwo = g.hwo();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hwo..(row + 1) * hwo];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let hwo = g.hwo();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * hwo..(row + 1) * hwo];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward(x: &Tensor, weight: &[f64], bias: &[f64], g: &ConvGeom) -> Tensor {
    let n = x.batch();
    let mut out = Tensor::zeros(n, Shape3::new(g.cout, g.ho, g.wo));
    let hwo = g.hwo();
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.ckk() * hwo]
    };
    for i in 0..n {
        let xs = x.sample(i);
        let src: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        let o = out.sample_mut(i);
        gemm(
            Mat::new(weight, g.cout, g.ckk()),
            Mat::new(src, g.ckk(), hwo),
            o,
            0.0,
        );
        for co in 0..g.cout {
            let b = bias[co];
            for v in &mut o[co * hwo..(co + 1) * hwo] {
                *v += b;
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients (when given) and returns the input
/// gradient (when requested).
pub(crate) fn conv_backward(
    x: &Tensor,
    dout: &Tensor,
    weight: &[f64],
    g: &ConvGeom,
    param_grads: Option<(&mut [f64], &mut [f64])>,
    want_input: bool,
) -> Option<Tensor> {
    let n = x.batch();
    let hwo = g.hwo();
    let mut dx = want_input.then(|| Tensor::zeros(n, x.shape()));
    let mut cols = vec![0.0; g.ckk() * hwo];
    let mut dcols = if want_input {
        vec![0.0; g.ckk() * hwo]
    } else {
        Vec::new()
    };
    let mut param_grads = param_grads;
    for i in 0..n {
        let xs = x.sample(i);
        let dy = dout.sample(i);
        if let Some((dw, db)) = param_grads.as_mut() {
            let src: &[f64] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            gemm(
                Mat::new(dy, g.cout, hwo),
                Mat::new(src, g.ckk(), hwo).t(),
                dw,
                1.0,
            );
            for co in 0..g.cout {
                db[co] += dy[co * hwo..(co + 1) * hwo].iter().sum::<f64>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = dx.sample_mut(i);
            if g.is_pointwise() {
                gemm(
                    Mat::new(weight, g.cout, g.ckk()).t(),
                    Mat::new(dy, g.cout, hwo),
                    dxs,
                    1.0,
                );
            } else {
                gemm(
                    Mat::new(weight, g.cout, g.ckk()).t(),
                    Mat::new(dy, g.cout, hwo),
                    &mut dcols,
                    0.0,
                );
                col2im(&dcols, g, dxs);
            }
        }
    }
    dx
}

pub(crate) fn dense_forward(
    x: &Tensor,
    weight: &[f64],
    bias: &[f64],
    inputs: usize,
    outputs: usize,
) -> Tensor {
    let n = x.batch();
    let mut out = Tensor::zeros(n, Shape3::new(outputs, 1, 1));
    gemm(
        Mat::new(x.data(), n, inputs),
        Mat::new(weight, outputs, inputs).t(),
        out.data_mut(),
        0.0,
    );
    for i in 0..n {
        for (o, b) in out.sample_mut(i).iter_mut().zip(bias) {
            *o += b;
        }
    }
    out
}

pub(crate) fn dense_backward(
    x: &Tensor,
    dout: &Tensor,
    weight: &[f64],
    inputs: usize,
    outputs: usize,
    param_grads: Option<(&mut [f64], &mut [f64])>,
    want_input: bool,
) -> Option<Tensor> {
    let n = x.batch();
    if let Some((dw, db)) = param_grads {
        gemm(
            Mat::new(dout.data(), n, outputs).t(),
            Mat::new(x.data(), n, inputs),
            dw,
            1.0,
        );
        for i in 0..n {
            for (d, g) in db.iter_mut().zip(dout.sample(i)) {
                *d += g;
            }
        }
    }
    want_input.then(|| {
        let mut dx = Tensor::zeros(n, x.shape());
        gemm(
            Mat::new(dout.data(), n, outputs),
            Mat::new(weight, outputs, inputs),
            dx.data_mut(),
            0.0,
        );
        dx
    })
}

/// Batch statistics kept for the backward pass in training mode.
#[derive(Clone, Debug)]
pub(crate) struct BnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub training: bool,
}

pub(crate) fn bn_forward(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    training: bool,
) -> (Tensor, BnCache) {
    let n = x.batch();
    let s = x.shape();
    let hw = s.h * s.w;
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    if training {
        for c in 0..s.c {
            let mut acc = 0.0;
            for i in 0..n {
                acc += x.sample(i)[c * hw..(c + 1) * hw].iter().sum::<f64>();
            }
            mean[c] = acc / m;
            let mut acc2 = 0.0;
            for i in 0..n {
                for v in &x.sample(i)[c * hw..(c + 1) * hw] {
                    acc2 += (v - mean[c]) * (v - mean[c]);
                }
            }
            var[c] = acc2 / m;
        }
    } else {
        mean.copy_from_slice(running_mean);
        var.copy_from_slice(running_var);
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; x.data().len()];
    let mut out = Tensor::zeros(n, s);
    for i in 0..n {
        let xs = x.sample(i);
        let base = i * s.numel();
        let os = out.sample_mut(i);
        for c in 0..s.c {
            for j in c * hw..(c + 1) * hw {
                let h = (xs[j] - mean[c]) * inv_std[c];
                xhat[base + j] = h;
                os[j] = gamma[c] * h + beta[c];
            }
        }
    }
    (
        out,
        BnCache {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
            training,
        },
    )
}

pub(crate) fn bn_backward(
    dout: &Tensor,
    cache: &BnCache,
    gamma: &[f64],
    param_grads: Option<(&mut [f64], &mut [f64])>,
    want_input: bool,
) -> Option<Tensor> {
    let n = dout.batch();
    let s = dout.shape();
    let hw = s.h * s.w;
    let m = (n * hw) as f64;
    let mut sum_dy = vec![0.0; s.c];
    let mut sum_dy_xhat = vec![0.0; s.c];
    for i in 0..n {
        let dy = dout.sample(i);
        let base = i * s.numel();
        for c in 0..s.c {
            for j in c * hw..(c + 1) * hw {
                sum_dy[c] += dy[j];
                sum_dy_xhat[c] += dy[j] * cache.xhat[base + j];
            }
        }
    }
    if let Some((dgamma, dbeta)) = param_grads {
        for c in 0..s.c {
            dgamma[c] += sum_dy_xhat[c];
            dbeta[c] += sum_dy[c];
        }
    }
    want_input.then(|| {
        let mut dx = Tensor::zeros(n, s);
        for i in 0..n {
            let dy = dout.sample(i);
            let base = i * s.numel();
            let dxs = dx.sample_mut(i);
            for c in 0..s.c {
                let k = gamma[c] * cache.inv_std[c];
                for j in c * hw..(c + 1) * hw {
                    dxs[j] = if cache.training {
                        k * (dy[j] - sum_dy[c] / m - cache.xhat[base + j] * sum_dy_xhat[c] / m)
                    } else {
                        k * dy[j]
                    };
                }
            }
        }
        dx
    })
}

pub(crate) fn upsample_forward(x: &Tensor, factor: usize) -> Tensor {
    let s = x.shape();
    let os = Shape3::new(s.c, s.h * factor, s.w * factor);
    let mut out = Tensor::zeros(x.batch(), os);
    for i in 0..x.batch() {
        let xs = x.sample(i);
        let o = out.sample_mut(i);
        for c in 0..s.c {
            for y in 0..os.h {
                for xx in 0..os.w {
                    o[(c * os.h + y) * os.w + xx] = xs[(c * s.h + y / factor) * s.w + xx / factor];
                }
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(dout: &Tensor, input: Shape3, factor: usize) -> Tensor {
    let os = dout.shape();
    let mut dx = Tensor::zeros(dout.batch(), input);
    for i in 0..dout.batch() {
        let dy = dout.sample(i);
        let d = dx.sample_mut(i);
        for c in 0..os.c {
            for y in 0..os.h {
                for xx in 0..os.w {
                    d[(c * input.h + y / factor) * input.w + xx / factor] +=
                        dy[(c * os.h + y) * os.w + xx];
                }
            }
        }
    }
    dx
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

//! The fixed layer vocabulary of the baseline network: conv2d, batchnorm,
//! relu, dropout, dense, flatten.
//!
//! Each layer owns its parameter tensors and exposes an explicit
//! forward/backward pair. `forward` never mutates the layer; batchnorm
//! running statistics are updated separately via [`Layer::update_running_stats`]
//! so inference stays shareable across threads. Backward passes accumulate
//! parameter gradients into the tensors' grad buffers.

use crate::error::{Error, Result};
use crate::tensor::{offset4, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Hyperparameters of a single layer; parameter tensors live in [`Layer`].
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    Dropout {
        p: f64,
    },
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Flatten,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                ..
            } => {
                if kernel < 1 {
                    return Err(Error::Config("conv kernel size must be >= 1".into()));
                }
                if in_ch < 1 || out_ch < 1 {
                    return Err(Error::Config("conv channel counts must be >= 1".into()));
                }
                if stride < 1 {
                    return Err(Error::Config("conv stride must be >= 1".into()));
                }
            }
            LayerSpec::BatchNorm { channels } => {
                if channels < 1 {
                    return Err(Error::Config("batchnorm channels must be >= 1".into()));
                }
            }
            LayerSpec::Dropout { p } => {
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::Config(format!(
                        "dropout probability must lie in [0,1), got {p}"
                    )));
                }
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                if in_features < 1 || out_features < 1 {
                    return Err(Error::Config("dense feature counts must be >= 1".into()));
                }
            }
            LayerSpec::Relu | LayerSpec::Flatten => {}
        }
        Ok(())
    }

    /// Output shape for a given input shape, or a dimension error.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => {
                let [b, c, h, w] = four_dims(input, "conv2d")?;
                if c != in_ch {
                    return Err(Error::Dimension(format!(
                        "conv2d expects {in_ch} input channels, got {c}"
                    )));
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(Error::Dimension(format!(
                        "conv2d kernel {kernel} larger than padded input {h}x{w}"
                    )));
                }
                let oh = (h + 2 * padding - kernel) / stride + 1;
                let ow = (w + 2 * padding - kernel) / stride + 1;
                Ok(vec![b, out_ch, oh, ow])
            }
            LayerSpec::BatchNorm { channels } => {
                let [_, c, _, _] = four_dims(input, "batchnorm")?;
                if c != channels {
                    return Err(Error::Dimension(format!(
                        "batchnorm expects {channels} channels, got {c}"
                    )));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu | LayerSpec::Dropout { .. } => Ok(input.to_vec()),
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                if input.len() != 2 || input[1] != in_features {
                    return Err(Error::Dimension(format!(
                        "dense expects [batch, {in_features}], got {input:?}"
                    )));
                }
                Ok(vec![input[0], out_features])
            }
            LayerSpec::Flatten => {
                if input.len() < 2 {
                    return Err(Error::Dimension(format!(
                        "flatten expects a batched tensor, got {input:?}"
                    )));
                }
                Ok(vec![input[0], input[1..].iter().product()])
            }
        }
    }
}

/// Saved forward state needed by the matching backward pass.
#[derive(Debug)]
pub enum LayerCtx {
    Conv {
        input: Tensor,
        out_shape: Vec<usize>,
    },
    BatchNorm {
        input: Tensor,
        mean: Vec<f64>,
        var: Vec<f64>,
        mode: Mode,
    },
    Relu {
        input: Tensor,
    },
    Dropout {
        /// Per-element keep mask already scaled by 1/(1-p); empty in eval mode.
        mask: Vec<f64>,
    },
    Dense {
        input: Tensor,
    },
    Flatten {
        in_shape: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
enum LayerParams {
    Conv { weight: Tensor, bias: Tensor },
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
    },
    Dense { weight: Tensor, bias: Tensor },
    None,
}

#[derive(Debug, Clone)]
pub struct Layer {
    spec: LayerSpec,
    params: LayerParams,
}

impl Layer {
    /// Builds the layer, drawing any weights from `rng` with the symmetric
    /// uniform fan-in rule (bound = 1/sqrt(fan_in)); biases start at zero.
    pub fn new<R: Rng>(spec: LayerSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let params = match spec {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => {
                let fan_in = (in_ch * kernel * kernel) as f64;
                let bound = 1.0 / fan_in.sqrt();
                LayerParams::Conv {
                    weight: Tensor::uniform(vec![out_ch, in_ch, kernel, kernel], bound, rng),
                    bias: Tensor::zeros(vec![out_ch]),
                }
            }
            LayerSpec::BatchNorm { channels } => LayerParams::BatchNorm {
                gamma: Tensor::full(vec![channels], 1.0),
                beta: Tensor::zeros(vec![channels]),
                running_mean: Tensor::zeros(vec![channels]),
                running_var: Tensor::full(vec![channels], 1.0),
            },
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                let bound = 1.0 / (in_features as f64).sqrt();
                LayerParams::Dense {
                    weight: Tensor::uniform(vec![out_features, in_features], bound, rng),
                    bias: Tensor::zeros(vec![out_features]),
                }
            }
            _ => LayerParams::None,
        };
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    /// Trainable parameter tensors, in a fixed order, with stable names.
    pub fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        match &self.params {
            LayerParams::Conv { weight, bias } => vec![("weight", weight), ("bias", bias)],
            LayerParams::BatchNorm { gamma, beta, .. } => vec![("gamma", gamma), ("beta", beta)],
            LayerParams::Dense { weight, bias } => vec![("weight", weight), ("bias", bias)],
            LayerParams::None => vec![],
        }
    }

    pub fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match &mut self.params {
            LayerParams::Conv { weight, bias } => vec![("weight", weight), ("bias", bias)],
            LayerParams::BatchNorm { gamma, beta, .. } => vec![("gamma", gamma), ("beta", beta)],
            LayerParams::Dense { weight, bias } => vec![("weight", weight), ("bias", bias)],
            LayerParams::None => vec![],
        }
    }

    /// Non-trainable state (batchnorm running statistics).
    pub fn named_state(&self) -> Vec<(&'static str, &Tensor)> {
        match &self.params {
            LayerParams::BatchNorm {
                running_mean,
                running_var,
                ..
            } => vec![("running_mean", running_mean), ("running_var", running_var)],
            _ => vec![],
        }
    }

    pub fn named_state_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match &mut self.params {
            LayerParams::BatchNorm {
                running_mean,
                running_var,
                ..
            } => vec![("running_mean", running_mean), ("running_var", running_var)],
            _ => vec![],
        }
    }

    /// Parameters followed by non-trainable state, borrowed together.
    pub fn named_all_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match &mut self.params {
            LayerParams::Conv { weight, bias } => vec![("weight", weight), ("bias", bias)],
            LayerParams::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => vec![
                ("gamma", gamma),
                ("beta", beta),
                ("running_mean", running_mean),
                ("running_var", running_var),
            ],
            LayerParams::Dense { weight, bias } => vec![("weight", weight), ("bias", bias)],
            LayerParams::None => vec![],
        }
    }

    pub fn dense_weight(&self) -> Option<&Tensor> {
        match &self.params {
            LayerParams::Dense { weight, .. } => Some(weight),
            _ => None,
        }
    }

    /// Runs the layer. `rng_seed` only matters for train-mode dropout, which
    /// is fully reproducible from it.
    pub fn forward(&self, input: &Tensor, mode: Mode, rng_seed: u64) -> Result<(Tensor, LayerCtx)> {
        let out_shape = self.spec.output_shape(input.shape())?;
        match (&self.spec, &self.params) {
            (
                LayerSpec::Conv2d {
                    kernel,
                    stride,
                    padding,
                    ..
                },
                LayerParams::Conv { weight, bias },
            ) => {
                let out = conv_forward(input, weight, bias, *kernel, *stride, *padding, &out_shape);
                Ok((
                    out,
                    LayerCtx::Conv {
                        input: input.clone(),
                        out_shape,
                    },
                ))
            }
            (
                LayerSpec::BatchNorm { .. },
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                },
            ) => {
                let (out, mean, var) = match mode {
                    Mode::Train => {
                        let (mean, var) = batch_stats(input)?;
                        let out = bn_normalize(input, &mean, &var, gamma, beta);
                        (out, mean, var)
                    }
                    Mode::Eval => {
                        let mean = running_mean.data().to_vec();
                        let var = running_var.data().to_vec();
                        let out = bn_normalize(input, &mean, &var, gamma, beta);
                        (out, mean, var)
                    }
                };
                Ok((
                    out,
                    LayerCtx::BatchNorm {
                        input: input.clone(),
                        mean,
                        var,
                        mode,
                    },
                ))
            }
            (LayerSpec::Relu, _) => {
                let out = input.map(|v| v.max(0.0));
                Ok((
                    out,
                    LayerCtx::Relu {
                        input: input.clone(),
                    },
                ))
            }
            (LayerSpec::Dropout { p }, _) => match mode {
                Mode::Eval => Ok((input.clone(), LayerCtx::Dropout { mask: Vec::new() })),
                Mode::Train => {
                    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
                    let keep_scale = 1.0 / (1.0 - p);
                    let mask: Vec<f64> = (0..input.numel())
                        .map(|_| {
                            if rng.gen::<f64>() < *p {
                                0.0
                            } else {
                                keep_scale
                            }
                        })
                        .collect();
                    let data = input
                        .data()
                        .iter()
                        .zip(&mask)
                        .map(|(&x, &m)| x * m)
                        .collect();
                    let out = Tensor::new(input.shape().to_vec(), data)?;
                    Ok((out, LayerCtx::Dropout { mask }))
                }
            },
            (LayerSpec::Dense { .. }, LayerParams::Dense { weight, bias }) => {
                let out = dense_forward(input, weight, bias, &out_shape);
                Ok((
                    out,
                    LayerCtx::Dense {
                        input: input.clone(),
                    },
                ))
            }
            (LayerSpec::Flatten, _) => {
                let in_shape = input.shape().to_vec();
                let out = input.clone().reshape(out_shape)?;
                Ok((out, LayerCtx::Flatten { in_shape }))
            }
            _ => unreachable!("params always match spec"),
        }
    }

    /// Folds the batch statistics saved in a train-mode forward into the
    /// running estimates (PyTorch convention: unbiased variance, momentum
    /// weighting of the new value).
    pub fn update_running_stats(&mut self, ctx: &LayerCtx) -> Result<()> {
        if let (
            LayerParams::BatchNorm {
                running_mean,
                running_var,
                ..
            },
            LayerCtx::BatchNorm {
                input, mean, var, mode,
            },
        ) = (&mut self.params, ctx)
        {
            if *mode != Mode::Train {
                return Ok(());
            }
            let s = input.shape();
            let n = (s[0] * s[2] * s[3]) as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            for (rm, &m) in running_mean.data_mut().iter_mut().zip(mean) {
                *rm = (1.0 - BATCHNORM_MOMENTUM) * *rm + BATCHNORM_MOMENTUM * m;
            }
            for (rv, &v) in running_var.data_mut().iter_mut().zip(var) {
                *rv = (1.0 - BATCHNORM_MOMENTUM) * *rv + BATCHNORM_MOMENTUM * v * unbias;
            }
        }
        Ok(())
    }

    /// Propagates `upstream` through the layer, returning the input gradient
    /// and accumulating parameter gradients in place. The context must come
    /// from a forward pass of this layer kind in the same mode.
    pub fn backward(&mut self, ctx: &LayerCtx, upstream: &Tensor) -> Result<Tensor> {
        match (&self.spec, &mut self.params, ctx) {
            (
                LayerSpec::Conv2d {
                    kernel,
                    stride,
                    padding,
                    ..
                },
                LayerParams::Conv { weight, bias },
                LayerCtx::Conv { input, out_shape },
            ) => {
                if upstream.shape() != &out_shape[..] {
                    return Err(Error::Dimension(format!(
                        "conv backward: upstream {:?} does not match forward output {:?}",
                        upstream.shape(),
                        out_shape
                    )));
                }
                Ok(conv_backward(
                    input, weight, bias, upstream, *kernel, *stride, *padding, out_shape,
                ))
            }
            (
                LayerSpec::BatchNorm { .. },
                LayerParams::BatchNorm { gamma, beta, .. },
                LayerCtx::BatchNorm {
                    input, mean, var, mode,
                },
            ) => {
                upstream.check_same_shape(input, "batchnorm backward upstream")?;
                Ok(bn_backward(input, mean, var, gamma, beta, upstream, *mode))
            }
            (LayerSpec::Relu, _, LayerCtx::Relu { input }) => {
                upstream.check_same_shape(input, "relu backward upstream")?;
                let data = input
                    .data()
                    .iter()
                    .zip(upstream.data())
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                Tensor::new(input.shape().to_vec(), data)
            }
            (LayerSpec::Dropout { .. }, _, LayerCtx::Dropout { mask }) => {
                if mask.is_empty() {
                    return Ok(upstream.clone());
                }
                if mask.len() != upstream.numel() {
                    return Err(Error::Dimension(
                        "dropout backward: upstream does not match saved mask".into(),
                    ));
                }
                let data = upstream
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&g, &m)| g * m)
                    .collect();
                Tensor::new(upstream.shape().to_vec(), data)
            }
            (
                LayerSpec::Dense { .. },
                LayerParams::Dense { weight, bias },
                LayerCtx::Dense { input },
            ) => dense_backward(input, weight, bias, upstream),
            (LayerSpec::Flatten, _, LayerCtx::Flatten { in_shape }) => {
                upstream.clone().reshape(in_shape.clone())
            }
            _ => Err(Error::Usage(
                "layer backward called with a context from a different layer kind".into(),
            )),
        }
    }
}

fn four_dims(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    if shape.len() != 4 {
        return Err(Error::Dimension(format!(
            "{what} expects a [batch, channels, height, width] tensor, got {shape:?}"
        )));
    }
    Ok([shape[0], shape[1], shape[2], shape[3]])
}

// ── conv2d via im2col ────────────────────────────────────────────────

/// Fills `col` (layout [C*k*k, oh*ow]) with the padded patch matrix of
/// sample `b`.
fn im2col(
    input: &Tensor,
    b: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    col: &mut [f64],
) {
    let s = input.shape();
    let (c_in, h, w) = (s[1], s[2], s[3]);
    let data = input.data();
    let cols = oh * ow;
    for c in 0..c_in {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (c * kernel + ki) * kernel + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let base = offset4(s, b, c, iy as usize, 0);
                    for (ox, v) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            data[base + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn conv_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_shape: &[usize],
) -> Tensor {
    let (batch, out_ch, oh, ow) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
    let ckk = weight.numel() / out_ch;
    let cols = oh * ow;
    let mut out = Tensor::zeros(out_shape.to_vec());
    let mut col = vec![0.0; ckk * cols];
    let w = weight.data();
    for b in 0..batch {
        im2col(input, b, kernel, stride, padding, oh, ow, &mut col);
        let out_b = &mut out.data_mut()[b * out_ch * cols..(b + 1) * out_ch * cols];
        // process 4 output channels per pass over the col matrix to cut
        // memory traffic; the remainder loop handles out_ch % 4
        let mut o = 0;
        while o + 4 <= out_ch {
            let (head, tail) = out_b[o * cols..].split_at_mut(cols);
            let (r1, tail) = tail.split_at_mut(cols);
            let (r2, r3) = tail.split_at_mut(cols);
            let r0 = head;
            let r3 = &mut r3[..cols];
            r0.iter_mut().for_each(|v| *v = bias.data()[o]);
            r1.iter_mut().for_each(|v| *v = bias.data()[o + 1]);
            r2.iter_mut().for_each(|v| *v = bias.data()[o + 2]);
            r3.iter_mut().for_each(|v| *v = bias.data()[o + 3]);
            for (kk, col_row) in col.chunks_exact(cols).enumerate() {
                let w0 = w[o * ckk + kk];
                let w1 = w[(o + 1) * ckk + kk];
                let w2 = w[(o + 2) * ckk + kk];
                let w3 = w[(o + 3) * ckk + kk];
                for ((((x, y0), y1), y2), y3) in col_row
                    .iter()
                    .zip(r0.iter_mut())
                    .zip(r1.iter_mut())
                    .zip(r2.iter_mut())
                    .zip(r3.iter_mut())
                {
                    *y0 += w0 * x;
                    *y1 += w1 * x;
                    *y2 += w2 * x;
                    *y3 += w3 * x;
                }
            }
            o += 4;
        }
        for o in o..out_ch {
            let w_row = &w[o * ckk..(o + 1) * ckk];
            let out_row = &mut out_b[o * cols..(o + 1) * cols];
            out_row.iter_mut().for_each(|v| *v = bias.data()[o]);
            for (wk, col_row) in w_row.iter().zip(col.chunks_exact(cols)) {
                for (y, x) in out_row.iter_mut().zip(col_row) {
                    *y += wk * x;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &Tensor,
    weight: &mut Tensor,
    bias: &mut Tensor,
    upstream: &Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_shape: &[usize],
) -> Tensor {
    let (batch, out_ch, oh, ow) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
    let cols = oh * ow;
    let ckk = weight.numel() / out_ch;
    let w_data = weight.data().to_vec();
    let mut din = Tensor::zeros(input.shape().to_vec());
    let mut col = vec![0.0; ckk * cols];
    let mut dcol = vec![0.0; ckk * cols];
    let up = upstream.data();

    {
        let db = bias.grad_mut();
        for b in 0..batch {
            for o in 0..out_ch {
                let up_row = &up[(b * out_ch + o) * cols..(b * out_ch + o + 1) * cols];
                db[o] += up_row.iter().sum::<f64>();
            }
        }
    }

    let dw = weight.grad_mut();
    for b in 0..batch {
        im2col(input, b, kernel, stride, padding, oh, ow, &mut col);
        dcol.iter_mut().for_each(|v| *v = 0.0);
        let up_b = &up[b * out_ch * cols..(b + 1) * out_ch * cols];
        // same 4-channel blocking as the forward pass: one sweep over the
        // col matrix serves four upstream rows
        let mut o = 0;
        while o + 4 <= out_ch {
            let up0 = &up_b[o * cols..(o + 1) * cols];
            let up1 = &up_b[(o + 1) * cols..(o + 2) * cols];
            let up2 = &up_b[(o + 2) * cols..(o + 3) * cols];
            let up3 = &up_b[(o + 3) * cols..(o + 4) * cols];
            for (kk, (col_row, dcol_row)) in col
                .chunks_exact(cols)
                .zip(dcol.chunks_exact_mut(cols))
                .enumerate()
            {
                let w0 = w_data[o * ckk + kk];
                let w1 = w_data[(o + 1) * ckk + kk];
                let w2 = w_data[(o + 2) * ckk + kk];
                let w3 = w_data[(o + 3) * ckk + kk];
                let (mut a0, mut a1, mut a2, mut a3) = (0.0, 0.0, 0.0, 0.0);
                for (j, (x, dc)) in col_row.iter().zip(dcol_row.iter_mut()).enumerate() {
                    let (u0, u1, u2, u3) = (up0[j], up1[j], up2[j], up3[j]);
                    a0 += u0 * x;
                    a1 += u1 * x;
                    a2 += u2 * x;
                    a3 += u3 * x;
                    *dc += w0 * u0 + w1 * u1 + w2 * u2 + w3 * u3;
                }
                dw[o * ckk + kk] += a0;
                dw[(o + 1) * ckk + kk] += a1;
                dw[(o + 2) * ckk + kk] += a2;
                dw[(o + 3) * ckk + kk] += a3;
            }
            o += 4;
        }
        for o in o..out_ch {
            let up_row = &up_b[o * cols..(o + 1) * cols];
            let dw_row = &mut dw[o * ckk..(o + 1) * ckk];
            let w_row = &w_data[o * ckk..(o + 1) * ckk];
            for ((dwk, wk), (col_row, dcol_row)) in dw_row
                .iter_mut()
                .zip(w_row)
                .zip(col.chunks_exact(cols).zip(dcol.chunks_exact_mut(cols)))
            {
                let mut acc = 0.0;
                for (u, x) in up_row.iter().zip(col_row) {
                    acc += u * x;
                }
                *dwk += acc;
                for (dc, u) in dcol_row.iter_mut().zip(up_row) {
                    *dc += wk * u;
                }
            }
        }
        col2im(&dcol, b, kernel, stride, padding, oh, ow, &mut din);
    }
    din
}

/// Scatter-adds a column matrix back into the input gradient of sample `b`.
#[allow(clippy::too_many_arguments)]
fn col2im(
    dcol: &[f64],
    b: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    din: &mut Tensor,
) {
    let s = din.shape().to_vec();
    let (c_in, h, w) = (s[1], s[2], s[3]);
    let data = din.data_mut();
    let cols = oh * ow;
    for c in 0..c_in {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (c * kernel + ki) * kernel + kj;
                let src = &dcol[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = offset4(&s, b, c, iy as usize, 0);
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            data[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

// ── batchnorm ────────────────────────────────────────────────────────

/// Per-channel biased mean/variance over batch and spatial dims.
fn batch_stats(input: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = input.shape();
    let (batch, ch, h, w) = (s[0], s[1], s[2], s[3]);
    let n = batch * h * w;
    if n < 2 {
        return Err(Error::Dimension(
            "batchnorm in train mode needs at least 2 values per channel".into(),
        ));
    }
    let mut mean = vec![0.0; ch];
    let mut var = vec![0.0; ch];
    let plane = h * w;
    for c in 0..ch {
        let mut sum = 0.0;
        for b in 0..batch {
            let base = offset4(s, b, c, 0, 0);
            sum += input.data()[base..base + plane].iter().sum::<f64>();
        }
        let m = sum / n as f64;
        let mut sq = 0.0;
        for b in 0..batch {
            let base = offset4(s, b, c, 0, 0);
            for &x in &input.data()[base..base + plane] {
                let d = x - m;
                sq += d * d;
            }
        }
        mean[c] = m;
        var[c] = sq / n as f64;
    }
    Ok((mean, var))
}

fn bn_normalize(
    input: &Tensor,
    mean: &[f64],
    var: &[f64],
    gamma: &Tensor,
    beta: &Tensor,
) -> Tensor {
    let s = input.shape();
    let (batch, ch, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let mut out = Tensor::zeros(s.to_vec());
    for c in 0..ch {
        let inv_std = 1.0 / (var[c] + BATCHNORM_EPS).sqrt();
        let (g, bta, m) = (gamma.data()[c], beta.data()[c], mean[c]);
        for b in 0..batch {
            let base = offset4(s, b, c, 0, 0);
            let src = &input.data()[base..base + plane];
            let dst = &mut out.data_mut()[base..base + plane];
            for (y, &x) in dst.iter_mut().zip(src) {
                *y = g * (x - m) * inv_std + bta;
            }
        }
    }
    out
}

fn bn_backward(
    input: &Tensor,
    mean: &[f64],
    var: &[f64],
    gamma: &mut Tensor,
    beta: &mut Tensor,
    upstream: &Tensor,
    mode: Mode,
) -> Tensor {
    let s = input.shape();
    let (batch, ch, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let n = (batch * plane) as f64;
    let mut din = Tensor::zeros(s.to_vec());
    for c in 0..ch {
        let inv_std = 1.0 / (var[c] + BATCHNORM_EPS).sqrt();
        let (g, m) = (gamma.data()[c], mean[c]);
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..batch {
            let base = offset4(s, b, c, 0, 0);
            for (&x, &dy) in input.data()[base..base + plane]
                .iter()
                .zip(&upstream.data()[base..base + plane])
            {
                sum_dy += dy;
                sum_dy_xhat += dy * (x - m) * inv_std;
            }
        }
        gamma.grad_mut()[c] += sum_dy_xhat;
        beta.grad_mut()[c] += sum_dy;
        for b in 0..batch {
            let base = offset4(s, b, c, 0, 0);
            let xs = &input.data()[base..base + plane];
            let dys = &upstream.data()[base..base + plane];
            let dst = &mut din.data_mut()[base..base + plane];
            match mode {
                // Batch statistics depend on the input, so their gradient
                // contributions are folded in.
                Mode::Train => {
                    for ((dx, &x), &dy) in dst.iter_mut().zip(xs).zip(dys) {
                        let xhat = (x - m) * inv_std;
                        *dx = g * inv_std / n * (n * dy - sum_dy - xhat * sum_dy_xhat);
                    }
                }
                // Running statistics are constants in eval mode.
                Mode::Eval => {
                    for (dx, &dy) in dst.iter_mut().zip(dys) {
                        *dx = g * inv_std * dy;
                    }
                }
            }
        }
    }
    din
}

// ── dense ────────────────────────────────────────────────────────────

fn dense_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, out_shape: &[usize]) -> Tensor {
    let (batch, out_f) = (out_shape[0], out_shape[1]);
    let in_f = weight.shape()[1];
    let mut out = Tensor::zeros(out_shape.to_vec());
    for b in 0..batch {
        let x = &input.data()[b * in_f..(b + 1) * in_f];
        let y = &mut out.data_mut()[b * out_f..(b + 1) * out_f];
        for (o, yo) in y.iter_mut().enumerate() {
            let w_row = &weight.data()[o * in_f..(o + 1) * in_f];
            let mut acc = bias.data()[o];
            for (wi, xi) in w_row.iter().zip(x) {
                acc += wi * xi;
            }
            *yo = acc;
        }
    }
    out
}

fn dense_backward(
    input: &Tensor,
    weight: &mut Tensor,
    bias: &mut Tensor,
    upstream: &Tensor,
) -> Result<Tensor> {
    let (batch, in_f) = (input.shape()[0], input.shape()[1]);
    let out_f = weight.shape()[0];
    if upstream.shape() != [batch, out_f] {
        return Err(Error::Dimension(format!(
            "dense backward: upstream {:?}, expected [{batch}, {out_f}]",
            upstream.shape()
        )));
    }
    let mut din = Tensor::zeros(vec![batch, in_f]);
    let w_data = weight.data().to_vec();
    let dw = weight.grad_mut();
    let db = bias.grad_mut();
    for b in 0..batch {
        let x = &input.data()[b * in_f..(b + 1) * in_f];
        let dy = &upstream.data()[b * out_f..(b + 1) * out_f];
        let dx = &mut din.data_mut()[b * in_f..(b + 1) * in_f];
        for (o, &dyo) in dy.iter().enumerate() {
            db[o] += dyo;
            let w_row = &w_data[o * in_f..(o + 1) * in_f];
            let dw_row = &mut dw[o * in_f..(o + 1) * in_f];
            if dyo != 0.0 {
                for ((dwi, dxi), (&wi, &xi)) in
                    dw_row.iter_mut().zip(dx.iter_mut()).zip(w_row.iter().zip(x))
                {
                    *dwi += dyo * xi;
                    *dxi += dyo * wi;
                }
            }
        }
    }
    Ok(din)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let spec = LayerSpec::Conv2d {
            in_ch: 1,
            out_ch: 1,
            kernel: 1,
            stride: 1,
            padding: 0,
        };
        let mut layer = Layer::new(spec, &mut rng()).unwrap();
        if let LayerParams::Conv { weight, .. } = &mut layer.params {
            weight.data_mut()[0] = 1.0;
        }
        let input = Tensor::new(vec![1, 1, 2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -0.25]).unwrap();
        let (out, _) = layer.forward(&input, Mode::Eval, 0).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn conv_all_ones_2x2_valid_on_ones_gives_fours() {
        let spec = LayerSpec::Conv2d {
            in_ch: 1,
            out_ch: 1,
            kernel: 2,
            stride: 1,
            padding: 0,
        };
        let mut layer = Layer::new(spec, &mut rng()).unwrap();
        if let LayerParams::Conv { weight, .. } = &mut layer.params {
            weight.data_mut().iter_mut().for_each(|v| *v = 1.0);
        }
        let input = Tensor::full(vec![1, 1, 3, 3], 1.0);
        let (out, _) = layer.forward(&input, Mode::Eval, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn relu_forward_and_backward_examples() {
        let layer = Layer::new(LayerSpec::Relu, &mut rng()).unwrap();
        let input = Tensor::new(vec![1, 1, 2, 2], vec![-1.0, 2.0, 0.0, -3.0]).unwrap();
        let (out, ctx) = layer.forward(&input, Mode::Eval, 0).unwrap();
        assert_eq!(out.data(), &[0.0, 2.0, 0.0, 0.0]);

        let mut layer = layer;
        let upstream = Tensor::full(vec![1, 1, 2, 2], 1.0);
        let din = layer.backward(&ctx, &upstream).unwrap();
        assert_eq!(din.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn dense_input_gradient_is_the_weight_row() {
        let spec = LayerSpec::Dense {
            in_features: 3,
            out_features: 2,
        };
        let mut layer = Layer::new(spec, &mut rng()).unwrap();
        let input = Tensor::new(vec![1, 3], vec![0.3, -0.4, 0.9]).unwrap();
        let (_, ctx) = layer.forward(&input, Mode::Eval, 0).unwrap();
        // upstream selects logit 1: dL/dx_i must equal w[1][i] exactly
        let upstream = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let din = layer.backward(&ctx, &upstream).unwrap();
        let w = layer.dense_weight().unwrap();
        assert_eq!(din.data(), &w.data()[3..6]);
    }

    #[test]
    fn dropout_eval_is_identity_and_train_is_seed_reproducible() {
        let layer = Layer::new(LayerSpec::Dropout { p: 0.5 }, &mut rng()).unwrap();
        let input = Tensor::new(vec![2, 4], (0..8).map(|v| v as f64).collect()).unwrap();
        let (eval_out, _) = layer.forward(&input, Mode::Eval, 1).unwrap();
        assert_eq!(eval_out.data(), input.data());

        let (a, _) = layer.forward(&input, Mode::Train, 42).unwrap();
        let (b, _) = layer.forward(&input, Mode::Train, 42).unwrap();
        let (c, _) = layer.forward(&input, Mode::Train, 43).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn batchnorm_train_normalizes_each_channel() {
        let layer = Layer::new(LayerSpec::BatchNorm { channels: 2 }, &mut rng()).unwrap();
        let input = Tensor::from_fn(vec![2, 2, 2, 2], |i| (i as f64) * 0.7 - 3.0);
        let (out, _) = layer.forward(&input, Mode::Train, 0).unwrap();
        for c in 0..2 {
            let mut vals = Vec::new();
            for b in 0..2 {
                for i in 0..4 {
                    vals.push(out.data()[offset4(&[2, 2, 2, 2], b, c, i / 2, i % 2)]);
                }
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn dropout_probability_outside_range_is_rejected() {
        assert!(LayerSpec::Dropout { p: 1.0 }.validate().is_err());
        assert!(LayerSpec::Dropout { p: -0.1 }.validate().is_err());
        assert!(LayerSpec::Dropout { p: 0.0 }.validate().is_ok());
    }

    #[test]
    fn backward_with_wrong_context_kind_is_a_usage_error() {
        let mut layer = Layer::new(LayerSpec::Relu, &mut rng()).unwrap();
        let ctx = LayerCtx::Flatten {
            in_shape: vec![1, 4],
        };
        let upstream = Tensor::zeros(vec![1, 4]);
        assert!(layer.backward(&ctx, &upstream).is_err());
    }

    #[test]
    fn conv_shape_mismatch_is_descriptive() {
        let spec = LayerSpec::Conv2d {
            in_ch: 3,
            out_ch: 4,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let layer = Layer::new(spec, &mut rng()).unwrap();
        let input = Tensor::zeros(vec![1, 2, 8, 8]);
        let err = layer.forward(&input, Mode::Eval, 0).unwrap_err();
        assert!(err.to_string().contains("3 input channels"));
    }
}

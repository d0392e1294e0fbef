//! Primitive layers and their forward/backward kernels.
//!
//! Activations are laid out `batch × channels × length` for the 1-D layers
//! and `batch × features` for [`Dense`].

use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Batch statistics in BatchNorm; running statistics are updated.
    Train,
    /// Running statistics in BatchNorm.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T = f32> {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim × in_dim`
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<T = f32> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `out_ch × in_ch × kernel`
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm1d<T = f32> {
    pub channels: usize,
    pub eps: f32,
    pub momentum: f32,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PrimitiveLayer<T = f32> {
    Dense(Dense<T>),
    Conv1d(Conv1d<T>),
    BatchNorm1d(BatchNorm1d<T>),
    Relu,
    GlobalAvgPool1d,
    Flatten,
}

impl<T: Scalar> Dense<T> {
    /// Zero-initialised; see [`super::init::kaiming_init`].
    pub fn new(in_dim: usize, out_dim: usize, has_bias: bool) -> Self {
        Dense {
            in_dim,
            out_dim,
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: has_bias.then(|| Tensor::zeros(&[out_dim])),
        }
    }
}

impl<T: Scalar> Conv1d<T> {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        has_bias: bool,
    ) -> Self {
        assert!(kernel >= 1 && stride >= 1, "kernel and stride must be >= 1");
        Conv1d {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            weight: Tensor::zeros(&[out_ch, in_ch, kernel]),
            bias: has_bias.then(|| Tensor::zeros(&[out_ch])),
        }
    }

    pub fn out_len(&self, in_len: usize) -> Option<usize> {
        let padded = in_len + 2 * self.padding;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }

    /// Valid output positions `t` for kernel tap `k`, i.e. those with
    /// `0 <= t*stride + k - padding < in_len`.
    #[inline]
    fn tap_range(&self, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let lo = if self.padding > k {
            (self.padding - k).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if in_len + self.padding > k {
            ((in_len - 1 + self.padding - k) / self.stride + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

impl<T: Scalar> BatchNorm1d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm1d {
            channels,
            eps: 1e-5,
            momentum: 0.1,
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
        }
    }
}

/// Saved forward state needed by the backward pass.
#[derive(Debug, Clone)]
pub enum LayerCache<T> {
    Dense { input: Tensor<T> },
    Conv1d { input: Tensor<T> },
    BatchNorm1d {
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        mode: Mode,
        /// Batch mean and unbiased variance, present in train mode.
        batch_stats: Option<(Vec<f64>, Vec<f64>)>,
    },
    Relu { output: Tensor<T> },
    GlobalAvgPool1d { in_shape: Vec<usize> },
    Flatten { in_shape: Vec<usize> },
}

impl<T: Scalar> PrimitiveLayer<T> {
    pub fn kind_name(&self) -> &'static str {
        match self {
            PrimitiveLayer::Dense(_) => "Dense",
            PrimitiveLayer::Conv1d(_) => "Conv1d",
            PrimitiveLayer::BatchNorm1d(_) => "BatchNorm1d",
            PrimitiveLayer::Relu => "ReLU",
            PrimitiveLayer::GlobalAvgPool1d => "GlobalAvgPool1d",
            PrimitiveLayer::Flatten => "Flatten",
        }
    }

    /// True for layers whose input width is fixed by their parameters.
    pub fn is_parametric(&self) -> bool {
        matches!(self, PrimitiveLayer::Dense(_) | PrimitiveLayer::Conv1d(_))
    }

    /// Expected input channels (Conv1d) or features (Dense).
    pub fn input_width(&self) -> Option<usize> {
        match self {
            PrimitiveLayer::Dense(d) => Some(d.in_dim),
            PrimitiveLayer::Conv1d(c) => Some(c.in_ch),
            _ => None,
        }
    }

    /// Trainable tensors in declaration order.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            PrimitiveLayer::Dense(d) => std::iter::once(&d.weight).chain(d.bias.as_ref()).collect(),
            PrimitiveLayer::Conv1d(c) => std::iter::once(&c.weight).chain(c.bias.as_ref()).collect(),
            PrimitiveLayer::BatchNorm1d(b) => vec![&b.gamma, &b.beta],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            PrimitiveLayer::Dense(d) => std::iter::once(&mut d.weight).chain(d.bias.as_mut()).collect(),
            PrimitiveLayer::Conv1d(c) => std::iter::once(&mut c.weight).chain(c.bias.as_mut()).collect(),
            PrimitiveLayer::BatchNorm1d(b) => vec![&mut b.gamma, &mut b.beta],
            _ => Vec::new(),
        }
    }

    /// Non-trainable state (BatchNorm running statistics).
    pub fn buffers(&self) -> Vec<&Tensor<T>> {
        match self {
            PrimitiveLayer::BatchNorm1d(b) => vec![&b.running_mean, &b.running_var],
            _ => Vec::new(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            PrimitiveLayer::BatchNorm1d(b) => vec![&mut b.running_mean, &mut b.running_var],
            _ => Vec::new(),
        }
    }

    /// Parameters followed by buffers.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            PrimitiveLayer::BatchNorm1d(b) => vec![&mut b.gamma, &mut b.beta, &mut b.running_mean, &mut b.running_var],
            other => other.params_mut(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> PrimitiveLayer<U> {
        match self {
            PrimitiveLayer::Dense(d) => PrimitiveLayer::Dense(Dense {
                in_dim: d.in_dim,
                out_dim: d.out_dim,
                weight: d.weight.cast(),
                bias: d.bias.as_ref().map(Tensor::cast),
            }),
            PrimitiveLayer::Conv1d(c) => PrimitiveLayer::Conv1d(Conv1d {
                in_ch: c.in_ch,
                out_ch: c.out_ch,
                kernel: c.kernel,
                stride: c.stride,
                padding: c.padding,
                weight: c.weight.cast(),
                bias: c.bias.as_ref().map(Tensor::cast),
            }),
            PrimitiveLayer::BatchNorm1d(b) => PrimitiveLayer::BatchNorm1d(BatchNorm1d {
                channels: b.channels,
                eps: b.eps,
                momentum: b.momentum,
                gamma: b.gamma.cast(),
                beta: b.beta.cast(),
                running_mean: b.running_mean.cast(),
                running_var: b.running_var.cast(),
            }),
            PrimitiveLayer::Relu => PrimitiveLayer::Relu,
            PrimitiveLayer::GlobalAvgPool1d => PrimitiveLayer::GlobalAvgPool1d,
            PrimitiveLayer::Flatten => PrimitiveLayer::Flatten,
        }
    }

    /// Output shape (without batch dimension) for an input of `input` shape.
    pub fn infer_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |msg: String| Err(Error::shape(self.kind_name(), msg));
        match self {
            PrimitiveLayer::Dense(d) => {
                if input != [d.in_dim] {
                    return bad(format!("expected [{}], got {input:?}", d.in_dim));
                }
                Ok(vec![d.out_dim])
            }
            PrimitiveLayer::Conv1d(c) => match *input {
                [ch, len] if ch == c.in_ch => match c.out_len(len) {
                    Some(out) => Ok(vec![c.out_ch, out]),
                    None => bad(format!("length {len} shorter than kernel {}", c.kernel)),
                },
                _ => bad(format!("expected [{}, L], got {input:?}", c.in_ch)),
            },
            PrimitiveLayer::BatchNorm1d(b) => match input.first() {
                Some(&ch) if ch == b.channels && input.len() <= 2 => Ok(input.to_vec()),
                _ => bad(format!("expected {} channels, got {input:?}", b.channels)),
            },
            PrimitiveLayer::Relu => Ok(input.to_vec()),
            PrimitiveLayer::GlobalAvgPool1d => match *input {
                [ch, _] => Ok(vec![ch]),
                _ => bad(format!("expected [C, L], got {input:?}")),
            },
            PrimitiveLayer::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// Multiply-accumulates for one example with input `input` shape.
    pub fn macs(&self, input: &[usize]) -> Result<u64> {
        let out = self.infer_shape(input)?;
        Ok(match self {
            PrimitiveLayer::Dense(d) => (d.in_dim * d.out_dim) as u64,
            PrimitiveLayer::Conv1d(c) => (out[1] * c.out_ch * c.in_ch * c.kernel) as u64,
            _ => 0,
        })
    }

    /// Applies the running-statistics update recorded in a train-mode cache.
    pub fn commit_stats(&mut self, cache: &LayerCache<T>) {
        if let (
            PrimitiveLayer::BatchNorm1d(bn),
            LayerCache::BatchNorm1d {
                batch_stats: Some((mean, var)),
                ..
            },
        ) = (self, cache)
        {
            let m = bn.momentum as f64;
            for c in 0..bn.channels {
                let rm = &mut bn.running_mean.data_mut()[c];
                *rm = T::of((1.0 - m) * rm.f64() + m * mean[c]);
                let rv = &mut bn.running_var.data_mut()[c];
                *rv = T::of((1.0 - m) * rv.f64() + m * var[c]);
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, LayerCache<T>)> {
        let item_shape = &x.shape()[1..];
        self.infer_shape(item_shape)?;
        Ok(match self {
            PrimitiveLayer::Dense(d) => (dense_forward(d, x), LayerCache::Dense { input: x.clone() }),
            PrimitiveLayer::Conv1d(c) => (conv_forward(c, x), LayerCache::Conv1d { input: x.clone() }),
            PrimitiveLayer::BatchNorm1d(b) => bn_forward(b, x, mode),
            PrimitiveLayer::Relu => {
                let y = x.map(|v| if v > T::zero() { v } else { T::zero() });
                (y.clone(), LayerCache::Relu { output: y })
            }
            PrimitiveLayer::GlobalAvgPool1d => {
                let (b, c, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let scale = T::of(1.0 / len as f64);
                let data = x
                    .data()
                    .chunks_exact(len)
                    .map(|row| row.iter().copied().sum::<T>() * scale)
                    .collect();
                (
                    Tensor::new(vec![b, c], data)?,
                    LayerCache::GlobalAvgPool1d {
                        in_shape: x.shape().to_vec(),
                    },
                )
            }
            PrimitiveLayer::Flatten => (
                x.clone().reshape(vec![x.batch(), x.item_len()])?,
                LayerCache::Flatten {
                    in_shape: x.shape().to_vec(),
                },
            ),
        })
    }

    /// Returns the input gradient and accumulates parameter gradients into
    /// `grads` (same order as [`Self::params`]).
    pub fn backward(&self, cache: &LayerCache<T>, dy: &Tensor<T>, grads: &mut [Tensor<T>]) -> Tensor<T> {
        match (self, cache) {
            (PrimitiveLayer::Dense(d), LayerCache::Dense { input }) => dense_backward(d, input, dy, grads),
            (PrimitiveLayer::Conv1d(c), LayerCache::Conv1d { input }) => conv_backward(c, input, dy, grads),
            (PrimitiveLayer::BatchNorm1d(b), LayerCache::BatchNorm1d { xhat, inv_std, mode, .. }) => {
                bn_backward(b, xhat, inv_std, *mode, dy, grads)
            }
            (PrimitiveLayer::Relu, LayerCache::Relu { output }) => {
                let mut dx = dy.clone();
                for (g, &o) in dx.data_mut().iter_mut().zip(output.data()) {
                    if o <= T::zero() {
                        *g = T::zero();
                    }
                }
                dx
            }
            (PrimitiveLayer::GlobalAvgPool1d, LayerCache::GlobalAvgPool1d { in_shape }) => {
                let len = in_shape[2];
                let scale = T::of(1.0 / len as f64);
                let mut data = Vec::with_capacity(in_shape.iter().product());
                for &g in dy.data() {
                    data.extend(std::iter::repeat_n(g * scale, len));
                }
                Tensor::new(in_shape.clone(), data).expect("pool gradient shape")
            }
            (PrimitiveLayer::Flatten, LayerCache::Flatten { in_shape }) => {
                dy.clone().reshape(in_shape.clone()).expect("flatten gradient shape")
            }
            _ => unreachable!("layer/cache kind mismatch"),
        }
    }
}

fn dense_forward<T: Scalar>(d: &Dense<T>, x: &Tensor<T>) -> Tensor<T> {
    let b = x.batch();
    let w = d.weight.data();
    let mut y = Vec::with_capacity(b * d.out_dim);
    for row in x.data().chunks_exact(d.in_dim) {
        for o in 0..d.out_dim {
            let wr = &w[o * d.in_dim..(o + 1) * d.in_dim];
            let mut acc: T = wr.iter().zip(row).map(|(&a, &b)| a * b).sum();
            if let Some(bias) = &d.bias {
                acc += bias.data()[o];
            }
            y.push(acc);
        }
    }
    Tensor::new(vec![b, d.out_dim], y).expect("dense output shape")
}

fn dense_backward<T: Scalar>(d: &Dense<T>, x: &Tensor<T>, dy: &Tensor<T>, grads: &mut [Tensor<T>]) -> Tensor<T> {
    let (n_in, n_out) = (d.in_dim, d.out_dim);
    let w = d.weight.data();
    let mut dx = Tensor::zeros(x.shape());
    {
        let (gw, rest) = grads.split_first_mut().expect("dense weight grad");
        let gw = gw.data_mut();
        for ((xr, dyr), dxr) in x
            .data()
            .chunks_exact(n_in)
            .zip(dy.data().chunks_exact(n_out))
            .zip(dx.data_mut().chunks_exact_mut(n_in))
        {
            for o in 0..n_out {
                let g = dyr[o];
                if g == T::zero() {
                    continue;
                }
                let wr = &w[o * n_in..(o + 1) * n_in];
                let gwr = &mut gw[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    gwr[i] += g * xr[i];
                    dxr[i] += g * wr[i];
                }
            }
        }
        if d.bias.is_some() {
            let gb = rest[0].data_mut();
            for dyr in dy.data().chunks_exact(n_out) {
                for (a, &g) in gb.iter_mut().zip(dyr) {
                    *a += g;
                }
            }
        }
    }
    dx
}

fn conv_forward<T: Scalar>(c: &Conv1d<T>, x: &Tensor<T>) -> Tensor<T> {
    let (b, in_len) = (x.shape()[0], x.shape()[2]);
    let out_len = c.out_len(in_len).expect("validated by infer_shape");
    let w = c.weight.data();
    let mut y = vec![T::zero(); b * c.out_ch * out_len];
    for (xb, yb) in x
        .data()
        .chunks_exact(c.in_ch * in_len)
        .zip(y.chunks_exact_mut(c.out_ch * out_len))
    {
        for (o, yrow) in yb.chunks_exact_mut(out_len).enumerate() {
            if let Some(bias) = &c.bias {
                yrow.fill(bias.data()[o]);
            }
            for (i, xrow) in xb.chunks_exact(in_len).enumerate() {
                let taps = &w[(o * c.in_ch + i) * c.kernel..(o * c.in_ch + i + 1) * c.kernel];
                for (k, &wk) in taps.iter().enumerate() {
                    let (lo, hi) = c.tap_range(k, in_len, out_len);
                    if lo >= hi {
                        continue;
                    }
                    let start = lo * c.stride + k - c.padding;
                    if c.stride == 1 {
                        let src = &xrow[start..start + (hi - lo)];
                        for (yv, &xv) in yrow[lo..hi].iter_mut().zip(src) {
                            *yv += wk * xv;
                        }
                    } else {
                        for (j, yv) in yrow[lo..hi].iter_mut().enumerate() {
                            *yv += wk * xrow[start + j * c.stride];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, c.out_ch, out_len], y).expect("conv output shape")
}

fn conv_backward<T: Scalar>(c: &Conv1d<T>, x: &Tensor<T>, dy: &Tensor<T>, grads: &mut [Tensor<T>]) -> Tensor<T> {
    let in_len = x.shape()[2];
    let out_len = dy.shape()[2];
    let w = c.weight.data();
    let mut dx = Tensor::zeros(x.shape());
    let (gw, rest) = grads.split_first_mut().expect("conv weight grad");
    let gw = gw.data_mut();
    for ((xb, dyb), dxb) in x
        .data()
        .chunks_exact(c.in_ch * in_len)
        .zip(dy.data().chunks_exact(c.out_ch * out_len))
        .zip(dx.data_mut().chunks_exact_mut(c.in_ch * in_len))
    {
        for (o, dyrow) in dyb.chunks_exact(out_len).enumerate() {
            if c.bias.is_some() {
                rest[0].data_mut()[o] += dyrow.iter().copied().sum::<T>();
            }
            for i in 0..c.in_ch {
                let xrow = &xb[i * in_len..(i + 1) * in_len];
                let dxrow = &mut dxb[i * in_len..(i + 1) * in_len];
                let base = (o * c.in_ch + i) * c.kernel;
                for k in 0..c.kernel {
                    let (lo, hi) = c.tap_range(k, in_len, out_len);
                    if lo >= hi {
                        continue;
                    }
                    let wk = w[base + k];
                    let start = lo * c.stride + k - c.padding;
                    let mut acc = T::zero();
                    if c.stride == 1 {
                        let n = hi - lo;
                        for ((&g, &xv), dxv) in dyrow[lo..hi]
                            .iter()
                            .zip(&xrow[start..start + n])
                            .zip(dxrow[start..start + n].iter_mut())
                        {
                            acc += g * xv;
                            *dxv += wk * g;
                        }
                    } else {
                        for (j, &g) in dyrow[lo..hi].iter().enumerate() {
                            let p = start + j * c.stride;
                            acc += g * xrow[p];
                            dxrow[p] += wk * g;
                        }
                    }
                    gw[base + k] += acc;
                }
            }
        }
    }
    dx
}

/// `(batch, channels, length)` view; rank-2 inputs have length 1.
fn bn_dims<T: Scalar>(x: &Tensor<T>) -> (usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], if s.len() == 3 { s[2] } else { 1 })
}

fn bn_forward<T: Scalar>(bn: &BatchNorm1d<T>, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, LayerCache<T>) {
    let (b, ch, len) = bn_dims(x);
    let n = (b * len) as f64;
    let eps = bn.eps as f64;
    let mut batch_stats = None;
    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        Mode::Train => {
            let mut sums = vec![0.0f64; ch];
            let mut sq = vec![0.0f64; ch];
            for item in x.data().chunks_exact(ch * len) {
                for (c, row) in item.chunks_exact(len).enumerate() {
                    for &v in row {
                        let v = v.f64();
                        sums[c] += v;
                        sq[c] += v * v;
                    }
                }
            }
            let mean: Vec<f64> = sums.iter().map(|s| s / n).collect();
            let var: Vec<f64> = sq
                .iter()
                .zip(&mean)
                .map(|(s, m)| (s / n - m * m).max(0.0))
                .collect();
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            batch_stats = Some((mean.clone(), var.iter().map(|v| v * unbias).collect()));
            (mean, var)
        }
        Mode::Eval => (
            bn.running_mean.data().iter().map(|v| v.f64()).collect(),
            bn.running_var.data().iter().map(|v| v.f64()).collect(),
        ),
    };
    let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + eps).sqrt())).collect();
    let mean: Vec<T> = mean.into_iter().map(T::of).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    for item in x.data().chunks_exact(ch * len) {
        for (c, row) in item.chunks_exact(len).enumerate() {
            let (g, bt) = (bn.gamma.data()[c], bn.beta.data()[c]);
            for &v in row {
                let h = (v - mean[c]) * inv_std[c];
                xhat.push(h);
                y.push(g * h + bt);
            }
        }
    }
    let shape = x.shape().to_vec();
    (
        Tensor::new(shape.clone(), y).expect("bn output shape"),
        LayerCache::BatchNorm1d {
            xhat: Tensor::new(shape, xhat).expect("bn cache shape"),
            inv_std,
            mode,
            batch_stats,
        },
    )
}

fn bn_backward<T: Scalar>(
    bn: &BatchNorm1d<T>,
    xhat: &Tensor<T>,
    inv_std: &[T],
    mode: Mode,
    dy: &Tensor<T>,
    grads: &mut [Tensor<T>],
) -> Tensor<T> {
    let (_, ch, len) = bn_dims(dy);
    let n = (dy.batch() * len) as f64;
    let mut sum_dy = vec![0.0f64; ch];
    let mut sum_dy_xhat = vec![0.0f64; ch];
    for (dyi, xi) in dy.data().chunks_exact(ch * len).zip(xhat.data().chunks_exact(ch * len)) {
        for c in 0..ch {
            for t in 0..len {
                let g = dyi[c * len + t].f64();
                sum_dy[c] += g;
                sum_dy_xhat[c] += g * xi[c * len + t].f64();
            }
        }
    }
    for c in 0..ch {
        grads[0].data_mut()[c] += T::of(sum_dy_xhat[c]);
        grads[1].data_mut()[c] += T::of(sum_dy[c]);
    }
    let mut dx = Tensor::zeros(dy.shape());
    for ((dyi, xi), dxi) in dy
        .data()
        .chunks_exact(ch * len)
        .zip(xhat.data().chunks_exact(ch * len))
        .zip(dx.data_mut().chunks_exact_mut(ch * len))
    {
        for c in 0..ch {
            let scale = bn.gamma.data()[c] * inv_std[c];
            for t in 0..len {
                let p = c * len + t;
                dxi[p] = match mode {
                    Mode::Eval => scale * dyi[p],
                    Mode::Train => {
                        let mean_dy = T::of(sum_dy[c] / n);
                        let mean_dy_xhat = T::of(sum_dy_xhat[c] / n);
                        scale * (dyi[p] - mean_dy - xi[p] * mean_dy_xhat)
                    }
                };
            }
        }
    }
    dx
}

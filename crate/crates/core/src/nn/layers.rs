use rand::Rng;
use rand_distr::StandardNormal;

use super::optim::Param;
use super::tensor::Tensor4;
use super::{gemm, Elem, Precision};
use crate::error::{Error, Result};

/// Training mode uses batch statistics and dropout; inference mode is
/// deterministic and uses running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

fn he_normal(n: usize, fan_in: usize, rng: &mut impl Rng) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            std * z
        })
        .collect()
}

/// Same-padded 2-D cross-correlation with stride 1.
///
/// Weights are stored `(kernel row, kernel col, in channel) x out channel`,
/// row-major, which is the im2col layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    kernel: usize,
    in_channels: usize,
    out_channels: usize,
    precision: Precision,
    pub weight: Param,
    pub bias: Param,
    input_dims: [usize; 4],
    scratch64: Scratch<f64>,
    scratch32: Scratch<f32>,
}

/// Reused im2col buffers; every entry is overwritten before it is read.
#[derive(Debug, Clone, Default, PartialEq)]
struct Scratch<T> {
    cols: Vec<T>,
    gcols: Vec<T>,
}

fn im2col<T: Elem>(x: &Tensor4, k: usize, cols: &mut Vec<T>) {
    let [n, h, w, c] = x.dims();
    let pad = k / 2;
    let row_len = k * k * c;
    cols.resize(n * h * w * row_len, T::default());
    let data = x.data();
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = &mut cols[((b * h + y) * w + xx) * row_len..][..row_len];
                for dy in 0..k {
                    let sy = (y + dy).wrapping_sub(pad);
                    for dx in 0..k {
                        let sx = (xx + dx).wrapping_sub(pad);
                        let dst = &mut row[(dy * k + dx) * c..][..c];
                        if sy < h && sx < w {
                            let src = ((b * h + sy) * w + sx) * c;
                            for (d, s) in dst.iter_mut().zip(&data[src..src + c]) {
                                *d = T::from_f64(*s);
                            }
                        } else {
                            dst.fill(T::default());
                        }
                    }
                }
            }
        }
    }
}

impl Conv2d {
    /// He-normal weights, zero bias.
    pub fn new(kernel: usize, in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let fan_in = kernel * kernel * in_channels;
        let w = he_normal(fan_in * out_channels, fan_in.max(1), rng);
        Self::from_weights(kernel, in_channels, out_channels, w, vec![0.0; out_channels])
    }

    /// Double-precision layer with the given parameters.
    pub fn from_weights(
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if kernel % 2 == 0 || in_channels == 0 || out_channels == 0 {
            return Err(Error::invalid("conv2d", "kernel must be odd and channel counts positive"));
        }
        if weight.len() != kernel * kernel * in_channels * out_channels || bias.len() != out_channels {
            return Err(Error::invalid("conv2d", "weight or bias length does not match the shape"));
        }
        Ok(Self {
            kernel,
            in_channels,
            out_channels,
            precision: Precision::F64,
            weight: Param::new(weight),
            bias: Param::new(bias),
            input_dims: [0; 4],
            scratch64: Scratch::default(),
            scratch32: Scratch::default(),
        })
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn check(&self, x: &Tensor4) -> Result<()> {
        if x.channels() != self.in_channels {
            return Err(Error::invalid(
                "conv2d",
                format!("input has {} channels, layer expects {}", x.channels(), self.in_channels),
            ));
        }
        Ok(())
    }

    fn run_forward<T: Elem>(&self, x: &Tensor4, cols: &mut Vec<T>) -> Tensor4 {
        let [n, h, w, _] = x.dims();
        let m = n * h * w;
        let kdim = self.kernel * self.kernel * self.in_channels;
        let co = self.out_channels;
        im2col(x, self.kernel, cols);
        let wt: Vec<T> = self.weight.value.iter().map(|&v| T::from_f64(v)).collect();
        let mut prod = vec![T::default(); m * co];
        gemm(m, kdim, co, cols, false, &wt, false, T::default(), &mut prod);
        let mut out = Vec::with_capacity(m * co);
        for row in prod.chunks_exact(co) {
            out.extend(row.iter().zip(&self.bias.value).map(|(p, b)| p.to_f64() + b));
        }
        Tensor4::from_parts([n, h, w, co], out)
    }

    /// Forward pass without caching.
    pub fn infer(&self, x: &Tensor4) -> Result<Tensor4> {
        self.check(x)?;
        Ok(match self.precision {
            Precision::F64 => self.run_forward::<f64>(x, &mut Vec::new()),
            Precision::F32 => self.run_forward::<f32>(x, &mut Vec::new()),
        })
    }

    /// Forward pass that keeps what `backward` needs.
    pub fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        self.check(x)?;
        self.input_dims = x.dims();
        Ok(match self.precision {
            Precision::F64 => {
                let mut cols = std::mem::take(&mut self.scratch64.cols);
                let out = self.run_forward(x, &mut cols);
                self.scratch64.cols = cols;
                out
            }
            Precision::F32 => {
                let mut cols = std::mem::take(&mut self.scratch32.cols);
                let out = self.run_forward(x, &mut cols);
                self.scratch32.cols = cols;
                out
            }
        })
    }

    fn run_backward<T: Elem>(&mut self, grad_out: &Tensor4, scratch: &mut Scratch<T>) -> Tensor4 {
        let [n, h, w, c] = self.input_dims;
        let m = n * h * w;
        let k = self.kernel;
        let kdim = k * k * c;
        let co = self.out_channels;
        let g: Vec<T> = grad_out.data().iter().map(|&v| T::from_f64(v)).collect();
        let mut gw = vec![T::default(); kdim * co];
        gemm(kdim, m, co, &scratch.cols, true, &g, false, T::default(), &mut gw);
        for (acc, v) in self.weight.grad.iter_mut().zip(&gw) {
            *acc += v.to_f64();
        }
        for row in grad_out.data().chunks_exact(co) {
            for (gb, v) in self.bias.grad.iter_mut().zip(row) {
                *gb += v;
            }
        }
        let wt: Vec<T> = self.weight.value.iter().map(|&v| T::from_f64(v)).collect();
        scratch.gcols.resize(m * kdim, T::default());
        gemm(m, co, kdim, &g, false, &wt, true, T::default(), &mut scratch.gcols);

        let pad = k / 2;
        let mut gx = vec![0.0; n * h * w * c];
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let row = &scratch.gcols[((b * h + y) * w + xx) * kdim..][..kdim];
                    for dy in 0..k {
                        let sy = (y + dy).wrapping_sub(pad);
                        if sy >= h {
                            continue;
                        }
                        for dx in 0..k {
                            let sx = (xx + dx).wrapping_sub(pad);
                            if sx >= w {
                                continue;
                            }
                            let dst = ((b * h + sy) * w + sx) * c;
                            for (t, s) in gx[dst..dst + c].iter_mut().zip(&row[(dy * k + dx) * c..][..c]) {
                                *t += s.to_f64();
                            }
                        }
                    }
                }
            }
        }
        Tensor4::from_parts(self.input_dims, gx)
    }

    /// Accumulate weight and bias gradients; return the input gradient.
    pub fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let [n, h, w, _] = self.input_dims;
        if grad_out.dims() != [n, h, w, self.out_channels] || n == 0 {
            return Err(Error::invalid("conv2d backward", "gradient shape does not match the last forward"));
        }
        Ok(match self.precision {
            Precision::F64 => {
                let mut s = std::mem::take(&mut self.scratch64);
                let gx = self.run_backward(grad_out, &mut s);
                self.scratch64 = s;
                gx
            }
            Precision::F32 => {
                let mut s = std::mem::take(&mut self.scratch32);
                let gx = self.run_backward(grad_out, &mut s);
                self.scratch32 = s;
                gx
            }
        })
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub(crate) fn clear_cache(&mut self) {
        self.scratch64 = Scratch::default();
        self.scratch32 = Scratch::default();
        self.input_dims = [0; 4];
    }
}

/// Per-channel batch normalization over batch and spatial positions.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    /// Running biased (population) variance.
    pub running_var: Vec<f64>,
    /// Weight kept by the running statistics at each update.
    pub momentum: f64,
    pub epsilon: f64,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    dims: [usize; 4],
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::new(vec![0.0; channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.9,
            epsilon: 1e-5,
            xhat: Vec::new(),
            inv_std: Vec::new(),
            dims: [0; 4],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn check(&self, x: &Tensor4) -> Result<()> {
        if x.channels() != self.channels {
            return Err(Error::invalid(
                "batch norm",
                format!("input has {} channels, layer expects {}", x.channels(), self.channels),
            ));
        }
        Ok(())
    }

    /// Normalize with the running statistics.
    pub fn infer(&self, x: &Tensor4) -> Result<Tensor4> {
        self.check(x)?;
        let c = self.channels;
        let scale: Vec<f64> = (0..c)
            .map(|j| self.gamma.value[j] / (self.running_var[j] + self.epsilon).sqrt())
            .collect();
        let mut out = x.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            for j in 0..c {
                row[j] = (row[j] - self.running_mean[j]) * scale[j] + self.beta.value[j];
            }
        }
        Ok(Tensor4::from_parts(x.dims(), out))
    }

    pub fn forward(&mut self, x: &Tensor4, mode: Mode) -> Result<Tensor4> {
        if mode == Mode::Infer {
            return self.infer(x);
        }
        self.check(x)?;
        if x.batch() < 2 {
            return Err(Error::invalid("batch norm", "training mode needs a batch of at least 2"));
        }
        let c = self.channels;
        let count = (x.data().len() / c) as f64;
        let mut mean = vec![0.0; c];
        for row in x.data().chunks_exact(c) {
            for j in 0..c {
                mean[j] += row[j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; c];
        for row in x.data().chunks_exact(c) {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        self.inv_std = var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();
        let mut xhat = x.data().to_vec();
        for row in xhat.chunks_exact_mut(c) {
            for j in 0..c {
                row[j] = (row[j] - mean[j]) * self.inv_std[j];
            }
        }
        let mut out = xhat.clone();
        for row in out.chunks_exact_mut(c) {
            for j in 0..c {
                row[j] = self.gamma.value[j] * row[j] + self.beta.value[j];
            }
        }
        for j in 0..c {
            self.running_mean[j] = self.momentum * self.running_mean[j] + (1.0 - self.momentum) * mean[j];
            self.running_var[j] = self.momentum * self.running_var[j] + (1.0 - self.momentum) * var[j];
        }
        self.xhat = xhat;
        self.dims = x.dims();
        Ok(Tensor4::from_parts(x.dims(), out))
    }

    /// Backward through a training-mode forward.
    pub fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        if grad_out.dims() != self.dims {
            return Err(Error::invalid("batch norm backward", "gradient shape does not match the last forward"));
        }
        let c = self.channels;
        let count = (grad_out.data().len() / c) as f64;
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for (g, xh) in grad_out.data().chunks_exact(c).zip(self.xhat.chunks_exact(c)) {
            for j in 0..c {
                sum_g[j] += g[j];
                sum_gx[j] += g[j] * xh[j];
            }
        }
        for j in 0..c {
            self.beta.grad[j] += sum_g[j];
            self.gamma.grad[j] += sum_gx[j];
        }
        let mut gx = vec![0.0; grad_out.data().len()];
        for ((out, g), xh) in gx
            .chunks_exact_mut(c)
            .zip(grad_out.data().chunks_exact(c))
            .zip(self.xhat.chunks_exact(c))
        {
            for j in 0..c {
                let k = self.gamma.value[j] * self.inv_std[j] / count;
                out[j] = k * (count * g[j] - sum_g[j] - xh[j] * sum_gx[j]);
            }
        }
        Ok(Tensor4::from_parts(self.dims, gx))
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.gamma, &mut self.beta]
    }

    pub(crate) fn clear_cache(&mut self) {
        self.xhat = Vec::new();
        self.inv_std = Vec::new();
        self.dims = [0; 4];
    }
}

pub fn relu(x: &Tensor4) -> Tensor4 {
    Tensor4::from_parts(x.dims(), x.data().iter().map(|v| v.max(0.0)).collect())
}

/// Gradient of `relu` given its input.
pub fn relu_backward(input: &Tensor4, grad_out: &Tensor4) -> Tensor4 {
    let g = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
        .collect();
    Tensor4::from_parts(input.dims(), g)
}

/// Inverted dropout: training mode zeroes each value with probability
/// `rate` and scales survivors by `1 / (1 - rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dropout {
    rate: f64,
    mask: Vec<f64>,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        Ok(Self { rate, mask: Vec::new() })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn forward(&mut self, x: &Tensor4, mode: Mode, rng: &mut impl Rng) -> Tensor4 {
        if mode == Mode::Infer || self.rate == 0.0 {
            self.mask = vec![1.0; x.data().len()];
            return x.clone();
        }
        let keep = 1.0 / (1.0 - self.rate);
        self.mask = (0..x.data().len())
            .map(|_| if rng.random::<f64>() < self.rate { 0.0 } else { keep })
            .collect();
        let out = x.data().iter().zip(&self.mask).map(|(v, m)| v * m).collect();
        Tensor4::from_parts(x.dims(), out)
    }

    pub fn backward(&self, grad_out: &Tensor4) -> Tensor4 {
        let g = grad_out.data().iter().zip(&self.mask).map(|(g, m)| g * m).collect();
        Tensor4::from_parts(grad_out.dims(), g)
    }

    pub(crate) fn clear_cache(&mut self) {
        self.mask = Vec::new();
    }
}

/// Fully connected layer on flattened samples. Weights are
/// `inputs x outputs`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    inputs: usize,
    outputs: usize,
    pub weight: Param,
    pub bias: Param,
    input: Vec<f64>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Result<Self> {
        let w = he_normal(inputs * outputs, inputs.max(1), rng);
        Self::from_weights(inputs, outputs, w, vec![0.0; outputs])
    }

    pub fn from_weights(inputs: usize, outputs: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if inputs == 0 || outputs == 0 || weight.len() != inputs * outputs || bias.len() != outputs {
            return Err(Error::invalid("dense", "weight or bias length does not match the shape"));
        }
        Ok(Self {
            inputs,
            outputs,
            weight: Param::new(weight),
            bias: Param::new(bias),
            input: Vec::new(),
        })
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn infer(&self, x: &Tensor4) -> Result<Tensor4> {
        if x.sample_len() != self.inputs {
            return Err(Error::invalid(
                "dense",
                format!("input has {} values per sample, layer expects {}", x.sample_len(), self.inputs),
            ));
        }
        let n = x.batch();
        let mut out = vec![0.0; n * self.outputs];
        for row in out.chunks_exact_mut(self.outputs) {
            row.copy_from_slice(&self.bias.value);
        }
        gemm(n, self.inputs, self.outputs, x.data(), false, &self.weight.value, false, 1.0, &mut out);
        Ok(Tensor4::from_parts([n, 1, 1, self.outputs], out))
    }

    pub fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        let out = self.infer(x)?;
        self.input = x.data().to_vec();
        Ok(out)
    }

    /// Accumulate parameter gradients; the input gradient comes back
    /// flattened as `(batch, 1, 1, inputs)`.
    pub fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let n = grad_out.batch();
        if grad_out.sample_len() != self.outputs || self.input.len() != n * self.inputs {
            return Err(Error::invalid("dense backward", "gradient shape does not match the last forward"));
        }
        let g = grad_out.data();
        gemm(self.inputs, n, self.outputs, &self.input, true, g, false, 1.0, &mut self.weight.grad);
        for row in g.chunks_exact(self.outputs) {
            for (gb, v) in self.bias.grad.iter_mut().zip(row) {
                *gb += v;
            }
        }
        let mut gx = vec![0.0; n * self.inputs];
        gemm(n, self.outputs, self.inputs, g, false, &self.weight.value, true, 0.0, &mut gx);
        Ok(Tensor4::from_parts([n, 1, 1, self.inputs], gx))
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub(crate) fn clear_cache(&mut self) {
        self.input = Vec::new();
    }
}

/// Row-wise softmax of `(batch, 1, 1, classes)` logits, max-subtracted.
pub fn softmax(logits: &Tensor4) -> Vec<f64> {
    let d = logits.sample_len();
    let mut p = logits.data().to_vec();
    for row in p.chunks_exact_mut(d.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    p
}

/// Mean cross-entropy of `labels` under softmax(`logits`).
///
/// Returns the loss, its gradient with respect to the logits
/// (`(p - onehot) / batch`), and the probabilities.
pub fn softmax_cross_entropy(logits: &Tensor4, labels: &[u8]) -> Result<(f64, Tensor4, Vec<f64>)> {
    let n = logits.batch();
    let d = logits.sample_len();
    if labels.len() != n {
        return Err(Error::invalid("cross entropy", format!("{n} logit rows but {} labels", labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l as usize >= d) {
        return Err(Error::invalid("cross entropy", format!("label {l} out of range for {d} classes")));
    }
    let probs = softmax(logits);
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (i, &l) in labels.iter().enumerate() {
        let row = &logits.data()[i * d..(i + 1) * d];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[l as usize];
        grad[i * d + l as usize] -= 1.0;
    }
    let scale = 1.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, Tensor4::from_parts(logits.dims(), grad), probs))
}

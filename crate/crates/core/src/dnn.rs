//! Small deterministic neural-network engine: dense and 2D convolutional
//! layers with exact backpropagation, the autoencoder + feedforward
//! composition used for operator surrogates, its two-term training loss,
//! and the data scaling and reshaping utilities around it.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

use crate::{Error, Result};

/// Dense row-major value container with up to four axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::invalid("tensor data does not match its shape"));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Row-major zero-padded square embedding of a vector, side ceil(sqrt M).
pub fn zero_pad_reshape(v: &DVector<f64>) -> DMatrix<f64> {
    let m = v.len();
    let s = (m as f64).sqrt().ceil() as usize;
    DMatrix::from_fn(s, s, |i, j| {
        let idx = i * s + j;
        if idx < m {
            v[idx]
        } else {
            0.0
        }
    })
}

/// Inverse of `zero_pad_reshape`: read row-major, drop the trailing pad.
pub fn zero_pad_inverse(sq: &DMatrix<f64>, len: usize) -> Result<DVector<f64>> {
    let s = sq.nrows();
    if sq.ncols() != s || s != (len as f64).sqrt().ceil() as usize {
        return Err(Error::invalid(format!(
            "square side {s} does not match vector length {len}"
        )));
    }
    Ok(DVector::from_fn(len, |idx, _| sq[(idx / s, idx % s)]))
}

/// Column-stacking of a matrix into a vector.
pub fn vec_cols(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(a.as_slice())
}

/// Inverse of `vec_cols` for an n x n matrix.
pub fn vec_cols_inverse(v: &DVector<f64>, n: usize) -> Result<DMatrix<f64>> {
    if v.len() != n * n {
        return Err(Error::invalid("vector length is not n^2"));
    }
    Ok(DMatrix::from_column_slice(n, n, v.as_slice()))
}

/// Trainable parameter block with gradient and optimizer moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub w: Vec<f64>,
    pub g: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Param {
    fn new(w: Vec<f64>) -> Self {
        let n = w.len();
        Param { w, g: vec![0.0; n], m: vec![0.0; n], v: vec![0.0; n] }
    }
}

fn init_uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
}

#[derive(Debug, Clone)]
pub enum Layer {
    Dense {
        n_in: usize,
        n_out: usize,
        w: Param,
        b: Param,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        w: Param,
        b: Param,
    },
    Elu,
    /// Nearest-neighbor doubling of both spatial axes.
    Upsample2,
    Flatten,
    Reshape { shape: Vec<usize> },
    /// Keep the top-left h x w window of every channel.
    Crop { h: usize, w: usize },
}

impl Layer {
    pub fn dense(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Layer::Dense {
            n_in,
            n_out,
            w: Param::new(init_uniform(rng, n_in * n_out, n_in, n_out)),
            b: Param::new(vec![0.0; n_out]),
        }
    }

    pub fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let fan_out = out_ch * kernel * kernel;
        Layer::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            w: Param::new(init_uniform(rng, out_ch * fan_in, fan_in, fan_out)),
            b: Param::new(vec![0.0; out_ch]),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense { n_in, n_out, w, b } => {
                if x.numel() != *n_in {
                    return Err(Error::invalid(format!(
                        "dense layer expects {n_in} inputs, got {}",
                        x.numel()
                    )));
                }
                let mut y = vec![0.0; *n_out];
                for o in 0..*n_out {
                    let row = &w.w[o * n_in..(o + 1) * n_in];
                    let mut acc = b.w[o];
                    for i in 0..*n_in {
                        acc += row[i] * x.data[i];
                    }
                    y[o] = acc;
                }
                Tensor::from_vec(&[*n_out], y)
            }
            Layer::Conv2d { in_ch, out_ch, kernel, stride, pad, w, b } => {
                let (c, h, wd) = spatial(x)?;
                if c != *in_ch {
                    return Err(Error::invalid("conv channel mismatch"));
                }
                let ho = conv_out(h, *kernel, *stride, *pad);
                let wo = conv_out(wd, *kernel, *stride, *pad);
                let mut y = Tensor::zeros(&[*out_ch, ho, wo]);
                for o in 0..*out_ch {
                    for i in 0..ho {
                        for j in 0..wo {
                            let mut acc = b.w[o];
                            for cc in 0..c {
                                for u in 0..*kernel {
                                    let r = (i * stride + u) as isize - *pad as isize;
                                    if r < 0 || r as usize >= h {
                                        continue;
                                    }
                                    for v in 0..*kernel {
                                        let s = (j * stride + v) as isize - *pad as isize;
                                        if s < 0 || s as usize >= wd {
                                            continue;
                                        }
                                        acc += w.w[((o * c + cc) * kernel + u) * kernel + v]
                                            * x.data[(cc * h + r as usize) * wd + s as usize];
                                    }
                                }
                            }
                            y.data[(o * ho + i) * wo + j] = acc;
                        }
                    }
                }
                Ok(y)
            }
            Layer::Elu => {
                let mut y = x.clone();
                for v in &mut y.data {
                    if *v < 0.0 {
                        *v = v.exp() - 1.0;
                    }
                }
                Ok(y)
            }
            Layer::Upsample2 => {
                let (c, h, w) = spatial(x)?;
                let mut y = Tensor::zeros(&[c, 2 * h, 2 * w]);
                for cc in 0..c {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            y.data[(cc * 2 * h + i) * 2 * w + j] =
                                x.data[(cc * h + i / 2) * w + j / 2];
                        }
                    }
                }
                Ok(y)
            }
            Layer::Flatten => Tensor::from_vec(&[x.numel()], x.data.clone()),
            Layer::Reshape { shape } => Tensor::from_vec(shape, x.data.clone()),
            Layer::Crop { h, w } => {
                let (c, hi, wi) = spatial(x)?;
                if *h > hi || *w > wi {
                    return Err(Error::invalid("crop larger than input"));
                }
                let mut y = Tensor::zeros(&[c, *h, *w]);
                for cc in 0..c {
                    for i in 0..*h {
                        for j in 0..*w {
                            y.data[(cc * h + i) * w + j] = x.data[(cc * hi + i) * wi + j];
                        }
                    }
                }
                Ok(y)
            }
        }
    }

    /// Input gradient given the forward input and the upstream gradient;
    /// parameter gradients accumulate in place.
    fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense { n_in, n_out, w, b } => {
                let mut dx = Tensor::zeros(&x.shape);
                for o in 0..*n_out {
                    let d = dy.data[o];
                    b.g[o] += d;
                    for i in 0..*n_in {
                        w.g[o * *n_in + i] += d * x.data[i];
                        dx.data[i] += w.w[o * *n_in + i] * d;
                    }
                }
                Ok(dx)
            }
            Layer::Conv2d { in_ch: _, out_ch, kernel, stride, pad, w, b } => {
                let (kernel, stride, pad) = (*kernel, *stride, *pad);
                let (c, h, wd) = spatial(x)?;
                let ho = conv_out(h, kernel, stride, pad);
                let wo = conv_out(wd, kernel, stride, pad);
                let mut dx = Tensor::zeros(&x.shape);
                for o in 0..*out_ch {
                    for i in 0..ho {
                        for j in 0..wo {
                            let d = dy.data[(o * ho + i) * wo + j];
                            b.g[o] += d;
                            for cc in 0..c {
                                for u in 0..kernel {
                                    let r = (i * stride + u) as isize - pad as isize;
                                    if r < 0 || r as usize >= h {
                                        continue;
                                    }
                                    for v in 0..kernel {
                                        let s = (j * stride + v) as isize - pad as isize;
                                        if s < 0 || s as usize >= wd {
                                            continue;
                                        }
                                        let wi = ((o * c + cc) * kernel + u) * kernel + v;
                                        let xi = (cc * h + r as usize) * wd + s as usize;
                                        w.g[wi] += d * x.data[xi];
                                        dx.data[xi] += w.w[wi] * d;
                                    }
                                }
                            }
                        }
                    }
                }
                Ok(dx)
            }
            Layer::Elu => {
                let mut dx = dy.clone();
                dx.shape = x.shape.clone();
                for (d, xv) in dx.data.iter_mut().zip(&x.data) {
                    if *xv < 0.0 {
                        *d *= xv.exp();
                    }
                }
                Ok(dx)
            }
            Layer::Upsample2 => {
                let (c, h, w) = spatial(x)?;
                let mut dx = Tensor::zeros(&x.shape);
                for cc in 0..c {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            dx.data[(cc * h + i / 2) * w + j / 2] +=
                                dy.data[(cc * 2 * h + i) * 2 * w + j];
                        }
                    }
                }
                Ok(dx)
            }
            Layer::Flatten | Layer::Reshape { .. } => {
                Tensor::from_vec(&x.shape, dy.data.clone())
            }
            Layer::Crop { h, w } => {
                let (c, hi, wi) = spatial(x)?;
                let mut dx = Tensor::zeros(&x.shape);
                for cc in 0..c {
                    for i in 0..*h {
                        for j in 0..*w {
                            dx.data[(cc * hi + i) * wi + j] = dy.data[(cc * *h + i) * *w + j];
                        }
                    }
                }
                Ok(dx)
            }
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Dense { w, b, .. } | Layer::Conv2d { w, b, .. } => vec![w, b],
            _ => Vec::new(),
        }
    }

    fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Dense { w, b, .. } | Layer::Conv2d { w, b, .. } => vec![w, b],
            _ => Vec::new(),
        }
    }
}

fn spatial(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape.as_slice() {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(Error::invalid("layer expects a (channels, h, w) tensor")),
    }
}

#[inline]
fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// A feedforward stack of layers.
#[derive(Debug, Clone)]
pub struct Net {
    pub layers: Vec<Layer>,
}

impl Net {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for l in &self.layers {
            cur = l.forward(&cur)?;
        }
        Ok(cur)
    }

    /// All intermediate activations, input first, output last.
    pub fn forward_cached(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for l in &self.layers {
            let next = l.forward(acts.last().unwrap())?;
            acts.push(next);
        }
        Ok(acts)
    }

    /// Backpropagate the upstream gradient, accumulating parameter
    /// gradients; returns the input gradient.
    pub fn backward(&mut self, acts: &[Tensor], dy: &Tensor) -> Result<Tensor> {
        let mut grad = dy.clone();
        for (i, l) in self.layers.iter_mut().enumerate().rev() {
            grad = l.backward(&acts[i], &grad)?;
        }
        Ok(grad)
    }

    pub fn zero_grads(&mut self) {
        for l in &mut self.layers {
            for p in l.params_mut() {
                p.g.iter_mut().for_each(|g| *g = 0.0);
            }
        }
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.params().iter().map(|p| p.w.len()).sum::<usize>())
            .sum()
    }

    /// Flat copy of all weights, layer by layer.
    pub fn weights(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            for p in l.params() {
                out.extend_from_slice(&p.w);
            }
        }
        out
    }

    /// Accumulated parameter gradients, in `weights` order.
    pub fn grads(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            for p in l.params() {
                out.extend_from_slice(&p.g);
            }
        }
        out
    }

    pub fn set_weights(&mut self, w: &[f64]) -> Result<()> {
        let mut idx = 0;
        for l in &mut self.layers {
            for p in l.params_mut() {
                let n = p.w.len();
                if idx + n > w.len() {
                    return Err(Error::invalid("weight vector too short"));
                }
                p.w.copy_from_slice(&w[idx..idx + n]);
                idx += n;
            }
        }
        if idx != w.len() {
            return Err(Error::invalid("weight vector too long"));
        }
        Ok(())
    }
}

/// Copy weights between nets of identical layer shapes.
pub fn copy_weights(src: &Net, dst: &mut Net) -> Result<()> {
    if src.n_params() != dst.n_params() || src.layers.len() != dst.layers.len() {
        return Err(Error::invalid("net shapes differ, cannot transfer weights"));
    }
    dst.set_weights(&src.weights())
}

/// Adaptive moment optimizer over a set of nets.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u32,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0 }
    }

    pub fn step(&mut self, nets: &mut [&mut Net]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for net in nets {
            for l in &mut net.layers {
                for p in l.params_mut() {
                    for i in 0..p.w.len() {
                        p.m[i] = self.beta1 * p.m[i] + (1.0 - self.beta1) * p.g[i];
                        p.v[i] = self.beta2 * p.v[i] + (1.0 - self.beta2) * p.g[i] * p.g[i];
                        let mh = p.m[i] / bc1;
                        let vh = p.v[i] / bc2;
                        p.w[i] -= self.lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

/// Per-entry min-max scaler; constant entries keep unit range so the
/// round trip stays exact.
#[derive(Debug, Clone)]
pub struct MinMaxScaler {
    pub mins: DVector<f64>,
    pub ranges: DVector<f64>,
}

impl MinMaxScaler {
    pub fn fit(samples: &[DVector<f64>]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::invalid("no samples to fit"))?;
        let n = first.len();
        let mut mins = first.clone();
        let mut maxs = first.clone();
        for s in samples {
            if s.len() != n {
                return Err(Error::invalid("inconsistent sample lengths"));
            }
            for i in 0..n {
                mins[i] = mins[i].min(s[i]);
                maxs[i] = maxs[i].max(s[i]);
            }
        }
        let ranges = DVector::from_fn(n, |i, _| {
            let r = maxs[i] - mins[i];
            if r > 0.0 {
                r
            } else {
                1.0
            }
        });
        Ok(MinMaxScaler { mins, ranges })
    }

    pub fn scale(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| (x[i] - self.mins[i]) / self.ranges[i])
    }

    pub fn unscale(&self, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(y.len(), |i, _| y[i] * self.ranges[i] + self.mins[i])
    }
}

/// Normalization of the network input triple (parameters, time, Newton
/// iteration index).
#[derive(Debug, Clone)]
pub struct InputScaler {
    pub mu_lo: [f64; 4],
    pub mu_hi: [f64; 4],
    pub period: f64,
    pub k_max: usize,
}

impl InputScaler {
    /// Normalized 6-vector; the flag reports an out-of-range iteration
    /// index that was clamped.
    pub fn normalize(&self, mu: [f64; 4], t: f64, k: usize) -> ([f64; 6], bool) {
        let mut x = [0.0; 6];
        for i in 0..4 {
            let w = self.mu_hi[i] - self.mu_lo[i];
            x[i] = if w > 0.0 { (mu[i] - self.mu_lo[i]) / w } else { 0.0 };
        }
        x[4] = t / self.period;
        let clamped = k > self.k_max;
        x[5] = k.min(self.k_max) as f64 / self.k_max.max(1) as f64;
        (x, clamped)
    }
}

/// Latent width: the input size of the map, parameters plus time plus
/// iteration index.
pub const LATENT_DIM: usize = 6;

/// Autoencoder pair over s x s single-channel squares with latent width
/// q: three stride-2 convolutions down, mirrored upsample-convolutions
/// back, cropped to the original side.
pub fn make_autoencoder(s: usize, q: usize, seed: u64) -> (Net, Net) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h1 = conv_out(s, 3, 2, 1);
    let h2 = conv_out(h1, 3, 2, 1);
    let h3 = conv_out(h2, 3, 2, 1);
    let encoder = Net {
        layers: vec![
            Layer::Reshape { shape: vec![1, s, s] },
            Layer::conv(1, 8, 3, 2, 1, &mut rng),
            Layer::Elu,
            Layer::conv(8, 16, 3, 2, 1, &mut rng),
            Layer::Elu,
            Layer::conv(16, 32, 3, 2, 1, &mut rng),
            Layer::Elu,
            Layer::Flatten,
            Layer::dense(32 * h3 * h3, q, &mut rng),
        ],
    };
    let decoder = Net {
        layers: vec![
            Layer::dense(q, 32 * h3 * h3, &mut rng),
            Layer::Elu,
            Layer::Reshape { shape: vec![32, h3, h3] },
            Layer::Upsample2,
            Layer::conv(32, 16, 3, 1, 1, &mut rng),
            Layer::Elu,
            Layer::Upsample2,
            Layer::conv(16, 8, 3, 1, 1, &mut rng),
            Layer::Elu,
            Layer::Upsample2,
            Layer::conv(8, 1, 3, 1, 1, &mut rng),
            Layer::Crop { h: s, w: s },
            Layer::Flatten,
        ],
    };
    (encoder, decoder)
}

/// Feedforward branch from the normalized triple to the latent code.
pub fn make_dfnn(q: usize, seed: u64) -> Net {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Net {
        layers: vec![
            Layer::dense(LATENT_DIM, 64, &mut rng),
            Layer::Elu,
            Layer::dense(64, 64, &mut rng),
            Layer::Elu,
            Layer::dense(64, 64, &mut rng),
            Layer::Elu,
            Layer::dense(64, q, &mut rng),
        ],
    }
}

/// One operator surrogate: feedforward branch into the decoder, with the
/// encoder kept for the latent term of the loss and the output scaler
/// mapping network space back to operator entries.
#[derive(Debug, Clone)]
pub struct OperatorMapNet {
    pub encoder: Net,
    pub dfnn: Net,
    pub decoder: Net,
    /// Operator entry count; trailing square padding is dropped.
    pub m_out: usize,
    /// Square side the autoencoder works on.
    pub s: usize,
    pub scaler: MinMaxScaler,
}

impl OperatorMapNet {
    pub fn new(m_out: usize, scaler: MinMaxScaler, seed: u64) -> Self {
        let s = (m_out as f64).sqrt().ceil() as usize;
        let (encoder, decoder) = make_autoencoder(s, LATENT_DIM, seed);
        let dfnn = make_dfnn(LATENT_DIM, seed ^ 0x9e3779b97f4a7c15);
        OperatorMapNet { encoder, dfnn, decoder, m_out, s, scaler }
    }

    /// Scaled-space prediction of the first m_out entries.
    fn predict_scaled(&self, x: &[f64; LATENT_DIM]) -> Result<DVector<f64>> {
        let z = self.dfnn.forward(&Tensor::from_vec(&[LATENT_DIM], x.to_vec())?)?;
        let y = self.decoder.forward(&z)?;
        Ok(DVector::from_fn(self.m_out, |i, _| y.data[i]))
    }

    /// Operator prediction in physical units.
    pub fn predict(&self, x: &[f64; LATENT_DIM]) -> Result<DVector<f64>> {
        Ok(self.scaler.unscale(&self.predict_scaled(x)?))
    }

    /// Encoder input: the scaled target embedded into the square.
    fn encode_target(&self, y_scaled: &DVector<f64>) -> Result<Tensor> {
        let sq = zero_pad_reshape(y_scaled);
        let mut flat = vec![0.0; self.s * self.s];
        for i in 0..self.s {
            for j in 0..self.s {
                flat[i * self.s + j] = sq[(i, j)];
            }
        }
        Tensor::from_vec(&[self.s * self.s], flat)
    }
}

/// Two-term objective: reconstruction through the feedforward branch and
/// agreement of the latent codes, weighted by omega_h.
pub fn dlrom_loss(
    map: &OperatorMapNet,
    xs: &[[f64; LATENT_DIM]],
    ys_scaled: &[DVector<f64>],
    omega_h: f64,
) -> Result<f64> {
    if xs.len() != ys_scaled.len() || xs.is_empty() {
        return Err(Error::invalid("loss needs matching nonempty batches"));
    }
    let mut total = 0.0;
    for (x, y) in xs.iter().zip(ys_scaled) {
        let z = map.dfnn.forward(&Tensor::from_vec(&[LATENT_DIM], x.to_vec())?)?;
        let out = map.decoder.forward(&z)?;
        let rec: f64 = (0..map.m_out).map(|i| (y[i] - out.data[i]).powi(2)).sum();
        let ze = map.encoder.forward(&map.encode_target(y)?)?;
        let lat: f64 = z
            .data
            .iter()
            .zip(&ze.data)
            .map(|(a, b)| (b - a).powi(2))
            .sum();
        total += 0.5 * omega_h * rec + 0.5 * (1.0 - omega_h) * lat;
    }
    Ok(total / xs.len() as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub omega_h: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub val_fraction: f64,
    /// Early-stopping patience in epochs without validation improvement.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            omega_h: 0.5,
            lr: 1e-3,
            epochs: 200,
            batch: 64,
            seed: 0,
            val_fraction: 0.2,
            patience: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainStats {
    pub epochs_run: usize,
    pub best_val: f64,
    pub final_train: f64,
    pub diverged: bool,
    /// Per-epoch (train, validation) loss.
    pub history: Vec<(f64, f64)>,
}

/// Train one operator surrogate. Samples sharing a run id never straddle
/// the train/validation split. Divergence (non-finite loss) stops the
/// session and keeps the best finite checkpoint.
pub fn train_operator_map(
    xs: &[[f64; LATENT_DIM]],
    targets: &[DVector<f64>],
    run_ids: &[usize],
    config: &TrainConfig,
) -> Result<(OperatorMapNet, TrainStats)> {
    train_operator_map_from(xs, targets, run_ids, config, None)
}

/// As `train_operator_map` but optionally starting from transferred
/// weights instead of a fresh initialization.
pub fn train_operator_map_from(
    xs: &[[f64; LATENT_DIM]],
    targets: &[DVector<f64>],
    run_ids: &[usize],
    config: &TrainConfig,
    init: Option<&OperatorMapNet>,
) -> Result<(OperatorMapNet, TrainStats)> {
    if xs.len() != targets.len() || xs.len() != run_ids.len() || xs.is_empty() {
        return Err(Error::invalid("training needs matching nonempty sample lists"));
    }
    if !(0.0..=1.0).contains(&config.omega_h) {
        return Err(Error::invalid("loss weight must lie in [0, 1]"));
    }
    let m_out = targets[0].len();
    let scaler = MinMaxScaler::fit(targets)?;
    let ys: Vec<DVector<f64>> = targets.iter().map(|y| scaler.scale(y)).collect();

    let mut map = OperatorMapNet::new(m_out, scaler, config.seed);
    if let Some(src) = init {
        copy_weights(&src.encoder, &mut map.encoder)?;
        copy_weights(&src.dfnn, &mut map.dfnn)?;
        copy_weights(&src.decoder, &mut map.decoder)?;
    }

    // split whole runs, never iterations of one run
    let mut runs: Vec<usize> = run_ids.to_vec();
    runs.sort_unstable();
    runs.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    shuffle(&mut runs, &mut rng);
    let n_val_runs = if runs.len() > 1 {
        ((runs.len() as f64 * config.val_fraction).round() as usize).clamp(1, runs.len() - 1)
    } else {
        0
    };
    let val_runs: Vec<usize> = runs[..n_val_runs].to_vec();
    let is_val = |rid: usize| val_runs.contains(&rid);
    let train_idx: Vec<usize> = (0..xs.len()).filter(|&i| !is_val(run_ids[i])).collect();
    let val_idx: Vec<usize> = (0..xs.len()).filter(|&i| is_val(run_ids[i])).collect();

    let mut adam = Adam::new(config.lr);
    let mut order = train_idx.clone();
    let mut best = (f64::INFINITY, map.clone());
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut diverged = false;
    let mut epochs_run = 0;

    for _epoch in 0..config.epochs {
        epochs_run += 1;
        shuffle(&mut order, &mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch.max(1)) {
            map.encoder.zero_grads();
            map.dfnn.zero_grads();
            map.decoder.zero_grads();
            let inv_b = 1.0 / chunk.len() as f64;
            for &i in chunk {
                loss_sum += backprop_sample(&mut map, &xs[i], &ys[i], config.omega_h, inv_b)?;
            }
            let mut nets = [&mut map.encoder, &mut map.dfnn, &mut map.decoder];
            adam.step(&mut nets);
        }
        // pre-update minibatch losses, averaged over the epoch
        let train_loss = loss_sum / order.len().max(1) as f64;
        let val_loss = if val_idx.is_empty() {
            train_loss
        } else {
            let vx: Vec<[f64; LATENT_DIM]> = val_idx.iter().map(|&i| xs[i]).collect();
            let vy: Vec<DVector<f64>> = val_idx.iter().map(|&i| ys[i].clone()).collect();
            dlrom_loss(&map, &vx, &vy, config.omega_h)?
        };
        history.push((train_loss, val_loss));
        if !train_loss.is_finite() || !val_loss.is_finite() {
            diverged = true;
            break;
        }
        if val_loss < best.0 {
            best = (val_loss, map.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > config.patience {
                break;
            }
        }
    }

    let final_train = history.last().map(|h| h.0).unwrap_or(f64::INFINITY);
    let stats = TrainStats {
        epochs_run,
        best_val: best.0,
        final_train,
        diverged,
        history,
    };
    Ok((best.1, stats))
}

/// Gradient of one sample's loss contribution through all three nets;
/// returns the sample's loss value at the pre-update weights.
fn backprop_sample(
    map: &mut OperatorMapNet,
    x: &[f64; LATENT_DIM],
    y_scaled: &DVector<f64>,
    omega_h: f64,
    weight: f64,
) -> Result<f64> {
    let x_t = Tensor::from_vec(&[LATENT_DIM], x.to_vec())?;
    let dfnn_acts = map.dfnn.forward_cached(&x_t)?;
    let z = dfnn_acts.last().unwrap().clone();
    let dec_acts = map.decoder.forward_cached(&z)?;
    let out = dec_acts.last().unwrap();
    let enc_in = map.encode_target(y_scaled)?;
    let enc_acts = map.encoder.forward_cached(&enc_in)?;
    let ze = enc_acts.last().unwrap().clone();

    // reconstruction term through the decoder
    let mut d_out = Tensor::zeros(&out.shape);
    let mut rec = 0.0;
    for i in 0..map.m_out {
        let diff = out.data[i] - y_scaled[i];
        rec += diff * diff;
        d_out.data[i] = weight * omega_h * diff;
    }
    let dz_dec = map.decoder.backward(&dec_acts, &d_out)?;

    // latent agreement term into both branches
    let mut dz = dz_dec;
    let mut dze = Tensor::zeros(&ze.shape);
    let mut lat = 0.0;
    for i in 0..z.data.len() {
        let diff = ze.data[i] - z.data[i];
        lat += diff * diff;
        dz.data[i] += weight * (1.0 - omega_h) * (-diff);
        dze.data[i] = weight * (1.0 - omega_h) * diff;
    }
    map.dfnn.backward(&dfnn_acts, &dz)?;
    map.encoder.backward(&enc_acts, &dze)?;
    Ok(0.5 * omega_h * rec + 0.5 * (1.0 - omega_h) * lat)
}

fn shuffle<T>(v: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_reshape_perfect_square_roundtrips() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let sq = zero_pad_reshape(&v);
        assert_eq!(sq.nrows(), 2);
        assert_eq!(sq[(0, 1)], 2.0);
        assert_eq!(sq[(1, 0)], 3.0);
        assert_eq!(zero_pad_inverse(&sq, 4).unwrap(), v);
    }

    #[test]
    fn pad_reshape_63_gives_8x8_with_one_pad() {
        let v = DVector::from_fn(63, |i, _| i as f64 + 1.0);
        let sq = zero_pad_reshape(&v);
        assert_eq!(sq.nrows(), 8);
        assert_eq!(sq[(7, 7)], 0.0, "single trailing pad entry");
        assert_eq!(sq[(7, 6)], 63.0);
        assert_eq!(zero_pad_inverse(&sq, 63).unwrap(), v);
    }

    #[test]
    fn pad_reshape_roundtrips_all_small_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for m in 1..=100 {
            let v = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
            let sq = zero_pad_reshape(&v);
            assert_eq!(zero_pad_inverse(&sq, m).unwrap(), v, "length {m}");
        }
    }

    #[test]
    fn vec_stacks_columns() {
        let id = DMatrix::<f64>::identity(2, 2);
        assert_eq!(vec_cols(&id).as_slice(), &[1.0, 0.0, 0.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        assert_eq!(vec_cols_inverse(&vec_cols(&a), 4).unwrap(), a);

        // index arithmetic: vec(A)[i + n j] = A[(i, j)]
        let b = DMatrix::from_fn(3, 3, |i, j| (3 * i + j) as f64);
        let vb = vec_cols(&b);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(vb[i + 3 * j], b[(i, j)]);
            }
        }
    }

    #[test]
    fn dense_layer_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = Layer::dense(3, 2, &mut rng);
        let x = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = layer.forward(&x).unwrap();
        if let Layer::Dense { w, b, .. } = &layer {
            for o in 0..2 {
                let expect: f64 =
                    b.w[o] + (0..3).map(|i| w.w[o * 3 + i] * x.data[i]).sum::<f64>();
                assert!((y.data[o] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn one_by_one_conv_equals_pixelwise_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let conv = Layer::conv(2, 3, 1, 1, 0, &mut rng);
        let x = Tensor::from_vec(&[2, 4, 4], (0..32).map(|i| (i as f64).sin()).collect()).unwrap();
        let y = conv.forward(&x).unwrap();
        if let Layer::Conv2d { w, b, .. } = &conv {
            for o in 0..3 {
                for i in 0..4 {
                    for j in 0..4 {
                        let expect: f64 = b.w[o]
                            + (0..2)
                                .map(|c| w.w[o * 2 + c] * x.data[(c * 4 + i) * 4 + j])
                                .sum::<f64>();
                        assert!((y.data[(o * 4 + i) * 4 + j] - expect).abs() < 1e-14);
                    }
                }
            }
        }
    }

    /// Central FD check of every parameter gradient of a net under the
    /// scalar loss 0.5 ||f(x) - y||^2.
    fn check_gradients(net: &mut Net, x: &Tensor, rel_tol: f64) {
        let acts = net.forward_cached(x).unwrap();
        let out = acts.last().unwrap().clone();
        let y: Vec<f64> = out.data.iter().map(|v| v + 0.3).collect();
        let loss = |net: &Net| -> f64 {
            let o = net.forward(x).unwrap();
            0.5 * o.data.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        };
        net.zero_grads();
        let mut dy = out.clone();
        for (d, t) in dy.data.iter_mut().zip(&y) {
            *d -= t;
        }
        net.backward(&acts, &dy).unwrap();

        let analytic: Vec<f64> = net
            .layers
            .iter()
            .flat_map(|l| l.params().into_iter().flat_map(|p| p.g.clone()))
            .collect();
        let mut weights = net.weights();
        let h = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..60 {
            let i = rng.gen_range(0..weights.len());
            let orig = weights[i];
            weights[i] = orig + h;
            net.set_weights(&weights).unwrap();
            let lp = loss(net);
            weights[i] = orig - h;
            net.set_weights(&weights).unwrap();
            let lm = loss(net);
            weights[i] = orig;
            net.set_weights(&weights).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let scale = analytic.iter().map(|g| g.abs()).fold(0.0, f64::max);
            assert!(
                (analytic[i] - fd).abs() < rel_tol * scale.max(1e-8),
                "param {i}: analytic {} vs FD {fd}",
                analytic[i]
            );
        }
    }

    #[test]
    fn dense_stack_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = Net {
            layers: vec![
                Layer::dense(4, 7, &mut rng),
                Layer::Elu,
                Layer::dense(7, 5, &mut rng),
                Layer::Elu,
                Layer::dense(5, 3, &mut rng),
            ],
        };
        let x = Tensor::from_vec(&[4], vec![0.3, -0.8, 1.2, 0.1]).unwrap();
        check_gradients(&mut net, &x, 1e-4);
    }

    #[test]
    fn conv_stack_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut net = Net {
            layers: vec![
                Layer::Reshape { shape: vec![1, 5, 5] },
                Layer::conv(1, 3, 3, 2, 1, &mut rng),
                Layer::Elu,
                Layer::Upsample2,
                Layer::conv(3, 2, 3, 1, 1, &mut rng),
                Layer::Crop { h: 5, w: 5 },
                Layer::Flatten,
                Layer::dense(50, 4, &mut rng),
            ],
        };
        let x = Tensor::from_vec(&[25], (0..25).map(|i| (i as f64 * 0.7).cos()).collect())
            .unwrap();
        check_gradients(&mut net, &x, 1e-4);
    }

    #[test]
    fn autoencoder_shapes_compose() {
        for s in [1usize, 2, 3, 5, 8, 13] {
            let (enc, dec) = make_autoencoder(s, LATENT_DIM, 9);
            let x = Tensor::from_vec(&[s * s], vec![0.1; s * s]).unwrap();
            let z = enc.forward(&x).unwrap();
            assert_eq!(z.shape, vec![LATENT_DIM], "side {s}");
            let y = dec.forward(&z).unwrap();
            assert_eq!(y.shape, vec![s * s], "side {s}");
            assert!(y.data.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn loss_zero_at_perfect_fit_and_affine_in_weight() {
        let scaler = MinMaxScaler {
            mins: DVector::zeros(3),
            ranges: DVector::from_element(3, 1.0),
        };
        let map = OperatorMapNet::new(3, scaler, 17);
        let x = [0.2, 0.4, 0.6, 0.8, 0.5, 0.0];
        // target manufactured from the net itself: exact fit, zero loss
        let z = map
            .dfnn
            .forward(&Tensor::from_vec(&[LATENT_DIM], x.to_vec()).unwrap())
            .unwrap();
        let out = map.decoder.forward(&z).unwrap();
        let y = DVector::from_fn(3, |i, _| out.data[i]);
        let l_rec = dlrom_loss(&map, &[x], &[y.clone()], 1.0).unwrap();
        assert!(l_rec < 1e-28, "perfect reconstruction must cost nothing");

        // affine in omega_h: the midpoint is the average of the endpoints
        let y2 = DVector::from_vec(vec![0.3, -0.2, 0.9]);
        let l0 = dlrom_loss(&map, &[x], &[y2.clone()], 0.0).unwrap();
        let l1 = dlrom_loss(&map, &[x], &[y2.clone()], 1.0).unwrap();
        let lh = dlrom_loss(&map, &[x], &[y2], 0.5).unwrap();
        assert!((lh - 0.5 * (l0 + l1)).abs() < 1e-12);
    }

    #[test]
    fn loss_ignores_encoder_when_fully_reconstructive() {
        let scaler = MinMaxScaler {
            mins: DVector::zeros(4),
            ranges: DVector::from_element(4, 1.0),
        };
        let mut map = OperatorMapNet::new(4, scaler, 18);
        let x = [0.1, 0.9, 0.5, 0.3, 0.2, 1.0];
        let y = DVector::from_vec(vec![0.4, 0.1, -0.3, 0.8]);
        let before = dlrom_loss(&map, &[x], &[y.clone()], 1.0).unwrap();
        // perturb the encoder: with omega_h = 1 the loss cannot change
        let mut w = map.encoder.weights();
        for v in &mut w {
            *v += 0.37;
        }
        map.encoder.set_weights(&w).unwrap();
        let after = dlrom_loss(&map, &[x], &[y], 1.0).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn loss_matches_hand_computation() {
        // scalar everything: m_out = 1, all nets overwritten to known
        // affine maps so the two terms can be followed by hand
        let scaler = MinMaxScaler {
            mins: DVector::zeros(1),
            ranges: DVector::from_element(1, 1.0),
        };
        let mut map = OperatorMapNet::new(1, scaler, 19);
        // make each branch an exact linear map by zeroing and setting
        let zero_enc = vec![0.0; map.encoder.n_params()];
        map.encoder.set_weights(&zero_enc).unwrap();
        let zero_dec = vec![0.0; map.decoder.n_params()];
        map.decoder.set_weights(&zero_dec).unwrap();
        let zero_dfnn = vec![0.0; map.dfnn.n_params()];
        map.dfnn.set_weights(&zero_dfnn).unwrap();

        // all-zero nets: F(x) = 0, D(0) = 0, E(y) = 0
        let x = [0.5; 6];
        let y = DVector::from_vec(vec![0.8]);
        // L = w/2 (0.8)^2 + (1-w)/2 * 0
        let l = dlrom_loss(&map, &[x], &[y], 0.25).unwrap();
        assert!((l - 0.25 * 0.5 * 0.64).abs() < 1e-14, "loss {l}");
    }

    #[test]
    fn scaler_roundtrips_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let samples: Vec<DVector<f64>> = (0..30)
            .map(|_| DVector::from_fn(7, |i, _| if i == 3 { 4.2 } else { rng.gen_range(-9.0..9.0) }))
            .collect();
        // entry 3 is constant: unit range keeps the inverse exact
        let scaler = MinMaxScaler::fit(&samples).unwrap();
        for s in &samples {
            let back = scaler.unscale(&scaler.scale(s));
            assert!((s - back).amax() < 1e-12);
            let sc = scaler.scale(s);
            for i in 0..7 {
                assert!((-1e-12..=1.0 + 1e-12).contains(&sc[i]) || i == 3);
            }
        }
    }

    #[test]
    fn input_scaler_clamps_iteration_index() {
        let sc = InputScaler {
            mu_lo: [0.0, 0.0, 0.0, 0.0],
            mu_hi: [2.0, 4.0, 8.0, 1.0],
            period: 0.8,
            k_max: 5,
        };
        let (x, clamped) = sc.normalize([1.0, 1.0, 2.0, 0.5], 0.4, 3);
        assert!(!clamped);
        assert_eq!(x, [0.5, 0.25, 0.25, 0.5, 0.5, 0.6]);
        let (x2, clamped2) = sc.normalize([1.0, 1.0, 2.0, 0.5], 0.4, 9);
        assert!(clamped2);
        assert_eq!(x2[5], 1.0);
    }

    #[test]
    fn training_memorizes_a_single_sample() {
        let x = [[0.3, 0.6, 0.1, 0.9, 0.5, 0.0]; 4];
        let y = DVector::from_vec(vec![0.7, -0.4, 1.3, 0.2, -1.0]);
        let targets = vec![y.clone(); 4];
        let runs = vec![0usize; 4];
        let config = TrainConfig {
            epochs: 4000,
            patience: 4000,
            lr: 3e-3,
            ..TrainConfig::default()
        };
        let (map, stats) = train_operator_map(&x, &targets, &runs, &config).unwrap();
        assert!(
            stats.best_val < 1e-6,
            "memorization stalled at loss {:.3e}",
            stats.best_val
        );
        let pred = map.predict(&x[0]).unwrap();
        assert!((pred - y).amax() < 1e-2);
        assert!(!stats.diverged);
    }

    #[test]
    fn training_learns_a_linear_generator() {
        // targets rho = A mu + b t over a grid of runs; held-out runs
        // must be predicted to percent accuracy
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = DMatrix::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0));
        let b = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut runs = Vec::new();
        for run in 0..40 {
            let mu = [
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
            ];
            for step in 0..12 {
                let t = step as f64 / 12.0;
                let mv = DVector::from_row_slice(&mu);
                let y = &a * mv + t * &b;
                xs.push([mu[0], mu[1], mu[2], mu[3], t, 0.0]);
                ys.push(y);
                runs.push(run);
            }
        }
        let config = TrainConfig {
            epochs: 1500,
            patience: 300,
            lr: 2e-3,
            seed: 3,
            omega_h: 0.9,
            ..TrainConfig::default()
        };
        let (map, stats) = train_operator_map(&xs, &ys, &runs, &config).unwrap();
        assert!(!stats.diverged);

        let mut num = 0.0;
        let mut den = 0.0;
        for probe in 0..20 {
            let mu = [
                (probe as f64 * 0.047) % 1.0,
                (probe as f64 * 0.013 + 0.31) % 1.0,
                (probe as f64 * 0.029 + 0.77) % 1.0,
                (probe as f64 * 0.059 + 0.11) % 1.0,
            ];
            let t = (probe as f64 * 0.083) % 1.0;
            let truth = &a * DVector::from_row_slice(&mu) + t * &b;
            let pred = map.predict(&[mu[0], mu[1], mu[2], mu[3], t, 0.0]).unwrap();
            num += (&pred - &truth).norm();
            den += truth.norm();
        }
        let rel = num / den;
        assert!(rel < 1e-2, "held-out relative error {rel:.3e}");
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut runs = Vec::new();
        for run in 0..6 {
            for step in 0..5 {
                xs.push([
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    step as f64 / 5.0,
                    0.0,
                ]);
                ys.push(DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0)));
                runs.push(run);
            }
        }
        let config = TrainConfig { epochs: 25, ..TrainConfig::default() };
        let (m1, _) = train_operator_map(&xs, &ys, &runs, &config).unwrap();
        let (m2, _) = train_operator_map(&xs, &ys, &runs, &config).unwrap();
        assert_eq!(m1.dfnn.weights(), m2.dfnn.weights());
        assert_eq!(m1.decoder.weights(), m2.decoder.weights());
        assert_eq!(m1.encoder.weights(), m2.encoder.weights());
    }

    #[test]
    fn weight_transfer_copies_and_rejects_mismatch() {
        let src = OperatorMapNet::new(
            9,
            MinMaxScaler { mins: DVector::zeros(9), ranges: DVector::from_element(9, 1.0) },
            31,
        );
        let mut dst = OperatorMapNet::new(
            9,
            MinMaxScaler { mins: DVector::zeros(9), ranges: DVector::from_element(9, 1.0) },
            77,
        );
        copy_weights(&src.dfnn, &mut dst.dfnn).unwrap();
        copy_weights(&src.encoder, &mut dst.encoder).unwrap();
        copy_weights(&src.decoder, &mut dst.decoder).unwrap();
        let x = [0.4, 0.2, 0.9, 0.1, 0.6, 0.8];
        assert_eq!(src.predict(&x).unwrap(), dst.predict(&x).unwrap());

        // different square side -> different layer shapes
        let other = OperatorMapNet::new(
            100,
            MinMaxScaler {
                mins: DVector::zeros(100),
                ranges: DVector::from_element(100, 1.0),
            },
            31,
        );
        assert!(copy_weights(&other.decoder, &mut dst.decoder).is_err());
    }
}

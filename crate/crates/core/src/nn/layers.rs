use rand::Rng;

use super::{gemm, Buffer, Ctx, Init, Param, Scalar, Tensor};

pub trait Layer<S: Scalar>: Send {
    fn forward(&mut self, x: Tensor<S>, ctx: &mut Ctx) -> Tensor<S>;

    /// Evaluation-mode forward pass that caches nothing.
    fn infer(&self, x: Tensor<S>) -> Tensor<S>;

    /// Gradient with respect to the input of the most recent `forward`.
    fn backward(&mut self, grad: Tensor<S>) -> Tensor<S>;

    fn params(&self) -> Vec<&Param<S>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        Vec::new()
    }

    fn buffers(&self) -> Vec<&Buffer<S>> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<S>> {
        Vec::new()
    }
}

/// Fully connected layer, `y = x·Wᵀ + b` over a `B×in` input.
pub struct Linear<S> {
    pub in_features: usize,
    pub out_features: usize,
    weight: Param<S>,
    bias: Param<S>,
    input: Option<Tensor<S>>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(
        in_features: usize,
        out_features: usize,
        weight_init: Init,
        bias_init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let w = weight_init.sample(in_features * out_features, in_features, out_features, rng);
        let b = bias_init.sample(out_features, in_features, out_features, rng);
        Linear {
            in_features,
            out_features,
            weight: Param::new("weight", vec![out_features, in_features], w),
            bias: Param::new("bias", vec![out_features], b),
            input: None,
        }
    }

    /// Default initialisation of the common deep-learning frameworks: `U(±1/√in)`.
    pub fn uniform_fan_in(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        Self::new(in_features, out_features, Init::Uniform { bound }, Init::Uniform { bound }, rng)
    }

    fn compute(&self, x: &Tensor<S>) -> Tensor<S> {
        let batch = x.batch();
        assert_eq!(x.len(), batch * self.in_features, "linear input width");
        let mut out = Vec::with_capacity(batch * self.out_features);
        for _ in 0..batch {
            out.extend_from_slice(&self.bias.value);
        }
        gemm(batch, self.in_features, self.out_features, x.data(), false, &self.weight.value, true, S::one(), &mut out);
        Tensor::new(vec![batch, self.out_features], out)
    }
}

impl<S: Scalar> Layer<S> for Linear<S> {
    fn forward(&mut self, x: Tensor<S>, _ctx: &mut Ctx) -> Tensor<S> {
        let y = self.compute(&x);
        self.input = Some(x);
        y
    }

    fn infer(&self, x: Tensor<S>) -> Tensor<S> {
        self.compute(&x)
    }

    fn backward(&mut self, grad: Tensor<S>) -> Tensor<S> {
        let x = self.input.take().expect("backward before forward");
        let batch = x.batch();
        gemm(
            self.out_features,
            batch,
            self.in_features,
            grad.data(),
            true,
            x.data(),
            false,
            S::one(),
            &mut self.weight.grad,
        );
        for row in grad.data().chunks(self.out_features) {
            for (g, &v) in self.bias.grad.iter_mut().zip(row) {
                *g += v;
            }
        }
        let mut dx = vec![S::zero(); batch * self.in_features];
        gemm(
            batch,
            self.out_features,
            self.in_features,
            grad.data(),
            false,
            &self.weight.value,
            false,
            S::zero(),
            &mut dx,
        );
        Tensor::new(x.shape().to_vec(), dx)
    }

    fn params(&self) -> Vec<&Param<S>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// 2-D convolution over `B×C×H×W` via im2col.
pub struct Conv2d<S> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    weight: Param<S>,
    bias: Param<S>,
    input: Option<Tensor<S>>,
}

impl<S: Scalar> Conv2d<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weight_init: Init,
        bias_init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let fan_out = out_channels * kernel * kernel;
        let w = weight_init.sample(out_channels * fan_in, fan_in, fan_out, rng);
        let b = bias_init.sample(out_channels, fan_in, fan_out, rng);
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::new("weight", vec![out_channels, in_channels, kernel, kernel], w),
            bias: Param::new("bias", vec![out_channels], b),
            input: None,
        }
    }

    pub fn output_size(&self, size: usize) -> usize {
        (size + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1
    }

    /// Output columns `[lo, hi)` whose input column `ow·s − p + kj` lies inside `[0, w)`.
    fn valid_cols(&self, kj: usize, w: usize, wo: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.padding as isize);
        let first = p - kj as isize;
        let lo = if first <= 0 { 0 } else { ((first + s - 1) / s) as usize };
        let last = w as isize - 1 + p - kj as isize;
        let hi = if last < 0 { 0 } else { ((last / s) as usize + 1).min(wo) };
        (lo.min(hi), hi)
    }

    /// Output rows per tile so a column buffer stays cache resident.
    fn tile_rows(wo: usize) -> usize {
        (256 / wo.max(1)).max(1)
    }

    /// Patch columns for output rows `[r0, r1)`; `cols` is `patch × (r1−r0)·wo`.
    #[allow(clippy::too_many_arguments)]
    fn im2col(&self, x: &[S], h: usize, w: usize, wo: usize, r0: usize, r1: usize, cols: &mut [S]) {
        let k = self.kernel;
        let (s, p) = (self.stride, self.padding as isize);
        let span = (r1 - r0) * wo;
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let (lo, hi) = self.valid_cols(kj, w, wo);
                    let row = &mut cols[((c * k + ki) * k + kj) * span..][..span];
                    for oh in r0..r1 {
                        let ih = (oh * s) as isize - p + ki as isize;
                        let dst = &mut row[(oh - r0) * wo..(oh - r0 + 1) * wo];
                        if ih < 0 || ih >= h as isize {
                            dst.fill(S::zero());
                            continue;
                        }
                        let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                        dst[..lo].fill(S::zero());
                        dst[hi..].fill(S::zero());
                        if lo < hi {
                            let start = ((lo * s + kj) as isize - p) as usize;
                            if s == 1 {
                                dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                            } else {
                                for (d, v) in dst[lo..hi].iter_mut().zip(src[start..].iter().step_by(s)) {
                                    *d = *v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add the inverse of [`Self::im2col`] for output rows `[r0, r1)`.
    #[allow(clippy::too_many_arguments)]
    fn col2im(&self, cols: &[S], h: usize, w: usize, wo: usize, r0: usize, r1: usize, dx: &mut [S]) {
        let k = self.kernel;
        let (s, p) = (self.stride, self.padding as isize);
        let span = (r1 - r0) * wo;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let (lo, hi) = self.valid_cols(kj, w, wo);
                    if lo >= hi {
                        continue;
                    }
                    let row = &cols[((c * k + ki) * k + kj) * span..][..span];
                    let start = ((lo * s + kj) as isize - p) as usize;
                    for oh in r0..r1 {
                        let ih = (oh * s) as isize - p + ki as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                        let base = (oh - r0) * wo;
                        let src = &row[base + lo..base + hi];
                        if s == 1 {
                            for (d, v) in dst[start..start + hi - lo].iter_mut().zip(src) {
                                *d += *v;
                            }
                        } else {
                            for (d, v) in dst[start..].iter_mut().step_by(s).zip(src) {
                                *d += *v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn compute(&self, x: &Tensor<S>) -> Tensor<S> {
        let &[batch, c, h, w] = x.shape() else { panic!("conv expects 4-D input, got {:?}", x.shape()) };
        assert_eq!(c, self.in_channels, "conv input channels");
        let (ho, wo) = (self.output_size(h), self.output_size(w));
        let patch = self.in_channels * self.kernel * self.kernel;
        let tile = Self::tile_rows(wo);
        let mut cols = vec![S::zero(); patch * tile * wo];
        let plane_len = ho * wo;
        let mut out = vec![S::zero(); batch * self.out_channels * plane_len];
        for (i, y) in out.chunks_mut(self.out_channels * plane_len).enumerate() {
            for (o, plane) in y.chunks_mut(plane_len).enumerate() {
                plane.iter_mut().for_each(|v| *v = self.bias.value[o]);
            }
            let xs = x.sample(i);
            let mut r0 = 0;
            while r0 < ho {
                let r1 = (r0 + tile).min(ho);
                let span = (r1 - r0) * wo;
                self.im2col(xs, h, w, wo, r0, r1, &mut cols[..patch * span]);
                // y[o, r0·wo + j] += Σ_p W[o, p]·cols[p, j]
                S::raw_gemm(
                    self.out_channels,
                    patch,
                    span,
                    S::one(),
                    &self.weight.value,
                    patch as isize,
                    1,
                    &cols,
                    span as isize,
                    1,
                    S::one(),
                    &mut y[r0 * wo..],
                    plane_len as isize,
                    1,
                );
                r0 = r1;
            }
        }
        Tensor::new(vec![batch, self.out_channels, ho, wo], out)
    }
}

impl<S: Scalar> Layer<S> for Conv2d<S> {
    fn forward(&mut self, x: Tensor<S>, _ctx: &mut Ctx) -> Tensor<S> {
        let y = self.compute(&x);
        self.input = Some(x);
        y
    }

    fn infer(&self, x: Tensor<S>) -> Tensor<S> {
        self.compute(&x)
    }

    fn backward(&mut self, grad: Tensor<S>) -> Tensor<S> {
        let x = self.input.take().expect("backward before forward");
        let &[batch, _, h, w] = x.shape() else { unreachable!() };
        let (ho, wo) = (grad.shape()[2], grad.shape()[3]);
        let patch = self.in_channels * self.kernel * self.kernel;
        let plane_len = ho * wo;
        let tile = Self::tile_rows(wo);
        let mut cols = vec![S::zero(); patch * tile * wo];
        let mut dcols = vec![S::zero(); patch * tile * wo];
        let mut dx = vec![S::zero(); x.len()];
        let sample_len = self.in_channels * h * w;
        for i in 0..batch {
            let g = grad.sample(i);
            for (o, plane) in g.chunks(plane_len).enumerate() {
                self.bias.grad[o] += plane.iter().copied().sum::<S>();
            }
            let xs = x.sample(i);
            let dxs = &mut dx[i * sample_len..(i + 1) * sample_len];
            let mut r0 = 0;
            while r0 < ho {
                let r1 = (r0 + tile).min(ho);
                let span = (r1 - r0) * wo;
                let gt = &g[r0 * wo..];
                self.im2col(xs, h, w, wo, r0, r1, &mut cols[..patch * span]);
                // dW[o, p] += Σ_j g[o, j]·cols[p, j]
                S::raw_gemm(
                    self.out_channels,
                    span,
                    patch,
                    S::one(),
                    gt,
                    plane_len as isize,
                    1,
                    &cols,
                    1,
                    span as isize,
                    S::one(),
                    &mut self.weight.grad,
                    patch as isize,
                    1,
                );
                // dcols[p, j] = Σ_o W[o, p]·g[o, j]
                S::raw_gemm(
                    patch,
                    self.out_channels,
                    span,
                    S::one(),
                    &self.weight.value,
                    1,
                    patch as isize,
                    gt,
                    plane_len as isize,
                    1,
                    S::zero(),
                    &mut dcols,
                    span as isize,
                    1,
                );
                self.col2im(&dcols[..patch * span], h, w, wo, r0, r1, dxs);
                r0 = r1;
            }
        }
        Tensor::new(x.shape().to_vec(), dx)
    }

    fn params(&self) -> Vec<&Param<S>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Batch normalisation over the channel axis of `B×C×H×W` (or `B×C`).
pub struct BatchNorm<S> {
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
    gamma: Param<S>,
    beta: Param<S>,
    running_mean: Buffer<S>,
    running_var: Buffer<S>,
    cache: Option<BnCache<S>>,
}

struct BnCache<S> {
    shape: Vec<usize>,
    xhat: Vec<S>,
    inv_std: Vec<S>,
    batch_stats: bool,
}

impl<S: Scalar> BatchNorm<S> {
    pub fn new(channels: usize, momentum: f64, gamma_init: Init, rng: &mut impl Rng) -> Self {
        BatchNorm {
            channels,
            momentum,
            eps: 1e-5,
            gamma: Param::new("gamma", vec![channels], gamma_init.sample(channels, 1, 1, rng)),
            beta: Param::new("beta", vec![channels], vec![S::zero(); channels]),
            running_mean: Buffer { name: "running_mean", value: vec![S::zero(); channels] },
            running_var: Buffer { name: "running_var", value: vec![S::one(); channels] },
            cache: None,
        }
    }

    fn geometry(&self, shape: &[usize]) -> (usize, usize) {
        assert_eq!(shape[1], self.channels, "batch-norm channels");
        (shape[0], shape[2..].iter().product())
    }
}

impl<S: Scalar> Layer<S> for BatchNorm<S> {
    #[allow(clippy::needless_range_loop)]
    fn forward(&mut self, mut x: Tensor<S>, ctx: &mut Ctx) -> Tensor<S> {
        let (batch, spatial) = self.geometry(x.shape());
        let count = batch * spatial;
        let eps = S::lit(self.eps);
        let c_total = self.channels;
        let mut xhat = vec![S::zero(); x.len()];
        let mut inv_std = vec![S::zero(); c_total];
        let batch_stats = ctx.training();
        for c in 0..c_total {
            let (mean, var) = if batch_stats {
                let mut sum = S::zero();
                for b in 0..batch {
                    sum += x.data()[(b * c_total + c) * spatial..][..spatial].iter().copied().sum::<S>();
                }
                let mean = sum / S::lit(count as f64);
                let mut sq = S::zero();
                for b in 0..batch {
                    for &v in &x.data()[(b * c_total + c) * spatial..][..spatial] {
                        sq += (v - mean) * (v - mean);
                    }
                }
                let var = sq / S::lit(count as f64);
                let m = S::lit(self.momentum);
                let unbiased = if count > 1 { sq / S::lit((count - 1) as f64) } else { var };
                self.running_mean.value[c] = (S::one() - m) * self.running_mean.value[c] + m * mean;
                self.running_var.value[c] = (S::one() - m) * self.running_var.value[c] + m * unbiased;
                (mean, var)
            } else {
                (self.running_mean.value[c], self.running_var.value[c])
            };
            let istd = S::one() / (var + eps).sqrt();
            inv_std[c] = istd;
            let (g, bta) = (self.gamma.value[c], self.beta.value[c]);
            for b in 0..batch {
                let off = (b * c_total + c) * spatial;
                for i in off..off + spatial {
                    let h = (x.data()[i] - mean) * istd;
                    xhat[i] = h;
                    x.data_mut()[i] = g * h + bta;
                }
            }
        }
        self.cache = Some(BnCache { shape: x.shape().to_vec(), xhat, inv_std, batch_stats });
        x
    }

    fn infer(&self, mut x: Tensor<S>) -> Tensor<S> {
        let (batch, spatial) = self.geometry(x.shape());
        let eps = S::lit(self.eps);
        for c in 0..self.channels {
            let scale = self.gamma.value[c] / (self.running_var.value[c] + eps).sqrt();
            let shift = self.beta.value[c] - scale * self.running_mean.value[c];
            for b in 0..batch {
                for v in &mut x.data_mut()[(b * self.channels + c) * spatial..][..spatial] {
                    *v = scale * *v + shift;
                }
            }
        }
        x
    }

    fn backward(&mut self, mut grad: Tensor<S>) -> Tensor<S> {
        let cache = self.cache.take().expect("backward before forward");
        let (batch, spatial) = self.geometry(&cache.shape);
        let count = S::lit((batch * spatial) as f64);
        let c_total = self.channels;
        for c in 0..c_total {
            let mut sum_g = S::zero();
            let mut sum_gx = S::zero();
            for b in 0..batch {
                let off = (b * c_total + c) * spatial;
                for i in off..off + spatial {
                    sum_g += grad.data()[i];
                    sum_gx += grad.data()[i] * cache.xhat[i];
                }
            }
            self.gamma.grad[c] += sum_gx;
            self.beta.grad[c] += sum_g;
            let scale = self.gamma.value[c] * cache.inv_std[c];
            for b in 0..batch {
                let off = (b * c_total + c) * spatial;
                for i in off..off + spatial {
                    let g = grad.data()[i];
                    grad.data_mut()[i] = if cache.batch_stats {
                        scale * (g - sum_g / count - cache.xhat[i] * sum_gx / count)
                    } else {
                        scale * g
                    };
                }
            }
        }
        grad
    }

    fn params(&self) -> Vec<&Param<S>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn buffers(&self) -> Vec<&Buffer<S>> {
        vec![&self.running_mean, &self.running_var]
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<S>> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}

/// Elementwise activations; the cache holds the output or input as needed.
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

pub struct Act<S> {
    kind: Activation,
    cache: Option<Tensor<S>>,
}

impl<S: Scalar> Act<S> {
    pub fn new(kind: Activation) -> Self {
        Act { kind, cache: None }
    }
}

impl<S: Scalar> Layer<S> for Act<S> {
    fn infer(&self, x: Tensor<S>) -> Tensor<S> {
        match self.kind {
            Activation::Relu => x.map(|v| v.max(S::zero())),
            Activation::LeakyRelu(slope) => {
                let s = S::lit(slope);
                x.map(|v| if v > S::zero() { v } else { v * s })
            }
            Activation::Tanh => x.map(|v| v.tanh()),
            Activation::Sigmoid => x.map(|v| S::one() / (S::one() + (-v).exp())),
        }
    }

    fn forward(&mut self, x: Tensor<S>, _ctx: &mut Ctx) -> Tensor<S> {
        let y = match self.kind {
            Activation::Relu => {
                let y = x.map(|v| v.max(S::zero()));
                self.cache = Some(y.clone());
                return y;
            }
            Activation::LeakyRelu(slope) => {
                self.cache = Some(x.clone());
                let s = S::lit(slope);
                x.map(|v| if v > S::zero() { v } else { v * s })
            }
            Activation::Tanh => x.map(|v| v.tanh()),
            Activation::Sigmoid => x.map(|v| S::one() / (S::one() + (-v).exp())),
        };
        if matches!(self.kind, Activation::Tanh | Activation::Sigmoid) {
            self.cache = Some(y.clone());
        }
        y
    }

    fn backward(&mut self, mut grad: Tensor<S>) -> Tensor<S> {
        let cache = self.cache.take().expect("backward before forward");
        let one = S::one();
        for (g, &c) in grad.data_mut().iter_mut().zip(cache.data()) {
            *g *= match self.kind {
                Activation::Relu => {
                    if c > S::zero() {
                        one
                    } else {
                        S::zero()
                    }
                }
                Activation::LeakyRelu(slope) => {
                    if c > S::zero() {
                        one
                    } else {
                        S::lit(slope)
                    }
                }
                Activation::Tanh => one - c * c,
                Activation::Sigmoid => c * (one - c),
            };
        }
        grad
    }
}

/// Inverted dropout. With `channelwise` set, whole feature maps are dropped.
pub struct Dropout<S> {
    pub rate: f64,
    pub channelwise: bool,
    mask: Option<Vec<S>>,
}

impl<S: Scalar> Dropout<S> {
    pub fn new(rate: f64, channelwise: bool) -> Self {
        Dropout { rate, channelwise, mask: None }
    }
}

impl<S: Scalar> Layer<S> for Dropout<S> {
    fn forward(&mut self, mut x: Tensor<S>, ctx: &mut Ctx) -> Tensor<S> {
        if !ctx.training() || self.rate == 0.0 {
            self.mask = None;
            return x;
        }
        let keep = S::lit(1.0 / (1.0 - self.rate));
        let group = if self.channelwise && x.shape().len() == 4 { x.shape()[2] * x.shape()[3] } else { 1 };
        let mut mask = Vec::with_capacity(x.len());
        for _ in 0..x.len() / group {
            let m = if ctx.rng.gen::<f64>() < self.rate { S::zero() } else { keep };
            mask.extend(std::iter::repeat_n(m, group));
        }
        for (v, &m) in x.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.mask = Some(mask);
        x
    }

    fn infer(&self, x: Tensor<S>) -> Tensor<S> {
        x
    }

    fn backward(&mut self, mut grad: Tensor<S>) -> Tensor<S> {
        if let Some(mask) = self.mask.take() {
            for (g, m) in grad.data_mut().iter_mut().zip(mask) {
                *g *= m;
            }
        }
        grad
    }
}

/// Nearest-neighbour 2× upsampling.
pub struct Upsample2x;

impl<S: Scalar> Layer<S> for Upsample2x {
    fn forward(&mut self, x: Tensor<S>, _ctx: &mut Ctx) -> Tensor<S> {
        self.infer(x)
    }

    fn infer(&self, x: Tensor<S>) -> Tensor<S> {
        let &[b, c, h, w] = x.shape() else { panic!("upsample expects 4-D input") };
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![S::zero(); b * c * h2 * w2];
        for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(h2 * w2)) {
            for r in 0..h2 {
                for col in 0..w2 {
                    dst[r * w2 + col] = src[(r / 2) * w + col / 2];
                }
            }
        }
        Tensor::new(vec![b, c, h2, w2], out)
    }

    fn backward(&mut self, grad: Tensor<S>) -> Tensor<S> {
        let &[b, c, h2, w2] = grad.shape() else { unreachable!() };
        let (h, w) = (h2 / 2, w2 / 2);
        let mut dx = vec![S::zero(); b * c * h * w];
        for (src, dst) in grad.data().chunks(h2 * w2).zip(dx.chunks_mut(h * w)) {
            for r in 0..h2 {
                for col in 0..w2 {
                    dst[(r / 2) * w + col / 2] += src[r * w2 + col];
                }
            }
        }
        Tensor::new(vec![b, c, h, w], dx)
    }
}

/// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
pub struct MaxPool2 {
    argmax: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2 {
    pub fn new() -> Self {
        MaxPool2 { argmax: None }
    }
}

impl Default for MaxPool2 {
    fn default() -> Self {
        Self::new()
    }
}

impl MaxPool2 {
    fn pool<S: Scalar>(x: &Tensor<S>) -> (Tensor<S>, Vec<usize>) {
        let &[b, c, h, w] = x.shape() else { panic!("pool expects 4-D input") };
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut idx = Vec::with_capacity(b * c * ho * wo);
        for (p, plane) in x.data().chunks(h * w).enumerate() {
            for r in 0..ho {
                for col in 0..wo {
                    let mut best = 2 * r * w + 2 * col;
                    for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                        let i = (2 * r + dr) * w + 2 * col + dc;
                        if plane[i] > plane[best] {
                            best = i;
                        }
                    }
                    out.push(plane[best]);
                    idx.push(p * h * w + best);
                }
            }
        }
        (Tensor::new(vec![b, c, ho, wo], out), idx)
    }
}

impl<S: Scalar> Layer<S> for MaxPool2 {
    fn forward(&mut self, x: Tensor<S>, _ctx: &mut Ctx) -> Tensor<S> {
        let (y, idx) = Self::pool(&x);
        self.argmax = Some((x.shape().to_vec(), idx));
        y
    }

    fn infer(&self, x: Tensor<S>) -> Tensor<S> {
        Self::pool(&x).0
    }

    fn backward(&mut self, grad: Tensor<S>) -> Tensor<S> {
        let (shape, idx) = self.argmax.take().expect("backward before forward");
        let mut dx = Tensor::zeros(shape);
        for (&i, &g) in idx.iter().zip(grad.data()) {
            dx.data_mut()[i] += g;
        }
        dx
    }
}

/// Collapses everything after the batch axis.
pub struct Flatten {
    shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Self {
        Flatten { shape: None }
    }
}

impl Default for Flatten {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Layer<S> for Flatten {
    fn forward(&mut self, x: Tensor<S>, _ctx: &mut Ctx) -> Tensor<S> {
        let b = x.batch();
        let rest = x.len() / b.max(1);
        self.shape = Some(x.shape().to_vec());
        x.reshape(vec![b, rest])
    }

    fn infer(&self, x: Tensor<S>) -> Tensor<S> {
        let b = x.batch();
        let rest = x.len() / b.max(1);
        x.reshape(vec![b, rest])
    }

    fn backward(&mut self, grad: Tensor<S>) -> Tensor<S> {
        grad.reshape(self.shape.take().expect("backward before forward"))
    }
}

/// Layers applied in order. Parameter names are `<layer index>.<param>`.
#[derive(Default)]
pub struct Sequential<S> {
    layers: Vec<Box<dyn Layer<S>>>,
}

impl<S: Scalar> Sequential<S> {
    pub fn new() -> Self {
        Sequential { layers: Vec::new() }
    }

    pub fn push(&mut self, layer: impl Layer<S> + 'static) -> &mut Self {
        self.layers.push(Box::new(layer));
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn named_params(&self) -> Vec<(String, &Param<S>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params().into_iter().map(move |p| (format!("{i}.{}", p.name), p)))
            .collect()
    }

    pub fn named_buffers(&self) -> Vec<(String, &Buffer<S>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.buffers().into_iter().map(move |b| (format!("{i}.{}", b.name), b)))
            .collect()
    }

    pub fn named_buffers_mut(&mut self) -> Vec<(String, &mut Buffer<S>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| l.buffers_mut().into_iter().map(move |b| (format!("{i}.{}", b.name), b)))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

impl<S: Scalar> Layer<S> for Sequential<S> {
    fn forward(&mut self, x: Tensor<S>, ctx: &mut Ctx) -> Tensor<S> {
        self.layers.iter_mut().fold(x, |x, l| l.forward(x, ctx))
    }

    fn infer(&self, x: Tensor<S>) -> Tensor<S> {
        self.layers.iter().fold(x, |x, l| l.infer(x))
    }

    fn backward(&mut self, grad: Tensor<S>) -> Tensor<S> {
        self.layers.iter_mut().rev().fold(grad, |g, l| l.backward(g))
    }

    fn params(&self) -> Vec<&Param<S>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn buffers(&self) -> Vec<&Buffer<S>> {
        self.layers.iter().flat_map(|l| l.buffers()).collect()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<S>> {
        self.layers.iter_mut().flat_map(|l| l.buffers_mut()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ctx(mode: Mode) -> Ctx {
        Ctx::new(mode, ChaCha8Rng::seed_from_u64(0))
    }

    /// Central-difference check of d(sum(w ⊙ layer(x)))/dx against backward.
    fn check_input_grad(layer: &mut dyn Layer<f64>, x: Tensor<f64>, mode: Mode) {
        let mut c = ctx(mode);
        let y = layer.forward(x.clone(), &mut c);
        let weights: Vec<f64> = (0..y.len()).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let dx = layer.backward(Tensor::new(y.shape().to_vec(), weights.clone()));
        let h = 1e-6;
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            let fp: f64 = layer.forward(plus, &mut ctx(mode)).data().iter().zip(&weights).map(|(a, b)| a * b).sum();
            let fm: f64 = layer.forward(minus, &mut ctx(mode)).data().iter().zip(&weights).map(|(a, b)| a * b).sum();
            let numeric = (fp - fm) / (2.0 * h);
            assert!((numeric - dx.data()[i]).abs() < 1e-6, "input {i}: numeric {numeric} vs analytic {}", dx.data()[i]);
        }
    }

    fn input(shape: Vec<usize>) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| ((i * 37 % 17) as f64 - 8.0) / 7.0 + 0.013 * i as f64).collect())
    }

    #[test]
    fn conv_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::<f64>::new(
            2,
            3,
            3,
            2,
            1,
            Init::Normal { mean: 0.0, std: 0.5 },
            Init::Uniform { bound: 0.1 },
            &mut rng,
        );
        check_input_grad(&mut conv, input(vec![2, 2, 5, 5]), Mode::Train);
        let mut valid = Conv2d::<f64>::new(1, 2, 3, 1, 0, Init::Glorot, Init::Zeros, &mut rng);
        check_input_grad(&mut valid, input(vec![1, 1, 6, 6]), Mode::Train);
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv2d::<f64>::new(
            2,
            2,
            3,
            1,
            1,
            Init::Normal { mean: 0.0, std: 1.0 },
            Init::Normal { mean: 0.0, std: 1.0 },
            &mut rng,
        );
        let x = input(vec![1, 2, 4, 4]);
        let y = conv.forward(x.clone(), &mut ctx(Mode::Eval));
        let w = conv.weight.value.clone();
        let b = conv.bias.value.clone();
        for o in 0..2 {
            for r in 0..4i32 {
                for c in 0..4i32 {
                    let mut acc = b[o];
                    for ci in 0..2 {
                        for ki in 0..3i32 {
                            for kj in 0..3i32 {
                                let (ir, ic) = (r + ki - 1, c + kj - 1);
                                if (0..4).contains(&ir) && (0..4).contains(&ic) {
                                    acc += w[((o * 2 + ci) * 3 + ki as usize) * 3 + kj as usize]
                                        * x.data()[(ci * 4 + ir as usize) * 4 + ic as usize];
                                }
                            }
                        }
                    }
                    assert!((y.data()[(o * 4 + r as usize) * 4 + c as usize] - acc).abs() < 1e-12);
                }
            }
        }
    }

    fn direct_conv(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Vec<f64> {
        let &[batch, ci, h, w] = x.shape() else { unreachable!() };
        let (k, s, p) = (conv.kernel as isize, conv.stride as isize, conv.padding as isize);
        let (ho, wo) = (conv.output_size(h), conv.output_size(w));
        let mut out = Vec::new();
        for b in 0..batch {
            for o in 0..conv.out_channels {
                for r in 0..ho as isize {
                    for c in 0..wo as isize {
                        let mut acc = conv.bias.value[o];
                        for ch in 0..ci {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let (ir, ic) = (r * s - p + ki, c * s - p + kj);
                                    if (0..h as isize).contains(&ir) && (0..w as isize).contains(&ic) {
                                        let wi = ((o * ci + ch) * k as usize + ki as usize) * k as usize + kj as usize;
                                        acc += conv.weight.value[wi]
                                            * x.data()[((b * ci + ch) * h + ir as usize) * w + ic as usize];
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn tiled_conv_matches_direct_over_many_tiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (stride, padding) in [(1, 1), (2, 1), (1, 0)] {
            let mut conv = Conv2d::<f64>::new(
                2,
                3,
                3,
                stride,
                padding,
                Init::Normal { mean: 0.0, std: 0.5 },
                Init::Uniform { bound: 0.1 },
                &mut rng,
            );
            let x = input(vec![2, 2, 40, 36]);
            let want = direct_conv(&conv, &x);
            let y = conv.forward(x.clone(), &mut ctx(Mode::Train));
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-10);
            }
            let weights: Vec<f64> = (0..y.len()).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
            let dx = conv.backward(Tensor::new(y.shape().to_vec(), weights.clone()));
            let objective = |conv: &Conv2d<f64>, x: &Tensor<f64>| -> f64 {
                direct_conv(conv, x).iter().zip(&weights).map(|(a, b)| a * b).sum()
            };
            let h = 1e-6;
            for wi in [0, 7, 13, 53] {
                let mut c = Conv2d { weight: conv.weight.clone(), bias: conv.bias.clone(), input: None, ..conv };
                c.weight.value[wi] += h;
                let fp = objective(&c, &x);
                c.weight.value[wi] -= 2.0 * h;
                let fm = objective(&c, &x);
                let numeric = (fp - fm) / (2.0 * h);
                assert!((numeric - conv.weight.grad[wi]).abs() < 1e-5 * numeric.abs().max(1.0));
            }
            for xi in [0, 41, 777, 2879] {
                let mut plus = x.clone();
                plus.data_mut()[xi] += h;
                let mut minus = x.clone();
                minus.data_mut()[xi] -= h;
                let numeric = (objective(&conv, &plus) - objective(&conv, &minus)) / (2.0 * h);
                assert!((numeric - dx.data()[xi]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn batchnorm_input_gradient_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bn = BatchNorm::<f64>::new(3, 0.1, Init::Normal { mean: 1.0, std: 0.2 }, &mut rng);
        check_input_grad(&mut bn, input(vec![2, 3, 2, 2]), Mode::Train);
        check_input_grad(&mut bn, input(vec![2, 3, 2, 2]), Mode::Eval);
    }

    #[test]
    fn batchnorm_train_output_is_normalised() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bn = BatchNorm::<f64>::new(2, 0.1, Init::Normal { mean: 1.0, std: 0.0 }, &mut rng);
        let y = bn.forward(input(vec![4, 2, 3, 3]), &mut ctx(Mode::Train));
        for c in 0..2 {
            let vals: Vec<f64> = (0..4).flat_map(|b| y.data()[(b * 2 + c) * 9..][..9].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 36.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 36.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn linear_upsample_pool_activation_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check_input_grad(&mut Linear::<f64>::uniform_fan_in(6, 4, &mut rng), input(vec![3, 6]), Mode::Train);
        check_input_grad(&mut Upsample2x, input(vec![1, 2, 3, 3]), Mode::Train);
        check_input_grad(&mut MaxPool2::new(), input(vec![1, 2, 5, 4]), Mode::Train);
        check_input_grad(&mut Act::<f64>::new(Activation::Tanh), input(vec![2, 5]), Mode::Train);
        check_input_grad(&mut Act::<f64>::new(Activation::Sigmoid), input(vec![2, 5]), Mode::Train);
        check_input_grad(&mut Act::<f64>::new(Activation::LeakyRelu(0.2)), input(vec![2, 5]), Mode::Train);
    }

    #[test]
    fn dropout_is_identity_in_eval_and_scales_in_train() {
        let mut d = Dropout::<f64>::new(0.5, true);
        let x = Tensor::new(vec![4, 8, 2, 2], vec![1.0; 128]);
        assert_eq!(d.forward(x.clone(), &mut ctx(Mode::Eval)), x);
        let y = d.forward(x, &mut ctx(Mode::Train));
        for plane in y.data().chunks(4) {
            assert!(plane.iter().all(|&v| v == plane[0]));
            assert!(plane[0] == 0.0 || plane[0] == 2.0);
        }
    }
}

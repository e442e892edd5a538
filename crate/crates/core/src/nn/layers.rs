//! Layer kinds with cached activations for the backward pass.

use rand::Rng;

use super::{gemm, Param, Scalar, Tensor};
use crate::error::{Error, Result};

fn he_uniform<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<S> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| S::lit(rng.gen_range(-limit..limit))).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

fn no_cache(kind: &str) -> Error {
    Error::State(format!("{kind}: backward called before forward"))
}

fn check_grad_shape<S: Scalar>(kind: &str, gy: &Tensor<S>, want: &[usize]) -> Result<()> {
    if gy.shape() != want {
        return Err(Error::invalid(format!(
            "{kind}: upstream gradient shape {:?} does not match output shape {want:?}",
            gy.shape()
        )));
    }
    Ok(())
}

/// Fully connected layer, `y = x W^T + b` with `W` of shape `[out, in]`.
#[derive(Debug, Clone)]
pub struct Dense<S> {
    pub weight: Param<S>,
    pub bias: Param<S>,
    input: Option<Tensor<S>>,
}

impl<S: Scalar> Dense<S> {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Dense {
            weight: Param::new(he_uniform(&[outputs, inputs], inputs, rng)),
            bias: Param::new(Tensor::zeros(&[outputs])),
            input: None,
        }
    }

    pub fn from_params(weight: Tensor<S>, bias: Tensor<S>) -> Result<Self> {
        match (weight.shape(), bias.shape()) {
            ([o, _], [ob]) if o == ob => Ok(Dense {
                weight: Param::new(weight),
                bias: Param::new(bias),
                input: None,
            }),
            (w, b) => Err(Error::invalid(format!("dense: weight {w:?} and bias {b:?} disagree"))),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, f) = x.dims2("dense")?;
        let (fin, fout) = (self.inputs(), self.outputs());
        if f != fin {
            return Err(Error::invalid(format!(
                "dense: input shape {:?} does not match weight shape {:?}",
                x.shape(),
                self.weight.value.shape()
            )));
        }
        let mut y = Tensor::zeros(&[n, fout]);
        gemm(n, fin, fout, x.data(), false, self.weight.value.data(), true, y.data_mut(), false);
        for row in y.data_mut().chunks_mut(fout) {
            for (v, b) in row.iter_mut().zip(self.bias.value.data()) {
                *v += *b;
            }
        }
        Ok(y)
    }

    fn backward(&mut self, gy: &Tensor<S>) -> Result<Tensor<S>> {
        let x = self.input.take().ok_or_else(|| no_cache("dense"))?;
        let (n, fin, fout) = (x.batch(), self.inputs(), self.outputs());
        check_grad_shape("dense", gy, &[n, fout])?;
        gemm(fout, n, fin, gy.data(), true, x.data(), false, self.weight.grad.data_mut(), true);
        let gb = self.bias.grad.data_mut();
        for row in gy.data().chunks(fout) {
            for (g, v) in gb.iter_mut().zip(row) {
                *g += *v;
            }
        }
        let mut gx = Tensor::zeros(&[n, fin]);
        gemm(n, fout, fin, gy.data(), false, self.weight.value.data(), false, gx.data_mut(), false);
        Ok(gx)
    }

    fn cast<T: Scalar>(&self) -> Dense<T> {
        Dense {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            input: None,
        }
    }
}

/// Spatial layout of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    ho: usize,
    wo: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeom {
    /// Zero padding as for a size-preserving convolution, then striding:
    /// `out = ceil(in / s)`, with any odd padding pixel placed after.
    fn new(c: usize, h: usize, w: usize, k: usize, s: usize) -> Self {
        let pad = |len: usize| {
            let out = len.div_ceil(s);
            let total = ((out - 1) * s + k).saturating_sub(len);
            (out, total / 2)
        };
        let (ho, pad_top) = pad(h);
        let (wo, pad_left) = pad(w);
        ConvGeom {
            c,
            h,
            w,
            k,
            s,
            ho,
            wo,
            pad_top,
            pad_left,
        }
    }

    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col<S: Scalar>(&self, x: &[S], cols: &mut [S]) {
        let np = self.out_pixels();
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = &mut cols[((ci * self.k + ki) * self.k + kj) * np..][..np];
                    for oh in 0..self.ho {
                        let out = &mut row[oh * self.wo..(oh + 1) * self.wo];
                        let ih = (oh * self.s + ki) as isize - self.pad_top as isize;
                        if ih < 0 || ih >= self.h as isize {
                            out.iter_mut().for_each(|v| *v = S::zero());
                            continue;
                        }
                        let src = &plane[ih as usize * self.w..(ih as usize + 1) * self.w];
                        for (ow, v) in out.iter_mut().enumerate() {
                            let iw = (ow * self.s + kj) as isize - self.pad_left as isize;
                            *v = if iw < 0 || iw >= self.w as isize {
                                S::zero()
                            } else {
                                src[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<S: Scalar>(&self, cols: &[S], dx: &mut [S]) {
        let np = self.out_pixels();
        for ci in 0..self.c {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = &cols[((ci * self.k + ki) * self.k + kj) * np..][..np];
                    for oh in 0..self.ho {
                        let ih = (oh * self.s + ki) as isize - self.pad_top as isize;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[ih as usize * self.w..(ih as usize + 1) * self.w];
                        for (ow, v) in row[oh * self.wo..(oh + 1) * self.wo].iter().enumerate() {
                            let iw = (ow * self.s + kj) as isize - self.pad_left as isize;
                            if iw >= 0 && iw < self.w as isize {
                                dst[iw as usize] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct ConvCache<S> {
    batch: usize,
    geom: ConvGeom,
    cols: Vec<S>,
}

/// 2-D convolution with weight `[out, in, k, k]`, stride `s` and size-preserving
/// zero padding before striding.
#[derive(Debug, Clone)]
pub struct Conv2d<S> {
    pub weight: Param<S>,
    pub bias: Param<S>,
    stride: usize,
    cache: Option<ConvCache<S>>,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(inputs: usize, outputs: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel >= 1 && stride >= 1, "kernel and stride must be positive");
        Conv2d {
            weight: Param::new(he_uniform(
                &[outputs, inputs, kernel, kernel],
                inputs * kernel * kernel,
                rng,
            )),
            bias: Param::new(Tensor::zeros(&[outputs])),
            stride,
            cache: None,
        }
    }

    pub fn from_params(weight: Tensor<S>, bias: Tensor<S>, stride: usize) -> Result<Self> {
        match (weight.shape(), bias.shape()) {
            ([o, _, k1, k2], [ob]) if o == ob && k1 == k2 && stride >= 1 => Ok(Conv2d {
                weight: Param::new(weight),
                bias: Param::new(bias),
                stride,
                cache: None,
            }),
            (w, b) => Err(Error::invalid(format!(
                "conv2d: weight {w:?}, bias {b:?}, stride {stride} are inconsistent"
            ))),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Output `(H, W)` for an input of spatial size `(h, w)`.
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    fn apply(&self, x: &Tensor<S>) -> Result<(Tensor<S>, ConvCache<S>)> {
        let (n, c, h, w) = x.dims4("conv2d")?;
        if c != self.inputs() {
            return Err(Error::invalid(format!(
                "conv2d: input shape {:?} does not match weight shape {:?}",
                x.shape(),
                self.weight.value.shape()
            )));
        }
        let g = ConvGeom::new(c, h, w, self.kernel(), self.stride);
        let (np, patch, o) = (g.out_pixels(), g.patch(), self.outputs());
        let mut cols = vec![S::zero(); n * patch * np];
        let mut y = Tensor::zeros(&[n, o, g.ho, g.wo]);
        let item = c * h * w;
        for i in 0..n {
            let ci = &mut cols[i * patch * np..(i + 1) * patch * np];
            g.im2col(&x.data()[i * item..(i + 1) * item], ci);
            let yi = &mut y.data_mut()[i * o * np..(i + 1) * o * np];
            gemm(o, patch, np, self.weight.value.data(), false, ci, false, yi, false);
            for (row, b) in yi.chunks_mut(np).zip(self.bias.value.data()) {
                row.iter_mut().for_each(|v| *v += *b);
            }
        }
        Ok((
            y,
            ConvCache {
                batch: n,
                geom: g,
                cols,
            },
        ))
    }

    fn backward(&mut self, gy: &Tensor<S>) -> Result<Tensor<S>> {
        let cache = self.cache.take().ok_or_else(|| no_cache("conv2d"))?;
        let g = cache.geom;
        let (n, o) = (cache.batch, self.outputs());
        let (np, patch) = (g.out_pixels(), g.patch());
        check_grad_shape("conv2d", gy, &[n, o, g.ho, g.wo])?;
        let mut gx = Tensor::zeros(&[n, g.c, g.h, g.w]);
        let mut dcols = vec![S::zero(); patch * np];
        let item = g.c * g.h * g.w;
        for i in 0..n {
            let gyi = &gy.data()[i * o * np..(i + 1) * o * np];
            let ci = &cache.cols[i * patch * np..(i + 1) * patch * np];
            gemm(o, np, patch, gyi, false, ci, true, self.weight.grad.data_mut(), true);
            for (gb, row) in self.bias.grad.data_mut().iter_mut().zip(gyi.chunks(np)) {
                *gb += row.iter().copied().sum::<S>();
            }
            gemm(patch, o, np, self.weight.value.data(), true, gyi, false, &mut dcols, false);
            g.col2im(&dcols, &mut gx.data_mut()[i * item..(i + 1) * item]);
        }
        Ok(gx)
    }

    fn cast<T: Scalar>(&self) -> Conv2d<T> {
        Conv2d {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            stride: self.stride,
            cache: None,
        }
    }
}

fn upsample2x<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w) = x.dims4("upsample")?;
    let mut y = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let yd = y.data_mut();
    for (p, plane) in x.data().chunks(h * w).enumerate() {
        let out = &mut yd[p * 4 * h * w..(p + 1) * 4 * h * w];
        for r in 0..h {
            for col in 0..w {
                let v = plane[r * w + col];
                let base = 2 * r * 2 * w + 2 * col;
                out[base] = v;
                out[base + 1] = v;
                out[base + 2 * w] = v;
                out[base + 2 * w + 1] = v;
            }
        }
    }
    Ok(y)
}

fn upsample2x_backward<S: Scalar>(gy: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h2, w2) = gy.dims4("upsample")?;
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Tensor::zeros(&[n, c, h, w]);
    let gxd = gx.data_mut();
    for (p, plane) in gy.data().chunks(h2 * w2).enumerate() {
        for r in 0..h {
            for col in 0..w {
                let base = 2 * r * w2 + 2 * col;
                gxd[p * h * w + r * w + col] = plane[base] + plane[base + 1] + plane[base + w2] + plane[base + w2 + 1];
            }
        }
    }
    Ok(gx)
}

/// Nearest-neighbor 2x resize followed by a 3x3 stride-1 convolution.
#[derive(Debug, Clone)]
pub struct UpsampleConv<S> {
    pub conv: Conv2d<S>,
}

impl<S: Scalar> UpsampleConv<S> {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        UpsampleConv {
            conv: Conv2d::new(inputs, outputs, 3, 1, rng),
        }
    }
}

/// Exponential linear unit with `alpha = 1`.
#[derive(Debug, Clone, Default)]
pub struct Elu<S> {
    output: Option<Tensor<S>>,
}

impl<S: Scalar> Elu<S> {
    pub fn new() -> Self {
        Elu { output: None }
    }

    pub fn value(x: S) -> S {
        if x > S::zero() {
            x
        } else {
            x.exp_m1()
        }
    }

    fn apply(x: &Tensor<S>) -> Tensor<S> {
        let data = x.data().iter().map(|&v| Self::value(v)).collect();
        Tensor::new(x.shape(), data).expect("same shape")
    }

    fn backward(&mut self, gy: &Tensor<S>) -> Result<Tensor<S>> {
        let y = self.output.take().ok_or_else(|| no_cache("elu"))?;
        check_grad_shape("elu", gy, y.shape())?;
        let data = gy
            .data()
            .iter()
            .zip(y.data())
            .map(|(&g, &v)| if v > S::zero() { g } else { g * (v + S::one()) })
            .collect();
        Tensor::new(y.shape(), data)
    }
}

#[derive(Debug, Clone)]
struct BnCache<S> {
    xhat: Tensor<S>,
    inv_std: Vec<S>,
    batch_stats: bool,
}

/// Batch normalization over `N` (rank 2) or `N, H, W` (rank 4) per channel.
#[derive(Debug, Clone)]
pub struct BatchNorm<S> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
    training: bool,
    cache: Option<BnCache<S>>,
}

impl<S: Scalar> BatchNorm<S> {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.9;

    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(Tensor::new(&[channels], vec![S::one(); channels]).expect("shape")),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: vec![S::zero(); channels],
            running_var: vec![S::one(); channels],
            training: true,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// `(N, C, spatial)` view of the input.
    fn layout(&self, x: &Tensor<S>) -> Result<(usize, usize, usize)> {
        let (n, c, sp) = match x.shape() {
            [n, f] => (*n, *f, 1),
            [n, c, h, w] => (*n, *c, h * w),
            s => return Err(Error::invalid(format!("batchnorm expects rank 2 or 4, got {s:?}"))),
        };
        if c != self.channels() {
            return Err(Error::invalid(format!(
                "batchnorm: input shape {:?} does not match {} channels",
                x.shape(),
                self.channels()
            )));
        }
        Ok((n, c, sp))
    }

    fn apply(&self, x: &Tensor<S>, batch_stats: bool) -> Result<(Tensor<S>, BnCache<S>, Vec<S>, Vec<S>)> {
        let (n, c, sp) = self.layout(x)?;
        let count = (n * sp) as f64;
        let eps = S::lit(Self::EPS);
        let (mean, var) = if batch_stats {
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for i in 0..n {
                for ch in 0..c {
                    let seg = &x.data()[(i * c + ch) * sp..][..sp];
                    mean[ch] += seg.iter().map(|v| v.f64()).sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for i in 0..n {
                for ch in 0..c {
                    let seg = &x.data()[(i * c + ch) * sp..][..sp];
                    var[ch] += seg.iter().map(|v| (v.f64() - mean[ch]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count);
            (
                mean.into_iter().map(S::lit).collect::<Vec<S>>(),
                var.into_iter().map(S::lit).collect::<Vec<S>>(),
            )
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * sp;
                let (g, b) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
                for p in off..off + sp {
                    let h = (x.data()[p] - mean[ch]) * inv_std[ch];
                    xhat.data_mut()[p] = h;
                    y.data_mut()[p] = g * h + b;
                }
            }
        }
        Ok((
            y,
            BnCache {
                xhat,
                inv_std,
                batch_stats,
            },
            mean,
            var,
        ))
    }

    fn forward(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (y, cache, mean, var) = self.apply(x, self.training)?;
        if self.training {
            let (n, _, sp) = self.layout(x)?;
            let count = n * sp;
            let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
            let m = S::lit(Self::MOMENTUM);
            let rest = S::one() - m;
            for ch in 0..self.channels() {
                self.running_mean[ch] = m * self.running_mean[ch] + rest * mean[ch];
                self.running_var[ch] = m * self.running_var[ch] + rest * var[ch] * S::lit(unbias);
            }
        }
        self.cache = Some(cache);
        Ok(y)
    }

    fn backward(&mut self, gy: &Tensor<S>) -> Result<Tensor<S>> {
        let cache = self.cache.take().ok_or_else(|| no_cache("batchnorm"))?;
        check_grad_shape("batchnorm", gy, cache.xhat.shape())?;
        let (n, c, sp) = self.layout(&cache.xhat)?;
        let count = S::lit((n * sp) as f64);
        let mut sum_g = vec![S::zero(); c];
        let mut sum_gx = vec![S::zero(); c];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * sp;
                for p in off..off + sp {
                    sum_g[ch] += gy.data()[p];
                    sum_gx[ch] += gy.data()[p] * cache.xhat.data()[p];
                }
            }
        }
        for ch in 0..c {
            self.gamma.grad.data_mut()[ch] += sum_gx[ch];
            self.beta.grad.data_mut()[ch] += sum_g[ch];
        }
        let mut gx = Tensor::zeros(gy.shape());
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * sp;
                let scale = self.gamma.value.data()[ch] * cache.inv_std[ch];
                for p in off..off + sp {
                    gx.data_mut()[p] = if cache.batch_stats {
                        scale / count
                            * (count * gy.data()[p] - sum_g[ch] - cache.xhat.data()[p] * sum_gx[ch])
                    } else {
                        scale * gy.data()[p]
                    };
                }
            }
        }
        Ok(gx)
    }

    fn cast<T: Scalar>(&self) -> BatchNorm<T> {
        BatchNorm {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.iter().map(|v| T::lit(v.f64())).collect(),
            running_var: self.running_var.iter().map(|v| T::lit(v.f64())).collect(),
            training: self.training,
            cache: None,
        }
    }
}

/// `elu(x + bn(conv(elu(bn(conv(x))))))` with 3x3 convolutions.
#[derive(Debug, Clone)]
pub struct ResidualBlock<S> {
    pub conv1: Conv2d<S>,
    pub bn1: BatchNorm<S>,
    act1: Elu<S>,
    pub conv2: Conv2d<S>,
    pub bn2: BatchNorm<S>,
    act_out: Elu<S>,
}

impl<S: Scalar> ResidualBlock<S> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        ResidualBlock {
            conv1: Conv2d::new(channels, channels, 3, 1, rng),
            bn1: BatchNorm::new(channels),
            act1: Elu::new(),
            conv2: Conv2d::new(channels, channels, 3, 1, rng),
            bn2: BatchNorm::new(channels),
            act_out: Elu::new(),
        }
    }
}

/// One network stage.
#[derive(Debug, Clone)]
pub enum Layer<S> {
    Dense(Dense<S>),
    Conv2d(Conv2d<S>),
    UpsampleConv(UpsampleConv<S>),
    Elu(Elu<S>),
    BatchNorm(BatchNorm<S>),
    Residual(Box<ResidualBlock<S>>),
    /// `[N, C, H, W] -> [N, C*H*W]`.
    Flatten(Option<Vec<usize>>),
    /// `[N, C*H*W] -> [N, C, H, W]`.
    Reshape([usize; 3]),
    /// Fixed per-feature `y = x * scale + shift` on `[N, F]`.
    Affine { scale: Vec<S>, shift: Vec<S> },
}

impl<S: Scalar> Layer<S> {
    pub fn elu() -> Self {
        Layer::Elu(Elu::new())
    }

    pub fn flatten() -> Self {
        Layer::Flatten(None)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::UpsampleConv(_) => "upsample2x-conv",
            Layer::Elu(_) => "elu",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Residual(_) => "residual-block",
            Layer::Flatten(_) => "flatten",
            Layer::Reshape(_) => "reshape",
            Layer::Affine { .. } => "affine",
        }
    }

    /// Forward pass that caches what `backward` needs. Batch normalization
    /// uses batch statistics while in training mode.
    pub fn forward(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        match self {
            Layer::Dense(d) => {
                let y = d.apply(x)?;
                d.input = Some(x.clone());
                Ok(y)
            }
            Layer::Conv2d(c) => {
                let (y, cache) = c.apply(x)?;
                c.cache = Some(cache);
                Ok(y)
            }
            Layer::UpsampleConv(u) => {
                let up = upsample2x(x)?;
                let (y, cache) = u.conv.apply(&up)?;
                u.conv.cache = Some(cache);
                Ok(y)
            }
            Layer::Elu(e) => {
                let y = Elu::apply(x);
                e.output = Some(y.clone());
                Ok(y)
            }
            Layer::BatchNorm(b) => b.forward(x),
            Layer::Residual(r) => {
                x.dims4("residual-block")?;
                let (h, cache) = r.conv1.apply(x)?;
                r.conv1.cache = Some(cache);
                let h = r.bn1.forward(&h)?;
                let h = Elu::apply(&h);
                r.act1.output = Some(h.clone());
                let (h, cache) = r.conv2.apply(&h)?;
                r.conv2.cache = Some(cache);
                let mut h = r.bn2.forward(&h)?;
                for (v, s) in h.data_mut().iter_mut().zip(x.data()) {
                    *v += *s;
                }
                let y = Elu::apply(&h);
                r.act_out.output = Some(y.clone());
                Ok(y)
            }
            Layer::Flatten(shape) => {
                x.dims4("flatten")?;
                *shape = Some(x.shape().to_vec());
                x.clone().reshape(&[x.batch(), x.item_len()])
            }
            Layer::Reshape(chw) => reshape_forward(x, chw),
            Layer::Affine { scale, shift } => affine_forward(x, scale, shift),
        }
    }

    /// Evaluation-mode forward pass; never mutates the layer.
    pub fn infer(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        match self {
            Layer::Dense(d) => d.apply(x),
            Layer::Conv2d(c) => Ok(c.apply(x)?.0),
            Layer::UpsampleConv(u) => Ok(u.conv.apply(&upsample2x(x)?)?.0),
            Layer::Elu(_) => Ok(Elu::apply(x)),
            Layer::BatchNorm(b) => Ok(b.apply(x, false)?.0),
            Layer::Residual(r) => {
                x.dims4("residual-block")?;
                let h = r.bn1.apply(&r.conv1.apply(x)?.0, false)?.0;
                let h = Elu::apply(&h);
                let mut h = r.bn2.apply(&r.conv2.apply(&h)?.0, false)?.0;
                for (v, s) in h.data_mut().iter_mut().zip(x.data()) {
                    *v += *s;
                }
                Ok(Elu::apply(&h))
            }
            Layer::Flatten(_) => {
                x.dims4("flatten")?;
                x.clone().reshape(&[x.batch(), x.item_len()])
            }
            Layer::Reshape(chw) => reshape_forward(x, chw),
            Layer::Affine { scale, shift } => affine_forward(x, scale, shift),
        }
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, gy: &Tensor<S>) -> Result<Tensor<S>> {
        match self {
            Layer::Dense(d) => d.backward(gy),
            Layer::Conv2d(c) => c.backward(gy),
            Layer::UpsampleConv(u) => upsample2x_backward(&u.conv.backward(gy)?),
            Layer::Elu(e) => e.backward(gy),
            Layer::BatchNorm(b) => b.backward(gy),
            Layer::Residual(r) => {
                let g = r.act_out.backward(gy)?;
                let h = r.bn2.backward(&g)?;
                let h = r.conv2.backward(&h)?;
                let h = r.act1.backward(&h)?;
                let h = r.bn1.backward(&h)?;
                let mut gx = r.conv1.backward(&h)?;
                for (v, s) in gx.data_mut().iter_mut().zip(g.data()) {
                    *v += *s;
                }
                Ok(gx)
            }
            Layer::Flatten(shape) => {
                let shape = shape.take().ok_or_else(|| no_cache("flatten"))?;
                check_grad_shape("flatten", gy, &[shape[0], shape[1..].iter().product()])?;
                gy.clone().reshape(&shape)
            }
            Layer::Reshape(chw) => {
                let n = gy.batch();
                check_grad_shape("reshape", gy, &[n, chw[0], chw[1], chw[2]])?;
                gy.clone().reshape(&[n, chw.iter().product()])
            }
            Layer::Affine { scale, .. } => {
                let (_, f) = gy.dims2("affine")?;
                if f != scale.len() {
                    return Err(Error::invalid(format!(
                        "affine: gradient shape {:?} does not match {} features",
                        gy.shape(),
                        scale.len()
                    )));
                }
                let data = gy.data().iter().enumerate().map(|(i, &g)| g * scale[i % f]).collect();
                Tensor::new(gy.shape(), data)
            }
        }
    }

    pub fn set_training(&mut self, training: bool) {
        match self {
            Layer::BatchNorm(b) => b.training = training,
            Layer::Residual(r) => {
                r.bn1.training = training;
                r.bn2.training = training;
            }
            _ => {}
        }
    }

    /// Trainable parameters with layer-local names, in a fixed order.
    pub fn params(&self) -> Vec<(&'static str, &Param<S>)> {
        match self {
            Layer::Dense(d) => vec![("weight", &d.weight), ("bias", &d.bias)],
            Layer::Conv2d(c) | Layer::UpsampleConv(UpsampleConv { conv: c }) => {
                vec![("weight", &c.weight), ("bias", &c.bias)]
            }
            Layer::BatchNorm(b) => vec![("gamma", &b.gamma), ("beta", &b.beta)],
            Layer::Residual(r) => vec![
                ("conv1.weight", &r.conv1.weight),
                ("conv1.bias", &r.conv1.bias),
                ("bn1.gamma", &r.bn1.gamma),
                ("bn1.beta", &r.bn1.beta),
                ("conv2.weight", &r.conv2.weight),
                ("conv2.bias", &r.conv2.bias),
                ("bn2.gamma", &r.bn2.gamma),
                ("bn2.beta", &r.bn2.beta),
            ],
            Layer::Elu(_) | Layer::Flatten(_) | Layer::Reshape(_) | Layer::Affine { .. } => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<S>)> {
        match self {
            Layer::Dense(d) => vec![("weight", &mut d.weight), ("bias", &mut d.bias)],
            Layer::Conv2d(c) | Layer::UpsampleConv(UpsampleConv { conv: c }) => {
                vec![("weight", &mut c.weight), ("bias", &mut c.bias)]
            }
            Layer::BatchNorm(b) => vec![("gamma", &mut b.gamma), ("beta", &mut b.beta)],
            Layer::Residual(r) => vec![
                ("conv1.weight", &mut r.conv1.weight),
                ("conv1.bias", &mut r.conv1.bias),
                ("bn1.gamma", &mut r.bn1.gamma),
                ("bn1.beta", &mut r.bn1.beta),
                ("conv2.weight", &mut r.conv2.weight),
                ("conv2.bias", &mut r.conv2.bias),
                ("bn2.gamma", &mut r.bn2.gamma),
                ("bn2.beta", &mut r.bn2.beta),
            ],
            Layer::Elu(_) | Layer::Flatten(_) | Layer::Reshape(_) | Layer::Affine { .. } => vec![],
        }
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffers(&self) -> Vec<(&'static str, &Vec<S>)> {
        match self {
            Layer::BatchNorm(b) => vec![("running_mean", &b.running_mean), ("running_var", &b.running_var)],
            Layer::Residual(r) => vec![
                ("bn1.running_mean", &r.bn1.running_mean),
                ("bn1.running_var", &r.bn1.running_var),
                ("bn2.running_mean", &r.bn2.running_mean),
                ("bn2.running_var", &r.bn2.running_var),
            ],
            Layer::Affine { scale, shift } => vec![("scale", scale), ("shift", shift)],
            _ => vec![],
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Vec<S>)> {
        match self {
            Layer::BatchNorm(b) => vec![
                ("running_mean", &mut b.running_mean),
                ("running_var", &mut b.running_var),
            ],
            Layer::Residual(r) => vec![
                ("bn1.running_mean", &mut r.bn1.running_mean),
                ("bn1.running_var", &mut r.bn1.running_var),
                ("bn2.running_mean", &mut r.bn2.running_mean),
                ("bn2.running_var", &mut r.bn2.running_var),
            ],
            Layer::Affine { scale, shift } => vec![("scale", scale), ("shift", shift)],
            _ => vec![],
        }
    }

    pub fn cast<T: Scalar>(&self) -> Layer<T> {
        match self {
            Layer::Dense(d) => Layer::Dense(d.cast()),
            Layer::Conv2d(c) => Layer::Conv2d(c.cast()),
            Layer::UpsampleConv(u) => Layer::UpsampleConv(UpsampleConv { conv: u.conv.cast() }),
            Layer::Elu(_) => Layer::Elu(Elu::new()),
            Layer::BatchNorm(b) => Layer::BatchNorm(b.cast()),
            Layer::Residual(r) => Layer::Residual(Box::new(ResidualBlock {
                conv1: r.conv1.cast(),
                bn1: r.bn1.cast(),
                act1: Elu::new(),
                conv2: r.conv2.cast(),
                bn2: r.bn2.cast(),
                act_out: Elu::new(),
            })),
            Layer::Flatten(_) => Layer::Flatten(None),
            Layer::Reshape(chw) => Layer::Reshape(*chw),
            Layer::Affine { scale, shift } => Layer::Affine {
                scale: scale.iter().map(|v| T::lit(v.f64())).collect(),
                shift: shift.iter().map(|v| T::lit(v.f64())).collect(),
            },
        }
    }
}

fn affine_forward<S: Scalar>(x: &Tensor<S>, scale: &[S], shift: &[S]) -> Result<Tensor<S>> {
    let (_, f) = x.dims2("affine")?;
    if f != scale.len() || f != shift.len() {
        return Err(Error::invalid(format!(
            "affine: input shape {:?} does not match {} features",
            x.shape(),
            scale.len()
        )));
    }
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v * scale[i % f] + shift[i % f])
        .collect();
    Tensor::new(x.shape(), data)
}

fn reshape_forward<S: Scalar>(x: &Tensor<S>, chw: &[usize; 3]) -> Result<Tensor<S>> {
    let (n, f) = x.dims2("reshape")?;
    if f != chw.iter().product::<usize>() {
        return Err(Error::invalid(format!(
            "reshape: input shape {:?} does not fit {chw:?}",
            x.shape()
        )));
    }
    x.clone().reshape(&[n, chw[0], chw[1], chw[2]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn elu_values_and_slope() {
        assert_eq!(Elu::value(0.0f64), 0.0);
        assert_eq!(Elu::value(1.0f64), 1.0);
        assert_eq!(Elu::value(f64::NEG_INFINITY), -1.0);
        let mut layer = Layer::<f64>::elu();
        layer.forward(&t(&[1, 1], &[-0.5])).unwrap();
        let g = layer.backward(&t(&[1, 1], &[1.0])).unwrap();
        assert!((g.data()[0] - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn dense_scalar_gradient() {
        let mut d = Layer::Dense(Dense::from_params(t(&[1, 1], &[3.0]), t(&[1], &[1.0])).unwrap());
        let y = d.forward(&t(&[1, 1], &[2.0])).unwrap();
        assert_eq!(y.data(), &[7.0]);
        let gx = d.backward(&t(&[1, 1], &[1.0])).unwrap();
        assert_eq!(gx.data(), &[3.0]);
        let grads: Vec<f64> = d.params().iter().map(|(_, p)| p.grad.data()[0]).collect();
        assert_eq!(grads, vec![2.0, 1.0]);
    }

    #[test]
    fn identity_kernel_convolution() {
        let mut w = vec![0.0; 9];
        w[0] = 1.0;
        w[4] = 1.0;
        w[8] = 1.0;
        let conv = Conv2d::from_params(t(&[3, 3, 1, 1], &w), Tensor::zeros(&[3]), 1).unwrap();
        let mut rng = seeded(1);
        let x: Vec<f64> = (0..2 * 3 * 5 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = t(&[2, 3, 5, 4], &x);
        assert_eq!(Layer::Conv2d(conv).infer(&x).unwrap(), x);
    }

    #[test]
    fn strided_output_sizes() {
        let mut rng = seeded(2);
        let conv = Layer::<f32>::Conv2d(Conv2d::new(2, 4, 4, 2, &mut rng));
        let y = conv.infer(&Tensor::zeros(&[1, 2, 16, 32])).unwrap();
        assert_eq!(y.shape(), &[1, 4, 8, 16]);
        let y = conv.infer(&Tensor::zeros(&[1, 2, 7, 5])).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4, 3]);
        let err = conv.infer(&Tensor::zeros(&[1, 3, 8, 8])).unwrap_err().to_string();
        assert!(err.contains("[1, 3, 8, 8]") && err.contains("[4, 2, 4, 4]"), "{err}");
    }

    #[test]
    fn convolution_matches_direct_sum() {
        let mut rng = seeded(3);
        let conv = Conv2d::<f64>::new(2, 3, 3, 2, &mut rng);
        let x: Vec<f64> = (0..2 * 5 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = Layer::Conv2d(conv.clone()).infer(&t(&[1, 2, 5, 6], &x)).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3, 3]);
        // Padding: ho = 3, total = (3-1)*2 + 3 - 5 = 2, top = 1; same for width (total 1, left 0).
        let w = conv.weight.value.data();
        for o in 0..3 {
            for oh in 0..3 {
                for ow in 0..3 {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let ih = (oh * 2 + ki) as isize - 1;
                                let iw = (ow * 2 + kj) as isize;
                                if (0..5).contains(&ih) && (0..6).contains(&iw) {
                                    acc += w[((o * 2 + c) * 3 + ki) * 3 + kj] * x[(c * 5 + ih as usize) * 6 + iw as usize];
                                }
                            }
                        }
                    }
                    assert!((y.data()[(o * 3 + oh) * 3 + ow] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn batchnorm_normalizes_batch() {
        let mut rng = seeded(4);
        let x: Vec<f64> = (0..4 * 3 * 2 * 2).map(|_| rng.gen_range(-3.0..5.0)).collect();
        let mut bn = Layer::BatchNorm(BatchNorm::new(3));
        let y = bn.forward(&t(&[4, 3, 2, 2], &x)).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|i| y.data()[(i * 3 + ch) * 4..][..4].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 16.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-5);
        }
        bn.set_training(false);
        let a = bn.infer(&t(&[4, 3, 2, 2], &x)).unwrap();
        let b = bn.forward(&t(&[4, 3, 2, 2], &x)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn backward_requires_forward() {
        let mut rng = seeded(5);
        let mut layers: Vec<Layer<f64>> = vec![
            Layer::Dense(Dense::new(2, 2, &mut rng)),
            Layer::Conv2d(Conv2d::new(1, 1, 3, 1, &mut rng)),
            Layer::UpsampleConv(UpsampleConv::new(1, 1, &mut rng)),
            Layer::elu(),
            Layer::BatchNorm(BatchNorm::new(2)),
            Layer::Residual(Box::new(ResidualBlock::new(1, &mut rng))),
            Layer::flatten(),
        ];
        for l in &mut layers {
            let err = l.backward(&Tensor::zeros(&[1, 2])).unwrap_err();
            assert!(matches!(err, Error::State(_)), "{}: {err}", l.kind());
        }
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let mut rng = seeded(6);
        let x: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..2 * 6 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = t(&[1, 2, 3, 4], &x);
        let g = t(&[1, 2, 6, 8], &g);
        let up = upsample2x(&x).unwrap();
        let lhs: f64 = up.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let back = upsample2x_backward(&g).unwrap();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

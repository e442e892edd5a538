//! The lighting autoencoder, the illumination predictor, their losses and
//! training loops.
//!
//! Both networks work in the log domain: the encoder consumes `ln(1 + e)` and
//! the decoder emits `ln(1 + ê)`, so the reconstruction loss is evaluated
//! directly on network outputs.

mod losses;
mod train;

pub use losses::{ae_loss, ip_loss};
pub use train::{train_autoencoder, train_predictor, EpochRecord, TrainConfig, TrainReport, Trained};

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::envmap::{solid_angle_weights, EnvMap, HdrImage};
use crate::error::{Error, Result};
use crate::nn::{Adam, BatchNorm, Checkpoint, Conv2d, Dense, Layer, NamedTensor, ResidualBlock, Scalar, Sequential, Tensor, UpsampleConv};
use crate::render::ObjectObservation;
use crate::rng::seeded;

/// Spatial size of the decoder's seed grid.
pub const SEED_GRID: (usize, usize) = (4, 8);

const KIND_AUTOENCODER: f64 = 1.0;
const KIND_PREDICTOR: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeArch {
    pub height: usize,
    pub width: usize,
    pub latent: usize,
    /// Output channels of the two strided encoder convolutions.
    pub encoder_channels: [usize; 2],
    pub residual_blocks: usize,
    /// Seed-grid channels followed by the outputs of all but the last
    /// upsampling stage (which always emits RGB).
    pub decoder_channels: Vec<usize>,
}

impl Default for AeArch {
    fn default() -> Self {
        AeArch {
            height: 32,
            width: 64,
            latent: 32,
            encoder_channels: [32, 64],
            residual_blocks: 4,
            decoder_channels: vec![64, 64, 32, 16],
        }
    }
}

impl AeArch {
    pub fn with_size(mut self, height: usize, latent: usize) -> Self {
        self.height = height;
        self.width = 2 * height;
        self.latent = latent;
        self
    }

    /// Number of 2x upsampling stages from the seed grid to full size.
    pub fn upsample_stages(&self) -> usize {
        (self.height / SEED_GRID.0).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.upsample_stages();
        if self.width != 2 * self.height
            || self.height < 2 * SEED_GRID.0
            || self.height % SEED_GRID.0 != 0
            || !(self.height / SEED_GRID.0).is_power_of_two()
        {
            return Err(Error::Config(format!(
                "autoencoder size {}x{} must be H x 2H with H = 4 * 2^k, k >= 1",
                self.height, self.width
            )));
        }
        if self.latent == 0 {
            return Err(Error::Config("latent size must be >= 1".into()));
        }
        if self.encoder_channels.contains(&0) || self.decoder_channels.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.decoder_channels.len() < stages {
            return Err(Error::Config(format!(
                "{stages} upsampling stages need {stages} decoder widths, got {:?}",
                self.decoder_channels
            )));
        }
        Ok(())
    }

    fn to_meta(&self) -> Vec<f64> {
        let mut v = vec![
            self.height as f64,
            self.width as f64,
            self.latent as f64,
            self.encoder_channels[0] as f64,
            self.encoder_channels[1] as f64,
            self.residual_blocks as f64,
        ];
        v.extend(self.decoder_channels.iter().map(|&c| c as f64));
        v
    }

    fn from_meta(v: &[f64]) -> Result<Self> {
        if v.len() < 7 {
            return Err(Error::Config("autoencoder checkpoint metadata is too short".into()));
        }
        let u = |x: f64| x as usize;
        let arch = AeArch {
            height: u(v[0]),
            width: u(v[1]),
            latent: u(v[2]),
            encoder_channels: [u(v[3]), u(v[4])],
            residual_blocks: u(v[5]),
            decoder_channels: v[6..].iter().map(|&x| u(x)).collect(),
        };
        arch.validate()?;
        Ok(arch)
    }

    fn build<S: Scalar>(&self, seed: u64) -> Result<(Sequential<S>, usize)> {
        self.validate()?;
        let mut rng = seeded(seed);
        let [c1, c2] = self.encoder_channels;
        let mut net = Sequential::new();
        net.push("enc.conv1", Layer::Conv2d(Conv2d::new(3, c1, 4, 2, &mut rng)))
            .push("enc.bn1", Layer::BatchNorm(BatchNorm::new(c1)))
            .push("enc.act1", Layer::elu())
            .push("enc.conv2", Layer::Conv2d(Conv2d::new(c1, c2, 4, 2, &mut rng)))
            .push("enc.bn2", Layer::BatchNorm(BatchNorm::new(c2)))
            .push("enc.act2", Layer::elu());
        for i in 0..self.residual_blocks {
            net.push(format!("enc.res{}", i + 1), Layer::Residual(Box::new(ResidualBlock::new(c2, &mut rng))));
        }
        let flat = c2 * (self.height / 4) * (self.width / 4);
        net.push("enc.flatten", Layer::flatten())
            .push("enc.fc", Layer::Dense(Dense::new(flat, self.latent, &mut rng)));
        let encoder_len = net.layers().len();

        let seed_c = self.decoder_channels[0];
        let (gh, gw) = SEED_GRID;
        net.push("dec.fc", Layer::Dense(Dense::new(self.latent, seed_c * gh * gw, &mut rng)))
            .push("dec.reshape", Layer::Reshape([seed_c, gh, gw]))
            .push("dec.bn0", Layer::BatchNorm(BatchNorm::new(seed_c)))
            .push("dec.act0", Layer::elu());
        let stages = self.upsample_stages();
        let mut c = seed_c;
        for s in 1..=stages {
            let out = if s == stages { 3 } else { self.decoder_channels[s] };
            net.push(format!("dec.up{s}"), Layer::UpsampleConv(UpsampleConv::new(c, out, &mut rng)));
            if s < stages {
                net.push(format!("dec.bn{s}"), Layer::BatchNorm(BatchNorm::new(out)))
                    .push(format!("dec.act{s}"), Layer::elu());
            }
            c = out;
        }
        Ok((net, encoder_len))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IpArch {
    /// Side of the square observation.
    pub obs_size: usize,
    pub latent: usize,
    pub conv_channels: [usize; 4],
    pub hidden: usize,
}

impl Default for IpArch {
    fn default() -> Self {
        IpArch {
            obs_size: 128,
            latent: 32,
            conv_channels: [32, 64, 128, 256],
            hidden: 512,
        }
    }
}

impl IpArch {
    pub fn validate(&self) -> Result<()> {
        if self.obs_size == 0 || self.obs_size % 16 != 0 {
            return Err(Error::Config(format!(
                "observation size {} must be a positive multiple of 16",
                self.obs_size
            )));
        }
        if self.latent == 0 || self.hidden == 0 || self.conv_channels.contains(&0) {
            return Err(Error::Config("predictor widths must be positive".into()));
        }
        Ok(())
    }

    fn to_meta(&self) -> Vec<f64> {
        let mut v = vec![self.obs_size as f64, self.latent as f64, self.hidden as f64];
        v.extend(self.conv_channels.iter().map(|&c| c as f64));
        v
    }

    fn from_meta(v: &[f64]) -> Result<Self> {
        if v.len() != 7 {
            return Err(Error::Config("predictor checkpoint metadata has the wrong length".into()));
        }
        let u = |x: f64| x as usize;
        let arch = IpArch {
            obs_size: u(v[0]),
            latent: u(v[1]),
            hidden: u(v[2]),
            conv_channels: [u(v[3]), u(v[4]), u(v[5]), u(v[6])],
        };
        arch.validate()?;
        Ok(arch)
    }

    fn build<S: Scalar>(&self, seed: u64) -> Result<Sequential<S>> {
        self.validate()?;
        let mut rng = seeded(seed);
        let mut net = Sequential::new();
        let mut c = ObjectObservation::CHANNELS;
        for (i, &out) in self.conv_channels.iter().enumerate() {
            net.push(format!("conv{}", i + 1), Layer::Conv2d(Conv2d::new(c, out, 4, 2, &mut rng)))
                .push(format!("bn{}", i + 1), Layer::BatchNorm(BatchNorm::new(out)))
                .push(format!("act{}", i + 1), Layer::elu());
            c = out;
        }
        let side = self.obs_size / 16;
        net.push("flatten", Layer::flatten())
            .push("fc1", Layer::Dense(Dense::new(c * side * side, self.hidden, &mut rng)))
            .push("bn_fc1", Layer::BatchNorm(BatchNorm::new(self.hidden)))
            .push("act_fc1", Layer::elu())
            .push(
                "fc2",
                Layer::Dense(Dense::from_params(
                    Tensor::zeros(&[self.latent, self.hidden]),
                    Tensor::zeros(&[self.latent]),
                )?),
            )
            .push(
                "out",
                Layer::Affine {
                    scale: vec![S::one(); self.latent],
                    shift: vec![S::zero(); self.latent],
                },
            );
        Ok(net)
    }
}

/// Z-dimensional lighting code.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode(pub Vec<f32>);

impl LatentCode {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("latent code must be finite"));
        }
        Ok(LatentCode(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }
}

/// `ln(1 + e)` in channel-major layout.
pub fn envmap_to_log_planes(env: &EnvMap) -> Vec<f32> {
    let (h, w) = (env.height(), env.width());
    let mut out = vec![0.0f32; 3 * h * w];
    for (p, px) in env.data().chunks_exact(3).enumerate() {
        for ch in 0..3 {
            out[ch * h * w + p] = px[ch].ln_1p() as f32;
        }
    }
    out
}

/// Inverse of [`envmap_to_log_planes`], clamped to nonnegative radiance.
pub fn log_planes_to_envmap<S: Scalar>(planes: &[S], height: usize, width: usize) -> Result<EnvMap> {
    if planes.len() != 3 * height * width {
        return Err(Error::invalid("log planes do not match the envmap size"));
    }
    let mut img = HdrImage::zeros(height, width);
    let n = height * width;
    for (p, px) in img.data_mut().chunks_exact_mut(3).enumerate() {
        for ch in 0..3 {
            px[ch] = planes[ch * n + p].f64().exp_m1().max(0.0);
        }
    }
    EnvMap::from_image(img)
}

/// Per-pixel solid angles for an `H x W` map, row-major.
pub fn pixel_weights(height: usize, width: usize) -> Result<Vec<f64>> {
    Ok(solid_angle_weights(height, width)?.to_vec())
}

fn require_kind(ckpt: &Checkpoint, kind: f64, what: &str) -> Result<()> {
    if ckpt.scalar("meta.kind")? != kind {
        return Err(Error::Config(format!("checkpoint does not hold {what}")));
    }
    Ok(())
}

fn checkpoint_for(net: &Sequential<f32>, kind: f64, meta: Vec<f64>, optimizer: Option<&Adam<f32>>) -> Checkpoint {
    let mut tensors = vec![
        NamedTensor::scalar("meta.kind", kind),
        NamedTensor::from_values("meta.arch", crate::nn::Dtype::F64, &[meta.len()], &meta),
    ];
    tensors.extend(net.export("net"));
    if let Some(adam) = optimizer {
        tensors.extend(adam.export("optim"));
    }
    Checkpoint {
        tensors,
        has_optimizer: optimizer.is_some(),
    }
}

#[derive(Debug, Clone)]
pub struct Autoencoder {
    arch: AeArch,
    net: Sequential<f32>,
    encoder_len: usize,
}

impl Autoencoder {
    pub fn new(arch: AeArch, seed: u64) -> Result<Self> {
        let (net, encoder_len) = arch.build(seed)?;
        Ok(Autoencoder {
            arch,
            net,
            encoder_len,
        })
    }

    pub fn arch(&self) -> &AeArch {
        &self.arch
    }

    pub fn latent(&self) -> usize {
        self.arch.latent
    }

    /// Encoder followed by decoder as one stack.
    pub fn network(&self) -> &Sequential<f32> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Sequential<f32> {
        &mut self.net
    }

    pub fn encoder_len(&self) -> usize {
        self.encoder_len
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn fingerprint(&self) -> String {
        self.net.fingerprint()
    }

    fn check_size(&self, env: &EnvMap) -> Result<()> {
        if env.height() != self.arch.height || env.width() != self.arch.width {
            return Err(Error::invalid(format!(
                "envmap is {}x{}, autoencoder expects {}x{}",
                env.height(),
                env.width(),
                self.arch.height,
                self.arch.width
            )));
        }
        Ok(())
    }

    fn infer_range(&self, range: std::ops::Range<usize>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut h = x.clone();
        for (_, layer) in &self.net.layers()[range] {
            h = layer.infer(&h)?;
        }
        Ok(h)
    }

    /// Latent codes of a batch of log-domain inputs `[N, 3, H, W]`.
    pub fn encode_log(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.infer_range(0..self.encoder_len, x)
    }

    /// Log-domain decoder output `[N, 3, H, W]` for codes `[N, Z]`.
    pub fn decode_log(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.infer_range(self.encoder_len..self.net.layers().len(), z)
    }

    pub fn encode(&self, env: &EnvMap) -> Result<LatentCode> {
        self.check_size(env)?;
        let (h, w) = (self.arch.height, self.arch.width);
        let x = Tensor::new(&[1, 3, h, w], envmap_to_log_planes(env))?;
        LatentCode::new(self.encode_log(&x)?.into_data())
    }

    pub fn decode(&self, z: &LatentCode) -> Result<EnvMap> {
        if z.len() != self.arch.latent {
            return Err(Error::invalid(format!(
                "latent code has {} values, autoencoder expects {}",
                z.len(),
                self.arch.latent
            )));
        }
        let out = self.decode_log(&Tensor::new(&[1, z.len()], z.0.clone())?)?;
        log_planes_to_envmap(out.data(), self.arch.height, self.arch.width)
    }

    pub fn set_training(&mut self, training: bool) {
        self.net.set_training(training);
    }

    pub fn checkpoint(&self, optimizer: Option<&Adam<f32>>) -> Checkpoint {
        checkpoint_for(&self.net, KIND_AUTOENCODER, self.arch.to_meta(), optimizer)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        require_kind(ckpt, KIND_AUTOENCODER, "an autoencoder")?;
        let arch = AeArch::from_meta(&ckpt.require("meta.arch")?.data)?;
        let mut ae = Autoencoder::new(arch, 0)?;
        ae.net.import("net", ckpt)?;
        ae.set_training(false);
        Ok(ae)
    }
}

#[derive(Debug, Clone)]
pub struct Predictor {
    arch: IpArch,
    net: Sequential<f32>,
}

impl Predictor {
    pub fn new(arch: IpArch, seed: u64) -> Result<Self> {
        let net = arch.build(seed)?;
        Ok(Predictor { arch, net })
    }

    pub fn arch(&self) -> &IpArch {
        &self.arch
    }

    pub fn network(&self) -> &Sequential<f32> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Sequential<f32> {
        &mut self.net
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn set_training(&mut self, training: bool) {
        self.net.set_training(training);
    }

    pub fn observation_tensor(&self, obs: &ObjectObservation) -> Result<Tensor<f32>> {
        let s = self.arch.obs_size;
        if obs.size() != s {
            return Err(Error::invalid(format!(
                "observation is {0}x{0}, predictor expects {s}x{s}",
                obs.size()
            )));
        }
        Tensor::new(&[1, ObjectObservation::CHANNELS, s, s], obs.input_channels())
    }

    /// Sets the fixed output map `z = mean + std * u` from target codes `[N, Z]`.
    pub fn set_output_standardization(&mut self, codes: &Tensor<f32>) -> Result<()> {
        let (n, z) = codes.dims2("standardization")?;
        if z != self.arch.latent || n == 0 {
            return Err(Error::invalid("standardization codes do not match the latent size"));
        }
        let mut mean = vec![0.0f64; z];
        let mut var = vec![0.0f64; z];
        for row in codes.data().chunks(z) {
            row.iter().zip(&mut mean).for_each(|(v, m)| *m += *v as f64 / n as f64);
        }
        for row in codes.data().chunks(z) {
            for k in 0..z {
                var[k] += (row[k] as f64 - mean[k]).powi(2) / n as f64;
            }
        }
        let Some((_, Layer::Affine { scale, shift })) = self.net.layers_mut().last_mut() else {
            return Err(Error::State("predictor has no output affine layer".into()));
        };
        for k in 0..z {
            let sd = var[k].sqrt();
            scale[k] = if sd > 1e-6 { sd as f32 } else { 1.0 };
            shift[k] = mean[k] as f32;
        }
        Ok(())
    }

    pub fn predict_latent(&self, obs: &ObjectObservation) -> Result<LatentCode> {
        let x = self.observation_tensor(obs)?;
        LatentCode::new(self.net.infer(&x)?.into_data())
    }

    pub fn checkpoint(&self, optimizer: Option<&Adam<f32>>) -> Checkpoint {
        checkpoint_for(&self.net, KIND_PREDICTOR, self.arch.to_meta(), optimizer)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        require_kind(ckpt, KIND_PREDICTOR, "a predictor")?;
        let arch = IpArch::from_meta(&ckpt.require("meta.arch")?.data)?;
        let mut ip = Predictor::new(arch, 0)?;
        ip.net.import("net", ckpt)?;
        ip.set_training(false);
        Ok(ip)
    }
}

/// `decode(ae, predict_latent(ip, obs))` together with its wall time.
pub fn predict_lighting(ip: &Predictor, ae: &Autoencoder, obs: &ObjectObservation) -> Result<(EnvMap, Duration)> {
    if ip.arch.latent != ae.arch.latent {
        return Err(Error::Config(format!(
            "predictor emits Z = {}, autoencoder expects Z = {}",
            ip.arch.latent, ae.arch.latent
        )));
    }
    let start = Instant::now();
    let env = ae.decode(&ip.predict_latent(obs)?)?;
    Ok((env, start.elapsed()))
}

//! Mini-batch training with Adam, per-epoch logging and best-epoch selection.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ae_loss, envmap_to_log_planes, ip_loss, pixel_weights, AeArch, Autoencoder, IpArch, Predictor};
use crate::envmap::EnvMap;
use crate::error::{Error, Result};
use crate::nn::{Adam, Sequential, Tensor};
use crate::render::ObjectObservation;
use crate::rng::{split_seed, stream_rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 16,
            epochs: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub seconds: f64,
}

impl EpochRecord {
    /// JSON line without timing, reproducible across runs.
    pub fn loss_line(&self) -> String {
        serde_json::json!({
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
        })
        .to_string()
    }

    pub fn metrics_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch of the kept model.
    pub best_epoch: usize,
    pub steps: u64,
}

impl TrainReport {
    pub fn best(&self) -> &EpochRecord {
        &self.records[self.best_epoch - 1]
    }
}

#[derive(Debug, Clone)]
pub struct Trained<M> {
    /// Model from the epoch with the lowest validation loss (training loss
    /// when there is no validation set), in eval mode.
    pub model: M,
    pub optimizer: Adam<f32>,
    pub report: TrainReport,
}

/// Index batches for one epoch; a trailing single item joins the previous
/// batch so batch statistics are never taken over one sample.
fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, 1 + epoch as u64));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch).map(|c| c.to_vec()).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

fn eval_loss<L>(net: &Sequential<f32>, inputs: &Tensor<f32>, targets: &Tensor<f32>, batch: usize, loss: &L) -> Result<f64>
where
    L: Fn(&Tensor<f32>, &Tensor<f32>) -> Result<(f64, Tensor<f32>)>,
{
    let n = inputs.batch();
    let mut total = 0.0;
    for start in (0..n).step_by(batch) {
        let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
        let y = net.infer(&inputs.gather(&idx))?;
        total += loss(&targets.gather(&idx), &y)?.0 * idx.len() as f64;
    }
    Ok(total / n as f64)
}

struct Outcome {
    net: Sequential<f32>,
    optimizer: Adam<f32>,
    report: TrainReport,
}

fn fit<L>(
    mut net: Sequential<f32>,
    cfg: &TrainConfig,
    train: (&Tensor<f32>, &Tensor<f32>),
    val: Option<(&Tensor<f32>, &Tensor<f32>)>,
    loss: L,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Outcome>
where
    L: Fn(&Tensor<f32>, &Tensor<f32>) -> Result<(f64, Tensor<f32>)>,
{
    let (inputs, targets) = train;
    let n = inputs.batch();
    let mut adam = Adam::new(cfg.lr);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Sequential<f32>, Adam<f32>)> = None;
    let last_good = |records: &Vec<EpochRecord>| records.last().map(|r: &EpochRecord| r.epoch);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        net.set_training(true);
        let mut total = 0.0;
        for idx in epoch_batches(n, cfg.batch_size, cfg.seed, epoch) {
            net.zero_grad();
            let y = net.forward(&inputs.gather(&idx)).map_err(|e| match e {
                Error::State(m) => Error::TrainingDiverged {
                    epoch,
                    last_good: last_good(&records),
                    message: m,
                },
                e => e,
            })?;
            let (l, g) = loss(&targets.gather(&idx), &y)?;
            if !l.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    last_good: last_good(&records),
                    message: format!("loss is {l}"),
                });
            }
            net.backward(&g)?;
            adam.step(&mut net).map_err(|e| match e {
                Error::TrainingDiverged { message, .. } => Error::TrainingDiverged {
                    epoch,
                    last_good: last_good(&records),
                    message,
                },
                e => e,
            })?;
            total += l * idx.len() as f64;
        }
        net.set_training(false);
        let val_loss = match val {
            Some((vi, vt)) if vi.batch() > 0 => Some(eval_loss(&net, vi, vt, cfg.batch_size.max(1), &loss)?),
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            train_loss: total / n as f64,
            val_loss,
            seconds: start.elapsed().as_secs_f64(),
        };
        let score = record.val_loss.unwrap_or(record.train_loss);
        if !score.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch,
                last_good: last_good(&records),
                message: format!("validation loss is {score}"),
            });
        }
        if best.as_ref().is_none_or(|b| score < b.0) {
            best = Some((score, epoch, net.clone(), adam.clone()));
        }
        on_epoch(&record);
        records.push(record);
    }
    let (_, best_epoch, mut net, optimizer) = best.expect("at least one epoch");
    net.set_training(false);
    Ok(Outcome {
        net,
        optimizer,
        report: TrainReport {
            records,
            best_epoch,
            steps: adam.steps(),
        },
    })
}

fn log_tensor(maps: &[EnvMap], h: usize, w: usize, what: &str) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(maps.len() * 3 * h * w);
    for (row, env) in maps.iter().enumerate() {
        if env.height() != h || env.width() != w {
            return Err(Error::Dataset {
                row,
                message: format!("{what} envmap is {}x{}, expected {h}x{w}", env.height(), env.width()),
            });
        }
        data.extend(envmap_to_log_planes(env));
    }
    Tensor::new(&[maps.len(), 3, h, w], data)
}

/// Trains an autoencoder on `train`, selecting the epoch with the lowest
/// loss on `val`.
pub fn train_autoencoder(
    arch: &AeArch,
    cfg: &TrainConfig,
    train: &[EnvMap],
    val: &[EnvMap],
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Trained<Autoencoder>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("need at least one training map"));
    }
    let mut ae = Autoencoder::new(arch.clone(), split_seed(cfg.seed, 0))?;
    let (h, w) = (arch.height, arch.width);
    let x = log_tensor(train, h, w, "training")?;
    let vx = log_tensor(val, h, w, "validation")?;
    let weights = pixel_weights(h, w)?;
    let out = fit(
        ae.net.clone(),
        cfg,
        (&x, &x),
        (!val.is_empty()).then_some((&vx, &vx)),
        |t, y| ae_loss(t, y, &weights),
        on_epoch,
    )?;
    ae.net = out.net;
    Ok(Trained {
        model: ae,
        optimizer: out.optimizer,
        report: out.report,
    })
}

/// One predictor training example.
pub type ObservationPair = (ObjectObservation, EnvMap);

fn pair_tensors(ae: &Autoencoder, arch: &IpArch, pairs: &[ObservationPair], what: &str) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let s = arch.obs_size;
    let (h, w) = (ae.arch.height, ae.arch.width);
    let mut obs = Vec::with_capacity(pairs.len() * 6 * s * s);
    let mut maps = Vec::with_capacity(pairs.len() * 3 * h * w);
    for (row, (o, env)) in pairs.iter().enumerate() {
        if o.size() != s {
            return Err(Error::Dataset {
                row,
                message: format!("{what} observation is {0}x{0}, predictor expects {s}x{s}", o.size()),
            });
        }
        if env.height() != h || env.width() != w {
            return Err(Error::Dataset {
                row,
                message: format!("{what} envmap is {}x{}, autoencoder expects {h}x{w}", env.height(), env.width()),
            });
        }
        obs.extend(o.input_channels());
        maps.extend(envmap_to_log_planes(env));
    }
    let n = pairs.len();
    let x = Tensor::new(&[n, ObjectObservation::CHANNELS, s, s], obs)?;
    let maps = Tensor::new(&[n, 3, h, w], maps)?;
    let mut codes = Vec::with_capacity(n * ae.latent());
    for start in (0..n).step_by(64) {
        let idx: Vec<usize> = (start..(start + 64).min(n)).collect();
        codes.extend_from_slice(ae.encode_log(&maps.gather(&idx))?.data());
    }
    Ok((x, Tensor::new(&[n, ae.latent()], codes)?))
}

/// Trains a predictor to regress the frozen encoder's codes of the paired
/// envmaps.
pub fn train_predictor(
    arch: &IpArch,
    cfg: &TrainConfig,
    ae: &Autoencoder,
    train: &[ObservationPair],
    val: &[ObservationPair],
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Trained<Predictor>> {
    cfg.validate()?;
    if arch.latent != ae.latent() {
        return Err(Error::Config(format!(
            "predictor Z = {} does not match autoencoder Z = {}",
            arch.latent,
            ae.latent()
        )));
    }
    if train.is_empty() {
        return Err(Error::invalid("need at least one training observation"));
    }
    let frozen = ae.fingerprint();
    let mut ip = Predictor::new(arch.clone(), split_seed(cfg.seed, 0))?;
    let (x, z) = pair_tensors(ae, arch, train, "training")?;
    let (vx, vz) = pair_tensors(ae, arch, val, "validation")?;
    ip.set_output_standardization(&z)?;
    let out = fit(
        ip.net.clone(),
        cfg,
        (&x, &z),
        (!val.is_empty()).then_some((&vx, &vz)),
        ip_loss,
        on_epoch,
    )?;
    if ae.fingerprint() != frozen {
        return Err(Error::State("autoencoder parameters changed during predictor training".into()));
    }
    ip.net = out.net;
    Ok(Trained {
        model: ip,
        optimizer: out.optimizer,
        report: out.report,
    })
}

//! Named layer stacks.

use sha2::{Digest, Sha256};

use super::checkpoint::{Checkpoint, NamedTensor};
use super::{Layer, Param, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct Sequential<S> {
    layers: Vec<(String, Layer<S>)>,
}

impl<S: Scalar> Sequential<S> {
    pub fn new() -> Self {
        Sequential { layers: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, layer: Layer<S>) -> &mut Self {
        self.layers.push((name.into(), layer));
        self
    }

    pub fn layers(&self) -> &[(String, Layer<S>)] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [(String, Layer<S>)] {
        &mut self.layers
    }

    pub fn forward(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut h = x.clone();
        for (name, layer) in &mut self.layers {
            h = layer.forward(&h)?;
            screen(name, &h)?;
        }
        Ok(h)
    }

    /// Evaluation-mode pass that leaves the network untouched.
    pub fn infer(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut h = x.clone();
        for (name, layer) in &self.layers {
            h = layer.infer(&h)?;
            screen(name, &h)?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, gy: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = gy.clone();
        for (_, layer) in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    pub fn set_training(&mut self, training: bool) {
        self.layers.iter_mut().for_each(|(_, l)| l.set_training(training));
    }

    pub fn zero_grad(&mut self) {
        for (_, layer) in &mut self.layers {
            layer.params_mut().into_iter().for_each(|(_, p)| p.zero_grad());
        }
    }

    /// Parameters named `layer.param`, in a fixed order.
    pub fn params(&self) -> Vec<(String, &Param<S>)> {
        self.layers
            .iter()
            .flat_map(|(ln, l)| l.params().into_iter().map(move |(pn, p)| (format!("{ln}.{pn}"), p)))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<S>)> {
        self.layers
            .iter_mut()
            .flat_map(|(ln, l)| {
                let ln = ln.clone();
                l.params_mut().into_iter().map(move |(pn, p)| (format!("{ln}.{pn}"), p))
            })
            .collect()
    }

    pub fn buffers(&self) -> Vec<(String, &Vec<S>)> {
        self.layers
            .iter()
            .flat_map(|(ln, l)| l.buffers().into_iter().map(move |(bn, b)| (format!("{ln}.{bn}"), b)))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> Sequential<T> {
        Sequential {
            layers: self.layers.iter().map(|(n, l)| (n.clone(), l.cast())).collect(),
        }
    }

    /// SHA-256 over all parameter and buffer values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.params() {
            h.update(name.as_bytes());
            p.value.data().iter().for_each(|v| h.update(v.f64().to_le_bytes()));
        }
        for (name, b) in self.buffers() {
            h.update(name.as_bytes());
            b.iter().for_each(|v| h.update(v.f64().to_le_bytes()));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Parameters and buffers as checkpoint tensors under `prefix.`.
    pub fn export(&self, prefix: &str) -> Vec<NamedTensor> {
        let mut out: Vec<NamedTensor> = self
            .params()
            .into_iter()
            .map(|(n, p)| NamedTensor::from_values(format!("{prefix}.{n}"), S::DTYPE, p.value.shape(), &p.value.to_f64_vec()))
            .collect();
        for (n, b) in self.buffers() {
            let vals: Vec<f64> = b.iter().map(|v| v.f64()).collect();
            out.push(NamedTensor::from_values(format!("{prefix}.{n}"), S::DTYPE, &[b.len()], &vals));
        }
        out
    }

    /// Loads every parameter and buffer from `ckpt`; names and shapes must match.
    pub fn import(&mut self, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
        for (ln, layer) in &mut self.layers {
            for (pn, p) in layer.params_mut() {
                let name = format!("{prefix}.{ln}.{pn}");
                let t = ckpt.require(&name)?;
                if t.shape != p.value.shape() {
                    return Err(Error::Config(format!(
                        "checkpoint tensor {name} has shape {:?}, network expects {:?}",
                        t.shape,
                        p.value.shape()
                    )));
                }
                p.value = Tensor::from_f64(&t.shape, &t.data)?;
                p.zero_grad();
            }
            for (bn, b) in layer.buffers_mut() {
                let name = format!("{prefix}.{ln}.{bn}");
                let t = ckpt.require(&name)?;
                if t.data.len() != b.len() {
                    return Err(Error::Config(format!(
                        "checkpoint tensor {name} has {} values, network expects {}",
                        t.data.len(),
                        b.len()
                    )));
                }
                *b = t.data.iter().map(|&v| S::lit(v)).collect();
            }
        }
        Ok(())
    }
}

fn screen<S: Scalar>(layer: &str, t: &Tensor<S>) -> Result<()> {
    if cfg!(debug_assertions) && !t.all_finite() {
        return Err(Error::State(format!("layer {layer} produced non-finite values")));
    }
    Ok(())
}

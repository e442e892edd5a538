//! Adam optimizer with bias correction.

use super::{Param, Scalar, Sequential};
use crate::error::{Error, Result};

use super::checkpoint::{Checkpoint, Dtype, NamedTensor};

#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<S>>,
    second: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter of `net` from its accumulated gradient.
    pub fn step(&mut self, net: &mut Sequential<S>) -> Result<()> {
        let mut params: Vec<&mut Param<S>> = net.params_mut().into_iter().map(|(_, p)| p).collect();
        self.step_params(&mut params)
    }

    pub fn step_params(&mut self, params: &mut [&mut Param<S>]) -> Result<()> {
        if let Some((i, _)) = params.iter().enumerate().find(|(_, p)| !p.grad.all_finite()) {
            return Err(Error::TrainingDiverged {
                epoch: 0,
                last_good: None,
                message: format!("non-finite gradient in parameter {i}"),
            });
        }
        if self.first.len() != params.len() {
            if !self.first.is_empty() {
                return Err(Error::State("optimizer state does not match the parameter list".into()));
            }
            self.first = params.iter().map(|p| vec![S::zero(); p.value.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let c1 = S::lit(1.0 - self.beta1.powi(t));
        let c2 = S::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (S::lit(self.lr), S::lit(self.eps));
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            if m.len() != p.value.len() {
                return Err(Error::State(format!("optimizer state size mismatch for parameter {i}")));
            }
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for j in 0..value.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (S::one() - b1) * g;
                v[j] = b2 * v[j] + (S::one() - b2) * g * g;
                value[j] = value[j] - lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn export(&self, prefix: &str) -> Vec<NamedTensor> {
        let mut out = vec![NamedTensor::scalar(format!("{prefix}.step"), self.step as f64)];
        for (kind, state) in [("m", &self.first), ("v", &self.second)] {
            for (i, s) in state.iter().enumerate() {
                let vals: Vec<f64> = s.iter().map(|v| v.f64()).collect();
                out.push(NamedTensor::from_values(format!("{prefix}.{kind}.{i}"), Dtype::F64, &[s.len()], &vals));
            }
        }
        out
    }

    /// Restores moments saved by [`Adam::export`] for `count` parameters.
    pub fn import(&mut self, prefix: &str, ckpt: &Checkpoint, count: usize) -> Result<()> {
        self.step = ckpt.scalar(&format!("{prefix}.step"))? as u64;
        let load = |kind: &str| -> Result<Vec<Vec<S>>> {
            (0..count)
                .map(|i| {
                    let t = ckpt.require(&format!("{prefix}.{kind}.{i}"))?;
                    Ok(t.data.iter().map(|&v| S::lit(v)).collect())
                })
                .collect()
        };
        self.first = load("m")?;
        self.second = load("v")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn param(values: &[f64]) -> Param<f64> {
        Param::new(Tensor::from_f64(&[values.len()], values).unwrap())
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = param(&[1.0, -2.0]);
        p.grad = Tensor::from_f64(&[2], &[0.3, -7.0]).unwrap();
        let mut adam = Adam::new(0.01);
        adam.step_params(&mut [&mut p]).unwrap();
        assert!((p.value.data()[0] - 0.99).abs() < 1e-6);
        assert!((p.value.data()[1] + 1.99).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = param(&[0.5, 0.25]);
        let mut adam = Adam::new(0.1);
        for _ in 0..3 {
            adam.step_params(&mut [&mut p]).unwrap();
        }
        assert_eq!(p.value.data(), &[0.5, 0.25]);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let s = 1.0 / 3f64.sqrt();
        let mut p = param(&[s, -s, s]);
        let mut adam = Adam::new(0.05);
        for _ in 0..500 {
            let g: Vec<f64> = p.value.data().iter().map(|v| 2.0 * v).collect();
            p.grad = Tensor::from_f64(&[3], &g).unwrap();
            adam.step_params(&mut [&mut p]).unwrap();
        }
        let norm = p.value.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-3, "{norm}");
    }

    #[test]
    fn non_finite_gradient_diverges() {
        let mut p = param(&[1.0]);
        p.grad = Tensor::from_f64(&[1], &[f64::NAN]).unwrap();
        let err = Adam::new(0.1).step_params(&mut [&mut p]).unwrap_err();
        assert!(matches!(err, Error::TrainingDiverged { .. }));
        assert_eq!(p.value.data(), &[1.0]);
    }
}

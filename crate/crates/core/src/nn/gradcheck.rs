//! Finite-difference verification of backpropagated gradients.

use super::{Sequential, Tensor};
use crate::error::Result;

pub const STEP: f64 = 1e-5;

/// Denominator floor of the relative error per unit of loss. Gradients that
/// vanish analytically are then compared on the scale of finite-difference
/// roundoff, which grows with the loss value.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `layer.param[index]` (or `input[index]`) of the worst entry.
    pub worst: String,
    /// Backprop and central-difference values at the worst entry.
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, loss: f64) -> f64 {
    let floor = REL_FLOOR * loss.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backprop gradients of every parameter and of the input against
/// central differences with step [`STEP`]. `loss` maps the network output to
/// `(value, d value / d output)`. The network itself is left untouched.
pub fn grad_check<L>(net: &Sequential<f64>, input: &Tensor<f64>, loss: L) -> Result<GradCheckReport>
where
    L: Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
{
    let mut net = net.clone();
    let eval = |net: &mut Sequential<f64>, x: &Tensor<f64>| -> Result<f64> { Ok(loss(&net.forward(x)?)?.0) };

    net.zero_grad();
    let snapshot = net.clone();
    let out = net.forward(input)?;
    let (value, gy) = loss(&out)?;
    let gx = net.backward(&gy)?;
    let analytic: Vec<(String, Vec<f64>)> = net
        .params()
        .into_iter()
        .map(|(n, p)| (n, p.grad.to_f64_vec()))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut record = |name: &str, j: usize, a: f64, n: f64| {
        let e = relative_error(a, n, value);
        report.checked += 1;
        if e > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = e;
            report.worst = format!("{name}[{j}]");
            report.analytic = a;
            report.numeric = n;
        }
    };

    let mut probe = snapshot;
    for (pi, (name, grads)) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = probe.params()[pi].1.value.data()[j];
            let set = |net: &mut Sequential<f64>, v: f64| {
                net.params_mut()[pi].1.value.data_mut()[j] = v;
            };
            set(&mut probe, orig + STEP);
            let plus = eval(&mut probe, input)?;
            set(&mut probe, orig - STEP);
            let minus = eval(&mut probe, input)?;
            set(&mut probe, orig);
            record(name, j, a, (plus - minus) / (2.0 * STEP));
        }
    }
    let mut x = input.clone();
    for j in 0..x.len() {
        let orig = x.data()[j];
        x.data_mut()[j] = orig + STEP;
        let plus = eval(&mut probe, &x)?;
        x.data_mut()[j] = orig - STEP;
        let minus = eval(&mut probe, &x)?;
        x.data_mut()[j] = orig;
        record("input", j, gx.data()[j], (plus - minus) / (2.0 * STEP));
    }
    Ok(report)
}

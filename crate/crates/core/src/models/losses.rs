//! Reconstruction and latent-regression losses with their gradients.

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

/// Solid-angle weighted L1 loss between log-domain maps `[N, 3, H, W]`.
///
/// Returns `sum w |t - t̂| / (3 N sum w)` and its gradient with respect to
/// `pred`. `weights` holds one nonnegative value per pixel.
pub fn ae_loss<S: Scalar>(target: &Tensor<S>, pred: &Tensor<S>, weights: &[f64]) -> Result<(f64, Tensor<S>)> {
    if target.shape() != pred.shape() {
        return Err(Error::invalid(format!(
            "loss shapes differ: target {:?}, prediction {:?}",
            target.shape(),
            pred.shape()
        )));
    }
    let (n, c, h, w) = pred.dims4("reconstruction loss")?;
    if weights.len() != h * w {
        return Err(Error::invalid(format!("{} weights for {h}x{w} pixels", weights.len())));
    }
    if weights.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid("pixel weights must be finite and nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("pixel weights sum to zero"));
    }
    let norm = (n * c) as f64 * total;
    let mut grad = Tensor::zeros(pred.shape());
    let mut loss = 0.0;
    for (plane, (tp, pp)) in target.data().chunks(h * w).zip(pred.data().chunks(h * w)).enumerate() {
        let gp = &mut grad.data_mut()[plane * h * w..(plane + 1) * h * w];
        for i in 0..h * w {
            let r = pp[i].f64() - tp[i].f64();
            loss += weights[i] * r.abs();
            let s = if r > 0.0 {
                1.0
            } else if r < 0.0 {
                -1.0
            } else {
                0.0
            };
            gp[i] = S::lit(s * weights[i] / norm);
        }
    }
    Ok((loss / norm, grad))
}

/// Mean over the batch of `|z - ẑ|_2` for codes `[N, Z]`, with the gradient
/// with respect to `pred`.
pub fn ip_loss<S: Scalar>(target: &Tensor<S>, pred: &Tensor<S>) -> Result<(f64, Tensor<S>)> {
    if target.shape() != pred.shape() {
        return Err(Error::invalid(format!(
            "latent lengths differ: target {:?}, prediction {:?}",
            target.shape(),
            pred.shape()
        )));
    }
    let (n, z) = pred.dims2("latent loss")?;
    let mut grad = Tensor::zeros(pred.shape());
    let mut loss = 0.0;
    for i in 0..n {
        let t = &target.data()[i * z..(i + 1) * z];
        let p = &pred.data()[i * z..(i + 1) * z];
        let dist = t.iter().zip(p).map(|(a, b)| (b.f64() - a.f64()).powi(2)).sum::<f64>().sqrt();
        loss += dist;
        if dist > 0.0 {
            let g = &mut grad.data_mut()[i * z..(i + 1) * z];
            for k in 0..z {
                g[k] = S::lit((p[k].f64() - t[k].f64()) / (dist * n as f64));
            }
        }
    }
    Ok((loss / n as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::pixel_weights;
    use crate::rng::seeded;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn zero_map_against_ln2() {
        let w = pixel_weights(4, 8).unwrap();
        let target = Tensor::<f64>::zeros(&[2, 3, 4, 8]);
        let pred = t(&[2, 3, 4, 8], &vec![2f64.ln(); 192]);
        let (l, _) = ae_loss(&target, &pred, &w).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert_eq!(ae_loss(&pred, &pred, &w).unwrap().0, 0.0);
    }

    #[test]
    fn hand_case_matches_scalar_loop() {
        // Single channel would be 1x1x2x4; replicate it to the three planes.
        let w = [0.5f64, 1.0, 1.0, 0.5, 2.0, 0.25, 0.0, 1.0];
        let a = [0.0f64, 1.0, 2.0, 3.0, 0.5, 0.5, 0.5, 0.5];
        let b = [1.0, 1.0, 0.0, 3.5, -0.5, 0.75, 9.0, 0.0];
        let mut want = 0.0;
        let mut wsum = 0.0;
        for i in 0..8 {
            want += w[i] * (a[i] - b[i]).abs();
            wsum += w[i];
        }
        want /= wsum;
        let rep = |v: &[f64]| v.iter().cycle().take(24).copied().collect::<Vec<_>>();
        let (l, _) = ae_loss(&t(&[1, 3, 2, 4], &rep(&a)), &t(&[1, 3, 2, 4], &rep(&b)), &w).unwrap();
        assert!((l - want).abs() < 1e-15);
    }

    #[test]
    fn loss_is_permutation_invariant_and_decreases_along_residual() {
        let mut rng = seeded(3);
        let (h, wd) = (4, 8);
        let w: Vec<f64> = (0..h * wd).map(|_| rng.gen_range(0.0..1.0)).collect();
        let a: Vec<f64> = (0..3 * h * wd).map(|_| rng.gen_range(0.0..2.0)).collect();
        let b: Vec<f64> = (0..3 * h * wd).map(|_| rng.gen_range(0.0..2.0)).collect();
        let (l0, g) = ae_loss(&t(&[1, 3, h, wd], &a), &t(&[1, 3, h, wd], &b), &w).unwrap();
        let mut perm: Vec<usize> = (0..h * wd).collect();
        perm.shuffle(&mut rng);
        let permute = |v: &[f64]| -> Vec<f64> {
            (0..3).flat_map(|c| perm.iter().map(move |&p| v[c * h * wd + p])).collect()
        };
        let wp: Vec<f64> = perm.iter().map(|&p| w[p]).collect();
        let (l1, _) = ae_loss(&t(&[1, 3, h, wd], &permute(&a)), &t(&[1, 3, h, wd], &permute(&b)), &wp).unwrap();
        assert!((l0 - l1).abs() < 1e-14);
        let stepped: Vec<f64> = b.iter().zip(g.data()).map(|(v, gv)| v - 1e-3 * gv.signum()).collect();
        let (l2, _) = ae_loss(&t(&[1, 3, h, wd], &a), &t(&[1, 3, h, wd], &stepped), &w).unwrap();
        assert!(l2 < l0);
        let neg = vec![-1.0; h * wd];
        assert!(ae_loss(&t(&[1, 3, h, wd], &a), &t(&[1, 3, h, wd], &b), &neg).is_err());
    }

    #[test]
    fn latent_loss_cases() {
        let z = t(&[1, 4], &[0.5, -1.0, 2.0, 0.0]);
        assert_eq!(ip_loss(&z, &z).unwrap().0, 0.0);
        let off = t(&[1, 4], &[0.5, 0.0, 2.0, 0.0]);
        assert_eq!(ip_loss(&z, &off).unwrap().0, 1.0);
        let a = t(&[2, 2], &[0.0, 0.0, 1.0, 1.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 1.0, 2.0]);
        let (l, g) = ip_loss(&a, &b).unwrap();
        assert!((l - 3.0).abs() < 1e-15);
        assert_eq!(g.data(), &[0.3, 0.4, 0.0, 0.5]);
        assert!(ip_loss(&a, &t(&[1, 4], &[0.0; 4])).is_err());
    }
}

//! Solid-angle weighted lighting error metrics.
//!
//! Every metric sums over the three channels with one weight per pixel and
//! normalizes by `3 * sum(w)`. Predictions are expected to be clamped at zero
//! upstream (reconstructions from [`crate::sphharm`] may ring negative).

use serde::{Deserialize, Serialize};

use crate::envmap::{solid_angle_weights, EnvMap, HdrImage};
use crate::error::{Error, Result};
use crate::render::{render_direct, Brdf, NormalMap};

/// Guard against division by zero radiance in [`mre`].
pub const MRE_EPS: f64 = 1e-3;

/// Below this weighted energy a prediction is treated as all-zero by
/// [`si_rmse`].
pub const SI_ENERGY_FLOOR: f64 = 1e-12;

fn check(pred: &HdrImage, gt: &HdrImage, w: &[f64]) -> Result<f64> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::invalid(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    if w.len() != gt.height() * gt.width() {
        return Err(Error::invalid(format!(
            "{} weights for {}x{} pixels",
            w.len(),
            gt.height(),
            gt.width()
        )));
    }
    if w.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::invalid("weights must be nonnegative"));
    }
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("weights sum to zero"));
    }
    Ok(3.0 * total)
}

/// `sum over pixels and channels of w * f(pred, gt)`.
fn weighted_sum(pred: &HdrImage, gt: &HdrImage, w: &[f64], f: impl Fn(f64, f64) -> f64) -> f64 {
    pred.data()
        .chunks_exact(3)
        .zip(gt.data().chunks_exact(3))
        .zip(w)
        .map(|((p, g), wi)| wi * (0..3).map(|c| f(p[c], g[c])).sum::<f64>())
        .sum()
}

pub fn rmse(pred: &HdrImage, gt: &HdrImage, w: &[f64]) -> Result<f64> {
    let norm = check(pred, gt, w)?;
    Ok((weighted_sum(pred, gt, w, |p, g| (p - g).powi(2)) / norm).sqrt())
}

/// RMSE after scaling the prediction by the error-minimizing `alpha`, one
/// scalar shared by all channels. Returns `(error, alpha)`.
pub fn si_rmse(pred: &HdrImage, gt: &HdrImage, w: &[f64]) -> Result<(f64, f64)> {
    let norm = check(pred, gt, w)?;
    let pg = weighted_sum(pred, gt, w, |p, g| p * g);
    let pp = weighted_sum(pred, gt, w, |p, _| p * p);
    let alpha = if pp < SI_ENERGY_FLOOR { 0.0 } else { pg / pp };
    let err = weighted_sum(pred, gt, w, |p, g| (alpha * p - g).powi(2)) / norm;
    Ok((err.sqrt(), alpha))
}

/// [`si_rmse`] with an independent scale per channel.
pub fn si_rmse_per_channel(pred: &HdrImage, gt: &HdrImage, w: &[f64]) -> Result<(f64, [f64; 3])> {
    let norm = check(pred, gt, w)?;
    let mut alpha = [0.0; 3];
    let mut err = 0.0;
    for (c, a) in alpha.iter_mut().enumerate() {
        let mut pg = 0.0;
        let mut pp = 0.0;
        for ((p, g), wi) in pred.data().chunks_exact(3).zip(gt.data().chunks_exact(3)).zip(w) {
            pg += wi * p[c] * g[c];
            pp += wi * p[c] * p[c];
        }
        *a = if pp < SI_ENERGY_FLOOR { 0.0 } else { pg / pp };
        for ((p, g), wi) in pred.data().chunks_exact(3).zip(gt.data().chunks_exact(3)).zip(w) {
            err += wi * (*a * p[c] - g[c]).powi(2);
        }
    }
    Ok(((err / norm).sqrt(), alpha))
}

pub fn mae(pred: &HdrImage, gt: &HdrImage, w: &[f64]) -> Result<f64> {
    let norm = check(pred, gt, w)?;
    Ok(weighted_sum(pred, gt, w, |p, g| (p - g).abs()) / norm)
}

/// Mean relative error `|pred - gt| / (gt + MRE_EPS)`.
pub fn mre(pred: &HdrImage, gt: &HdrImage, w: &[f64]) -> Result<f64> {
    let norm = check(pred, gt, w)?;
    Ok(weighted_sum(pred, gt, w, |p, g| (p - g).abs() / (g + MRE_EPS)) / norm)
}

/// RMSE between renders of the object under both lightings, over covered
/// pixels with uniform weights.
pub fn relight_error(pred: &EnvMap, gt: &EnvMap, normals: &NormalMap, brdf: &Brdf) -> Result<f64> {
    let a = render_direct(normals, brdf, pred)?;
    let b = render_direct(normals, brdf, gt)?;
    Ok(masked_rmse(&a, &b, normals))
}

pub(crate) fn masked_rmse(a: &HdrImage, b: &HdrImage, normals: &NormalMap) -> f64 {
    let pixels = normals.masked_pixels();
    if pixels.is_empty() {
        return 0.0;
    }
    let sum: f64 = pixels
        .iter()
        .map(|&p| (0..3).map(|c| (a.data()[3 * p + c] - b.data()[3 * p + c]).powi(2)).sum::<f64>())
        .sum();
    (sum / (3 * pixels.len()) as f64).sqrt()
}

/// One row of an evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub object: String,
    pub material: String,
    pub method: String,
    pub rmse: f64,
    pub si_rmse: f64,
    pub mae: f64,
    pub mre: f64,
    pub relight_rmse: f64,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// The four envmap metrics of `pred` against `gt` under solid-angle weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvmapScores {
    pub rmse: f64,
    pub si_rmse: f64,
    pub alpha: f64,
    pub mae: f64,
    pub mre: f64,
}

pub fn envmap_scores(pred: &EnvMap, gt: &EnvMap) -> Result<EnvmapScores> {
    let w = solid_angle_weights(gt.height(), gt.width())?.to_vec();
    let (p, g) = (pred.image(), gt.image());
    let (si, alpha) = si_rmse(p, g, &w)?;
    Ok(EnvmapScores {
        rmse: rmse(p, g, &w)?,
        si_rmse: si,
        alpha,
        mae: mae(p, g, &w)?,
        mre: mre(p, g, &w)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::{sphere_normal_map, Material};
    use crate::rng::seeded;
    use rand::Rng;

    fn img(h: usize, w: usize, v: &[f64]) -> HdrImage {
        HdrImage::new(h, w, v.to_vec()).unwrap()
    }

    fn random(h: usize, w: usize, seed: u64) -> HdrImage {
        let mut rng = seeded(seed);
        img(h, w, &(0..3 * h * w).map(|_| rng.gen_range(0.0..4.0)).collect::<Vec<_>>())
    }

    #[test]
    fn closed_forms() {
        let w = solid_angle_weights(4, 8).unwrap().to_vec();
        let zero = HdrImage::zeros(4, 8);
        let one = img(4, 8, &[1.0; 96]);
        assert!((rmse(&zero, &one, &w).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(rmse(&one, &one, &w).unwrap(), 0.0);
        let half = img(4, 8, &[1.5; 96]);
        assert!((mae(&half, &one, &w).unwrap() - 0.5).abs() < 1e-12);
        assert!((mre(&half, &one, &w).unwrap() - 0.5 / 1.001).abs() < 1e-12);
        let (si, alpha) = si_rmse(&zero, &one, &w).unwrap();
        assert_eq!(alpha, 0.0);
        assert!((si - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hand_case_against_scalar_loops() {
        let w = [0.5, 1.0, 2.0, 0.25, 1.0, 0.0, 0.75, 1.5];
        let gt = random(2, 4, 1);
        let pred = random(2, 4, 2);
        let (mut se, mut ae, mut re, mut ws) = (0.0, 0.0, 0.0, 0.0);
        for p in 0..8 {
            ws += w[p];
            for c in 0..3 {
                let (a, b) = (pred.data()[3 * p + c], gt.data()[3 * p + c]);
                se += w[p] * (a - b) * (a - b);
                ae += w[p] * (a - b).abs();
                re += w[p] * (a - b).abs() / (b + 1e-3);
            }
        }
        assert!((rmse(&pred, &gt, &w).unwrap() - (se / (3.0 * ws)).sqrt()).abs() < 1e-12);
        assert!((mae(&pred, &gt, &w).unwrap() - ae / (3.0 * ws)).abs() < 1e-12);
        assert!((mre(&pred, &gt, &w).unwrap() - re / (3.0 * ws)).abs() < 1e-12);
        // The closed-form alpha beats or ties a grid search.
        let (si, _) = si_rmse(&pred, &gt, &w).unwrap();
        let best = (0..=100_000)
            .map(|i| rmse(&pred.map(|v| v * i as f64 * 1e-4), &gt, &w).unwrap())
            .fold(f64::INFINITY, f64::min);
        assert!(si <= best + 1e-12);
    }

    #[test]
    fn scale_invariance_and_bounds() {
        let w = solid_angle_weights(8, 16).unwrap().to_vec();
        let e = random(8, 16, 3);
        for k in [0.5, 2.0, 10.0] {
            assert!(si_rmse(&e.map(|v| k * v), &e, &w).unwrap().0 < 1e-9);
        }
        for seed in 0..20 {
            let a = random(8, 16, 10 + seed);
            let (si, alpha) = si_rmse(&a, &e, &w).unwrap();
            assert!(si <= rmse(&a, &e, &w).unwrap() + 1e-12);
            let (si3, _) = si_rmse(&a.map(|v| 3.0 * v), &e, &w).unwrap();
            assert!((si - si3).abs() < 1e-9);
            assert!(alpha > 0.0);
            let (pc, _) = si_rmse_per_channel(&a, &e, &w).unwrap();
            assert!(pc <= si + 1e-12);
        }
    }

    #[test]
    fn relight_is_linear_under_lambertian() {
        let nm = sphere_normal_map(16).unwrap();
        let brdf = Material::Diffuse.brdf();
        let e = EnvMap::from_image(random(8, 16, 5)).unwrap();
        assert_eq!(relight_error(&e, &e, &nm, &brdf).unwrap(), 0.0);
        let doubled = e.scaled(2.0).unwrap();
        let r = render_direct(&nm, &brdf, &e).unwrap();
        let want = masked_rmse(&r, &HdrImage::zeros(16, 16), &nm);
        assert!((relight_error(&doubled, &e, &nm, &brdf).unwrap() - want).abs() < 1e-9 * want);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let w = vec![1.0; 8];
        assert!(rmse(&HdrImage::zeros(2, 4), &HdrImage::zeros(4, 2), &w).is_err());
        assert!(rmse(&HdrImage::zeros(2, 4), &HdrImage::zeros(2, 4), &w[..7]).is_err());
    }
}

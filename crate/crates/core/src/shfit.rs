//! Spherical-harmonics lighting from an object image by ridge-regularized
//! linear least squares through a light transport matrix.
//!
//! The design matrix is `A = T B` with `B[j, k] = Y_k(d_j)`; the solid angle is
//! already part of `T`. Each channel solves
//! `min |A c - b|^2 + lambda |c|^2`.

use serde::{Deserialize, Serialize};

use crate::envmap::{EnvMap, HdrImage};
use crate::error::{Error, Result};
use crate::linalg::{gram, mat_t_vec, mat_vec, matmul, Cholesky};
use crate::render::TransportMatrix;
use crate::sphharm::{basis_matrix, reconstruct_clamped, ShCoeffs, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    /// Cholesky factorization of `A^T A + lambda I`.
    NormalEquationsCholesky,
    Svd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub degree: usize,
    /// Ridge weight; `None` selects `1e-6 * mean(diag(A^T A))`.
    pub lambda: Option<f64>,
    pub solver: Solver,
}

impl FitConfig {
    pub fn new(degree: usize) -> Self {
        FitConfig {
            degree,
            lambda: None,
            solver: Solver::NormalEquationsCholesky,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = Some(lambda);
        self
    }

    pub fn with_solver(mut self, solver: Solver) -> Self {
        self.solver = solver;
        self
    }
}

pub const DEFAULT_RELATIVE_LAMBDA: f64 = 1e-6;

/// Dense `rows x cols` design matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub rows: usize,
    pub cols: usize,
    pub degree: usize,
    pub data: Vec<f64>,
}

impl DesignMatrix {
    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + k]).collect()
    }

    pub fn apply(&self, coeffs: &[f64]) -> Vec<f64> {
        mat_vec(&self.data, self.rows, self.cols, coeffs)
    }
}

pub fn build_design_matrix(transport: &TransportMatrix, degree: usize) -> Result<DesignMatrix> {
    let q = transport.cols();
    let basis = basis_matrix(transport.env_height(), transport.env_width(), degree);
    let k = (degree + 1) * (degree + 1);
    if basis.len() != q * k {
        return Err(Error::invalid("basis and transport column counts differ"));
    }
    Ok(DesignMatrix {
        rows: transport.rows(),
        cols: k,
        degree,
        data: matmul(transport.data(), &basis, transport.rows(), q, k),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub coeffs: ShCoeffs,
    /// `|A c - b|` per channel.
    pub residual: [f64; CHANNELS],
    pub lambda: f64,
}

/// Covered-pixel values of `img` in transport row order, one vector per channel.
pub fn image_targets(img: &HdrImage, transport: &TransportMatrix) -> Result<[Vec<f64>; CHANNELS]> {
    let s = transport.image_size();
    if img.height() != s || img.width() != s {
        return Err(Error::invalid(format!(
            "image is {}x{}, transport expects {s}x{s}",
            img.height(),
            img.width()
        )));
    }
    if img.data().iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("NaN in object image"));
    }
    Ok(std::array::from_fn(|ch| {
        transport.pixels().iter().map(|&p| img.data()[3 * p + ch]).collect()
    }))
}

pub fn fit_sh(img: &HdrImage, transport: &TransportMatrix, cfg: &FitConfig) -> Result<FitResult> {
    let design = build_design_matrix(transport, cfg.degree)?;
    let targets = image_targets(img, transport)?;
    fit_targets(&design, &targets, cfg)
}

/// Solves the per-channel ridge problems for precomputed targets.
pub fn fit_targets(design: &DesignMatrix, targets: &[Vec<f64>; CHANNELS], cfg: &FitConfig) -> Result<FitResult> {
    if cfg.degree != design.degree {
        return Err(Error::invalid("config degree does not match the design matrix"));
    }
    let (m, n) = (design.rows, design.cols);
    if targets.iter().any(|t| t.len() != m) {
        return Err(Error::invalid("target length does not match design rows"));
    }
    if targets.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("object image values must be finite"));
    }
    let g = gram(&design.data, m, n);
    let lambda = match cfg.lambda {
        Some(l) if l >= 0.0 && l.is_finite() => l,
        Some(l) => return Err(Error::invalid(format!("lambda must be >= 0, got {l}"))),
        None => DEFAULT_RELATIVE_LAMBDA * (0..n).map(|i| g[i * n + i]).sum::<f64>() / n as f64,
    };
    let solutions: Vec<Vec<f64>> = match cfg.solver {
        Solver::NormalEquationsCholesky => {
            let mut reg = g;
            for i in 0..n {
                reg[i * n + i] += lambda;
            }
            let tol = if lambda > 0.0 { 0.0 } else { 1e-13 };
            let chol = Cholesky::factor(&reg, n, tol)?;
            targets
                .iter()
                .map(|b| {
                    let mut x = mat_t_vec(&design.data, m, n, b);
                    chol.solve_in_place(&mut x);
                    x
                })
                .collect()
        }
        Solver::Svd => svd_solve(design, targets, lambda)?,
    };
    let mut coeffs = ShCoeffs::zeros(design.degree);
    let mut residual = [0.0; CHANNELS];
    for (ch, x) in solutions.iter().enumerate() {
        for (k, v) in x.iter().enumerate() {
            coeffs.set(k, ch, *v);
        }
        let pred = design.apply(x);
        residual[ch] = pred
            .iter()
            .zip(&targets[ch])
            .map(|(p, b)| (p - b).powi(2))
            .sum::<f64>()
            .sqrt();
    }
    if coeffs.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::IllConditioned("solution is not finite".into()));
    }
    Ok(FitResult {
        coeffs,
        residual,
        lambda,
    })
}

fn svd_solve(design: &DesignMatrix, targets: &[Vec<f64>; CHANNELS], lambda: f64) -> Result<Vec<Vec<f64>>> {
    let (m, n) = (design.rows, design.cols);
    let a = nalgebra::DMatrix::from_row_slice(m, n, &design.data);
    let svd = a.svd(true, true);
    let u = svd.u.as_ref().expect("U requested");
    let vt = svd.v_t.as_ref().expect("V^T requested");
    let sigma = &svd.singular_values;
    let smax = sigma.iter().cloned().fold(0.0, f64::max);
    if lambda == 0.0 {
        let tol = m.max(n) as f64 * f64::EPSILON * smax;
        let rank = sigma.iter().filter(|&&s| s > tol).count();
        if rank < n || smax == 0.0 {
            return Err(Error::IllConditioned(format!(
                "design matrix has numerical rank {rank} < {n}"
            )));
        }
    }
    let filt: Vec<f64> = sigma
        .iter()
        .map(|&s| if s > 0.0 { s / (s * s + lambda) } else { 0.0 })
        .collect();
    Ok(targets
        .iter()
        .map(|b| {
            let bv = nalgebra::DVector::from_column_slice(b);
            let mut ub = u.transpose() * bv;
            for (i, f) in filt.iter().enumerate() {
                ub[i] *= f;
            }
            let x = vt.transpose() * ub;
            x.iter().cloned().collect()
        })
        .collect())
}

/// SH fit followed by a clamped reconstruction at `height x 2 height`.
pub fn estimate_envmap_sh(
    img: &HdrImage,
    transport: &TransportMatrix,
    cfg: &FitConfig,
    height: usize,
) -> Result<EnvMap> {
    let fit = fit_sh(img, transport, cfg)?;
    reconstruct_clamped(&fit.coeffs, height)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::{build_transport, render_with_transport, sphere_normal_map, Material, DEFAULT_TRANSPORT_BUDGET};
    use crate::sphharm::{reconstruct, sh_index};
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn transport(size: usize, m: Material, h: usize) -> TransportMatrix {
        build_transport(&sphere_normal_map(size).unwrap(), &m.brdf(), h, 2 * h, DEFAULT_TRANSPORT_BUDGET).unwrap()
    }

    fn random_coeffs(degree: usize, seed: u64) -> ShCoeffs {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = (degree + 1) * (degree + 1) * 3;
        ShCoeffs::from_data(
            degree,
            (0..n).map(|_| rng.gen_range(0.5..1.5) * if rng.gen() { 1.0 } else { -1.0 }).collect(),
        )
        .unwrap()
    }

    /// Object image `A c` written back to image layout.
    fn synth_image(design: &DesignMatrix, t: &TransportMatrix, c: &ShCoeffs) -> HdrImage {
        let s = t.image_size();
        let mut img = HdrImage::zeros(s, s);
        for ch in 0..3 {
            let v = design.apply(&c.channel(ch));
            for (i, &p) in t.pixels().iter().enumerate() {
                img.data_mut()[3 * p + ch] = v[i];
            }
        }
        img
    }

    #[test]
    fn constant_column_is_scaled_row_sum() {
        let t = transport(16, Material::Rough, 8);
        let a = build_design_matrix(&t, 3).unwrap();
        let sums = t.row_sums();
        for (x, s) in a.column(0).iter().zip(sums) {
            assert!((x - s / (2.0 * PI.sqrt())).abs() < 1e-12);
        }
        assert_eq!(build_design_matrix(&t, 0).unwrap().cols, 1);
    }

    #[test]
    fn design_matrix_matches_fine_render() {
        // A c at 32x64 against rendering the reconstructed map through a
        // 64x128 transport.
        let nm = sphere_normal_map(16).unwrap();
        let brdf = Material::Rough.brdf();
        let coarse = build_transport(&nm, &brdf, 32, 64, DEFAULT_TRANSPORT_BUDGET).unwrap();
        let fine = build_transport(&nm, &brdf, 64, 128, DEFAULT_TRANSPORT_BUDGET).unwrap();
        let mut c = random_coeffs(5, 9);
        for ch in 0..3 {
            c.set(0, ch, 40.0);
        }
        let design = build_design_matrix(&coarse, 5).unwrap();
        let env = EnvMap::from_image(reconstruct(&c, 64, 128).unwrap()).unwrap();
        let rendered = render_with_transport(&fine, &env).unwrap();
        for ch in 0..3 {
            let ac = design.apply(&c.channel(ch));
            for (i, &p) in coarse.pixels().iter().enumerate() {
                let r = rendered.data()[3 * p + ch];
                assert!((ac[i] - r).abs() <= 0.02 * r.abs(), "{} vs {r}", ac[i]);
            }
        }
    }

    #[test]
    fn glossy_fit_recovers_coefficients() {
        let t = transport(32, Material::Glossy, 32);
        let design = build_design_matrix(&t, 5).unwrap();
        let c0 = random_coeffs(5, 1);
        let img = synth_image(&design, &t, &c0);
        let fit = fit_sh(&img, &t, &FitConfig::new(5).with_lambda(1e-10)).unwrap();
        for (a, b) in fit.coeffs.data().iter().zip(c0.data()) {
            assert!((a - b).abs() <= 0.01 * b.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn zero_image_gives_zero_coefficients() {
        let t = transport(16, Material::Diffuse, 8);
        let fit = fit_sh(&HdrImage::zeros(16, 16), &t, &FitConfig::new(3)).unwrap();
        assert!(fit.coeffs.data().iter().all(|&v| v == 0.0));
        assert!(fit.lambda > 0.0);
    }

    #[test]
    fn diffuse_fit_recovers_low_bands() {
        let t = transport(32, Material::Diffuse, 32);
        // Truth band-limited to degree 2, fit at degree 3.
        let truth = random_coeffs(2, 4);
        let mut c0 = ShCoeffs::zeros(3);
        for k in 0..9 {
            for ch in 0..3 {
                c0.set(k, ch, truth.get(k, ch));
            }
        }
        let design = build_design_matrix(&t, 3).unwrap();
        let img = synth_image(&design, &t, &c0);
        let fit = fit_sh(&img, &t, &FitConfig::new(3)).unwrap();
        for k in 0..9 {
            for ch in 0..3 {
                let (a, b) = (fit.coeffs.get(k, ch), truth.get(k, ch));
                assert!((a - b).abs() <= 0.02 * b.abs(), "k={k}: {a} vs {b}");
            }
        }
        // Band 3 is (near) invisible to a Lambertian object and stays small.
        for m in -3i64..=3 {
            for ch in 0..3 {
                assert!(fit.coeffs.get(sh_index(3, m), ch).abs() < 0.1);
            }
        }
    }

    #[test]
    fn rank_deficiency_without_ridge_is_reported() {
        // A Lambertian object cannot see band 3 at all.
        let t = transport(16, Material::Diffuse, 16);
        let img = render_with_transport(&t, &EnvMap::constant(16, 1.0).unwrap()).unwrap();
        for solver in [Solver::NormalEquationsCholesky, Solver::Svd] {
            let cfg = FitConfig::new(4).with_lambda(0.0).with_solver(solver);
            assert!(matches!(fit_sh(&img, &t, &cfg), Err(Error::IllConditioned(_))), "{solver:?}");
        }
        let mut bad = img.clone();
        bad.data_mut()[0] = f64::NAN;
        assert!(matches!(fit_sh(&bad, &t, &FitConfig::new(1)), Err(Error::InvalidArgument(_))));
    }

    fn test_image(t: &TransportMatrix, seed: u64) -> HdrImage {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let env = EnvMap::new(
            t.env_height(),
            t.env_width(),
            (0..t.cols() * 3).map(|_| rng.gen_range(0.0..2.0)).collect(),
        )
        .unwrap();
        render_with_transport(t, &env).unwrap()
    }

    #[test]
    fn residual_is_orthogonal_to_columns() {
        let t = transport(24, Material::Glossy, 16);
        let img = test_image(&t, 3);
        let design = build_design_matrix(&t, 4).unwrap();
        let targets = image_targets(&img, &t).unwrap();
        let fit = fit_targets(&design, &targets, &FitConfig::new(4).with_lambda(0.0)).unwrap();
        for ch in 0..3 {
            let c = fit.coeffs.channel(ch);
            let r: Vec<f64> = design.apply(&c).iter().zip(&targets[ch]).map(|(p, b)| p - b).collect();
            let atr = mat_t_vec(&design.data, design.rows, design.cols, &r);
            let atb = mat_t_vec(&design.data, design.rows, design.cols, &targets[ch]);
            let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(n(&atr) < 1e-8 * n(&atb), "{} vs {}", n(&atr), n(&atb));
        }
    }

    #[test]
    fn fit_is_homogeneous() {
        let t = transport(16, Material::Rough, 8);
        let img = test_image(&t, 5);
        let cfg = FitConfig::new(3).with_lambda(1e-4);
        let a = fit_sh(&img, &t, &cfg).unwrap();
        let b = fit_sh(&img.map(|v| 3.0 * v), &t, &cfg).unwrap();
        for (x, y) in a.coeffs.data().iter().zip(b.coeffs.data()) {
            assert!((3.0 * x - y).abs() < 1e-9 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn solvers_agree() {
        let t = transport(24, Material::Glossy, 16);
        let img = test_image(&t, 7);
        for lambda in [0.0, 1e-6] {
            let base = FitConfig::new(4).with_lambda(lambda);
            let a = fit_sh(&img, &t, &base).unwrap();
            let b = fit_sh(&img, &t, &base.with_solver(Solver::Svd)).unwrap();
            for (x, y) in a.coeffs.data().iter().zip(b.coeffs.data()) {
                assert!((x - y).abs() <= 1e-6 * y.abs().max(1e-3), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn residual_does_not_grow_with_degree() {
        let t = transport(24, Material::Glossy, 16);
        let img = test_image(&t, 8);
        let mut last = [f64::INFINITY; 3];
        for degree in 0..=5 {
            let fit = fit_sh(&img, &t, &FitConfig::new(degree).with_lambda(0.0)).unwrap();
            for ch in 0..3 {
                assert!(fit.residual[ch] <= last[ch] * (1.0 + 1e-12));
            }
            last = fit.residual;
        }
    }

    #[test]
    fn estimate_is_fit_then_reconstruct() {
        let t = transport(16, Material::Diffuse, 16);
        let img = render_with_transport(&t, &EnvMap::constant(16, 1.0).unwrap()).unwrap();
        let cfg = FitConfig::new(2);
        let est = estimate_envmap_sh(&img, &t, &cfg, 16).unwrap();
        let fit = fit_sh(&img, &t, &cfg).unwrap();
        assert_eq!(est, reconstruct_clamped(&fit.coeffs, 16).unwrap());
        let power = fit.coeffs.band_power();
        for ch in 0..3 {
            let total: f64 = power.iter().map(|p| p[ch]).sum();
            assert!(power[0][ch] / total > 0.99);
        }
    }
}

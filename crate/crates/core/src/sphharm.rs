//! Real spherical harmonics: basis evaluation, quadrature projection of
//! environment maps, reconstruction and display filtering.
//!
//! Coefficients are indexed `k = l (l + 1) + m` for band `l` and order
//! `m in [-l, l]`. The real basis is orthonormal over the unit sphere and
//! carries no Condon-Shortley phase.

use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::envmap::{pixel_directions, solid_angle_weights, EnvMap, HdrImage, SphericalDir};
use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Number of coefficients of a degree-`degree` expansion, `(L + 1)^2`.
pub fn num_coeffs(degree: i64) -> Result<usize> {
    if degree < 0 {
        return Err(Error::invalid(format!("SH degree must be >= 0, got {degree}")));
    }
    let n = degree as usize + 1;
    Ok(n * n)
}

#[inline]
pub fn sh_index(l: usize, m: i64) -> usize {
    (l as i64 * (l as i64 + 1) + m) as usize
}

/// Evaluates every basis function up to `degree` at a unit direction.
pub fn eval_sh_basis(d: SphericalDir, degree: usize) -> Vec<f64> {
    let mut out = vec![0.0; (degree + 1) * (degree + 1)];
    eval_basis_into(d.vec(), degree, &mut out);
    out
}

/// Basis values at `v` (assumed unit length) written into `out`, which must
/// hold `(degree + 1)^2` values.
pub(crate) fn eval_basis_into(v: [f64; 3], degree: usize, out: &mut [f64]) {
    let [x, y, z] = v;
    let n = degree + 1;
    debug_assert!(out.len() >= n * n);
    // Normalized associated Legendre values with the sin^m(theta) factor
    // stripped; it is restored through Re/Im (x + iy)^m below.
    let mut pmm = 1.0 / (4.0 * PI).sqrt();
    // (x + iy)^m
    let (mut cr, mut ci) = (1.0, 0.0);
    for m in 0..n {
        if m > 0 {
            pmm *= ((2 * m + 1) as f64 / (2 * m) as f64).sqrt();
            let (nr, ni) = (cr * x - ci * y, cr * y + ci * x);
            cr = nr;
            ci = ni;
        }
        let (cos_part, sin_part) = if m == 0 {
            (1.0, 0.0)
        } else {
            (std::f64::consts::SQRT_2 * cr, std::f64::consts::SQRT_2 * ci)
        };
        let mut p_prev2 = 0.0;
        let mut p_prev = pmm;
        for l in m..n {
            let p = if l == m {
                pmm
            } else if l == m + 1 {
                z * ((2 * m + 3) as f64).sqrt() * pmm
            } else {
                let lf = l as f64;
                let mf = m as f64;
                let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
                let b = (((lf - 1.0) * (lf - 1.0) - mf * mf) / (4.0 * (lf - 1.0) * (lf - 1.0) - 1.0)).sqrt();
                a * (z * p_prev - b * p_prev2)
            };
            if l > m {
                p_prev2 = p_prev;
                p_prev = p;
            }
            if m == 0 {
                out[sh_index(l, 0)] = p;
            } else {
                out[sh_index(l, m as i64)] = p * cos_part;
                out[sh_index(l, -(m as i64))] = p * sin_part;
            }
        }
    }
}

/// Basis matrix of an equirectangular grid: row `j` holds every basis function
/// at pixel `j`'s center. Shape `(H W) x (L + 1)^2`, row-major.
pub fn basis_matrix(height: usize, width: usize, degree: usize) -> Vec<f64> {
    let k = (degree + 1) * (degree + 1);
    let dirs = pixel_directions(height, width);
    let mut b = vec![0.0; dirs.len() * k];
    for (j, d) in dirs.iter().enumerate() {
        eval_basis_into(*d, degree, &mut b[j * k..(j + 1) * k]);
    }
    b
}

/// Per-channel real SH coefficients, stored `k`-major and channel-minor.
#[derive(Debug, Clone, PartialEq)]
pub struct ShCoeffs {
    degree: usize,
    data: Vec<f64>,
}

impl ShCoeffs {
    pub fn zeros(degree: usize) -> Self {
        ShCoeffs {
            degree,
            data: vec![0.0; (degree + 1) * (degree + 1) * CHANNELS],
        }
    }

    pub fn from_data(degree: usize, data: Vec<f64>) -> Result<Self> {
        let k = (degree + 1) * (degree + 1);
        if data.len() != k * CHANNELS {
            return Err(Error::invalid(format!(
                "degree {degree} needs {} values, got {}",
                k * CHANNELS,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("SH coefficients must be finite"));
        }
        Ok(ShCoeffs { degree, data })
    }

    /// Builds coefficients from one vector per channel.
    pub fn from_channels(degree: usize, channels: [&[f64]; CHANNELS]) -> Result<Self> {
        let k = (degree + 1) * (degree + 1);
        if channels.iter().any(|c| c.len() != k) {
            return Err(Error::invalid(format!("each channel needs {k} coefficients")));
        }
        let mut data = vec![0.0; k * CHANNELS];
        for (ch, vals) in channels.iter().enumerate() {
            for (i, v) in vals.iter().enumerate() {
                data[i * CHANNELS + ch] = *v;
            }
        }
        Self::from_data(degree, data)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn len(&self) -> usize {
        (self.degree + 1) * (self.degree + 1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, k: usize, channel: usize) -> f64 {
        self.data[k * CHANNELS + channel]
    }

    pub fn set(&mut self, k: usize, channel: usize, v: f64) {
        self.data[k * CHANNELS + channel] = v;
    }

    pub fn channel(&self, channel: usize) -> Vec<f64> {
        (0..self.len()).map(|k| self.get(k, channel)).collect()
    }

    /// Sum of squared coefficients of each band, per channel.
    pub fn band_power(&self) -> Vec<[f64; CHANNELS]> {
        (0..=self.degree)
            .map(|l| {
                let mut p = [0.0; CHANNELS];
                for m in -(l as i64)..=l as i64 {
                    let k = sh_index(l, m);
                    for (ch, acc) in p.iter_mut().enumerate() {
                        *acc += self.get(k, ch).powi(2);
                    }
                }
                p
            })
            .collect()
    }

    /// Text form: a `SH <L> <channels>` line, then one value per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("SH {} {}\n", self.degree, CHANNELS);
        for v in &self.data {
            writeln!(s, "{v}").expect("writing to a String");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::invalid("empty SH file"))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != "SH" {
            return Err(Error::invalid(format!("bad SH header {header:?}")));
        }
        let degree: usize = parts[1]
            .parse()
            .map_err(|_| Error::invalid(format!("bad SH degree {:?}", parts[1])))?;
        let channels: usize = parts[2]
            .parse()
            .map_err(|_| Error::invalid(format!("bad SH channel count {:?}", parts[2])))?;
        if channels != CHANNELS {
            return Err(Error::invalid(format!("expected {CHANNELS} channels, got {channels}")));
        }
        let data = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::invalid(format!("bad SH coefficient {l:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_data(degree, data)
    }
}

/// Projects an environment map onto the basis by solid-angle quadrature.
pub fn project(env: &EnvMap, degree: usize) -> ShCoeffs {
    project_image(env.image(), degree)
}

pub fn project_image(img: &HdrImage, degree: usize) -> ShCoeffs {
    let (h, w) = (img.height(), img.width());
    let weights = solid_angle_weights(h, w).expect("image dimensions are positive");
    let k = (degree + 1) * (degree + 1);
    let mut basis = vec![0.0; k];
    let mut out = ShCoeffs::zeros(degree);
    let dirs = pixel_directions(h, w);
    for r in 0..h {
        let wr = weights.row_weight(r);
        for c in 0..w {
            let p = img.pixel(r, c);
            if p == [0.0; 3] {
                continue;
            }
            eval_basis_into(dirs[r * w + c], degree, &mut basis);
            for (i, b) in basis.iter().enumerate() {
                let f = b * wr;
                for ch in 0..CHANNELS {
                    out.data[i * CHANNELS + ch] += f * p[ch];
                }
            }
        }
    }
    out
}

/// Evaluates the expansion at every pixel center. Values may be negative.
pub fn reconstruct(coeffs: &ShCoeffs, height: usize, width: usize) -> Result<HdrImage> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("reconstruction grid must be non-empty"));
    }
    let k = coeffs.len();
    let mut basis = vec![0.0; k];
    let mut img = HdrImage::zeros(height, width);
    for (j, d) in pixel_directions(height, width).into_iter().enumerate() {
        eval_basis_into(d, coeffs.degree, &mut basis);
        let mut px = [0.0; CHANNELS];
        for (i, b) in basis.iter().enumerate() {
            for ch in 0..CHANNELS {
                px[ch] += b * coeffs.data[i * CHANNELS + ch];
            }
        }
        img.data_mut()[j * 3..j * 3 + 3].copy_from_slice(&px);
    }
    Ok(img)
}

/// Reconstruction clipped at zero, usable as radiance.
pub fn reconstruct_clamped(coeffs: &ShCoeffs, height: usize) -> Result<EnvMap> {
    let img = reconstruct(coeffs, height, 2 * height)?;
    EnvMap::from_image(img.map(|v| v.max(0.0)))
}

/// Display window of band `l` for a degree-`degree` expansion.
pub fn lowpass_window(l: usize, degree: usize) -> f64 {
    let x = PI * l as f64 / (2.0 * (degree + 1) as f64);
    if x == 0.0 {
        1.0
    } else {
        x.sin() / x
    }
}

/// Scales every band by a sinc window to suppress ringing in displays.
pub fn windowed_lowpass(coeffs: &ShCoeffs) -> ShCoeffs {
    let mut out = coeffs.clone();
    for l in 0..=coeffs.degree {
        let s = lowpass_window(l, coeffs.degree);
        for m in -(l as i64)..=l as i64 {
            let k = sh_index(l, m);
            for ch in 0..CHANNELS {
                out.data[k * CHANNELS + ch] *= s;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn coefficient_counts() {
        for (l, n) in [(5, 36), (7, 64), (11, 144), (15, 256), (22, 529), (0, 1)] {
            assert_eq!(num_coeffs(l).unwrap(), n);
        }
        assert!(num_coeffs(-1).is_err());
    }

    #[test]
    fn constant_band_value() {
        let d = SphericalDir::normalized([0.3, -0.2, 0.9]).unwrap();
        let y = eval_sh_basis(d, 4);
        assert!((y[0] - 0.282_094_791_773_878_1).abs() < 1e-12);
    }

    #[test]
    fn pole_has_only_zonal_terms() {
        let y = eval_sh_basis(SphericalDir::new([0.0, 0.0, 1.0]).unwrap(), 8);
        for l in 0..=8usize {
            for m in -(l as i64)..=l as i64 {
                if m != 0 {
                    assert_eq!(y[sh_index(l, m)], 0.0);
                }
            }
            // Y_l^0(+z) = sqrt((2l+1)/(4 pi))
            let want = ((2 * l + 1) as f64 / (4.0 * PI)).sqrt();
            assert!((y[sh_index(l, 0)] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn low_bands_match_closed_forms() {
        // Closed-form real harmonics for l <= 2.
        let v = [0.48, -0.6, 0.64];
        let [x, y, z] = v;
        let d = SphericalDir::new(v).unwrap();
        let b = eval_sh_basis(d, 2);
        let c1 = (3.0 / (4.0 * PI)).sqrt();
        let c2 = 0.5 * (15.0 / PI).sqrt();
        let want = [
            0.5 / PI.sqrt(),
            c1 * y,
            c1 * z,
            c1 * x,
            c2 * x * y,
            c2 * y * z,
            0.25 * (5.0 / PI).sqrt() * (3.0 * z * z - 1.0),
            c2 * x * z,
            0.5 * c2 * (x * x - y * y),
        ];
        for (k, (g, w)) in b.iter().zip(want).enumerate() {
            assert!((g - w).abs() < 1e-12, "k={k}: {g} vs {w}");
        }
    }

    #[test]
    fn constant_map_projects_to_band_zero() {
        // Point-sampled quadrature leaves an O(1/H^2) residue in the zonal
        // bands, so the 1e-6 bound needs a fine grid.
        let env = EnvMap::constant(2048, 1.0).unwrap();
        let c = project(&env, 2);
        for ch in 0..3 {
            assert!((c.get(0, ch) - 2.0 * PI.sqrt()).abs() < 1e-9);
            for k in 1..9 {
                assert!(c.get(k, ch).abs() < 1e-6, "k={k}: {}", c.get(k, ch));
            }
        }
        let zero = project(&EnvMap::constant(8, 0.0).unwrap(), 3);
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reconstruct_constant_and_zero() {
        let mut c = ShCoeffs::zeros(3);
        for ch in 0..3 {
            c.set(0, ch, 2.0 * PI.sqrt());
        }
        let img = reconstruct(&c, 8, 16).unwrap();
        assert!(img.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        let z = reconstruct(&ShCoeffs::zeros(2), 4, 8).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn synthesize_then_project_recovers_coefficients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let degree = 5;
        let n = num_coeffs(degree as i64).unwrap();
        let data: Vec<f64> = (0..n * 3)
            .map(|_| rng.gen_range(0.5..1.5) * if rng.gen() { 1.0 } else { -1.0 })
            .collect();
        let c = ShCoeffs::from_data(degree, data).unwrap();
        let img = reconstruct(&c, 64, 128).unwrap();
        let back = project_image(&img, degree);
        for (a, b) in back.data().iter().zip(c.data()) {
            assert!((a - b).abs() <= 0.01 * b.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn window_values() {
        assert_eq!(lowpass_window(0, 5), 1.0);
        let x = 5.0 * PI / 12.0;
        assert!((lowpass_window(5, 5) - x.sin() / x).abs() < 1e-15);
        assert!((lowpass_window(5, 5) - 0.7378).abs() < 2e-4);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data = (0..36 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c = ShCoeffs::from_data(5, data).unwrap();
        let once = windowed_lowpass(&c);
        let twice = windowed_lowpass(&once);
        for l in 0..=5usize {
            let w = lowpass_window(l, 5);
            for m in -(l as i64)..=l as i64 {
                let k = sh_index(l, m);
                for ch in 0..3 {
                    assert!((once.get(k, ch) - w * c.get(k, ch)).abs() < 1e-15);
                    assert!((twice.get(k, ch) - w * w * c.get(k, ch)).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn text_format_round_trip() {
        let c = ShCoeffs::from_data(1, (0..12).map(|i| i as f64 * 0.1 - 0.3).collect()).unwrap();
        let text = c.to_text();
        assert!(text.starts_with("SH 1 3\n"));
        assert_eq!(text.lines().count(), 13);
        assert_eq!(ShCoeffs::from_text(&text).unwrap(), c);
        assert!(ShCoeffs::from_text("SH 1 1\n0\n0\n0\n0\n").is_err());
        assert!(ShCoeffs::from_text("XX 1 3\n").is_err());
    }
}

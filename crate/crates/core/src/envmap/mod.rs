//! Equirectangular HDR environment maps.
//!
//! Rows sample the polar angle `theta` measured from `+z` (up), columns sample
//! the azimuth `phi` in `[-pi, pi)` measured from `+x` toward `+y`. Every pixel
//! is represented by its center, so row `r` covers
//! `theta in [pi r / H, pi (r + 1) / H]`.

mod pfm;

pub use pfm::{read_pfm, read_pfm_bytes, write_pfm, write_pfm_bytes};

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Mat3;

/// A 3-channel floating point image, stored row-major with the top row first
/// and channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct HdrImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl HdrImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::invalid(format!(
                "expected {} values for a {height}x{width}x3 image, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(HdrImage {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        HdrImage {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> HdrImage {
        HdrImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// An HDR radiance panorama: `width == 2 * height`, three channels, every
/// value finite and nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvMap(HdrImage);

impl EnvMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_image(HdrImage::new(height, width, data)?)
    }

    pub fn from_image(image: HdrImage) -> Result<Self> {
        if image.width != 2 * image.height {
            return Err(Error::invalid(format!(
                "environment map must be twice as wide as it is high, got {}x{}",
                image.height, image.width
            )));
        }
        if let Some(v) = image.data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!(
                "environment map values must be finite and nonnegative, found {v}"
            )));
        }
        Ok(EnvMap(image))
    }

    pub fn constant(height: usize, value: f64) -> Result<Self> {
        Self::new(height, 2 * height, vec![value; height * 2 * height * 3])
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn image(&self) -> &HdrImage {
        &self.0
    }

    pub fn into_image(self) -> HdrImage {
        self.0
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        self.0.pixel(row, col)
    }

    /// Scales every value by `k >= 0`.
    pub fn scaled(&self, k: f64) -> Result<EnvMap> {
        EnvMap::from_image(self.0.map(|v| v * k))
    }

    pub fn read_pfm(path: impl AsRef<Path>) -> Result<EnvMap> {
        EnvMap::from_image(read_pfm(path)?)
    }

    pub fn write_pfm(&self, path: impl AsRef<Path>) -> Result<()> {
        write_pfm(&self.0, path)
    }
}

/// Per-pixel solid angles of an equirectangular grid, in steradians.
#[derive(Debug, Clone, PartialEq)]
pub struct SolidAngleMap {
    height: usize,
    width: usize,
    rows: Vec<f64>,
}

impl SolidAngleMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Weight shared by every pixel of `row`.
    pub fn row_weight(&self, row: usize) -> f64 {
        self.rows[row]
    }

    pub fn weight(&self, row: usize, _col: usize) -> f64 {
        self.rows[row]
    }

    /// Weights expanded to one value per pixel, row-major.
    pub fn to_vec(&self) -> Vec<f64> {
        self.rows
            .iter()
            .flat_map(|&w| std::iter::repeat_n(w, self.width))
            .collect()
    }

    pub fn total(&self) -> f64 {
        self.rows.iter().sum::<f64>() * self.width as f64
    }
}

/// Exact solid angle of every pixel:
/// `(2 pi / W) (cos(pi r / H) - cos(pi (r + 1) / H))` for row `r`.
pub fn solid_angle_weights(height: usize, width: usize) -> Result<SolidAngleMap> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!(
            "solid angle grid must have positive dimensions, got {height}x{width}"
        )));
    }
    let dphi = 2.0 * PI / width as f64;
    let rows = (0..height)
        .map(|r| {
            let t0 = PI * r as f64 / height as f64;
            let t1 = PI * (r + 1) as f64 / height as f64;
            dphi * (t0.cos() - t1.cos())
        })
        .collect();
    Ok(SolidAngleMap {
        height,
        width,
        rows,
    })
}

/// A unit direction on the sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalDir([f64; 3]);

impl SphericalDir {
    /// Wraps `v`, rejecting vectors that are not unit length within 1e-9.
    pub fn new(v: [f64; 3]) -> Result<Self> {
        let n = norm3(v);
        if !n.is_finite() || (n - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "direction must be unit length, got norm {n}"
            )));
        }
        Ok(SphericalDir(v))
    }

    pub fn normalized(v: [f64; 3]) -> Result<Self> {
        let n = norm3(v);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::invalid("cannot normalize a zero or non-finite vector"));
        }
        Ok(SphericalDir([v[0] / n, v[1] / n, v[2] / n]))
    }

    pub fn from_angles(theta: f64, phi: f64) -> Self {
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = phi.sin_cos();
        SphericalDir([st * cp, st * sp, ct])
    }

    pub fn vec(&self) -> [f64; 3] {
        self.0
    }

    /// Polar angle from `+z`.
    pub fn theta(&self) -> f64 {
        let [x, y, z] = self.0;
        (x * x + y * y).sqrt().atan2(z)
    }

    /// Azimuth in `[-pi, pi]`.
    pub fn phi(&self) -> f64 {
        self.0[1].atan2(self.0[0])
    }
}

pub(crate) fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub(crate) fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Direction through the center of pixel `(row, col)`.
pub fn pixel_to_direction(row: usize, col: usize, height: usize, width: usize) -> Result<SphericalDir> {
    if row >= height || col >= width {
        return Err(Error::invalid(format!(
            "pixel ({row}, {col}) outside a {height}x{width} grid"
        )));
    }
    let (theta, phi) = pixel_center_angles(row, col, height, width);
    Ok(SphericalDir::from_angles(theta, phi))
}

pub(crate) fn pixel_center_angles(row: usize, col: usize, height: usize, width: usize) -> (f64, f64) {
    let theta = PI * (row as f64 + 0.5) / height as f64;
    let phi = 2.0 * PI * (col as f64 + 0.5) / width as f64 - PI;
    (theta, phi)
}

/// Direction of every pixel center, row-major.
pub fn pixel_directions(height: usize, width: usize) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let (theta, phi) = pixel_center_angles(r, c, height, width);
            out.push(SphericalDir::from_angles(theta, phi).vec());
        }
    }
    out
}

/// Pixel containing direction `d`.
pub fn direction_to_pixel(d: SphericalDir, height: usize, width: usize) -> (usize, usize) {
    let (y, x) = continuous_pixel_coords(d, height, width);
    let row = (y + 0.5).floor().clamp(0.0, (height - 1) as f64) as usize;
    let col = ((x + 0.5).floor() as i64).rem_euclid(width as i64) as usize;
    (row, col)
}

/// Fractional (row, col) coordinates where integer values land on pixel centers.
fn continuous_pixel_coords(d: SphericalDir, height: usize, width: usize) -> (f64, f64) {
    let y = d.theta() / PI * height as f64 - 0.5;
    let x = (d.phi() + PI) / (2.0 * PI) * width as f64 - 0.5;
    (y, x)
}

/// Resamples `env` so that the output at direction `d` shows the input at
/// `R^T d`. Bilinear interpolation; azimuth wraps, the polar coordinate clamps.
pub fn rotate_envmap(env: &EnvMap, rotation: &Mat3) -> Result<EnvMap> {
    if !rotation.is_rotation(1e-6) {
        return Err(Error::invalid("matrix is not a proper rotation"));
    }
    let (h, w) = (env.height(), env.width());
    let inv = rotation.transpose();
    let mut out = HdrImage::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let (theta, phi) = pixel_center_angles(r, c, h, w);
            let d = SphericalDir::from_angles(theta, phi).vec();
            let src = SphericalDir(inv.mul_vec(d));
            let (y, x) = continuous_pixel_coords(src, h, w);
            out.set_pixel(r, c, bilinear(env.image(), y, x));
        }
    }
    EnvMap::from_image(out)
}

/// Fractions within this distance of a grid line are snapped onto it, so that
/// grid-aligned resampling reproduces source values exactly.
const SNAP: f64 = 1e-9;

fn split_coord(v: f64) -> (i64, f64) {
    let mut base = v.floor();
    let mut frac = v - base;
    if frac < SNAP {
        frac = 0.0;
    } else if frac > 1.0 - SNAP {
        base += 1.0;
        frac = 0.0;
    }
    (base as i64, frac)
}

fn bilinear(img: &HdrImage, y: f64, x: f64) -> [f64; 3] {
    let (h, w) = (img.height as i64, img.width as i64);
    let (y0, fy) = split_coord(y);
    let (x0, fx) = split_coord(x);
    let row = |r: i64| r.clamp(0, h - 1) as usize;
    let col = |c: i64| c.rem_euclid(w) as usize;
    let mut out = [0.0; 3];
    let taps = [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x0 + 1, (1.0 - fy) * fx),
        (y0 + 1, x0, fy * (1.0 - fx)),
        (y0 + 1, x0 + 1, fy * fx),
    ];
    for (ty, tx, wt) in taps {
        if wt == 0.0 {
            continue;
        }
        let p = img.pixel(row(ty), col(tx));
        if wt == 1.0 {
            return p;
        }
        for k in 0..3 {
            out[k] += wt * p[k];
        }
    }
    out
}

/// `x -> ln(x + 1)` on every value.
pub fn log_encode(env: &EnvMap) -> Result<HdrImage> {
    log_encode_image(env.image())
}

pub fn log_encode_image(img: &HdrImage) -> Result<HdrImage> {
    if img.data.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("NaN in log_encode input"));
    }
    if let Some(v) = img.data.iter().find(|v| **v < 0.0) {
        return Err(Error::invalid(format!("log_encode needs nonnegative input, found {v}")));
    }
    Ok(img.map(f64::ln_1p))
}

/// `y -> max(0, exp(y) - 1)`; the inverse of [`log_encode`].
pub fn log_decode(img: &HdrImage) -> Result<EnvMap> {
    if let Some(v) = img.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("log_decode needs finite input, found {v}")));
    }
    EnvMap::from_image(img.map(|y| y.exp_m1().max(0.0)))
}

/// Percentile of `values` with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    sorted[lo] + t * (sorted[hi] - sorted[lo])
}

/// Exposure scale mapping the 90th percentile of `values` to 0.8.
pub fn exposure_scale(values: &[f64]) -> Result<f64> {
    if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::invalid(format!(
            "exposure needs finite nonnegative values, found {v}"
        )));
    }
    let p90 = percentile(values, 0.9);
    if !(p90 > 0.0) {
        return Err(Error::DegenerateExposure(
            "90th percentile is zero; nothing to expose".into(),
        ));
    }
    Ok(0.8 / p90)
}

/// Re-exposes an HDR image so that its 90th percentile (all channels jointly)
/// lands on 0.8, then clips to `[0, 1]`.
pub fn reexpose_ldr(img: &HdrImage) -> Result<HdrImage> {
    let scale = exposure_scale(&img.data)?;
    Ok(img.map(|v| (v * scale).clamp(0.0, 1.0)))
}

pub const DISPLAY_GAMMA: f64 = 1.4;

/// 8-bit display value of a linear value: `round(255 clip(v, 0, 1)^(1/gamma))`.
pub fn tonemap_value(v: f64, gamma: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (255.0 * v.powf(1.0 / gamma) + 0.5).floor() as u8
}

/// Gamma tone mapping to interleaved 8-bit RGB.
pub fn tonemap_display(img: &HdrImage, gamma: f64) -> Result<Vec<u8>> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
    }
    Ok(img.data.iter().map(|&v| tonemap_value(v, gamma)).collect())
}

/// Writes interleaved 8-bit RGB as a PNG.
pub fn write_png(path: impl AsRef<Path>, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| {
        Error::io(path, std::io::Error::other(e.to_string()))
    };
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(rgb).map_err(to_io)?;
    Ok(())
}

/// Solid-angle weighted sum of every channel.
pub fn weighted_energy(env: &EnvMap) -> [f64; 3] {
    let w = solid_angle_weights(env.height(), env.width()).expect("valid envmap dimensions");
    let mut acc = [0.0; 3];
    for r in 0..env.height() {
        let wr = w.row_weight(r);
        for c in 0..env.width() {
            let p = env.pixel(r, c);
            for k in 0..3 {
                acc[k] += wr * p[k];
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solid_angles_small_grids() {
        let w = solid_angle_weights(1, 1).unwrap();
        assert!((w.weight(0, 0) - 4.0 * PI).abs() < 1e-12);
        let w = solid_angle_weights(2, 4).unwrap();
        for r in 0..2 {
            assert!((w.row_weight(r) - PI / 2.0).abs() < 1e-12);
        }
        assert!((w.total() - 4.0 * PI).abs() < 1e-12);
        assert!(solid_angle_weights(0, 4).is_err());
        assert!(solid_angle_weights(4, 0).is_err());
    }

    #[test]
    fn solid_angles_sum_to_sphere() {
        for h in 1..=512 {
            let w = solid_angle_weights(h, 2 * h).unwrap();
            let rel = (w.total() - 4.0 * PI).abs() / (4.0 * PI);
            assert!(rel < 1e-9, "H={h}: rel {rel}");
            assert!((0..h).all(|r| w.row_weight(r) > 0.0));
        }
    }

    #[test]
    fn pixel_direction_formula() {
        let d = pixel_to_direction(0, 1, 2, 4).unwrap();
        assert!((d.theta() - PI / 4.0).abs() < 1e-12);
        assert!((d.phi() + PI / 4.0).abs() < 1e-12);
        assert!(pixel_to_direction(2, 0, 2, 4).is_err());
        assert!(pixel_to_direction(0, 4, 2, 4).is_err());
    }

    #[test]
    fn pixel_direction_round_trip() {
        let (h, w) = (16, 32);
        for r in 0..h {
            for c in 0..w {
                let d = pixel_to_direction(r, c, h, w).unwrap();
                assert!((norm3(d.vec()) - 1.0).abs() < 1e-12);
                assert_eq!(direction_to_pixel(d, h, w), (r, c));
            }
        }
    }

    #[test]
    fn bottom_row_approaches_down_pole() {
        let mut last = 0.0;
        for h in [4, 16, 64, 256, 1024] {
            let t = pixel_to_direction(h - 1, 0, h, 2 * h).unwrap().theta();
            assert!(t > last);
            last = t;
        }
        assert!(PI - last < 2e-3);
    }

    fn ramp_map(h: usize) -> EnvMap {
        let w = 2 * h;
        let data = (0..h * w * 3).map(|i| (i % 97) as f64 * 0.25).collect();
        EnvMap::new(h, w, data).unwrap()
    }

    #[test]
    fn identity_rotation_is_exact() {
        let env = ramp_map(8);
        let out = rotate_envmap(&env, &Mat3::identity()).unwrap();
        assert_eq!(out, env);
    }

    #[test]
    fn grid_aligned_azimuth_rotation_shifts_columns() {
        let env = ramp_map(8);
        let w = env.width();
        for k in [1usize, 3, 5, 16] {
            let angle = 2.0 * PI * k as f64 / w as f64;
            let out = rotate_envmap(&env, &Mat3::rotation_z(angle)).unwrap();
            for r in 0..env.height() {
                for c in 0..w {
                    assert_eq!(out.pixel(r, c), env.pixel(r, (c + w - k) % w), "k={k} r={r} c={c}");
                }
            }
        }
    }

    #[test]
    fn rotation_rejects_non_rotations() {
        let env = ramp_map(4);
        let mut m = Mat3::identity();
        m.0[0][0] = -1.0;
        assert!(rotate_envmap(&env, &m).is_err());
        m.0[0][0] = 2.0;
        assert!(rotate_envmap(&env, &m).is_err());
    }

    #[test]
    fn log_round_trip_values() {
        let env = EnvMap::new(1, 2, vec![0.0, 1.0f64.exp() - 1.0, 3.0, 1e4, 1e-6, 0.5]).unwrap();
        let enc = log_encode(&env).unwrap();
        assert_eq!(enc.data()[0], 0.0);
        assert!((enc.data()[1] - 1.0).abs() < 1e-12);
        let dec = log_decode(&enc).unwrap();
        for (a, b) in dec.data().iter().zip(env.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-300));
        }
        let nan = HdrImage::new(1, 1, vec![f64::NAN, 0.0, 0.0]).unwrap();
        assert!(log_encode_image(&nan).is_err());
        assert!(log_decode(&nan).is_err());
        // Decoding clamps at zero.
        let neg = HdrImage::new(1, 2, vec![-3.0; 6]).unwrap();
        assert!(log_decode(&neg).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f64> = (0..11).map(|i| i as f64).collect();
        assert_eq!(percentile(&v, 0.9), 9.0);
        assert!((percentile(&[0.0, 1.0], 0.9) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn reexposure_cases() {
        // p90 = 1.6 -> scale 0.5
        let img = HdrImage::new(1, 1, vec![1.6, 1.6, 1.6]).unwrap();
        assert!((exposure_scale(img.data()).unwrap() - 0.5).abs() < 1e-15);

        let img = HdrImage::new(2, 2, vec![0.8; 12]).unwrap();
        let out = reexpose_ldr(&img).unwrap();
        for v in out.data() {
            assert!((v - 0.8).abs() < 1e-15);
        }

        // p90 = 0.08 with a max of 1.0: 11 values at 0.08 put the 90th
        // percentile among them.
        let mut data = vec![0.08; 12];
        data[11] = 1.0;
        let img = HdrImage::new(2, 2, data).unwrap();
        assert!((exposure_scale(img.data()).unwrap() - 10.0).abs() < 1e-12);
        let out = reexpose_ldr(&img).unwrap();
        assert_eq!(out.data()[11], 1.0);

        assert!(matches!(
            reexpose_ldr(&HdrImage::zeros(2, 2)),
            Err(Error::DegenerateExposure(_))
        ));
    }

    #[test]
    fn tonemap_endpoints() {
        assert_eq!(tonemap_value(0.0, 1.4), 0);
        assert_eq!(tonemap_value(1.0, 1.4), 255);
        assert_eq!(tonemap_value(0.5, 1.0), 128);
        assert_eq!(tonemap_value(7.0, 1.4), 255);
        let img = HdrImage::zeros(1, 1);
        assert!(tonemap_display(&img, 0.0).is_err());
        assert!(tonemap_display(&img, -1.0).is_err());
    }

    #[test]
    fn envmap_invariants() {
        assert!(EnvMap::new(2, 3, vec![0.0; 18]).is_err());
        assert!(EnvMap::new(1, 2, vec![0.0, 0.0, -1.0, 0.0, 0.0, 0.0]).is_err());
        assert!(EnvMap::new(1, 2, vec![f64::INFINITY, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
        assert!(EnvMap::new(1, 2, vec![0.0; 5]).is_err());
    }
}

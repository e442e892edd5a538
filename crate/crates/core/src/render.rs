//! Single-bounce object rendering under environment lighting.
//!
//! Objects are seen by an orthographic camera looking along `-z`; normals live
//! in the same frame as environment-map directions and the view vector is
//! `v = (0, 0, 1)`. There is no visibility term.

use std::f64::consts::PI;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envmap::{
    dot3, exposure_scale, norm3, pixel_directions, read_pfm, solid_angle_weights, write_pfm, EnvMap, HdrImage,
};
use crate::error::{Error, Result};
use crate::linalg::Mat3;

/// Per-pixel unit normals of an object on a square image, with a coverage mask.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    size: usize,
    normals: Vec<[f64; 3]>,
    mask: Vec<bool>,
}

/// Image-plane coordinates of a pixel center in `[-1, 1]^2`, `v` pointing up.
fn pixel_uv(row: usize, col: usize, size: usize) -> (f64, f64) {
    let u = 2.0 * (col as f64 + 0.5) / size as f64 - 1.0;
    let v = 1.0 - 2.0 * (row as f64 + 0.5) / size as f64;
    (u, v)
}

impl NormalMap {
    pub fn new(size: usize, normals: Vec<[f64; 3]>, mask: Vec<bool>) -> Result<Self> {
        if size == 0 || normals.len() != size * size || mask.len() != size * size {
            return Err(Error::invalid("normal map buffers do not match its size"));
        }
        let mut normals = normals;
        for (n, m) in normals.iter_mut().zip(&mask) {
            if *m {
                let len = norm3(*n);
                if !len.is_finite() || (len - 1.0).abs() > 1e-6 {
                    return Err(Error::invalid(format!("masked normal {n:?} is not unit length")));
                }
            } else {
                *n = [0.0; 3];
            }
        }
        Ok(NormalMap { size, normals, mask })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn normals(&self) -> &[[f64; 3]] {
        &self.normals
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Indices of covered pixels, row-major.
    pub fn masked_pixels(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn coverage(&self) -> f64 {
        self.mask.iter().filter(|m| **m).count() as f64 / self.mask.len() as f64
    }

    /// Applies `rotation` to every covered normal.
    pub fn rotated(&self, rotation: &Mat3) -> NormalMap {
        let normals = self
            .normals
            .iter()
            .zip(&self.mask)
            .map(|(n, m)| if *m { rotation.mul_vec(*n) } else { [0.0; 3] })
            .collect();
        NormalMap {
            size: self.size,
            normals,
            mask: self.mask.clone(),
        }
    }

    /// Encodes covered normals as `(n + 1) / 2` and background as exact zeros.
    pub fn to_image(&self) -> HdrImage {
        let mut data = Vec::with_capacity(self.size * self.size * 3);
        for (n, m) in self.normals.iter().zip(&self.mask) {
            if *m {
                data.extend(n.iter().map(|c| (c + 1.0) / 2.0));
            } else {
                data.extend([0.0; 3]);
            }
        }
        HdrImage::new(self.size, self.size, data).expect("consistent buffer")
    }

    /// Inverse of [`Self::to_image`]; all-zero pixels are background.
    pub fn from_image(img: &HdrImage) -> Result<Self> {
        if img.height() != img.width() {
            return Err(Error::invalid("normal maps must be square"));
        }
        let size = img.height();
        let mut normals = Vec::with_capacity(size * size);
        let mut mask = Vec::with_capacity(size * size);
        for p in img.data().chunks_exact(3) {
            if p.iter().all(|&c| c == 0.0) {
                normals.push([0.0; 3]);
                mask.push(false);
                continue;
            }
            let n = [2.0 * p[0] - 1.0, 2.0 * p[1] - 1.0, 2.0 * p[2] - 1.0];
            let len = norm3(n);
            if !(len > 1e-3) || !len.is_finite() {
                return Err(Error::invalid(format!("pixel {p:?} does not encode a normal")));
            }
            normals.push(n.map(|c| c / len));
            mask.push(true);
        }
        NormalMap::new(size, normals, mask)
    }

    pub fn read_pfm(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_image(&read_pfm(path)?)
    }

    pub fn write_pfm(&self, path: impl AsRef<Path>) -> Result<()> {
        write_pfm(&self.to_image(), path)
    }
}

/// Unit sphere seen orthographically: `n = (u, v, sqrt(1 - u^2 - v^2))`.
pub fn sphere_normal_map(size: usize) -> Result<NormalMap> {
    if size < 2 {
        return Err(Error::invalid("normal map size must be >= 2"));
    }
    let mut normals = Vec::with_capacity(size * size);
    let mut mask = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let (u, v) = pixel_uv(r, c, size);
            let q = u * u + v * v;
            if q <= 1.0 {
                let n = [u, v, (1.0 - q).sqrt()];
                let len = norm3(n);
                normals.push(n.map(|x| x / len));
                mask.push(true);
            } else {
                normals.push([0.0; 3]);
                mask.push(false);
            }
        }
    }
    NormalMap::new(size, normals, mask)
}

/// Sphere with radial displacement `1 + a cos(k theta) cos(k phi)`.
///
/// The spike pattern uses polar angle `theta` from `+x` and azimuth `phi`
/// around `+x`, so the parametrization's poles sit on the silhouette. Each
/// covered pixel takes the displaced-surface normal at the spherical
/// coordinates of its unit-sphere point; the silhouette mask is the unit disc.
pub fn spiky_sphere_normal_map(size: usize, amplitude: f64, frequency: f64) -> Result<NormalMap> {
    posed_spiky_sphere_normal_map(size, amplitude, frequency, &Mat3::identity())
}

/// [`spiky_sphere_normal_map`] with the object turned by `pose`: the spike
/// pattern is evaluated in object space and its normals carried back to
/// camera space.
pub fn posed_spiky_sphere_normal_map(size: usize, amplitude: f64, frequency: f64, pose: &Mat3) -> Result<NormalMap> {
    if !(0.0..0.5).contains(&amplitude) {
        return Err(Error::invalid(format!("spike amplitude must be in [0, 0.5), got {amplitude}")));
    }
    if !(frequency >= 1.0) {
        return Err(Error::invalid(format!("spike frequency must be >= 1, got {frequency}")));
    }
    let sphere = sphere_normal_map(size)?;
    let surface = |theta: f64, phi: f64| -> [f64; 3] {
        let rho = 1.0 + amplitude * (frequency * theta).cos() * (frequency * phi).cos();
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = phi.sin_cos();
        [rho * ct, rho * st * cp, rho * st * sp]
    };
    const H: f64 = 1e-5;
    let inverse = pose.transpose();
    let normals = sphere
        .normals
        .iter()
        .zip(&sphere.mask)
        .map(|(p, m)| {
            if !*m {
                return [0.0; 3];
            }
            let p = &inverse.mul_vec(*p);
            let theta = p[0].clamp(-1.0, 1.0).acos();
            let phi = p[2].atan2(p[1]);
            let a = surface(theta + H, phi);
            let b = surface(theta - H, phi);
            let c = surface(theta, phi + H);
            let d = surface(theta, phi - H);
            let dt = [(a[0] - b[0]) / (2.0 * H), (a[1] - b[1]) / (2.0 * H), (a[2] - b[2]) / (2.0 * H)];
            let dp = [(c[0] - d[0]) / (2.0 * H), (c[1] - d[1]) / (2.0 * H), (c[2] - d[2]) / (2.0 * H)];
            let mut n = [
                dt[1] * dp[2] - dt[2] * dp[1],
                dt[2] * dp[0] - dt[0] * dp[2],
                dt[0] * dp[1] - dt[1] * dp[0],
            ];
            if dot3(n, *p) < 0.0 {
                n = n.map(|x| -x);
            }
            let len = norm3(n);
            pose.mul_vec(n.map(|x| x / len))
        })
        .collect();
    NormalMap::new(size, normals, sphere.mask)
}

/// Lambertian plus normalized Phong lobe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Brdf {
    pub diffuse: f64,
    pub specular: f64,
    pub exponent: f64,
}

impl Brdf {
    pub fn new(diffuse: f64, specular: f64, exponent: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&diffuse) || !(0.0..=1.0).contains(&specular) {
            return Err(Error::invalid("diffuse and specular weights must lie in [0, 1]"));
        }
        if diffuse + specular > 1.0 + 1e-12 {
            return Err(Error::invalid(format!(
                "diffuse + specular must not exceed 1, got {}",
                diffuse + specular
            )));
        }
        if !(exponent >= 1.0) || !exponent.is_finite() {
            return Err(Error::invalid(format!("Phong exponent must be >= 1, got {exponent}")));
        }
        Ok(Brdf {
            diffuse,
            specular,
            exponent,
        })
    }

    /// Shading integrand for normal `n` and light direction `d`, without the
    /// solid-angle factor.
    #[inline]
    pub fn integrand(&self, n: [f64; 3], d: [f64; 3]) -> f64 {
        let cos = dot3(n, d);
        let mut f = if cos > 0.0 { self.diffuse / PI * cos } else { 0.0 };
        if self.specular > 0.0 {
            // r = 2 (n . v) n - v with v = +z
            let r = [2.0 * n[2] * n[0], 2.0 * n[2] * n[1], 2.0 * n[2] * n[2] - 1.0];
            let rd = dot3(r, d);
            if rd > 0.0 {
                f += self.specular * (self.exponent + 2.0) / (2.0 * PI) * rd.powf(self.exponent);
            }
        }
        f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Material {
    Diffuse,
    Rough,
    Glossy,
}

impl Material {
    pub const ALL: [Material; 3] = [Material::Diffuse, Material::Rough, Material::Glossy];

    pub fn brdf(self) -> Brdf {
        match self {
            Material::Diffuse => Brdf { diffuse: 0.5, specular: 0.0, exponent: 1.0 },
            Material::Rough => Brdf { diffuse: 0.5, specular: 0.3, exponent: 10.0 },
            Material::Glossy => Brdf { diffuse: 0.05, specular: 0.9, exponent: 200.0 },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Material::Diffuse => "diffuse",
            Material::Rough => "rough",
            Material::Glossy => "glossy",
        }
    }
}

impl std::str::FromStr for Material {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diffuse" => Ok(Material::Diffuse),
            "rough" => Ok(Material::Rough),
            "glossy" => Ok(Material::Glossy),
            _ => Err(Error::invalid(format!("unknown material {s:?} (diffuse|rough|glossy)"))),
        }
    }
}

/// Default cap on transport matrix entries (512 MB of f64).
pub const DEFAULT_TRANSPORT_BUDGET: u64 = 64 * 1024 * 1024;

/// Linear map from environment texels to covered object pixels, shared by all
/// color channels. Row `i` belongs to image pixel `pixels[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportMatrix {
    image_size: usize,
    pixels: Vec<usize>,
    env_height: usize,
    env_width: usize,
    data: Vec<f64>,
}

impl TransportMatrix {
    pub fn rows(&self) -> usize {
        self.pixels.len()
    }

    pub fn cols(&self) -> usize {
        self.env_height * self.env_width
    }

    pub fn env_height(&self) -> usize {
        self.env_height
    }

    pub fn env_width(&self) -> usize {
        self.env_width
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn pixels(&self) -> &[usize] {
        &self.pixels
    }

    /// Row-major `rows x cols` entries.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let q = self.cols();
        &self.data[i * q..(i + 1) * q]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows()).map(|i| self.row(i).iter().sum()).collect()
    }

    /// Column `j` scattered back into a full single-channel image.
    pub fn column_image(&self, j: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.image_size * self.image_size];
        for (i, &p) in self.pixels.iter().enumerate() {
            out[p] = self.data[i * self.cols() + j];
        }
        out
    }
}

/// Builds `T[i, j] = f(n_i, d_j) * dw_j` over every covered pixel and texel.
pub fn build_transport(
    normals: &NormalMap,
    brdf: &Brdf,
    env_height: usize,
    env_width: usize,
    budget: u64,
) -> Result<TransportMatrix> {
    if env_height == 0 || env_width == 0 {
        return Err(Error::invalid("environment grid must be non-empty"));
    }
    let pixels = normals.masked_pixels();
    let q = env_height * env_width;
    let required = pixels.len() as u64 * q as u64;
    if required > budget {
        return Err(Error::Resource { required, budget });
    }
    let dirs = pixel_directions(env_height, env_width);
    let dw = solid_angle_weights(env_height, env_width)?.to_vec();
    let mut data = vec![0.0; pixels.len() * q];
    if q > 0 {
        data.par_chunks_mut(q).zip(pixels.par_iter()).for_each(|(row, &p)| {
            let n = normals.normals[p];
            for (j, t) in row.iter_mut().enumerate() {
                *t = brdf.integrand(n, dirs[j]) * dw[j];
            }
        });
    }
    Ok(TransportMatrix {
        image_size: normals.size,
        pixels,
        env_height,
        env_width,
        data,
    })
}

fn check_env(env: &EnvMap, h: usize, w: usize) -> Result<()> {
    if env.height() != h || env.width() != w {
        return Err(Error::invalid(format!(
            "environment map is {}x{}, transport expects {h}x{w}",
            env.height(),
            env.width()
        )));
    }
    Ok(())
}

/// `image = T e` per channel; uncovered pixels are zero.
pub fn render_with_transport(transport: &TransportMatrix, env: &EnvMap) -> Result<HdrImage> {
    check_env(env, transport.env_height, transport.env_width)?;
    let size = transport.image_size;
    let mut img = HdrImage::zeros(size, size);
    let e = env.data();
    let values: Vec<[f64; 3]> = (0..transport.rows())
        .into_par_iter()
        .map(|i| {
            let mut acc = [0.0; 3];
            for (j, t) in transport.row(i).iter().enumerate() {
                acc[0] += t * e[3 * j];
                acc[1] += t * e[3 * j + 1];
                acc[2] += t * e[3 * j + 2];
            }
            acc
        })
        .collect();
    for (i, &p) in transport.pixels.iter().enumerate() {
        img.data_mut()[3 * p..3 * p + 3].copy_from_slice(&values[i]);
    }
    Ok(img)
}

/// Renders pixel by pixel without forming the transport matrix.
pub fn render_direct(normals: &NormalMap, brdf: &Brdf, env: &EnvMap) -> Result<HdrImage> {
    let (h, w) = (env.height(), env.width());
    let weights = solid_angle_weights(h, w)?;
    let size = normals.size;
    let e = env.data();
    let mut img = HdrImage::zeros(size, size);
    img.data_mut().par_chunks_mut(3).enumerate().for_each(|(p, out)| {
        if !normals.mask[p] {
            return;
        }
        let n = normals.normals[p];
        let mut acc = [0.0; 3];
        for r in 0..h {
            let dw = weights.row_weight(r);
            for c in 0..w {
                let (theta, phi) = crate::envmap::pixel_center_angles(r, c, h, w);
                let d = crate::envmap::SphericalDir::from_angles(theta, phi).vec();
                let t = brdf.integrand(n, d) * dw;
                let j = r * w + c;
                for k in 0..3 {
                    acc[k] += t * e[3 * j + k];
                }
            }
        }
        out.copy_from_slice(&acc);
    });
    Ok(img)
}

/// LDR object image plus its normals: the predictor's input.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectObservation {
    pub rgb: HdrImage,
    pub normals: NormalMap,
}

impl ObjectObservation {
    pub const CHANNELS: usize = 6;

    pub fn size(&self) -> usize {
        self.normals.size
    }

    /// Six planes (r, g, b, nx, ny, nz), each `size x size`, background zero.
    pub fn input_channels(&self) -> Vec<f32> {
        let s = self.size();
        let mut out = vec![0.0f32; 6 * s * s];
        for p in 0..s * s {
            if !self.normals.mask[p] {
                continue;
            }
            for k in 0..3 {
                out[k * s * s + p] = self.rgb.data()[3 * p + k] as f32;
                out[(3 + k) * s * s + p] = self.normals.normals[p][k] as f32;
            }
        }
        out
    }
}

/// Re-exposes an HDR object render (90th percentile of covered pixels to 0.8),
/// clips to `[0, 1]` and zeroes the background.
pub fn observation_from_render(normals: &NormalMap, hdr: &HdrImage) -> Result<ObjectObservation> {
    if hdr.height() != normals.size || hdr.width() != normals.size {
        return Err(Error::invalid("render and normal map sizes differ"));
    }
    let covered: Vec<f64> = normals
        .masked_pixels()
        .iter()
        .flat_map(|&p| hdr.data()[3 * p..3 * p + 3].to_vec())
        .collect();
    let scale = exposure_scale(&covered)?;
    let mut rgb = HdrImage::zeros(normals.size, normals.size);
    for p in normals.masked_pixels() {
        for k in 0..3 {
            rgb.data_mut()[3 * p + k] = (hdr.data()[3 * p + k] * scale).clamp(0.0, 1.0);
        }
    }
    Ok(ObjectObservation {
        rgb,
        normals: normals.clone(),
    })
}

pub fn make_observation(normals: &NormalMap, brdf: &Brdf, env: &EnvMap) -> Result<ObjectObservation> {
    observation_from_render(normals, &render_direct(normals, brdf, env)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envmap::percentile;
    use rand::{Rng, SeedableRng};

    fn random_env(h: usize, seed: u64) -> EnvMap {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        EnvMap::new(h, 2 * h, (0..h * 2 * h * 3).map(|_| rng.gen_range(0.0..5.0)).collect()).unwrap()
    }

    #[test]
    fn sphere_map_geometry() {
        let nm = sphere_normal_map(128).unwrap();
        let center = nm.normals()[64 * 128 + 64];
        assert!(center[2] > 0.999);
        assert!((nm.coverage() - PI / 4.0).abs() < 0.02 * PI / 4.0);
        for (n, m) in nm.normals().iter().zip(nm.mask()) {
            if *m {
                assert!((norm3(*n) - 1.0).abs() < 1e-6);
            } else {
                assert_eq!(*n, [0.0; 3]);
            }
        }
        assert!(sphere_normal_map(1).is_err());
    }

    #[test]
    fn posed_spikes() {
        let pose = Mat3::rotation_z(0.7).mul(&Mat3::rotation_y(1.9));
        let flat = posed_spiky_sphere_normal_map(32, 0.0, 6.0, &pose).unwrap();
        let sphere = sphere_normal_map(32).unwrap();
        for (a, b) in flat.normals().iter().zip(sphere.normals()) {
            assert!((0..3).all(|k| (a[k] - b[k]).abs() < 1e-4));
        }
        let upright = spiky_sphere_normal_map(32, 0.2, 6.0).unwrap();
        let same = posed_spiky_sphere_normal_map(32, 0.2, 6.0, &Mat3::identity()).unwrap();
        assert_eq!(upright, same);
        let turned = posed_spiky_sphere_normal_map(32, 0.2, 6.0, &pose).unwrap();
        assert_ne!(turned, upright);
        for (n, m) in turned.normals().iter().zip(turned.mask()) {
            if *m {
                assert!((norm3(*n) - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn flat_spikes_match_sphere() {
        let a = sphere_normal_map(64).unwrap();
        let b = spiky_sphere_normal_map(64, 0.0, 6.0).unwrap();
        for (x, y) in a.normals().iter().zip(b.normals()) {
            for k in 0..3 {
                assert!((x[k] - y[k]).abs() < 1e-4);
            }
        }
        assert!(spiky_sphere_normal_map(64, 0.5, 6.0).is_err());
        assert!(spiky_sphere_normal_map(64, 0.1, 0.5).is_err());
    }

    #[test]
    fn spikes_broaden_the_normal_distribution() {
        let var = |nm: &NormalMap| {
            let zs: Vec<f64> = nm.masked_pixels().iter().map(|&p| nm.normals()[p][2]).collect();
            let mean = zs.iter().sum::<f64>() / zs.len() as f64;
            zs.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / zs.len() as f64
        };
        let smooth = sphere_normal_map(128).unwrap();
        let spiky = spiky_sphere_normal_map(128, 0.2, 6.0).unwrap();
        for (n, m) in spiky.normals().iter().zip(spiky.mask()) {
            if *m {
                assert!((norm3(*n) - 1.0).abs() < 1e-6);
            }
        }
        assert!(var(&spiky) > var(&smooth));
    }

    #[test]
    fn normal_map_pfm_encoding_round_trips() {
        let nm = spiky_sphere_normal_map(16, 0.2, 3.0).unwrap();
        let img = nm.to_image();
        let back = NormalMap::from_image(&img).unwrap();
        assert_eq!(back.mask(), nm.mask());
        for (a, b) in back.normals().iter().zip(nm.normals()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn brdf_validation() {
        assert!(Brdf::new(0.6, 0.6, 10.0).is_err());
        assert!(Brdf::new(0.5, 0.3, 0.5).is_err());
        assert!(Brdf::new(-0.1, 0.0, 1.0).is_err());
        for m in Material::ALL {
            let b = m.brdf();
            assert_eq!(Brdf::new(b.diffuse, b.specular, b.exponent).unwrap(), b);
            assert_eq!(m.name().parse::<Material>().unwrap(), m);
        }
    }

    #[test]
    fn constant_light_through_lambertian_gives_albedo() {
        let nm = sphere_normal_map(32).unwrap();
        let t = build_transport(&nm, &Material::Diffuse.brdf(), 64, 128, DEFAULT_TRANSPORT_BUDGET).unwrap();
        for s in t.row_sums() {
            assert!((s - 0.5).abs() < 0.02 * 0.5);
        }
        let img = render_with_transport(&t, &EnvMap::constant(64, 1.0).unwrap()).unwrap();
        for p in nm.masked_pixels() {
            assert!((img.data()[3 * p] - 0.5).abs() < 1e-3, "{}", img.data()[3 * p]);
        }
    }

    #[test]
    fn constant_light_through_phong_lobe() {
        let nm = sphere_normal_map(16).unwrap();
        let brdf = Brdf::new(0.0, 1.0, 50.0).unwrap();
        let env = EnvMap::constant(128, 1.0).unwrap();
        let img = render_direct(&nm, &brdf, &env).unwrap();
        let want = 52.0 / 51.0;
        for p in nm.masked_pixels() {
            let v = img.data()[3 * p];
            assert!((v - want).abs() < 0.01 * want, "{v} vs {want}");
        }
    }

    #[test]
    fn zero_light_renders_black() {
        let nm = sphere_normal_map(16).unwrap();
        let t = build_transport(&nm, &Material::Rough.brdf(), 8, 16, DEFAULT_TRANSPORT_BUDGET).unwrap();
        let img = render_with_transport(&t, &EnvMap::constant(8, 0.0).unwrap()).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transport_budget_is_enforced() {
        let nm = sphere_normal_map(16).unwrap();
        let need = nm.masked_pixels().len() as u64 * 8 * 16;
        match build_transport(&nm, &Material::Diffuse.brdf(), 8, 16, need - 1) {
            Err(Error::Resource { required, budget }) => {
                assert_eq!(required, need);
                assert_eq!(budget, need - 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn transport_render_is_linear() {
        let nm = sphere_normal_map(16).unwrap();
        let t = build_transport(&nm, &Material::Rough.brdf(), 8, 16, DEFAULT_TRANSPORT_BUDGET).unwrap();
        let (e1, e2) = (random_env(8, 1), random_env(8, 2));
        let sum = EnvMap::new(8, 16, e1.data().iter().zip(e2.data()).map(|(a, b)| a + b).collect()).unwrap();
        let r1 = render_with_transport(&t, &e1).unwrap();
        let r2 = render_with_transport(&t, &e2).unwrap();
        let rs = render_with_transport(&t, &sum).unwrap();
        for i in 0..rs.data().len() {
            assert!((rs.data()[i] - r1.data()[i] - r2.data()[i]).abs() < 1e-10);
        }
        let r_double = render_with_transport(&t, &e1.scaled(2.0).unwrap()).unwrap();
        for i in 0..r1.data().len() {
            assert_eq!(r_double.data()[i], 2.0 * r1.data()[i]);
        }
        assert!(render_with_transport(&t, &random_env(4, 3)).is_err());
    }

    #[test]
    fn impulse_light_selects_a_column() {
        let nm = sphere_normal_map(12).unwrap();
        let brdf = Material::Glossy.brdf();
        let t = build_transport(&nm, &brdf, 8, 16, DEFAULT_TRANSPORT_BUDGET).unwrap();
        let j = 2 * 16 + 5;
        let mut data = vec![0.0; 8 * 16 * 3];
        data[3 * j..3 * j + 3].copy_from_slice(&[1.0; 3]);
        let env = EnvMap::new(8, 16, data).unwrap();
        let img = render_direct(&nm, &brdf, &env).unwrap();
        let col = t.column_image(j);
        for p in 0..12 * 12 {
            assert!((img.data()[3 * p] - col[p]).abs() < 1e-15);
        }
    }

    #[test]
    fn direct_and_transport_renders_agree() {
        let nm = spiky_sphere_normal_map(16, 0.2, 4.0).unwrap();
        for m in Material::ALL {
            let env = random_env(8, m as u64);
            let t = build_transport(&nm, &m.brdf(), 8, 16, DEFAULT_TRANSPORT_BUDGET).unwrap();
            let a = render_with_transport(&t, &env).unwrap();
            let b = render_direct(&nm, &m.brdf(), &env).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn azimuth_rotation_of_light_and_normals_cancels() {
        let nm = sphere_normal_map(32).unwrap();
        let env = random_env(16, 4);
        let r = Mat3::rotation_z(2.0 * PI * 3.0 / 32.0);
        let rotated_env = crate::envmap::rotate_envmap(&env, &r).unwrap();
        for m in [Material::Diffuse, Material::Rough] {
            let a = render_direct(&nm, &m.brdf(), &env).unwrap();
            let b = render_direct(&nm.rotated(&r), &m.brdf(), &rotated_env).unwrap();
            let mean = a.data().iter().sum::<f64>() / a.data().len() as f64;
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 0.02 * mean.max(*x));
            }
        }
    }

    #[test]
    fn observation_contract() {
        let nm = sphere_normal_map(32).unwrap();
        let env = random_env(8, 5);
        let obs = make_observation(&nm, &Material::Diffuse.brdf(), &env).unwrap();
        assert!(obs.rgb.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for p in 0..32 * 32 {
            if !nm.mask()[p] {
                assert_eq!(&obs.rgb.data()[3 * p..3 * p + 3], &[0.0; 3]);
            }
        }
        let covered: Vec<f64> = nm
            .masked_pixels()
            .iter()
            .flat_map(|&p| obs.rgb.data()[3 * p..3 * p + 3].to_vec())
            .collect();
        if covered.iter().all(|&v| v < 1.0) {
            assert!((percentile(&covered, 0.9) - 0.8).abs() < 1e-12);
        }
        assert_eq!(obs, make_observation(&nm, &Material::Diffuse.brdf(), &env).unwrap());
        let input = obs.input_channels();
        assert_eq!(input.len(), 6 * 32 * 32);

        let dark = EnvMap::constant(8, 0.0).unwrap();
        assert!(matches!(
            make_observation(&nm, &Material::Diffuse.brdf(), &dark),
            Err(Error::DegenerateExposure(_))
        ));
    }
}

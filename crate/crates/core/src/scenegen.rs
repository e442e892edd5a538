//! Procedural box-room lighting scenes.
//!
//! A scene is an axis-aligned room `[0, w] x [0, d] x [0, h]` (meters, `+z`
//! up) whose six faces carry textures of albedo and emission. Panoramas are
//! rendered from any interior point with an exact ray-box intersection, which
//! makes viewpoint changes geometrically consistent by construction.

use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envmap::{pixel_center_angles, EnvMap, HdrImage, SphericalDir};
use crate::error::{Error, Result};
use crate::linalg::Mat3;
use crate::rng::{seeded, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Face {
    NegX,
    PosX,
    NegY,
    PosY,
    Floor,
    Ceiling,
}

impl Face {
    pub const ALL: [Face; 6] = [Face::NegX, Face::PosX, Face::NegY, Face::PosY, Face::Floor, Face::Ceiling];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Unit normal pointing into the room.
    pub fn inward_normal(self) -> [f64; 3] {
        match self {
            Face::NegX => [1.0, 0.0, 0.0],
            Face::PosX => [-1.0, 0.0, 0.0],
            Face::NegY => [0.0, 1.0, 0.0],
            Face::PosY => [0.0, -1.0, 0.0],
            Face::Floor => [0.0, 0.0, 1.0],
            Face::Ceiling => [0.0, 0.0, -1.0],
        }
    }

    /// Axes of the face's (u, v) parametrization: walls use (horizontal, z),
    /// floor and ceiling use (x, y).
    fn uv_axes(self) -> (usize, usize) {
        match self {
            Face::NegX | Face::PosX => (1, 2),
            Face::NegY | Face::PosY => (0, 2),
            Face::Floor | Face::Ceiling => (0, 1),
        }
    }

    fn normal_axis(self) -> usize {
        match self {
            Face::NegX | Face::PosX => 0,
            Face::NegY | Face::PosY => 1,
            Face::Floor | Face::Ceiling => 2,
        }
    }

    fn is_max_side(self) -> bool {
        matches!(self, Face::PosX | Face::PosY | Face::Ceiling)
    }

    fn from_axis(axis: usize, max_side: bool) -> Face {
        match (axis, max_side) {
            (0, false) => Face::NegX,
            (0, true) => Face::PosX,
            (1, false) => Face::NegY,
            (1, true) => Face::PosY,
            (2, false) => Face::Floor,
            _ => Face::Ceiling,
        }
    }
}

/// Albedo and emission of one face, `nu x nv` texels, texel `(iu, iv)` at
/// index `iv * nu + iu`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceTexture {
    pub nu: usize,
    pub nv: usize,
    pub albedo: Vec<[f64; 3]>,
    pub emission: Vec<[f64; 3]>,
}

impl FaceTexture {
    pub fn uniform(nu: usize, nv: usize, albedo: [f64; 3], emission: [f64; 3]) -> Self {
        FaceTexture {
            nu,
            nv,
            albedo: vec![albedo; nu * nv],
            emission: vec![emission; nu * nv],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxScene {
    /// Room size along x, y and z in meters.
    pub extents: [f64; 3],
    pub faces: [FaceTexture; 6],
    /// Ambient irradiance reflected by every albedo texel.
    pub ambient: f64,
}

impl BoxScene {
    pub fn new(extents: [f64; 3], faces: [FaceTexture; 6], ambient: f64) -> Result<Self> {
        if extents.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
            return Err(Error::invalid(format!("room extents must be positive, got {extents:?}")));
        }
        if !(ambient >= 0.0) || !ambient.is_finite() {
            return Err(Error::invalid("ambient level must be finite and >= 0"));
        }
        for f in &faces {
            if f.nu == 0 || f.nv == 0 || f.albedo.len() != f.nu * f.nv || f.emission.len() != f.nu * f.nv {
                return Err(Error::invalid("face texture size does not match its resolution"));
            }
            if f.albedo.iter().flatten().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::invalid("albedo must lie in [0, 1]"));
            }
            if f.emission.iter().flatten().any(|e| !(*e >= 0.0) || !e.is_finite()) {
                return Err(Error::invalid("emission must be finite and >= 0"));
            }
        }
        Ok(BoxScene { extents, faces, ambient })
    }

    pub fn face(&self, face: Face) -> &FaceTexture {
        &self.faces[face.index()]
    }

    /// Size of `face` along its u and v axes.
    pub fn face_size(&self, face: Face) -> (f64, f64) {
        let (a, b) = face.uv_axes();
        (self.extents[a], self.extents[b])
    }

    pub fn center(&self) -> [f64; 3] {
        [self.extents[0] / 2.0, self.extents[1] / 2.0, self.extents[2] / 2.0]
    }

    fn texel_radiance(&self, face: Face, idx: usize) -> [f64; 3] {
        let t = self.face(face);
        let (a, e) = (t.albedo[idx], t.emission[idx]);
        [
            e[0] + a[0] * self.ambient,
            e[1] + a[1] * self.ambient,
            e[2] + a[2] * self.ambient,
        ]
    }

    /// Number of emissive texels on every face.
    pub fn emissive_texels(&self) -> usize {
        self.faces
            .iter()
            .map(|f| f.emission.iter().filter(|e| e.iter().any(|v| *v > 0.0)).count())
            .sum()
    }

    /// Integral of outgoing radiance over all surfaces (radiance x area).
    pub fn surface_energy(&self) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for face in Face::ALL {
            let t = self.face(face);
            let (lu, lv) = self.face_size(face);
            let area = lu * lv / (t.nu * t.nv) as f64;
            for i in 0..t.nu * t.nv {
                let r = self.texel_radiance(face, i);
                for k in 0..3 {
                    acc[k] += r[k] * area;
                }
            }
        }
        acc
    }

    pub fn contains_strictly(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] > 0.0 && p[a] < self.extents[a])
    }

    /// Face and texel hit by the ray from `origin` along `dir`.
    pub fn trace(&self, origin: [f64; 3], dir: [f64; 3]) -> (Face, usize) {
        let mut best = (f64::INFINITY, 0usize, false);
        for a in 0..3 {
            let t = if dir[a] > 0.0 {
                (self.extents[a] - origin[a]) / dir[a]
            } else if dir[a] < 0.0 {
                -origin[a] / dir[a]
            } else {
                continue;
            };
            if t < best.0 {
                best = (t, a, dir[a] > 0.0);
            }
        }
        let (t, axis, max_side) = best;
        let face = Face::from_axis(axis, max_side);
        let (ua, va) = face.uv_axes();
        let tex = self.face(face);
        let u = (origin[ua] + t * dir[ua]) / self.extents[ua];
        let v = (origin[va] + t * dir[va]) / self.extents[va];
        let iu = ((u * tex.nu as f64).floor().max(0.0) as usize).min(tex.nu - 1);
        let iv = ((v * tex.nv as f64).floor().max(0.0) as usize).min(tex.nv - 1);
        (face, iv * tex.nu + iu)
    }

    /// Outgoing radiance seen from `origin` along `dir`.
    pub fn radiance(&self, origin: [f64; 3], dir: [f64; 3]) -> [f64; 3] {
        let (face, idx) = self.trace(origin, dir);
        self.texel_radiance(face, idx)
    }
}

/// Ranges used by [`sample_scene`]. Each `(lo, hi)` pair is inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub width: (f64, f64),
    pub depth: (f64, f64),
    pub height: (f64, f64),
    pub lights: (usize, usize),
    /// Emission of a light as a multiple of the ambient level.
    pub intensity: (f64, f64),
    /// Side length of a rectangular light patch, meters.
    pub light_size: (f64, f64),
    pub ambient: f64,
    /// Texture texel edge, meters.
    pub texel_size: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            width: (3.0, 8.0),
            depth: (3.0, 8.0),
            height: (2.4, 4.0),
            lights: (1, 4),
            intensity: (10.0, 500.0),
            light_size: (1.0, 2.5),
            ambient: 0.5,
            texel_size: 0.1,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("width", self.width),
            ("depth", self.depth),
            ("height", self.height),
            ("intensity", self.intensity),
            ("light_size", self.light_size),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo > 0.0) || !(hi >= lo) || !hi.is_finite() {
                return Err(Error::invalid(format!("{name} range ({lo}, {hi}) is empty or not positive")));
            }
        }
        if self.lights.0 == 0 || self.lights.1 < self.lights.0 {
            return Err(Error::invalid(format!(
                "light count range {:?} must be non-empty and at least 1",
                self.lights
            )));
        }
        if !(self.ambient > 0.0) || !(self.texel_size > 0.0) {
            return Err(Error::invalid("ambient and texel_size must be positive"));
        }
        Ok(())
    }
}

fn sample_range<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Samples a room deterministically from `seed`.
pub fn sample_scene(seed: u64, params: &SceneParams) -> Result<BoxScene> {
    params.validate()?;
    let mut rng = seeded(seed);
    let extents = [
        sample_range(&mut rng, params.width),
        sample_range(&mut rng, params.depth),
        sample_range(&mut rng, params.height),
    ];

    let faces: Vec<FaceTexture> = Face::ALL
        .iter()
        .map(|&face| {
            let (a, b) = face.uv_axes();
            let nu = (extents[a] / params.texel_size).ceil().max(1.0) as usize;
            let nv = (extents[b] / params.texel_size).ceil().max(1.0) as usize;
            let grey = rng.gen_range(0.25..0.8);
            let base: [f64; 3] = std::array::from_fn(|_| grey * rng.gen_range(0.85..1.15));
            // Low-frequency multiplicative noise: one separable sinusoid.
            let (fu, fv) = (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0));
            let (pu, pv) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
            let amp = rng.gen_range(0.05..0.2);
            let mut albedo = Vec::with_capacity(nu * nv);
            for iv in 0..nv {
                for iu in 0..nu {
                    let u = (iu as f64 + 0.5) / nu as f64;
                    let v = (iv as f64 + 0.5) / nv as f64;
                    let n = 1.0 + amp * (2.0 * PI * (fu * u + pu)).sin() * (2.0 * PI * (fv * v + pv)).sin();
                    albedo.push(base.map(|c| (c * n).clamp(0.0, 1.0)));
                }
            }
            FaceTexture {
                nu,
                nv,
                albedo,
                emission: vec![[0.0; 3]; nu * nv],
            }
        })
        .collect();
    let mut faces: [FaceTexture; 6] = faces.try_into().expect("six faces");

    let n_lights = rng.gen_range(params.lights.0..=params.lights.1);
    for _ in 0..n_lights {
        let face = match rng.gen_range(0..10) {
            0..=5 => Face::Ceiling,
            6 => Face::NegX,
            7 => Face::PosX,
            8 => Face::NegY,
            _ => Face::PosY,
        };
        let (a, b) = face.uv_axes();
        let (lu, lv) = (extents[a], extents[b]);
        let su = sample_range(&mut rng, params.light_size).min(lu);
        let sv = sample_range(&mut rng, params.light_size).min(lv);
        let u0 = rng.gen_range(0.0..=(lu - su));
        // Wall lights (windows) stay off the floor.
        let v_lo = if face == Face::Ceiling { 0.0 } else { (0.3 * lv).min(lv - sv) };
        let v0 = rng.gen_range(v_lo..=(lv - sv).max(v_lo));
        let level = sample_range(&mut rng, params.intensity) * params.ambient;
        let warmth: f64 = rng.gen_range(0.0..1.0);
        let tint = [
            0.85 + 0.15 * warmth,
            0.9,
            1.0 - 0.25 * warmth,
        ];
        let tex = &mut faces[face.index()];
        let mut painted = false;
        for iv in 0..tex.nv {
            for iu in 0..tex.nu {
                let cu = (iu as f64 + 0.5) / tex.nu as f64 * lu;
                let cv = (iv as f64 + 0.5) / tex.nv as f64 * lv;
                if cu >= u0 && cu <= u0 + su && cv >= v0 && cv <= v0 + sv {
                    tex.emission[iv * tex.nu + iu] = tint.map(|t| t * level);
                    painted = true;
                }
            }
        }
        if !painted {
            let iu = (((u0 + su / 2.0) / lu * tex.nu as f64) as usize).min(tex.nu - 1);
            let iv = (((v0 + sv / 2.0) / lv * tex.nv as f64) as usize).min(tex.nv - 1);
            tex.emission[iv * tex.nu + iu] = tint.map(|t| t * level);
        }
    }
    BoxScene::new(extents, faces, params.ambient)
}

/// Panorama seen from `camera`: every pixel center direction is traced to the
/// wall it hits, returning emission plus albedo times ambient.
pub fn render_panorama(scene: &BoxScene, camera: [f64; 3], height: usize, width: usize) -> Result<EnvMap> {
    if !scene.contains_strictly(camera) {
        return Err(Error::invalid(format!(
            "camera {camera:?} is not strictly inside the room {:?}",
            scene.extents
        )));
    }
    if height == 0 || width != 2 * height {
        return Err(Error::invalid(format!("panorama must be H x 2H, got {height}x{width}")));
    }
    let mut data = vec![0.0; height * width * 3];
    data.par_chunks_mut(width * 3).enumerate().for_each(|(r, row)| {
        for c in 0..width {
            let (theta, phi) = pixel_center_angles(r, c, height, width);
            let d = SphericalDir::from_angles(theta, phi).vec();
            row[c * 3..c * 3 + 3].copy_from_slice(&scene.radiance(camera, d));
        }
    });
    EnvMap::from_image(HdrImage::new(height, width, data)?)
}

/// Face hit by each pixel center of a panorama from `camera`.
pub fn face_mask(scene: &BoxScene, camera: [f64; 3], height: usize, width: usize) -> Vec<Face> {
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let (theta, phi) = pixel_center_angles(r, c, height, width);
            out.push(scene.trace(camera, SphericalDir::from_angles(theta, phi).vec()).0);
        }
    }
    out
}

/// Fraction of each axis kept clear of the walls when sampling cameras.
pub const CAMERA_MARGIN: f64 = 0.1;

/// Uniform camera position inside the room shrunk by 10% per axis side.
pub fn sample_camera_pose(scene: &BoxScene, seed: u64) -> [f64; 3] {
    let mut rng = seeded(seed);
    std::array::from_fn(|a| {
        let e = scene.extents[a];
        e * (CAMERA_MARGIN + (1.0 - 2.0 * CAMERA_MARGIN) * rng.gen::<f64>())
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedView {
    pub camera: [f64; 3],
    pub envmap: EnvMap,
}

/// Renders the scene from explicit camera positions.
pub fn augment_at(scene: &BoxScene, cameras: &[[f64; 3]], height: usize, width: usize) -> Result<Vec<AugmentedView>> {
    cameras
        .iter()
        .map(|&camera| {
            Ok(AugmentedView {
                camera,
                envmap: render_panorama(scene, camera, height, width)?,
            })
        })
        .collect()
}

/// `n` panoramas of one scene from cameras drawn on streams `0..n` of `seed`.
pub fn augment(scene: &BoxScene, n: usize, height: usize, width: usize, seed: u64) -> Result<Vec<AugmentedView>> {
    if n == 0 {
        return Err(Error::invalid("augment needs n >= 1"));
    }
    let cameras: Vec<[f64; 3]> = (0..n as u64)
        .map(|i| sample_camera_pose(scene, crate::rng::split_seed(seed, i)))
        .collect();
    augment_at(scene, &cameras, height, width)
}

/// A virtual point light summarizing a patch of room surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vpl {
    pub position: [f64; 3],
    pub normal: [f64; 3],
    pub color: [f64; 3],
    /// Surface area represented by the light, so `color * scale` is its energy.
    pub scale: f64,
}

/// One light per cell of a `res x res` grid on every face. Colors are exact
/// area averages of the texture over the cell.
pub fn extract_vpls(scene: &BoxScene, res: usize) -> Result<Vec<Vpl>> {
    if res == 0 {
        return Err(Error::invalid("VPL resolution must be >= 1"));
    }
    let mut out = Vec::with_capacity(6 * res * res);
    for face in Face::ALL {
        let tex = scene.face(face);
        let (lu, lv) = scene.face_size(face);
        let (ua, va) = face.uv_axes();
        let na = face.normal_axis();
        let cell_area = lu * lv / (res * res) as f64;
        for cv in 0..res {
            for cu in 0..res {
                let (u0, u1) = (cu as f64 / res as f64, (cu + 1) as f64 / res as f64);
                let (v0, v1) = (cv as f64 / res as f64, (cv + 1) as f64 / res as f64);
                let mut color = [0.0; 3];
                for iv in overlap_range(v0, v1, tex.nv) {
                    let fv = overlap(v0, v1, iv, tex.nv);
                    for iu in overlap_range(u0, u1, tex.nu) {
                        let f = fv * overlap(u0, u1, iu, tex.nu);
                        let rad = scene.texel_radiance(face, iv * tex.nu + iu);
                        for k in 0..3 {
                            color[k] += f * rad[k];
                        }
                    }
                }
                let cell = (u1 - u0) * (v1 - v0);
                let color = color.map(|c| c / cell);
                let mut position = [0.0; 3];
                position[ua] = 0.5 * (u0 + u1) * lu;
                position[va] = 0.5 * (v0 + v1) * lv;
                position[na] = if face.is_max_side() { scene.extents[na] } else { 0.0 };
                out.push(Vpl {
                    position,
                    normal: face.inward_normal(),
                    color,
                    scale: cell_area,
                });
            }
        }
    }
    Ok(out)
}

fn overlap_range(a: f64, b: f64, n: usize) -> std::ops::Range<usize> {
    let lo = ((a * n as f64).floor() as usize).min(n - 1);
    let hi = ((b * n as f64).ceil() as usize).clamp(lo + 1, n);
    lo..hi
}

/// Length of `[a, b]` intersected with texel `i` of `n` (unit parameter).
fn overlap(a: f64, b: f64, i: usize, n: usize) -> f64 {
    let t0 = i as f64 / n as f64;
    let t1 = (i + 1) as f64 / n as f64;
    (b.min(t1) - a.max(t0)).max(0.0)
}

pub fn vpl_energy(vpls: &[Vpl]) -> [f64; 3] {
    let mut acc = [0.0; 3];
    for v in vpls {
        for k in 0..3 {
            acc[k] += v.color[k] * v.scale;
        }
    }
    acc
}

/// Object orientation: azimuth `theta` in `[-180, 180)` degrees and polar
/// angle `phi = acos(2x - 1)` in `[0, 180]` degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSample {
    pub theta_deg: f64,
    pub phi_deg: f64,
}

impl PoseSample {
    /// Pose from `u, x in [0, 1)`: `theta = 360 u - 180`, `phi = acos(2x - 1)`.
    pub fn from_uniforms(u: f64, x: f64) -> Self {
        PoseSample {
            theta_deg: 360.0 * u - 180.0,
            phi_deg: (2.0 * x - 1.0).clamp(-1.0, 1.0).acos().to_degrees(),
        }
    }

    /// Unit axis with polar angle `phi` and azimuth `theta`.
    pub fn axis(&self) -> [f64; 3] {
        SphericalDir::from_angles(self.phi_deg.to_radians(), self.theta_deg.to_radians()).vec()
    }

    /// Rotation `Rz(theta) Ry(phi)`, which carries `+z` onto [`Self::axis`].
    pub fn rotation(&self) -> Mat3 {
        Mat3::rotation_z(self.theta_deg.to_radians()).mul(&Mat3::rotation_y(self.phi_deg.to_radians()))
    }
}

pub fn sample_object_rotation(seed: u64) -> PoseSample {
    let mut rng = seeded(seed);
    let u: f64 = rng.gen();
    let x: f64 = rng.gen();
    PoseSample::from_uniforms(u, x)
}

/// Scene seed of item `index` in a dataset generated from `master`.
pub fn scene_seed(master: u64, index: u64) -> u64 {
    let mut rng = stream_rng(master, index);
    rng.gen()
}

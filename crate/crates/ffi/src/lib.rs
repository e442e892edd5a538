//! C ABI over the lumen library.
//!
//! Objects cross the boundary as opaque handles created by `*_new`, `*_load`
//! or `*_read` functions and released with the matching `*_free`. Every
//! fallible function returns a [`LumenStatus`]; on failure the message is
//! kept per thread and can be fetched with [`lumen_last_error`]. Arrays are
//! caller-owned: the caller passes a pointer and an element count, and the
//! library never retains either.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use lumen::envmap::{solid_angle_weights, EnvMap, HdrImage};
use lumen::metrics::envmap_scores;
use lumen::models::{predict_lighting, Autoencoder, LatentCode, Predictor};
use lumen::nn::Checkpoint;
use lumen::render::{build_transport, sphere_normal_map, Material, NormalMap, ObjectObservation, DEFAULT_TRANSPORT_BUDGET};
use lumen::shfit::{fit_sh, FitConfig, Solver};
use lumen::sphharm::{num_coeffs, project, reconstruct_clamped, ShCoeffs};
use lumen::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LumenStatus {
    Ok = 0,
    InvalidArgument = 1,
    Format = 2,
    UnsupportedFormat = 3,
    DegenerateExposure = 4,
    IllConditioned = 5,
    Resource = 6,
    State = 7,
    TrainingDiverged = 8,
    Dataset = 9,
    Config = 10,
    Io = 11,
    NullPointer = 12,
    BufferTooSmall = 13,
    Panic = 14,
}

/// Object materials, matching the library's presets.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LumenMaterial {
    Diffuse = 0,
    Rough = 1,
    Glossy = 2,
}

impl From<LumenMaterial> for Material {
    fn from(m: LumenMaterial) -> Self {
        match m {
            LumenMaterial::Diffuse => Material::Diffuse,
            LumenMaterial::Rough => Material::Rough,
            LumenMaterial::Glossy => Material::Glossy,
        }
    }
}

/// Solid-angle weighted comparison of two maps.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LumenScores {
    pub rmse: f64,
    pub si_rmse: f64,
    pub alpha: f64,
    pub mae: f64,
    pub mre: f64,
}

/// Equirectangular HDR environment map.
pub struct LumenEnvMap(EnvMap);

/// Real SH coefficients, three channels.
pub struct LumenShCoeffs(ShCoeffs);

pub struct LumenAutoencoder(Autoencoder);

pub struct LumenPredictor(Predictor);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> LumenStatus {
    match err {
        Error::InvalidArgument(_) => LumenStatus::InvalidArgument,
        Error::Format { .. } => LumenStatus::Format,
        Error::UnsupportedFormat(_) => LumenStatus::UnsupportedFormat,
        Error::DegenerateExposure(_) => LumenStatus::DegenerateExposure,
        Error::IllConditioned(_) => LumenStatus::IllConditioned,
        Error::Resource { .. } => LumenStatus::Resource,
        Error::State(_) => LumenStatus::State,
        Error::TrainingDiverged { .. } => LumenStatus::TrainingDiverged,
        Error::Dataset { .. } => LumenStatus::Dataset,
        Error::Config(_) => LumenStatus::Config,
        Error::Io { .. } => LumenStatus::Io,
        Error::Json(_) => LumenStatus::Format,
    }
}

/// Failure raised inside the shim itself.
struct Fail(LumenStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(LumenStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LumenStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            LumenStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            LumenStatus::Panic
        }
    }
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(LumenStatus::InvalidArgument, "path is not UTF-8".into()))
}

fn copy_out<T: Copy>(src: &[T], dst: &mut [T]) -> Result<(), Fail> {
    if dst.len() < src.len() {
        return Err(Fail(
            LumenStatus::BufferTooSmall,
            format!("buffer holds {} values, {} needed", dst.len(), src.len()),
        ));
    }
    dst[..src.len()].copy_from_slice(src);
    Ok(())
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to `capacity` bytes. Returns the full message length.
///
/// # Safety
/// `buf` must be null or valid for `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn lumen_last_error(buf: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && capacity > 0 {
            let n = msg.len().min(capacity - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lumen_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a map from `height * 2 height * 3` interleaved RGB values.
///
/// # Safety
/// `data` must be valid for `len` reads and `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn lumen_envmap_new(
    height: usize,
    width: usize,
    data: *const f64,
    len: usize,
    out: *mut *mut LumenEnvMap,
) -> LumenStatus {
    guard(|| {
        let values = slice(data, len, "data")?.to_vec();
        put(out, LumenEnvMap(EnvMap::new(height, width, values)?))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn lumen_envmap_read_pfm(path_: *const c_char, out: *mut *mut LumenEnvMap) -> LumenStatus {
    guard(|| put(out, LumenEnvMap(EnvMap::read_pfm(path(path_)?)?)))
}

/// # Safety
/// `env` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lumen_envmap_write_pfm(env: *const LumenEnvMap, path_: *const c_char) -> LumenStatus {
    guard(|| Ok(handle(env, "envmap")?.0.write_pfm(path(path_)?)?))
}

/// Height and width of a map; zeros for a null handle.
///
/// # Safety
/// `env` must be null or a live handle; `height`, `width` null or writable.
#[no_mangle]
pub unsafe extern "C" fn lumen_envmap_size(env: *const LumenEnvMap, height: *mut usize, width: *mut usize) {
    let (h, w) = env.as_ref().map_or((0, 0), |e| (e.0.height(), e.0.width()));
    if let Some(p) = height.as_mut() {
        *p = h;
    }
    if let Some(p) = width.as_mut() {
        *p = w;
    }
}

/// Copies the interleaved RGB values into `buf`.
///
/// # Safety
/// `env` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn lumen_envmap_copy_data(env: *const LumenEnvMap, buf: *mut f64, len: usize) -> LumenStatus {
    guard(|| copy_out(handle(env, "envmap")?.0.data(), slice_mut(buf, len, "buffer")?))
}

/// # Safety
/// `env` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lumen_envmap_free(env: *mut LumenEnvMap) {
    free(env)
}

/// Per-pixel solid angles of a `height x width` grid, row-major.
///
/// # Safety
/// `buf` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn lumen_solid_angle_weights(height: usize, width: usize, buf: *mut f64, len: usize) -> LumenStatus {
    guard(|| copy_out(&solid_angle_weights(height, width)?.to_vec(), slice_mut(buf, len, "buffer")?))
}

/// Coefficient count `(degree + 1)^2` per channel.
///
/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn lumen_sh_num_coeffs(degree: i64, out: *mut usize) -> LumenStatus {
    guard(|| {
        let n = num_coeffs(degree)?;
        *out.as_mut().ok_or_else(|| null("out"))? = n;
        Ok(())
    })
}

/// # Safety
/// `env` must be a live handle and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn lumen_sh_project(env: *const LumenEnvMap, degree: usize, out: *mut *mut LumenShCoeffs) -> LumenStatus {
    guard(|| put(out, LumenShCoeffs(project(&handle(env, "envmap")?.0, degree))))
}

/// Reconstructs a `height x 2 height` map, clamped at zero.
///
/// # Safety
/// `coeffs` must be a live handle and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn lumen_sh_reconstruct(
    coeffs: *const LumenShCoeffs,
    height: usize,
    out: *mut *mut LumenEnvMap,
) -> LumenStatus {
    guard(|| put(out, LumenEnvMap(reconstruct_clamped(&handle(coeffs, "coefficients")?.0, height)?)))
}

/// Degree of a coefficient set, or -1 for a null handle.
///
/// # Safety
/// `coeffs` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lumen_sh_degree(coeffs: *const LumenShCoeffs) -> i64 {
    coeffs.as_ref().map_or(-1, |c| c.0.degree() as i64)
}

/// Copies coefficients `k`-major, channel-minor: `3 (degree + 1)^2` values.
///
/// # Safety
/// `coeffs` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn lumen_sh_copy_data(coeffs: *const LumenShCoeffs, buf: *mut f64, len: usize) -> LumenStatus {
    guard(|| copy_out(handle(coeffs, "coefficients")?.0.data(), slice_mut(buf, len, "buffer")?))
}

/// # Safety
/// `coeffs` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lumen_sh_free(coeffs: *mut LumenShCoeffs) {
    free(coeffs)
}

/// Camera-space normals from `size * size * 3` values; all-zero pixels are
/// background. A null pointer selects the orthographic unit sphere.
unsafe fn normals_from(ptr_: *const f64, size: usize) -> Result<NormalMap, Fail> {
    if ptr_.is_null() {
        return Ok(sphere_normal_map(size)?);
    }
    let raw = slice(ptr_, size * size * 3, "normals")?;
    let mut normals = Vec::with_capacity(size * size);
    let mut mask = Vec::with_capacity(size * size);
    for n in raw.chunks_exact(3) {
        let covered = n.iter().any(|v| *v != 0.0);
        normals.push(if covered { [n[0], n[1], n[2]] } else { [0.0; 3] });
        mask.push(covered);
    }
    Ok(NormalMap::new(size, normals, mask)?)
}

/// Fits degree-`degree` SH lighting to a `size x size` RGB object image
/// through the transport of the given normals and material on a
/// `env_height x 2 env_height` grid. A negative `lambda` selects the default
/// ridge weight. `residual` (three values) may be null.
///
/// # Safety
/// `image` must hold `size * size * 3` values; `normals` is null or holds as
/// many; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn lumen_sh_fit(
    image: *const f64,
    normals: *const f64,
    size: usize,
    material: LumenMaterial,
    degree: usize,
    lambda: f64,
    env_height: usize,
    residual: *mut f64,
    out: *mut *mut LumenShCoeffs,
) -> LumenStatus {
    guard(|| {
        let img = HdrImage::new(size, size, slice(image, size * size * 3, "image")?.to_vec())?;
        let nm = normals_from(normals, size)?;
        let brdf = Material::from(material).brdf();
        let t = build_transport(&nm, &brdf, env_height, 2 * env_height, DEFAULT_TRANSPORT_BUDGET)?;
        let cfg = FitConfig {
            degree,
            lambda: (lambda >= 0.0).then_some(lambda),
            solver: Solver::NormalEquationsCholesky,
        };
        let fit = fit_sh(&img, &t, &cfg)?;
        if !residual.is_null() {
            slice_mut(residual, 3, "residual")?.copy_from_slice(&fit.residual);
        }
        put(out, LumenShCoeffs(fit.coeffs))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn lumen_autoencoder_load(path_: *const c_char, out: *mut *mut LumenAutoencoder) -> LumenStatus {
    guard(|| {
        let ckpt = Checkpoint::read(path(path_)?)?;
        put(out, LumenAutoencoder(Autoencoder::from_checkpoint(&ckpt)?))
    })
}

/// Latent size Z, or 0 for a null handle.
///
/// # Safety
/// `ae` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lumen_autoencoder_latent(ae: *const LumenAutoencoder) -> usize {
    ae.as_ref().map_or(0, |a| a.0.latent())
}

/// Writes the Z-value code of `env` into `code`.
///
/// # Safety
/// Handles must be live and `code` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn lumen_autoencoder_encode(
    ae: *const LumenAutoencoder,
    env: *const LumenEnvMap,
    code: *mut f32,
    len: usize,
) -> LumenStatus {
    guard(|| {
        let z = handle(ae, "autoencoder")?.0.encode(&handle(env, "envmap")?.0)?;
        copy_out(z.values(), slice_mut(code, len, "code")?)
    })
}

/// # Safety
/// `ae` must be live, `code` valid for `len` reads, `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn lumen_autoencoder_decode(
    ae: *const LumenAutoencoder,
    code: *const f32,
    len: usize,
    out: *mut *mut LumenEnvMap,
) -> LumenStatus {
    guard(|| {
        let z = LatentCode(slice(code, len, "code")?.to_vec());
        put(out, LumenEnvMap(handle(ae, "autoencoder")?.0.decode(&z)?))
    })
}

/// # Safety
/// `ae` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lumen_autoencoder_free(ae: *mut LumenAutoencoder) {
    free(ae)
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn lumen_predictor_load(path_: *const c_char, out: *mut *mut LumenPredictor) -> LumenStatus {
    guard(|| {
        let ckpt = Checkpoint::read(path(path_)?)?;
        put(out, LumenPredictor(Predictor::from_checkpoint(&ckpt)?))
    })
}

/// # Safety
/// `ip` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lumen_predictor_free(ip: *mut LumenPredictor) {
    free(ip)
}

/// Predicts lighting from a `size x size` LDR image and its normals (null
/// for the sphere). `latency_ms` may be null.
///
/// # Safety
/// Handles must be live; `rgb` holds `size * size * 3` values, `normals` is
/// null or holds as many; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn lumen_predict_lighting(
    ip: *const LumenPredictor,
    ae: *const LumenAutoencoder,
    rgb: *const f64,
    normals: *const f64,
    size: usize,
    latency_ms: *mut f64,
    out: *mut *mut LumenEnvMap,
) -> LumenStatus {
    guard(|| {
        let obs = ObjectObservation {
            rgb: HdrImage::new(size, size, slice(rgb, size * size * 3, "rgb")?.to_vec())?,
            normals: normals_from(normals, size)?,
        };
        let (env, took) = predict_lighting(&handle(ip, "predictor")?.0, &handle(ae, "autoencoder")?.0, &obs)?;
        if let Some(p) = latency_ms.as_mut() {
            *p = took.as_secs_f64() * 1e3;
        }
        put(out, LumenEnvMap(env))
    })
}

/// Scores `pred` against `truth` under solid-angle weights.
///
/// # Safety
/// Handles must be live and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn lumen_envmap_compare(
    pred: *const LumenEnvMap,
    truth: *const LumenEnvMap,
    out: *mut LumenScores,
) -> LumenStatus {
    guard(|| {
        let s = envmap_scores(&handle(pred, "prediction")?.0, &handle(truth, "ground truth")?.0)?;
        *out.as_mut().ok_or_else(|| null("out"))? = LumenScores {
            rmse: s.rmse,
            si_rmse: s.si_rmse,
            alpha: s.alpha,
            mae: s.mae,
            mre: s.mre,
        };
        Ok(())
    })
}

//! Fast invariant checks run by `lumen selftest`.

use std::f64::consts::PI;
use std::time::Instant;

use rand::Rng;

use crate::envmap::{read_pfm_bytes, solid_angle_weights, write_pfm_bytes, EnvMap};
use crate::error::Result;
use crate::models::{ae_loss, envmap_to_log_planes, ip_loss, pixel_weights, AeArch, Autoencoder, IpArch, Predictor};
use crate::nn::{
    grad_check, BatchNorm, Checkpoint, Conv2d, Dense, GradCheckReport, Layer, ResidualBlock, Sequential, Tensor,
    UpsampleConv,
};
use crate::render::{build_transport, render_direct, render_with_transport, sphere_normal_map, Material, DEFAULT_TRANSPORT_BUDGET};
use crate::rng::seeded;
use crate::sphharm::basis_matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// Random linear functional of the output plus half its squared norm.
pub fn probe_loss(len: usize, seed: u64) -> impl Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
    let mut rng = seeded(seed);
    let r: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    move |y: &Tensor<f64>| {
        let v = y.data().iter().zip(&r).map(|(a, b)| a * b + 0.5 * a * a).sum();
        let g: Vec<f64> = y.data().iter().zip(&r).map(|(a, b)| b + a).collect();
        Ok((v, Tensor::from_f64(y.shape(), &g)?))
    }
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = seeded(seed);
    let n = shape.iter().product();
    Tensor::from_f64(shape, &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()).expect("valid shape")
}

/// One small instance of every layer kind with an input shape for it.
pub fn layer_cases(seed: u64) -> Vec<(String, Layer<f64>, Vec<usize>)> {
    let mut rng = seeded(seed);
    let mut bn_eval = BatchNorm::new(3);
    bn_eval.running_mean = vec![0.1, -0.2, 0.3];
    bn_eval.running_var = vec![0.5, 2.0, 1.5];
    let mut bn_eval = Layer::BatchNorm(bn_eval);
    bn_eval.set_training(false);
    vec![
        ("dense".into(), Layer::Dense(Dense::new(5, 4, &mut rng)), vec![3, 5]),
        ("conv4x4/2".into(), Layer::Conv2d(Conv2d::new(2, 3, 4, 2, &mut rng)), vec![2, 2, 6, 8]),
        ("conv3x3/1".into(), Layer::Conv2d(Conv2d::new(2, 3, 3, 1, &mut rng)), vec![2, 2, 5, 4]),
        ("upsample-conv".into(), Layer::UpsampleConv(UpsampleConv::new(2, 3, &mut rng)), vec![2, 2, 3, 4]),
        ("elu".into(), Layer::elu(), vec![2, 3, 4, 4]),
        ("batchnorm-train".into(), Layer::BatchNorm(BatchNorm::new(3)), vec![4, 3, 2, 3]),
        ("batchnorm-train-2d".into(), Layer::BatchNorm(BatchNorm::new(3)), vec![5, 3]),
        ("batchnorm-eval".into(), bn_eval, vec![4, 3, 2, 2]),
        (
            "residual".into(),
            Layer::Residual(Box::new(ResidualBlock::new(2, &mut rng))),
            vec![3, 2, 4, 4],
        ),
        ("flatten".into(), Layer::flatten(), vec![2, 2, 3, 3]),
        ("reshape".into(), Layer::Reshape([2, 2, 3]), vec![2, 12]),
        (
            "affine".into(),
            Layer::Affine {
                scale: vec![2.0, -0.5, 3.0],
                shift: vec![1.0, 0.0, -4.0],
            },
            vec![2, 3],
        ),
    ]
}

/// Gradient check of every entry of [`layer_cases`] under [`probe_loss`].
pub fn layer_grad_checks(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    layer_cases(seed)
        .into_iter()
        .enumerate()
        .map(|(i, (name, layer, shape))| {
            let mut net = Sequential::new();
            net.push("layer", layer);
            let x = random_tensor(&shape, seed + 100 + i as u64);
            let len = net.clone().forward(&x)?.len();
            Ok((name, grad_check(&net, &x, probe_loss(len, seed + 200 + i as u64))?))
        })
        .collect()
}

pub fn tiny_ae_arch() -> AeArch {
    AeArch {
        height: 16,
        width: 32,
        latent: 3,
        encoder_channels: [2, 3],
        residual_blocks: 1,
        decoder_channels: vec![3, 2],
    }
}

pub fn tiny_ip_arch() -> IpArch {
    IpArch {
        obs_size: 16,
        latent: 3,
        conv_channels: [2, 2, 3, 3],
        hidden: 4,
    }
}

/// Gradient checks of the whole tiny autoencoder under the reconstruction
/// loss and the whole tiny predictor under the latent loss.
pub fn network_grad_checks(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let arch = tiny_ae_arch();
    let (h, w) = (arch.height, arch.width);
    let ae = Autoencoder::new(arch, seed)?;
    let net = ae.network().cast::<f64>();
    let weights = pixel_weights(h, w)?;
    let mut rng = seeded(seed + 1);
    let planes: Vec<f64> = (0..2)
        .flat_map(|_| {
            let env = EnvMap::new(h, w, (0..h * w * 3).map(|_| rng.gen_range(0.0..4.0)).collect()).expect("valid map");
            envmap_to_log_planes(&env)
        })
        .map(f64::from)
        .collect();
    let x = Tensor::from_f64(&[2, 3, h, w], &planes)?;
    // Targets sit half a unit from the initial output so no residual is near
    // the kink of the absolute value.
    let out = net.clone().forward(&x)?;
    let shifted: Vec<f64> = out
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v + if i % 3 == 0 { -0.5 } else { 0.5 })
        .collect();
    let target = Tensor::from_f64(out.shape(), &shifted)?;
    let ae_report = grad_check(&net, &x, |y| ae_loss(&target, y, &weights))?;

    let ip_arch = tiny_ip_arch();
    let s = ip_arch.obs_size;
    let z = ip_arch.latent;
    let ip = Predictor::new(ip_arch, seed + 2)?;
    let mut net = ip.network().cast::<f64>();
    // The last dense layer starts at zero, which would hide every upstream
    // gradient; give it random weights first.
    for (name, p) in net.params_mut() {
        if name.starts_with("fc2.") {
            for v in p.value.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }
    let x = random_tensor(&[3, 6, s, s], seed + 3);
    let target = random_tensor(&[3, z], seed + 4);
    let ip_report = grad_check(&net, &x, |y| ip_loss(&target, y))?;
    Ok(vec![("autoencoder".into(), ae_report), ("predictor".into(), ip_report)])
}

/// Largest off-diagonal magnitude and largest diagonal deviation from one of
/// the quadrature Gram matrix of the SH basis.
pub fn sh_gram_errors(height: usize, degree: usize) -> Result<(f64, f64)> {
    let width = 2 * height;
    let k = (degree + 1) * (degree + 1);
    let b = basis_matrix(height, width, degree);
    let w = solid_angle_weights(height, width)?.to_vec();
    let mut gram = vec![0.0; k * k];
    for (row, wj) in b.chunks_exact(k).zip(&w) {
        for i in 0..k {
            let wi = wj * row[i];
            for j in i..k {
                gram[i * k + j] += wi * row[j];
            }
        }
    }
    let (mut off, mut diag) = (0.0f64, 0.0f64);
    for i in 0..k {
        diag = diag.max((gram[i * k + i] - 1.0).abs());
        for j in i + 1..k {
            off = off.max(gram[i * k + j].abs());
        }
    }
    Ok((off, diag))
}

fn run(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, e.to_string()));
    CheckResult {
        name: name.into(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Runs every check; none takes more than a few seconds.
pub fn run_selftest() -> Vec<CheckResult> {
    let mut out = Vec::new();
    out.push(run("solid angles sum to 4 pi", || {
        let mut worst = 0.0f64;
        for h in [1, 2, 7, 64, 256] {
            worst = worst.max((solid_angle_weights(h, 2 * h)?.total() / (4.0 * PI) - 1.0).abs());
        }
        Ok((worst < 1e-9, format!("max relative error {worst:.2e}")))
    }));
    out.push(run("SH basis orthonormal (64x128, L=6)", || {
        let (off, diag) = sh_gram_errors(64, 6)?;
        Ok((off < 5e-3 && diag < 5e-3, format!("off-diagonal {off:.2e}, diagonal {diag:.2e}")))
    }));
    out.push(run("transport render matches direct render", || {
        let nm = sphere_normal_map(24)?;
        let mut rng = seeded(9);
        let env = EnvMap::new(8, 16, (0..8 * 16 * 3).map(|_| rng.gen_range(0.0..5.0)).collect())?;
        let mut worst = 0.0f64;
        for m in Material::ALL {
            let t = build_transport(&nm, &m.brdf(), 8, 16, DEFAULT_TRANSPORT_BUDGET)?;
            let a = render_with_transport(&t, &env)?;
            let b = render_direct(&nm, &m.brdf(), &env)?;
            for (x, y) in a.data().iter().zip(b.data()) {
                worst = worst.max((x - y).abs());
            }
        }
        Ok((worst < 1e-10, format!("max abs difference {worst:.2e}")))
    }));
    out.push(run("constant light on albedo 0.5 renders 0.5", || {
        let nm = sphere_normal_map(32)?;
        let img = render_direct(&nm, &Material::Diffuse.brdf(), &EnvMap::constant(64, 1.0)?)?;
        let worst = nm
            .masked_pixels()
            .iter()
            .flat_map(|&p| img.data()[3 * p..3 * p + 3].to_vec())
            .map(|v| (v - 0.5).abs())
            .fold(0.0, f64::max);
        Ok((worst < 1e-3, format!("max deviation {worst:.2e}")))
    }));
    out.push(run("layer gradient checks", || {
        let reports = layer_grad_checks(1)?;
        let (name, worst) = reports
            .iter()
            .map(|(n, r)| (n.clone(), r.max_rel_error))
            .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
        Ok((worst < 1e-4, format!("{} layers, worst {worst:.2e} ({name})", reports.len())))
    }));
    out.push(run("network gradient checks", || {
        let reports = network_grad_checks(5)?;
        let worst = reports.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
        Ok((worst < 1e-4, format!("autoencoder and predictor, worst {worst:.2e}")))
    }));
    out.push(run("PFM and checkpoint round trips", || {
        let env = EnvMap::new(2, 4, (0..24).map(|i| i as f64 * 0.25).collect())?;
        let back = read_pfm_bytes(&write_pfm_bytes(env.image()))?;
        let ae = Autoencoder::new(tiny_ae_arch(), 3)?;
        let again = Autoencoder::from_checkpoint(&Checkpoint::from_bytes(&ae.checkpoint(None).to_bytes()?)?)?;
        let ok = back.data() == env.data() && again.fingerprint() == ae.fingerprint();
        Ok((ok, "bit-exact".into()))
    }));
    out
}

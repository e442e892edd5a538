use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use lumen::dataset::{
    augment_dataset, mean_envmap, render_dataset, write_json, EnvmapManifest, ObjectSpec, ObsManifest, RenderOptions,
    SceneSet, Split,
};
use lumen::envmap::{read_pfm, reexpose_ldr, tonemap_display, write_png, EnvMap, DISPLAY_GAMMA};
use lumen::eval::{eval_suite, parse_methods, summarize, write_csv_file, EvalContext, EvalItem, Method};
use lumen::models::{
    predict_lighting, train_autoencoder, train_predictor, AeArch, Autoencoder, EpochRecord, IpArch, LatentCode,
    Predictor, TrainConfig,
};
use lumen::nn::Checkpoint;
use lumen::render::{
    build_transport, render_direct, Material, NormalMap, ObjectObservation, DEFAULT_TRANSPORT_BUDGET,
};
use lumen::scenegen::{PoseSample, SceneParams};
use lumen::selftest::run_selftest;
use lumen::shfit::{fit_sh, FitConfig, Solver};
use lumen::sphharm::{project, reconstruct_clamped};
use lumen::{Error, Result};

#[derive(Parser)]
#[command(name = "lumen", version, about = "Indoor lighting estimation from images of known objects")]
struct Cli {
    /// Worker threads; 1 makes every stage bit-reproducible. Defaults to
    /// $LUMEN_THREADS, then to the number of cores.
    #[arg(long, global = true, env = "LUMEN_THREADS",
          value_parser = clap::builder::RangedU64ValueParser::<usize>::new().range(1..))]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample procedural rooms and render a panorama from each room center.
    GenScenes(GenScenesArgs),
    /// Render panoramas from random camera positions inside each room.
    Augment(AugmentArgs),
    /// Render object observations under every map of an envmap dataset.
    RenderDataset(RenderDatasetArgs),
    /// Train the lighting autoencoder.
    TrainAe(TrainAeArgs),
    /// Encode an environment map to a latent code (JSON).
    Encode(EncodeArgs),
    /// Decode a latent code (JSON) to an environment map.
    Decode(DecodeArgs),
    /// Train the illumination predictor against a frozen autoencoder.
    TrainIp(TrainIpArgs),
    /// Predict the lighting of one observation.
    Predict(PredictArgs),
    /// Project an environment map onto spherical harmonics.
    ProjectSh(ProjectShArgs),
    /// Fit SH lighting to an object image through its transport matrix.
    FitSh(FitShArgs),
    /// Compare lighting estimators on a test set.
    Eval(EvalArgs),
    /// Render an object under an environment map to a tone-mapped PNG.
    Relight(RelightArgs),
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Args, Serialize)]
struct GenScenesArgs {
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Panorama height; width is twice this.
    #[arg(long, default_value_t = 32)]
    height: usize,
    /// JSON file overriding scene sampling ranges.
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct AugmentArgs {
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    per_scene: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct RenderDatasetArgs {
    #[arg(long)]
    envmaps: PathBuf,
    /// sphere, spiky, or a normal-map PFM.
    #[arg(long, default_value = "sphere")]
    object: String,
    /// diffuse, rough or glossy.
    #[arg(long, default_value = "diffuse")]
    material: String,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainFlags {
    /// JSON file with "arch" and "train" sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    latent: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainAeArgs {
    /// Envmap dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args, Serialize)]
struct TrainIpArgs {
    /// Observation dataset directory.
    #[arg(long)]
    obs: PathBuf,
    /// Autoencoder checkpoint.
    #[arg(long)]
    ae: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args, Serialize)]
struct EncodeArgs {
    #[arg(long)]
    ae: PathBuf,
    #[arg(long)]
    envmap: PathBuf,
    /// Output JSON; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct DecodeArgs {
    #[arg(long)]
    ae: PathBuf,
    /// JSON array of Z numbers.
    #[arg(long)]
    code: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct PredictArgs {
    #[arg(long)]
    ae: PathBuf,
    #[arg(long)]
    ip: PathBuf,
    /// LDR object image (PFM).
    #[arg(long)]
    rgb: PathBuf,
    /// Normal map (PFM).
    #[arg(long)]
    nrm: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ProjectShArgs {
    #[arg(long)]
    envmap: PathBuf,
    #[arg(long)]
    degree: usize,
    /// Coefficient text file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the clamped reconstruction.
    #[arg(long)]
    reconstruct: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct FitShArgs {
    /// Object image (PFM).
    #[arg(long)]
    image: PathBuf,
    /// Normal map (PFM); defaults to the orthographic sphere.
    #[arg(long)]
    normals: Option<PathBuf>,
    #[arg(long, default_value = "diffuse")]
    material: String,
    #[arg(long)]
    degree: usize,
    /// Ridge weight; defaults to 1e-6 times the mean diagonal of the normal matrix.
    #[arg(long)]
    lambda: Option<f64>,
    /// cholesky or svd.
    #[arg(long, default_value = "cholesky")]
    solver: String,
    /// Environment grid height used for the transport matrix.
    #[arg(long, default_value_t = 32)]
    env_height: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    /// Comma-separated: oracle, mean, predictor, ae, sh:L, shproj:L.
    #[arg(long, default_value = "mean,predictor,sh:2")]
    methods: String,
    /// Observation dataset directory.
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    ae: Option<PathBuf>,
    #[arg(long)]
    ip: Option<PathBuf>,
    #[arg(long)]
    sh_lambda: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct RelightArgs {
    #[arg(long)]
    envmap: PathBuf,
    #[arg(long, default_value = "sphere")]
    object: String,
    #[arg(long, default_value = "diffuse")]
    material: String,
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Provenance written next to every output as `run.json`.
struct RunLog {
    command: &'static str,
    config: Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    start: Instant,
    extra: Value,
}

impl RunLog {
    fn new(command: &'static str, config: Value) -> Self {
        RunLog {
            command,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            start: Instant::now(),
            extra: json!({}),
        }
    }

    fn write(&self, dir: &Path, threads: usize) -> Result<()> {
        let hashes = |paths: &[PathBuf]| -> Result<Vec<Value>> {
            paths
                .iter()
                .filter(|p| p.is_file())
                .map(|p| Ok(json!({ "path": p.display().to_string(), "sha256": sha256_file(p)? })))
                .collect()
        };
        let record = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "threads": threads,
            "config": self.config,
            "inputs": hashes(&self.inputs)?,
            "outputs": hashes(&self.outputs)?,
            "seconds": self.start.elapsed().as_secs_f64(),
            "results": self.extra,
        });
        write_json(&record, &dir.join("run.json"))
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })
}

fn read_json_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

/// Training configuration file: `{"arch": {...}, "train": {...}}`.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainFile<A: Default> {
    arch: A,
    train: TrainConfig,
}

fn resolve_train<A>(flags: &TrainFlags) -> Result<TrainFile<A>>
where
    A: Default + for<'de> Deserialize<'de>,
{
    let mut file: TrainFile<A> = match &flags.config {
        Some(p) => read_json_file(p)?,
        None => TrainFile::default(),
    };
    let t = &mut file.train;
    if let Some(v) = flags.epochs {
        t.epochs = v;
    }
    if let Some(v) = flags.lr {
        t.lr = v;
    }
    if let Some(v) = flags.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = flags.seed {
        t.seed = v;
    }
    Ok(file)
}

/// Opens the loss and metrics logs and returns the per-epoch callback.
fn epoch_logger(dir: &Path) -> Result<impl FnMut(&EpochRecord)> {
    let open = |name: &str| {
        let p = dir.join(name);
        fs::File::create(&p).map_err(|e| Error::Io { path: p, source: e })
    };
    let mut losses = open("loss.jsonl")?;
    let mut metrics = open("metrics.jsonl")?;
    Ok(move |r: &EpochRecord| {
        let _ = writeln!(losses, "{}", r.loss_line());
        let _ = writeln!(metrics, "{}", r.metrics_line());
        eprintln!(
            "epoch {:>4}  train {:.6}  val {}  {:.1}s",
            r.epoch,
            r.train_loss,
            r.val_loss.map_or("-".into(), |v| format!("{v:.6}")),
            r.seconds
        );
    })
}

fn load_autoencoder(path: &Path) -> Result<Autoencoder> {
    Autoencoder::from_checkpoint(&Checkpoint::read(path)?)
}

fn load_predictor(path: &Path) -> Result<Predictor> {
    Predictor::from_checkpoint(&Checkpoint::read(path)?)
}

fn run(cli: Cli, threads: usize) -> Result<()> {
    match cli.command {
        Command::GenScenes(a) => {
            let params: SceneParams = match &a.params {
                Some(p) => read_json_file(p)?,
                None => SceneParams::default(),
            };
            let mut log = RunLog::new("gen-scenes", json!({ "args": to_value(&a), "params": to_value(&params) }));
            let set = SceneSet::new(a.count, a.seed, params, a.height)?;
            set.write(&a.out)?;
            log.outputs.push(a.out.join(lumen::dataset::SCENES_FILE));
            log.write(&a.out, threads)?;
            eprintln!("wrote {} scenes to {}", set.scenes.len(), a.out.display());
        }
        Command::Augment(a) => {
            let set = SceneSet::load(&a.scenes)?;
            let mut log = RunLog::new("augment", json!({ "args": to_value(&a) }));
            log.inputs.push(a.scenes.join(lumen::dataset::SCENES_FILE));
            let m = augment_dataset(&set, a.per_scene, a.seed, &a.out)?;
            log.outputs.push(a.out.join(lumen::dataset::MANIFEST_FILE));
            log.write(&a.out, threads)?;
            eprintln!("wrote {} envmaps to {}", m.rows.len(), a.out.display());
        }
        Command::RenderDataset(a) => {
            let opts = RenderOptions {
                object: a.object.parse()?,
                material: a.material.parse()?,
                size: a.size,
                seed: a.seed,
            };
            let mut log = RunLog::new("render-dataset", json!({ "args": to_value(&a) }));
            log.inputs.push(a.envmaps.join(lumen::dataset::MANIFEST_FILE));
            fs::create_dir_all(&a.out).map_err(|e| Error::Io {
                path: a.out.clone(),
                source: e,
            })?;
            let m = render_dataset(&a.envmaps, &opts, &a.out)?;
            log.outputs.push(a.out.join(lumen::dataset::MANIFEST_FILE));
            log.write(&a.out, threads)?;
            eprintln!("wrote {} observations to {}", m.rows.len(), a.out.display());
        }
        Command::TrainAe(a) => {
            let manifest = EnvmapManifest::load(&a.data)?;
            let mut cfg: TrainFile<AeArch> = resolve_train(&a.flags)?;
            if let Some(z) = a.flags.latent {
                cfg.arch.latent = z;
            }
            cfg.arch = cfg.arch.clone().with_size(manifest.height, cfg.arch.latent);
            cfg.arch.width = manifest.width;
            ensure_dir(&a.flags.out)?;
            let mut log = RunLog::new(
                "train-ae",
                json!({ "args": to_value(&a), "arch": to_value(&cfg.arch), "train": to_value(&cfg.train),
                        "upsample_stages": cfg.arch.upsample_stages() }),
            );
            log.inputs.push(a.data.join(lumen::dataset::MANIFEST_FILE));
            let train = manifest.load_split(&a.data, Split::Train)?;
            let val = manifest.load_split(&a.data, Split::Val)?;
            eprintln!(
                "training autoencoder on {} maps ({} val), {} upsample stages",
                train.len(),
                val.len(),
                cfg.arch.upsample_stages()
            );
            let mut logger = epoch_logger(&a.flags.out)?;
            let trained = train_autoencoder(&cfg.arch, &cfg.train, &train, &val, &mut logger)?;
            let ckpt = a.flags.out.join("ae.lpck");
            trained.model.checkpoint(None).write(&ckpt)?;
            let best = trained.report.best();
            log.extra = json!({ "best_epoch": best.epoch, "best_train_loss": best.train_loss,
                                "best_val_loss": best.val_loss, "steps": trained.report.steps,
                                "fingerprint": trained.model.fingerprint() });
            log.outputs.extend([ckpt, a.flags.out.join("loss.jsonl"), a.flags.out.join("metrics.jsonl")]);
            log.write(&a.flags.out, threads)?;
        }
        Command::Encode(a) => {
            let ae = load_autoencoder(&a.ae)?;
            let code = ae.encode(&EnvMap::read_pfm(&a.envmap)?)?;
            let text = serde_json::to_string(code.values())? + "\n";
            match &a.out {
                Some(p) => write_text(p, &text)?,
                None => print!("{text}"),
            }
        }
        Command::Decode(a) => {
            let ae = load_autoencoder(&a.ae)?;
            let values: Vec<f32> = read_json_file(&a.code)?;
            ae.decode(&LatentCode(values))?.write_pfm(&a.out)?;
        }
        Command::TrainIp(a) => {
            let manifest = ObsManifest::load(&a.obs)?;
            let ae = load_autoencoder(&a.ae)?;
            let mut cfg: TrainFile<IpArch> = resolve_train(&a.flags)?;
            cfg.arch.obs_size = manifest.size;
            cfg.arch.latent = a.flags.latent.unwrap_or(ae.latent());
            ensure_dir(&a.flags.out)?;
            let mut log = RunLog::new(
                "train-ip",
                json!({ "args": to_value(&a), "arch": to_value(&cfg.arch), "train": to_value(&cfg.train),
                        "ae_fingerprint": ae.fingerprint() }),
            );
            log.inputs.extend([a.obs.join(lumen::dataset::MANIFEST_FILE), a.ae.clone()]);
            let pairs = |split| -> Result<Vec<(ObjectObservation, EnvMap)>> {
                Ok(manifest
                    .load_split(&a.obs, split)?
                    .into_iter()
                    .map(|item| (item.observation, item.envmap))
                    .collect())
            };
            let (train, val) = (pairs(Split::Train)?, pairs(Split::Val)?);
            eprintln!("training predictor on {} observations ({} val)", train.len(), val.len());
            let mut logger = epoch_logger(&a.flags.out)?;
            let trained = train_predictor(&cfg.arch, &cfg.train, &ae, &train, &val, &mut logger)?;
            let ckpt = a.flags.out.join("ip.lpck");
            trained.model.checkpoint(None).write(&ckpt)?;
            let best = trained.report.best();
            log.extra = json!({ "best_epoch": best.epoch, "best_train_loss": best.train_loss,
                                "best_val_loss": best.val_loss, "steps": trained.report.steps });
            log.outputs.extend([ckpt, a.flags.out.join("loss.jsonl"), a.flags.out.join("metrics.jsonl")]);
            log.write(&a.flags.out, threads)?;
        }
        Command::Predict(a) => {
            let ae = load_autoencoder(&a.ae)?;
            let ip = load_predictor(&a.ip)?;
            let obs = ObjectObservation {
                rgb: read_pfm(&a.rgb)?,
                normals: NormalMap::read_pfm(&a.nrm)?,
            };
            let (env, latency) = predict_lighting(&ip, &ae, &obs)?;
            env.write_pfm(&a.out)?;
            eprintln!("predicted in {:.2} ms", latency.as_secs_f64() * 1e3);
        }
        Command::ProjectSh(a) => {
            let env = EnvMap::read_pfm(&a.envmap)?;
            let coeffs = project(&env, a.degree);
            match &a.out {
                Some(p) => write_text(p, &coeffs.to_text())?,
                None => print!("{}", coeffs.to_text()),
            }
            if let Some(p) = &a.reconstruct {
                reconstruct_clamped(&coeffs, env.height())?.write_pfm(p)?;
            }
        }
        Command::FitSh(a) => {
            let img = read_pfm(&a.image)?;
            let normals = match &a.normals {
                Some(p) => NormalMap::read_pfm(p)?,
                None => ObjectSpec::Sphere.normal_map(img.height(), &PoseSample::from_uniforms(0.5, 1.0))?,
            };
            let material: Material = a.material.parse()?;
            let solver = match a.solver.as_str() {
                "cholesky" => Solver::NormalEquationsCholesky,
                "svd" => Solver::Svd,
                s => return Err(Error::InvalidArgument(format!("unknown solver {s:?} (cholesky|svd)"))),
            };
            let t = build_transport(&normals, &material.brdf(), a.env_height, 2 * a.env_height, DEFAULT_TRANSPORT_BUDGET)?;
            let start = Instant::now();
            let cfg = FitConfig {
                degree: a.degree,
                lambda: a.lambda,
                solver,
            };
            let fit = fit_sh(&img, &t, &cfg)?;
            let seconds = start.elapsed().as_secs_f64();
            ensure_dir(&a.out)?;
            write_text(&a.out.join("coeffs.txt"), &fit.coeffs.to_text())?;
            let record = json!({ "degree": a.degree, "lambda": fit.lambda, "residual": fit.residual,
                                 "wall_time_seconds": seconds });
            write_json(&record, &a.out.join("fit.json"))?;
            let mut log = RunLog::new("fit-sh", json!({ "args": to_value(&a) }));
            log.inputs.push(a.image.clone());
            log.outputs.extend([a.out.join("coeffs.txt"), a.out.join("fit.json")]);
            log.extra = record;
            log.write(&a.out, threads)?;
        }
        Command::Eval(a) => {
            let methods = parse_methods(&a.methods)?;
            let split: Split = a.split.parse()?;
            let manifest = ObsManifest::load(&a.test)?;
            let mut log = RunLog::new("eval", json!({ "args": to_value(&a) }));
            log.inputs.push(a.test.join(lumen::dataset::MANIFEST_FILE));
            let items: Vec<EvalItem> = manifest
                .load_split(&a.test, split)?
                .into_iter()
                .map(|it| EvalItem {
                    object: manifest.object.clone(),
                    material: it.material,
                    observation: it.observation,
                    envmap: it.envmap,
                })
                .collect();
            if items.is_empty() {
                return Err(Error::InvalidArgument(format!("no {split} rows in {}", a.test.display())));
            }
            // Missing or unreadable artifacts are reported per row, not fatal.
            let ae = a.ae.as_deref().map(load_autoencoder).transpose().unwrap_or_else(|e| {
                eprintln!("warning: {e}");
                None
            });
            let ip = a.ip.as_deref().map(load_predictor).transpose().unwrap_or_else(|e| {
                eprintln!("warning: {e}");
                None
            });
            let mean = if methods.contains(&Method::Mean) {
                let dir = manifest.envmap_dir(&a.test);
                let envs = EnvmapManifest::load(&dir)?;
                Some(mean_envmap(&envs.load_split(&dir, Split::Train)?)?)
            } else {
                None
            };
            let ctx = EvalContext {
                autoencoder: ae.as_ref(),
                predictor: ip.as_ref(),
                mean: mean.as_ref(),
                sh_lambda: a.sh_lambda,
                ..EvalContext::default()
            };
            let rows = eval_suite(&methods, &items, &ctx);
            ensure_dir(&a.out)?;
            write_csv_file(&rows, &a.out.join("eval.csv"))?;
            for r in rows.iter().filter(|r| r.error.is_some()) {
                eprintln!("error: {} / {}: {}", r.object, r.method, r.error.as_deref().unwrap_or(""));
            }
            let mut provenance = json!({ "split": split.name(), "items": items.len() });
            for (name, path) in [("ae", &a.ae), ("ip", &a.ip)] {
                if let Some(p) = path.as_ref().filter(|p| p.is_file()) {
                    provenance[format!("{name}_sha256")] = json!(sha256_file(p)?);
                    log.inputs.push(p.clone());
                }
            }
            if let Some(m) = &ae {
                provenance["ae_fingerprint"] = json!(m.fingerprint());
            }
            write_json(&json!({ "provenance": provenance, "rows": rows }), &a.out.join("eval.json"))?;
            println!("{:<12} {:>10} {:>10} {:>10} {:>10} {:>12}", "method", "rmse", "si_rmse", "mae", "mre", "relight_rmse");
            for (method, m, _) in summarize(&rows) {
                println!("{method:<12} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>12.4}", m[0], m[1], m[2], m[3], m[4]);
            }
            log.outputs.extend([a.out.join("eval.csv"), a.out.join("eval.json")]);
            log.write(&a.out, threads)?;
        }
        Command::Relight(a) => {
            let env = EnvMap::read_pfm(&a.envmap)?;
            let object: ObjectSpec = a.object.parse()?;
            let material: Material = a.material.parse()?;
            let nm = object.normal_map(a.size, &PoseSample::from_uniforms(0.5, 1.0))?;
            let hdr = render_direct(&nm, &material.brdf(), &env)?;
            let ldr = reexpose_ldr(&hdr)?;
            write_png(&a.out, a.size, a.size, &tonemap_display(&ldr, DISPLAY_GAMMA)?)?;
        }
        Command::Selftest => {
            let results = run_selftest();
            let mut failed = 0;
            for r in &results {
                println!(
                    "[{}] {:<44} {:>7.2}s  {}",
                    if r.passed { "pass" } else { "FAIL" },
                    r.name,
                    r.seconds,
                    r.detail
                );
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                return Err(Error::State(format!("{failed} of {} checks failed", results.len())));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads.unwrap_or(0);
    if threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let threads = rayon::current_num_threads();
    match run(cli, threads) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

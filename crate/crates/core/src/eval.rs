//! Method comparison tables over a set of test observations.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::envmap::EnvMap;
use crate::error::{Error, Result};
use crate::metrics::{envmap_scores, relight_error, MetricsRecord};
use crate::models::{predict_lighting, Autoencoder, Predictor};
use crate::render::{build_transport, Brdf, Material, ObjectObservation, DEFAULT_TRANSPORT_BUDGET};
use crate::shfit::{estimate_envmap_sh, FitConfig, Solver};
use crate::sphharm::{project, reconstruct_clamped};

pub const CSV_HEADER: &str = "object,material,method,rmse,si_rmse,mae,mre,relight_rmse,alpha";

/// A lighting estimator under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// The ground truth itself.
    Oracle,
    /// Pixelwise mean of the training maps.
    Mean,
    /// Predictor followed by the decoder.
    Predictor,
    /// Autoencoder reconstruction of the ground truth.
    Autoencoder,
    /// SH lighting fitted to the observation through its transport matrix.
    ShFit(usize),
    /// SH projection of the ground truth.
    ShProject(usize),
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let degree = |d: &str| {
            d.parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad SH degree in method {s:?}")))
        };
        match s.split_once(':') {
            None => match s {
                "oracle" => Ok(Method::Oracle),
                "mean" => Ok(Method::Mean),
                "predictor" => Ok(Method::Predictor),
                "ae" => Ok(Method::Autoencoder),
                _ => Err(Error::invalid(format!(
                    "unknown method {s:?} (oracle, mean, predictor, ae, sh:L, shproj:L)"
                ))),
            },
            Some(("sh", d)) => Ok(Method::ShFit(degree(d)?)),
            Some(("shproj", d)) => Ok(Method::ShProject(degree(d)?)),
            Some(_) => Err(Error::invalid(format!("unknown method {s:?}"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Oracle => f.write_str("oracle"),
            Method::Mean => f.write_str("mean"),
            Method::Predictor => f.write_str("predictor"),
            Method::Autoencoder => f.write_str("ae"),
            Method::ShFit(l) => write!(f, "sh:{l}"),
            Method::ShProject(l) => write!(f, "shproj:{l}"),
        }
    }
}

/// Parses a comma-separated method list.
pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    list.split(',').map(|s| s.trim().parse()).collect()
}

#[derive(Debug, Clone)]
pub struct EvalItem {
    pub object: String,
    pub material: Material,
    pub observation: ObjectObservation,
    pub envmap: EnvMap,
}

/// Models and settings shared by every row. Missing pieces turn the rows
/// that need them into error rows.
#[derive(Clone, Copy)]
pub struct EvalContext<'a> {
    pub autoencoder: Option<&'a Autoencoder>,
    pub predictor: Option<&'a Predictor>,
    pub mean: Option<&'a EnvMap>,
    pub sh_lambda: Option<f64>,
    pub sh_solver: Solver,
    /// Material used for the relighting error.
    pub relight: Brdf,
}

impl Default for EvalContext<'_> {
    fn default() -> Self {
        EvalContext {
            autoencoder: None,
            predictor: None,
            mean: None,
            sh_lambda: None,
            sh_solver: Solver::NormalEquationsCholesky,
            relight: Material::Diffuse.brdf(),
        }
    }
}

fn require<'a, T>(v: Option<&'a T>, what: &str) -> Result<&'a T> {
    v.ok_or_else(|| Error::Config(format!("no {what} supplied")))
}

fn estimate(method: Method, item: &EvalItem, ctx: &EvalContext) -> Result<EnvMap> {
    let gt = &item.envmap;
    match method {
        Method::Oracle => Ok(gt.clone()),
        Method::Mean => Ok(require(ctx.mean, "training mean map")?.clone()),
        Method::Predictor => {
            let ip = require(ctx.predictor, "predictor checkpoint")?;
            let ae = require(ctx.autoencoder, "autoencoder checkpoint")?;
            Ok(predict_lighting(ip, ae, &item.observation)?.0)
        }
        Method::Autoencoder => {
            let ae = require(ctx.autoencoder, "autoencoder checkpoint")?;
            ae.decode(&ae.encode(gt)?)
        }
        Method::ShFit(degree) => {
            let t = build_transport(
                &item.observation.normals,
                &item.material.brdf(),
                gt.height(),
                gt.width(),
                DEFAULT_TRANSPORT_BUDGET,
            )?;
            let cfg = FitConfig {
                degree,
                lambda: ctx.sh_lambda,
                solver: ctx.sh_solver,
            };
            estimate_envmap_sh(&item.observation.rgb, &t, &cfg, gt.height())
        }
        Method::ShProject(degree) => reconstruct_clamped(&project(gt, degree), gt.height()),
    }
}

fn score(method: Method, item: &EvalItem, ctx: &EvalContext) -> Result<MetricsRecord> {
    let pred = estimate(method, item, ctx)?;
    let s = envmap_scores(&pred, &item.envmap)?;
    Ok(MetricsRecord {
        object: item.object.clone(),
        material: item.material.name().into(),
        method: method.to_string(),
        rmse: s.rmse,
        si_rmse: s.si_rmse,
        mae: s.mae,
        mre: s.mre,
        relight_rmse: relight_error(&pred, &item.envmap, &item.observation.normals, &ctx.relight)?,
        alpha: s.alpha,
        error: None,
    })
}

/// One row per item and method, items outermost, in input order. Failures
/// become rows with NaN metrics and the message in `error`.
pub fn eval_suite(methods: &[Method], items: &[EvalItem], ctx: &EvalContext) -> Vec<MetricsRecord> {
    let jobs: Vec<(usize, Method)> = (0..items.len())
        .flat_map(|i| methods.iter().map(move |m| (i, *m)))
        .collect();
    jobs.par_iter()
        .map(|&(i, m)| {
            let item = &items[i];
            score(m, item, ctx).unwrap_or_else(|e| MetricsRecord {
                object: item.object.clone(),
                material: item.material.name().into(),
                method: m.to_string(),
                rmse: f64::NAN,
                si_rmse: f64::NAN,
                mae: f64::NAN,
                mre: f64::NAN,
                relight_rmse: f64::NAN,
                alpha: f64::NAN,
                error: Some(e.to_string()),
            })
        })
        .collect()
}

pub fn write_csv(records: &[MetricsRecord], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.object, r.material, r.method, r.rmse, r.si_rmse, r.mae, r.mre, r.relight_rmse, r.alpha
        )?;
    }
    Ok(())
}

pub fn write_csv_file(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_csv(records, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Per-method mean of every metric, skipping error rows.
pub fn summarize(records: &[MetricsRecord]) -> Vec<(String, [f64; 5], usize)> {
    let mut out: Vec<(String, [f64; 5], usize)> = Vec::new();
    for r in records.iter().filter(|r| r.error.is_none()) {
        let idx = match out.iter().position(|(m, _, _)| *m == r.method) {
            Some(i) => i,
            None => {
                out.push((r.method.clone(), [0.0; 5], 0));
                out.len() - 1
            }
        };
        let (_, acc, n) = &mut out[idx];
        for (a, v) in acc.iter_mut().zip([r.rmse, r.si_rmse, r.mae, r.mre, r.relight_rmse]) {
            *a += v;
        }
        *n += 1;
    }
    for (_, acc, n) in &mut out {
        for a in acc.iter_mut() {
            *a /= *n as f64;
        }
    }
    out
}

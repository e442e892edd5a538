//! On-disk datasets: scene sets, augmented environment maps and object
//! observations, each described by a JSON manifest with relative paths.
//!
//! Layouts:
//!
//! ```text
//! scenes/   scenes.json   panoramas/NNNNNN.pfm
//! envmaps/  manifest.json envmaps/NNNNNN.pfm
//! obs/      manifest.json obs/NNNNNN_rgb.pfm obs/NNNNNN_nrm.pfm
//! ```

use std::fmt;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envmap::{read_pfm, write_pfm, EnvMap};
use crate::error::{Error, Result};
use crate::render::{
    build_transport, observation_from_render, posed_spiky_sphere_normal_map, render_direct, render_with_transport,
    sphere_normal_map, Material, NormalMap, ObjectObservation, DEFAULT_TRANSPORT_BUDGET,
};
use crate::rng::split_seed;
use crate::scenegen::{augment, render_panorama, sample_object_rotation, sample_scene, scene_seed, BoxScene, PoseSample, SceneParams};

pub const SCENES_FILE: &str = "scenes.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Train/val/test proportions of the scene split.
pub const SPLIT_WEIGHTS: [usize; 3] = [1044, 159, 100];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    /// Split of scene `index` out of `count`, in contiguous blocks following
    /// [`SPLIT_WEIGHTS`].
    pub fn of(index: usize, count: usize) -> Split {
        let total: usize = SPLIT_WEIGHTS.iter().sum();
        // Compare the scene's midpoint (2i + 1) / 2n against the cumulative weights.
        let pos = (2 * index + 1) * total;
        if pos < 2 * count * SPLIT_WEIGHTS[0] {
            Split::Train
        } else if pos < 2 * count * (SPLIT_WEIGHTS[0] + SPLIT_WEIGHTS[1]) {
            Split::Val
        } else {
            Split::Test
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split {s:?} (expected train, val or test)"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn numbered(i: usize, suffix: &str) -> String {
    format!("{i:06}{suffix}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub index: usize,
    pub seed: u64,
    pub split: Split,
    /// Panorama from the room center, relative to the scene-set directory.
    pub panorama: String,
}

/// A set of procedural rooms, each reproducible from its seed and the shared
/// parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSet {
    pub seed: u64,
    pub params: SceneParams,
    pub height: usize,
    pub width: usize,
    pub scenes: Vec<SceneRecord>,
}

impl SceneSet {
    pub fn new(count: usize, seed: u64, params: SceneParams, height: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::invalid("scene count must be >= 1"));
        }
        params.validate()?;
        let scenes = (0..count)
            .map(|i| SceneRecord {
                index: i,
                seed: scene_seed(seed, i as u64),
                split: Split::of(i, count),
                panorama: format!("panoramas/{}", numbered(i, ".pfm")),
            })
            .collect();
        Ok(SceneSet {
            seed,
            params,
            height,
            width: 2 * height,
            scenes,
        })
    }

    pub fn scene(&self, index: usize) -> Result<BoxScene> {
        let rec = self
            .scenes
            .get(index)
            .ok_or_else(|| Error::invalid(format!("no scene {index}")))?;
        sample_scene(rec.seed, &self.params)
    }

    /// Writes `scenes.json` and the center panoramas under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        create_dir(&dir.join("panoramas"))?;
        self.scenes.par_iter().try_for_each(|rec| -> Result<()> {
            let scene = sample_scene(rec.seed, &self.params)?;
            let pano = render_panorama(&scene, scene.center(), self.height, self.width)?;
            pano.write_pfm(dir.join(&rec.panorama))
        })?;
        write_json(self, &dir.join(SCENES_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join(SCENES_FILE))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvmapRow {
    pub file: String,
    pub scene: usize,
    pub scene_seed: u64,
    /// Camera position inside the room, meters.
    pub pose: [f64; 3],
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvmapManifest {
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub per_scene: usize,
    pub rows: Vec<EnvmapRow>,
}

impl EnvmapManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join(MANIFEST_FILE))
    }

    pub fn rows_in(&self, split: Split) -> impl Iterator<Item = (usize, &EnvmapRow)> {
        self.rows.iter().enumerate().filter(move |(_, r)| r.split == split)
    }

    /// Loads every map of `split`, checking its size against the manifest.
    pub fn load_split(&self, dir: &Path, split: Split) -> Result<Vec<EnvMap>> {
        self.rows_in(split).map(|(i, _)| self.load_row(dir, i)).collect()
    }

    pub fn load_row(&self, dir: &Path, index: usize) -> Result<EnvMap> {
        let row = self.rows.get(index).ok_or(Error::Dataset {
            row: index,
            message: "row out of range".into(),
        })?;
        let env = EnvMap::read_pfm(dir.join(&row.file)).map_err(|e| Error::Dataset {
            row: index,
            message: format!("{}: {e}", row.file),
        })?;
        if env.height() != self.height || env.width() != self.width {
            return Err(Error::Dataset {
                row: index,
                message: format!(
                    "{} is {}x{}, manifest says {}x{}",
                    row.file,
                    env.height(),
                    env.width(),
                    self.height,
                    self.width
                ),
            });
        }
        Ok(env)
    }

    /// Pixelwise mean of the training maps.
    pub fn train_mean(&self, dir: &Path) -> Result<EnvMap> {
        mean_envmap(&self.load_split(dir, Split::Train)?)
    }
}

pub fn mean_envmap(maps: &[EnvMap]) -> Result<EnvMap> {
    let first = maps.first().ok_or_else(|| Error::invalid("mean of zero maps"))?;
    let mut acc = vec![0.0; first.data().len()];
    for m in maps {
        if m.height() != first.height() || m.width() != first.width() {
            return Err(Error::invalid("maps differ in size"));
        }
        for (a, v) in acc.iter_mut().zip(m.data()) {
            *a += v;
        }
    }
    let n = maps.len() as f64;
    EnvMap::new(first.height(), first.width(), acc.into_iter().map(|a| a / n).collect())
}

/// Renders `per_scene` panoramas of every scene into `dir`. Scene `i` draws
/// its cameras from stream `i` of `seed`; rows follow scene order.
pub fn augment_dataset(scenes: &SceneSet, per_scene: usize, seed: u64, dir: &Path) -> Result<EnvmapManifest> {
    create_dir(&dir.join("envmaps"))?;
    let per: Vec<Vec<EnvmapRow>> = scenes
        .scenes
        .par_iter()
        .map(|rec| -> Result<Vec<EnvmapRow>> {
            let scene = sample_scene(rec.seed, &scenes.params)?;
            let views = augment(&scene, per_scene, scenes.height, scenes.width, split_seed(seed, rec.index as u64))?;
            views
                .into_iter()
                .enumerate()
                .map(|(k, view)| {
                    let file = format!("envmaps/{}", numbered(rec.index * per_scene + k, ".pfm"));
                    view.envmap.write_pfm(dir.join(&file))?;
                    Ok(EnvmapRow {
                        file,
                        scene: rec.index,
                        scene_seed: rec.seed,
                        pose: view.camera,
                        split: rec.split,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let manifest = EnvmapManifest {
        height: scenes.height,
        width: scenes.width,
        seed,
        per_scene,
        rows: per.into_iter().flatten().collect(),
    };
    write_json(&manifest, &dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Geometry of the observed object.
#[derive(Debug, Clone, PartialEq)]
pub enum ObjectSpec {
    Sphere,
    Spiky { amplitude: f64, frequency: f64 },
    /// A normal map stored as PFM with `(n + 1) / 2` encoding. Poses are
    /// ignored: the file fixes the geometry in camera space.
    File(PathBuf),
}

impl ObjectSpec {
    pub const SPIKY_DEFAULT: ObjectSpec = ObjectSpec::Spiky {
        amplitude: 0.2,
        frequency: 6.0,
    };

    pub fn name(&self) -> String {
        match self {
            ObjectSpec::Sphere => "sphere".into(),
            ObjectSpec::Spiky { .. } => "spiky".into(),
            ObjectSpec::File(p) => p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "normalmap".into()),
        }
    }

    /// Camera-space normals of the object turned by `pose`.
    pub fn normal_map(&self, size: usize, pose: &PoseSample) -> Result<NormalMap> {
        match self {
            ObjectSpec::Sphere => sphere_normal_map(size),
            ObjectSpec::Spiky { amplitude, frequency } => {
                posed_spiky_sphere_normal_map(size, *amplitude, *frequency, &pose.rotation())
            }
            ObjectSpec::File(p) => {
                let nm = NormalMap::read_pfm(p)?;
                if nm.size() != size {
                    return Err(Error::invalid(format!(
                        "{} is {}x{}, observations are {size}x{size}",
                        p.display(),
                        nm.size(),
                        nm.size()
                    )));
                }
                Ok(nm)
            }
        }
    }
}

impl FromStr for ObjectSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(ObjectSpec::Sphere),
            "spiky" => Ok(ObjectSpec::SPIKY_DEFAULT),
            _ if s.ends_with(".pfm") => Ok(ObjectSpec::File(PathBuf::from(s))),
            _ => Err(Error::invalid(format!(
                "unknown object {s:?} (expected sphere, spiky or a .pfm normal map)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsRow {
    pub rgb: String,
    pub nrm: String,
    /// Source map, relative to the envmap dataset directory.
    pub envmap: String,
    pub material: Material,
    pub rotation: PoseSample,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsManifest {
    pub object: String,
    pub size: usize,
    pub seed: u64,
    /// Envmap dataset directory, relative to the observation directory.
    pub envmaps: String,
    pub rows: Vec<ObsRow>,
}

/// One loaded observation with its ground-truth lighting.
#[derive(Debug, Clone)]
pub struct ObsItem {
    pub row: usize,
    pub split: Split,
    pub material: Material,
    pub observation: ObjectObservation,
    pub envmap: EnvMap,
}

impl ObsManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join(MANIFEST_FILE))
    }

    pub fn envmap_dir(&self, dir: &Path) -> PathBuf {
        dir.join(&self.envmaps)
    }

    pub fn load_row(&self, dir: &Path, index: usize) -> Result<ObsItem> {
        let row = self.rows.get(index).ok_or(Error::Dataset {
            row: index,
            message: "row out of range".into(),
        })?;
        let wrap = |what: &str, e: Error| Error::Dataset {
            row: index,
            message: format!("{what}: {e}"),
        };
        let rgb = read_pfm(dir.join(&row.rgb)).map_err(|e| wrap(&row.rgb, e))?;
        let normals = NormalMap::read_pfm(dir.join(&row.nrm)).map_err(|e| wrap(&row.nrm, e))?;
        if rgb.height() != self.size || rgb.width() != self.size || normals.size() != self.size {
            return Err(Error::Dataset {
                row: index,
                message: format!("observation is not {0}x{0}", self.size),
            });
        }
        let envmap = EnvMap::read_pfm(self.envmap_dir(dir).join(&row.envmap)).map_err(|e| wrap(&row.envmap, e))?;
        Ok(ObsItem {
            row: index,
            split: row.split,
            material: row.material,
            observation: ObjectObservation { rgb, normals },
            envmap,
        })
    }

    pub fn load_split(&self, dir: &Path, split: Split) -> Result<Vec<ObsItem>> {
        (0..self.rows.len())
            .filter(|&i| self.rows[i].split == split)
            .map(|i| self.load_row(dir, i))
            .collect()
    }
}

/// Options of [`render_dataset`].
#[derive(Debug, Clone)]
pub struct RenderOptions {
    pub object: ObjectSpec,
    pub material: Material,
    pub size: usize,
    pub seed: u64,
}

/// Renders one observation per envmap row into `out`. Row `i` takes its
/// object pose from stream `i` of the seed. Unposed objects share one
/// transport matrix; posed ones are rendered directly.
pub fn render_dataset(envmap_dir: &Path, opts: &RenderOptions, out: &Path) -> Result<ObsManifest> {
    let envs = EnvmapManifest::load(envmap_dir)?;
    create_dir(&out.join("obs"))?;
    let brdf = opts.material.brdf();
    let shared = match opts.object {
        ObjectSpec::Spiky { .. } => None,
        _ => {
            let nm = opts.object.normal_map(opts.size, &PoseSample::from_uniforms(0.5, 1.0))?;
            let t = build_transport(&nm, &brdf, envs.height, envs.width, DEFAULT_TRANSPORT_BUDGET).ok();
            Some((nm, t))
        }
    };
    let rows = envs
        .rows
        .par_iter()
        .enumerate()
        .map(|(i, erow)| -> Result<ObsRow> {
            let rotation = sample_object_rotation(split_seed(opts.seed, i as u64));
            let env = envs.load_row(envmap_dir, i)?;
            let (nm, hdr) = match &shared {
                Some((nm, Some(t))) => (nm.clone(), render_with_transport(t, &env)?),
                Some((nm, None)) => (nm.clone(), render_direct(nm, &brdf, &env)?),
                None => {
                    let nm = opts.object.normal_map(opts.size, &rotation)?;
                    let hdr = render_direct(&nm, &brdf, &env)?;
                    (nm, hdr)
                }
            };
            let obs = observation_from_render(&nm, &hdr).map_err(|e| Error::Dataset {
                row: i,
                message: e.to_string(),
            })?;
            let rgb = format!("obs/{}", numbered(i, "_rgb.pfm"));
            let nrm = format!("obs/{}", numbered(i, "_nrm.pfm"));
            write_pfm(&obs.rgb, out.join(&rgb))?;
            obs.normals.write_pfm(out.join(&nrm))?;
            Ok(ObsRow {
                rgb,
                nrm,
                envmap: erow.file.clone(),
                material: opts.material,
                rotation,
                split: erow.split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = ObsManifest {
        object: opts.object.name(),
        size: opts.size,
        seed: opts.seed,
        envmaps: relative_path(out, envmap_dir)?,
        rows,
    };
    write_json(&manifest, &out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Path of `target` as seen from directory `base`, both resolved first.
pub fn relative_path(base: &Path, target: &Path) -> Result<String> {
    let base = base.canonicalize().map_err(|e| Error::io(base, e))?;
    let target = target.canonicalize().map_err(|e| Error::io(target, e))?;
    let b: Vec<Component> = base.components().collect();
    let t: Vec<Component> = target.components().collect();
    let common = b.iter().zip(&t).take_while(|(x, y)| x == y).count();
    let mut rel = PathBuf::new();
    for _ in common..b.len() {
        rel.push("..");
    }
    for c in &t[common..] {
        rel.push(c);
    }
    if rel.as_os_str().is_empty() {
        rel.push(".");
    }
    Ok(rel.to_string_lossy().into_owned())
}

//! Experiment configuration and the on-disk dataset and run layouts.
//!
//! A dataset directory holds `config.txt`, `manifest.json`, `scene.json`,
//! `rig.json`, `test_rig.json`, `poses_gt.json`, `poses_noisy.json`,
//! `graph.json` and `images/{train,test}_cNN_sS.{png,raw}`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{ToyExperiment, ToySpec};
use crate::config::FlatConfig;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::io;
use crate::joint::{LambdaMode, TrainConfig};
use crate::scene::{AnalyticScene, MultiScaleRig, RigRecord, RigSpec};
use crate::so3::{CameraPose, PoseRecord};
use crate::viewgraph::ViewGraph;

/// Every key accepted in a config file.
pub const CONFIG_KEYS: &[&str] = &[
    "seed",
    "n_cams",
    "test_cams",
    "scales",
    "width",
    "height",
    "fov_deg",
    "radius_min",
    "radius_max",
    "pose_sigma",
    "edge_sigma",
    "edge_outliers",
    "ring_neighbors",
    "epochs",
    "steps_per_epoch",
    "rays_per_step",
    "samples",
    "chunk",
    "hidden",
    "octaves",
    "dir_octaves",
    "lr_field",
    "lr_refiner",
    "lr_translation",
    "warmup_epochs",
    "decay_k",
    "lambda0",
    "lambda_floor",
    "lambda_mode",
    "anneal_b",
    "beta",
    "freeze_poses",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub fov_deg: f64,
    pub toy: ToySpec,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_flat(&FlatConfig::new(), None).expect("defaults are valid")
    }
}

fn parse_lambda_mode(s: &str) -> Result<LambdaMode> {
    match s {
        "annealed" => Ok(LambdaMode::Annealed),
        _ => match s.strip_prefix("fixed:").map(str::parse::<f64>) {
            Some(Ok(v)) => Ok(LambdaMode::Fixed(v)),
            _ => Err(Error::Config(format!("lambda_mode must be `annealed` or `fixed:<value>`, got `{s}`"))),
        },
    }
}

fn lambda_mode_text(m: LambdaMode) -> String {
    match m {
        LambdaMode::Annealed => "annealed".into(),
        LambdaMode::Fixed(v) => format!("fixed:{v}"),
    }
}

fn parse_scales(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad scale list `{s}`"))))
        .collect()
}

impl ExperimentConfig {
    /// Resolves a flat config over the defaults; `seed` overrides the file.
    pub fn from_flat(cfg: &FlatConfig, seed: Option<u64>) -> Result<Self> {
        cfg.check_keys(CONFIG_KEYS)?;
        let seed = match seed {
            Some(s) => s,
            None => cfg.get_or("seed", 0u64)?,
        };
        let fov_deg = cfg.get_or("fov_deg", 40.0)?;
        let scales = match cfg.get_str("scales") {
            Some(s) => parse_scales(s)?,
            None => vec![1, 2],
        };
        let d = ToySpec::default();
        let rig = RigSpec {
            n_cams: cfg.get_or("n_cams", d.rig.n_cams)?,
            radius_min: cfg.get_or("radius_min", d.rig.radius_min)?,
            radius_max: cfg.get_or("radius_max", d.rig.radius_max)?,
            scales,
            base_width: cfg.get_or("width", d.rig.base_width)?,
            base_height: cfg.get_or("height", d.rig.base_height)?,
            fov: f64::to_radians(fov_deg),
            seed,
        };
        let toy = ToySpec {
            rig,
            test_cams: cfg.get_or("test_cams", d.test_cams)?,
            pose_sigma: cfg.get_or("pose_sigma", d.pose_sigma)?,
            edge_sigma: cfg.get_or("edge_sigma", d.edge_sigma)?,
            edge_outliers: cfg.get_or("edge_outliers", d.edge_outliers)?,
            ring_neighbors: cfg.get_or("ring_neighbors", d.ring_neighbors)?,
            samples: cfg.get_or("samples", d.samples)?,
            seed,
        };
        let epochs = cfg.get_or("epochs", 40usize)?;
        let t = TrainConfig::with_epochs(epochs);
        let train = TrainConfig {
            lambda0: cfg.get_or("lambda0", t.lambda0)?,
            decay_k: cfg.get_or("decay_k", t.decay_k)?,
            warmup_epochs: cfg.get_or("warmup_epochs", t.warmup_epochs)?,
            lambda_floor: cfg.get_or("lambda_floor", t.lambda_floor)?,
            lambda_mode: match cfg.get_str("lambda_mode") {
                Some(s) => parse_lambda_mode(s)?,
                None => t.lambda_mode,
            },
            beta: cfg.get_or("beta", t.beta)?,
            anneal_b: cfg.get_or("anneal_b", t.anneal_b)?,
            octaves: cfg.get_or("octaves", t.octaves)?,
            dir_octaves: cfg.get_or("dir_octaves", t.dir_octaves)?,
            hidden: cfg.get_or("hidden", t.hidden)?,
            lr_field: cfg.get_or("lr_field", t.lr_field)?,
            lr_refiner: cfg.get_or("lr_refiner", t.lr_refiner)?,
            lr_translation: cfg.get_or("lr_translation", t.lr_translation)?,
            epochs,
            steps_per_epoch: cfg.get_or("steps_per_epoch", t.steps_per_epoch)?,
            rays_per_step: cfg.get_or("rays_per_step", t.rays_per_step)?,
            samples: toy.samples,
            chunk: cfg.get_or("chunk", t.chunk)?,
            freeze_poses: cfg.get_or("freeze_poses", false)?,
            seed,
        };
        train.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(toy.pose_sigma >= 0.0 && toy.edge_sigma >= 0.0 && (0.0..=1.0).contains(&toy.edge_outliers)) {
            return Err(Error::Config("noise levels must be non-negative and outlier fraction in [0, 1]".into()));
        }
        Ok(Self { seed, fov_deg, toy, train })
    }

    /// Fully resolved config, defaults included.
    pub fn to_flat(&self) -> FlatConfig {
        let (r, t, y) = (&self.toy.rig, &self.train, &self.toy);
        let mut c = FlatConfig::new();
        c.set("seed", self.seed);
        c.set("n_cams", r.n_cams);
        c.set("test_cams", y.test_cams);
        c.set("scales", r.scales.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
        c.set("width", r.base_width);
        c.set("height", r.base_height);
        c.set("fov_deg", self.fov_deg);
        c.set("radius_min", r.radius_min);
        c.set("radius_max", r.radius_max);
        c.set("pose_sigma", y.pose_sigma);
        c.set("edge_sigma", y.edge_sigma);
        c.set("edge_outliers", y.edge_outliers);
        c.set("ring_neighbors", y.ring_neighbors);
        c.set("samples", y.samples);
        c.set("epochs", t.epochs);
        c.set("steps_per_epoch", t.steps_per_epoch);
        c.set("rays_per_step", t.rays_per_step);
        c.set("chunk", t.chunk);
        c.set("hidden", t.hidden);
        c.set("octaves", t.octaves);
        c.set("dir_octaves", t.dir_octaves);
        c.set("lr_field", t.lr_field);
        c.set("lr_refiner", t.lr_refiner);
        c.set("lr_translation", t.lr_translation);
        c.set("warmup_epochs", t.warmup_epochs);
        c.set("decay_k", t.decay_k);
        c.set("lambda0", t.lambda0);
        c.set("lambda_floor", t.lambda_floor);
        c.set("lambda_mode", lambda_mode_text(t.lambda_mode));
        c.set("anneal_b", t.anneal_b);
        c.set("beta", t.beta);
        c.set("freeze_poses", t.freeze_poses);
        c
    }

    pub fn hash(&self) -> String {
        self.to_flat().hash()
    }
}

/// Summary written next to a synthesized dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub pose_sigma: f64,
    pub edge_sigma: f64,
    pub edge_outliers: f64,
    pub n_cams: usize,
    pub test_cams: usize,
    pub scales: Vec<usize>,
    pub train_images: Vec<String>,
    pub test_images: Vec<String>,
}

pub fn image_name(split: &str, camera: usize, scale: usize) -> String {
    format!("{split}_c{camera:02}_s{scale}")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_poses(path: &Path, poses: &[CameraPose]) -> Result<()> {
    write_json(path, &poses.iter().map(PoseRecord::from).collect::<Vec<_>>())
}

pub fn read_poses(path: &Path) -> Result<Vec<CameraPose>> {
    let records: Vec<PoseRecord> = read_json(path)?;
    records.iter().map(CameraPose::try_from).collect()
}

fn write_images(dir: &Path, split: &str, images: &[Vec<Image>], scales: &[usize]) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for (c, imgs) in images.iter().enumerate() {
        for (img, &s) in imgs.iter().zip(scales) {
            let name = image_name(split, c, s);
            io::write_png(&dir.join(format!("{name}.png")), img)?;
            io::write_raw(&dir.join(format!("{name}.raw")), img)?;
            names.push(name);
        }
    }
    Ok(names)
}

fn read_images(dir: &Path, split: &str, cams: usize, scales: &[usize]) -> Result<Vec<Vec<Image>>> {
    (0..cams)
        .map(|c| scales.iter().map(|&s| io::read_raw(&dir.join(format!("{}.raw", image_name(split, c, s))))).collect())
        .collect()
}

/// Writes the dataset layout described in the module docs.
pub fn save_dataset(toy: &ToyExperiment, cfg: &ExperimentConfig, dir: &Path) -> Result<Manifest> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    cfg.to_flat().save(&dir.join("config.txt"))?;
    write_json(&dir.join("scene.json"), &toy.scene)?;
    write_json(&dir.join("rig.json"), &toy.rig.to_record())?;
    write_json(&dir.join("test_rig.json"), &toy.test_rig.to_record())?;
    write_poses(&dir.join("poses_gt.json"), &toy.rig.poses)?;
    write_poses(&dir.join("poses_noisy.json"), &toy.noisy_poses)?;
    toy.graph.save(dir.join("graph.json"))?;
    let train_images = write_images(&images, "train", &toy.train_images, &toy.rig.scales)?;
    let test_images = write_images(&images, "test", &toy.test_images, &toy.test_rig.scales)?;
    let manifest = Manifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        pose_sigma: toy.spec.pose_sigma,
        edge_sigma: toy.spec.edge_sigma,
        edge_outliers: toy.spec.edge_outliers,
        n_cams: toy.rig.poses.len(),
        test_cams: toy.test_rig.poses.len(),
        scales: toy.rig.scales.clone(),
        train_images,
        test_images,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Reads a dataset written by [`save_dataset`] (raw float images).
pub fn load_dataset(dir: &Path) -> Result<(ToyExperiment, ExperimentConfig)> {
    let cfg = ExperimentConfig::from_flat(&FlatConfig::load(&dir.join("config.txt"))?, None)?;
    let scene: AnalyticScene = read_json(&dir.join("scene.json"))?;
    scene.validate()?;
    let rig = MultiScaleRig::from_record(&read_json::<RigRecord>(&dir.join("rig.json"))?)?;
    let test_rig = MultiScaleRig::from_record(&read_json::<RigRecord>(&dir.join("test_rig.json"))?)?;
    let noisy_poses = read_poses(&dir.join("poses_noisy.json"))?;
    let graph = ViewGraph::load(dir.join("graph.json"))?;
    if noisy_poses.len() != rig.poses.len() || graph.vertex_count() != rig.poses.len() {
        return Err(Error::InvalidParameter("dataset files disagree on the camera count".into()));
    }
    let images = dir.join("images");
    let train_images = read_images(&images, "train", rig.poses.len(), &rig.scales)?;
    let test_images = read_images(&images, "test", test_rig.poses.len(), &test_rig.scales)?;
    let toy = ToyExperiment { spec: cfg.toy.clone(), scene, rig, test_rig, train_images, test_images, noisy_poses, graph };
    Ok((toy, cfg))
}

/// A pose to render, named after the reference image it should match.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedPose {
    pub name: String,
    pub pose: PoseRecord,
}

/// Test-view names in the order of [`ToyExperiment::test_views`].
pub fn test_view_names(toy: &ToyExperiment) -> Vec<String> {
    (0..toy.test_rig.poses.len())
        .flat_map(|c| toy.test_rig.scales.iter().map(move |&s| image_name("test", c, s)))
        .collect()
}

/// Paths inside a training run directory.
pub struct RunLayout {
    pub dir: PathBuf,
}

impl RunLayout {
    pub fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf() }
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.txt")
    }
    pub fn field(&self) -> PathBuf {
        self.dir.join("field.bin")
    }
    pub fn refiner(&self) -> PathBuf {
        self.dir.join("refiner.bin")
    }
    pub fn poses(&self) -> PathBuf {
        self.dir.join("poses.json")
    }
    pub fn test_poses(&self) -> PathBuf {
        self.dir.join("test_poses.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.json")
    }
}

/// Headline numbers of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub seed: u64,
    pub lambda_mode: String,
    pub freeze_poses: bool,
    pub epochs: usize,
    pub scene_radius: f64,
    pub samples: usize,
    pub initial_rot_err: f64,
    pub final_rot_err: f64,
    pub test_psnr: f64,
    pub test_ssim: f64,
    pub diverged: Option<usize>,
}

impl RunSummary {
    pub fn lambda_mode_of(cfg: &TrainConfig) -> String {
        lambda_mode_text(cfg.lambda_mode)
    }
}

pub fn write_summary(path: &Path, s: &RunSummary) -> Result<()> {
    write_json(path, s)
}

pub fn write_named_poses(path: &Path, poses: &[NamedPose]) -> Result<()> {
    write_json(path, &poses)
}

//! Synthetic multi-scale experiments on the analytic scene.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::joint::{
    align_test_poses, evaluate_views, pose_error_report, train_joint, EpochMetrics, JointDataset, JointState, TrainConfig,
    TrainView, ViewScore,
};
use crate::motion::RefinerParams;
use crate::rng;
use crate::scene::{analytic_render, build_rig, AnalyticScene, MultiScaleRig, RigSpec};
use crate::so3::{CameraPose, UnitQuaternion};
use crate::viewgraph::{generate_synthetic_graph, perturb_absolute_poses, perturb_edges, Edge, NoiseSpec, Vertex, ViewGraph};
use rayon::prelude::*;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub rig: RigSpec,
    pub test_cams: usize,
    /// Std of the axis-angle noise on absolute rotations (radians).
    pub pose_sigma: f64,
    /// Std of the axis-angle noise on relative measurements (radians).
    pub edge_sigma: f64,
    pub edge_outliers: f64,
    /// Each camera is linked to this many successors around the ring.
    pub ring_neighbors: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            rig: RigSpec::default(),
            test_cams: 4,
            pose_sigma: 0.1,
            edge_sigma: 0.02,
            edge_outliers: 0.0,
            ring_neighbors: 3,
            samples: 24,
            seed: 0,
        }
    }
}

impl ToySpec {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, rig: RigSpec { seed, ..RigSpec::default() }, ..Self::default() }
    }
}

/// Rendered training and test images with clean and perturbed poses.
#[derive(Clone, Debug)]
pub struct ToyExperiment {
    pub spec: ToySpec,
    pub scene: AnalyticScene,
    pub rig: MultiScaleRig,
    pub test_rig: MultiScaleRig,
    /// `[camera][scale index]`
    pub train_images: Vec<Vec<Image>>,
    pub test_images: Vec<Vec<Image>>,
    pub noisy_poses: Vec<CameraPose>,
    pub graph: ViewGraph,
}

/// Graph over cameras on a ring: edge `i -> (i + d) mod n` for `d = 1..=k`,
/// measured exactly from the given world-to-camera rotations.
pub fn ring_view_graph(rotations: &[UnitQuaternion], k: usize) -> Result<ViewGraph> {
    let n = rotations.len();
    if n < 2 || k == 0 {
        return Err(Error::InvalidParameter(format!("ring graph needs n >= 2 and k >= 1, got n={n} k={k}")));
    }
    let vertices = rotations
        .iter()
        .enumerate()
        .map(|(id, q)| Vertex { id, ground_truth: Some(*q), estimate: UnitQuaternion::identity() })
        .collect();
    let mut seen = std::collections::BTreeSet::new();
    let mut edges = Vec::new();
    for i in 0..n {
        for d in 1..=k.min(n - 1) {
            let j = (i + d) % n;
            if seen.insert((i.min(j), i.max(j))) {
                edges.push(Edge { i, j, measured: rotations[j] * rotations[i].inverse(), outlier: None });
            }
        }
    }
    ViewGraph::new(vertices, edges)
}

fn render_all(scene: &AnalyticScene, rig: &MultiScaleRig) -> Vec<Vec<Image>> {
    (0..rig.poses.len()).map(|c| rig.scales.iter().map(|&s| analytic_render(scene, &rig.pose_at(c, s))).collect()).collect()
}

/// Toy scene, training rig, interleaved test rig, perturbed poses and a
/// noisy ring view graph, all from `spec.seed`.
pub fn build_toy(spec: &ToySpec) -> Result<ToyExperiment> {
    let scene = AnalyticScene::toy();
    let rig = build_rig(&spec.rig)?;
    let test_rig = build_rig(&RigSpec { n_cams: spec.test_cams.max(2), seed: rng::derive_seed(spec.rig.seed, 1), ..spec.rig.clone() })?;
    let noisy_poses = perturb_absolute_poses(&rig.poses, spec.pose_sigma, spec.seed)?;
    let gt: Vec<UnitQuaternion> = rig.poses.iter().map(|p| p.rotation.to_quaternion()).collect();
    let clean = ring_view_graph(&gt, spec.ring_neighbors)?;
    let graph = perturb_edges(&clean, &NoiseSpec::new(spec.edge_sigma, spec.edge_outliers, rng::derive_seed(spec.seed, 2))?)?;
    let train_images = render_all(&scene, &rig);
    let test_images = render_all(&scene, &test_rig);
    let mut test_rig = test_rig;
    test_rig.poses.truncate(spec.test_cams);
    let mut test_images = test_images;
    test_images.truncate(spec.test_cams);
    Ok(ToyExperiment { spec: spec.clone(), scene, rig, test_rig, train_images, test_images, noisy_poses, graph })
}

impl ToyExperiment {
    pub fn dataset(&self) -> JointDataset {
        let views = self
            .train_images
            .iter()
            .enumerate()
            .flat_map(|(c, imgs)| {
                imgs.iter().zip(&self.rig.scales).map(move |(img, &s)| TrainView {
                    camera: c,
                    intrinsics: self.rig.intrinsics(s),
                    image: img.clone(),
                })
            })
            .collect();
        JointDataset {
            views,
            noisy_poses: self.noisy_poses.clone(),
            ground_truth: Some(self.rig.poses.clone()),
            graph: self.graph.clone(),
            scene_radius: self.scene.bounding_radius(),
        }
    }

    /// Test poses (ground truth, every scale) with their reference images.
    pub fn test_views(&self) -> (Vec<CameraPose>, Vec<Image>) {
        let mut poses = Vec::new();
        let mut images = Vec::new();
        for (c, imgs) in self.test_images.iter().enumerate() {
            for (img, &s) in imgs.iter().zip(&self.test_rig.scales) {
                poses.push(self.test_rig.pose_at(c, s));
                images.push(img.clone());
            }
        }
        (poses, images)
    }
}

/// Result of one joint (or frozen-pose) run on a toy experiment.
#[derive(Clone, Debug)]
pub struct ToyOutcome {
    pub initial_rot_err: f64,
    pub final_rot_err: f64,
    /// Mean PSNR over all held-out views and scales.
    pub test_psnr: f64,
    pub test_scores: Vec<ViewScore>,
    pub metrics: Vec<EpochMetrics>,
    pub diverged: Option<usize>,
    pub state: JointState,
}

/// Trains on the toy dataset, then renders the held-out views from poses
/// aligned to the estimated frame.
pub fn run_toy(toy: &ToyExperiment, cfg: &TrainConfig, refiner: Option<RefinerParams>) -> Result<ToyOutcome> {
    let ds = toy.dataset();
    let gt_rot: Vec<_> = toy.rig.poses.iter().map(|p| p.rotation).collect();
    let noisy_rot: Vec<_> = toy.noisy_poses.iter().map(|p| p.rotation).collect();
    let initial_rot_err = pose_error_report(&noisy_rot, &gt_rot)?.mean;
    let run = train_joint(&ds, cfg, refiner)?;
    let est = run.state.poses(&ds.graph, &toy.noisy_poses)?;
    let est_rot: Vec<_> = est.iter().map(|p| p.rotation).collect();
    let final_rot_err = pose_error_report(&est_rot, &gt_rot)?.mean;
    let (test_poses, refs) = toy.test_views();
    let aligned = align_test_poses(&est, &toy.rig.poses, &test_poses)?;
    let (_, test_scores) = evaluate_views(&run.state.field, &aligned, &refs, ds.scene_radius, cfg.samples)?;
    let test_psnr = test_scores.iter().map(|s| s.psnr).sum::<f64>() / test_scores.len().max(1) as f64;
    Ok(ToyOutcome {
        initial_rot_err,
        final_rot_err,
        test_psnr,
        test_scores,
        metrics: run.metrics,
        diverged: run.diverged,
        state: run.state,
    })
}

/// A family of noisy synthetic view graphs, one per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSetSpec {
    pub count: usize,
    pub first_seed: u64,
    pub vertices: usize,
    pub edge_probability: f64,
    pub sigma: f64,
    pub outliers: f64,
}

impl GraphSetSpec {
    /// Distribution the bundled refiner was trained on.
    pub fn refiner_training() -> Self {
        Self { count: 200, first_seed: 1000, vertices: 20, edge_probability: 0.3, sigma: 5f64.to_radians(), outliers: 0.1 }
    }

    /// Held-out graphs from the same distribution.
    pub fn refiner_held_out() -> Self {
        Self { count: 20, first_seed: 5000, ..Self::refiner_training() }
    }
}

/// Graph `k` uses topology seed `first_seed + k` and a derived noise seed.
pub fn graph_set(spec: &GraphSetSpec) -> Result<Vec<ViewGraph>> {
    (0..spec.count as u64)
        .into_par_iter()
        .map(|k| {
            let seed = spec.first_seed + k;
            let g = generate_synthetic_graph(spec.vertices, spec.edge_probability, seed)?;
            perturb_edges(&g, &NoiseSpec::new(spec.sigma, spec.outliers, rng::derive_seed(seed, 77))?)
        })
        .collect()
}

//! Joint optimization of the radiance field and the rotation refiner.
//!
//! The objective is `λ L_mra + (1 - λ) L_rgb`. Camera rotations are the
//! refiner output on the view graph, mapped into the world frame by a fixed
//! anchor rotation; translations are free per-camera parameters with camera 0
//! held fixed. Each step renders a random ray batch on per-chunk tapes and
//! chains the pose gradients back through the refiner on a separate tape.

use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::field::{render_image, stratified_intervals, FieldConfig, RadianceField, RaySamplePlan, RenderSettings, TapeRenderer};
use crate::image::{self, Image};
use crate::ipe::{self, EncodingConfig};
use crate::motion::{conj, mra_loss_var, quat_const, refiner_forward_from, refiner_forward_var, MraTargets, RefinerParams};
use crate::rng::{self, domain};
use crate::so3::{CameraPose, Intrinsics, RotationMatrix, UnitQuaternion};
use crate::viewgraph::{gauge_aligned_errors, spanning_tree_init, ViewGraph};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LambdaMode {
    /// Warmup at 1, then exponential decay to the floor.
    Annealed,
    /// Constant weight for every epoch.
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda0: f64,
    pub decay_k: f64,
    pub warmup_epochs: usize,
    pub lambda_floor: f64,
    pub lambda_mode: LambdaMode,
    pub beta: f64,
    pub anneal_b: f64,
    pub octaves: usize,
    pub dir_octaves: usize,
    pub hidden: usize,
    pub lr_field: f64,
    pub lr_refiner: f64,
    pub lr_translation: f64,
    pub epochs: usize,
    /// Optimizer steps per epoch.
    pub steps_per_epoch: usize,
    pub rays_per_step: usize,
    /// Depth intervals per ray.
    pub samples: usize,
    /// Rays per tape; the unit of parallel work.
    pub chunk: usize,
    /// Keep the input poses and fit the field with the photometric loss only.
    pub freeze_poses: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::with_epochs(40)
    }
}

impl TrainConfig {
    /// Defaults with warmup at 20% of the epochs and a decay halving `λ`
    /// every 10% of the epochs.
    pub fn with_epochs(epochs: usize) -> Self {
        let tenth = (epochs as f64 * 0.1).max(1.0);
        Self {
            lambda0: 1.0,
            decay_k: std::f64::consts::LN_2 / tenth,
            warmup_epochs: (epochs as f64 * 0.2).round() as usize,
            lambda_floor: 0.5,
            lambda_mode: LambdaMode::Annealed,
            beta: 1.0,
            anneal_b: 1.0,
            octaves: 5,
            dir_octaves: 2,
            hidden: 64,
            lr_field: 5e-3,
            lr_refiner: 1e-4,
            lr_translation: 2e-3,
            epochs,
            steps_per_epoch: 10,
            rays_per_step: 128,
            samples: 24,
            chunk: 32,
            freeze_poses: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.lambda_floor > 0.0 && self.lambda_floor < 1.0) {
            return bad(format!("lambda_floor must be in (0, 1), got {}", self.lambda_floor));
        }
        if let LambdaMode::Fixed(l) = self.lambda_mode {
            if !(0.0..=1.0).contains(&l) {
                return bad(format!("fixed lambda must be in [0, 1], got {l}"));
            }
        }
        let rates = [self.decay_k, self.lr_field, self.lr_refiner, self.lr_translation, self.anneal_b, self.lambda0];
        if rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) || self.beta < 0.0 {
            return bad("rates must be positive and finite".into());
        }
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.rays_per_step == 0 || self.samples == 0 || self.chunk == 0 {
            return bad("epochs, steps, rays, samples and chunk must be positive".into());
        }
        if self.octaves == 0 || self.hidden == 0 {
            return bad("octaves and hidden width must be positive".into());
        }
        Ok(())
    }

    pub fn field_config(&self) -> FieldConfig {
        FieldConfig { hidden: self.hidden, octaves: self.octaves, dir_octaves: self.dir_octaves }
    }

    pub fn encoding(&self, anneal_t: f64) -> EncodingConfig {
        EncodingConfig { octaves: self.octaves, anneal_t, anneal_b: self.anneal_b }
    }
}

/// `λ` for an epoch: 1 during warmup, then `max(λ0 e^{-k (epoch - warmup)}, floor)`.
pub fn lambda_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    match cfg.lambda_mode {
        LambdaMode::Fixed(l) => l,
        LambdaMode::Annealed if epoch < cfg.warmup_epochs => 1.0,
        LambdaMode::Annealed => {
            let since = (epoch - cfg.warmup_epochs) as f64;
            (cfg.lambda0 * (-cfg.decay_k * since).exp()).max(cfg.lambda_floor)
        }
    }
}

/// Encoding anneal progress `t`: 0 through warmup, then linear up to
/// `octaves` at the final epoch.
pub fn anneal_progress(epoch: usize, cfg: &TrainConfig) -> f64 {
    let l = cfg.octaves as f64;
    if epoch < cfg.warmup_epochs {
        return 0.0;
    }
    let span = cfg.epochs.saturating_sub(1).saturating_sub(cfg.warmup_epochs);
    if span == 0 {
        return l;
    }
    (l * (epoch - cfg.warmup_epochs) as f64 / span as f64).min(l)
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, len: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// One training image.
#[derive(Clone, Debug)]
pub struct TrainView {
    pub camera: usize,
    pub intrinsics: Intrinsics,
    pub image: Image,
}

/// Inputs of a joint run. Poses are world-to-camera; `noisy_poses` carry the
/// perturbed rotations and the input translations.
#[derive(Clone, Debug)]
pub struct JointDataset {
    pub views: Vec<TrainView>,
    pub noisy_poses: Vec<CameraPose>,
    pub ground_truth: Option<Vec<CameraPose>>,
    pub graph: ViewGraph,
    /// Radius of a ball about the origin containing the scene.
    pub scene_radius: f64,
}

impl JointDataset {
    pub fn validate(&self) -> Result<()> {
        let n = self.noisy_poses.len();
        if self.graph.vertex_count() != n {
            return Err(Error::InvalidParameter(format!("{} graph vertices for {n} cameras", self.graph.vertex_count())));
        }
        if let Some(gt) = &self.ground_truth {
            if gt.len() != n {
                return Err(Error::InvalidParameter(format!("{} ground-truth poses for {n} cameras", gt.len())));
            }
        }
        for v in &self.views {
            if v.camera >= n || v.image.dims() != (v.intrinsics.width, v.intrinsics.height) {
                return Err(Error::InvalidParameter(format!("view of camera {} does not match its intrinsics", v.camera)));
            }
        }
        if self.views.is_empty() || !(self.scene_radius > 0.0) {
            return Err(Error::InvalidParameter("dataset needs views and a positive scene radius".into()));
        }
        Ok(())
    }

    fn pixel_count(&self) -> usize {
        self.views.iter().map(|v| v.intrinsics.width * v.intrinsics.height).sum()
    }
}

/// A training ray with its fixed depth partition and target color.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySample {
    pub camera: usize,
    /// Unit direction in camera coordinates.
    pub direction: Vector3<f64>,
    pub radius: f64,
    pub plan: RaySamplePlan,
    pub target: [f64; 3],
}

/// Uniform draw (with replacement) of training pixels across all views and
/// scales. Depth ranges come from the given camera centers.
pub fn sample_batch(ds: &JointDataset, centers: &[Vector3<f64>], cfg: &TrainConfig, step: u64) -> Result<Vec<RaySample>> {
    let total = ds.pixel_count();
    let mut g = rng::stream(cfg.seed, domain::RAY_BATCH, step);
    let jitter_seed = rng::derive_seed(cfg.seed, step);
    (0..cfg.rays_per_step)
        .map(|k| {
            let mut idx = g.random_range(0..total);
            let view = ds
                .views
                .iter()
                .find(|v| {
                    let n = v.intrinsics.width * v.intrinsics.height;
                    if idx < n {
                        true
                    } else {
                        idx -= n;
                        false
                    }
                })
                .expect("index within pixel count");
            let kk = &view.intrinsics;
            let (x, y) = (idx % kk.width, idx / kk.width);
            let direction = Vector3::new((x as f64 + 0.5 - kk.cx) / kk.fx, (y as f64 + 0.5 - kk.cy) / kk.fy, 1.0).normalize();
            let dist = centers[view.camera].norm();
            let plan = stratified_intervals(
                (dist - ds.scene_radius).max(1e-3),
                dist + ds.scene_radius,
                cfg.samples,
                Some((jitter_seed, k as u64)),
            )?;
            Ok(RaySample {
                camera: view.camera,
                direction,
                radius: (1.0 / (kk.fx * kk.fy)).sqrt() * ipe::PIXEL_RADIUS_FACTOR,
                plan,
                target: view.image.pixel(x, y),
            })
        })
        .collect()
}

/// How camera rotations are produced.
#[derive(Clone, Debug, PartialEq)]
pub enum PoseModel {
    /// `R_j = M(refiner_j) G` with refiner output in the graph gauge.
    Refined { refiner: RefinerParams, init: Vec<UnitQuaternion>, anchor: UnitQuaternion, targets: MraTargets },
    /// Rotations held at the given values.
    Fixed(Vec<UnitQuaternion>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointState {
    pub field: RadianceField,
    pub poses: PoseModel,
    pub translations: Vec<Vector3<f64>>,
    pub epoch: usize,
    /// Mean combined loss of each finished epoch.
    pub loss_history: Vec<f64>,
}

impl JointState {
    /// Field from `cfg.seed`; refined poses unless `cfg.freeze_poses`. The
    /// anchor is the chordal mean of `M(q_j)ᵀ R̃_j` over the initial refiner
    /// output `q` and the noisy rotations `R̃`.
    pub fn new(ds: &JointDataset, cfg: &TrainConfig, refiner: Option<RefinerParams>) -> Result<Self> {
        let field = RadianceField::random(cfg.field_config(), rng::derive_seed(cfg.seed, 0xF1E1D));
        let translations = ds.noisy_poses.iter().map(|p| p.translation).collect();
        let poses = if cfg.freeze_poses {
            PoseModel::Fixed(ds.noisy_poses.iter().map(|p| p.rotation.to_quaternion()).collect())
        } else {
            let refiner =
                refiner.ok_or_else(|| Error::InvalidParameter("joint optimization needs refiner parameters".into()))?;
            let init = spanning_tree_init(&ds.graph)?;
            let targets = MraTargets::from_measurements(&ds.graph, &init);
            let local = refiner_forward_from(&ds.graph, &init, &refiner)?;
            let offsets: Vec<RotationMatrix> =
                local.iter().zip(&ds.noisy_poses).map(|(q, p)| q.to_matrix().transpose().compose(&p.rotation)).collect();
            let anchor = RotationMatrix::chordal_mean(&offsets).to_quaternion();
            PoseModel::Refined { refiner, init, anchor, targets }
        };
        Ok(Self { field, poses, translations, epoch: 0, loss_history: Vec::new() })
    }

    /// Current world-to-camera rotations.
    pub fn rotations(&self, graph: &ViewGraph) -> Result<Vec<UnitQuaternion>> {
        match &self.poses {
            PoseModel::Fixed(q) => Ok(q.clone()),
            PoseModel::Refined { refiner, init, anchor, .. } => {
                Ok(refiner_forward_from(graph, init, refiner)?.into_iter().map(|q| q * *anchor).collect())
            }
        }
    }

    /// Current poses with scale-1 intrinsics taken from `reference`.
    pub fn poses(&self, graph: &ViewGraph, reference: &[CameraPose]) -> Result<Vec<CameraPose>> {
        Ok(self
            .rotations(graph)?
            .iter()
            .zip(&self.translations)
            .zip(reference)
            .map(|((q, t), r)| CameraPose::new(q.to_matrix(), *t, r.intrinsics))
            .collect())
    }
}

/// Loss terms of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    /// Sum of squared RGB errors over the batch.
    pub rgb: f64,
    pub mra: f64,
}

/// Gradient of the combined loss, flattened per parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct JointGrad {
    pub field: Vec<f64>,
    /// Empty for fixed poses.
    pub refiner: Vec<f64>,
    pub translations: Vec<[f64; 3]>,
}

struct ChunkOut {
    loss: f64,
    field: Vec<f64>,
    quats: Vec<[f64; 4]>,
    translations: Vec<[f64; 3]>,
}

fn pure<'t>(v: Var<'t>) -> Var<'t> {
    v.tape().concat(&[v.tape().const_scalar(0.0), v])
}

/// `M(q)ᵀ v` for a world-to-camera quaternion `q`.
fn to_world<'t>(q: Var<'t>, v: Var<'t>) -> Var<'t> {
    conj(q).quat_mul(pure(v)).quat_mul(q).slice(1, 3)
}

fn render_chunk(
    field: &RadianceField,
    renderer: &TapeRenderer,
    rays: &[RaySample],
    quats: &[[f64; 4]],
    translations: &[Vector3<f64>],
    grad_field: bool,
    grad_pose: bool,
) -> Result<ChunkOut> {
    let n = quats.len();
    let tape = Tape::new();
    let fv = field.record(&tape, grad_field);
    let mut cams: Vec<Option<(Var, Var, Var)>> = vec![None; n];
    let mut loss: Option<Var> = None;
    for ray in rays {
        let c = ray.camera;
        let (_, q, origin) = *cams[c].get_or_insert_with(|| {
            let t_vals = translations[c].as_slice();
            let (q, t) = if grad_pose {
                (tape.vector(&quats[c]), tape.vector(t_vals))
            } else {
                (tape.const_vector(&quats[c]), tape.const_vector(t_vals))
            };
            (t, q, to_world(q, t).mul_const(-1.0))
        });
        let dir = to_world(q, tape.const_vector(ray.direction.as_slice()));
        let (rgb, _) = renderer.render(&tape, &fv, origin, dir, ray.radius, &ray.plan);
        let err = rgb - tape.const_vector(&ray.target);
        let sq = err.dot(err);
        loss = Some(match loss {
            Some(acc) => acc + sq,
            None => sq,
        });
    }
    let loss = loss.unwrap_or_else(|| tape.const_scalar(0.0));
    tape.check()?;
    let mut out = ChunkOut { loss: loss.item(), field: Vec::new(), quats: vec![[0.0; 4]; n], translations: vec![[0.0; 3]; n] };
    if !(grad_field || grad_pose) {
        return Ok(out);
    }
    let grads = tape.backward(loss)?;
    if grad_field {
        out.field = vec![0.0; field.len()];
        let mut offset = 0;
        for v in &fv.vars {
            grads.accumulate(*v, &mut out.field[offset..offset + v.len()]);
            offset += v.len();
        }
    }
    if grad_pose {
        for (c, entry) in cams.iter().enumerate() {
            if let Some((t, q, _)) = entry {
                grads.accumulate(*q, &mut out.quats[c]);
                grads.accumulate(*t, &mut out.translations[c]);
            }
        }
    }
    Ok(out)
}

/// Gauge-frame and world-frame rotation variables on a pose tape.
fn pose_vars<'t>(tape: &'t Tape, state: &JointState, graph: &ViewGraph, params: &[Var<'t>]) -> Result<(Vec<Var<'t>>, Vec<Var<'t>>)> {
    match &state.poses {
        PoseModel::Fixed(q) => {
            let world: Vec<Var> = q.iter().map(|x| quat_const(tape, x)).collect();
            Ok((Vec::new(), world))
        }
        PoseModel::Refined { refiner, init, anchor, .. } => {
            let local = refiner_forward_var(tape, graph, init, refiner.rounds(), refiner.hidden(), params)?;
            let g = quat_const(tape, anchor);
            let world = local.iter().map(|q| q.quat_mul(g)).collect();
            Ok((local, world))
        }
    }
}

/// `λ L_mra + (1 - λ) L_rgb` on a ray batch under the current poses, with its
/// gradient when `with_grad`. At `λ = 1` the field gradient is exactly zero
/// and no ray gradients are taken.
pub fn combined_loss_grad(
    state: &JointState,
    graph: &ViewGraph,
    batch: &[RaySample],
    renderer: &TapeRenderer,
    cfg: &TrainConfig,
    lambda: f64,
    with_grad: bool,
) -> Result<(LossParts, Option<JointGrad>)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidParameter(format!("lambda must be in [0, 1], got {lambda}")));
    }
    let n = graph.vertex_count();
    let ptape = Tape::new();
    let params = match &state.poses {
        PoseModel::Refined { refiner, .. } => refiner.record(&ptape, with_grad),
        PoseModel::Fixed(_) => Vec::new(),
    };
    let (local, world) = pose_vars(&ptape, state, graph, &params)?;
    let quats: Vec<[f64; 4]> = world
        .iter()
        .map(|q| {
            let v = q.value();
            [v[0], v[1], v[2], v[3]]
        })
        .collect();
    let rgb_grad = with_grad && lambda < 1.0;
    let pose_grad = rgb_grad && !state.poses_fixed();
    let chunks: Vec<Result<ChunkOut>> = batch
        .par_chunks(cfg.chunk)
        .map(|rays| render_chunk(&state.field, renderer, rays, &quats, &state.translations, rgb_grad, pose_grad))
        .collect();
    let mut rgb = 0.0;
    let mut g_field = vec![0.0; state.field.len()];
    let mut g_quat = vec![[0.0; 4]; n];
    let mut g_trans = vec![[0.0; 3]; n];
    for chunk in chunks {
        let c = chunk?;
        rgb += c.loss;
        if rgb_grad {
            for (a, b) in g_field.iter_mut().zip(&c.field) {
                *a += b;
            }
        }
        if pose_grad {
            for j in 0..n {
                for k in 0..4 {
                    g_quat[j][k] += c.quats[j][k];
                }
                for k in 0..3 {
                    g_trans[j][k] += c.translations[j][k];
                }
            }
        }
    }
    let mra_var = match &state.poses {
        PoseModel::Refined { targets, .. } => Some(mra_loss_var(&ptape, &local, graph, targets, cfg.beta)),
        PoseModel::Fixed(_) => None,
    };
    let mra = mra_var.map(|v| v.item()).unwrap_or(0.0);
    let parts = LossParts { total: lambda * mra + (1.0 - lambda) * rgb, rgb, mra };
    if !with_grad {
        return Ok((parts, None));
    }
    let w = 1.0 - lambda;
    g_field.iter_mut().for_each(|g| *g *= w);
    for t in g_trans.iter_mut() {
        t.iter_mut().for_each(|g| *g *= w);
    }
    g_trans[0] = [0.0; 3];
    let mut g_refiner = Vec::new();
    if let Some(mra_var) = mra_var {
        let mut surrogate = mra_var.mul_const(lambda);
        if pose_grad {
            for (q, g) in world.iter().zip(&g_quat) {
                surrogate = surrogate + q.dot(ptape.const_vector(g)).mul_const(w);
            }
        }
        ptape.check()?;
        let grads = ptape.backward(surrogate)?;
        g_refiner = vec![0.0; params.iter().map(|p| p.len()).sum()];
        let mut offset = 0;
        for p in &params {
            grads.accumulate(*p, &mut g_refiner[offset..offset + p.len()]);
            offset += p.len();
        }
    }
    Ok((parts, Some(JointGrad { field: g_field, refiner: g_refiner, translations: g_trans })))
}

impl JointState {
    fn poses_fixed(&self) -> bool {
        matches!(self.poses, PoseModel::Fixed(_))
    }

    fn centers(&self, graph: &ViewGraph) -> Result<Vec<Vector3<f64>>> {
        Ok(self
            .rotations(graph)?
            .iter()
            .zip(&self.translations)
            .map(|(q, t)| -q.to_matrix().transpose().rotate(t))
            .collect())
    }
}

/// One row of the per-epoch metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lambda: f64,
    pub anneal_t: f64,
    /// Mean per-step photometric loss.
    pub l_rgb: f64,
    /// Mean per-step motion-averaging loss.
    pub l_mra: f64,
    pub mean_rot_err_rad: Option<f64>,
    /// PSNR of the epoch's training rays.
    pub psnr: f64,
}

#[derive(Clone, Debug)]
pub struct JointRun {
    pub state: JointState,
    pub metrics: Vec<EpochMetrics>,
    /// Epoch whose loss went non-finite; `state` is then the last good one.
    pub diverged: Option<usize>,
}

/// Warmup with `λ = 1` (poses only), then the annealed joint phase. With
/// `cfg.freeze_poses`, only the field is trained, on `L_rgb`.
pub fn train_joint(ds: &JointDataset, cfg: &TrainConfig, refiner: Option<RefinerParams>) -> Result<JointRun> {
    cfg.validate()?;
    ds.validate()?;
    let mut state = JointState::new(ds, cfg, refiner)?;
    let mut adam_field = Adam::new(cfg.lr_field, state.field.len());
    let mut adam_trans = Adam::new(cfg.lr_translation, 3 * state.translations.len());
    let mut adam_refiner = match &state.poses {
        PoseModel::Refined { refiner, .. } => Adam::new(cfg.lr_refiner, refiner.len()),
        PoseModel::Fixed(_) => Adam::new(cfg.lr_refiner, 0),
    };
    let gt_rot: Option<Vec<RotationMatrix>> = ds.ground_truth.as_ref().map(|g| g.iter().map(|p| p.rotation).collect());
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lambda = if cfg.freeze_poses { 0.0 } else { lambda_schedule(epoch, cfg) };
        let anneal_t = anneal_progress(epoch, cfg);
        let renderer = TapeRenderer::new(&cfg.encoding(anneal_t), &cfg.field_config(), cfg.samples);
        let last_good = state.clone();
        let (mut sum_total, mut sum_rgb, mut sum_mra) = (0.0, 0.0, 0.0);
        for s in 0..cfg.steps_per_epoch {
            let step = (epoch * cfg.steps_per_epoch + s) as u64;
            let centers = state.centers(&ds.graph)?;
            let batch = sample_batch(ds, &centers, cfg, step)?;
            let evaluated = combined_loss_grad(&state, &ds.graph, &batch, &renderer, cfg, lambda, true);
            let (parts, grad) = match evaluated {
                Ok((p, Some(g))) if p.total.is_finite() => (p, g),
                Ok(_) | Err(Error::NonFinite { .. }) => {
                    return Ok(JointRun { state: last_good, metrics, diverged: Some(epoch) });
                }
                Err(e) => return Err(e),
            };
            sum_total += parts.total;
            sum_rgb += parts.rgb;
            sum_mra += parts.mra;
            if lambda < 1.0 {
                adam_field.step(state.field.values_mut(), &grad.field);
                if !cfg.freeze_poses {
                    let mut flat: Vec<f64> = state.translations.iter().flat_map(|t| [t.x, t.y, t.z]).collect();
                    let g: Vec<f64> = grad.translations.iter().flatten().copied().collect();
                    adam_trans.step(&mut flat, &g);
                    for (j, t) in state.translations.iter_mut().enumerate().skip(1) {
                        *t = Vector3::new(flat[3 * j], flat[3 * j + 1], flat[3 * j + 2]);
                    }
                }
            }
            if let PoseModel::Refined { refiner, .. } = &mut state.poses {
                adam_refiner.step(refiner.values_mut(), &grad.refiner);
            }
        }
        let steps = cfg.steps_per_epoch as f64;
        let mean_rot_err_rad = match &gt_rot {
            Some(gt) => {
                let est: Vec<RotationMatrix> = state.rotations(&ds.graph)?.iter().map(|q| q.to_matrix()).collect();
                Some(pose_error_report(&est, gt)?.mean)
            }
            None => None,
        };
        let psnr = image::psnr_from_mse(sum_rgb / (3.0 * (cfg.rays_per_step as f64) * steps));
        state.epoch = epoch + 1;
        state.loss_history.push(sum_total / steps);
        metrics.push(EpochMetrics {
            epoch,
            lambda,
            anneal_t,
            l_rgb: sum_rgb / steps,
            l_mra: sum_mra / steps,
            mean_rot_err_rad,
            psnr,
        });
    }
    Ok(JointRun { state, metrics, diverged: None })
}

/// Geodesic rotation errors after aligning camera 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseErrorReport {
    pub per_camera: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
}

pub fn pose_error_report(estimates: &[RotationMatrix], truth: &[RotationMatrix]) -> Result<PoseErrorReport> {
    if estimates.len() != truth.len() || estimates.is_empty() {
        return Err(Error::InvalidParameter(format!("{} estimates for {} ground-truth rotations", estimates.len(), truth.len())));
    }
    let est: Vec<UnitQuaternion> = estimates.iter().map(|r| r.to_quaternion()).collect();
    let gt: Vec<UnitQuaternion> = truth.iter().map(|r| r.to_quaternion()).collect();
    let per_camera = gauge_aligned_errors(&est, &gt);
    let mut sorted = per_camera.clone();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let median = if m % 2 == 1 { sorted[m / 2] } else { 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]) };
    Ok(PoseErrorReport {
        mean: per_camera.iter().sum::<f64>() / m as f64,
        median,
        max: sorted[m - 1],
        per_camera,
    })
}

/// Maps ground-truth test poses into the frame of the estimated training
/// poses. The frame change `x -> A x + b` takes `A` as the chordal mean of
/// `R_estᵀ R_gt` and `b` as the mean of `C_est - A C_gt`.
pub fn align_test_poses(estimated: &[CameraPose], truth: &[CameraPose], test: &[CameraPose]) -> Result<Vec<CameraPose>> {
    if estimated.len() != truth.len() || estimated.is_empty() {
        return Err(Error::InvalidParameter("alignment needs matching, non-empty pose sets".into()));
    }
    let offsets: Vec<RotationMatrix> =
        estimated.iter().zip(truth).map(|(e, g)| e.rotation.transpose().compose(&g.rotation)).collect();
    let a = RotationMatrix::chordal_mean(&offsets);
    let b = estimated.iter().zip(truth).map(|(e, g)| e.center() - a.rotate(&g.center())).sum::<Vector3<f64>>()
        / estimated.len() as f64;
    Ok(test
        .iter()
        .map(|p| {
            let r = p.rotation.compose(&a.transpose());
            let c = a.rotate(&p.center()) + b;
            CameraPose::new(r, -r.rotate(&c), p.intrinsics)
        })
        .collect())
}

/// PSNR and SSIM of each rendered view against its reference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub psnr: f64,
    pub ssim: f64,
}

/// Renders every pose with the fully annealed encoding and scores it.
pub fn evaluate_views(
    field: &RadianceField,
    poses: &[CameraPose],
    references: &[Image],
    scene_radius: f64,
    samples: usize,
) -> Result<(Vec<Image>, Vec<ViewScore>)> {
    let cfg = field.config();
    let enc = EncodingConfig::full(cfg.octaves);
    let mut renders = Vec::with_capacity(poses.len());
    let mut scores = Vec::with_capacity(poses.len());
    for (p, r) in poses.iter().zip(references) {
        let img = render_image(field, p, &RenderSettings::for_pose(p, scene_radius, samples), &enc)?;
        scores.push(ViewScore { psnr: image::psnr(&img, r)?, ssim: image::ssim(&img, r)? });
        renders.push(img);
    }
    Ok((renders, scores))
}

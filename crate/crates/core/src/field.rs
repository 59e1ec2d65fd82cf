//! Tiny MLP radiance field and emission-absorption volume rendering.
//!
//! Each ray is split into contiguous depth intervals. Every interval is a
//! conical frustum whose Gaussian is encoded and queried; compositing uses
//! `alpha_i = 1 - exp(-sigma_i Δ_i)`, `T_i = exp(-sum_{j<i} sigma_j Δ_j)` and
//! `C = sum_i T_i alpha_i c_i` over a black background.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::autodiff::{sigmoid, softplus, Tape, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::{self, BlobMeta};
use crate::ipe::{self, frustum_moments, EncodingConfig, EncodingPlan, GaussianRegion};
use crate::rng::{self, domain};
use crate::so3::CameraPose;

/// One depth interval of a ray, the unit a field is queried on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub radius: f64,
    pub t0: f64,
    pub t1: f64,
}

impl Segment {
    pub fn gaussian(&self) -> GaussianRegion {
        let m = frustum_moments(self.t0, self.t1, self.radius);
        let d = self.direction;
        let ddt = d * d.transpose();
        GaussianRegion {
            mean: self.origin + d * m.t_mean,
            covariance: ddt * m.t_var + (nalgebra::Matrix3::identity() - ddt) * m.r_var,
        }
    }

    pub fn midpoint(&self) -> Vector3<f64> {
        self.origin + self.direction * (0.5 * (self.t0 + self.t1))
    }
}

/// Anything that yields density and color for a ray segment.
pub trait RadianceQuery: Sync {
    fn query(&self, seg: &Segment, enc: &EncodingConfig) -> (f64, [f64; 3]);
}

/// Contiguous depth breakpoints `t_0 < t_1 < ... < t_N` covering `[near, far]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamplePlan {
    pub breakpoints: Vec<f64>,
}

impl RaySamplePlan {
    pub fn len(&self) -> usize {
        self.breakpoints.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.breakpoints.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// Uniform partition; with `jitter = Some((seed, ray))` every interior
/// breakpoint moves uniformly within half a bin of its uniform position.
pub fn stratified_intervals(near: f64, far: f64, n: usize, jitter: Option<(u64, u64)>) -> Result<RaySamplePlan> {
    if !(near > 0.0 && far > near && far.is_finite()) {
        return Err(Error::InvalidParameter(format!("bad ray range [{near}, {far}]")));
    }
    if n == 0 {
        return Err(Error::InvalidParameter("need at least one interval".into()));
    }
    let step = (far - near) / n as f64;
    let mut b: Vec<f64> = (0..=n).map(|i| near + step * i as f64).collect();
    b[n] = far;
    if let Some((seed, ray)) = jitter {
        let mut g = rng::stream(seed, domain::RAY_JITTER, ray);
        for (i, v) in b.iter_mut().enumerate().take(n).skip(1) {
            *v = near + step * (i as f64 + g.random::<f64>() - 0.5);
        }
    }
    Ok(RaySamplePlan { breakpoints: b })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RayRender {
    pub rgb: [f64; 3],
    pub weights: Vec<f64>,
    pub transmittance: Vec<f64>,
}

/// Composites per-interval densities and colors.
pub fn composite(sigmas: &[f64], colors: &[[f64; 3]], deltas: &[f64]) -> RayRender {
    let mut rgb = [0.0; 3];
    let mut weights = Vec::with_capacity(sigmas.len());
    let mut transmittance = Vec::with_capacity(sigmas.len());
    let mut optical = 0.0f64;
    for ((s, c), d) in sigmas.iter().zip(colors).zip(deltas) {
        let t = (-optical).exp();
        let od = s * d;
        let w = t * (1.0 - (-od).exp());
        for k in 0..3 {
            rgb[k] += w * c[k];
        }
        weights.push(w);
        transmittance.push(t);
        optical += od;
    }
    RayRender { rgb, weights, transmittance }
}

pub fn render_ray<F: RadianceQuery + ?Sized>(
    field: &F,
    origin: &Vector3<f64>,
    direction: &Vector3<f64>,
    radius: f64,
    plan: &RaySamplePlan,
    enc: &EncodingConfig,
) -> RayRender {
    let mut sigmas = Vec::with_capacity(plan.len());
    let mut colors = Vec::with_capacity(plan.len());
    for w in plan.breakpoints.windows(2) {
        let seg = Segment { origin: *origin, direction: *direction, radius, t0: w[0], t1: w[1] };
        let (s, c) = field.query(&seg, enc);
        sigmas.push(s);
        colors.push(c);
    }
    composite(&sigmas, &colors, &plan.deltas())
}

/// Per-image rendering settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    pub near: f64,
    pub far: f64,
    pub samples: usize,
}

impl RenderSettings {
    /// `near, far = |C| -/+ scene_radius`, with `near` kept positive.
    pub fn for_pose(pose: &CameraPose, scene_radius: f64, samples: usize) -> Self {
        let dist = pose.center().norm();
        Self { near: (dist - scene_radius).max(1e-3), far: dist + scene_radius, samples }
    }
}

/// Renders every pixel center of `pose`'s image (pixel-parallel).
pub fn render_image<F: RadianceQuery + ?Sized>(
    field: &F,
    pose: &CameraPose,
    settings: &RenderSettings,
    enc: &EncodingConfig,
) -> Result<Image> {
    let plan = stratified_intervals(settings.near, settings.far, settings.samples, None)?;
    let (w, h) = (pose.intrinsics.width, pose.intrinsics.height);
    let origin = pose.center();
    let radius = ipe::pixel_radius(pose);
    let pixels: Vec<[f64; 3]> = (0..w * h)
        .into_par_iter()
        .map(|k| {
            let (x, y) = (k % w, k / w);
            let d = ipe::pixel_direction(pose, x as f64 + 0.5, y as f64 + 0.5);
            render_ray(field, &origin, &d, radius, &plan, enc).rgb
        })
        .collect();
    Image::from_data(w, h, pixels.into_iter().flatten().collect())
}

/// Architecture constants of the MLP.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldConfig {
    pub hidden: usize,
    pub octaves: usize,
    pub dir_octaves: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self { hidden: 64, octaves: 5, dir_octaves: 2 }
    }
}

const FIELD_TENSORS: usize = 8;

/// Two softplus hidden layers on the position encoding; density from the
/// second hidden layer, color from the second hidden layer and direction
/// encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct RadianceField {
    config: FieldConfig,
    values: Vec<f64>,
}

impl RadianceField {
    fn layout(c: &FieldConfig) -> Vec<(String, usize, usize)> {
        let (h, p, d) = (c.hidden, 6 * c.octaves, 6 * c.dir_octaves);
        vec![
            ("w1".into(), h, p),
            ("b1".into(), h, 1),
            ("w2".into(), h, h),
            ("b2".into(), h, 1),
            ("w_sigma".into(), 1, h),
            ("b_sigma".into(), 1, 1),
            ("w_rgb".into(), 3, h + d),
            ("b_rgb".into(), 3, 1),
        ]
    }

    pub fn zeros(config: FieldConfig) -> Self {
        let len = Self::layout(&config).iter().map(|(_, r, c)| r * c).sum();
        Self { config, values: vec![0.0; len] }
    }

    /// Gaussian weights scaled by `1/sqrt(fan_in)`, zero biases except a
    /// negative density bias so the untrained field is mostly empty.
    pub fn random(config: FieldConfig, seed: u64) -> Self {
        let mut f = Self::zeros(config);
        let mut offset = 0;
        for (k, (name, r, c)) in Self::layout(&config).into_iter().enumerate() {
            let n = r * c;
            if name.starts_with('w') {
                let mut g = rng::stream(seed, domain::PARAM_INIT, 100 + k as u64);
                let dist = Normal::new(0.0, 1.0 / (c as f64).sqrt()).expect("positive std");
                for v in &mut f.values[offset..offset + n] {
                    *v = dist.sample(&mut g);
                }
            } else if name == "b_sigma" {
                f.values[offset] = -1.0;
            }
            offset += n;
        }
        f
    }

    pub fn config(&self) -> FieldConfig {
        self.config
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn record<'t>(&self, tape: &'t Tape, trainable: bool) -> FieldVars<'t> {
        let mut offset = 0;
        let vars = Self::layout(&self.config)
            .into_iter()
            .map(|(_, r, c)| {
                let vals = &self.values[offset..offset + r * c];
                offset += r * c;
                if trainable {
                    tape.leaf(r, c, vals)
                } else {
                    tape.constant(r, c, vals)
                }
            })
            .collect();
        FieldVars { vars }
    }

    fn tensor(&self, index: usize) -> &[f64] {
        let layout = Self::layout(&self.config);
        let start: usize = layout[..index].iter().map(|(_, r, c)| r * c).sum();
        let (_, r, c) = &layout[index];
        &self.values[start..start + r * c]
    }

    /// Density and color from encoded position and direction features.
    pub fn evaluate(&self, pos_feat: &[f64], dir_feat: &[f64]) -> (f64, [f64; 3]) {
        let h = self.config.hidden;
        let layer = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
            let n = x.len();
            (0..b.len()).map(|i| w[i * n..(i + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b[i]).collect()
        };
        let h1: Vec<f64> = layer(self.tensor(0), self.tensor(1), pos_feat).into_iter().map(softplus).collect();
        let h2: Vec<f64> = layer(self.tensor(2), self.tensor(3), &h1).into_iter().map(softplus).collect();
        let sigma = softplus(layer(self.tensor(4), self.tensor(5), &h2)[0]);
        let mut cin = h2;
        cin.extend_from_slice(dir_feat);
        debug_assert_eq!(cin.len(), h + 6 * self.config.dir_octaves);
        let rgb = layer(self.tensor(6), self.tensor(7), &cin);
        (sigma, [sigmoid(rgb[0]), sigmoid(rgb[1]), sigmoid(rgb[2])])
    }

    pub fn meta(&self, config_hash: &str) -> BlobMeta {
        let c = self.config;
        BlobMeta {
            kind: format!("field hidden={} octaves={} dir_octaves={}", c.hidden, c.octaves, c.dir_octaves),
            shapes: Self::layout(&c),
            config_hash: config_hash.to_string(),
        }
    }

    pub fn save(&self, path: &std::path::Path, config_hash: &str) -> Result<()> {
        io::write_blob(path, &self.values, &self.meta(config_hash))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (values, meta) = io::read_blob(path)?;
        let (hidden, p) = (meta.shapes.first().map(|s| s.1).unwrap_or(0), meta.shapes.first().map(|s| s.2).unwrap_or(0));
        let d = meta.shapes.get(6).map(|s| s.2.saturating_sub(hidden)).unwrap_or(0);
        let config = FieldConfig { hidden, octaves: p / 6, dir_octaves: d / 6 };
        if meta.shapes != Self::layout(&config) || p % 6 != 0 || d % 6 != 0 {
            return Err(Error::InvalidParameter(format!("unrecognized field layout: {}", meta.kind)));
        }
        Ok(Self { config, values })
    }
}

/// Direction encoding config sharing the anneal progress of `enc`.
pub fn direction_encoding(enc: &EncodingConfig, dir_octaves: usize) -> EncodingConfig {
    EncodingConfig { octaves: dir_octaves, ..*enc }
}

impl RadianceQuery for RadianceField {
    fn query(&self, seg: &Segment, enc: &EncodingConfig) -> (f64, [f64; 3]) {
        let enc = EncodingConfig { octaves: self.config.octaves, ..*enc };
        let pos = ipe::ipe_encode_annealed(&seg.gaussian(), &enc);
        let dir_cfg = direction_encoding(&enc, self.config.dir_octaves);
        let dir = ipe::ipe_encode_annealed(
            &GaussianRegion { mean: seg.direction, covariance: nalgebra::Matrix3::zeros() },
            &dir_cfg,
        );
        self.evaluate(&pos, &dir)
    }
}

/// Field tensors recorded on a tape, in layout order.
pub struct FieldVars<'t> {
    pub vars: Vec<Var<'t>>,
}

impl<'t> FieldVars<'t> {
    pub fn evaluate(&self, pos_feat: Var<'t>, dir_feat: Var<'t>) -> (Var<'t>, Var<'t>) {
        let v = &self.vars;
        debug_assert_eq!(v.len(), FIELD_TENSORS);
        let tape = pos_feat.tape();
        let h1 = (v[0].matvec(pos_feat) + v[1]).softplus();
        let h2 = (v[2].matvec(h1) + v[3]).softplus();
        let sigma = (v[4].matvec(h2) + v[5]).softplus();
        let rgb = (v[6].matvec(tape.concat(&[h2, dir_feat])) + v[7]).sigmoid();
        (sigma, rgb)
    }
}

/// Constants shared by every ray rendered on a tape with a fixed plan length.
pub struct TapeRenderer {
    pub pos: EncodingPlan,
    pub dir: EncodingPlan,
    n: usize,
    lower: Vec<f64>,
}

impl TapeRenderer {
    pub fn new(enc: &EncodingConfig, field: &FieldConfig, samples: usize) -> Self {
        let pos = EncodingPlan::new(&EncodingConfig { octaves: field.octaves, ..*enc });
        let dir = EncodingPlan::new(&direction_encoding(enc, field.dir_octaves));
        let mut lower = vec![0.0; samples * samples];
        for i in 0..samples {
            for j in 0..i {
                lower[i * samples + j] = 1.0;
            }
        }
        Self { pos, dir, n: samples, lower }
    }

    /// Differentiable render of one ray; returns `(rgb, weights)`.
    pub fn render<'t>(
        &self,
        tape: &'t Tape,
        field: &FieldVars<'t>,
        origin: Var<'t>,
        direction: Var<'t>,
        radius: f64,
        plan: &RaySamplePlan,
    ) -> (Var<'t>, Var<'t>) {
        let n = self.n;
        debug_assert_eq!(plan.len(), n);
        let dir_feat = self.dir.encode_point(tape, direction);
        let mut sigmas = Vec::with_capacity(n);
        let mut colors = Vec::with_capacity(n);
        for w in plan.breakpoints.windows(2) {
            let m = frustum_moments(w[0], w[1], radius);
            let feat = self.pos.encode_frustum(tape, origin, direction, &m);
            let (s, c) = field.evaluate(feat, dir_feat);
            sigmas.push(s);
            colors.push(c);
        }
        let sigma = tape.concat(&sigmas);
        let optical = sigma * tape.const_vector(&plan.deltas());
        let trans = tape.constant(n, n, &self.lower).matvec(optical).mul_const(-1.0).exp();
        let alpha = optical.mul_const(-1.0).exp().mul_const(-1.0).add_const(1.0);
        let weights = trans * alpha;
        let rgb = weights.vecmat(tape.concat(&colors).reshape(n, 3));
        (rgb, weights)
    }
}

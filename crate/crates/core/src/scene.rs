//! Analytic sphere scenes and multi-scale camera rigs.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{RadianceQuery, Segment};
use crate::image::Image;
use crate::ipe::{self, EncodingConfig};
use crate::rng::{self, domain};
use crate::so3::{CameraPose, Intrinsics, PoseRecord, RotationMatrix};

/// Constant-density, constant-color ball.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
    pub density: f64,
    pub color: [f64; 3],
}

impl Sphere {
    /// Ray parameters `(t_in, t_out)` of the chord, if the ray hits.
    pub fn chord(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let oc = origin - Vector3::from(self.center);
        let b = oc.dot(dir);
        let c = oc.norm_squared() - self.radius * self.radius;
        let disc = b * b - c;
        if disc <= 0.0 {
            return None;
        }
        let s = disc.sqrt();
        Some((-b - s, -b + s))
    }

    fn contains(&self, x: &Vector3<f64>) -> bool {
        (x - Vector3::from(self.center)).norm_squared() <= self.radius * self.radius
    }
}

/// Spheres on a black background. Overlaps add densities and mix colors by
/// density.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub spheres: Vec<Sphere>,
}

impl AnalyticScene {
    pub fn new(spheres: Vec<Sphere>) -> Result<Self> {
        let s = Self { spheres };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (k, s) in self.spheres.iter().enumerate() {
            let ok = s.radius > 0.0
                && s.density >= 0.0
                && s.density.is_finite()
                && s.color.iter().all(|c| (0.0..=1.0).contains(c))
                && s.center.iter().all(|c| c.is_finite());
            if !ok {
                return Err(Error::InvalidParameter(format!("sphere {k} is invalid: {s:?}")));
            }
        }
        Ok(())
    }

    /// Four colored spheres inside the unit ball.
    pub fn toy() -> Self {
        let sphere = |center, radius, color| Sphere { center, radius, density: 8.0, color };
        Self {
            spheres: vec![
                sphere([0.0, 0.0, 0.0], 0.45, [0.9, 0.3, 0.2]),
                sphere([0.55, 0.25, 0.1], 0.3, [0.2, 0.8, 0.3]),
                sphere([-0.35, 0.5, -0.2], 0.3, [0.25, 0.35, 0.95]),
                sphere([0.1, -0.55, 0.3], 0.28, [0.95, 0.85, 0.2]),
            ],
        }
    }

    /// Radius of a ball about the origin enclosing every sphere.
    pub fn bounding_radius(&self) -> f64 {
        self.spheres.iter().map(|s| Vector3::from(s.center).norm() + s.radius).fold(0.0, f64::max)
    }

    pub fn density_at(&self, x: &Vector3<f64>) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut acc = [0.0; 3];
        for s in self.spheres.iter().filter(|s| s.contains(x)) {
            sigma += s.density;
            for k in 0..3 {
                acc[k] += s.density * s.color[k];
            }
        }
        if sigma > 0.0 {
            (sigma, acc.map(|a| a / sigma))
        } else {
            (0.0, [0.0; 3])
        }
    }

    /// Exact emission-absorption integral along the whole ray (`t >= 0`).
    pub fn render_ray(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> [f64; 3] {
        let mut cuts = Vec::new();
        for s in &self.spheres {
            if let Some((a, b)) = s.chord(origin, dir) {
                cuts.push(a.max(0.0));
                cuts.push(b.max(0.0));
            }
        }
        cuts.sort_by(f64::total_cmp);
        let mut rgb = [0.0; 3];
        let mut optical = 0.0f64;
        for w in cuts.windows(2) {
            let len = w[1] - w[0];
            if len <= 0.0 {
                continue;
            }
            let mid = origin + dir * (0.5 * (w[0] + w[1]));
            let (sigma, color) = self.density_at(&mid);
            if sigma == 0.0 {
                continue;
            }
            let weight = (-optical).exp() * (1.0 - (-sigma * len).exp());
            for k in 0..3 {
                rgb[k] += weight * color[k];
            }
            optical += sigma * len;
        }
        rgb
    }
}

/// Point query at the interval midpoint; makes the scene usable with the
/// quadrature renderer.
impl RadianceQuery for AnalyticScene {
    fn query(&self, seg: &Segment, _: &EncodingConfig) -> (f64, [f64; 3]) {
        self.density_at(&seg.midpoint())
    }
}

/// Closed-form render of every pixel center.
pub fn analytic_render(scene: &AnalyticScene, pose: &CameraPose) -> Image {
    let (w, h) = (pose.intrinsics.width, pose.intrinsics.height);
    let origin = pose.center();
    let pixels: Vec<[f64; 3]> = (0..w * h)
        .into_par_iter()
        .map(|k| {
            let d = ipe::pixel_direction(pose, (k % w) as f64 + 0.5, (k / w) as f64 + 0.5);
            scene.render_ray(&origin, &d)
        })
        .collect();
    Image { width: w, height: h, data: pixels.into_iter().flatten().collect() }
}

/// World-to-camera rotation looking from `eye` at `target`, OpenCV axes
/// (x right, y down, z forward) with world `+z` up.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> Result<RotationMatrix> {
    let fwd = (target - eye).normalize();
    let up = Vector3::z();
    let right = fwd.cross(&up);
    if right.norm() < 1e-9 {
        return Err(Error::InvalidParameter("look-at direction is parallel to world up".into()));
    }
    let right = right.normalize();
    let down = fwd.cross(&right);
    RotationMatrix::new(Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigSpec {
    pub n_cams: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub scales: Vec<usize>,
    pub base_width: usize,
    pub base_height: usize,
    /// Horizontal field of view in radians.
    pub fov: f64,
    pub seed: u64,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self {
            n_cams: 12,
            radius_min: 3.0,
            radius_max: 4.5,
            scales: vec![1, 2],
            base_width: 32,
            base_height: 32,
            fov: 40f64.to_radians(),
            seed: 0,
        }
    }
}

/// Cameras with shared poses and per-scale intrinsics.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleRig {
    pub base: Intrinsics,
    pub scales: Vec<usize>,
    /// Poses at scale 1.
    pub poses: Vec<CameraPose>,
}

impl MultiScaleRig {
    pub fn intrinsics(&self, scale: usize) -> Intrinsics {
        self.base.downsampled(scale)
    }

    pub fn pose_at(&self, cam: usize, scale: usize) -> CameraPose {
        self.poses[cam].with_intrinsics(self.intrinsics(scale))
    }

    pub fn to_record(&self) -> RigRecord {
        RigRecord { base: self.base, scales: self.scales.clone(), poses: self.poses.iter().map(PoseRecord::from).collect() }
    }

    pub fn from_record(r: &RigRecord) -> Result<Self> {
        r.base.validate()?;
        let poses = r.poses.iter().map(CameraPose::try_from).collect::<Result<Vec<_>>>()?;
        Ok(Self { base: r.base, scales: r.scales.clone(), poses })
    }
}

/// On-disk form of a rig.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RigRecord {
    pub base: Intrinsics,
    pub scales: Vec<usize>,
    pub poses: Vec<PoseRecord>,
}

/// Look-at cameras on a ring about the origin: evenly spaced azimuths with a
/// seeded offset, seeded elevations in `[10°, 40°]` and distances in
/// `[radius_min, radius_max]`.
pub fn build_rig(spec: &RigSpec) -> Result<MultiScaleRig> {
    if spec.n_cams < 2 {
        return Err(Error::InvalidParameter(format!("rig needs at least 2 cameras, got {}", spec.n_cams)));
    }
    if !(spec.radius_min > 0.0 && spec.radius_max >= spec.radius_min) {
        return Err(Error::InvalidParameter("bad ring radii".into()));
    }
    if spec.scales.is_empty() || spec.scales.iter().any(|&s| s == 0 || spec.base_width % s != 0 || spec.base_height % s != 0) {
        return Err(Error::InvalidParameter(format!("scales {:?} must divide the base resolution", spec.scales)));
    }
    let fx = spec.base_width as f64 / (2.0 * (0.5 * spec.fov).tan());
    let base = Intrinsics::new(fx, fx, spec.base_width as f64 / 2.0, spec.base_height as f64 / 2.0, spec.base_width, spec.base_height)?;
    let mut g = rng::stream(spec.seed, domain::RIG_LAYOUT, 0);
    let offset = g.random::<f64>() * 2.0 * PI;
    let mut poses = Vec::with_capacity(spec.n_cams);
    for k in 0..spec.n_cams {
        let az = offset + 2.0 * PI * k as f64 / spec.n_cams as f64;
        let el = (10.0 + 30.0 * g.random::<f64>()).to_radians();
        let r = spec.radius_min + (spec.radius_max - spec.radius_min) * g.random::<f64>();
        let eye = Vector3::new(r * el.cos() * az.cos(), r * el.cos() * az.sin(), r * el.sin());
        let rot = look_at(&eye, &Vector3::zeros())?;
        let t = -rot.rotate(&eye);
        poses.push(CameraPose::new(rot, t, base));
    }
    Ok(MultiScaleRig { base, scales: spec.scales.clone(), poses })
}

//! Conical frustums, their Gaussian approximation and integrated positional
//! encoding.
//!
//! A frustum is the set of points `x = o + t d + p` with `t in [t0, t1]`,
//! `p ⊥ d` and `|p| <= r t`, where `d` is a unit vector and `r` the cone
//! radius per unit distance. Features are ordered as all sine terms (octave
//! major, then axis) followed by all cosine terms, `6 L` values in total.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::so3::CameraPose;

/// Cone radius per pixel width: the standard deviation of a unit box.
pub const PIXEL_RADIUS_FACTOR: f64 = 0.577_350_269_189_625_8; // 2 / sqrt(12)

const MC_BLOCK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConicalFrustum {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub radius: f64,
    pub t0: f64,
    pub t1: f64,
}

impl ConicalFrustum {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>, radius: f64, t0: f64, t1: f64) -> Result<Self> {
        if (direction.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!("frustum direction has norm {}", direction.norm())));
        }
        if !(t0 > 0.0 && t1 > t0 && t1.is_finite()) {
            return Err(Error::InvalidParameter(format!("frustum interval [{t0}, {t1}] is invalid")));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidParameter(format!("frustum radius {radius} must be > 0")));
        }
        Ok(Self { origin, direction, radius, t0, t1 })
    }

    pub fn contains(&self, x: &Vector3<f64>) -> bool {
        let rel = x - self.origin;
        let t = rel.dot(&self.direction);
        if t < self.t0 || t > self.t1 {
            return false;
        }
        let perp = rel - self.direction * t;
        perp.norm() <= self.radius * t
    }
}

/// Unit ray direction in world coordinates through image point `(u, v)`.
pub fn pixel_direction(pose: &CameraPose, u: f64, v: f64) -> Vector3<f64> {
    let k = &pose.intrinsics;
    let cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
    pose.rotation.transpose().rotate(&cam).normalize()
}

/// Cone radius per unit distance for the pose's intrinsics.
pub fn pixel_radius(pose: &CameraPose) -> f64 {
    let k = &pose.intrinsics;
    (1.0 / (k.fx * k.fy)).sqrt() * PIXEL_RADIUS_FACTOR
}

/// Frustum through the center of pixel `(x, y)`.
pub fn cast_frustum(pixel: (usize, usize), pose: &CameraPose, t0: f64, t1: f64) -> Result<ConicalFrustum> {
    cast_frustum_at((pixel.0 as f64 + 0.5, pixel.1 as f64 + 0.5), pose, t0, t1)
}

/// Frustum through continuous image coordinates `(u, v)`.
pub fn cast_frustum_at(uv: (f64, f64), pose: &CameraPose, t0: f64, t1: f64) -> Result<ConicalFrustum> {
    pose.intrinsics.validate()?;
    ConicalFrustum::new(pose.center(), pixel_direction(pose, uv.0, uv.1), pixel_radius(pose), t0, t1)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianRegion {
    pub mean: Vector3<f64>,
    pub covariance: Matrix3<f64>,
}

/// Depth mean, depth variance and perpendicular variance of a frustum, in the
/// midpoint parametrization (stable as the interval shrinks).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrustumMoments {
    pub t_mean: f64,
    pub t_var: f64,
    pub r_var: f64,
}

pub fn frustum_moments(t0: f64, t1: f64, radius: f64) -> FrustumMoments {
    let mu = 0.5 * (t0 + t1);
    let hw = 0.5 * (t1 - t0);
    let mu2 = mu * mu;
    let hw2 = hw * hw;
    let hw4 = hw2 * hw2;
    let den = 3.0 * mu2 + hw2;
    FrustumMoments {
        t_mean: mu + 2.0 * mu * hw2 / den,
        t_var: hw2 / 3.0 - (4.0 / 15.0) * hw4 * (12.0 * mu2 - hw2) / (den * den),
        r_var: radius * radius * (mu2 / 4.0 + (5.0 / 12.0) * hw2 - (4.0 / 15.0) * hw4 / den),
    }
}

pub fn frustum_to_gaussian(f: &ConicalFrustum) -> GaussianRegion {
    let m = frustum_moments(f.t0, f.t1, f.radius);
    let d = f.direction;
    let ddt = d * d.transpose();
    GaussianRegion {
        mean: f.origin + d * m.t_mean,
        covariance: ddt * m.t_var + (Matrix3::identity() - ddt) * m.r_var,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncodingConfig {
    pub octaves: usize,
    pub anneal_t: f64,
    pub anneal_b: f64,
}

impl EncodingConfig {
    /// Fully enabled encoding (`t = L`).
    pub fn full(octaves: usize) -> Self {
        Self { octaves, anneal_t: octaves as f64, anneal_b: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.octaves == 0 {
            return Err(Error::InvalidParameter("encoding needs at least one octave".into()));
        }
        if !(self.anneal_b > 0.0 && self.anneal_t >= 0.0) {
            return Err(Error::InvalidParameter(format!("bad annealing t={} b={}", self.anneal_t, self.anneal_b)));
        }
        Ok(())
    }

    /// Per-octave weights `annealed_weight(l)` for `l < octaves`.
    pub fn weights(&self) -> Vec<f64> {
        (0..self.octaves).map(|k| annealed_weight(k as f64, self)).collect()
    }
}

/// `exp(min((t - k) / b, 0))`.
pub fn annealed_weight(k: f64, cfg: &EncodingConfig) -> f64 {
    ((cfg.anneal_t - k) / cfg.anneal_b).min(0.0).exp()
}

/// Closed-form expected encoding under the Gaussian.
pub fn ipe_encode(gauss: &GaussianRegion, octaves: usize) -> Vec<f64> {
    let diag = gauss.covariance.diagonal();
    let mut sin = Vec::with_capacity(3 * octaves);
    let mut cos = Vec::with_capacity(3 * octaves);
    for l in 0..octaves {
        let s = (2.0f64).powi(l as i32);
        for a in 0..3 {
            let damp = (-0.5 * s * s * diag[a]).exp();
            sin.push((s * gauss.mean[a]).sin() * damp);
            cos.push((s * gauss.mean[a]).cos() * damp);
        }
    }
    sin.extend(cos);
    sin
}

/// Plain encoding of a point (the zero-variance limit).
pub fn positional_encoding(x: &Vector3<f64>, octaves: usize) -> Vec<f64> {
    ipe_encode(&GaussianRegion { mean: *x, covariance: Matrix3::zeros() }, octaves)
}

/// Annealed closed-form encoding: octave `l` scaled by `annealed_weight(l)`.
pub fn ipe_encode_annealed(gauss: &GaussianRegion, cfg: &EncodingConfig) -> Vec<f64> {
    let mut f = ipe_encode(gauss, cfg.octaves);
    let w = cfg.weights();
    let half = 3 * cfg.octaves;
    for (k, v) in f.iter_mut().enumerate() {
        *v *= w[(k % half) / 3];
    }
    f
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonteCarloEstimate {
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    pub accepted: usize,
    pub proposed: usize,
}

/// Unit vectors completing `d` to a right-handed orthonormal basis.
fn perpendicular_basis(d: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if d.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let a = d.cross(&helper).normalize();
    let b = d.cross(&a);
    (a, b)
}

/// Rejection-sampled average of the point encoding over the frustum volume.
///
/// Proposals are uniform in the ray-aligned box `[t0, t1] x [-r t1, r t1]²`
/// and accepted by the frustum indicator. Draws are counter based per block
/// of proposals, so the estimate depends only on `(frustum, n, seed)`.
pub fn ipe_monte_carlo(f: &ConicalFrustum, octaves: usize, n_samples: usize, seed: u64) -> Result<MonteCarloEstimate> {
    if n_samples == 0 {
        return Err(Error::InvalidParameter("n_samples must be >= 1".into()));
    }
    let dims = 6 * octaves;
    let (pa, pb) = perpendicular_basis(&f.direction);
    let half = f.radius * f.t1;
    let mut sum = vec![0.0; dims];
    let mut sum_sq = vec![0.0; dims];
    let mut accepted = 0usize;
    let mut proposed = 0usize;
    let mut block = 0u64;
    let mut feat = vec![0.0; dims];
    let max_blocks = 1 + 1000 * n_samples.div_ceil(MC_BLOCK) as u64;
    while accepted < n_samples {
        if block >= max_blocks {
            return Err(Error::InvalidParameter("frustum rejected every Monte-Carlo proposal".into()));
        }
        let mut g = rng::stream(seed, domain::MONTE_CARLO, block);
        block += 1;
        for _ in 0..MC_BLOCK {
            if accepted == n_samples {
                break;
            }
            proposed += 1;
            let t = f.t0 + (f.t1 - f.t0) * g.random::<f64>();
            let a = half * (2.0 * g.random::<f64>() - 1.0);
            let b = half * (2.0 * g.random::<f64>() - 1.0);
            let rt = f.radius * t;
            if a * a + b * b > rt * rt {
                continue;
            }
            accepted += 1;
            let x = f.origin + f.direction * t + pa * a + pb * b;
            for axis in 0..3 {
                let (mut s, mut c) = x[axis].sin_cos();
                for l in 0..octaves {
                    feat[3 * l + axis] = s;
                    feat[3 * (octaves + l) + axis] = c;
                    let s2 = 2.0 * s * c;
                    c = 1.0 - 2.0 * s * s;
                    s = s2;
                }
            }
            for k in 0..dims {
                sum[k] += feat[k];
                sum_sq[k] += feat[k] * feat[k];
            }
        }
    }
    let n = accepted as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std_error = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| {
            let var = if accepted > 1 { ((sq / n - m * m) * n / (n - 1.0)).max(0.0) } else { 0.0 };
            (var / n).sqrt()
        })
        .collect();
    Ok(MonteCarloEstimate { mean, std_error, accepted, proposed })
}

/// Constant per-octave frequency matrices stacking `[2^l I]` and `[4^l I]`.
fn octave_stacks(octaves: usize) -> (Vec<f64>, Vec<f64>) {
    let mut freq = vec![0.0; 9 * octaves];
    let mut freq_sq = vec![0.0; 9 * octaves];
    for l in 0..octaves {
        let s = (2.0f64).powi(l as i32);
        for a in 0..3 {
            freq[(3 * l + a) * 3 + a] = s;
            freq_sq[(3 * l + a) * 3 + a] = s * s;
        }
    }
    (freq, freq_sq)
}

/// Cached constants for recording encodings on a tape.
#[derive(Clone, Debug)]
pub struct EncodingPlan {
    pub octaves: usize,
    freq: Vec<f64>,
    freq_sq: Vec<f64>,
    weights: Vec<f64>,
}

impl EncodingPlan {
    pub fn new(cfg: &EncodingConfig) -> Self {
        let (freq, freq_sq) = octave_stacks(cfg.octaves);
        let w = cfg.weights();
        let weights = (0..3 * cfg.octaves).map(|k| w[k / 3]).collect();
        Self { octaves: cfg.octaves, freq, freq_sq, weights }
    }

    /// Annealed IPE of the Gaussian with mean `o + t_mean d` and diagonal
    /// `t_var d² + r_var (1 - d²)`, differentiable in `o` and `d`.
    pub fn encode_frustum<'t>(&self, tape: &'t Tape, origin: Var<'t>, dir: Var<'t>, m: &FrustumMoments) -> Var<'t> {
        let mean = origin + dir.mul_const(m.t_mean);
        let diag = (dir * dir).mul_const(m.t_var - m.r_var).add_const(m.r_var);
        self.encode_gaussian(tape, mean, diag)
    }

    pub fn encode_gaussian<'t>(&self, tape: &'t Tape, mean: Var<'t>, diag: Var<'t>) -> Var<'t> {
        let n = 3 * self.octaves;
        let freq = tape.constant(n, 3, &self.freq);
        let freq_sq = tape.constant(n, 3, &self.freq_sq);
        let w = tape.const_vector(&self.weights);
        let arg = freq.matvec(mean);
        let damp = freq_sq.matvec(diag).mul_const(-0.5).exp() * w;
        tape.concat(&[arg.sin() * damp, arg.cos() * damp])
    }

    /// Annealed plain encoding of a direction.
    pub fn encode_point<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let n = 3 * self.octaves;
        let freq = tape.constant(n, 3, &self.freq);
        let w = tape.const_vector(&self.weights);
        let arg = freq.matvec(x);
        tape.concat(&[arg.sin() * w, arg.cos() * w])
    }
}

//! Message-passing rotation refiner.
//!
//! Every vertex starts from an initial absolute rotation and a zero hidden
//! state. In each round an edge `i -> j` sends two messages: to `j` the
//! correction `q̃ q_i q_j*` that the measurement suggests for `q_j`, and to `i`
//! the correction `q̃* q_j q_i*`. A message is
//! `tanh(W_m [h_sender; a vec(r); a² (1 - w(r))] + b_m)`, summed at the receiver,
//! and the node update is
//!
//! ```text
//! h <- tanh(W_u [h; M] + b_u)
//! d <- (1 - exp(-ḡ)) (W_o h + b_o)
//! q <- normalize([1, b d/2] * q)
//! ```
//!
//! with fixed scales `a = 10` and `b = 0.1`, and `ḡ` the mean gap feature
//! `a² (1 - w(r))` over the vertex's incoming corrections. The gate vanishes
//! when every incident measurement agrees with the current estimate, so a
//! consistent graph is a fixed point for any parameters. Outputs are
//! re-gauged so vertex 0 is the identity. With all parameters zero the
//! refiner returns its (normalized) initialization.

use std::path::Path;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::io::{self, BlobMeta};
use crate::rng::{self, domain};
use crate::so3::{d_q, UnitQuaternion};
use crate::viewgraph::{gauge_fix, spanning_tree_init, ViewGraph};

const TENSORS_PER_ROUND: usize = 6;
const EDGE_FEATURES: usize = 4;
const CONJ: [f64; 4] = [1.0, -1.0, -1.0, -1.0];
/// Residuals are scaled up before the message layer and corrections scaled
/// down after the output layer, keeping weights of order one.
const FEATURE_SCALE: f64 = 10.0;
const OUTPUT_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct RefinerParams {
    rounds: usize,
    hidden: usize,
    values: Vec<f64>,
}

impl RefinerParams {
    fn layout(rounds: usize, hidden: usize) -> Vec<(String, usize, usize)> {
        let h = hidden;
        (0..rounds)
            .flat_map(|r| {
                [
                    (format!("r{r}.w_msg"), h, h + EDGE_FEATURES),
                    (format!("r{r}.b_msg"), h, 1),
                    (format!("r{r}.w_upd"), h, 2 * h),
                    (format!("r{r}.b_upd"), h, 1),
                    (format!("r{r}.w_out"), 3, h),
                    (format!("r{r}.b_out"), 3, 1),
                ]
            })
            .collect()
    }

    pub fn zeros(rounds: usize, hidden: usize) -> Self {
        let len = Self::layout(rounds, hidden).iter().map(|(_, r, c)| r * c).sum();
        Self { rounds, hidden, values: vec![0.0; len] }
    }

    /// Scaled Gaussian weights; output layers start at zero so the untrained
    /// refiner reproduces its initialization.
    pub fn random(rounds: usize, hidden: usize, seed: u64) -> Self {
        let mut p = Self::zeros(rounds, hidden);
        let mut offset = 0;
        for (k, (name, r, c)) in Self::layout(rounds, hidden).into_iter().enumerate() {
            let n = r * c;
            if name.contains(".w_msg") || name.contains(".w_upd") {
                let mut g = rng::stream(seed, domain::PARAM_INIT, k as u64);
                let dist = Normal::new(0.0, 1.0 / (c as f64).sqrt()).expect("positive std");
                for v in &mut p.values[offset..offset + n] {
                    *v = dist.sample(&mut g);
                }
            }
            offset += n;
        }
        p
    }

    pub fn from_values(rounds: usize, hidden: usize, values: Vec<f64>) -> Result<Self> {
        let p = Self::zeros(rounds, hidden);
        if values.len() != p.values.len() {
            return Err(Error::InvalidParameter(format!("{} values, expected {}", values.len(), p.values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "refiner params" });
        }
        Ok(Self { values, ..p })
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn hidden(&self) -> usize {
        self.hidden
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

    /// One tape variable per tensor; `trainable` picks leaves or constants.
    pub fn record<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        let mut offset = 0;
        Self::layout(self.rounds, self.hidden)
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
            .collect()
    }

    pub fn meta(&self, config_hash: &str) -> BlobMeta {
        BlobMeta {
            kind: format!("refiner rounds={} hidden={}", self.rounds, self.hidden),
            shapes: Self::layout(self.rounds, self.hidden),
            config_hash: config_hash.to_string(),
        }
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        io::write_blob(path, &self.values, &self.meta(config_hash))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (values, meta) = io::read_blob(path)?;
        Self::from_blob(values, &meta)
    }

    pub fn from_blob(values: Vec<f64>, meta: &BlobMeta) -> Result<Self> {
        let rounds = meta.shapes.len() / TENSORS_PER_ROUND;
        let hidden = meta.shapes.first().map(|s| s.1).unwrap_or(0);
        if meta.shapes != Self::layout(rounds, hidden) {
            return Err(Error::InvalidParameter(format!("unrecognized refiner layout: {}", meta.kind)));
        }
        io::check_blob(&values, meta)?;
        Self::from_values(rounds, hidden, values)
    }
}

const PRETRAINED_BLOB: &[u8] = include_bytes!("../../assets/refiner.bin");
const PRETRAINED_META: &str = include_str!("../../assets/refiner.bin.json");

/// Parameters shipped with the crate, trained on 200 graphs of 20 vertices
/// with 5° edge noise and 10% outliers.
pub fn pretrained_refiner() -> Result<RefinerParams> {
    let meta: BlobMeta = serde_json::from_str(PRETRAINED_META)?;
    RefinerParams::from_blob(io::decode_f64(PRETRAINED_BLOB)?, &meta)
}

/// Targets of the motion-averaging loss, one relative target per edge (in
/// graph edge order) and one absolute target per vertex.
#[derive(Clone, Debug, PartialEq)]
pub struct MraTargets {
    pub relative: Vec<UnitQuaternion>,
    pub absolute: Vec<UnitQuaternion>,
}

impl MraTargets {
    /// Ground-truth relatives and gauge-fixed ground-truth absolutes.
    pub fn from_ground_truth(g: &ViewGraph) -> Result<Self> {
        let gt = g.ground_truth()?;
        Ok(Self {
            relative: g.edges().iter().map(|e| gt[e.j] * gt[e.i].inverse()).collect(),
            absolute: gauge_fix(&gt),
        })
    }

    /// Measured relatives and caller-supplied absolutes (e.g. a spanning-tree
    /// estimate) for use when no ground truth exists.
    pub fn from_measurements(g: &ViewGraph, absolute: &[UnitQuaternion]) -> Self {
        Self { relative: g.edges().iter().map(|e| e.measured).collect(), absolute: gauge_fix(absolute) }
    }
}

pub(crate) fn quat_const<'t>(tape: &'t Tape, q: &UnitQuaternion) -> Var<'t> {
    tape.const_vector(&q.to_array())
}

pub(crate) fn conj<'t>(q: Var<'t>) -> Var<'t> {
    q * q.tape().const_vector(&CONJ)
}

/// Canonical hemisphere by the current value; the sign is a constant.
fn canonical<'t>(q: Var<'t>) -> Var<'t> {
    if q.value()[0] < 0.0 {
        q.mul_const(-1.0)
    } else {
        q
    }
}

/// `d_Q(p, target)` with the branch chosen by value.
fn d_q_var<'t>(p: Var<'t>, target: &UnitQuaternion) -> Var<'t> {
    let t = target.to_array();
    let pv = p.value();
    let minus: f64 = pv.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum();
    let plus: f64 = pv.iter().zip(&t).map(|(a, b)| (a + b) * (a + b)).sum();
    let sign = if minus <= plus { 1.0 } else { -1.0 };
    (p - p.tape().const_vector(&t.map(|x| sign * x))).norm()
}

/// Refiner forward pass on a tape; returns one 4-vector per vertex.
pub fn refiner_forward_var<'t>(
    tape: &'t Tape,
    g: &ViewGraph,
    init: &[UnitQuaternion],
    rounds: usize,
    hidden: usize,
    params: &[Var<'t>],
) -> Result<Vec<Var<'t>>> {
    let n = g.vertex_count();
    if init.len() != n {
        return Err(Error::InvalidParameter(format!("{} initial rotations for {n} vertices", init.len())));
    }
    if params.len() != rounds * TENSORS_PER_ROUND {
        return Err(Error::InvalidParameter(format!("{} parameter tensors for {rounds} rounds", params.len())));
    }
    let zeros = tape.const_vector(&vec![0.0; hidden]);
    let one = tape.const_vector(&[1.0]);
    let measured: Vec<Var> = g.edges().iter().map(|e| quat_const(tape, &e.measured)).collect();
    let mut q: Vec<Var> = init.iter().map(|x| quat_const(tape, x).normalize()).collect();
    let mut h: Vec<Var> = vec![zeros; n];

    for r in 0..rounds {
        let p = &params[r * TENSORS_PER_ROUND..(r + 1) * TENSORS_PER_ROUND];
        let (w_msg, b_msg, w_upd, b_upd, w_out, b_out) = (p[0], p[1], p[2], p[3], p[4], p[5]);
        let mut inbox: Vec<Option<(Var, Var)>> = vec![None; n];
        let mut degree = vec![0usize; n];
        let send = |receiver: usize, sender: usize, corr: Var<'t>, inbox: &mut Vec<Option<(Var<'t>, Var<'t>)>>| {
            let c = canonical(corr);
            let gap = c.at(0).mul_const(-FEATURE_SCALE * FEATURE_SCALE).add_const(FEATURE_SCALE * FEATURE_SCALE);
            let feat = tape.concat(&[h[sender], c.slice(1, 3).mul_const(FEATURE_SCALE), gap]);
            let msg = (w_msg.matvec(feat) + b_msg).tanh();
            inbox[receiver] = Some(match inbox[receiver] {
                Some((acc, gaps)) => (acc + msg, gaps + gap),
                None => (msg, gap),
            });
        };
        for (k, e) in g.edges().iter().enumerate() {
            let m = measured[k];
            let to_j = m.quat_mul(q[e.i]).quat_mul(conj(q[e.j]));
            let to_i = conj(m).quat_mul(q[e.j]).quat_mul(conj(q[e.i]));
            send(e.j, e.i, to_j, &mut inbox);
            send(e.i, e.j, to_i, &mut inbox);
            degree[e.i] += 1;
            degree[e.j] += 1;
        }
        let mut next_h = Vec::with_capacity(n);
        let mut next_q = Vec::with_capacity(n);
        for v in 0..n {
            let Some((m, gaps)) = inbox[v] else {
                next_q.push(q[v]);
                next_h.push(h[v]);
                continue;
            };
            let gate = gaps.mul_const(-1.0 / degree[v] as f64).exp().mul_const(-1.0).add_const(1.0);
            let hv = (w_upd.matvec(tape.concat(&[h[v], m])) + b_upd).tanh();
            let delta = (w_out.matvec(hv) + b_out).scale(gate);
            let dq = tape.concat(&[one, delta.mul_const(0.5 * OUTPUT_SCALE)]);
            next_q.push(dq.quat_mul(q[v]).normalize());
            next_h.push(hv);
        }
        h = next_h;
        q = next_q;
    }
    let gauge = conj(q[0]);
    Ok(q.into_iter().map(|x| x.quat_mul(gauge)).collect())
}

fn to_quaternions(vars: &[Var<'_>]) -> Result<Vec<UnitQuaternion>> {
    vars.iter()
        .map(|v| {
            let a = v.value();
            UnitQuaternion::new(a[0], a[1], a[2], a[3])
        })
        .collect()
}

/// Refiner output starting from the spanning-tree initialization.
pub fn refiner_forward(g: &ViewGraph, params: &RefinerParams) -> Result<Vec<UnitQuaternion>> {
    let init = spanning_tree_init(g)?;
    refiner_forward_from(g, &init, params)
}

pub fn refiner_forward_from(g: &ViewGraph, init: &[UnitQuaternion], params: &RefinerParams) -> Result<Vec<UnitQuaternion>> {
    let tape = Tape::new();
    let vars = params.record(&tape, false);
    let out = refiner_forward_var(&tape, g, init, params.rounds, params.hidden, &vars)?;
    tape.check()?;
    let mut q = to_quaternions(&out)?;
    q[0] = UnitQuaternion::identity();
    Ok(q)
}

/// `sum_edges d_Q(q_j q_i*, target_ij) + beta * sum_vertices d_Q(q_v, target_v)`.
pub fn mra_loss_var<'t>(tape: &'t Tape, pred: &[Var<'t>], g: &ViewGraph, targets: &MraTargets, beta: f64) -> Var<'t> {
    let mut terms = Vec::with_capacity(g.edge_count() + pred.len());
    for (k, e) in g.edges().iter().enumerate() {
        let rel = pred[e.j].quat_mul(conj(pred[e.i]));
        terms.push(d_q_var(rel, &targets.relative[k]));
    }
    if beta != 0.0 {
        for (v, p) in pred.iter().enumerate() {
            terms.push(d_q_var(*p, &targets.absolute[v]).mul_const(beta));
        }
    }
    if terms.is_empty() {
        return tape.const_scalar(0.0);
    }
    tape.concat(&terms).sum()
}

/// Loss of plain predictions against the graph's ground truth.
pub fn mra_loss(pred: &[UnitQuaternion], g: &ViewGraph, beta: f64) -> Result<f64> {
    let targets = MraTargets::from_ground_truth(g)?;
    if pred.len() != g.vertex_count() {
        return Err(Error::InvalidParameter(format!("{} predictions for {} vertices", pred.len(), g.vertex_count())));
    }
    let rel: f64 = g.edges().iter().zip(&targets.relative).map(|(e, t)| d_q(&(pred[e.j] * pred[e.i].inverse()), t)).sum();
    let abs: f64 = pred.iter().zip(&targets.absolute).map(|(p, t)| d_q(p, t)).sum();
    Ok(rel + beta * abs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinerConfig {
    pub rounds: usize,
    pub hidden: usize,
    pub beta: f64,
    pub step: f64,
    pub clip: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Step multiplier after an accepted step (1 keeps the step fixed).
    pub growth: f64,
    /// Cap on the step as a multiple of `step`.
    pub max_growth: f64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self { rounds: 4, hidden: 32, beta: 1.0, step: 0.2, clip: 1.0, epochs: 60, seed: 0, growth: 1.3, max_growth: 4.0 }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.hidden == 0 {
            return Err(Error::InvalidParameter("refiner needs at least one round and one hidden unit".into()));
        }
        if !(self.step > 0.0 && self.clip > 0.0 && self.beta >= 0.0 && self.growth >= 1.0 && self.max_growth >= 1.0) {
            return Err(Error::InvalidParameter(format!("bad refiner rates: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Dataset loss of the accepted parameters after each epoch (index 0 is the start).
    pub loss_history: Vec<f64>,
    pub final_step: f64,
    pub rejected_steps: usize,
}

struct Sample<'a> {
    graph: &'a ViewGraph,
    init: Vec<UnitQuaternion>,
    targets: MraTargets,
    weight: f64,
}

/// Normalized per-graph loss and its gradient.
fn sample_loss_grad(s: &Sample<'_>, params: &RefinerParams, beta: f64) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let vars = params.record(&tape, true);
    let pred = refiner_forward_var(&tape, s.graph, &s.init, params.rounds, params.hidden, &vars)?;
    let loss = mra_loss_var(&tape, &pred, s.graph, &s.targets, beta).mul_const(s.weight);
    let grads = tape.backward(loss)?;
    let mut flat = vec![0.0; params.len()];
    let mut offset = 0;
    for v in &vars {
        let n = v.len();
        grads.accumulate(*v, &mut flat[offset..offset + n]);
        offset += n;
    }
    Ok((loss.item(), flat))
}

fn dataset_loss_grad(samples: &[Sample<'_>], params: &RefinerParams, beta: f64) -> Result<(f64, Vec<f64>)> {
    let parts: Vec<Result<(f64, Vec<f64>)>> = samples.par_iter().map(|s| sample_loss_grad(s, params, beta)).collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    for part in parts {
        let (l, g) = part?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let scale = 1.0 / samples.len().max(1) as f64;
    grad.iter_mut().for_each(|x| *x *= scale);
    Ok((loss * scale, grad))
}

/// Full-batch gradient descent on the mean normalized loss with
/// gradient-norm clipping. A step that would raise the loss is rejected and
/// the step size halved, so the accepted loss never increases. Accepted steps
/// grow the step by `growth`, up to `max_growth` times the configured step.
pub fn train_refiner(dataset: &[ViewGraph], config: &RefinerConfig) -> Result<(RefinerParams, TrainReport)> {
    config.validate()?;
    let samples = dataset
        .iter()
        .map(|g| {
            Ok(Sample {
                graph: g,
                init: spanning_tree_init(g)?,
                targets: MraTargets::from_ground_truth(g)?,
                weight: 1.0 / (g.edge_count() + g.vertex_count()) as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut params = RefinerParams::random(config.rounds, config.hidden, config.seed);
    let (mut loss, mut grad) = dataset_loss_grad(&samples, &params, config.beta)?;
    if !loss.is_finite() {
        return Err(Error::Diverged { epoch: 0, detail: "initial loss is not finite".into() });
    }
    let mut report = TrainReport { loss_history: vec![loss], final_step: config.step, rejected_steps: 0 };
    let mut step = config.step;
    for epoch in 1..=config.epochs {
        let norm = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
        let factor = if norm > config.clip { config.clip / norm } else { 1.0 };
        let mut trial = params.clone();
        for (p, g) in trial.values.iter_mut().zip(&grad) {
            *p -= step * factor * g;
        }
        let (trial_loss, trial_grad) = match dataset_loss_grad(&samples, &trial, config.beta) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => (f64::NAN, Vec::new()),
            Err(e) => return Err(e),
        };
        if trial_loss.is_finite() && trial_loss <= loss {
            params = trial;
            loss = trial_loss;
            grad = trial_grad;
            step = (step * config.growth).min(config.step * config.max_growth);
        } else {
            step *= 0.5;
            report.rejected_steps += 1;
            if step < 1e-12 {
                return Err(Error::Diverged { epoch, detail: format!("step size collapsed at loss {loss}") });
            }
        }
        report.loss_history.push(loss);
    }
    report.final_step = step;
    Ok((params, report))
}

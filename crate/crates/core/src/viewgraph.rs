//! Directed view graphs of relative-rotation measurements.
//!
//! An edge `i -> j` carries a measurement of `R_j R_iᵀ`. Vertex 0 is the
//! gauge reference: every initialization and solver returns vertex 0 as the
//! identity.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::so3::{AxisAngle, CameraPose, UnitQuaternion};

#[derive(Clone, Debug, PartialEq)]
pub struct Vertex {
    pub id: usize,
    pub ground_truth: Option<UnitQuaternion>,
    pub estimate: UnitQuaternion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub measured: UnitQuaternion,
    pub outlier: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewGraph {
    vertices: Vec<Vertex>,
    edges: Vec<Edge>,
}

impl ViewGraph {
    /// Validates and canonicalizes (vertices by id, edges lexicographically).
    pub fn new(mut vertices: Vec<Vertex>, mut edges: Vec<Edge>) -> Result<Self> {
        vertices.sort_by_key(|v| v.id);
        for (k, v) in vertices.iter().enumerate() {
            if v.id != k {
                return Err(Error::InvalidGraph(format!("vertex ids must be 0..{}, found {}", vertices.len(), v.id)));
            }
        }
        let n = vertices.len();
        edges.sort_by_key(|e| (e.i, e.j));
        for (k, e) in edges.iter().enumerate() {
            if e.i >= n || e.j >= n {
                return Err(Error::InvalidGraph(format!("edge {}->{} references a missing vertex", e.i, e.j)));
            }
            if e.i == e.j {
                return Err(Error::InvalidGraph(format!("self edge on vertex {}", e.i)));
            }
            if k > 0 && (edges[k - 1].i, edges[k - 1].j) == (e.i, e.j) {
                return Err(Error::InvalidGraph(format!("duplicate edge {}->{}", e.i, e.j)));
            }
        }
        let g = Self { vertices, edges };
        let components = g.component_count();
        if components != 1 {
            return Err(Error::Disconnected { components });
        }
        Ok(g)
    }

    pub fn vertices(&self) -> &[Vertex] {
        &self.vertices
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Undirected adjacency: for each vertex, `(neighbour, edge index)` sorted by neighbour.
    pub fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for (k, e) in self.edges.iter().enumerate() {
            adj[e.i].push((e.j, k));
            adj[e.j].push((e.i, k));
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    fn component_count(&self) -> usize {
        let adj = self.adjacency();
        let mut seen = vec![false; self.vertices.len()];
        let mut components = 0;
        for start in 0..self.vertices.len() {
            if seen[start] {
                continue;
            }
            components += 1;
            seen[start] = true;
            let mut stack = vec![start];
            while let Some(v) = stack.pop() {
                for &(u, _) in &adj[v] {
                    if !seen[u] {
                        seen[u] = true;
                        stack.push(u);
                    }
                }
            }
        }
        components
    }

    pub fn ground_truth(&self) -> Result<Vec<UnitQuaternion>> {
        self.vertices
            .iter()
            .map(|v| v.ground_truth.ok_or(Error::MissingGroundTruth(v.id)))
            .collect()
    }

    pub fn estimates(&self) -> Vec<UnitQuaternion> {
        self.vertices.iter().map(|v| v.estimate).collect()
    }

    pub fn with_estimates(&self, estimates: &[UnitQuaternion]) -> Result<Self> {
        if estimates.len() != self.vertices.len() {
            return Err(Error::InvalidParameter(format!(
                "{} estimates for {} vertices",
                estimates.len(),
                self.vertices.len()
            )));
        }
        let mut g = self.clone();
        for (v, q) in g.vertices.iter_mut().zip(estimates) {
            v.estimate = *q;
        }
        Ok(g)
    }

    /// Number of edges flagged as outliers.
    pub fn outlier_count(&self) -> usize {
        self.edges.iter().filter(|e| e.outlier == Some(true)).count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&GraphFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GraphFile = serde_json::from_str(text)?;
        file.try_into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct VertexRecord {
    id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    q_gt: Option<[f64; 4]>,
    q_est: [f64; 4],
}

#[derive(Serialize, Deserialize)]
struct EdgeRecord {
    i: usize,
    j: usize,
    q_meas: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    outlier: Option<bool>,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    vertices: Vec<VertexRecord>,
    edges: Vec<EdgeRecord>,
}

impl From<&ViewGraph> for GraphFile {
    fn from(g: &ViewGraph) -> Self {
        GraphFile {
            vertices: g
                .vertices
                .iter()
                .map(|v| VertexRecord { id: v.id, q_gt: v.ground_truth.map(|q| q.to_array()), q_est: v.estimate.to_array() })
                .collect(),
            edges: g
                .edges
                .iter()
                .map(|e| EdgeRecord { i: e.i, j: e.j, q_meas: e.measured.to_array(), outlier: e.outlier })
                .collect(),
        }
    }
}

impl TryFrom<GraphFile> for ViewGraph {
    type Error = Error;
    fn try_from(file: GraphFile) -> Result<Self> {
        let vertices = file
            .vertices
            .into_iter()
            .map(|v| {
                Ok(Vertex {
                    id: v.id,
                    ground_truth: v.q_gt.map(UnitQuaternion::from_array).transpose()?,
                    estimate: UnitQuaternion::from_array(v.q_est)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let edges = file
            .edges
            .into_iter()
            .map(|e| Ok(Edge { i: e.i, j: e.j, measured: UnitQuaternion::from_array(e.q_meas)?, outlier: e.outlier }))
            .collect::<Result<Vec<_>>>()?;
        ViewGraph::new(vertices, edges)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OutlierModel {
    /// Replace the measurement with a Haar-random rotation.
    #[default]
    UniformRandomRotation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Standard deviation (radians) of each axis-angle component.
    pub rotation_sigma: f64,
    pub outlier_fraction: f64,
    pub outlier_model: OutlierModel,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(rotation_sigma: f64, outlier_fraction: f64, seed: u64) -> Result<Self> {
        let spec = Self { rotation_sigma, outlier_fraction, outlier_model: OutlierModel::UniformRandomRotation, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rotation_sigma >= 0.0 && self.rotation_sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("rotation_sigma must be >= 0, got {}", self.rotation_sigma)));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return Err(Error::InvalidParameter(format!("outlier_fraction must be in [0, 1], got {}", self.outlier_fraction)));
        }
        Ok(())
    }
}

/// Axis-angle draw from `N(0, sigma² I)`.
pub fn gaussian_rotation<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> UnitQuaternion {
    let v = Vector3::new(rng.sample::<f64, _>(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
    UnitQuaternion::exp(&AxisAngle(v * sigma))
}

/// Random connected graph with exactly consistent measurements.
///
/// Topology: a random recursive spanning tree unioned with independent
/// Bernoulli(`edge_probability`) edges over all unordered pairs. Each edge gets
/// a random direction. Ground-truth rotations are Haar distributed and every
/// estimate starts at the identity.
pub fn generate_synthetic_graph(n: usize, edge_probability: f64, seed: u64) -> Result<ViewGraph> {
    if n < 3 {
        return Err(Error::TooFewVertices(n));
    }
    if !(0.0..=1.0).contains(&edge_probability) {
        return Err(Error::InvalidParameter(format!("edge probability {edge_probability} not in [0, 1]")));
    }
    let gt: Vec<UnitQuaternion> =
        (0..n).map(|v| UnitQuaternion::random(&mut rng::stream(seed, domain::GRAPH_ROTATIONS, v as u64))).collect();

    let mut topo = rng::stream(seed, domain::GRAPH_TOPOLOGY, 0);
    let mut present = vec![vec![false; n]; n];
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut topo);
    for k in 1..n {
        let parent = order[topo.random_range(0..k)];
        let child = order[k];
        present[parent.min(child)][parent.max(child)] = true;
    }
    for a in 0..n {
        for b in a + 1..n {
            if topo.random::<f64>() < edge_probability {
                present[a][b] = true;
            }
        }
    }
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let flip: bool = topo.random();
            if present[a][b] {
                let (i, j) = if flip { (b, a) } else { (a, b) };
                edges.push(Edge { i, j, measured: gt[j] * gt[i].inverse(), outlier: None });
            }
        }
    }
    let vertices = (0..n).map(|id| Vertex { id, ground_truth: Some(gt[id]), estimate: UnitQuaternion::identity() }).collect();
    ViewGraph::new(vertices, edges)
}

/// Left-multiplies each measurement by Gaussian axis-angle noise, then
/// replaces `round(fraction * m)` edges with random rotations and flags them.
pub fn perturb_edges(g: &ViewGraph, spec: &NoiseSpec) -> Result<ViewGraph> {
    spec.validate()?;
    let mut out = g.clone();
    if spec.rotation_sigma > 0.0 {
        for (k, e) in out.edges.iter_mut().enumerate() {
            let mut r = rng::stream(spec.seed, domain::EDGE_NOISE, k as u64);
            e.measured = gaussian_rotation(&mut r, spec.rotation_sigma) * e.measured;
        }
    }
    if spec.outlier_fraction > 0.0 {
        let m = out.edges.len();
        let count = (spec.outlier_fraction * m as f64).round() as usize;
        let mut pick = rng::stream(spec.seed, domain::OUTLIER_SELECTION, 0);
        let chosen = index::sample(&mut pick, m, count.min(m));
        for e in out.edges.iter_mut() {
            e.outlier.get_or_insert(false);
        }
        for k in chosen.iter() {
            let mut r = rng::stream(spec.seed, domain::OUTLIER_SELECTION, 1 + k as u64);
            out.edges[k].measured = UnitQuaternion::random(&mut r);
            out.edges[k].outlier = Some(true);
        }
    }
    Ok(out)
}

/// Rotation-only perturbation `R' = exp(delta) R` with `delta ~ N(0, sigma² I)`.
pub fn perturb_absolute_poses(poses: &[CameraPose], sigma: f64, seed: u64) -> Result<Vec<CameraPose>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(poses.to_vec());
    }
    Ok(poses
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let mut r = rng::stream(seed, domain::POSE_NOISE, k as u64);
            let noise = gaussian_rotation(&mut r, sigma).to_matrix();
            CameraPose { rotation: noise.compose(&p.rotation), ..*p }
        })
        .collect())
}

/// Chains measurements along a BFS tree rooted at vertex 0 (neighbours in
/// ascending order). Vertex 0 is the identity.
pub fn spanning_tree_init(g: &ViewGraph) -> Result<Vec<UnitQuaternion>> {
    let n = g.vertex_count();
    let adj = g.adjacency();
    let mut est: Vec<Option<UnitQuaternion>> = vec![None; n];
    est[0] = Some(UnitQuaternion::identity());
    let mut queue = VecDeque::from([0usize]);
    while let Some(v) = queue.pop_front() {
        let qv = est[v].expect("queued vertices are initialized");
        for &(u, k) in &adj[v] {
            if est[u].is_some() {
                continue;
            }
            let e = &g.edges[k];
            // R_j = R_ij R_i
            est[u] = Some(if e.i == v { e.measured * qv } else { e.measured.inverse() * qv });
            queue.push_back(u);
        }
    }
    let missing = est.iter().filter(|q| q.is_none()).count();
    if missing > 0 {
        return Err(Error::Disconnected { components: 2 });
    }
    Ok(est.into_iter().map(|q| q.expect("checked")).collect())
}

/// Right-multiplies every rotation so that the first becomes the identity.
pub fn gauge_fix(rotations: &[UnitQuaternion]) -> Vec<UnitQuaternion> {
    let Some(first) = rotations.first() else { return Vec::new() };
    let inv = first.inverse();
    let mut out: Vec<UnitQuaternion> = rotations.iter().map(|q| *q * inv).collect();
    out[0] = UnitQuaternion::identity();
    out
}

/// Per-vertex geodesic error after aligning both sets on vertex 0.
pub fn gauge_aligned_errors(estimates: &[UnitQuaternion], truth: &[UnitQuaternion]) -> Vec<f64> {
    let est = gauge_fix(estimates);
    let gt = gauge_fix(truth);
    est.iter().zip(&gt).map(|(a, b)| a.angle_to(b)).collect()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

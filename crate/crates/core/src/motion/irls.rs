use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use super::RobustLoss;
use crate::error::{Error, Result};
use crate::so3::{AxisAngle, UnitQuaternion};
use crate::viewgraph::{gauge_fix, spanning_tree_init, ViewGraph};

const MAX_HALVINGS: usize = 30;

#[derive(Clone, Debug)]
pub struct IrlsReport {
    pub rotations: Vec<UnitQuaternion>,
    /// Linear solves performed.
    pub iterations: usize,
    pub converged: bool,
    /// Objective before the first iteration, then after each accepted step.
    pub objective_history: Vec<f64>,
    /// Mean geodesic edge residual at the returned solution.
    pub mean_residual: f64,
}

/// Geodesic residual vector `log(R̃_ij R_i R_jᵀ)` of one edge.
fn edge_error(measured: &UnitQuaternion, qi: &UnitQuaternion, qj: &UnitQuaternion) -> Vector3<f64> {
    (*measured * *qi * qj.inverse()).log().0
}

/// `sum rho(d(R̃_ij, R_j R_iᵀ))` over all edges.
pub fn objective(g: &ViewGraph, rotations: &[UnitQuaternion], loss: &RobustLoss) -> f64 {
    g.edges().iter().map(|e| loss.rho(edge_error(&e.measured, &rotations[e.i], &rotations[e.j]).norm())).sum()
}

/// IRLS from the spanning-tree initialization.
pub fn irls_rotation_average(g: &ViewGraph, loss: RobustLoss, max_iters: usize, tol: f64) -> Result<IrlsReport> {
    let init = spanning_tree_init(g)?;
    irls_from(g, &init, loss, max_iters, tol)
}

/// Huber warm start followed by Geman-McClure refinement, both at scale `sigma`.
pub fn robust_rotation_average(g: &ViewGraph, sigma: f64, max_iters: usize, tol: f64) -> Result<IrlsReport> {
    let warm = irls_rotation_average(g, RobustLoss::Huber(sigma), max_iters, tol)?;
    let mut report = irls_from(g, &warm.rotations, RobustLoss::GemanMcClure(sigma), max_iters, tol)?;
    report.iterations += warm.iterations;
    Ok(report)
}

/// Iteratively reweighted Gauss-Newton on left tangent perturbations
/// `R_v <- exp(w_v) R_v`, with `w_0 = 0` and step halving so the objective
/// never increases.
pub fn irls_from(
    g: &ViewGraph,
    init: &[UnitQuaternion],
    loss: RobustLoss,
    max_iters: usize,
    tol: f64,
) -> Result<IrlsReport> {
    loss.validate()?;
    let n = g.vertex_count();
    if init.len() != n {
        return Err(Error::InvalidParameter(format!("{} initial rotations for {n} vertices", init.len())));
    }
    let mut rot = gauge_fix(init);
    let mut current = objective(g, &rot, &loss);
    let mut history = vec![current];
    let mut converged = false;
    let mut iterations = 0;
    let dim = 3 * (n - 1);

    while iterations < max_iters {
        iterations += 1;
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut b = DVector::<f64>::zeros(dim);
        for e in g.edges() {
            let err = edge_error(&e.measured, &rot[e.i], &rot[e.j]);
            let w = loss.weight(err.norm());
            let ji = *e.measured.to_matrix().matrix();
            let jj = -Matrix3::identity();
            let blocks = [(e.i, ji), (e.j, jj)];
            for &(a, ja) in &blocks {
                if a == 0 {
                    continue;
                }
                let ra = 3 * (a - 1);
                let gb = ja.transpose() * err * w;
                for r in 0..3 {
                    b[ra + r] += gb[r];
                }
                for &(c, jc) in &blocks {
                    if c == 0 {
                        continue;
                    }
                    let rc = 3 * (c - 1);
                    let hb = ja.transpose() * jc * w;
                    for r in 0..3 {
                        for s in 0..3 {
                            h[(ra + r, rc + s)] += hb[(r, s)];
                        }
                    }
                }
            }
        }
        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&(-&b)),
            None => h
                .svd(true, true)
                .solve(&(-&b), 1e-12)
                .map_err(|e| Error::InvalidParameter(format!("normal equations unsolvable: {e}")))?,
        };
        let mean_step = (1..n).map(|v| step.fixed_rows::<3>(3 * (v - 1)).norm()).sum::<f64>() / n as f64;
        if mean_step < tol {
            converged = true;
            break;
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let trial = apply_step(&rot, &step, alpha);
            let value = objective(g, &trial, &loss);
            if value <= current {
                accepted = Some((trial, value));
                break;
            }
            alpha *= 0.5;
        }
        let Some((trial, value)) = accepted else {
            converged = true;
            break;
        };
        rot = trial;
        current = value;
        history.push(current);
        if alpha * mean_step < tol {
            converged = true;
            break;
        }
    }
    let mean_residual = if g.edge_count() == 0 {
        0.0
    } else {
        g.edges().iter().map(|e| edge_error(&e.measured, &rot[e.i], &rot[e.j]).norm()).sum::<f64>()
            / g.edge_count() as f64
    };
    Ok(IrlsReport { rotations: rot, iterations, converged, objective_history: history, mean_residual })
}

fn apply_step(rot: &[UnitQuaternion], step: &DVector<f64>, alpha: f64) -> Vec<UnitQuaternion> {
    rot.iter()
        .enumerate()
        .map(|(v, q)| {
            if v == 0 {
                *q
            } else {
                let w = step.fixed_rows::<3>(3 * (v - 1)) * alpha;
                UnitQuaternion::exp(&AxisAngle(Vector3::new(w[0], w[1], w[2]))) * *q
            }
        })
        .collect()
}

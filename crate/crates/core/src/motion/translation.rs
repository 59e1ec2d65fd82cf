use nalgebra::{DMatrix, DVector, Vector3};

use crate::error::{Error, Result};
use crate::so3::RotationMatrix;

/// Measurement `t̃_ij = t_j - R_ij t_i` for an edge `i -> j`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativeTranslation {
    pub i: usize,
    pub j: usize,
    pub translation: Vector3<f64>,
}

/// Stacked least squares for `t_j - R_j R_iᵀ t_i = t̃_ij` with `t_0 = 0`.
pub fn translation_solve(rotations: &[RotationMatrix], edges: &[RelativeTranslation]) -> Result<Vec<Vector3<f64>>> {
    let n = rotations.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let unknowns = 3 * (n - 1);
    if unknowns == 0 {
        return Ok(vec![Vector3::zeros()]);
    }
    let mut a = DMatrix::<f64>::zeros(3 * edges.len(), unknowns);
    let mut b = DVector::<f64>::zeros(3 * edges.len());
    for (k, e) in edges.iter().enumerate() {
        if e.i >= n || e.j >= n || e.i == e.j {
            return Err(Error::InvalidParameter(format!("bad translation edge {}->{}", e.i, e.j)));
        }
        let rij = rotations[e.j].compose(&rotations[e.i].transpose());
        let row = 3 * k;
        if e.j != 0 {
            for r in 0..3 {
                a[(row + r, 3 * (e.j - 1) + r)] += 1.0;
            }
        }
        if e.i != 0 {
            for r in 0..3 {
                for c in 0..3 {
                    a[(row + r, 3 * (e.i - 1) + c)] -= rij.matrix()[(r, c)];
                }
            }
        }
        for r in 0..3 {
            b[row + r] = e.translation[r];
        }
    }
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * 1e-10 * (unknowns.max(3 * edges.len()) as f64);
    let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
    if rank < unknowns {
        return Err(Error::RankDeficient { rank, needed: unknowns });
    }
    let x = svd.solve(&b, eps).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut out = vec![Vector3::zeros()];
    for v in 1..n {
        out.push(Vector3::new(x[3 * (v - 1)], x[3 * (v - 1) + 1], x[3 * (v - 1) + 2]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::so3::UnitQuaternion;

    #[test]
    fn two_camera_chain() {
        let r0 = RotationMatrix::identity();
        let r1 = UnitQuaternion::new(0.9, 0.1, 0.3, -0.2).unwrap().to_matrix();
        let m = Vector3::new(1.0, -2.0, 0.5);
        let t = translation_solve(&[r0, r1], &[RelativeTranslation { i: 0, j: 1, translation: m }]).unwrap();
        // t_0 = 0 so t_1 = t̃_01
        assert!((t[1] - m).norm() < 1e-12);
    }

    #[test]
    fn missing_vertex_is_rank_deficient() {
        let rots = vec![RotationMatrix::identity(); 3];
        let edges = [RelativeTranslation { i: 0, j: 1, translation: Vector3::zeros() }];
        assert!(matches!(translation_solve(&rots, &edges), Err(Error::RankDeficient { rank: 3, needed: 6 })));
    }

    #[test]
    fn noiseless_recovers_truth() {
        let n = 6;
        let rots: Vec<RotationMatrix> =
            (0..n).map(|v| UnitQuaternion::random(&mut rng::stream(1, 0, v)).to_matrix()).collect();
        let mut ts: Vec<Vector3<f64>> = (0..n).map(|v| Vector3::new(v as f64, (v * v) as f64 * 0.1, -1.0)).collect();
        ts[0] = Vector3::zeros();
        let mut edges = Vec::new();
        for i in 0..n as usize {
            for j in 0..n as usize {
                if i < j && (i + j) % 2 == 1 || j == i + 1 {
                    let rij = rots[j].compose(&rots[i].transpose());
                    edges.push(RelativeTranslation { i, j, translation: ts[j] - rij.rotate(&ts[i]) });
                }
            }
        }
        let sol = translation_solve(&rots, &edges).unwrap();
        for (a, b) in sol.iter().zip(&ts) {
            assert!((a - b).norm() < 1e-10);
        }
    }
}

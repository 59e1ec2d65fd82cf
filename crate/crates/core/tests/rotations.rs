use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use posefield::bench::ring_view_graph;
use posefield::motion::{
    irls_rotation_average, pretrained_refiner, refiner_forward, refiner_forward_from, robust_rotation_average,
    translation_solve, RefinerParams, RelativeTranslation, RobustLoss,
};
use posefield::rng;
use posefield::scene::{build_rig, RigSpec};
use posefield::so3::{d_q, AxisAngle, RotationMatrix, UnitQuaternion};
use posefield::viewgraph::{
    gauge_aligned_errors, generate_synthetic_graph, mean, perturb_absolute_poses, perturb_edges, spanning_tree_init, Edge,
    NoiseSpec, Vertex, ViewGraph,
};

/// Geodesic angles of `n` rotations `exp(v)`, `v ~ N(0, sigma² I)`, from an
/// independent generator.
fn angle_oracle(sigma: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut g = ChaCha20Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let v: [f64; 3] = [StandardNormal.sample(&mut g), StandardNormal.sample(&mut g), StandardNormal.sample(&mut g)];
            let a = sigma * Vector3::from(v).norm();
            // Angles beyond pi wrap to 2 pi - a.
            if a > std::f64::consts::PI { 2.0 * std::f64::consts::PI - a } else { a }
        })
        .collect()
}

fn quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[((s.len() - 1) as f64 * q).round() as usize]
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn edge_noise_matches_sampling_oracle() {
    let oracle = mean(&angle_oracle(0.1, 1_000_000, 1));
    let g = generate_synthetic_graph(80, 1.0, 4).unwrap();
    let noisy = perturb_edges(&g, &NoiseSpec::new(0.1, 0.0, 5).unwrap()).unwrap();
    let angles: Vec<f64> = g.edges().iter().zip(noisy.edges()).map(|(a, b)| a.measured.angle_to(&b.measured)).collect();
    assert_eq!(angles.len(), 80 * 79 / 2);
    let m = mean(&angles);
    assert!(rel(m, oracle) < 0.05, "{m} vs {oracle}");
    assert!(noisy.edges().iter().all(|e| e.outlier == Some(false) || e.outlier.is_none()));
}

#[test]
fn pose_noise_matches_sampling_oracle() {
    let oracle = angle_oracle(0.1, 10_000, 2);
    let rig = build_rig(&RigSpec { n_cams: 10_000, ..RigSpec::default() }).unwrap();
    let noisy = perturb_absolute_poses(&rig.poses, 0.1, 7).unwrap();
    let err: Vec<f64> = rig.poses.iter().zip(&noisy).map(|(a, b)| a.rotation.angle_to(&b.rotation)).collect();
    for q in [0.25, 0.5, 0.75] {
        assert!(rel(quantile(&err, q), quantile(&oracle, q)) < 0.05, "quantile {q}");
    }
    assert!(rel(mean(&err), mean(&oracle)) < 0.05);
    assert!(rig.poses.iter().zip(&noisy).all(|(a, b)| a.translation == b.translation && a.intrinsics == b.intrinsics));
}

#[test]
fn hundred_camera_perturbation_protocol() {
    let rig = build_rig(&RigSpec { n_cams: 100, ..RigSpec::default() }).unwrap();
    let noisy = perturb_absolute_poses(&rig.poses, 0.1, 0).unwrap();
    let err: Vec<f64> = rig.poses.iter().zip(&noisy).map(|(a, b)| a.rotation.angle_to(&b.rotation)).collect();
    let oracle = angle_oracle(0.1, 1_000_000, 3);
    let (om, osd) = (mean(&oracle), (oracle.iter().map(|a| (a - mean(&oracle)).powi(2)).sum::<f64>() / oracle.len() as f64).sqrt());
    // Mean of 100 draws within 3 standard errors.
    assert!((mean(&err) - om).abs() < 3.0 * osd / 10.0, "{} vs {om}", mean(&err));
    // Orientations change, positions in the world do not stay put.
    let moved = rig.poses.iter().zip(&noisy).filter(|(a, b)| (a.center() - b.center()).norm() > 1e-6).count();
    assert_eq!(moved, 100);
}

#[test]
fn outlier_fraction_of_hundred_edges() {
    let rots: Vec<UnitQuaternion> =
        (0..25).map(|k| UnitQuaternion::random(&mut rng::stream(3, rng::domain::GRAPH_ROTATIONS, k))).collect();
    let g = ring_view_graph(&rots, 4).unwrap();
    assert_eq!(g.edge_count(), 100);
    let noisy = perturb_edges(&g, &NoiseSpec::new(0.0, 0.2, 11).unwrap()).unwrap();
    assert_eq!(noisy.outlier_count(), 20);
}

/// Brute-force linearization: residual of edge `i -> j` under left updates
/// `exp(w_v) R_v` is `delta_ij + R_ij w_i - w_j`.
#[test]
fn irls_matches_linearized_least_squares_on_four_vertices() {
    let g = generate_synthetic_graph(4, 1.0, 21).unwrap();
    let gt = g.ground_truth().unwrap();
    let delta = Vector3::new(4e-5, -7e-5, 2e-5);
    let mut edges: Vec<Edge> = g.edges().to_vec();
    edges[2].measured = UnitQuaternion::exp(&AxisAngle(delta)) * edges[2].measured;
    let noisy = ViewGraph::new(g.vertices().to_vec(), edges.clone()).unwrap();

    let mut a = DMatrix::<f64>::zeros(3 * edges.len(), 9);
    let mut b = DVector::<f64>::zeros(3 * edges.len());
    for (k, e) in edges.iter().enumerate() {
        let rij = (gt[e.j] * gt[e.i].inverse()).to_matrix();
        let d = if k == 2 { delta } else { Vector3::zeros() };
        for r in 0..3 {
            if e.i != 0 {
                for c in 0..3 {
                    a[(3 * k + r, 3 * (e.i - 1) + c)] += rij.matrix()[(r, c)];
                }
            }
            if e.j != 0 {
                a[(3 * k + r, 3 * (e.j - 1) + r)] -= 1.0;
            }
            b[3 * k + r] = -d[r];
        }
    }
    let w = (a.transpose() * &a).lu().solve(&(a.transpose() * b)).unwrap();
    let oracle: Vec<UnitQuaternion> = (0..4)
        .map(|v| if v == 0 { gt[0] } else { UnitQuaternion::exp(&AxisAngle(Vector3::new(w[3 * v - 3], w[3 * v - 2], w[3 * v - 1]))) * gt[v] })
        .collect();
    let rep = irls_rotation_average(&noisy, RobustLoss::L2, 50, 1e-12).unwrap();
    let err = gauge_aligned_errors(&rep.rotations, &oracle);
    assert!(err.iter().all(|e| *e < 1e-6), "{err:?}");
    // The linearized correction is not trivial at this scale.
    assert!(w.norm() > 1e-5);
}

#[test]
fn geman_mcclure_beats_l2_with_outliers_on_every_seed() {
    for seed in 0..20 {
        let g = generate_synthetic_graph(20, 0.3, 100 + seed).unwrap();
        let gt = g.ground_truth().unwrap();
        let noisy = perturb_edges(&g, &NoiseSpec::new(2f64.to_radians(), 0.2, seed).unwrap()).unwrap();
        let l2 = mean(&gauge_aligned_errors(&irls_rotation_average(&noisy, RobustLoss::L2, 50, 1e-8).unwrap().rotations, &gt));
        let gm = mean(&gauge_aligned_errors(&robust_rotation_average(&noisy, 0.1, 50, 1e-8).unwrap().rotations, &gt));
        assert!(gm < l2, "seed {seed}: {gm} vs {l2}");
    }
}

#[test]
fn every_solver_is_exact_on_noiseless_graphs() {
    let refiner = pretrained_refiner().unwrap();
    for seed in 0..10 {
        let g = generate_synthetic_graph(12, 0.4, seed).unwrap();
        let gt = g.ground_truth().unwrap();
        let solutions = [
            spanning_tree_init(&g).unwrap(),
            irls_rotation_average(&g, RobustLoss::L2, 50, 1e-8).unwrap().rotations,
            irls_rotation_average(&g, RobustLoss::GemanMcClure(0.1), 50, 1e-8).unwrap().rotations,
            refiner_forward(&g, &refiner).unwrap(),
        ];
        for (k, s) in solutions.iter().enumerate() {
            let e = gauge_aligned_errors(s, &gt);
            assert!(e.iter().all(|x| *x < 1e-5), "seed {seed} solver {k}: {e:?}");
            assert!(s[0].angle_to(&UnitQuaternion::identity()) < 1e-9);
        }
    }
}

#[test]
fn global_rotation_of_ground_truth_is_invisible() {
    let g = generate_synthetic_graph(15, 0.3, 8).unwrap();
    let noisy = perturb_edges(&g, &NoiseSpec::new(0.05, 0.1, 9).unwrap()).unwrap();
    let s = UnitQuaternion::exp(&AxisAngle::new(0.7, -1.1, 0.4));
    let vertices: Vec<Vertex> =
        g.vertices().iter().map(|v| Vertex { ground_truth: v.ground_truth.map(|q| q * s), ..v.clone() }).collect();
    let gt2: Vec<UnitQuaternion> = vertices.iter().map(|v| v.ground_truth.unwrap()).collect();
    let clean2 = ViewGraph::new(
        vertices.clone(),
        g.edges().iter().map(|e| Edge { measured: gt2[e.j] * gt2[e.i].inverse(), ..e.clone() }).collect(),
    )
    .unwrap();
    for (a, b) in g.edges().iter().zip(clean2.edges()) {
        assert!(a.measured.angle_to(&b.measured) < 1e-12);
    }
    let noisy2 = ViewGraph::new(vertices, noisy.edges().to_vec()).unwrap();
    let a = irls_rotation_average(&noisy, RobustLoss::Huber(0.1), 50, 1e-10).unwrap().rotations;
    let b = irls_rotation_average(&noisy2, RobustLoss::Huber(0.1), 50, 1e-10).unwrap().rotations;
    assert!(a.iter().zip(&b).all(|(x, y)| x.angle_to(y) < 1e-9));
    let ea = gauge_aligned_errors(&a, &g.ground_truth().unwrap());
    let eb = gauge_aligned_errors(&b, &noisy2.ground_truth().unwrap());
    assert!(ea.iter().zip(&eb).all(|(x, y)| (x - y).abs() < 1e-9));
}

fn permuted(g: &ViewGraph, perm: &[usize]) -> ViewGraph {
    let mut vertices: Vec<Vertex> = g.vertices().iter().map(|v| Vertex { id: perm[v.id], ..v.clone() }).collect();
    vertices.sort_by_key(|v| v.id);
    let edges = g.edges().iter().map(|e| Edge { i: perm[e.i], j: perm[e.j], ..e.clone() }).collect();
    ViewGraph::new(vertices, edges).unwrap()
}

#[test]
fn refiner_is_permutation_equivariant() {
    let params = RefinerParams::random(3, 16, 5);
    let g = perturb_edges(&generate_synthetic_graph(10, 0.4, 12).unwrap(), &NoiseSpec::new(0.1, 0.1, 1).unwrap()).unwrap();
    let init = spanning_tree_init(&g).unwrap();
    let out = refiner_forward_from(&g, &init, &params).unwrap();
    // Vertex 0 carries the gauge, so it stays in place.
    let perm = [0, 7, 3, 9, 1, 8, 2, 6, 4, 5];
    let pg = permuted(&g, &perm);
    let mut pinit = vec![UnitQuaternion::identity(); 10];
    for (v, q) in init.iter().enumerate() {
        pinit[perm[v]] = *q;
    }
    let pout = refiner_forward_from(&pg, &pinit, &params).unwrap();
    for v in 0..10 {
        assert!(d_q(&out[v], &pout[perm[v]]) < 1e-12, "vertex {v}");
    }
}

/// Normal equations `AᵀA x = Aᵀb` built from scratch.
#[test]
fn translation_solve_matches_normal_equations() {
    let n = 6;
    let rots: Vec<RotationMatrix> =
        (0..n).map(|k| UnitQuaternion::random(&mut rng::stream(4, rng::domain::GRAPH_ROTATIONS, k as u64)).to_matrix()).collect();
    let mut g = ChaCha20Rng::seed_from_u64(10);
    let mut normal = || -> f64 { StandardNormal.sample(&mut g) };
    let truth: Vec<Vector3<f64>> = (0..n).map(|k| if k == 0 { Vector3::zeros() } else { Vector3::new(normal(), normal(), normal()) }).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i < j && (j - i <= 2 || (i + j) % 3 == 0) {
                let rij = rots[j].compose(&rots[i].transpose());
                let noise = 0.05 * Vector3::new(normal(), normal(), normal());
                edges.push(RelativeTranslation { i, j, translation: truth[j] - rij.rotate(&truth[i]) + noise });
            }
        }
    }
    let solved = translation_solve(&rots, &edges).unwrap();

    let m = 3 * (n - 1);
    let mut ata = DMatrix::<f64>::zeros(m, m);
    let mut atb = DVector::<f64>::zeros(m);
    for e in &edges {
        let rij: Matrix3<f64> = *rots[e.j].compose(&rots[e.i].transpose()).matrix();
        let mut row_block = DMatrix::<f64>::zeros(3, m);
        if e.j > 0 {
            for r in 0..3 {
                row_block[(r, 3 * (e.j - 1) + r)] = 1.0;
            }
        }
        if e.i > 0 {
            for r in 0..3 {
                for c in 0..3 {
                    row_block[(r, 3 * (e.i - 1) + c)] = -rij[(r, c)];
                }
            }
        }
        ata += row_block.transpose() * &row_block;
        atb += row_block.transpose() * DVector::from_column_slice(e.translation.as_slice());
    }
    let x = ata.cholesky().unwrap().solve(&atb);
    assert_eq!(solved[0], Vector3::zeros());
    for k in 1..n {
        let o = Vector3::new(x[3 * k - 3], x[3 * k - 2], x[3 * k - 1]);
        assert!((solved[k] - o).norm() < 1e-8, "camera {k}");
    }
}

fn quat() -> impl Strategy<Value = UnitQuaternion> {
    (-4.0..4.0f64, -4.0..4.0f64, -4.0..4.0f64).prop_map(|(x, y, z)| UnitQuaternion::exp(&AxisAngle::new(x, y, z)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quaternions_are_canonical_unit(q in quat(), p in quat()) {
        let r = q * p;
        prop_assert!((r.norm() - 1.0).abs() < 1e-12);
        prop_assert!(r.w() >= 0.0);
        prop_assert!(d_q(&q, &p) >= 0.0);
        prop_assert!((d_q(&q, &p) - d_q(&p, &q)).abs() < 1e-15);
    }

    #[test]
    fn matrix_map_is_a_homomorphism(q in quat(), p in quat()) {
        let lhs = (q * p).to_matrix();
        let rhs = q.to_matrix().compose(&p.to_matrix());
        prop_assert!((lhs.matrix() - rhs.matrix()).norm() < 1e-12);
    }

    #[test]
    fn noiseless_three_cycles_close(seed in 0u64..500) {
        let g = generate_synthetic_graph(7, 0.8, seed).unwrap();
        let mut m = std::collections::HashMap::new();
        for e in g.edges() {
            m.insert((e.i, e.j), e.measured);
            m.insert((e.j, e.i), e.measured.inverse());
        }
        for a in 0..7 { for b in 0..7 { for c in 0..7 {
            if let (Some(ab), Some(bc), Some(ca)) = (m.get(&(a, b)), m.get(&(b, c)), m.get(&(c, a))) {
                prop_assert!((*ca * *bc * *ab).angle_to(&UnitQuaternion::identity()) < 1e-7);
            }
        }}}
    }

    #[test]
    fn zero_noise_is_bit_exact(seed in 0u64..500) {
        let g = generate_synthetic_graph(8, 0.5, seed).unwrap();
        let same = perturb_edges(&g, &NoiseSpec::new(0.0, 0.0, seed).unwrap()).unwrap();
        prop_assert_eq!(g.to_json().unwrap(), same.to_json().unwrap());
    }

    #[test]
    fn solvers_fix_vertex_zero(seed in 0u64..200, sigma in 0.0..0.3f64, frac in 0.0..0.3f64) {
        let g = generate_synthetic_graph(9, 0.4, seed).unwrap();
        let g = perturb_edges(&g, &NoiseSpec::new(sigma, frac, seed).unwrap()).unwrap();
        let tree = spanning_tree_init(&g).unwrap();
        let irls = irls_rotation_average(&g, RobustLoss::Huber(0.1), 20, 1e-8).unwrap();
        prop_assert!(tree[0].angle_to(&UnitQuaternion::identity()) < 1e-9);
        prop_assert!(irls.rotations[0].angle_to(&UnitQuaternion::identity()) < 1e-9);
        for w in irls.objective_history.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
    }
}

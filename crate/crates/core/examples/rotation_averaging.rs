//! Spanning-tree initialization, L2 and robust IRLS, and the bundled refiner
//! on one noisy synthetic view graph.
//!
//! `cargo run --release --example rotation_averaging -- [seed] [outlier_fraction]`

use posefield::motion::{irls_rotation_average, pretrained_refiner, refiner_forward, robust_rotation_average, RobustLoss};
use posefield::viewgraph::{gauge_aligned_errors, generate_synthetic_graph, mean, perturb_edges, spanning_tree_init, NoiseSpec};

fn main() -> posefield::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let outliers: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0.1);

    let clean = generate_synthetic_graph(20, 0.3, seed)?;
    let g = perturb_edges(&clean, &NoiseSpec::new(5f64.to_radians(), outliers, seed)?)?;
    let gt = g.ground_truth()?;
    println!("{} vertices, {} edges, {} outliers", g.vertex_count(), g.edge_count(), g.outlier_count());

    let report = |name: &str, est: &[posefield::so3::UnitQuaternion]| {
        println!("{name:>10}: mean error {:.3} deg", mean(&gauge_aligned_errors(est, &gt)).to_degrees());
    };
    report("tree", &spanning_tree_init(&g)?);
    let l2 = irls_rotation_average(&g, RobustLoss::L2, 50, 1e-8)?;
    report("irls-l2", &l2.rotations);
    println!("{:>10}  {} iterations, converged: {}", "", l2.iterations, l2.converged);
    report("irls-gm", &robust_rotation_average(&g, 0.1, 50, 1e-8)?.rotations);
    report("refiner", &refiner_forward(&g, &pretrained_refiner()?)?);
    Ok(())
}

//! Trains the message-passing rotation refiner on synthetic graphs and
//! compares it with the spanning-tree initialization on held-out graphs.
//!
//! `cargo run --release --example train_refiner -- [out.bin]`

use std::path::PathBuf;

use posefield::bench::{graph_set, GraphSetSpec};
use posefield::config::FlatConfig;
use posefield::motion::{refiner_forward, train_refiner, RefinerConfig};
use posefield::viewgraph::{gauge_aligned_errors, mean, spanning_tree_init};

fn main() -> posefield::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("refiner.bin"));
    let data = GraphSetSpec::refiner_training();
    let cfg = RefinerConfig::default();
    let train = graph_set(&data)?;
    let start = std::time::Instant::now();
    let (params, report) = train_refiner(&train, &cfg)?;
    println!(
        "trained {} epochs in {:.1}s: loss {:.4} -> {:.4}",
        cfg.epochs,
        start.elapsed().as_secs_f64(),
        report.loss_history[0],
        report.loss_history.last().copied().unwrap_or(f64::NAN)
    );

    let mut wins = 0;
    let held_out = graph_set(&GraphSetSpec::refiner_held_out())?;
    for g in &held_out {
        let gt = g.ground_truth()?;
        let tree = mean(&gauge_aligned_errors(&spanning_tree_init(g)?, &gt));
        let refined = mean(&gauge_aligned_errors(&refiner_forward(g, &params)?, &gt));
        wins += usize::from(refined < tree);
        println!("tree {:.4}  refiner {:.4}", tree.to_degrees(), refined.to_degrees());
    }
    println!("refiner beats the tree on {wins}/{} held-out graphs", held_out.len());

    let mut key = FlatConfig::new();
    key.set("rounds", cfg.rounds);
    key.set("hidden", cfg.hidden);
    key.set("beta", cfg.beta);
    key.set("step", cfg.step);
    key.set("epochs", cfg.epochs);
    key.set("seed", cfg.seed);
    key.set("graphs", data.count);
    key.set("first_seed", data.first_seed);
    key.set("sigma", data.sigma);
    key.set("outliers", data.outliers);
    params.save(&out, &key.hash())?;
    println!("saved {}", out.display());
    Ok(())
}

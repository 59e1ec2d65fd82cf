//! The synth, train, render and eval steps without the command line: a small
//! dataset is written to disk, trained on, and scored on held-out views.
//!
//! `cargo run --release --example pipeline -- [out_dir] [epochs]`

use std::path::PathBuf;

use posefield::bench::run_toy;
use posefield::config::FlatConfig;
use posefield::experiment::{load_dataset, save_dataset, ExperimentConfig};
use posefield::joint::align_test_poses;
use posefield::motion::pretrained_refiner;

fn main() -> posefield::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("pipeline_out"));
    let epochs = args.next().unwrap_or_else(|| "10".into());

    let mut flat = FlatConfig::new();
    flat.set("n_cams", 8);
    flat.set("width", 24);
    flat.set("height", 24);
    flat.set("epochs", &epochs);
    flat.set("steps_per_epoch", 10);
    let cfg = ExperimentConfig::from_flat(&flat, Some(1))?;
    let toy = posefield::bench::build_toy(&cfg.toy)?;
    let manifest = save_dataset(&toy, &cfg, &out)?;
    println!("dataset {} with {} training images (config {})", out.display(), manifest.train_images.len(), &cfg.hash()[..12]);

    let (toy, cfg) = load_dataset(&out)?;
    let joint = run_toy(&toy, &cfg.train, Some(pretrained_refiner()?))?;
    for m in &joint.metrics {
        println!("epoch {:>3}  lambda {:.3}  t {:.2}  L_rgb {:.4}  rot err {:.4}", m.epoch, m.lambda, m.anneal_t, m.l_rgb, m.mean_rot_err_rad.unwrap_or(f64::NAN));
    }
    let frozen = run_toy(&toy, &posefield::joint::TrainConfig { freeze_poses: true, ..cfg.train.clone() }, None)?;
    println!("rotation error {:.4} -> {:.4} rad", joint.initial_rot_err, joint.final_rot_err);
    println!("held-out PSNR: joint {:.2} dB, frozen poses {:.2} dB", joint.test_psnr, frozen.test_psnr);

    let est = joint.state.poses(&toy.graph, &toy.noisy_poses)?;
    let aligned = align_test_poses(&est, &toy.rig.poses, &toy.test_views().0)?;
    println!("{} held-out views aligned to the estimated frame", aligned.len());
    Ok(())
}

//! Joint pose and field optimization on the toy scene, next to a field
//! trained on the frozen noisy poses and a fixed-λ variant.
//!
//! `cargo run --release --example joint_toy -- [seed] [epochs] [steps per epoch]`

use std::time::Instant;

use posefield::bench::{build_toy, run_toy, ToySpec};
use posefield::joint::{LambdaMode, TrainConfig};
use posefield::motion::pretrained_refiner;

fn main() -> posefield::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse().expect("seed")).unwrap_or(0);
    let epochs: usize = args.next().map(|s| s.parse().expect("epochs")).unwrap_or(40);
    let steps: usize = args.next().map(|s| s.parse().expect("steps")).unwrap_or(10);
    let toy = build_toy(&ToySpec::with_seed(seed))?;
    let base = TrainConfig { seed, steps_per_epoch: steps, ..TrainConfig::with_epochs(epochs) };
    let variants = [
        ("annealed", base.clone()),
        ("frozen", TrainConfig { freeze_poses: true, ..base.clone() }),
        ("fixed-0.5", TrainConfig { lambda_mode: LambdaMode::Fixed(0.5), ..base.clone() }),
    ];
    for (name, cfg) in variants {
        let start = Instant::now();
        let out = run_toy(&toy, &cfg, Some(pretrained_refiner()?))?;
        for m in &out.metrics {
            println!(
                "  {name} epoch {:3} lambda {:.3} t {:.2} rgb {:.4} mra {:.4} rot {:.4} psnr {:.2}",
                m.epoch,
                m.lambda,
                m.anneal_t,
                m.l_rgb,
                m.l_mra,
                m.mean_rot_err_rad.unwrap_or(f64::NAN),
                m.psnr
            );
        }
        println!(
            "{name}: rotation error {:.4} -> {:.4} rad, test PSNR {:.2} dB ({:.1}s)",
            out.initial_rot_err,
            out.final_rot_err,
            out.test_psnr,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::Vector3;
use rand::Rng;

use posefield::bench::{build_toy, graph_set, run_toy, GraphSetSpec, ToySpec};
use posefield::ipe::{frustum_to_gaussian, ipe_encode, ipe_monte_carlo, annealed_weight, ConicalFrustum, EncodingConfig};
use posefield::joint::{
    combined_loss_grad, lambda_schedule, sample_batch, JointState, LambdaMode, TrainConfig,
};
use posefield::field::TapeRenderer;
use posefield::motion::{
    irls_rotation_average, pretrained_refiner, refiner_forward, robust_rotation_average, train_refiner, RefinerConfig,
    RobustLoss,
};
use posefield::rng;
use posefield::scene::RigSpec;
use posefield::viewgraph::{gauge_aligned_errors, generate_synthetic_graph, mean, perturb_edges, spanning_tree_init, NoiseSpec};

// Criterion 1
const IPE_FRUSTUMS: usize = 100;
const IPE_SAMPLES: usize = 1_000_000;
const IPE_OCTAVES: usize = 4;
const IPE_REL_TOL: f64 = 0.05;
const IPE_SE_TOL: f64 = 3.0;
const IPE_BUDGET_S: f64 = 120.0;
// Criterion 2
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_FLOOR: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
const GRAD_BUDGET_S: f64 = 60.0;
// Criterion 3
const RA_SEEDS: u64 = 20;
const RA_VERTICES: usize = 20;
const RA_EDGE_PROB: f64 = 0.3;
const RA_SIGMA_DEG: f64 = 5.0;
const RA_OUTLIERS: f64 = 0.2;
const RA_ROBUST_SCALE: f64 = 0.1;
const RA_MAX_ITERS: usize = 50;
const RA_TOL: f64 = 1e-8;
const RA_CLEAN_WINS: usize = 19;
const RA_ROBUST_WINS: usize = 18;
const RA_BUDGET_S: f64 = 120.0;
// Criterion 4
const REFINER_WINS: usize = 18;
const REFINER_BUDGET_S: f64 = 600.0;
// Criteria 5 and 6
const JOINT_SEEDS: u64 = 5;
const JOINT_EPOCHS: usize = 40;
const JOINT_STEPS: usize = 40;
const JOINT_ROT_RATIO: f64 = 0.5;
const JOINT_PSNR_MARGIN_DB: f64 = 2.0;
const JOINT_MIN_SEEDS: usize = 4;
const JOINT_BUDGET_S: f64 = 1800.0;
const ABLATION_FIXED_LAMBDA: f64 = 0.5;

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    println!("ACCEPTANCE {id} {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} failed: {detail}");
}

fn random_unit<R: Rng>(g: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(2.0 * g.random::<f64>() - 1.0, 2.0 * g.random::<f64>() - 1.0, 2.0 * g.random::<f64>() - 1.0);
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

#[test]
fn c1_ipe_matches_monte_carlo() {
    let start = Instant::now();
    let mut g = rng::stream(2024, rng::domain::MONTE_CARLO, u64::MAX);
    let mut bad = 0usize;
    let mut worst = 0.0f64;
    let mut max_ratio = 0.0f64;
    for k in 0..IPE_FRUSTUMS {
        let origin = Vector3::new(g.random::<f64>() - 0.5, g.random::<f64>() - 0.5, g.random::<f64>() - 0.5);
        let dir = random_unit(&mut g);
        let t0 = 1.0 + 2.0 * g.random::<f64>();
        let t1 = t0 * (1.0 + 0.01 + 0.09 * g.random::<f64>());
        let radius = 0.001 + 0.009 * g.random::<f64>();
        max_ratio = max_ratio.max(t1 / t0);
        let f = ConicalFrustum::new(origin, dir, radius, t0, t1).unwrap();
        let closed = ipe_encode(&frustum_to_gaussian(&f), IPE_OCTAVES);
        let mc = ipe_monte_carlo(&f, IPE_OCTAVES, IPE_SAMPLES, k as u64).unwrap();
        for c in 0..closed.len() {
            let tol = (IPE_REL_TOL * closed[c].abs()).max(IPE_SE_TOL * mc.std_error[c]);
            let dev = (mc.mean[c] - closed[c]).abs();
            worst = worst.max(dev / tol);
            bad += usize::from(dev > tol);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "IPE matches Monte Carlo",
        bad == 0 && max_ratio <= 2.0 && secs < IPE_BUDGET_S,
        &format!("{bad} components out of tolerance, worst deviation {worst:.3} of tolerance, max t1/t0 {max_ratio:.3}, {secs:.1}s"),
    );
}

#[test]
fn c2_combined_loss_gradient_matches_finite_differences() {
    let start = Instant::now();
    let spec = ToySpec {
        rig: RigSpec { n_cams: 2, base_width: 8, base_height: 8, ..RigSpec::default() },
        test_cams: 2,
        ring_neighbors: 1,
        samples: 8,
        ..ToySpec::with_seed(11)
    };
    let toy = build_toy(&spec).unwrap();
    let ds = toy.dataset();
    let cfg = TrainConfig { hidden: 8, samples: 8, rays_per_step: 4, chunk: 2, ..TrainConfig::with_epochs(10) };
    let state = JointState::new(&ds, &cfg, Some(pretrained_refiner().unwrap())).unwrap();
    let centers: Vec<_> = toy.noisy_poses.iter().map(|p| p.center()).collect();
    let batch = sample_batch(&ds, &centers, &cfg, 0).unwrap();
    assert_eq!(batch.len(), 4);
    let renderer = TapeRenderer::new(&cfg.encoding(2.3), &cfg.field_config(), cfg.samples);
    let lambda = 0.5;
    let loss = |s: &JointState| combined_loss_grad(s, &ds.graph, &batch, &renderer, &cfg, lambda, false).unwrap().0.total;
    let (_, grad) = combined_loss_grad(&state, &ds.graph, &batch, &renderer, &cfg, lambda, true).unwrap();
    let grad = grad.unwrap();

    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for k in 0..state.field.len() {
        let mut s = state.clone();
        s.field.values_mut()[k] += GRAD_STEP;
        let up = loss(&s);
        s.field.values_mut()[k] -= 2.0 * GRAD_STEP;
        let down = loss(&s);
        worst = worst.max(rel(grad.field[k], (up - down) / (2.0 * GRAD_STEP)));
        checked += 1;
    }
    let n_refiner = match &state.poses {
        posefield::joint::PoseModel::Refined { refiner, .. } => refiner.len(),
        posefield::joint::PoseModel::Fixed(_) => 0,
    };
    assert!(n_refiner > 0);
    for k in 0..n_refiner {
        let eval = |delta: f64| {
            let mut s = state.clone();
            if let posefield::joint::PoseModel::Refined { refiner, .. } = &mut s.poses {
                refiner.values_mut()[k] += delta;
            }
            loss(&s)
        };
        worst = worst.max(rel(grad.refiner[k], (eval(GRAD_STEP) - eval(-GRAD_STEP)) / (2.0 * GRAD_STEP)));
        checked += 1;
    }
    // Camera 0 fixes the translation gauge and is not a parameter.
    assert_eq!(grad.translations[0], [0.0; 3]);
    for j in 1..state.translations.len() {
        for a in 0..3 {
            let eval = |delta: f64| {
                let mut s = state.clone();
                s.translations[j][a] += delta;
                loss(&s)
            };
            worst = worst.max(rel(grad.translations[j][a], (eval(GRAD_STEP) - eval(-GRAD_STEP)) / (2.0 * GRAD_STEP)));
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        2,
        "combined-loss gradients",
        worst < GRAD_REL_TOL && secs < GRAD_BUDGET_S,
        &format!("{checked} parameters, worst relative error {worst:.2e}, {secs:.1}s"),
    );
}

#[test]
fn c3_rotation_averaging() {
    let start = Instant::now();
    let sigma = RA_SIGMA_DEG.to_radians();
    let (mut clean_wins, mut robust_wins) = (0, 0);
    for seed in 0..RA_SEEDS {
        let g = generate_synthetic_graph(RA_VERTICES, RA_EDGE_PROB, seed).unwrap();
        let gt = g.ground_truth().unwrap();
        let err = |r: &[posefield::so3::UnitQuaternion]| mean(&gauge_aligned_errors(r, &gt));

        let noisy = perturb_edges(&g, &NoiseSpec::new(sigma, 0.0, rng::derive_seed(seed, 3)).unwrap()).unwrap();
        let tree = err(&spanning_tree_init(&noisy).unwrap());
        let irls = err(&irls_rotation_average(&noisy, RobustLoss::L2, RA_MAX_ITERS, RA_TOL).unwrap().rotations);
        clean_wins += usize::from(irls < tree);

        let spec = NoiseSpec::new(sigma, RA_OUTLIERS, rng::derive_seed(seed, 3)).unwrap();
        let dirty = perturb_edges(&g, &spec).unwrap();
        let l2 = err(&irls_rotation_average(&dirty, RobustLoss::L2, RA_MAX_ITERS, RA_TOL).unwrap().rotations);
        let robust = err(&robust_rotation_average(&dirty, RA_ROBUST_SCALE, RA_MAX_ITERS, RA_TOL).unwrap().rotations);
        robust_wins += usize::from(robust < l2);
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        3,
        "rotation averaging",
        clean_wins >= RA_CLEAN_WINS && robust_wins >= RA_ROBUST_WINS && secs < RA_BUDGET_S,
        &format!("IRLS < tree on {clean_wins}/{RA_SEEDS}, robust < L2 on {robust_wins}/{RA_SEEDS} with 20% outliers, {secs:.1}s"),
    );
}

#[test]
fn c4_learned_refiner() {
    let train = graph_set(&GraphSetSpec::refiner_training()).unwrap();
    let start = Instant::now();
    let (params, _) = train_refiner(&train, &RefinerConfig::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let held_out = graph_set(&GraphSetSpec::refiner_held_out()).unwrap();
    let mut wins = 0;
    for g in &held_out {
        let gt = g.ground_truth().unwrap();
        let tree = mean(&gauge_aligned_errors(&spanning_tree_init(g).unwrap(), &gt));
        let refined = mean(&gauge_aligned_errors(&refiner_forward(g, &params).unwrap(), &gt));
        wins += usize::from(refined < tree);
    }
    verdict(
        4,
        "learned refiner",
        wins >= REFINER_WINS && secs < REFINER_BUDGET_S,
        &format!("refiner < tree on {wins}/{} held-out graphs, trained in {secs:.1}s", held_out.len()),
    );
}

struct SeedRuns {
    seed: u64,
    init_err: f64,
    annealed_err: f64,
    annealed_psnr: f64,
    frozen_psnr: f64,
    fixed_psnr: f64,
}

struct JointRuns {
    seeds: Vec<SeedRuns>,
    /// Wall time of the annealed and frozen runs.
    secs: f64,
}

fn joint_cfg(seed: u64) -> TrainConfig {
    TrainConfig { steps_per_epoch: JOINT_STEPS, seed, ..TrainConfig::with_epochs(JOINT_EPOCHS) }
}

fn joint_runs() -> &'static JointRuns {
    static RUNS: OnceLock<JointRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let refiner = pretrained_refiner().unwrap();
        let mut secs = 0.0;
        let seeds = (0..JOINT_SEEDS)
            .map(|seed| {
                let toy = build_toy(&ToySpec::with_seed(seed)).unwrap();
                let cfg = joint_cfg(seed);
                let t = Instant::now();
                let annealed = run_toy(&toy, &cfg, Some(refiner.clone())).unwrap();
                let frozen = run_toy(&toy, &TrainConfig { freeze_poses: true, ..cfg.clone() }, None).unwrap();
                secs += t.elapsed().as_secs_f64();
                let fixed_cfg = TrainConfig { lambda_mode: LambdaMode::Fixed(ABLATION_FIXED_LAMBDA), ..cfg };
                let fixed = run_toy(&toy, &fixed_cfg, Some(refiner.clone())).unwrap();
                let r = SeedRuns {
                    seed,
                    init_err: annealed.initial_rot_err,
                    annealed_err: annealed.final_rot_err,
                    annealed_psnr: annealed.test_psnr,
                    frozen_psnr: frozen.test_psnr,
                    fixed_psnr: fixed.test_psnr,
                };
                println!(
                    "  seed {}: rot err {:.4} -> {:.4} rad, PSNR annealed {:.2} frozen {:.2} fixed {:.2}",
                    r.seed, r.init_err, r.annealed_err, r.annealed_psnr, r.frozen_psnr, r.fixed_psnr
                );
                r
            })
            .collect();
        JointRuns { seeds, secs }
    })
}

#[test]
fn c5_joint_optimization() {
    let runs = joint_runs();
    let good = runs
        .seeds
        .iter()
        .filter(|r| r.annealed_err <= JOINT_ROT_RATIO * r.init_err && r.annealed_psnr >= r.frozen_psnr + JOINT_PSNR_MARGIN_DB)
        .count();
    let gain = runs.seeds.iter().map(|r| r.annealed_psnr - r.frozen_psnr).sum::<f64>() / runs.seeds.len() as f64;
    verdict(
        5,
        "joint optimization",
        good >= JOINT_MIN_SEEDS && runs.secs < JOINT_BUDGET_S,
        &format!("{good}/{JOINT_SEEDS} seeds meet both conditions, mean gain {gain:.2} dB over frozen poses, {:.0}s", runs.secs),
    );
}

#[test]
fn c6_annealed_schedule_not_worse_than_fixed() {
    let runs = joint_runs();
    let k = runs.seeds.len() as f64;
    let annealed = runs.seeds.iter().map(|r| r.annealed_psnr).sum::<f64>() / k;
    let fixed = runs.seeds.iter().map(|r| r.fixed_psnr).sum::<f64>() / k;
    verdict(
        6,
        "ablation ordering",
        annealed >= fixed,
        &format!("mean PSNR annealed {annealed:.2} dB vs fixed lambda {ABLATION_FIXED_LAMBDA} {fixed:.2} dB"),
    );
}

fn read_table(name: &str) -> Vec<Vec<String>> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name);
    let mut rdr = csv::Reader::from_path(path).unwrap();
    rdr.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn c7_schedule_tables_bit_exact() {
    let mut mismatches = Vec::new();
    let lambda_rows = read_table("lambda_schedule.csv");
    for row in &lambda_rows {
        let p = |i: usize| row[i].parse::<f64>().unwrap();
        let cfg = TrainConfig {
            warmup_epochs: row[1].parse().unwrap(),
            lambda0: p(2),
            decay_k: p(3),
            lambda_floor: p(4),
            lambda_mode: LambdaMode::Annealed,
            ..TrainConfig::with_epochs(200)
        };
        let got = lambda_schedule(row[0].parse().unwrap(), &cfg);
        if got.to_bits() != p(5).to_bits() {
            mismatches.push(format!("lambda {row:?}: {got:?}"));
        }
    }
    let weight_rows = read_table("annealed_weight.csv");
    for row in &weight_rows {
        let p = |i: usize| row[i].parse::<f64>().unwrap();
        let cfg = EncodingConfig { octaves: 16, anneal_t: p(1), anneal_b: p(2) };
        let got = annealed_weight(p(0), &cfg);
        if got.to_bits() != p(3).to_bits() {
            mismatches.push(format!("weight {row:?}: {got:?}"));
        }
    }
    verdict(
        7,
        "schedule tables",
        mismatches.is_empty() && lambda_rows.len() == 20 && weight_rows.len() == 20,
        &format!("{} + {} probes, mismatches: {mismatches:?}", lambda_rows.len(), weight_rows.len()),
    );
}

fn posefield(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_posefield")).args(args).status().unwrap();
    assert!(status.success(), "posefield {args:?} exited with {status}");
}

#[test]
fn c8_cli_rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.txt");
    std::fs::write(
        &cfg,
        "n_cams = 5\ntest_cams = 2\nwidth = 12\nheight = 12\nepochs = 5\nsteps_per_epoch = 3\nrays_per_step = 48\nhidden = 16\n",
    )
    .unwrap();
    let mut csvs = Vec::new();
    for rep in 0..2 {
        let ds = tmp.path().join(format!("ds{rep}"));
        let run = tmp.path().join(format!("run{rep}"));
        let (cfg, ds, run) = (cfg.to_str().unwrap(), ds.to_str().unwrap(), run.to_str().unwrap());
        posefield(&["synth", "--config", cfg, "--seed", "9", "--out", ds]);
        posefield(&["train", "--dataset", ds, "--seed", "9", "--out", run]);
        csvs.push(std::fs::read(Path::new(run).join("metrics.csv")).unwrap());
    }
    let rows = String::from_utf8_lossy(&csvs[0]).lines().count();
    verdict(
        8,
        "CLI determinism",
        csvs[0] == csvs[1] && rows == 6,
        &format!("metrics.csv {} bytes, {rows} lines, identical: {}", csvs[0].len(), csvs[0] == csvs[1]),
    );
}

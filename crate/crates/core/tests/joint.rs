use posefield::bench::{build_toy, run_toy, ToyExperiment, ToySpec};
use posefield::field::TapeRenderer;
use posefield::joint::{combined_loss_grad, sample_batch, train_joint, JointState, PoseModel, RaySample, TrainConfig};
use posefield::motion::pretrained_refiner;
use posefield::scene::RigSpec;

fn tiny_toy(seed: u64, pose_sigma: f64, edge_sigma: f64) -> ToyExperiment {
    let spec = ToySpec {
        rig: RigSpec { n_cams: 4, base_width: 8, base_height: 8, seed, ..RigSpec::default() },
        test_cams: 2,
        ring_neighbors: 2,
        samples: 8,
        pose_sigma,
        edge_sigma,
        seed,
        ..ToySpec::default()
    };
    build_toy(&spec).unwrap()
}

fn tiny_cfg(epochs: usize) -> TrainConfig {
    TrainConfig { hidden: 8, samples: 8, rays_per_step: 16, chunk: 8, steps_per_epoch: 2, ..TrainConfig::with_epochs(epochs) }
}

fn setup(seed: u64) -> (ToyExperiment, TrainConfig, JointState, Vec<RaySample>, TapeRenderer) {
    let toy = tiny_toy(seed, 0.1, 0.02);
    let cfg = tiny_cfg(10);
    let ds = toy.dataset();
    let state = JointState::new(&ds, &cfg, Some(pretrained_refiner().unwrap())).unwrap();
    let centers: Vec<_> = toy.noisy_poses.iter().map(|p| p.center()).collect();
    let batch = sample_batch(&ds, &centers, &cfg, 3).unwrap();
    let renderer = TapeRenderer::new(&cfg.encoding(1.5), &cfg.field_config(), cfg.samples);
    (toy, cfg, state, batch, renderer)
}

#[test]
fn field_gradient_is_bit_zero_at_lambda_one() {
    let (toy, cfg, state, batch, renderer) = setup(1);
    let (parts, grad) = combined_loss_grad(&state, &toy.graph, &batch, &renderer, &cfg, 1.0, true).unwrap();
    let grad = grad.unwrap();
    assert!(grad.field.iter().all(|g| g.to_bits() == 0));
    assert!(grad.translations.iter().flatten().all(|g| g.to_bits() == 0));
    assert!(grad.refiner.iter().any(|g| *g != 0.0));
    assert_eq!(parts.total, parts.mra);
}

#[test]
fn refiner_gradient_at_lambda_zero_is_the_rendering_chain() {
    let (toy, cfg, state, batch, renderer) = setup(2);
    let loss = |s: &JointState| combined_loss_grad(s, &toy.graph, &batch, &renderer, &cfg, 0.0, false).unwrap().0;
    let (parts, grad) = combined_loss_grad(&state, &toy.graph, &batch, &renderer, &cfg, 0.0, true).unwrap();
    assert_eq!(parts.total, parts.rgb);
    let grad = grad.unwrap();
    let n = grad.refiner.len();
    let h = 1e-5;
    let mut nonzero = 0;
    for k in (0..n).step_by(7) {
        let eval = |d: f64| {
            let mut s = state.clone();
            if let PoseModel::Refined { refiner, .. } = &mut s.poses {
                refiner.values_mut()[k] += d;
            }
            loss(&s).total
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let e = (grad.refiner[k] - numeric).abs() / grad.refiner[k].abs().max(numeric.abs()).max(1e-4);
        assert!(e < 1e-4, "param {k}: {} vs {numeric}", grad.refiner[k]);
        nonzero += usize::from(numeric.abs() > 1e-8);
    }
    assert!(nonzero > 0);
}

#[test]
fn warmup_leaves_the_field_untouched() {
    let toy = tiny_toy(3, 0.1, 0.02);
    let cfg = TrainConfig { warmup_epochs: 3, ..tiny_cfg(3) };
    let ds = toy.dataset();
    let refiner = pretrained_refiner().unwrap();
    let initial = JointState::new(&ds, &cfg, Some(refiner.clone())).unwrap();
    let run = train_joint(&ds, &cfg, Some(refiner)).unwrap();
    assert_eq!(run.state.field, initial.field);
    assert_eq!(run.state.translations, initial.translations);
    assert!(run.metrics.iter().all(|m| m.lambda == 1.0 && m.anneal_t == 0.0));
    assert_ne!(run.state.poses, initial.poses);
}

#[test]
fn training_is_deterministic() {
    let toy = tiny_toy(4, 0.1, 0.02);
    let cfg = tiny_cfg(4);
    let a = train_joint(&toy.dataset(), &cfg, Some(pretrained_refiner().unwrap())).unwrap();
    let b = train_joint(&toy.dataset(), &cfg, Some(pretrained_refiner().unwrap())).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.state, b.state);
}

#[test]
fn clean_poses_are_not_harmed() {
    let toy = tiny_toy(5, 0.0, 0.0);
    let out = run_toy(&toy, &tiny_cfg(6), Some(pretrained_refiner().unwrap())).unwrap();
    assert!(out.initial_rot_err < 1e-12);
    assert!(out.final_rot_err <= out.initial_rot_err + 1e-3, "{}", out.final_rot_err);
    assert_eq!(out.metrics.len(), 6);
}

#[test]
fn frozen_baseline_keeps_rotations() {
    let toy = tiny_toy(6, 0.1, 0.02);
    let cfg = TrainConfig { freeze_poses: true, ..tiny_cfg(3) };
    let out = run_toy(&toy, &cfg, None).unwrap();
    assert!((out.final_rot_err - out.initial_rot_err).abs() < 1e-12);
    assert!(out.metrics.iter().all(|m| m.lambda == 0.0));
}

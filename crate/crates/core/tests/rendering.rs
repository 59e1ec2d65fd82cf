use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use posefield::autodiff::Tape;
use posefield::field::{
    composite, render_image, render_ray, stratified_intervals, FieldConfig, RadianceField, RenderSettings,
    TapeRenderer,
};
use posefield::image::{psnr, Image};
use posefield::ipe::{frustum_moments, frustum_to_gaussian, pixel_direction, pixel_radius, ConicalFrustum, EncodingConfig};
use posefield::scene::{analytic_render, build_rig, AnalyticScene, RigSpec};
use posefield::so3::{AxisAngle, CameraPose, Intrinsics, UnitQuaternion};

fn small_pose(w: usize, h: usize) -> CameraPose {
    let rig = build_rig(&RigSpec { n_cams: 3, base_width: w, base_height: h, ..RigSpec::default() }).unwrap();
    rig.poses[1].clone()
}

#[test]
fn quadrature_converges_to_analytic_render_at_first_order() {
    let scene = AnalyticScene::toy();
    let pose = small_pose(16, 16);
    let exact = analytic_render(&scene, &pose);
    let enc = EncodingConfig::full(1);
    let errors: Vec<f64> = [16, 64, 256]
        .iter()
        .map(|&n| {
            let img = render_image(&scene, &pose, &RenderSettings::for_pose(&pose, scene.bounding_radius(), n), &enc).unwrap();
            img.data.iter().zip(&exact.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / img.data.len() as f64
        })
        .collect();
    // Error shrinks with N and N * error stays bounded.
    assert!(errors[1] < 0.5 * errors[0] && errors[2] < 0.5 * errors[1], "{errors:?}");
    let scaled = [16.0 * errors[0], 64.0 * errors[1], 256.0 * errors[2]];
    assert!(scaled[2] <= 2.0 * scaled[0], "{scaled:?}");
}

#[test]
fn half_resolution_render_matches_box_average() {
    let scene = AnalyticScene::toy();
    // Silhouette aliasing shrinks with pixel size; 64 px gives about 29 dB.
    let rig = build_rig(&RigSpec { n_cams: 4, base_width: 256, base_height: 256, ..RigSpec::default() }).unwrap();
    for c in 0..4 {
        let full = analytic_render(&scene, &rig.pose_at(c, 1));
        let half = analytic_render(&scene, &rig.pose_at(c, 2));
        let p = psnr(&half, &full.box_downsample(2).unwrap()).unwrap();
        assert!(p > 35.0, "camera {c}: {p} dB");
    }
}

#[test]
fn image_render_equals_independent_rays() {
    let field = RadianceField::random(FieldConfig { hidden: 16, octaves: 4, dir_octaves: 2 }, 3);
    let pose = small_pose(2, 2);
    let settings = RenderSettings::for_pose(&pose, 1.5, 12);
    let enc = EncodingConfig { octaves: 4, anneal_t: 2.5, anneal_b: 1.0 };
    let img = render_image(&field, &pose, &settings, &enc).unwrap();
    let plan = stratified_intervals(settings.near, settings.far, 12, None).unwrap();
    for y in 0..2 {
        for x in 0..2 {
            let d = pixel_direction(&pose, x as f64 + 0.5, y as f64 + 0.5);
            let r = render_ray(&field, &pose.center(), &d, pixel_radius(&pose), &plan, &enc);
            assert_eq!(img.pixel(x, y), r.rgb);
        }
    }
}

#[test]
fn tape_render_gradient_matches_finite_differences() {
    let cfg = FieldConfig { hidden: 8, octaves: 3, dir_octaves: 1 };
    let field = RadianceField::random(cfg, 9);
    let enc = EncodingConfig { octaves: 3, anneal_t: 1.7, anneal_b: 1.0 };
    let renderer = TapeRenderer::new(&enc, &cfg, 10);
    let origin = Vector3::new(0.3, -3.0, 0.5);
    let dir = Vector3::new(-0.05, 1.0, -0.1).normalize();
    let plan = stratified_intervals(2.0, 4.0, 10, Some((4, 0))).unwrap();
    let target = [0.2, 0.5, 0.7];
    let loss_of = |f: &RadianceField| {
        let r = render_ray(f, &origin, &dir, 0.004, &plan, &enc).rgb;
        (0..3).map(|k| (r[k] - target[k]).powi(2)).sum::<f64>()
    };
    let tape = Tape::new();
    let fv = field.record(&tape, true);
    let (rgb, _) = renderer.render(&tape, &fv, tape.const_vector(origin.as_slice()), tape.const_vector(dir.as_slice()), 0.004, &plan);
    let err = rgb - tape.const_vector(&target);
    let loss = err.dot(err);
    assert!((loss.item() - loss_of(&field)).abs() < 1e-12);
    let grads = tape.backward(loss).unwrap();
    let mut analytic = vec![0.0; field.len()];
    let mut offset = 0;
    for v in &fv.vars {
        grads.accumulate(*v, &mut analytic[offset..offset + v.len()]);
        offset += v.len();
    }
    let h = 1e-6;
    for k in 0..field.len() {
        let mut f = field.clone();
        f.values_mut()[k] += h;
        let up = loss_of(&f);
        f.values_mut()[k] -= 2.0 * h;
        let numeric = (up - loss_of(&f)) / (2.0 * h);
        let e = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(1e-4);
        assert!(e < 1e-4, "param {k}: {} vs {numeric}", analytic[k]);
    }
}

#[test]
fn uniform_partition_example() {
    let p = stratified_intervals(1.0, 3.0, 4, None).unwrap();
    assert_eq!(p.breakpoints, vec![1.0, 1.5, 2.0, 2.5, 3.0]);
}

/// Uniform samples inside the frustum: depth density proportional to `t²`,
/// uniform over the disc of radius `radius * t`.
#[test]
fn frustum_moments_match_uniform_samples() {
    let mut g = ChaCha20Rng::seed_from_u64(77);
    for (t0, t1, radius) in [(1.0, 2.0, 0.05), (2.0, 2.3, 0.01), (0.5, 0.9, 0.2)] {
        let n = 1_000_000;
        let (mut s_t, mut s_tt, mut s_r) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let u: f64 = g.random();
            let t = (t0 * t0 * t0 + u * (t1 * t1 * t1 - t0 * t0 * t0)).cbrt();
            let rho = radius * t * g.random::<f64>().sqrt();
            let phi = std::f64::consts::TAU * g.random::<f64>();
            let x = rho * phi.cos();
            s_t += t;
            s_tt += t * t;
            s_r += x * x;
        }
        let nf = n as f64;
        let mean = s_t / nf;
        let var = s_tt / nf - mean * mean;
        let m = frustum_moments(t0, t1, radius);
        assert!((m.t_mean - mean).abs() < 0.02 * mean, "mean {t0} {t1}");
        assert!((m.t_var - var).abs() < 0.02 * var, "depth variance {t0} {t1}: {} vs {var}", m.t_var);
        assert!((m.r_var - s_r / nf).abs() < 0.02 * m.r_var, "radial variance {t0} {t1}");
    }
}

fn vec3() -> impl Strategy<Value = Vector3<f64>> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_and_transmittance_invariants(
        sigmas in prop::collection::vec(0.0..20.0f64, 1..24),
        deltas in prop::collection::vec(0.001..0.5f64, 24),
    ) {
        let n = sigmas.len();
        let colors = vec![[0.3, 0.6, 0.9]; n];
        let r = composite(&sigmas, &colors, &deltas[..n]);
        prop_assert_eq!(r.transmittance[0], 1.0);
        prop_assert!(r.weights.iter().all(|w| *w >= 0.0));
        prop_assert!(r.transmittance.windows(2).all(|w| w[1] <= w[0]));
        let total: f64 = r.weights.iter().sum();
        let optical: f64 = sigmas.iter().zip(&deltas).map(|(s, d)| s * d).sum();
        prop_assert!((total - (1.0 - (-optical).exp())).abs() < 1e-12);
        prop_assert!(total <= 1.0 + 1e-12);
        for k in 0..3 {
            prop_assert!((r.rgb[k] - total * colors[0][k]).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_rotates_with_the_frustum(o in vec3(), d in vec3(), aa in vec3(), t0 in 0.5..3.0f64, ratio in 1.01..2.0f64) {
        prop_assume!(d.norm() > 0.1);
        let f = ConicalFrustum::new(o, d.normalize(), 0.01, t0, t0 * ratio).unwrap();
        let r = UnitQuaternion::exp(&AxisAngle(aa * 3.0)).to_matrix();
        let rf = ConicalFrustum::new(r.rotate(&o), r.rotate(&d.normalize()), 0.01, t0, t0 * ratio).unwrap();
        let (g, rg) = (frustum_to_gaussian(&f), frustum_to_gaussian(&rf));
        prop_assert!((r.rotate(&g.mean) - rg.mean).norm() < 1e-12);
        let rm = r.matrix();
        prop_assert!((rm * g.covariance * rm.transpose() - rg.covariance).norm() < 1e-12);
    }

    #[test]
    fn scene_quadrature_is_bounded(seed in 0u64..1000) {
        let scene = AnalyticScene::toy();
        let mut g = ChaCha20Rng::seed_from_u64(seed);
        let origin = Vector3::new(4.0 * g.random::<f64>() - 2.0, -4.0, 4.0 * g.random::<f64>() - 2.0);
        let dir = (Vector3::new(0.0, 0.0, 0.0) - origin).normalize();
        let exact = scene.render_ray(&origin, &dir);
        prop_assert!(exact.iter().all(|c| (0.0..=1.0).contains(c)));
        let plan = stratified_intervals(0.5, 8.0, 32, None).unwrap();
        let q = render_ray(&scene, &origin, &dir, 0.0, &plan, &EncodingConfig::full(1));
        prop_assert!(q.weights.iter().sum::<f64>() <= 1.0 + 1e-12);
    }
}

#[test]
fn intrinsics_scale_with_downsampling() {
    let k = Intrinsics::new(40.0, 40.0, 16.0, 16.0, 32, 32).unwrap();
    let h = k.downsampled(2);
    assert_eq!((h.width, h.height), (16, 16));
    assert_eq!((h.fx, h.cx), (20.0, 8.0));
    let img = Image::filled(4, 4, [0.5, 0.25, 1.0]);
    assert_eq!(img.box_downsample(2).unwrap(), Image::filled(2, 2, [0.5, 0.25, 1.0]));
}

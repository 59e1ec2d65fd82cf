//! Renders the analytic toy scene at two scales, compares the closed-form
//! render with quadrature, and writes PNGs.
//!
//! `cargo run --release --example render_scene -- [out_dir]`

use std::path::PathBuf;

use posefield::field::{render_image, RenderSettings};
use posefield::image::psnr;
use posefield::io::write_png;
use posefield::ipe::EncodingConfig;
use posefield::scene::{analytic_render, build_rig, AnalyticScene, RigSpec};

fn main() -> posefield::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("scene_renders"));
    std::fs::create_dir_all(&out)?;
    let scene = AnalyticScene::toy();
    let rig = build_rig(&RigSpec { n_cams: 4, base_width: 64, base_height: 64, ..RigSpec::default() })?;
    for c in 0..rig.poses.len() {
        for &s in &rig.scales {
            let pose = rig.pose_at(c, s);
            let exact = analytic_render(&scene, &pose);
            write_png(&out.join(format!("cam{c}_scale{s}.png")), &exact)?;
            let quad = render_image(&scene, &pose, &RenderSettings::for_pose(&pose, scene.bounding_radius(), 64), &EncodingConfig::full(1))?;
            println!("camera {c} scale {s}: {:?}, quadrature PSNR {:.1} dB", exact.dims(), psnr(&quad, &exact)?);
        }
        let full = analytic_render(&scene, &rig.pose_at(c, 1));
        let half = analytic_render(&scene, &rig.pose_at(c, 2));
        println!("camera {c}: half-res vs 2x2 box average {:.1} dB", psnr(&half, &full.box_downsample(2)?)?);
    }
    println!("wrote PNGs to {}", out.display());
    Ok(())
}

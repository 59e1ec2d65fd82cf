//! Command-line pipeline: `synth`, `solve-poses`, `train`, `render`, `eval`
//! and `report`.
//!
//! Exit codes are 0 on success, 1 on usage or configuration errors and 2 on
//! runtime failures. Errors are printed to stderr as one JSON object.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::bench::{build_toy, run_toy};
use crate::config::FlatConfig;
use crate::error::{Error, Result};
use crate::experiment::{
    load_dataset, read_json, read_poses, save_dataset, test_view_names, write_named_poses, write_poses, write_summary,
    ExperimentConfig, NamedPose, RunLayout, RunSummary,
};
use crate::field::{render_image, RadianceField, RenderSettings};
use crate::image;
use crate::io;
use crate::ipe::EncodingConfig;
use crate::joint::{align_test_poses, pose_error_report, EpochMetrics};
use crate::motion::{irls_rotation_average, pretrained_refiner, refiner_forward, RefinerParams, RobustLoss};
use crate::so3::{CameraPose, PoseRecord};
use crate::viewgraph::{gauge_aligned_errors, spanning_tree_init, ViewGraph};

#[derive(Debug, Parser)]
#[command(name = "posefield", version, about = "Multi-scale radiance fields with learned rotation averaging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random draw; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Config override `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Method {
    Tree,
    Irls,
    Refiner,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LossKind {
    L2,
    Huber,
    Gm,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the toy scene from a multi-scale rig and write a dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Estimate absolute rotations of a view graph.
    SolvePoses {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, value_enum, default_value = "irls")]
        method: Method,
        /// IRLS penalty.
        #[arg(long, value_enum, default_value = "l2")]
        loss: LossKind,
        /// Huber threshold or Geman-McClure scale (radians).
        #[arg(long, default_value_t = 0.2)]
        robust_sigma: f64,
        #[arg(long, default_value_t = 50)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        /// Refiner parameters; the bundled ones by default.
        #[arg(long)]
        refiner: Option<PathBuf>,
    },
    /// Jointly optimize poses and the radiance field on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        refiner: Option<PathBuf>,
    },
    /// Render views from a trained run.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run: PathBuf,
        /// Named poses (JSON); the run's aligned test poses by default.
        #[arg(long)]
        poses: Option<PathBuf>,
    },
    /// Compare rendered images with references of the same name.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        renders: PathBuf,
        #[arg(long)]
        references: PathBuf,
    },
    /// Summarize run directories in one table.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    status: &'static str,
    kind: &'a str,
    message: String,
}

fn kind_of(e: &Error) -> (&'static str, i32) {
    match e {
        Error::Config(_) => ("config", 1),
        Error::Io(_) => ("io", 2),
        Error::Json(_) => ("format", 2),
        Error::InvalidGraph(_) | Error::Disconnected { .. } => ("graph", 2),
        Error::Diverged { .. } | Error::NonFinite { .. } => ("numerics", 2),
        _ => ("runtime", 2),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let (kind, code) = kind_of(&e);
            let report = ErrorReport { status: "error", kind, message: e.to_string() };
            eprintln!("{}", serde_json::to_string(&report).unwrap_or_else(|_| e.to_string()));
            code
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { common } => synth(&common),
        Command::SolvePoses { common, graph, method, loss, robust_sigma, max_iters, tol, refiner } => {
            let loss = match loss {
                LossKind::L2 => RobustLoss::L2,
                LossKind::Huber => RobustLoss::Huber(robust_sigma),
                LossKind::Gm => RobustLoss::GemanMcClure(robust_sigma),
            };
            solve_poses(&common, &graph, method, loss, max_iters, tol, refiner.as_deref())
        }
        Command::Train { common, dataset, refiner } => train(&common, &dataset, refiner.as_deref()),
        Command::Render { common, run, poses } => render(&common, &run, poses.as_deref()),
        Command::Eval { common, renders, references } => eval(&common, &renders, &references),
        Command::Report { common, runs } => report(&common, &runs),
    }
}

fn load_config(common: &Common, base: Option<&Path>) -> Result<ExperimentConfig> {
    let mut flat = match (&common.config, base) {
        (Some(p), _) => FlatConfig::load(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        (None, Some(p)) => FlatConfig::load(p)?,
        (None, None) => FlatConfig::new(),
    };
    for o in &common.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
        flat.set(k.trim(), v.trim());
    }
    ExperimentConfig::from_flat(&flat, common.seed)
}

fn load_refiner(path: Option<&Path>) -> Result<RefinerParams> {
    match path {
        Some(p) => RefinerParams::load(p),
        None => pretrained_refiner(),
    }
}

fn synth(common: &Common) -> Result<()> {
    let cfg = load_config(common, None)?;
    let toy = build_toy(&cfg.toy)?;
    let m = save_dataset(&toy, &cfg, &common.out)?;
    println!(
        "wrote {} training and {} test images for {} cameras at scales {:?} to {}",
        m.train_images.len(),
        m.test_images.len(),
        m.n_cams,
        m.scales,
        common.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SolveReport {
    method: String,
    vertices: usize,
    edges: usize,
    mean_err_rad: Option<f64>,
    median_err_rad: Option<f64>,
    max_err_rad: Option<f64>,
}

fn solve_poses(
    common: &Common,
    graph_path: &Path,
    method: Method,
    loss: RobustLoss,
    max_iters: usize,
    tol: f64,
    refiner: Option<&Path>,
) -> Result<()> {
    if common.config.is_some() || !common.overrides.is_empty() {
        load_config(common, None)?;
    }
    loss.validate().map_err(|e| Error::Config(e.to_string()))?;
    let g = ViewGraph::load(graph_path)?;
    let (name, est) = match method {
        Method::Tree => ("tree".to_string(), spanning_tree_init(&g)?),
        Method::Irls => (format!("irls-{loss:?}"), irls_rotation_average(&g, loss, max_iters, tol)?.rotations),
        Method::Refiner => ("refiner".to_string(), refiner_forward(&g, &load_refiner(refiner)?)?),
    };
    fs::create_dir_all(&common.out)?;
    g.with_estimates(&est)?.save(common.out.join("graph_solved.json"))?;
    let errors = g.ground_truth().ok().map(|gt| gauge_aligned_errors(&est, &gt));
    let mut wtr = csv::Writer::from_path(common.out.join("errors.csv"))?;
    wtr.write_record(["vertex", "err_rad"])?;
    if let Some(errs) = &errors {
        for (v, e) in errs.iter().enumerate() {
            wtr.write_record([v.to_string(), e.to_string()])?;
        }
    }
    wtr.flush()?;
    let stats = errors.as_ref().map(|e| {
        let mut s = e.clone();
        s.sort_by(f64::total_cmp);
        let mean = e.iter().sum::<f64>() / e.len() as f64;
        (mean, s[s.len() / 2], s[s.len() - 1])
    });
    let report = SolveReport {
        method: name,
        vertices: g.vertex_count(),
        edges: g.edge_count(),
        mean_err_rad: stats.map(|s| s.0),
        median_err_rad: stats.map(|s| s.1),
        max_err_rad: stats.map(|s| s.2),
    };
    fs::write(common.out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    match report.mean_err_rad {
        Some(m) => println!("{}: mean angular error {m:.6} rad over {} vertices", report.method, report.vertices),
        None => println!("{}: solved {} vertices (no ground truth)", report.method, report.vertices),
    }
    Ok(())
}

fn f(v: f64) -> String {
    v.to_string()
}

fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["epoch", "lambda", "anneal_t", "L_rgb", "L_mra", "mean_rot_err_rad", "psnr"])?;
    for m in metrics {
        wtr.write_record([
            m.epoch.to_string(),
            f(m.lambda),
            f(m.anneal_t),
            f(m.l_rgb),
            f(m.l_mra),
            m.mean_rot_err_rad.map(f).unwrap_or_default(),
            f(m.psnr),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

fn train(common: &Common, dataset: &Path, refiner: Option<&Path>) -> Result<()> {
    let (toy, data_cfg) = load_dataset(dataset)?;
    let mut cfg = load_config(common, Some(&dataset.join("config.txt")))?;
    // Scene and rig come from the dataset; only training keys apply here.
    cfg.toy = data_cfg.toy;
    cfg.fov_deg = data_cfg.fov_deg;
    cfg.train.samples = cfg.toy.samples;
    let params = if cfg.train.freeze_poses { None } else { Some(load_refiner(refiner)?) };
    let out = run_toy(&toy, &cfg.train, params)?;
    let layout = RunLayout::new(&common.out);
    fs::create_dir_all(&layout.dir)?;
    let hash = cfg.hash();
    cfg.to_flat().save(&layout.config())?;
    out.state.field.save(&layout.field(), &hash)?;
    if let crate::joint::PoseModel::Refined { refiner, .. } = &out.state.poses {
        refiner.save(&layout.refiner(), &hash)?;
    }
    let est = out.state.poses(&toy.graph, &toy.noisy_poses)?;
    write_poses(&layout.poses(), &est)?;
    let (test_poses, _) = toy.test_views();
    let aligned = align_test_poses(&est, &toy.rig.poses, &test_poses)?;
    let named: Vec<NamedPose> = test_view_names(&toy)
        .into_iter()
        .zip(&aligned)
        .map(|(name, p)| NamedPose { name, pose: PoseRecord::from(p) })
        .collect();
    write_named_poses(&layout.test_poses(), &named)?;
    write_metrics(&layout.metrics(), &out.metrics)?;
    let summary = RunSummary {
        config_hash: hash,
        seed: cfg.seed,
        lambda_mode: RunSummary::lambda_mode_of(&cfg.train),
        freeze_poses: cfg.train.freeze_poses,
        epochs: cfg.train.epochs,
        scene_radius: toy.scene.bounding_radius(),
        samples: cfg.train.samples,
        initial_rot_err: out.initial_rot_err,
        final_rot_err: out.final_rot_err,
        test_psnr: out.test_psnr,
        test_ssim: out.test_scores.iter().map(|s| s.ssim).sum::<f64>() / out.test_scores.len().max(1) as f64,
        diverged: out.diverged,
    };
    write_summary(&layout.summary(), &summary)?;
    if let Some(epoch) = out.diverged {
        return Err(Error::Diverged { epoch, detail: "loss became non-finite; last good state saved".into() });
    }
    println!(
        "rotation error {:.4} -> {:.4} rad, held-out PSNR {:.2} dB",
        summary.initial_rot_err, summary.final_rot_err, summary.test_psnr
    );
    Ok(())
}

fn render(common: &Common, run: &Path, poses: Option<&Path>) -> Result<()> {
    let layout = RunLayout::new(run);
    let summary: RunSummary = read_json(&layout.summary())?;
    let field = RadianceField::load(&layout.field())?;
    let named: Vec<NamedPose> = match poses {
        Some(p) => match read_json::<Vec<NamedPose>>(p) {
            Ok(n) => n,
            Err(_) => read_poses(p)?
                .iter()
                .enumerate()
                .map(|(k, pose)| NamedPose { name: format!("view_{k:03}"), pose: PoseRecord::from(pose) })
                .collect(),
        },
        None => read_json(&layout.test_poses())?,
    };
    fs::create_dir_all(&common.out)?;
    let enc = EncodingConfig::full(field.config().octaves);
    for n in &named {
        let pose = CameraPose::try_from(&n.pose)?;
        let img = render_image(&field, &pose, &RenderSettings::for_pose(&pose, summary.scene_radius, summary.samples), &enc)?;
        io::write_png(&common.out.join(format!("{}.png", n.name)), &img)?;
        io::write_raw(&common.out.join(format!("{}.raw", n.name)), &img)?;
    }
    println!("rendered {} views to {}", named.len(), common.out.display());
    Ok(())
}

fn eval(common: &Common, renders: &Path, references: &Path) -> Result<()> {
    let mut names: Vec<String> = fs::read_dir(renders)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension().and_then(|x| x.to_str()) == Some("raw")).then(|| p.file_stem()?.to_str().map(String::from))?
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Config(format!("no .raw renders in {}", renders.display())));
    }
    fs::create_dir_all(&common.out)?;
    let mut wtr = csv::Writer::from_path(common.out.join("eval.csv"))?;
    wtr.write_record(["view", "psnr", "ssim"])?;
    let (mut sp, mut ss) = (0.0, 0.0);
    for n in &names {
        let a = io::read_raw(&renders.join(format!("{n}.raw")))?;
        let b = io::read_raw(&references.join(format!("{n}.raw")))?;
        let (p, s) = (image::psnr(&a, &b)?, image::ssim(&a, &b)?);
        sp += p;
        ss += s;
        wtr.write_record([n.clone(), f(p), f(s)])?;
    }
    let k = names.len() as f64;
    wtr.write_record(["mean".to_string(), f(sp / k), f(ss / k)])?;
    wtr.flush()?;
    println!("{} views: mean PSNR {:.2} dB, mean SSIM {:.4}", names.len(), sp / k, ss / k);
    Ok(())
}

fn report(common: &Common, runs: &[PathBuf]) -> Result<()> {
    let mut rows = Vec::new();
    for r in runs {
        let s: RunSummary = read_json(&RunLayout::new(r).summary())?;
        let label = if s.freeze_poses { "frozen poses".to_string() } else { format!("lambda {}", s.lambda_mode) };
        rows.push((r.display().to_string(), label, s));
    }
    let mut text = String::from("| run | variant | seed | rot err in (rad) | rot err out (rad) | test PSNR (dB) | test SSIM |\n");
    text.push_str("|---|---|---|---|---|---|---|\n");
    for (path, label, s) in &rows {
        text.push_str(&format!(
            "| {path} | {label} | {} | {:.4} | {:.4} | {:.2} | {:.4} |\n",
            s.seed, s.initial_rot_err, s.final_rot_err, s.test_psnr, s.test_ssim
        ));
    }
    let mean_psnr = |pred: &dyn Fn(&RunSummary) -> bool| {
        let v: Vec<f64> = rows.iter().filter(|r| pred(&r.2)).map(|r| r.2.test_psnr).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let annealed = mean_psnr(&|s| !s.freeze_poses && s.lambda_mode == "annealed");
    let fixed = mean_psnr(&|s| !s.freeze_poses && s.lambda_mode.starts_with("fixed"));
    let frozen = mean_psnr(&|s| s.freeze_poses);
    text.push('\n');
    for (name, v) in [("annealed lambda", annealed), ("fixed lambda", fixed), ("frozen poses", frozen)] {
        if let Some(v) = v {
            text.push_str(&format!("mean test PSNR, {name}: {v:.2} dB\n"));
        }
    }
    if let (Some(a), Some(b)) = (annealed, fixed) {
        let order = if a >= b { "annealed >= fixed" } else { "annealed < fixed" };
        text.push_str(&format!("ablation ordering: {order}\n"));
    }
    fs::create_dir_all(&common.out)?;
    fs::write(common.out.join("report.md"), &text)?;
    print!("{text}");
    Ok(())
}

/// Pose errors of a run against the dataset ground truth.
pub fn run_pose_errors(run: &Path, dataset: &Path) -> Result<Vec<f64>> {
    let est = read_poses(&RunLayout::new(run).poses())?;
    let gt = read_poses(&dataset.join("poses_gt.json"))?;
    let r = |p: &[CameraPose]| p.iter().map(|x| x.rotation).collect::<Vec<_>>();
    Ok(pose_error_report(&r(&est), &r(&gt))?.per_camera)
}

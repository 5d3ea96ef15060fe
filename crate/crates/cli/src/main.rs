//! `crossview`: generate synthetic scenes, solve poses, evaluate and score.
//!
//! Exit codes: 0 success, 2 input error, 3 degenerate solution.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crossview::eval::{
    build_gt_projection, localization_stats, matching_success_ratio, write_metrics_csv, GroundTruthProjection,
    LocalizationStats, MatchPrediction, MatchingReport, PosePrediction, PredictedMatch, ProjectionConfig,
    RangeMode, DEFAULT_MAX_RANGE_M,
};
use crossview::geometry::{project_point_to_panorama, CrossViewFrame, Geometry, GeometryConfig, Pose3DoF};
use crossview::losses::{height_loss, matching_loss, vce_loss, LossConfig, LossReport};
use crossview::pipeline::{scene_similarity, solve, SolveConfig, SolveOutput};
use crossview::pose::pose_error;
use crossview::refiner::{MatchRule, RefinerConfig, RefinerParams};
use crossview::surface::{aerial_depth_to_height_index, BevFeatureMap, DepthScale, FeatureVolume};
use crossview::synth::{generate_scene, render_inputs, write_scene_dir, LoadedScene, PoseMode, SceneConfig, SceneManifest};
use crossview::{Error, Tensor};

const EXIT_INPUT: u8 = 2;
const EXIT_DEGENERATE: u8 = 3;

#[derive(Parser)]
#[command(name = "crossview", version, about = "Ground-to-aerial localization pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene directory.
    Generate(GenerateArgs),
    /// Recover the camera pose of a scene.
    Solve(SolveArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Evaluate the training losses for a predicted pose.
    Loss(LossArgs),
    /// Project a panorama depth map into the aerial image.
    GtProject(GtProjectArgs),
    /// Write refiner parameters (zero or seeded random).
    InitRefiner(InitRefinerArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grid points per side (odd).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 32)]
    channels: usize,
    #[arg(long, value_enum, default_value_t = PoseArg::Grid)]
    pose_mode: PoseArg,
    /// Geometry JSON; `--n` overrides its grid size at the same spacing.
    #[arg(long)]
    geometry: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoseArg {
    Grid,
    Continuous,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long, conflicts_with_all = ["feature_volume", "conf_logits", "aerial_features", "geometry"])]
    scene_dir: Option<PathBuf>,
    /// Ground feature volume `[M, N, N, C]`.
    #[arg(long, requires_all = ["conf_logits", "aerial_features", "geometry"])]
    feature_volume: Option<PathBuf>,
    /// Raw confidence logits `[M, N, N]`.
    #[arg(long)]
    conf_logits: Option<PathBuf>,
    /// Aerial BEV features `[N, N, C]`.
    #[arg(long)]
    aerial_features: Option<PathBuf>,
    #[arg(long)]
    geometry: Option<PathBuf>,
    /// Directory written by `init-refiner`; without it refinement is skipped.
    #[arg(long)]
    refiner_params: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 30)]
    topk: usize,
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
    #[arg(long, value_enum, default_value_t = RuleArg::Mutual)]
    match_rule: RuleArg,
    /// Known yaw in degrees; solves translation only.
    #[arg(long, allow_hyphen_values = true)]
    known_yaw: Option<f64>,
    /// Write the pose JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the selected matches as `xg,yg,xs,ys` pixel pairs.
    #[arg(long)]
    matches_csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Mutual,
    Topk,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred_csv: PathBuf,
    #[arg(long)]
    gt_dir: PathBuf,
    #[arg(long, value_enum)]
    mode: EvalMode,
    #[arg(long, value_delimiter = ',', default_values_t = [5.0, 10.0, 15.0])]
    thresholds: Vec<f64>,
    /// Write the JSON report here (and a CSV next to it) instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalMode {
    Localization,
    Matching,
}

#[derive(Args)]
struct LossArgs {
    #[arg(long)]
    scene_dir: PathBuf,
    /// Pose JSON with `tx_px`, `ty_px`, `yaw_deg` (the output of `solve`).
    #[arg(long)]
    pred_pose: PathBuf,
    /// Loss configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured sampling seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GtProjectArgs {
    /// Panorama depth `[H, W]` in meters.
    #[arg(long)]
    depth: PathBuf,
    #[arg(long)]
    geometry: PathBuf,
    /// Pose JSON with `tx_px`, `ty_px`, `yaw_deg`.
    #[arg(long)]
    pose: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MAX_RANGE_M)]
    max_range: f64,
    #[arg(long, value_enum, default_value_t = RangeArg::Ray)]
    range_mode: RangeArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum RangeArg {
    Ray,
    Planar,
}

#[derive(Args)]
struct InitRefinerArgs {
    #[arg(long)]
    n: usize,
    /// Seed for random weights; zero weights when absent.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Pose as read from JSON; extra fields are ignored.
#[derive(Debug, Deserialize)]
struct PoseFile {
    tx_px: f64,
    ty_px: f64,
    yaw_deg: f64,
}

impl PoseFile {
    fn pose(&self) -> Pose3DoF {
        Pose3DoF::new(self.tx_px, self.ty_px, self.yaw_deg.to_radians())
    }
}

/// Outcome that maps to a nonzero exit code without being an input error.
#[derive(Debug)]
struct Degenerate;

impl std::fmt::Display for Degenerate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("degenerate correspondences: rotation undetermined")
    }
}

impl std::error::Error for Degenerate {}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let mut cfg = SceneConfig {
        channels: a.channels,
        pose_mode: match a.pose_mode {
            PoseArg::Grid => PoseMode::GridSnapped,
            PoseArg::Continuous => PoseMode::Continuous,
        },
        ..SceneConfig::default()
    };
    if let Some(g) = &a.geometry {
        cfg.geometry = read_json(g)?;
    }
    if let Some(n) = a.n {
        if n < 3 {
            bail!("--n must be at least 3");
        }
        let spacing = cfg.geometry.extent_m / (cfg.geometry.n - 1) as f64;
        cfg.geometry.n = n;
        cfg.geometry.extent_m = spacing * (n - 1) as f64;
    }
    let scene = generate_scene(&cfg, a.seed, a.noise)?;
    let inputs = render_inputs(&scene)?;
    let manifest = write_scene_dir(&a.out_dir, &scene, &inputs)?;
    log::info!(
        "wrote {} tensors to {} (gt pose {:?})",
        manifest.tensors.len(),
        a.out_dir.display(),
        manifest.gt_pose
    );
    Ok(())
}

struct SolveInputs {
    geometry: Geometry,
    frame: CrossViewFrame,
    volume: FeatureVolume,
    conf_logits: Array3<f64>,
    aerial: BevFeatureMap,
}

fn load_solve_inputs(a: &SolveArgs) -> Result<SolveInputs> {
    if let Some(dir) = &a.scene_dir {
        let s = LoadedScene::load(dir)?;
        return Ok(SolveInputs {
            geometry: s.manifest.geometry.build()?,
            frame: s.frame,
            volume: s.volume,
            conf_logits: s.conf_logits,
            aerial: s.aerial,
        });
    }
    let (Some(vol), Some(conf), Some(aerial), Some(geo)) =
        (&a.feature_volume, &a.conf_logits, &a.aerial_features, &a.geometry)
    else {
        bail!("give either --scene-dir or all of --feature-volume, --conf-logits, --aerial-features, --geometry");
    };
    let geometry = read_json::<GeometryConfig>(geo)?.build()?;
    Ok(SolveInputs {
        geometry,
        frame: CrossViewFrame::new(geometry.grid, geometry.aerial, geometry.aerial.center_px()),
        volume: FeatureVolume::new(Tensor::load(vol)?.to_array()?, geometry.layers, geometry.grid)?,
        conf_logits: Tensor::load(conf)?.to_array()?,
        aerial: BevFeatureMap::new(Tensor::load(aerial)?.to_array()?, geometry.grid)?,
    })
}

/// Panorama pixel of each ground patch's ground-plane point against its
/// matched aerial patch pixel.
fn match_pixels(inputs: &SolveInputs, out: &SolveOutput) -> Result<MatchPrediction> {
    let mut pairs = Vec::with_capacity(out.matches.len());
    for m in &out.matches {
        let (x, y) = inputs.frame.grid.patch_to_metric(m.ground_patch);
        let Some((u, v)) = project_point_to_panorama(&inputs.geometry.camera, x, y, 0.0)? else {
            continue;
        };
        let s = inputs.frame.aerial_patch_px(m.aerial_patch);
        pairs.push(PredictedMatch {
            xg: u,
            yg: v,
            xs: s[0],
            ys: s[1],
        });
    }
    Ok(MatchPrediction { pairs })
}

fn cmd_solve(a: &SolveArgs) -> Result<()> {
    let inputs = load_solve_inputs(a)?;
    let params = match &a.refiner_params {
        Some(dir) => Some(RefinerParams::load_dir(dir)?),
        None => {
            log::warn!("no refiner parameters given; using the unrefined similarity");
            None
        }
    };
    let cfg = SolveConfig {
        threshold: a.threshold,
        tau: a.tau,
        top_k: a.topk,
        rule: match a.match_rule {
            RuleArg::Mutual => MatchRule::MutualFirst,
            RuleArg::Topk => MatchRule::TopK,
        },
        known_yaw_rad: a.known_yaw.map(f64::to_radians),
        ..SolveConfig::default()
    };
    if cfg.known_yaw_rad.is_some() {
        log::info!("known yaw given; solving translation only");
    }
    let out = solve(&inputs.volume, &inputs.conf_logits, &inputs.aerial, &inputs.frame, params.as_ref(), &cfg)
        .map_err(|e| match e {
            Error::NoPositiveWeight => anyhow::Error::new(Degenerate),
            e => e.into(),
        })?;
    if let Some(path) = &a.matches_csv {
        match_pixels(&inputs, &out)?.write_csv(path)?;
    }
    emit(&to_json(&out.report())?, a.out.as_deref())?;
    if out.degenerate {
        return Err(Degenerate.into());
    }
    Ok(())
}

#[derive(Serialize)]
struct SceneError {
    scene: String,
    trans_m: f64,
    orient_deg: f64,
}

#[derive(Serialize)]
struct LocalizationReport {
    stats: LocalizationStats,
    scenes: Vec<SceneError>,
}

fn write_reports<T: Serialize>(report: &T, rows: &[(String, f64)], out: Option<&Path>) -> Result<()> {
    let json = to_json(report)?;
    if let Some(path) = out {
        write_metrics_csv(path.with_extension("csv"), rows)?;
    }
    emit(&json, out)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    match a.mode {
        EvalMode::Matching => {
            let pred = MatchPrediction::read_csv(&a.pred_csv)?;
            let gt = GroundTruthProjection::from_tensor(&Tensor::load(a.gt_dir.join("gt_projection.cvt"))?)?;
            let report: MatchingReport = matching_success_ratio(&pred, &gt, &a.thresholds)?;
            write_reports(&report, &report.rows(), a.out.as_deref())
        }
        EvalMode::Localization => {
            let preds = PosePrediction::read_csv(&a.pred_csv)?;
            let mut scenes = Vec::with_capacity(preds.len());
            for p in &preds {
                let manifest = SceneManifest::load(a.gt_dir.join(&p.scene))?;
                let meta = manifest.geometry.build()?.aerial;
                let e = pose_error(&p.pose(), &manifest.gt_pose, &meta);
                scenes.push(SceneError {
                    scene: p.scene.clone(),
                    trans_m: e.trans_m,
                    orient_deg: e.orient_deg,
                });
            }
            let errors: Vec<_> = scenes
                .iter()
                .map(|s| crossview::pose::PoseError {
                    trans_m: s.trans_m,
                    orient_deg: s.orient_deg,
                })
                .collect();
            let stats = localization_stats(&errors)?;
            write_reports(&LocalizationReport { stats, scenes }, &stats.rows(), a.out.as_deref())
        }
    }
}

fn cmd_loss(a: &LossArgs) -> Result<()> {
    let mut cfg: LossConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => LossConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.rng_seed = seed;
    }
    cfg.validate()?;
    let scene = LoadedScene::load(&a.scene_dir)?;
    let pred = read_json::<PoseFile>(&a.pred_pose)?.pose();
    let gt = scene.manifest.gt_pose;
    let layers = *scene.volume.layers();
    let (surf_grd, s) = scene_similarity(&scene.volume, &scene.conf_logits, &scene.aerial, &SolveConfig::default())?;
    let depth_sat = scene.manifest.load_tensor(&a.scene_dir, "depth_sat")?.to_array()?;
    let surf_sat = aerial_depth_to_height_index(
        &depth_sat,
        &layers,
        scene.manifest.ground_anchor_m,
        DepthScale::MetersPerUnit(scene.manifest.depth_meters_per_unit),
    )?
    .surface;
    let report = LossReport::new(
        vce_loss(&pred, &gt, &scene.frame.aerial, &cfg),
        matching_loss(&s, &gt, &scene.frame, &cfg)?,
        height_loss(&surf_grd, &surf_sat, &gt, &scene.frame, &cfg)?,
        &cfg,
    );
    emit(&to_json(&report)?, a.out.as_deref())
}

fn cmd_gt_project(a: &GtProjectArgs) -> Result<()> {
    let geo = read_json::<GeometryConfig>(&a.geometry)?.build()?;
    let pose = read_json::<PoseFile>(&a.pose)?.pose();
    let depth = Tensor::load(&a.depth)?.to_array()?;
    let cfg = ProjectionConfig {
        max_range_m: a.max_range,
        range_mode: match a.range_mode {
            RangeArg::Ray => RangeMode::Ray3d,
            RangeArg::Planar => RangeMode::Planar,
        },
    };
    let proj = build_gt_projection(&depth, &geo.camera, &pose, &geo.aerial, &cfg)?;
    log::info!("{} of {} pixels valid", proj.valid_count(), depth.len());
    proj.to_tensor().save(&a.out)?;
    Ok(())
}

fn cmd_init_refiner(a: &InitRefinerArgs) -> Result<()> {
    let cfg = RefinerConfig::new(a.n);
    let params = match a.seed {
        Some(seed) => RefinerParams::random(&cfg, seed)?,
        None => RefinerParams::zeros(&cfg)?,
    };
    params.save_dir(&a.out_dir)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Loss(a) => cmd_loss(a),
        Command::GtProject(a) => cmd_gt_project(a),
        Command::InitRefiner(a) => cmd_init_refiner(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CROSSVIEW_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Degenerate>() => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_DEGENERATE)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_INPUT)
        }
    }
}

//! Command-line interface.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fovnerf_core::compositor::{anaglyph, eccentricity_map};
use fovnerf_core::datagen::{load_rays, read_manifest, render_reference, write_dataset, ProceduralScene};
use fovnerf_core::engine::{
    discrepancy_table, layer_views, score_views, train_layer, train_on, Engine, LayerNetConfig, PipelineConfig,
};
use fovnerf_core::foveation::{Eye, StereoMode, StereoRig};
use fovnerf_core::math::{Mat3, Quat, Vec3};
use fovnerf_core::metrics::{banded_quality, time_pipeline, FrameTiming, TimingBreakdown};
use fovnerf_core::neural_field::{LayerTag, NeuralField};
use fovnerf_core::optimizer::{
    calibrate_latency, measure_latency, reprojection_sum, search, trajectory_points, LatencySample, NetConfig,
    ProbeCamera, SearchSpace, TrajectorySpec,
};
use fovnerf_core::protocol::FrameEncoding;
use fovnerf_core::{Error, Result};

use crate::plot::heatmap;
use crate::server::{serve, ServeOptions};

#[derive(Debug, Parser)]
#[command(name = "fovnerf", version, about = "Gaze-contingent neural scene synthesis")]
pub struct Cli {
    /// Pipeline config (TOML). Falls back to $FOVNERF_CONFIG, then built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "info")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dataset tools.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Train one layer network.
    Train(TrainArgs),
    /// Search network shapes under the latency budget.
    Optimize(OptimizeArgs),
    /// Render one stereo frame.
    Render(RenderArgs),
    /// Score trained models against reference renders.
    Eval(EvalArgs),
    /// Stream frames to viewers over WebSocket.
    Serve(ServeArgs),
    /// Time the render pipeline per stereo mode.
    Bench(BenchArgs),
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Render a training dataset for one layer.
    Gen(GenArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LayerArg {
    Fovea,
    Periphery,
}

impl LayerArg {
    fn tag(self) -> LayerTag {
        match self {
            LayerArg::Fovea => LayerTag::Fovea,
            LayerArg::Periphery => LayerTag::Mid,
        }
    }

    fn name(self) -> &'static str {
        match self {
            LayerArg::Fovea => "fovea",
            LayerArg::Periphery => "periphery",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Adaptive,
    Naive,
    Mono,
}

impl From<ModeArg> for StereoMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Adaptive => StereoMode::Adaptive,
            ModeArg::Naive => StereoMode::Naive,
            ModeArg::Mono => StereoMode::Mono,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EncodingArg {
    Png,
    Raw,
}

/// Overrides for the view sampling in the config's `[train]` table.
#[derive(Debug, Args)]
pub struct ViewArgs {
    #[arg(long)]
    pub scene: Option<String>,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub resolution_scale: Option<f64>,
    #[arg(long)]
    pub max_aim_deg: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ViewArgs {
    fn apply(&self, cfg: &mut PipelineConfig) -> Result<()> {
        if let Some(s) = &self.scene {
            cfg.scene = s.clone();
        }
        let t = &mut cfg.train;
        t.views = self.views.unwrap_or(t.views);
        t.resolution_scale = self.resolution_scale.unwrap_or(t.resolution_scale);
        t.max_aim_deg = self.max_aim_deg.unwrap_or(t.max_aim_deg);
        t.seed = self.seed.unwrap_or(t.seed);
        cfg.validate()
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub layer: LayerArg,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub views: ViewArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub layer: LayerArg,
    /// Output directory for the model, loss curve and held-out scores.
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset directory from `dataset gen`; rendered in memory when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[command(flatten)]
    pub views: ViewArgs,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [8, 16, 32, 48])]
    pub n: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [2, 4, 6])]
    pub nm: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [64, 96, 128, 192])]
    pub nc: Vec<usize>,
    /// Reference network as N,N_m,N_c.
    #[arg(long, value_delimiter = ',', default_values_t = [64, 8, 256])]
    pub reference: Vec<usize>,
    /// Rays per frame for the layer; defaults to both foveal images.
    #[arg(long)]
    pub rays: Option<usize>,
    #[arg(long)]
    pub budget_ms: Option<f64>,
    /// Rays marched per latency measurement.
    #[arg(long, default_value_t = 1024)]
    pub calib_rays: usize,
    #[arg(long, default_value_t = 3)]
    pub calib_reps: usize,
    /// Training epochs for each discrepancy network.
    #[arg(long, default_value_t = 2)]
    pub epochs: usize,
    #[arg(long, default_value_t = 4096)]
    pub probes: usize,
    #[arg(long, default_value_t = 1000)]
    pub trajectory_ms: usize,
    #[arg(long, default_value_t = 256)]
    pub points: usize,
    #[command(flatten)]
    pub views: ViewArgs,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub fovea: Option<PathBuf>,
    #[arg(long)]
    pub periphery: Option<PathBuf>,
    /// Use untrained random networks of the configured shape.
    #[arg(long)]
    pub random_weights: bool,
}

#[derive(Debug, Args)]
pub struct PoseArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.0, 0.0], allow_negative_numbers = true)]
    pub pos: Vec<f64>,
    /// Head orientation as w,x,y,z; overrides --yaw and --pitch.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub quat: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub yaw: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub pitch: f64,
    /// Gaze in display coordinates, u,v in [0, 1].
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.5])]
    pub gaze: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[command(flatten)]
    pub pose: PoseArgs,
    #[command(flatten)]
    pub models: ModelArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Displayed frames scored per eccentricity band.
    #[arg(long, default_value_t = 2)]
    pub frames: usize,
    #[arg(long, default_value_t = 5.0)]
    pub band_step: f64,
    #[arg(long, default_value_t = 8)]
    pub heldout: usize,
    #[command(flatten)]
    pub models: ModelArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8787")]
    pub bind: String,
    #[arg(long, value_enum, default_value = "png")]
    pub encoding: EncodingArg,
    #[command(flatten)]
    pub models: ModelArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "mode", value_enum, default_values_t = [ModeArg::Adaptive, ModeArg::Naive])]
    pub modes: Vec<ModeArg>,
    #[arg(long, default_value_t = 100)]
    pub frames: usize,
    #[command(flatten)]
    pub models: ModelArgs,
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = PipelineConfig::resolve(cli.config.as_deref())?;
    match cli.command {
        Command::Dataset {
            command: DatasetCommand::Gen(a),
        } => dataset_gen(cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Optimize(a) => optimize(cfg, a),
        Command::Render(a) => render(cfg, a),
        Command::Eval(a) => eval(cfg, a),
        Command::Serve(a) => serve_cmd(cfg, a),
        Command::Bench(a) => bench(cfg, a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Prints one JSON result line on stdout.
fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn dataset_gen(mut cfg: PipelineConfig, a: GenArgs) -> Result<()> {
    a.views.apply(&mut cfg)?;
    let scene = ProceduralScene::preset(&cfg.scene)?;
    let split = layer_views(&scene, a.layer.tag(), &cfg.train)?;
    let manifest = write_dataset(&a.out, &scene, a.layer.tag(), &split.train)?;
    emit(serde_json::json!({
        "dataset": a.out,
        "layer": a.layer.name(),
        "views": manifest.views.len(),
        "fov_deg": manifest.fov_deg,
        "width": manifest.width,
        "height": manifest.height,
    }));
    Ok(())
}

fn train(mut cfg: PipelineConfig, a: TrainArgs) -> Result<()> {
    a.views.apply(&mut cfg)?;
    cfg.train.epochs = a.epochs.unwrap_or(cfg.train.epochs);
    cfg.train.learning_rate = a.lr.unwrap_or(cfg.train.learning_rate);
    cfg.validate()?;
    let scene = ProceduralScene::preset(&cfg.scene)?;
    let net = *cfg.net(a.layer.tag());
    let split = layer_views(&scene, a.layer.tag(), &cfg.train)?;
    create_dir(&a.out)?;
    let mut curve_csv = String::from("epoch,mean_loss,learning_rate\n");
    let log_epoch = |r: &fovnerf_core::neural_field::EpochReport, csv: &mut String| {
        csv.push_str(&format!("{},{:.8e},{:.6e}\n", r.epoch, r.mean_loss, r.learning_rate));
        log::info!("{} epoch {}: loss {:.4e}", a.layer.name(), r.epoch, r.mean_loss);
    };
    let (field, _) = match &a.data {
        Some(dir) => {
            let manifest = read_manifest(dir)?;
            if manifest.layer != a.layer.tag() {
                return Err(Error::Config(format!("dataset is for the {} layer", manifest.layer)));
            }
            let data = load_rays(dir, &manifest)?;
            train_on(
                &data,
                scene.radius_bounds(4096),
                a.layer.tag(),
                &net,
                &cfg.train,
                |r, _| log_epoch(r, &mut curve_csv),
            )?
        }
        None => train_layer(&scene, a.layer.tag(), &net, &split.train, &cfg.train, |r, _| {
            log_epoch(r, &mut curve_csv)
        })?,
    };
    let model_path = a.out.join(format!("{}.fnrf", a.layer.name()));
    let bytes = field.save();
    write(&model_path, &bytes)?;
    write(&a.out.join(format!("{}_loss.csv", a.layer.name())), curve_csv)?;
    let scores = score_views(&field, &scene, &split.heldout)?;
    let n = scores.len().max(1) as f64;
    let summary = serde_json::json!({
        "model": model_path,
        "bytes": bytes.len(),
        "heldout_views": scores.len(),
        "psnr": scores.iter().map(|s| s.psnr).sum::<f64>() / n,
        "ssim": scores.iter().map(|s| s.ssim).sum::<f64>() / n,
    });
    write(
        &a.out.join(format!("{}_heldout.json", a.layer.name())),
        summary.to_string(),
    )?;
    emit(summary);
    Ok(())
}

fn optimize(mut cfg: PipelineConfig, a: OptimizeArgs) -> Result<()> {
    a.views.apply(&mut cfg)?;
    let scene = ProceduralScene::preset(&cfg.scene)?;
    expect_len("reference", &a.reference, 3)?;
    let reference = NetConfig::new(a.reference[0], a.reference[1], a.reference[2]);
    let layers = cfg.layers();
    let rays = a.rays.unwrap_or(2 * layers.fovea.n_pixels());
    let space = SearchSpace {
        n_spheres: a.n.clone(),
        n_layers: a.nm.clone(),
        n_channels: a.nc.clone(),
        reference,
        budget_ms: a.budget_ms.unwrap_or(cfg.budget_ms),
        rays,
    };
    space.validate()?;
    create_dir(&a.out)?;

    let encoding = cfg.fovea.encoding();
    let mut samples = Vec::new();
    for c in space.configs() {
        let ms = measure_latency(&c, encoding, a.calib_rays, a.calib_reps, cfg.train.seed)?;
        log::info!("latency {c:?}: {ms:.3} ms for {} rays", a.calib_rays);
        samples.push(LatencySample {
            config: c,
            rays: a.calib_rays,
            ms,
        });
    }
    let model = calibrate_latency(&samples, encoding.width())?;
    write(
        &a.out.join("latency.json"),
        serde_json::to_string_pretty(&model).expect("serializes"),
    )?;

    let mut train_cfg = cfg.train;
    train_cfg.epochs = a.epochs;
    let split = layer_views(&scene, LayerTag::Fovea, &train_cfg)?;
    let data = fovnerf_core::datagen::render_rays(&scene, &split.train)?;
    let table = discrepancy_table(
        &data,
        scene.radius_bounds(4096),
        &space,
        &cfg.fovea,
        &train_cfg,
        a.probes,
    )?;

    let trajectory = TrajectorySpec {
        duration_ms: a.trajectory_ms,
        ..Default::default()
    };
    let cam = ProbeCamera {
        fov_deg: layers.fovea.fov_deg,
        width: layers.fovea.width,
        height: layers.fovea.height,
    };
    let points = trajectory_points(&scene, &trajectory, &cam, a.points, cfg.train.seed)?;
    let result = search(&space, &model, &table, |l| {
        reprojection_sum(&trajectory, &cam, &points, l)
    })?;

    write(&a.out.join("search.csv"), result.to_csv())?;
    write(&a.out.join("heatmap_e.png"), heatmap(&result, |r| r.e, true)?)?;
    write(
        &a.out.join("heatmap_latency.png"),
        heatmap(&result, |r| r.latency_ms, false)?,
    )?;
    let chosen = match result.chosen() {
        Some(c) => {
            let mut out = cfg.clone();
            out.fovea = LayerNetConfig {
                n_spheres: c.n_spheres,
                n_layers: c.n_layers,
                n_channels: c.n_channels,
                ..cfg.fovea
            };
            write(&a.out.join("chosen.toml"), out.to_toml_string())?;
            serde_json::to_value(c).expect("serializes")
        }
        None => serde_json::Value::Null,
    };
    emit(serde_json::json!({
        "outcome": result.outcome,
        "chosen": chosen,
        "latency_a": model.a,
        "latency_b": model.b,
        "r_squared": model.r_squared,
        "rows": result.table.len(),
    }));
    Ok(())
}

fn load_engine(mut cfg: PipelineConfig, m: &ModelArgs) -> Result<Engine> {
    if m.random_weights {
        let scene = ProceduralScene::preset(&cfg.scene)?;
        let radii = scene.radius_bounds(4096);
        let make = |net: &LayerNetConfig, tag, seed| -> Result<NeuralField> {
            let mut f = NeuralField::new(tag, net.grid(radii)?, net.encoding(), net.mlp(), seed)?;
            f.mark_trained();
            Ok(f)
        };
        let fovea = make(&cfg.fovea, LayerTag::Fovea, 1)?;
        let periphery = make(&cfg.periphery, LayerTag::Mid, 2)?;
        return Engine::new(cfg, fovea, periphery);
    }
    if let Some(p) = &m.fovea {
        cfg.models.fovea = Some(p.clone());
    }
    if let Some(p) = &m.periphery {
        cfg.models.periphery = Some(p.clone());
    }
    Engine::load(cfg)
}

fn expect_len(name: &str, v: &[impl Sized], n: usize) -> Result<()> {
    if v.len() == n {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "--{name} takes {n} comma-separated values, got {}",
            v.len()
        )))
    }
}

fn rig_from_pose(engine: &Engine, p: &PoseArgs) -> Result<StereoRig> {
    expect_len("pos", &p.pos, 3)?;
    expect_len("gaze", &p.gaze, 2)?;
    if let Some(q) = &p.quat {
        expect_len("quat", q, 4)?;
    }
    let q = match &p.quat {
        Some(q) => Quat::from_wxyz([q[0], q[1], q[2], q[3]]),
        None => {
            let (yaw, pitch) = (p.yaw.to_radians(), p.pitch.to_radians());
            Quat::from_axis_angle(Vec3::Z, yaw) * Quat::from_axis_angle(-Vec3::Y, pitch)
        }
    };
    let gaze = engine.gaze_from_display(p.gaze[0], p.gaze[1])?;
    engine.rig(Vec3::new(p.pos[0], p.pos[1], p.pos[2]), q, gaze)
}

fn render(cfg: PipelineConfig, a: RenderArgs) -> Result<()> {
    let engine = load_engine(cfg, &a.models)?;
    let rig = rig_from_pose(&engine, &a.pose)?;
    let mode = a.mode.map_or(engine.config().mode, StereoMode::from);
    let r = engine.render_frame_mode(&rig, mode)?;
    create_dir(&a.out)?;
    write(&a.out.join("left.png"), r.frame.left.encode_png()?)?;
    write(&a.out.join("right.png"), r.frame.right.encode_png()?)?;
    write(
        &a.out.join("anaglyph.png"),
        anaglyph(&r.frame.left, &r.frame.right)?.encode_png()?,
    )?;
    emit(serde_json::json!({
        "out": a.out,
        "mode": mode,
        "timing": r.timing,
        "evaluations": r.stats.evaluations,
        "rays": r.stats.rays,
        "z_med": r.frame.z_med,
        "gaze_px": [r.frame.gaze_px.0, r.frame.gaze_px.1],
    }));
    Ok(())
}

fn eval(cfg: PipelineConfig, a: EvalArgs) -> Result<()> {
    let engine = load_engine(cfg, &a.models)?;
    let cfg = engine.config().clone();
    let scene = ProceduralScene::preset(&cfg.scene)?;
    create_dir(&a.out)?;
    let mut train_cfg = cfg.train;
    train_cfg.holdout_views = a.heldout;
    let mut layers = serde_json::Map::new();
    for (name, tag) in [("fovea", LayerTag::Fovea), ("periphery", LayerTag::Mid)] {
        let split = layer_views(&scene, tag, &train_cfg)?;
        let scores = score_views(engine.fields().get(tag)?, &scene, &split.heldout)?;
        let n = scores.len().max(1) as f64;
        layers.insert(
            name.into(),
            serde_json::json!({
                "views": scores.len(),
                "psnr": scores.iter().map(|s| s.psnr).sum::<f64>() / n,
                "ssim": scores.iter().map(|s| s.ssim).sum::<f64>() / n,
            }),
        );
    }
    let mut csv = String::new();
    for i in 0..a.frames {
        let gaze_yaw = -15.0 + 30.0 * i as f64 / a.frames.max(2).saturating_sub(1) as f64;
        let rig = StereoRig {
            ipd: cfg.ipd,
            head_position: scene.translation_box.center,
            head_rotation: Mat3::IDENTITY,
            ..Default::default()
        }
        .with_gaze_angles(gaze_yaw, 0.0);
        let r = engine.render_frame(&rig)?;
        let cam = cfg.display.camera(&rig, Eye::Left)?;
        let (reference, _) = render_reference(&scene, &cam);
        let ecc = eccentricity_map(&cfg.display, &rig, Eye::Left)?;
        let report = banded_quality(&r.frame.left, &reference, &ecc, a.band_step, cfg.display.fov_deg)?;
        for line in report.to_csv().lines().skip(usize::from(i > 0)) {
            let prefix = if line.starts_with("lo_deg") { "frame" } else { "" };
            if prefix.is_empty() {
                csv.push_str(&format!("{i},{line}\n"));
            } else {
                csv.push_str(&format!("{prefix},{line}\n"));
            }
        }
    }
    write(&a.out.join("bands.csv"), csv)?;
    let summary = serde_json::Value::Object(layers);
    write(&a.out.join("layers.json"), summary.to_string())?;
    emit(serde_json::json!({ "out": a.out, "layers": summary }));
    Ok(())
}

fn serve_cmd(cfg: PipelineConfig, a: ServeArgs) -> Result<()> {
    let engine = Arc::new(load_engine(cfg, &a.models)?);
    let encoding = match a.encoding {
        EncodingArg::Png => FrameEncoding::Png,
        EncodingArg::Raw => FrameEncoding::Raw,
    };
    let rt = tokio::runtime::Runtime::new().map_err(|e| io_err(Path::new(&a.bind), e))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.bind)
            .await
            .map_err(|e| io_err(Path::new(&a.bind), e))?;
        let addr = listener.local_addr().map_err(|e| io_err(Path::new(&a.bind), e))?;
        emit(serde_json::json!({ "listening": addr.to_string() }));
        serve(engine, listener, ServeOptions { encoding })
            .await
            .map_err(|e| io_err(Path::new(&a.bind), e))
    })
}

fn bench(cfg: PipelineConfig, a: BenchArgs) -> Result<()> {
    let engine = load_engine(cfg, &a.models)?;
    let base = StereoRig {
        ipd: engine.config().ipd,
        ..Default::default()
    };
    create_dir(&a.out)?;
    let mut csv = format!("{}\n", TimingBreakdown::CSV_HEADER);
    let mut rows = Vec::new();
    for m in &a.modes {
        let mode = StereoMode::from(*m);
        let report = time_pipeline(a.frames, mode, |i| -> Result<FrameTiming> {
            // slow gaze sweep so every frame differs
            let rig = base.with_gaze_angles(10.0 * (i as f64 * 0.1).sin(), 5.0 * (i as f64 * 0.07).cos());
            Ok(engine.render_frame_mode(&rig, mode)?.timing)
        })?;
        csv.push_str(&report.csv_row());
        csv.push('\n');
        rows.push(report);
    }
    write(&a.out.join("timing.csv"), &csv)?;
    emit(serde_json::json!({ "out": a.out, "breakdowns": rows }));
    Ok(())
}

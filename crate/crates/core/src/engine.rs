//! Pipeline configuration and the per-frame render loop.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::compositor::{composite_frame, ContrastParams, DisplayFrame, DisplaySpec};
use crate::datagen::{
    aim_rotation, lattice_positions, render_rays, render_reference, rotation_tiling, subsample_views, ProceduralScene,
    ViewSpec,
};
use crate::error::{Error, Result};
use crate::foveation::{
    synthesize, Eye, LayerFields, LayerSet, LayerSpec, StereoMode, StereoRig, SynthesisStats, DEFAULT_IPD,
};
use crate::image::RgbImage;
use crate::math::{Mat3, Quat, Vec3};
use crate::metrics::{psnr, ssim, FrameTiming, Stat, TimingBreakdown};
use crate::neural_field::{EncodingConfig, EpochReport, LayerTag, MlpConfig, NeuralField, RayDataset, TrainSchedule};
use crate::optimizer::{color_discrepancy, stratified_probes, SearchSpace};
use crate::raymarch::{build_rays, march, MarchOptions};
use crate::sphgeom::ConcentricGrid;
use crate::timing::Stopwatch;

pub const CONFIG_ENV: &str = "FOVNERF_CONFIG";

/// Network and grid shape of one layer network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerNetConfig {
    pub n_spheres: usize,
    pub n_layers: usize,
    pub n_channels: usize,
    #[serde(default = "default_bands")]
    pub bands: usize,
    #[serde(default = "default_true")]
    pub include_raw: bool,
    /// `[r_near, r_far]`; derived from the scene when absent.
    #[serde(default)]
    pub radii: Option<[f64; 2]>,
}

fn default_bands() -> usize {
    10
}

fn default_true() -> bool {
    true
}

impl LayerNetConfig {
    pub const FOVEA: LayerNetConfig = LayerNetConfig {
        n_spheres: 32,
        n_layers: 4,
        n_channels: 128,
        bands: 10,
        include_raw: true,
        radii: None,
    };
    pub const PERIPHERY: LayerNetConfig = LayerNetConfig {
        n_spheres: 16,
        n_layers: 4,
        n_channels: 96,
        bands: 10,
        include_raw: true,
        radii: None,
    };

    pub fn encoding(&self) -> EncodingConfig {
        EncodingConfig {
            bands: self.bands,
            include_raw: self.include_raw,
        }
    }

    pub fn mlp(&self) -> MlpConfig {
        MlpConfig {
            n_layers: self.n_layers,
            n_channels: self.n_channels,
        }
    }

    pub fn grid(&self, fallback: (f64, f64)) -> Result<ConcentricGrid> {
        let (near, far) = self.radii.map_or(fallback, |[a, b]| (a, b));
        ConcentricGrid::uniform(self.n_spheres, near, far)
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.n_spheres == 0 || self.n_layers == 0 || self.n_channels == 0 {
            return Err(Error::Config(format!(
                "{name}: sphere, layer and channel counts must be positive"
            )));
        }
        if let Some([a, b]) = self.radii {
            if !(a > 0.0 && b > a && b.is_finite()) {
                return Err(Error::Config(format!(
                    "{name}: radii must satisfy 0 < r_near < r_far, got [{a}, {b}]"
                )));
            }
        }
        Ok(())
    }

    /// Checks that a loaded field has this shape.
    pub fn check_field(&self, field: &NeuralField, name: &str) -> Result<()> {
        let grid = field.grid();
        let mut problems = Vec::new();
        if grid.n_spheres() != self.n_spheres {
            problems.push(format!("N={} (config {})", grid.n_spheres(), self.n_spheres));
        }
        if *field.mlp_config() != self.mlp() {
            let m = field.mlp_config();
            problems.push(format!(
                "N_m={} N_c={} (config {} {})",
                m.n_layers, m.n_channels, self.n_layers, self.n_channels
            ));
        }
        if *field.encoding() != self.encoding() {
            problems.push("encoding differs".into());
        }
        if let Some([a, b]) = self.radii {
            if (grid.r_near() - a).abs() > 1e-9 || (grid.r_far() - b).abs() > 1e-9 {
                problems.push(format!(
                    "radii [{}, {}] (config [{a}, {b}])",
                    grid.r_near(),
                    grid.r_far()
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{name} model does not match config: {}",
                problems.join(", ")
            )))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPaths {
    pub fovea: Option<PathBuf>,
    pub periphery: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub final_lr_fraction: f64,
    pub batch_rays: usize,
    pub max_steps_per_epoch: Option<usize>,
    /// Training views drawn from every (lattice position, aim) pair.
    pub views: usize,
    pub holdout_views: usize,
    pub lattice_step: f64,
    /// Only aims within this angle of straight ahead are used.
    pub max_aim_deg: f64,
    /// Training image side relative to the layer resolution.
    pub resolution_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 5e-4,
            final_lr_fraction: 0.1,
            batch_rays: 4096,
            max_steps_per_epoch: None,
            views: 2000,
            holdout_views: 8,
            lattice_step: 0.05,
            max_aim_deg: 180.0,
            resolution_scale: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            final_lr_fraction: self.final_lr_fraction,
            batch_rays: self.batch_rays,
            seed: self.seed,
            max_steps_per_epoch: self.max_steps_per_epoch,
            background: [0.0; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub scene: String,
    pub mode: StereoMode,
    pub ipd: f64,
    pub budget_ms: f64,
    /// Uniform scale on every layer resolution.
    pub layer_scale: f64,
    pub fovea: LayerNetConfig,
    pub periphery: LayerNetConfig,
    pub display: DisplaySpec,
    pub contrast: ContrastParams,
    pub models: ModelPaths,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scene: "smooth_room".into(),
            mode: StereoMode::Adaptive,
            ipd: DEFAULT_IPD,
            budget_ms: 24.0,
            layer_scale: 1.0,
            fovea: LayerNetConfig::FOVEA,
            periphery: LayerNetConfig::PERIPHERY,
            display: DisplaySpec::default(),
            contrast: ContrastParams::default(),
            models: ModelPaths::default(),
            train: TrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Reads a config file. Relative model paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.models.fovea, &mut cfg.models.periphery].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Loads `explicit`, else the file named by `FOVNERF_CONFIG`, else defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self> {
        match explicit {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
                _ => Ok(Self::default()),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fovea.validate("fovea")?;
        self.periphery.validate("periphery")?;
        let d = &self.display;
        if d.width == 0 || d.height == 0 || !(d.fov_deg > 0.0 && d.fov_deg < 180.0) {
            return Err(Error::Config(
                "display needs a positive size and a field of view in (0, 180)".into(),
            ));
        }
        if d.width > u16::MAX as usize || d.height > u16::MAX as usize {
            return Err(Error::Config("display size exceeds 65535".into()));
        }
        if !(self.ipd >= 0.0 && self.ipd.is_finite()) {
            return Err(Error::Config(format!(
                "ipd must be finite and non-negative, got {}",
                self.ipd
            )));
        }
        if !(self.budget_ms > 0.0) {
            return Err(Error::Config("budget_ms must be positive".into()));
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_rays == 0 || t.views == 0 {
            return Err(Error::Config(
                "train needs positive epochs, batch_rays and views".into(),
            ));
        }
        if !(t.learning_rate > 0.0 && t.final_lr_fraction > 0.0 && t.resolution_scale > 0.0 && t.lattice_step > 0.0) {
            return Err(Error::Config(
                "train rates, resolution_scale and lattice_step must be positive".into(),
            ));
        }
        if !(self.layer_scale > 0.0 && self.layer_scale <= 4.0) {
            return Err(Error::Config("layer_scale must lie in (0, 4]".into()));
        }
        let c = &self.contrast;
        if !(c.gain >= 0.0 && c.sigma_slope >= 0.0 && c.ramp >= 1.0) {
            return Err(Error::Config(
                "contrast needs gain >= 0, sigma_slope >= 0 and ramp >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn layers(&self) -> LayerSet {
        if self.layer_scale == 1.0 {
            LayerSet::default()
        } else {
            LayerSet::default().scaled(self.layer_scale)
        }
    }

    pub fn net(&self, tag: LayerTag) -> &LayerNetConfig {
        match tag {
            LayerTag::Fovea => &self.fovea,
            LayerTag::Mid | LayerTag::Far => &self.periphery,
        }
    }
}

/// Frame with its stage timings and synthesis counters.
#[derive(Clone, Debug)]
pub struct RenderedFrame {
    pub frame: DisplayFrame,
    pub timing: FrameTiming,
    pub stats: SynthesisStats,
}

/// Loaded networks plus the configuration that renders with them.
#[derive(Clone, Debug)]
pub struct Engine {
    config: PipelineConfig,
    fields: LayerFields,
    layers: LayerSet,
}

impl Engine {
    pub fn new(config: PipelineConfig, fovea: NeuralField, periphery: NeuralField) -> Result<Self> {
        config.validate()?;
        config.fovea.check_field(&fovea, "fovea")?;
        config.periphery.check_field(&periphery, "periphery")?;
        let layers = config.layers();
        Ok(Self {
            fields: LayerFields::new(Arc::new(fovea), Arc::new(periphery)),
            layers,
            config,
        })
    }

    /// Loads both model files named in the config.
    pub fn load(config: PipelineConfig) -> Result<Self> {
        let read = |p: &Option<PathBuf>, name: &str| -> Result<NeuralField> {
            let p = p
                .as_ref()
                .ok_or_else(|| Error::Config(format!("models.{name} is not set")))?;
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            NeuralField::load(&bytes)
        };
        let fovea = read(&config.models.fovea, "fovea")?;
        let periphery = read(&config.models.periphery, "periphery")?;
        Self::new(config, fovea, periphery)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn layers(&self) -> &LayerSet {
        &self.layers
    }

    pub fn fields(&self) -> &LayerFields {
        &self.fields
    }

    pub fn rig(&self, head_position: Vec3, head_rotation: Quat, gaze_dir: Vec3) -> Result<StereoRig> {
        let rot = head_rotation
            .normalized()
            .ok_or(Error::Degenerate("head rotation quaternion is zero"))?
            .to_mat3();
        StereoRig::new(head_position, rot, self.config.ipd, gaze_dir)
    }

    /// Head-frame gaze direction through normalised display coordinates `[0, 1]²`.
    pub fn gaze_from_display(&self, u: f64, v: f64) -> Result<Vec3> {
        if !(u.is_finite() && v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let d = &self.config.display;
        let cam = d.camera(&StereoRig::default(), Eye::Central)?;
        Ok(cam.direction_at(u * d.width as f64, v * d.height as f64))
    }

    pub fn render_frame(&self, rig: &StereoRig) -> Result<RenderedFrame> {
        self.render_frame_mode(rig, self.config.mode)
    }

    pub fn render_frame_mode(&self, rig: &StereoRig, mode: StereoMode) -> Result<RenderedFrame> {
        let watch = Stopwatch::start();
        let (set, stats) = synthesize(&self.fields, &self.layers, rig, mode, &MarchOptions::default())?;
        let frame = composite_frame(&set, &self.layers, &self.config.display, &self.config.contrast)?;
        let total_ms = watch.elapsed_ms();
        let mean_of = |fovea: bool| {
            let mut ms = 0.0;
            let mut views = Vec::new();
            for p in stats.passes.iter().filter(|p| (p.tag == LayerTag::Fovea) == fovea) {
                ms += p.ms;
                if !views.contains(&p.eye) {
                    views.push(p.eye);
                }
            }
            ms / views.len().max(1) as f64
        };
        let timing = FrameTiming {
            fovea_ms: mean_of(true),
            periphery_ms: mean_of(false),
            blend_ms: frame.timing.blend_ms + frame.timing.contrast_ms,
            total_ms,
        };
        Ok(RenderedFrame { frame, timing, stats })
    }
}

/// Training and held-out views for one layer network.
#[derive(Clone, Debug)]
pub struct ViewSplit {
    pub train: Vec<ViewSpec>,
    pub heldout: Vec<ViewSpec>,
}

/// Views for training the network of `tag`. Lattice positions alternate
/// between the training and held-out pools.
pub fn layer_views(scene: &ProceduralScene, tag: LayerTag, train: &TrainConfig) -> Result<ViewSplit> {
    let fov = tag.training_fov_deg();
    let spec = if tag == LayerTag::Fovea {
        LayerSpec::FOVEA
    } else {
        LayerSpec::MID
    };
    let side = |n: usize| ((n as f64 * train.resolution_scale).round() as usize).max(1);
    let (width, height) = (side(spec.width), side(spec.height));
    let positions = lattice_positions(&scene.translation_box, train.lattice_step)?;
    let aims: Vec<(f64, f64)> = rotation_tiling(fov)?
        .into_iter()
        .filter(|&(yaw, pitch)| {
            (Mat3::from_yaw_pitch(yaw, pitch) * Vec3::X)
                .angle_to(Vec3::X)
                .to_degrees()
                <= train.max_aim_deg + 1e-9
        })
        .collect();
    if aims.is_empty() {
        return Err(Error::Config(format!(
            "no aims within {}° of forward",
            train.max_aim_deg
        )));
    }
    let pool = |parity: usize| -> Vec<ViewSpec> {
        let mut out = Vec::new();
        for (i, &position) in positions.iter().enumerate() {
            if i % 2 != parity && positions.len() > 1 {
                continue;
            }
            for &(yaw, pitch) in &aims {
                out.push(ViewSpec {
                    position,
                    rotation: aim_rotation(yaw, pitch),
                    fov_deg: fov,
                    width,
                    height,
                });
            }
        }
        out
    };
    Ok(ViewSplit {
        train: subsample_views(pool(0), train.views, train.seed),
        heldout: subsample_views(pool(1), train.holdout_views, train.seed.wrapping_add(1)),
    })
}

/// Renders `views` of the scene and trains a fresh network on them.
pub fn train_layer(
    scene: &ProceduralScene,
    tag: LayerTag,
    net: &LayerNetConfig,
    views: &[ViewSpec],
    train: &TrainConfig,
    on_epoch: impl FnMut(&EpochReport, &NeuralField<f32>),
) -> Result<(NeuralField, Vec<f64>)> {
    let data = render_rays(scene, views)?;
    train_on(&data, scene.radius_bounds(4096), tag, net, train, on_epoch)
}

/// Trains a fresh network on a prepared ray dataset.
pub fn train_on(
    data: &RayDataset,
    radii: (f64, f64),
    tag: LayerTag,
    net: &LayerNetConfig,
    train: &TrainConfig,
    on_epoch: impl FnMut(&EpochReport, &NeuralField<f32>),
) -> Result<(NeuralField, Vec<f64>)> {
    let mut field = NeuralField::new(tag, net.grid(radii)?, net.encoding(), net.mlp(), train.seed)?;
    let curve = crate::neural_field::train(&mut field, data, &train.schedule(), on_epoch)?;
    Ok((field, curve))
}

/// Colour discrepancy of every `(N_m, N_c)` pair in `space` against the
/// reference network. All networks share the reference sphere count.
pub fn discrepancy_table(
    data: &RayDataset,
    radii: (f64, f64),
    space: &SearchSpace,
    template: &LayerNetConfig,
    train: &TrainConfig,
    n_probes: usize,
) -> Result<BTreeMap<(usize, usize), f64>> {
    let shape = |n_layers, n_channels| LayerNetConfig {
        n_spheres: space.reference.n_spheres,
        n_layers,
        n_channels,
        radii: Some([radii.0, radii.1]),
        ..*template
    };
    let r = space.reference;
    let (reference, _) = train_on(
        data,
        radii,
        LayerTag::Fovea,
        &shape(r.n_layers, r.n_channels),
        train,
        |_, _| {},
    )?;
    let probes = stratified_probes(reference.grid(), n_probes, train.seed);
    let mut table = BTreeMap::new();
    for &m in &space.n_layers {
        for &c in &space.n_channels {
            if table.contains_key(&(m, c)) {
                continue;
            }
            let (field, _) = train_on(data, radii, LayerTag::Fovea, &shape(m, c), train, |_, _| {})?;
            table.insert((m, c), color_discrepancy(&field, &reference, &probes)?);
        }
    }
    Ok(table)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub psnr: f64,
    pub ssim: f64,
}

/// PSNR and SSIM of a field against reference renders, both stored as 8-bit sRGB.
pub fn score_views(field: &NeuralField, scene: &ProceduralScene, views: &[ViewSpec]) -> Result<Vec<ViewScore>> {
    views
        .iter()
        .map(|v| {
            let cam = v.camera()?;
            let (reference, _) = render_reference(scene, &cam);
            let out = march(field, &build_rays(&cam), &MarchOptions::default());
            let quantise = |im: RgbImage| RgbImage::from_srgb8(im.width, im.height, &im.to_srgb8());
            let a = quantise(RgbImage::from_pixels(cam.width, cam.height, &out.color));
            let b = quantise(reference);
            Ok(ViewScore {
                psnr: psnr(&a, &b)?,
                ssim: ssim(&a, &b)?,
            })
        })
        .collect()
}

pub const TIMING_RING: usize = 120;

/// Latest pose and timing history of one viewer session.
#[derive(Clone, Debug, Default)]
pub struct SessionState {
    latest: Option<(f64, StereoRig, bool)>,
    frames: u64,
    timings: VecDeque<FrameTiming>,
}

impl SessionState {
    /// Stores a pose unless it is older than the one held. Returns whether it was kept.
    pub fn offer(&mut self, t_ms: f64, rig: StereoRig, stereo: bool) -> bool {
        match self.latest {
            Some((t, _, _)) if t_ms < t => false,
            _ => {
                self.latest = Some((t_ms, rig, stereo));
                true
            }
        }
    }

    pub fn latest(&self) -> Option<(f64, StereoRig, bool)> {
        self.latest
    }

    pub fn frames(&self) -> u64 {
        self.frames
    }

    /// Counts a finished frame and returns its id.
    pub fn record(&mut self, timing: FrameTiming) -> u64 {
        if self.timings.len() == TIMING_RING {
            self.timings.pop_front();
        }
        self.timings.push_back(timing);
        self.frames += 1;
        self.frames - 1
    }

    pub fn breakdown(&self, mode: StereoMode) -> TimingBreakdown {
        let col = |f: fn(&FrameTiming) -> f64| Stat::of(&self.timings.iter().map(f).collect::<Vec<_>>());
        TimingBreakdown {
            mode,
            frames: self.timings.len(),
            fovea_ms: col(|t| t.fovea_ms),
            periphery_ms: col(|t| t.periphery_ms),
            blend_ms: col(|t| t.blend_ms),
            total_ms: col(|t| t.total_ms),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> PipelineConfig {
        let net = |n| LayerNetConfig {
            n_spheres: n,
            n_layers: 2,
            n_channels: 16,
            bands: 4,
            include_raw: true,
            radii: Some([1.0, 6.0]),
        };
        PipelineConfig {
            fovea: net(6),
            periphery: net(4),
            layer_scale: 0.25,
            display: DisplaySpec {
                width: 96,
                height: 96,
                fov_deg: 110.0,
            },
            ..Default::default()
        }
    }

    pub(crate) fn small_engine(cfg: PipelineConfig) -> Engine {
        let make = |c: &LayerNetConfig, tag, seed| {
            let mut f = NeuralField::new(tag, c.grid((1.0, 6.0)).unwrap(), c.encoding(), c.mlp(), seed).unwrap();
            f.mark_trained();
            f
        };
        let fovea = make(&cfg.fovea, LayerTag::Fovea, 1);
        let periphery = make(&cfg.periphery, LayerTag::Mid, 2);
        Engine::new(cfg, fovea, periphery).unwrap()
    }

    #[test]
    fn defaults_are_the_optimised_shapes() {
        let c = PipelineConfig::default();
        assert_eq!((c.fovea.n_spheres, c.fovea.n_layers, c.fovea.n_channels), (32, 4, 128));
        assert_eq!(
            (c.periphery.n_spheres, c.periphery.n_layers, c.periphery.n_channels),
            (16, 4, 96)
        );
        assert_eq!(c.budget_ms, 24.0);
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_rejections() {
        let c = small_config();
        let back = PipelineConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        let partial =
            PipelineConfig::from_toml_str("mode = \"naive\"\n[display]\nwidth = 10\nheight = 20\nfov_deg = 90.0\n")
                .unwrap();
        assert_eq!(partial.mode, StereoMode::Naive);
        assert_eq!(partial.fovea, LayerNetConfig::FOVEA);
        assert!(PipelineConfig::from_toml_str("bogus = 1").is_err());
        assert!(PipelineConfig::from_toml_str("[fovea]\nn_spheres = 0\nn_layers = 4\nn_channels = 8").is_err());
        assert!(PipelineConfig::from_toml_str("ipd = -1.0").is_err());
    }

    #[test]
    fn load_resolves_relative_model_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "[models]\nfovea = \"f.fnrf\"\nperiphery = \"/abs/p.fnrf\"\n").unwrap();
        let c = PipelineConfig::load(&path).unwrap();
        assert_eq!(c.models.fovea.unwrap(), dir.path().join("f.fnrf"));
        assert_eq!(c.models.periphery.unwrap(), PathBuf::from("/abs/p.fnrf"));
        assert!(matches!(
            PipelineConfig::load(&dir.path().join("none.toml")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let cfg = small_config();
        let wrong = NeuralField::new(
            LayerTag::Fovea,
            ConcentricGrid::uniform(3, 1.0, 6.0).unwrap(),
            cfg.fovea.encoding(),
            cfg.fovea.mlp(),
            0,
        )
        .unwrap();
        let ok = NeuralField::new(
            LayerTag::Mid,
            cfg.periphery.grid((1.0, 6.0)).unwrap(),
            cfg.periphery.encoding(),
            cfg.periphery.mlp(),
            0,
        )
        .unwrap();
        let err = Engine::new(cfg, wrong, ok).unwrap_err();
        assert!(err.to_string().contains("fovea"));
    }

    #[test]
    fn frames_are_deterministic() {
        let engine = small_engine(small_config());
        let rig = StereoRig::default().with_gaze_angles(5.0, -3.0);
        let a = engine.render_frame(&rig).unwrap();
        let b = engine.render_frame(&rig).unwrap();
        assert_eq!(a.frame.left.to_srgb8(), b.frame.left.to_srgb8());
        assert_eq!(a.frame.right.data, b.frame.right.data);
        assert!(a.timing.total_ms >= 0.0);
        assert_eq!(a.stats.passes.len(), 4);
    }

    #[test]
    fn adaptive_equals_naive_without_baseline() {
        let mut cfg = small_config();
        cfg.ipd = 0.0;
        let engine = small_engine(cfg);
        let rig = engine
            .rig(Vec3::ZERO, Quat::IDENTITY, Vec3::new(1.0, 0.2, 0.1))
            .unwrap();
        let a = engine.render_frame_mode(&rig, StereoMode::Adaptive).unwrap();
        let n = engine.render_frame_mode(&rig, StereoMode::Naive).unwrap();
        assert_eq!(a.frame.left.data, n.frame.left.data);
        assert_eq!(a.frame.right.data, n.frame.right.data);
    }

    #[test]
    fn gaze_shift_leaves_outer_far_field_unchanged() {
        // no baseline, so the periphery is never re-projected by the foveal depth
        let mut cfg = small_config();
        cfg.contrast.gain = 0.0;
        cfg.ipd = 0.0;
        let engine = small_engine(cfg);
        let r0 = engine.rig(Vec3::ZERO, Quat::IDENTITY, Vec3::X).unwrap();
        let r1 = r0.with_gaze_angles(5.0, 0.0);
        let f0 = engine.render_frame(&r0).unwrap();
        let f1 = engine.render_frame(&r1).unwrap();
        let mid_half = engine.layers().mid.half_extent_deg();
        let cam = engine.config().display.camera(&r0, Eye::Left).unwrap();
        let d = &engine.config().display;
        let mut compared = 0;
        for y in 0..d.height {
            for x in 0..d.width {
                let dir = cam.direction_at(x as f64 + 0.5, y as f64 + 0.5);
                let e0 = dir.angle_to(r0.gaze_world()).to_degrees();
                let e1 = dir.angle_to(r1.gaze_world()).to_degrees();
                if e0 > mid_half && e1 > mid_half {
                    assert_eq!(f0.frame.left.get(x, y), f1.frame.left.get(x, y));
                    compared += 1;
                }
            }
        }
        assert!(compared > 1000);
        // gaze pixel moves by the focal-length projection of 5°
        let dx = f1.frame.gaze_px.0 - f0.frame.gaze_px.0;
        let expect = -cam.focal_px() * 5f64.to_radians().tan();
        assert!((dx - expect).abs() < 1e-6, "{dx} vs {expect}");
    }

    #[test]
    fn display_gaze_centre_is_forward() {
        let engine = small_engine(small_config());
        let g = engine.gaze_from_display(0.5, 0.5).unwrap();
        assert!(g.angle_to(Vec3::X) < 1e-12);
        let left = engine.gaze_from_display(0.25, 0.5).unwrap();
        assert!(left.y > 0.0);
    }

    #[test]
    fn view_split_is_disjoint_and_sized() {
        let scene = ProceduralScene::smooth_room();
        let t = TrainConfig {
            views: 30,
            holdout_views: 5,
            max_aim_deg: 25.0,
            resolution_scale: 0.25,
            ..Default::default()
        };
        let split = layer_views(&scene, LayerTag::Fovea, &t).unwrap();
        assert_eq!(split.train.len(), 30);
        assert_eq!(split.heldout.len(), 5);
        assert_eq!(
            (split.train[0].width, split.train[0].height, split.train[0].fov_deg),
            (32, 32, 20.0)
        );
        for h in &split.heldout {
            assert!(split.train.iter().all(|v| v.position != h.position));
            let fwd = h.rotation * Vec3::Z;
            assert!(fwd.angle_to(Vec3::X).to_degrees() <= 25.0 + 1e-9);
        }
        let mid = layer_views(&scene, LayerTag::Mid, &t).unwrap();
        assert_eq!((mid.train[0].width, mid.train[0].fov_deg), (64, 45.0));
    }

    #[test]
    fn short_training_improves_heldout_psnr() {
        let scene = ProceduralScene::smooth_room();
        let t = TrainConfig {
            views: 6,
            holdout_views: 2,
            max_aim_deg: 10.0,
            resolution_scale: 0.125,
            epochs: 1,
            learning_rate: 2e-3,
            batch_rays: 512,
            ..Default::default()
        };
        let net = LayerNetConfig {
            n_spheres: 8,
            n_layers: 2,
            n_channels: 32,
            bands: 4,
            include_raw: true,
            radii: None,
        };
        let split = layer_views(&scene, LayerTag::Fovea, &t).unwrap();
        let untrained = NeuralField::new(
            LayerTag::Fovea,
            net.grid(scene.radius_bounds(512)).unwrap(),
            net.encoding(),
            net.mlp(),
            0,
        )
        .unwrap();
        let before = score_views(&untrained, &scene, &split.heldout).unwrap();
        let (field, curve) = train_layer(&scene, LayerTag::Fovea, &net, &split.train, &t, |_, _| {}).unwrap();
        assert!(field.is_trained());
        assert_eq!(curve.len(), 1);
        let after = score_views(&field, &scene, &split.heldout).unwrap();
        let mean = |v: &[ViewScore]| v.iter().map(|s| s.psnr).sum::<f64>() / v.len() as f64;
        assert!(mean(&after) > mean(&before));
    }

    #[test]
    fn session_keeps_newest_pose() {
        let mut s = SessionState::default();
        let rig = StereoRig::default();
        assert!(s.offer(10.0, rig, true));
        assert!(!s.offer(5.0, rig.with_gaze_angles(3.0, 0.0), true));
        assert!(s.offer(12.0, rig.with_gaze_angles(4.0, 0.0), false));
        assert_eq!(s.latest().unwrap().0, 12.0);
        for i in 0..(TIMING_RING + 5) {
            assert_eq!(
                s.record(FrameTiming {
                    total_ms: i as f64,
                    ..Default::default()
                }),
                i as u64
            );
        }
        let b = s.breakdown(StereoMode::Adaptive);
        assert_eq!(b.frames, TIMING_RING);
        assert_eq!(
            b.total_ms.mean,
            (5..TIMING_RING + 5).sum::<usize>() as f64 / TIMING_RING as f64
        );
    }
}

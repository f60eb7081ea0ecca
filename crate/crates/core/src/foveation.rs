//! Acuity-matched layers, gaze-locked cameras and stereo-adaptive synthesis.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Mat3, Vec3, CAMERA_TO_HEAD};
use crate::neural_field::{LayerTag, NeuralField};
use crate::raymarch::{build_rays_with_id, march, MarchOptions, PinholeCamera};
use crate::timing::Stopwatch;

/// One elemental image's field of view and resolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub tag: LayerTag,
    /// Full angular extent of the larger image dimension.
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
    pub gaze_locked: bool,
}

impl LayerSpec {
    pub const FOVEA: LayerSpec = LayerSpec {
        tag: LayerTag::Fovea,
        fov_deg: 20.0,
        width: 128,
        height: 128,
        gaze_locked: true,
    };
    pub const MID: LayerSpec = LayerSpec {
        tag: LayerTag::Mid,
        fov_deg: 45.0,
        width: 256,
        height: 256,
        gaze_locked: true,
    };
    pub const FAR: LayerSpec = LayerSpec {
        tag: LayerTag::Far,
        fov_deg: 110.0,
        width: 230,
        height: 256,
        gaze_locked: false,
    };

    pub fn for_tag(tag: LayerTag) -> LayerSpec {
        match tag {
            LayerTag::Fovea => Self::FOVEA,
            LayerTag::Mid => Self::MID,
            LayerTag::Far => Self::FAR,
        }
    }

    pub fn ppd(&self) -> f64 {
        self.width.max(self.height) as f64 / self.fov_deg
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    /// Angular radius used for blending against the next layer out.
    pub fn half_extent_deg(&self) -> f64 {
        0.5 * self.fov_deg
    }

    /// Same layer at a different resolution, keeping the angular density ratio.
    pub fn scaled(&self, factor: f64) -> LayerSpec {
        let s = |v: usize| ((v as f64 * factor).round() as usize).max(1);
        LayerSpec {
            width: s(self.width),
            height: s(self.height),
            ..*self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Eye {
    Left,
    Right,
    Central,
}

impl fmt::Display for Eye {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Eye::Left => "left",
            Eye::Right => "right",
            Eye::Central => "central",
        })
    }
}

/// Largest gaze eccentricity the far layer can show.
pub const MAX_GAZE_ECCENTRICITY_DEG: f64 = 55.0;

pub const DEFAULT_IPD: f64 = 0.064;

/// Head pose, eye baseline and gaze in the head frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StereoRig {
    pub head_position: Vec3,
    /// Head frame to world.
    pub head_rotation: Mat3,
    pub ipd: f64,
    /// Unit gaze direction in the head frame; +x is straight ahead.
    pub gaze_dir: Vec3,
}

impl Default for StereoRig {
    fn default() -> Self {
        Self {
            head_position: Vec3::ZERO,
            head_rotation: Mat3::IDENTITY,
            ipd: DEFAULT_IPD,
            gaze_dir: Vec3::X,
        }
    }
}

impl StereoRig {
    pub fn new(head_position: Vec3, head_rotation: Mat3, ipd: f64, gaze_dir: Vec3) -> Result<Self> {
        let gaze_dir = gaze_dir
            .try_normalize()
            .ok_or_else(|| Error::Degenerate("gaze direction is zero"))?;
        if !(ipd >= 0.0 && ipd.is_finite()) {
            return Err(Error::Config(format!("ipd {ipd} must be finite and non-negative")));
        }
        Ok(Self {
            head_position,
            head_rotation,
            ipd,
            gaze_dir,
        })
    }

    /// Gaze given as yaw (left positive) and pitch (up positive) in degrees.
    pub fn with_gaze_angles(mut self, yaw_deg: f64, pitch_deg: f64) -> Self {
        self.gaze_dir = Mat3::from_yaw_pitch(yaw_deg.to_radians(), pitch_deg.to_radians()) * Vec3::X;
        self
    }

    pub fn eye_position(&self, eye: Eye) -> Vec3 {
        let lateral = self.head_rotation * Vec3::Y;
        match eye {
            Eye::Left => self.head_position + lateral * (0.5 * self.ipd),
            Eye::Right => self.head_position - lateral * (0.5 * self.ipd),
            Eye::Central => self.head_position,
        }
    }

    pub fn gaze_world(&self) -> Vec3 {
        self.head_rotation * self.clamped_gaze().0
    }

    /// Gaze restricted to the displayable cone, and whether it was clamped.
    pub fn clamped_gaze(&self) -> (Vec3, bool) {
        let g = self.gaze_dir;
        let max = MAX_GAZE_ECCENTRICITY_DEG.to_radians();
        let ecc = Vec3::X.angle_to(g);
        if ecc <= max {
            return (g, false);
        }
        let perp = Vec3::new(0.0, g.y, g.z);
        let perp = perp.try_normalize().unwrap_or(Vec3::Y);
        (Vec3::X * max.cos() + perp * max.sin(), true)
    }
}

/// Camera for `layer` seen from `eye`. The flag reports a clamped gaze.
pub fn layer_camera(layer: &LayerSpec, rig: &StereoRig, eye: Eye) -> Result<(PinholeCamera, bool)> {
    let (gaze, clamped) = rig.clamped_gaze();
    let aim = if layer.gaze_locked {
        let yaw = gaze.y.atan2(gaze.x);
        let pitch = gaze.z.clamp(-1.0, 1.0).asin();
        Mat3::from_yaw_pitch(yaw, pitch)
    } else {
        Mat3::IDENTITY
    };
    let rotation = rig.head_rotation * aim * CAMERA_TO_HEAD;
    let cam = PinholeCamera::new(
        rig.eye_position(eye),
        rotation,
        layer.fov_deg,
        layer.width,
        layer.height,
    )?;
    Ok((cam, clamped && layer.gaze_locked))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StereoMode {
    /// Per-eye fovea, central-eye periphery: four passes.
    Adaptive,
    /// Every layer per eye: six passes.
    Naive,
    /// Everything from the central eye: three passes.
    Mono,
}

impl StereoMode {
    pub fn passes(self) -> Vec<(LayerTag, Eye)> {
        use Eye::*;
        use LayerTag::*;
        match self {
            StereoMode::Adaptive => vec![(Fovea, Left), (Fovea, Right), (Mid, Central), (Far, Central)],
            StereoMode::Naive => vec![
                (Fovea, Left),
                (Fovea, Right),
                (Mid, Left),
                (Mid, Right),
                (Far, Left),
                (Far, Right),
            ],
            StereoMode::Mono => vec![(Fovea, Central), (Mid, Central), (Far, Central)],
        }
    }
}

/// One rendered layer image with its camera.
#[derive(Clone, Debug)]
pub struct ElementalImage {
    pub tag: LayerTag,
    pub eye: Eye,
    pub camera: PinholeCamera,
    pub color: Vec<[f32; 3]>,
    pub depth: Vec<f32>,
    pub alpha: Vec<f32>,
}

impl ElementalImage {
    pub fn width(&self) -> usize {
        self.camera.width
    }

    pub fn height(&self) -> usize {
        self.camera.height
    }

    /// A constant-colour image, useful as a stand-in for a trained field.
    pub fn uniform(tag: LayerTag, eye: Eye, camera: PinholeCamera, color: [f32; 3], depth: f32) -> Self {
        let n = camera.n_pixels();
        Self {
            tag,
            eye,
            camera,
            color: vec![color; n],
            depth: vec![depth; n],
            alpha: vec![1.0; n],
        }
    }
}

#[derive(Clone, Debug)]
pub struct ElementalImageSet {
    pub mode: StereoMode,
    pub rig: StereoRig,
    pub images: Vec<ElementalImage>,
    pub gaze_clamped: bool,
}

impl ElementalImageSet {
    /// Image for `tag` as seen by `eye`, falling back to the central eye.
    pub fn get(&self, tag: LayerTag, eye: Eye) -> Option<&ElementalImage> {
        self.images
            .iter()
            .find(|im| im.tag == tag && im.eye == eye)
            .or_else(|| self.images.iter().find(|im| im.tag == tag && im.eye == Eye::Central))
    }

    pub fn total_pixels(&self) -> usize {
        self.images.iter().map(|im| im.color.len()).sum()
    }
}

/// Trained networks per layer. The mid and far layers usually share one.
#[derive(Clone, Debug, Default)]
pub struct LayerFields {
    pub fovea: Option<Arc<NeuralField>>,
    pub mid: Option<Arc<NeuralField>>,
    pub far: Option<Arc<NeuralField>>,
}

impl LayerFields {
    pub fn new(fovea: Arc<NeuralField>, periphery: Arc<NeuralField>) -> Self {
        Self {
            fovea: Some(fovea),
            mid: Some(periphery.clone()),
            far: Some(periphery),
        }
    }

    pub fn get(&self, tag: LayerTag) -> Result<&Arc<NeuralField>> {
        let slot = match tag {
            LayerTag::Fovea => &self.fovea,
            LayerTag::Mid => &self.mid,
            LayerTag::Far => &self.far,
        };
        slot.as_ref()
            .ok_or_else(|| Error::Config(format!("no field configured for the {tag} layer")))
    }
}

/// Layer resolutions used for synthesis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSet {
    pub fovea: LayerSpec,
    pub mid: LayerSpec,
    pub far: LayerSpec,
}

impl Default for LayerSet {
    fn default() -> Self {
        Self {
            fovea: LayerSpec::FOVEA,
            mid: LayerSpec::MID,
            far: LayerSpec::FAR,
        }
    }
}

impl LayerSet {
    pub fn get(&self, tag: LayerTag) -> &LayerSpec {
        match tag {
            LayerTag::Fovea => &self.fovea,
            LayerTag::Mid => &self.mid,
            LayerTag::Far => &self.far,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            fovea: self.fovea.scaled(factor),
            mid: self.mid.scaled(factor),
            far: self.far.scaled(factor),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SynthesisStats {
    pub evaluations: u64,
    pub rays: u64,
    pub passes: Vec<PassTiming>,
    pub total_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PassTiming {
    pub tag: LayerTag,
    pub eye: Eye,
    pub ms: f64,
    pub evaluations: u64,
}

/// Network evaluations needed for one frame, assuming every ray crosses every sphere.
pub fn closed_form_evaluations(mode: StereoMode, layers: &LayerSet, n_fovea: usize, n_periphery: usize) -> u64 {
    mode.passes()
        .into_iter()
        .map(|(tag, _)| {
            let n = if tag == LayerTag::Fovea { n_fovea } else { n_periphery };
            (layers.get(tag).n_pixels() * n) as u64
        })
        .sum()
}

/// Marches every pass that `mode` requires.
pub fn synthesize(
    fields: &LayerFields,
    layers: &LayerSet,
    rig: &StereoRig,
    mode: StereoMode,
    opts: &MarchOptions,
) -> Result<(ElementalImageSet, SynthesisStats)> {
    let total = Stopwatch::start();
    let mut images = Vec::new();
    let mut stats = SynthesisStats::default();
    let mut gaze_clamped = false;
    for (id, (tag, eye)) in mode.passes().into_iter().enumerate() {
        let field = fields.get(tag)?;
        let (camera, clamped) = layer_camera(layers.get(tag), rig, eye)?;
        gaze_clamped |= clamped;
        let watch = Stopwatch::start();
        let batch = build_rays_with_id(&camera, id as u32);
        let out = march(field.as_ref(), &batch, opts);
        stats.passes.push(PassTiming {
            tag,
            eye,
            ms: watch.elapsed_ms(),
            evaluations: out.evaluations,
        });
        stats.evaluations += out.evaluations;
        stats.rays += batch.len() as u64;
        images.push(ElementalImage {
            tag,
            eye,
            camera,
            color: out.color,
            depth: out.depth,
            alpha: out.alpha,
        });
    }
    stats.total_ms = total.elapsed_ms();
    Ok((
        ElementalImageSet {
            mode,
            rig: *rig,
            images,
            gaze_clamped,
        },
        stats,
    ))
}

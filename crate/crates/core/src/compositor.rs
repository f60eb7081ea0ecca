//! Display-frame assembly: layer blending, periphery disparity shift,
//! peripheral contrast enhancement and anaglyph export.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::foveation::{ElementalImage, ElementalImageSet, Eye, LayerSet, StereoRig};
use crate::image::{bilinear, RgbImage};
use crate::math::{Vec3, CAMERA_TO_HEAD};
use crate::neural_field::LayerTag;
use crate::raymarch::PinholeCamera;
use crate::timing::Stopwatch;

/// Start of the blend band as a fraction of the inner layer's half extent.
pub const BLEND_START: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisplaySpec {
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
}

impl Default for DisplaySpec {
    fn default() -> Self {
        Self {
            width: 1440,
            height: 1600,
            fov_deg: 110.0,
        }
    }
}

impl DisplaySpec {
    pub fn ppd(&self) -> f64 {
        self.width.max(self.height) as f64 / self.fov_deg
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    /// Head-fixed display camera for one eye.
    pub fn camera(&self, rig: &StereoRig, eye: Eye) -> Result<PinholeCamera> {
        PinholeCamera::new(
            rig.eye_position(eye),
            rig.head_rotation * CAMERA_TO_HEAD,
            self.fov_deg,
            self.width,
            self.height,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastParams {
    /// Unsharp gain; zero disables enhancement.
    pub gain: f64,
    /// Blur sigma in degrees per degree of eccentricity.
    pub sigma_slope: f64,
    /// Enhancement ramps in between the foveal edge and this multiple of it.
    pub ramp: f64,
}

impl Default for ContrastParams {
    fn default() -> Self {
        Self {
            gain: 0.5,
            sigma_slope: 0.015,
            ramp: 1.4,
        }
    }
}

/// `3t² − 2t³` on `t = (x − e0)/(e1 − e0)` clamped to `[0, 1]`.
pub fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Weight of an inner layer of half extent `inner_deg` at eccentricity `theta_deg`.
pub fn inner_weight(inner_deg: f64, theta_deg: f64) -> f64 {
    1.0 - smoothstep(BLEND_START * inner_deg, inner_deg, theta_deg)
}

/// Fovea, mid and far weights at an eccentricity. They always sum to one.
pub fn blend_weights(layers: &LayerSet, theta_deg: f64) -> [f64; 3] {
    let wf = inner_weight(layers.fovea.half_extent_deg(), theta_deg);
    let wm = inner_weight(layers.mid.half_extent_deg(), theta_deg);
    [wf, (1.0 - wf) * wm, (1.0 - wf) * (1.0 - wm)]
}

/// Signed horizontal angle that moves mono periphery content toward `eye`.
/// Positive moves content right in the image.
pub fn disparity_angle(ipd: f64, z_med: f64, eye: Eye) -> f64 {
    if !(z_med.is_finite() && z_med > 0.0) || ipd == 0.0 {
        return 0.0;
    }
    let delta = (0.5 * ipd / z_med).atan();
    match eye {
        Eye::Left => delta,
        Eye::Right => -delta,
        Eye::Central => 0.0,
    }
}

/// Horizontal pixel shift equivalent to [`disparity_angle`] for a camera of focal length `focal_px`.
pub fn disparity_pixels(ipd: f64, z_med: f64, eye: Eye, focal_px: f64) -> f64 {
    focal_px * disparity_angle(ipd, z_med, eye).tan()
}

/// Shifts an image horizontally by `shift_px` (positive moves content
/// right), resampling bilinearly with clamped edges.
pub fn disparity_shift(img: &RgbImage, shift_px: f64) -> RgbImage {
    if shift_px == 0.0 {
        return img.clone();
    }
    let mut out = RgbImage::new(img.width, img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            let c = img.sample_bilinear(x as f64 + 0.5 - shift_px, y as f64 + 0.5);
            out.set(x, y, c);
        }
    }
    out
}

/// Alpha-weighted median of finite depths over the foveal images.
pub fn foveal_depth_median(images: &[&ElementalImage]) -> f64 {
    let mut pairs: Vec<(f32, f32)> = images
        .iter()
        .flat_map(|im| im.depth.iter().zip(&im.alpha))
        .filter(|(d, a)| d.is_finite() && **a > 0.0)
        .map(|(d, a)| (*d, *a))
        .collect();
    if pairs.is_empty() {
        return f64::INFINITY;
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1 as f64).sum();
    let mut acc = 0.0;
    for (d, a) in &pairs {
        acc += *a as f64;
        if acc >= 0.5 * total {
            return *d as f64;
        }
    }
    pairs.last().map(|p| p.0 as f64).unwrap_or(f64::INFINITY)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CompositeTiming {
    pub blend_ms: f64,
    pub contrast_ms: f64,
}

#[derive(Clone, Debug)]
pub struct DisplayFrame {
    pub left: RgbImage,
    pub right: RgbImage,
    /// Gaze point in left-eye display pixels.
    pub gaze_px: (f64, f64),
    pub z_med: f64,
    pub timing: CompositeTiming,
}

/// Per-pixel eccentricity in degrees from the gaze, for one eye's display.
pub fn eccentricity_map(display: &DisplaySpec, rig: &StereoRig, eye: Eye) -> Result<Vec<f64>> {
    let cam = display.camera(rig, eye)?;
    let gaze = rig.gaze_world();
    Ok(pixel_map(display.width, display.height, |x, y| {
        cam.direction_at(x as f64 + 0.5, y as f64 + 0.5)
            .angle_to(gaze)
            .to_degrees()
    }))
}

fn pixel_map<T: Send + Copy + Default>(width: usize, height: usize, f: impl Fn(usize, usize) -> T + Sync) -> Vec<T> {
    let mut out = vec![T::default(); width * height];
    let row = |(y, slot): (usize, &mut [T])| {
        for (x, v) in slot.iter_mut().enumerate() {
            *v = f(x, y);
        }
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.par_chunks_mut(width).enumerate().for_each(row);
    }
    #[cfg(not(feature = "parallel"))]
    out.chunks_mut(width).enumerate().for_each(row);
    out
}

fn sample_layer(im: &ElementalImage, dir: Vec3, shift_px: f64) -> Option<[f32; 3]> {
    let (px, py) = im.camera.project_direction(dir)?;
    if !im.camera.contains_pixel(px, py) {
        return None;
    }
    Some(bilinear::<3>(
        im.color.as_flattened(),
        3,
        im.width(),
        im.height(),
        px - shift_px,
        py,
    ))
}

/// Blends the elemental images into one eye's display image.
pub fn blend_eye(
    set: &ElementalImageSet,
    layers: &LayerSet,
    display: &DisplaySpec,
    eye: Eye,
    z_med: f64,
) -> Result<RgbImage> {
    let rig = &set.rig;
    let missing = |t: LayerTag| Error::Config(format!("elemental image for the {t} layer is missing"));
    let fovea = set.get(LayerTag::Fovea, eye).ok_or_else(|| missing(LayerTag::Fovea))?;
    let mid = set.get(LayerTag::Mid, eye).ok_or_else(|| missing(LayerTag::Mid))?;
    let far = set.get(LayerTag::Far, eye).ok_or_else(|| missing(LayerTag::Far))?;
    let cam = display.camera(rig, eye)?;
    let gaze = rig.gaze_world();
    // only images rendered from another position need the shift
    let shift = |im: &ElementalImage| {
        if im.eye == eye {
            0.0
        } else {
            disparity_pixels(rig.ipd, z_med, eye, im.camera.focal_px())
        }
    };
    let (s_mid, s_far) = (shift(mid), shift(far));
    let pixels = pixel_map(display.width, display.height, |x, y| {
        let dir = cam.direction_at(x as f64 + 0.5, y as f64 + 0.5);
        let Some(cf) = sample_layer(far, dir, s_far) else {
            return [0.0f32; 3];
        };
        let theta = dir.angle_to(gaze).to_degrees();
        let [wf, wm, wp] = blend_weights(layers, theta);
        let mut acc = [0.0f64; 3];
        let mut add = |w: f64, c: [f32; 3]| {
            for k in 0..3 {
                acc[k] += w * c[k] as f64;
            }
        };
        add(wp, cf);
        if wm > 0.0 {
            add(wm, sample_layer(mid, dir, s_mid).unwrap_or(cf));
        }
        if wf > 0.0 {
            add(wf, sample_layer(fovea, dir, 0.0).unwrap_or(cf));
        }
        acc.map(|v| v.clamp(0.0, 1.0) as f32)
    });
    Ok(RgbImage::from_pixels(display.width, display.height, &pixels))
}

/// Blends both eyes and applies contrast enhancement.
pub fn composite_frame(
    set: &ElementalImageSet,
    layers: &LayerSet,
    display: &DisplaySpec,
    contrast: &ContrastParams,
) -> Result<DisplayFrame> {
    let watch = Stopwatch::start();
    let foveas: Vec<&ElementalImage> = set.images.iter().filter(|im| im.tag == LayerTag::Fovea).collect();
    let z_med = foveal_depth_median(&foveas);
    let mut left = blend_eye(set, layers, display, Eye::Left, z_med)?;
    let mut right = blend_eye(set, layers, display, Eye::Right, z_med)?;
    let blend_ms = watch.elapsed_ms();
    let watch = Stopwatch::start();
    if contrast.gain != 0.0 {
        let fovea_edge = layers.fovea.half_extent_deg();
        for (img, eye) in [(&mut left, Eye::Left), (&mut right, Eye::Right)] {
            let ecc = eccentricity_map(display, &set.rig, eye)?;
            *img = enhance_contrast(img, &ecc, fovea_edge, display.ppd(), contrast);
        }
    }
    let contrast_ms = watch.elapsed_ms();
    let cam = display.camera(&set.rig, Eye::Left)?;
    let gaze_px = cam
        .project_direction(set.rig.gaze_world())
        .unwrap_or((0.5 * display.width as f64, 0.5 * display.height as f64));
    Ok(DisplayFrame {
        left,
        right,
        gaze_px,
        z_med,
        timing: CompositeTiming { blend_ms, contrast_ms },
    })
}

/// Box radius whose three-pass repetition matches a Gaussian of `sigma`.
fn box_radius(sigma: f64) -> usize {
    (((4.0 * sigma * sigma + 1.0).sqrt() - 1.0) / 2.0).round() as usize
}

fn box_blur_h(src: &[f32], dst: &mut [f32], w: usize, h: usize, r: usize) {
    let norm = 1.0 / (2 * r + 1) as f32;
    for y in 0..h {
        let row = &src[y * w * 3..(y + 1) * w * 3];
        let out = &mut dst[y * w * 3..(y + 1) * w * 3];
        let at = |x: isize, c: usize| row[x.clamp(0, w as isize - 1) as usize * 3 + c];
        for c in 0..3 {
            let mut sum: f32 = (-(r as isize)..=r as isize).map(|x| at(x, c)).sum();
            for x in 0..w as isize {
                out[x as usize * 3 + c] = sum * norm;
                sum += at(x + r as isize + 1, c) - at(x - r as isize, c);
            }
        }
    }
}

fn transpose(src: &[f32], w: usize, h: usize) -> Vec<f32> {
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let s = (y * w + x) * 3;
            let d = (x * h + y) * 3;
            out[d..d + 3].copy_from_slice(&src[s..s + 3]);
        }
    }
    out
}

/// Approximate Gaussian blur by three box passes per axis, clamped edges.
pub fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    let r = box_radius(sigma);
    if r == 0 {
        return img.clone();
    }
    let (w, h) = img.dims();
    let mut a = img.data.clone();
    let mut b = vec![0.0; a.len()];
    for _ in 0..3 {
        box_blur_h(&a, &mut b, w, h, r);
        std::mem::swap(&mut a, &mut b);
    }
    let mut a = transpose(&a, w, h);
    for _ in 0..3 {
        box_blur_h(&a, &mut b, h, w, r);
        std::mem::swap(&mut a, &mut b);
    }
    RgbImage {
        width: w,
        height: h,
        data: transpose(&a, h, w),
    }
}

/// `blur + (x − blur)(1 + k)`.
pub fn unsharp(x: f32, blur: f32, k: f32) -> f32 {
    blur + (x - blur) * (1.0 + k)
}

/// Eccentricity-dependent unsharp masking outside the fovea. `ecc_deg` holds
/// one eccentricity per pixel.
pub fn enhance_contrast(
    img: &RgbImage,
    ecc_deg: &[f64],
    fovea_edge_deg: f64,
    display_ppd: f64,
    params: &ContrastParams,
) -> RgbImage {
    if params.gain == 0.0 {
        return img.clone();
    }
    let sigma_px = |theta: f64| params.sigma_slope * theta * display_ppd;
    let max_theta = ecc_deg.iter().copied().fold(0.0, f64::max);
    let top = sigma_px(max_theta).max(0.5);
    let sigmas = [top / 8.0, top / 4.0, top / 2.0, top];
    let levels: Vec<RgbImage> = sigmas.iter().map(|&s| gaussian_blur(img, s)).collect();
    let mut out = img.clone();
    for (i, &theta) in ecc_deg.iter().enumerate() {
        let k = params.gain * smoothstep(fovea_edge_deg, params.ramp * fovea_edge_deg, theta);
        if k == 0.0 {
            continue;
        }
        let s = sigma_px(theta);
        let (j, t) = match sigmas.iter().position(|&v| v >= s) {
            Some(0) => (0, 0.0),
            Some(j) => (j - 1, (s - sigmas[j - 1]) / (sigmas[j] - sigmas[j - 1])),
            None => (sigmas.len() - 2, 1.0),
        };
        for c in 0..3 {
            let idx = 3 * i + c;
            let lo = levels[j].data[idx] as f64;
            let hi = levels[(j + 1).min(sigmas.len() - 1)].data[idx] as f64;
            let blur = (lo + (hi - lo) * t) as f32;
            out.data[idx] = unsharp(img.data[idx], blur, k as f32).clamp(0.0, 1.0);
        }
    }
    out
}

/// Red from the left eye, green and blue from the right.
pub fn anaglyph(left: &RgbImage, right: &RgbImage) -> Result<RgbImage> {
    if left.dims() != right.dims() {
        return Err(Error::DimensionMismatch(left.dims(), right.dims()));
    }
    let mut out = right.clone();
    for (o, l) in out.data.chunks_exact_mut(3).zip(left.data.chunks_exact(3)) {
        o[0] = l[0];
    }
    Ok(out)
}

//! Pinhole cameras, per-sphere ray sampling and opacity compositing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Mat3, Vec3};
use crate::neural_field::NeuralField;
use crate::nn::Real;
use crate::sphgeom::{ray_sphere_exit_t, Ray, SphericalPoint};

/// Pinhole camera. `rotation` maps camera space (x right, y down, z forward)
/// to world space. `fov_deg` spans the larger image dimension; pixels are square.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinholeCamera {
    pub position: Vec3,
    pub rotation: Mat3,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl PinholeCamera {
    pub fn new(position: Vec3, rotation: Mat3, fov_deg: f64, width: usize, height: usize) -> Result<Self> {
        if !(fov_deg > 0.0 && fov_deg < 180.0) {
            return Err(Error::Config(format!("field of view {fov_deg} not in (0, 180)")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Config("zero image resolution".into()));
        }
        Ok(Self {
            position,
            rotation,
            fov_deg,
            width,
            height,
        })
    }

    /// Focal length in pixels.
    pub fn focal_px(&self) -> f64 {
        0.5 * self.width.max(self.height) as f64 / (0.5 * self.fov_deg.to_radians()).tan()
    }

    pub fn forward(&self) -> Vec3 {
        self.rotation.cols[2]
    }

    /// Unit world direction through continuous pixel coordinates
    /// (`(0.5, 0.5)` is the centre of the top-left pixel).
    pub fn direction_at(&self, px: f64, py: f64) -> Vec3 {
        let f = self.focal_px();
        let local = Vec3::new(
            (px - 0.5 * self.width as f64) / f,
            (py - 0.5 * self.height as f64) / f,
            1.0,
        );
        (self.rotation * local).normalize()
    }

    /// Continuous pixel coordinates of a world direction, or `None` when it
    /// points behind the camera.
    pub fn project_direction(&self, dir: Vec3) -> Option<(f64, f64)> {
        let local = self.rotation.transpose() * dir;
        if local.z <= 0.0 {
            return None;
        }
        let f = self.focal_px();
        Some((
            f * local.x / local.z + 0.5 * self.width as f64,
            f * local.y / local.z + 0.5 * self.height as f64,
        ))
    }

    /// Continuous pixel coordinates of a world point.
    pub fn project_point(&self, p: Vec3) -> Option<(f64, f64)> {
        self.project_direction(p - self.position)
    }

    pub fn contains_pixel(&self, px: f64, py: f64) -> bool {
        px >= 0.0 && py >= 0.0 && px <= self.width as f64 && py <= self.height as f64
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }
}

/// One ray per pixel of an image, in row-major pixel order.
#[derive(Clone, Debug)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub pixels: Vec<(u32, u32)>,
    pub camera_id: u32,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

/// Rays through every pixel centre of `camera`.
pub fn build_rays(camera: &PinholeCamera) -> RayBatch {
    build_rays_with_id(camera, 0)
}

pub fn build_rays_with_id(camera: &PinholeCamera, camera_id: u32) -> RayBatch {
    let mut rays = Vec::with_capacity(camera.n_pixels());
    let mut pixels = Vec::with_capacity(camera.n_pixels());
    for row in 0..camera.height {
        for col in 0..camera.width {
            let dir = camera.direction_at(col as f64 + 0.5, row as f64 + 0.5);
            rays.push(Ray::from_unit(camera.position, dir));
            pixels.push((row as u32, col as u32));
        }
    }
    RayBatch {
        rays,
        pixels,
        camera_id,
    }
}

/// A field sample along a ray: ray parameter, colour and opacity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub color: [f64; 3],
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Composite {
    pub color: [f64; 3],
    /// Weighted mean ray parameter; infinite when nothing was hit.
    pub depth: f64,
    /// Accumulated opacity.
    pub alpha: f64,
}

/// Composites samples ordered near to far. Equivalent to applying
/// `c ← αᵢ·cᵢ + (1 − αᵢ)·c` from the farthest sample inwards, starting from
/// `background`.
pub fn composite_sorted(samples: &[Sample], background: [f64; 3]) -> Composite {
    let mut color = [0.0; 3];
    let mut transmittance = 1.0;
    let mut depth_sum = 0.0;
    let mut weight_sum = 0.0;
    for s in samples {
        let w = transmittance * s.alpha;
        for c in 0..3 {
            color[c] += w * s.color[c];
        }
        depth_sum += w * s.t;
        weight_sum += w;
        transmittance *= 1.0 - s.alpha;
    }
    for c in 0..3 {
        color[c] += transmittance * background[c];
    }
    let depth = if weight_sum > 0.0 {
        depth_sum / weight_sum
    } else {
        f64::INFINITY
    };
    Composite {
        color,
        depth,
        alpha: 1.0 - transmittance,
    }
}

/// Sorts by ray parameter, then composites.
pub fn composite(samples: &[Sample], background: [f64; 3]) -> Composite {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.t.total_cmp(&b.t));
    composite_sorted(&sorted, background)
}

/// Gradient of a composited colour with respect to each sample's colour
/// and opacity, given `d_color = ∂L/∂c`. Samples ordered near to far.
///
/// `∂c/∂cᵢ = Tᵢαᵢ` and `∂c/∂αᵢ = Tᵢ(cᵢ − Bᵢ)` where `Bᵢ` is the colour
/// composited from everything behind sample `i`.
pub fn composite_backward(
    samples: &[Sample],
    background: [f64; 3],
    d_color: [f64; 3],
    d_sample_color: &mut [[f64; 3]],
    d_alpha: &mut [f64],
) {
    let n = samples.len();
    // back-to-front accumulation of what lies behind each sample
    let mut behind = vec![[0.0; 3]; n];
    let mut acc = background;
    for i in (0..n).rev() {
        behind[i] = acc;
        let s = &samples[i];
        for c in 0..3 {
            acc[c] = s.alpha * s.color[c] + (1.0 - s.alpha) * acc[c];
        }
    }
    let mut transmittance = 1.0;
    for i in 0..n {
        let s = &samples[i];
        let w = transmittance * s.alpha;
        let mut da = 0.0;
        for c in 0..3 {
            d_sample_color[i][c] = w * d_color[c];
            da += transmittance * (s.color[c] - behind[i][c]) * d_color[c];
        }
        d_alpha[i] = da;
        transmittance *= 1.0 - s.alpha;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarchOptions {
    pub background: [f64; 3],
    /// Only spheres with radius inside these bounds contribute. Defaults to
    /// the grid's own `[r_near, r_far]`.
    pub bounds: Option<(f64, f64)>,
    /// Rays evaluated per network batch.
    pub chunk_rays: usize,
}

impl Default for MarchOptions {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            bounds: None,
            chunk_rays: 512,
        }
    }
}

/// Network inputs for every (ray, sphere) intersection of a set of rays.
pub(crate) struct SampleBatch<T> {
    pub features: Vec<T>,
    pub t: Vec<f64>,
    /// Rows `offsets[i]..offsets[i + 1]` belong to ray `i`, near to far.
    pub offsets: Vec<usize>,
}

impl<T: Real> SampleBatch<T> {
    pub fn rows(&self) -> usize {
        self.t.len()
    }

    pub fn build(field: &NeuralField<T>, rays: &[Ray], bounds: (f64, f64)) -> Self {
        let width = field.encoding().width();
        let radii = field.grid().radii();
        let lo = radii.partition_point(|&r| r < bounds.0);
        let hi = radii.partition_point(|&r| r <= bounds.1);
        let active = &radii[lo..hi.max(lo)];
        let mut features = Vec::with_capacity(rays.len() * active.len() * width);
        let mut t = Vec::with_capacity(rays.len() * active.len());
        let mut offsets = Vec::with_capacity(rays.len() + 1);
        offsets.push(0);
        let enc_bounds = (field.grid().r_near(), field.grid().r_far());
        let mut buf = vec![0.0f64; width];
        for ray in rays {
            // exit parameter grows with radius, so ascending radii are near to far
            for &r in active {
                if let Some(tt) = ray_sphere_exit_t(r, ray) {
                    let p = ray.at(tt);
                    let sp = match SphericalPoint::from_cartesian(p) {
                        Ok(mut sp) => {
                            sp.radius = r;
                            sp
                        }
                        Err(_) => continue,
                    };
                    field.encoding().encode_into(enc_bounds, &sp, &mut buf);
                    features.extend(buf.iter().map(|&v| T::from_f64(v)));
                    t.push(tt);
                }
            }
            offsets.push(t.len());
        }
        Self { features, t, offsets }
    }
}

/// Per-ray result of [`march`].
#[derive(Clone, Debug, Default)]
pub struct MarchOutput {
    pub color: Vec<[f32; 3]>,
    pub depth: Vec<f32>,
    pub alpha: Vec<f32>,
    /// Network evaluations performed (one per ray-sphere intersection).
    pub evaluations: u64,
}

/// Colours every ray of `batch` by compositing the field's predictions on
/// each intersected sphere.
pub fn march<T: Real>(field: &NeuralField<T>, batch: &RayBatch, opts: &MarchOptions) -> MarchOutput {
    march_rays(field, &batch.rays, opts)
}

pub fn march_rays<T: Real>(field: &NeuralField<T>, rays: &[Ray], opts: &MarchOptions) -> MarchOutput {
    let chunk = opts.chunk_rays.max(1);
    let run = |rays: &[Ray]| march_chunk(field, rays, opts);
    #[cfg(feature = "parallel")]
    let parts: Vec<MarchOutput> = {
        use rayon::prelude::*;
        rays.par_chunks(chunk).map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<MarchOutput> = rays.chunks(chunk).map(run).collect();

    let mut out = MarchOutput {
        color: Vec::with_capacity(rays.len()),
        depth: Vec::with_capacity(rays.len()),
        alpha: Vec::with_capacity(rays.len()),
        evaluations: 0,
    };
    for p in parts {
        out.color.extend(p.color);
        out.depth.extend(p.depth);
        out.alpha.extend(p.alpha);
        out.evaluations += p.evaluations;
    }
    out
}

fn march_chunk<T: Real>(field: &NeuralField<T>, rays: &[Ray], opts: &MarchOptions) -> MarchOutput {
    let bounds = opts.bounds.unwrap_or((field.grid().r_near(), field.grid().r_far()));
    let batch = SampleBatch::build(field, rays, bounds);
    let rows = batch.rows();
    let mut pred = Vec::new();
    if rows > 0 {
        let mut scratch = Vec::new();
        field.net().forward_into(&batch.features, rows, &mut pred, &mut scratch);
    }
    let mut out = MarchOutput {
        color: Vec::with_capacity(rays.len()),
        depth: Vec::with_capacity(rays.len()),
        alpha: Vec::with_capacity(rays.len()),
        evaluations: rows as u64,
    };
    let mut samples = Vec::new();
    for i in 0..rays.len() {
        samples.clear();
        for row in batch.offsets[i]..batch.offsets[i + 1] {
            let p = &pred[row * 4..row * 4 + 4];
            samples.push(Sample {
                t: batch.t[row],
                color: [p[0].to_f64(), p[1].to_f64(), p[2].to_f64()],
                alpha: p[3].to_f64(),
            });
        }
        let c = composite_sorted(&samples, opts.background);
        out.color
            .push([c.color[0] as f32, c.color[1] as f32, c.color[2] as f32]);
        out.depth.push(c.depth as f32);
        out.alpha.push(c.alpha as f32);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(t: f64, color: [f64; 3], alpha: f64) -> Sample {
        Sample { t, color, alpha }
    }

    #[test]
    fn opaque_nearest_sample_wins() {
        let c = composite(
            &[s(2.0, [0.0, 1.0, 0.0], 0.7), s(1.0, [1.0, 0.0, 0.0], 1.0)],
            [0.0, 0.0, 1.0],
        );
        assert_eq!(c.color, [1.0, 0.0, 0.0]);
        assert_eq!(c.depth, 1.0);
    }

    #[test]
    fn transparent_samples_show_background() {
        let bg = [0.2, 0.3, 0.4];
        let c = composite(&[s(1.0, [1.0; 3], 0.0), s(2.0, [0.5; 3], 0.0)], bg);
        assert_eq!(c.color, bg);
        assert!(c.depth.is_infinite());
        assert_eq!(c.alpha, 0.0);
    }

    #[test]
    fn two_half_opaque_spheres() {
        let c1 = [0.9, 0.1, 0.3];
        let c2 = [0.2, 0.8, 0.6];
        let bg = [0.5, 0.4, 0.1];
        let c = composite(&[s(1.0, c1, 0.5), s(2.0, c2, 0.5)], bg);
        for k in 0..3 {
            let want = 0.5 * c1[k] + 0.25 * c2[k] + 0.25 * bg[k];
            assert!((c.color[k] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let samples = vec![
            s(1.0, [0.3, 0.6, 0.1], 0.4),
            s(1.5, [0.9, 0.2, 0.5], 0.7),
            s(2.5, [0.1, 0.4, 0.8], 0.25),
        ];
        let bg = [0.05, 0.1, 0.2];
        let dc = [0.7, -0.3, 1.1];
        let objective = |ss: &[Sample]| {
            let c = composite_sorted(ss, bg).color;
            c[0] * dc[0] + c[1] * dc[1] + c[2] * dc[2]
        };
        let mut d_col = vec![[0.0; 3]; 3];
        let mut d_a = vec![0.0; 3];
        composite_backward(&samples, bg, dc, &mut d_col, &mut d_a);
        let eps = 1e-7;
        for i in 0..3 {
            let mut p = samples.clone();
            let mut m = samples.clone();
            p[i].alpha += eps;
            m[i].alpha -= eps;
            let fd = (objective(&p) - objective(&m)) / (2.0 * eps);
            assert!((fd - d_a[i]).abs() < 1e-8, "alpha {i}");
            for c in 0..3 {
                let mut p = samples.clone();
                let mut m = samples.clone();
                p[i].color[c] += eps;
                m[i].color[c] -= eps;
                let fd = (objective(&p) - objective(&m)) / (2.0 * eps);
                assert!((fd - d_col[i][c]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn single_pixel_ray_is_forward_axis() {
        let rot = Mat3::from_yaw_pitch(0.3, -0.2) * crate::math::CAMERA_TO_HEAD;
        let cam = PinholeCamera::new(Vec3::new(0.1, 0.0, 0.0), rot, 60.0, 1, 1).unwrap();
        let batch = build_rays(&cam);
        assert_eq!(batch.len(), 1);
        assert!((batch.rays[0].direction - cam.forward()).norm() < 1e-15);
    }

    #[test]
    fn corner_rays_of_2x2_at_90_degrees() {
        let cam = PinholeCamera::new(Vec3::ZERO, Mat3::IDENTITY, 90.0, 2, 2).unwrap();
        let batch = build_rays(&cam);
        let expected = 0.5f64.atan().to_degrees();
        assert!((expected - 26.565).abs() < 1e-3);
        for ray in &batch.rays {
            let d = ray.direction;
            let ax = (d.x / d.z).atan().to_degrees();
            let ay = (d.y / d.z).atan().to_degrees();
            assert!((ax.abs() - expected).abs() < 1e-12);
            assert!((ay.abs() - expected).abs() < 1e-12);
        }
        // top-left first
        assert!(batch.rays[0].direction.x < 0.0 && batch.rays[0].direction.y < 0.0);
    }

    #[test]
    fn rotation_equivariance() {
        let base = PinholeCamera::new(Vec3::ZERO, Mat3::IDENTITY, 70.0, 5, 4).unwrap();
        let r = Mat3::from_axis_angle(Vec3::new(0.2, 1.0, -0.4), 0.9);
        let rotated = PinholeCamera {
            rotation: r * base.rotation,
            ..base
        };
        for (a, b) in build_rays(&base).rays.iter().zip(build_rays(&rotated).rays.iter()) {
            assert!((r * a.direction - b.direction).norm() < 1e-12);
        }
    }

    #[test]
    fn projection_inverts_direction() {
        let rot = Mat3::from_yaw_pitch(-0.4, 0.1) * crate::math::CAMERA_TO_HEAD;
        let cam = PinholeCamera::new(Vec3::ZERO, rot, 45.0, 64, 48).unwrap();
        let d = cam.direction_at(10.25, 40.5);
        let (px, py) = cam.project_direction(d).unwrap();
        assert!((px - 10.25).abs() < 1e-9 && (py - 40.5).abs() < 1e-9);
        assert!(cam.project_direction(-cam.forward()).is_none());
    }

    #[test]
    fn bad_fov_rejected() {
        assert!(PinholeCamera::new(Vec3::ZERO, Mat3::IDENTITY, 180.0, 4, 4).is_err());
        assert!(PinholeCamera::new(Vec3::ZERO, Mat3::IDENTITY, 0.0, 4, 4).is_err());
        assert!(PinholeCamera::new(Vec3::ZERO, Mat3::IDENTITY, 30.0, 0, 4).is_err());
    }
}

//! Representation and network size selection under a latency budget.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::ProceduralScene;
use crate::error::{Error, Result};
use crate::math::{Mat3, Vec3, CAMERA_TO_HEAD};
use crate::neural_field::{EncodingConfig, LayerTag, MlpConfig, NeuralField};
use crate::raymarch::{march_rays, MarchOptions, PinholeCamera};
use crate::sphgeom::{ConcentricGrid, Ray, SphericalPoint};
use crate::timing::Stopwatch;

/// Sphere count and network shape of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NetConfig {
    pub n_spheres: usize,
    pub n_layers: usize,
    pub n_channels: usize,
}

impl NetConfig {
    pub const REFERENCE: NetConfig = NetConfig {
        n_spheres: 64,
        n_layers: 8,
        n_channels: 256,
    };

    pub fn new(n_spheres: usize, n_layers: usize, n_channels: usize) -> Self {
        Self {
            n_spheres,
            n_layers,
            n_channels,
        }
    }

    pub fn mlp(&self) -> MlpConfig {
        MlpConfig {
            n_layers: self.n_layers,
            n_channels: self.n_channels,
        }
    }

    /// Multiply-adds for one network evaluation.
    pub fn cost(&self, enc_width: usize) -> f64 {
        let c = self.n_channels as f64;
        enc_width as f64 * c + (self.n_layers as f64 - 1.0) * c * c + 4.0 * c
    }

    /// Total multiply-adds to march `rays` rays through every sphere.
    pub fn work(&self, rays: usize, enc_width: usize) -> f64 {
        rays as f64 * self.n_spheres as f64 * self.cost(enc_width)
    }
}

/// Monte-Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(v: &[f64]) -> Estimate {
        let n = v.len();
        if n == 0 {
            return Estimate::default();
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Estimate {
            mean,
            stderr: (var / n as f64).sqrt(),
            n,
        }
    }
}

/// Mean distance between the radial grid projection of a point and the
/// sphere point seen along a view ray, over unoccluded pairs.
pub fn e_scene(
    grid: &ConcentricGrid,
    mut scene_point: impl FnMut(&mut ChaCha8Rng) -> Vec3,
    mut view_point: impl FnMut(&mut ChaCha8Rng) -> Vec3,
    occluded: impl Fn(Vec3, Vec3) -> bool,
    n_samples: usize,
    seed: u64,
) -> Result<Estimate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errs = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let q = scene_point(&mut rng);
        let x = view_point(&mut rng);
        if occluded(x, q) || (q - x).norm() == 0.0 {
            continue;
        }
        let q1 = grid.project_to_grid(q)?;
        if let Some(qh) = grid.closest_grid_intersection(x, q)? {
            errs.push((q1 - qh).norm());
        }
    }
    if errs.is_empty() {
        return Err(Error::NoVisiblePairs);
    }
    Ok(Estimate::from_samples(&errs))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageError {
    pub per_camera: Vec<Estimate>,
    pub pooled: Estimate,
    /// Points behind or outside a camera, or whose ray misses the sphere.
    pub skipped: usize,
}

/// Pixel distance, per camera, between where a camera sees a point's sphere
/// sample and where the grid stores that point.
pub fn e_image(grid: &ConcentricGrid, cameras: &[PinholeCamera], points: &[Vec3]) -> Result<ImageError> {
    let mut out = ImageError::default();
    let mut pooled = Vec::new();
    for cam in cameras {
        let mut errs = Vec::new();
        for &q in points {
            if !cam.project_point(q).is_some_and(|(u, v)| cam.contains_pixel(u, v)) {
                out.skipped += 1;
                continue;
            }
            let stored = grid.project_to_grid(q)?;
            let seen = match grid.closest_grid_intersection(cam.position, q)? {
                Some(p) => p,
                None => {
                    out.skipped += 1;
                    continue;
                }
            };
            let (Some(a), Some(b)) = (cam.project_point(stored), cam.project_point(seen)) else {
                out.skipped += 1;
                continue;
            };
            errs.push((a.0 - b.0).hypot(a.1 - b.1));
        }
        pooled.extend_from_slice(&errs);
        out.per_camera.push(Estimate::from_samples(&errs));
    }
    out.pooled = Estimate::from_samples(&pooled);
    Ok(out)
}

/// Visible surface points of `scene` seen from random positions in its translation box.
pub fn surface_points(scene: &ProceduralScene, n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tb = scene.translation_box;
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n && attempts < 20 * n.max(1) {
        attempts += 1;
        let x = tb.center + random_in_cube(&mut rng) * (0.5 * tb.size);
        let d = random_unit(&mut rng);
        if let Some(hit) = scene.intersect(&Ray::from_unit(x, d)) {
            out.push(hit.point);
        }
    }
    out
}

/// Surface points seen through random pixels of `cam`.
pub fn view_points(scene: &ProceduralScene, cam: &PinholeCamera, n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .filter_map(|_| {
            let (px, py) = (
                rng.gen_range(0.0..cam.width as f64),
                rng.gen_range(0.0..cam.height as f64),
            );
            scene
                .intersect(&Ray::from_unit(cam.position, cam.direction_at(px, py)))
                .map(|h| h.point)
        })
        .collect()
}

/// Points seen by the probe camera at the middle of the trajectory.
pub fn trajectory_points(
    scene: &ProceduralScene,
    trajectory: &TrajectorySpec,
    cam: &ProbeCamera,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec3>> {
    let mid = camera_at(cam, trajectory.pose(trajectory.duration_ms / 2))?;
    Ok(view_points(scene, &mid, n, seed))
}

/// Cameras at random positions in the translation box with random yaw and pitch.
pub fn random_cameras(
    scene: &ProceduralScene,
    n: usize,
    fov_deg: f64,
    width: usize,
    height: usize,
    seed: u64,
) -> Result<Vec<PinholeCamera>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tb = scene.translation_box;
    (0..n)
        .map(|_| {
            let x = tb.center + random_in_cube(&mut rng) * (0.5 * tb.size);
            let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let pitch = rng.gen_range(-0.6..0.6);
            PinholeCamera::new(
                x,
                Mat3::from_yaw_pitch(yaw, pitch) * CAMERA_TO_HEAD,
                fov_deg,
                width,
                height,
            )
        })
        .collect()
}

fn random_in_cube(rng: &mut impl Rng) -> Vec3 {
    Vec3::new(
        rng.gen_range(-1.0..=1.0),
        rng.gen_range(-1.0..=1.0),
        rng.gen_range(-1.0..=1.0),
    )
}

fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        if let Some(v) = random_in_cube(rng).try_normalize().filter(|v| v.norm() > 0.0) {
            return v;
        }
    }
}

/// Measured frame latency of one configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub config: NetConfig,
    pub rays: usize,
    pub ms: f64,
}

/// `l = a · rays · N · cost(N_m, N_c) + b` in milliseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub a: f64,
    pub b: f64,
    pub enc_width: usize,
    pub r_squared: f64,
    pub samples: Vec<LatencySample>,
}

impl LatencyModel {
    pub fn predict(&self, config: &NetConfig, rays: usize) -> f64 {
        (self.a * config.work(rays, self.enc_width) + self.b).max(self.b.max(0.0))
    }
}

pub const MIN_CALIBRATION_CONFIGS: usize = 4;

/// Least-squares fit of the latency model to measured samples.
pub fn calibrate_latency(samples: &[LatencySample], enc_width: usize) -> Result<LatencyModel> {
    let mut distinct: Vec<NetConfig> = samples.iter().map(|s| s.config).collect();
    distinct.sort();
    distinct.dedup();
    if distinct.len() < MIN_CALIBRATION_CONFIGS {
        return Err(Error::InsufficientCalibration {
            found: distinct.len(),
            needed: MIN_CALIBRATION_CONFIGS,
        });
    }
    let xs: Vec<f64> = samples.iter().map(|s| s.config.work(s.rays, enc_width)).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.ms).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let mut a = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    if a <= f64::EPSILON * my.abs().max(1.0) / mx.abs().max(1.0) {
        log::warn!("latency fit slope is {a:e}; timings do not depend on network work");
        a = a.max(0.0);
    }
    let b = my - a * mx;
    let r_squared = if syy > 0.0 {
        (sxy * sxy) / (sxx * syy).max(f64::MIN_POSITIVE)
    } else {
        1.0
    };
    Ok(LatencyModel {
        a,
        b,
        enc_width,
        r_squared,
        samples: samples.to_vec(),
    })
}

/// Times marching `rays` rays through a randomly initialised field of `config`.
pub fn measure_latency(
    config: &NetConfig,
    encoding: EncodingConfig,
    rays: usize,
    reps: usize,
    seed: u64,
) -> Result<f64> {
    let grid = ConcentricGrid::uniform(config.n_spheres, 0.5, 8.0)?;
    let field = NeuralField::<f32>::new(LayerTag::Fovea, grid, encoding, config.mlp(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch: Vec<Ray> = (0..rays)
        .map(|_| Ray::from_unit(Vec3::ZERO, random_unit(&mut rng)))
        .collect();
    let opts = MarchOptions::default();
    march_rays(&field, &batch[..batch.len().min(64)], &opts);
    let mut times: Vec<f64> = (0..reps.max(1))
        .map(|_| {
            let w = Stopwatch::start();
            march_rays(&field, &batch, &opts);
            w.elapsed_ms()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Stratified probe points on a grid: strata over sphere index, cos θ and φ.
pub fn stratified_probes(grid: &ConcentricGrid, n: usize, seed: u64) -> Vec<SphericalPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = ((n as f64).sqrt().ceil() as usize).max(1);
    let radii = grid.radii();
    (0..n)
        .map(|i| {
            let (a, b) = (i % side, (i / side) % side);
            let z = -1.0 + 2.0 * (a as f64 + rng.gen::<f64>()) / side as f64;
            let phi = -std::f64::consts::PI + 2.0 * std::f64::consts::PI * (b as f64 + rng.gen::<f64>()) / side as f64;
            SphericalPoint {
                radius: radii[i % radii.len()],
                theta: z.clamp(-1.0, 1.0).acos(),
                phi: phi.min(std::f64::consts::PI - 1e-12),
            }
        })
        .collect()
}

fn snap(field: &NeuralField, p: &SphericalPoint) -> SphericalPoint {
    let radii = field.grid().radii();
    let k = radii
        .iter()
        .enumerate()
        .min_by(|x, y| (x.1 - p.radius).abs().total_cmp(&(y.1 - p.radius).abs()))
        .map_or(0, |(k, _)| k);
    SphericalPoint { radius: radii[k], ..*p }
}

/// Mean L1 over `(r, g, b, d)` between two fields at probe points, each
/// probe snapped to the nearest sphere of each field.
pub fn color_discrepancy(candidate: &NeuralField, reference: &NeuralField, probes: &[SphericalPoint]) -> Result<f64> {
    if !candidate.is_trained() || !reference.is_trained() {
        return Err(Error::Untrained);
    }
    if probes.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let pa: Vec<SphericalPoint> = probes.iter().map(|p| snap(candidate, p)).collect();
    let pb: Vec<SphericalPoint> = probes.iter().map(|p| snap(reference, p)).collect();
    let a = candidate.forward(&pa)?;
    let b = reference.forward(&pb)?;
    let sum: f64 = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (0..3).map(|k| (x.color[k] - y.color[k]).abs()).sum::<f64>() + (x.density - y.density).abs())
        .sum();
    Ok(sum / (4 * probes.len()) as f64)
}

/// Head motion sampled every millisecond.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectorySpec {
    pub duration_ms: usize,
    /// Peak yaw speed.
    pub yaw_speed_deg_s: f64,
    pub yaw_amplitude_deg: f64,
    /// Lateral translation speed.
    pub translation_m_s: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            duration_ms: 1000,
            yaw_speed_deg_s: 30.0,
            yaw_amplitude_deg: 20.0,
            translation_m_s: 0.1,
        }
    }
}

impl TrajectorySpec {
    pub fn is_static(&self) -> bool {
        self.yaw_speed_deg_s == 0.0 && self.translation_m_s == 0.0
    }

    /// Head pose at `t_ms`.
    pub fn pose(&self, t_ms: usize) -> (Vec3, Mat3) {
        let t = t_ms as f64 / 1000.0;
        let yaw = if self.yaw_amplitude_deg > 0.0 {
            let omega = self.yaw_speed_deg_s / self.yaw_amplitude_deg;
            self.yaw_amplitude_deg * (omega * t).sin()
        } else {
            0.0
        };
        let half = 0.5 * self.duration_ms as f64 / 1000.0;
        let pos = Vec3::new(0.0, self.translation_m_s * (t - half), 0.0);
        (pos, Mat3::from_yaw_pitch(yaw.to_radians(), 0.0))
    }
}

/// Camera intrinsics used to score reprojection in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeCamera {
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

fn camera_at(cam: &ProbeCamera, pose: (Vec3, Mat3)) -> Result<PinholeCamera> {
    PinholeCamera::new(pose.0, pose.1 * CAMERA_TO_HEAD, cam.fov_deg, cam.width, cam.height)
}

/// Sum over trajectory steps of the mean pixel distance between where a
/// point projects now and where it projected `latency_ms` earlier.
pub fn reprojection_sum(
    trajectory: &TrajectorySpec,
    cam: &ProbeCamera,
    points: &[Vec3],
    latency_ms: f64,
) -> Result<f64> {
    let l = latency_ms.max(0.0).floor() as usize;
    if l >= trajectory.duration_ms {
        return Err(Error::LatencyExceedsTrajectory {
            latency_ms: l,
            duration_ms: trajectory.duration_ms,
        });
    }
    if l == 0 || trajectory.is_static() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for t in l..trajectory.duration_ms {
        let now = camera_at(cam, trajectory.pose(t))?;
        let then = camera_at(cam, trajectory.pose(t - l))?;
        let mut sum = 0.0;
        let mut n = 0usize;
        for &q in points {
            let Some(a) = now.project_point(q).filter(|&(u, v)| now.contains_pixel(u, v)) else {
                continue;
            };
            let Some(b) = then.project_point(q) else {
                continue;
            };
            sum += (a.0 - b.0).hypot(a.1 - b.1);
            n += 1;
        }
        if n > 0 {
            total += sum / n as f64;
        }
    }
    Ok(total)
}

/// Spatial-temporal objective for one configuration.
pub fn objective_e(discrepancy: f64, reprojection: f64) -> f64 {
    discrepancy * reprojection
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub n_spheres: Vec<usize>,
    pub n_layers: Vec<usize>,
    pub n_channels: Vec<usize>,
    pub reference: NetConfig,
    pub budget_ms: f64,
    /// Rays marched per frame for this layer.
    pub rays: usize,
}

impl SearchSpace {
    pub fn configs(&self) -> Vec<NetConfig> {
        let mut out = Vec::new();
        for &n in &self.n_spheres {
            for &m in &self.n_layers {
                for &c in &self.n_channels {
                    out.push(NetConfig::new(n, m, c));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.configs().is_empty() {
            return Err(Error::Config("empty search space".into()));
        }
        let r = &self.reference;
        for c in self.configs() {
            if c.n_spheres > r.n_spheres || c.n_layers > r.n_layers || c.n_channels > r.n_channels {
                return Err(Error::Config(format!("candidate {c:?} exceeds the reference {r:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchRow {
    pub config: NetConfig,
    pub latency_ms: f64,
    pub discrepancy: f64,
    pub e: f64,
    pub feasible: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum SearchOutcome {
    Optimal { row: SearchRow },
    Infeasible { fastest: SearchRow },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub outcome: SearchOutcome,
    /// Every evaluated configuration, ordered by config key.
    pub table: Vec<SearchRow>,
}

impl SearchResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("n_spheres,n_layers,n_channels,latency_ms,discrepancy,e,feasible\n");
        for r in &self.table {
            s += &format!(
                "{},{},{},{:.6},{:.6e},{:.6e},{}\n",
                r.config.n_spheres,
                r.config.n_layers,
                r.config.n_channels,
                r.latency_ms,
                r.discrepancy,
                r.e,
                r.feasible
            );
        }
        s
    }

    pub fn chosen(&self) -> Option<NetConfig> {
        match &self.outcome {
            SearchOutcome::Optimal { row } => Some(row.config),
            SearchOutcome::Infeasible { .. } => None,
        }
    }
}

/// Lowest-objective row satisfying the budget, ties broken by config key.
pub fn select(rows: &[SearchRow]) -> SearchOutcome {
    let best = rows
        .iter()
        .filter(|r| r.feasible)
        .min_by(|a, b| a.e.total_cmp(&b.e).then(a.config.cmp(&b.config)));
    match best {
        Some(row) => SearchOutcome::Optimal { row: *row },
        None => SearchOutcome::Infeasible {
            fastest: *rows
                .iter()
                .min_by(|a, b| a.latency_ms.total_cmp(&b.latency_ms).then(a.config.cmp(&b.config)))
                .expect("search space is non-empty"),
        },
    }
}

/// Exhaustive evaluation of the search space. `discrepancy` maps
/// `(N_m, N_c)` to its colour discrepancy; `reprojection` maps a latency to
/// the trajectory reprojection sum.
pub fn search(
    space: &SearchSpace,
    latency: &LatencyModel,
    discrepancy: &BTreeMap<(usize, usize), f64>,
    mut reprojection: impl FnMut(f64) -> Result<f64>,
) -> Result<SearchResult> {
    space.validate()?;
    let mut cache: BTreeMap<usize, f64> = BTreeMap::new();
    let mut table = Vec::new();
    let mut configs = space.configs();
    configs.sort();
    configs.dedup();
    for config in configs {
        let c = *discrepancy.get(&(config.n_layers, config.n_channels)).ok_or_else(|| {
            Error::Config(format!(
                "no discrepancy entry for N_m={} N_c={}",
                config.n_layers, config.n_channels
            ))
        })?;
        let l = latency.predict(&config, space.rays);
        let key = l.max(0.0).floor() as usize;
        let reproj = match cache.get(&key) {
            Some(v) => *v,
            None => {
                let v = reprojection(l)?;
                cache.insert(key, v);
                v
            }
        };
        table.push(SearchRow {
            config,
            latency_ms: l,
            discrepancy: c,
            e: objective_e(c, reproj),
            feasible: l < space.budget_ms,
        });
    }
    Ok(SearchResult {
        outcome: select(&table),
        table,
    })
}

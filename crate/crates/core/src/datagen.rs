//! Analytic reference scenes, view sampling and on-disk datasets.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, ManifestError, Result};
use crate::image::{DepthMap, RgbImage};
use crate::math::{Mat3, Vec3, CAMERA_TO_HEAD};
use crate::neural_field::{LayerTag, RayDataset};
use crate::raymarch::{build_rays, PinholeCamera};
use crate::sphgeom::Ray;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Material {
    Solid {
        color: [f64; 3],
    },
    /// 3D checkerboard of cubic cells with edge `period`.
    Checker {
        a: [f64; 3],
        b: [f64; 3],
        period: f64,
    },
}

impl Material {
    fn albedo(&self, p: Vec3) -> [f64; 3] {
        match *self {
            Material::Solid { color } => color,
            Material::Checker { a, b, period } => {
                let cell = (p.x / period).floor() + (p.y / period).floor() + (p.z / period).floor();
                if (cell as i64).rem_euclid(2) == 0 {
                    a
                } else {
                    b
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Primitive {
    Sphere {
        center: Vec3,
        radius: f64,
        material: Material,
    },
    Aabb {
        min: Vec3,
        max: Vec3,
        material: Material,
    },
    Plane {
        point: Vec3,
        normal: Vec3,
        material: Material,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    /// Faces the incoming ray.
    pub normal: Vec3,
    pub primitive: usize,
}

const EPS: f64 = 1e-9;

impl Primitive {
    fn material(&self) -> &Material {
        match self {
            Primitive::Sphere { material, .. }
            | Primitive::Aabb { material, .. }
            | Primitive::Plane { material, .. } => material,
        }
    }

    /// Nearest positive hit parameter and outward normal.
    fn intersect(&self, ray: &Ray) -> Option<(f64, Vec3)> {
        let (o, d) = (ray.origin, ray.direction);
        match *self {
            Primitive::Sphere { center, radius, .. } => {
                let oc = o - center;
                let b = oc.dot(d);
                let disc = b * b - oc.norm_squared() + radius * radius;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t = if -b - s > EPS { -b - s } else { -b + s };
                (t > EPS).then(|| (t, (o + d * t - center) / radius))
            }
            Primitive::Aabb { min, max, .. } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                let mut n0 = Vec3::ZERO;
                let mut n1 = Vec3::ZERO;
                for axis in 0..3 {
                    let (oa, da) = (o[axis], d[axis]);
                    let mut unit = Vec3::ZERO;
                    match axis {
                        0 => unit.x = 1.0,
                        1 => unit.y = 1.0,
                        _ => unit.z = 1.0,
                    }
                    if da.abs() < 1e-300 {
                        if oa < min[axis] || oa > max[axis] {
                            return None;
                        }
                        continue;
                    }
                    let mut ta = (min[axis] - oa) / da;
                    let mut tb = (max[axis] - oa) / da;
                    let (mut na, mut nb) = (-unit, unit);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                        std::mem::swap(&mut na, &mut nb);
                    }
                    if ta > t0 {
                        t0 = ta;
                        n0 = na;
                    }
                    if tb < t1 {
                        t1 = tb;
                        n1 = nb;
                    }
                }
                if t0 > t1 {
                    None
                } else if t0 > EPS {
                    Some((t0, n0))
                } else if t1 > EPS {
                    Some((t1, n1))
                } else {
                    None
                }
            }
            Primitive::Plane { point, normal, .. } => {
                let denom = normal.dot(d);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = (point - o).dot(normal) / denom;
                (t > EPS).then_some((t, normal))
            }
        }
    }

    fn contained_in(&self, lo: Vec3, hi: Vec3) -> bool {
        let inside = |p: Vec3| p.x >= lo.x && p.y >= lo.y && p.z >= lo.z && p.x <= hi.x && p.y <= hi.y && p.z <= hi.z;
        match *self {
            Primitive::Sphere { center, radius, .. } => {
                inside(center - Vec3::splat(radius)) && inside(center + Vec3::splat(radius))
            }
            Primitive::Aabb { min, max, .. } => inside(min) && inside(max),
            Primitive::Plane { point, .. } => inside(point),
        }
    }
}

/// Axis-aligned box of camera positions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationBox {
    pub center: Vec3,
    pub size: f64,
}

impl Default for TranslationBox {
    fn default() -> Self {
        Self {
            center: Vec3::ZERO,
            size: 0.3,
        }
    }
}

impl TranslationBox {
    pub fn half_diagonal(&self) -> f64 {
        0.5 * self.size * 3f64.sqrt()
    }

    pub fn contains(&self, p: Vec3) -> bool {
        let h = 0.5 * self.size + 1e-12;
        let d = p - self.center;
        d.x.abs() <= h && d.y.abs() <= h && d.z.abs() <= h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProceduralScene {
    pub name: String,
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
    /// Direction towards the light.
    pub light_dir: Vec3,
    pub ambient: f64,
    pub bounds_min: Vec3,
    pub bounds_max: Vec3,
    pub translation_box: TranslationBox,
}

impl ProceduralScene {
    pub fn empty() -> Self {
        Self {
            name: "empty".into(),
            primitives: Vec::new(),
            background: [0.0; 3],
            light_dir: Vec3::new(0.3, 0.4, 1.0).normalize(),
            ambient: 0.35,
            bounds_min: Vec3::splat(-1.0),
            bounds_max: Vec3::splat(1.0),
            translation_box: TranslationBox::default(),
        }
    }

    fn room(name: &str, half: Vec3, floor: Material, walls: [[f64; 3]; 5], mut objects: Vec<Primitive>) -> Self {
        let mut prims = vec![Primitive::Plane {
            point: Vec3::new(0.0, 0.0, -half.z),
            normal: Vec3::Z,
            material: floor,
        }];
        let faces = [
            (Vec3::new(0.0, 0.0, half.z), -Vec3::Z),
            (Vec3::new(half.x, 0.0, 0.0), -Vec3::X),
            (Vec3::new(-half.x, 0.0, 0.0), Vec3::X),
            (Vec3::new(0.0, half.y, 0.0), -Vec3::Y),
            (Vec3::new(0.0, -half.y, 0.0), Vec3::Y),
        ];
        for ((point, normal), color) in faces.into_iter().zip(walls) {
            prims.push(Primitive::Plane {
                point,
                normal,
                material: Material::Solid { color },
            });
        }
        prims.append(&mut objects);
        Self {
            name: name.into(),
            primitives: prims,
            background: [0.0; 3],
            light_dir: Vec3::new(0.3, 0.4, 1.0).normalize(),
            ambient: 0.35,
            bounds_min: -half - Vec3::splat(1e-6),
            bounds_max: half + Vec3::splat(1e-6),
            translation_box: TranslationBox::default(),
        }
    }

    /// Furnished room with checker textures.
    pub fn checker_room() -> Self {
        let solid = |c: [f64; 3]| Material::Solid { color: c };
        Self::room(
            "checker_room",
            Vec3::new(4.0, 4.0, 2.0),
            Material::Checker {
                a: [0.85, 0.85, 0.8],
                b: [0.25, 0.25, 0.3],
                period: 0.5,
            },
            [
                [0.9, 0.9, 0.9],
                [0.8, 0.45, 0.3],
                [0.3, 0.5, 0.8],
                [0.45, 0.75, 0.4],
                [0.85, 0.8, 0.35],
            ],
            vec![
                Primitive::Sphere {
                    center: Vec3::new(2.0, 0.6, -0.6),
                    radius: 0.6,
                    material: solid([0.9, 0.2, 0.2]),
                },
                Primitive::Sphere {
                    center: Vec3::new(-1.5, -2.0, 0.2),
                    radius: 0.8,
                    material: Material::Checker {
                        a: [0.2, 0.3, 0.9],
                        b: [0.9, 0.9, 0.2],
                        period: 0.3,
                    },
                },
                Primitive::Aabb {
                    min: Vec3::new(1.2, -2.2, -2.0),
                    max: Vec3::new(2.4, -1.0, -0.8),
                    material: solid([0.3, 0.8, 0.6]),
                },
                Primitive::Aabb {
                    min: Vec3::new(-2.8, 1.2, -2.0),
                    max: Vec3::new(-1.6, 2.6, 0.6),
                    material: solid([0.75, 0.5, 0.85]),
                },
            ],
        )
    }

    /// Low-frequency room used for desk-scale training runs.
    pub fn smooth_room() -> Self {
        let solid = |c: [f64; 3]| Material::Solid { color: c };
        Self::room(
            "smooth_room",
            Vec3::new(4.0, 4.0, 2.0),
            solid([0.7, 0.65, 0.55]),
            [
                [0.92, 0.92, 0.9],
                [0.85, 0.55, 0.4],
                [0.4, 0.55, 0.8],
                [0.55, 0.78, 0.5],
                [0.85, 0.8, 0.45],
            ],
            vec![
                Primitive::Sphere {
                    center: Vec3::new(2.2, 0.8, -0.5),
                    radius: 0.9,
                    material: solid([0.9, 0.3, 0.25]),
                },
                Primitive::Sphere {
                    center: Vec3::new(-1.8, -2.0, 0.1),
                    radius: 1.0,
                    material: solid([0.25, 0.4, 0.85]),
                },
                Primitive::Aabb {
                    min: Vec3::new(0.8, -2.8, -2.0),
                    max: Vec3::new(2.6, -1.2, -0.6),
                    material: solid([0.35, 0.75, 0.55]),
                },
            ],
        )
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "checker_room" => Ok(Self::checker_room()),
            "smooth_room" => Ok(Self::smooth_room()),
            "empty" => Ok(Self::empty()),
            other => Err(Error::Config(format!(
                "unknown scene preset {other:?}; expected checker_room, smooth_room or empty"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.primitives.iter().enumerate() {
            if !p.contained_in(self.bounds_min, self.bounds_max) {
                return Err(Error::Config(format!("primitive {i} lies outside the scene bounds")));
            }
        }
        for corner in [-0.5, 0.5] {
            let c = self.translation_box.center + Vec3::splat(corner * self.translation_box.size);
            if self.occupied(c) {
                return Err(Error::Config("translation box intersects scene geometry".into()));
            }
        }
        Ok(())
    }

    fn occupied(&self, p: Vec3) -> bool {
        self.primitives.iter().any(|prim| match *prim {
            Primitive::Sphere { center, radius, .. } => (p - center).norm() <= radius,
            Primitive::Aabb { min, max, .. } => {
                p.x >= min.x && p.y >= min.y && p.z >= min.z && p.x <= max.x && p.y <= max.y && p.z <= max.z
            }
            Primitive::Plane { point, normal, .. } => (p - point).dot(normal) < 0.0,
        })
    }

    pub fn intersect(&self, ray: &Ray) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, prim) in self.primitives.iter().enumerate() {
            if let Some((t, n)) = prim.intersect(ray) {
                if best.map_or(true, |b| t < b.t) {
                    let n = if n.dot(ray.direction) > 0.0 { -n } else { n };
                    best = Some(Hit {
                        t,
                        point: ray.at(t),
                        normal: n,
                        primitive: i,
                    });
                }
            }
        }
        best
    }

    /// Lambertian radiance and hit distance along a ray.
    pub fn shade(&self, ray: &Ray) -> ([f64; 3], f64) {
        match self.intersect(ray) {
            None => (self.background, f64::INFINITY),
            Some(hit) => {
                let prim = &self.primitives[hit.primitive];
                // sample texture slightly inside the surface so face cells are stable
                let albedo = prim.material().albedo(hit.point - hit.normal * 1e-7);
                let lambert = hit.normal.dot(self.light_dir).max(0.0);
                let k = self.ambient + (1.0 - self.ambient) * lambert;
                (albedo.map(|a| a * k), hit.t)
            }
        }
    }

    /// Sphere-grid bounds covering every visible surface from the translation box.
    pub fn radius_bounds(&self, n_dirs: usize) -> (f64, f64) {
        let c = self.translation_box.center;
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for d in fibonacci_sphere(n_dirs) {
            let (_, t) = self.shade(&Ray::from_unit(c, d));
            if t.is_finite() {
                lo = lo.min(t);
                hi = hi.max(t);
            }
        }
        if !lo.is_finite() {
            return (0.5, 10.0);
        }
        let slack = self.translation_box.half_diagonal();
        ((0.95 * (lo - slack)).max(0.05), 1.05 * (hi + slack))
    }
}

/// Quasi-uniform unit directions.
pub fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let a = golden * i as f64;
            Vec3::new(r * a.cos(), r * a.sin(), z)
        })
        .collect()
}

/// Ray-traced linear colour and hit distance for every pixel.
pub fn render_reference(scene: &ProceduralScene, camera: &PinholeCamera) -> (RgbImage, DepthMap) {
    let batch = build_rays(camera);
    let shade = |r: &Ray| scene.shade(r);
    #[cfg(feature = "parallel")]
    let results: Vec<([f64; 3], f64)> = {
        use rayon::prelude::*;
        batch.rays.par_iter().map(shade).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<([f64; 3], f64)> = batch.rays.iter().map(shade).collect();
    let pixels: Vec<[f32; 3]> = results.iter().map(|(c, _)| c.map(|v| v as f32)).collect();
    let depth = DepthMap {
        width: camera.width,
        height: camera.height,
        data: results.iter().map(|(_, t)| *t as f32).collect(),
    };
    (RgbImage::from_pixels(camera.width, camera.height, &pixels), depth)
}

/// Points of a lattice with spacing `step` filling the box, corners included.
pub fn lattice_positions(tbox: &TranslationBox, step: f64) -> Result<Vec<Vec3>> {
    if !(step > 0.0) || !(tbox.size >= 0.0) {
        return Err(Error::Config(format!(
            "lattice step {step} or box size {} invalid",
            tbox.size
        )));
    }
    let n = (tbox.size / step + 1e-9).floor() as usize + 1;
    let start = tbox.center - Vec3::splat(0.5 * (n - 1) as f64 * step);
    let mut out = Vec::with_capacity(n * n * n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                out.push(start + Vec3::new(i as f64, j as f64, k as f64) * step);
            }
        }
    }
    Ok(out)
}

fn in_square_frustum(aim: &Mat3, tan_half: f64, dir: Vec3) -> bool {
    let l = aim.transpose() * dir;
    l.x > 0.0 && (l.y / l.x).abs() <= tan_half + 1e-12 && (l.z / l.x).abs() <= tan_half + 1e-12
}

fn dir_at(elev: f64, az: f64) -> Vec3 {
    Vec3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin())
}

/// Largest `x` in `[lo, hi]` with `ok(x)`, assuming `ok` holds on a prefix.
fn bisect(lo: f64, hi: f64, ok: impl Fn(f64) -> bool) -> f64 {
    let (mut a, mut b) = (lo, hi);
    if ok(b) {
        return b;
    }
    for _ in 0..60 {
        let m = 0.5 * (a + b);
        if ok(m) {
            a = m;
        } else {
            b = m;
        }
    }
    a
}

/// Head-frame aim rotations (yaw then pitch) whose square frusta of
/// `fov_deg` cover every direction. Rings of constant pitch are stacked from
/// the equator; each ring starts where the previous ring's coverage ends.
pub fn rotation_tiling(fov_deg: f64) -> Result<Vec<(f64, f64)>> {
    if !(fov_deg > 0.0 && fov_deg < 180.0) {
        return Err(Error::Config(format!(
            "rotation tiling needs a field of view in (0, 180), got {fov_deg}"
        )));
    }
    let h = 0.5 * fov_deg.to_radians();
    let tan_h = h.tan();
    let cap_start = std::f64::consts::FRAC_PI_2 - h;
    let inside =
        |pitch: f64, elev: f64, az: f64| in_square_frustum(&Mat3::from_yaw_pitch(0.0, pitch), tan_h, dir_at(elev, az));
    let ring = |n: usize, pitch: f64| (0..n).map(move |i| (2.0 * std::f64::consts::PI * i as f64 / n as f64, pitch));

    let n0 = (360.0 / fov_deg - 1e-9).ceil() as usize;
    let mut aims: Vec<(f64, f64)> = ring(n0, 0.0).collect();
    let half_az = std::f64::consts::PI / n0 as f64;
    let mut lower = bisect(0.0, h, |e| inside(0.0, e, half_az));
    while lower < cap_start {
        let pitch = (lower + 0.5 * h).min(cap_start);
        let w = bisect(0.0, std::f64::consts::PI, |az| inside(pitch, lower, az));
        if w <= 1e-6 {
            return Err(Error::Config("rotation tiling failed to make progress".into()));
        }
        let n = (std::f64::consts::PI / w).ceil() as usize;
        let half_az = std::f64::consts::PI / n as f64;
        let top = bisect(lower, pitch + h, |e| inside(pitch, e, half_az));
        if top <= lower + 1e-6 {
            return Err(Error::Config("rotation tiling failed to make progress".into()));
        }
        aims.extend(ring(n, pitch));
        aims.extend(ring(n, -pitch));
        lower = top;
    }
    aims.push((0.0, std::f64::consts::FRAC_PI_2));
    aims.push((0.0, -std::f64::consts::FRAC_PI_2));
    Ok(aims)
}

/// Camera rotation looking along a head-frame (yaw, pitch).
pub fn aim_rotation(yaw: f64, pitch: f64) -> Mat3 {
    Mat3::from_yaw_pitch(yaw, pitch) * CAMERA_TO_HEAD
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub position: Vec3,
    pub rotation: Mat3,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl ViewSpec {
    pub fn camera(&self) -> Result<PinholeCamera> {
        PinholeCamera::new(self.position, self.rotation, self.fov_deg, self.width, self.height)
    }
}

/// Every lattice position combined with every tiled rotation.
pub fn sample_views(
    tbox: &TranslationBox,
    step: f64,
    fov_deg: f64,
    width: usize,
    height: usize,
) -> Result<Vec<ViewSpec>> {
    let positions = lattice_positions(tbox, step)?;
    let aims = rotation_tiling(fov_deg)?;
    let mut out = Vec::with_capacity(positions.len() * aims.len());
    for &position in &positions {
        for &(yaw, pitch) in &aims {
            out.push(ViewSpec {
                position,
                rotation: aim_rotation(yaw, pitch),
                fov_deg,
                width,
                height,
            });
        }
    }
    Ok(out)
}

/// Deterministic random subset of at most `n` views.
pub fn subsample_views(mut views: Vec<ViewSpec>, n: usize, seed: u64) -> Vec<ViewSpec> {
    if views.len() > n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        views.shuffle(&mut rng);
        views.truncate(n);
    }
    views
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewEntry {
    pub position: Vec3,
    pub rotation: Mat3,
    pub image: String,
    pub depth: String,
    pub image_sha256: String,
    pub depth_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub layer: LayerTag,
    pub scene: String,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
    pub views: Vec<ViewEntry>,
}

impl Manifest {
    pub fn view_spec(&self, i: usize) -> ViewSpec {
        let v = &self.views[i];
        ViewSpec {
            position: v.position,
            rotation: v.rotation,
            fov_deg: self.fov_deg,
            width: self.width,
            height: self.height,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Renders `views` of `scene` into `dir` and writes the manifest.
pub fn write_dataset(dir: &Path, scene: &ProceduralScene, layer: LayerTag, views: &[ViewSpec]) -> Result<Manifest> {
    let (fov_deg, width, height) = match views.first() {
        Some(v) => (v.fov_deg, v.width, v.height),
        None => {
            log::warn!("writing a dataset with no views to {}", dir.display());
            (layer.training_fov_deg(), 1, 1)
        }
    };
    if views
        .iter()
        .any(|v| v.fov_deg != fov_deg || v.width != width || v.height != height)
    {
        return Err(Error::Config(
            "all views in a dataset must share fov and resolution".into(),
        ));
    }
    for sub in ["images", "depth"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(views.len());
    for (i, view) in views.iter().enumerate() {
        let (img, depth) = render_reference(scene, &view.camera()?);
        let png = img.encode_png()?;
        let raw = depth.to_bytes();
        let image = format!("images/{i:05}.png");
        let depth_name = format!("depth/{i:05}.bin");
        write_file(&dir.join(&image), &png)?;
        write_file(&dir.join(&depth_name), &raw)?;
        entries.push(ViewEntry {
            position: view.position,
            rotation: view.rotation,
            image,
            depth: depth_name,
            image_sha256: sha256_hex(&png),
            depth_sha256: sha256_hex(&raw),
        });
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        layer,
        scene: scene.name.clone(),
        fov_deg,
        width,
        height,
        views: entries,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let json = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST_FILE), &json)
}

/// Parses the manifest and verifies every referenced file.
pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Manifest(ManifestError::MissingFile(path.clone())),
        _ => Error::io(&path, e),
    })?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| ManifestError::Malformed(e.to_string()))?;
    let found = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| ManifestError::Malformed("schema_version missing".into()))?;
    if found != SCHEMA_VERSION as u64 {
        return Err(ManifestError::SchemaVersion {
            found: found as u32,
            expected: SCHEMA_VERSION,
        }
        .into());
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| ManifestError::Malformed(e.to_string()))?;
    if manifest.views.is_empty() {
        log::warn!("dataset {} has no views", dir.display());
    }
    for v in &manifest.views {
        for (name, sum) in [(&v.image, &v.image_sha256), (&v.depth, &v.depth_sha256)] {
            let p = dir.join(name);
            let data = fs::read(&p).map_err(|_| ManifestError::MissingFile(p.clone()))?;
            if &sha256_hex(&data) != sum {
                return Err(ManifestError::Checksum(p).into());
            }
        }
    }
    Ok(manifest)
}

/// Image and depth of view `i`, colour converted to linear light.
pub fn load_view(dir: &Path, manifest: &Manifest, i: usize) -> Result<(RgbImage, DepthMap)> {
    let v = &manifest.views[i];
    let read = |name: &str| -> Result<Vec<u8>> {
        let p: PathBuf = dir.join(name);
        fs::read(&p).map_err(|_| ManifestError::MissingFile(p).into())
    };
    let img = RgbImage::decode_png(&read(&v.image)?)?;
    let depth = DepthMap::from_bytes(&read(&v.depth)?)?;
    if img.dims() != (manifest.width, manifest.height) || (depth.width, depth.height) != img.dims() {
        return Err(ManifestError::Malformed(format!("view {i} resolution differs from the manifest")).into());
    }
    Ok((img, depth))
}

/// Every pixel ray of every view with its linear target colour.
pub fn load_rays(dir: &Path, manifest: &Manifest) -> Result<RayDataset> {
    let mut data = RayDataset {
        fov_deg: manifest.fov_deg,
        ..Default::default()
    };
    for i in 0..manifest.views.len() {
        let (img, _) = load_view(dir, manifest, i)?;
        let batch = build_rays(&manifest.view_spec(i).camera()?);
        let targets: Vec<[f32; 3]> = img.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        data.extend(batch.rays, targets);
    }
    Ok(data)
}

/// Rays rendered straight from the scene without touching disk.
pub fn render_rays(scene: &ProceduralScene, views: &[ViewSpec]) -> Result<RayDataset> {
    let mut data = RayDataset {
        fov_deg: views.first().map_or(0.0, |v| v.fov_deg),
        ..Default::default()
    };
    for v in views {
        let cam = v.camera()?;
        let (img, _) = render_reference(scene, &cam);
        // round through 8-bit storage like a dataset on disk
        let img = RgbImage::from_srgb8(img.width, img.height, &img.to_srgb8());
        let targets: Vec<[f32; 3]> = img.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        data.extend(build_rays(&cam).rays, targets);
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::CAMERA_TO_HEAD;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn empty_scene_is_background() {
        let scene = ProceduralScene::empty();
        let cam = PinholeCamera::new(Vec3::ZERO, CAMERA_TO_HEAD, 60.0, 4, 3).unwrap();
        let (img, depth) = render_reference(&scene, &cam);
        assert!(img.data.iter().all(|&v| v == 0.0));
        assert!(depth.data.iter().all(|d| d.is_infinite()));
    }

    #[test]
    fn sphere_silhouette_matches_projection() {
        let mut scene = ProceduralScene::empty();
        scene.primitives.push(Primitive::Sphere {
            center: Vec3::new(5.0, 0.0, 0.0),
            radius: 1.0,
            material: Material::Solid { color: [1.0; 3] },
        });
        scene.bounds_max = Vec3::splat(10.0);
        let cam = PinholeCamera::new(Vec3::ZERO, CAMERA_TO_HEAD, 40.0, 201, 201).unwrap();
        let (_, depth) = render_reference(&scene, &cam);
        // angular radius asin(1/5) on the image's centre row
        let expected = cam.focal_px() * (1.0f64 / 5.0).asin().tan();
        let row = 100;
        let hits = (0..201).filter(|&x| depth.data[row * 201 + x].is_finite()).count();
        assert!((hits as f64 / 2.0 - expected).abs() <= 1.0, "{hits} vs {expected}");
    }

    #[test]
    fn checker_plane_period() {
        let mut scene = ProceduralScene::empty();
        let (a, b) = ([1.0, 0.0, 0.0], [0.0, 0.0, 1.0]);
        scene.primitives.push(Primitive::Plane {
            point: Vec3::new(0.0, 0.0, -1.0),
            normal: Vec3::Z,
            material: Material::Checker { a, b, period: 0.5 },
        });
        scene.ambient = 1.0;
        for (x, y) in [(0.1, 0.1), (0.6, 0.1), (0.6, 0.6), (-0.1, 0.2), (1.1, 0.2)] {
            let target = Vec3::new(x, y, -1.0);
            let ray = Ray::towards(Vec3::ZERO, target).unwrap();
            let (c, t) = scene.shade(&ray);
            assert_abs_diff_eq!(t, target.norm(), epsilon = 1e-9);
            // z sits just below the plane, floor(z / period) = -3 is odd
            let parity = ((x / 0.5f64).floor() + (y / 0.5f64).floor()) as i64 - 3;
            let expect = if parity.rem_euclid(2) == 0 { a } else { b };
            assert_eq!(c, expect, "({x},{y})");
        }
    }

    #[test]
    fn depth_reprojection_hits_same_primitive() {
        let scene = ProceduralScene::checker_room();
        let cam = PinholeCamera::new(Vec3::new(0.05, -0.1, 0.02), aim_rotation(0.7, -0.2), 70.0, 32, 24).unwrap();
        let (_, depth) = render_reference(&scene, &cam);
        let batch = build_rays(&cam);
        for (ray, &d) in batch.rays.iter().zip(&depth.data) {
            let first = scene.intersect(ray).unwrap();
            let p = ray.at(d as f64);
            let again = scene.intersect(&Ray::towards(cam.position, p).unwrap()).unwrap();
            assert_eq!(first.primitive, again.primitive);
        }
    }

    #[test]
    fn render_is_deterministic() {
        let scene = ProceduralScene::checker_room();
        let cam = PinholeCamera::new(Vec3::ZERO, aim_rotation(0.3, 0.1), 50.0, 20, 20).unwrap();
        assert_eq!(render_reference(&scene, &cam), render_reference(&scene, &cam));
    }

    #[test]
    fn presets_are_valid() {
        for name in ["checker_room", "smooth_room", "empty"] {
            ProceduralScene::preset(name).unwrap().validate().unwrap();
        }
        assert!(ProceduralScene::preset("nope").is_err());
    }

    #[test]
    fn lattice_counts() {
        let tbox = TranslationBox::default();
        let pts = lattice_positions(&tbox, 0.05).unwrap();
        assert_eq!(pts.len(), 343);
        assert!(pts.iter().all(|p| tbox.contains(*p)));
        let point = TranslationBox {
            center: Vec3::ZERO,
            size: 0.0,
        };
        assert_eq!(lattice_positions(&point, 0.05).unwrap().len(), 1);
    }

    #[test]
    fn tiling_rings() {
        let aims = rotation_tiling(90.0).unwrap();
        assert_eq!(aims.iter().filter(|a| a.1 == 0.0).count(), 4);
        assert!(rotation_tiling(180.0).is_err());
        assert!(rotation_tiling(200.0).is_err());
    }

    #[test]
    fn tiling_covers_every_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for fov in [20.0, 45.0, 90.0, 110.0] {
            let aims = rotation_tiling(fov).unwrap();
            let tan_h = (0.5 * f64::to_radians(fov)).tan();
            let mats: Vec<Mat3> = aims.iter().map(|&(y, p)| Mat3::from_yaw_pitch(y, p)).collect();
            for _ in 0..20_000 {
                let d = Vec3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                let Some(d) = d.try_normalize() else { continue };
                assert!(
                    mats.iter().any(|m| in_square_frustum(m, tan_h, d)),
                    "fov {fov} misses {d:?}"
                );
            }
        }
    }

    #[test]
    fn manifest_round_trip_and_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let scene = ProceduralScene::checker_room();
        let views = subsample_views(
            sample_views(&TranslationBox::default(), 0.15, 45.0, 8, 8).unwrap(),
            5,
            1,
        );
        let written = write_dataset(dir.path(), &scene, LayerTag::Mid, &views).unwrap();
        let read = read_manifest(dir.path()).unwrap();
        assert_eq!(written, read);
        assert_eq!(read.view_spec(2), views[2]);
        let rays = load_rays(dir.path(), &read).unwrap();
        assert_eq!(rays.len(), 5 * 64);

        let img = dir.path().join(&read.views[1].image);
        let mut bytes = fs::read(&img).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&img, &bytes).unwrap();
        let err = read_manifest(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Manifest(ManifestError::Checksum(_))), "{err}");

        fs::remove_file(&img).unwrap();
        let err = read_manifest(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Manifest(ManifestError::MissingFile(_))), "{err}");

        let mut m = read.clone();
        m.schema_version = 9;
        write_manifest(dir.path(), &m).unwrap();
        let err = read_manifest(dir.path()).unwrap_err();
        assert!(matches!(
            err,
            Error::Manifest(ManifestError::SchemaVersion { found: 9, .. })
        ));

        fs::write(dir.path().join(MANIFEST_FILE), b"{\"schema_version\":1,\"views\":").unwrap();
        assert!(matches!(
            read_manifest(dir.path()).unwrap_err(),
            Error::Manifest(ManifestError::Malformed(_))
        ));
    }

    #[test]
    fn empty_manifest_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ProceduralScene::empty(), LayerTag::Fovea, &[]).unwrap();
        assert!(read_manifest(dir.path()).unwrap().views.is_empty());
    }

    #[test]
    fn radius_bounds_enclose_room() {
        let scene = ProceduralScene::checker_room();
        let (lo, hi) = scene.radius_bounds(2000);
        assert!(lo > 0.0 && lo < 1.6);
        assert!(hi > (4f64 * 4.0 + 4.0 * 4.0 + 2.0 * 2.0).sqrt());
    }
}

//! Geometry of the egocentric concentric-sphere representation.
//!
//! All spheres are centred on the world origin. Scene points are either
//! re-projected radially onto the nearest sphere ([`ConcentricGrid::project_to_grid`])
//! or intersected along a viewing ray ([`ConcentricGrid::closest_grid_intersection`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentricGrid {
    radii: Vec<f64>,
    r_near: f64,
    r_far: f64,
}

impl ConcentricGrid {
    /// Builds a grid from explicit radii. Radii must be strictly increasing,
    /// positive, and lie inside `[r_near, r_far]`.
    pub fn new(radii: Vec<f64>, r_near: f64, r_far: f64) -> Result<Self> {
        if radii.is_empty() {
            return Err(Error::InvalidGrid("no spheres".into()));
        }
        if !(r_near > 0.0 && r_near.is_finite() && r_far.is_finite() && r_far >= r_near) {
            return Err(Error::InvalidGrid(format!("bad bounds [{r_near}, {r_far}]")));
        }
        for (i, &r) in radii.iter().enumerate() {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::InvalidGrid(format!("radius {i} is {r}")));
            }
            if r < r_near || r > r_far {
                return Err(Error::InvalidGrid(format!("radius {r} outside [{r_near}, {r_far}]")));
            }
            if i > 0 && r <= radii[i - 1] {
                return Err(Error::InvalidGrid("radii not strictly increasing".into()));
            }
        }
        Ok(Self { radii, r_near, r_far })
    }

    /// `n` radii spaced uniformly over `[r_near, r_far]`, endpoints included.
    /// A single sphere sits at the midpoint.
    pub fn uniform(n: usize, r_near: f64, r_far: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGrid("no spheres".into()));
        }
        let radii = if n == 1 {
            vec![0.5 * (r_near + r_far)]
        } else {
            let step = (r_far - r_near) / (n - 1) as f64;
            (0..n)
                .map(|i| if i + 1 == n { r_far } else { r_near + step * i as f64 })
                .collect()
        };
        Self::new(radii, r_near, r_far)
    }

    pub fn n_spheres(&self) -> usize {
        self.radii.len()
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn r_near(&self) -> f64 {
        self.r_near
    }

    pub fn r_far(&self) -> f64 {
        self.r_far
    }

    pub fn outer_radius(&self) -> f64 {
        *self.radii.last().expect("grid is never empty")
    }

    /// Zero-based index of the sphere whose radius is closest to `‖q‖`.
    /// Ties resolve to the smaller radius.
    pub fn nearest_sphere_index(&self, q: Vec3) -> Result<usize> {
        let d = q.norm();
        if !d.is_finite() {
            return Err(Error::NonFinite);
        }
        if d == 0.0 {
            return Err(Error::Degenerate("point at the grid origin"));
        }
        Ok(self.nearest_radius_index(d))
    }

    pub(crate) fn nearest_radius_index(&self, d: f64) -> usize {
        // first radius >= d; the answer is it or its predecessor
        let hi = self.radii.partition_point(|&r| r < d);
        if hi == 0 {
            return 0;
        }
        if hi == self.radii.len() {
            return hi - 1;
        }
        let below = d - self.radii[hi - 1];
        let above = self.radii[hi] - d;
        if below <= above {
            hi - 1
        } else {
            hi
        }
    }

    /// Radial re-projection of `q` onto its nearest sphere.
    pub fn project_to_grid(&self, q: Vec3) -> Result<Vec3> {
        let k = self.nearest_sphere_index(q)?;
        let dir = q.try_normalize().ok_or(Error::NonFinite)?;
        Ok(dir * self.radii[k])
    }

    /// Intersection of the ray from `viewpoint` through `q` with the sphere
    /// nearest to `q` (sphere chosen by `‖q‖`, as for radial projection).
    /// `Ok(None)` when that sphere is not hit going forward.
    pub fn closest_grid_intersection(&self, viewpoint: Vec3, q: Vec3) -> Result<Option<Vec3>> {
        let k = self.nearest_sphere_index(q)?;
        let ray = Ray::towards(viewpoint, q)?;
        Ok(ray_sphere_intersect(self.radii[k], &ray))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    /// Normalizes `direction`; fails for a zero or non-finite direction.
    pub fn new(origin: Vec3, direction: Vec3) -> Result<Self> {
        let direction = direction
            .try_normalize()
            .ok_or(Error::Degenerate("zero-length ray direction"))?;
        Ok(Self { origin, direction })
    }

    /// Ray from `from` through `to`.
    pub fn towards(from: Vec3, to: Vec3) -> Result<Self> {
        Self::new(from, to - from)
    }

    /// Caller guarantees `direction` is unit length.
    pub fn from_unit(origin: Vec3, direction: Vec3) -> Self {
        debug_assert!((direction.norm() - 1.0).abs() < 1e-6);
        Self { origin, direction }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Ray parameter of the exit intersection `t = √disc − x·v` with the
/// origin-centred sphere of radius `r`, if it exists and lies ahead.
pub fn ray_sphere_exit_t(r: f64, ray: &Ray) -> Option<f64> {
    let xv = ray.origin.dot(ray.direction);
    let disc = xv * xv - ray.origin.norm_squared() + r * r;
    if disc < 0.0 {
        return None;
    }
    let t = disc.sqrt() - xv;
    (t >= 0.0).then_some(t)
}

/// Exit intersection of `ray` with the origin-centred sphere of radius `r`.
pub fn ray_sphere_intersect(r: f64, ray: &Ray) -> Option<Vec3> {
    ray_sphere_exit_t(r, ray).map(|t| ray.at(t))
}

/// Position on a sphere: polar angle `theta` from +z in `[0, π]`, azimuth
/// `phi = atan2(y, x)` in `[−π, π)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphericalPoint {
    pub radius: f64,
    pub theta: f64,
    pub phi: f64,
}

impl SphericalPoint {
    pub fn from_cartesian(p: Vec3) -> Result<Self> {
        if !p.is_finite() {
            return Err(Error::NonFinite);
        }
        let radius = p.norm();
        if radius == 0.0 {
            return Err(Error::Degenerate("zero vector has no direction"));
        }
        let theta = (p.z / radius).clamp(-1.0, 1.0).acos();
        let mut phi = p.y.atan2(p.x);
        if phi >= std::f64::consts::PI {
            phi -= 2.0 * std::f64::consts::PI;
        }
        Ok(Self { radius, theta, phi })
    }

    pub fn to_cartesian(self) -> Vec3 {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        Vec3::new(self.radius * st * cp, self.radius * st * sp, self.radius * ct)
    }
}

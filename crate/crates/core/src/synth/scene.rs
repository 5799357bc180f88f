//! Camera, lighting and head placement, plus the per-pixel ray cast against
//! the face ellipsoid that both shading and depth testing rely on.

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::axis_angle;
use crate::error::{Error, Result};

/// Closest depth a projected point may have.
pub const NEAR_PLANE: f64 = 1e-3;

/// Pinhole camera on the +z axis looking at the origin; image v grows downward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal_px: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera centre is at `(0, 0, distance)`.
    pub distance: f64,
}

impl Camera {
    pub fn for_image(size: usize) -> Self {
        let n = size as f64;
        Self {
            focal_px: 1.45 * n,
            cx: 0.5 * n,
            cy: 0.5 * n,
            distance: 40.0,
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, self.distance)
    }

    pub fn depth(&self, p: &Vector3<f64>) -> f64 {
        self.distance - p.z
    }

    /// `(u, v, depth)`; `None` behind the near plane.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let d = self.depth(p);
        if d <= NEAR_PLANE {
            return None;
        }
        Some((self.cx + self.focal_px * p.x / d, self.cy - self.focal_px * p.y / d, d))
    }

    /// Unit ray direction through image position `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.focal_px, -(v - self.cy) / self.focal_px, -1.0).normalize()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub image_size: usize,
    pub camera: Camera,
    /// Unit vector from the surface toward the light.
    pub light_direction: [f64; 3],
    /// Yaw, pitch, roll in degrees, applied to face and glasses together.
    pub head_pose: [f64; 3],
    pub ambient: f64,
    pub shadow_intensity: f64,
    /// Pixels.
    pub shadow_blur_sigma: f64,
    pub background: [f64; 3],
}

impl SceneConfig {
    /// Frontal head, light from slightly above the camera.
    pub fn frontal(image_size: usize) -> Self {
        Self {
            image_size,
            camera: Camera::for_image(image_size),
            light_direction: Vector3::new(0.2, 0.35, 1.0).normalize().into(),
            head_pose: [0.0; 3],
            ambient: 0.4,
            shadow_intensity: 0.6,
            shadow_blur_sigma: default_blur_sigma(image_size),
            background: [0.55, 0.57, 0.6],
        }
    }

    pub fn light(&self) -> Vector3<f64> {
        Vector3::from(self.light_direction)
    }

    pub fn head_rotation(&self) -> Matrix3<f64> {
        let [yaw, pitch, roll] = self.head_pose.map(f64::to_radians);
        axis_angle(Vector3::y(), yaw) * axis_angle(Vector3::x(), pitch) * axis_angle(Vector3::z(), roll)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::Config(format!("image_size {} < 32", self.image_size)));
        }
        if (self.light().norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("light_direction must be a unit vector".into()));
        }
        if !(0.0..=1.0).contains(&self.shadow_intensity) {
            return Err(Error::Config(format!("shadow_intensity {} outside [0, 1]", self.shadow_intensity)));
        }
        if self.shadow_blur_sigma < 0.0 || !self.shadow_blur_sigma.is_finite() {
            return Err(Error::Config("shadow_blur_sigma must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// 1.5 px at 64², scaled with resolution.
pub fn default_blur_sigma(image_size: usize) -> f64 {
    1.5 * image_size as f64 / 64.0
}

/// Ranges the per-sample scene parameters are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneRanges {
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub roll_deg: f64,
    pub light_azimuth_deg: f64,
    pub light_elevation_deg: [f64; 2],
    pub ambient: [f64; 2],
    pub shadow_intensity: [f64; 2],
}

impl Default for SceneRanges {
    fn default() -> Self {
        Self {
            yaw_deg: 20.0,
            pitch_deg: 12.0,
            roll_deg: 8.0,
            light_azimuth_deg: 55.0,
            light_elevation_deg: [-10.0, 50.0],
            ambient: [0.3, 0.5],
            shadow_intensity: [0.35, 0.75],
        }
    }
}

fn sym<R: Rng>(rng: &mut R, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..=half)
    } else {
        0.0
    }
}

fn span<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..=r[1])
    } else {
        r[0]
    }
}

pub fn sample_scene(rng_seed: u64, image_size: usize, ranges: &SceneRanges) -> SceneConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ 0x5CE4_E000_0000_0000);
    let head_pose = [
        sym(&mut rng, ranges.yaw_deg),
        sym(&mut rng, ranges.pitch_deg),
        sym(&mut rng, ranges.roll_deg),
    ];
    let az = sym(&mut rng, ranges.light_azimuth_deg).to_radians();
    let el = span(&mut rng, ranges.light_elevation_deg).to_radians();
    let light = Vector3::new(az.sin() * el.cos(), el.sin(), az.cos() * el.cos()).normalize();
    let grey: f64 = rng.random_range(0.2..0.85);
    let background = [
        (grey + rng.random_range(-0.12..0.12)).clamp(0.0, 1.0),
        (grey + rng.random_range(-0.12..0.12)).clamp(0.0, 1.0),
        (grey + rng.random_range(-0.12..0.12)).clamp(0.0, 1.0),
    ];
    SceneConfig {
        image_size,
        camera: Camera::for_image(image_size),
        light_direction: light.into(),
        head_pose,
        ambient: span(&mut rng, ranges.ambient),
        shadow_intensity: span(&mut rng, ranges.shadow_intensity),
        shadow_blur_sigma: default_blur_sigma(image_size),
        background,
    }
}

/// Face ellipsoid centred at the origin, rotated by the head pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadGeometry {
    pub semi_axes: Vector3<f64>,
    pub pose: Matrix3<f64>,
}

impl HeadGeometry {
    pub fn new(semi_axes: [f64; 3], pose: Matrix3<f64>) -> Self {
        Self {
            semi_axes: Vector3::from(semi_axes),
            pose,
        }
    }

    pub fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.pose.transpose() * p
    }

    /// Negative inside the ellipsoid.
    pub fn level(&self, p: &Vector3<f64>) -> f64 {
        let q = self.to_local(p).component_div(&self.semi_axes);
        q.norm_squared() - 1.0
    }

    pub fn normal_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let q = self.to_local(p);
        let a2 = self.semi_axes.component_mul(&self.semi_axes);
        self.pose * q.component_div(&a2).normalize()
    }

    /// Smallest ray parameter `t > eps` at which `origin + t * dir` meets the
    /// surface.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let o = self.to_local(origin).component_div(&self.semi_axes);
        let d = self.to_local(dir).component_div(&self.semi_axes);
        let a = d.norm_squared();
        let b = 2.0 * o.dot(&d);
        let c = o.norm_squared() - 1.0;
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 || a == 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        // numerically stable root pair
        let q = -0.5 * (b + b.signum() * sq);
        let (mut t0, mut t1) = (q / a, if q != 0.0 { c / q } else { -q / a });
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        const EPS: f64 = 1e-9;
        if t0 > EPS {
            Some(t0)
        } else if t1 > EPS {
            Some(t1)
        } else {
            None
        }
    }
}

/// Per-pixel first hit of the camera ray on the face ellipsoid.
#[derive(Debug, Clone)]
pub struct SurfaceMap {
    pub size: usize,
    /// Camera z-depth of the hit, `+inf` for background pixels.
    pub depth: Array2<f64>,
    pub points: Array2<Vector3<f64>>,
}

impl SurfaceMap {
    pub fn compute(head: &HeadGeometry, camera: &Camera, size: usize) -> Self {
        let mut depth = Array2::from_elem((size, size), f64::INFINITY);
        let mut points = Array2::from_elem((size, size), Vector3::zeros());
        let origin = camera.center();
        for y in 0..size {
            for x in 0..size {
                let dir = camera.ray(x as f64 + 0.5, y as f64 + 0.5);
                if let Some(t) = head.intersect(&origin, &dir) {
                    let p = origin + t * dir;
                    depth[[y, x]] = camera.depth(&p);
                    points[[y, x]] = p;
                }
            }
        }
        Self { size, depth, points }
    }

    pub fn is_face(&self, y: usize, x: usize) -> bool {
        self.depth[[y, x]].is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_and_ray_agree() {
        let cam = Camera::for_image(64);
        let p = Vector3::new(1.5, -2.0, 8.0);
        let (u, v, d) = cam.project(&p).unwrap();
        let dir = cam.ray(u, v);
        let t = d / -dir.z;
        assert!((cam.center() + t * dir - p).norm() < 1e-9);
        assert!(cam.project(&Vector3::new(0.0, 0.0, 41.0)).is_none());
    }

    #[test]
    fn ray_hits_front_of_rotated_ellipsoid() {
        let head = HeadGeometry::new([7.5, 10.0, 9.0], axis_angle(Vector3::y(), 0.3));
        let cam = Camera::for_image(64);
        let t = head.intersect(&cam.center(), &Vector3::new(0.0, 0.0, -1.0)).unwrap();
        let p = cam.center() + t * Vector3::new(0.0, 0.0, -1.0);
        assert!(head.level(&p).abs() < 1e-9);
        assert!(head.normal_world(&p).z > 0.0);
        // from inside, the exit point is returned
        let t_in = head.intersect(&Vector3::zeros(), &Vector3::x()).unwrap();
        assert!(t_in > 0.0);
        assert!(head.intersect(&cam.center(), &Vector3::new(0.0, 0.0, 1.0)).is_none());
    }

    #[test]
    fn sampled_scenes_are_valid() {
        for seed in 0..200 {
            let s = sample_scene(seed, 64, &SceneRanges::default());
            s.validate().unwrap();
        }
        let mut bad = SceneConfig::frontal(64);
        bad.light_direction = [0.0, 0.0, 2.0];
        assert!(bad.validate().is_err());
        bad = SceneConfig::frontal(16);
        assert!(bad.validate().is_err());
    }
}

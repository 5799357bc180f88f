//! Procedural face proxy: a shaded ellipsoid with painted features.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::AnchorSet;

/// Nose-pad candidate pairs placed along the nose ridge.
pub const DEFAULT_CANDIDATE_PAIRS: usize = 3;
const NOISE_GRID: usize = 9;

/// Painted facial features in head-local surface coordinates (x right, y up).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceFeatures {
    pub eye_y: f64,
    pub eye_dx: f64,
    pub eye_radii: [f64; 2],
    pub iris_radius: f64,
    pub iris_color: [f64; 3],
    pub brow_lift: f64,
    pub brow_thickness: f64,
    pub hair_color: [f64; 3],
    pub hairline_y: f64,
    pub mouth_y: f64,
    pub mouth_radii: [f64; 2],
    pub lip_color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceProxy {
    /// Ellipsoid semi-axes along x, y, z.
    pub semi_axes: [f64; 3],
    pub skin_color: [f64; 3],
    pub texture_seed: u64,
    /// Fixed temple contacts (left, right).
    pub temples: [Vector3<f64>; 2],
    /// Floating nose-pad contacts (left, right), upper pair first.
    pub nose_pad_candidates: Vec<[Vector3<f64>; 2]>,
    pub features: FaceFeatures,
    /// Coarse albedo noise lattice, sampled from `texture_seed`.
    noise: Vec<f64>,
}

impl FaceProxy {
    pub fn axes(&self) -> Vector3<f64> {
        Vector3::from(self.semi_axes)
    }

    /// Signed ellipsoid level: 0 on the surface, negative inside.
    pub fn surface_residual(&self, p: &Vector3<f64>) -> f64 {
        let a = self.axes();
        (p.x / a.x).powi(2) + (p.y / a.y).powi(2) + (p.z / a.z).powi(2) - 1.0
    }

    /// Outward unit normal at a surface point (head-local).
    pub fn normal(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let a = self.axes();
        Vector3::new(p.x / (a.x * a.x), p.y / (a.y * a.y), p.z / (a.z * a.z)).normalize()
    }

    /// Anchor targets for the given nose-pad pair.
    pub fn anchor_targets(&self, pair: usize) -> Option<AnchorSet> {
        let pads = self.nose_pad_candidates.get(pair)?;
        Some(AnchorSet::new([self.temples[0], self.temples[1], pads[0], pads[1]]))
    }

    fn noise_at(&self, x: f64, y: f64) -> f64 {
        let a = self.axes();
        let n = NOISE_GRID as f64 - 1.0;
        let gx = ((x / a.x + 1.0) * 0.5 * n).clamp(0.0, n - 1e-9);
        let gy = ((y / a.y + 1.0) * 0.5 * n).clamp(0.0, n - 1e-9);
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let (fx, fy) = (gx - ix as f64, gy - iy as f64);
        let at = |i: usize, j: usize| self.noise[j * NOISE_GRID + i];
        let top = at(ix, iy) * (1.0 - fx) + at(ix + 1, iy) * fx;
        let bot = at(ix, iy + 1) * (1.0 - fx) + at(ix + 1, iy + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Surface albedo at a head-local surface point.
    pub fn albedo(&self, p: &Vector3<f64>) -> [f64; 3] {
        let f = &self.features;
        let mut c = self.skin_color.map(|v| v * (1.0 + self.noise_at(p.x, p.y)));

        if p.y > f.hairline_y || p.z < -0.2 * self.semi_axes[2] {
            return f.hair_color;
        }
        if p.z <= 0.0 {
            return c;
        }

        // nose shadow and nostrils
        let nose_y = f.eye_y - 2.4;
        let dn = ((p.x / 0.9).powi(2) + ((p.y - nose_y) / 0.35).powi(2)).sqrt();
        if dn < 1.0 {
            c = c.map(|v| v * (0.82 + 0.18 * dn));
        }

        // mouth
        let dm = ((p.x / f.mouth_radii[0]).powi(2) + ((p.y - f.mouth_y) / f.mouth_radii[1]).powi(2)).sqrt();
        if dm < 1.0 {
            return f.lip_color;
        }

        for side in [-1.0, 1.0] {
            let cx = side * f.eye_dx;
            let ex = (p.x - cx) / f.eye_radii[0];
            let ey = (p.y - f.eye_y) / f.eye_radii[1];
            if ex * ex + ey * ey < 1.0 {
                let r = ((p.x - cx).powi(2) + (p.y - f.eye_y).powi(2)).sqrt();
                return if r < 0.4 * f.iris_radius {
                    [0.04, 0.03, 0.03]
                } else if r < f.iris_radius {
                    f.iris_color
                } else {
                    [0.93, 0.92, 0.9]
                };
            }
            // brow: a thick arc above the eye
            let by = f.eye_y + f.brow_lift - 0.25 * ((p.x - cx) / f.eye_radii[0]).powi(2);
            if (p.x - cx).abs() < 1.25 * f.eye_radii[0] && (p.y - by).abs() < 0.5 * f.brow_thickness {
                return f.hair_color;
            }
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }
}

/// Point on the ellipsoid with the given x/y on the front (z > 0) or back.
fn surface_point(axes: [f64; 3], x: f64, y: f64, front: bool) -> Vector3<f64> {
    let rem = 1.0 - (x / axes[0]).powi(2) - (y / axes[1]).powi(2);
    let z = axes[2] * rem.max(0.0).sqrt();
    Vector3::new(x, y, if front { z } else { -z })
}

/// Point on the ellipsoid with the given y/z on the left (x < 0) or right.
fn side_point(axes: [f64; 3], y: f64, z: f64, right: bool) -> Vector3<f64> {
    let rem = 1.0 - (y / axes[1]).powi(2) - (z / axes[2]).powi(2);
    let x = axes[0] * rem.max(0.0).sqrt();
    Vector3::new(if right { x } else { -x }, y, z)
}

pub fn make_face_proxy(rng_seed: u64) -> FaceProxy {
    make_face_proxy_with(rng_seed, DEFAULT_CANDIDATE_PAIRS)
}

pub fn make_face_proxy_with(rng_seed: u64, candidate_pairs: usize) -> FaceProxy {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ 0xFACE_0000_0000_0000);
    let semi_axes = [rng.random_range(7.0..8.0), rng.random_range(9.6..11.0), rng.random_range(8.6..9.6)];

    let r = rng.random_range(0.45..0.95);
    let skin_color: [f64; 3] = [r, r * rng.random_range(0.68..0.82), r * rng.random_range(0.5..0.7)];
    let texture_seed: u64 = rng.random();

    let eye_y = rng.random_range(1.0..2.0);
    let features = FaceFeatures {
        eye_y,
        eye_dx: rng.random_range(2.6..3.2),
        eye_radii: [rng.random_range(0.9..1.2), rng.random_range(0.4..0.55)],
        iris_radius: rng.random_range(0.3..0.4),
        iris_color: {
            let b = rng.random_range(0.1..0.45);
            [b * 0.8, b * rng.random_range(0.6..1.2), b * rng.random_range(0.5..1.6)]
        },
        brow_lift: rng.random_range(1.0..1.4),
        brow_thickness: rng.random_range(0.3..0.5),
        hair_color: {
            let h = rng.random_range(0.05..0.6);
            [h, h * rng.random_range(0.7..0.9), h * rng.random_range(0.5..0.8)]
        },
        hairline_y: rng.random_range(5.4..7.0),
        mouth_y: eye_y - rng.random_range(4.8..5.6),
        mouth_radii: [rng.random_range(1.4..1.9), rng.random_range(0.35..0.55)],
        lip_color: [(skin_color[0] * 0.85).min(1.0), skin_color[1] * 0.55, skin_color[2] * 0.6],
    };

    let temple_y = eye_y + rng.random_range(0.2..0.6);
    let temple_z = semi_axes[2] * rng.random_range(0.05..0.2);
    let temples = [
        side_point(semi_axes, temple_y, temple_z, false),
        side_point(semi_axes, temple_y, temple_z, true),
    ];

    let pad_dx = rng.random_range(0.75..0.95);
    let nose_pad_candidates = (0..candidate_pairs)
        .map(|k| {
            let y = eye_y - 0.5 - 0.45 * k as f64;
            [
                surface_point(semi_axes, -pad_dx, y, true),
                surface_point(semi_axes, pad_dx, y, true),
            ]
        })
        .collect();

    let mut noise_rng = ChaCha8Rng::seed_from_u64(texture_seed);
    let noise = (0..NOISE_GRID * NOISE_GRID).map(|_| noise_rng.random_range(-0.06..0.06)).collect();

    FaceProxy {
        semi_axes,
        skin_color,
        texture_seed,
        temples,
        nose_pad_candidates,
        features,
        noise,
    }
}

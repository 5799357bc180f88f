//! Parametric eyeglasses frames built from stroked 3D polylines.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{AnchorSet, SimilarityTransform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameShape {
    Round,
    Rectangular,
    CatEye,
}

impl FrameShape {
    pub const ALL: [FrameShape; 3] = [FrameShape::Round, FrameShape::Rectangular, FrameShape::CatEye];
}

/// One polyline of the frame, stroked with a constant width (model units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stroke {
    pub points: Vec<Vector3<f64>>,
    pub closed: bool,
    pub width: f64,
}

impl Stroke {
    pub fn segments(&self) -> impl Iterator<Item = (Vector3<f64>, Vector3<f64>)> + '_ {
        let n = self.points.len();
        let count = if self.closed { n } else { n.saturating_sub(1) };
        (0..count).map(move |i| (self.points[i], self.points[(i + 1) % n]))
    }

    pub fn length(&self) -> f64 {
        self.segments().map(|(a, b)| (b - a).norm()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlassesConfig {
    /// Sampled stroke width range, model units.
    pub stroke_width: [f64; 2],
}

impl Default for GlassesConfig {
    fn default() -> Self {
        Self { stroke_width: [0.75, 1.3] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlassesModel {
    pub shape: FrameShape,
    /// Left lens, right lens, bridge, left arm, right arm, left pad, right pad.
    pub strokes: Vec<Stroke>,
    pub color: [f64; 3],
    /// Lenses are always clear; only the frame is drawn.
    pub transparent_lenses: bool,
    pub anchors: AnchorSet,
}

impl GlassesModel {
    pub fn transformed(&self, t: &SimilarityTransform) -> GlassesModel {
        GlassesModel {
            shape: self.shape,
            strokes: self
                .strokes
                .iter()
                .map(|s| Stroke {
                    points: s.points.iter().map(|p| t.apply(p)).collect(),
                    closed: s.closed,
                    width: s.width * t.scale,
                })
                .collect(),
            color: self.color,
            transparent_lenses: self.transparent_lenses,
            anchors: self.anchors.transformed(t),
        }
    }

    pub fn max_stroke_width(&self) -> f64 {
        self.strokes.iter().map(|s| s.width).fold(0.0, f64::max)
    }

    /// Same geometry with every stroke width multiplied by `factor`.
    pub fn with_width_scale(&self, factor: f64) -> GlassesModel {
        let mut g = self.clone();
        g.strokes.iter_mut().for_each(|s| s.width *= factor);
        g
    }
}

const PALETTE: [[f64; 3]; 7] = [
    [0.05, 0.05, 0.06],
    [0.30, 0.18, 0.10],
    [0.45, 0.28, 0.12],
    [0.55, 0.55, 0.58],
    [0.60, 0.10, 0.12],
    [0.10, 0.15, 0.40],
    [0.75, 0.60, 0.30],
];

const LOOP_POINTS: usize = 40;

fn lens_loop(shape: FrameShape, center_x: f64, half_w: f64, half_h: f64, outward: f64) -> Vec<Vector3<f64>> {
    (0..LOOP_POINTS)
        .map(|i| {
            let th = std::f64::consts::TAU * i as f64 / LOOP_POINTS as f64;
            let (c, s) = (th.cos(), th.sin());
            let (x, y) = match shape {
                FrameShape::Round => (c, s),
                FrameShape::Rectangular => (c.signum() * c.abs().sqrt(), s.signum() * s.abs().sqrt()),
                FrameShape::CatEye => {
                    let (x, y) = (c.signum() * c.abs().powf(2.0 / 3.0), s.signum() * s.abs().powf(2.0 / 3.0));
                    // upswept outer corner
                    let lift = 0.35 * (x * outward).max(0.0).powi(2) * y.max(0.0);
                    (x, y + lift)
                }
            };
            Vector3::new(center_x + half_w * x, half_h * y, 0.0)
        })
        .collect()
}

fn nearest(points: &[Vector3<f64>], target: Vector3<f64>) -> Vector3<f64> {
    *points
        .iter()
        .min_by(|a, b| (*a - target).norm_squared().total_cmp(&(*b - target).norm_squared()))
        .expect("non-empty loop")
}

pub fn make_glasses(rng_seed: u64) -> GlassesModel {
    make_glasses_with(rng_seed, &GlassesConfig::default())
}

pub fn make_glasses_with(rng_seed: u64, cfg: &GlassesConfig) -> GlassesModel {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ 0x61A5_5E50_0000_0000);
    let shape = FrameShape::ALL[rng.random_range(0..FrameShape::ALL.len())];
    let half_w = rng.random_range(2.1..2.7);
    let half_h = match shape {
        FrameShape::Round => half_w * rng.random_range(0.85..1.0),
        _ => rng.random_range(1.4..2.0),
    };
    let gap = rng.random_range(0.7..1.0);
    let [wmin, wmax] = cfg.stroke_width;
    let width = if wmax > wmin { rng.random_range(wmin..=wmax) } else { wmin };
    let arm_len = rng.random_range(9.0..11.0);

    let base = PALETTE[rng.random_range(0..PALETTE.len())];
    let color = base.map(|c| (c + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0));

    let mut strokes = Vec::with_capacity(7);
    let mut temple_anchor = [Vector3::zeros(); 2];
    let mut pad_anchor = [Vector3::zeros(); 2];
    let mut bridge_ends = [Vector3::zeros(); 2];
    let mut arms = Vec::new();
    let mut pads = Vec::new();

    for (k, side) in [-1.0f64, 1.0].into_iter().enumerate() {
        let center = side * (gap + half_w);
        let lens = lens_loop(shape, center, half_w, half_h, side);

        bridge_ends[k] = nearest(&lens, Vector3::new(side * gap, 0.45 * half_h, 0.0));

        let hinge = nearest(&lens, Vector3::new(side * (gap + 2.0 * half_w), 0.3 * half_h, 0.0));
        let outer_x = hinge.x + side * 0.25;
        let mut arm = vec![hinge, Vector3::new(outer_x, hinge.y, -0.6)];
        let steps = 8;
        for j in 1..=steps {
            let z = -0.6 - (arm_len - 0.6) * j as f64 / steps as f64;
            let flare = side * 0.35 * j as f64 / steps as f64;
            arm.push(Vector3::new(outer_x + flare, hinge.y - 0.1 * j as f64 / steps as f64, z));
        }
        // the anchor is an exact arm vertex at roughly 80% of the arm length
        temple_anchor[k] = arm[2 + (steps * 4) / 5 - 1];
        let tip = *arm.last().expect("arm has points");
        arm.push(Vector3::new(tip.x, tip.y - 1.1, tip.z - 1.3));
        arms.push(Stroke {
            points: arm,
            closed: false,
            width: 0.9 * width,
        });

        let pad = Vector3::new(side * (gap + 0.2), -0.35 * half_h, -0.6);
        pad_anchor[k] = pad;
        let root = nearest(&lens, Vector3::new(side * gap, -0.3 * half_h, 0.0));
        pads.push(Stroke {
            points: vec![root, pad],
            closed: false,
            width: 0.5 * width,
        });

        strokes.push(Stroke {
            points: lens,
            closed: true,
            width,
        });
    }

    let arch = 0.15 * half_h;
    let bridge = (0..=6)
        .map(|i| {
            let t = i as f64 / 6.0;
            let p = bridge_ends[0] * (1.0 - t) + bridge_ends[1] * t;
            p + Vector3::new(0.0, arch * (1.0 - (2.0 * t - 1.0).powi(2)), 0.0)
        })
        .collect();
    strokes.push(Stroke {
        points: bridge,
        closed: false,
        width: 0.8 * width,
    });
    strokes.extend(arms);
    strokes.extend(pads);

    GlassesModel {
        shape,
        strokes,
        color,
        transparent_lenses: true,
        anchors: AnchorSet::new([temple_anchor[0], temple_anchor[1], pad_anchor[0], pad_anchor[1]]),
    }
}

//! Four-anchor similarity registration used to seat an eyeglasses model on a
//! face proxy.
//!
//! Anchors are always ordered left temple, right temple, left nose pad, right
//! nose pad. "Left" is the negative-x side of the model frame. The solver is
//! the closed-form SVD solution of Umeyama for a rotation, translation and
//! uniform scale, with the determinant sign fix so that a reflection is never
//! returned.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::FaceProxy;

/// Relative tolerance below which a singular value of the anchor spread is
/// treated as zero.
const RANK_TOL: f64 = 1e-10;

pub const LEFT_TEMPLE: usize = 0;
pub const RIGHT_TEMPLE: usize = 1;
pub const LEFT_NOSE_PAD: usize = 2;
pub const RIGHT_NOSE_PAD: usize = 3;

/// Four ordered anchor positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[[f64; 3]; 4]", into = "[[f64; 3]; 4]")]
pub struct AnchorSet {
    pub points: [Vector3<f64>; 4],
}

impl AnchorSet {
    pub fn new(points: [Vector3<f64>; 4]) -> Self {
        Self { points }
    }

    pub fn from_arrays(rows: [[f64; 3]; 4]) -> Self {
        Self {
            points: rows.map(Vector3::from),
        }
    }

    pub fn to_arrays(&self) -> [[f64; 3]; 4] {
        self.points.map(|p| [p.x, p.y, p.z])
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.points.iter().sum::<Vector3<f64>>() / 4.0
    }

    /// Number of non-negligible singular values of the centered point spread
    /// (0 for coincident points, 1 for collinear, 2 for coplanar, 3 otherwise).
    pub fn spread_rank(&self) -> usize {
        let c = self.centroid();
        let mut cov = Matrix3::zeros();
        for p in &self.points {
            let d = p - c;
            cov += d * d.transpose();
        }
        let sv = cov.singular_values();
        let max = sv.max();
        if max <= f64::MIN_POSITIVE {
            return 0;
        }
        sv.iter().filter(|&&v| v > max * RANK_TOL).count()
    }

    pub fn transformed(&self, t: &SimilarityTransform) -> Self {
        Self {
            points: self.points.map(|p| t.apply(&p)),
        }
    }
}

impl From<[[f64; 3]; 4]> for AnchorSet {
    fn from(rows: [[f64; 3]; 4]) -> Self {
        Self::from_arrays(rows)
    }
}

impl From<AnchorSet> for [[f64; 3]; 4] {
    fn from(a: AnchorSet) -> Self {
        a.to_arrays()
    }
}

/// `p -> scale * rotation * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, scale: f64) -> Self {
        Self {
            rotation,
            translation,
            scale,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    /// Direction vectors ignore translation and scale.
    pub fn apply_direction(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * d
    }

    /// `self ∘ inner`: applying the result equals applying `inner` then `self`.
    pub fn compose(&self, inner: &SimilarityTransform) -> SimilarityTransform {
        SimilarityTransform {
            rotation: self.rotation * inner.rotation,
            translation: self.scale * (self.rotation * inner.translation) + self.translation,
            scale: self.scale * inner.scale,
        }
    }

    pub fn inverse(&self) -> SimilarityTransform {
        let rt = self.rotation.transpose();
        SimilarityTransform {
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
            scale: 1.0 / self.scale,
        }
    }

    /// Rotation entries in row-major order.
    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ]
    }

    pub fn from_parts(rotation_row_major: [f64; 9], translation: [f64; 3], scale: f64) -> Self {
        Self {
            rotation: Matrix3::from_row_slice(&rotation_row_major),
            translation: Vector3::from(translation),
            scale,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TransformRepr {
    rotation: [f64; 9],
    translation: [f64; 3],
    scale: f64,
}

impl Serialize for SimilarityTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TransformRepr {
            rotation: self.rotation_row_major(),
            translation: [self.translation.x, self.translation.y, self.translation.z],
            scale: self.scale,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SimilarityTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = TransformRepr::deserialize(d)?;
        Ok(Self::from_parts(r.rotation, r.translation, r.scale))
    }
}

/// Solved transform plus the value of the sum-of-squares objective it attains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Registration {
    pub transform: SimilarityTransform,
    pub residual: f64,
}

/// `Σ ‖s·R·a + t − v‖²` over the four correspondences.
pub fn alignment_energy(t: &SimilarityTransform, source: &AnchorSet, target: &AnchorSet) -> f64 {
    source
        .points
        .iter()
        .zip(&target.points)
        .map(|(a, v)| (t.apply(a) - v).norm_squared())
        .sum()
}

/// Least-squares similarity transform taking `glasses_anchors` onto
/// `face_targets`.
pub fn solve_similarity(glasses_anchors: &AnchorSet, face_targets: &AnchorSet) -> Result<Registration> {
    let rank = glasses_anchors.spread_rank();
    if rank < 2 {
        return Err(Error::DegenerateAnchors { rank });
    }

    let n = glasses_anchors.points.len() as f64;
    let mu_src = glasses_anchors.centroid();
    let mu_dst = face_targets.centroid();

    let mut cov = Matrix3::zeros();
    let mut var_src = 0.0;
    for (a, v) in glasses_anchors.points.iter().zip(&face_targets.points) {
        let da = a - mu_src;
        let dv = v - mu_dst;
        cov += dv * da.transpose();
        var_src += da.norm_squared();
    }
    cov /= n;
    var_src /= n;

    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd u requested");
    let v_t = svd.v_t.expect("svd v_t requested");
    let sv = svd.singular_values;

    // The sign correction goes on the weakest direction.
    let weakest = sv.imin();
    let mut signs = Vector3::from_element(1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        signs[weakest] = -1.0;
    }

    let rotation = u * Matrix3::from_diagonal(&signs) * v_t;
    let scale = sv.component_mul(&signs).sum() / var_src;
    let translation = mu_dst - scale * (rotation * mu_src);

    let transform = SimilarityTransform {
        rotation,
        translation,
        scale,
    };
    let residual = alignment_energy(&transform, glasses_anchors, face_targets);
    Ok(Registration { transform, residual })
}

pub fn apply_transform(t: &SimilarityTransform, points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    points.iter().map(|p| t.apply(p)).collect()
}

/// Which nose-pad pair the glasses rest on, and the frame tint perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WearingStyle {
    pub floating_pair_index: usize,
    pub color_jitter: [f64; 3],
}

/// Largest per-channel frame colour perturbation.
pub const COLOR_JITTER: f64 = 0.15;

pub fn sample_wearing_style(face: &FaceProxy, rng_seed: u64) -> Result<WearingStyle> {
    let n = face.nose_pad_candidates.len();
    if n == 0 {
        return Err(Error::EmptyCandidates);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ 0x5EA7_1D6E_0000_0001);
    let floating_pair_index = rng.random_range(0..n);
    let color_jitter = std::array::from_fn(|_| rng.random_range(-COLOR_JITTER..=COLOR_JITTER));
    Ok(WearingStyle {
        floating_pair_index,
        color_jitter,
    })
}

/// Rotation about `axis` (normalized internally) by `angle` radians.
pub fn axis_angle(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner()
}

/// Uniformly distributed rotation.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    // Shoemake's method on unit quaternions.
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let tau = std::f64::consts::TAU;
    let q = nalgebra::Quaternion::new(
        u1.sqrt() * (tau * u3).cos(),
        (1.0 - u1).sqrt() * (tau * u2).sin(),
        (1.0 - u1).sqrt() * (tau * u2).cos(),
        u1.sqrt() * (tau * u3).sin(),
    );
    nalgebra::UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}

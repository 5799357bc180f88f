//! Frame mask rasterization and projected cast shadows.

use nalgebra::Vector3;

use super::glasses::GlassesModel;
use super::scene::{Camera, HeadGeometry, SurfaceMap};
use crate::error::{Error, Result};
use crate::imageops::{gaussian_blur, Mask};

/// Attenuation above which a pixel belongs to the binary shadow mask.
pub const SHADOW_MASK_THRESHOLD: f64 = 0.05;

fn ensure_in_front(glasses: &GlassesModel, camera: &Camera) -> Result<()> {
    let any_front = glasses
        .strokes
        .iter()
        .flat_map(|s| s.points.iter())
        .any(|p| camera.project(p).is_some());
    if any_front {
        Ok(())
    } else {
        Err(Error::FrameBehindCamera)
    }
}

/// Binary frame mask: pixel centres within half a projected stroke width of
/// a visible (not behind the face surface) part of the frame.
pub fn rasterize_frame(glasses_world: &GlassesModel, head: &HeadGeometry, camera: &Camera, size: usize) -> Result<Mask> {
    let surface = SurfaceMap::compute(head, camera, size);
    rasterize_frame_on(glasses_world, &surface, camera)
}

pub fn rasterize_frame_on(glasses_world: &GlassesModel, surface: &SurfaceMap, camera: &Camera) -> Result<Mask> {
    ensure_in_front(glasses_world, camera)?;
    let size = surface.size;
    let mut mask = Mask::zeros((size, size));
    for stroke in &glasses_world.strokes {
        for (p0, p1) in stroke.segments() {
            let (Some((u0, v0, d0)), Some((u1, v1, d1))) = (camera.project(&p0), camera.project(&p1)) else {
                continue;
            };
            let hw0 = 0.5 * camera.focal_px * stroke.width / d0;
            let hw1 = 0.5 * camera.focal_px * stroke.width / d1;
            let reach = hw0.max(hw1);
            let x_lo = (u0.min(u1) - reach - 1.0).floor().max(0.0) as usize;
            let y_lo = (v0.min(v1) - reach - 1.0).floor().max(0.0) as usize;
            let x_hi = ((u0.max(u1) + reach + 1.0).ceil().max(0.0) as usize).min(size);
            let y_hi = ((v0.max(v1) + reach + 1.0).ceil().max(0.0) as usize).min(size);
            let (du, dv) = (u1 - u0, v1 - v0);
            let len2 = du * du + dv * dv;
            for y in y_lo..y_hi {
                for x in x_lo..x_hi {
                    if mask[[y, x]] == 1.0 {
                        continue;
                    }
                    let (pu, pv) = (x as f64 + 0.5, y as f64 + 0.5);
                    let t = if len2 > 0.0 {
                        (((pu - u0) * du + (pv - v0) * dv) / len2).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                    let (qu, qv) = (u0 + t * du, v0 + t * dv);
                    let dist2 = (pu - qu).powi(2) + (pv - qv).powi(2);
                    let hw = hw0 + t * (hw1 - hw0);
                    if dist2 > hw * hw {
                        continue;
                    }
                    // perspective-correct depth along the segment
                    let depth = 1.0 / ((1.0 - t) / d0 + t / d1);
                    if depth < surface.depth[[y, x]] {
                        mask[[y, x]] = 1.0;
                    }
                }
            }
        }
    }
    Ok(mask)
}

/// Hard shadow footprint before blurring: frame sample points cast along the
/// light onto the face, projected and splatted with the projected stroke width.
pub fn shadow_occupancy(
    glasses_world: &GlassesModel,
    light_direction: &Vector3<f64>,
    head: &HeadGeometry,
    surface: &SurfaceMap,
    camera: &Camera,
) -> Result<Mask> {
    ensure_in_front(glasses_world, camera)?;
    let size = surface.size;
    let mut occ = Mask::zeros((size, size));
    let toward_shadow = -light_direction.normalize();
    let cam = camera.center();

    for stroke in &glasses_world.strokes {
        for (p0, p1) in stroke.segments() {
            let proj_len = match (camera.project(&p0), camera.project(&p1)) {
                (Some((u0, v0, _)), Some((u1, v1, _))) => ((u1 - u0).powi(2) + (v1 - v0).powi(2)).sqrt(),
                _ => continue,
            };
            let n = (proj_len * 3.0).ceil() as usize + 2;
            for i in 0..n {
                let t = i as f64 / (n - 1) as f64;
                let p = p0 + t * (p1 - p0);
                if head.level(&p) <= 0.0 {
                    continue;
                }
                let Some(s) = head.intersect(&p, &toward_shadow) else {
                    continue;
                };
                let hit = p + s * toward_shadow;
                if head.normal_world(&hit).dot(&(cam - hit)) <= 0.0 {
                    continue;
                }
                let Some((u, v, d)) = camera.project(&hit) else {
                    continue;
                };
                splat(&mut occ, u, v, 0.5 * camera.focal_px * stroke.width / d);
            }
        }
    }
    Ok(occ)
}

fn splat(m: &mut Mask, u: f64, v: f64, r: f64) {
    let (h, w) = m.dim();
    let x_lo = (u - r - 1.0).floor().max(0.0) as usize;
    let y_lo = (v - r - 1.0).floor().max(0.0) as usize;
    let x_hi = ((u + r + 1.0).ceil().max(0.0) as usize).min(w);
    let y_hi = ((v + r + 1.0).ceil().max(0.0) as usize).min(h);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let (pu, pv) = (x as f64 + 0.5, y as f64 + 0.5);
            if (pu - u).powi(2) + (pv - v).powi(2) <= r * r {
                m[[y, x]] = 1.0;
            }
        }
    }
}

/// Soft cast-shadow attenuation in [0, 1]; only face pixels are attenuated.
#[allow(clippy::too_many_arguments)]
pub fn compute_shadow_map(
    glasses_world: &GlassesModel,
    light_direction: &Vector3<f64>,
    head: &HeadGeometry,
    camera: &Camera,
    size: usize,
    intensity: f64,
    blur_sigma: f64,
) -> Result<Mask> {
    let surface = SurfaceMap::compute(head, camera, size);
    compute_shadow_map_on(glasses_world, light_direction, head, &surface, camera, intensity, blur_sigma)
}

pub fn compute_shadow_map_on(
    glasses_world: &GlassesModel,
    light_direction: &Vector3<f64>,
    head: &HeadGeometry,
    surface: &SurfaceMap,
    camera: &Camera,
    intensity: f64,
    blur_sigma: f64,
) -> Result<Mask> {
    if intensity <= 0.0 {
        ensure_in_front(glasses_world, camera)?;
        return Ok(Mask::zeros((surface.size, surface.size)));
    }
    let occ = shadow_occupancy(glasses_world, light_direction, head, surface, camera)?;
    let mut att = gaussian_blur(&occ, blur_sigma);
    for ((y, x), a) in att.indexed_iter_mut() {
        *a = if surface.is_face(y, x) {
            (*a * intensity).clamp(0.0, 1.0)
        } else {
            0.0
        };
    }
    Ok(att)
}

pub fn shadow_mask(attenuation: &Mask) -> Mask {
    attenuation.mapv(|a| if a > SHADOW_MASK_THRESHOLD { 1.0 } else { 0.0 })
}

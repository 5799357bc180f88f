//! A second image domain for the adversarial feature alignment: rendered
//! portraits pushed through a different tone curve, tint, vignette, block
//! artifacts and coarse sensor noise.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::imageops::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StylizeConfig {
    /// Global multiplier on every effect; 0 is the identity.
    pub strength: f64,
    /// Added to red, subtracted from blue.
    pub color_shift: f64,
    pub gamma: f64,
    pub noise_std: f64,
    /// Noise is constant over `noise_block`² pixel cells.
    pub noise_block: usize,
    pub vignette: f64,
    pub block_size: usize,
    pub block_blend: f64,
}

impl Default for StylizeConfig {
    fn default() -> Self {
        Self {
            strength: 1.0,
            color_shift: 0.06,
            gamma: 1.25,
            noise_std: 0.035,
            noise_block: 2,
            vignette: 0.35,
            block_size: 8,
            block_blend: 0.35,
        }
    }
}

impl StylizeConfig {
    pub fn identity() -> Self {
        Self {
            strength: 0.0,
            ..Self::default()
        }
    }
}

pub fn stylize_real_domain(image: &Image, rng_seed: u64, cfg: &StylizeConfig) -> Image {
    let k = cfg.strength;
    let (_, h, w) = image.dim();
    let gamma = cfg.gamma.powf(k);
    let shift = cfg.color_shift * k;
    let vignette = cfg.vignette * k;
    let blend = cfg.block_blend * k;
    let noise_std = cfg.noise_std * k;

    let mut out = image.mapv(|v| v.max(0.0).powf(gamma));
    for y in 0..h {
        for x in 0..w {
            out[[0, y, x]] += shift;
            out[[2, y, x]] -= shift;
            let dy = (y as f64 + 0.5) / h as f64 - 0.5;
            let dx = (x as f64 + 0.5) / w as f64 - 0.5;
            let keep = 1.0 - vignette * 2.0 * (dx * dx + dy * dy);
            for c in 0..3 {
                out[[c, y, x]] *= keep;
            }
        }
    }

    // compression-like blocking: blend each pixel toward its block mean
    let b = cfg.block_size.max(1);
    let mut blocked = out.clone();
    for c in 0..3 {
        for by in (0..h).step_by(b) {
            for bx in (0..w).step_by(b) {
                let (ye, xe) = ((by + b).min(h), (bx + b).min(w));
                let mut sum = 0.0;
                for y in by..ye {
                    for x in bx..xe {
                        sum += out[[c, y, x]];
                    }
                }
                let mean = sum / ((ye - by) * (xe - bx)) as f64;
                for y in by..ye {
                    for x in bx..xe {
                        blocked[[c, y, x]] = (1.0 - blend) * out[[c, y, x]] + blend * mean;
                    }
                }
            }
        }
    }
    let mut out = blocked;

    let nb = cfg.noise_block.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ 0x2EA1_0000_0000_0000);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let cells = Array2::from_shape_fn((h.div_ceil(nb), w.div_ceil(nb)), |_| normal.sample(&mut rng));
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let v = out[[c, y, x]] + noise_std * cells[[y / nb, x / nb]];
                out[[c, y, x]] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

//! Item removal: a De-Shadow net removes the cast shadow, the mask operation
//! blanks the predicted frame pixels, and a De-Glass net fills them in.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask_stage::{MaskModel, MaskPair};
use crate::nn::{
    build_transform_net, concat_channels, split_channels, Adam, Layer, LayerExt, NetConfig, Network, ParameterStore, Real, Tensor,
};

/// Mask values at or above this count as frame pixels.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Order and inputs of the two removal steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalWiring {
    /// De-Shadow on image + both masks, mask operation, De-Glass on the
    /// blanked image + glass mask.
    ShadowThenGlass,
    /// As above, but De-Shadow does not see the shadow mask.
    NoShadowMask,
    /// De-Shadow sees only the shadow mask; no glass mask anywhere, so no
    /// mask operation either.
    NoGlassMask,
    /// One net from image + both masks straight to the final image.
    SingleStep,
    /// Glasses first (target: shadowed face without glasses), then shadow.
    GlassThenShadow,
    /// De-Glass reads the shadow-free image without blanking.
    NoMaskOp,
}

/// Which ground-truth image the first step is trained against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepTarget {
    /// Glasses present, shadow removed.
    ShadowFree,
    /// Shadow present, glasses removed.
    GlassFree,
    Final,
}

impl RemovalWiring {
    pub fn first_target(self) -> StepTarget {
        match self {
            RemovalWiring::GlassThenShadow => StepTarget::GlassFree,
            RemovalWiring::SingleStep => StepTarget::Final,
            _ => StepTarget::ShadowFree,
        }
    }

    fn first_inputs(self) -> usize {
        match self {
            RemovalWiring::NoShadowMask | RemovalWiring::NoGlassMask | RemovalWiring::GlassThenShadow => 4,
            _ => 5,
        }
    }

    fn second_inputs(self) -> Option<usize> {
        match self {
            RemovalWiring::SingleStep => None,
            RemovalWiring::NoGlassMask => Some(3),
            RemovalWiring::GlassThenShadow => Some(5),
            _ => Some(4),
        }
    }

    /// Whether the image entering the second step is blanked by the mask
    /// operation.
    fn blanks_second_input(self) -> bool {
        matches!(self, RemovalWiring::ShadowThenGlass | RemovalWiring::NoShadowMask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemovalStageConfig {
    pub base_channels: usize,
    pub n_residual_blocks: usize,
    pub wiring: RemovalWiring,
}

impl Default for RemovalStageConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            n_residual_blocks: 4,
            wiring: RemovalWiring::ShadowThenGlass,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemovalWeights {
    pub de_s: f64,
    pub de_g: f64,
}

impl Default for RemovalWeights {
    fn default() -> Self {
        Self { de_s: 1.0, de_g: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RemovalLossComponents {
    /// L1 of the first step against its target (zero for the single-step wiring).
    pub first: f64,
    /// L1 of the final output against the glasses- and shadow-free image.
    pub last: f64,
}

impl RemovalLossComponents {
    pub fn total(&self, w: &RemovalWeights) -> f64 {
        w.de_s * self.first + w.de_g * self.last
    }
}

/// Intermediate and final images of one removal pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RemovalBundle<T: Real = f32> {
    /// Output of the first step (Î_g by default); absent for a single step.
    pub intermediate: Option<Tensor<T>>,
    /// Image part of the second step's input (Î_mg by default).
    pub masked: Option<Tensor<T>>,
    pub final_image: Tensor<T>,
}

pub fn binarize<T: Real>(m: &Tensor<T>) -> Tensor<T> {
    m.mapv(|v| if v.f64() >= MASK_THRESHOLD { T::one() } else { T::zero() })
}

/// Zeroes every channel where the binarized glass mask is 1.
pub fn mask_operation<T: Real>(image: &Tensor<T>, m_g: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, _, h, w) = image.dim();
    if m_g.dim() != (n, 1, h, w) {
        return Err(Error::Shape(format!(
            "mask operation: image {:?} vs mask {:?}",
            image.dim(),
            m_g.dim()
        )));
    }
    let mut out = image.as_standard_layout().into_owned();
    for ((i, _, y, x), v) in out.indexed_iter_mut() {
        if m_g[[i, 0, y, x]].f64() >= MASK_THRESHOLD {
            *v = T::zero();
        }
    }
    Ok(out)
}

fn mask_operation_backward<T: Real>(d_out: &Tensor<T>, m_g: &Tensor<T>) -> Tensor<T> {
    // identical zeroing: no gradient reaches blanked pixels
    mask_operation(d_out, m_g).expect("shapes checked in forward")
}

/// Pixel-mean L1.
pub fn l1_loss<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("l1: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x.f64() - y.f64()).abs()).sum::<f64>() / a.len() as f64)
}

/// Subgradient of [`l1_loss`] w.r.t. `a` (zero at ties).
pub fn l1_grad<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let n = T::of(a.len() as f64);
    let mut g = a.clone();
    Zip::from(&mut g).and(a).and(b).for_each(|g, x, y| {
        let d = *x - *y;
        *g = if d > T::zero() {
            T::one() / n
        } else if d < T::zero() {
            -T::one() / n
        } else {
            T::zero()
        };
    });
    g
}

/// `λ_de-s ‖Î_g − I_g‖₁ + λ_de-g ‖Î_f − I_f‖₁`, pixel means.
pub fn removal_losses<T: Real>(
    i_g_hat: &Tensor<T>,
    i_g: &Tensor<T>,
    i_f_hat: &Tensor<T>,
    i_f: &Tensor<T>,
    lambda_de_s: f64,
    lambda_de_g: f64,
) -> Result<f64> {
    Ok(lambda_de_s * l1_loss(i_g_hat, i_g)? + lambda_de_g * l1_loss(i_f_hat, i_f)?)
}

fn check_inputs<T: Real>(image: &Tensor<T>, masks: &MaskPair<T>) -> Result<()> {
    let (n, c, h, w) = image.dim();
    if c != 3 || h % 4 != 0 || w % 4 != 0 || h == 0 {
        return Err(Error::Shape(format!(
            "removal expects N×3×H×W with sides divisible by 4, got {:?}",
            image.dim()
        )));
    }
    if masks.m_g.dim() != (n, 1, h, w) || masks.m_s.dim() != (n, 1, h, w) {
        return Err(Error::Shape(format!(
            "masks {:?}/{:?} do not match image {:?}",
            masks.m_g.dim(),
            masks.m_s.dim(),
            image.dim()
        )));
    }
    Ok(())
}

/// Each step predicts a correction to its RGB input: the net's `[0, 1]`
/// output `y` maps to `clamp(rgb + 2y − 1)`.
pub fn apply_residual<T: Real>(rgb: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    let mut out = rgb.clone();
    Zip::from(&mut out).and(y).for_each(|o, &y| {
        let v = *o + y + y - T::one();
        *o = num_traits::clamp(v, T::zero(), T::one());
    });
    out
}

/// Gradients of [`apply_residual`] w.r.t. `rgb` and `y`; zero where the
/// output is clamped.
fn residual_backward<T: Real>(rgb: &Tensor<T>, y: &Tensor<T>, d_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let mut d_rgb = d_out.clone();
    Zip::from(&mut d_rgb).and(rgb).and(y).for_each(|d, &r, &y| {
        let v = r + y + y - T::one();
        if v < T::zero() || v > T::one() {
            *d = T::zero();
        }
    });
    let d_y = d_rgb.mapv(|v| v + v);
    (d_rgb, d_y)
}

/// De-Shadow forward: image plus both masks.
pub fn de_shadow<T: Real>(net: &Network<T>, image: &Tensor<T>, m_g: &Tensor<T>, m_s: &Tensor<T>) -> Result<Tensor<T>> {
    let x = concat_channels(&[image, m_g, m_s]);
    net.check_input(&x)?;
    Ok(apply_residual(image, &net.forward(&x)))
}

/// De-Glass forward: blanked image plus the glass mask.
pub fn de_glass<T: Real>(net: &Network<T>, masked: &Tensor<T>, m_g: &Tensor<T>) -> Result<Tensor<T>> {
    let x = concat_channels(&[masked, m_g]);
    net.check_input(&x)?;
    Ok(apply_residual(masked, &net.forward(&x)))
}

/// Training batch: image, predicted masks and the ground-truth images the
/// steps are compared with.
pub struct RemovalBatch<T: Real = f32> {
    pub image: Tensor<T>,
    pub masks: MaskPair<T>,
    /// Target of the first step (see [`RemovalWiring::first_target`]).
    pub first_target: Tensor<T>,
    pub final_target: Tensor<T>,
}

pub struct RemovalModel<T: Real = f32> {
    pub cfg: RemovalStageConfig,
    /// De-Shadow by default (De-Glass for the glass-first wiring).
    pub first: Network<T>,
    pub second: Option<Network<T>>,
}

impl<T: Real> RemovalModel<T> {
    pub fn new(cfg: RemovalStageConfig, seed: u64) -> Result<Self> {
        let net = |inputs, k: u64| {
            let mut n = build_transform_net::<T>(
                NetConfig::new(cfg.base_channels, cfg.n_residual_blocks, inputs, 3),
                seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(k),
            )?;
            // zero head: every step starts as the identity on its RGB input
            n.visit_mut("", &mut |name, p| {
                if name.starts_with("head.") {
                    p.value.fill(T::zero());
                }
            });
            Ok::<_, Error>(n)
        };
        let first = net(cfg.wiring.first_inputs(), 1)?;
        let second = cfg.wiring.second_inputs().map(|c| net(c, 2)).transpose()?;
        Ok(Self { cfg, first, second })
    }

    pub fn store(&self) -> ParameterStore {
        let mut s = ParameterStore::default();
        s.merge_prefixed("first", &self.first.store());
        if let Some(n) = &self.second {
            s.merge_prefixed("second", &n.store());
        }
        s
    }

    pub fn load_store(&mut self, s: &ParameterStore) -> Result<()> {
        self.first.load_store(&s.sub("first"))?;
        if let Some(n) = &mut self.second {
            n.load_store(&s.sub("second"))?;
        }
        Ok(())
    }

    /// RGB part of the first step's input and the full input tensor.
    fn first_input(&self, image: &Tensor<T>, m: &MaskPair<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        Ok(match self.cfg.wiring {
            RemovalWiring::ShadowThenGlass | RemovalWiring::SingleStep | RemovalWiring::NoMaskOp => {
                (image.clone(), concat_channels(&[image, &m.m_g, &m.m_s]))
            }
            RemovalWiring::NoShadowMask => (image.clone(), concat_channels(&[image, &m.m_g])),
            RemovalWiring::NoGlassMask => (image.clone(), concat_channels(&[image, &m.m_s])),
            RemovalWiring::GlassThenShadow => {
                let blanked = mask_operation(image, &m.m_g)?;
                let x = concat_channels(&[&blanked, &m.m_g]);
                (blanked, x)
            }
        })
    }

    /// Image part of the second step's input and the full input tensor.
    fn second_input(&self, mid: &Tensor<T>, m: &MaskPair<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let w = self.cfg.wiring;
        let img = if w.blanks_second_input() {
            mask_operation(mid, &m.m_g)?
        } else {
            mid.clone()
        };
        let x = match w {
            RemovalWiring::NoGlassMask => img.clone(),
            RemovalWiring::GlassThenShadow => concat_channels(&[&img, &m.m_g, &m.m_s]),
            _ => concat_channels(&[&img, &m.m_g]),
        };
        Ok((img, x))
    }

    pub fn forward(&self, image: &Tensor<T>, masks: &MaskPair<T>) -> Result<RemovalBundle<T>> {
        check_inputs(image, masks)?;
        let (rgb1, x1) = self.first_input(image, masks)?;
        let out1 = apply_residual(&rgb1, &self.first.forward(&x1));
        let Some(second) = &self.second else {
            return Ok(RemovalBundle {
                intermediate: None,
                masked: None,
                final_image: out1,
            });
        };
        let (img, x) = self.second_input(&out1, masks)?;
        Ok(RemovalBundle {
            final_image: apply_residual(&img, &second.forward(&x)),
            intermediate: Some(out1),
            masked: Some(img),
        })
    }

    /// Forward and backward of the weighted removal loss; gradients are
    /// left in the nets. The final-image loss also reaches the first step
    /// through the mask operation.
    pub fn accumulate_grads(&mut self, b: &RemovalBatch<T>, w: &RemovalWeights) -> Result<RemovalLossComponents> {
        check_inputs(&b.image, &b.masks)?;
        let (rgb1, x1) = self.first_input(&b.image, &b.masks)?;
        self.first.zero_grad();
        let y1 = self.first.forward_train(&x1);
        let out1 = apply_residual(&rgb1, &y1);
        let second_in = match self.second {
            Some(_) => Some(self.second_input(&out1, &b.masks)?),
            None => None,
        };
        let blanks = self.cfg.wiring.blanks_second_input();
        let mut comp = RemovalLossComponents::default();
        let d_out1 = match (&mut self.second, second_in) {
            (Some(second), Some((img, x))) => {
                second.zero_grad();
                let y2 = second.forward_train(&x);
                let out2 = apply_residual(&img, &y2);
                comp.first = l1_loss(&out1, &b.first_target)?;
                comp.last = l1_loss(&out2, &b.final_target)?;
                let d_out2 = l1_grad(&out2, &b.final_target).mapv(|v| v * T::of(w.de_g));
                let (d_skip, d_y2) = residual_backward(&img, &y2, &d_out2);
                let d_x = second.backward(&d_y2);
                let width = x.dim().1;
                let mut d_img = split_channels(&d_x, &[3, width - 3]).swap_remove(0) + d_skip;
                if blanks {
                    d_img = mask_operation_backward(&d_img, &b.masks.m_g);
                }
                l1_grad(&out1, &b.first_target).mapv(|v| v * T::of(w.de_s)) + d_img
            }
            _ => {
                comp.last = l1_loss(&out1, &b.final_target)?;
                l1_grad(&out1, &b.final_target).mapv(|v| v * T::of(w.de_g))
            }
        };
        let (_, d_y1) = residual_backward(&rgb1, &y1, &d_out1);
        self.first.backward(&d_y1);
        Ok(comp)
    }

    /// Loss terms of a batch without touching gradients.
    pub fn loss(&self, b: &RemovalBatch<T>) -> Result<RemovalLossComponents> {
        let out = self.forward(&b.image, &b.masks)?;
        Ok(match out.intermediate {
            Some(mid) => RemovalLossComponents {
                first: l1_loss(&mid, &b.first_target)?,
                last: l1_loss(&out.final_image, &b.final_target)?,
            },
            None => RemovalLossComponents {
                first: 0.0,
                last: l1_loss(&out.final_image, &b.final_target)?,
            },
        })
    }

    /// One joint update of both steps.
    pub fn train_step(&mut self, b: &RemovalBatch<T>, opt: &mut Adam<T>, w: &RemovalWeights) -> Result<RemovalLossComponents> {
        let comp = self.accumulate_grads(b, w)?;
        let mut nets: Vec<(&str, &mut dyn Layer<T>)> = vec![("first", &mut self.first)];
        if let Some(s) = &mut self.second {
            nets.push(("second", s));
        }
        opt.step(&mut nets);
        Ok(comp)
    }
}

/// Everything one inference pass produces.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput<T: Real = f32> {
    pub final_image: Tensor<T>,
    pub masks: MaskPair<T>,
    pub intermediate: Option<Tensor<T>>,
}

/// Masks, then removal, on a batch of images in `[0, 1]`.
pub fn remove_pipeline<T: Real>(mask_model: &MaskModel<T>, removal: &RemovalModel<T>, image: &Tensor<T>) -> Result<PipelineOutput<T>> {
    if image.iter().any(|v| !(v.f64() >= 0.0 && v.f64() <= 1.0)) {
        return Err(Error::Shape("input image values must lie in [0, 1]".into()));
    }
    let masks = mask_model.predict(image)?;
    let bundle = removal.forward(image, &masks)?;
    Ok(PipelineOutput {
        final_image: bundle.final_image,
        masks,
        intermediate: bundle.intermediate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask_stage::{MaskStageConfig, MaskWiring};
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(shape: (usize, usize, usize, usize), seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    fn small(wiring: RemovalWiring) -> RemovalStageConfig {
        RemovalStageConfig {
            base_channels: 4,
            n_residual_blocks: 1,
            wiring,
        }
    }

    #[test]
    fn mask_operation_extremes_and_checkerboard() {
        let img = uniform((2, 3, 8, 8), 1);
        assert_eq!(mask_operation(&img, &Array4::zeros((2, 1, 8, 8))).unwrap(), img);
        assert!(mask_operation(&img, &Array4::ones((2, 1, 8, 8))).unwrap().iter().all(|v| *v == 0.0));
        let board = Array4::from_shape_fn((2, 1, 8, 8), |(_, _, y, x)| ((y + x) % 2) as f64);
        let out = mask_operation(&img, &board).unwrap();
        for i in 0..2 {
            for c in 0..3 {
                for y in 0..8 {
                    for x in 0..8 {
                        let want = if (y + x) % 2 == 1 { 0.0 } else { img[[i, c, y, x]] };
                        assert_eq!(out[[i, c, y, x]].to_bits(), want.to_bits());
                    }
                }
            }
        }
        assert!(mask_operation(&img, &Array4::zeros((2, 1, 4, 8))).is_err());
    }

    #[test]
    fn mask_operation_is_idempotent_and_thresholds_at_half() {
        for seed in 0..20 {
            let img = uniform((1, 3, 8, 8), seed);
            let m = uniform((1, 1, 8, 8), 100 + seed);
            let once = mask_operation(&img, &m).unwrap();
            assert_eq!(mask_operation(&once, &m).unwrap(), once);
        }
        let img = Array4::from_elem((1, 3, 1, 2), 0.7);
        let m = Array4::from_shape_vec((1, 1, 1, 2), vec![0.5, 0.4999]).unwrap();
        let out = mask_operation(&img, &m).unwrap();
        assert_eq!(out[[0, 0, 0, 0]], 0.0);
        assert_eq!(out[[0, 0, 0, 1]], 0.7);
    }

    #[test]
    fn l1_metric_sanity() {
        let a = uniform((1, 3, 4, 4), 2);
        let b = uniform((1, 3, 4, 4), 3);
        let c = uniform((1, 3, 4, 4), 4);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(l1_loss(&a, &b).unwrap(), l1_loss(&b, &a).unwrap());
        assert!(l1_loss(&a, &c).unwrap() <= l1_loss(&a, &b).unwrap() + l1_loss(&b, &c).unwrap() + 1e-15);
    }

    #[test]
    fn removal_loss_hand_values() {
        let a = uniform((2, 3, 4, 4), 5);
        assert_eq!(removal_losses(&a, &a, &a, &a, 1.0, 1.0).unwrap(), 0.0);
        let shifted = a.mapv(|v| v + 0.1);
        assert!((removal_losses(&shifted, &a, &shifted, &a, 1.0, 1.0).unwrap() - 0.2).abs() < 1e-12);
        let w = RemovalWeights::default();
        assert_eq!((w.de_s, w.de_g), (1.0, 1.0));
    }

    fn masks(n: usize, seed: u64) -> MaskPair<f64> {
        MaskPair {
            m_g: uniform((n, 1, 16, 16), seed),
            m_s: uniform((n, 1, 16, 16), seed + 1),
        }
    }

    #[test]
    fn forward_shapes_for_every_wiring() {
        use RemovalWiring::*;
        let img = uniform((2, 3, 16, 16), 6);
        for wiring in [ShadowThenGlass, NoShadowMask, NoGlassMask, SingleStep, GlassThenShadow, NoMaskOp] {
            let m = RemovalModel::<f64>::new(small(wiring), 0).unwrap();
            let out = m.forward(&img, &masks(2, 7)).unwrap();
            assert_eq!(out.final_image.dim(), (2, 3, 16, 16));
            assert!(out.final_image.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(out.intermediate.is_some(), wiring != SingleStep);
        }
        let m = RemovalModel::<f64>::new(small(ShadowThenGlass), 0).unwrap();
        assert!(m.forward(&img, &masks(1, 7)).is_err());
    }

    #[test]
    fn default_wiring_is_manual_composition() {
        let m = RemovalModel::<f64>::new(small(RemovalWiring::ShadowThenGlass), 1).unwrap();
        let img = uniform((1, 3, 16, 16), 8);
        let mk = masks(1, 9);
        let out = m.forward(&img, &mk).unwrap();
        let i_g = de_shadow(&m.first, &img, &mk.m_g, &mk.m_s).unwrap();
        let i_mg = mask_operation(&i_g, &mk.m_g).unwrap();
        let i_f = de_glass(m.second.as_ref().unwrap(), &i_mg, &mk.m_g).unwrap();
        assert_eq!(out.intermediate.unwrap(), i_g);
        assert_eq!(out.masked.unwrap(), i_mg);
        assert_eq!(out.final_image, i_f);
    }

    #[test]
    fn without_mask_operation_frame_pixels_reach_de_glass() {
        let m = RemovalModel::<f64>::new(small(RemovalWiring::NoMaskOp), 2).unwrap();
        let img = uniform((1, 3, 16, 16), 10);
        let mk = masks(1, 11);
        let out = m.forward(&img, &mk).unwrap();
        let masked = out.masked.unwrap();
        let inside_nonzero = masked
            .indexed_iter()
            .filter(|((i, _, y, x), _)| mk.m_g[[*i, 0, *y, *x]] >= 0.5)
            .any(|(_, v)| *v != 0.0);
        assert!(inside_nonzero);
        assert_eq!(RemovalWiring::GlassThenShadow.first_target(), StepTarget::GlassFree);
        assert_eq!(RemovalWiring::ShadowThenGlass.first_target(), StepTarget::ShadowFree);
    }

    #[test]
    fn train_step_reduces_loss_and_gradient_crosses_mask_operation() {
        use RemovalWiring::*;
        for wiring in [ShadowThenGlass, SingleStep, GlassThenShadow, NoGlassMask] {
            let mut m = RemovalModel::<f32>::new(small(wiring), 3).unwrap();
            let f32s = |t: Tensor<f64>| t.mapv(|v| v as f32);
            let b = RemovalBatch {
                image: f32s(uniform((2, 3, 16, 16), 12)),
                masks: MaskPair {
                    m_g: f32s(uniform((2, 1, 16, 16), 13)),
                    m_s: f32s(uniform((2, 1, 16, 16), 14)),
                },
                first_target: f32s(uniform((2, 3, 16, 16), 15)),
                final_target: f32s(uniform((2, 3, 16, 16), 16)),
            };
            let mut opt = Adam::new(crate::nn::AdamConfig {
                lr: 2e-3,
                ..Default::default()
            });
            let w = RemovalWeights::default();
            let first = m.train_step(&b, &mut opt, &w).unwrap();
            let mut last = first;
            for _ in 0..15 {
                last = m.train_step(&b, &mut opt, &w).unwrap();
            }
            assert!(last.total(&w) < first.total(&w), "{wiring:?}");
        }

        // with λ_de-s = 0 the first step still learns from the final loss
        let mut m = RemovalModel::<f32>::new(small(ShadowThenGlass), 4).unwrap();
        let before = m.first.store().hash();
        let b = RemovalBatch {
            image: uniform((1, 3, 16, 16), 17).mapv(|v| v as f32),
            masks: MaskPair {
                m_g: Array4::zeros((1, 1, 16, 16)),
                m_s: Array4::zeros((1, 1, 16, 16)),
            },
            first_target: Array4::zeros((1, 3, 16, 16)),
            final_target: uniform((1, 3, 16, 16), 18).mapv(|v| v as f32),
        };
        let mut opt = Adam::new(Default::default());
        m.train_step(&b, &mut opt, &RemovalWeights { de_s: 0.0, de_g: 1.0 }).unwrap();
        assert_ne!(m.first.store().hash(), before);
    }

    #[test]
    fn pipeline_batch_equals_single_calls() {
        let mask_cfg = MaskStageConfig {
            base_channels: 4,
            n_residual_blocks: 1,
            feature_channels: 8,
            da_blocks: 1,
            disc_channels: 4,
            wiring: MaskWiring::GlassGuidesShadow,
            use_da: true,
        };
        let mm = MaskModel::<f32>::new(mask_cfg, 0).unwrap();
        let rm = RemovalModel::<f32>::new(small(RemovalWiring::ShadowThenGlass), 0).unwrap();
        let img = uniform((3, 3, 16, 16), 19).mapv(|v| v as f32);
        let all = remove_pipeline(&mm, &rm, &img).unwrap();
        assert_eq!(all, remove_pipeline(&mm, &rm, &img).unwrap());
        for i in 0..3 {
            let one = remove_pipeline(&mm, &rm, &img.slice(ndarray::s![i..i + 1, .., .., ..]).to_owned()).unwrap();
            assert_eq!(one.final_image, all.final_image.slice(ndarray::s![i..i + 1, .., .., ..]));
            assert_eq!(one.masks.m_s, all.masks.m_s.slice(ndarray::s![i..i + 1, .., .., ..]));
        }
        assert!(remove_pipeline(&mm, &rm, &img.mapv(|v| v + 2.0)).is_err());
    }

    #[test]
    fn joint_gradient_matches_finite_differences() {
        use RemovalWiring::*;
        for (k, wiring) in [ShadowThenGlass, GlassThenShadow, SingleStep, NoGlassMask].into_iter().enumerate() {
            let mut m = RemovalModel::<f64>::new(small(wiring), 20 + k as u64).unwrap();
            // leave the zero-initialized heads so the nets are not constant
            for net in std::iter::once(&mut m.first).chain(m.second.as_mut()) {
                let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
                net.visit_mut("", &mut |n, p| {
                    if n.starts_with("head.") {
                        p.value.mapv_inplace(|_| rng.random_range(-0.05..0.05));
                    }
                });
            }
            let b = RemovalBatch {
                image: uniform((1, 3, 16, 16), 30).mapv(|v| 0.2 + 0.6 * v),
                masks: masks(1, 31),
                first_target: uniform((1, 3, 16, 16), 32),
                final_target: uniform((1, 3, 16, 16), 33),
            };
            let w = RemovalWeights { de_s: 0.7, de_g: 1.3 };
            m.accumulate_grads(&b, &w).unwrap();
            let mut picks = Vec::new();
            for (tag, net) in std::iter::once(("first", &m.first)).chain(m.second.as_ref().map(|n| ("second", n))) {
                net.visit("", &mut |n, p| {
                    if n.ends_with("weight") && !p.frozen {
                        picks.push((tag, n.to_string(), p.value.len() / 2, p.grad.as_slice().unwrap()[p.value.len() / 2]));
                    }
                });
            }
            let eps = 1e-6;
            let mut checked = 0;
            for (tag, name, idx, analytic) in picks {
                let eval = |m: &mut RemovalModel<f64>, d: f64| {
                    let net = if tag == "first" { &mut m.first } else { m.second.as_mut().unwrap() };
                    net.visit_mut("", &mut |n, p| {
                        if n == name {
                            p.value.as_slice_mut().unwrap()[idx] += d;
                        }
                    });
                    m.loss(&b).unwrap().total(&w)
                };
                let up = eval(&mut m, eps);
                let down = eval(&mut m, -2.0 * eps);
                eval(&mut m, eps);
                let numeric = (up - down) / (2.0 * eps);
                let scale = analytic.abs().max(numeric.abs()).max(1e-6);
                // pieces of the loss are piecewise linear; skip picks that straddle a kink
                let base = m.loss(&b).unwrap().total(&w);
                if ((up - base) - (base - down)).abs() > 1e-3 * (up - base).abs().max(1e-12) {
                    continue;
                }
                assert!(
                    (analytic - numeric).abs() / scale < 1e-3,
                    "{wiring:?} {tag}.{name}: {analytic:e} vs {numeric:e}"
                );
                checked += 1;
            }
            assert!(checked >= 5, "{wiring:?}: only {checked} checked");
        }
    }
}

//! Cross-domain segmentation: the domain-adaptation net maps an image to a
//! uniform feature map, the glass-mask net predicts the frame mask from it,
//! and the shadow-mask net predicts the shadow mask from the features plus
//! the glass prediction.

use ndarray::{s, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    avg_pool2, avg_pool2_backward, build_da_net, build_discriminator, build_mask_net, concat_channels, split_channels, Adam, Layer,
    LayerExt, NetConfig, Network, ParameterStore, Real, Tensor,
};

/// Clamp applied to predictions inside the cross entropy.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Synthetic,
    Real,
}

#[derive(Debug, Clone)]
pub struct UniformFeatureMap<T: Real = f32> {
    pub features: Tensor<T>,
    pub domain: Domain,
}

/// Predicted masks, `N × 1 × H × W`, values in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair<T: Real = f32> {
    pub m_g: Tensor<T>,
    pub m_s: Tensor<T>,
}

/// How the two mask predictions feed each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskWiring {
    /// Glass mask first; it guides the shadow net.
    GlassGuidesShadow,
    /// Shadow mask first; it guides the glass net.
    ShadowGuidesGlass,
    /// One net with a two-channel (glass, shadow) output.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskStageConfig {
    pub base_channels: usize,
    pub n_residual_blocks: usize,
    /// Width of the uniform feature map.
    pub feature_channels: usize,
    pub da_blocks: usize,
    pub disc_channels: usize,
    pub wiring: MaskWiring,
    /// Without adaptation the mask nets read raw images and no adversarial
    /// term is trained.
    pub use_da: bool,
}

impl Default for MaskStageConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            n_residual_blocks: 4,
            feature_channels: 32,
            da_blocks: 6,
            disc_channels: 32,
            wiring: MaskWiring::GlassGuidesShadow,
            use_da: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskLossWeights {
    pub adv: f64,
    pub mask: f64,
}

impl Default for MaskLossWeights {
    fn default() -> Self {
        Self { adv: 0.1, mask: 1.0 }
    }
}

/// Individual terms of the mask-stage objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskLossComponents {
    pub adv_d: f64,
    pub adv_g: f64,
    pub glass: f64,
    pub shadow: f64,
}

impl MaskLossComponents {
    pub fn total(&self, w: &MaskLossWeights) -> f64 {
        predict_loss(self, w.adv, w.mask)
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            adv_d: self.adv_d * k,
            adv_g: self.adv_g * k,
            glass: self.glass * k,
            shadow: self.shadow * k,
        }
    }

    pub fn add(&mut self, o: &Self) {
        self.adv_d += o.adv_d;
        self.adv_g += o.adv_g;
        self.glass += o.glass;
        self.shadow += o.shadow;
    }

    pub fn all_finite(&self) -> Option<&'static str> {
        [
            ("adv_d", self.adv_d),
            ("adv_g", self.adv_g),
            ("bce_glass", self.glass),
            ("bce_shadow", self.shadow),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// `λ_adv L_D + λ_adv L_G + λ_mask L_glass + λ_mask L_shadow`.
pub fn predict_loss(c: &MaskLossComponents, lambda_adv: f64, lambda_mask: f64) -> f64 {
    lambda_adv * c.adv_d + lambda_adv * c.adv_g + lambda_mask * c.glass + lambda_mask * c.shadow
}

fn mean_of<T: Real>(x: &Tensor<T>, f: impl Fn(f64) -> f64) -> f64 {
    x.iter().map(|v| f(v.f64())).sum::<f64>() / x.len() as f64
}

/// Discriminator objective on raw patch scores: `mean(D_syn²) + mean((D_real − 1)²)`.
pub fn lsgan_d_loss<T: Real>(scores_syn: &Tensor<T>, scores_real: &Tensor<T>) -> f64 {
    mean_of(scores_syn, |v| v * v) + mean_of(scores_real, |v| (v - 1.0) * (v - 1.0))
}

pub fn lsgan_d_grad<T: Real>(scores_syn: &Tensor<T>, scores_real: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (ns, nr) = (scores_syn.len() as f64, scores_real.len() as f64);
    (
        scores_syn.mapv(|v| T::of(2.0 * v.f64() / ns)),
        scores_real.mapv(|v| T::of(2.0 * (v.f64() - 1.0) / nr)),
    )
}

/// Generator objective: `mean((D_syn − 1)²)`.
pub fn lsgan_g_loss<T: Real>(scores_syn: &Tensor<T>) -> f64 {
    mean_of(scores_syn, |v| (v - 1.0) * (v - 1.0))
}

pub fn lsgan_g_grad<T: Real>(scores_syn: &Tensor<T>) -> Tensor<T> {
    let n = scores_syn.len() as f64;
    scores_syn.mapv(|v| T::of(2.0 * (v.f64() - 1.0) / n))
}

pub fn adv_loss_d<T: Real>(d: &Network<T>, f_syn: &UniformFeatureMap<T>, f_real: &UniformFeatureMap<T>) -> f64 {
    lsgan_d_loss(&d.forward(&f_syn.features), &d.forward(&f_real.features))
}

pub fn adv_loss_g<T: Real>(d: &Network<T>, f_syn: &UniformFeatureMap<T>) -> f64 {
    lsgan_g_loss(&d.forward(&f_syn.features))
}

fn check_same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Pixel-mean binary cross entropy with predictions clamped to `[ε, 1 − ε]`.
pub fn mask_loss<T: Real>(target: &Tensor<T>, pred: &Tensor<T>) -> Result<f64> {
    check_same_shape(target, pred, "mask loss")?;
    let sum: f64 = target
        .iter()
        .zip(pred.iter())
        .map(|(m, p)| {
            let p = p.f64().clamp(BCE_EPS, 1.0 - BCE_EPS);
            let m = m.f64();
            -(m * p.ln() + (1.0 - m) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / target.len() as f64)
}

/// Gradient of [`mask_loss`] w.r.t. the prediction (zero where clamped).
pub fn mask_loss_grad<T: Real>(target: &Tensor<T>, pred: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape(target, pred, "mask loss")?;
    let n = target.len() as f64;
    let mut g = pred.clone();
    ndarray::Zip::from(&mut g).and(target).and(pred).for_each(|g, m, p| {
        let p = p.f64();
        *g = if (BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
            let m = m.f64();
            T::of((-m / p + (1.0 - m) / (1.0 - p)) / n)
        } else {
            T::zero()
        };
    });
    Ok(g)
}

/// Synthetic training batch: images and both ground-truth masks.
pub struct SynBatch<T: Real = f32> {
    pub image: Tensor<T>,
    pub m_g: Tensor<T>,
    pub m_s: Tensor<T>,
}

pub struct MaskModel<T: Real = f32> {
    pub cfg: MaskStageConfig,
    pub da: Option<Network<T>>,
    /// Glass-mask net (or the joint net).
    pub gm: Network<T>,
    /// Shadow-mask net; absent for the joint wiring.
    pub sm: Option<Network<T>>,
    pub disc: Option<Network<T>>,
}

fn sub_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(k.wrapping_mul(0xD1B5_4A32_D192_ED03))
        ^ k
}

impl<T: Real> MaskModel<T> {
    pub fn new(cfg: MaskStageConfig, seed: u64) -> Result<Self> {
        let (feat_ch, from_features) = if cfg.use_da { (cfg.feature_channels, true) } else { (3, false) };
        let net = |inputs: usize, outputs: usize, k: u64| {
            build_mask_net::<T>(
                NetConfig::new(cfg.base_channels, cfg.n_residual_blocks, inputs, outputs),
                from_features,
                sub_seed(seed, k),
            )
        };
        let (gm, sm) = match cfg.wiring {
            MaskWiring::GlassGuidesShadow => (net(feat_ch, 1, 1)?, Some(net(feat_ch + 1, 1, 2)?)),
            MaskWiring::ShadowGuidesGlass => (net(feat_ch + 1, 1, 1)?, Some(net(feat_ch, 1, 2)?)),
            MaskWiring::Joint => (net(feat_ch, 2, 1)?, None),
        };
        let (da, disc) = if cfg.use_da {
            (
                Some(build_da_net(
                    NetConfig::new(cfg.base_channels, cfg.da_blocks, 3, cfg.feature_channels),
                    sub_seed(seed, 3),
                )?),
                Some(build_discriminator(
                    NetConfig::new(cfg.disc_channels, 1, cfg.feature_channels, 1),
                    sub_seed(seed, 4),
                )?),
            )
        } else {
            (None, None)
        };
        Ok(Self { cfg, da, gm, sm, disc })
    }

    /// The nets that make predictions (not the discriminator), with their
    /// parameter-name prefixes.
    pub fn predictor_nets(&self) -> Vec<(&'static str, &Network<T>)> {
        let mut v = Vec::new();
        if let Some(da) = &self.da {
            v.push(("da", da));
        }
        v.push(("gm", &self.gm));
        if let Some(sm) = &self.sm {
            v.push(("sm", sm));
        }
        v
    }

    pub fn store(&self) -> ParameterStore {
        let mut s = ParameterStore::default();
        for (p, n) in self.predictor_nets() {
            s.merge_prefixed(p, &n.store());
        }
        if let Some(d) = &self.disc {
            s.merge_prefixed("disc", &d.store());
        }
        s
    }

    pub fn load_store(&mut self, s: &ParameterStore) -> Result<()> {
        if let Some(da) = &mut self.da {
            da.load_store(&s.sub("da"))?;
        }
        self.gm.load_store(&s.sub("gm"))?;
        if let Some(sm) = &mut self.sm {
            sm.load_store(&s.sub("sm"))?;
        }
        if let Some(d) = &mut self.disc {
            d.load_store(&s.sub("disc"))?;
        }
        Ok(())
    }

    /// Hash of the prediction nets' parameters.
    pub fn predictor_hash(&self) -> String {
        let mut s = ParameterStore::default();
        for (p, n) in self.predictor_nets() {
            s.merge_prefixed(p, &n.store());
        }
        s.hash()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        if let Some(da) = &mut self.da {
            // the fixed front end stays frozen either way
            da.visit_mut("", &mut |n, p| p.frozen = frozen || n.starts_with("fixed"));
        }
        self.gm.set_frozen(frozen);
        if let Some(sm) = &mut self.sm {
            sm.set_frozen(frozen);
        }
        if let Some(d) = &mut self.disc {
            d.set_frozen(frozen);
        }
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = image.dim();
        if c != 3 || h % 8 != 0 || w % 8 != 0 || h == 0 {
            return Err(Error::Shape(format!(
                "mask stage expects N×3×H×W with H, W multiples of 8, got {:?}",
                image.dim()
            )));
        }
        Ok(())
    }

    /// Features the mask nets read: the uniform map with adaptation, the raw
    /// image without.
    pub fn features(&self, image: &Tensor<T>, domain: Domain) -> Result<UniformFeatureMap<T>> {
        self.check_image(image)?;
        let features = match &self.da {
            Some(da) => da.forward(image),
            None => image.clone(),
        };
        Ok(UniformFeatureMap { features, domain })
    }

    fn guide_input(&self, f: &Tensor<T>, guide: &Tensor<T>) -> Tensor<T> {
        let g = if self.cfg.use_da { avg_pool2(guide) } else { guide.clone() };
        concat_channels(&[f, &g])
    }

    pub fn predict_from_features(&self, f: &UniformFeatureMap<T>) -> MaskPair<T> {
        let x = &f.features;
        match self.cfg.wiring {
            MaskWiring::GlassGuidesShadow => {
                let m_g = self.gm.forward(x);
                let m_s = self.sm.as_ref().expect("shadow net").forward(&self.guide_input(x, &m_g));
                MaskPair { m_g, m_s }
            }
            MaskWiring::ShadowGuidesGlass => {
                let m_s = self.sm.as_ref().expect("shadow net").forward(x);
                let m_g = self.gm.forward(&self.guide_input(x, &m_s));
                MaskPair { m_g, m_s }
            }
            MaskWiring::Joint => {
                let y = self.gm.forward(x);
                let mut parts = split_channels(&y, &[1, 1]).into_iter();
                MaskPair {
                    m_g: parts.next().expect("glass channel"),
                    m_s: parts.next().expect("shadow channel"),
                }
            }
        }
    }

    pub fn predict(&self, image: &Tensor<T>) -> Result<MaskPair<T>> {
        Ok(self.predict_from_features(&self.features(image, Domain::Synthetic)?))
    }

    /// One discriminator update followed by one update of the prediction
    /// nets. `real` may be `None` only without adaptation.
    pub fn train_step(
        &mut self,
        batch: &SynBatch<T>,
        real: Option<&Tensor<T>>,
        opt_g: &mut Adam<T>,
        opt_d: Option<&mut Adam<T>>,
        w: &MaskLossWeights,
    ) -> Result<MaskLossComponents> {
        self.check_image(&batch.image)?;
        if let Some(r) = real {
            self.check_image(r)?;
        }
        let mut comp = MaskLossComponents::default();

        if let (Some(da), Some(disc)) = (&self.da, &mut self.disc) {
            let real = real.ok_or_else(|| Error::Config("adaptation needs a real-domain batch".into()))?;
            let opt_d = opt_d.ok_or_else(|| Error::Config("adaptation needs a discriminator optimizer".into()))?;
            let f_syn = da.forward(&batch.image);
            let f_real = da.forward(real);
            let n_syn = f_syn.dim().0;
            disc.zero_grad();
            let scores = disc.forward_train(&concat_batch(&f_syn, &f_real));
            let (s_syn, s_real) = split_batch(&scores, n_syn);
            comp.adv_d = lsgan_d_loss(&s_syn, &s_real);
            let (g_syn, g_real) = lsgan_d_grad(&s_syn, &s_real);
            let k = T::of(w.adv);
            disc.backward(&concat_batch(&g_syn.mapv(|v| v * k), &g_real.mapv(|v| v * k)));
            opt_d.step(&mut [("disc", disc)]);
        }

        self.gm.zero_grad();
        if let Some(sm) = &mut self.sm {
            sm.zero_grad();
        }
        let f = match &mut self.da {
            Some(da) => {
                da.zero_grad();
                da.forward_train(&batch.image)
            }
            None => batch.image.clone(),
        };
        let lm = T::of(w.mask);
        let pool = self.cfg.use_da;
        let f_width = f.dim().1;
        let hw = (batch.image.dim().2, batch.image.dim().3);
        let guide_fwd = |m: &Tensor<T>| if pool { avg_pool2(m) } else { m.clone() };
        let guide_bwd = |g: &Tensor<T>| if pool { avg_pool2_backward(g, hw) } else { g.clone() };

        let mut d_f = match self.cfg.wiring {
            MaskWiring::GlassGuidesShadow => {
                let sm = self.sm.as_mut().expect("shadow net");
                let m_g = self.gm.forward_train(&f);
                let m_s = sm.forward_train(&concat_channels(&[&f, &guide_fwd(&m_g)]));
                comp.glass = mask_loss(&batch.m_g, &m_g)?;
                comp.shadow = mask_loss(&batch.m_s, &m_s)?;
                let d_in = sm.backward(&mask_loss_grad(&batch.m_s, &m_s)?.mapv(|v| v * lm));
                let mut parts = split_channels(&d_in, &[f_width, 1]).into_iter();
                let d_f_sm = parts.next().expect("feature grad");
                let d_guide = parts.next().expect("guide grad");
                let d_mg = mask_loss_grad(&batch.m_g, &m_g)?.mapv(|v| v * lm) + guide_bwd(&d_guide);
                self.gm.backward(&d_mg) + d_f_sm
            }
            MaskWiring::ShadowGuidesGlass => {
                let sm = self.sm.as_mut().expect("shadow net");
                let m_s = sm.forward_train(&f);
                let m_g = self.gm.forward_train(&concat_channels(&[&f, &guide_fwd(&m_s)]));
                comp.glass = mask_loss(&batch.m_g, &m_g)?;
                comp.shadow = mask_loss(&batch.m_s, &m_s)?;
                let d_in = self.gm.backward(&mask_loss_grad(&batch.m_g, &m_g)?.mapv(|v| v * lm));
                let mut parts = split_channels(&d_in, &[f_width, 1]).into_iter();
                let d_f_gm = parts.next().expect("feature grad");
                let d_guide = parts.next().expect("guide grad");
                let d_ms = mask_loss_grad(&batch.m_s, &m_s)?.mapv(|v| v * lm) + guide_bwd(&d_guide);
                sm.backward(&d_ms) + d_f_gm
            }
            MaskWiring::Joint => {
                let y = self.gm.forward_train(&f);
                let mut parts = split_channels(&y, &[1, 1]).into_iter();
                let (m_g, m_s) = (parts.next().expect("glass"), parts.next().expect("shadow"));
                comp.glass = mask_loss(&batch.m_g, &m_g)?;
                comp.shadow = mask_loss(&batch.m_s, &m_s)?;
                let dg = mask_loss_grad(&batch.m_g, &m_g)?.mapv(|v| v * lm);
                let ds = mask_loss_grad(&batch.m_s, &m_s)?.mapv(|v| v * lm);
                self.gm.backward(&concat_channels(&[&dg, &ds]))
            }
        };

        if let (Some(da), Some(disc)) = (&mut self.da, &mut self.disc) {
            let scores = disc.forward_train(&f);
            comp.adv_g = lsgan_g_loss(&scores);
            let k = T::of(w.adv);
            d_f = d_f + disc.backward(&lsgan_g_grad(&scores).mapv(|v| v * k));
            // the discriminator is only updated in its own step
            disc.zero_grad();
            da.backward(&d_f);
        }

        let mut nets: Vec<(&str, &mut dyn Layer<T>)> = Vec::new();
        if let Some(da) = &mut self.da {
            nets.push(("da", da));
        }
        nets.push(("gm", &mut self.gm));
        if let Some(sm) = &mut self.sm {
            nets.push(("sm", sm));
        }
        opt_g.step(&mut nets);
        Ok(comp)
    }

    /// Mask-loss terms (no adversarial part) on a batch, without updating.
    pub fn eval_losses(&self, batch: &SynBatch<T>) -> Result<MaskLossComponents> {
        let p = self.predict(&batch.image)?;
        Ok(MaskLossComponents {
            glass: mask_loss(&batch.m_g, &p.m_g)?,
            shadow: mask_loss(&batch.m_s, &p.m_s)?,
            ..Default::default()
        })
    }
}

pub fn concat_batch<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    ndarray::concatenate(ndarray::Axis(0), &[a.view(), b.view()])
        .expect("batch concat: channel and spatial dims must agree")
        .as_standard_layout()
        .into_owned()
}

pub fn split_batch<T: Real>(x: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    (
        x.slice(s![..first, .., .., ..]).to_owned(),
        x.slice(s![first.., .., .., ..]).to_owned(),
    )
}

/// Channel-stacks single-channel masks `[N,1,H,W]` from a slice of 2-D maps.
pub fn stack_masks<T: Real>(masks: &[&ndarray::Array2<f64>]) -> Tensor<T> {
    let (h, w) = masks.first().map(|m| m.dim()).unwrap_or((0, 0));
    Array4::from_shape_fn((masks.len(), 1, h, w), |(i, _, y, x)| T::of(masks[i][[y, x]]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(shape: (usize, usize, usize, usize), lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.random_range(lo..hi))
    }

    fn binary(shape: (usize, usize, usize, usize), seed: u64) -> Tensor<f64> {
        uniform(shape, 0.0, 1.0, seed).mapv(|v| if v > 0.6 { 1.0 } else { 0.0 })
    }

    #[test]
    fn lsgan_fixed_points_and_hand_values() {
        let zeros = Array4::<f64>::zeros((2, 1, 4, 4));
        let ones = Array4::<f64>::ones((2, 1, 4, 4));
        assert_eq!(lsgan_d_loss(&zeros, &ones), 0.0);
        assert_eq!(lsgan_g_loss(&ones), 0.0);
        let syn = Array4::from_elem((1, 1, 3, 3), 0.3);
        let real = Array4::from_elem((1, 1, 3, 3), 0.8);
        assert!((lsgan_d_loss(&syn, &real) - 0.13).abs() < 1e-12);
        assert!((lsgan_g_loss(&syn) - 0.49).abs() < 1e-12);
        // a zero discriminator scores 0 everywhere: 0² + (0 − 1)² per patch
        assert_eq!(lsgan_d_loss(&zeros, &zeros), 1.0);
    }

    #[test]
    fn lsgan_gradients_match_finite_differences() {
        let s = uniform((1, 1, 3, 3), -1.0, 2.0, 1);
        let r = uniform((2, 1, 3, 3), -1.0, 2.0, 2);
        let (gs, gr) = lsgan_d_grad(&s, &r);
        let gg = lsgan_g_grad(&s);
        let e = 1e-6;
        for i in 0..9 {
            let idx = [0, 0, i / 3, i % 3];
            let (mut up, mut dn) = (s.clone(), s.clone());
            up[idx] += e;
            dn[idx] -= e;
            let fd = (lsgan_d_loss(&up, &r) - lsgan_d_loss(&dn, &r)) / (2.0 * e);
            assert!((fd - gs[idx]).abs() < 1e-8);
            let fd = (lsgan_g_loss(&up) - lsgan_g_loss(&dn)) / (2.0 * e);
            assert!((fd - gg[idx]).abs() < 1e-8);
            let idx = [1, 0, i / 3, i % 3];
            let (mut up, mut dn) = (r.clone(), r.clone());
            up[idx] += e;
            dn[idx] -= e;
            let fd = (lsgan_d_loss(&s, &up) - lsgan_d_loss(&s, &dn)) / (2.0 * e);
            assert!((fd - gr[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn bce_analytic_cases() {
        let m = binary((1, 1, 8, 8), 3);
        let perfect = m.mapv(|v| v.clamp(BCE_EPS, 1.0 - BCE_EPS));
        assert!(mask_loss(&m, &perfect).unwrap() <= -(1.0f64 - 1e-7).ln() + 1e-15);
        let half = Array4::from_elem((1, 1, 8, 8), 0.5);
        assert!((mask_loss(&m, &half).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(mask_loss(&m, &Array4::from_elem((1, 1, 4, 4), 0.5)).is_err());
    }

    #[test]
    fn bce_matches_scalar_loop() {
        let m = binary((1, 1, 8, 8), 4);
        let p = uniform((1, 1, 8, 8), 0.0, 1.0, 5);
        let mut sum = 0.0;
        for y in 0..8 {
            for x in 0..8 {
                let t = m[[0, 0, y, x]];
                let q = p[[0, 0, y, x]].clamp(1e-7, 1.0 - 1e-7);
                sum += if t == 1.0 { -q.ln() } else { -(1.0 - q).ln() };
            }
        }
        assert!((mask_loss(&m, &p).unwrap() - sum / 64.0).abs() < 1e-12);

        let g = mask_loss_grad(&m, &p).unwrap();
        let e = 1e-7;
        for (y, x) in [(0, 0), (3, 5), (7, 7)] {
            let (mut up, mut dn) = (p.clone(), p.clone());
            up[[0, 0, y, x]] += e;
            dn[[0, 0, y, x]] -= e;
            let fd = (mask_loss(&m, &up).unwrap() - mask_loss(&m, &dn).unwrap()) / (2.0 * e);
            assert!((fd - g[[0, 0, y, x]]).abs() < 1e-5 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn combined_objective_is_the_weighted_sum() {
        assert_eq!(predict_loss(&MaskLossComponents::default(), 0.1, 1.0), 0.0);
        let ones = MaskLossComponents {
            adv_d: 1.0,
            adv_g: 1.0,
            glass: 1.0,
            shadow: 1.0,
        };
        assert!((predict_loss(&ones, 0.1, 1.0) - 2.2).abs() < 1e-12);
        let w = MaskLossWeights::default();
        assert_eq!((w.adv, w.mask), (0.1, 1.0));
        let c = MaskLossComponents {
            adv_d: 0.37,
            adv_g: 1.91,
            glass: 0.052,
            shadow: 0.4,
        };
        let manual = 0.1 * 0.37 + 0.1 * 1.91 + 0.052 + 0.4;
        assert!((c.total(&w) - manual).abs() < 1e-12);
    }

    fn small_cfg(wiring: MaskWiring, use_da: bool) -> MaskStageConfig {
        MaskStageConfig {
            base_channels: 4,
            n_residual_blocks: 1,
            feature_channels: 8,
            da_blocks: 1,
            disc_channels: 4,
            wiring,
            use_da,
        }
    }

    #[test]
    fn prediction_shapes_and_ranges_for_every_wiring() {
        let img = uniform((2, 3, 32, 32), 0.0, 1.0, 6).mapv(|v| v as f32);
        for wiring in [MaskWiring::GlassGuidesShadow, MaskWiring::ShadowGuidesGlass, MaskWiring::Joint] {
            for use_da in [true, false] {
                let m = MaskModel::<f32>::new(small_cfg(wiring, use_da), 1).unwrap();
                let p = m.predict(&img).unwrap();
                assert_eq!(p.m_g.dim(), (2, 1, 32, 32));
                assert_eq!(p.m_s.dim(), (2, 1, 32, 32));
                assert!(p.m_g.iter().chain(p.m_s.iter()).all(|v| *v > 0.0 && *v < 1.0));
            }
        }
        let m = MaskModel::<f32>::new(small_cfg(MaskWiring::GlassGuidesShadow, true), 1).unwrap();
        let f = m.features(&img, Domain::Real).unwrap();
        assert_eq!(f.features.dim(), (2, 8, 16, 16));
        assert!(m.predict(&Array4::zeros((1, 3, 30, 32))).is_err());
    }

    #[test]
    fn shadow_net_consumes_the_glass_prediction() {
        let m = MaskModel::<f64>::new(small_cfg(MaskWiring::GlassGuidesShadow, true), 2).unwrap();
        let img = uniform((1, 3, 32, 32), 0.0, 1.0, 7);
        let f = m.features(&img, Domain::Synthetic).unwrap().features;
        let sm = m.sm.as_ref().unwrap();
        let mg = binary((1, 1, 32, 32), 8);
        let with = sm.forward(&concat_channels(&[&f, &avg_pool2(&mg)]));
        let without = sm.forward(&concat_channels(&[&f, &avg_pool2(&Array4::zeros((1, 1, 32, 32)))]));
        assert!((&with - &without).mapv(f64::abs).sum() > 0.0);

        let mut sm = build_mask_net::<f64>(NetConfig::new(4, 1, 9, 1), true, 3).unwrap();
        let target = binary((1, 1, 32, 32), 9);
        let y = sm.forward_train(&concat_channels(&[&f, &avg_pool2(&mg)]));
        let d_in = sm.backward(&mask_loss_grad(&target, &y).unwrap());
        let d_guide = split_channels(&d_in, &[8, 1]).pop().unwrap();
        assert!(d_guide.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let m = MaskModel::<f32>::new(small_cfg(MaskWiring::GlassGuidesShadow, true), 3).unwrap();
        let img = uniform((3, 3, 32, 32), 0.0, 1.0, 10).mapv(|v| v as f32);
        let p = m.predict(&img).unwrap();
        let order = [2usize, 0, 1];
        let permuted = img.select(ndarray::Axis(0), &order);
        let q = m.predict(&permuted).unwrap();
        assert_eq!(q.m_g, p.m_g.select(ndarray::Axis(0), &order));
        assert_eq!(q.m_s, p.m_s.select(ndarray::Axis(0), &order));
    }

    #[test]
    fn train_step_lowers_mask_loss_on_a_fixed_batch() {
        for wiring in [MaskWiring::GlassGuidesShadow, MaskWiring::ShadowGuidesGlass, MaskWiring::Joint] {
            let mut m = MaskModel::<f32>::new(small_cfg(wiring, true), 4).unwrap();
            let batch = SynBatch {
                image: uniform((2, 3, 32, 32), 0.0, 1.0, 11).mapv(|v| v as f32),
                m_g: binary((2, 1, 32, 32), 12).mapv(|v| v as f32),
                m_s: binary((2, 1, 32, 32), 13).mapv(|v| v as f32),
            };
            let real = uniform((2, 3, 32, 32), 0.0, 1.0, 14).mapv(|v| v as f32);
            let cfg = crate::nn::AdamConfig {
                lr: 2e-3,
                ..Default::default()
            };
            let (mut og, mut od) = (Adam::new(cfg), Adam::new(cfg));
            let w = MaskLossWeights::default();
            let first = m.train_step(&batch, Some(&real), &mut og, Some(&mut od), &w).unwrap();
            let mut last = first;
            for _ in 0..15 {
                last = m.train_step(&batch, Some(&real), &mut og, Some(&mut od), &w).unwrap();
            }
            assert!(
                last.glass + last.shadow < first.glass + first.shadow,
                "{wiring:?}: {first:?} -> {last:?}"
            );
            assert!(last.adv_d >= 0.0 && last.adv_g >= 0.0);
        }
    }

    #[test]
    fn fixed_front_end_never_moves_in_training() {
        let mut m = MaskModel::<f32>::new(small_cfg(MaskWiring::GlassGuidesShadow, true), 5).unwrap();
        let before = m.da.as_ref().unwrap().store().get("fixed_conv.weight").cloned();
        let batch = SynBatch {
            image: uniform((1, 3, 32, 32), 0.0, 1.0, 15).mapv(|v| v as f32),
            m_g: binary((1, 1, 32, 32), 16).mapv(|v| v as f32),
            m_s: binary((1, 1, 32, 32), 17).mapv(|v| v as f32),
        };
        let real = batch.image.clone();
        let (mut og, mut od) = (Adam::new(Default::default()), Adam::new(Default::default()));
        m.train_step(&batch, Some(&real), &mut og, Some(&mut od), &MaskLossWeights::default())
            .unwrap();
        assert_eq!(m.da.as_ref().unwrap().store().get("fixed_conv.weight").cloned(), before);
    }
}

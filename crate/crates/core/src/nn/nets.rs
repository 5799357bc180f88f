use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv2d, InstanceNorm, LeakyRelu, Relu, ResBlock, Sequential, Sigmoid, Tanh01, Upsample2};
use super::{Layer, Param, Real, Tensor};
use crate::error::{Error, Result};

/// Seed of the fixed first layer of the domain-adaptation net. It is the same
/// for every run so that both domains and all variants share one front end.
pub const DA_FIXED_SEED: u64 = 0x0DA0_F1ED;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub base_channels: usize,
    pub n_residual_blocks: usize,
    pub input_channels: usize,
    pub output_channels: usize,
}

impl NetConfig {
    pub fn new(base_channels: usize, n_residual_blocks: usize, input_channels: usize, output_channels: usize) -> Self {
        Self {
            base_channels,
            n_residual_blocks,
            input_channels,
            output_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.n_residual_blocks == 0 || self.input_channels == 0 || self.output_channels == 0 {
            return Err(Error::Config(format!("network counts must all be >= 1: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetFamily {
    Transform,
    /// `true` when the input is the half-resolution feature map and the net
    /// upsamples once more to image resolution.
    Mask {
        from_features: bool,
    },
    DomainAdapt,
    Discriminator,
}

/// A built network: a layer chain plus the description it was built from.
pub struct Network<T: Real> {
    pub family: NetFamily,
    pub cfg: NetConfig,
    body: Sequential<T>,
}

impl<T: Real> Network<T> {
    /// Output spatial size for an `h` × `w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        match self.family {
            NetFamily::Transform | NetFamily::Mask { from_features: false } => (h, w),
            NetFamily::Mask { from_features: true } => (2 * h, 2 * w),
            NetFamily::DomainAdapt => (h.div_ceil(2), w.div_ceil(2)),
            NetFamily::Discriminator => (h.div_ceil(2).div_ceil(2), w.div_ceil(2).div_ceil(2)),
        }
    }

    /// Spatial sizes the net accepts must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        match self.family {
            NetFamily::Transform | NetFamily::Mask { .. } | NetFamily::Discriminator => 4,
            NetFamily::DomainAdapt => 2,
        }
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        let m = self.size_multiple();
        if c != self.cfg.input_channels || h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "{:?} net expects {} channels and sides divisible by {m}, got {c}x{h}x{w}",
                self.family, self.cfg.input_channels
            )));
        }
        Ok(())
    }
}

impl<T: Real> Layer<T> for Network<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.body.forward(x)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.body.forward_train(x)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        self.body.backward(dy)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.body.visit(prefix, f)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.body.visit_mut(prefix, f)
    }

    fn clear_cache(&mut self) {
        self.body.clear_cache()
    }
}

fn conv_norm_relu<T: Real>(seq: &mut Sequential<T>, name: &str, conv: Conv2d<T>) {
    let ch = conv.out_ch;
    seq.push(format!("{name}_conv"), conv)
        .push(format!("{name}_norm"), InstanceNorm::new(ch))
        .push(format!("{name}_act"), Relu::new());
}

/// Encoder (two stride-2 convs) → residual blocks → decoder (two upsample +
/// conv stages). Returns the chain and the decoder output width.
fn backbone<T: Real>(seq: &mut Sequential<T>, cfg: &NetConfig, stem_k: usize, rng: &mut ChaCha8Rng) -> usize {
    let b = cfg.base_channels;
    conv_norm_relu(seq, "stem", Conv2d::new(cfg.input_channels, b, stem_k, 1, stem_k / 2, rng));
    conv_norm_relu(seq, "down1", Conv2d::new(b, 2 * b, 3, 2, 1, rng));
    conv_norm_relu(seq, "down2", Conv2d::new(2 * b, 4 * b, 3, 2, 1, rng));
    for i in 0..cfg.n_residual_blocks {
        seq.push(format!("res{i}"), ResBlock::new(4 * b, rng));
    }
    seq.push("up1_resize", Upsample2);
    conv_norm_relu(seq, "up1", Conv2d::new(4 * b, 2 * b, 3, 1, 1, rng));
    seq.push("up2_resize", Upsample2);
    conv_norm_relu(seq, "up2", Conv2d::new(2 * b, b, 3, 1, 1, rng));
    b
}

/// Image-to-image net with a `[0, 1]` output; the last conv is named `head`.
pub fn build_transform_net<T: Real>(cfg: NetConfig, seed: u64) -> Result<Network<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut body = Sequential::new();
    let width = backbone(&mut body, &cfg, 7, &mut rng);
    body.push("head", Conv2d::new(width, cfg.output_channels, 7, 1, 3, &mut rng))
        .push("out", Tanh01::new());
    Ok(Network {
        family: NetFamily::Transform,
        cfg,
        body,
    })
}

/// Segmentation net with a sigmoid head. With `from_features` the input is
/// the half-resolution feature map and the output is at twice its size.
pub fn build_mask_net<T: Real>(cfg: NetConfig, from_features: bool, seed: u64) -> Result<Network<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut body = Sequential::new();
    let width = backbone(&mut body, &cfg, 3, &mut rng);
    if from_features {
        body.push("up3_resize", Upsample2);
        conv_norm_relu(&mut body, "up3", Conv2d::new(width, width, 3, 1, 1, &mut rng));
    }
    body.push("head", Conv2d::new(width, cfg.output_channels, 3, 1, 1, &mut rng))
        .push("out", Sigmoid::new());
    Ok(Network {
        family: NetFamily::Mask { from_features },
        cfg,
        body,
    })
}

/// Fixed stride-2 front end followed by trainable residual blocks.
/// `cfg.output_channels` is the feature width; `cfg.base_channels` is unused.
pub fn build_da_net<T: Real>(cfg: NetConfig, seed: u64) -> Result<Network<T>> {
    cfg.validate()?;
    let cf = cfg.output_channels;
    let mut fixed_rng = ChaCha8Rng::seed_from_u64(DA_FIXED_SEED);
    let mut fixed = Conv2d::new(cfg.input_channels, cf, 3, 2, 1, &mut fixed_rng);
    fixed.weight.frozen = true;
    fixed.bias.frozen = true;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut body = Sequential::new();
    body.push("fixed_conv", fixed).push("fixed_act", Relu::new());
    for i in 0..cfg.n_residual_blocks {
        body.push(format!("res{i}"), ResBlock::new(cf, &mut rng));
    }
    Ok(Network {
        family: NetFamily::DomainAdapt,
        cfg,
        body,
    })
}

/// Three-conv patch classifier with raw (unsquashed) scores.
pub fn build_discriminator<T: Real>(cfg: NetConfig, seed: u64) -> Result<Network<T>> {
    cfg.validate()?;
    let b = cfg.base_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut body = Sequential::new();
    body.push("conv1", Conv2d::new(cfg.input_channels, b, 3, 2, 1, &mut rng))
        .push("act1", LeakyRelu::new())
        .push("conv2", Conv2d::new(b, 2 * b, 3, 2, 1, &mut rng))
        .push("norm2", InstanceNorm::new(2 * b))
        .push("act2", LeakyRelu::new())
        .push("score", Conv2d::new(2 * b, cfg.output_channels, 3, 1, 1, &mut rng));
    Ok(Network {
        family: NetFamily::Discriminator,
        cfg,
        body,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerExt;
    use ndarray::Array4;
    use rand::Rng;

    fn random(shape: (usize, usize, usize, usize), seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn transform_net_shape_contract() {
        for cin in [3, 4, 5] {
            let net = build_transform_net::<f32>(NetConfig::new(8, 2, cin, 3), 0).unwrap();
            let y = net.forward(&random((2, cin, 64, 64), 1));
            assert_eq!(y.dim(), (2, 3, 64, 64));
            assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn zero_head_gives_constant_image() {
        let mut net = build_transform_net::<f32>(NetConfig::new(8, 2, 5, 3), 0).unwrap();
        net.visit_mut("", &mut |n, p| {
            if n.starts_with("head.") {
                p.value.fill(0.0);
            }
        });
        let y = net.forward(&random((1, 5, 32, 32), 2));
        assert!(y.iter().all(|v| *v == 0.5));
    }

    #[test]
    fn mask_net_shapes_and_range() {
        let net = build_mask_net::<f32>(NetConfig::new(8, 2, 33, 1), true, 0).unwrap();
        let y = net.forward(&random((2, 33, 32, 32), 3).mapv(|v| 6.0 * v - 3.0));
        assert_eq!(y.dim(), (2, 1, 64, 64));
        assert!(y.iter().all(|v| *v > 0.0 && *v < 1.0));
        let raw = build_mask_net::<f32>(NetConfig::new(8, 2, 3, 2), false, 0).unwrap();
        assert_eq!(raw.forward(&random((1, 3, 64, 64), 4)).dim(), (1, 2, 64, 64));
    }

    #[test]
    fn da_net_halves_resolution_and_freezes_front_end() {
        let net = build_da_net::<f32>(NetConfig::new(16, 6, 3, 32), 0).unwrap();
        let a = net.forward(&random((1, 3, 64, 64), 5));
        let b = net.forward(&random((1, 3, 64, 64), 6));
        assert_eq!(a.dim(), (1, 32, 32, 32));
        assert!((&a - &b).mapv(f32::abs).sum() > 0.0);
        let trainable = net.trainable_names();
        assert!(trainable.iter().all(|n| !n.starts_with("fixed")));
        assert!(net.param_names().iter().any(|n| n == "fixed_conv.weight"));
        assert_eq!(trainable.iter().filter(|n| n.ends_with("conv1.weight")).count(), 6);
        // the fixed layer does not depend on the training seed
        let other = build_da_net::<f32>(NetConfig::new(16, 6, 3, 32), 99).unwrap();
        assert_eq!(net.store().get("fixed_conv.weight"), other.store().get("fixed_conv.weight"));
    }

    #[test]
    fn discriminator_patch_grid_and_zero_weights() {
        let mut d = build_discriminator::<f32>(NetConfig::new(16, 1, 32, 1), 0).unwrap();
        let x = random((2, 32, 32, 32), 7);
        assert_eq!(d.forward(&x).dim(), (2, 1, 8, 8));
        d.visit_mut("", &mut |_, p| p.value.fill(0.0));
        assert!(d.forward(&x).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(build_transform_net::<f32>(NetConfig::new(0, 2, 3, 3), 0).is_err());
        assert!(build_mask_net::<f32>(NetConfig::new(8, 0, 3, 1), false, 0).is_err());
        let net = build_transform_net::<f32>(NetConfig::new(4, 1, 3, 3), 0).unwrap();
        assert!(net.check_input(&random((1, 3, 30, 32), 0)).is_err());
        assert!(net.check_input(&random((1, 4, 32, 32), 0)).is_err());
        assert!(net.check_input(&random((1, 3, 32, 32), 0)).is_ok());
    }

    #[test]
    fn batch_samples_do_not_interact() {
        let net = build_transform_net::<f32>(NetConfig::new(8, 1, 3, 3), 0).unwrap();
        let x = random((3, 3, 32, 32), 8);
        let y = net.forward(&x);
        for i in 0..3 {
            let xi = x.slice(ndarray::s![i..i + 1, .., .., ..]).to_owned();
            assert_eq!(net.forward(&xi), y.slice(ndarray::s![i..i + 1, .., .., ..]));
        }
    }
}

//! The segmentation network: a dilated residual encoder and a shallow
//! decoder that fuses the IMU horizon mask at three depths.
//!
//! Data flow: encoder → ARM1(res5, IMU) → ARM2(+res3, IMU) → ×2 upsample →
//! FFM(+res2, IMU) → ASPP → softmax at 1/4 resolution → ×4 upsample.

mod blocks;
mod ctx;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use blocks::{arm1, arm2, aspp, encoder_forward, ffm, EncoderFeatures};
pub use ctx::NetCtx;

use crate::error::{Error, Result};
use crate::horizon::resize_mask;
use crate::tensor::{BnMode, BnState, ParamStore, Tensor};

/// Value of the IMU channel when the IMU is disabled.
pub const NEUTRAL_PRIOR: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// (height, width), both divisible by 8.
    pub input_size: (usize, usize),
    pub class_count: usize,
    /// Widths of res2, res3, res4, res5.
    pub encoder_channels: [usize; 4],
    pub aspp_rates: Vec<usize>,
    pub use_imu: bool,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_size: (96, 128),
            class_count: 3,
            encoder_channels: [16, 32, 48, 64],
            aspp_rates: vec![1, 2, 4, 6],
            use_imu: true,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Config(format!("input size {h}x{w} must be positive multiples of 8")));
        }
        if self.class_count < 2 {
            return Err(Error::Config("class_count must be at least 2".into()));
        }
        if self.encoder_channels.contains(&0) {
            return Err(Error::Config("encoder channels must be positive".into()));
        }
        let mut rates = self.aspp_rates.clone();
        rates.sort_unstable();
        rates.dedup();
        if rates.is_empty() || rates.len() != self.aspp_rates.len() || rates[0] == 0 {
            return Err(Error::Config(format!(
                "aspp rates must be positive and distinct, got {:?}",
                self.aspp_rates
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SegOutput {
    /// `[classes, h, w]` at input resolution.
    pub probs: Tensor,
    /// `[classes, h/4, w/4]`, before the final upsample.
    pub internal_probs: Tensor,
}

#[derive(Debug, Clone)]
pub struct WasrOutput {
    pub seg: SegOutput,
    pub features: EncoderFeatures,
}

/// Network configuration with its trainable parameters and batch-norm statistics.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: NetConfig,
    pub params: ParamStore,
    pub bn: BnState,
}

impl Model {
    pub fn forward(&mut self, image: &Tensor, imu_mask: &Tensor, mode: BnMode) -> Result<WasrOutput> {
        wasr_forward(image, imu_mask, &self.params, &mut self.bn, &self.cfg, mode)
    }
}

/// Xavier-uniform convolution weights, zero biases and shifts, unit scales;
/// deterministic in `cfg.seed`.
pub fn build_network(cfg: &NetConfig) -> Result<Model> {
    cfg.validate()?;
    let (h, w) = cfg.input_size;
    let mut params = ParamStore::new();
    let mut bn = BnState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let image = Tensor::zeros(&[3, h, w])?;
    let mask = Tensor::zeros(&[1, h, w])?;
    {
        let mut ctx = NetCtx::build(&mut params, &mut bn, &mut rng);
        forward_with(&mut ctx, &image, &mask, cfg)?;
    }
    Ok(Model {
        cfg: cfg.clone(),
        params,
        bn,
    })
}

pub fn wasr_forward(
    image: &Tensor,
    imu_mask: &Tensor,
    params: &ParamStore,
    bn: &mut BnState,
    cfg: &NetConfig,
    mode: BnMode,
) -> Result<WasrOutput> {
    let mut ctx = NetCtx::run(params, bn, mode);
    forward_with(&mut ctx, image, imu_mask, cfg)
}

/// IMU channel at the given resolution: the resized mask, or the neutral prior.
fn imu_channel(mask: &Tensor, size: (usize, usize), use_imu: bool) -> Result<Tensor> {
    if use_imu {
        resize_mask(mask, size)
    } else {
        Tensor::full(&[1, size.0, size.1], NEUTRAL_PRIOR)
    }
}

fn forward_with(ctx: &mut NetCtx, image: &Tensor, imu_mask: &Tensor, cfg: &NetConfig) -> Result<WasrOutput> {
    let (_, h, w) = image.chw()?;
    if imu_mask.shape() != [1, h, w] {
        return Err(Error::shape("wasr_forward", image.shape(), imu_mask.shape()));
    }
    let features = encoder_forward(ctx, image, cfg.encoder_channels)?;
    let eighth = (h / 8, w / 8);
    let quarter = (h / 4, w / 4);
    let imu8 = imu_channel(imu_mask, eighth, cfg.use_imu)?;
    let imu4 = imu_channel(imu_mask, quarter, cfg.use_imu)?;

    let a1 = arm1(ctx, "dec.arm1", &features.res5, &imu8)?;
    let a2 = arm2(ctx, "dec.arm2", &a1, &features.res3, &imu8)?;
    let up = a2.upsample_bilinear(2)?;
    let fused = ffm(ctx, "dec.ffm", &up, &features.res2, &imu4)?;
    let logits = aspp(ctx, "dec.aspp", &fused, &cfg.aspp_rates, cfg.class_count)?;
    let internal_probs = logits.softmax_channels()?;
    let probs = internal_probs.upsample_bilinear(4)?;
    Ok(WasrOutput {
        seg: SegOutput {
            probs,
            internal_probs,
        },
        features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(use_imu: bool) -> NetConfig {
        NetConfig {
            input_size: (32, 48),
            encoder_channels: [4, 6, 8, 10],
            aspp_rates: vec![1, 2],
            use_imu,
            ..NetConfig::default()
        }
    }

    fn ramp_image(h: usize, w: usize) -> Tensor {
        Tensor::new(
            &[3, h, w],
            (0..3 * h * w).map(|i| ((i * 7919) % 255) as f64 / 255.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_network(&toy(true)).unwrap();
        let b = build_network(&toy(true)).unwrap();
        assert!(a.params.bit_equal(&b.params));
        let c = build_network(&NetConfig { seed: 1, ..toy(true) }).unwrap();
        assert!(!a.params.bit_equal(&c.params));
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(NetConfig { input_size: (30, 48), ..toy(true) }.validate().is_err());
        assert!(NetConfig { aspp_rates: vec![2, 2], ..toy(true) }.validate().is_err());
        assert!(NetConfig { aspp_rates: vec![0, 1], ..toy(true) }.validate().is_err());
        assert!(NetConfig { class_count: 1, ..toy(true) }.validate().is_err());
    }

    #[test]
    fn resolution_contract() {
        let mut m = build_network(&toy(true)).unwrap();
        let img = ramp_image(32, 48);
        let mask = Tensor::zeros(&[1, 32, 48]).unwrap();
        let out = m.forward(&img, &mask, BnMode::Train).unwrap();
        assert_eq!(out.seg.probs.shape(), &[3, 32, 48]);
        assert_eq!(out.seg.internal_probs.shape(), &[3, 8, 12]);
        assert_eq!(out.features.res5.shape(), &[10, 4, 6]);
        let plane = 32 * 48;
        for p in 0..plane {
            let s: f64 = (0..3).map(|k| out.seg.probs.data()[k * plane + p]).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        let re = out.seg.internal_probs.upsample_bilinear(4).unwrap();
        assert_eq!(re.data(), out.seg.probs.data());
    }

    #[test]
    fn imu_mask_changes_output_only_when_enabled() {
        let img = ramp_image(32, 48);
        let zeros = Tensor::zeros(&[1, 32, 48]).unwrap();
        let ones = Tensor::full(&[1, 32, 48], 1.0).unwrap();
        for use_imu in [true, false] {
            let mut m = build_network(&toy(use_imu)).unwrap();
            let a = m.clone().forward(&img, &zeros, BnMode::Train).unwrap();
            let b = m.forward(&img, &ones, BnMode::Train).unwrap();
            let diff = a
                .seg
                .probs
                .data()
                .iter()
                .zip(b.seg.probs.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert_eq!(diff > 0.0, use_imu, "use_imu={use_imu} diff={diff}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let img = ramp_image(32, 48);
        let mask = Tensor::full(&[1, 32, 48], 1.0).unwrap();
        let mut a = build_network(&toy(true)).unwrap();
        let mut b = a.clone();
        let oa = a.forward(&img, &mask, BnMode::Train).unwrap();
        let ob = b.forward(&img, &mask, BnMode::Train).unwrap();
        assert_eq!(oa.seg.probs.data(), ob.seg.probs.data());
        assert_eq!(a.bn, b.bn);
    }
}

//! Encoder stages and the decoder fusion blocks.

use super::ctx::NetCtx;
use crate::error::{Error, Result};
use crate::tensor::{Conv2dSpec, Tensor};

/// Encoder features consumed by the decoder and the separation loss.
#[derive(Debug, Clone)]
pub struct EncoderFeatures {
    /// Quarter resolution.
    pub res2: Tensor,
    /// Eighth resolution; res4 and res5 keep it through dilation.
    pub res3: Tensor,
    pub res4: Tensor,
    pub res5: Tensor,
}

/// Two 3×3 convolutions with batch norm and a residual shortcut.
/// The shortcut is a 1×1 projection whenever width or stride changes.
fn residual_unit(
    ctx: &mut NetCtx,
    name: &str,
    x: &Tensor,
    out_channels: usize,
    stride: usize,
    dilation: usize,
) -> Result<Tensor> {
    let (in_channels, _, _) = x.chw()?;
    let a = ctx.conv(
        &format!("{name}.conv1"),
        x,
        out_channels,
        3,
        Conv2dSpec::new(stride, dilation, dilation),
        false,
    )?;
    let a = ctx.bn(&format!("{name}.bn1"), &a)?.relu();
    let b = ctx.conv(
        &format!("{name}.conv2"),
        &a,
        out_channels,
        3,
        Conv2dSpec::same(3, dilation),
        false,
    )?;
    let b = ctx.bn(&format!("{name}.bn2"), &b)?;
    let shortcut = if in_channels == out_channels && stride == 1 {
        x.clone()
    } else {
        ctx.conv(
            &format!("{name}.proj"),
            x,
            out_channels,
            1,
            Conv2dSpec::new(stride, 1, 0),
            false,
        )?
    };
    Ok(b.add(&shortcut)?.relu())
}

/// Stem (stride 2) and max-pool to 1/4, res3 strides to 1/8, res4 and res5
/// stay at 1/8 with dilations 2 and 4.
pub fn encoder_forward(ctx: &mut NetCtx, image: &Tensor, channels: [usize; 4]) -> Result<EncoderFeatures> {
    let (c, h, w) = image.chw()?;
    if c != 3 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::contract(format!(
            "encoder input must be [3, H, W] with H and W divisible by 8, got {:?}",
            image.shape()
        )));
    }
    let [c2, c3, c4, c5] = channels;
    let stem = ctx.conv("enc.stem", image, c2, 3, Conv2dSpec::new(2, 1, 1), false)?;
    let stem = ctx.bn("enc.stem_bn", &stem)?.relu();
    let pooled = stem.max_pool2d(2, 2)?;
    let res2 = residual_unit(ctx, "enc.res2", &pooled, c2, 1, 1)?;
    let res3 = residual_unit(ctx, "enc.res3", &res2, c3, 2, 1)?;
    let res4 = residual_unit(ctx, "enc.res4", &res3, c4, 1, 2)?;
    let res5 = residual_unit(ctx, "enc.res5", &res4, c5, 1, 4)?;
    Ok(EncoderFeatures {
        res2,
        res3,
        res4,
        res5,
    })
}

/// Concatenates the IMU channel and re-weights all channels by a learned
/// attention vector: `x ⊙ sigmoid(bn(conv1×1(gap(x))))`.
pub fn arm1(ctx: &mut NetCtx, name: &str, features: &Tensor, imu: &Tensor) -> Result<Tensor> {
    let x = Tensor::concat_channels(&[features, imu])?;
    let (c, _, _) = x.chw()?;
    let pooled = x.global_avg_pool()?;
    let a = ctx.conv(
        &format!("{name}.attn"),
        &pooled,
        c,
        1,
        Conv2dSpec::new(1, 1, 0),
        false,
    )?;
    let weights = ctx.bn(&format!("{name}.attn_bn"), &a)?.sigmoid();
    x.mul_channels(&weights)
}

/// ARM1 on the deep features, a 1×1 projection to res3's width, then a per-channel sum with res3.
pub fn arm2(ctx: &mut NetCtx, name: &str, deep: &Tensor, res3: &Tensor, imu: &Tensor) -> Result<Tensor> {
    let fused = arm1(ctx, &format!("{name}.arm"), deep, imu)?;
    let (c3, _, _) = res3.chw()?;
    let projected = ctx.conv(
        &format!("{name}.proj"),
        &fused,
        c3,
        1,
        Conv2dSpec::new(1, 1, 0),
        true,
    )?;
    if projected.shape() != res3.shape() {
        return Err(Error::shape("arm2", projected.shape(), res3.shape()));
    }
    projected.add(res3)
}

/// Fuses upsampled decoder features with res2 and the IMU channel:
/// `x = relu(bn(conv3×3(concat)))` at half the concatenated depth (rounded up),
/// `w = sigmoid(conv1×1(relu(conv1×1(gap(x)))))`, output `x + x ⊙ w`.
pub fn ffm(ctx: &mut NetCtx, name: &str, deep: &Tensor, res2: &Tensor, imu: &Tensor) -> Result<Tensor> {
    let cat = Tensor::concat_channels(&[deep, res2, imu])?;
    let (c, _, _) = cat.chw()?;
    let out_c = c.div_ceil(2);
    let x = ctx.conv(&format!("{name}.conv"), &cat, out_c, 3, Conv2dSpec::same(3, 1), false)?;
    let x = ctx.bn(&format!("{name}.bn"), &x)?.relu();
    let pooled = x.global_avg_pool()?;
    let one = Conv2dSpec::new(1, 1, 0);
    let hidden = ctx.conv(&format!("{name}.attn1"), &pooled, out_c, 1, one, true)?.relu();
    let weights = ctx.conv(&format!("{name}.attn2"), &hidden, out_c, 1, one, true)?.sigmoid();
    x.add(&x.mul_channels(&weights)?)
}

/// Parallel dilated 3×3 convolutions onto class logits, summed.
pub fn aspp(ctx: &mut NetCtx, name: &str, features: &Tensor, rates: &[usize], classes: usize) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for &rate in rates {
        let branch = ctx.conv(
            &format!("{name}.rate{rate}"),
            features,
            classes,
            3,
            Conv2dSpec::same(3, rate),
            true,
        )?;
        total = Some(match total {
            Some(t) => t.add(&branch)?,
            None => branch,
        });
    }
    total.ok_or_else(|| Error::contract("aspp needs at least one rate"))
}

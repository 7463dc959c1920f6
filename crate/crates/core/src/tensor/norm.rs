//! Batch normalization and the per-pixel channel softmax.

use super::{Function, Tensor};
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight kept by the running statistics at each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the statistics of the current sample and update the running averages.
    Train,
    /// Normalize with the running averages.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

struct BatchNorm {
    input: Tensor,
    scale: Tensor,
    shift: Tensor,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// Whether mean and variance were taken from the input itself.
    batch_stats: bool,
}

impl Function for BatchNorm {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.input, &self.scale, &self.shift]
    }

    fn backward(&self, _out: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let channels = self.scale.len();
        let plane = grad.len() / channels;
        let n = plane as f64;
        let mut gx = vec![0.0; grad.len()];
        let mut gscale = vec![0.0; channels];
        let mut gshift = vec![0.0; channels];
        for c in 0..channels {
            let range = c * plane..(c + 1) * plane;
            let g = &grad[range.clone()];
            let xh = &self.xhat[range.clone()];
            let sum_g: f64 = g.iter().sum();
            let sum_gx: f64 = g.iter().zip(xh).map(|(a, b)| a * b).sum();
            gscale[c] = sum_gx;
            gshift[c] = sum_g;
            let s = self.scale.data()[c] * self.inv_std[c];
            let out = &mut gx[range];
            if self.batch_stats {
                for ((o, gv), xv) in out.iter_mut().zip(g).zip(xh) {
                    *o = s * (gv - sum_g / n - xv * sum_gx / n);
                }
            } else {
                for (o, gv) in out.iter_mut().zip(g) {
                    *o = s * gv;
                }
            }
        }
        vec![Some(gx), Some(gscale), Some(gshift)]
    }
}

struct Softmax(Tensor);

impl Function for Softmax {
    fn name(&self) -> &'static str {
        "softmax_channels"
    }

    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.0]
    }

    fn backward(&self, out: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (c, h, w) = self.0.chw().expect("validated in forward");
        let plane = h * w;
        let mut g = vec![0.0; c * plane];
        for p in 0..plane {
            let dot: f64 = (0..c).map(|k| grad[k * plane + p] * out[k * plane + p]).sum();
            for k in 0..c {
                let i = k * plane + p;
                g[i] = out[i] * (grad[i] - dot);
            }
        }
        vec![Some(g)]
    }
}

impl Tensor {
    /// Per-channel normalization of a `[C, H, W]` tensor followed by `scale·x̂ + shift`.
    ///
    /// In [`BnMode::Train`] the statistics of the input are used and folded
    /// into `stats` with momentum [`BN_MOMENTUM`]. A single spatial element
    /// carries no variance, so such inputs are normalized with the running
    /// statistics even in training and leave them untouched.
    pub fn batch_norm(
        &self,
        scale: &Tensor,
        shift: &Tensor,
        stats: &mut RunningStats,
        mode: BnMode,
    ) -> Result<Tensor> {
        let (c, h, w) = self.chw()?;
        if scale.shape() != [c] || shift.shape() != [c] {
            return Err(Error::shape("batch_norm", self.shape(), scale.shape()));
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::contract(format!(
                "batch_norm running stats hold {} channels, input has {c}",
                stats.mean.len()
            )));
        }
        let plane = h * w;
        let batch_stats = mode == BnMode::Train && plane > 1;
        let mut xhat = Vec::with_capacity(self.len());
        let mut inv_std = Vec::with_capacity(c);
        for (ch, x) in self.data().chunks(plane).enumerate() {
            let (mean, var) = if batch_stats {
                let mean = x.iter().sum::<f64>() / plane as f64;
                let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
                stats.mean[ch] = BN_MOMENTUM * stats.mean[ch] + (1.0 - BN_MOMENTUM) * mean;
                stats.var[ch] = BN_MOMENTUM * stats.var[ch] + (1.0 - BN_MOMENTUM) * var;
                (mean, var)
            } else {
                (stats.mean[ch], stats.var[ch])
            };
            let is = 1.0 / (var + BN_EPSILON).sqrt();
            inv_std.push(is);
            xhat.extend(x.iter().map(|v| (v - mean) * is));
        }
        let data = xhat
            .chunks(plane)
            .zip(scale.data().iter().zip(shift.data()))
            .flat_map(|(xh, (&g, &b))| xh.iter().map(move |v| g * v + b))
            .collect();
        let op = BatchNorm {
            input: self.clone(),
            scale: scale.clone(),
            shift: shift.clone(),
            xhat,
            inv_std,
            batch_stats,
        };
        Ok(Tensor::from_op(self.shape().to_vec(), data, op))
    }

    /// Softmax across channels at every pixel of a `[C, H, W]` tensor.
    pub fn softmax_channels(&self) -> Result<Tensor> {
        let (c, h, w) = self.chw()?;
        if c < 2 {
            return Err(Error::contract("softmax_channels needs at least two channels"));
        }
        let plane = h * w;
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for p in 0..plane {
            let max = (0..c).map(|k| x[k * plane + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..c {
                let e = (x[k * plane + p] - max).exp();
                out[k * plane + p] = e;
                total += e;
            }
            for k in 0..c {
                out[k * plane + p] /= total;
            }
        }
        Ok(Tensor::from_op(self.shape().to_vec(), out, Softmax(self.clone())))
    }
}

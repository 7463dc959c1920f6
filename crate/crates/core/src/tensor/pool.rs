//! Pooling and bilinear resampling.

use super::{Function, Tensor};
use crate::error::{Error, Result};

/// Source taps `(i0, i1, w1)` for each output index of an align-corners-false
/// bilinear resample from `src` to `dst` samples: `out = (1 - w1)·in[i0] + w1·in[i1]`.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Bilinear resample of one row-major plane.
pub(crate) fn resample_plane(
    plane: &[f64],
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let rows = bilinear_taps(h, oh);
    let cols = bilinear_taps(w, ow);
    let mut out = Vec::with_capacity(oh * ow);
    for &(r0, r1, wr) in &rows {
        for &(c0, c1, wc) in &cols {
            let top = plane[r0 * w + c0] * (1.0 - wc) + plane[r0 * w + c1] * wc;
            let bottom = plane[r1 * w + c0] * (1.0 - wc) + plane[r1 * w + c1] * wc;
            out.push(top * (1.0 - wr) + bottom * wr);
        }
    }
    out
}

struct MaxPool {
    input: Tensor,
    argmax: Vec<usize>,
}

impl Function for MaxPool {
    fn name(&self) -> &'static str {
        "max_pool2d"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.input]
    }
    fn backward(&self, _out: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut g = vec![0.0; self.input.len()];
        for (&i, gv) in self.argmax.iter().zip(grad) {
            g[i] += gv;
        }
        vec![Some(g)]
    }
    fn kinks(&self, out: &mut Vec<u64>) {
        out.extend(self.argmax.iter().map(|&i| i as u64));
    }
}

struct GlobalAvgPool(Tensor);

impl Function for GlobalAvgPool {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.0]
    }
    fn backward(&self, _out: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let plane = self.0.len() / grad.len();
        let inv = 1.0 / plane as f64;
        vec![Some(grad.iter().flat_map(|g| std::iter::repeat_n(g * inv, plane)).collect())]
    }
}

struct Upsample {
    input: Tensor,
    rows: Vec<(usize, usize, f64)>,
    cols: Vec<(usize, usize, f64)>,
}

impl Function for Upsample {
    fn name(&self) -> &'static str {
        "upsample_bilinear"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.input]
    }
    fn backward(&self, _out: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (c, h, w) = self.input.chw().expect("validated in forward");
        let (oh, ow) = (self.rows.len(), self.cols.len());
        let mut g = vec![0.0; c * h * w];
        for ch in 0..c {
            let gin = &mut g[ch * h * w..(ch + 1) * h * w];
            let gout = &grad[ch * oh * ow..(ch + 1) * oh * ow];
            for (oy, &(r0, r1, wr)) in self.rows.iter().enumerate() {
                for (ox, &(c0, c1, wc)) in self.cols.iter().enumerate() {
                    let v = gout[oy * ow + ox];
                    gin[r0 * w + c0] += v * (1.0 - wr) * (1.0 - wc);
                    gin[r0 * w + c1] += v * (1.0 - wr) * wc;
                    gin[r1 * w + c0] += v * wr * (1.0 - wc);
                    gin[r1 * w + c1] += v * wr * wc;
                }
            }
        }
        vec![Some(g)]
    }
}

impl Tensor {
    /// Window maximum over each channel of a `[C, H, W]` tensor, without padding.
    ///
    /// The gradient routes to the maximal element; ties go to the lowest linear index.
    pub fn max_pool2d(&self, window: usize, stride: usize) -> Result<Tensor> {
        let (c, h, w) = self.chw()?;
        if window == 0 || stride == 0 {
            return Err(Error::contract("max_pool2d window and stride must be positive"));
        }
        if window > h || window > w {
            return Err(Error::contract(format!(
                "max_pool2d window {window} larger than input {h}x{w}"
            )));
        }
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let src = self.data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = usize::MAX;
                    for i in 0..window {
                        for j in 0..window {
                            let idx = (ch * h + oy * stride + i) * w + ox * stride + j;
                            // Row-major scan with strict `>` keeps the lowest index on ties.
                            if best == usize::MAX || src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let op = MaxPool {
            input: self.clone(),
            argmax,
        };
        Ok(Tensor::from_op(vec![c, oh, ow], out, op))
    }

    /// Per-channel mean of a `[C, H, W]` tensor, shaped `[C, 1, 1]`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let (c, h, w) = self.chw()?;
        let plane = h * w;
        let data = self
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        Ok(Tensor::from_op(vec![c, 1, 1], data, GlobalAvgPool(self.clone())))
    }

    /// Align-corners-false bilinear upsampling by an integer factor of 2 or 4.
    pub fn upsample_bilinear(&self, factor: usize) -> Result<Tensor> {
        if factor != 2 && factor != 4 {
            return Err(Error::contract(format!("upsample factor must be 2 or 4, got {factor}")));
        }
        let (c, h, w) = self.chw()?;
        let (oh, ow) = (h * factor, w * factor);
        let data: Vec<f64> = self
            .data()
            .chunks(h * w)
            .flat_map(|plane| resample_plane(plane, (h, w), (oh, ow)))
            .collect();
        let op = Upsample {
            input: self.clone(),
            rows: bilinear_taps(h, oh),
            cols: bilinear_taps(w, ow),
        };
        Ok(Tensor::from_op(vec![c, oh, ow], data, op))
    }
}

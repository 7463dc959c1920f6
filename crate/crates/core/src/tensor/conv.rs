//! Dilated 2-D cross-correlation via im2col and GEMM.

use super::{Function, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub dilation: usize,
    /// Zero padding as (rows, columns).
    pub padding: (usize, usize),
}

impl Conv2dSpec {
    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        Self {
            stride,
            dilation,
            padding: (padding, padding),
        }
    }

    /// Stride-1 convolution that keeps spatial extents for an odd `kernel`.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self::new(1, dilation, same_padding(kernel, dilation))
    }
}

/// Padding that preserves spatial extents at stride 1 for an odd kernel.
pub fn same_padding(kernel: usize, dilation: usize) -> usize {
    dilation * (kernel - 1) / 2
}

/// `C = A·B + beta·C` where `A` is m×k and `B` is k×n, both row-major,
/// optionally stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_transposed { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above guarantee every index reached through these
    // strides lies inside the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    spec: Conv2dSpec,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate sampled by output position `o` and kernel tap `t` along one axis.
    fn source(&self, o: usize, t: usize, pad: usize) -> isize {
        (o * self.spec.stride + t * self.spec.dilation) as isize - pad as isize
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let (ph, pw) = self.spec.padding;
        let cols = self.cols();
        let mut col = vec![0.0; self.rows() * cols];
        for c in 0..self.channels {
            let plane = &input[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.out_h {
                        let y = self.source(oy, ki, ph);
                        if y < 0 || y >= self.height as isize {
                            continue;
                        }
                        let src_row = &plane[y as usize * self.width..(y as usize + 1) * self.width];
                        for ox in 0..self.out_w {
                            let x = self.source(ox, kj, pw);
                            if x >= 0 && x < self.width as isize {
                                dst[oy * self.out_w + ox] = src_row[x as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64]) -> Vec<f64> {
        let (ph, pw) = self.spec.padding;
        let cols = self.cols();
        let mut out = vec![0.0; self.channels * self.height * self.width];
        for c in 0..self.channels {
            let plane =
                &mut out[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.out_h {
                        let y = self.source(oy, ki, ph);
                        if y < 0 || y >= self.height as isize {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let x = self.source(ox, kj, pw);
                            if x >= 0 && x < self.width as isize {
                                plane[y as usize * self.width + x as usize] +=
                                    src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

struct Conv2d {
    input: Tensor,
    weight: Tensor,
    bias: Option<Tensor>,
    col: Vec<f64>,
    geo: Geometry,
}

impl Function for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn inputs(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.input, &self.weight];
        v.extend(self.bias.as_ref());
        v
    }

    fn backward(&self, _out: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let k = self.weight.shape()[0];
        let rows = self.geo.rows();
        let cols = self.geo.cols();

        let g_input = self.input.requires_grad().then(|| {
            let mut gcol = vec![0.0; rows * cols];
            gemm(rows, k, cols, self.weight.data(), true, grad, false, 0.0, &mut gcol);
            self.geo.col2im(&gcol)
        });
        let g_weight = self.weight.requires_grad().then(|| {
            let mut gw = vec![0.0; k * rows];
            gemm(k, cols, rows, grad, false, &self.col, true, 0.0, &mut gw);
            gw
        });
        let mut grads = vec![g_input, g_weight];
        if let Some(bias) = &self.bias {
            grads.push(
                bias.requires_grad()
                    .then(|| grad.chunks(cols).map(|g| g.iter().sum()).collect()),
            );
        }
        grads
    }
}

impl Tensor {
    /// Cross-correlation of a `[C, H, W]` input with `[K, C, kh, kw]` weights.
    ///
    /// Output extent per axis is `floor((H + 2p - dilation·(kh-1) - 1) / stride) + 1`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, spec: Conv2dSpec) -> Result<Tensor> {
        let (channels, height, width) = self.chw()?;
        let &[k, wc, kh, kw] = weight.shape() else {
            return Err(Error::shape("conv2d", self.shape(), weight.shape()));
        };
        if wc != channels {
            return Err(Error::shape("conv2d", self.shape(), weight.shape()));
        }
        if let Some(b) = bias {
            if b.shape() != [k] {
                return Err(Error::shape("conv2d bias", weight.shape(), b.shape()));
            }
        }
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::contract("conv2d stride and dilation must be positive"));
        }
        let extent = |size: usize, pad: usize, kernel: usize| -> Option<usize> {
            let span = spec.dilation * (kernel - 1) + 1;
            (size + 2 * pad).checked_sub(span).map(|v| v / spec.stride + 1)
        };
        let (Some(out_h), Some(out_w)) = (
            extent(height, spec.padding.0, kh),
            extent(width, spec.padding.1, kw),
        ) else {
            return Err(Error::shape("conv2d", self.shape(), weight.shape()));
        };

        let geo = Geometry {
            channels,
            height,
            width,
            kh,
            kw,
            out_h,
            out_w,
            spec,
        };
        let col = geo.im2col(self.data());
        let cols = geo.cols();
        let mut out = vec![0.0; k * cols];
        if let Some(b) = bias {
            for (chunk, &bv) in out.chunks_mut(cols).zip(b.data()) {
                chunk.fill(bv);
            }
        }
        gemm(k, geo.rows(), cols, weight.data(), false, &col, false, 1.0, &mut out);

        let op = Conv2d {
            input: self.clone(),
            weight: weight.clone(),
            bias: bias.cloned(),
            col,
            geo,
        };
        Ok(Tensor::from_op(vec![k, out_h, out_w], out, op))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-loop reference used to pin the im2col path.
    fn naive_conv(x: &Tensor, w: &Tensor, spec: Conv2dSpec) -> Vec<f64> {
        let (c, h, wd) = x.chw().unwrap();
        let &[k, _, kh, kw] = w.shape() else { unreachable!() };
        let oh = (h + 2 * spec.padding.0 - spec.dilation * (kh - 1) - 1) / spec.stride + 1;
        let ow = (wd + 2 * spec.padding.1 - spec.dilation * (kw - 1) - 1) / spec.stride + 1;
        let mut out = vec![0.0; k * oh * ow];
        for ko in 0..k {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let y = (oy * spec.stride + i * spec.dilation) as isize
                                    - spec.padding.0 as isize;
                                let xx = (ox * spec.stride + j * spec.dilation) as isize
                                    - spec.padding.1 as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                    acc += x.data()[(ci * h + y as usize) * wd + xx as usize]
                                        * w.data()[((ko * c + ci) * kh + i) * kw + j];
                                }
                            }
                        }
                    }
                    out[(ko * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::new(&[1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let w = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let y = x.conv2d(&w, None, Conv2dSpec::new(1, 1, 0)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dilated_stencil_spreads_center_impulse() {
        let mut data = vec![0.0; 25];
        data[12] = 1.0;
        let x = Tensor::new(&[1, 5, 5], data).unwrap();
        let w = Tensor::new(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = x.conv2d(&w, None, Conv2dSpec::same(3, 2)).unwrap();
        assert_eq!(y.shape(), &[1, 5, 5]);
        for r in 0..5 {
            for c in 0..5 {
                let expected = if [0, 2, 4].contains(&r) && [0, 2, 4].contains(&c) { 1.0 } else { 0.0 };
                assert_eq!(y.data()[r * 5 + c], expected, "({r},{c})");
            }
        }
    }

    #[test]
    fn strided_output_shape() {
        let x = Tensor::zeros(&[1, 8, 8]).unwrap();
        let w = Tensor::zeros(&[4, 1, 3, 3]).unwrap();
        let y = x.conv2d(&w, None, Conv2dSpec::new(2, 1, 1)).unwrap();
        assert_eq!(y.shape(), &[4, 4, 4]);
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let x = Tensor::zeros(&[2, 4, 4]).unwrap();
        let w = Tensor::zeros(&[1, 3, 3, 3]).unwrap();
        let err = x.conv2d(&w, None, Conv2dSpec::same(3, 1)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn matches_direct_loops() {
        let x = Tensor::new(&[3, 7, 6], (0..126).map(|v| ((v * 37) % 11) as f64 - 5.0).collect()).unwrap();
        let w = Tensor::new(&[2, 3, 3, 3], (0..54).map(|v| ((v * 13) % 7) as f64 - 3.0).collect()).unwrap();
        for spec in [
            Conv2dSpec::new(1, 1, 1),
            Conv2dSpec::new(2, 1, 1),
            Conv2dSpec::new(1, 2, 2),
            Conv2dSpec::new(2, 3, 1),
        ] {
            let y = x.conv2d(&w, None, spec).unwrap();
            assert_eq!(y.data(), naive_conv(&x, &w, spec).as_slice(), "{spec:?}");
        }
    }

    #[test]
    fn same_padding_preserves_extent() {
        for (k, d) in [(1, 1), (3, 1), (3, 2), (3, 4), (5, 1)] {
            let x = Tensor::zeros(&[1, 9, 11]).unwrap();
            let w = Tensor::zeros(&[1, 1, k, k]).unwrap();
            let y = x.conv2d(&w, None, Conv2dSpec::same(k, d)).unwrap();
            assert_eq!(y.shape(), &[1, 9, 11]);
        }
    }
}

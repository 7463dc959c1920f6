//! Elementwise arithmetic, reductions, activations and channel plumbing.

use super::{Function, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct Add(Tensor, Tensor);

impl Function for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.0, &self.1]
    }
    fn backward(&self, _out: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.to_vec()), Some(grad.to_vec())]
    }
}

struct Sub(Tensor, Tensor);

impl Function for Sub {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.0, &self.1]
    }
    fn backward(&self, _out: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.to_vec()), Some(grad.iter().map(|g| -g).collect())]
    }
}

struct Mul(Tensor, Tensor);

impl Function for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.0, &self.1]
    }
    fn backward(&self, _out: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let ga = self
            .0
            .requires_grad()
            .then(|| grad.iter().zip(self.1.data()).map(|(g, b)| g * b).collect());
        let gb = self
            .1
            .requires_grad()
            .then(|| grad.iter().zip(self.0.data()).map(|(g, a)| g * a).collect());
        vec![ga, gb]
    }
}

struct Scale(Tensor, f64);

impl Function for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.0]
    }
    fn backward(&self, _out: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.iter().map(|g| g * self.1).collect())]
    }
}

struct AddScalar(Tensor);

impl Function for AddScalar {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.0]
    }
    fn backward(&self, _out: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.to_vec())]
    }
}

struct Sum(Tensor);

impl Function for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.0]
    }
    fn backward(&self, _out: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![grad[0]; self.0.len()])]
    }
}

struct Act(Tensor, Activation);

impl Function for Act {
    fn name(&self) -> &'static str {
        match self.1 {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
        }
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.0]
    }
    fn backward(&self, out: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let g = match self.1 {
            Activation::Relu => grad
                .iter()
                .zip(self.0.data())
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect(),
            Activation::Sigmoid => grad
                .iter()
                .zip(out)
                .map(|(g, &s)| g * s * (1.0 - s))
                .collect(),
        };
        vec![Some(g)]
    }
    fn kinks(&self, out: &mut Vec<u64>) {
        if self.1 == Activation::Relu {
            for chunk in self.0.data().chunks(64) {
                let bits = chunk
                    .iter()
                    .enumerate()
                    .fold(0u64, |acc, (i, &x)| acc | (u64::from(x > 0.0) << i));
                out.push(bits);
            }
        }
    }
}

struct Concat(Vec<Tensor>);

impl Function for Concat {
    fn name(&self) -> &'static str {
        "concat_channels"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        self.0.iter().collect()
    }
    fn backward(&self, _out: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut offset = 0;
        self.0
            .iter()
            .map(|t| {
                let g = grad[offset..offset + t.len()].to_vec();
                offset += t.len();
                Some(g)
            })
            .collect()
    }
}

struct SliceChannels {
    input: Tensor,
    start: usize,
}

impl Function for SliceChannels {
    fn name(&self) -> &'static str {
        "slice_channels"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.input]
    }
    fn backward(&self, _out: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (_, h, w) = self.input.chw().expect("validated in forward");
        let mut g = vec![0.0; self.input.len()];
        let offset = self.start * h * w;
        g[offset..offset + grad.len()].copy_from_slice(grad);
        vec![Some(g)]
    }
}

/// `x[c, i, j] * w[c]` for `x: [C, H, W]`, `w: [C, 1, 1]`.
struct MulChannels(Tensor, Tensor);

impl Function for MulChannels {
    fn name(&self) -> &'static str {
        "mul_channels"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.0, &self.1]
    }
    fn backward(&self, _out: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let weights = self.1.data();
        let plane = self.0.len() / weights.len();
        let gx = self.0.requires_grad().then(|| {
            grad.chunks(plane)
                .zip(weights)
                .flat_map(|(g, w)| g.iter().map(move |v| v * w))
                .collect()
        });
        let gw = self.1.requires_grad().then(|| {
            grad.chunks(plane)
                .zip(self.0.data().chunks(plane))
                .map(|(g, x)| g.iter().zip(x).map(|(a, b)| a * b).sum())
                .collect()
        });
        vec![gx, gw]
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(self.shape().to_vec(), data, Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(self.shape().to_vec(), data, Sub(self.clone(), other.clone())))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Ok(Tensor::from_op(self.shape().to_vec(), data, Mul(self.clone(), other.clone())))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_op(self.shape().to_vec(), data, Scale(self.clone(), factor))
    }

    pub fn add_scalar(&self, value: f64) -> Tensor {
        let data = self.data().iter().map(|v| v + value).collect();
        Tensor::from_op(self.shape().to_vec(), data, AddScalar(self.clone()))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&self) -> Tensor {
        let total = self.data().iter().sum();
        Tensor::from_op(vec![1], vec![total], Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.len() as f64)
    }

    /// Sum of `self ⊙ weights` for a constant weight grid.
    pub fn weighted_sum(&self, weights: &[f64]) -> Result<Tensor> {
        let w = Tensor::new(self.shape(), weights.to_vec())?;
        Ok(self.mul(&w)?.sum())
    }

    pub fn activation(&self, kind: Activation) -> Tensor {
        let data = match kind {
            Activation::Relu => self.data().iter().map(|&x| x.max(0.0)).collect(),
            Activation::Sigmoid => self.data().iter().map(|&x| sigmoid(x)).collect(),
        };
        Tensor::from_op(self.shape().to_vec(), data, Act(self.clone(), kind))
    }

    pub fn relu(&self) -> Tensor {
        self.activation(Activation::Relu)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.activation(Activation::Sigmoid)
    }

    /// Stacks `[C_i, H, W]` tensors along the channel axis, preserving order.
    pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
        if inputs.len() < 2 {
            return Err(Error::contract("concat_channels needs at least two inputs"));
        }
        let (_, h, w) = inputs[0].chw()?;
        let mut channels = 0;
        for t in inputs {
            let (c, th, tw) = t.chw()?;
            if (th, tw) != (h, w) {
                return Err(Error::shape("concat_channels", inputs[0].shape(), t.shape()));
            }
            channels += c;
        }
        let data = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
        let op = Concat(inputs.iter().map(|t| (*t).clone()).collect());
        Ok(Tensor::from_op(vec![channels, h, w], data, op))
    }

    /// Channels `start..start + len` of a `[C, H, W]` tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let (c, h, w) = self.chw()?;
        if len == 0 || start + len > c {
            return Err(Error::contract(format!(
                "slice_channels {start}..{} out of range for {c} channels",
                start + len
            )));
        }
        let data = self.data()[start * h * w..(start + len) * h * w].to_vec();
        let op = SliceChannels {
            input: self.clone(),
            start,
        };
        Ok(Tensor::from_op(vec![len, h, w], data, op))
    }

    /// Scales every channel of a `[C, H, W]` tensor by the matching entry of a `[C, 1, 1]` tensor.
    pub fn mul_channels(&self, weights: &Tensor) -> Result<Tensor> {
        let (c, h, w) = self.chw()?;
        if weights.shape() != [c, 1, 1] {
            return Err(Error::shape("mul_channels", self.shape(), weights.shape()));
        }
        let plane = h * w;
        let data = self
            .data()
            .chunks(plane)
            .zip(weights.data())
            .flat_map(|(x, s)| x.iter().map(move |v| v * s))
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            MulChannels(self.clone(), weights.clone()),
        ))
    }
}

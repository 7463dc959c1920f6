//! Central finite differences: the independent oracle for every backward pass.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::{walk_ops, Tensor};
use crate::error::Result;

/// Magnitude below which errors are measured absolutely rather than relatively.
const REL_ERROR_FLOOR: f64 = 1e-3;

/// `(f(x + h·e_i) - f(x - h·e_i)) / 2h` for every element `i` of `at`.
pub fn finite_diff_grad<F>(mut f: F, at: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut grad = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        grad.push(central_difference(&mut f, at, i, h)?);
    }
    Tensor::new(at.shape(), grad)
}

pub(crate) fn central_difference<F>(f: &mut F, at: &Tensor, index: usize, h: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = at.data().to_vec();
    probe[index] = at.data()[index] + h;
    let plus = f(&Tensor::new(at.shape(), probe.clone())?)?;
    probe[index] = at.data()[index] - h;
    let minus = f(&Tensor::new(at.shape(), probe)?)?;
    Ok((plus - minus) / (2.0 * h))
}

/// `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Hash of every discrete decision (ReLU activation pattern, max-pool
/// argmax) in the graph behind `root`. Two evaluations with equal
/// signatures lie on the same smooth piece of the function.
pub fn kink_signature(root: &Tensor) -> u64 {
    let mut words = Vec::new();
    walk_ops(root, |op| op.kinks(&mut words));
    let mut hasher = DefaultHasher::new();
    words.hash(&mut hasher);
    hasher.finish()
}

/// Outcome of comparing backward against finite differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Probes skipped because `x ± h` crossed a ReLU or max-pool kink.
    pub skipped: usize,
}

/// Compares the backward gradient of `loss_fn` at `at` with central
/// differences on `indices` (all elements when `None`).
///
/// `loss_fn` receives a grad-requiring tensor and must build a scalar graph from it.
pub fn check_gradient<F>(
    mut loss_fn: F,
    at: &Tensor,
    h: f64,
    indices: Option<&[usize]>,
) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let x = Tensor::param(at.shape(), at.data().to_vec())?;
    let loss = loss_fn(&x)?;
    let base = kink_signature(&loss);
    loss.backward()?;
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; x.len()]);

    let all: Vec<usize>;
    let indices = match indices {
        Some(i) => i,
        None => {
            all = (0..at.len()).collect();
            &all
        }
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for &i in indices {
        let mut values = [0.0; 2];
        let mut smooth = true;
        for (slot, sign) in [1.0, -1.0].into_iter().enumerate() {
            let mut probe = at.data().to_vec();
            probe[i] += sign * h;
            let loss = loss_fn(&Tensor::param(at.shape(), probe)?)?;
            smooth &= kink_signature(&loss) == base;
            values[slot] = loss.item()?;
        }
        if !smooth {
            report.skipped += 1;
            continue;
        }
        let numeric = (values[0] - values[1]) / (2.0 * h);
        report.max_rel_error = report.max_rel_error.max(relative_error(analytic[i], numeric));
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Conv2dSpec;

    #[test]
    fn square_sum_oracle() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::new(&[3], vec![1.0, -2.0, 9.0]).unwrap();
        let g = finite_diff_grad(|_| Ok(7.5), &x, 1e-5).unwrap();
        assert_eq!(g.data(), &[0.0; 3]);
    }

    #[test]
    fn two_layer_conv_net_agrees_with_backward() {
        let w1 = Tensor::new(&[3, 2, 3, 3], (0..54).map(|i| ((i * 7 % 13) as f64 - 6.0) / 10.0).collect())
            .unwrap();
        let w2 = Tensor::new(&[1, 3, 3, 3], (0..27).map(|i| ((i * 5 % 11) as f64 - 5.0) / 10.0).collect())
            .unwrap();
        let x = Tensor::new(&[2, 5, 5], (0..50).map(|i| ((i * 3 % 17) as f64 - 8.0) / 8.0).collect())
            .unwrap();
        let net = |t: &Tensor| -> Result<Tensor> {
            let h = t.conv2d(&w1, None, Conv2dSpec::same(3, 1))?.sigmoid();
            Ok(h.conv2d(&w2, None, Conv2dSpec::same(3, 2))?.sum())
        };
        let report = check_gradient(net, &x, 1e-5, None).unwrap();
        assert_eq!(report.checked, 50);
        assert!(report.max_rel_error <= 1e-5, "{report:?}");

        let numeric = finite_diff_grad(|t| net(t)?.item(), &x, 1e-5).unwrap();
        let xp = Tensor::param(x.shape(), x.data().to_vec()).unwrap();
        net(&xp).unwrap().backward().unwrap();
        assert!(max_relative_error(&xp.grad().unwrap(), numeric.data()) <= 1e-5);
    }

    #[test]
    fn kink_crossing_is_detected() {
        let x = Tensor::new(&[2], vec![1e-7, 1.0]).unwrap();
        let report = check_gradient(|t| Ok(t.relu().sum()), &x, 1e-5, None).unwrap();
        assert_eq!(report.skipped, 1);
        assert_eq!(report.checked, 1);
    }
}

use proptest::prelude::*;
use wasr::losses::{focal_loss, total_loss, water_separation_loss, LossWeights, RegionIndex};
use wasr::postprocess::{Label, SegLabelMap};
use wasr::tensor::Tensor;

/// Channels, water count, obstacle count and `[C, 1, N]` feature values.
fn features() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>)> {
    (1usize..5, 2usize..16, 1usize..16).prop_flat_map(|(c, nw, no)| {
        prop::collection::vec(-3.0..3.0f64, c * (nw + no)).prop_map(move |d| (c, nw, no, d))
    })
}

fn loss(c: usize, nw: usize, no: usize, data: Vec<f64>) -> f64 {
    let n = nw + no;
    let r = RegionIndex {
        water: (0..nw).collect(),
        obstacle: (nw..n).collect(),
        dims: (1, n),
    };
    let x = Tensor::new(&[c, 1, n], data).unwrap();
    water_separation_loss(&x, &r).unwrap().item().unwrap()
}

/// Per channel, the water and obstacle sums of squared residuals about the water mean.
fn residuals(c: usize, nw: usize, no: usize, data: &[f64]) -> Vec<(f64, f64)> {
    let n = nw + no;
    (0..c)
        .map(|k| {
            let (w, o) = data[k * n..(k + 1) * n].split_at(nw);
            let mu = w.iter().sum::<f64>() / nw as f64;
            let ss = |xs: &[f64]| xs.iter().map(|v| (v - mu).powi(2)).sum();
            (ss(w), ss(o))
        })
        .collect()
}

fn spread(c: usize, nw: usize, no: usize, data: &[f64]) -> Vec<f64> {
    residuals(c, nw, no, data).into_iter().map(|r| r.0).collect()
}

/// Obstacle residuals clear of the denominator floor.
fn unfloored(c: usize, nw: usize, no: usize, data: &[f64]) -> bool {
    residuals(c, nw, no, data).iter().all(|r| r.1 > 1e-6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn separation_is_affine_invariant((c, nw, no, data) in features(), a in prop::collection::vec((0.2..5.0f64, any::<bool>(), -3.0..3.0f64), 4)) {
        let n = nw + no;
        let mut mapped = data.clone();
        for k in 0..c {
            let (scale, neg, shift) = a[k];
            let scale = if neg { -scale } else { scale };
            for v in &mut mapped[k * n..(k + 1) * n] {
                *v = scale * *v + shift;
            }
        }
        prop_assume!(unfloored(c, nw, no, &data) && unfloored(c, nw, no, &mapped));
        let (l0, l1) = (loss(c, nw, no, data), loss(c, nw, no, mapped));
        prop_assert!((l0 - l1).abs() <= 1e-9 * l0.max(1.0), "{} vs {}", l0, l1);
    }

    #[test]
    fn separation_is_zero_exactly_without_water_spread((c, nw, no, mut data) in features(), flatten in any::<bool>()) {
        let n = nw + no;
        if flatten {
            for k in 0..c {
                let v = data[k * n];
                data[k * n..k * n + nw].fill(v);
            }
        }
        let l = loss(c, nw, no, data.clone());
        prop_assert!(l >= 0.0);
        let any_spread = spread(c, nw, no, &data).iter().any(|&s| s > 0.0);
        prop_assert_eq!(l > 0.0, any_spread);
    }

    #[test]
    fn pushing_obstacles_away_lowers_separation((c, nw, no, data) in features(), pick in any::<prop::sample::Index>()) {
        let n = nw + no;
        let k = pick.index(c);
        prop_assume!(spread(c, nw, no, &data)[k] > 1e-6 && unfloored(c, nw, no, &data));
        let mu = data[k * n..k * n + nw].iter().sum::<f64>() / nw as f64;
        let mut pushed = data.clone();
        for v in &mut pushed[k * n + nw..(k + 1) * n] {
            *v = mu + 2.0 * (*v - mu);
        }
        prop_assert!(loss(c, nw, no, pushed) < loss(c, nw, no, data));
    }

    #[test]
    fn focal_ignores_pixel_order(
        logits in prop::collection::vec(-4.0..4.0f64, 3 * 12),
        codes in prop::collection::vec(0usize..4, 12),
        perm in Just((0..12).collect::<Vec<usize>>()).prop_shuffle(),
        gamma in 0.0..3.0f64,
    ) {
        let labels = [Label::Water, Label::Sky, Label::Obstacle, Label::Unknown];
        let probs = Tensor::new(&[3, 3, 4], logits).unwrap().softmax_channels().unwrap();
        let seg = SegLabelMap::new(3, 4, codes.iter().map(|&i| labels[i]).collect()).unwrap();
        let p = probs.data();
        let permuted = Tensor::new(&[3, 3, 4], (0..3).flat_map(|k| perm.iter().map(move |&i| p[k * 12 + i])).collect()).unwrap();
        let seg_p = SegLabelMap::new(3, 4, perm.iter().map(|&i| seg.labels()[i]).collect()).unwrap();
        let a = focal_loss(&probs, &seg, gamma).unwrap().item().unwrap();
        let b = focal_loss(&permuted, &seg_p, gamma).unwrap().item().unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn focal_falls_as_true_probability_rises(pt in 0.01..0.98f64, up in 0.001..0.5f64, gamma in 0.0..3.0f64, class in 0usize..3) {
        let higher = (pt + up).min(0.99);
        let probs = |p: f64| {
            let mut d = vec![(1.0 - p) / 2.0; 3];
            d[class] = p;
            Tensor::new(&[3, 1, 1], d).unwrap()
        };
        let seg = SegLabelMap::new(1, 1, vec![Label::CLASSES[class]]).unwrap();
        let lo = focal_loss(&probs(higher), &seg, gamma).unwrap().item().unwrap();
        let hi = focal_loss(&probs(pt), &seg, gamma).unwrap().item().unwrap();
        prop_assert!(lo < hi);
    }

    #[test]
    fn total_is_linear_in_each_term(f in 0.0..5.0f64, ws in 0.0..50.0f64, l2 in 0.0..500.0f64, l1 in 0.0..1.0f64, lam2 in 0.0..1e-3f64) {
        let w = LossWeights { lambda1: l1, lambda2: lam2, gamma: 2.0 };
        let t = |f: f64, ws: f64, l2: f64| {
            total_loss(&Tensor::scalar(f), &Tensor::scalar(ws), &Tensor::scalar(l2), &w).unwrap().total.item().unwrap()
        };
        let base = t(f, ws, l2);
        prop_assert!((t(2.0 * f, ws, l2) - base - f).abs() <= 1e-9);
        prop_assert!((t(f, 2.0 * ws, l2) - base - l1 * ws).abs() <= 1e-9);
        prop_assert!((t(f, ws, 2.0 * l2) - base - lam2 * l2).abs() <= 1e-9);
    }
}

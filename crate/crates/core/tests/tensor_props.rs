use proptest::prelude::*;
use wasr::tensor::{Conv2dSpec, Tensor};

/// Values within ±15, so no softmax entry rounds to exactly 0 or 1 in f64.
fn chw(max_c: usize, max_hw: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_c, 1..=max_hw, 1..=max_hw).prop_flat_map(|(c, h, w)| {
        prop::collection::vec(-15.0..15.0f64, c * h * w).prop_map(move |d| Tensor::new(&[c, h, w], d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_is_a_distribution(x in chw(5, 6).prop_filter("two channels", |t| t.shape()[0] >= 2)) {
        let p = x.softmax_channels().unwrap();
        let (c, h, w) = p.chw().unwrap();
        for i in 0..h * w {
            let col: Vec<f64> = (0..c).map(|k| p.data()[k * h * w + i]).collect();
            prop_assert!(col.iter().all(|&v| v > 0.0 && v < 1.0));
            prop_assert!((col.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn concat_then_slice_round_trips(a in chw(3, 4), extra in 1usize..4) {
        let (_, h, w) = a.chw().unwrap();
        let b = Tensor::new(&[extra, h, w], (0..extra * h * w).map(|i| i as f64).collect()).unwrap();
        let cat = Tensor::concat_channels(&[&a, &b]).unwrap();
        let ca = a.shape()[0];
        prop_assert_eq!(cat.slice_channels(0, ca).unwrap().data().to_vec(), a.data().to_vec());
        prop_assert_eq!(cat.slice_channels(ca, extra).unwrap().data().to_vec(), b.data().to_vec());
    }

    #[test]
    fn same_padding_keeps_extent(
        x in chw(2, 9),
        half in 0usize..3,
        dilation in 1usize..3,
        out_c in 1usize..3,
        seed in any::<u64>(),
    ) {
        let k = 2 * half + 1;
        let cin = x.shape()[0];
        let n = out_c * cin * k * k;
        let weight = Tensor::new(&[out_c, cin, k, k], (0..n).map(|i| ((i as u64 ^ seed) % 7) as f64 - 3.0).collect()).unwrap();
        let y = x.conv2d(&weight, None, Conv2dSpec::same(k, dilation)).unwrap();
        prop_assert_eq!(&y.shape()[1..], &x.shape()[1..]);
        let again = x.conv2d(&weight, None, Conv2dSpec::same(k, dilation)).unwrap();
        prop_assert!(y.data().iter().zip(again.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

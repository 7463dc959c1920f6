use proptest::prelude::*;
use wasr::horizon::{horizon_line, render_imu_mask, CameraIntrinsics, ImuSample};

fn mask(roll: f64, pitch: f64, cam: &CameraIntrinsics) -> Vec<f64> {
    let imu = ImuSample::new(roll, pitch).unwrap();
    render_imu_mask(&horizon_line(imu, cam), cam.width, cam.height).unwrap().data().to_vec()
}

fn camera() -> impl Strategy<Value = CameraIntrinsics> {
    (2usize..40, 2usize..30, 10.0..200.0f64).prop_map(|(w, h, f)| CameraIntrinsics::centered(2 * w, h, f))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn columns_are_monotone(cam in camera(), roll in -1.5..1.5f64, pitch in -1.5..1.5f64) {
        let m = mask(roll, pitch, &cam);
        let w = cam.width;
        for c in 0..w {
            for r in 1..cam.height {
                prop_assert!(m[(r - 1) * w + c] <= m[r * w + c]);
            }
        }
    }

    #[test]
    fn tilting_down_reveals_water(cam in camera(), roll in -1.5..1.5f64, pitch in -1.5..1.5f64, d in 0.0..0.5f64) {
        let lower = (pitch - d).max(-1.5);
        let area = |p: f64| mask(roll, p, &cam).iter().sum::<f64>();
        prop_assert!(area(lower) >= area(pitch));
    }

    #[test]
    fn negating_roll_mirrors(cam in camera(), roll in -1.5..1.5f64, pitch in -1.5..1.5f64) {
        let (a, b, w) = (mask(roll, pitch, &cam), mask(-roll, pitch, &cam), cam.width);
        for r in 0..cam.height {
            for c in 0..w {
                prop_assert_eq!(a[r * w + c], b[r * w + w - 1 - c]);
            }
        }
    }
}

//! Joint augmentation of image, labels, IMU reading and ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::horizon::{horizon_line, ImuSample};
use crate::metrics::FrameGT;
use crate::postprocess::{BBox, Label, SegLabelMap};
use crate::scene::SceneSample;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElasticSpec {
    /// Spacing of the random offset grid, pixels.
    pub grid_step: usize,
    pub max_displacement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugSpec {
    pub mirror: bool,
    pub rotations_deg: Vec<f64>,
    pub elastic: Option<ElasticSpec>,
    /// Colour variants per geometric variant; the first keeps the source
    /// colours, the others take their statistics from random references.
    pub color_refs: usize,
    pub seed: u64,
}

impl Default for AugSpec {
    fn default() -> Self {
        Self {
            mirror: true,
            rotations_deg: vec![-15.0, -5.0, 5.0, 15.0],
            elastic: Some(ElasticSpec {
                grid_step: 16,
                max_displacement: 3.0,
            }),
            color_refs: 2,
            seed: 0,
        }
    }
}

impl AugSpec {
    /// Only the identity variant.
    pub fn none() -> Self {
        Self {
            mirror: false,
            rotations_deg: Vec::new(),
            elastic: None,
            color_refs: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(d) = self.rotations_deg.iter().find(|d| !(d.abs() <= 45.0)) {
            return Err(Error::Config(format!("rotation {d} outside ±45 degrees")));
        }
        if let Some(e) = self.elastic {
            if e.grid_step == 0 || !(e.max_displacement >= 0.0) || e.max_displacement >= e.grid_step as f64 {
                return Err(Error::Config(format!(
                    "elastic displacement {} must be below the grid step {}",
                    e.max_displacement, e.grid_step
                )));
            }
        }
        Ok(())
    }

    /// Variants emitted per source sample.
    pub fn variants_per_sample(&self) -> usize {
        self.variants().len()
    }
}

fn flip_plane<T: Copy>(data: &[T], w: usize) -> Vec<T> {
    data.chunks(w).flat_map(|row| row.iter().rev().copied()).collect()
}

/// Left–right flip. Roll changes sign and the principal point is reflected.
pub fn mirror_sample(s: &SceneSample) -> SceneSample {
    let (h, w) = (s.labels.height(), s.labels.width());
    let image = Tensor::new(s.image.shape(), flip_plane(s.image.data(), w)).expect("same shape");
    let labels = SegLabelMap::new(h, w, flip_plane(s.labels.labels(), w)).expect("same shape");
    let last = (w - 1) as f64;
    let mut gt_boxes: Vec<BBox> = s
        .gt
        .gt_boxes
        .iter()
        .map(|b| BBox {
            x1: w - 1 - b.x2,
            y1: b.y1,
            x2: w - 1 - b.x1,
            y2: b.y2,
        })
        .collect();
    gt_boxes.sort_by_key(|b| (b.y1, b.x1));
    let gt_edge = s.gt.gt_edge.iter().rev().map(|&(x, y)| (last - x, y)).collect();
    let mut camera = s.camera;
    camera.cx = last - camera.cx;
    SceneSample {
        image,
        labels,
        imu: ImuSample {
            roll: -s.imu.roll,
            pitch: s.imu.pitch,
        },
        camera,
        gt: FrameGT { gt_boxes, gt_edge },
        ..s.clone()
    }
}

/// Rotation by `deg` about the image center, clockwise on screen for positive
/// angles (matching positive roll). Labels use nearest-neighbour sampling and
/// pixels whose source falls outside the frame become unknown (black in the
/// image). Roll grows by `deg` and pitch is re-solved so the IMU horizon
/// follows the rotated scene.
pub fn rotate_sample(s: &SceneSample, deg: f64) -> Result<SceneSample> {
    if !(deg.abs() <= 45.0) {
        return Err(Error::contract(format!("rotation {deg} outside ±45 degrees")));
    }
    if deg == 0.0 {
        return Ok(s.clone());
    }
    let (h, w) = (s.labels.height(), s.labels.width());
    let theta = deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (ccx, ccy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let forward = |x: f64, y: f64| {
        let (dx, dy) = (x - ccx, y - ccy);
        (ccx + cos * dx - sin * dy, ccy + sin * dx + cos * dy)
    };
    let inverse = |x: f64, y: f64| {
        let (dx, dy) = (x - ccx, y - ccy);
        (ccx + cos * dx + sin * dy, ccy - sin * dx + cos * dy)
    };

    let plane = h * w;
    let src = s.image.data();
    let mut image = vec![0.0; 3 * plane];
    let mut labels = vec![Label::Unknown; plane];
    for r in 0..h {
        for c in 0..w {
            let (x, y) = inverse(c as f64, r as f64);
            if x < -0.5 || y < -0.5 || x >= w as f64 - 0.5 || y >= h as f64 - 0.5 {
                continue;
            }
            let p = r * w + c;
            labels[p] = s.labels.get(y.round() as usize, x.round() as usize);
            let (xc, yc) = (x.clamp(0.0, (w - 1) as f64), y.clamp(0.0, (h - 1) as f64));
            let (x0, y0) = (xc.floor() as usize, yc.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (xc - x0 as f64, yc - y0 as f64);
            for k in 0..3 {
                let ch = &src[k * plane..(k + 1) * plane];
                let top = ch[y0 * w + x0] * (1.0 - fx) + ch[y0 * w + x1] * fx;
                let bottom = ch[y1 * w + x0] * (1.0 - fx) + ch[y1 * w + x1] * fx;
                image[k * plane + p] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }

    // New horizon: rotate the old anchor point, keep it on a line of slope tan(roll + θ).
    let old = horizon_line(s.imu, &s.camera);
    let (ax, ay) = forward(old.anchor_col, old.intercept_row);
    let roll = s.imu.roll + theta;
    let row_at_cx = ay + roll.tan() * (s.camera.cx - ax);
    let pitch = ((row_at_cx - s.camera.cy) / s.camera.focal_px).atan();
    let imu = ImuSample::new(roll, pitch)?;

    let clamp_box = |xs: [f64; 4], ys: [f64; 4]| -> Option<BBox> {
        let lo = |v: [f64; 4]| v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = |v: [f64; 4]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (x1, x2) = (lo(xs).round().max(0.0), hi(xs).round().min((w - 1) as f64));
        let (y1, y2) = (lo(ys).round().max(0.0), hi(ys).round().min((h - 1) as f64));
        (x1 <= x2 && y1 <= y2).then(|| BBox {
            x1: x1 as usize,
            y1: y1 as usize,
            x2: x2 as usize,
            y2: y2 as usize,
        })
    };
    let mut gt_boxes: Vec<BBox> = s
        .gt
        .gt_boxes
        .iter()
        .filter_map(|b| {
            let corners = [
                forward(b.x1 as f64, b.y1 as f64),
                forward(b.x2 as f64, b.y1 as f64),
                forward(b.x1 as f64, b.y2 as f64),
                forward(b.x2 as f64, b.y2 as f64),
            ];
            clamp_box(corners.map(|p| p.0), corners.map(|p| p.1))
        })
        .collect();
    gt_boxes.sort_by_key(|b| (b.y1, b.x1));

    let rotated: Vec<(f64, f64)> = s.gt.gt_edge.iter().map(|&(x, y)| forward(x, y)).collect();
    let gt_edge = resample_polyline(&rotated, w);

    Ok(SceneSample {
        image: Tensor::new(&[3, h, w], image)?,
        labels: SegLabelMap::new(h, w, labels)?,
        imu,
        gt: FrameGT { gt_boxes, gt_edge },
        ..s.clone()
    })
}

/// Vertices at integer columns inside both the frame and the polyline's x span.
fn resample_polyline(poly: &[(f64, f64)], width: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for c in 0..width {
        let x = c as f64;
        let y = poly.windows(2).find_map(|seg| {
            let ((x0, y0), (x1, y1)) = (seg[0], seg[1]);
            (x1 > x0 && x0 <= x && x <= x1).then(|| y0 + (y1 - y0) * (x - x0) / (x1 - x0))
        });
        if let Some(y) = y {
            out.push((x, y));
        }
    }
    out
}

/// Warps the image inside the water label by a smooth random displacement
/// field. Other pixels and all labels are untouched; samples whose source
/// leaves the water keep their original value.
pub fn elastic_water_deform(s: &SceneSample, spec: &ElasticSpec, rng: &mut ChaCha8Rng) -> SceneSample {
    let (h, w) = (s.labels.height(), s.labels.width());
    let step = spec.grid_step.max(1);
    let (gh, gw) = (h.div_ceil(step) + 1, w.div_ceil(step) + 1);
    let d = spec.max_displacement;
    let grid: Vec<(f64, f64)> = (0..gh * gw)
        .map(|_| {
            if d > 0.0 {
                (rng.random_range(-d..=d), rng.random_range(-d..=d))
            } else {
                (0.0, 0.0)
            }
        })
        .collect();
    if d == 0.0 {
        return s.clone();
    }
    let plane = h * w;
    let src = s.image.data();
    let mut out = src.to_vec();
    for r in 0..h {
        for c in 0..w {
            if s.labels.get(r, c) != Label::Water {
                continue;
            }
            let (gy, gx) = (r as f64 / step as f64, c as f64 / step as f64);
            let (i0, j0) = (gy.floor() as usize, gx.floor() as usize);
            let (fy, fx) = (gy - i0 as f64, gx - j0 as f64);
            let at = |i: usize, j: usize| grid[i * gw + j];
            let mix = |a: f64, b: f64, t: f64| a + (b - a) * t;
            let (a, b, cc, dd) = (at(i0, j0), at(i0, j0 + 1), at(i0 + 1, j0), at(i0 + 1, j0 + 1));
            let dx = mix(mix(a.0, b.0, fx), mix(cc.0, dd.0, fx), fy);
            let dy = mix(mix(a.1, b.1, fx), mix(cc.1, dd.1, fx), fy);
            let x = (c as f64 + dx).clamp(0.0, (w - 1) as f64);
            let y = (r as f64 + dy).clamp(0.0, (h - 1) as f64);
            if s.labels.get(y.round() as usize, x.round() as usize) != Label::Water {
                continue;
            }
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (tx, ty) = (x - x0 as f64, y - y0 as f64);
            for k in 0..3 {
                let ch = &src[k * plane..(k + 1) * plane];
                let top = mix(ch[y0 * w + x0], ch[y0 * w + x1], tx);
                let bottom = mix(ch[y1 * w + x0], ch[y1 * w + x1], tx);
                out[k * plane + r * w + c] = mix(top, bottom, ty);
            }
        }
    }
    SceneSample {
        image: Tensor::new(s.image.shape(), out).expect("same shape"),
        ..s.clone()
    }
}

fn channel_moments(data: &[f64]) -> (f64, f64) {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-channel moment matching: `(x − μ_in)·σ_ref/σ_in + μ_ref`, clamped to [0, 1].
pub fn color_transfer(s: &SceneSample, reference: &SceneSample) -> Result<SceneSample> {
    let (c, _, _) = s.image.chw()?;
    let (rc, _, _) = reference.image.chw()?;
    if c != 3 || rc != 3 {
        return Err(Error::contract("colour transfer needs RGB images"));
    }
    let plane = s.image.len() / 3;
    let rplane = reference.image.len() / 3;
    let mut out = Vec::with_capacity(s.image.len());
    for k in 0..3 {
        let x = &s.image.data()[k * plane..(k + 1) * plane];
        let (mu_in, sd_in) = channel_moments(x);
        let (mu_ref, sd_ref) = channel_moments(&reference.image.data()[k * rplane..(k + 1) * rplane]);
        let scale = if sd_in > 0.0 { sd_ref / sd_in } else { 1.0 };
        out.extend(x.iter().map(|v| ((v - mu_in) * scale + mu_ref).clamp(0.0, 1.0)));
    }
    Ok(SceneSample {
        image: Tensor::new(s.image.shape(), out)?,
        ..s.clone()
    })
}

fn variant_rng(seed: u64, source: usize, variant: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((source as u64) << 20) | variant as u64);
    rng
}

type Variant = (bool, f64, Option<ElasticSpec>, usize);

impl AugSpec {
    /// Variant parameters in emission order: mirror × rotation × elastic × colour.
    fn variants(&self) -> Vec<Variant> {
        let mirrors: &[bool] = if self.mirror { &[false, true] } else { &[false] };
        let mut rotations = vec![0.0];
        rotations.extend(self.rotations_deg.iter().copied().filter(|&d| d != 0.0));
        let elastic: Vec<Option<ElasticSpec>> = match self.elastic {
            Some(e) => vec![None, Some(e)],
            None => vec![None],
        };
        let mut out = Vec::new();
        for &m in mirrors {
            for &r in &rotations {
                for &e in &elastic {
                    for k in 0..self.color_refs.max(1) {
                        out.push((m, r, e, k));
                    }
                }
            }
        }
        out
    }
}

/// Variant `variant` of `samples[source]`; deterministic in `spec.seed` and both indices.
pub fn augment_variant(samples: &[SceneSample], spec: &AugSpec, source: usize, variant: usize) -> Result<SceneSample> {
    let variants = spec.variants();
    let &(m, r, e, k) = variants.get(variant).ok_or_else(|| {
        Error::contract(format!("variant {variant} out of range ({} per sample)", variants.len()))
    })?;
    let src = samples
        .get(source)
        .ok_or_else(|| Error::contract(format!("source {source} out of range")))?;
    let mut rng = variant_rng(spec.seed, source, variant);
    let mut s = if k > 0 && samples.len() > 1 {
        // Reference drawn from the other sources.
        let mut j = rng.random_range(0..samples.len() - 1);
        if j >= source {
            j += 1;
        }
        color_transfer(src, &samples[j])?
    } else {
        src.clone()
    };
    if let Some(e) = e {
        s = elastic_water_deform(&s, &e, &mut rng);
    }
    if m {
        s = mirror_sample(&s);
    }
    rotate_sample(&s, r)
}

/// Lazily enumerates every augmented variant of every source, sources in order.
pub fn expand_dataset<'a>(
    samples: &'a [SceneSample],
    spec: &'a AugSpec,
) -> impl Iterator<Item = Result<SceneSample>> + 'a {
    let n = spec.variants_per_sample();
    (0..samples.len()).flat_map(move |si| (0..n).map(move |vi| augment_variant(samples, spec, si, vi)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneParams};

    fn scene(seed: u64) -> SceneSample {
        generate_scene(&SceneParams::default(), seed).unwrap()
    }

    fn histogram(l: &SegLabelMap) -> [usize; 4] {
        [Label::Water, Label::Sky, Label::Obstacle, Label::Unknown].map(|k| l.count(k))
    }

    #[test]
    fn mirror_is_an_involution() {
        let s = scene(3);
        let m = mirror_sample(&s);
        assert_eq!(mirror_sample(&m), s);
        assert_eq!(histogram(&m.labels), histogram(&s.labels));
        assert_eq!(m.imu.roll, -s.imu.roll);
    }

    #[test]
    fn mirror_box_coordinates() {
        let mut s = scene(0);
        s.gt.gt_boxes = vec![BBox::from([10, 5, 20, 9])];
        let m = mirror_sample(&s);
        let w = s.labels.width();
        assert_eq!(m.gt.gt_boxes, vec![BBox::from([w - 1 - 20, 5, w - 1 - 10, 9])]);
    }

    #[test]
    fn rotation_zero_is_identity_and_roll_is_additive() {
        let s = scene(4);
        assert_eq!(rotate_sample(&s, 0.0).unwrap(), s);
        let there = rotate_sample(&s, 5.0).unwrap();
        let back = rotate_sample(&there, -5.0).unwrap();
        assert!((there.imu.roll - (s.imu.roll + 5f64.to_radians())).abs() < 1e-15);
        assert!((back.imu.roll - s.imu.roll).abs() < 1e-15);
        assert!((back.imu.pitch - s.imu.pitch).abs() < 1e-12);
        assert!(rotate_sample(&s, 50.0).is_err());
    }

    #[test]
    fn rotated_disk_keeps_its_area() {
        let n = 128;
        let center = (n as f64 - 1.0) / 2.0;
        let mut s = scene(0);
        let labels: Vec<Label> = (0..n * n)
            .map(|p| {
                let (r, c) = ((p / n) as f64, (p % n) as f64);
                if (r - center).powi(2) + (c - center).powi(2) <= 30.0f64.powi(2) {
                    Label::Obstacle
                } else {
                    Label::Water
                }
            })
            .collect();
        s.labels = SegLabelMap::new(n, n, labels).unwrap();
        s.image = Tensor::zeros(&[3, n, n]).unwrap();
        s.camera = crate::horizon::CameraIntrinsics::centered(n, n, 100.0);
        s.gt = FrameGT {
            gt_boxes: vec![],
            gt_edge: vec![],
        };
        let before = s.labels.count(Label::Obstacle) as f64;
        for deg in [5.0, 15.0, -15.0, 37.0] {
            let after = rotate_sample(&s, deg).unwrap().labels.count(Label::Obstacle) as f64;
            assert!((after - before).abs() / before < 0.02, "{deg}: {before} → {after}");
        }
    }

    #[test]
    fn rotation_keeps_imu_horizon_on_the_labels() {
        let s = scene(9);
        let r = rotate_sample(&s, 15.0).unwrap();
        let line = horizon_line(r.imu, &r.camera);
        // Far from obstacles and the frame border, the rotated sky/water boundary sits on the new horizon.
        let (h, w) = (r.labels.height(), r.labels.width());
        // Obstacles carry a 1-px unknown ring, so keep 2 px clear of them.
        let near_obstacle = |row: usize, col: usize| {
            (row.saturating_sub(2)..(row + 3).min(h))
                .any(|y| (col.saturating_sub(2)..(col + 3).min(w)).any(|x| r.labels.get(y, x) == Label::Obstacle))
        };
        let mut checked = 0;
        for c in 20..w - 20 {
            let row = line.row_at(c as f64);
            let (above, below) = (row.floor() as usize - 2, row.ceil() as usize + 2);
            if below >= h || near_obstacle(above, c) || near_obstacle(below, c) {
                continue;
            }
            let (a, b) = (r.labels.get(above, c), r.labels.get(below, c));
            assert_eq!((a, b), (Label::Sky, Label::Water), "col {c}");
            checked += 1;
        }
        assert!(checked > 40);
    }

    #[test]
    fn rotation_only_grows_unknown() {
        let s = scene(2);
        for deg in [-15.0, 5.0] {
            let r = rotate_sample(&s, deg).unwrap();
            assert!(r.labels.count(Label::Unknown) >= s.labels.count(Label::Unknown));
        }
    }

    #[test]
    fn elastic_touches_only_water() {
        let s = scene(5);
        let spec = ElasticSpec {
            grid_step: 16,
            max_displacement: 3.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = elastic_water_deform(&s, &spec, &mut rng);
        assert_eq!(e.labels, s.labels);
        let plane = s.labels.height() * s.labels.width();
        let mut changed = 0;
        for p in 0..plane {
            let water = s.labels.labels()[p] == Label::Water;
            for k in 0..3 {
                let (a, b) = (s.image.data()[k * plane + p], e.image.data()[k * plane + p]);
                if !water {
                    assert_eq!(a.to_bits(), b.to_bits());
                } else if a != b {
                    changed += 1;
                }
            }
        }
        assert!(changed > 0);
        let water: Vec<usize> = (0..plane).filter(|&p| s.labels.labels()[p] == Label::Water).collect();
        let mean = |img: &Tensor| water.iter().map(|&p| img.data()[p]).sum::<f64>() / water.len() as f64;
        assert!((mean(&e.image) - mean(&s.image)).abs() / mean(&s.image) < 0.05);

        let zero = ElasticSpec {
            max_displacement: 0.0,
            ..spec
        };
        assert_eq!(elastic_water_deform(&s, &zero, &mut rng), s);
    }

    #[test]
    fn color_transfer_moments() {
        let s = scene(6);
        assert!(color_transfer(&s, &s)
            .unwrap()
            .image
            .data()
            .iter()
            .zip(s.image.data())
            .all(|(a, b)| (a - b).abs() < 1e-12));
        let reference = scene(7);
        let t = color_transfer(&s, &reference).unwrap();
        let plane = s.image.len() / 3;
        for k in 0..3 {
            let (m, _) = channel_moments(&t.image.data()[k * plane..(k + 1) * plane]);
            let (mr, _) = channel_moments(&reference.image.data()[k * plane..(k + 1) * plane]);
            assert!((m - mr).abs() <= 0.01, "channel {k}: {m} vs {mr}");
        }
        let mut gray = reference.clone();
        let g: Vec<f64> = gray.image.data()[..plane].to_vec();
        gray.image = Tensor::new(gray.image.shape(), g.repeat(3)).unwrap();
        let t = color_transfer(&s, &gray).unwrap();
        let means: Vec<f64> = (0..3)
            .map(|k| channel_moments(&t.image.data()[k * plane..(k + 1) * plane]).0)
            .collect();
        assert!((means[0] - means[1]).abs() < 0.01 && (means[1] - means[2]).abs() < 0.01);
    }

    #[test]
    fn expansion_counts_and_determinism() {
        let sources = vec![scene(1)];
        let mirror_only = AugSpec {
            mirror: true,
            ..AugSpec::none()
        };
        assert_eq!(expand_dataset(&sources, &mirror_only).count(), 2);
        assert_eq!(AugSpec::default().variants_per_sample(), 40);
        assert_eq!(expand_dataset(&sources, &AugSpec::default()).count(), 40);

        let two = vec![scene(1), scene(2)];
        let spec = AugSpec {
            rotations_deg: vec![5.0],
            ..AugSpec::default()
        };
        let a: Vec<SceneSample> = expand_dataset(&two, &spec).map(Result::unwrap).collect();
        let b: Vec<SceneSample> = expand_dataset(&two, &spec).map(Result::unwrap).collect();
        assert_eq!(a.len(), 2 * spec.variants_per_sample());
        assert_eq!(a, b);
        for s in &a {
            assert_eq!(s.image.shape(), two[0].image.shape());
        }
        assert!(expand_dataset(&[], &spec).next().is_none());
    }

    #[test]
    fn spec_validation() {
        assert!(AugSpec::default().validate().is_ok());
        let bad = AugSpec {
            rotations_deg: vec![60.0],
            ..AugSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugSpec {
            elastic: Some(ElasticSpec {
                grid_step: 4,
                max_displacement: 4.0,
            }),
            ..AugSpec::default()
        };
        assert!(bad.validate().is_err());
    }
}

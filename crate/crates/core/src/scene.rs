//! Procedural marine scenes with analytic labels and ground truth.
//!
//! A sky gradient sits above the IMU horizon and textured water below it.
//! Haze washes out the boundary near the horizon, glitter streaks and
//! mirrored obstacle reflections are painted on the water but labelled as
//! water, and obstacles either float or protrude through the edge.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::horizon::{horizon_line, CameraIntrinsics, HorizonLine, ImuSample};
use crate::metrics::FrameGT;
use crate::postprocess::{
    connected_components, min_area_for, water_edge, water_region, BBox, Connectivity, Label, Mask,
    SegLabelMap,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub focal_px: f64,
    pub roll_range: (f64, f64),
    pub pitch_range: (f64, f64),
    /// Amplitude of the wave pattern on the water.
    pub water_texture: f64,
    /// Chance that a scene carries specular glitter streaks.
    pub glitter_probability: f64,
    /// Opacity of obstacle reflections.
    pub reflection_strength: f64,
    /// Inclusive range of obstacles per scene.
    pub obstacle_count: (usize, usize),
    /// Inclusive range of obstacle width and height, pixels.
    pub obstacle_size: (usize, usize),
    /// Chance that an obstacle slot holds a single-pixel distractor below the detection threshold.
    pub distractor_fraction: f64,
    /// Chance that an obstacle protrudes through the water edge rather than floating.
    pub protruding_fraction: f64,
    /// Upper bound of the per-scene haze strength at the horizon. Haze
    /// reaches further into the water than into the sky.
    pub haze: f64,
    /// Per-pixel noise amplitude.
    pub noise: f64,
    /// Frames per sequence id.
    pub sequence_length: usize,
    pub seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            height: 96,
            width: 128,
            focal_px: 100.0,
            roll_range: (-0.12, 0.12),
            pitch_range: (-0.1, 0.1),
            water_texture: 0.05,
            glitter_probability: 0.3,
            reflection_strength: 0.35,
            obstacle_count: (0, 4),
            obstacle_size: (6, 16),
            distractor_fraction: 0.1,
            protruding_fraction: 0.4,
            haze: 0.8,
            noise: 0.02,
            sequence_length: 25,
            seed: 0,
        }
    }
}

impl SceneParams {
    pub fn camera(&self) -> CameraIntrinsics {
        CameraIntrinsics::centered(self.width, self.height, self.focal_px)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let range_ok = |(lo, hi): (f64, f64)| {
            lo.is_finite() && hi.is_finite() && lo <= hi && lo > -1.5 && hi < 1.5
        };
        if self.height < 16 || self.width < 16 {
            return bad(format!("scene size {}x{} too small", self.height, self.width));
        }
        if !range_ok(self.roll_range) || !range_ok(self.pitch_range) {
            return bad(format!(
                "roll/pitch ranges must be ordered and within ±1.5 rad: {:?} {:?}",
                self.roll_range, self.pitch_range
            ));
        }
        if self.obstacle_count.0 > self.obstacle_count.1 {
            return bad(format!("obstacle count range {:?} is reversed", self.obstacle_count));
        }
        let (smin, smax) = self.obstacle_size;
        if smin > smax || smax * 3 > self.height.min(self.width) * 2 {
            return bad(format!("obstacle size range {:?} invalid for the frame", self.obstacle_size));
        }
        if smin * smin < min_area_for(self.height, self.width) {
            return bad(format!(
                "obstacles of {smin} px would fall below the detection area {}",
                min_area_for(self.height, self.width)
            ));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if ![
            self.glitter_probability,
            self.reflection_strength,
            self.distractor_fraction,
            self.protruding_fraction,
            self.haze,
        ]
        .into_iter()
        .all(unit)
        {
            return bad("probabilities and strengths must lie in [0, 1]".into());
        }
        if !(self.focal_px > 0.0) || !(self.water_texture >= 0.0) || !(self.noise >= 0.0) {
            return bad("focal length must be positive, texture and noise non-negative".into());
        }
        if self.sequence_length == 0 {
            return bad("sequence_length must be positive".into());
        }
        // The horizon must stay inside the frame for every sampled attitude.
        let cam = self.camera();
        for roll in [self.roll_range.0, self.roll_range.1] {
            for pitch in [self.pitch_range.0, self.pitch_range.1] {
                let line = horizon_line(ImuSample { roll, pitch }, &cam);
                for col in [0.0, (self.width - 1) as f64] {
                    let row = line.row_at(col);
                    if row < 4.0 || row > self.height as f64 - 8.0 {
                        return bad(format!(
                            "horizon leaves the frame at roll {roll} pitch {pitch} (row {row:.1})"
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SceneSample {
    pub frame: usize,
    pub sequence: String,
    /// `[3, H, W]`, values are multiples of 1/255.
    pub image: Tensor,
    pub labels: SegLabelMap,
    pub imu: ImuSample,
    pub camera: CameraIntrinsics,
    pub gt: FrameGT,
}

impl PartialEq for SceneSample {
    fn eq(&self, o: &Self) -> bool {
        self.frame == o.frame
            && self.sequence == o.sequence
            && self.image.shape() == o.image.shape()
            && self.image.data() == o.image.data()
            && self.labels == o.labels
            && self.imu == o.imu
            && self.camera == o.camera
            && self.gt == o.gt
    }
}

/// Seed of frame `index` within a dataset seeded with `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.random()
}

/// Frames `0..count` of the dataset defined by `params.seed`.
pub fn generate_dataset(params: &SceneParams, count: usize) -> Result<Vec<SceneSample>> {
    (0..count)
        .map(|i| {
            let mut s = generate_scene(params, scene_seed(params.seed, i))?;
            s.frame = i;
            s.sequence = format!("seq{:02}", i / params.sequence_length);
            Ok(s)
        })
        .collect()
}

type Rgb = [f64; 3];

fn lerp(a: Rgb, b: Rgb, t: f64) -> Rgb {
    [0, 1, 2].map(|k| a[k] + (b[k] - a[k]) * t)
}

fn jitter(rng: &mut ChaCha8Rng, base: Rgb, amount: f64) -> Rgb {
    base.map(|v| (v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Ellipse,
    Boat,
    Block,
}

#[derive(Debug, Clone)]
struct Obstacle {
    bbox: BBox,
    shape: Shape,
    color: Rgb,
    distractor: bool,
}

impl Obstacle {
    fn contains(&self, r: usize, c: usize) -> bool {
        let b = self.bbox;
        if r < b.y1 || r > b.y2 || c < b.x1 || c > b.x2 {
            return false;
        }
        let w = (b.x2 + 1 - b.x1) as f64;
        let h = (b.y2 + 1 - b.y1) as f64;
        let u = 2.0 * ((c - b.x1) as f64 + 0.5) / w - 1.0;
        let v = ((r - b.y1) as f64 + 0.5) / h;
        match self.shape {
            Shape::Ellipse => u * u + (2.0 * v - 1.0).powi(2) <= 1.0,
            Shape::Block => true,
            // Cabin on top of a hull that narrows towards the keel.
            Shape::Boat if v < 0.5 => u.abs() <= 0.45,
            Shape::Boat => u.abs() <= 1.0 - 0.4 * (v - 0.5) / 0.5,
        }
    }

    fn pixels(&self, width: usize) -> Vec<usize> {
        let b = self.bbox;
        let mut out = Vec::new();
        for r in b.y1..=b.y2 {
            for c in b.x1..=b.x2 {
                if self.contains(r, c) {
                    out.push(r * width + c);
                }
            }
        }
        out
    }
}

fn boxes_conflict(a: &BBox, b: &BBox, margin: usize) -> bool {
    a.x1 <= b.x2 + margin && b.x1 <= a.x2 + margin && a.y1 <= b.y2 + margin && b.y1 <= a.y2 + margin
}

/// Integer row of the first pixel strictly below the horizon at `col`.
fn first_water_row(line: &HorizonLine, col: usize) -> isize {
    line.row_at(col as f64).floor() as isize + 1
}

fn place_obstacles(params: &SceneParams, line: &HorizonLine, rng: &mut ChaCha8Rng) -> Vec<Obstacle> {
    let (h, w) = (params.height, params.width);
    let min_area = min_area_for(h, w);
    let palette: [Rgb; 6] = [
        [0.85, 0.15, 0.1],
        [0.92, 0.8, 0.12],
        [0.93, 0.93, 0.9],
        [0.12, 0.1, 0.1],
        [0.95, 0.5, 0.1],
        [0.45, 0.45, 0.48],
    ];
    let count = rng.random_range(params.obstacle_count.0..=params.obstacle_count.1);
    let mut placed: Vec<Obstacle> = Vec::new();
    for _ in 0..count {
        let distractor = rng.random_bool(params.distractor_fraction);
        let protruding = !distractor && rng.random_bool(params.protruding_fraction);
        let shape = [Shape::Ellipse, Shape::Boat, Shape::Block][rng.random_range(0..3)];
        let base = palette[rng.random_range(0..palette.len())];
        let color = jitter(rng, base, 0.05);
        for _attempt in 0..20 {
            let (ow, oh) = if distractor {
                (1, 1)
            } else {
                (
                    rng.random_range(params.obstacle_size.0..=params.obstacle_size.1),
                    rng.random_range(params.obstacle_size.0..=params.obstacle_size.1) * 3 / 4 + 2,
                )
            };
            if ow + 2 >= w {
                continue;
            }
            let x1 = rng.random_range(1..w - ow - 1);
            let x2 = x1 + ow - 1;
            let edge_rows = (x1..=x2).map(|c| first_water_row(line, c));
            let (top_edge, low_edge) = edge_rows.fold((isize::MAX, isize::MIN), |(a, b), r| (a.min(r), b.max(r)));
            let (y1, y2) = if protruding {
                // Bottom below the edge at every covered column, top above it.
                let sink = rng.random_range(1..=(oh / 3).max(1)) as isize;
                let y2 = low_edge + sink;
                (y2 - oh as isize + 1, y2)
            } else {
                let lo = top_edge.max(low_edge) + 3;
                let hi = h as isize - 3 - oh as isize;
                if lo > hi {
                    continue;
                }
                let y1 = rng.random_range(lo as i64..=hi as i64) as isize;
                (y1, y1 + oh as isize - 1)
            };
            if y1 < 1 || y2 > h as isize - 3 {
                continue;
            }
            let candidate = Obstacle {
                bbox: BBox {
                    x1,
                    y1: y1 as usize,
                    x2,
                    y2: y2 as usize,
                },
                shape,
                color,
                distractor,
            };
            if placed.iter().any(|o| boxes_conflict(&o.bbox, &candidate.bbox, 4)) {
                continue;
            }
            let pixels = candidate.pixels(w);
            if !distractor {
                let mut m = Mask::empty(h, w);
                for &p in &pixels {
                    m.set(p / w, p % w, true);
                }
                let comps = connected_components(&m, Connectivity::Four);
                if comps.len() != 1 || pixels.len() < min_area {
                    continue;
                }
            } else if pixels.len() >= min_area {
                continue;
            }
            placed.push(candidate);
            break;
        }
    }
    placed
}

/// Marks a pixel unknown when a 4-neighbour carries a label of higher rank
/// (obstacle over water over sky), giving a 1-px band on the lower-ranked
/// side of every boundary.
pub fn unknown_band(labels: &SegLabelMap) -> SegLabelMap {
    let rank = |l: Label| match l {
        Label::Sky => 0,
        Label::Water => 1,
        Label::Obstacle => 2,
        Label::Unknown => 3,
    };
    let (h, w) = (labels.height(), labels.width());
    let mut out = labels.clone();
    for r in 0..h {
        for c in 0..w {
            let own = rank(labels.get(r, c));
            let higher = [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)].iter().any(|&(dr, dc)| {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                nr >= 0
                    && nc >= 0
                    && (nr as usize) < h
                    && (nc as usize) < w
                    && rank(labels.get(nr as usize, nc as usize)) > own
            });
            if higher {
                out.set(r, c, Label::Unknown);
            }
        }
    }
    out
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// One scene, a pure function of `params` and `seed`. Frame and sequence ids are left at 0 / "seq00".
pub fn generate_scene(params: &SceneParams, seed: u64) -> Result<SceneSample> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (params.height, params.width);
    let camera = params.camera();
    let imu = ImuSample::new(
        rng.random_range(params.roll_range.0..=params.roll_range.1),
        rng.random_range(params.pitch_range.0..=params.pitch_range.1),
    )?;
    let line = horizon_line(imu, &camera);

    let sky_top = jitter(&mut rng, [0.45, 0.62, 0.85], 0.1);
    let sky_low = jitter(&mut rng, [0.78, 0.85, 0.92], 0.06);
    let water_near = jitter(&mut rng, [0.08, 0.22, 0.32], 0.06);
    let water_far = jitter(&mut rng, [0.25, 0.4, 0.5], 0.08);
    let haze_color = jitter(&mut rng, [0.82, 0.85, 0.88], 0.05);
    let haze = rng.random_range(0.0..=params.haze);
    let haze_width = rng.random_range(2.0..6.0);
    // Distant water fades into the haze over a longer stretch than the sky,
    // so the visible sea-sky boundary sits below the true horizon.
    let water_fog_width = haze_width * rng.random_range(2.0..4.0);
    let phases: [f64; 3] = [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)];

    let obstacles = place_obstacles(params, &line, &mut rng);

    let mut truth = SegLabelMap::filled(h, w, Label::Sky);
    let mut image = vec![[0.0; 3]; h * w];
    for r in 0..h {
        for c in 0..w {
            let d = r as f64 - line.row_at(c as f64);
            let color = if d > 0.0 {
                truth.set(r, c, Label::Water);
                let depth = (d / (h as f64 - line.row_at(c as f64))).clamp(0.0, 1.0);
                let base = lerp(water_far, water_near, depth.sqrt());
                let wave = params.water_texture
                    * (0.7 * (TAU * r as f64 / (2.0 + 0.3 * d) + phases[0]).sin()
                        + 0.3 * (TAU * c as f64 / (5.0 + 0.4 * d) + 0.5 * r as f64 + phases[1]).sin());
                base.map(|v| v + wave)
            } else {
                let t = (-d / (0.7 * h as f64)).clamp(0.0, 1.0);
                lerp(sky_low, sky_top, t)
            };
            let fog = haze * (-d.abs() / if d > 0.0 { water_fog_width } else { haze_width }).exp();
            image[r * w + c] = lerp(color, haze_color, fog);
        }
    }

    if rng.random_bool(params.glitter_probability) {
        for _ in 0..rng.random_range(5..20) {
            let c0 = rng.random_range(0..w);
            let len = rng.random_range(2..7);
            let r = rng.random_range(0..h);
            let gain = rng.random_range(0.4..0.9);
            for c in c0..(c0 + len).min(w) {
                if r as f64 - line.row_at(c as f64) > 2.0 {
                    image[r * w + c] = image[r * w + c].map(|v| v + gain);
                }
            }
        }
    }

    // Reflections mirror each obstacle about its bottom row.
    for o in &obstacles {
        let b = o.bbox;
        let span = b.y2 + 1 - b.y1;
        for r in b.y2 + 1..(b.y2 + 1 + span).min(h) {
            let src = 2 * b.y2 + 1 - r;
            let fade = params.reflection_strength * (1.0 - (r - b.y2) as f64 / (span + 1) as f64);
            for c in b.x1..=b.x2 {
                if o.contains(src, c) && truth.get(r, c) == Label::Water {
                    let dark = o.color.map(|v| 0.8 * v);
                    image[r * w + c] = lerp(image[r * w + c], dark, fade);
                }
            }
        }
    }

    let mut gt_boxes = Vec::new();
    for o in &obstacles {
        let b = o.bbox;
        let height = (b.y2 + 1 - b.y1) as f64;
        let mut found = BBox {
            x1: usize::MAX,
            y1: usize::MAX,
            x2: 0,
            y2: 0,
        };
        for r in b.y1..=b.y2 {
            for c in b.x1..=b.x2 {
                if o.contains(r, c) {
                    truth.set(r, c, Label::Obstacle);
                    let shade = 0.12 * (0.5 - (r - b.y1) as f64 / height);
                    image[r * w + c] = o.color.map(|v| v + shade);
                    found = BBox {
                        x1: found.x1.min(c),
                        y1: found.y1.min(r),
                        x2: found.x2.max(c),
                        y2: found.y2.max(r),
                    };
                }
            }
        }
        if !o.distractor {
            gt_boxes.push(found);
        }
    }

    let mut data = vec![0.0; 3 * h * w];
    for (p, rgb) in image.iter().enumerate() {
        for k in 0..3 {
            let n = params.noise * (rng.random::<f64>() + rng.random::<f64>() - 1.0);
            data[k * h * w + p] = quantize(rgb[k] + n);
        }
    }

    let region = water_region(&truth, Connectivity::Four);
    let gt_edge = water_edge(&region)
        .rows
        .iter()
        .enumerate()
        .filter_map(|(c, r)| r.map(|r| (c as f64, r as f64)))
        .collect();
    gt_boxes.sort_by_key(|b| (b.y1, b.x1));

    Ok(SceneSample {
        frame: 0,
        sequence: "seq00".into(),
        image: Tensor::new(&[3, h, w], data)?,
        labels: unknown_band(&truth),
        imu,
        camera,
        gt: FrameGT { gt_boxes, gt_edge },
    })
}

//! Segmentation mask → navigable water region, water edge and obstacle detections.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Working resolution at which the minimum obstacle area of 5×5 pixels applies.
pub const REFERENCE_AREA: (usize, usize) = (384, 512);
pub const REFERENCE_MIN_AREA: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Water,
    Sky,
    Obstacle,
    Unknown,
}

impl Label {
    /// Trainable classes in channel order.
    pub const CLASSES: [Label; 3] = [Label::Water, Label::Sky, Label::Obstacle];

    pub fn code(self) -> u8 {
        match self {
            Label::Water => 0,
            Label::Sky => 1,
            Label::Obstacle => 2,
            Label::Unknown => 255,
        }
    }

    pub fn from_code(code: u8) -> Option<Label> {
        match code {
            0 => Some(Label::Water),
            1 => Some(Label::Sky),
            2 => Some(Label::Obstacle),
            255 => Some(Label::Unknown),
            _ => None,
        }
    }

    /// Output channel of the class, `None` for unknown.
    pub fn class_index(self) -> Option<usize> {
        match self {
            Label::Unknown => None,
            l => Some(l.code() as usize),
        }
    }
}

/// Row-major grid of labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegLabelMap {
    height: usize,
    width: usize,
    labels: Vec<Label>,
}

impl SegLabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::contract(format!(
                "label map {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: Label) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn from_codes(height: usize, width: usize, codes: &[u8]) -> Result<Self> {
        let labels = codes
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                Label::from_code(c).ok_or_else(|| {
                    Error::contract(format!("invalid label value {c} at pixel {i}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(height, width, labels)
    }

    pub fn to_codes(&self) -> Vec<u8> {
        self.labels.iter().map(|l| l.code()).collect()
    }

    /// Per-pixel argmax over the class channels of a `[3, H, W]` probability tensor.
    pub fn from_probs(probs: &Tensor) -> Result<Self> {
        let (c, h, w) = probs.chw()?;
        if c != Label::CLASSES.len() {
            return Err(Error::contract(format!("expected 3 class channels, got {c}")));
        }
        let plane = h * w;
        let d = probs.data();
        let labels = (0..plane)
            .map(|p| {
                let mut best = 0;
                for k in 1..c {
                    if d[k * plane + p] > d[best * plane + p] {
                        best = k;
                    }
                }
                Label::CLASSES[best]
            })
            .collect();
        Self::new(h, w, labels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> Label {
        self.labels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, label: Label) {
        self.labels[row * self.width + col] = label;
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn mask_of(&self, label: Label) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            bits: self.labels.iter().map(|&l| l == label).collect(),
        }
    }

    /// Nearest-neighbour downsample; each output pixel takes the label at the
    /// center of its `k×k` source block, `src = dst·k + k/2`.
    pub fn downsample_nearest(&self, (h, w): (usize, usize)) -> Result<Self> {
        if h == 0 || w == 0 || self.height % h != 0 || self.width % w != 0 {
            return Err(Error::contract(format!(
                "cannot downsample labels {}x{} to {h}x{w}",
                self.height, self.width
            )));
        }
        let (kr, kc) = (self.height / h, self.width / w);
        let mut labels = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                labels.push(self.get(r * kr + kr / 2, c * kc + kc / 2));
            }
        }
        Self::new(h, w, labels)
    }

    /// Replaces unknown pixels by the majority of their known 4-neighbours,
    /// ties resolved sky, then water, then obstacle. Repeats until no unknown
    /// pixel has a known neighbour; a map with no known pixel at all is
    /// returned unchanged.
    pub fn resolve_unknown(&self) -> Self {
        let mut out = self.clone();
        loop {
            let mut changes = Vec::new();
            for r in 0..self.height {
                for c in 0..self.width {
                    if out.get(r, c) != Label::Unknown {
                        continue;
                    }
                    let mut votes = [0usize; 3];
                    for (nr, nc) in neighbours4(r, c, self.height, self.width) {
                        if let Some(k) = out.get(nr, nc).class_index() {
                            votes[k] += 1;
                        }
                    }
                    // Later entries win ties.
                    let best = [Label::Obstacle, Label::Water, Label::Sky]
                        .into_iter()
                        .max_by_key(|l| votes[l.code() as usize])
                        .expect("non-empty");
                    if votes[best.code() as usize] > 0 {
                        changes.push((r, c, best));
                    }
                }
            }
            if changes.is_empty() {
                return out;
            }
            for (r, c, l) in changes {
                out.set(r, c, l);
            }
        }
    }
}

fn neighbours4(r: usize, c: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let up = (r > 0).then(|| (r - 1, c));
    let down = (r + 1 < h).then_some((r + 1, c));
    let left = (c > 0).then(|| (r, c - 1));
    let right = (c + 1 < w).then_some((r, c + 1));
    [up, down, left, right].into_iter().flatten()
}

/// Binary grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::contract(format!(
                "mask {height}x{width} needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.bits[row * self.width + col] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.contains(&true)
    }

    /// First and last rows holding a set pixel.
    pub fn row_extent(&self) -> Option<(usize, usize)> {
        let first = self.bits.iter().position(|&b| b)?;
        let last = self.bits.iter().rposition(|&b| b)?;
        Some((first / self.width, last / self.width))
    }
}

/// Inclusive pixel box; serialized as `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct BBox {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl From<[usize; 4]> for BBox {
    fn from([x1, y1, x2, y2]: [usize; 4]) -> Self {
        Self { x1, y1, x2, y2 }
    }
}

impl From<BBox> for [usize; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub fn is_valid(&self) -> bool {
        self.x1 <= self.x2 && self.y1 <= self.y2
    }

    pub fn area(&self) -> usize {
        (self.x2 + 1 - self.x1) * (self.y2 + 1 - self.y1)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = self.x2.min(other.x2) as isize + 1 - self.x1.max(other.x1) as isize;
        let iy = self.y2.min(other.y2) as isize + 1 - self.y1.max(other.y1) as isize;
        if ix <= 0 || iy <= 0 {
            return 0.0;
        }
        let inter = (ix * iy) as f64;
        inter / (self.area() as f64 + other.area() as f64 - inter)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    /// Linear pixel indices in ascending order.
    pub pixels: Vec<usize>,
    pub bbox: BBox,
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

/// Components of the set pixels, largest first; equal sizes ordered by their
/// first pixel in row-major order.
pub fn connected_components(mask: &Mask, connectivity: Connectivity) -> Vec<Component> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            let (r, c) = ((p / w) as isize, (p % w) as isize);
            for &(dr, dc) in connectivity.offsets() {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let q = nr as usize * w + nc as usize;
                if mask.bits[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
        pixels.sort_unstable();
        let mut bbox = BBox {
            x1: usize::MAX,
            y1: usize::MAX,
            x2: 0,
            y2: 0,
        };
        for &p in &pixels {
            let (r, c) = (p / w, p % w);
            bbox.x1 = bbox.x1.min(c);
            bbox.x2 = bbox.x2.max(c);
            bbox.y1 = bbox.y1.min(r);
            bbox.y2 = bbox.y2.max(r);
        }
        out.push(Component { pixels, bbox });
    }
    out.sort_by(|a, b| b.area().cmp(&a.area()).then(a.pixels[0].cmp(&b.pixels[0])));
    out
}

/// The largest connected component of water pixels.
pub fn water_region(seg: &SegLabelMap, connectivity: Connectivity) -> Mask {
    let water = seg.mask_of(Label::Water);
    let mut region = Mask::empty(seg.height, seg.width);
    if let Some(largest) = connected_components(&water, connectivity).first() {
        for &p in &largest.pixels {
            region.bits[p] = true;
        }
    }
    region
}

/// Per column, the topmost row of the water region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WaterEdge {
    pub rows: Vec<Option<usize>>,
}

impl WaterEdge {
    pub const SENTINEL: i64 = -1;

    /// Rows with `-1` for columns without water.
    pub fn to_signed(&self) -> Vec<i64> {
        self.rows
            .iter()
            .map(|r| r.map_or(Self::SENTINEL, |v| v as i64))
            .collect()
    }

    pub fn from_signed(rows: &[i64]) -> Result<Self> {
        let rows = rows
            .iter()
            .map(|&r| match r {
                Self::SENTINEL => Ok(None),
                r if r >= 0 => Ok(Some(r as usize)),
                r => Err(Error::contract(format!("invalid edge row {r}"))),
            })
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }
}

pub fn water_edge(region: &Mask) -> WaterEdge {
    let rows = (0..region.width)
        .map(|c| (0..region.height).find(|&r| region.get(r, c)))
        .collect();
    WaterEdge { rows }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub area: usize,
}

/// The 5×5 minimum obstacle area scaled to an `h×w` frame, at least one pixel.
pub fn min_area_for(height: usize, width: usize) -> usize {
    let (rh, rw) = REFERENCE_AREA;
    let scaled = REFERENCE_MIN_AREA as f64 * (height * width) as f64 / (rh * rw) as f64;
    (scaled.round() as usize).max(1)
}

/// Obstacle components lying within the water region.
///
/// A component qualifies when its rows overlap the region's row extent and at
/// least one of its pixels is inside or 4-adjacent to the region, so obstacles
/// protruding above the water edge are kept. Sorted by area, largest first.
pub fn extract_obstacles(
    seg: &SegLabelMap,
    region: &Mask,
    min_area_px: usize,
    connectivity: Connectivity,
) -> Vec<Detection> {
    let Some((top, bottom)) = region.row_extent() else {
        return Vec::new();
    };
    let (h, w) = (seg.height, seg.width);
    let touches = |p: usize| {
        let (r, c) = (p / w, p % w);
        region.bits[p] || neighbours4(r, c, h, w).any(|(nr, nc)| region.get(nr, nc))
    };
    let mut out: Vec<Detection> = connected_components(&seg.mask_of(Label::Obstacle), connectivity)
        .into_iter()
        .filter(|comp| comp.area() >= min_area_px)
        .filter(|comp| comp.bbox.y2 >= top && comp.bbox.y1 <= bottom)
        .filter(|comp| comp.pixels.iter().any(|&p| touches(p)))
        .map(|comp| Detection {
            bbox: comp.bbox,
            area: comp.area(),
        })
        .collect();
    out.sort_by(|a, b| b.area.cmp(&a.area));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    /// `None` scales the reference minimum to the frame size.
    pub min_area_px: Option<usize>,
    pub connectivity: Connectivity,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            min_area_px: None,
            connectivity: Connectivity::Four,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    pub region: Mask,
    pub edge: WaterEdge,
    pub detections: Vec<Detection>,
}

pub fn postprocess(seg: &SegLabelMap, cfg: &PostprocessConfig) -> FrameResult {
    let region = water_region(seg, cfg.connectivity);
    let edge = water_edge(&region);
    let min_area = cfg
        .min_area_px
        .unwrap_or_else(|| min_area_for(seg.height, seg.width));
    let detections = extract_obstacles(seg, &region, min_area, cfg.connectivity);
    FrameResult {
        region,
        edge,
        detections,
    }
}

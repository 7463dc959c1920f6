//! Water-edge error, detection matching and F-measure, aggregated per sequence.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::{BBox, WaterEdge};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.3;

/// Annotated obstacles and the water-edge polyline `(x, y)` of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameGT {
    pub gt_boxes: Vec<BBox>,
    pub gt_edge: Vec<(f64, f64)>,
}

impl FrameGT {
    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self.gt_boxes.iter().find(|b| !b.is_valid()) {
            return Err(Error::contract(format!("invalid gt box {b:?}")));
        }
        if self.gt_edge.windows(2).any(|p| !(p[1].0 > p[0].0)) {
            return Err(Error::contract("gt edge x coordinates must strictly increase"));
        }
        Ok(())
    }
}

/// Per-column rows of a polyline by linear interpolation; columns outside its x span are `None`.
pub fn rasterize_polyline(polyline: &[(f64, f64)], width: usize) -> Vec<Option<f64>> {
    (0..width)
        .map(|c| {
            let x = c as f64;
            polyline.windows(2).find_map(|seg| {
                let ((x0, y0), (x1, y1)) = (seg[0], seg[1]);
                (x0 <= x && x <= x1).then(|| y0 + (y1 - y0) * (x - x0) / (x1 - x0))
            })
            .or_else(|| match polyline {
                [(x0, y0)] if *x0 == x => Some(*y0),
                _ => None,
            })
        })
        .collect()
}

/// Root-mean-square row difference over columns defined in both; `None` without overlap.
pub fn edge_error(pred: &WaterEdge, gt: &[(f64, f64)]) -> Option<f64> {
    let gt_rows = rasterize_polyline(gt, pred.rows.len());
    let (sum, n) = pred
        .rows
        .iter()
        .zip(&gt_rows)
        .filter_map(|(p, g)| Some((p.as_ref()?, g.as_ref()?)))
        .fold((0.0, 0usize), |(s, n), (&p, &g)| (s + (p as f64 - g).powi(2), n + 1));
    (n > 0).then(|| (sum / n as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MatchCounts {
    pub fn new(tp: usize, fp: usize, fn_: usize) -> Self {
        Self { tp, fp, fn_ }
    }
}

impl Add for MatchCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.tp + o.tp, self.fp + o.fp, self.fn_ + o.fn_)
    }
}

impl AddAssign for MatchCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Greedy one-to-one matching by descending IoU, accepting pairs at or above the threshold.
pub fn match_detections(pred: &[BBox], gt: &[BBox], iou_threshold: f64) -> MatchCounts {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let iou = p.iou(g);
            if iou >= iou_threshold && iou > 0.0 {
                pairs.push((iou, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut tp = 0;
    for (_, i, j) in pairs {
        if !pred_used[i] && !gt_used[j] {
            pred_used[i] = true;
            gt_used[j] = true;
            tp += 1;
        }
    }
    MatchCounts::new(tp, pred.len() - tp, gt.len() - tp)
}

/// `200·TP / (2·TP + FP + FN)` in percent; `None` when all counts are zero.
pub fn f_measure(c: MatchCounts) -> Option<f64> {
    let denom = 2 * c.tp + c.fp + c.fn_;
    (denom > 0).then(|| 200.0 * c.tp as f64 / denom as f64)
}

/// Predictions for one frame together with its ground truth, if any.
#[derive(Debug, Clone)]
pub struct EvalFrame {
    pub sequence: String,
    pub frame: usize,
    pub detections: Vec<BBox>,
    pub edge: WaterEdge,
    pub gt: Option<FrameGT>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub frames: usize,
    /// Mean of per-frame edge RMSE, in pixels.
    pub edge_mean: Option<f64>,
    pub edge_std: Option<f64>,
    pub counts: MatchCounts,
    pub f_measure: Option<f64>,
    /// Frames whose edge had no column in common with the ground truth.
    pub edge_skipped: usize,
    #[serde(skip)]
    edge_errors: Vec<f64>,
}

impl SequenceReport {
    fn push(&mut self, counts: MatchCounts, edge: Option<f64>) {
        self.frames += 1;
        self.counts += counts;
        match edge {
            Some(e) => self.edge_errors.push(e),
            None => self.edge_skipped += 1,
        }
    }

    fn finish(&mut self) {
        self.f_measure = f_measure(self.counts);
        let n = self.edge_errors.len();
        if n > 0 {
            let mean = self.edge_errors.iter().sum::<f64>() / n as f64;
            let var = self.edge_errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n as f64;
            self.edge_mean = Some(mean);
            self.edge_std = Some(var.sqrt());
        }
    }

    pub fn edge_errors(&self) -> &[f64] {
        &self.edge_errors
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: SequenceReport,
    pub sequences: BTreeMap<String, SequenceReport>,
    /// Frames excluded for lack of ground truth.
    pub warnings: usize,
}

pub fn evaluate(frames: impl IntoIterator<Item = EvalFrame>, iou_threshold: f64) -> EvalReport {
    let mut report = EvalReport::default();
    for f in frames {
        let Some(gt) = &f.gt else {
            report.warnings += 1;
            continue;
        };
        let counts = match_detections(&f.detections, &gt.gt_boxes, iou_threshold);
        let edge = edge_error(&f.edge, &gt.gt_edge);
        report.overall.push(counts, edge);
        report.sequences.entry(f.sequence.clone()).or_default().push(counts, edge);
    }
    report.overall.finish();
    report.sequences.values_mut().for_each(SequenceReport::finish);
    report
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

impl EvalReport {
    /// Plain-text table, one row per sequence and a final overall row.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>6} {:>16} {:>7} {:>7} {:>7} {:>6}",
            "sequence", "frames", "edge px (std)", "TP", "FP", "FN", "F"
        );
        let rows = self
            .sequences
            .iter()
            .map(|(k, v)| (k.as_str(), v))
            .chain(std::iter::once(("overall", &self.overall)));
        for (name, r) in rows {
            let edge = format!("{} ({})", fmt_opt(r.edge_mean, 1), fmt_opt(r.edge_std, 1));
            let _ = writeln!(
                s,
                "{:<12} {:>6} {:>16} {:>7} {:>7} {:>7} {:>6}",
                name,
                r.frames,
                edge,
                r.counts.tp,
                r.counts.fp,
                r.counts.fn_,
                fmt_opt(r.f_measure, 1)
            );
        }
        if self.warnings > 0 {
            let _ = writeln!(s, "{} frame(s) without ground truth were excluded", self.warnings);
        }
        s
    }
}

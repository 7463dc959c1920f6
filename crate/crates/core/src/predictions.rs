//! Prediction files written by inference and read back for evaluation.
//!
//! ```text
//! masks/NNNN.png       predicted labels 0/1/2
//! overlays/NNNN.png    optional visualisation
//! detections.jsonl     {"frame": n, "sequence": s, "detections": [{"bbox": [x1, y1, x2, y2], "area": a}, ...]}
//! edges.jsonl          {"frame": n, "sequence": s, "edge": [row or -1 per column]}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{json_line, read_json_lines, write_bytes};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalFrame, EvalReport, FrameGT};
use crate::postprocess::{Detection, WaterEdge};

pub const DETECTIONS: &str = "detections.jsonl";
pub const EDGES: &str = "edges.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub frame: usize,
    pub sequence: String,
    pub detections: Vec<Detection>,
    pub edge: WaterEdge,
}

#[derive(Serialize, Deserialize)]
struct DetectionsLine {
    frame: usize,
    sequence: String,
    detections: Vec<Detection>,
}

#[derive(Serialize, Deserialize)]
struct EdgeLine {
    frame: usize,
    sequence: String,
    edge: Vec<i64>,
}

/// Writes both JSON-lines files, one line per record in each.
pub fn write_predictions(dir: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut dets = String::new();
    let mut edges = String::new();
    for r in records {
        dets += &json_line(&DetectionsLine {
            frame: r.frame,
            sequence: r.sequence.clone(),
            detections: r.detections.clone(),
        })?;
        edges += &json_line(&EdgeLine {
            frame: r.frame,
            sequence: r.sequence.clone(),
            edge: r.edge.to_signed(),
        })?;
    }
    write_bytes(&dir.join(DETECTIONS), dets.as_bytes())?;
    write_bytes(&dir.join(EDGES), edges.as_bytes())
}

pub fn read_predictions(dir: &Path) -> Result<Vec<PredictionRecord>> {
    let det_path = dir.join(DETECTIONS);
    let edge_path = dir.join(EDGES);
    let dets: Vec<DetectionsLine> = read_json_lines(&det_path)?;
    let mut edges: BTreeMap<usize, EdgeLine> = BTreeMap::new();
    for e in read_json_lines::<EdgeLine>(&edge_path)? {
        let frame = e.frame;
        if edges.insert(frame, e).is_some() {
            return Err(Error::parse(&edge_path, 0, format!("duplicate edge for frame {frame}")));
        }
    }
    let mut out = Vec::with_capacity(dets.len());
    let mut seen = BTreeSet::new();
    for d in dets {
        if !seen.insert(d.frame) {
            return Err(Error::parse(&det_path, 0, format!("duplicate detections for frame {}", d.frame)));
        }
        let e = edges
            .remove(&d.frame)
            .ok_or_else(|| Error::parse(&edge_path, 0, format!("no edge for frame {}", d.frame)))?;
        let edge = WaterEdge::from_signed(&e.edge)
            .map_err(|err| Error::parse(&edge_path, 0, format!("frame {}: {err}", d.frame)))?;
        out.push(PredictionRecord {
            frame: d.frame,
            sequence: d.sequence,
            detections: d.detections,
            edge,
        });
    }
    if let Some(frame) = edges.keys().next() {
        return Err(Error::parse(&det_path, 0, format!("no detections line for frame {frame}")));
    }
    Ok(out)
}

/// Scores prediction records against ground truth keyed by frame. Both sides
/// must cover the same frames; the error lists every offender. An empty
/// prediction set scores every GT box as missed and leaves F undefined.
pub fn evaluate_predictions(
    records: &[PredictionRecord],
    gt: &BTreeMap<usize, FrameGT>,
    iou_threshold: f64,
) -> Result<EvalReport> {
    if records.is_empty() {
        let mut report = evaluate(std::iter::empty(), iou_threshold);
        report.overall.counts.fn_ = gt.values().map(|g| g.gt_boxes.len()).sum();
        return Ok(report);
    }
    let predicted: BTreeSet<usize> = records.iter().map(|r| r.frame).collect();
    let no_gt: Vec<usize> = predicted.iter().copied().filter(|f| !gt.contains_key(f)).collect();
    let no_pred: Vec<usize> = gt.keys().copied().filter(|f| !predicted.contains(f)).collect();
    if !no_gt.is_empty() || !no_pred.is_empty() {
        return Err(Error::Contract(format!(
            "frame ids do not match: predicted without ground truth {no_gt:?}, ground truth without prediction {no_pred:?}"
        )));
    }
    let frames = records.iter().map(|r| EvalFrame {
        sequence: r.sequence.clone(),
        frame: r.frame,
        detections: r.detections.iter().map(|d| d.bbox).collect(),
        edge: r.edge.clone(),
        gt: gt.get(&r.frame).cloned(),
    });
    Ok(evaluate(frames, iou_threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::postprocess::BBox;

    fn record(frame: usize) -> PredictionRecord {
        PredictionRecord {
            frame,
            sequence: "seq00".into(),
            detections: vec![Detection {
                bbox: BBox {
                    x1: 1,
                    y1: 2,
                    x2: 3,
                    y2: 4,
                },
                area: 9,
            }],
            edge: WaterEdge {
                rows: vec![Some(3), None, Some(4)],
            },
        }
    }

    fn gt() -> FrameGT {
        FrameGT {
            gt_boxes: vec![BBox {
                x1: 1,
                y1: 2,
                x2: 3,
                y2: 4,
            }],
            gt_edge: vec![(0.0, 3.0), (2.0, 4.0)],
        }
    }

    #[test]
    fn round_trip_one_line_per_frame() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![record(0), record(1), record(2)];
        write_predictions(dir.path(), &records).unwrap();
        for name in [DETECTIONS, EDGES] {
            let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
            assert_eq!(text.lines().count(), 3);
        }
        assert_eq!(read_predictions(dir.path()).unwrap(), records);
    }

    #[test]
    fn mismatched_ids_are_listed() {
        let gt: BTreeMap<usize, FrameGT> = [(0, gt()), (5, gt())].into();
        let err = evaluate_predictions(&[record(0), record(7)], &gt, 0.3).unwrap_err().to_string();
        assert!(err.contains("[7]") && err.contains("[5]"), "{err}");
    }

    #[test]
    fn empty_predictions_miss_everything() {
        let gt: BTreeMap<usize, FrameGT> = [(0, gt()), (1, gt())].into();
        let report = evaluate_predictions(&[], &gt, 0.3).unwrap();
        assert_eq!(report.overall.counts.fn_, 2);
        assert_eq!(report.overall.f_measure, None);
    }

    #[test]
    fn perfect_predictions_score_100() {
        let gt: BTreeMap<usize, FrameGT> = [(0, gt())].into();
        let report = evaluate_predictions(&[record(0)], &gt, 0.3).unwrap();
        assert_eq!(report.overall.f_measure, Some(100.0));
        assert_eq!(report.overall.edge_mean, Some(0.0));
    }
}

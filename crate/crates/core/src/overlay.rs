//! Static visualisation of a segmentation and its post-processed output.

use crate::postprocess::{BBox, FrameResult, Label, SegLabelMap};
use crate::tensor::Tensor;

pub const SKY_RGB: [u8; 3] = [20, 40, 140];
pub const WATER_RGB: [u8; 3] = [0, 200, 220];
pub const OBSTACLE_RGB: [u8; 3] = [250, 210, 0];
pub const UNKNOWN_RGB: [u8; 3] = [128, 128, 128];
pub const EDGE_RGB: [u8; 3] = [230, 30, 30];
pub const BOX_RGB: [u8; 3] = [40, 220, 60];

pub fn label_rgb(label: Label) -> [u8; 3] {
    match label {
        Label::Water => WATER_RGB,
        Label::Sky => SKY_RGB,
        Label::Obstacle => OBSTACLE_RGB,
        Label::Unknown => UNKNOWN_RGB,
    }
}

/// Interleaved RGB of a `[3, H, W]` image in `[0, 1]`.
pub fn image_rgb8(image: &Tensor) -> Vec<u8> {
    let plane = image.len() / 3;
    let d = image.data();
    (0..plane)
        .flat_map(|p| (0..3).map(move |k| (d[k * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect()
}

/// Class colours only.
pub fn labels_rgb8(labels: &SegLabelMap) -> Vec<u8> {
    labels.labels().iter().flat_map(|&l| label_rgb(l)).collect()
}

fn put(buf: &mut [u8], w: usize, r: usize, c: usize, rgb: [u8; 3]) {
    let i = 3 * (r * w + c);
    buf[i..i + 3].copy_from_slice(&rgb);
}

pub fn draw_box(buf: &mut [u8], w: usize, b: &BBox, rgb: [u8; 3]) {
    for c in b.x1..=b.x2 {
        put(buf, w, b.y1, c, rgb);
        put(buf, w, b.y2, c, rgb);
    }
    for r in b.y1..=b.y2 {
        put(buf, w, r, b.x1, rgb);
        put(buf, w, r, b.x2, rgb);
    }
}

/// Image blended 50/50 with the class colours, the water edge drawn on top
/// and a box around every detection.
pub fn render_overlay(image: &Tensor, labels: &SegLabelMap, result: &FrameResult) -> Vec<u8> {
    let w = labels.width();
    let mut out: Vec<u8> = image_rgb8(image)
        .iter()
        .zip(labels_rgb8(labels))
        .map(|(&a, b)| ((a as u16 + b as u16) / 2) as u8)
        .collect();
    for (c, row) in result.edge.rows.iter().enumerate() {
        if let Some(r) = *row {
            put(&mut out, w, r, c, EDGE_RGB);
        }
    }
    for d in &result.detections {
        draw_box(&mut out, w, &d.bbox, BOX_RGB);
    }
    out
}

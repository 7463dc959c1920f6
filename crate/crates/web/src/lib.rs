//! Browser bindings for three pieces of the pipeline: the IMU horizon prior,
//! the synthetic scene generator, and post-processing of a label map into
//! obstacles and a water edge.

use wasm_bindgen::prelude::*;
use wasr::horizon::{horizon_line, render_imu_mask, CameraIntrinsics, ImuSample};
use wasr::overlay::{image_rgb8, labels_rgb8, render_overlay};
use wasr::postprocess::{postprocess, Connectivity, PostprocessConfig};
use wasr::scene::{generate_scene, SceneParams};

fn err(e: wasr::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn rgba(rgb: &[u8]) -> Vec<u8> {
    rgb.chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

/// RGBA image of the horizon prior: white below the projected horizon.
#[wasm_bindgen]
pub fn horizon_mask(roll: f64, pitch: f64, width: usize, height: usize, focal_px: f64) -> Result<Vec<u8>, JsError> {
    let imu = ImuSample::new(roll, pitch).map_err(err)?;
    let camera = CameraIntrinsics::centered(width, height, focal_px);
    let mask = render_imu_mask(&horizon_line(imu, &camera), width, height).map_err(err)?;
    Ok(mask
        .data()
        .iter()
        .flat_map(|&v| {
            let g = (v * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect())
}

/// A generated scene and its post-processed ground truth.
#[wasm_bindgen]
pub struct SceneView {
    width: usize,
    height: usize,
    roll: f64,
    pitch: f64,
    image: Vec<u8>,
    labels: Vec<u8>,
    overlay: Vec<u8>,
    detections: usize,
    gt_boxes: usize,
}

#[wasm_bindgen]
impl SceneView {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }
    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }
    #[wasm_bindgen(getter)]
    pub fn roll(&self) -> f64 {
        self.roll
    }
    #[wasm_bindgen(getter)]
    pub fn pitch(&self) -> f64 {
        self.pitch
    }
    #[wasm_bindgen(getter)]
    pub fn detections(&self) -> usize {
        self.detections
    }
    #[wasm_bindgen(getter)]
    pub fn gt_boxes(&self) -> usize {
        self.gt_boxes
    }
    pub fn image(&self) -> Vec<u8> {
        self.image.clone()
    }
    pub fn labels(&self) -> Vec<u8> {
        self.labels.clone()
    }
    pub fn overlay(&self) -> Vec<u8> {
        self.overlay.clone()
    }
}

/// Generates scene `seed` and post-processes its labels. `min_area` of 0
/// uses the size-scaled default.
#[wasm_bindgen]
pub fn scene(seed: u32, haze: f64, glitter: f64, min_area: usize, eight_connected: bool) -> Result<SceneView, JsError> {
    let params = SceneParams {
        haze,
        glitter_probability: glitter,
        ..SceneParams::default()
    };
    params.validate().map_err(err)?;
    let s = generate_scene(&params, seed as u64).map_err(err)?;
    let cfg = PostprocessConfig {
        min_area_px: (min_area > 0).then_some(min_area),
        connectivity: if eight_connected { Connectivity::Eight } else { Connectivity::Four },
    };
    let result = postprocess(&s.labels.resolve_unknown(), &cfg);
    Ok(SceneView {
        width: params.width,
        height: params.height,
        roll: s.imu.roll,
        pitch: s.imu.pitch,
        image: rgba(&image_rgb8(&s.image)),
        labels: rgba(&labels_rgb8(&s.labels)),
        overlay: rgba(&render_overlay(&s.image, &s.labels, &result)),
        detections: result.detections.len(),
        gt_boxes: s.gt.gt_boxes.len(),
    })
}

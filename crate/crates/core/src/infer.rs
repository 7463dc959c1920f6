//! Running a trained model on frames and scoring it against ground truth.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::horizon::{horizon_line, render_imu_mask, CameraIntrinsics, ImuSample};
use crate::losses::{build_region_index, stage_features, separation_value, LossConfig, WsStage};
use crate::metrics::{evaluate, EvalFrame, EvalReport};
use crate::net::Model;
use crate::postprocess::{postprocess, FrameResult, PostprocessConfig, SegLabelMap};
use crate::scene::SceneSample;
use crate::tensor::{BnMode, Tensor};

/// Normalization statistics used at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum InferNorm {
    /// Running averages collected during training.
    #[default]
    Running,
    /// Statistics of the frame itself, as during training; running averages are left untouched.
    Frame,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct InferConfig {
    pub norm: InferNorm,
    pub post: PostprocessConfig,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub probs: Tensor,
    pub labels: SegLabelMap,
    pub result: FrameResult,
}

pub fn imu_mask(imu: ImuSample, camera: &CameraIntrinsics, height: usize, width: usize) -> Result<Tensor> {
    render_imu_mask(&horizon_line(imu, camera), width, height)
}

fn forward(model: &mut Model, image: &Tensor, mask: &Tensor, norm: InferNorm) -> Result<crate::net::WasrOutput> {
    match norm {
        InferNorm::Running => model.forward(image, mask, BnMode::Eval),
        InferNorm::Frame => {
            let mut bn = model.bn.clone();
            crate::net::wasr_forward(image, mask, &model.params, &mut bn, &model.cfg, BnMode::Train)
        }
    }
}

/// Segmentation and post-processing of one frame. The network's own
/// `use_imu` setting decides whether the mask is looked at.
pub fn predict(
    model: &mut Model,
    image: &Tensor,
    imu: ImuSample,
    camera: &CameraIntrinsics,
    cfg: &InferConfig,
) -> Result<Prediction> {
    let (_, h, w) = image.chw()?;
    let mask = imu_mask(imu, camera, h, w)?;
    let out = forward(model, &image.detach(), &mask, cfg.norm)?;
    let probs = out.seg.probs.detach();
    let labels = SegLabelMap::from_probs(&probs)?;
    let result = postprocess(&labels, &cfg.post);
    Ok(Prediction { probs, labels, result })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub report: EvalReport,
    /// Mean of the exact separation loss (1e-8 floor) over frames with both
    /// water and obstacle pixels.
    pub separation_mean: Option<f64>,
}

/// Scores `model` on labelled samples.
pub fn evaluate_model(
    model: &mut Model,
    samples: &[SceneSample],
    cfg: &InferConfig,
    ws_stage: WsStage,
    iou_threshold: f64,
) -> Result<ModelEval> {
    let exact = LossConfig {
        ws_stage,
        separation: Default::default(),
        ..LossConfig::default()
    };
    let mut frames = Vec::with_capacity(samples.len());
    let mut separations = Vec::new();
    for s in samples {
        let (h, w) = (s.labels.height(), s.labels.width());
        let mask = imu_mask(s.imu, &s.camera, h, w)?;
        let out = forward(model, &s.image, &mask, cfg.norm)?;
        let labels = SegLabelMap::from_probs(&out.seg.probs)?;
        let result = postprocess(&labels, &cfg.post);
        let (_, fh, fw) = stage_features(&out, ws_stage).chw()?;
        let regions = build_region_index(&s.labels, (fh, fw))?;
        if regions.n_water() > 0 && regions.n_obstacle() > 0 {
            separations.push(separation_value(&out, &s.labels, &exact)?);
        }
        frames.push(EvalFrame {
            sequence: s.sequence.clone(),
            frame: s.frame,
            detections: result.detections.iter().map(|d| d.bbox).collect(),
            edge: result.edge,
            gt: Some(s.gt.clone()),
        });
    }
    let separation_mean =
        (!separations.is_empty()).then(|| separations.iter().sum::<f64>() / separations.len() as f64);
    Ok(ModelEval {
        report: evaluate(frames, iou_threshold),
        separation_mean,
    })
}

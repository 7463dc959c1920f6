//! Training objective: focal loss on the segmentation, water–obstacle
//! separation on encoder features, and L2 on convolution weights.
//!
//! `L = L_foc + λ1·L_ws + λ2·L_L2`

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::WasrOutput;
use crate::postprocess::{Label, SegLabelMap};
use crate::tensor::{ParamStore, Tensor};

pub const DEFAULT_WS_EPSILON: f64 = 1e-8;
/// Floor used for training. With per-image RMSProp steps, frames whose few
/// obstacle pixels sit near the water mean produce gradient spikes (∝ 1/B²)
/// that stall the optimizer for hundreds of steps at the 1e-8 floor.
pub const TRAIN_WS_EPSILON: f64 = 0.1;
const PROB_FLOOR: f64 = 1e-12;

/// Feature-resolution pixel indices of the water and obstacle classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionIndex {
    pub water: Vec<usize>,
    pub obstacle: Vec<usize>,
    pub dims: (usize, usize),
}

impl RegionIndex {
    pub fn n_water(&self) -> usize {
        self.water.len()
    }

    pub fn n_obstacle(&self) -> usize {
        self.obstacle.len()
    }
}

/// Nearest-neighbour downsample of `labels` to `dims`; sky and unknown pixels are dropped.
pub fn build_region_index(labels: &SegLabelMap, dims: (usize, usize)) -> Result<RegionIndex> {
    let small = labels.downsample_nearest(dims)?;
    let mut water = Vec::new();
    let mut obstacle = Vec::new();
    for (i, l) in small.labels().iter().enumerate() {
        match l {
            Label::Water => water.push(i),
            Label::Obstacle => obstacle.push(i),
            Label::Sky | Label::Unknown => {}
        }
    }
    Ok(RegionIndex { water, obstacle, dims })
}

/// Per-channel Gaussian fitted to the water features.
#[derive(Debug, Clone, PartialEq)]
pub struct WaterStats {
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
}

impl WaterStats {
    pub fn channel_count(&self) -> usize {
        self.mu.len()
    }
}

fn check_features(features: &Tensor, regions: &RegionIndex) -> Result<(usize, usize)> {
    let (c, h, w) = features.chw()?;
    if (h, w) != regions.dims {
        return Err(Error::contract(format!(
            "features are {h}x{w} but the region index is {:?}",
            regions.dims
        )));
    }
    Ok((c, h * w))
}

pub fn water_stats(features: &Tensor, regions: &RegionIndex) -> Result<WaterStats> {
    let (c, plane) = check_features(features, regions)?;
    if regions.water.is_empty() {
        return Err(Error::contract("water statistics need at least one water pixel"));
    }
    let n = regions.n_water() as f64;
    let mut stats = WaterStats {
        mu: Vec::with_capacity(c),
        sigma2: Vec::with_capacity(c),
    };
    for x in features.data().chunks(plane) {
        let mu = regions.water.iter().map(|&i| x[i]).sum::<f64>() / n;
        let var = regions.water.iter().map(|&i| (x[i] - mu).powi(2)).sum::<f64>() / n;
        stats.mu.push(mu);
        stats.sigma2.push(var);
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationOptions {
    /// Per-channel floor of the obstacle spread.
    pub epsilon: f64,
    /// Treat the water means as constants in the backward pass.
    pub stop_grad_mean: bool,
}

impl Default for SeparationOptions {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_WS_EPSILON,
            stop_grad_mean: false,
        }
    }
}

struct Separation {
    features: Tensor,
    water: Vec<usize>,
    obstacle: Vec<usize>,
    /// Per channel: (mu, spread_water, spread_obstacle floored, floor active).
    channels: Vec<(f64, f64, f64, bool)>,
    factor: f64,
    stop_grad_mean: bool,
}

impl crate::tensor::Function for Separation {
    fn name(&self) -> &'static str {
        "water_separation_loss"
    }

    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.features]
    }

    fn backward(&self, _out: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let x = self.features.data();
        let plane = x.len() / self.channels.len();
        let nw = self.water.len() as f64;
        let mut g = vec![0.0; x.len()];
        for (c, &(mu, a, b, floored)) in self.channels.iter().enumerate() {
            let xs = &x[c * plane..(c + 1) * plane];
            let gs = &mut g[c * plane..(c + 1) * plane];
            let da = grad[0] * self.factor / b;
            let db = if floored { 0.0 } else { -grad[0] * self.factor * a / (b * b) };
            // The mean's own contribution to dA cancels: Σ_W (x − μ) = 0.
            for &i in &self.water {
                gs[i] += da * 2.0 * (xs[i] - mu);
            }
            let mut obstacle_residual = 0.0;
            for &j in &self.obstacle {
                gs[j] += db * 2.0 * (xs[j] - mu);
                obstacle_residual += xs[j] - mu;
            }
            if !self.stop_grad_mean {
                let through_mu = db * -2.0 * obstacle_residual / nw;
                for &i in &self.water {
                    gs[i] += through_mu;
                }
            }
        }
        vec![Some(g)]
    }
}

/// Water–obstacle separation loss
///
/// `L_ws = N_O / (N_C·N_W) · Σ_c Σ_W (x − μ_c)² / Σ_O (x − μ_c)²`
///
/// with `μ_c` the mean water feature of channel `c`. Zero, with no gradient,
/// when either region is empty.
pub fn water_separation_loss(features: &Tensor, regions: &RegionIndex) -> Result<Tensor> {
    water_separation_loss_with(features, regions, SeparationOptions::default())
}

pub fn water_separation_loss_with(
    features: &Tensor,
    regions: &RegionIndex,
    opts: SeparationOptions,
) -> Result<Tensor> {
    let (c, plane) = check_features(features, regions)?;
    if regions.water.is_empty() || regions.obstacle.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    let stats = water_stats(features, regions)?;
    let factor = regions.n_obstacle() as f64 / (c as f64 * regions.n_water() as f64);
    let mut channels = Vec::with_capacity(c);
    let mut total = 0.0;
    for (x, &mu) in features.data().chunks(plane).zip(&stats.mu) {
        let a: f64 = regions.water.iter().map(|&i| (x[i] - mu).powi(2)).sum();
        let raw: f64 = regions.obstacle.iter().map(|&j| (x[j] - mu).powi(2)).sum();
        let floored = raw < opts.epsilon;
        let b = raw.max(opts.epsilon);
        total += a / b;
        channels.push((mu, a, b, floored));
    }
    let op = Separation {
        features: features.clone(),
        water: regions.water.clone(),
        obstacle: regions.obstacle.clone(),
        channels,
        factor,
        stop_grad_mean: opts.stop_grad_mean,
    };
    Ok(Tensor::from_op(vec![1], vec![factor * total], op))
}

struct Focal {
    probs: Tensor,
    /// (flat index of the true-class probability, d loss / d p)
    taps: Vec<(usize, f64)>,
}

impl crate::tensor::Function for Focal {
    fn name(&self) -> &'static str {
        "focal_loss"
    }

    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.probs]
    }

    fn backward(&self, _out: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut g = vec![0.0; self.probs.len()];
        for &(i, d) in &self.taps {
            g[i] += grad[0] * d;
        }
        vec![Some(g)]
    }
}

/// Mean of `−(1 − p_t)^γ·ln p_t` over labelled pixels, `p_t` being the
/// probability of the true class, floored at 1e-12. Unknown pixels are
/// ignored; a frame without labelled pixels gives 0.
pub fn focal_loss(probs: &Tensor, labels: &SegLabelMap, gamma: f64) -> Result<Tensor> {
    let (c, h, w) = probs.chw()?;
    if (h, w) != (labels.height(), labels.width()) {
        return Err(Error::contract(format!(
            "focal loss: probabilities are {h}x{w}, labels {}x{}",
            labels.height(),
            labels.width()
        )));
    }
    let plane = h * w;
    let known: Vec<(usize, usize)> = labels
        .labels()
        .iter()
        .enumerate()
        .filter_map(|(p, l)| l.class_index().map(|k| (p, k)))
        .collect();
    if let Some(&(_, k)) = known.iter().find(|(_, k)| *k >= c) {
        return Err(Error::contract(format!("label class {k} but only {c} channels")));
    }
    if known.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    let n = known.len() as f64;
    let d = probs.data();
    let mut total = 0.0;
    let mut taps = Vec::with_capacity(known.len());
    for (p, k) in known {
        let idx = k * plane + p;
        let raw = d[idx];
        let pt = raw.max(PROB_FLOOR);
        let q = 1.0 - pt;
        let ln = pt.ln();
        total -= q.powf(gamma) * ln;
        let slope = if raw < PROB_FLOOR {
            0.0
        } else {
            let modulating = if gamma == 0.0 || q <= 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * ln };
            modulating - q.powf(gamma) / pt
        };
        taps.push((idx, slope / n));
    }
    Ok(Tensor::from_op(vec![1], vec![total / n], Focal { probs: probs.clone(), taps }))
}

struct SquaredNorm(Vec<Tensor>);

impl crate::tensor::Function for SquaredNorm {
    fn name(&self) -> &'static str {
        "l2_reg"
    }

    fn inputs(&self) -> Vec<&Tensor> {
        self.0.iter().collect()
    }

    fn backward(&self, _out: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        self.0
            .iter()
            .map(|w| Some(w.data().iter().map(|v| grad[0] * v).collect()))
            .collect()
    }
}

/// Convolution kernels: rank-4 parameters named `*.weight`.
pub fn is_conv_weight(name: &str, t: &Tensor) -> bool {
    name.ends_with(".weight") && t.shape().len() == 4
}

/// `½·Σ w²` over convolution kernels; biases and batch-norm parameters are excluded.
pub fn l2_reg(params: &ParamStore) -> Tensor {
    let weights: Vec<Tensor> = params
        .iter()
        .filter(|(n, t)| is_conv_weight(n, t))
        .map(|(_, t)| t.clone())
        .collect();
    let value = 0.5 * weights.iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>();
    Tensor::from_op(vec![1], vec![value], SquaredNorm(weights))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.01,
            lambda2: 1e-6,
            gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.lambda1) && ok(self.lambda2) && ok(self.gamma)) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// The total loss together with the unweighted value of each term.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub focal: f64,
    pub ws: f64,
    pub l2: f64,
}

pub fn total_loss(foc: &Tensor, ws: &Tensor, l2: &Tensor, weights: &LossWeights) -> Result<LossBreakdown> {
    let total = foc.add(&ws.scale(weights.lambda1))?.add(&l2.scale(weights.lambda2))?;
    Ok(LossBreakdown {
        total,
        focal: foc.item()?,
        ws: ws.item()?,
        l2: l2.item()?,
    })
}

/// Encoder stage whose output carries the separation loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum WsStage {
    Res4,
    #[default]
    Res5,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub ws_stage: WsStage,
    pub separation: SeparationOptions,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            ws_stage: WsStage::Res5,
            separation: SeparationOptions {
                epsilon: TRAIN_WS_EPSILON,
                stop_grad_mean: false,
            },
        }
    }
}

pub fn stage_features(out: &WasrOutput, stage: WsStage) -> &Tensor {
    match stage {
        WsStage::Res4 => &out.features.res4,
        WsStage::Res5 => &out.features.res5,
    }
}

/// Separation value on the configured stage, without building a graph.
pub fn separation_value(out: &WasrOutput, labels: &SegLabelMap, cfg: &LossConfig) -> Result<f64> {
    let features = stage_features(out, cfg.ws_stage).detach();
    let (_, h, w) = features.chw()?;
    let regions = build_region_index(labels, (h, w))?;
    water_separation_loss_with(&features, &regions, cfg.separation)?.item()
}

/// Full objective for one frame. Focal loss uses the full-resolution
/// probabilities; with `λ1 = 0` the separation term is skipped and reported as 0.
pub fn compute_losses(
    out: &WasrOutput,
    labels: &SegLabelMap,
    params: &ParamStore,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let foc = focal_loss(&out.seg.probs, labels, cfg.weights.gamma)?;
    let ws = if cfg.weights.lambda1 > 0.0 {
        let features = stage_features(out, cfg.ws_stage);
        let (_, h, w) = features.chw()?;
        let regions = build_region_index(labels, (h, w))?;
        water_separation_loss_with(features, &regions, cfg.separation)?
    } else {
        Tensor::scalar(0.0)
    };
    let l2 = if cfg.weights.lambda2 > 0.0 {
        l2_reg(params)
    } else {
        Tensor::scalar(0.0)
    };
    total_loss(&foc, &ws, &l2, &cfg.weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check_gradient;

    fn one_channel(values: &[f64]) -> Tensor {
        Tensor::new(&[1, 1, values.len()], values.to_vec()).unwrap()
    }

    fn split_regions(n_water: usize, n_obstacle: usize) -> RegionIndex {
        RegionIndex {
            water: (0..n_water).collect(),
            obstacle: (n_water..n_water + n_obstacle).collect(),
            dims: (1, n_water + n_obstacle),
        }
    }

    /// Literal transcription of the formula.
    fn separation_oracle(x: &[Vec<f64>], water: &[usize], obstacle: &[usize]) -> f64 {
        let nc = x.len() as f64;
        let mut sum = 0.0;
        for ch in x {
            let mu: f64 = water.iter().map(|&i| ch[i]).sum::<f64>() / water.len() as f64;
            let num: f64 = water.iter().map(|&i| (ch[i] - mu) * (ch[i] - mu)).sum();
            let den: f64 = obstacle.iter().map(|&j| (ch[j] - mu) * (ch[j] - mu)).sum();
            sum += num / den;
        }
        obstacle.len() as f64 / (nc * water.len() as f64) * sum
    }

    #[test]
    fn separation_hand_case() {
        let x = one_channel(&[0.0, 2.0, 3.0, -1.0]);
        let r = split_regions(2, 2);
        let l = water_separation_loss(&x, &r).unwrap().item().unwrap();
        assert!((l - 0.25).abs() < 1e-15);
        let oracle = separation_oracle(&[x.data().to_vec()], &r.water, &r.obstacle);
        assert_eq!(l, oracle);
        let scaled = one_channel(&[0.0, 20.0, 30.0, -10.0]);
        let l10 = water_separation_loss(&scaled, &r).unwrap().item().unwrap();
        assert!((l10 - 0.25).abs() < 1e-15);
    }

    #[test]
    fn separation_zero_cases() {
        let flat = one_channel(&[1.5, 1.5, 3.0, -1.0]);
        let r = split_regions(2, 2);
        assert_eq!(water_separation_loss(&flat, &r).unwrap().item().unwrap(), 0.0);
        let x = Tensor::param(&[1, 1, 4], vec![0.0, 2.0, 3.0, -1.0]).unwrap();
        let no_obstacle = split_regions(4, 0);
        let l = water_separation_loss(&x, &no_obstacle).unwrap();
        assert_eq!(l.item().unwrap(), 0.0);
        assert!(!l.requires_grad());
    }

    #[test]
    fn separation_gradient_with_and_without_mean_flow() {
        let x = Tensor::new(&[2, 1, 6], vec![0.3, -0.2, 0.9, 1.4, -0.7, 2.0, 0.1, 0.5, -0.4, 1.1, 0.8, -1.3])
            .unwrap();
        let r = split_regions(3, 3);
        for stop_grad_mean in [false, true] {
            let opts = SeparationOptions {
                stop_grad_mean,
                ..Default::default()
            };
            let report = check_gradient(|t| water_separation_loss_with(t, &r, opts), &x, 1e-5, None).unwrap();
            // Central differences always see μ move, so only the full gradient matches them.
            if stop_grad_mean {
                assert!(report.max_rel_error > 1e-3, "{report:?}");
            } else {
                assert!(report.max_rel_error < 1e-7, "{report:?}");
            }
        }
    }

    #[test]
    fn focal_hand_values() {
        let probs = Tensor::new(&[2, 1, 1], vec![0.5, 0.5]).unwrap();
        let labels = SegLabelMap::filled(1, 1, Label::Water);
        let l = focal_loss(&probs, &labels, 2.0).unwrap().item().unwrap();
        assert!((l - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((l - 0.17329).abs() < 1e-5);

        let perfect = Tensor::new(&[2, 1, 1], vec![1.0, 0.0]).unwrap();
        assert_eq!(focal_loss(&perfect, &labels, 2.0).unwrap().item().unwrap(), 0.0);

        let p = Tensor::new(&[3, 1, 2], vec![0.7, 0.1, 0.2, 0.3, 0.1, 0.6]).unwrap();
        let lab = SegLabelMap::new(1, 2, vec![Label::Water, Label::Obstacle]).unwrap();
        let ce = focal_loss(&p, &lab, 0.0).unwrap().item().unwrap();
        assert!((ce - -(0.7f64.ln() + 0.6f64.ln()) / 2.0).abs() < 1e-12);

        let unknown = SegLabelMap::filled(1, 2, Label::Unknown);
        assert_eq!(focal_loss(&p, &unknown, 2.0).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn focal_gradient() {
        let p = Tensor::new(&[3, 2, 2], vec![0.2, 0.5, 0.1, 0.6, 0.3, 0.2, 0.8, 0.3, 0.5, 0.3, 0.1, 0.1])
            .unwrap();
        let lab = SegLabelMap::new(2, 2, vec![Label::Water, Label::Sky, Label::Unknown, Label::Obstacle])
            .unwrap();
        for gamma in [0.0, 0.5, 2.0] {
            let report = check_gradient(|t| focal_loss(t, &lab, gamma), &p, 1e-6, None).unwrap();
            assert!(report.max_rel_error < 1e-7, "gamma {gamma}: {report:?}");
        }
    }

    #[test]
    fn l2_values_and_gradient() {
        let mut ps = ParamStore::new();
        ps.insert("a.weight", Tensor::param(&[1, 1, 1, 1], vec![3.0]).unwrap()).unwrap();
        ps.insert("a.bias", Tensor::param(&[1], vec![5.0]).unwrap()).unwrap();
        ps.insert("bn.scale", Tensor::param(&[1], vec![7.0]).unwrap()).unwrap();
        let l = l2_reg(&ps);
        assert_eq!(l.item().unwrap(), 4.5);
        l.backward().unwrap();
        assert_eq!(ps.get("a.weight").unwrap().grad().unwrap(), vec![3.0]);
        assert!(ps.get("a.bias").unwrap().grad().is_none());
        assert_eq!(l2_reg(&ParamStore::new()).item().unwrap(), 0.0);
    }

    #[test]
    fn total_is_weighted_sum() {
        let w = LossWeights {
            lambda1: 0.5,
            lambda2: 0.1,
            gamma: 2.0,
        };
        let b = total_loss(&Tensor::scalar(1.0), &Tensor::scalar(2.0), &Tensor::scalar(3.0), &w).unwrap();
        assert!((b.total.item().unwrap() - 2.3).abs() < 1e-15);
        assert_eq!((b.focal, b.ws, b.l2), (1.0, 2.0, 3.0));
        let zero = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            ..w
        };
        let b = total_loss(&Tensor::scalar(1.5), &Tensor::scalar(2.0), &Tensor::scalar(3.0), &zero).unwrap();
        assert_eq!(b.total.item().unwrap(), 1.5);
    }

    #[test]
    fn region_index_cases() {
        let all = SegLabelMap::filled(8, 8, Label::Water);
        let r = build_region_index(&all, (4, 4)).unwrap();
        assert_eq!((r.n_water(), r.n_obstacle()), (16, 0));

        let mut halves = SegLabelMap::filled(8, 8, Label::Water);
        for row in 0..8 {
            for col in 4..8 {
                halves.set(row, col, Label::Obstacle);
            }
        }
        let r = build_region_index(&halves, (4, 4)).unwrap();
        assert_eq!((r.n_water(), r.n_obstacle()), (8, 8));

        // A 2×2 obstacle patch at rows 2..4, cols 2..4 of a 4×4 map. Block
        // centers sample (1,1), (1,3), (3,1), (3,3); only (3,3) hits it.
        let mut patch = SegLabelMap::filled(4, 4, Label::Water);
        for (row, col) in [(2, 2), (2, 3), (3, 2), (3, 3)] {
            patch.set(row, col, Label::Obstacle);
        }
        let r = build_region_index(&patch, (2, 2)).unwrap();
        assert_eq!(r.obstacle, vec![3]);
        assert!(build_region_index(&patch, (3, 2)).is_err());
    }
}

//! RMSProp with momentum, polynomial learning-rate decay, per-image steps and
//! per-epoch checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_variant, AugSpec};
use crate::dataset::{read_text, write_bytes};
use crate::error::{Error, Result};
use crate::horizon::{horizon_line, render_imu_mask};
use crate::losses::{compute_losses, LossConfig};
use crate::net::{build_network, Model, NetConfig};
use crate::scene::SceneSample;
use crate::tensor::{read_file, write_file, BnMode, BnState, Entry, ParamStore, Tensor, OPTIM_MAGIC};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub rms_decay: f64,
    pub eps: f64,
    pub poly_power: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            momentum: 0.9,
            rms_decay: 0.9,
            eps: 1e-8,
            poly_power: 0.9,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !(self.lr0 > 0.0 && self.lr0.is_finite())
            || !unit(self.momentum)
            || !unit(self.rms_decay)
            || !(self.eps > 0.0)
            || !(self.poly_power >= 0.0)
        {
            return Err(Error::Config(format!("invalid optimizer settings: {self:?}")));
        }
        Ok(())
    }
}

/// `lr0 · (1 − step/max_steps)^power`.
pub fn poly_lr(step: usize, max_steps: usize, lr0: f64, power: f64) -> Result<f64> {
    if max_steps == 0 {
        return Err(Error::contract("max_steps must be positive"));
    }
    if step > max_steps {
        return Err(Error::contract(format!("step {step} beyond max_steps {max_steps}")));
    }
    Ok(lr0 * (1.0 - step as f64 / max_steps as f64).powf(power))
}

/// Per-parameter RMSProp buffers plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub cfg: OptimConfig,
    pub square_avg: BTreeMap<String, Vec<f64>>,
    pub momentum: BTreeMap<String, Vec<f64>>,
    pub step: usize,
    pub max_steps: usize,
}

impl OptimState {
    /// Zeroed buffers shaped like `params`.
    pub fn new(params: &ParamStore, cfg: OptimConfig, max_steps: usize) -> Result<Self> {
        cfg.validate()?;
        if max_steps == 0 {
            return Err(Error::contract("max_steps must be positive"));
        }
        let zeros: BTreeMap<String, Vec<f64>> =
            params.iter().map(|(n, t)| (n.to_string(), vec![0.0; t.len()])).collect();
        Ok(Self {
            cfg,
            square_avg: zeros.clone(),
            momentum: zeros,
            step: 0,
            max_steps,
        })
    }

    pub fn lr(&self) -> Result<f64> {
        poly_lr(self.step, self.max_steps, self.cfg.lr0, self.cfg.poly_power)
    }

    pub fn to_entries(&self) -> Vec<Entry> {
        let c = self.cfg;
        let scalar = |name: &str, v: f64| Entry {
            name: name.to_string(),
            shape: vec![1],
            data: vec![v],
        };
        let mut out = vec![
            scalar("step", self.step as f64),
            scalar("max_steps", self.max_steps as f64),
            Entry {
                name: "hyper".into(),
                shape: vec![5],
                data: vec![c.lr0, c.momentum, c.rms_decay, c.eps, c.poly_power],
            },
        ];
        for (prefix, map) in [("sq/", &self.square_avg), ("mom/", &self.momentum)] {
            out.extend(map.iter().map(|(n, v)| Entry {
                name: format!("{prefix}{n}"),
                shape: vec![v.len()],
                data: v.clone(),
            }));
        }
        out
    }

    pub fn from_entries(entries: Vec<Entry>) -> Result<Self> {
        let mut step = None;
        let mut max_steps = None;
        let mut cfg = None;
        let mut square_avg = BTreeMap::new();
        let mut momentum = BTreeMap::new();
        for e in entries {
            match e.name.as_str() {
                "step" => step = e.data.first().map(|&v| v as usize),
                "max_steps" => max_steps = e.data.first().map(|&v| v as usize),
                "hyper" if e.data.len() == 5 => {
                    let d = &e.data;
                    cfg = Some(OptimConfig {
                        lr0: d[0],
                        momentum: d[1],
                        rms_decay: d[2],
                        eps: d[3],
                        poly_power: d[4],
                    });
                }
                name => {
                    if let Some(n) = name.strip_prefix("sq/") {
                        square_avg.insert(n.to_string(), e.data);
                    } else if let Some(n) = name.strip_prefix("mom/") {
                        momentum.insert(n.to_string(), e.data);
                    } else {
                        return Err(Error::contract(format!("unexpected optimizer entry {name}")));
                    }
                }
            }
        }
        let missing = |what: &str| Error::contract(format!("optimizer state lacks {what}"));
        Ok(Self {
            cfg: cfg.ok_or_else(|| missing("hyper"))?,
            square_avg,
            momentum,
            step: step.ok_or_else(|| missing("step"))?,
            max_steps: max_steps.ok_or_else(|| missing("max_steps"))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(OPTIM_MAGIC, &self.to_entries(), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_entries(read_file(OPTIM_MAGIC, path)?)
    }
}

/// One update with the current gradients, which are consumed. A parameter
/// without a gradient is treated as having a zero gradient. Returns the
/// learning rate used.
pub fn rmsprop_step(params: &mut ParamStore, state: &mut OptimState) -> Result<f64> {
    let lr = state.lr()?;
    let OptimConfig {
        momentum: mu,
        rms_decay: rho,
        eps,
        ..
    } = state.cfg;
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let p = params.get(&name)?;
        let n = p.len();
        let s = state
            .square_avg
            .get_mut(&name)
            .ok_or_else(|| Error::contract(format!("no optimizer state for {name}")))?;
        let m = state
            .momentum
            .get_mut(&name)
            .ok_or_else(|| Error::contract(format!("no optimizer state for {name}")))?;
        if s.len() != n || m.len() != n {
            return Err(Error::shape("rmsprop_step", &[n], &[s.len()]));
        }
        let grad = p.grad().unwrap_or_else(|| vec![0.0; n]);
        let mut data = p.data().to_vec();
        for i in 0..n {
            let g = grad[i];
            s[i] = rho * s[i] + (1.0 - rho) * g * g;
            m[i] = mu * m[i] + g / (s[i] + eps).sqrt();
            data[i] -= lr * m[i];
        }
        params.replace(&name, data)?;
    }
    state.step += 1;
    Ok(lr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub epochs: usize,
    /// Seeds the per-epoch visiting order.
    pub seed: u64,
    pub augment: Option<AugSpec>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            epochs: 5,
            seed: 0,
            augment: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.loss.weights.validate()?;
        self.optim.validate()?;
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }

    fn variants(&self) -> usize {
        self.augment.as_ref().map_or(1, AugSpec::variants_per_sample)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub focal: f64,
    pub ws: f64,
    pub l2: f64,
    pub total: f64,
    pub lr: f64,
}

/// Progress notes for long runs.
pub trait TrainObserver {
    fn step(&mut self, _log: &StepLog) {}
    fn epoch_done(&mut self, _epoch: usize, _checkpoint: Option<&Path>) {}
}

impl TrainObserver for () {}

pub const METRICS_CSV: &str = "metrics.csv";
const CHECKPOINT_JSON: &str = "checkpoint.json";

/// Text manifest stored next to the checkpoint tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub step: usize,
    pub epoch: usize,
    pub max_steps: usize,
    /// The visiting order of epoch `e` is drawn from `(seed, e)`, so these two
    /// fields are the whole sampler state.
    pub seed: u64,
    pub config: TrainConfig,
}

pub fn checkpoint_dir(out: &Path, epoch: usize) -> PathBuf {
    out.join("checkpoints").join(format!("epoch_{epoch:03}"))
}

/// Model, optimizer and log after some number of completed epochs.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub optim: OptimState,
    pub epochs_done: usize,
    pub log: Vec<StepLog>,
}

impl TrainState {
    pub fn save(&self, dir: &Path, cfg: &TrainConfig) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.model.params.save(&dir.join("params.bin"))?;
        self.model.bn.save(&dir.join("buffers.bin"))?;
        self.optim.save(&dir.join("optim.bin"))?;
        let info = CheckpointInfo {
            step: self.optim.step,
            epoch: self.epochs_done,
            max_steps: self.optim.max_steps,
            seed: cfg.seed,
            config: cfg.clone(),
        };
        let json = serde_json::to_string_pretty(&info).expect("serializable");
        write_bytes(&dir.join(CHECKPOINT_JSON), json.as_bytes())?;
        write_bytes(&dir.join(METRICS_CSV), metrics_csv(&self.log).as_bytes())
    }

    pub fn load(dir: &Path) -> Result<(Self, TrainConfig)> {
        let info = read_checkpoint_info(dir)?;
        let params = ParamStore::load(&dir.join("params.bin"))?;
        let bn = BnState::load(&dir.join("buffers.bin"))?;
        let optim = OptimState::load(&dir.join("optim.bin"))?;
        let log = parse_metrics_csv(&dir.join(METRICS_CSV))?;
        let state = TrainState {
            model: Model {
                cfg: info.config.net.clone(),
                params,
                bn,
            },
            optim,
            epochs_done: info.epoch,
            log,
        };
        Ok((state, info.config))
    }
}

pub fn read_checkpoint_info(dir: &Path) -> Result<CheckpointInfo> {
    let path = dir.join(CHECKPOINT_JSON);
    serde_json::from_str(&read_text(&path)?).map_err(|e| Error::parse(&path, e.line(), e.to_string()))
}

/// Loads only the model part of a checkpoint.
pub fn load_model(dir: &Path) -> Result<Model> {
    let info = read_checkpoint_info(dir)?;
    Ok(Model {
        cfg: info.config.net,
        params: ParamStore::load(&dir.join("params.bin"))?,
        bn: BnState::load(&dir.join("buffers.bin"))?,
    })
}

pub fn metrics_csv(log: &[StepLog]) -> String {
    let mut out = String::from("step,epoch,focal,ws,l2,total,lr\n");
    for l in log {
        // `{:?}` keeps full round-trip precision.
        let _ = writeln!(
            out,
            "{},{},{:?},{:?},{:?},{:?},{:?}",
            l.step, l.epoch, l.focal, l.ws, l.l2, l.total, l.lr
        );
    }
    out
}

pub fn parse_metrics_csv(path: &Path) -> Result<Vec<StepLog>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::parse(path, 0, e.to_string()))?;
    reader
        .deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::parse(path, i + 2, e.to_string())))
        .collect()
}

/// IMU prior channel for a sample.
pub fn sample_imu_mask(s: &SceneSample) -> Result<Tensor> {
    let (h, w) = (s.labels.height(), s.labels.width());
    render_imu_mask(&horizon_line(s.imu, &s.camera), w, h)
}

/// Visiting order of epoch `epoch` over `n` items.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn check_inputs(samples: &[SceneSample], cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::contract("training needs at least one sample"));
    }
    let (h, w) = cfg.net.input_size;
    if let Some(s) = samples.iter().find(|s| s.image.shape() != [3, h, w]) {
        return Err(Error::Config(format!(
            "sample {} has shape {:?} but the network expects [3, {h}, {w}]",
            s.frame,
            s.image.shape()
        )));
    }
    Ok(())
}

/// Fresh network and optimizer for `samples`.
pub fn init_training(samples: &[SceneSample], cfg: &TrainConfig) -> Result<TrainState> {
    check_inputs(samples, cfg)?;
    let model = build_network(&cfg.net)?;
    let max_steps = cfg.epochs * samples.len() * cfg.variants();
    let optim = OptimState::new(&model.params, cfg.optim, max_steps)?;
    Ok(TrainState {
        model,
        optim,
        epochs_done: 0,
        log: Vec::new(),
    })
}

/// A single step on one sample; leaves gradients consumed.
pub fn train_step(state: &mut TrainState, sample: &SceneSample, loss: &LossConfig) -> Result<StepLog> {
    let mask = sample_imu_mask(sample)?;
    let out = state.model.forward(&sample.image, &mask, BnMode::Train)?;
    let b = compute_losses(&out, &sample.labels, &state.model.params, loss)?;
    let total = b.total.item()?;
    if !total.is_finite() {
        return Err(Error::Numeric(format!(
            "total loss is {total} at step {} (focal {}, ws {}, l2 {}) on frame {}",
            state.optim.step, b.focal, b.ws, b.l2, sample.frame
        )));
    }
    b.total.backward()?;
    let step = state.optim.step;
    let lr = rmsprop_step(&mut state.model.params, &mut state.optim)?;
    Ok(StepLog {
        step,
        epoch: state.epochs_done,
        focal: b.focal,
        ws: b.ws,
        l2: b.l2,
        total,
        lr,
    })
}

/// Runs the next epoch. Augmented samples are produced on a helper thread in
/// the same order a serial loop would use.
pub fn run_epoch(
    state: &mut TrainState,
    samples: &[SceneSample],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    let variants = cfg.variants();
    let order = epoch_order(cfg.seed, state.epochs_done, samples.len() * variants);
    let fetch = |i: usize| -> Result<SceneSample> {
        match &cfg.augment {
            Some(spec) => augment_variant(samples, spec, i / variants, i % variants),
            None => Ok(samples[i].clone()),
        }
    };
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = std::sync::mpsc::sync_channel(4);
        let producer = scope.spawn(move || {
            for &i in &order {
                if tx.send(fetch(i)).is_err() {
                    break;
                }
            }
        });
        for item in rx.iter() {
            let log = train_step(state, &item?, &cfg.loss)?;
            observer.step(&log);
            state.log.push(log);
        }
        producer.join().expect("augmentation thread panicked");
        Ok(())
    })?;
    state.epochs_done += 1;
    Ok(())
}

/// Trains until `cfg.epochs` epochs are done, writing a checkpoint per epoch
/// and the running `metrics.csv` under `out` when given. On a numeric failure
/// the checkpoints of earlier epochs stay in place.
pub fn train_from(
    mut state: TrainState,
    samples: &[SceneSample],
    cfg: &TrainConfig,
    out: Option<&Path>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainState> {
    check_inputs(samples, cfg)?;
    let expected = cfg.epochs * samples.len() * cfg.variants();
    if state.optim.max_steps != expected {
        return Err(Error::Config(format!(
            "checkpoint schedule has {} steps but this configuration needs {expected}",
            state.optim.max_steps
        )));
    }
    while state.epochs_done < cfg.epochs {
        let result = run_epoch(&mut state, samples, cfg, observer);
        if let Some(dir) = out {
            write_bytes(&dir.join(METRICS_CSV), metrics_csv(&state.log).as_bytes())?;
        }
        result?;
        let ckpt = match out {
            Some(dir) => {
                let path = checkpoint_dir(dir, state.epochs_done);
                state.save(&path, cfg)?;
                Some(path)
            }
            None => None,
        };
        observer.epoch_done(state.epochs_done, ckpt.as_deref());
    }
    Ok(state)
}

pub fn train(
    samples: &[SceneSample],
    cfg: &TrainConfig,
    out: Option<&Path>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainState> {
    train_from(init_training(samples, cfg)?, samples, cfg, out, observer)
}

/// Continues a run from one of its checkpoints.
pub fn resume(
    checkpoint: &Path,
    samples: &[SceneSample],
    out: Option<&Path>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainState> {
    let (state, cfg) = TrainState::load(checkpoint)?;
    train_from(state, samples, &cfg, out, observer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_dataset, SceneParams};

    #[test]
    fn poly_lr_examples() {
        assert_eq!(poly_lr(0, 100, 1e-4, 0.9).unwrap(), 1e-4);
        assert_eq!(poly_lr(100, 100, 1e-4, 0.9).unwrap(), 0.0);
        let half = poly_lr(50, 100, 1e-4, 0.9).unwrap();
        assert!((half - 5.359e-5).abs() < 1e-8, "{half}");
        assert!(poly_lr(0, 0, 1e-4, 0.9).is_err());
        assert!(poly_lr(101, 100, 1e-4, 0.9).is_err());
    }

    fn scalar_store(v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::param(&[1], vec![v]).unwrap()).unwrap();
        p
    }

    #[test]
    fn rmsprop_hand_iteration() {
        let mut params = scalar_store(0.0);
        let mut state = OptimState::new(&params, OptimConfig::default(), 10).unwrap();
        // d(w)/dw = 1
        params.get("w").unwrap().sum().backward().unwrap();
        let lr = rmsprop_step(&mut params, &mut state).unwrap();
        assert_eq!(lr, 1e-4);
        let s = state.square_avg["w"][0];
        let m = state.momentum["w"][0];
        assert!((s - 0.1).abs() < 1e-15);
        let expected_m = 1.0 / (0.1f64 + 1e-8).sqrt();
        assert!((m - expected_m).abs() < 1e-12 && (m - 3.1623).abs() < 1e-4);
        assert!((params.get("w").unwrap().data()[0] + 1e-4 * expected_m).abs() < 1e-15);
        assert_eq!(state.step, 1);
        assert!(params.get("w").unwrap().grad().is_none());
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut params = scalar_store(0.7);
        let mut state = OptimState::new(&params, OptimConfig::default(), 10).unwrap();
        state.momentum.insert("w".into(), vec![2.0]);
        rmsprop_step(&mut params, &mut state).unwrap();
        assert!((state.momentum["w"][0] - 1.8).abs() < 1e-15);

        let mut fresh = scalar_store(0.7);
        let mut zero = OptimState::new(&fresh, OptimConfig::default(), 10).unwrap();
        for _ in 0..5 {
            rmsprop_step(&mut fresh, &mut zero).unwrap();
        }
        assert_eq!(fresh.get("w").unwrap().data(), &[0.7]);
    }

    #[test]
    fn optim_state_round_trip() {
        let mut params = scalar_store(1.0);
        let mut state = OptimState::new(&params, OptimConfig::default(), 7).unwrap();
        params.get("w").unwrap().sum().backward().unwrap();
        rmsprop_step(&mut params, &mut state).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("optim.bin");
        state.save(&path).unwrap();
        assert_eq!(&std::fs::read(&path).unwrap()[..8], OPTIM_MAGIC);
        assert_eq!(OptimState::load(&path).unwrap(), state);
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let mut o = epoch_order(3, 1, 20);
        assert_ne!(o, epoch_order(3, 2, 20));
        assert_eq!(o, epoch_order(3, 1, 20));
        o.sort();
        assert_eq!(o, (0..20).collect::<Vec<_>>());
    }

    pub(crate) fn toy_setup(count: usize) -> (Vec<SceneSample>, TrainConfig) {
        let params = SceneParams {
            height: 32,
            width: 48,
            focal_px: 40.0,
            obstacle_size: (4, 8),
            ..SceneParams::default()
        };
        let samples = generate_dataset(&params, count).unwrap();
        let cfg = TrainConfig {
            net: NetConfig {
                input_size: (32, 48),
                encoder_channels: [4, 4, 4, 4],
                aspp_rates: vec![1, 2],
                ..NetConfig::default()
            },
            optim: OptimConfig {
                lr0: 1e-3,
                ..OptimConfig::default()
            },
            epochs: 1,
            ..TrainConfig::default()
        };
        (samples, cfg)
    }

    #[test]
    fn toy_training_reduces_loss() {
        let (samples, mut cfg) = toy_setup(8);
        cfg.epochs = 7;
        let state = train(&samples, &cfg, None, &mut ()).unwrap();
        let totals: Vec<f64> = state.log.iter().map(|l| l.total).take(50).collect();
        assert_eq!(totals.len(), 50);
        let first: f64 = totals[..10].iter().sum();
        let last: f64 = totals[40..].iter().sum();
        assert!(last < first, "moving average went from {} to {}", first / 10.0, last / 10.0);
        let lrs: Vec<f64> = state.log.iter().map(|l| l.lr).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn lambda1_zero_logs_zero_ws() {
        let (samples, mut cfg) = toy_setup(3);
        cfg.loss.weights.lambda1 = 0.0;
        let state = train(&samples, &cfg, None, &mut ()).unwrap();
        assert!(state.log.iter().all(|l| l.ws == 0.0));
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let (samples, mut cfg) = toy_setup(4);
        cfg.epochs = 2;
        cfg.augment = Some(AugSpec {
            rotations_deg: vec![5.0],
            color_refs: 1,
            elastic: None,
            ..AugSpec::default()
        });
        let dir = tempfile::tempdir().unwrap();
        let a = train(&samples, &cfg, Some(dir.path()), &mut ()).unwrap();
        let b = train(&samples, &cfg, None, &mut ()).unwrap();
        assert!(a.model.params.bit_equal(&b.model.params));
        assert_eq!(a.model.bn, b.model.bn);
        assert_eq!(a.log.len(), 2 * 4 * 4);

        let resumed = resume(&checkpoint_dir(dir.path(), 1), &samples, None, &mut ()).unwrap();
        assert!(resumed.model.params.bit_equal(&a.model.params));
        assert_eq!(resumed.optim, a.optim);
        assert_eq!(resumed.log, a.log);
        assert_eq!(
            parse_metrics_csv(&dir.path().join(METRICS_CSV)).unwrap(),
            a.log
        );
    }

    #[test]
    fn checkpoint_preserves_forward_outputs() {
        let (samples, cfg) = toy_setup(2);
        let dir = tempfile::tempdir().unwrap();
        let mut state = train(&samples, &cfg, Some(dir.path()), &mut ()).unwrap();
        let mut loaded = load_model(&checkpoint_dir(dir.path(), 1)).unwrap();
        let mask = sample_imu_mask(&samples[0]).unwrap();
        let a = state.model.forward(&samples[0].image, &mask, BnMode::Eval).unwrap();
        let b = loaded.forward(&samples[0].image, &mask, BnMode::Eval).unwrap();
        assert_eq!(a.seg.probs.data(), b.seg.probs.data());
    }

    #[test]
    fn rejects_mismatched_resolution() {
        let (samples, mut cfg) = toy_setup(1);
        cfg.net.input_size = (64, 48);
        assert!(matches!(init_training(&samples, &cfg), Err(Error::Config(_))));
    }
}

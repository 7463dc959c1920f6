//! Shared-seed ablation: the full model against one without the separation
//! loss and one without the IMU channel.
//!
//! For each seed the three runs see the same training frames, the same
//! weight initialisation and the same visiting order; only the ablation
//! switch differs. All three are scored on the same held-out frames.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use wasr::infer::evaluate_model;
use wasr::scene::{generate_dataset, SceneParams, SceneSample};
use wasr::train::{train, TrainConfig};

use crate::config::{RunConfig, HELDOUT_SEED_OFFSET};
use crate::error::CliResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Variant {
    Full,
    NoWs,
    NoImu,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoWs, Variant::NoImu];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "WaSR",
            Variant::NoWs => "WaSR_NOWS",
            Variant::NoImu => "WaSR_NOIMU",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoWs => cfg.loss.weights.lambda1 = 0.0,
            Variant::NoImu => cfg.net.use_imu = false,
        }
        cfg
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub f_measure: Option<f64>,
    pub edge_mean: Option<f64>,
    pub separation_mean: Option<f64>,
    pub final_loss: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DirectionCheck {
    pub name: &'static str,
    pub per_seed: Vec<Option<bool>>,
    /// Strict majority of seeds pass.
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<RunResult>,
    /// `variant: key old -> new` for every configuration difference from the full run.
    pub config_diffs: Vec<String>,
    pub checks: Vec<DirectionCheck>,
}

/// Where the frames of one seed come from.
pub enum AblationData {
    /// Generated per seed: training frames from `seed`, held-out frames from `seed + 1000`.
    Generated {
        params: SceneParams,
        train_count: usize,
        heldout_count: usize,
    },
    /// The same frames for every seed; seeds then vary weights and order only.
    Fixed {
        train: Vec<SceneSample>,
        heldout: Vec<SceneSample>,
    },
}

impl AblationData {
    fn frames(&self, seed: u64) -> CliResult<(Vec<SceneSample>, Vec<SceneSample>)> {
        Ok(match self {
            AblationData::Generated {
                params,
                train_count,
                heldout_count,
            } => {
                let train = generate_dataset(&SceneParams { seed, ..params.clone() }, *train_count)?;
                let held = SceneParams {
                    seed: seed + HELDOUT_SEED_OFFSET,
                    ..params.clone()
                };
                (train, generate_dataset(&held, *heldout_count)?)
            }
            AblationData::Fixed { train, heldout } => (train.clone(), heldout.clone()),
        })
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Lines of the form `key: old -> new`.
pub fn config_diff(a: &TrainConfig, b: &TrainConfig) -> Vec<String> {
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    flatten("", &serde_json::to_value(a).expect("serializable"), &mut fa);
    flatten("", &serde_json::to_value(b).expect("serializable"), &mut fb);
    fa.iter()
        .zip(&fb)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, y)| format!("{}: {} -> {}", x.0, x.1, y.1))
        .collect()
}

fn base_config(cfg: &RunConfig, seed: u64) -> CliResult<TrainConfig> {
    let mut base = cfg.train()?;
    base.seed = seed;
    base.net.seed = seed;
    if let Some(a) = &mut base.augment {
        a.seed = seed;
    }
    Ok(base)
}

fn check(name: &'static str, seeds: &[u64], runs: &[RunResult], pass: impl Fn(&RunResult, &RunResult, &RunResult) -> Option<bool>) -> DirectionCheck {
    let find = |seed: u64, v: Variant| runs.iter().find(|r| r.seed == seed && r.variant == v).expect("run present");
    let per_seed: Vec<Option<bool>> = seeds
        .iter()
        .map(|&s| pass(find(s, Variant::Full), find(s, Variant::NoWs), find(s, Variant::NoImu)))
        .collect();
    let passes = per_seed.iter().filter(|p| **p == Some(true)).count();
    DirectionCheck {
        name,
        passed: 2 * passes > seeds.len(),
        per_seed,
    }
}

pub fn run_ablation(cfg: &RunConfig, data: &AblationData) -> CliResult<AblationReport> {
    let seeds = cfg.ablate_seeds()?;
    let infer_cfg = cfg.infer()?;
    let iou = cfg.iou_threshold()?;
    let mut runs = Vec::new();
    let mut config_diffs = Vec::new();
    for &seed in &seeds {
        let (train_set, heldout) = data.frames(seed)?;
        let base = base_config(cfg, seed)?;
        for v in Variant::ALL {
            let run_cfg = v.apply(&base);
            if seed == seeds[0] && v != Variant::Full {
                config_diffs.extend(config_diff(&base, &run_cfg).into_iter().map(|d| format!("{}: {d}", v.label())));
            }
            eprintln!("ablation seed {seed}: training {}", v.label());
            let mut state = train(&train_set, &run_cfg, None, &mut ())?;
            let eval = evaluate_model(&mut state.model, &heldout, &infer_cfg, run_cfg.loss.ws_stage, iou)?;
            runs.push(RunResult {
                variant: v,
                seed,
                f_measure: eval.report.overall.f_measure,
                edge_mean: eval.report.overall.edge_mean,
                separation_mean: eval.separation_mean,
                final_loss: state.log.last().map_or(f64::NAN, |l| l.total),
            });
        }
    }
    let lt = |a: Option<f64>, b: Option<f64>, strict: bool| match (a, b) {
        (Some(a), Some(b)) => Some(if strict { a < b } else { a <= b }),
        _ => None,
    };
    let checks = vec![
        check("separation(WaSR) < separation(WaSR_NOWS)", &seeds, &runs, |full, nows, _| {
            lt(full.separation_mean, nows.separation_mean, true)
        }),
        check("edge(WaSR) <= edge(WaSR_NOIMU)", &seeds, &runs, |full, _, noimu| {
            lt(full.edge_mean, noimu.edge_mean, false)
        }),
    ];
    Ok(AblationReport {
        seeds,
        runs,
        config_diffs,
        checks,
    })
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

fn fmt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.digits$}"))
}

impl AblationReport {
    pub fn mean_of(&self, v: Variant, field: fn(&RunResult) -> Option<f64>) -> Option<f64> {
        mean(self.runs.iter().filter(|r| r.variant == v).map(field))
    }

    /// One row per variant, averaged over seeds, then the direction checks.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<12} {:>7} {:>9} {:>12}\n", "variant", "F", "edge px", "separation");
        for v in Variant::ALL {
            let _ = writeln!(
                s,
                "{:<12} {:>7} {:>9} {:>12}",
                v.label(),
                fmt(self.mean_of(v, |r| r.f_measure), 1),
                fmt(self.mean_of(v, |r| r.edge_mean), 3),
                fmt(self.mean_of(v, |r| r.separation_mean), 4),
            );
        }
        let _ = writeln!(s, "\nseeds {:?}; differences from the full configuration:", self.seeds);
        for d in &self.config_diffs {
            let _ = writeln!(s, "  {d}");
        }
        let _ = writeln!(s);
        for c in &self.checks {
            let marks: Vec<&str> = c
                .per_seed
                .iter()
                .map(|p| match p {
                    Some(true) => "pass",
                    Some(false) => "fail",
                    None => "n/a",
                })
                .collect();
            let _ = writeln!(s, "{} {} [{}]", if c.passed { "PASS" } else { "FAIL" }, c.name, marks.join(" "));
        }
        s
    }

    pub fn per_seed_table(&self) -> String {
        let mut s = format!("{:<6} {:<12} {:>7} {:>9} {:>12}\n", "seed", "variant", "F", "edge px", "separation");
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{:<6} {:<12} {:>7} {:>9} {:>12}",
                r.seed,
                r.variant.label(),
                fmt(r.f_measure, 1),
                fmt(r.edge_mean, 3),
                fmt(r.separation_mean, 4)
            );
        }
        s
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ablation.txt"), format!("{}\n{}", self.to_table(), self.per_seed_table()))?;
        let json = serde_json::to_string_pretty(self).expect("serializable");
        std::fs::write(dir.join("ablation.json"), json)?;
        Ok(())
    }
}

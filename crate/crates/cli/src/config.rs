//! Flat `key=value` run configuration shared by every subcommand.
//!
//! Values come from the defaults below, then an optional `--config` file,
//! then `--key value` arguments. Hyphens and underscores in key names are
//! interchangeable on the command line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use wasr::augment::{AugSpec, ElasticSpec};
use wasr::infer::{InferConfig, InferNorm};
use wasr::losses::{LossConfig, LossWeights, SeparationOptions, WsStage};
use wasr::net::NetConfig;
use wasr::postprocess::{Connectivity, PostprocessConfig};
use wasr::scene::SceneParams;
use wasr::train::{OptimConfig, TrainConfig};

use crate::error::{CliError, CliResult};

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

const fn key(name: &'static str, default: &'static str, doc: &'static str) -> Key {
    Key { name, default, doc }
}

pub const KEYS: &[Key] = &[
    key("seed", "0", "master seed: scenes, weight init and visiting order"),
    // scenes
    key("count", "200", "frames written by synth"),
    key("input_h", "96", "frame and network input height, multiple of 8"),
    key("input_w", "128", "frame and network input width, multiple of 8"),
    key("focal_px", "100", "camera focal length in pixels"),
    key("roll_range", "-0.12,0.12", "camera roll range, radians"),
    key("pitch_range", "-0.1,0.1", "camera pitch range, radians"),
    key("water_texture", "0.05", "wave pattern amplitude"),
    key("glitter_probability", "0.3", "chance of specular glitter per scene"),
    key("reflection_strength", "0.35", "opacity of obstacle reflections"),
    key("obstacle_count", "0,4", "inclusive obstacles per scene"),
    key("obstacle_size", "6,16", "inclusive obstacle side length, pixels"),
    key("distractor_fraction", "0.1", "chance an obstacle slot is a 1-px distractor"),
    key("protruding_fraction", "0.4", "chance an obstacle crosses the water edge"),
    key("haze", "0.8", "maximum haze at the horizon"),
    key("noise", "0.02", "per-pixel noise amplitude"),
    key("sequence_length", "25", "frames per sequence id"),
    // network
    key("channels", "16,32,48,64", "encoder widths of res2..res5"),
    key("aspp_rates", "1,2,4,6", "ASPP dilation rates"),
    key("use_imu", "true", "feed the IMU horizon mask; --no-imu sets false"),
    // losses
    key("lambda1", "0.01", "separation loss weight"),
    key("lambda2", "1e-6", "L2 weight decay"),
    key("focal_gamma", "2", "focal loss exponent"),
    key("ws_stage", "res5", "features carrying the separation loss: res4 or res5"),
    key("ws_epsilon", "0.1", "denominator floor of the separation loss during training"),
    // optimizer
    key("epochs", "5", "training epochs"),
    key("lr", "1e-4", "initial learning rate"),
    key("momentum", "0.9", "RMSProp momentum"),
    key("rms_decay", "0.9", "RMSProp squared-gradient decay"),
    key("rms_eps", "1e-8", "RMSProp denominator floor"),
    key("poly_power", "0.9", "polynomial learning-rate decay exponent"),
    // augmentation
    key("augment", "false", "expand training data with the variants below"),
    key("aug_mirror", "true", "add horizontal mirrors"),
    key("aug_rotations", "-15,-5,5,15", "extra rotations, degrees; empty for none"),
    key("aug_elastic_step", "16", "elastic grid spacing, pixels; 0 disables"),
    key("aug_elastic_disp", "3", "elastic maximum displacement, pixels"),
    key("aug_color_refs", "2", "colour variants per geometric variant"),
    key("aug_seed", "0", "seed of elastic fields and colour references"),
    // inference and scoring
    key("bn_stats", "running", "normalization at test time: running or frame"),
    key("min_area", "auto", "smallest kept obstacle blob, pixels; auto scales 5x5 at 512x384"),
    key("connectivity", "4", "blob connectivity: 4 or 8"),
    key("iou_threshold", "0.3", "detection match threshold"),
    // ablation
    key("ablate_seeds", "0,1,2", "seeds of the ablation protocol"),
    key("ablate_heldout", "50", "held-out frames per ablation seed"),
];

/// Seed offset of the held-out split generated by `ablate`.
pub const HELDOUT_SEED_OFFSET: u64 = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

fn lookup(name: &str) -> Option<&'static Key> {
    let name = name.replace('-', "_");
    KEYS.iter().find(|k| k.name == name)
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|k| (k.name, k.default.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, name: &str, value: &str) -> CliResult<()> {
        let key = lookup(name).ok_or_else(|| CliError::Usage(format!("unknown config key '{name}'")))?;
        self.values.insert(key.name, value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, name: &str) -> &str {
        let key = lookup(name).unwrap_or_else(|| panic!("no config key {name}"));
        &self.values[key.name]
    }

    /// Reads `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> CliResult<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected key=value", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| CliError::Usage(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> CliResult<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Every key with its effective value, in table order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{} = {}", k.name, self.values[k.name]);
        }
        out
    }

    pub fn echo(&self, dir: &Path) -> CliResult<()> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        let path = dir.join("config.txt");
        std::fs::write(&path, self.to_text()).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    fn parse<T: FromStr>(&self, name: &str) -> CliResult<T> {
        let v = self.get(name);
        v.parse()
            .map_err(|_| CliError::Usage(format!("config key {name}: cannot parse '{v}'")))
    }

    fn list<T: FromStr>(&self, name: &str) -> CliResult<Vec<T>> {
        let v = self.get(name);
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| CliError::Usage(format!("config key {name}: cannot parse '{s}' in '{v}'")))
            })
            .collect()
    }

    fn pair<T: FromStr + Copy>(&self, name: &str) -> CliResult<(T, T)> {
        match self.list(name)?[..] {
            [a, b] => Ok((a, b)),
            _ => Err(CliError::Usage(format!("config key {name}: expected two comma-separated values"))),
        }
    }

    pub fn seed(&self) -> CliResult<u64> {
        self.parse("seed")
    }

    pub fn count(&self) -> CliResult<usize> {
        self.parse("count")
    }

    pub fn iou_threshold(&self) -> CliResult<f64> {
        let t: f64 = self.parse("iou_threshold")?;
        if !(t > 0.0 && t <= 1.0) {
            return Err(CliError::Usage(format!("iou_threshold must lie in (0, 1], got {t}")));
        }
        Ok(t)
    }

    pub fn scene_params(&self) -> CliResult<SceneParams> {
        let p = SceneParams {
            height: self.parse("input_h")?,
            width: self.parse("input_w")?,
            focal_px: self.parse("focal_px")?,
            roll_range: self.pair("roll_range")?,
            pitch_range: self.pair("pitch_range")?,
            water_texture: self.parse("water_texture")?,
            glitter_probability: self.parse("glitter_probability")?,
            reflection_strength: self.parse("reflection_strength")?,
            obstacle_count: self.pair("obstacle_count")?,
            obstacle_size: self.pair("obstacle_size")?,
            distractor_fraction: self.parse("distractor_fraction")?,
            protruding_fraction: self.parse("protruding_fraction")?,
            haze: self.parse("haze")?,
            noise: self.parse("noise")?,
            sequence_length: self.parse("sequence_length")?,
            seed: self.seed()?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn net(&self) -> CliResult<NetConfig> {
        let channels: Vec<usize> = self.list("channels")?;
        let encoder_channels: [usize; 4] = channels
            .try_into()
            .map_err(|_| CliError::Usage("config key channels: expected four widths".into()))?;
        let net = NetConfig {
            input_size: (self.parse("input_h")?, self.parse("input_w")?),
            encoder_channels,
            aspp_rates: self.list("aspp_rates")?,
            use_imu: self.parse("use_imu")?,
            seed: self.seed()?,
            ..NetConfig::default()
        };
        net.validate()?;
        Ok(net)
    }

    pub fn loss(&self) -> CliResult<LossConfig> {
        let ws_stage = match self.get("ws_stage") {
            "res4" => WsStage::Res4,
            "res5" => WsStage::Res5,
            other => return Err(CliError::Usage(format!("ws_stage must be res4 or res5, got '{other}'"))),
        };
        let epsilon: f64 = self.parse("ws_epsilon")?;
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(CliError::Usage(format!("ws_epsilon must be positive, got {epsilon}")));
        }
        Ok(LossConfig {
            weights: LossWeights {
                lambda1: self.parse("lambda1")?,
                lambda2: self.parse("lambda2")?,
                gamma: self.parse("focal_gamma")?,
            },
            ws_stage,
            separation: SeparationOptions {
                epsilon,
                ..SeparationOptions::default()
            },
        })
    }

    pub fn augment(&self) -> CliResult<Option<AugSpec>> {
        if !self.parse::<bool>("augment")? {
            return Ok(None);
        }
        let step: usize = self.parse("aug_elastic_step")?;
        let spec = AugSpec {
            mirror: self.parse("aug_mirror")?,
            rotations_deg: self.list("aug_rotations")?,
            elastic: (step > 0)
                .then(|| -> CliResult<ElasticSpec> {
                    Ok(ElasticSpec {
                        grid_step: step,
                        max_displacement: self.parse("aug_elastic_disp")?,
                    })
                })
                .transpose()?,
            color_refs: self.parse("aug_color_refs")?,
            seed: self.parse("aug_seed")?,
        };
        spec.validate()?;
        Ok(Some(spec))
    }

    pub fn train(&self) -> CliResult<TrainConfig> {
        let cfg = TrainConfig {
            net: self.net()?,
            loss: self.loss()?,
            optim: OptimConfig {
                lr0: self.parse("lr")?,
                momentum: self.parse("momentum")?,
                rms_decay: self.parse("rms_decay")?,
                eps: self.parse("rms_eps")?,
                poly_power: self.parse("poly_power")?,
            },
            epochs: self.parse("epochs")?,
            seed: self.seed()?,
            augment: self.augment()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn infer(&self) -> CliResult<InferConfig> {
        let norm = match self.get("bn_stats") {
            "running" => InferNorm::Running,
            "frame" => InferNorm::Frame,
            other => return Err(CliError::Usage(format!("bn_stats must be running or frame, got '{other}'"))),
        };
        let min_area_px = match self.get("min_area") {
            "auto" => None,
            _ => Some(self.parse("min_area")?),
        };
        let connectivity = match self.get("connectivity") {
            "4" => Connectivity::Four,
            "8" => Connectivity::Eight,
            other => return Err(CliError::Usage(format!("connectivity must be 4 or 8, got '{other}'"))),
        };
        Ok(InferConfig {
            norm,
            post: PostprocessConfig {
                min_area_px,
                connectivity,
            },
        })
    }

    pub fn ablate_seeds(&self) -> CliResult<Vec<u64>> {
        let seeds: Vec<u64> = self.list("ablate_seeds")?;
        if seeds.is_empty() {
            return Err(CliError::Usage("ablate_seeds is empty".into()));
        }
        Ok(seeds)
    }

    pub fn ablate_heldout(&self) -> CliResult<usize> {
        self.parse("ablate_heldout")
    }

    /// Checks that every key parses, so mistakes surface before any work.
    pub fn validate(&self) -> CliResult<()> {
        self.scene_params()?;
        self.train()?;
        self.infer()?;
        self.iou_threshold()?;
        self.ablate_seeds()?;
        self.ablate_heldout()?;
        self.count()?;
        Ok(())
    }
}

/// Human-readable key table for `wasr keys`.
pub fn key_table() -> String {
    let mut out = String::new();
    for k in KEYS {
        let _ = writeln!(out, "{:<22} {:<16} {}", k.name, k.default, k.doc);
    }
    out
}

/// Splits `--key value` and `--key=value` config overrides out of `args`.
/// `--no-imu` is shorthand for `--use-imu false`. Everything else is
/// returned untouched for the subcommand parser.
pub fn split_overrides(args: &[String]) -> CliResult<(Vec<(String, String)>, Vec<String>)> {
    let mut overrides = Vec::new();
    let mut rest = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg.clone());
            continue;
        };
        if flag == "no-imu" || flag == "no_imu" {
            overrides.push(("use_imu".into(), "false".into()));
            continue;
        }
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (flag, None),
        };
        match lookup(name) {
            Some(k) => {
                let value = match inline {
                    Some(v) => v,
                    None => it
                        .next()
                        .cloned()
                        .ok_or_else(|| CliError::Usage(format!("--{name} needs a value")))?,
                };
                overrides.push((k.name.to_string(), value));
            }
            None => rest.push(arg.clone()),
        }
    }
    Ok((overrides, rest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn defaults_parse() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let train = cfg.train().unwrap();
        assert_eq!(train, TrainConfig::default());
        assert_eq!(cfg.scene_params().unwrap(), SceneParams::default());
        assert_eq!(cfg.infer().unwrap(), InferConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("lamda1", "0"), Err(CliError::Usage(_))));
        let err = cfg.apply_text("seed = 3\nbogus = 1\n", "f.txt").unwrap_err();
        assert!(err.to_string().contains("f.txt:2"), "{err}");
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("lambda1", "0").unwrap();
        cfg.set("aug-rotations", "").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text(), "echo").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_are_split_out() {
        let (o, rest) = split_overrides(&args("train --data d --lambda1 0 --no-imu --iou-threshold=0.5 --out o")).unwrap();
        assert_eq!(
            o,
            vec![
                ("lambda1".to_string(), "0".to_string()),
                ("use_imu".to_string(), "false".to_string()),
                ("iou_threshold".to_string(), "0.5".to_string())
            ]
        );
        assert_eq!(rest, args("train --data d --out o"));
        assert!(split_overrides(&args("--seed")).is_err());
    }

    #[test]
    fn bad_values_are_usage_errors() {
        let mut cfg = RunConfig::default();
        cfg.set("channels", "1,2,3").unwrap();
        assert!(matches!(cfg.net(), Err(CliError::Usage(_))));
        let mut cfg = RunConfig::default();
        cfg.set("ws_stage", "res3").unwrap();
        assert!(matches!(cfg.loss(), Err(CliError::Usage(_))));
        let mut cfg = RunConfig::default();
        cfg.set("input_h", "90").unwrap();
        assert!(matches!(cfg.net(), Err(CliError::Usage(_))));
    }
}

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use wasr::dataset::{encode_gray, encode_rgb8, frame_name, manifest_hash, read_dataset, read_ground_truth, read_inputs, write_dataset};
use wasr::gradcheck::{faulty_check, format_table, registry, run_checks};
use wasr::infer::predict;
use wasr::metrics::{f_measure, MatchCounts};
use wasr::overlay::render_overlay;
use wasr::predictions::{evaluate_predictions, read_predictions, write_predictions, PredictionRecord};
use wasr::scene::generate_dataset;
use wasr::train::{load_model, resume, train, StepLog, TrainObserver};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Writes `count` generated scenes and prints the manifest hash.
pub fn synth(cfg: &RunConfig, out: &Path) -> CliResult<String> {
    let count = cfg.count()?;
    if count == 0 {
        return Err(CliError::Usage("count must be at least 1".into()));
    }
    let params = cfg.scene_params()?;
    let samples = generate_dataset(&params, count)?;
    create_dir(out)?;
    write_dataset(&samples, out, Some(&params))?;
    cfg.echo(out)?;
    let hash = manifest_hash(out)?;
    println!("wrote {count} frames to {} (manifest sha256 {hash})", out.display());
    Ok(hash)
}

/// Prints a line per epoch and a sparse running loss.
struct Progress {
    every: usize,
}

impl TrainObserver for Progress {
    fn step(&mut self, log: &StepLog) {
        if log.step % self.every == 0 {
            eprintln!(
                "step {:>6}  epoch {}  focal {:.4}  ws {:.4}  l2 {:.4}  total {:.4}  lr {:.3e}",
                log.step, log.epoch, log.focal, log.ws, log.l2, log.total, log.lr
            );
        }
    }

    fn epoch_done(&mut self, epoch: usize, checkpoint: Option<&Path>) {
        match checkpoint {
            Some(p) => eprintln!("epoch {epoch} done, checkpoint {}", p.display()),
            None => eprintln!("epoch {epoch} done"),
        }
    }
}

pub fn train_cmd(cfg: &RunConfig, data: &Path, out: &Path, resume_from: Option<&Path>) -> CliResult<()> {
    let samples = read_dataset(data)?;
    create_dir(out)?;
    let mut progress = Progress { every: 100 };
    let state = match resume_from {
        Some(ckpt) => {
            let state = resume(ckpt, &samples, Some(out), &mut progress)?;
            let info = wasr::train::read_checkpoint_info(ckpt)?;
            let echoed = serde_json::to_string_pretty(&info.config).expect("serializable");
            write_file(&out.join("config.json"), echoed.as_bytes())?;
            state
        }
        None => {
            let train_cfg = cfg.train()?;
            cfg.echo(out)?;
            train(&samples, &train_cfg, Some(out), &mut progress)?
        }
    };
    if let Some(last) = state.log.last() {
        println!("trained {} steps, final loss {:?}", last.step + 1, last.total);
    }
    Ok(())
}

pub fn infer_cmd(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path, overlay: bool) -> CliResult<usize> {
    let mut model = load_model(checkpoint)?;
    model.cfg.use_imu &= cfg.net()?.use_imu;
    let infer_cfg = cfg.infer()?;
    let (camera, frames) = read_inputs(data)?;
    let (h, w) = model.cfg.input_size;
    if (camera.height, camera.width) != (h, w) {
        return Err(CliError::Data(format!(
            "dataset frames are {}x{} but the checkpoint was trained at {w}x{h}",
            camera.width, camera.height
        )));
    }
    create_dir(&out.join("masks"))?;
    if overlay {
        create_dir(&out.join("overlays"))?;
    }
    cfg.echo(out)?;
    let mut records = Vec::with_capacity(frames.len());
    for f in &frames {
        let p = predict(&mut model, &f.image, f.imu, &camera, &infer_cfg)?;
        let name = frame_name(f.frame);
        write_file(&out.join("masks").join(&name), &encode_gray(w, h, p.labels.to_codes())?)?;
        if overlay {
            let rgb = render_overlay(&f.image, &p.labels, &p.result);
            write_file(&out.join("overlays").join(&name), &encode_rgb8(w, h, rgb)?)?;
        }
        records.push(PredictionRecord {
            frame: f.frame,
            sequence: f.sequence.clone(),
            detections: p.result.detections,
            edge: p.result.edge,
        });
    }
    write_predictions(out, &records)?;
    println!("wrote predictions for {} frames to {}", records.len(), out.display());
    Ok(records.len())
}

pub fn parse_counts(text: &str) -> CliResult<MatchCounts> {
    let parts: Vec<&str> = text.split([',', ' ', '\t']).filter(|s| !s.is_empty()).collect();
    let nums: Vec<usize> = parts
        .iter()
        .map(|s| s.parse())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("counts must be TP,FP,FN non-negative integers, got '{text}'")))?;
    match nums[..] {
        [tp, fp, fn_] => Ok(MatchCounts::new(tp, fp, fn_)),
        _ => Err(CliError::Usage(format!("counts need exactly three values, got '{text}'"))),
    }
}

/// One line per triple: `TP FP FN F`.
pub fn counts_table(triples: &[MatchCounts]) -> String {
    let mut out = format!("{:>8} {:>8} {:>8} {:>6}\n", "TP", "FP", "FN", "F");
    for c in triples {
        let f = f_measure(*c).map_or("-".to_string(), |f| format!("{f:.1}"));
        let _ = writeln!(out, "{:>8} {:>8} {:>8} {:>6}", c.tp, c.fp, c.fn_, f);
    }
    out
}

/// `-` reads triples from stdin, one per line.
pub fn eval_counts(args: &[String]) -> CliResult<String> {
    let mut triples = Vec::new();
    for a in args {
        if a == "-" {
            for line in std::io::stdin().lines() {
                let line = line?;
                if !line.trim().is_empty() {
                    triples.push(parse_counts(&line)?);
                }
            }
        } else {
            triples.push(parse_counts(a)?);
        }
    }
    let table = counts_table(&triples);
    print!("{table}");
    Ok(table)
}

pub fn eval_cmd(cfg: &RunConfig, pred: &Path, gt: &Path, out: Option<&Path>) -> CliResult<wasr::metrics::EvalReport> {
    let iou = cfg.iou_threshold()?;
    let records = read_predictions(pred)?;
    let truth = read_ground_truth(gt)?;
    let report = evaluate_predictions(&records, &truth, iou)?;
    let out: PathBuf = out.map_or_else(|| pred.to_path_buf(), Path::to_path_buf);
    create_dir(&out)?;
    let table = report.to_table();
    write_file(&out.join("report.txt"), table.as_bytes())?;
    let json = serde_json::to_string_pretty(&report).expect("serializable");
    write_file(&out.join("report.json"), json.as_bytes())?;
    print!("{table}");
    Ok(report)
}

pub fn gradcheck_cmd(cfg: &RunConfig, inject_fault: bool, out: Option<&Path>) -> CliResult<()> {
    let mut checks = registry();
    if inject_fault {
        checks.push(faulty_check());
    }
    let rows = run_checks(&checks, cfg.seed()?)?;
    let table = format_table(&rows);
    print!("{table}");
    if let Some(dir) = out {
        create_dir(dir)?;
        write_file(&dir.join("gradcheck.txt"), table.as_bytes())?;
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradient check failed: {}", failed.join(", "))))
    }
}

//! Registry of finite-difference checks: one per differentiable op, a few per
//! network block, and the whole forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{build_region_index, compute_losses, focal_loss, l2_reg, water_separation_loss, LossConfig};
use crate::net::{arm1, arm2, aspp, build_network, encoder_forward, ffm, wasr_forward, NetConfig, NetCtx};
use crate::postprocess::{Label, SegLabelMap};
use crate::tensor::{check_gradient, Function, BnMode, BnState, Conv2dSpec, GradCheckReport, ParamStore, RunningStats, Tensor};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-5;
pub const END_TO_END_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CheckKind {
    Op,
    Block,
    EndToEnd,
}

type CheckFn = fn(&mut ChaCha8Rng) -> Result<GradCheckReport>;

pub struct GradCheck {
    pub name: &'static str,
    pub kind: CheckKind,
    run: CheckFn,
}

impl GradCheck {
    pub fn tolerance(&self) -> f64 {
        match self.kind {
            CheckKind::EndToEnd => END_TO_END_TOLERANCE,
            _ => OP_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckRow {
    pub name: &'static str,
    pub kind: CheckKind,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub tolerance: f64,
    pub passed: bool,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("valid shape")
}

fn weights_like(rng: &mut ChaCha8Rng, t: &Tensor) -> Vec<f64> {
    (0..t.len()).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn merge(reports: impl IntoIterator<Item = GradCheckReport>) -> GradCheckReport {
    reports.into_iter().fold(
        GradCheckReport {
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        },
        |a, b| GradCheckReport {
            max_rel_error: a.max_rel_error.max(b.max_rel_error),
            checked: a.checked + b.checked,
            skipped: a.skipped + b.skipped,
        },
    )
}

/// Checks `op` with respect to each of `inputs` in turn, under a random
/// weighted-sum readout so every output element matters.
fn check_inputs_of(
    rng: &mut ChaCha8Rng,
    inputs: &[Tensor],
    op: impl Fn(&[Tensor]) -> Result<Tensor>,
) -> Result<GradCheckReport> {
    let probe = op(inputs)?;
    let w = weights_like(rng, &probe);
    let mut reports = Vec::new();
    for i in 0..inputs.len() {
        let report = check_gradient(
            |x| {
                let mut args = inputs.to_vec();
                args[i] = x.clone();
                op(&args)?.weighted_sum(&w)
            },
            &inputs[i],
            STEP,
            None,
        )?;
        reports.push(report);
    }
    Ok(merge(reports))
}

fn unary(rng: &mut ChaCha8Rng, shape: &[usize], op: impl Fn(&Tensor) -> Result<Tensor>) -> Result<GradCheckReport> {
    let x = uniform(rng, shape, -1.0, 1.0);
    check_inputs_of(rng, &[x], |a| op(&a[0]))
}

fn binary(rng: &mut ChaCha8Rng, op: impl Fn(&Tensor, &Tensor) -> Result<Tensor>) -> Result<GradCheckReport> {
    let a = uniform(rng, &[2, 3, 4], -1.0, 1.0);
    let b = uniform(rng, &[2, 3, 4], -1.0, 1.0);
    check_inputs_of(rng, &[a, b], |t| op(&t[0], &t[1]))
}

fn check_conv(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut reports = Vec::new();
    for (k, spec) in [
        (3, Conv2dSpec::new(1, 1, 1)),
        (3, Conv2dSpec::new(2, 1, 1)),
        (3, Conv2dSpec::new(1, 2, 2)),
        (1, Conv2dSpec::new(1, 1, 0)),
    ] {
        let x = uniform(rng, &[2, 7, 6], -1.0, 1.0);
        let w = uniform(rng, &[3, 2, k, k], -1.0, 1.0);
        let b = uniform(rng, &[3], -1.0, 1.0);
        reports.push(check_inputs_of(rng, &[x, w, b], |t| t[0].conv2d(&t[1], Some(&t[2]), spec))?);
    }
    Ok(merge(reports))
}

fn check_batch_norm(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let x = uniform(rng, &[3, 4, 5], -1.0, 2.0);
    let g = uniform(rng, &[3], 0.5, 1.5);
    let b = uniform(rng, &[3], -0.5, 0.5);
    let train = check_inputs_of(rng, &[x.clone(), g.clone(), b.clone()], |t| {
        let mut stats = RunningStats::new(3);
        t[0].batch_norm(&t[1], &t[2], &mut stats, BnMode::Train)
    })?;
    let eval = check_inputs_of(rng, &[x, g, b], |t| {
        let mut stats = RunningStats {
            mean: vec![0.1, -0.2, 0.3],
            var: vec![0.5, 1.5, 2.0],
        };
        t[0].batch_norm(&t[1], &t[2], &mut stats, BnMode::Eval)
    })?;
    Ok(merge([train, eval]))
}

fn half_labels(h: usize, w: usize) -> SegLabelMap {
    let mut labels = SegLabelMap::filled(h, w, Label::Sky);
    for r in h / 3..h {
        for c in 0..w {
            let label = match (r * 7 + c * 3) % 5 {
                0 => Label::Obstacle,
                1 if r > h / 2 => Label::Unknown,
                _ => Label::Water,
            };
            labels.set(r, c, label);
        }
    }
    labels
}

fn check_separation(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let labels = half_labels(8, 8);
    let regions = build_region_index(&labels, (8, 8))?;
    let x = uniform(rng, &[4, 8, 8], -1.0, 1.0);
    check_gradient(|t| water_separation_loss(t, &regions), &x, STEP, None)
}

fn check_focal(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let labels = half_labels(6, 5);
    let p = uniform(rng, &[3, 6, 5], 0.05, 0.95);
    let mut reports = Vec::new();
    for gamma in [0.0, 0.5, 2.0] {
        reports.push(check_gradient(|t| focal_loss(t, &labels, gamma), &p, STEP, None)?);
    }
    Ok(merge(reports))
}

fn check_l2(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let w = uniform(rng, &[2, 3, 3, 3], -1.0, 1.0);
    let bias = Tensor::param(&[2], vec![0.3, -0.4])?;
    check_gradient(
        |t| {
            let mut store = ParamStore::new();
            store.insert("layer.weight", t.clone())?;
            store.insert("layer.bias", bias.clone())?;
            Ok(l2_reg(&store))
        },
        &w,
        STEP,
        None,
    )
}

/// Runs a block on freshly built parameters, checking against each input.
fn check_block(
    rng: &mut ChaCha8Rng,
    inputs: &[Tensor],
    block: fn(&mut NetCtx, &[Tensor]) -> Result<Tensor>,
) -> Result<GradCheckReport> {
    let mut params = ParamStore::new();
    let mut bn = BnState::new();
    let mut init = ChaCha8Rng::seed_from_u64(rng.random());
    {
        let mut ctx = NetCtx::build(&mut params, &mut bn, &mut init);
        block(&mut ctx, inputs)?;
    }
    check_inputs_of(rng, inputs, |t| {
        let mut bn = bn.clone();
        let mut ctx = NetCtx::run(&params, &mut bn, BnMode::Train);
        block(&mut ctx, t)
    })
}

fn toy_net() -> NetConfig {
    NetConfig {
        input_size: (16, 16),
        encoder_channels: [2, 4, 6, 8],
        ..NetConfig::default()
    }
}

/// Full forward pass on a 3×16×16 image: gradients with respect to the
/// image and to three entries of every parameter tensor.
fn check_wasr_forward(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let cfg = toy_net();
    let model = build_network(&cfg)?;
    let image = uniform(rng, &[3, 16, 16], 0.0, 1.0);
    let mask = crate::horizon::render_imu_mask(
        &crate::horizon::HorizonLine {
            slope: 0.1,
            intercept_row: 6.5,
            anchor_col: 7.5,
        },
        16,
        16,
    )?;
    let run = |params: &ParamStore, image: &Tensor| {
        let mut bn = model.bn.clone();
        wasr_forward(image, &mask, params, &mut bn, &cfg, BnMode::Train)
    };
    let w = weights_like(rng, &run(&model.params, &image)?.seg.probs);
    let mut reports = vec![check_gradient(
        |x| run(&model.params, x)?.seg.probs.weighted_sum(&w),
        &image,
        STEP,
        None,
    )?];
    for (name, t) in model.params.iter() {
        let picks: Vec<usize> = (0..3).map(|_| rng.random_range(0..t.len())).collect();
        reports.push(check_gradient(
            |x| run(&model.params.with_tensor(name, x.clone())?, &image)?.seg.probs.weighted_sum(&w),
            t,
            STEP,
            Some(&picks),
        )?);
    }
    Ok(merge(reports))
}

/// The training objective end to end, with respect to the image.
fn check_total_loss(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let cfg = toy_net();
    let model = build_network(&cfg)?;
    let image = uniform(rng, &[3, 16, 16], 0.0, 1.0);
    let mask = Tensor::full(&[1, 16, 16], 1.0)?;
    let labels = half_labels(16, 16);
    let loss = LossConfig::default();
    check_gradient(
        |x| {
            let mut bn = model.bn.clone();
            let out = wasr_forward(x, &mask, &model.params, &mut bn, &cfg, BnMode::Train)?;
            Ok(compute_losses(&out, &labels, &model.params, &loss)?.total)
        },
        &image,
        STEP,
        None,
    )
}

pub fn registry() -> Vec<GradCheck> {
    use CheckKind::*;
    let op = |name, run: CheckFn| GradCheck { name, kind: Op, run };
    vec![
        op("add", |r| binary(r, |a, b| a.add(b))),
        op("sub", |r| binary(r, |a, b| a.sub(b))),
        op("mul", |r| binary(r, |a, b| a.mul(b))),
        op("scale", |r| unary(r, &[2, 3, 4], |x| Ok(x.scale(-1.7)))),
        op("add_scalar", |r| unary(r, &[2, 3, 4], |x| Ok(x.add_scalar(0.3)))),
        op("sum", |r| unary(r, &[2, 3, 4], |x| Ok(x.sum()))),
        op("relu", |r| unary(r, &[2, 3, 4], |x| Ok(x.relu()))),
        op("sigmoid", |r| unary(r, &[2, 3, 4], |x| Ok(x.sigmoid()))),
        op("concat_channels", |r| {
            let a = uniform(r, &[2, 3, 4], -1.0, 1.0);
            let b = uniform(r, &[1, 3, 4], -1.0, 1.0);
            check_inputs_of(r, &[a, b], |t| Tensor::concat_channels(&[&t[0], &t[1]]))
        }),
        op("slice_channels", |r| unary(r, &[4, 3, 3], |x| x.slice_channels(1, 2))),
        op("mul_channels", |r| {
            let a = uniform(r, &[3, 4, 5], -1.0, 1.0);
            let b = uniform(r, &[3, 1, 1], -1.0, 1.0);
            check_inputs_of(r, &[a, b], |t| t[0].mul_channels(&t[1]))
        }),
        op("max_pool2d", |r| {
            merge([
                unary(r, &[2, 6, 8], |x| x.max_pool2d(2, 2))?,
                unary(r, &[2, 7, 7], |x| x.max_pool2d(3, 2))?,
            ])
            .pipe(Ok)
        }),
        op("global_avg_pool", |r| unary(r, &[3, 4, 5], |x| x.global_avg_pool())),
        op("upsample_bilinear", |r| {
            merge([
                unary(r, &[2, 3, 4], |x| x.upsample_bilinear(2))?,
                unary(r, &[2, 3, 3], |x| x.upsample_bilinear(4))?,
            ])
            .pipe(Ok)
        }),
        op("conv2d", check_conv),
        op("batch_norm", check_batch_norm),
        op("softmax_channels", |r| unary(r, &[3, 4, 5], |x| x.softmax_channels())),
        op("water_separation_loss", check_separation),
        op("focal_loss", check_focal),
        op("l2_reg", check_l2),
        GradCheck {
            name: "encoder",
            kind: Block,
            run: |r| {
                let x = uniform(r, &[3, 16, 16], 0.0, 1.0);
                check_block(r, &[x], |ctx, t| Ok(encoder_forward(ctx, &t[0], [4, 5, 6, 7])?.res5))
            },
        },
        GradCheck {
            name: "arm1",
            kind: Block,
            run: |r| {
                let x = uniform(r, &[6, 4, 4], -1.0, 1.0);
                let imu = uniform(r, &[1, 4, 4], 0.0, 1.0);
                check_block(r, &[x, imu], |ctx, t| arm1(ctx, "arm1", &t[0], &t[1]))
            },
        },
        GradCheck {
            name: "arm2",
            kind: Block,
            run: |r| {
                let x = uniform(r, &[8, 4, 4], -1.0, 1.0);
                let res3 = uniform(r, &[8, 4, 4], -1.0, 1.0);
                let imu = uniform(r, &[1, 4, 4], 0.0, 1.0);
                check_block(r, &[x, res3, imu], |ctx, t| arm2(ctx, "arm2", &t[0], &t[1], &t[2]))
            },
        },
        GradCheck {
            name: "ffm",
            kind: Block,
            run: |r| {
                let deep = uniform(r, &[4, 4, 4], -1.0, 1.0);
                let res2 = uniform(r, &[3, 4, 4], -1.0, 1.0);
                let imu = uniform(r, &[1, 4, 4], 0.0, 1.0);
                check_block(r, &[deep, res2, imu], |ctx, t| ffm(ctx, "ffm", &t[0], &t[1], &t[2]))
            },
        },
        GradCheck {
            name: "aspp",
            kind: Block,
            run: |r| {
                let x = uniform(r, &[4, 6, 6], -1.0, 1.0);
                check_block(r, &[x], |ctx, t| aspp(ctx, "aspp", &t[0], &[1, 2, 4], 3))
            },
        },
        GradCheck {
            name: "wasr_forward",
            kind: EndToEnd,
            run: check_wasr_forward,
        },
        GradCheck {
            name: "total_loss",
            kind: EndToEnd,
            run: check_total_loss,
        },
    ]
}

trait Pipe: Sized {
    fn pipe<T>(self, f: impl FnOnce(Self) -> T) -> T {
        f(self)
    }
}

impl<T> Pipe for T {}

/// `x * 2` whose backward has the wrong sign.
struct FaultyDouble(Tensor);

impl Function for FaultyDouble {
    fn name(&self) -> &'static str {
        "faulty_double"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.0]
    }
    fn backward(&self, _out: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.iter().map(|g| -2.0 * g).collect())]
    }
}

fn faulty_double(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| 2.0 * v).collect();
    Tensor::from_op(x.shape().to_vec(), data, FaultyDouble(x.clone()))
}

/// A deliberately broken op, for showing that the harness fails loudly.
pub fn faulty_check() -> GradCheck {
    GradCheck {
        name: "faulty_double",
        kind: CheckKind::Op,
        run: |r| unary(r, &[2, 3], |x| Ok(faulty_double(x))),
    }
}

/// Runs the given checks with a fixed seed.
pub fn run_checks(checks: &[GradCheck], seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    checks
        .iter()
        .map(|c| {
            let r = (c.run)(&mut rng)?;
            let tolerance = c.tolerance();
            Ok(CheckRow {
                name: c.name,
                kind: c.kind,
                max_rel_error: r.max_rel_error,
                checked: r.checked,
                skipped: r.skipped,
                tolerance,
                passed: r.checked > 0 && r.max_rel_error <= tolerance,
            })
        })
        .collect()
}

pub fn format_table(rows: &[CheckRow]) -> String {
    let mut out = format!(
        "{:<24} {:<9} {:>12} {:>9} {:>8} {:>9}  result\n",
        "check", "kind", "max rel err", "checked", "skipped", "tolerance"
    );
    for r in rows {
        out += &format!(
            "{:<24} {:<9} {:>12.3e} {:>9} {:>8} {:>9.0e}  {}\n",
            r.name,
            format!("{:?}", r.kind),
            r.max_rel_error,
            r.checked,
            r.skipped,
            r.tolerance,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    out
}

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{BnMode, BnState, Conv2dSpec, ParamStore, Tensor};

enum Store<'a> {
    Build {
        params: &'a mut ParamStore,
        rng: &'a mut ChaCha8Rng,
    },
    Run(&'a ParamStore),
}

/// Parameter access for layer code.
///
/// The same layer functions both create the network (build mode, drawing
/// fresh Xavier weights in call order) and run it (looking parameters up by
/// name), so the parameter layout has a single definition.
pub struct NetCtx<'a> {
    store: Store<'a>,
    bn: &'a mut BnState,
    mode: BnMode,
}

impl<'a> NetCtx<'a> {
    /// Creates parameters and batch-norm state on first use.
    pub fn build(params: &'a mut ParamStore, bn: &'a mut BnState, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store: Store::Build { params, rng },
            bn,
            mode: BnMode::Eval,
        }
    }

    pub fn run(params: &'a ParamStore, bn: &'a mut BnState, mode: BnMode) -> Self {
        Self {
            store: Store::Run(params),
            bn,
            mode,
        }
    }

    fn param(&mut self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        match &mut self.store {
            Store::Run(params) => params.get(&name).cloned(),
            Store::Build { params, rng } => {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Xavier { fan_in, fan_out } => {
                        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-limit..limit)).collect()
                    }
                };
                let t = Tensor::param(shape, data)?;
                params.insert(name, t.clone())?;
                Ok(t)
            }
        }
    }

    /// Convolution with `{name}.weight` (and `{name}.bias` when `bias`).
    pub fn conv(
        &mut self,
        name: &str,
        x: &Tensor,
        out_channels: usize,
        kernel: usize,
        spec: Conv2dSpec,
        bias: bool,
    ) -> Result<Tensor> {
        let (in_channels, _, _) = x.chw()?;
        let area = kernel * kernel;
        let weight = self.param(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            Init::Xavier {
                fan_in: in_channels * area,
                fan_out: out_channels * area,
            },
        )?;
        let bias = if bias {
            Some(self.param(format!("{name}.bias"), &[out_channels], Init::Zeros)?)
        } else {
            None
        };
        x.conv2d(&weight, bias.as_ref(), spec)
    }

    /// Batch norm with `{name}.scale`, `{name}.shift` and running statistics under `name`.
    pub fn bn(&mut self, name: &str, x: &Tensor) -> Result<Tensor> {
        let (c, _, _) = x.chw()?;
        let scale = self.param(format!("{name}.scale"), &[c], Init::Ones)?;
        let shift = self.param(format!("{name}.shift"), &[c], Init::Zeros)?;
        if matches!(self.store, Store::Build { .. }) {
            self.bn.insert(name, c);
        }
        x.batch_norm(&scale, &shift, self.bn.get_mut(name)?, self.mode)
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Xavier { fan_in: usize, fan_out: usize },
}

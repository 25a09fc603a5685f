//! Thin parameterized wrappers over tape ops.

use awb_tensor::{BatchNormMode, Real, RngStream, Tensor, Var};

use crate::error::Result;
use crate::params::{Ctx, Mode, ParamGroup, ParamId, ParamRole, ParamStore};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Fan-in scaled normal init, std = sqrt(2 / fan_in).
pub fn kaiming<T: Real>(rng: &mut RngStream, shape: &[usize], fan_in: usize) -> Tensor<T> {
    rng.normal_tensor(shape, (2.0 / fan_in as f64).sqrt())
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl Conv {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        group: ParamGroup,
        rng: &mut RngStream,
    ) -> Self {
        let shape = [spec.out_ch, spec.in_ch, spec.kernel, spec.kernel];
        let w = kaiming(rng, &shape, spec.in_ch * spec.kernel * spec.kernel);
        let weight = store.add(format!("{name}.weight"), w, group, ParamRole::Weight);
        let bias = spec
            .bias
            .then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[spec.out_ch]), group, ParamRole::Weight));
        Self { weight, bias, stride: spec.stride, pad: spec.pad }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        Ok(ctx.graph.conv2d(x, w, b, self.stride, self.pad)?)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, group: ParamGroup) -> Self {
        let c = [channels];
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&c), group, ParamRole::Weight),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&c), group, ParamRole::Weight),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&c), group, ParamRole::Buffer),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&c), group, ParamRole::Buffer),
        }
    }

    /// Batch statistics in training mode unless the layer is frozen, in which
    /// case the running statistics are used and left untouched.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let mode = if ctx.mode == Mode::Train && !ctx.is_frozen(self.gamma) {
            BatchNormMode::Train
        } else {
            BatchNormMode::Eval
        };
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let store = ctx.store();
        let running = (store.get(self.running_mean), store.get(self.running_var));
        let (y, stats) = ctx.graph.batch_norm(x, gamma, beta, mode, running, BN_EPS)?;
        if let Some(stats) = stats {
            ctx.bn_updates.push(crate::params::BnUpdate { mean: self.running_mean, var: self.running_var, stats });
        }
        Ok(y)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta, self.running_mean, self.running_var]
    }
}

/// `y = x · W + b` with `W` stored `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        (fan_in, fan_out): (usize, usize),
        bias: bool,
        group: ParamGroup,
        rng: &mut RngStream,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), kaiming(rng, &[fan_in, fan_out], fan_in), group, ParamRole::Weight);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[1, fan_out]), group, ParamRole::Weight));
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let y = ctx.graph.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = ctx.param(b);
                Ok(ctx.graph.add(y, b)?)
            }
            None => Ok(y),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

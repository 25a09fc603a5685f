use awb_tensor::{Real, RngStream, Tensor, Var};

use super::Attention;
use crate::error::{invalid, Result};
use crate::layers::{BatchNorm2d, Conv, ConvSpec};
use crate::params::{check_channels, Ctx, ParamGroup, ParamId, ParamStore};

/// Simplified non-local block.
///
/// `θ, φ, g` are 1×1 convolutions `C → C/2` (`g` followed by batch norm),
/// `J = θ'(F)ᵀ·φ'(F) / (H·W)` with no softmax, and the aggregated
/// `J·g'(F)` is transposed back to `C/2×H×W` and lifted to `C` channels by
/// the 1×1 convolution `h`. Output `I + F`. `h` starts at zero so the block
/// is initially the identity.
#[derive(Clone, Debug)]
pub struct NonLocal {
    channels: usize,
    theta: Conv,
    phi: Conv,
    g: Conv,
    g_bn: BatchNorm2d,
    h: Conv,
}

impl NonLocal {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, channels: usize, rng: &mut RngStream) -> Result<Self> {
        if channels % 2 != 0 || channels == 0 {
            return Err(invalid!("non-local block needs an even channel count, got {channels}"));
        }
        let half = channels / 2;
        let group = ParamGroup::Attention;
        let point = |in_ch, out_ch| ConvSpec { in_ch, out_ch, kernel: 1, stride: 1, pad: 0, bias: true };
        let theta = Conv::new(store, &format!("{prefix}.theta"), point(channels, half), group, rng);
        let phi = Conv::new(store, &format!("{prefix}.phi"), point(channels, half), group, rng);
        // The batch norm right after `g` cancels any constant offset, so `g`
        // carries no bias.
        let g = Conv::new(store, &format!("{prefix}.g"), ConvSpec { bias: false, ..point(channels, half) }, group, rng);
        let g_bn = BatchNorm2d::new(store, &format!("{prefix}.g_bn"), half, group);
        let h = Conv::new(store, &format!("{prefix}.h"), point(half, channels), group, rng);
        for id in h.param_ids() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape));
        }
        Ok(Self { channels, theta, phi, g, g_bn, h })
    }

    pub fn h_params(&self) -> Vec<ParamId> {
        self.h.param_ids()
    }
}

impl<T: Real> Attention<T> for NonLocal {
    fn name(&self) -> &'static str {
        "nonlocal"
    }

    fn forward(&self, ctx: &mut Ctx<T>, f: Var) -> Result<Var> {
        let shape = ctx.graph.shape(f).to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(invalid!("non-local block expects N×C×H×W, got {:?}", shape));
        };
        check_channels(c, self.channels, "non-local block")?;
        let (half, hw) = (c / 2, h * w);

        let theta = self.theta.forward(ctx, f)?;
        let theta = ctx.graph.reshape(theta, &[n, half, hw])?;
        let phi = self.phi.forward(ctx, f)?;
        let phi = ctx.graph.reshape(phi, &[n, half, hw])?;
        let j = ctx.graph.bmm(theta, phi, true, false)?;
        let j = ctx.graph.scale(j, T::of(1.0 / hw as f64))?;

        let g = self.g.forward(ctx, f)?;
        let g = self.g_bn.forward(ctx, g)?;
        let g = ctx.graph.reshape(g, &[n, half, hw])?;
        // J · g'(F) with g'(F) = g(F)ᵀ ∈ R^{HW×C/2}.
        let y = ctx.graph.bmm(j, g, false, true)?;
        let y = ctx.graph.permute(y, &[0, 2, 1])?;
        let y = ctx.graph.reshape(y, &[n, half, h, w])?;
        let i = self.h.forward(ctx, y)?;
        Ok(ctx.graph.add(i, f)?)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.theta.param_ids();
        ids.extend(self.phi.param_ids());
        ids.extend(self.g.param_ids());
        ids.extend(self.g_bn.param_ids());
        ids.extend(self.h.param_ids());
        ids
    }

    fn clone_box(&self) -> Box<dyn Attention<T>> {
        Box::new(self.clone())
    }
}

use awb_tensor::{Real, RngStream, Var};

use super::{Attention, AttentionOptions};
use crate::error::{invalid, Result};
use crate::layers::{kaiming, Conv};
use crate::params::{check_channels, Ctx, ParamGroup, ParamId, ParamRole, ParamStore};

pub const DEFAULT_REDUCTION: usize = 16;
pub const DEFAULT_KERNEL: usize = 7;

/// Channel attention followed by spatial attention, with the input added
/// back: `K₁ = M_c(F)⊗F`, `K₂ = M_s(K₁)⊗K₁`, output `K₂ + F`.
///
/// The channel MLP (`C → C/r → C`, ReLU between) is shared by the average-
/// and max-pooled descriptors. Neither the MLP nor the spatial convolution
/// carries a bias.
#[derive(Clone, Debug)]
pub struct Icbam {
    channels: usize,
    mlp_in: ParamId,
    mlp_out: ParamId,
    spatial: Conv,
}

impl Icbam {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        opts: &AttentionOptions,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if opts.reduction == 0 || channels % opts.reduction != 0 {
            return Err(invalid!("reduction ratio {} must divide C = {}", opts.reduction, channels));
        }
        if opts.kernel % 2 == 0 {
            return Err(invalid!("spatial attention kernel must be odd, got {}", opts.kernel));
        }
        let hidden = channels / opts.reduction;
        let group = ParamGroup::Attention;
        let mlp_in = store.add(format!("{prefix}.mlp_in"), kaiming(rng, &[channels, hidden], channels), group, ParamRole::Weight);
        let mlp_out = store.add(format!("{prefix}.mlp_out"), kaiming(rng, &[hidden, channels], hidden), group, ParamRole::Weight);
        let spatial = Conv::new(
            store,
            &format!("{prefix}.spatial"),
            crate::layers::ConvSpec { in_ch: 2, out_ch: 1, kernel: opts.kernel, stride: 1, pad: opts.kernel / 2, bias: false },
            group,
            rng,
        );
        Ok(Self { channels, mlp_in, mlp_out, spatial })
    }

    fn mlp<T: Real>(&self, ctx: &mut Ctx<T>, v: Var) -> Result<Var> {
        let w1 = ctx.param(self.mlp_in);
        let w2 = ctx.param(self.mlp_out);
        let h = ctx.graph.matmul(v, w1)?;
        let h = ctx.graph.relu(h)?;
        Ok(ctx.graph.matmul(h, w2)?)
    }

    /// `M_c(F)`: `[N,C,1,1]` channel weights in (0,1).
    pub fn channel_map<T: Real>(&self, ctx: &mut Ctx<T>, f: Var) -> Result<Var> {
        let n = ctx.graph.shape(f)[0];
        let avg = ctx.graph.global_avg_pool(f)?;
        let avg = ctx.graph.reshape(avg, &[n, self.channels])?;
        let max = ctx.graph.global_max_pool(f)?;
        let max = ctx.graph.reshape(max, &[n, self.channels])?;
        let a = self.mlp(ctx, avg)?;
        let m = self.mlp(ctx, max)?;
        let s = ctx.graph.add(a, m)?;
        let s = ctx.graph.sigmoid(s)?;
        Ok(ctx.graph.reshape(s, &[n, self.channels, 1, 1])?)
    }

    /// `M_s(K)`: `[N,1,H,W]` spatial weights in (0,1).
    pub fn spatial_map<T: Real>(&self, ctx: &mut Ctx<T>, k: Var) -> Result<Var> {
        let mean = ctx.graph.channelwise_mean(k)?;
        let max = ctx.graph.channelwise_max(k)?;
        let both = ctx.graph.concat(&[mean, max], 1)?;
        let s = self.spatial.forward(ctx, both)?;
        Ok(ctx.graph.sigmoid(s)?)
    }
}

impl<T: Real> Attention<T> for Icbam {
    fn name(&self) -> &'static str {
        "icbam"
    }

    fn forward(&self, ctx: &mut Ctx<T>, f: Var) -> Result<Var> {
        check_channels(ctx.graph.shape(f).get(1).copied().unwrap_or(0), self.channels, "I-CBAM")?;
        let mc = self.channel_map(ctx, f)?;
        let k1 = ctx.graph.mul(mc, f)?;
        let ms = self.spatial_map(ctx, k1)?;
        let k2 = ctx.graph.mul(ms, k1)?;
        Ok(ctx.graph.add(k2, f)?)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.mlp_in, self.mlp_out];
        ids.extend(self.spatial.param_ids());
        ids
    }

    fn clone_box(&self) -> Box<dyn Attention<T>> {
        Box::new(self.clone())
    }
}

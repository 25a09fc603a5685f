//! Attention blocks that can be paired with a WaveBlock.
//!
//! Every block maps an `N×C×H×W` map to the same shape with a residual
//! connection, so the unit can be dropped between backbone stages.

mod icbam;
mod nonlocal;

use std::fmt::Debug;

use awb_tensor::{Real, Var};

pub use icbam::{Icbam, DEFAULT_KERNEL, DEFAULT_REDUCTION};
pub use nonlocal::NonLocal;

use crate::error::Result;
use crate::params::{Ctx, ParamId};

pub trait Attention<T: Real>: Debug + Send + Sync {
    /// Registry name.
    fn name(&self) -> &'static str;

    fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var>;

    fn param_ids(&self) -> Vec<ParamId>;

    fn clone_box(&self) -> Box<dyn Attention<T>>;
}

impl<T: Real> Clone for Box<dyn Attention<T>> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// The pass-through block used when a unit carries no attention.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoAttention;

impl<T: Real> Attention<T> for NoAttention {
    fn name(&self) -> &'static str {
        "none"
    }

    fn forward(&self, _ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        Ok(x)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        Vec::new()
    }

    fn clone_box(&self) -> Box<dyn Attention<T>> {
        Box::new(*self)
    }
}

/// Construction options shared by the attention factories.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionOptions {
    pub reduction: usize,
    pub kernel: usize,
}

impl Default for AttentionOptions {
    fn default() -> Self {
        Self { reduction: DEFAULT_REDUCTION, kernel: DEFAULT_KERNEL }
    }
}

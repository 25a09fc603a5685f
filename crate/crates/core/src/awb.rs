//! Attentive WaveBlock units: attention and a band perturbation composed
//! either as Pre-A (`WaveBlock(Attn(F))`) or Post-A (`Attn(WaveBlock(F))`).

use std::fmt;
use std::str::FromStr;

use awb_tensor::{Real, RngStream, Tensor, Var};

use crate::attention::{Attention, AttentionOptions};
use crate::error::{invalid, AwbError, Result};
use crate::params::{Ctx, Mode, ParamStore};
use crate::registry::{AttentionRegistry, Perturbation, PerturbationRegistry};
use crate::waveblock::{draw_wave, WaveConfig, WaveDraw};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Pre,
    Post,
}

impl Strategy {
    /// I-CBAM pairs with Pre-A, Non-local with Post-A.
    pub fn default_for(attention: &str) -> Strategy {
        match attention {
            "nonlocal" => Strategy::Post,
            _ => Strategy::Pre,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Pre => "pre",
            Strategy::Post => "post",
        })
    }
}

impl FromStr for Strategy {
    type Err = AwbError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" => Ok(Strategy::Pre),
            "post" => Ok(Strategy::Post),
            other => Err(invalid!("unknown strategy {other:?} (expected pre or post)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AwbConfig {
    /// Attention registry name: `none`, `icbam`, `nonlocal`.
    pub attention: String,
    /// Ignored when `attention` is `none`.
    pub strategy: Strategy,
    pub wave: WaveConfig,
    /// Perturbation registry name: `wave` or `dropblock`.
    pub perturbation: String,
    pub attention_options: AttentionOptions,
}

impl Default for AwbConfig {
    fn default() -> Self {
        Self {
            attention: "nonlocal".into(),
            strategy: Strategy::Post,
            wave: WaveConfig::default(),
            perturbation: "wave".into(),
            attention_options: AttentionOptions::default(),
        }
    }
}

/// One AWB insertion point with its own attention weights and wave stream.
#[derive(Clone, Debug)]
pub struct AwbUnit<T: Real> {
    pub attention: Box<dyn Attention<T>>,
    pub perturbation: Box<dyn Perturbation<T>>,
    pub strategy: Strategy,
    pub rng: RngStream,
    /// Whether the band perturbation runs in training mode.
    pub wave_enabled: bool,
    pub last_draw: Option<WaveDraw>,
}

impl<T: Real> AwbUnit<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        cfg: &AwbConfig,
        attention: &AttentionRegistry<T>,
        perturbations: &PerturbationRegistry<T>,
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        height: usize,
        init_rng: &mut RngStream,
        wave_rng: RngStream,
    ) -> Result<Self> {
        cfg.wave.check_height(height)?;
        Ok(Self {
            attention: attention.build(&cfg.attention, store, prefix, channels, &cfg.attention_options, init_rng)?,
            perturbation: perturbations.build(&cfg.perturbation, cfg.wave)?,
            strategy: cfg.strategy,
            rng: wave_rng,
            wave_enabled: true,
            last_draw: None,
        })
    }

    fn perturb(&mut self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let cfg = *self.perturbation.config();
        if ctx.mode == Mode::Eval || cfg.mode == Mode::Eval || !self.wave_enabled {
            self.last_draw = None;
            return Ok(x);
        }
        let height = ctx.graph.shape(x).get(2).copied().ok_or_else(|| invalid!("AWB input must be N×C×H×W"))?;
        let draw = draw_wave(&mut self.rng, height, cfg.rw)?;
        self.last_draw = Some(draw);
        self.perturbation.apply(ctx, x, &draw)
    }

    pub fn forward(&mut self, ctx: &mut Ctx<T>, f: Var) -> Result<Var> {
        match self.strategy {
            Strategy::Pre => {
                let a = self.attention.forward(ctx, f)?;
                self.perturb(ctx, a)
            }
            Strategy::Post => {
                let waved = self.perturb(ctx, f)?;
                self.attention.forward(ctx, waved)
            }
        }
    }
}

/// Difference of two maps before and after a shared residual attention
/// mask: `(‖X−Y‖_F, ‖(1+α)⊗(X−Y)‖_F)`. The second never falls below the
/// first since `1+α ≥ 1`.
pub fn enlargement_check(x: &Tensor<f64>, y: &Tensor<f64>, alpha: &Tensor<f64>) -> Result<(f64, f64)> {
    if x.shape() != y.shape() || x.shape() != alpha.shape() {
        return Err(invalid!(
            "enlargement check needs equal shapes, got {:?}, {:?}, {:?}",
            x.shape(),
            y.shape(),
            alpha.shape()
        ));
    }
    if alpha.data().iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(invalid!("attention mask values must lie in [0,1]"));
    }
    let mut before = 0.0;
    let mut after = 0.0;
    for ((&a, &b), &m) in x.data().iter().zip(y.data()).zip(alpha.data()) {
        let d = a - b;
        before += d * d;
        let e = (1.0 + m) * d;
        after += e * e;
    }
    Ok((before.sqrt(), after.sqrt()))
}

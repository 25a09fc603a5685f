//! WaveBlock: keep one random horizontal band of a feature map and scale
//! every other row by the waving height rate.
//!
//! The band offset `X` is drawn uniformly from `{0, …, [H·(1−r_w)]}` and the
//! band covers rows `X ≤ j < X + [H·r_w]`, where `[·]` rounds half away
//! from zero. One draw is shared by the whole batch.

use awb_tensor::{Real, RngStream, Tensor, Var};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive};

use crate::error::{invalid, Result};
use crate::params::{Ctx, Mode};

pub const DEFAULT_RW: f64 = 0.3;
pub const DEFAULT_RH: f64 = 1.5;

/// Waving width rate `r_w ∈ (0,1)` and waving height rate `r_h > 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WaveConfig {
    pub rw: f64,
    pub rh: f64,
    pub mode: Mode,
}

impl Default for WaveConfig {
    fn default() -> Self {
        Self { rw: DEFAULT_RW, rh: DEFAULT_RH, mode: Mode::Train }
    }
}

impl WaveConfig {
    pub fn new(rw: f64, rh: f64) -> Result<Self> {
        let cfg = Self { rw, rh, mode: Mode::Train };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rw > 0.0 && self.rw < 1.0) {
            return Err(invalid!("waving width rate must lie in (0,1), got {}", self.rw));
        }
        if !(self.rh > 0.0 && self.rh.is_finite()) {
            return Err(invalid!("waving height rate must be positive, got {}", self.rh));
        }
        Ok(())
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    /// `[H·(1−r_w)]`, the largest admissible offset.
    pub fn max_offset(&self, height: usize) -> usize {
        round_half_away(height as f64 * (1.0 - self.rw))
    }

    /// `[H·r_w]`, the band length.
    pub fn band_len(&self, height: usize) -> usize {
        round_half_away(height as f64 * self.rw)
    }

    /// Whether a map of this height has a non-trivial offset support.
    pub fn check_height(&self, height: usize) -> Result<()> {
        if self.max_offset(height) < 1 {
            return Err(invalid!(
                "height {height} with r_w = {} leaves [H·(1−r_w)] = 0; the wave offset support is degenerate",
                self.rw
            ));
        }
        Ok(())
    }
}

/// Rounding on non-negative reals, ties away from zero.
pub fn round_half_away(x: f64) -> usize {
    debug_assert!(x >= 0.0);
    x.round() as usize
}

/// One band offset drawn for a map of height `height`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WaveDraw {
    pub offset: usize,
    pub height: usize,
}

pub fn draw_wave(rng: &mut RngStream, height: usize, rw: f64) -> Result<WaveDraw> {
    let cfg = WaveConfig { rw, rh: 1.0, mode: Mode::Train };
    cfg.validate()?;
    cfg.check_height(height)?;
    Ok(WaveDraw { offset: rng.uniform_int(0, cfg.max_offset(height)), height })
}

/// What happens inside and outside the band.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BandStyle {
    /// Band kept, rows outside scaled by `r_h`.
    Wave,
    /// Band zeroed, rows outside kept: the feature-dropping baseline used in
    /// the DropBlock ablation.
    Drop,
}

/// Per-row multipliers for a draw.
pub fn row_factors(cfg: &WaveConfig, draw: &WaveDraw, style: BandStyle) -> Vec<f64> {
    let band = draw.offset..draw.offset + cfg.band_len(draw.height);
    (0..draw.height)
        .map(|j| match (style, band.contains(&j)) {
            (BandStyle::Wave, true) => 1.0,
            (BandStyle::Wave, false) => cfg.rh,
            (BandStyle::Drop, true) => 0.0,
            (BandStyle::Drop, false) => 1.0,
        })
        .collect()
}

fn check_draw(height: usize, draw: &WaveDraw) -> Result<()> {
    if draw.height != height {
        return Err(invalid!("wave drawn for height {} applied to height {}", draw.height, height));
    }
    Ok(())
}

/// Plain-tensor WaveBlock. Identity in eval mode.
pub fn waveblock_apply<T: Real>(f: &Tensor<T>, cfg: &WaveConfig, draw: &WaveDraw) -> Result<Tensor<T>> {
    let (_, _, h, w) = f.dims4()?;
    check_draw(h, draw)?;
    if cfg.mode == Mode::Eval {
        return Ok(f.clone());
    }
    let factors: Vec<T> = row_factors(cfg, draw, BandStyle::Wave).into_iter().map(T::of).collect();
    let mut out = f.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = *v * factors[(i / w) % h];
    }
    Ok(out)
}

/// Tape version of the band modulation; the gradient is the row factor.
pub fn apply_band<T: Real>(
    ctx: &mut Ctx<T>,
    x: Var,
    cfg: &WaveConfig,
    draw: &WaveDraw,
    style: BandStyle,
) -> Result<Var> {
    let shape = ctx.graph.shape(x).to_vec();
    let [_, _, h, _] = shape[..] else {
        return Err(invalid!("WaveBlock expects an N×C×H×W map, got {:?}", shape));
    };
    check_draw(h, draw)?;
    let factors: Vec<T> = row_factors(cfg, draw, style).into_iter().map(T::of).collect();
    let mask = ctx.graph.constant(Tensor::new(&[1, 1, h, 1], factors)?);
    Ok(ctx.graph.mul(x, mask)?)
}

/// Probability that two or more independent draws all coincide.
#[derive(Clone, Debug, PartialEq)]
pub struct CollisionProbability {
    /// `[H·(1−r_w)]`, the outcome count used by the closed form.
    pub outcomes: u64,
    /// `(1/[H·(1−r_w)])^n`.
    pub closed_form: BigRational,
    /// `(1/([H·(1−r_w)]+1))^n`, the count of integers in the offset support.
    pub support_based: BigRational,
}

impl CollisionProbability {
    pub fn closed_form_f64(&self) -> f64 {
        self.closed_form.to_f64().unwrap_or(f64::NAN)
    }

    pub fn support_based_f64(&self) -> f64 {
        self.support_based.to_f64().unwrap_or(f64::NAN)
    }
}

fn reciprocal_power(base: u64, exponent: u32) -> BigRational {
    BigRational::new(BigInt::one(), BigInt::from(base).pow(exponent))
}

/// Exact `P(X₁ = … = X_{n+1})`-style collision probabilities for `n_draws`
/// independent draws compared against a fixed one.
pub fn collision_probability(height: usize, rw: f64, n_draws: u32) -> Result<CollisionProbability> {
    if n_draws == 0 {
        return Err(invalid!("collision probability needs at least one draw"));
    }
    let cfg = WaveConfig { rw, rh: 1.0, mode: Mode::Train };
    cfg.validate()?;
    let outcomes = cfg.max_offset(height) as u64;
    if outcomes == 0 {
        return Err(invalid!("[H·(1−r_w)] = 0 for H = {height}, r_w = {rw}"));
    }
    Ok(CollisionProbability {
        outcomes,
        closed_form: reciprocal_power(outcomes, n_draws),
        support_based: reciprocal_power(outcomes + 1, n_draws),
    })
}

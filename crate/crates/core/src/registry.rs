//! Name-keyed registries for the interchangeable parts of an AWB unit:
//! attention blocks and band perturbations.

use std::collections::BTreeMap;
use std::fmt::Debug;

use awb_tensor::{Real, RngStream, Var};

use crate::attention::{Attention, AttentionOptions, Icbam, NoAttention, NonLocal};
use crate::error::{invalid, Result};
use crate::params::{Ctx, ParamStore};
use crate::waveblock::{apply_band, BandStyle, WaveConfig, WaveDraw};

pub type AttentionFactory<T> =
    fn(&mut ParamStore<T>, &str, usize, &AttentionOptions, &mut RngStream) -> Result<Box<dyn Attention<T>>>;

pub struct AttentionRegistry<T> {
    factories: BTreeMap<&'static str, AttentionFactory<T>>,
}

impl<T: Real> Default for AttentionRegistry<T> {
    fn default() -> Self {
        let mut r = Self { factories: BTreeMap::new() };
        r.register("none", |_, _, _, _, _| Ok(Box::new(NoAttention)));
        r.register("icbam", |store, prefix, c, opts, rng| Ok(Box::new(Icbam::new(store, prefix, c, opts, rng)?)));
        r.register("nonlocal", |store, prefix, c, _, rng| Ok(Box::new(NonLocal::new(store, prefix, c, rng)?)));
        r
    }
}

impl<T: Real> AttentionRegistry<T> {
    pub fn register(&mut self, name: &'static str, factory: AttentionFactory<T>) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn build(
        &self,
        name: &str,
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        opts: &AttentionOptions,
        rng: &mut RngStream,
    ) -> Result<Box<dyn Attention<T>>> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| invalid!("unknown attention kind {name:?}; known: {:?}", self.names()))?;
        factory(store, prefix, channels, opts, rng)
    }
}

/// A parameter-free band modulation driven by a [`WaveDraw`].
pub trait Perturbation<T: Real>: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn config(&self) -> &WaveConfig;

    fn apply(&self, ctx: &mut Ctx<T>, x: Var, draw: &WaveDraw) -> Result<Var>;

    fn clone_box(&self) -> Box<dyn Perturbation<T>>;
}

impl<T: Real> Clone for Box<dyn Perturbation<T>> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct WaveBlock(pub WaveConfig);

impl<T: Real> Perturbation<T> for WaveBlock {
    fn name(&self) -> &'static str {
        "wave"
    }

    fn config(&self) -> &WaveConfig {
        &self.0
    }

    fn apply(&self, ctx: &mut Ctx<T>, x: Var, draw: &WaveDraw) -> Result<Var> {
        apply_band(ctx, x, &self.0, draw, BandStyle::Wave)
    }

    fn clone_box(&self) -> Box<dyn Perturbation<T>> {
        Box::new(*self)
    }
}

/// Feature-dropping band for the DropBlock ablation: the drawn band is
/// zeroed and every other row passes unchanged.
#[derive(Clone, Copy, Debug)]
pub struct DropBand(pub WaveConfig);

impl<T: Real> Perturbation<T> for DropBand {
    fn name(&self) -> &'static str {
        "dropblock"
    }

    fn config(&self) -> &WaveConfig {
        &self.0
    }

    fn apply(&self, ctx: &mut Ctx<T>, x: Var, draw: &WaveDraw) -> Result<Var> {
        apply_band(ctx, x, &self.0, draw, BandStyle::Drop)
    }

    fn clone_box(&self) -> Box<dyn Perturbation<T>> {
        Box::new(*self)
    }
}

pub type PerturbationFactory<T> = fn(WaveConfig) -> Box<dyn Perturbation<T>>;

pub struct PerturbationRegistry<T> {
    factories: BTreeMap<&'static str, PerturbationFactory<T>>,
}

impl<T: Real> Default for PerturbationRegistry<T> {
    fn default() -> Self {
        let mut r = Self { factories: BTreeMap::new() };
        r.register("wave", |cfg| Box::new(WaveBlock(cfg)));
        r.register("dropblock", |cfg| Box::new(DropBand(cfg)));
        r
    }
}

impl<T: Real> PerturbationRegistry<T> {
    pub fn register(&mut self, name: &'static str, factory: PerturbationFactory<T>) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn build(&self, name: &str, cfg: WaveConfig) -> Result<Box<dyn Perturbation<T>>> {
        cfg.validate()?;
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| invalid!("unknown perturbation {name:?}; known: {:?}", self.names()))?;
        Ok(factory(cfg))
    }
}

/// Both registries, as consumed by model construction.
pub struct Registries<T: Real> {
    pub attention: AttentionRegistry<T>,
    pub perturbation: PerturbationRegistry<T>,
}

impl<T: Real> Default for Registries<T> {
    fn default() -> Self {
        Self { attention: AttentionRegistry::default(), perturbation: PerturbationRegistry::default() }
    }
}

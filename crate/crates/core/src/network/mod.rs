//! The staged CNN backbone with AWB slots, and the dual student/teacher
//! assembly built from it.

mod checkpoint;
mod dual;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use dual::{ema_update, DualNetworks, NetRole, DEFAULT_EMA_MOMENTUM};

use awb_tensor::{Graph, Real, RngStream, Tensor, Var};

use crate::awb::{AwbConfig, AwbUnit};
use crate::error::{invalid, Result};
use crate::layers::{BatchNorm2d, Conv, ConvSpec, Linear};
use crate::params::{Binding, Ctx, Mode, ParamGroup, ParamStore, Trainable};
use crate::registry::Registries;

/// Stages after which a stride-2 max pool halves the map.
const POOLED_STAGES: usize = 3;
/// AWB units follow stages 2 and 3 (0-based 1 and 2).
const AWB_AFTER: [usize; 2] = [1, 2];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Output channels of the four stages.
    pub channels: Vec<usize>,
    pub input_height: usize,
    pub input_width: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub awb: AwbConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 64, 128, 256],
            input_height: 64,
            input_width: 32,
            embed_dim: 128,
            num_classes: 2,
            awb: AwbConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 4 || self.channels.contains(&0) {
            return Err(invalid!("backbone needs four non-zero stage widths, got {:?}", self.channels));
        }
        let div = 1 << POOLED_STAGES;
        if self.input_height % div != 0 || self.input_width % div != 0 {
            return Err(invalid!(
                "input {}×{} must be divisible by {div} for the pooled stages",
                self.input_height,
                self.input_width
            ));
        }
        if self.embed_dim == 0 || self.num_classes == 0 {
            return Err(invalid!("embedding dimension and class count must be positive"));
        }
        self.awb.wave.validate()?;
        for h in self.slot_heights() {
            self.awb.wave.check_height(h)?;
        }
        Ok(())
    }

    /// Feature-map heights seen by the AWB slots.
    pub fn slot_heights(&self) -> Vec<usize> {
        AWB_AFTER.iter().map(|&s| self.input_height >> (s + 1)).collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct Stage {
    conv: Conv,
    bn: BatchNorm2d,
    pool: bool,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub logits: Var,
    /// Pre-normalization embedding.
    pub embedding: Var,
    /// Stage-3 activation before its AWB unit.
    pub stage3: Var,
    /// Stage-3 activation after its AWB unit.
    pub stage3_awb: Var,
}

/// Which activation diagnostics read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Tap {
    #[default]
    Stage3,
    Stage3Awb,
}

impl Tap {
    pub fn select(self, out: &Outputs) -> Var {
        match self {
            Tap::Stage3 => out.stage3,
            Tap::Stage3Awb => out.stage3_awb,
        }
    }
}

impl std::str::FromStr for Tap {
    type Err = crate::error::AwbError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stage3" => Ok(Tap::Stage3),
            "stage3_awb" => Ok(Tap::Stage3Awb),
            other => Err(invalid!("unknown tap {other:?} (expected stage3 or stage3_awb)")),
        }
    }
}

impl std::fmt::Display for Tap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Tap::Stage3 => "stage3",
            Tap::Stage3Awb => "stage3_awb",
        })
    }
}

/// Layer structure and per-slot state; parameters live in the owning
/// [`Backbone`]'s store.
#[derive(Clone, Debug)]
pub struct Arch<T: Real> {
    stages: Vec<Stage>,
    pub slots: Vec<AwbUnit<T>>,
    embed: Linear,
    classifier: Linear,
    /// When false the slots are skipped entirely (used for source
    /// pre-training and for the plain dual baseline).
    pub awb_active: bool,
}

impl<T: Real> Arch<T> {
    pub fn forward(&mut self, ctx: &mut Ctx<T>, x: Var) -> Result<Outputs> {
        let mut h = x;
        let mut stage3 = None;
        let mut stage3_awb = None;
        for (i, stage) in self.stages.iter().enumerate() {
            h = stage.conv.forward(ctx, h)?;
            h = stage.bn.forward(ctx, h)?;
            h = ctx.graph.relu(h)?;
            if stage.pool {
                h = ctx.graph.max_pool2d(h, 2, 2)?;
            }
            if let Some(slot) = AWB_AFTER.iter().position(|&s| s == i) {
                if i == AWB_AFTER[1] {
                    stage3 = Some(h);
                }
                if self.awb_active {
                    h = self.slots[slot].forward(ctx, h)?;
                }
                if i == AWB_AFTER[1] {
                    stage3_awb = Some(h);
                }
            }
        }
        let n = ctx.graph.shape(h)[0];
        let c = ctx.graph.shape(h)[1];
        let pooled = ctx.graph.global_avg_pool(h)?;
        let pooled = ctx.graph.reshape(pooled, &[n, c])?;
        let embedding = self.embed.forward(ctx, pooled)?;
        let logits = self.classifier.forward(ctx, embedding)?;
        Ok(Outputs {
            logits,
            embedding,
            stage3: stage3.expect("stage 3 exists"),
            stage3_awb: stage3_awb.expect("stage 3 exists"),
        })
    }

    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }

    pub fn set_waves(&mut self, enabled: bool) {
        for s in &mut self.slots {
            s.wave_enabled = enabled;
        }
    }
}

/// One network: configuration, parameters and layer structure.
#[derive(Clone, Debug)]
pub struct Backbone<T: Real> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub arch: Arch<T>,
}

impl<T: Real> Backbone<T> {
    /// Parameters come from `init`; each AWB slot gets its own wave stream
    /// derived from `waves`.
    pub fn new(config: &ModelConfig, registries: &Registries<T>, init: &mut RngStream, waves: &RngStream) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = 3;
        for (i, &out_ch) in config.channels.iter().enumerate() {
            let name = format!("stage{}", i + 1);
            let conv = Conv::new(
                &mut store,
                &format!("{name}.conv"),
                ConvSpec { in_ch, out_ch, kernel: 3, stride: 1, pad: 1, bias: false },
                ParamGroup::Backbone,
                init,
            );
            let bn = BatchNorm2d::new(&mut store, &format!("{name}.bn"), out_ch, ParamGroup::Backbone);
            stages.push(Stage { conv, bn, pool: i < POOLED_STAGES });
            in_ch = out_ch;
        }
        let heights = config.slot_heights();
        let mut slots = Vec::with_capacity(AWB_AFTER.len());
        for (k, &stage) in AWB_AFTER.iter().enumerate() {
            slots.push(AwbUnit::build(
                &config.awb,
                &registries.attention,
                &registries.perturbation,
                &mut store,
                &format!("awb{}", stage + 1),
                config.channels[stage],
                heights[k],
                init,
                waves.derive(k as u64),
            )?);
        }
        let embed = Linear::new(&mut store, "embed", (in_ch, config.embed_dim), true, ParamGroup::Backbone, init);
        let classifier =
            Linear::new(&mut store, "classifier", (config.embed_dim, config.num_classes), false, ParamGroup::Head, init);
        Ok(Self { config: config.clone(), store, arch: Arch { stages, slots, embed, classifier, awb_active: true } })
    }

    /// One forward pass recorded on `graph`.
    pub fn forward(&mut self, graph: &mut Graph<T>, x: Var, mode: Mode, trainable: Trainable) -> Result<(Outputs, Binding<T>)> {
        let shape = graph.shape(x);
        if shape.len() != 4 || shape[1] != 3 || shape[2] != self.config.input_height || shape[3] != self.config.input_width {
            return Err(invalid!(
                "expected N×3×{}×{} input, got {:?}",
                self.config.input_height,
                self.config.input_width,
                shape
            ));
        }
        let Backbone { store, arch, .. } = self;
        let mut ctx = Ctx::new(graph, store, mode, trainable);
        let out = arch.forward(&mut ctx, x)?;
        Ok((out, ctx.finish()))
    }

    /// Eval-mode logits and embeddings, processed in chunks of `batch`.
    pub fn infer(&mut self, images: &Tensor<T>, batch: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let n = images.shape()[0];
        let mut logits = Vec::new();
        let mut embeds = Vec::new();
        let mut start = 0;
        while start < n {
            let count = batch.max(1).min(n - start);
            let mut g = Graph::new();
            let x = g.constant(images.slice_batch(start, count)?);
            let (out, _) = self.forward(&mut g, x, Mode::Eval, Trainable::NONE)?;
            logits.extend_from_slice(g.value(out.logits).data());
            embeds.extend_from_slice(g.value(out.embedding).data());
            start += count;
        }
        let k = self.num_classes();
        Ok((Tensor::new(&[n, k], logits)?, Tensor::new(&[n, self.config.embed_dim], embeds)?))
    }

    pub fn num_classes(&self) -> usize {
        self.store.get(self.arch.classifier.weight).shape()[1]
    }

    /// Replace the classifier with `weight` of shape `[D, k]`.
    pub fn reset_classifier(&mut self, weight: Tensor<T>) -> Result<()> {
        let (d, k) = weight.dims2()?;
        if d != self.config.embed_dim || k == 0 {
            return Err(invalid!("classifier weight must be {}×k, got {:?}", self.config.embed_dim, weight.shape()));
        }
        self.store.set(self.arch.classifier.weight, weight);
        self.config.num_classes = k;
        Ok(())
    }

    pub fn set_awb_active(&mut self, active: bool) {
        self.arch.awb_active = active;
    }

    pub fn set_waves(&mut self, enabled: bool) {
        self.arch.set_waves(enabled);
    }

    /// Learnable scalar count, optionally for one group.
    pub fn weight_count(&self, group: Option<ParamGroup>) -> usize {
        self.store.weight_count(group)
    }

    /// Copy every parameter of `other` whose name and shape match; returns
    /// how many were copied. Used to seed an adaptation model from a
    /// pre-trained one that lacks attention weights.
    pub fn load_matching(&mut self, other: &ParamStore<T>) -> usize {
        let mut copied = 0;
        for e in other.entries() {
            if let Some(id) = self.store.find(&e.name) {
                if self.store.get(id).shape() == e.value.shape() {
                    self.store.set(id, e.value.clone());
                    copied += 1;
                }
            }
        }
        copied
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(attention: &str) -> ModelConfig {
        let mut cfg = ModelConfig { channels: vec![4, 8, 8, 16], input_height: 32, input_width: 16, embed_dim: 8, num_classes: 3, ..Default::default() };
        cfg.awb.attention = attention.into();
        cfg.awb.attention_options.reduction = 4;
        cfg
    }

    #[test]
    fn shapes_and_slot_heights() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.slot_heights(), vec![16, 8]);
        let cfg = small("icbam");
        let mut net = Backbone::<f32>::new(&cfg, &Registries::default(), &mut RngStream::new(0, 0), &RngStream::new(0, 1)).unwrap();
        let x = RngStream::new(3, 0).normal_tensor::<f32>(&[2, 3, 32, 16], 1.0);
        let (logits, emb) = net.infer(&x, 8).unwrap();
        assert_eq!(logits.shape(), &[2, 3]);
        assert_eq!(emb.shape(), &[2, 8]);
        let bad = Tensor::<f32>::zeros(&[2, 3, 16, 16]);
        assert!(net.infer(&bad, 8).is_err());
    }

    #[test]
    fn degenerate_slot_height_rejected() {
        let mut cfg = small("none");
        cfg.input_height = 8;
        cfg.input_width = 8;
        cfg.awb.wave.rw = 0.9;
        assert!(cfg.validate().is_err());
    }
}

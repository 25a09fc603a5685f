//! Source pre-training and the two-phase target adaptation loop.

use std::fmt;
use std::time::Instant;

use awb_tensor::{Graph, RngStream, Tensor, Var};
use log::{debug, info};

use super::kmeans::{kmeans, l2_normalize_rows, PseudoLabels};
use super::losses::{mutual_losses, supervised_loss, LossParts, LossWeights, StudentOut, TeacherOut};
use super::sampler::{BatchConfig, PkSampler};
use crate::error::{invalid, AwbError, Result};
use crate::layers::BN_MOMENTUM;
use crate::network::{Backbone, DualNetworks};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Mode, ParamGroup, Trainable};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    /// Attention-only training with waves off.
    Warmup,
    /// Everything trained, waves on.
    Full,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Warmup => "warmup",
            Phase::Full => "full",
        })
    }
}

/// One row of the per-epoch metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean per-iteration losses, averaged over both students.
    pub losses: LossParts,
    /// Class count trained against: source identities or clusters.
    pub k: usize,
    pub inertia: Option<f64>,
    pub map: Option<f64>,
    pub cmc: Option<[f64; 3]>,
    pub pair_diff: Option<f64>,
    pub wall_seconds: f64,
}

impl EpochRecord {
    fn new(epoch: usize, phase: Phase, k: usize) -> Self {
        Self { epoch, phase, losses: LossParts::default(), k, inertia: None, map: None, cmc: None, pair_diff: None, wall_seconds: 0.0 }
    }
}

/// Called after every epoch, e.g. to evaluate and log.
pub type EpochHook<'a> = &'a mut dyn FnMut(&mut DualNetworks<f32>, &mut EpochRecord) -> Result<()>;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: BatchConfig,
    pub optim: AdamConfig,
    pub ce_weight: f64,
    pub tri_weight: f64,
    /// Iterations per epoch; 0 means one pass worth of images.
    pub iters_per_epoch: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch: BatchConfig::default(), optim: AdamConfig::default(), ce_weight: 1.0, tri_weight: 1.0, iters_per_epoch: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptConfig {
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub k: usize,
    pub kmeans_iters: usize,
    pub kmeans_tol: f64,
    pub batch: BatchConfig,
    pub optim: AdamConfig,
    pub loss: LossWeights,
    pub ema_momentum: f64,
    pub iters_per_epoch: usize,
    /// Run the AWB slots; off gives the plain dual baseline.
    pub awb: bool,
    pub infer_batch: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 2,
            epochs: 10,
            k: 50,
            kmeans_iters: 100,
            kmeans_tol: 1e-6,
            batch: BatchConfig::default(),
            optim: AdamConfig::default(),
            loss: LossWeights::default(),
            ema_momentum: crate::network::DEFAULT_EMA_MOMENTUM,
            iters_per_epoch: 0,
            awb: true,
            infer_batch: 64,
        }
    }
}

fn iterations(configured: usize, n: usize, batch: &BatchConfig) -> usize {
    if configured > 0 {
        configured
    } else {
        n.div_ceil(batch.size()).max(1)
    }
}

fn teacher_outputs(net: &mut Backbone<f32>, x: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let (out, _) = net.forward(&mut g, v, Mode::Eval, Trainable::NONE)?;
    Ok((g.value(out.logits).clone(), g.value(out.embedding).clone()))
}

fn student_step<F>(net: &mut Backbone<f32>, opt: &mut Adam<f32>, x: &Tensor<f32>, trainable: Trainable, loss: F) -> Result<LossParts>
where
    F: FnOnce(&mut Graph<f32>, StudentOut) -> Result<(Var, LossParts)>,
{
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (out, mut binding) = net.forward(&mut g, xv, Mode::Train, trainable)?;
    let (l, parts) = loss(&mut g, StudentOut { logits: out.logits, embedding: out.embedding })?;
    if !parts.total.is_finite() {
        return Err(AwbError::Numeric(format!("non-finite loss {parts:?}")));
    }
    let grads = g.backward(l)?;
    opt.step(&mut net.store, &binding, &grads);
    binding.apply_bn_updates(&mut net.store, BN_MOMENTUM);
    if net.store.entries().iter().any(|e| !e.value.is_finite()) {
        return Err(AwbError::Numeric("parameters became non-finite after an update".into()));
    }
    Ok(parts)
}

fn check_images(images: &Tensor<f32>, labels: Option<&[usize]>) -> Result<usize> {
    let (n, _, _, _) = images.dims4()?;
    if n == 0 {
        return Err(AwbError::Data("no training images".into()));
    }
    if let Some(l) = labels {
        if l.len() != n {
            return Err(AwbError::Data(format!("{} labels for {} images", l.len(), n)));
        }
    }
    Ok(n)
}

/// Supervised training of both students on labeled source data with the
/// AWB slots disabled. Teachers are reset to the students at the end.
pub fn source_pretrain(
    nets: &mut DualNetworks<f32>,
    images: &Tensor<f32>,
    labels: &[usize],
    cfg: &PretrainConfig,
    seed: u64,
    hook: EpochHook<'_>,
) -> Result<Vec<EpochRecord>> {
    let n = check_images(images, Some(labels))?;
    cfg.optim.validate()?;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    for net in [&nets.net_a, &nets.net_b] {
        if net.num_classes() != classes {
            return Err(invalid!("classifier has {} outputs for {} source identities", net.num_classes(), classes));
        }
    }
    nets.set_awb_active(false);
    let mut opts = [Adam::new(cfg.optim), Adam::new(cfg.optim)];
    let mut samplers = [
        PkSampler::new(labels, cfg.batch, RngStream::new(seed, 200))?,
        PkSampler::new(labels, cfg.batch, RngStream::new(seed, 201))?,
    ];
    let iters = iterations(cfg.iters_per_epoch, n, &cfg.batch);
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut rec = EpochRecord::new(epoch, Phase::Pretrain, classes);
        let mut sum = LossParts::default();
        for it in 0..iters {
            let [sa, sb] = &mut samplers;
            let (ia, ib) = (sa.next_batch(), sb.next_batch());
            let (xa, xb) = (images.select_batch(&ia)?, images.select_batch(&ib)?);
            let la: Vec<usize> = ia.iter().map(|&i| labels[i]).collect();
            let lb: Vec<usize> = ib.iter().map(|&i| labels[i]).collect();
            let [oa, ob] = &mut opts;
            let (net_a, net_b) = (&mut nets.net_a, &mut nets.net_b);
            let (ra, rb) = rayon::join(
                || student_step(net_a, oa, &xa, Trainable::ALL, |g, s| supervised_loss(g, s, &la, cfg.ce_weight, cfg.tri_weight)),
                || student_step(net_b, ob, &xb, Trainable::ALL, |g, s| supervised_loss(g, s, &lb, cfg.ce_weight, cfg.tri_weight)),
            );
            let (pa, pb) = (
                ra.map_err(|e| annotate(e, epoch, it))?,
                rb.map_err(|e| annotate(e, epoch, it))?,
            );
            sum.accumulate(&pa);
            sum.accumulate(&pb);
        }
        rec.losses = sum.scaled(0.5 / iters as f64);
        rec.wall_seconds = start.elapsed().as_secs_f64();
        info!("pretrain epoch {epoch}: loss {:.4}", rec.losses.total);
        hook(nets, &mut rec)?;
        records.push(rec);
    }
    nets.teacher_a = nets.net_a.clone();
    nets.teacher_b = nets.net_b.clone();
    Ok(records)
}

fn annotate(e: AwbError, epoch: usize, it: usize) -> AwbError {
    match e {
        AwbError::Numeric(m) => AwbError::Numeric(format!("epoch {epoch}, iteration {it}: {m}")),
        other => other,
    }
}

/// Mean of the two teachers' L2-normalized embeddings.
pub fn clustering_features(nets: &mut DualNetworks<f32>, images: &Tensor<f32>, batch: usize) -> Result<Tensor<f64>> {
    let (_, ea) = nets.teacher_a.infer(images, batch)?;
    let (_, eb) = nets.teacher_b.infer(images, batch)?;
    let na = l2_normalize_rows(&ea.cast())?;
    let nb = l2_normalize_rows(&eb.cast())?;
    Ok(na.zip_map(&nb, |a, b| 0.5 * (a + b))?)
}

/// Classifier weights `[D, k]` from normalized cluster centroids.
pub fn classifier_from_centroids(labels: &PseudoLabels) -> Result<Tensor<f32>> {
    let c = l2_normalize_rows(&labels.centroids)?;
    let (k, d) = c.dims2()?;
    Ok(Tensor::from_fn(&[d, k], |i| c.data()[(i % k) * d + i / k] as f32))
}

/// Target-domain adaptation: warm-up of the attention weights, then full
/// mutual training with waves. Pseudo-labels are recomputed every epoch.
pub fn adapt(
    nets: &mut DualNetworks<f32>,
    images: &Tensor<f32>,
    cfg: &AdaptConfig,
    seed: u64,
    hook: EpochHook<'_>,
) -> Result<Vec<EpochRecord>> {
    let n = check_images(images, None)?;
    cfg.optim.validate()?;
    cfg.loss.validate()?;
    if cfg.k < 2 || cfg.k > n {
        return Err(invalid!("cluster count k = {} must lie in [2, {}]", cfg.k, n));
    }
    if !(0.0..1.0).contains(&cfg.ema_momentum) {
        return Err(invalid!("EMA momentum must lie in [0,1), got {}", cfg.ema_momentum));
    }
    nets.ema_momentum = cfg.ema_momentum;
    nets.set_awb_active(cfg.awb);
    let has_attention = cfg.awb && nets.net_a.weight_count(Some(ParamGroup::Attention)) > 0;
    let warmup = if has_attention { cfg.warmup_epochs } else { 0 };
    let total = warmup + cfg.epochs;

    let mut opts = [Adam::new(cfg.optim), Adam::new(cfg.optim)];
    let mut cluster_rng = RngStream::new(seed, 300);
    let batch_rng = RngStream::new(seed, 301);
    let iters = iterations(cfg.iters_per_epoch, n, &cfg.batch);
    let mut records = Vec::with_capacity(total);

    for epoch in 0..total {
        let start = Instant::now();
        let phase = if epoch < warmup { Phase::Warmup } else { Phase::Full };
        let trainable = if phase == Phase::Warmup { Trainable::ATTENTION_ONLY } else { Trainable::ALL };
        nets.net_a.set_waves(phase == Phase::Full);
        nets.net_b.set_waves(phase == Phase::Full);

        let features = clustering_features(nets, images, cfg.infer_batch)?;
        let pseudo = kmeans(&features, cfg.k, &mut cluster_rng, cfg.kmeans_iters, cfg.kmeans_tol)?;
        let head = classifier_from_centroids(&pseudo)?;
        for net in [&mut nets.net_a, &mut nets.net_b, &mut nets.teacher_a, &mut nets.teacher_b] {
            net.reset_classifier(head.clone())?;
        }
        let classifier = nets.net_a.arch.classifier().weight;
        opts.iter_mut().for_each(|o| o.reset(classifier));
        debug!("epoch {epoch}: k-means converged in {} iterations, inertia {:.4}", pseudo.iterations, pseudo.inertia);

        let mut sampler = PkSampler::new(&pseudo.assignment, cfg.batch, batch_rng.derive(epoch as u64))?;
        let mut rec = EpochRecord::new(epoch, phase, pseudo.k);
        rec.inertia = Some(pseudo.inertia);
        let mut sum = LossParts::default();
        for it in 0..iters {
            let idx = sampler.next_batch();
            let x = images.select_batch(&idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| pseudo.assignment[i]).collect();
            let (tla, tea) = teacher_outputs(&mut nets.teacher_a, &x)?;
            let (tlb, teb) = teacher_outputs(&mut nets.teacher_b, &x)?;
            let [oa, ob] = &mut opts;
            let (net_a, net_b) = (&mut nets.net_a, &mut nets.net_b);
            let (labels, w) = (&labels, &cfg.loss);
            let (ra, rb) = rayon::join(
                || {
                    student_step(net_a, oa, &x, trainable, |g, s| {
                        mutual_losses(g, s, TeacherOut { logits: &tlb, embedding: &teb }, labels, w)
                    })
                },
                || {
                    student_step(net_b, ob, &x, trainable, |g, s| {
                        mutual_losses(g, s, TeacherOut { logits: &tla, embedding: &tea }, labels, w)
                    })
                },
            );
            sum.accumulate(&ra.map_err(|e| annotate(e, epoch, it))?);
            sum.accumulate(&rb.map_err(|e| annotate(e, epoch, it))?);
            nets.update_teachers()?;
        }
        rec.losses = sum.scaled(0.5 / iters as f64);
        rec.wall_seconds = start.elapsed().as_secs_f64();
        info!("adapt epoch {epoch} ({phase}): loss {:.4}, inertia {:.4}", rec.losses.total, pseudo.inertia);
        hook(nets, &mut rec)?;
        records.push(rec);
    }
    Ok(records)
}

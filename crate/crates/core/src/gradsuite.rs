//! The finite-difference gradient suite: every differentiable tape op plus
//! the composite blocks (attention, AWB units, a small CNN with losses),
//! each checked in 64-bit on random instances.

use awb_tensor::gradcheck::{grad_check, grad_check_with_floor, project, GradCheckReport, DEFAULT_STEP, REL_ERR_FLOOR};
use awb_tensor::{BatchNormMode, Graph, RngStream, Tensor, Var};

use crate::attention::{Attention, AttentionOptions};
use crate::awb::{AwbConfig, AwbUnit, Strategy};
use crate::error::Result;
use crate::network::{Backbone, ModelConfig};
use crate::params::{Ctx, Mode, ParamId, ParamRole, ParamStore, Trainable};
use crate::pipeline::{mutual_losses, supervised_loss, LossWeights, StudentOut, TeacherOut};
use crate::registry::Registries;
use crate::waveblock::{apply_band, BandStyle, WaveConfig, WaveDraw};

pub const SUITE_TOLERANCE: f64 = 1e-4;
pub const SUITE_INSTANCES: u64 = 20;
/// Relative-error denominator floor for whole-network cases. Difference
/// quotients through the full backbone carry about 1e-10 of rounding noise
/// at h = 1e-5, which the default floor would read as a relative error on
/// gradients near 1e-6.
pub const NETWORK_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: String,
    pub instances: u64,
    pub coordinates: usize,
    pub max_rel_err: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// `(instance, input, offset, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(u64, usize, usize, f64, f64)>,
}

impl CaseReport {
    fn absorb(&mut self, instance: u64, r: &GradCheckReport) {
        self.coordinates += r.coordinates;
        if r.max_rel_err >= self.max_rel_err {
            self.max_rel_err = r.max_rel_err;
            self.worst = r.worst.map(|(s, i, a, n)| (instance, s, i, a, n));
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err < SUITE_TOLERANCE
    }
}

type Op = fn(&mut Graph<f64>, &[Var]) -> awb_tensor::Result<Var>;

/// Standard normal entries nudged away from zero, so relu and clamp kinks
/// are not straddled by the difference step.
fn away_from_zero(rng: &mut RngStream, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = rng.normal();
        if v.abs() < 0.05 {
            v + v.signum() * 0.05
        } else {
            v
        }
    })
}

fn op_case(name: &str, shapes: &[&[usize]], op: Op, instances: u64) -> Result<CaseReport> {
    let mut report = CaseReport { name: name.into(), instances, coordinates: 0, max_rel_err: 0.0, floor: REL_ERR_FLOOR, worst: None };
    for seed in 0..instances {
        let mut rng = RngStream::new(seed, 17);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| away_from_zero(&mut rng, s)).collect();
        let r = grad_check(
            |g, v| {
                let out = op(g, v)?;
                project(g, out, seed)
            },
            &inputs,
            DEFAULT_STEP,
        )?;
        report.absorb(seed, &r);
    }
    Ok(report)
}

fn tensor_ops(instances: u64) -> Result<Vec<CaseReport>> {
    let cases: Vec<(&str, Vec<&[usize]>, Op)> = vec![
        ("add", vec![&[2, 3, 2, 2], &[2, 3, 1, 1]], |g, v| g.add(v[0], v[1])),
        ("sub", vec![&[2, 1, 2, 2], &[2, 3, 2, 2]], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![&[2, 3, 2, 2], &[2, 1, 2, 2]], |g, v| g.mul(v[0], v[1])),
        ("scale", vec![&[3, 4]], |g, v| g.scale(v[0], 1.7)),
        ("relu", vec![&[3, 4]], |g, v| g.relu(v[0])),
        ("sigmoid", vec![&[3, 4]], |g, v| g.sigmoid(v[0])),
        ("sqrt", vec![&[3, 4]], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.sqrt(sq)
        }),
        ("clamp_min", vec![&[3, 4]], |g, v| g.clamp_min(v[0], 0.0)),
        ("sum", vec![&[3, 4]], |g, v| g.sum(v[0])),
        ("mean", vec![&[3, 4]], |g, v| g.mean(v[0])),
        ("sum_axis", vec![&[3, 4, 2]], |g, v| g.sum_axis(v[0], 1)),
        ("reshape", vec![&[2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        ("permute", vec![&[2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1])),
        ("concat", vec![&[2, 1, 3], &[2, 2, 3]], |g, v| g.concat(&[v[0], v[1]], 1)),
        ("matmul", vec![&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("matmul_t", vec![&[4, 3], &[2, 4]], |g, v| g.matmul_t(v[0], v[1], true, true)),
        ("bmm", vec![&[2, 3, 4], &[2, 4, 5]], |g, v| g.bmm(v[0], v[1], false, false)),
        ("bmm_t", vec![&[2, 4, 3], &[2, 5, 4]], |g, v| g.bmm(v[0], v[1], true, true)),
        ("conv2d", vec![&[2, 3, 5, 4], &[4, 3, 3, 3], &[4]], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1)),
        ("conv2d_strided", vec![&[1, 2, 6, 6], &[3, 2, 3, 3]], |g, v| g.conv2d(v[0], v[1], None, 2, 1)),
        ("batch_norm_train", vec![&[3, 2, 2, 3], &[2], &[2]], |g, v| {
            let (rm, rv) = (Tensor::zeros(&[2]), Tensor::ones(&[2]));
            Ok(g.batch_norm(v[0], v[1], v[2], BatchNormMode::Train, (&rm, &rv), 1e-5)?.0)
        }),
        ("batch_norm_eval", vec![&[2, 2, 2, 2], &[2], &[2]], |g, v| {
            let rm = Tensor::from_f64(&[2], &[0.3, -0.2])?;
            let rv = Tensor::from_f64(&[2], &[1.5, 0.7])?;
            Ok(g.batch_norm(v[0], v[1], v[2], BatchNormMode::Eval, (&rm, &rv), 1e-5)?.0)
        }),
        ("max_pool2d", vec![&[2, 2, 4, 4]], |g, v| g.max_pool2d(v[0], 2, 2)),
        ("avg_pool2d", vec![&[2, 2, 4, 6]], |g, v| g.avg_pool2d(v[0], 2, 2)),
        ("global_avg_pool", vec![&[2, 3, 3, 2]], |g, v| g.global_avg_pool(v[0])),
        ("global_max_pool", vec![&[2, 3, 3, 2]], |g, v| g.global_max_pool(v[0])),
        ("channelwise_mean", vec![&[2, 3, 3, 2]], |g, v| g.channelwise_mean(v[0])),
        ("channelwise_max", vec![&[2, 3, 3, 2]], |g, v| g.channelwise_max(v[0])),
        ("gather", vec![&[3, 4]], |g, v| g.gather(v[0], &[0, 5, 5, 11])),
        ("log_softmax", vec![&[3, 5]], |g, v| g.log_softmax(v[0])),
    ];
    cases.into_iter().map(|(name, shapes, op)| op_case(name, &shapes, op, instances)).collect()
}

/// Weights of `store` resampled, so zero-initialized blocks are exercised
/// away from their trivial starting point.
fn randomize(store: &mut ParamStore<f64>, rng: &mut RngStream) -> Vec<ParamId> {
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.entry(id).role == ParamRole::Weight).collect();
    for &id in &ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, away_from_zero(rng, &shape).map(|v| 0.5 * v));
    }
    ids
}

/// Check `forward` with respect to every weight in `store`, and to `x`
/// when `wrt_input` is set.
fn block_case<F>(name: &str, instances: u64, wrt_input: bool, floor: f64, mut build: impl FnMut(&mut RngStream) -> Result<(ParamStore<f64>, Tensor<f64>, F)>) -> Result<CaseReport>
where
    F: Fn(&mut Ctx<f64>, Var) -> Result<Var>,
{
    let mut report = CaseReport { name: name.into(), instances, coordinates: 0, max_rel_err: 0.0, floor, worst: None };
    for seed in 0..instances {
        let mut rng = RngStream::new(seed, 23);
        let (mut store, x, forward) = build(&mut rng)?;
        let ids = randomize(&mut store, &mut rng);
        let skip = usize::from(wrt_input);
        let mut inputs = if wrt_input { vec![x.clone()] } else { Vec::new() };
        inputs.extend(ids.iter().map(|&id| store.get(id).clone()));
        let store = &store;
        let r = grad_check_with_floor(
            |g, v| {
                let xv = if wrt_input { v[0] } else { g.constant(x.clone()) };
                let mut ctx = Ctx::new(g, store, Mode::Train, Trainable::ALL);
                for (&id, &var) in ids.iter().zip(&v[skip..]) {
                    ctx.bind(id, var).map_err(to_tensor_err)?;
                }
                let out = forward(&mut ctx, xv).map_err(to_tensor_err)?;
                project(ctx.graph, out, seed)
            },
            &inputs,
            DEFAULT_STEP,
            floor,
        )?;
        report.absorb(seed, &r);
    }
    Ok(report)
}

fn to_tensor_err(e: crate::error::AwbError) -> awb_tensor::TensorError {
    awb_tensor::TensorError::InvalidArgument(e.to_string())
}

fn attention_case(name: &str, kind: &'static str, instances: u64) -> Result<CaseReport> {
    let reg = Registries::<f64>::default();
    let opts = AttentionOptions { reduction: 2, kernel: 3 };
    block_case(name, instances, true, REL_ERR_FLOOR, |rng| {
        let mut store = ParamStore::new();
        let block: Box<dyn Attention<f64>> = reg.attention.build(kind, &mut store, "a", 4, &opts, rng)?;
        let x = away_from_zero(rng, &[2, 4, 4, 3]);
        Ok((store, x, move |ctx: &mut Ctx<f64>, v: Var| block.forward(ctx, v)))
    })
}

fn awb_case(name: &str, kind: &str, strategy: Strategy, instances: u64) -> Result<CaseReport> {
    let reg = Registries::<f64>::default();
    let cfg = AwbConfig {
        attention: kind.into(),
        strategy,
        wave: WaveConfig::new(0.5, 1.5)?,
        perturbation: "wave".into(),
        attention_options: AttentionOptions { reduction: 2, kernel: 3 },
    };
    block_case(name, instances, true, REL_ERR_FLOOR, |rng| {
        let mut store = ParamStore::new();
        let wave_rng = rng.derive(1);
        let unit = AwbUnit::build(&cfg, &reg.attention, &reg.perturbation, &mut store, "awb", 4, 4, rng, wave_rng)?;
        let x = away_from_zero(rng, &[2, 4, 4, 3]);
        // Every evaluation starts from the same stream position, so all of
        // them share one wave draw.
        Ok((store, x, move |ctx: &mut Ctx<f64>, v: Var| unit.clone().forward(ctx, v)))
    })
}

fn wave_case(instances: u64) -> Result<CaseReport> {
    let mut report = CaseReport { name: "waveblock".into(), instances, coordinates: 0, max_rel_err: 0.0, floor: REL_ERR_FLOOR, worst: None };
    for seed in 0..instances {
        let mut rng = RngStream::new(seed, 29);
        let x = away_from_zero(&mut rng, &[2, 3, 8, 4]);
        let cfg = WaveConfig::new(0.3, 1.5)?;
        let draw = WaveDraw { offset: rng.uniform_int(0, cfg.max_offset(8)), height: 8 };
        let store = ParamStore::<f64>::new();
        let r = grad_check(
            |g, v| {
                let mut ctx = Ctx::new(g, &store, Mode::Train, Trainable::ALL);
                let y = apply_band(&mut ctx, v[0], &cfg, &draw, BandStyle::Wave).map_err(to_tensor_err)?;
                project(g, y, seed)
            },
            &[x],
            DEFAULT_STEP,
        )?;
        report.absorb(seed, &r);
    }
    Ok(report)
}

fn tiny_model(attention: &str, strategy: Strategy) -> Result<ModelConfig> {
    Ok(ModelConfig {
        channels: vec![2, 4, 4, 4],
        input_height: 16,
        input_width: 8,
        embed_dim: 4,
        num_classes: 3,
        awb: AwbConfig {
            attention: attention.into(),
            strategy,
            wave: WaveConfig::new(0.3, 1.5)?,
            perturbation: "wave".into(),
            attention_options: AttentionOptions { reduction: 2, kernel: 3 },
        },
    })
}

/// The whole network with its AWB units, differentiated through the
/// supervised or mutual objective.
fn network_case(name: &str, attention: &str, strategy: Strategy, mutual: bool, instances: u64) -> Result<CaseReport> {
    let reg = Registries::<f64>::default();
    let config = tiny_model(attention, strategy)?;
    let labels = [0usize, 0, 1, 1, 2, 2];
    block_case(name, instances, false, NETWORK_FLOOR, |rng| {
        let net = Backbone::new(&config, &reg, &mut rng.derive(3), &rng.derive(4))?;
        let x = away_from_zero(rng, &[6, 3, 16, 8]);
        let teacher_logits = away_from_zero(rng, &[6, 3]);
        let teacher_emb = away_from_zero(rng, &[6, 4]);
        let arch = net.arch;
        let forward = move |ctx: &mut Ctx<f64>, v: Var| -> Result<Var> {
            let out = arch.clone().forward(ctx, v)?;
            let s = StudentOut { logits: out.logits, embedding: out.embedding };
            let (l, _) = if mutual {
                let t = TeacherOut { logits: &teacher_logits, embedding: &teacher_emb };
                mutual_losses(ctx.graph, s, t, &labels, &LossWeights::default())?
            } else {
                supervised_loss(ctx.graph, s, &labels, 1.0, 1.0)?
            };
            Ok(l)
        };
        Ok((net.store, x, forward))
    })
}

/// Run everything; `instances` random draws per case.
pub fn run_suite(instances: u64) -> Result<Vec<CaseReport>> {
    let mut out = tensor_ops(instances)?;
    out.push(wave_case(instances)?);
    out.push(attention_case("icbam", "icbam", instances)?);
    out.push(attention_case("nonlocal", "nonlocal", instances)?);
    for (kind, strategy) in [("icbam", Strategy::Pre), ("icbam", Strategy::Post), ("nonlocal", Strategy::Pre), ("nonlocal", Strategy::Post)] {
        out.push(awb_case(&format!("awb_{strategy}_{kind}"), kind, strategy, instances)?);
    }
    out.push(network_case("cnn_supervised", "none", Strategy::Pre, false, instances)?);
    out.push(network_case("cnn_awb_mutual", "nonlocal", Strategy::Post, true, instances)?);
    Ok(out)
}

use std::fs;
use std::path::Path;

use awb_core::config::{ExperimentConfig, SOURCE_DOMAIN, TARGET_DOMAIN};
use awb_core::data::{evaluate_retrieval, generate_dataset, Dataset, RetrievalMetrics, Split};
use awb_core::diagnostics::average_pair_difference;
use awb_core::network::{Backbone, Checkpoint, DualNetworks};
use awb_core::pipeline::{adapt, source_pretrain, EpochRecord};
use awb_core::registry::Registries;
use awb_core::{AwbError, Result};
use awb_tensor::Tensor;
use log::info;

use crate::metrics::metrics_csv;

/// Images with one identity label per row.
#[derive(Clone, Debug)]
pub struct Labeled {
    pub images: Tensor<f32>,
    pub ids: Vec<usize>,
}

/// The tensors a run needs, cut out of a two-domain dataset.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    /// Every source image, with identities relabeled densely from 0.
    pub source: Labeled,
    /// Target training images; their identities are never read.
    pub target_train: Tensor<f32>,
    pub query: Labeled,
    pub gallery: Labeled,
}

impl ExperimentData {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let labeled = |domain: &str, splits: &[Split], dense: bool| -> Result<Labeled> {
            let idx = ds.select(domain, splits);
            if idx.is_empty() {
                return Err(AwbError::Data(format!("no {domain} images in splits {splits:?}")));
            }
            let ids = if dense { ds.dense_labels(&idx) } else { ds.identities(&idx) };
            Ok(Labeled { images: ds.tensor(&idx)?, ids })
        };
        Ok(Self {
            source: labeled(SOURCE_DOMAIN, &[Split::Train, Split::Query, Split::Gallery], true)?,
            target_train: labeled(TARGET_DOMAIN, &[Split::Train], false)?.images,
            query: labeled(TARGET_DOMAIN, &[Split::Query], false)?,
            gallery: labeled(TARGET_DOMAIN, &[Split::Gallery], false)?,
        })
    }

    pub fn source_classes(&self) -> usize {
        self.source.ids.iter().max().map_or(0, |m| m + 1)
    }
}

/// Source and target domains rendered from the configuration; target
/// image ids continue after the source ones.
pub fn generate_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let mut ds = generate_dataset(&cfg.domain_spec(false), 0)?;
    let target = generate_dataset(&cfg.domain_spec(true), ds.len())?;
    ds.extend(target)?;
    Ok(ds)
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    Dataset::load(Path::new(&cfg.data.dir), cfg.input_height, cfg.input_width)
}

/// Target query-versus-gallery retrieval with `net` in eval mode.
pub fn evaluate(net: &mut Backbone<f32>, data: &ExperimentData, batch: usize) -> Result<RetrievalMetrics> {
    let (_, q) = net.infer(&data.query.images, batch)?;
    let (_, g) = net.infer(&data.gallery.images, batch)?;
    evaluate_retrieval(&q, &data.query.ids, &g, &data.gallery.ids)
}

fn record_retrieval(rec: &mut EpochRecord, m: &RetrievalMetrics) {
    rec.map = Some(m.map);
    rec.cmc = Some(m.cmc);
}

/// Networks and metrics of one finished run.
pub struct RunOutput {
    pub nets: DualNetworks<f32>,
    pub records: Vec<EpochRecord>,
    pub csv: String,
}

impl RunOutput {
    pub fn final_map(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.map)
    }

    pub fn final_pair_diff(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.pair_diff)
    }
}

fn write(dir: &Path, name: &str, contents: &[u8]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| AwbError::io(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| AwbError::io(&path, e))
}

/// Write a run's artifacts, or on a numeric failure the offending state.
fn finish(
    cfg: &ExperimentConfig,
    stage: &str,
    nets: DualNetworks<f32>,
    outcome: Result<Vec<EpochRecord>>,
    out_dir: Option<&Path>,
) -> Result<RunOutput> {
    let meta = |status: &str| vec![("stage".to_string(), stage.to_string()), ("status".to_string(), status.to_string())];
    let records = match outcome {
        Ok(r) => r,
        Err(e @ AwbError::Numeric(_)) => {
            if let Some(dir) = out_dir {
                let path = dir.join(format!("{stage}_failure.ckpt"));
                nets.to_checkpoint(cfg.pairs(), meta("numeric_failure")).save(&path)?;
                log::error!("numeric failure, state written to {}", path.display());
            }
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    let csv = metrics_csv(&records, cfg.wall_clock);
    if let Some(dir) = out_dir {
        write(dir, &format!("{stage}_config.txt"), cfg.to_text().as_bytes())?;
        write(dir, &format!("{stage}_metrics.csv"), csv.as_bytes())?;
        nets.to_checkpoint(cfg.pairs(), meta("complete")).save(&dir.join(format!("{stage}.ckpt")))?;
    }
    Ok(RunOutput { nets, records, csv })
}

/// Supervised source training of both students. Every epoch evaluates
/// net_a on the target split, so the last row is the direct-transfer
/// baseline.
pub fn run_pretrain(cfg: &ExperimentConfig, data: &ExperimentData, out_dir: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    let model = cfg.model(data.source_classes())?;
    let mut nets = DualNetworks::new(&model, &Registries::default(), cfg.seed)?;
    let batch = cfg.eval_batch;
    let mut hook = |nets: &mut DualNetworks<f32>, rec: &mut EpochRecord| -> Result<()> {
        let m = evaluate(&mut nets.net_a, data, batch)?;
        info!("pretrain epoch {}: target mAP {:.4}", rec.epoch, m.map);
        record_retrieval(rec, &m);
        Ok(())
    };
    let outcome = source_pretrain(&mut nets, &data.source.images, &data.source.ids, &cfg.pretrain(), cfg.seed, &mut hook);
    finish(cfg, "pretrain", nets, outcome, out_dir)
}

/// Target adaptation starting from a pre-training checkpoint. Attention
/// weights missing from the checkpoint keep their initialization. Every
/// epoch records teacher_a retrieval and, if enabled, the students' pair
/// difference.
pub fn run_adapt(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    pretrained: &Checkpoint,
    out_dir: Option<&Path>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let model = cfg.model(2)?;
    let mut nets = DualNetworks::new(&model, &Registries::default(), cfg.seed)?;
    let fresh = nets.restore_matching(pretrained)?;
    if fresh > 0 {
        info!("{fresh} attention tensors start from initialization");
    }
    let (batch, tap, pair_diff) = (cfg.eval_batch, cfg.tap, cfg.pair_diff);
    let mut hook = |nets: &mut DualNetworks<f32>, rec: &mut EpochRecord| -> Result<()> {
        let m = evaluate(&mut nets.teacher_a, data, batch)?;
        record_retrieval(rec, &m);
        if pair_diff {
            let d = average_pair_difference(&mut nets.net_a, &mut nets.net_b, &data.query.images, tap, batch)?;
            rec.pair_diff = Some(d);
        }
        info!("adapt epoch {} ({}): target mAP {:.4}, pair difference {:?}", rec.epoch, rec.phase, m.map, rec.pair_diff);
        Ok(())
    };
    let outcome = adapt(&mut nets, &data.target_train, &cfg.adapt(), cfg.seed, &mut hook);
    finish(cfg, "adapt", nets, outcome, out_dir)
}

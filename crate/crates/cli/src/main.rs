use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use awb_cli::{evaluate, generate_data, load_data, run_adapt, run_pretrain, ExperimentData};
use awb_core::config::ExperimentConfig;
use awb_core::data::evaluate_retrieval;
use awb_core::diagnostics::average_pair_difference;
use awb_core::gradsuite::run_suite;
use awb_core::network::{Checkpoint, DualNetworks, NetRole, Tap};
use awb_core::registry::Registries;
use awb_core::waveblock::collision_probability;
use awb_core::{AwbError, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "awb", version, about = "Attentive WaveBlock dual networks for unsupervised domain adaptation")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Settings applied on top of the defaults: config file first, then
/// `--set` pairs, then the named flags.
#[derive(Args)]
struct Overrides {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set adapt.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Threads for data-parallel work.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    output_dir: Option<String>,
    #[arg(long, global = true)]
    data_dir: Option<String>,
    /// Waving width rate r_w.
    #[arg(long, global = true)]
    rw: Option<f64>,
    /// Waving height rate r_h.
    #[arg(long, global = true)]
    rh: Option<f64>,
    /// Cluster count k.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Attention kind by registry name (none, icbam, nonlocal).
    #[arg(long, global = true)]
    attention: Option<String>,
    /// auto, pre or post.
    #[arg(long, global = true)]
    strategy: Option<String>,
    /// Band perturbation by registry name (wave, dropblock).
    #[arg(long, global = true)]
    perturbation: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic source and target domains into the data directory.
    GenData,
    /// Supervised source training of both students.
    Pretrain,
    /// Target adaptation from a pre-training checkpoint.
    Adapt {
        /// Defaults to `<output_dir>/pretrain.ckpt`.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Target retrieval metrics of one network in a checkpoint.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, default_value = "teacher_a")]
        net: String,
        /// Use the queries themselves, each with a unique identity, as gallery.
        #[arg(long)]
        query_as_gallery: bool,
    },
    /// Average Grad-CAM difference between the two students of a checkpoint.
    Diff {
        checkpoint: PathBuf,
        /// stage3 or stage3_awb; defaults to the config value.
        #[arg(long)]
        tap: Option<String>,
    },
    /// Finite-difference check of every differentiable op and block.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: u64,
    },
    /// Exact probability that all wave draws coincide (uses --rw).
    Prob {
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 1)]
        draws: u32,
    },
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| AwbError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        let flags: [(&str, Option<String>); 10] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("workers", self.workers.map(|v| v.to_string())),
            ("output_dir", self.output_dir.clone()),
            ("data.dir", self.data_dir.clone()),
            ("wave.rw", self.rw.map(|v| v.to_string())),
            ("wave.rh", self.rh.map(|v| v.to_string())),
            ("adapt.k", self.k.map(|v| v.to_string())),
            ("awb.attention", self.attention.clone()),
            ("awb.strategy", self.strategy.clone()),
            ("awb.perturbation", self.perturbation.clone()),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        Ok(cfg)
    }
}

fn exit_code(e: &AwbError) -> u8 {
    match e {
        AwbError::Config(_) | AwbError::InvalidArgument(_) => 2,
        AwbError::Data(_) | AwbError::Checkpoint(_) => 3,
        AwbError::Numeric(_) => 4,
        AwbError::Io { .. } => 5,
    }
}

fn data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    ExperimentData::from_dataset(&load_data(cfg)?)
}

/// Networks rebuilt from a checkpoint's own configuration.
fn load_nets(path: &Path) -> Result<(ExperimentConfig, DualNetworks<f32>)> {
    let ck = Checkpoint::load(path)?;
    let cfg = ExperimentConfig::from_pairs(ck.config.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    let mut nets = DualNetworks::new(&cfg.model(2)?, &Registries::default(), cfg.seed)?;
    nets.restore(&ck)?;
    Ok((cfg, nets))
}

/// C-style scientific notation with a two-digit exponent, e.g. `4.27e-06`.
fn sci(x: f64) -> String {
    let s = format!("{x:.2e}");
    match s.split_once('e') {
        Some((m, e)) => {
            let (sign, digits) = e.strip_prefix('-').map_or(("+", e), |d| ("-", d));
            format!("{m}e{sign}{digits:0>2}")
        }
        None => s,
    }
}

/// Six decimals for moderate values, scientific notation below 1e-3.
fn decimal(x: f64) -> String {
    if x >= 1e-3 {
        format!("{x:.6}")
    } else {
        sci(x)
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = cli.overrides.resolve()?;
    cfg.validate()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build_global()
        .map_err(|e| AwbError::Config(format!("cannot size the worker pool: {e}")))?;
    match cli.command {
        Command::GenData => {
            let ds = generate_data(&cfg)?;
            let dir = Path::new(&cfg.data.dir);
            ds.write(dir)?;
            let path = dir.join("config.txt");
            fs::write(&path, cfg.to_text()).map_err(|e| AwbError::io(&path, e))?;
            println!("wrote {} images to {}", ds.len(), dir.display());
        }
        Command::Pretrain => {
            let out = run_pretrain(&cfg, &data(&cfg)?, Some(Path::new(&cfg.output_dir)))?;
            if let Some(m) = out.final_map() {
                println!("direct transfer mAP {m:.6}");
            }
        }
        Command::Adapt { from } => {
            let from = from.unwrap_or_else(|| Path::new(&cfg.output_dir).join("pretrain.ckpt"));
            let ck = Checkpoint::load(&from)?;
            let out = run_adapt(&cfg, &data(&cfg)?, &ck, Some(Path::new(&cfg.output_dir)))?;
            if let Some(m) = out.final_map() {
                println!("adapted mAP {m:.6}");
            }
            if let Some(d) = out.final_pair_diff() {
                println!("pair difference {d:.6}");
            }
        }
        Command::Eval { checkpoint, net, query_as_gallery } => {
            let role = NetRole::ALL
                .into_iter()
                .find(|r| r.prefix() == net)
                .ok_or_else(|| AwbError::Config(format!("unknown network {net:?}; expected net_a, net_b, teacher_a or teacher_b")))?;
            let (_, mut nets) = load_nets(&checkpoint)?;
            let data = data(&cfg)?;
            let net = nets.get_mut(role);
            let m = if query_as_gallery {
                let (_, q) = net.infer(&data.query.images, cfg.eval_batch)?;
                let ids: Vec<usize> = (0..data.query.ids.len()).collect();
                evaluate_retrieval(&q, &ids, &q, &ids)?
            } else {
                evaluate(net, &data, cfg.eval_batch)?
            };
            println!(
                "mAP {:.6}\ncmc1 {:.6}\ncmc5 {:.6}\ncmc10 {:.6}\nqueries {} (excluded {})",
                m.map, m.cmc[0], m.cmc[1], m.cmc[2], m.evaluated_queries, m.excluded_queries
            );
        }
        Command::Diff { checkpoint, tap } => {
            let tap: Tap = match tap {
                Some(t) => t.parse().map_err(|e: AwbError| AwbError::Config(e.to_string()))?,
                None => cfg.tap,
            };
            let (_, mut nets) = load_nets(&checkpoint)?;
            let data = data(&cfg)?;
            let d = average_pair_difference(&mut nets.net_a, &mut nets.net_b, &data.query.images, tap, cfg.eval_batch)?;
            println!("pair difference ({tap}) {d:.6}");
        }
        Command::Gradcheck { instances } => {
            let reports = run_suite(instances)?;
            let mut failed = 0;
            for r in &reports {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!("{verdict:<4} {:<20} {:>7} coordinates  max relative error {:.3e}", r.name, r.coordinates, r.max_rel_err);
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(AwbError::Numeric(format!("{failed} gradient case(s) exceed the tolerance")));
            }
        }
        Command::Prob { height, draws } => {
            let p = collision_probability(height, cfg.rw, draws)?;
            println!("{}", sci(p.closed_form_f64()));
            println!("closed form   (1/{})^{draws} = {} ≈ {}", p.outcomes, p.closed_form, decimal(p.closed_form_f64()));
            println!("support based (1/{})^{draws} = {} ≈ {}", p.outcomes + 1, p.support_based, decimal(p.support_based_f64()));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! `smoothswap` command line: dataset rendering, embedder and swap training,
//! evaluation and interpolation reports.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use smoothswap::embedder::{self, Embedder, Head};
use smoothswap::evaluate::{self, EmbedderEvaluation};
use smoothswap::generator::Generator;
use smoothswap::metrics::{MetricRecord, MetricsReport};
use smoothswap::swap::SwapTrainer;
use smoothswap::synth::{ppm, Dataset, Split};
use smoothswap::{checkpoint, Error, Result};

use config::{write_run_config, ExperimentConfig, Layout, Mode};

#[derive(Parser)]
#[command(
    name = "smoothswap",
    version,
    about = "Smooth identity embeddings and face swapping on synthetic faces"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root.
    #[arg(long, global = true, env = "SMOOTHSWAP_OUT")]
    out: Option<PathBuf>,
    /// Seed for training batches and evaluation sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the labeled dataset and its manifest.
    GenData {
        #[arg(long)]
        identities: Option<usize>,
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        data_seed: Option<u64>,
    },
    /// Train the identity embedder (contrastive, or the cross-entropy twin).
    TrainEmbedder {
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        steps: Option<u64>,
        /// Stop early with a resumable checkpoint.
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Train the swap generator against a frozen embedder.
    TrainSwap {
        /// Embedder run that conditions the generator.
        #[arg(long, value_enum)]
        embedder: Option<Mode>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        stop_at: Option<u64>,
        #[arg(long)]
        lambda_id: Option<f64>,
    },
    /// Compute metric reports for trained embedders or swap models.
    Evaluate {
        #[arg(long, value_enum, value_delimiter = ',', default_value = "contrastive,ce")]
        models: Vec<Mode>,
        /// Evaluate swap generators (plus the identity-map bypass) instead of embedders.
        #[arg(long)]
        swap: bool,
    },
    /// Nearest-neighbour chain along one interpolation, as CSV and an image grid.
    InterpReport {
        #[arg(long, value_enum, default_value = "contrastive")]
        mode: Mode,
        /// Index into the evaluation's interpolation pairs.
        #[arg(long, default_value_t = 0)]
        pair: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Dataset(_) => 2,
        Error::Divergence { .. } => 3,
        Error::MissingArtifact(_) => 4,
        _ => 1,
    }
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

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(s) = cli.common.seed {
        cfg.embedder.train.seed = s;
        cfg.swap.run.seed = s;
        cfg.eval.seed = s;
    }
    let layout = Layout {
        root: cfg.output_dir.clone(),
    };
    match cli.command {
        Command::GenData {
            identities,
            instances,
            data_seed,
        } => {
            set(&mut cfg.dataset.identities, identities);
            set(&mut cfg.dataset.instances_per_identity, instances);
            set(&mut cfg.dataset.seed, data_seed);
            cfg.validate()?;
            gen_data(&cfg, &layout)
        }
        Command::TrainEmbedder { mode, steps, stop_at } => {
            set(&mut cfg.embedder.mode, mode);
            set(&mut cfg.embedder.train.steps, steps);
            if stop_at.is_some() {
                cfg.embedder.train.stop_at = stop_at;
            }
            cfg.validate()?;
            train_embedder(cfg, &layout)
        }
        Command::TrainSwap {
            embedder,
            steps,
            stop_at,
            lambda_id,
        } => {
            if embedder.is_some() {
                cfg.swap.embedder = embedder;
            }
            set(&mut cfg.swap.run.total_steps, steps);
            set(&mut cfg.swap.weights.id, lambda_id);
            if stop_at.is_some() {
                cfg.swap.run.stop_at = stop_at;
            }
            cfg.validate()?;
            train_swap(&cfg, &layout)
        }
        Command::Evaluate { models, swap } => {
            cfg.validate()?;
            if swap {
                evaluate_swaps(&cfg, &layout, &models)
            } else {
                evaluate_embedders(&cfg, &layout, &models)
            }
        }
        Command::InterpReport { mode, pair } => {
            cfg.validate()?;
            interp_report(&cfg, &layout, mode, pair)
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path))
    }
}

fn load_dataset(layout: &Layout) -> Result<Dataset> {
    require(layout.data().join("manifest.json"))?;
    Dataset::load(&layout.data())
}

fn load_embedder(layout: &Layout, mode: Mode) -> Result<Embedder<f32>> {
    let stem = layout.embedder(mode).join("embedder");
    require(checkpoint::manifest_path(&stem))?;
    Embedder::load(&stem, false)
}

fn gen_data(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let ds = Dataset::new(cfg.dataset.clone())?;
    let manifest = ds.write(&layout.data())?;
    write_run_config(&layout.data(), "gen-data", cfg)?;
    info!(
        "wrote {} images ({} train / {} test identities) to {}",
        manifest.images.len(),
        manifest.train_ids.len(),
        manifest.test_ids.len(),
        layout.data().display()
    );
    Ok(())
}

fn train_embedder(mut cfg: ExperimentConfig, layout: &Layout) -> Result<()> {
    let ds = load_dataset(layout)?;
    let mode = cfg.embedder.mode;
    cfg.embedder.model.head = match mode {
        Mode::Contrastive => Head::Contrastive,
        Mode::Ce => Head::CrossEntropy {
            num_classes: ds.ids(Split::Train).len(),
        },
    };
    let dir = layout.embedder(mode);
    write_run_config(&dir, "train-embedder", &cfg)?;
    let emb = Embedder::<f32>::new(cfg.embedder.model.clone(), true)?;
    let curve = embedder::train_embedder(&emb, &ds, &cfg.embedder.train, Some(&dir), true)?;
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        info!(
            "{} embedder: loss {:.4} at step {} → {:.4} at step {}",
            mode.name(),
            first.loss,
            first.step,
            last.loss,
            last.step
        );
    }
    Ok(())
}

fn train_swap(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let ds = load_dataset(layout)?;
    let mode = cfg.swap.embedder.unwrap_or(cfg.embedder.mode);
    let emb = load_embedder(layout, mode)?;
    let dir = layout.swap(mode);
    write_run_config(&dir, "train-swap", cfg)?;
    info!(
        "loss weights: λ_id={} λ_chg={} λ_adv={}",
        cfg.swap.weights.id, cfg.swap.weights.chg, cfg.swap.weights.adv
    );
    let mut trainer = SwapTrainer::new(
        &ds,
        &emb,
        cfg.swap.generator.clone(),
        cfg.swap.discriminator.clone(),
        cfg.swap.weights,
        cfg.swap.run.clone(),
        Some(&dir),
    )?;
    trainer.resume()?;
    let log = trainer.run()?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        info!(
            "L_id {:.4} → {:.4}, L_chg {:.5} → {:.5}",
            first.l_id, last.l_id, first.l_chg, last.l_chg
        );
    }
    Ok(())
}

fn write_report(report: &mut MetricsReport, dir: &Path, stem: &str) -> Result<()> {
    report.compute_overall()?;
    for n in &report.notes {
        info!("{n}");
    }
    report.write_json(&dir.join(format!("{stem}.json")))?;
    report.write_csv(&dir.join(format!("{stem}.csv")))?;
    info!("wrote {}", dir.join(format!("{stem}.csv")).display());
    Ok(())
}

fn evaluate_embedders(cfg: &ExperimentConfig, layout: &Layout, models: &[Mode]) -> Result<()> {
    let ds = load_dataset(layout)?;
    let embedders = models
        .iter()
        .map(|&m| load_embedder(layout, m))
        .collect::<Result<Vec<_>>>()?;
    let dir = layout.eval();
    write_run_config(&dir, "evaluate", cfg)?;
    let mut report = MetricsReport::default();
    for (&m, emb) in models.iter().zip(&embedders) {
        let ev: EmbedderEvaluation = evaluate::evaluate_embedder(emb, &ds, &cfg.eval)?;
        info!(
            "{}: AUC {:.4}, unique retrievals {:.2}",
            m.name(),
            ev.verification_auc,
            ev.mean_unique_retrievals()
        );
        report.add_model(m.name(), ev.records());
    }
    write_report(&mut report, &dir, "embedders")
}

fn evaluate_swaps(cfg: &ExperimentConfig, layout: &Layout, models: &[Mode]) -> Result<()> {
    let ds = load_dataset(layout)?;
    let mut nets = Vec::new();
    for &m in models {
        let stem = layout.swap(m).join("generator");
        require(checkpoint::manifest_path(&stem))?;
        nets.push((m, load_embedder(layout, m)?, Generator::<f32>::load(&stem, false)?));
    }
    let dir = layout.eval();
    write_run_config(&dir, "evaluate", cfg)?;
    let pairs = evaluate::swap_pairs(&ds, cfg.eval.swap_triples, cfg.eval.seed)?;
    let mut report = MetricsReport::default();
    let mut add = |name: &str, ev: smoothswap::metrics::ProbeEvaluation| {
        info!(
            "{name}: {} evaluated, exclusion rate {:.3}",
            ev.evaluated, ev.exclusion_rate
        );
        let mut recs: Vec<MetricRecord> = ev.records;
        recs.push(MetricRecord::new(
            "probe_exclusion_rate",
            smoothswap::metrics::Direction::LowerBetter,
            vec![ev.exclusion_rate],
        ));
        report.add_model(name, recs);
    };
    let Some((_, first_emb, _)) = nets.first() else {
        return Err(Error::Config("evaluate --swap needs at least one model".into()));
    };
    add(
        "bypass",
        evaluate::evaluate_swaps::<f32>(None, first_emb, &ds, &pairs, cfg.eval.chunk)?,
    );
    for (m, emb, gen) in &nets {
        add(
            m.name(),
            evaluate::evaluate_swaps(Some(gen), emb, &ds, &pairs, cfg.eval.chunk)?,
        );
    }
    write_report(&mut report, &dir, "swaps")
}

fn interp_report(cfg: &ExperimentConfig, layout: &Layout, mode: Mode, pair: usize) -> Result<()> {
    let ds = load_dataset(layout)?;
    let emb = load_embedder(layout, mode)?;
    let dir = layout.interp(mode);
    write_run_config(&dir, "interp-report", cfg)?;
    let (chain, images) = evaluate::interpolation_chain(&emb, &ds, &cfg.eval, pair)?;
    let mut w = csv::Writer::from_path(dir.join("chain.csv"))?;
    for step in &chain {
        w.serialize(step)?;
    }
    w.flush()?;
    ppm::write(&dir.join("chain.ppm"), &ppm::grid(&images, 4)?)?;
    let unique: std::collections::HashSet<_> = chain.iter().map(|c| (c.identity_id, c.instance)).collect();
    info!(
        "pair {pair}: {} unique retrievals over {} points",
        unique.len(),
        chain.len()
    );
    Ok(())
}

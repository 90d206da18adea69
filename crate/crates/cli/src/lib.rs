//! The `invrise` command line: dataset generation, training, explanation,
//! evaluation, strategy comparison, replay and the live-session service.

pub mod server;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use invrise_core::classifier::{Architecture, BlackBox, ConvScorer};
use invrise_core::dataset::{self, Dataset, DatasetSplits};
use invrise_core::harness::{self, EventLog, ExperimentConfig};
use invrise_core::interaction::{self, LoopData, LoopState, Strategy};
use invrise_core::metrics::{self, classification_metrics, ConfusionMatrix, ExplanationSummary};
use invrise_core::rng;
use invrise_core::saliency::{self, MaskSet, SaliencyMethod};
use invrise_core::{imaging, Label};

#[derive(Debug, Parser)]
#[command(name = "invrise", version, about = "Explainable anomaly classification workbench")]
pub struct Cli {
    /// Experiment config (JSON); flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config's seed(s).
    #[arg(long, global = true, env = "INVRISE_SEED")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset with splits and background textures.
    GenData(GenDataArgs),
    /// Train the built-in scorer on a dataset's training split.
    Train(TrainArgs),
    /// Saliency map and overlay for one instance.
    Explain(ExplainArgs),
    /// Dice, Jaccard and hit accuracy of InvRISE and RISE on NOK instances.
    EvalExplanations(EvalArgs),
    /// Run the interactive strategies over seeds.
    Compare(CompareArgs),
    /// Rebuild stored runs and verify their metrics.
    Replay(ReplayArgs),
    /// Start the live-session HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub ok: Option<usize>,
    #[arg(long)]
    pub no_seam: Option<usize>,
    #[arg(long)]
    pub nok: Option<usize>,
    #[arg(long)]
    pub side: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub backgrounds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Side the scorer resizes its input to.
    #[arg(long)]
    pub input_side: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub l: Option<usize>,
    #[arg(long)]
    pub p: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    pub id: String,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long)]
    pub method: Option<SaliencyMethod>,
    /// Class to explain; defaults to the predicted one.
    #[arg(long)]
    pub target: Option<String>,
    #[command(flatten)]
    pub masks: MaskArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// CSV to write; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Which split to explain: train, validation, test, interactive or all.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value = "conv-scorer")]
    pub model_name: String,
    #[command(flatten)]
    pub masks: MaskArgs,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Comma-separated strategies.
    #[arg(long, value_delimiter = ',')]
    pub strategies: Option<Vec<Strategy>>,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub interactions: Option<usize>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub masks: MaskArgs,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// An event log, or a directory whose `events/` (or itself) holds logs.
    pub log: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Start from this checkpoint instead of training an initial classifier.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub interactions: Option<usize>,
    #[arg(long)]
    pub budget: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub masks: MaskArgs,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn apply_model(config: &mut ExperimentConfig, args: &ModelArgs) {
    if let Some(v) = args.lr {
        config.train.learning_rate = v;
    }
    if let Some(v) = args.epochs {
        config.train.max_epochs = v;
    }
    if let Some(v) = args.patience {
        config.train.patience = v;
    }
    if let Some(v) = args.input_side {
        config.architecture.input_side = v;
    }
}

fn apply_masks(config: &mut ExperimentConfig, args: &MaskArgs) {
    if let Some(v) = args.k {
        config.masks.k = v;
    }
    if let Some(v) = args.l {
        config.masks.l = v;
    }
    if let Some(v) = args.p {
        config.masks.p = v;
    }
}

/// The single seed a command works with.
fn seed_of(cli: &Cli, config: &ExperimentConfig) -> u64 {
    cli.seed.unwrap_or(config.seeds[0])
}

pub fn run(cli: Cli) -> Result<()> {
    let mut config = load_config(&cli)?;
    if config.seeds.is_empty() {
        bail!("config lists no seeds");
    }
    match &cli.command {
        Command::GenData(a) => gen_data(&cli, config, a),
        Command::Train(a) => {
            apply_model(&mut config, &a.model);
            train(&cli, config, a)
        }
        Command::Explain(a) => {
            apply_masks(&mut config, &a.masks);
            explain(config, a)
        }
        Command::EvalExplanations(a) => {
            apply_masks(&mut config, &a.masks);
            eval_explanations(config, a)
        }
        Command::Compare(a) => {
            apply_model(&mut config, &a.model);
            apply_masks(&mut config, &a.masks);
            compare(&cli, config, a)
        }
        Command::Replay(a) => replay(&cli, a),
        Command::Serve(a) => {
            apply_model(&mut config, &a.model);
            apply_masks(&mut config, &a.masks);
            serve(&cli, config, a)
        }
    }
}

fn gen_data(cli: &Cli, config: ExperimentConfig, a: &GenDataArgs) -> Result<()> {
    let mut dc = config.dataset.clone();
    dc.seed = cli.seed.unwrap_or(dc.seed);
    dc.ok = a.ok.unwrap_or(dc.ok);
    dc.no_seam = a.no_seam.unwrap_or(dc.no_seam);
    dc.nok = a.nok.unwrap_or(dc.nok);
    dc.side = a.side.unwrap_or(dc.side);
    dc.channels = a.channels.unwrap_or(dc.channels);
    let instances = dataset::generate_dataset(&dc);
    let splits = dataset::split_dataset(&instances, config.splits, rng::derive(dc.seed, "split", 0))?;
    dataset::save_manifest(&a.out, &instances, Some(&splits))?;
    let backgrounds = dataset::generate_backgrounds(
        a.backgrounds.unwrap_or(config.backgrounds),
        dc.side,
        dc.channels,
        rng::derive(dc.seed, "backgrounds", 0),
    );
    dataset::save_backgrounds(&a.out, &backgrounds)?;
    let nok = instances.iter().filter(|i| i.label == Label::Nok).count();
    println!(
        "wrote {} instances ({} OK, {} NOK) and {} backgrounds to {}",
        instances.len(),
        instances.len() - nok,
        nok,
        backgrounds.len(),
        a.out.display()
    );
    Ok(())
}

/// Dataset and splits from a generated directory; unsplit manifests are
/// split with the configured ratios.
fn load_data(dir: &Path, config: &ExperimentConfig, seed: u64) -> Result<(Dataset, DatasetSplits)> {
    let (dataset, splits) = dataset::load_manifest(dir)?;
    let splits = match splits {
        Some(s) => s,
        None => dataset::split_dataset(dataset.instances(), config.splits, rng::derive(seed, "split", 0))?,
    };
    Ok((dataset, splits))
}

fn pairs<'a>(dataset: &'a Dataset, ids: &[String]) -> Result<Vec<(&'a invrise_core::Image, Label)>> {
    Ok(dataset.select(ids)?.into_iter().map(|i| (&i.image, i.label)).collect())
}

fn train(cli: &Cli, config: ExperimentConfig, a: &TrainArgs) -> Result<()> {
    let seed = seed_of(cli, &config);
    let (dataset, splits) = load_data(&a.data, &config, seed)?;
    let channels = dataset.instances().first().map_or(1, |i| i.image.channels());
    let arch = Architecture {
        channels,
        ..config.architecture
    };
    let mut scorer = ConvScorer::new(arch, rng::derive(seed, "init", 0))?;
    let mut tc = config.train.clone();
    tc.seed = rng::derive(seed, "train", 0);
    let started = Instant::now();
    let log = scorer.train(&pairs(&dataset, &splits.train)?, &pairs(&dataset, &splits.validation)?, &tc)?;
    scorer.save(&a.out)?;
    let test = pairs(&dataset, &splits.test)?;
    let summary = if test.is_empty() {
        json!(null)
    } else {
        let images: Vec<_> = test.iter().map(|(i, _)| (*i).clone()).collect();
        let predictions = scorer.predict_batch(&images)?;
        let cm = ConfusionMatrix::from_pairs(test.iter().zip(&predictions).map(|((_, l), c)| (*l, c.label())));
        serde_json::to_value(classification_metrics(&cm)?)?
    };
    println!(
        "{}",
        json!({
            "checkpoint": a.out,
            "epochs": log.epochs.len(),
            "best_epoch": log.best_epoch,
            "seconds": started.elapsed().as_secs_f64(),
            "test": summary,
        })
    );
    Ok(())
}

fn parse_label(s: &str) -> Result<Label> {
    match s.to_ascii_uppercase().as_str() {
        "OK" => Ok(Label::Ok),
        "NOK" => Ok(Label::Nok),
        _ => bail!("unknown label {s:?}; expected OK or NOK"),
    }
}

fn explain(config: ExperimentConfig, a: &ExplainArgs) -> Result<()> {
    let (dataset, _) = dataset::load_manifest(&a.data)?;
    let scorer = ConvScorer::load(&a.checkpoint)?;
    let instance = dataset.get(&a.id)?;
    let confidence = scorer.predict(&instance.image)?;
    let target = match &a.target {
        Some(t) => parse_label(t)?,
        None => confidence.label(),
    };
    let method = a.method.unwrap_or(config.saliency_method);
    let masks = MaskSet::sample(&config.masks, instance.image.side())?;
    let map = saliency::explain(method, &instance.image, &scorer, &masks, target)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let stem = format!("{}-{}", a.id, serde_json::to_value(method)?.as_str().unwrap_or("map"));
    let grid = a.out.join(format!("{stem}.sal"));
    let png = a.out.join(format!("{stem}-overlay.png"));
    saliency::save_float_grid(&map, &grid)?;
    imaging::save_png(&saliency::overlay(&instance.image, &map)?, &png)?;
    let best = map.argmax();
    let (ax, ay) = (best % map.side(), best / map.side());
    let hit = match &instance.defect_mask {
        Some(m) => json!(metrics::hit(&map, m)?),
        None => json!(null),
    };
    println!(
        "{}",
        json!({
            "id": a.id,
            "label": instance.label,
            "predicted": confidence.label(),
            "confidence": confidence.value(),
            "method": method,
            "target": target,
            "argmax": [ax, ay],
            "hit": hit,
            "undefined_pixels": map.undefined_pixels(),
            "map": grid,
            "overlay": png,
        })
    );
    Ok(())
}

fn split_ids(splits: &DatasetSplits, dataset: &Dataset, name: &str) -> Result<Vec<String>> {
    Ok(match name {
        "train" => splits.train.clone(),
        "validation" => splits.validation.clone(),
        "test" => splits.test.clone(),
        "interactive" => splits.interactive.clone(),
        "all" => dataset.instances().iter().map(|i| i.id.clone()).collect(),
        _ => bail!("unknown split {name:?}"),
    })
}

fn eval_explanations(config: ExperimentConfig, a: &EvalArgs) -> Result<()> {
    let (dataset, splits) = load_data(&a.data, &config, config.seeds[0])?;
    let scorer = ConvScorer::load(&a.checkpoint)?;
    let ids = split_ids(&splits, &dataset, &a.split)?;
    let instances = dataset.select(&ids)?;
    let side = instances.first().map(|i| i.image.side()).context("the chosen split is empty")?;
    let masks = MaskSet::sample(&config.masks, side)?;
    let mut csv = String::from(ExplanationSummary::CSV_HEADER);
    csv.push('\n');
    for method in [SaliencyMethod::InvRise, SaliencyMethod::Rise] {
        let summary = metrics::evaluate_explanations(&instances, &scorer, method, &masks)?;
        info!("{method}: {} evaluated, {} skipped", summary.evaluated, summary.skipped);
        csv.push_str(&summary.csv_row(&a.model_name));
        csv.push('\n');
    }
    match &a.out {
        Some(p) => fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn compare(cli: &Cli, mut config: ExperimentConfig, a: &CompareArgs) -> Result<()> {
    if let Some(s) = &a.seeds {
        config.seeds = s.clone();
    }
    if let Some(s) = cli.seed {
        config.seeds = vec![s];
    }
    if let Some(s) = &a.strategies {
        config.strategies = s.clone();
    }
    if let Some(b) = a.budget {
        config.iteration_budget = b;
    }
    if let Some(n) = a.interactions {
        config.interactions_per_iteration = n;
    }
    if let Some(d) = &a.data {
        config.data_dir = Some(d.clone());
    }
    if let Some(o) = &a.out {
        config.output_dir = o.clone();
    }
    let started = Instant::now();
    let comparison = harness::compare_strategies(&config)?;
    comparison.write(&config.output_dir)?;
    print!("{}", comparison.summary_csv());
    eprintln!(
        "{} runs in {:.1}s; outputs in {}",
        comparison.records.len(),
        started.elapsed().as_secs_f64(),
        config.output_dir.display()
    );
    Ok(())
}

fn event_logs(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let dir = if path.join("events").is_dir() { path.join("events") } else { path.to_path_buf() };
    let mut logs: Vec<PathBuf> = fs::read_dir(&dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    logs.sort();
    if logs.is_empty() {
        bail!("no event logs under {}", dir.display());
    }
    Ok(logs)
}

fn replay(cli: &Cli, a: &ReplayArgs) -> Result<()> {
    let mut failed = 0;
    for path in event_logs(&a.log)? {
        let outcome = EventLog::load(&path)
            .map_err(anyhow::Error::from)
            .and_then(|log| harness::replay(&log, cli.seed).map_err(anyhow::Error::from));
        match outcome {
            Ok(r) => println!(
                "verified {} ({} seed {}: {} steps, {} retrainings, final acc {})",
                path.display(),
                r.strategy,
                r.seed,
                r.steps,
                r.retrainings,
                r.final_metrics.accuracy
            ),
            Err(e) => {
                failed += 1;
                eprintln!("FAILED {}: {e:#}", path.display());
            }
        }
    }
    if failed > 0 {
        bail!("{failed} run(s) failed verification");
    }
    Ok(())
}

/// The loop state a live session starts from.
pub fn session_state(
    config: &ExperimentConfig,
    seed: u64,
    strategy: Strategy,
    data_dir: Option<&Path>,
    checkpoint: Option<&Path>,
) -> Result<LoopState> {
    let data = match data_dir {
        Some(dir) => {
            let (dataset, splits) = load_data(dir, config, seed)?;
            LoopData::new(dataset, splits, dataset::load_backgrounds(dir)?)?
        }
        None => config.prepare_data(seed)?,
    };
    let data = Arc::new(data);
    let loop_config = config.loop_config(strategy, seed);
    let classifier = match checkpoint {
        Some(p) => ConvScorer::load(p)?,
        None => interaction::initial_classifier(&loop_config, &data)?,
    };
    Ok(LoopState::new(loop_config, data, classifier)?)
}

fn serve(cli: &Cli, mut config: ExperimentConfig, a: &ServeArgs) -> Result<()> {
    let seed = seed_of(cli, &config);
    if let Some(n) = a.interactions {
        config.interactions_per_iteration = n;
    }
    if let Some(b) = a.budget {
        config.iteration_budget = b;
    }
    let strategy = a.strategy.unwrap_or(Strategy::NearCaipi);
    let runtime = tokio::runtime::Runtime::new()?;
    let listener = runtime
        .block_on(tokio::net::TcpListener::bind((a.host.as_str(), a.port)))
        .with_context(|| format!("binding {}:{}", a.host, a.port))?;
    let state = session_state(&config, seed, strategy, a.data.as_deref(), a.checkpoint.as_deref())?;
    let (session, _loop_thread) = interaction::spawn_session(state);
    let app = server::router(server::AppState {
        session,
        seed,
        config_digest: config.digest(),
        started: Instant::now(),
    });
    eprintln!("serving {strategy} session on http://{}", listener.local_addr()?);
    runtime.block_on(async {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })?;
    Ok(())
}

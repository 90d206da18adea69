//! Experiment orchestration: strategy comparison over seeds, CSV and JSON
//! outputs, and deterministic replay of stored event logs.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{Architecture, ConvScorer, TrainConfig};
use crate::dataset::{self, Dataset, DatasetConfig, SplitRatios};
use crate::error::{Error, Result};
use crate::interaction::{
    self, Event, IterationMetrics, LoopConfig, LoopData, LoopState, OracleFeedback, RefutationConfig, StopReason,
    Strategy,
};
use crate::rng;
use crate::saliency::{MaskConfig, SaliencyMethod};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Class counts, side and channels of generated datasets. Each seed
    /// renders its own dataset unless `data_dir` is set.
    pub dataset: DatasetConfig,
    pub data_dir: Option<PathBuf>,
    /// Train, validation, test and interactive fractions.
    pub splits: SplitRatios,
    pub backgrounds: usize,
    pub train: TrainConfig,
    pub architecture: Architecture,
    pub masks: MaskConfig,
    pub saliency_method: SaliencyMethod,
    pub strategies: Vec<Strategy>,
    pub interactions_per_iteration: usize,
    pub iteration_budget: usize,
    pub accuracy_threshold: Option<f64>,
    pub pool_holdout_fraction: f64,
    pub refutations: RefutationConfig,
    pub near_branch: bool,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let lc = LoopConfig::default();
        Self {
            dataset: DatasetConfig::default(),
            data_dir: None,
            splits: [0.2, 0.1, 0.18, 0.52],
            backgrounds: 8,
            train: lc.train,
            architecture: lc.architecture,
            masks: lc.masks,
            saliency_method: lc.saliency_method,
            strategies: Strategy::ALL.to_vec(),
            interactions_per_iteration: lc.interactions_per_iteration,
            iteration_budget: lc.iteration_budget,
            accuracy_threshold: lc.accuracy_threshold,
            pool_holdout_fraction: lc.pool_holdout_fraction,
            refutations: lc.refutations,
            near_branch: lc.near_branch,
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        if self.strategies.is_empty() {
            return Err(Error::invalid("at least one strategy is required"));
        }
        if let Some(dir) = &self.data_dir {
            if !dir.is_dir() {
                return Err(Error::invalid(format!("data directory {} does not exist", dir.display())));
            }
        }
        self.loop_config(self.strategies[0], self.seeds[0]).validate()
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring where outputs go.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn loop_config(&self, strategy: Strategy, seed: u64) -> LoopConfig {
        LoopConfig {
            strategy,
            interactions_per_iteration: self.interactions_per_iteration,
            iteration_budget: self.iteration_budget,
            accuracy_threshold: self.accuracy_threshold,
            pool_holdout_fraction: self.pool_holdout_fraction,
            refutations: self.refutations.clone(),
            near_branch: self.near_branch,
            saliency_method: self.saliency_method,
            masks: self.masks.clone(),
            train: self.train.clone(),
            architecture: self.architecture,
            seed,
        }
    }

    /// Dataset, splits and backgrounds for one seed.
    pub fn prepare_data(&self, seed: u64) -> Result<LoopData> {
        let split_seed = rng::derive(seed, "split", 0);
        let (dataset, backgrounds) = match &self.data_dir {
            Some(dir) => {
                let (dataset, _) = dataset::load_manifest(dir)?;
                let backgrounds = dataset::load_backgrounds(dir)?;
                (dataset, backgrounds)
            }
            None => {
                let config = DatasetConfig {
                    seed: rng::derive(self.dataset.seed, "dataset", seed),
                    ..self.dataset.clone()
                };
                let instances = dataset::generate_dataset(&config);
                let backgrounds = dataset::generate_backgrounds(
                    self.backgrounds,
                    config.side,
                    config.channels,
                    rng::derive(config.seed, "backgrounds", 0),
                );
                (Dataset::new(instances)?, backgrounds)
            }
        };
        let splits = dataset::split_dataset(dataset.instances(), self.splits, split_seed)?;
        LoopData::new(dataset, splits, backgrounds)
    }
}

/// One strategy run on one seed: the per-iteration metrics trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub strategy: Strategy,
    pub seed: u64,
    pub config_digest: String,
    pub wall_clock_secs: f64,
    /// Absent while a live run is still going.
    pub stop: Option<StopReason>,
    pub iterations: Vec<IterationMetrics>,
}

impl RunRecord {
    pub const CSV_HEADER: &'static str = "strategy,seed,iteration,acc,f1,mcc,|T|,|U|";

    pub fn csv_rows(&self) -> impl Iterator<Item = String> + '_ {
        self.iterations.iter().map(move |m| {
            format!(
                "{},{},{},{},{},{},{},{}",
                self.strategy, self.seed, m.iteration, m.accuracy, m.f1, m.mcc, m.training_size, m.pool_size
            )
        })
    }

    pub fn initial(&self) -> &IterationMetrics {
        self.iterations.first().expect("a run always has its initial evaluation")
    }

    pub fn last(&self) -> &IterationMetrics {
        self.iterations.last().expect("a run always has its initial evaluation")
    }
}

/// Everything needed to audit and replay one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    pub strategy: Strategy,
    pub seed: u64,
    pub config_digest: String,
    pub config: ExperimentConfig,
    pub stop: StopReason,
    pub metrics: Vec<IterationMetrics>,
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn file_name(strategy: Strategy, seed: u64) -> String {
        let key = serde_json::to_value(strategy).expect("strategy serializes");
        format!("{}-seed{seed}.json", key.as_str().expect("strategy is a string"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub records: Vec<RunRecord>,
    pub logs: Vec<EventLog>,
}

/// Mean initial and final metrics of one strategy over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: Strategy,
    pub runs: usize,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub final_f1: f64,
    pub final_mcc: f64,
}

impl StrategySummary {
    pub const CSV_HEADER: &'static str = "strategy,runs,initial_acc,final_acc,final_f1,final_mcc";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            self.strategy, self.runs, self.initial_accuracy, self.final_accuracy, self.final_f1, self.final_mcc
        )
    }
}

impl Comparison {
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(RunRecord::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            for row in r.csv_rows() {
                out.push_str(&row);
                out.push('\n');
            }
        }
        out
    }

    pub fn summaries(&self) -> Vec<StrategySummary> {
        let mut strategies: Vec<Strategy> = self.records.iter().map(|r| r.strategy).collect();
        strategies.dedup();
        strategies.sort();
        strategies.dedup();
        strategies
            .into_iter()
            .map(|s| {
                let runs: Vec<&RunRecord> = self.records.iter().filter(|r| r.strategy == s).collect();
                let n = runs.len() as f64;
                let mean = |f: &dyn Fn(&RunRecord) -> f64| runs.iter().map(|r| f(r)).sum::<f64>() / n;
                StrategySummary {
                    strategy: s,
                    runs: runs.len(),
                    initial_accuracy: mean(&|r| r.initial().accuracy),
                    final_accuracy: mean(&|r| r.last().accuracy),
                    final_f1: mean(&|r| r.last().f1),
                    final_mcc: mean(&|r| r.last().mcc),
                }
            })
            .collect()
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(StrategySummary::CSV_HEADER);
        out.push('\n');
        for s in self.summaries() {
            out.push_str(&s.csv_row());
            out.push('\n');
        }
        out
    }

    /// `metrics.csv`, `summary.csv`, `runs.json` and one event log per run
    /// under `events/`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let events = dir.join("events");
        fs::create_dir_all(&events).map_err(|e| Error::io(&events, e))?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("metrics.csv", self.metrics_csv())?;
        write("summary.csv", self.summary_csv())?;
        write("runs.json", serde_json::to_string_pretty(&self.records)?)?;
        for log in &self.logs {
            log.save(&events.join(EventLog::file_name(log.strategy, log.seed)))?;
        }
        Ok(())
    }
}

/// Every configured strategy on every seed, each strategy starting from
/// the same initial classifier and splits of its seed.
pub fn compare_strategies(config: &ExperimentConfig) -> Result<Comparison> {
    config.validate()?;
    let digest = config.digest();
    // Logs are independent of where they are written.
    let logged = ExperimentConfig {
        output_dir: PathBuf::new(),
        ..config.clone()
    };
    let prepared = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let data = Arc::new(config.prepare_data(seed)?);
            let lc = config.loop_config(config.strategies[0], seed);
            let initial = interaction::initial_classifier(&lc, &data)?;
            info!("seed {seed}: initial classifier trained");
            Ok((seed, data, initial))
        })
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(u64, &Arc<LoopData>, &ConvScorer, Strategy)> = prepared
        .iter()
        .flat_map(|(seed, data, initial)| config.strategies.iter().map(move |&s| (*seed, data, initial, s)))
        .collect();
    let results = jobs
        .into_par_iter()
        .map(|(seed, data, initial, strategy)| {
            let started = Instant::now();
            let outcome = interaction::run(
                config.loop_config(strategy, seed),
                Arc::clone(data),
                initial.clone(),
                &mut OracleFeedback,
            )?;
            let record = RunRecord {
                strategy,
                seed,
                config_digest: digest.clone(),
                wall_clock_secs: started.elapsed().as_secs_f64(),
                stop: Some(outcome.stop),
                iterations: outcome.metrics.clone(),
            };
            info!(
                "{strategy} seed {seed}: final acc {:.4} after {} steps",
                record.last().accuracy,
                outcome.events.len()
            );
            let log = EventLog {
                strategy,
                seed,
                config_digest: digest.clone(),
                config: logged.clone(),
                stop: outcome.stop,
                metrics: outcome.metrics,
                events: outcome.events,
            };
            Ok((record, log))
        })
        .collect::<Result<Vec<_>>>()?;
    let (records, logs) = results.into_iter().unzip();
    Ok(Comparison { records, logs })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub strategy: Strategy,
    pub seed: u64,
    pub steps: usize,
    pub retrainings: usize,
    pub final_metrics: IterationMetrics,
}

/// Rebuild a run from its config, seed and event log: retrain at the same
/// points, and require the metrics trace to match bit for bit.
/// `expected_seed`, when given, must equal the logged seed.
pub fn replay(log: &EventLog, expected_seed: Option<u64>) -> Result<ReplayReport> {
    if let Some(s) = expected_seed {
        if s != log.seed {
            return Err(Error::invalid(format!("seed mismatch: log was recorded with seed {} not {s}", log.seed)));
        }
    }
    if log.config.digest() != log.config_digest {
        return Err(Error::InvalidState("config digest does not match the logged config".into()));
    }
    let config = log.config.loop_config(log.strategy, log.seed);
    let data = Arc::new(log.config.prepare_data(log.seed)?);
    let initial = interaction::initial_classifier(&config, &data)?;
    let n = config.interactions_per_iteration;
    let mut state = LoopState::new(config, data, initial)?;
    let mut retrainings = 0;
    for event in &log.events {
        state.apply_event(event)?;
        state.check_invariants()?;
        if state.steps() % n == 0 {
            state.retrain()?;
            retrainings += 1;
        }
    }
    if state.metrics() != log.metrics.as_slice() {
        let at = state
            .metrics()
            .iter()
            .zip(&log.metrics)
            .position(|(a, b)| a != b)
            .unwrap_or(state.metrics().len().min(log.metrics.len()));
        return Err(Error::InvalidState(format!(
            "replayed metrics diverge from the log at iteration {at} ({} replayed, {} logged)",
            state.metrics().len(),
            log.metrics.len()
        )));
    }
    Ok(ReplayReport {
        strategy: log.strategy,
        seed: log.seed,
        steps: state.steps(),
        retrainings,
        final_metrics: *state.metrics().last().expect("initial evaluation"),
    })
}

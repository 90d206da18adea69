//! The interactive learning loop: query selection, feedback, refutations,
//! near hit/miss retrieval and periodic retraining, for five strategies
//! (random addition, active learning, near active learning, CAIPI and
//! Near CAIPI).

mod live;
mod refute;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use live::{spawn_session, PendingQuery, SessionHandle, SessionPhase, SessionSnapshot, SessionStatus};
pub use refute::{
    apply_transform, generate_refutations, image_digest, Refutation, RefutationConfig, Transform,
};

use crate::classifier::{Architecture, BlackBox, Confidence, ConvScorer, TrainConfig};
use crate::dataset::{Dataset, DatasetSplits, Label, LabeledInstance};
use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, Image};
use crate::metrics::{classification_metrics, ConfusionMatrix};
use crate::neighbors::{self, Codebook, Query};
use crate::rng;
use crate::saliency::{self, MaskConfig, MaskSet, SaliencyMap, SaliencyMethod};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    RandomAdd,
    ActiveLearning,
    NearAl,
    Caipi,
    NearCaipi,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::RandomAdd,
        Strategy::ActiveLearning,
        Strategy::NearAl,
        Strategy::Caipi,
        Strategy::NearCaipi,
    ];

    fn explains(self) -> bool {
        matches!(self, Strategy::Caipi | Strategy::NearCaipi)
    }

    fn retrieves_neighbors(self) -> bool {
        matches!(self, Strategy::NearAl | Strategy::NearCaipi)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::RandomAdd => "RandomAdd",
            Strategy::ActiveLearning => "AL",
            Strategy::NearAl => "NearAL",
            Strategy::Caipi => "CAIPI",
            Strategy::NearCaipi => "NearCAIPI",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "randomadd" | "random" => Ok(Strategy::RandomAdd),
            "al" | "activelearning" => Ok(Strategy::ActiveLearning),
            "nearal" => Ok(Strategy::NearAl),
            "caipi" => Ok(Strategy::Caipi),
            "nearcaipi" => Ok(Strategy::NearCaipi),
            _ => Err(Error::invalid(format!("unknown strategy {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackSource {
    Oracle,
    Human,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub prediction_correct: bool,
    pub explanation_correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrected_label: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrected_mask: Option<BinaryMask>,
    pub source: FeedbackSource,
}

impl Feedback {
    /// The label the instance enters training with.
    pub fn label(&self, predicted: Label) -> Label {
        self.corrected_label.unwrap_or(predicted)
    }

    /// Consistency against the prediction it answers. OK instances need no
    /// mask: their refutation region is the whole frame.
    pub fn validate(&self, predicted: Label, side: usize) -> Result<()> {
        match (self.prediction_correct, self.corrected_label) {
            (false, None) => return Err(Error::invalid("a rejected prediction needs a corrected label")),
            (true, Some(l)) if l != predicted => {
                return Err(Error::invalid("corrected label contradicts an accepted prediction"))
            }
            _ => {}
        }
        if let Some(m) = &self.corrected_mask {
            if m.side() != side {
                return Err(Error::invalid(format!("corrected mask side {} does not match image side {side}", m.side())));
            }
        }
        let accepted = self.prediction_correct && self.explanation_correct;
        if self.label(predicted) == Label::Nok && !accepted && self.corrected_mask.as_ref().is_none_or(|m| m.is_empty()) {
            return Err(Error::invalid("correcting a NOK explanation needs a nonempty mask"));
        }
        Ok(())
    }
}

/// The simulated expert: always corrects with the ground truth.
pub fn oracle_feedback(instance: &LabeledInstance, prediction: Confidence) -> Feedback {
    Feedback {
        prediction_correct: prediction.label() == instance.label,
        explanation_correct: false,
        corrected_label: Some(instance.label),
        corrected_mask: match instance.label {
            Label::Nok => instance.defect_mask.clone(),
            Label::Ok => None,
        },
        source: FeedbackSource::Oracle,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Selected,
    NearHit,
    NearMiss,
}

impl Role {
    fn index(self) -> u64 {
        self as u64
    }
}

/// Example-based context for a query, relative to its predicted class.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Neighbors {
    pub near_hit: Option<String>,
    pub near_miss: Option<String>,
    pub furthest_hit: Option<String>,
}

/// Everything shown to whoever gives feedback on one query.
pub struct QueryView<'a> {
    pub role: Role,
    pub instance: &'a LabeledInstance,
    pub confidence: Confidence,
    pub saliency: Option<&'a SaliencyMap>,
    pub neighbors: Neighbors,
}

pub trait FeedbackProvider {
    fn feedback(&mut self, view: &QueryView<'_>) -> Result<Feedback>;
}

pub struct OracleFeedback;

impl FeedbackProvider for OracleFeedback {
    fn feedback(&mut self, view: &QueryView<'_>) -> Result<Feedback> {
        Ok(oracle_feedback(view.instance, view.confidence))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefutationRecord {
    pub transform: Transform,
    pub label: Label,
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub role: Role,
    pub id: String,
    pub confidence: Option<f64>,
    pub predicted: Option<Label>,
    pub feedback: Option<Feedback>,
    /// Label the instance entered training with.
    pub label: Label,
    /// The region refutations were generated from, for NOK refutations.
    pub source_mask: Option<BinaryMask>,
    pub refutations: Vec<RefutationRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub step: usize,
    pub iteration: usize,
    pub queries: Vec<QueryRecord>,
    pub warnings: Vec<String>,
    pub training_size: usize,
    pub pool_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub accuracy: f64,
    pub f1: f64,
    pub mcc: f64,
    pub training_size: usize,
    pub pool_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Budget,
    Exhausted,
    AccuracyThreshold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub strategy: Strategy,
    pub interactions_per_iteration: usize,
    pub iteration_budget: usize,
    pub accuracy_threshold: Option<f64>,
    /// Fraction of the interactive split never offered as a query.
    pub pool_holdout_fraction: f64,
    pub refutations: RefutationConfig,
    /// Near CAIPI's hit/miss branch; disabling it reduces Near CAIPI to CAIPI.
    pub near_branch: bool,
    pub saliency_method: SaliencyMethod,
    pub masks: MaskConfig,
    pub train: TrainConfig,
    pub architecture: Architecture,
    pub seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::NearCaipi,
            interactions_per_iteration: 27,
            iteration_budget: 7,
            accuracy_threshold: None,
            pool_holdout_fraction: 0.0,
            refutations: RefutationConfig::default(),
            near_branch: true,
            saliency_method: SaliencyMethod::InvRise,
            masks: MaskConfig::default(),
            train: TrainConfig::default(),
            architecture: Architecture::default(),
            seed: 0,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.interactions_per_iteration == 0 {
            return Err(Error::invalid("interactions per iteration must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.pool_holdout_fraction) {
            return Err(Error::invalid("pool holdout fraction must lie in [0, 1)"));
        }
        self.train.validate()?;
        self.architecture.validate()
    }
}

/// Dataset, splits and background textures shared by a run.
#[derive(Debug)]
pub struct LoopData {
    pub dataset: Dataset,
    pub splits: DatasetSplits,
    pub backgrounds: Vec<Image>,
}

impl LoopData {
    pub fn new(dataset: Dataset, splits: DatasetSplits, backgrounds: Vec<Image>) -> Result<Self> {
        dataset.check_splits(&splits)?;
        if splits.train.is_empty() {
            return Err(Error::invalid("training split is empty"));
        }
        if splits.test.is_empty() {
            return Err(Error::invalid("test split is empty"));
        }
        Ok(Self {
            dataset,
            splits,
            backgrounds,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainItem {
    Instance { id: String, label: Label },
    Refutation { image: Image, label: Label },
}

impl TrainItem {
    pub fn label(&self) -> Label {
        match self {
            TrainItem::Instance { label, .. } | TrainItem::Refutation { label, .. } => *label,
        }
    }
}

fn seed_for(seed: u64, tag: &str, iteration: usize) -> u64 {
    rng::derive(seed, tag, iteration as u64)
}

/// A fresh scorer trained on `items` with the seeds of `iteration`.
fn train_scorer(config: &LoopConfig, data: &LoopData, items: &[TrainItem], iteration: usize) -> Result<ConvScorer> {
    let mut scorer = ConvScorer::new(config.architecture, seed_for(config.seed, "init", iteration))?;
    let train: Vec<(&Image, Label)> = items
        .iter()
        .map(|item| match item {
            TrainItem::Instance { id, label } => Ok((&data.dataset.get(id)?.image, *label)),
            TrainItem::Refutation { image, label } => Ok((image, *label)),
        })
        .collect::<Result<_>>()?;
    let validation: Vec<(&Image, Label)> = data
        .dataset
        .select(&data.splits.validation)?
        .into_iter()
        .map(|i| (&i.image, i.label))
        .collect();
    let train_config = TrainConfig {
        seed: seed_for(config.seed, "train", iteration),
        ..config.train.clone()
    };
    scorer.train(&train, &validation, &train_config)?;
    Ok(scorer)
}

fn initial_items(data: &LoopData) -> Result<Vec<TrainItem>> {
    data.splits
        .train
        .iter()
        .map(|id| {
            Ok(TrainItem::Instance {
                id: id.clone(),
                label: data.dataset.get(id)?.label,
            })
        })
        .collect()
}

/// The classifier every strategy starts from: trained on the training split
/// with the iteration-0 seeds.
pub fn initial_classifier(config: &LoopConfig, data: &LoopData) -> Result<ConvScorer> {
    config.validate()?;
    train_scorer(config, data, &initial_items(data)?, 0)
}

/// Accuracy, F1 and MCC of `classifier` on the test split.
pub fn evaluate(classifier: &dyn BlackBox, dataset: &Dataset, ids: &[String]) -> Result<crate::metrics::ClassificationMetrics> {
    let instances = dataset.select(ids)?;
    let images: Vec<Image> = instances.iter().map(|i| i.image.clone()).collect();
    let confidences = classifier.predict_batch(&images)?;
    let cm = ConfusionMatrix::from_pairs(instances.iter().zip(&confidences).map(|(i, c)| (i.label, c.label())));
    classification_metrics(&cm)
}

/// The id minimizing `max(f, 1 - f)`, ties to the smallest id.
pub fn most_uncertain<'a>(candidates: impl IntoIterator<Item = (&'a str, Confidence)>) -> Option<String> {
    let mut best: Option<(f64, &str)> = None;
    for (id, c) in candidates {
        let u = c.certainty();
        if best.is_none_or(|(b, bid)| u < b || (u == b && id < bid)) {
            best = Some((u, id));
        }
    }
    best.map(|(_, id)| id.to_string())
}

/// A query's full outcome before it is committed to the loop state.
struct Outcome {
    record: QueryRecord,
    refutations: Vec<Refutation>,
}

pub struct LoopState {
    config: LoopConfig,
    data: Arc<LoopData>,
    classifier: ConvScorer,
    version: u64,
    training: Vec<TrainItem>,
    training_ids: HashSet<String>,
    pool: BTreeSet<String>,
    holdout: Vec<String>,
    codebook: Codebook,
    cache: HashMap<String, Confidence>,
    masks: Option<MaskSet>,
    steps: usize,
    iteration: usize,
    events: Vec<Event>,
    metrics: Vec<IterationMetrics>,
    stop: Option<StopReason>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub metrics: Vec<IterationMetrics>,
    pub events: Vec<Event>,
    pub stop: StopReason,
}

impl LoopState {
    /// Start a run from an already trained classifier. The initial training
    /// set is the training split; the pool is the interactive split minus a
    /// seeded holdout.
    pub fn new(config: LoopConfig, data: Arc<LoopData>, classifier: ConvScorer) -> Result<Self> {
        config.validate()?;
        let training = initial_items(&data)?;
        let training_ids = data.splits.train.iter().cloned().collect();
        let mut interactive = data.splits.interactive.clone();
        interactive.sort_unstable();
        interactive.shuffle(&mut rng::stream(config.seed, "holdout", 0));
        let held = (config.pool_holdout_fraction * interactive.len() as f64).round() as usize;
        let holdout: Vec<String> = interactive[..held].to_vec();
        let pool: BTreeSet<String> = interactive[held..].iter().cloned().collect();
        let mut state = Self {
            config,
            data,
            classifier,
            version: 0,
            training,
            training_ids,
            pool,
            holdout,
            codebook: Codebook::default(),
            cache: HashMap::new(),
            masks: None,
            steps: 0,
            iteration: 0,
            events: Vec::new(),
            metrics: Vec::new(),
            stop: None,
        };
        state.refresh()?;
        Ok(state)
    }

    pub fn config(&self) -> &LoopConfig {
        &self.config
    }

    pub fn data(&self) -> &Arc<LoopData> {
        &self.data
    }

    pub fn classifier(&self) -> &ConvScorer {
        &self.classifier
    }

    pub fn classifier_version(&self) -> u64 {
        self.version
    }

    pub fn training(&self) -> &[TrainItem] {
        &self.training
    }

    pub fn pool(&self) -> &BTreeSet<String> {
        &self.pool
    }

    pub fn holdout(&self) -> &[String] {
        &self.holdout
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn metrics(&self) -> &[IterationMetrics] {
        &self.metrics
    }

    pub fn stop_reason(&self) -> Option<StopReason> {
        self.stop
    }

    /// Codebook, prediction cache and test metrics for the current classifier.
    fn refresh(&mut self) -> Result<()> {
        self.cache.clear();
        let dataset = &self.data.dataset;
        let pool = self
            .pool
            .iter()
            .map(|id| dataset.get(id).map(|i| (id.as_str(), &i.image, i.label)))
            .collect::<Result<Vec<_>>>()?;
        self.codebook = Codebook::build(pool, &self.classifier, self.version)?;
        let m = evaluate(&self.classifier, dataset, &self.data.splits.test)?;
        let entry = IterationMetrics {
            iteration: self.iteration,
            accuracy: m.accuracy,
            f1: m.f1,
            mcc: m.mcc,
            training_size: self.training.len(),
            pool_size: self.pool.len(),
        };
        info!(
            "{} iteration {}: acc {:.4} f1 {:.4} mcc {:.4} |T| {} |U| {}",
            self.config.strategy, entry.iteration, entry.accuracy, entry.f1, entry.mcc, entry.training_size, entry.pool_size
        );
        self.metrics.push(entry);
        Ok(())
    }

    fn confidence(&mut self, id: &str) -> Result<Confidence> {
        if let Some(c) = self.cache.get(id) {
            return Ok(*c);
        }
        let c = self.classifier.predict(&self.data.dataset.get(id)?.image)?;
        self.cache.insert(id.to_string(), c);
        Ok(c)
    }

    /// Next query: uniform for random addition, otherwise the least certain
    /// pool instance (smallest id on ties).
    pub fn select_query(&mut self) -> Result<String> {
        if self.pool.is_empty() {
            return Err(Error::Exhausted);
        }
        if self.config.strategy == Strategy::RandomAdd {
            let mut r = rng::stream(self.config.seed, "select", self.steps as u64);
            let k = r.random_range(0..self.pool.len());
            return Ok(self.pool.iter().nth(k).expect("index within pool").clone());
        }
        let ids: Vec<String> = self.pool.iter().cloned().collect();
        let scored = ids
            .into_iter()
            .map(|id| self.confidence(&id).map(|c| (id, c)))
            .collect::<Result<Vec<_>>>()?;
        most_uncertain(scored.iter().map(|(id, c)| (id.as_str(), *c))).ok_or(Error::Exhausted)
    }

    fn explain(&mut self, image: &Image, target: Label) -> Result<SaliencyMap> {
        if self.masks.as_ref().is_none_or(|m| m.side() != image.side()) {
            self.masks = Some(MaskSet::sample(&self.config.masks, image.side())?);
        }
        let masks = self.masks.as_ref().expect("masks sampled");
        saliency::explain(self.config.saliency_method, image, &self.classifier, masks, target)
    }

    fn neighbors_of(&self, id: &str, label: Label) -> Neighbors {
        if self.codebook.ensure_current(self.version).is_err() {
            return Neighbors::default();
        }
        let q = Query::Id(id);
        Neighbors {
            near_hit: neighbors::near_hit(&self.codebook, q, label).ok(),
            near_miss: neighbors::near_miss(&self.codebook, q, label).ok(),
            furthest_hit: neighbors::furthest_hit(&self.codebook, q, label).ok(),
        }
    }

    /// Predict, explain, ask for feedback and derive refutations for one instance.
    fn interact(
        &mut self,
        role: Role,
        id: &str,
        provider: &mut dyn FeedbackProvider,
        warnings: &mut Vec<String>,
    ) -> Result<Outcome> {
        let data = Arc::clone(&self.data);
        let instance = data.dataset.get(id)?;
        let confidence = self.confidence(id)?;
        let predicted = confidence.label();
        let explanation = if self.config.strategy.explains() {
            Some(self.explain(&instance.image, predicted)?)
        } else {
            None
        };
        let view = QueryView {
            role,
            instance,
            confidence,
            saliency: explanation.as_ref(),
            neighbors: self.neighbors_of(id, predicted),
        };
        let feedback = provider.feedback(&view)?;
        feedback.validate(predicted, instance.image.side())?;
        let label = feedback.label(predicted);

        let mut refutations = Vec::new();
        let mut source_mask = None;
        if self.config.strategy.explains() && self.config.refutations.count > 0 {
            let mask = match label {
                Label::Ok => None,
                Label::Nok if feedback.prediction_correct && feedback.explanation_correct => {
                    let map = explanation.as_ref().expect("explained above");
                    Some(saliency::binarize_topfraction(map, saliency::DEFAULT_TOP_FRACTION)?)
                }
                Label::Nok => feedback.corrected_mask.clone(),
            };
            let mut r = rng::stream(self.config.seed, "refute", self.steps as u64 * 3 + role.index());
            let (refs, w) = generate_refutations(
                id,
                &instance.image,
                mask.as_ref(),
                label,
                &data.backgrounds,
                &self.config.refutations,
                &mut r,
            )?;
            warnings.extend(w);
            refutations = refs;
            source_mask = mask;
        }
        Ok(Outcome {
            record: QueryRecord {
                role,
                id: id.to_string(),
                confidence: Some(confidence.value()),
                predicted: Some(predicted),
                feedback: Some(feedback),
                label,
                source_mask,
                refutations: refutations
                    .iter()
                    .map(|r| RefutationRecord {
                        transform: r.transform.clone(),
                        label: r.label,
                        digest: image_digest(&r.image),
                    })
                    .collect(),
            },
            refutations,
        })
    }

    /// An instance moved without feedback, with its pool label.
    fn passive(&mut self, role: Role, id: &str, with_prediction: bool) -> Result<Outcome> {
        let label = self.data.dataset.get(id)?.label;
        let confidence = if with_prediction { Some(self.confidence(id)?) } else { None };
        Ok(Outcome {
            record: QueryRecord {
                role,
                id: id.to_string(),
                confidence: confidence.map(|c| c.value()),
                predicted: confidence.map(|c| c.label()),
                feedback: None,
                label,
                source_mask: None,
                refutations: Vec::new(),
            },
            refutations: Vec::new(),
        })
    }

    /// One query of the configured strategy. Nothing is changed unless the
    /// whole step succeeds.
    pub fn step(&mut self, provider: &mut dyn FeedbackProvider) -> Result<&Event> {
        let id = self.select_query()?;
        let strategy = self.config.strategy;
        let mut warnings = Vec::new();
        let mut outcomes = Vec::new();
        if strategy == Strategy::RandomAdd {
            outcomes.push(self.passive(Role::Selected, &id, true)?);
        } else {
            let first = self.interact(Role::Selected, &id, provider, &mut warnings)?;
            let wrong = !first.record.feedback.as_ref().expect("interactive").prediction_correct;
            let label = first.record.label;
            outcomes.push(first);
            let branch = match strategy {
                Strategy::NearAl => true,
                Strategy::NearCaipi => self.config.near_branch,
                _ => false,
            };
            if wrong && branch && strategy.retrieves_neighbors() {
                self.codebook.ensure_current(self.version)?;
                let q = Query::Id(&id);
                let found = [
                    (Role::NearHit, neighbors::near_hit(&self.codebook, q, label)),
                    (Role::NearMiss, neighbors::near_miss(&self.codebook, q, label)),
                ];
                for (role, found) in found {
                    let neighbor = match found {
                        Ok(n) => n,
                        Err(Error::NotFound(msg)) => {
                            let msg = format!("{role:?} for {id} skipped: {msg}");
                            warn!("{msg}");
                            warnings.push(msg);
                            continue;
                        }
                        Err(e) => return Err(e),
                    };
                    let outcome = if strategy == Strategy::NearAl {
                        self.passive(role, &neighbor, false)?
                    } else {
                        self.interact(role, &neighbor, provider, &mut warnings)?
                    };
                    outcomes.push(outcome);
                }
            }
        }
        self.commit(outcomes.into_iter().map(|o| (o.record, o.refutations)).collect(), warnings)
    }

    fn commit(&mut self, outcomes: Vec<(QueryRecord, Vec<Refutation>)>, warnings: Vec<String>) -> Result<&Event> {
        for (record, _) in &outcomes {
            if !self.pool.contains(&record.id) {
                return Err(Error::InvalidState(format!("{} is not in the interactive pool", record.id)));
            }
        }
        let mut records = Vec::with_capacity(outcomes.len());
        for (record, refutations) in outcomes {
            self.pool.remove(&record.id);
            self.codebook.remove(&record.id);
            self.training_ids.insert(record.id.clone());
            self.training.push(TrainItem::Instance {
                id: record.id.clone(),
                label: record.label,
            });
            self.training.extend(refutations.into_iter().map(|r| TrainItem::Refutation {
                image: r.image,
                label: r.label,
            }));
            records.push(record);
        }
        self.events.push(Event {
            step: self.steps,
            iteration: self.iteration,
            queries: records,
            warnings,
            training_size: self.training.len(),
            pool_size: self.pool.len(),
        });
        self.steps += 1;
        Ok(self.events.last().expect("just pushed"))
    }

    /// Re-apply a logged event without consulting the classifier or a
    /// feedback source, regenerating refutations from their provenance.
    pub fn apply_event(&mut self, event: &Event) -> Result<()> {
        if event.step != self.steps {
            return Err(Error::InvalidState(format!("event for step {} applied at step {}", event.step, self.steps)));
        }
        let data = Arc::clone(&self.data);
        let mut outcomes = Vec::with_capacity(event.queries.len());
        for record in &event.queries {
            let instance = data.dataset.get(&record.id)?;
            let mut refutations = Vec::with_capacity(record.refutations.len());
            for r in &record.refutations {
                let (image, defect_mask) =
                    apply_transform(&instance.image, record.source_mask.as_ref(), &r.transform, &data.backgrounds)?;
                if image_digest(&image) != r.digest {
                    return Err(Error::InvalidState(format!(
                        "refutation of {} at step {} does not regenerate",
                        record.id, event.step
                    )));
                }
                refutations.push(Refutation {
                    image,
                    label: r.label,
                    source_id: record.id.clone(),
                    transform: r.transform.clone(),
                    defect_mask,
                });
            }
            outcomes.push((record.clone(), refutations));
        }
        self.commit(outcomes, event.warnings.clone())?;
        Ok(())
    }

    /// Retrain from scratch on the current training set and re-evaluate.
    pub fn retrain(&mut self) -> Result<IterationMetrics> {
        let next = self.iteration + 1;
        self.classifier = train_scorer(&self.config, &self.data, &self.training, next)?;
        self.iteration = next;
        self.version += 1;
        self.refresh()?;
        Ok(*self.metrics.last().expect("refresh records metrics"))
    }

    fn check_stop(&mut self) -> Option<StopReason> {
        if self.stop.is_none() {
            let latest = self.metrics.last().expect("initial metrics");
            if self.config.accuracy_threshold.is_some_and(|t| latest.accuracy >= t) {
                self.stop = Some(StopReason::AccuracyThreshold);
            } else if self.iteration >= self.config.iteration_budget {
                self.stop = Some(StopReason::Budget);
            }
        }
        self.stop
    }

    /// One step, then a retrain whenever a full iteration of steps is done.
    /// Returns the stop reason once the run is over.
    pub fn advance(&mut self, provider: &mut dyn FeedbackProvider) -> Result<Option<StopReason>> {
        if let Some(s) = self.check_stop() {
            return Ok(Some(s));
        }
        match self.step(provider) {
            Ok(_) => {}
            Err(Error::Exhausted) => {
                info!("pool exhausted after {} steps", self.steps);
                self.stop = Some(StopReason::Exhausted);
                return Ok(self.stop);
            }
            Err(e) => return Err(e),
        }
        if self.steps.is_multiple_of(self.config.interactions_per_iteration) {
            self.retrain()?;
        }
        Ok(self.check_stop())
    }

    /// T ∩ U = ∅ and every instance accounted for exactly once.
    pub fn check_invariants(&self) -> Result<()> {
        if let Some(id) = self.pool.iter().find(|id| self.training_ids.contains(*id)) {
            return Err(Error::InvalidState(format!("{id} is in both training set and pool")));
        }
        let in_training = self
            .training
            .iter()
            .filter(|t| matches!(t, TrainItem::Instance { .. }))
            .count();
        if in_training != self.training_ids.len() {
            return Err(Error::InvalidState("an instance entered training twice".into()));
        }
        let expected = self.data.splits.train.len() + self.data.splits.interactive.len();
        if in_training + self.pool.len() + self.holdout.len() != expected {
            return Err(Error::InvalidState("instances were lost or duplicated".into()));
        }
        Ok(())
    }

    pub fn into_outcome(self) -> RunOutcome {
        RunOutcome {
            metrics: self.metrics,
            events: self.events,
            stop: self.stop.unwrap_or(StopReason::Budget),
        }
    }
}

/// Run one strategy to completion from `initial`.
pub fn run(
    config: LoopConfig,
    data: Arc<LoopData>,
    initial: ConvScorer,
    provider: &mut dyn FeedbackProvider,
) -> Result<RunOutcome> {
    let mut state = LoopState::new(config, data, initial)?;
    while state.advance(provider)?.is_none() {}
    Ok(state.into_outcome())
}

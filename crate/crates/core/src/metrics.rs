//! Explanation metrics (Dice, Jaccard, hit) and classification metrics
//! (accuracy, F1, MCC) over a confusion matrix whose positive class is NOK.

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::classifier::BlackBox;
use crate::dataset::{Label, LabeledInstance};
use crate::error::{Error, Result};
use crate::imaging::BinaryMask;
use crate::saliency::{self, MaskSet, SaliencyMap, SaliencyMethod};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn record(&mut self, truth: Label, predicted: Label) {
        match (truth, predicted) {
            (Label::Nok, Label::Nok) => self.tp += 1,
            (Label::Ok, Label::Nok) => self.fp += 1,
            (Label::Ok, Label::Ok) => self.tn += 1,
            (Label::Nok, Label::Ok) => self.fn_ += 1,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (Label, Label)>) -> Self {
        let mut cm = Self::default();
        for (t, p) in pairs {
            cm.record(t, p);
        }
        cm
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub f1: f64,
    pub mcc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationScore {
    pub dice: f64,
    pub jaccard: f64,
    pub hit: bool,
}

fn overlap(a: &BinaryMask, b: &BinaryMask) -> Result<(usize, usize, usize)> {
    if a.side() != b.side() {
        return Err(Error::invalid(format!("mask sides differ: {} vs {}", a.side(), b.side())));
    }
    let inter = a.values().iter().zip(b.values()).filter(|(x, y)| **x && **y).count();
    Ok((inter, a.count(), b.count()))
}

/// `2|A∩B| / (|A| + |B|)`, 1 when both masks are empty.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (inter, na, nb) = overlap(a, b)?;
    if na + nb == 0 {
        debug!("dice of two empty masks defined as 1");
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// `|A∩B| / |A∪B|`, 1 when both masks are empty.
pub fn jaccard(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (inter, na, nb) = overlap(a, b)?;
    let union = na + nb - inter;
    if union == 0 {
        debug!("jaccard of two empty masks defined as 1");
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Whether the saliency argmax (smallest row-major index on ties) lies on the
/// expert mask.
pub fn hit(saliency: &SaliencyMap, expert: &BinaryMask) -> Result<bool> {
    if saliency.side() != expert.side() {
        return Err(Error::invalid("saliency and expert mask sizes differ"));
    }
    if expert.is_empty() {
        return Err(Error::invalid("hit is undefined for an empty expert mask"));
    }
    Ok(expert.values()[saliency.argmax()])
}

pub fn classification_metrics(cm: &ConfusionMatrix) -> Result<ClassificationMetrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::invalid("empty confusion matrix"));
    }
    let (tp, fp, tn, fn_) = (cm.tp as f64, cm.fp as f64, cm.tn as f64, cm.fn_ as f64);
    let accuracy = (tp + tn) / total as f64;
    let f1_den = 2.0 * tp + fp + fn_;
    let f1 = if f1_den == 0.0 {
        debug!("f1 denominator is zero; defined as 0");
        0.0
    } else {
        2.0 * tp / f1_den
    };
    let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    let mcc = if factors.contains(&0.0) {
        debug!("mcc denominator is zero; defined as 0");
        0.0
    } else {
        (tp * tn - fp * fn_) / factors.iter().product::<f64>().sqrt()
    };
    Ok(ClassificationMetrics { accuracy, f1, mcc })
}

/// Score one saliency map against an expert mask: top-`fraction` binarization,
/// then Dice, Jaccard and hit.
pub fn score_explanation(saliency: &SaliencyMap, expert: &BinaryMask, fraction: f64) -> Result<ExplanationScore> {
    let binary = saliency::binarize_topfraction(saliency, fraction)?;
    Ok(ExplanationScore {
        dice: dice(&binary, expert)?,
        jaccard: jaccard(&binary, expert)?,
        hit: hit(saliency, expert)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationSummary {
    pub method: SaliencyMethod,
    pub evaluated: usize,
    pub skipped: usize,
    pub dice: f64,
    pub jaccard: f64,
    pub hit_accuracy: f64,
}

impl ExplanationSummary {
    pub const CSV_HEADER: &'static str = "method,model,dice,jaccard,hit_acc";

    pub fn csv_row(&self, model: &str) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6}",
            self.method, model, self.dice, self.jaccard, self.hit_accuracy
        )
    }
}

/// Explain every NOK instance that carries an expert mask with `method`
/// (target class = NOK) and aggregate the scores. OK instances and NOK
/// instances without a mask are skipped.
pub fn evaluate_explanations(
    instances: &[&LabeledInstance],
    classifier: &dyn BlackBox,
    method: SaliencyMethod,
    mask_set: &MaskSet,
) -> Result<ExplanationSummary> {
    let mut scores = Vec::new();
    let mut skipped = 0;
    for inst in instances {
        let expert = match (&inst.label, &inst.defect_mask) {
            (Label::Nok, Some(m)) if !m.is_empty() => m,
            _ => {
                warn!("instance {} has no expert mask; skipped", inst.id);
                skipped += 1;
                continue;
            }
        };
        let map = saliency::explain(method, &inst.image, classifier, mask_set, Label::Nok)?;
        scores.push(score_explanation(&map, expert, saliency::DEFAULT_TOP_FRACTION)?);
    }
    if scores.is_empty() {
        return Err(Error::invalid("no NOK instances with expert masks to evaluate"));
    }
    let n = scores.len() as f64;
    Ok(ExplanationSummary {
        method,
        evaluated: scores.len(),
        skipped,
        dice: scores.iter().map(|s| s.dice).sum::<f64>() / n,
        jaccard: scores.iter().map(|s| s.jaccard).sum::<f64>() / n,
        hit_accuracy: scores.iter().filter(|s| s.hit).count() as f64 / n,
    })
}

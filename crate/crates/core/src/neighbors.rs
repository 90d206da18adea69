//! Embedding codebook and cosine-similarity retrieval of near hits, near
//! misses and furthest hits.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::classifier::{BlackBox, Embedding};
use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::imaging::Image;

/// `a·b / (|a| |b|)`; 0 when either vector has zero norm.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("embedding lengths differ: {} vs {}", a.len(), b.len())));
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    let na = a.0.iter().map(|x| x * x).sum::<f64>();
    let nb = b.0.iter().map(|x| x * x).sum::<f64>();
    if na == 0.0 || nb == 0.0 {
        warn!("degenerate zero-norm embedding; cosine defined as 0");
        return Ok(0.0);
    }
    // sqrt of the product keeps cosine(a, a) exactly 1
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookEntry {
    pub id: String,
    pub embedding: Embedding,
    pub label: Label,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    entries: Vec<CodebookEntry>,
    classifier_version: u64,
}

/// What to measure similarity against.
#[derive(Clone, Copy, Debug)]
pub enum Query<'a> {
    /// An entry of the codebook; it is never returned as its own neighbor.
    Id(&'a str),
    Embedding(&'a Embedding),
}

impl Codebook {
    pub fn new(entries: Vec<CodebookEntry>, classifier_version: u64) -> Result<Self> {
        let mut ids: Vec<&str> = entries.iter().map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!("duplicate codebook id {}", w[0])));
        }
        if let Some(first) = entries.first() {
            if entries.iter().any(|e| e.embedding.len() != first.embedding.len()) {
                return Err(Error::invalid("codebook embeddings differ in length"));
            }
        }
        Ok(Self {
            entries,
            classifier_version,
        })
    }

    /// Embed every pool instance with `classifier`.
    pub fn build<'a>(
        pool: impl IntoIterator<Item = (&'a str, &'a Image, Label)>,
        classifier: &dyn BlackBox,
        classifier_version: u64,
    ) -> Result<Self> {
        let entries = pool
            .into_iter()
            .map(|(id, image, label)| {
                let embedding = classifier.embed(image).map_err(|e| Error::Instance {
                    id: id.to_string(),
                    source: Box::new(e),
                })?;
                Ok(CodebookEntry {
                    id: id.to_string(),
                    embedding,
                    label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries, classifier_version)
    }

    pub fn entries(&self) -> &[CodebookEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn classifier_version(&self) -> u64 {
        self.classifier_version
    }

    pub fn get(&self, id: &str) -> Option<&CodebookEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn remove(&mut self, id: &str) -> bool {
        let before = self.entries.len();
        self.entries.retain(|e| e.id != id);
        self.entries.len() != before
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&CodebookEntry) -> bool) {
        self.entries.retain(|e| keep(e));
    }

    /// Fails when the codebook was built by an older classifier.
    pub fn ensure_current(&self, classifier_version: u64) -> Result<()> {
        if self.classifier_version != classifier_version {
            return Err(Error::InvalidState(format!(
                "codebook built for classifier version {} but version {} is current",
                self.classifier_version, classifier_version
            )));
        }
        Ok(())
    }

    fn resolve<'a>(&'a self, query: Query<'a>) -> Result<(&'a Embedding, Option<&'a str>)> {
        match query {
            Query::Id(id) => self
                .get(id)
                .map(|e| (&e.embedding, Some(id)))
                .ok_or_else(|| Error::NotFound(format!("query {id} is not in the codebook"))),
            Query::Embedding(e) => Ok((e, None)),
        }
    }

    /// Candidate with the largest (or smallest) cosine, ties to the
    /// lexicographically smallest id.
    fn select(&self, query: Query<'_>, same_label: bool, label: Label, maximize: bool) -> Result<String> {
        let (q, exclude) = self.resolve(query)?;
        let mut best: Option<(f64, &str)> = None;
        for e in &self.entries {
            if Some(e.id.as_str()) == exclude || (e.label == label) != same_label {
                continue;
            }
            let c = cosine(q, &e.embedding)?;
            let wins = match best {
                None => true,
                Some((b, id)) => {
                    let strictly = if maximize { c > b } else { c < b };
                    strictly || (c == b && e.id.as_str() < id)
                }
            };
            if wins {
                best = Some((c, &e.id));
            }
        }
        best.map(|(_, id)| id.to_string()).ok_or_else(|| {
            let kind = if same_label { "same" } else { "different" };
            Error::NotFound(format!("no {kind}-label candidate for label {label}"))
        })
    }
}

/// Most similar entry with the query's label.
pub fn near_hit(codebook: &Codebook, query: Query<'_>, label: Label) -> Result<String> {
    codebook.select(query, true, label, true)
}

/// Most similar entry with a different label.
pub fn near_miss(codebook: &Codebook, query: Query<'_>, label: Label) -> Result<String> {
    codebook.select(query, false, label, true)
}

/// Least similar entry with the query's label.
pub fn furthest_hit(codebook: &Codebook, query: Query<'_>, label: Label) -> Result<String> {
    codebook.select(query, true, label, false)
}

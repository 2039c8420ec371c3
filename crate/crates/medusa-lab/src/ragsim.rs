//! Simulated retrieval-augmented generation victim: knowledge base, exact
//! brute-force embedding index, top-k retrieval, a deterministic generation
//! stand-in, a rule-based judge, and the campaign metrics.
//!
//! Retrieval is exact (full scoring, no approximate index): at a few
//! thousand reports exactness removes a confound and the full-sort behavior
//! is easy to cross-check against an independent selection oracle.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Image, Report};
use crate::encoders::EncoderPair;
use crate::error::{Error, Result};
use crate::io::from_json;
use crate::numkit::Tensor;

/// Text knowledge base with exactly two class labels present.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    reports: Vec<Report>,
}

impl KnowledgeBase {
    pub fn new(reports: Vec<Report>) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::contract("knowledge base must be nonempty"));
        }
        let mut ids = std::collections::HashSet::new();
        for r in &reports {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::contract(format!("duplicate report id {:?}", r.id)));
            }
        }
        let labels: std::collections::HashSet<&str> =
            reports.iter().map(|r| r.label.as_str()).collect();
        if labels.len() < 2 {
            return Err(Error::contract(
                "knowledge base must contain both class labels",
            ));
        }
        Ok(KnowledgeBase { reports })
    }

    pub fn reports(&self) -> &[Report] {
        &self.reports
    }

    pub fn len(&self) -> usize {
        self.reports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reports.is_empty()
    }

    pub fn label_of(&self, id: &str) -> Option<&str> {
        self.reports
            .iter()
            .find(|r| r.id == id)
            .map(|r| r.label.as_str())
    }

    pub fn class_count(&self, label: &str) -> usize {
        self.reports.iter().filter(|r| r.label == label).count()
    }

    /// JSON-lines export: one `{id, label, text}` object per report.
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.reports {
            #[derive(Serialize)]
            struct Line<'a> {
                id: &'a str,
                label: &'a str,
                text: String,
            }
            let line = Line {
                id: &r.id,
                label: &r.label,
                text: r.text(),
            };
            out.push_str(&serde_json::to_string(&line).map_err(|e| Error::Parse {
                offset: 0,
                message: e.to_string(),
            })?);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Line {
            id: String,
            label: String,
            text: String,
        }
        let text = fs::read_to_string(path)?;
        let mut reports = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let parsed: Line = from_json(line)?;
            reports.push(Report::from_text(parsed.id, parsed.label, &parsed.text));
        }
        KnowledgeBase::new(reports)
    }
}

/// Unit-norm report embeddings aligned with report ids, under one victim.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    victim_id: String,
    ids: Vec<String>,
    rows: Vec<Tensor>,
}

impl EmbeddingIndex {
    pub fn victim_id(&self) -> &str {
        &self.victim_id
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &Tensor {
        &self.rows[i]
    }
}

/// Embeds every knowledge-base report with the victim's text encoder.
pub fn build_index(kb: &KnowledgeBase, victim: &EncoderPair) -> Result<EmbeddingIndex> {
    if kb.is_empty() {
        return Err(Error::contract("cannot index an empty knowledge base"));
    }
    let mut ids = Vec::with_capacity(kb.len());
    let mut rows = Vec::with_capacity(kb.len());
    for report in kb.reports() {
        ids.push(report.id.clone());
        rows.push(victim.encode_text(report)?);
    }
    Ok(EmbeddingIndex {
        victim_id: victim.id(),
        ids,
        rows,
    })
}

/// Ordered retrieval hits: `(report id, score)`, scores non-increasing, ties
/// broken by ascending report id.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub query_id: String,
    pub hits: Vec<(String, f64)>,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<&str> {
        self.hits.iter().map(|(id, _)| id.as_str()).collect()
    }
}

/// The `k` highest-dot-product reports for a unit-norm query embedding.
/// When `k >= N` the full sorted list is returned.
pub fn retrieve_topk(
    index: &EmbeddingIndex,
    query: &Tensor,
    k: usize,
    query_id: &str,
) -> Result<RetrievalResult> {
    if index.is_empty() {
        return Err(Error::contract("retrieval over an empty index"));
    }
    if k == 0 {
        return Err(Error::contract("retrieval needs k >= 1"));
    }
    let norm = query.norm_l2();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::contract(format!(
            "query embedding must be unit-norm, got {norm}"
        )));
    }
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(index.len());
    for i in 0..index.len() {
        scored.push((i, query.dot(index.row(i))?));
    }
    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| index.ids[a.0].cmp(&index.ids[b.0]))
    });
    scored.truncate(k.min(index.len()));
    Ok(RetrievalResult {
        query_id: query_id.to_string(),
        hits: scored
            .into_iter()
            .map(|(i, s)| (index.ids[i].clone(), s))
            .collect(),
    })
}

/// Deterministic generation stand-in: the majority label among retrieved
/// reports; a tied vote resolves to the rank-1 (highest-score) report's
/// label.
pub fn generate_stub(retrieved: &RetrievalResult, kb: &KnowledgeBase) -> Result<String> {
    if retrieved.hits.is_empty() {
        return Err(Error::contract("generation stub needs retrieved reports"));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (id, _) in &retrieved.hits {
        let label = kb
            .label_of(id)
            .ok_or_else(|| Error::contract(format!("retrieved id {id:?} not in kb")))?;
        *counts.entry(label).or_insert(0) += 1;
    }
    let max = counts.values().copied().max().unwrap_or(0);
    let winners: Vec<&str> = counts
        .iter()
        .filter(|(_, &c)| c == max)
        .map(|(&l, _)| l)
        .collect();
    if winners.len() == 1 {
        Ok(winners[0].to_string())
    } else {
        let top_id = &retrieved.hits[0].0;
        Ok(kb
            .label_of(top_id)
            .expect("rank-1 id already resolved")
            .to_string())
    }
}

/// The task's two class labels, used to validate judge inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskLabels {
    pub normal: String,
    pub target: String,
}

impl TaskLabels {
    pub fn new(normal: impl Into<String>, target: impl Into<String>) -> Result<Self> {
        let labels = TaskLabels {
            normal: normal.into(),
            target: target.into(),
        };
        if labels.normal == labels.target {
            return Err(Error::contract("task labels must differ"));
        }
        Ok(labels)
    }

    fn check(&self, label: &str) -> Result<()> {
        if label == self.normal || label == self.target {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "unknown label {label:?}; expected {:?} or {:?}",
                self.normal, self.target
            )))
        }
    }

    /// True iff the predicted label equals the attack target label.
    pub fn judge(&self, predicted: &str, target: &str) -> Result<bool> {
        self.check(predicted)?;
        self.check(target)?;
        Ok(predicted == target)
    }
}

/// Exact mean of success indicators.
pub fn asr(verdicts: &[bool]) -> Result<f64> {
    if verdicts.is_empty() {
        return Err(Error::contract("asr of an empty verdict list"));
    }
    let successes = verdicts.iter().filter(|&&v| v).count();
    Ok(successes as f64 / verdicts.len() as f64)
}

/// Mean number of target-labeled reports among each retrieval's top `k`.
pub fn avg_target_count(
    retrievals: &[RetrievalResult],
    kb: &KnowledgeBase,
    target_label: &str,
    k: usize,
) -> Result<f64> {
    if retrievals.is_empty() {
        return Err(Error::contract("avg_target_count of an empty campaign"));
    }
    let mut total = 0usize;
    for r in retrievals {
        if r.hits.len() < k {
            return Err(Error::contract(format!(
                "retrieval {} has {} hits, need k={k}",
                r.query_id,
                r.hits.len()
            )));
        }
        for (id, _) in &r.hits[..k] {
            if kb.label_of(id) == Some(target_label) {
                total += 1;
            }
        }
    }
    Ok(total as f64 / retrievals.len() as f64)
}

/// Fraction of clean images whose stub prediction matches ground truth.
pub fn system_accuracy(
    images: &[Image],
    victim: &EncoderPair,
    kb: &KnowledgeBase,
    k: usize,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::contract("system_accuracy of an empty image set"));
    }
    if k == 0 {
        return Err(Error::contract("system_accuracy needs k >= 1"));
    }
    let index = build_index(kb, victim)?;
    let mut hits = 0usize;
    for image in images {
        let e = victim.encode_image(image)?;
        let retrieved = retrieve_topk(&index, &e, k, &image.id)?;
        if generate_stub(&retrieved, kb)? == image.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / images.len() as f64)
}

/// Campaign-level metric summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Success fraction over the evaluated images.
    pub asr: f64,
    /// Mean target-labeled count among the top-j retrieved, for j = 1..=k.
    pub avg_target_count: Vec<f64>,
    /// Per-image verdicts in image-id order.
    pub verdicts: Vec<(String, bool)>,
}

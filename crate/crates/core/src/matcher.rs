//! Guidance matching: top-k (action, key element) candidates for a vulnerable function.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{strip_markers, CweLabel};
use crate::extraction::parse_extraction_output;
use crate::gateway::{GatewayError, ModelGateway, ModelRequest};
use crate::store::PatternStore;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("no usable guidance candidates")]
    EmptyGuidance,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("prediction/gold instance ids differ: {0}")]
    IdMismatch(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Remote,
    Retrieval,
    /// Retrieval over the whole store because the CWE had no patterns.
    RetrievalFallback,
    /// Gold pattern of the instance itself.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceCandidate {
    pub action: String,
    pub key_element: String,
    pub score: f64,
    pub rank: usize,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchRequest {
    pub cwe: CweLabel,
    pub vulnerable_source: String,
    pub k: usize,
    pub beam_width: usize,
}

impl MatchRequest {
    pub fn new(cwe: CweLabel, vulnerable_source: impl Into<String>) -> Self {
        MatchRequest { cwe, vulnerable_source: vulnerable_source.into(), k: 10, beam_width: 10 }
    }

    pub fn validate(&self) -> Result<(), MatchError> {
        if self.k < 1 || self.k > self.beam_width {
            return Err(MatchError::InvalidRequest(format!(
                "need 1 <= k <= beam_width, got k = {}, beam_width = {}",
                self.k, self.beam_width
            )));
        }
        Ok(())
    }
}

/// Deduplicates by (action, key element) keeping first occurrence, truncates,
/// and assigns consecutive ranks. Input must already be in preference order.
fn finalize(scored: impl IntoIterator<Item = (String, String, f64)>, k: usize, origin: Origin) -> Vec<GuidanceCandidate> {
    let mut seen = HashSet::new();
    scored
        .into_iter()
        .filter(|(a, key, _)| seen.insert((a.clone(), key.clone())))
        .take(k)
        .enumerate()
        .map(|(i, (action, key_element, score))| GuidanceCandidate { action, key_element, score, rank: i + 1, origin })
        .collect()
}

/// Queries the seq2seq matcher with beam search and parses each beam as `action:key`.
pub fn match_remote(
    req: &MatchRequest,
    gateway: &dyn ModelGateway,
    max_tokens: u32,
) -> Result<Vec<GuidanceCandidate>, MatchError> {
    req.validate()?;
    let resp = gateway.call(&ModelRequest::Seq2seq {
        cwe_id: req.cwe.id.clone(),
        cwe_name: req.cwe.name.clone(),
        code: req.vulnerable_source.clone(),
        beams: req.beam_width as u32,
        max_tokens,
    })?;
    let mut beams: Vec<(String, String, f64)> = resp
        .outputs
        .into_iter()
        .filter_map(|o| {
            let score = o.score?;
            let (action, key) = parse_extraction_output(&o.text).ok()?;
            Some((action, key, score))
        })
        .collect();
    beams.sort_by(|a, b| b.2.total_cmp(&a.2));
    let out = finalize(beams, req.k, Origin::Remote);
    if out.is_empty() {
        return Err(MatchError::EmptyGuidance);
    }
    Ok(out)
}

/// Ranks same-CWE patterns by BM25 between the vulnerable code and each
/// pattern's validation text; falls back to the whole store when the CWE has
/// no patterns.
pub fn match_retrieval(req: &MatchRequest, store: &PatternStore) -> Result<Vec<GuidanceCandidate>, MatchError> {
    req.validate()?;
    if store.is_empty() {
        return Err(MatchError::EmptyGuidance);
    }
    let same_cwe = store.query_by_cwe(&req.cwe.id);
    let (pool, origin) = if same_cwe.is_empty() {
        (store.iter().collect::<Vec<_>>(), Origin::RetrievalFallback)
    } else {
        (same_cwe, Origin::Retrieval)
    };
    let docs: Vec<(&str, &str)> = pool.iter().map(|p| (p.pattern_id.as_str(), p.validation_text.as_str())).collect();
    let ranked = bm25_rank(&strip_markers(&req.vulnerable_source), &docs);
    let by_id: HashMap<&str, _> = pool.iter().map(|p| (p.pattern_id.as_str(), *p)).collect();
    let scored = ranked.into_iter().map(|(id, score)| {
        let p = by_id[id.as_str()];
        (p.action.clone(), p.key_element.clone(), score)
    });
    Ok(finalize(scored, req.k, origin))
}

/// Splits on anything that is not alphanumeric or `_`, lowercasing each identifier.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Okapi BM25 (k1 = 1.2, b = 0.75, idf = ln(1 + (N - df + 0.5) / (df + 0.5))).
///
/// Every query token occurrence contributes, so repeated query terms weigh
/// more. Results are sorted by descending score, ties by ascending id.
pub fn bm25_rank<I: AsRef<str>, T: AsRef<str>>(query: &str, docs: &[(I, T)]) -> Vec<(String, f64)> {
    let tokenized: Vec<Vec<String>> = docs.iter().map(|(_, t)| tokenize(t.as_ref())).collect();
    let n = docs.len() as f64;
    let avgdl = if docs.is_empty() {
        0.0
    } else {
        tokenized.iter().map(Vec::len).sum::<usize>() as f64 / n
    };

    let mut df: HashMap<&str, usize> = HashMap::new();
    let mut tfs: Vec<HashMap<&str, usize>> = Vec::with_capacity(docs.len());
    for toks in &tokenized {
        let mut tf: HashMap<&str, usize> = HashMap::new();
        for t in toks {
            *tf.entry(t.as_str()).or_default() += 1;
        }
        for t in tf.keys() {
            *df.entry(t).or_default() += 1;
        }
        tfs.push(tf);
    }

    let query_tokens = tokenize(query);
    let mut scored: Vec<(String, f64)> = docs
        .iter()
        .zip(tokenized.iter().zip(&tfs))
        .map(|((id, _), (toks, tf))| {
            let dl = toks.len() as f64;
            let score = query_tokens
                .iter()
                .map(|q| {
                    let f = *tf.get(q.as_str()).unwrap_or(&0) as f64;
                    if f == 0.0 {
                        return 0.0;
                    }
                    let d = df[q.as_str()] as f64;
                    let idf = (1.0 + (n - d + 0.5) / (d + 0.5)).ln();
                    idf * f * (BM25_K1 + 1.0) / (f + BM25_K1 * (1.0 - BM25_B + BM25_B * dl / avgdl))
                })
                .sum();
            (id.as_ref().to_string(), score)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    Full,
    ActionOnly,
    KeyOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub n: usize,
    pub precision_at_k: f64,
    pub recall_at_k: f64,
    pub k: usize,
}

fn collapse_spaces(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Precision@k and Recall@k of predicted guidance against gold patterns.
///
/// `predictions` and `gold` are keyed by instance id and must cover the same
/// ids. Fields compare after collapsing whitespace runs to one space.
pub fn evaluate_matching(
    predictions: &[(String, Vec<(String, String)>)],
    gold: &[(String, (String, String))],
    mode: MatchMode,
    k: usize,
) -> Result<MatchReport, MatchError> {
    if k == 0 {
        return Err(MatchError::InvalidRequest("k must be >= 1".into()));
    }
    let gold_by_id: HashMap<&str, &(String, String)> = gold.iter().map(|(id, g)| (id.as_str(), g)).collect();
    if gold_by_id.len() != gold.len() || predictions.len() != gold.len() {
        return Err(MatchError::IdMismatch("instance counts differ or ids repeat".into()));
    }
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut seen = HashSet::new();
    for (id, candidates) in predictions {
        if !seen.insert(id.as_str()) {
            return Err(MatchError::IdMismatch(format!("duplicate prediction id {id}")));
        }
        let (ga, gk) = gold_by_id.get(id.as_str()).ok_or_else(|| MatchError::IdMismatch(id.clone()))?;
        let (ga, gk) = (collapse_spaces(ga), collapse_spaces(gk));
        let correct = candidates
            .iter()
            .take(k)
            .filter(|(a, key)| {
                let action_ok = collapse_spaces(a) == ga;
                let key_ok = collapse_spaces(key) == gk;
                match mode {
                    MatchMode::Full => action_ok && key_ok,
                    MatchMode::ActionOnly => action_ok,
                    MatchMode::KeyOnly => key_ok,
                }
            })
            .count();
        if correct > 0 {
            hits += 1;
        }
        precision_sum += correct as f64 / k as f64;
    }
    let n = predictions.len();
    let (recall, precision) = if n == 0 { (0.0, 0.0) } else { (hits as f64 / n as f64, precision_sum / n as f64) };
    Ok(MatchReport { n, precision_at_k: precision, recall_at_k: recall, k })
}

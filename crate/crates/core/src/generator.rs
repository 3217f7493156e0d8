//! Repair prompt construction, exemplar selection, sampling fan-out and
//! recovery of fixed functions from completions.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{bug_regions, fix_regions, strip_markers, VulFixPair};
use crate::gateway::{ModelGateway, ModelRequest};
use crate::lexer::normalize_code;
use crate::matcher::bm25_rank;

#[derive(Debug, Error, PartialEq)]
pub enum GenerateError {
    #[error("guided prompts need guidance")]
    MissingGuidance,
    #[error("few-shot prompts need at least one exemplar")]
    MissingExemplars,
    #[error("sampling plan: {0}")]
    InvalidPlan(String),
    #[error("malformed completion: {0}")]
    MalformedCompletion(String),
    #[error("pair {0} has malformed bug markers")]
    MalformedPair(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Guidance {
    pub action: String,
    pub key_element: String,
}

/// One worked example: marked vulnerable function and its marked fix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub pair_id: String,
    pub input: String,
    pub output: String,
}

impl Exemplar {
    pub fn from_pair(pair: &VulFixPair) -> Self {
        Exemplar { pair_id: pair.pair_id.clone(), input: pair.vulnerable_source.clone(), output: pair.fixed_source.clone() }
    }

    fn render(&self) -> String {
        format!("\nInput: {}\nOutput: {}", self.input, self.output)
    }

    /// Characters this exemplar adds to a prompt.
    pub fn rendered_len(&self) -> usize {
        self.render().chars().count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Base,
    CwePrefix,
    FewShotRandom,
    FewShotRag,
    Guided,
}

impl std::str::FromStr for PromptKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "base" => Ok(PromptKind::Base),
            "cwe_prefix" => Ok(PromptKind::CwePrefix),
            "few_shot_random" => Ok(PromptKind::FewShotRandom),
            "few_shot_rag" => Ok(PromptKind::FewShotRag),
            "guided" => Ok(PromptKind::Guided),
            other => Err(format!("unknown prompt mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PromptMode {
    Base,
    CwePrefix,
    FewShotRandom { exemplars: Vec<Exemplar> },
    FewShotRag { exemplars: Vec<Exemplar> },
    Guided { guidance: Option<Guidance> },
}

impl PromptMode {
    pub fn kind(&self) -> PromptKind {
        match self {
            PromptMode::Base => PromptKind::Base,
            PromptMode::CwePrefix => PromptKind::CwePrefix,
            PromptMode::FewShotRandom { .. } => PromptKind::FewShotRandom,
            PromptMode::FewShotRag { .. } => PromptKind::FewShotRag,
            PromptMode::Guided { .. } => PromptKind::Guided,
        }
    }
}

fn few_shot_prompt(pair: &VulFixPair, exemplars: &[Exemplar]) -> Result<String, GenerateError> {
    if exemplars.is_empty() {
        return Err(GenerateError::MissingExemplars);
    }
    let mut out = format!(
        "{}\n If you are a software engineer tasked with repairing vulnerabilities for {} {}, generate fixed code to substitute each code segment enclosed by // bug_start and // bug_end. You can delete, update, or insert code inside. Please limit your response to the fixed code of the vulnerable function exclusively. Here's an example: ",
        pair.vulnerable_source, pair.cwe.id, pair.cwe.name
    );
    for ex in exemplars {
        out.push_str(&ex.render());
    }
    Ok(out)
}

/// Builds the generation prompt for `pair` under `mode`.
pub fn build_repair_prompt(pair: &VulFixPair, mode: &PromptMode) -> Result<String, GenerateError> {
    match mode {
        PromptMode::Base => Ok(pair.vulnerable_source.clone()),
        PromptMode::CwePrefix => Ok(format!("{} {}\n{}", pair.cwe.id, pair.cwe.name, pair.vulnerable_source)),
        PromptMode::FewShotRandom { exemplars } | PromptMode::FewShotRag { exemplars } => {
            few_shot_prompt(pair, exemplars)
        }
        PromptMode::Guided { guidance } => {
            let g = guidance.as_ref().ok_or(GenerateError::MissingGuidance)?;
            Ok(format!(
                "{}\n// action: {}\n// key_element: {}",
                pair.vulnerable_source, g.action, g.key_element
            ))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExemplarStrategy {
    Random { seed: u64 },
    Bm25,
}

fn pair_seed(seed: u64, pair_id: &str) -> u64 {
    let digest = Sha256::digest(pair_id.as_bytes());
    seed ^ u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Picks same-CWE exemplars for `pair` and packs them greedily, in order,
/// until the next one would push the total past `budget_chars`.
pub fn select_exemplars<'a>(
    pair: &VulFixPair,
    pool: &'a [VulFixPair],
    strategy: ExemplarStrategy,
    budget_chars: usize,
) -> Vec<&'a VulFixPair> {
    let mut candidates: Vec<&VulFixPair> = pool
        .iter()
        .filter(|p| p.cwe.id == pair.cwe.id && p.pair_id != pair.pair_id)
        .collect();
    match strategy {
        ExemplarStrategy::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(seed, &pair.pair_id));
            candidates.shuffle(&mut rng);
        }
        ExemplarStrategy::Bm25 => {
            let docs: Vec<(String, &str)> = candidates
                .iter()
                .enumerate()
                .map(|(i, p)| (format!("{i:08}"), p.raw_vulnerable.as_str()))
                .collect();
            let ranked = bm25_rank(&pair.raw_vulnerable, &docs);
            candidates = ranked
                .iter()
                .map(|(id, _)| candidates[id.parse::<usize>().expect("index id")])
                .collect();
        }
    }

    let mut used = 0;
    let mut picked = Vec::new();
    for c in candidates {
        let size = Exemplar::from_pair(c).rendered_len();
        if used + size > budget_chars {
            break;
        }
        used += size;
        picked.push(c);
    }
    picked
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    /// Completions requested per prompt and temperature.
    pub samples_per_guidance: usize,
    pub temperature: f64,
    /// When set, every prompt is sampled once per listed temperature instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature_schedule: Option<Vec<f64>>,
    pub max_tokens: u32,
}

impl SamplingPlan {
    pub fn guided(samples_per_guidance: usize, temperature: f64) -> Self {
        SamplingPlan { samples_per_guidance, temperature, temperature_schedule: None, max_tokens: 1024 }
    }

    /// The default base-mode schedule 0.1, 0.2, ..., 1.0.
    pub fn uniform_schedule(samples_per_temperature: usize) -> Self {
        SamplingPlan {
            samples_per_guidance: samples_per_temperature,
            temperature: 1.0,
            temperature_schedule: Some((1..=10).map(|i| i as f64 / 10.0).collect()),
            max_tokens: 1024,
        }
    }

    pub fn temperatures(&self) -> Vec<f64> {
        self.temperature_schedule.clone().unwrap_or_else(|| vec![self.temperature])
    }

    /// Total completions requested for `prompt_count` prompts.
    pub fn budget(&self, prompt_count: usize) -> usize {
        prompt_count * self.temperatures().len() * self.samples_per_guidance
    }
}

/// A prompt to sample, with the guidance it carries (guided mode only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub text: String,
    pub guidance: Option<Guidance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchCandidate {
    pub pair_id: String,
    pub text: String,
    pub guidance: Option<Guidance>,
    pub temperature: f64,
    pub prompt_index: usize,
    pub sample_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub prompt_index: usize,
    pub temperature: f64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRun {
    pub pair_id: String,
    pub candidates: Vec<PatchCandidate>,
    pub requested_samples: usize,
    pub received_samples: usize,
    pub failures: Vec<SampleFailure>,
}

/// Key under which two completions count as the same patch.
pub fn dedup_key(text: &str, pair: &VulFixPair) -> String {
    match normalize_code(text, pair.language) {
        Ok(tokens) => format!("t:{}", tokens.joined()),
        Err(_) => format!("r:{text}"),
    }
}

/// Samples every prompt according to `plan` and returns unique candidates
/// in (prompt, temperature, sample) order. Requests run concurrently; the
/// gateway enforces its own in-flight limit. A failed request is recorded and
/// the others still count.
pub fn generate_patches(
    pair: &VulFixPair,
    prompts: &[PromptSpec],
    plan: &SamplingPlan,
    gateway: &dyn ModelGateway,
) -> Result<GenerationRun, GenerateError> {
    let temps = plan.temperatures();
    let budget = plan.budget(prompts.len());
    if budget == 0 {
        return Err(GenerateError::InvalidPlan("sampling budget is zero".into()));
    }
    let jobs: Vec<(usize, usize, f64)> = prompts
        .iter()
        .enumerate()
        .flat_map(|(pi, _)| temps.iter().enumerate().map(move |(ti, &t)| (pi, ti, t)))
        .collect();

    let responses: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(pi, _, temperature)| {
                let request = ModelRequest::Complete {
                    prompt: prompts[pi].text.clone(),
                    n: plan.samples_per_guidance as u32,
                    temperature,
                    max_tokens: plan.max_tokens,
                };
                s.spawn(move || gateway.call(&request))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sampling thread panicked")).collect()
    });

    let mut run = GenerationRun {
        pair_id: pair.pair_id.clone(),
        candidates: Vec::new(),
        requested_samples: budget,
        received_samples: 0,
        failures: Vec::new(),
    };
    let mut seen = HashSet::new();
    for (&(pi, ti, temperature), response) in jobs.iter().zip(responses) {
        match response {
            Ok(resp) => {
                run.received_samples += resp.outputs.len();
                for (j, out) in resp.outputs.into_iter().enumerate() {
                    if out.text.trim().is_empty() || !seen.insert(dedup_key(&out.text, pair)) {
                        continue;
                    }
                    run.candidates.push(PatchCandidate {
                        pair_id: pair.pair_id.clone(),
                        text: out.text,
                        guidance: prompts[pi].guidance.clone(),
                        temperature,
                        prompt_index: pi,
                        sample_index: (pi * temps.len() + ti) * plan.samples_per_guidance + j,
                    });
                }
            }
            Err(e) => run.failures.push(SampleFailure { prompt_index: pi, temperature, error: e.to_string() }),
        }
    }
    Ok(run)
}

/// Turns a completion into a full candidate function.
///
/// A completion with fix markers has region k spliced into bug region k of
/// the vulnerable function; one without fix markers is taken as a whole
/// function. The result never contains marker lines.
pub fn extract_fix_region(completion: &str, pair: &VulFixPair) -> Result<String, GenerateError> {
    let (_, fixes) = fix_regions(completion)
        .map_err(|_| GenerateError::MalformedCompletion("unbalanced fix markers".into()))?;
    let has_fix_markers = completion
        .split('\n')
        .any(|l| matches!(crate::corpus::marker_kind(l), Some(crate::corpus::MarkerKind::FixStart | crate::corpus::MarkerKind::FixEnd)));
    if !has_fix_markers {
        return Ok(strip_markers(completion));
    }
    let (lines, bugs) = bug_regions(&pair.vulnerable_source).map_err(|_| GenerateError::MalformedPair(pair.pair_id.clone()))?;
    if fixes.len() != bugs.len() {
        return Err(GenerateError::MalformedCompletion(format!(
            "{} fix regions for {} bug regions",
            fixes.len(),
            bugs.len()
        )));
    }
    let mut out: Vec<String> = Vec::with_capacity(lines.len());
    let mut cursor = 0;
    for (bug, fix) in bugs.iter().zip(&fixes) {
        out.extend_from_slice(&lines[cursor..bug.start]);
        out.extend(fix.lines.iter().cloned());
        cursor = bug.start + bug.lines.len();
    }
    out.extend_from_slice(&lines[cursor..]);
    Ok(out.join("\n"))
}

//! File-based pipeline stages. Each stage reads the artifacts of earlier
//! stages from the output directory and writes its own next to them, together
//! with a `<stage>.manifest.json` recording the config hash, seed and a digest
//! of every artifact written.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{Backend, ConfigError, LoadedConfig};
use crate::corpus::{load_dataset, validate_pair, CorpusError, DatasetRecord, Split, ValidationReport, VulFixPair};
use crate::diff::line_diff;
use crate::evaluation::{compare_reports, em_curve, evaluate_dataset, EvalError, EvalReport, PairResult};
use crate::extraction::{
    canonicalize_actions, extract_pattern, ActionInventory, Attempt, ExtractionConfig, ExtractionError,
    ExtractionOutcome, RepairPattern,
};
use crate::gateway::{connect, resolve, GatewayConfig, GatewayError, ModelGateway};
use crate::generator::{
    build_repair_prompt, extract_fix_region, generate_patches, select_exemplars, Exemplar, ExemplarStrategy,
    GenerateError, Guidance, PatchCandidate, PromptKind, PromptMode, PromptSpec, SampleFailure, SamplingPlan,
};
use crate::matcher::{
    evaluate_matching, match_remote, match_retrieval, GuidanceCandidate, MatchError, MatchMode, MatchReport,
    MatchRequest, Origin,
};
use crate::store::{PatternStore, StoreError};

pub const PAIRS: &str = "pairs.jsonl";
pub const VALIDATION: &str = "validation.jsonl";
pub const PATTERNS: &str = "patterns.jsonl";
pub const DISCARDS: &str = "discards.jsonl";
pub const MERGE_LOG: &str = "merge_log.jsonl";
pub const ACTIONS: &str = "actions.jsonl";
pub const GUIDANCE: &str = "guidance.jsonl";
pub const MATCH_REPORT: &str = "match_report.json";
pub const CANDIDATES: &str = "candidates.jsonl";
pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const EVAL_REPORT_JSON: &str = "eval_report.json";
pub const EVAL_REPORT_TXT: &str = "eval_report.txt";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Artifact { path: String, line: usize, message: String },
    #[error("missing artifact {0}; run the earlier stage first")]
    MissingArtifact(String),
    #[error("duplicate pair id {0}")]
    DuplicatePair(String),
    #[error("no {0} gateway configured")]
    NoGateway(&'static str),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Generate(#[from] GenerateError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    /// Artifacts were written, but some items hit hard errors.
    #[error("{stage}: {failed} item(s) failed; see {stage}.manifest.json")]
    Partial { stage: &'static str, failed: usize },
}

type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let text: String = items
        .iter()
        .map(|item| serde_json::to_string(item).expect("artifact serializes") + "\n")
        .collect();
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.is_file() {
        return Err(PipelineError::MissingArtifact(path.display().to_string()));
    }
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(idx, line)| {
            serde_json::from_str(line).map_err(|e| PipelineError::Artifact {
                path: path.display().to_string(),
                line: idx + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("artifact serializes") + "\n";
    std::fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.is_file() {
        return Err(PipelineError::MissingArtifact(path.display().to_string()));
    }
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text)
        .map_err(|e| PipelineError::Artifact { path: path.display().to_string(), line: 0, message: e.to_string() })
}

/// Runs `f` over `items` on up to `workers` threads; results keep input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.expect("every slot filled")).collect()
}

/// One line of `guidance.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceLine {
    pub pair_id: String,
    pub candidates: Vec<GuidanceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceEntry {
    pub action: String,
    pub key_element: String,
    pub score: f64,
    pub origin: Origin,
}

impl From<&GuidanceCandidate> for GuidanceEntry {
    fn from(c: &GuidanceCandidate) -> Self {
        GuidanceEntry { action: c.action.clone(), key_element: c.key_element.clone(), score: c.score, origin: c.origin }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscardLine {
    pub pair_id: String,
    pub reason: String,
    pub transcript: Vec<Attempt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRunSummary {
    pub pair_id: String,
    pub prompts: usize,
    pub requested_samples: usize,
    pub received_samples: usize,
    pub unique_candidates: usize,
    pub failures: Vec<SampleFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub mode: PromptKind,
    pub plan: SamplingPlan,
    pub endpoint: String,
    pub requested_samples: usize,
    pub received_samples: usize,
    pub candidates: usize,
    pub pairs: Vec<PairRunSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSummary {
    pub backend: Backend,
    pub k: usize,
    pub instances: usize,
    pub with_guidance: usize,
    /// Metrics against gold patterns, over instances that have one.
    pub full: Option<MatchReport>,
    pub action_only: Option<MatchReport>,
    pub key_only: Option<MatchReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractSummary {
    pub pairs: usize,
    pub accepted: usize,
    pub discarded: usize,
    pub errors: usize,
    pub inventory_version: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub pairs: usize,
    pub invalid: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

pub struct Pipeline {
    cfg: LoadedConfig,
}

impl Pipeline {
    pub fn new(cfg: LoadedConfig) -> Self {
        Pipeline { cfg }
    }

    pub fn config(&self) -> &LoadedConfig {
        &self.cfg
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    fn ensure_out_dir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.cfg.out_dir).map_err(io_err(&self.cfg.out_dir))
    }

    fn gateway(&self, name: &'static str, config: &Option<GatewayConfig>) -> Result<Box<dyn ModelGateway>> {
        let config = config.as_ref().ok_or(PipelineError::NoGateway(name))?;
        Ok(connect(config, &self.cfg.base_dir)?)
    }

    fn write_manifest(&self, stage: &str, artifacts: &[&str], extra: Value) -> Result<()> {
        let mut digests = BTreeMap::new();
        for name in artifacts {
            let path = self.artifact(name);
            let bytes = std::fs::read(&path).map_err(io_err(&path))?;
            digests.insert(name.to_string(), hex::encode(Sha256::digest(&bytes)));
        }
        let manifest = json!({
            "stage": stage,
            "config_hash": self.cfg.config.hash(),
            "seed": self.cfg.config.seed,
            "artifacts": digests,
            "summary": extra,
        });
        write_json(&self.artifact(&format!("{stage}.manifest.json")), &manifest)
    }

    /// Pairs from `pairs.jsonl`, minus invalid ones unless configured otherwise.
    pub fn usable_pairs(&self) -> Result<Vec<VulFixPair>> {
        let path = self.artifact(PAIRS);
        if !path.is_file() {
            return Err(PipelineError::MissingArtifact(path.display().to_string()));
        }
        let pairs = load_dataset(&path, None)?;
        let include = self.cfg.config.include_invalid;
        Ok(pairs.into_iter().filter(|p| include || validate_pair(p).ok).collect())
    }

    fn target_pairs(&self) -> Result<Vec<VulFixPair>> {
        let split = self.cfg.config.target_split;
        Ok(self.usable_pairs()?.into_iter().filter(|p| p.split == split).collect())
    }

    pub fn ingest(&self) -> Result<IngestSummary> {
        self.ensure_out_dir()?;
        let mut pairs = Vec::new();
        let mut seen = HashSet::new();
        for spec in &self.cfg.config.datasets {
            for pair in load_dataset(&resolve(&self.cfg.base_dir, &spec.path), spec.language)? {
                if !seen.insert(pair.pair_id.clone()) {
                    return Err(PipelineError::DuplicatePair(pair.pair_id));
                }
                pairs.push(pair);
            }
        }
        let reports: Vec<ValidationReport> = pairs.iter().map(validate_pair).collect();
        for r in reports.iter().filter(|r| !r.ok) {
            let codes: Vec<_> = r.issues.iter().map(|i| i.code.as_str()).collect();
            log::warn!("pair {} failed validation: {}", r.pair_id, codes.join(", "));
        }
        let records: Vec<DatasetRecord> = pairs.iter().map(DatasetRecord::from).collect();
        write_jsonl(&self.artifact(PAIRS), &records)?;
        write_jsonl(&self.artifact(VALIDATION), &reports)?;

        let count = |s: Split| pairs.iter().filter(|p| p.split == s).count();
        let summary = IngestSummary {
            pairs: pairs.len(),
            invalid: reports.iter().filter(|r| !r.ok).count(),
            train: count(Split::Train),
            valid: count(Split::Valid),
            test: count(Split::Test),
        };
        self.write_manifest("ingest", &[PAIRS, VALIDATION], json!(summary))?;
        Ok(summary)
    }

    pub fn extract(&self) -> Result<ExtractSummary> {
        self.ensure_out_dir()?;
        let settings = &self.cfg.config.extraction;
        let pairs = self.usable_pairs()?;
        let gateway = self.gateway("instruct", &self.cfg.config.gateways.instruct)?;
        let inventory = ActionInventory::seed();
        let config = ExtractionConfig {
            max_attempts: settings.max_attempts,
            temperature: settings.temperature,
            max_tokens: settings.max_tokens,
        };

        let outcomes = par_map(&pairs, settings.parallelism, |pair| {
            let diff = line_diff(&pair.raw_vulnerable, &pair.raw_fixed);
            extract_pattern(pair, &diff, &inventory, gateway.as_ref(), &config)
        });

        let mut accepted: Vec<RepairPattern> = Vec::new();
        let mut discards = Vec::new();
        let mut errors = Vec::new();
        for (pair, outcome) in pairs.iter().zip(outcomes) {
            match outcome {
                Ok(ExtractionOutcome::Accepted { pattern, .. }) => accepted.push(pattern),
                Ok(ExtractionOutcome::Discarded { pair_id, transcript }) => discards.push(DiscardLine {
                    pair_id,
                    reason: format!("no valid output after {} attempt(s)", transcript.len()),
                    transcript,
                }),
                Err(ExtractionError::NoChange) => discards.push(DiscardLine {
                    pair_id: pair.pair_id.clone(),
                    reason: "vulnerable and fixed functions are identical".into(),
                    transcript: Vec::new(),
                }),
                Err(e) => {
                    log::error!("extraction for {} failed: {e}", pair.pair_id);
                    errors.push(json!({ "pair_id": pair.pair_id, "error": e.to_string() }));
                }
            }
        }

        let novel: Vec<String> = accepted.iter().filter(|p| p.novel_action).map(|p| p.action.clone()).collect();
        let (inventory, merge_log) = canonicalize_actions(&novel, &inventory);
        let mut store = PatternStore::new();
        for mut pattern in accepted {
            if let Some(action) = inventory.find(&pattern.action) {
                pattern.action = action.label.clone();
            }
            let pair_id = pattern.pair_id.clone();
            if let Err(e) = store.put(pattern) {
                discards.push(DiscardLine { pair_id, reason: e.to_string(), transcript: Vec::new() });
            }
        }

        std::fs::write(self.artifact(PATTERNS), store.to_jsonl()).map_err(io_err(&self.artifact(PATTERNS)))?;
        write_jsonl(&self.artifact(DISCARDS), &discards)?;
        write_jsonl(&self.artifact(MERGE_LOG), &merge_log)?;
        std::fs::write(self.artifact(ACTIONS), inventory.to_jsonl()).map_err(io_err(&self.artifact(ACTIONS)))?;

        let summary = ExtractSummary {
            pairs: pairs.len(),
            accepted: store.len(),
            discarded: discards.len(),
            errors: errors.len(),
            inventory_version: inventory.version,
        };
        self.write_manifest(
            "extract",
            &[PATTERNS, DISCARDS, MERGE_LOG, ACTIONS],
            json!({ "counts": summary, "stats": store.stats(), "errors": errors }),
        )?;
        if !errors.is_empty() {
            return Err(PipelineError::Partial { stage: "extract", failed: errors.len() });
        }
        Ok(summary)
    }

    fn load_store(&self) -> Result<PatternStore> {
        let path = self.artifact(PATTERNS);
        if !path.is_file() {
            return Err(PipelineError::MissingArtifact(path.display().to_string()));
        }
        Ok(PatternStore::load(&path)?)
    }

    pub fn match_guidance(&self) -> Result<MatchSummary> {
        self.ensure_out_dir()?;
        let settings = &self.cfg.config.matcher;
        let usable = self.usable_pairs()?;
        let split = self.cfg.config.target_split;
        let targets: Vec<&VulFixPair> = usable.iter().filter(|p| p.split == split).collect();
        let store = self.load_store()?;
        let train_ids: HashSet<&str> =
            usable.iter().filter(|p| p.split == Split::Train).map(|p| p.pair_id.as_str()).collect();
        let train_store = store.filtered(|p| train_ids.contains(p.pair_id.as_str()));
        let remote = match settings.backend {
            Backend::Remote => Some(self.gateway("seq2seq", &self.cfg.config.gateways.seq2seq)?),
            _ => None,
        };

        let results = par_map(&targets, self.cfg.config.extraction.parallelism, |pair| {
            let req = MatchRequest {
                cwe: pair.cwe.clone(),
                vulnerable_source: pair.vulnerable_source.clone(),
                k: settings.k,
                beam_width: settings.beam_width,
            };
            match settings.backend {
                Backend::Retrieval => match_retrieval(&req, &train_store),
                Backend::Remote => match_remote(&req, remote.as_deref().expect("remote gateway"), settings.max_tokens),
                Backend::Mock => Ok(store
                    .get_by_pair(&pair.pair_id)
                    .map(|p| GuidanceCandidate {
                        action: p.action.clone(),
                        key_element: p.key_element.clone(),
                        score: 1.0,
                        rank: 1,
                        origin: Origin::Oracle,
                    })
                    .into_iter()
                    .collect()),
            }
        });

        let mut lines = Vec::new();
        let mut errors = Vec::new();
        for (pair, result) in targets.iter().zip(results) {
            let candidates = match result {
                Ok(c) => c,
                Err(MatchError::EmptyGuidance) => Vec::new(),
                Err(e) => {
                    log::error!("matching for {} failed: {e}", pair.pair_id);
                    errors.push(json!({ "pair_id": pair.pair_id, "error": e.to_string() }));
                    Vec::new()
                }
            };
            lines.push(GuidanceLine {
                pair_id: pair.pair_id.clone(),
                candidates: candidates.iter().map(GuidanceEntry::from).collect(),
            });
        }
        write_jsonl(&self.artifact(GUIDANCE), &lines)?;

        let mut predictions = Vec::new();
        let mut gold = Vec::new();
        for line in &lines {
            if let Some(g) = store.get_by_pair(&line.pair_id) {
                predictions.push((
                    line.pair_id.clone(),
                    line.candidates.iter().map(|c| (c.action.clone(), c.key_element.clone())).collect(),
                ));
                gold.push((line.pair_id.clone(), (g.action.clone(), g.key_element.clone())));
            }
        }
        let metric = |mode| -> Result<Option<MatchReport>> {
            if gold.is_empty() {
                return Ok(None);
            }
            Ok(Some(evaluate_matching(&predictions, &gold, mode, settings.k)?))
        };
        let summary = MatchSummary {
            backend: settings.backend,
            k: settings.k,
            instances: lines.len(),
            with_guidance: lines.iter().filter(|l| !l.candidates.is_empty()).count(),
            full: metric(MatchMode::Full)?,
            action_only: metric(MatchMode::ActionOnly)?,
            key_only: metric(MatchMode::KeyOnly)?,
        };
        write_json(&self.artifact(MATCH_REPORT), &summary)?;
        self.write_manifest("match", &[GUIDANCE, MATCH_REPORT], json!({ "errors": errors }))?;
        if !errors.is_empty() {
            return Err(PipelineError::Partial { stage: "match", failed: errors.len() });
        }
        Ok(summary)
    }

    fn sampling_plan(&self) -> SamplingPlan {
        let g = &self.cfg.config.generation;
        let schedule = match (g.mode, &g.temperature_schedule) {
            (_, Some(s)) => Some(s.clone()),
            (PromptKind::Guided, None) => None,
            (_, None) => SamplingPlan::uniform_schedule(g.samples).temperature_schedule,
        };
        SamplingPlan {
            samples_per_guidance: g.samples,
            temperature: g.temperature,
            temperature_schedule: schedule,
            max_tokens: g.max_tokens,
        }
    }

    fn prompts_for(
        &self,
        pair: &VulFixPair,
        pool: &[VulFixPair],
        guidance: &HashMap<String, Vec<GuidanceEntry>>,
    ) -> Result<Vec<PromptSpec>, String> {
        let g = &self.cfg.config.generation;
        let plain = |mode: PromptMode| -> Result<Vec<PromptSpec>, String> {
            let text = build_repair_prompt(pair, &mode).map_err(|e| e.to_string())?;
            Ok(vec![PromptSpec { text, guidance: None }])
        };
        let few_shot = |strategy| -> Vec<Exemplar> {
            select_exemplars(pair, pool, strategy, g.exemplar_budget_chars)
                .into_iter()
                .map(Exemplar::from_pair)
                .collect()
        };
        match g.mode {
            PromptKind::Base => plain(PromptMode::Base),
            PromptKind::CwePrefix => plain(PromptMode::CwePrefix),
            PromptKind::FewShotRandom => plain(PromptMode::FewShotRandom {
                exemplars: few_shot(ExemplarStrategy::Random { seed: self.cfg.config.seed }),
            }),
            PromptKind::FewShotRag => plain(PromptMode::FewShotRag { exemplars: few_shot(ExemplarStrategy::Bm25) }),
            PromptKind::Guided => {
                let entries = guidance.get(&pair.pair_id).map(Vec::as_slice).unwrap_or_default();
                if entries.is_empty() {
                    return Err("no guidance for this pair".into());
                }
                entries
                    .iter()
                    .take(self.cfg.config.matcher.k)
                    .map(|e| {
                        let guidance = Guidance { action: e.action.clone(), key_element: e.key_element.clone() };
                        let mode = PromptMode::Guided { guidance: Some(guidance.clone()) };
                        let text = build_repair_prompt(pair, &mode).map_err(|e| e.to_string())?;
                        Ok(PromptSpec { text, guidance: Some(guidance) })
                    })
                    .collect()
            }
        }
    }

    pub fn generate(&self) -> Result<RunManifest> {
        self.ensure_out_dir()?;
        let usable = self.usable_pairs()?;
        let split = self.cfg.config.target_split;
        let pool: Vec<VulFixPair> = usable.iter().filter(|p| p.split == Split::Train).cloned().collect();
        let targets: Vec<&VulFixPair> = usable.iter().filter(|p| p.split == split).collect();
        let guidance: HashMap<String, Vec<GuidanceEntry>> = if self.cfg.config.generation.mode == PromptKind::Guided {
            read_jsonl::<GuidanceLine>(&self.artifact(GUIDANCE))?
                .into_iter()
                .map(|l| (l.pair_id, l.candidates))
                .collect()
        } else {
            HashMap::new()
        };
        let gw_config = self.cfg.config.gateways.complete.clone();
        let gateway = self.gateway("complete", &gw_config)?;
        let plan = self.sampling_plan();

        let mut candidates: Vec<PatchCandidate> = Vec::new();
        let mut summaries = Vec::new();
        let mut hard_failures = 0;
        for pair in targets {
            let prompts = match self.prompts_for(pair, &pool, &guidance) {
                Ok(p) => p,
                Err(reason) => {
                    log::warn!("skipping {}: {reason}", pair.pair_id);
                    summaries.push(PairRunSummary {
                        pair_id: pair.pair_id.clone(),
                        prompts: 0,
                        requested_samples: 0,
                        received_samples: 0,
                        unique_candidates: 0,
                        failures: Vec::new(),
                        skipped: Some(reason),
                    });
                    continue;
                }
            };
            let run = generate_patches(pair, &prompts, &plan, gateway.as_ref())?;
            hard_failures += run.failures.len();
            summaries.push(PairRunSummary {
                pair_id: pair.pair_id.clone(),
                prompts: prompts.len(),
                requested_samples: run.requested_samples,
                received_samples: run.received_samples,
                unique_candidates: run.candidates.len(),
                failures: run.failures,
                skipped: None,
            });
            candidates.extend(run.candidates);
        }

        write_jsonl(&self.artifact(CANDIDATES), &candidates)?;
        let manifest = RunManifest {
            config_hash: self.cfg.config.hash(),
            seed: self.cfg.config.seed,
            mode: self.cfg.config.generation.mode,
            plan,
            endpoint: gw_config.map(|g| g.endpoint).unwrap_or_default(),
            requested_samples: summaries.iter().map(|s| s.requested_samples).sum(),
            received_samples: summaries.iter().map(|s| s.received_samples).sum(),
            candidates: candidates.len(),
            pairs: summaries,
        };
        write_json(&self.artifact(RUN_MANIFEST), &manifest)?;
        if hard_failures > 0 {
            return Err(PipelineError::Partial { stage: "generate", failed: hard_failures });
        }
        Ok(manifest)
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        self.ensure_out_dir()?;
        let targets = self.target_pairs()?;
        let candidates: Vec<PatchCandidate> = read_jsonl(&self.artifact(CANDIDATES))?;
        let mut by_pair: HashMap<&str, Vec<Option<String>>> = HashMap::new();
        let pair_by_id: HashMap<&str, &VulFixPair> = targets.iter().map(|p| (p.pair_id.as_str(), p)).collect();
        for c in &candidates {
            let Some(pair) = pair_by_id.get(c.pair_id.as_str()) else {
                log::warn!("ignoring candidate for pair {} outside the evaluation split", c.pair_id);
                continue;
            };
            by_pair.entry(c.pair_id.as_str()).or_default().push(extract_fix_region(&c.text, pair).ok());
        }
        let results: Vec<PairResult> = targets
            .iter()
            .map(|p| PairResult {
                pair_id: p.pair_id.clone(),
                candidates: by_pair.remove(p.pair_id.as_str()).unwrap_or_default(),
            })
            .collect();
        let settings = &self.cfg.config.evaluation;
        let mut report = evaluate_dataset(&results, &targets, settings.k)?;
        if !settings.curve.is_empty() {
            report.em_at_k_curve = Some(em_curve(&results, &targets, &settings.curve)?);
        }
        write_json(&self.artifact(EVAL_REPORT_JSON), &report)?;
        std::fs::write(self.artifact(EVAL_REPORT_TXT), report.to_table())
            .map_err(io_err(&self.artifact(EVAL_REPORT_TXT)))?;
        self.write_manifest(
            "evaluate",
            &[EVAL_REPORT_JSON, EVAL_REPORT_TXT],
            json!({ "mode": self.cfg.config.generation.mode, "candidates": candidates.len() }),
        )?;
        Ok(report)
    }
}

/// Side-by-side table of two `eval_report.json` files.
pub fn report(current: &Path, baseline: &Path) -> Result<String> {
    let current: EvalReport = read_json(current)?;
    let baseline: EvalReport = read_json(baseline)?;
    Ok(compare_reports(&current, &baseline))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_keeps_order() {
        let items: Vec<usize> = (0..50).collect();
        let out = par_map(&items, 7, |x| x * 2);
        assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert!(par_map(&Vec::<u8>::new(), 3, |x| *x).is_empty());
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        let lines = vec![GuidanceLine { pair_id: "a".into(), candidates: vec![] }];
        write_jsonl(&path, &lines).unwrap();
        assert_eq!(read_jsonl::<GuidanceLine>(&path).unwrap(), lines);
        std::fs::write(&path, "{\"pair_id\":\"a\",\"candidates\":[]}\n\nnot json\n").unwrap();
        assert!(matches!(read_jsonl::<GuidanceLine>(&path), Err(PipelineError::Artifact { line: 3, .. })));
        assert!(matches!(
            read_jsonl::<GuidanceLine>(&dir.path().join("missing.jsonl")),
            Err(PipelineError::MissingArtifact(_))
        ));
    }
}

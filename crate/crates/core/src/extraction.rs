//! Distilling one (action, key element) repair pattern from each fix pair.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CweLabel, VulFixPair};
use crate::diff::{render_unified, LineDiff};
use crate::gateway::{GatewayError, ModelGateway, ModelRequest};

pub const REMOVE_BUGGY_STATEMENT: &str = "Remove Buggy Statement";

/// The initial action inventory: label and one-line definition.
pub const SEED_ACTIONS: [(&str, &str); 18] = [
    ("Insert Variable", "Introduce a new variable declaration"),
    ("Insert Memset", "Zero or initialize a memory region before use"),
    ("Insert Release Resource", "Add a call that frees or releases a resource"),
    ("Insert Cast Statement", "Add an explicit type cast"),
    ("Insert Cast Checker", "Guard a cast with a type or range check"),
    ("Insert Range Checker", "Add a bounds or length check"),
    ("Insert Null Pointer Checker", "Add a null check before a dereference"),
    ("Insert Missed Statement", "Add a statement that the buggy code omitted"),
    ("Mutate Control Statement", "Change a loop, branch or jump statement"),
    ("Insert Conditional Expression", "Add a guarding condition"),
    ("Mutate Conditional Expression", "Change an existing condition"),
    ("Insert Method Invocation Expression", "Add a call to a function or method"),
    ("Mutate Literal Expression", "Change a literal constant"),
    ("Mutate Method Invocation Expression", "Change the callee or arguments of a call"),
    ("Mutate Return Statement", "Change what or when a function returns"),
    ("Mutate Variable", "Change a variable's type, name or value"),
    ("Move Statement", "Move an existing statement to another position"),
    ("Remove Buggy Statement", "Delete a statement that causes the vulnerability"),
];

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("diff is empty; nothing to extract")]
    NoChange,
    #[error("malformed extraction output: {0}")]
    MalformedOutput(String),
    #[error("max_attempts must be at least 1")]
    NoAttempts,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Lowercase, whitespace collapsed to single spaces, trimmed.
pub fn normalize_label(label: &str) -> String {
    label.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn token_set(label: &str) -> BTreeSet<String> {
    normalize_label(label).split(' ').filter(|t| !t.is_empty()).map(String::from).collect()
}

pub fn is_remove_action(label: &str) -> bool {
    normalize_label(label) == normalize_label(REMOVE_BUGGY_STATEMENT)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairAction {
    pub label: String,
    pub seed: bool,
    pub definition: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionInventory {
    pub actions: Vec<RepairAction>,
    pub version: u64,
}

impl Default for ActionInventory {
    fn default() -> Self {
        Self::seed()
    }
}

impl ActionInventory {
    pub fn seed() -> Self {
        ActionInventory {
            actions: SEED_ACTIONS
                .iter()
                .map(|(label, def)| RepairAction { label: label.to_string(), seed: true, definition: def.to_string() })
                .collect(),
            version: 1,
        }
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.actions.iter().map(|a| a.label.as_str())
    }

    /// Canonical label equal to `label` after normalization, if any.
    pub fn find(&self, label: &str) -> Option<&RepairAction> {
        let norm = normalize_label(label);
        self.actions.iter().find(|a| normalize_label(&a.label) == norm)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.find(label).is_some()
    }

    /// Serializes as JSONL, one action per line.
    pub fn to_jsonl(&self) -> String {
        self.actions
            .iter()
            .map(|a| serde_json::to_string(a).expect("action serializes") + "\n")
            .collect()
    }

    /// Parses JSONL; rejects duplicate canonical labels.
    pub fn from_jsonl(text: &str, version: u64) -> Result<Self, String> {
        let mut inv = ActionInventory { actions: Vec::new(), version };
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let action: RepairAction = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
            if action.label.trim().is_empty() {
                return Err(format!("line {}: empty label", i + 1));
            }
            if inv.contains(&action.label) {
                return Err(format!("line {}: duplicate action {:?}", i + 1, action.label));
            }
            inv.actions.push(action);
        }
        Ok(inv)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceSide {
    Added,
    Deleted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairPattern {
    pub pattern_id: String,
    pub pair_id: String,
    pub cwe: CweLabel,
    pub action: String,
    pub key_element: String,
    pub source_side: SourceSide,
    /// Newline-joined added (or deleted) lines the key element was validated against.
    pub validation_text: String,
    /// The action label was not in the inventory when extracted.
    #[serde(default)]
    pub novel_action: bool,
}

impl RepairPattern {
    pub fn id_for(pair_id: &str) -> String {
        format!("pat:{pair_id}")
    }
}

/// Joins action labels the way the extraction prompt lists them.
fn render_label_list<'a>(labels: impl Iterator<Item = &'a str>) -> String {
    let quoted: Vec<String> = labels
        .map(|l| if l.contains('\'') && !l.contains('"') { format!("\"{l}\"") } else { format!("'{}'", l.replace('\'', "\\'")) })
        .collect();
    format!("[{}]", quoted.join(", "))
}

/// Builds the extraction instruction for one pair. Output is byte-stable.
pub fn build_extraction_prompt(
    pair: &VulFixPair,
    diff: &LineDiff,
    inventory: &ActionInventory,
) -> Result<String, ExtractionError> {
    if diff.is_empty() {
        return Err(ExtractionError::NoChange);
    }
    let rendered = render_unified(diff, 3);
    let diff_text = rendered.strip_suffix('\n').unwrap_or(&rendered);
    let cve_desc = pair.cve_description.as_deref().unwrap_or("");
    let actions = render_label_list(inventory.labels());
    Ok(format!(
        "{diff_text}\n\
{cve_desc}\n\
You are a security vulnerability repair expert reviewing the patch commit for {cwe} {cwe_name}.\n\
Analyze the patch diff and extract ONE security repair pattern.\n\
\n\
Step 1 (Select Action): choose ONE action from: {actions} that best describes the syntactic edit operator embodying the core security repair principle of this patch; if none fits, create a new action label in the same style.\n\
\n\
Step 2 (Extract Key Element): given the selected action, choose ONE key element from the added lines (\"+\" lines) that semantically instantiates the action (for Remove Buggy Statement, choose from the deleted lines (\"-\" lines) instead).\n\
- It MUST be copied verbatim from the added code and be a short contiguous snippet.\n\
- Pick the smallest self-contained fragment that best captures the security mechanism/constraint introduced by the fix; e.g., a guard predicate or a security-critical call.\n\
- Avoid low-signal noise, e.g., large blocks, logging, comments, and temporary variables, and favor security-relevant calls/checks/types over incidental implementation details.\n\
\n\
Output (STRICT): output EXACTLY ONE line in the form: action:key_element (no extra text).\n\
\n\
Example output: {{Insert Release Resource:delete}}\n",
        cwe = pair.cwe.id,
        cwe_name = pair.cwe.name,
    ))
}

/// Formats a pattern the way the model is asked to answer.
pub fn format_extraction_output(action: &str, key_element: &str) -> String {
    format!("{action}:{key_element}")
}

/// Parses `action:key_element`, splitting on the first colon.
pub fn parse_extraction_output(text: &str) -> Result<(String, String), ExtractionError> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let line = lines
        .next()
        .ok_or_else(|| ExtractionError::MalformedOutput("empty output".into()))?;
    if lines.next().is_some() {
        return Err(ExtractionError::MalformedOutput("more than one non-empty line".into()));
    }
    let body = line
        .strip_prefix('{')
        .and_then(|l| l.strip_suffix('}'))
        .unwrap_or(line);
    let (action, key) = body
        .split_once(':')
        .ok_or_else(|| ExtractionError::MalformedOutput(format!("no ':' in {line:?}")))?;
    let (action, key) = (action.trim(), key.trim());
    if action.is_empty() || key.is_empty() {
        return Err(ExtractionError::MalformedOutput(format!("empty action or key element in {line:?}")));
    }
    Ok((action.to_string(), key.to_string()))
}

/// Which side of the diff a key element for `action` must come from.
pub fn source_side_for(action: &str) -> SourceSide {
    if is_remove_action(action) {
        SourceSide::Deleted
    } else {
        SourceSide::Added
    }
}

/// True iff `key_element` is a non-empty contiguous substring of the
/// newline-joined added lines (deleted lines for Remove Buggy Statement).
pub fn validate_key_element(action: &str, key_element: &str, diff: &LineDiff) -> bool {
    let text = match source_side_for(action) {
        SourceSide::Added => diff.added_text(),
        SourceSide::Deleted => diff.deleted_text(),
    };
    !key_element.is_empty() && text.contains(key_element)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractionConfig {
    pub max_attempts: usize,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig { max_attempts: 3, temperature: 0.0, max_tokens: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub attempt: usize,
    /// Raw model output, absent when the call itself failed.
    pub output: Option<String>,
    /// Why the attempt was rejected; absent for the accepted attempt.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ExtractionOutcome {
    Accepted { pattern: RepairPattern, transcript: Vec<Attempt> },
    Discarded { pair_id: String, transcript: Vec<Attempt> },
}

impl ExtractionOutcome {
    pub fn transcript(&self) -> &[Attempt] {
        match self {
            ExtractionOutcome::Accepted { transcript, .. } | ExtractionOutcome::Discarded { transcript, .. } => transcript,
        }
    }

    pub fn pattern(&self) -> Option<&RepairPattern> {
        match self {
            ExtractionOutcome::Accepted { pattern, .. } => Some(pattern),
            ExtractionOutcome::Discarded { .. } => None,
        }
    }
}

/// Prompt, call, parse and validate, up to `config.max_attempts` times.
///
/// Novel action labels are accepted (flagged on the pattern) as long as the
/// key element validates. If every attempt failed and the last failure was a
/// transport error, that error is returned instead of a discard.
pub fn extract_pattern(
    pair: &VulFixPair,
    diff: &LineDiff,
    inventory: &ActionInventory,
    gateway: &dyn ModelGateway,
    config: &ExtractionConfig,
) -> Result<ExtractionOutcome, ExtractionError> {
    if config.max_attempts == 0 {
        return Err(ExtractionError::NoAttempts);
    }
    let prompt = build_extraction_prompt(pair, diff, inventory)?;
    let request = ModelRequest::Instruct {
        prompt,
        temperature: config.temperature,
        max_tokens: config.max_tokens,
    };

    let mut transcript = Vec::new();
    let mut last_transport: Option<GatewayError> = None;
    for attempt in 1..=config.max_attempts {
        let output = match gateway.call(&request) {
            Ok(resp) => {
                last_transport = None;
                resp.outputs.into_iter().next().map(|o| o.text).unwrap_or_default()
            }
            Err(e) => {
                transcript.push(Attempt { attempt, output: None, failure: Some(format!("gateway: {e}")) });
                last_transport = Some(e);
                continue;
            }
        };
        let (action, key_element) = match parse_extraction_output(&output) {
            Ok(parsed) => parsed,
            Err(e) => {
                transcript.push(Attempt { attempt, output: Some(output), failure: Some(e.to_string()) });
                continue;
            }
        };
        if !validate_key_element(&action, &key_element, diff) {
            transcript.push(Attempt {
                attempt,
                output: Some(output),
                failure: Some(format!("key element {key_element:?} is not a substring of the changed lines")),
            });
            continue;
        }

        let canonical = inventory.find(&action);
        let side = source_side_for(&action);
        let validation_text = match side {
            SourceSide::Added => diff.added_text(),
            SourceSide::Deleted => diff.deleted_text(),
        };
        transcript.push(Attempt { attempt, output: Some(output), failure: None });
        let pattern = RepairPattern {
            pattern_id: RepairPattern::id_for(&pair.pair_id),
            pair_id: pair.pair_id.clone(),
            cwe: pair.cwe.clone(),
            action: canonical.map_or(action, |a| a.label.clone()),
            key_element,
            source_side: side,
            validation_text,
            novel_action: canonical.is_none(),
        };
        return Ok(ExtractionOutcome::Accepted { pattern, transcript });
    }

    if let Some(e) = last_transport {
        return Err(e.into());
    }
    Ok(ExtractionOutcome::Discarded { pair_id: pair.pair_id.clone(), transcript })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MergeKind {
    Auto,
    Review,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeLogEntry {
    pub kind: MergeKind,
    pub members: Vec<String>,
    pub canonical: Option<String>,
}

/// Folds novel action labels into the inventory.
///
/// Labels equal after normalization to an inventory action merge into it.
/// Remaining labels group by normalized form; a group whose token set equals
/// that of an existing action or of another group is ambiguous (same words,
/// different order) and goes to review. Unambiguous groups become new
/// non-seed actions. The version increments iff an action was added.
pub fn canonicalize_actions(
    novel_labels: &[String],
    inventory: &ActionInventory,
) -> (ActionInventory, Vec<MergeLogEntry>) {
    let mut next = inventory.clone();
    let mut log = Vec::new();

    // normalized form -> original spellings, first-seen order
    let mut merged_into: Vec<(String, Vec<String>)> = Vec::new();
    let mut pending: Vec<(String, Vec<String>)> = Vec::new();
    for label in novel_labels {
        let norm = normalize_label(label);
        if norm.is_empty() {
            continue;
        }
        if let Some(action) = inventory.find(label) {
            push_member(&mut merged_into, action.label.clone(), label);
        } else {
            push_member(&mut pending, norm, label);
        }
    }

    for (canonical, members) in merged_into {
        if members.iter().any(|m| *m != canonical) {
            log.push(MergeLogEntry { kind: MergeKind::Auto, members, canonical: Some(canonical) });
        }
    }

    let mut by_tokens: HashMap<BTreeSet<String>, Vec<usize>> = HashMap::new();
    for (idx, (norm, _)) in pending.iter().enumerate() {
        by_tokens.entry(token_set(norm)).or_default().push(idx);
    }
    let existing_tokens: HashMap<BTreeSet<String>, &str> =
        inventory.actions.iter().map(|a| (token_set(&a.label), a.label.as_str())).collect();

    let mut reviewed = vec![false; pending.len()];
    for (idx, (norm, members)) in pending.iter().enumerate() {
        if reviewed[idx] {
            continue;
        }
        let tokens = token_set(norm);
        let siblings = &by_tokens[&tokens];
        let clash = existing_tokens.get(&tokens);
        if clash.is_none() && siblings.len() == 1 {
            let label = members[0].split_whitespace().collect::<Vec<_>>().join(" ");
            if members.len() > 1 {
                log.push(MergeLogEntry { kind: MergeKind::Auto, members: members.clone(), canonical: Some(label.clone()) });
            }
            next.actions.push(RepairAction {
                label,
                seed: false,
                definition: "Proposed during extraction; pending definition".into(),
            });
            continue;
        }
        let mut group: Vec<String> = Vec::new();
        for &s in siblings {
            reviewed[s] = true;
            group.extend(pending[s].1.iter().cloned());
        }
        if let Some(existing) = clash {
            group.push(existing.to_string());
        }
        log.push(MergeLogEntry { kind: MergeKind::Review, members: group, canonical: None });
    }

    if next.actions.len() != inventory.actions.len() {
        next.version = inventory.version + 1;
    }
    (next, log)
}

fn push_member(groups: &mut Vec<(String, Vec<String>)>, key: String, label: &str) {
    match groups.iter_mut().find(|(k, _)| *k == key) {
        Some((_, members)) => members.push(label.to_string()),
        None => groups.push((key, vec![label.to_string()])),
    }
}

//! Vulnerability-fix pairs: dataset ingestion, region markers and validation.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{line_diff, split_lines};

pub const BUG_START: &str = "//bug_start";
pub const BUG_END: &str = "//bug_end";
pub const FIX_START: &str = "//fix_start";
pub const FIX_END: &str = "//fix_end";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("vulnerable and fixed functions are identical")]
    NoChange,
    #[error("empty function text")]
    EmptyInput,
    #[error("invalid CWE id {0:?}")]
    InvalidCwe(String),
    #[error("unknown language {0:?}")]
    UnknownLanguage(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    C,
    Cpp,
    Java,
}

impl Language {
    pub fn as_str(self) -> &'static str {
        match self {
            Language::C => "c",
            Language::Cpp => "cpp",
            Language::Java => "java",
        }
    }

    /// All supported languages use `//` line comments.
    pub fn line_comment(self) -> &'static str {
        "//"
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Language {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "c" => Ok(Language::C),
            "cpp" | "c++" => Ok(Language::Cpp),
            "java" => Ok(Language::Java),
            other => Err(CorpusError::UnknownLanguage(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// A CWE identifier with its weakness name. Construction does not enforce
/// well-formedness so malformed records survive ingestion; see [`CweLabel::is_valid_id`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CweLabel {
    pub id: String,
    pub name: String,
}

impl CweLabel {
    pub fn new(id: impl Into<String>, name: impl Into<String>) -> Self {
        Self { id: id.into(), name: name.into() }
    }

    /// Builds a label, rejecting ids that are not `CWE-<digits>`.
    pub fn parse(id: &str, name: &str) -> Result<Self, CorpusError> {
        if !is_cwe_id(id) {
            return Err(CorpusError::InvalidCwe(id.to_string()));
        }
        Ok(Self::new(id, name))
    }

    pub fn is_valid_id(&self) -> bool {
        is_cwe_id(&self.id)
    }
}

impl fmt::Display for CweLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.id, self.name)
    }
}

pub fn is_cwe_id(id: &str) -> bool {
    id.strip_prefix("CWE-")
        .is_some_and(|digits| !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VulFixPair {
    pub pair_id: String,
    pub language: Language,
    /// Vulnerable function with bug-region markers.
    pub vulnerable_source: String,
    /// Fixed function with fix-region markers.
    pub fixed_source: String,
    pub raw_vulnerable: String,
    pub raw_fixed: String,
    pub cwe: CweLabel,
    pub cve_description: Option<String>,
    pub split: Split,
}

/// Dataset record as stored on disk (one JSON object per line).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub pair_id: String,
    pub language: Language,
    pub vulnerable: String,
    pub fixed: String,
    pub cwe_id: String,
    pub cwe_name: String,
    pub cve_description: Option<String>,
    pub split: Split,
    #[serde(default)]
    pub pre_annotated: bool,
}

impl From<&VulFixPair> for DatasetRecord {
    fn from(pair: &VulFixPair) -> Self {
        DatasetRecord {
            pair_id: pair.pair_id.clone(),
            language: pair.language,
            vulnerable: pair.vulnerable_source.clone(),
            fixed: pair.fixed_source.clone(),
            cwe_id: pair.cwe.id.clone(),
            cwe_name: pair.cwe.name.clone(),
            cve_description: pair.cve_description.clone(),
            split: pair.split,
            pre_annotated: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarkerKind {
    BugStart,
    BugEnd,
    FixStart,
    FixEnd,
}

/// Recognizes a marker line. Surrounding whitespace and a space after `//`
/// are tolerated so that hand-annotated corpora (`// bug_start`) parse too.
pub fn marker_kind(line: &str) -> Option<MarkerKind> {
    let body = line.trim().strip_prefix("//")?.trim();
    match body {
        "bug_start" => Some(MarkerKind::BugStart),
        "bug_end" => Some(MarkerKind::BugEnd),
        "fix_start" => Some(MarkerKind::FixStart),
        "fix_end" => Some(MarkerKind::FixEnd),
        _ => None,
    }
}

/// Removes every marker line (bug and fix) from `text`.
pub fn strip_markers(text: &str) -> String {
    split_lines(text)
        .into_iter()
        .filter(|l| marker_kind(l).is_none())
        .collect::<Vec<_>>()
        .join("\n")
}

/// A marked region, located in the coordinates of the marker-free text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    /// Index of the first line of the region in the stripped text.
    pub start: usize,
    pub lines: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RegionError {
    /// A start without end, an end without start, or a nested start.
    Unbalanced { line: usize },
}

/// Parses the regions delimited by `start`/`end` markers. Markers of the
/// other family are ignored (treated as absent, not as content).
pub fn parse_regions(
    text: &str,
    start: MarkerKind,
    end: MarkerKind,
) -> Result<(Vec<String>, Vec<Region>), RegionError> {
    let mut stripped = Vec::new();
    let mut regions = Vec::new();
    let mut open: Option<Region> = None;
    for (idx, line) in split_lines(text).into_iter().enumerate() {
        match marker_kind(line) {
            Some(k) if k == start => {
                if open.is_some() {
                    return Err(RegionError::Unbalanced { line: idx });
                }
                open = Some(Region { start: stripped.len(), lines: Vec::new() });
            }
            Some(k) if k == end => match open.take() {
                Some(r) => regions.push(r),
                None => return Err(RegionError::Unbalanced { line: idx }),
            },
            Some(_) => {}
            None => {
                if let Some(r) = open.as_mut() {
                    r.lines.push(line.to_string());
                }
                stripped.push(line.to_string());
            }
        }
    }
    if open.is_some() {
        return Err(RegionError::Unbalanced { line: split_lines(text).len() });
    }
    Ok((stripped, regions))
}

pub fn bug_regions(text: &str) -> Result<(Vec<String>, Vec<Region>), RegionError> {
    parse_regions(text, MarkerKind::BugStart, MarkerKind::BugEnd)
}

pub fn fix_regions(text: &str) -> Result<(Vec<String>, Vec<Region>), RegionError> {
    parse_regions(text, MarkerKind::FixStart, MarkerKind::FixEnd)
}

/// Wraps every changed hunk of `raw_vulnerable` in bug markers and the
/// corresponding hunk of `raw_fixed` in fix markers.
///
/// Hunks are the ones produced by the line diff, so distinct regions are
/// always separated by at least one unchanged line. A pure insertion yields an
/// empty bug region at the insertion point; a pure deletion yields an empty
/// fix region.
pub fn annotate_bug_regions(
    raw_vulnerable: &str,
    raw_fixed: &str,
    language: Language,
) -> Result<(String, String), CorpusError> {
    if raw_vulnerable.is_empty() || raw_fixed.is_empty() {
        return Err(CorpusError::EmptyInput);
    }
    let diff = line_diff(raw_vulnerable, raw_fixed);
    if diff.is_empty() {
        return Err(CorpusError::NoChange);
    }
    let prefix = language.line_comment();
    let marker = |name: &str| format!("{prefix}{name}");

    let mut vulnerable = Vec::new();
    let mut fixed = Vec::new();
    let (mut oi, mut ni) = (0, 0);
    for hunk in &diff.hunks {
        vulnerable.extend(diff.old_lines[oi..hunk.old_start].iter().cloned());
        fixed.extend(diff.new_lines[ni..hunk.new_start].iter().cloned());

        vulnerable.push(marker("bug_start"));
        vulnerable.extend(hunk.deleted.iter().cloned());
        vulnerable.push(marker("bug_end"));

        fixed.push(marker("fix_start"));
        fixed.extend(hunk.added.iter().cloned());
        fixed.push(marker("fix_end"));

        oi = hunk.old_start + hunk.deleted.len();
        ni = hunk.new_start + hunk.added.len();
    }
    vulnerable.extend(diff.old_lines[oi..].iter().cloned());
    fixed.extend(diff.new_lines[ni..].iter().cloned());
    Ok((vulnerable.join("\n"), fixed.join("\n")))
}

/// Stable issue codes reported by [`validate_pair`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IssueCode {
    InvalidCweId,
    EmptyCweName,
    MarkerImbalance,
    RegionCountMismatch,
    StripMismatch,
    EmptyPairId,
    NoChange,
}

impl IssueCode {
    pub fn as_str(self) -> &'static str {
        match self {
            IssueCode::InvalidCweId => "INVALID_CWE_ID",
            IssueCode::EmptyCweName => "EMPTY_CWE_NAME",
            IssueCode::MarkerImbalance => "MARKER_IMBALANCE",
            IssueCode::RegionCountMismatch => "REGION_COUNT_MISMATCH",
            IssueCode::StripMismatch => "STRIP_MISMATCH",
            IssueCode::EmptyPairId => "EMPTY_PAIR_ID",
            IssueCode::NoChange => "NO_CHANGE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub code: IssueCode,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub pair_id: String,
    pub ok: bool,
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn has(&self, code: IssueCode) -> bool {
        self.issues.iter().any(|i| i.code == code)
    }
}

/// Checks every pair invariant and reports each violation; never fails.
pub fn validate_pair(pair: &VulFixPair) -> ValidationReport {
    let mut issues = Vec::new();
    let mut push = |code: IssueCode, message: String| issues.push(Issue { code, message });

    if pair.pair_id.is_empty() {
        push(IssueCode::EmptyPairId, "pair_id is empty".into());
    }
    if !pair.cwe.is_valid_id() {
        push(IssueCode::InvalidCweId, format!("{:?} is not of the form CWE-<digits>", pair.cwe.id));
    }
    if pair.cwe.name.trim().is_empty() {
        push(IssueCode::EmptyCweName, "CWE name is empty".into());
    }

    let bugs = bug_regions(&pair.vulnerable_source);
    let fixes = fix_regions(&pair.fixed_source);
    if let Err(RegionError::Unbalanced { line }) = &bugs {
        push(
            IssueCode::MarkerImbalance,
            format!("bug markers unbalanced near line {}", line + 1),
        );
    }
    if let Err(RegionError::Unbalanced { line }) = &fixes {
        push(
            IssueCode::MarkerImbalance,
            format!("fix markers unbalanced near line {}", line + 1),
        );
    }
    if let (Ok((_, b)), Ok((_, f))) = (&bugs, &fixes) {
        if b.len() != f.len() {
            push(
                IssueCode::RegionCountMismatch,
                format!("{} bug regions but {} fix regions", b.len(), f.len()),
            );
        }
    }
    if strip_markers(&pair.vulnerable_source) != pair.raw_vulnerable {
        push(
            IssueCode::StripMismatch,
            "vulnerable_source without markers differs from raw_vulnerable".into(),
        );
    }
    if strip_markers(&pair.fixed_source) != pair.raw_fixed {
        push(
            IssueCode::StripMismatch,
            "fixed_source without markers differs from raw_fixed".into(),
        );
    }
    if pair.raw_vulnerable == pair.raw_fixed {
        push(IssueCode::NoChange, "raw functions are identical".into());
    }

    ValidationReport { pair_id: pair.pair_id.clone(), ok: issues.is_empty(), issues }
}

/// Converts one record into a pair. Pairs that cannot be annotated (identical
/// or empty functions) keep their raw text unmarked and fail validation later.
pub fn pair_from_record(record: DatasetRecord) -> VulFixPair {
    let (vulnerable_source, fixed_source, raw_vulnerable, raw_fixed) = if record.pre_annotated {
        let rv = strip_markers(&record.vulnerable);
        let rf = strip_markers(&record.fixed);
        (record.vulnerable, record.fixed, rv, rf)
    } else {
        match annotate_bug_regions(&record.vulnerable, &record.fixed, record.language) {
            Ok((v, f)) => (v, f, record.vulnerable, record.fixed),
            Err(_) => (
                record.vulnerable.clone(),
                record.fixed.clone(),
                record.vulnerable,
                record.fixed,
            ),
        }
    };
    VulFixPair {
        pair_id: record.pair_id,
        language: record.language,
        vulnerable_source,
        fixed_source,
        raw_vulnerable,
        raw_fixed,
        cwe: CweLabel::new(record.cwe_id, record.cwe_name),
        cve_description: record.cve_description,
        split: record.split,
    }
}

/// Loads a JSONL dataset, one pair per record, in file order.
///
/// Blank lines are skipped. Records for a language other than
/// `expected_language` are still returned; callers filter with
/// [`validate_pair`] and the language field.
pub fn load_dataset(path: &Path, expected_language: Option<Language>) -> Result<Vec<VulFixPair>, CorpusError> {
    let io_err = |source| CorpusError::Io { path: path.display().to_string(), source };
    let file = File::open(path).map_err(io_err)?;
    let mut pairs = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Parse { line: idx + 1, message: e.to_string() })?;
        if let Some(lang) = expected_language {
            if record.language != lang {
                log::warn!(
                    "{}: pair {} is {} (expected {})",
                    path.display(),
                    record.pair_id,
                    record.language,
                    lang
                );
            }
        }
        pairs.push(pair_from_record(record));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::diff_lines;
    use proptest::prelude::*;
    use std::io::Write;

    fn pair(vulnerable: &str, fixed: &str) -> VulFixPair {
        pair_from_record(DatasetRecord {
            pair_id: "p1".into(),
            language: Language::C,
            vulnerable: vulnerable.into(),
            fixed: fixed.into(),
            cwe_id: "CWE-476".into(),
            cwe_name: "NULL Pointer Dereference".into(),
            cve_description: None,
            split: Split::Train,
            pre_annotated: false,
        })
    }

    #[test]
    fn cwe_id_shape() {
        assert!(is_cwe_id("CWE-416"));
        assert!(!is_cwe_id("CWE-"));
        assert!(!is_cwe_id("cwe-416"));
        assert!(!is_cwe_id("CWE-41a"));
        assert!(!is_cwe_id("CWE-416 "));
        assert!(CweLabel::parse("NVD-CWE-Other", "x").is_err());
    }

    #[test]
    fn insertion_gives_empty_bug_region() {
        let old = "int f(int *p) {\n  return *p;\n}";
        let new = "int f(int *p) {\n  if (!p) return -1;\n  return *p;\n}";
        let (v, f) = annotate_bug_regions(old, new, Language::C).unwrap();
        assert_eq!(v, "int f(int *p) {\n//bug_start\n//bug_end\n  return *p;\n}");
        assert_eq!(
            f,
            "int f(int *p) {\n//fix_start\n  if (!p) return -1;\n//fix_end\n  return *p;\n}"
        );
        assert_eq!(strip_markers(&v), old);
        assert_eq!(strip_markers(&f), new);
    }

    #[test]
    fn identical_inputs_are_rejected() {
        assert!(matches!(annotate_bug_regions("a", "a", Language::C), Err(CorpusError::NoChange)));
        assert!(matches!(annotate_bug_regions("", "a", Language::C), Err(CorpusError::EmptyInput)));
    }

    #[test]
    fn two_hunks_two_regions() {
        let old: Vec<String> = (0..10).map(|i| format!("line{i}")).collect();
        let mut new = old.clone();
        new[1] = "changed1".into();
        new.insert(7, "inserted".into());
        let (v, f) = annotate_bug_regions(&old.join("\n"), &new.join("\n"), Language::Java).unwrap();
        let (_, bugs) = bug_regions(&v).unwrap();
        let (_, fixes) = fix_regions(&f).unwrap();
        assert_eq!(bugs.len(), 2);
        assert_eq!(fixes.len(), 2);
        assert_eq!(bugs[0].lines, vec!["line1"]);
        assert_eq!(fixes[0].lines, vec!["changed1"]);
        assert!(bugs[1].lines.is_empty());
        assert_eq!(bugs[1].start, 7);
        assert_eq!(fixes[1].lines, vec!["inserted"]);
    }

    #[test]
    fn validation_flags_marker_problems() {
        let good = pair("a\nb", "a\nc");
        let report = validate_pair(&good);
        assert!(report.ok, "{report:?}");
        assert!(report.issues.is_empty());

        let mut missing_end = good.clone();
        missing_end.vulnerable_source = "a\n//bug_start\nb".into();
        let report = validate_pair(&missing_end);
        assert!(!report.ok);
        assert!(report.has(IssueCode::MarkerImbalance));

        let mut extra_region = good.clone();
        extra_region.vulnerable_source = "//bug_start\n//bug_end\na\n//bug_start\nb\n//bug_end".into();
        let report = validate_pair(&extra_region);
        assert!(report.has(IssueCode::RegionCountMismatch));
        assert!(!report.has(IssueCode::MarkerImbalance));

        let mut bad_cwe = good.clone();
        bad_cwe.cwe.id = "NVD-CWE-noinfo".into();
        assert!(validate_pair(&bad_cwe).has(IssueCode::InvalidCweId));
    }

    #[test]
    fn reversed_markers_are_unbalanced() {
        assert!(bug_regions("//bug_end\nx\n//bug_start").is_err());
        assert!(bug_regions("//bug_start\n//bug_start\n//bug_end\n//bug_end").is_err());
        // spaced form from hand-annotated data
        let (_, r) = bug_regions("// bug_start\nx\n  // bug_end").unwrap();
        assert_eq!(r[0].lines, vec!["x"]);
    }

    #[test]
    fn load_preserves_order_and_flags_bad_records() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        let recs = [
            r#"{"pair_id":"a","language":"c","vulnerable":"x\ny","fixed":"x\nz","cwe_id":"CWE-416","cwe_name":"Use After Free","cve_description":null,"split":"train","pre_annotated":false}"#,
            r#"{"pair_id":"b","language":"c","vulnerable":"q","fixed":"r","cwe_id":"CWE 1","cwe_name":"Bad","cve_description":"d","split":"test","pre_annotated":false}"#,
            r#"{"pair_id":"c","language":"java","vulnerable":"//bug_start\nold\n//bug_end","fixed":"//fix_start\nnew\n//fix_end","cwe_id":"CWE-20","cwe_name":"Improper Input Validation","cve_description":null,"split":"valid","pre_annotated":true}"#,
        ];
        for r in recs {
            writeln!(file, "{r}").unwrap();
        }
        let pairs = load_dataset(file.path(), Some(Language::C)).unwrap();
        let ids: Vec<_> = pairs.iter().map(|p| p.pair_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(pairs[0].cwe, CweLabel::new("CWE-416", "Use After Free"));
        assert_eq!(pairs[1].split, Split::Test);
        assert!(validate_pair(&pairs[1]).has(IssueCode::InvalidCweId));
        assert_eq!(pairs[2].raw_vulnerable, "old");
        assert!(validate_pair(&pairs[2]).ok);
    }

    #[test]
    fn load_reports_line_numbers_and_empty_files() {
        let empty = tempfile::NamedTempFile::new().unwrap();
        assert!(load_dataset(empty.path(), None).unwrap().is_empty());

        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, r#"{{"pair_id":"a","language":"c","vulnerable":"x","fixed":"y","cwe_id":"CWE-1","cwe_name":"n","cve_description":null,"split":"train"}}"#).unwrap();
        writeln!(file, "{{not json").unwrap();
        match load_dataset(file.path(), None) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            load_dataset(Path::new("/nonexistent/data.jsonl"), None),
            Err(CorpusError::Io { .. })
        ));
    }

    fn text() -> impl Strategy<Value = String> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "  x;", ""]), 1..10)
            .prop_map(|xs| xs.join("\n"))
    }

    proptest! {
        #[test]
        fn markers_round_trip(old in text(), new in text()) {
            prop_assume!(old != new && !old.is_empty() && !new.is_empty());
            let (v, f) = annotate_bug_regions(&old, &new, Language::C).unwrap();
            prop_assert_eq!(strip_markers(&v), old.clone());
            prop_assert_eq!(strip_markers(&f), new.clone());

            let (_, bugs) = bug_regions(&v).unwrap();
            let (_, fixes) = fix_regions(&f).unwrap();
            prop_assert_eq!(bugs.len(), fixes.len());
            // region k carries exactly hunk k
            let d = diff_lines(&split_lines(&old), &split_lines(&new));
            for ((b, fx), h) in bugs.iter().zip(&fixes).zip(&d.hunks) {
                prop_assert_eq!(&b.lines, &h.deleted);
                prop_assert_eq!(&fx.lines, &h.added);
                prop_assert_eq!(b.start, h.old_start);
            }
        }
    }
}

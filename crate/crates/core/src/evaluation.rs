//! Exact-Match scoring, per-CWE reports, similarity triage and agreement statistics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Language, VulFixPair};
use crate::lexer::normalize_code;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("result refers to unknown pair {0:?}")]
    UnknownPair(String),
    #[error("label lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("label lists are empty")]
    Empty,
    #[error("kappa undefined: expected agreement is 1 but observed agreement is {0}")]
    DegenerateKappa(f64),
    #[error("k must be at least 1")]
    ZeroK,
}

/// True iff both texts lex to the same token sequence. Lexing failures score false.
pub fn exact_match(candidate: &str, ground_truth: &str, language: Language) -> bool {
    let cand = match normalize_code(candidate, language) {
        Ok(t) => t,
        Err(e) => {
            log::debug!("candidate failed to lex: {e}");
            return false;
        }
    };
    match normalize_code(ground_truth, language) {
        Ok(gt) => cand == gt,
        Err(e) => {
            log::warn!("ground truth failed to lex: {e}");
            false
        }
    }
}

/// True iff any of the first `k` candidates exact-matches.
pub fn em_at_k<S: AsRef<str>>(candidates: &[S], ground_truth: &str, language: Language, k: usize) -> bool {
    candidates
        .iter()
        .take(k)
        .any(|c| exact_match(c.as_ref(), ground_truth, language))
}

/// Candidates for one pair, in rank order. `None` marks a candidate that could
/// not be turned into a function (it still occupies its slot and never matches).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairResult {
    pub pair_id: String,
    pub candidates: Vec<Option<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CweRow {
    pub cwe_id: String,
    pub cwe_name: String,
    pub success: usize,
    pub total: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub em_true: usize,
    pub em_percent: f64,
    pub k: Option<usize>,
    pub per_cwe: Vec<CweRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub em_at_k_curve: Option<Vec<(usize, f64)>>,
}

fn percent(success: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * success as f64 / total as f64
    }
}

/// Scores every pair of `pairs` that has a result entry.
///
/// `k = None` considers all candidates. Pairs without results are not counted.
pub fn evaluate_dataset(
    results: &[PairResult],
    pairs: &[VulFixPair],
    k: Option<usize>,
) -> Result<EvalReport, EvalError> {
    if k == Some(0) {
        return Err(EvalError::ZeroK);
    }
    let by_id: HashMap<&str, &VulFixPair> = pairs.iter().map(|p| (p.pair_id.as_str(), p)).collect();
    let limit = k.unwrap_or(usize::MAX);

    let mut em_true = 0;
    // cwe id -> (name, success, total)
    let mut rows: BTreeMap<&str, (&str, usize, usize)> = BTreeMap::new();
    for result in results {
        let pair = by_id
            .get(result.pair_id.as_str())
            .ok_or_else(|| EvalError::UnknownPair(result.pair_id.clone()))?;
        let hit = first_match(&result.candidates, pair).is_some_and(|pos| pos < limit);
        let row = rows.entry(pair.cwe.id.as_str()).or_insert((pair.cwe.name.as_str(), 0, 0));
        row.2 += 1;
        if hit {
            row.1 += 1;
            em_true += 1;
        }
    }

    let mut per_cwe: Vec<CweRow> = rows
        .into_iter()
        .map(|(id, (name, success, total))| CweRow {
            cwe_id: id.to_string(),
            cwe_name: name.to_string(),
            success,
            total,
            rate: percent(success, total),
        })
        .collect();
    per_cwe.sort_by(|a, b| b.total.cmp(&a.total).then_with(|| a.cwe_id.cmp(&b.cwe_id)));

    Ok(EvalReport {
        n: results.len(),
        em_true,
        em_percent: percent(em_true, results.len()),
        k,
        per_cwe,
        em_at_k_curve: None,
    })
}

/// EM percentage at each of `ks`, computed from the first matching position per pair.
pub fn em_curve(results: &[PairResult], pairs: &[VulFixPair], ks: &[usize]) -> Result<Vec<(usize, f64)>, EvalError> {
    let by_id: HashMap<&str, &VulFixPair> = pairs.iter().map(|p| (p.pair_id.as_str(), p)).collect();
    let mut firsts = Vec::with_capacity(results.len());
    for result in results {
        let pair = by_id
            .get(result.pair_id.as_str())
            .ok_or_else(|| EvalError::UnknownPair(result.pair_id.clone()))?;
        firsts.push(first_match(&result.candidates, pair));
    }
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = firsts.iter().filter(|f| f.is_some_and(|pos| pos < k)).count();
            (k, percent(hits, results.len()))
        })
        .collect())
}

fn first_match(candidates: &[Option<String>], pair: &VulFixPair) -> Option<usize> {
    candidates.iter().position(|c| {
        c.as_deref()
            .is_some_and(|text| exact_match(text, &pair.raw_fixed, pair.language))
    })
}

/// Formats a percentage `100 * num / den` with two decimals, rounding half up.
pub fn format_rate(num: usize, den: usize) -> String {
    if den == 0 {
        return "0.00".into();
    }
    let hundredths = (num as u128 * 20_000 + den as u128) / (2 * den as u128);
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

/// Signed change `rate(a) - rate(b)` in percentage points, rounded half up on
/// the magnitude, rendered with an arrow.
pub fn format_rate_change(a: (usize, usize), b: (usize, usize)) -> String {
    let (sa, ta) = (a.0 as i128, a.1 as i128);
    let (sb, tb) = (b.0 as i128, b.1 as i128);
    if ta == 0 || tb == 0 {
        return "-".into();
    }
    let num = 10_000 * (sa * tb - sb * ta);
    let den = ta * tb;
    let mag = (2 * num.abs() + den) / (2 * den);
    let text = format!("{}.{:02}", mag / 100, mag % 100);
    match num.signum() {
        1 => format!("↑{text}"),
        -1 => format!("↓{text}"),
        _ => text,
    }
}

fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<String>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        padded.join("  ").trim_end().to_string()
    };
    let mut out = line(header.iter().map(|s| s.to_string()).collect());
    out.push('\n');
    out.push_str(&line(widths.iter().map(|w| "-".repeat(*w)).collect()));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row.clone()));
        out.push('\n');
    }
    out
}

impl EvalReport {
    /// Aligned-column table: CWE ID, Name, Success, Total, Rate, plus an overall row.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<Vec<String>> = self
            .per_cwe
            .iter()
            .map(|r| {
                vec![
                    r.cwe_id.clone(),
                    r.cwe_name.clone(),
                    r.success.to_string(),
                    r.total.to_string(),
                    format_rate(r.success, r.total),
                ]
            })
            .collect();
        rows.push(vec![
            "Overall".into(),
            String::new(),
            self.em_true.to_string(),
            self.n.to_string(),
            format_rate(self.em_true, self.n),
        ]);
        render_table(&["CWE ID", "Name", "Success", "Total", "Rate"], &rows)
    }
}

/// Per-CWE comparison of two runs; Rate Change is `current - baseline`.
/// CWEs follow `current`'s row order, then any baseline-only CWEs.
pub fn compare_reports(current: &EvalReport, baseline: &EvalReport) -> String {
    let base: HashMap<&str, &CweRow> = baseline.per_cwe.iter().map(|r| (r.cwe_id.as_str(), r)).collect();
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for r in &current.per_cwe {
        seen.insert(r.cwe_id.as_str());
        let change = base
            .get(r.cwe_id.as_str())
            .map_or_else(|| "-".to_string(), |b| format_rate_change((r.success, r.total), (b.success, b.total)));
        rows.push(vec![
            r.cwe_id.clone(),
            r.cwe_name.clone(),
            r.success.to_string(),
            r.total.to_string(),
            format_rate(r.success, r.total),
            change,
        ]);
    }
    for b in &baseline.per_cwe {
        if !seen.contains(b.cwe_id.as_str()) {
            rows.push(vec![
                b.cwe_id.clone(),
                b.cwe_name.clone(),
                "-".into(),
                "-".into(),
                "-".into(),
                "-".into(),
            ]);
        }
    }
    rows.push(vec![
        "Overall".into(),
        String::new(),
        current.em_true.to_string(),
        current.n.to_string(),
        format_rate(current.em_true, current.n),
        format_rate_change((current.em_true, current.n), (baseline.em_true, baseline.n)),
    ]);
    render_table(&["CWE ID", "Name", "Success", "Total", "Rate", "Rate Change"], &rows)
}

/// Ratcliff/Obershelp similarity `2M / T` over characters, without junk heuristics.
pub fn ratcliff_obershelp(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let total = a.len() + b.len();
    if total == 0 {
        return 1.0;
    }
    2.0 * matching_chars(&a, &b) as f64 / total as f64
}

fn matching_chars(a: &[char], b: &[char]) -> usize {
    let mut stack = vec![(0, a.len(), 0, b.len())];
    let mut matched = 0;
    while let Some((alo, ahi, blo, bhi)) = stack.pop() {
        let (i, j, size) = longest_common_block(a, b, alo, ahi, blo, bhi);
        if size == 0 {
            continue;
        }
        matched += size;
        if alo < i && blo < j {
            stack.push((alo, i, blo, j));
        }
        if i + size < ahi && j + size < bhi {
            stack.push((i + size, ahi, j + size, bhi));
        }
    }
    matched
}

/// Longest common substring of `a[alo..ahi]` and `b[blo..bhi]`; ties go to
/// the earliest start in `a`, then in `b`.
fn longest_common_block(a: &[char], b: &[char], alo: usize, ahi: usize, blo: usize, bhi: usize) -> (usize, usize, usize) {
    let (mut best_i, mut best_j, mut best) = (alo, blo, 0);
    let mut prev = vec![0usize; bhi - blo + 1];
    let mut cur = vec![0usize; bhi - blo + 1];
    for i in alo..ahi {
        for j in blo..bhi {
            let k = j - blo + 1;
            cur[k] = if a[i] == b[j] { prev[k - 1] + 1 } else { 0 };
            let len = cur[k];
            if len > best || (len == best && len > 0 && (i + 1 - len, j + 1 - len) < (best_i, best_j)) {
                best = len;
                best_i = i + 1 - len;
                best_j = j + 1 - len;
            }
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    (best_i, best_j, best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    /// Position in the input list.
    pub index: usize,
    pub score: f64,
}

/// Top `top_n` candidates by raw-text similarity to the ground truth; ties keep input order.
pub fn similarity_rank<S: AsRef<str>>(candidates: &[S], ground_truth: &str, top_n: usize) -> Vec<RankedCandidate> {
    let mut ranked: Vec<RankedCandidate> = candidates
        .iter()
        .enumerate()
        .map(|(index, c)| RankedCandidate { index, score: ratcliff_obershelp(c.as_ref(), ground_truth) })
        .collect();
    ranked.sort_by(|x, y| y.score.total_cmp(&x.score));
    ranked.truncate(top_n);
    ranked
}

/// Cohen's kappa for two raters with marginal-product chance agreement.
pub fn cohens_kappa<T: Eq + Hash>(labels_a: &[T], labels_b: &[T]) -> Result<f64, EvalError> {
    if labels_a.len() != labels_b.len() {
        return Err(EvalError::LengthMismatch(labels_a.len(), labels_b.len()));
    }
    if labels_a.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = labels_a.len();
    let agree = labels_a.iter().zip(labels_b).filter(|(a, b)| a == b).count();
    let mut counts: HashMap<&T, (usize, usize)> = HashMap::new();
    for a in labels_a {
        counts.entry(a).or_default().0 += 1;
    }
    for b in labels_b {
        counts.entry(b).or_default().1 += 1;
    }
    // Work in integers so the degenerate case is detected exactly.
    let expected_num: usize = counts.values().map(|(ca, cb)| ca * cb).sum();
    let nn = n * n;
    let p_o = agree as f64 / n as f64;
    if expected_num == nn {
        return if agree == n { Ok(1.0) } else { Err(EvalError::DegenerateKappa(p_o)) };
    }
    let p_e = expected_num as f64 / nn as f64;
    Ok((p_o - p_e) / (1.0 - p_e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CweLabel, Split};
    use proptest::prelude::*;

    fn pair(id: &str, cwe: &str, fixed: &str) -> VulFixPair {
        VulFixPair {
            pair_id: id.into(),
            language: Language::C,
            vulnerable_source: "x".into(),
            fixed_source: fixed.into(),
            raw_vulnerable: "x".into(),
            raw_fixed: fixed.into(),
            cwe: CweLabel::new(cwe, format!("{cwe} name")),
            cve_description: None,
            split: Split::Test,
        }
    }

    fn res(id: &str, cands: &[&str]) -> PairResult {
        PairResult { pair_id: id.into(), candidates: cands.iter().map(|c| Some(c.to_string())).collect() }
    }

    #[test]
    fn exact_match_basics() {
        let gt = "int f() { return 0; }";
        assert!(exact_match(gt, gt, Language::C));
        assert!(exact_match("int f() { return 0; } // done", gt, Language::C));
        assert!(!exact_match("int g() { return 0; }", gt, Language::C));
        assert!(!exact_match("int f() { /* open", gt, Language::C));
    }

    #[test]
    fn em_at_k_positions() {
        let gt = "a;";
        let mut cands: Vec<String> = (0..11).map(|i| format!("b{i};")).collect();
        assert!(!em_at_k(&cands, gt, Language::C, 10));
        cands[10] = "a ;".into();
        assert!(!em_at_k(&cands, gt, Language::C, 10));
        assert!(em_at_k(&cands, gt, Language::C, 11));
        assert!(em_at_k(&["a;"], gt, Language::C, 1));
        assert!(!em_at_k::<&str>(&[], gt, Language::C, 1));
    }

    #[test]
    fn dataset_report() {
        let pairs = vec![
            pair("a", "CWE-787", "r1;"),
            pair("b", "CWE-787", "r2;"),
            pair("c", "CWE-416", "r3;"),
            pair("d", "CWE-787", "r4;"),
        ];
        let results = vec![res("a", &["r1 ;"]), res("b", &["no;"]), res("c", &["no;"]), res("d", &[])];
        let report = evaluate_dataset(&results, &pairs, Some(10)).unwrap();
        assert_eq!(report.em_true, 1);
        assert_eq!(report.em_percent, 25.0);
        assert_eq!(report.per_cwe[0].cwe_id, "CWE-787");
        assert_eq!((report.per_cwe[0].success, report.per_cwe[0].total), (1, 3));
        assert_eq!(report.per_cwe.iter().map(|r| r.success).sum::<usize>(), report.em_true);
        assert_eq!(report.per_cwe.iter().map(|r| r.total).sum::<usize>(), report.n);

        let err = evaluate_dataset(&[res("zz", &[])], &pairs, None).unwrap_err();
        assert_eq!(err, EvalError::UnknownPair("zz".into()));
    }

    #[test]
    fn malformed_candidates_hold_their_slot() {
        let pairs = vec![pair("a", "CWE-20", "ok;")];
        let results = vec![PairResult { pair_id: "a".into(), candidates: vec![None, Some("ok;".into())] }];
        assert_eq!(evaluate_dataset(&results, &pairs, Some(1)).unwrap().em_true, 0);
        assert_eq!(evaluate_dataset(&results, &pairs, Some(2)).unwrap().em_true, 1);
        let curve = em_curve(&results, &pairs, &[1, 2]).unwrap();
        assert_eq!(curve, vec![(1, 0.0), (2, 100.0)]);
    }

    #[test]
    fn rate_formatting_rounds_half_up() {
        assert_eq!(format_rate(26, 72), "36.11");
        assert_eq!(format_rate(1, 8), "12.50");
        assert_eq!(format_rate(1, 3), "33.33");
        assert_eq!(format_rate(2, 3), "66.67");
        // 1/16 = 6.25 exactly; 1/800 = 0.125 -> 0.13
        assert_eq!(format_rate(1, 800), "0.13");
        assert_eq!(format_rate_change((2, 4), (1, 4)), "↑25.00");
        assert_eq!(format_rate_change((0, 4), (1, 3)), "↓33.33");
        assert_eq!(format_rate_change((1, 2), (2, 4)), "0.00");
    }

    #[test]
    fn table_layout() {
        let pairs = vec![pair("a", "CWE-787", "r;"), pair("b", "CWE-416", "q;")];
        let report = evaluate_dataset(&[res("a", &["r;"]), res("b", &[])], &pairs, None).unwrap();
        let table = report.to_table();
        let lines: Vec<&str> = table.lines().collect();
        assert!(lines[0].starts_with("CWE ID"));
        assert!(lines[0].ends_with("Rate"));
        assert!(table.contains("100.00"));
        assert!(lines.last().unwrap().starts_with("Overall"));

        let base = evaluate_dataset(&[res("a", &[]), res("b", &[])], &pairs, None).unwrap();
        let cmp = compare_reports(&report, &base);
        assert!(cmp.lines().next().unwrap().ends_with("Rate Change"));
        assert!(cmp.contains("↑100.00"));
        assert!(cmp.contains("↑50.00"));
    }

    #[test]
    fn ratcliff_examples() {
        assert!((ratcliff_obershelp("abcd", "abed") - 0.75).abs() < 1e-12);
        assert_eq!(ratcliff_obershelp("abc", "abc"), 1.0);
        assert_eq!(ratcliff_obershelp("abc", "xyz"), 0.0);
        assert_eq!(ratcliff_obershelp("", ""), 1.0);
        // difflib: SequenceMatcher(None, "private Thread currentThread;", "private volatile Thread currentThread;").ratio()
        let r = ratcliff_obershelp("private Thread currentThread;", "private volatile Thread currentThread;");
        assert!((r - 2.0 * 29.0 / 67.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_rank_orders_and_truncates() {
        let ranked = similarity_rank(&["xyz", "abcd", "abed", "abcd"], "abcd", 2);
        assert_eq!(ranked.len(), 2);
        assert_eq!((ranked[0].index, ranked[0].score), (1, 1.0));
        assert_eq!(ranked[1].index, 3);
    }

    #[test]
    fn kappa_cases() {
        assert_eq!(cohens_kappa(&[1, 0, 1, 2], &[1, 0, 1, 2]).unwrap(), 1.0);
        let k = cohens_kappa(&[1, 1, 1, 0], &[1, 0, 1, 1]).unwrap();
        assert!((k + 1.0 / 3.0).abs() < 1e-12);
        // p_o = 0.5, p_e = 0.5
        assert_eq!(cohens_kappa(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap(), 0.0);
        assert_eq!(cohens_kappa(&[3, 3], &[3, 3]).unwrap(), 1.0);
        assert_eq!(cohens_kappa(&[1], &[1, 2]), Err(EvalError::LengthMismatch(1, 2)));
        assert_eq!(cohens_kappa::<u8>(&[], &[]), Err(EvalError::Empty));
    }

    proptest! {
        #[test]
        fn ratcliff_bounds(a in "[abc]{0,12}", b in "[abc]{0,12}") {
            let r = ratcliff_obershelp(&a, &b);
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert_eq!(ratcliff_obershelp(&a, &a), 1.0);
        }

        #[test]
        fn kappa_is_at_most_one(pairs in prop::collection::vec((0u8..3, 0u8..3), 1..30)) {
            let (a, b): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
            if let Ok(k) = cohens_kappa(&a, &b) {
                prop_assert!(k <= 1.0 + 1e-12);
            }
        }
    }
}

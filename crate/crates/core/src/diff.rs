//! Line-level diffing over whole lines.
//!
//! Lines are compared byte-exact. Text is split on `'\n'` only, so a trailing
//! newline shows up as a final empty line and `"\r"` stays part of its line;
//! joining the lines back with `'\n'` reproduces the input exactly.

use serde::{Deserialize, Serialize};

/// Split text into lines without losing any bytes. The empty string has no lines.
pub fn split_lines(text: &str) -> Vec<&str> {
    if text.is_empty() {
        Vec::new()
    } else {
        text.split('\n').collect()
    }
}

/// One contiguous block of deleted and/or added lines.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hunk {
    /// 0-based index of the first affected line in the old text.
    pub old_start: usize,
    pub deleted: Vec<String>,
    /// 0-based index of the first affected line in the new text.
    pub new_start: usize,
    pub added: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineDiff {
    pub old_lines: Vec<String>,
    pub new_lines: Vec<String>,
    pub hunks: Vec<Hunk>,
}

impl LineDiff {
    pub fn is_empty(&self) -> bool {
        self.hunks.is_empty()
    }

    /// Replays the hunks over `old_lines`.
    pub fn apply(&self) -> Vec<String> {
        apply_hunks(&self.old_lines, &self.hunks)
    }

    /// Newline-joined added lines, in hunk order.
    pub fn added_text(&self) -> String {
        collect_changed_lines(self).0.join("\n")
    }

    /// Newline-joined deleted lines, in hunk order.
    pub fn deleted_text(&self) -> String {
        collect_changed_lines(self).1.join("\n")
    }
}

/// Applies `hunks` (sorted, non-overlapping, old-file coordinates) to `old`.
pub fn apply_hunks(old: &[String], hunks: &[Hunk]) -> Vec<String> {
    let mut out = Vec::with_capacity(old.len());
    let mut cursor = 0;
    for hunk in hunks {
        out.extend_from_slice(&old[cursor..hunk.old_start]);
        out.extend(hunk.added.iter().cloned());
        cursor = hunk.old_start + hunk.deleted.len();
    }
    out.extend_from_slice(&old[cursor..]);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Keep,
    Delete,
    Insert,
}

/// Diffs two texts line by line.
pub fn line_diff(old: &str, new: &str) -> LineDiff {
    diff_lines(&split_lines(old), &split_lines(new))
}

/// Diffs two line lists using a longest-common-subsequence alignment.
///
/// Among alignments of equal length, a matching line is taken as soon as it
/// is part of some optimal alignment, and inside a changed block deletions
/// are emitted before insertions.
pub fn diff_lines<S: AsRef<str>>(old: &[S], new: &[S]) -> LineDiff {
    let a: Vec<&str> = old.iter().map(AsRef::as_ref).collect();
    let b: Vec<&str> = new.iter().map(AsRef::as_ref).collect();
    let ops = lcs_script(&a, &b);

    let mut hunks = Vec::new();
    let (mut i, mut j) = (0usize, 0usize);
    let mut current: Option<Hunk> = None;
    for op in ops {
        match op {
            Op::Keep => {
                if let Some(h) = current.take() {
                    hunks.push(h);
                }
                i += 1;
                j += 1;
            }
            Op::Delete => {
                current
                    .get_or_insert_with(|| Hunk {
                        old_start: i,
                        deleted: Vec::new(),
                        new_start: j,
                        added: Vec::new(),
                    })
                    .deleted
                    .push(a[i].to_string());
                i += 1;
            }
            Op::Insert => {
                current
                    .get_or_insert_with(|| Hunk {
                        old_start: i,
                        deleted: Vec::new(),
                        new_start: j,
                        added: Vec::new(),
                    })
                    .added
                    .push(b[j].to_string());
                j += 1;
            }
        }
    }
    if let Some(h) = current {
        hunks.push(h);
    }

    LineDiff {
        old_lines: a.iter().map(|s| s.to_string()).collect(),
        new_lines: b.iter().map(|s| s.to_string()).collect(),
        hunks,
    }
}

fn lcs_script(a: &[&str], b: &[&str]) -> Vec<Op> {
    let (n, m) = (a.len(), b.len());
    // Trim the common prefix/suffix so the quadratic table only covers the
    // changed middle. Matching these greedily never loses optimality.
    let prefix = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    let suffix = a[prefix..]
        .iter()
        .rev()
        .zip(b[prefix..].iter().rev())
        .take_while(|(x, y)| x == y)
        .count();
    let am = &a[prefix..n - suffix];
    let bm = &b[prefix..m - suffix];
    let (rn, rm) = (am.len(), bm.len());

    // table[i][j] = LCS length of am[i..] and bm[j..]
    let width = rm + 1;
    let mut table = vec![0u32; (rn + 1) * width];
    for i in (0..rn).rev() {
        for j in (0..rm).rev() {
            table[i * width + j] = if am[i] == bm[j] {
                table[(i + 1) * width + j + 1] + 1
            } else {
                table[(i + 1) * width + j].max(table[i * width + j + 1])
            };
        }
    }

    let mut ops = vec![Op::Keep; prefix];
    let (mut i, mut j) = (0, 0);
    // Pending changes of the current block, flushed deletions-first.
    let mut dels = 0;
    let mut ins = 0;
    let flush = |ops: &mut Vec<Op>, dels: &mut usize, ins: &mut usize| {
        ops.extend(std::iter::repeat_n(Op::Delete, *dels));
        ops.extend(std::iter::repeat_n(Op::Insert, *ins));
        *dels = 0;
        *ins = 0;
    };
    while i < rn && j < rm {
        let here = table[i * width + j];
        if am[i] == bm[j] && here == table[(i + 1) * width + j + 1] + 1 {
            flush(&mut ops, &mut dels, &mut ins);
            ops.push(Op::Keep);
            i += 1;
            j += 1;
        } else if table[(i + 1) * width + j] == here {
            dels += 1;
            i += 1;
        } else {
            ins += 1;
            j += 1;
        }
    }
    dels += rn - i;
    ins += rm - j;
    flush(&mut ops, &mut dels, &mut ins);
    ops.extend(std::iter::repeat_n(Op::Keep, suffix));
    ops
}

/// All added and deleted lines, each concatenated in hunk order.
pub fn collect_changed_lines(diff: &LineDiff) -> (Vec<String>, Vec<String>) {
    let added = diff
        .hunks
        .iter()
        .flat_map(|h| h.added.iter().cloned())
        .collect();
    let deleted = diff
        .hunks
        .iter()
        .flat_map(|h| h.deleted.iter().cloned())
        .collect();
    (added, deleted)
}

/// Renders a unified diff body (no file headers) with `context` lines of
/// surrounding context. Every emitted line ends with `'\n'`.
pub fn render_unified(diff: &LineDiff, context: usize) -> String {
    if diff.hunks.is_empty() {
        return String::new();
    }

    // Group hunks whose context windows touch.
    let mut groups: Vec<Vec<&Hunk>> = Vec::new();
    for hunk in &diff.hunks {
        let joins = groups.last().is_some_and(|g| {
            let prev = g.last().unwrap();
            let prev_end = prev.old_start + prev.deleted.len();
            hunk.old_start.saturating_sub(prev_end) <= 2 * context
        });
        if joins {
            groups.last_mut().unwrap().push(hunk);
        } else {
            groups.push(vec![hunk]);
        }
    }

    let mut out = String::new();
    for group in groups {
        let first = group[0];
        let last = group[group.len() - 1];
        let lead = context.min(first.old_start);
        let old_from = first.old_start - lead;
        let new_from = first.new_start - lead;
        let old_end = (last.old_start + last.deleted.len() + context).min(diff.old_lines.len());
        let trail = old_end - (last.old_start + last.deleted.len());
        let new_end = last.new_start + last.added.len() + trail;

        out.push_str(&format!(
            "@@ -{} +{} @@\n",
            range_header(old_from, old_end - old_from),
            range_header(new_from, new_end - new_from)
        ));
        let mut cursor = old_from;
        for hunk in group {
            for line in &diff.old_lines[cursor..hunk.old_start] {
                out.push(' ');
                out.push_str(line);
                out.push('\n');
            }
            for line in &hunk.deleted {
                out.push('-');
                out.push_str(line);
                out.push('\n');
            }
            for line in &hunk.added {
                out.push('+');
                out.push_str(line);
                out.push('\n');
            }
            cursor = hunk.old_start + hunk.deleted.len();
        }
        for line in &diff.old_lines[cursor..old_end] {
            out.push(' ');
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

fn range_header(start: usize, len: usize) -> String {
    // Unified-diff convention: 1-based start, or the preceding line for empty ranges.
    match len {
        0 => format!("{start},0"),
        1 => format!("{}", start + 1),
        _ => format!("{},{}", start + 1, len),
    }
}

//! Multi-file unified diff parsing and application for imported edits.
//!
//! Hunks apply with exact context and zero fuzz. When a hunk's context is not
//! at its stated line, the nearest exact match is used (offset search), as
//! `patch` does.

use std::path::Path;

use thiserror::Error;

use crate::types::check_relative;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PatchError {
    #[error("patch contains no file sections")]
    Empty,
    #[error("file section {0} has /dev/null on both sides")]
    MissingHeader(usize),
    #[error("bad path in patch: {0}")]
    BadPath(String),
    #[error("cannot parse hunks for `{file}`: {reason}")]
    Hunks { file: String, reason: String },
    #[error("hunk {hunk} does not apply to `{file}`")]
    DoesNotApply { file: String, hunk: usize },
    #[error("`{0}` does not exist")]
    MissingFile(String),
    #[error("`{0}` already exists")]
    FileExists(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum HunkLine {
    Context(String),
    Remove(String),
    Add(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Hunk {
    old_start: usize,
    old_len: usize,
    new_len: usize,
    lines: Vec<HunkLine>,
    /// `\ No newline at end of file` after the old / new side.
    old_no_eol: bool,
    new_no_eol: bool,
}

/// One file's portion of a unified diff.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilePatch {
    /// `None` when the file is created.
    pub old_path: Option<String>,
    /// `None` when the file is deleted.
    pub new_path: Option<String>,
    hunks: Vec<Hunk>,
}

impl FilePatch {
    pub fn path(&self) -> &str {
        self.new_path
            .as_deref()
            .or(self.old_path.as_deref())
            .expect("at least one side is a real path")
    }

    pub fn hunk_count(&self) -> usize {
        self.hunks.len()
    }
}

fn header_path(rest: &str) -> Result<Option<String>, PatchError> {
    let name = rest.split('\t').next().unwrap_or(rest).trim_end();
    if name == "/dev/null" {
        return Ok(None);
    }
    let name = name
        .strip_prefix("a/")
        .or_else(|| name.strip_prefix("b/"))
        .unwrap_or(name);
    check_relative(name).map_err(|_| PatchError::BadPath(name.to_string()))?;
    Ok(Some(name.to_string()))
}

fn parse_range(s: &str) -> Option<(usize, usize)> {
    let (start, len) = match s.split_once(',') {
        Some((a, b)) => (a.parse().ok()?, b.parse().ok()?),
        None => (s.parse().ok()?, 1),
    };
    Some((start, len))
}

/// `@@ -a,b +c,d @@ ...` into (a, b, d).
fn parse_hunk_header(line: &str) -> Option<(usize, usize, usize)> {
    let rest = line.strip_prefix("@@ -")?;
    let (old, rest) = rest.split_once(" +")?;
    let (new, _) = rest.split_once(" @@")?;
    let (old_start, old_len) = parse_range(old)?;
    let (_, new_len) = parse_range(new)?;
    Some((old_start, old_len, new_len))
}

fn parse_hunks(file: &str, lines: &[&str]) -> Result<Vec<Hunk>, PatchError> {
    let bad = |reason: String| PatchError::Hunks {
        file: file.to_string(),
        reason,
    };
    let mut hunks = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i];
        if !line.starts_with("@@") {
            // trailing git metadata between sections
            i += 1;
            continue;
        }
        let (old_start, old_len, new_len) =
            parse_hunk_header(line).ok_or_else(|| bad(format!("bad hunk header `{line}`")))?;
        i += 1;
        let mut hunk = Hunk {
            old_start,
            old_len,
            new_len,
            lines: Vec::new(),
            old_no_eol: false,
            new_no_eol: false,
        };
        let (mut old_seen, mut new_seen) = (0, 0);
        while (old_seen < old_len || new_seen < new_len) && i < lines.len() {
            let l = lines[i];
            let (tag, body) = match l.chars().next() {
                Some(c) => (c, &l[1..]),
                // some tools drop the space on empty context lines
                None => (' ', ""),
            };
            match tag {
                ' ' => {
                    hunk.lines.push(HunkLine::Context(body.to_string()));
                    old_seen += 1;
                    new_seen += 1;
                }
                '-' => {
                    hunk.lines.push(HunkLine::Remove(body.to_string()));
                    old_seen += 1;
                }
                '+' => {
                    hunk.lines.push(HunkLine::Add(body.to_string()));
                    new_seen += 1;
                }
                '\\' => {}
                _ => return Err(bad(format!("unexpected line `{l}` in hunk"))),
            }
            i += 1;
            if lines.get(i).is_some_and(|n| n.starts_with('\\')) {
                match hunk.lines.last() {
                    Some(HunkLine::Remove(_)) => hunk.old_no_eol = true,
                    Some(HunkLine::Add(_)) => hunk.new_no_eol = true,
                    _ => {
                        hunk.old_no_eol = true;
                        hunk.new_no_eol = true;
                    }
                }
                i += 1;
            }
        }
        if old_seen != old_len || new_seen != new_len {
            return Err(bad(format!(
                "hunk at -{old_start} declares {old_len}/{new_len} lines, found {old_seen}/{new_seen}"
            )));
        }
        hunks.push(hunk);
    }
    if hunks.is_empty() {
        return Err(bad("no hunks".into()));
    }
    Ok(hunks)
}

/// Splits and validates a multi-file unified diff.
pub fn parse_patch(text: &str) -> Result<Vec<FilePatch>, PatchError> {
    let text = text.replace("\r\n", "\n");
    let lines: Vec<&str> = text.lines().collect();
    let mut starts = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let is_header = lines[i].starts_with("--- ")
            && lines.get(i + 1).is_some_and(|l| l.starts_with("+++ "))
            && lines.get(i + 2).is_some_and(|l| l.starts_with("@@"));
        if is_header {
            starts.push(i);
            i += 3;
        } else {
            i += 1;
        }
    }
    if starts.is_empty() {
        return Err(PatchError::Empty);
    }
    let mut out = Vec::with_capacity(starts.len());
    for (n, &start) in starts.iter().enumerate() {
        let end = starts.get(n + 1).copied().unwrap_or(lines.len());
        let section: Vec<&str> = lines[start..end]
            .iter()
            .take_while(|l| !l.starts_with("diff --git "))
            .copied()
            .collect();
        let old_path = header_path(&section[0][4..])?;
        let new_path = header_path(&section[1][4..])?;
        let name = match (&old_path, &new_path) {
            (_, Some(p)) | (Some(p), None) => p.clone(),
            (None, None) => return Err(PatchError::MissingHeader(n)),
        };
        let hunks = parse_hunks(&name, &section[2..])?;
        out.push(FilePatch {
            old_path,
            new_path,
            hunks,
        });
    }
    Ok(out)
}

fn split_lines(text: &str) -> (Vec<String>, bool) {
    let has_eol = text.is_empty() || text.ends_with('\n');
    let lines = text.lines().map(str::to_string).collect();
    (lines, has_eol)
}

fn matches_at(lines: &[String], at: usize, old: &[&str]) -> bool {
    at + old.len() <= lines.len() && lines[at..at + old.len()].iter().zip(old).all(|(a, b)| a == b)
}

fn apply_hunks(file: &str, base: &str, hunks: &[Hunk]) -> Result<String, PatchError> {
    let (mut lines, mut has_eol) = split_lines(base);
    // offset between old-file line numbers and current positions
    let mut delta: isize = 0;
    let mut floor = 0usize;
    for (h, hunk) in hunks.iter().enumerate() {
        let old: Vec<&str> = hunk
            .lines
            .iter()
            .filter_map(|l| match l {
                HunkLine::Context(s) | HunkLine::Remove(s) => Some(s.as_str()),
                HunkLine::Add(_) => None,
            })
            .collect();
        let new: Vec<String> = hunk
            .lines
            .iter()
            .filter_map(|l| match l {
                HunkLine::Context(s) | HunkLine::Add(s) => Some(s.clone()),
                HunkLine::Remove(_) => None,
            })
            .collect();
        let stated = if hunk.old_len == 0 {
            hunk.old_start
        } else {
            hunk.old_start.saturating_sub(1)
        };
        let expected = (stated as isize + delta).max(floor as isize) as usize;
        let at = if matches_at(&lines, expected, &old) {
            expected
        } else {
            let upper = lines.len().saturating_sub(old.len());
            (floor..=upper)
                .filter(|&p| matches_at(&lines, p, &old))
                .min_by_key(|&p| p.abs_diff(expected))
                .ok_or_else(|| PatchError::DoesNotApply {
                    file: file.to_string(),
                    hunk: h + 1,
                })?
        };
        let touches_end = at + old.len() == lines.len();
        lines.splice(at..at + old.len(), new.iter().cloned());
        if touches_end {
            if hunk.new_no_eol {
                has_eol = false;
            } else if hunk.old_no_eol || !new.is_empty() {
                has_eol = true;
            }
        }
        delta += new.len() as isize - old.len() as isize;
        floor = at + new.len();
    }
    let mut out = lines.join("\n");
    if has_eol && !lines.is_empty() {
        out.push('\n');
    }
    Ok(out)
}

const CONTEXT: usize = 3;

/// Renders a unified diff between two texts with three lines of context.
///
/// Line matching comes from `similar`; hunk headers are computed here from
/// the op sequence, since the library's own headers can be wrong when a
/// hunk opens with a deletion.
pub fn unified_diff(old: &str, new: &str, from: &str, to: &str) -> String {
    let diff = similar::TextDiff::from_lines(old, new);
    let (olds, news) = (diff.old_slices(), diff.new_slices());
    // (tag, text, old line index, new line index)
    let mut rows: Vec<(char, &str, usize, usize)> = Vec::new();
    let (mut oi, mut ni) = (0usize, 0usize);
    for op in diff.ops() {
        let (tag, old_range, new_range) = op.as_tag_tuple();
        if tag == similar::DiffTag::Equal {
            for k in old_range {
                rows.push((' ', olds[k], oi, ni));
                oi += 1;
                ni += 1;
            }
            continue;
        }
        for k in old_range {
            rows.push(('-', olds[k], oi, ni));
            oi += 1;
        }
        for k in new_range {
            rows.push(('+', news[k], oi, ni));
            ni += 1;
        }
    }
    let changed: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].0 != ' ').collect();
    let mut out = String::new();
    if changed.is_empty() {
        return out;
    }
    out.push_str(&format!("--- {from}\n+++ {to}\n"));
    let mut spans: Vec<(usize, usize)> = Vec::new();
    for &c in &changed {
        let lo = c.saturating_sub(CONTEXT);
        let hi = (c + CONTEXT + 1).min(rows.len());
        match spans.last_mut() {
            Some(last) if lo <= last.1 => last.1 = hi,
            _ => spans.push((lo, hi)),
        }
    }
    for (lo, hi) in spans {
        let body = &rows[lo..hi];
        let old_len = body.iter().filter(|r| r.0 != '+').count();
        let new_len = body.iter().filter(|r| r.0 != '-').count();
        let start = |first: usize, len: usize| if len == 0 { first } else { first + 1 };
        out.push_str(&format!(
            "@@ -{},{} +{},{} @@\n",
            start(body[0].2, old_len),
            old_len,
            start(body[0].3, new_len),
            new_len
        ));
        for &(tag, text, _, _) in body {
            out.push(tag);
            match text.strip_suffix('\n') {
                Some(line) => {
                    out.push_str(line);
                    out.push('\n');
                }
                None => {
                    out.push_str(text);
                    out.push_str("\n\\ No newline at end of file\n");
                }
            }
        }
    }
    out
}

/// Result of applying one file section: new contents, or `None` for deletion.
pub(crate) fn apply_file_patch(
    root: &Path,
    fp: &FilePatch,
    current: Option<&str>,
) -> Result<Option<String>, PatchError> {
    let base = match (&fp.old_path, current) {
        (None, _) => {
            if root.join(fp.path()).exists() {
                return Err(PatchError::FileExists(fp.path().to_string()));
            }
            String::new()
        }
        (Some(_), Some(text)) => text.to_string(),
        (Some(path), None) => return Err(PatchError::MissingFile(path.clone())),
    };
    let patched = apply_hunks(fp.path(), &base, &fp.hunks)?;
    Ok(fp.new_path.as_ref().map(|_| patched))
}

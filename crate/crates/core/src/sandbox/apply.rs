//! All-or-nothing edit application.
//!
//! Every block is resolved against staged in-memory contents first; files are
//! written only once the whole edit has succeeded.

use std::collections::BTreeMap;

use thiserror::Error;

use super::patch::{apply_file_patch, parse_patch, unified_diff, PatchError};
use super::Workspace;
use crate::types::Edit;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ApplyError {
    #[error("block {block}: search text not found in `{file}`")]
    NoMatch { file: String, block: usize },
    #[error("block {block}: search text matches {count} times in `{file}`")]
    AmbiguousMatch {
        file: String,
        block: usize,
        count: usize,
    },
    #[error("block {block}: `{file}` does not exist")]
    MissingFile { file: String, block: usize },
    #[error("block {block}: {reason}")]
    InvalidBlock { block: usize, reason: String },
    #[error("an edit is already applied to this workspace")]
    AlreadyApplied,
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error("io error: {0}")]
    Io(String),
}

impl ApplyError {
    /// Short machine-readable reason, e.g. for evaluation records.
    pub fn reason(&self) -> &'static str {
        match self {
            ApplyError::NoMatch { .. } => "no_match",
            ApplyError::AmbiguousMatch { .. } => "ambiguous_match",
            ApplyError::MissingFile { .. } => "missing_file",
            ApplyError::InvalidBlock { .. } => "invalid_block",
            ApplyError::AlreadyApplied => "already_applied",
            ApplyError::Patch(_) => "patch_failed",
            ApplyError::Io(_) => "io",
        }
    }
}

fn normalize(text: &str) -> String {
    text.replace("\r\n", "\n")
}

/// Occurrences of `needle` in `haystack`, overlapping ones included.
fn occurrences(haystack: &str, needle: &str) -> Vec<usize> {
    let mut found = Vec::new();
    let mut from = 0;
    while let Some(pos) = haystack[from..].find(needle) {
        found.push(from + pos);
        let step = haystack[from + pos..].chars().next().map_or(1, char::len_utf8);
        from += pos + step;
        if from > haystack.len() {
            break;
        }
    }
    found
}

/// Git-style diff of one file.
pub fn render_file_diff(path: &str, old: Option<&str>, new: Option<&str>) -> String {
    let (from, to) = (
        if old.is_some() { format!("a/{path}") } else { "/dev/null".into() },
        if new.is_some() { format!("b/{path}") } else { "/dev/null".into() },
    );
    let body = unified_diff(old.unwrap_or(""), new.unwrap_or(""), &from, &to);
    format!("diff --git a/{path} b/{path}\n{body}")
}

type Staged = BTreeMap<String, (Option<String>, Option<String>)>;

fn read_current(ws: &Workspace, rel: &str) -> Result<Option<String>, ApplyError> {
    match std::fs::read(ws.root().join(rel)) {
        Ok(bytes) => Ok(Some(normalize(&String::from_utf8_lossy(&bytes)))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(ApplyError::Io(format!("{rel}: {e}"))),
    }
}

fn stage_blocks(ws: &Workspace, edit: &Edit) -> Result<Staged, ApplyError> {
    let mut staged: Staged = BTreeMap::new();
    for (i, block) in edit.blocks.iter().enumerate() {
        let n = i + 1;
        block.validate().map_err(|e| ApplyError::InvalidBlock {
            block: n,
            reason: e.to_string(),
        })?;
        if !staged.contains_key(&block.file_path) {
            let original = read_current(ws, &block.file_path)?.ok_or(ApplyError::MissingFile {
                file: block.file_path.clone(),
                block: n,
            })?;
            staged.insert(block.file_path.clone(), (Some(original.clone()), Some(original)));
        }
        let (_, current) = staged.get_mut(&block.file_path).expect("staged above");
        let text = current.as_mut().expect("block files are never deleted");
        let search = normalize(&block.search_text);
        let hits = occurrences(text, &search);
        match hits.len() {
            0 => {
                return Err(ApplyError::NoMatch {
                    file: block.file_path.clone(),
                    block: n,
                })
            }
            1 => {
                let at = hits[0];
                text.replace_range(at..at + search.len(), &normalize(&block.replace_text));
            }
            count => {
                return Err(ApplyError::AmbiguousMatch {
                    file: block.file_path.clone(),
                    block: n,
                    count,
                })
            }
        }
    }
    Ok(staged)
}

fn stage_patch(ws: &Workspace, edit: &Edit) -> Result<Staged, ApplyError> {
    let mut staged: Staged = BTreeMap::new();
    for fp in parse_patch(&edit.unified_diff)? {
        let key = fp.path().to_string();
        let current = match staged.get(&key) {
            Some((_, cur)) => cur.clone(),
            None => read_current(ws, &key)?,
        };
        let result = apply_file_patch(ws.root(), &fp, current.as_deref())?;
        let original = match staged.remove(&key) {
            Some((orig, _)) => orig,
            None => current,
        };
        staged.insert(key, (original, result));
    }
    Ok(staged)
}

/// Applies `edit` to the workspace and returns its unified diff, which is
/// also cached on the edit. On any error the workspace is left untouched.
pub fn apply_edit(ws: &mut Workspace, edit: &mut Edit) -> Result<String, ApplyError> {
    if ws.applied_edit.is_some() {
        return Err(ApplyError::AlreadyApplied);
    }
    let staged = if edit.is_patch() {
        stage_patch(ws, edit)?
    } else {
        stage_blocks(ws, edit)?
    };
    let mut diff = String::new();
    for (path, (original, current)) in &staged {
        if original == current {
            continue;
        }
        let full = ws.root().join(path);
        match current {
            Some(text) => {
                if let Some(parent) = full.parent() {
                    std::fs::create_dir_all(parent).map_err(|e| ApplyError::Io(e.to_string()))?;
                }
                std::fs::write(&full, text).map_err(|e| ApplyError::Io(e.to_string()))?;
            }
            None => std::fs::remove_file(&full).map_err(|e| ApplyError::Io(e.to_string()))?,
        }
        if !edit.is_patch() {
            diff.push_str(&render_file_diff(path, original.as_deref(), current.as_deref()));
        }
    }
    if edit.is_patch() {
        diff = edit.unified_diff.clone();
    } else {
        edit.unified_diff = diff.clone();
    }
    ws.applied_edit = Some(edit.clone());
    Ok(diff)
}

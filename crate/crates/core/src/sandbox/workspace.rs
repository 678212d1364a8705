use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use tempfile::TempDir;
use walkdir::WalkDir;

use super::{SandboxConfig, SandboxError};
use crate::types::Edit;

/// A private, disposable copy of a codebase snapshot. Removed on drop.
#[derive(Debug)]
pub struct Workspace {
    id: String,
    dir: TempDir,
    pub(crate) applied_edit: Option<Edit>,
}

impl Workspace {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn root(&self) -> &Path {
        self.dir.path()
    }

    pub fn applied_edit(&self) -> Option<&Edit> {
        self.applied_edit.as_ref()
    }
}

/// Copies `snapshot` into a fresh directory under the configured root.
pub fn materialize(snapshot: &Path, config: &SandboxConfig) -> Result<Workspace, SandboxError> {
    let err = |source: std::io::Error| SandboxError::Materialize {
        path: snapshot.to_path_buf(),
        source,
    };
    if !snapshot.is_dir() {
        return Err(err(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            "snapshot is not a directory",
        )));
    }
    let mut builder = tempfile::Builder::new();
    builder.prefix("ws-");
    let dir = match &config.workspace_root {
        Some(root) => {
            std::fs::create_dir_all(root).map_err(err)?;
            builder.tempdir_in(root)
        }
        None => builder.tempdir(),
    }
    .map_err(err)?;
    copy_tree(snapshot, dir.path()).map_err(err)?;
    let id = dir
        .path()
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Workspace {
        id,
        dir,
        applied_edit: None,
    })
}

fn copy_tree(from: &Path, to: &Path) -> std::io::Result<()> {
    for entry in WalkDir::new(from).min_depth(1).sort_by_file_name() {
        let entry = entry.map_err(std::io::Error::other)?;
        let rel = entry.path().strip_prefix(from).expect("walk stays under root");
        let dest = to.join(rel);
        let ft = entry.file_type();
        if ft.is_dir() {
            std::fs::create_dir_all(&dest)?;
        } else if ft.is_symlink() {
            let target = std::fs::read_link(entry.path())?;
            std::os::unix::fs::symlink(target, &dest)?;
        } else {
            std::fs::copy(entry.path(), &dest)?;
        }
    }
    Ok(())
}

/// SHA-256 over every regular file's relative path and bytes, in path order.
pub fn tree_digest(root: &Path) -> std::io::Result<String> {
    let mut hasher = Sha256::new();
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in WalkDir::new(root).min_depth(1).sort_by_file_name() {
        let entry = entry.map_err(std::io::Error::other)?;
        if entry.file_type().is_file() {
            files.push(entry.path().to_path_buf());
        }
    }
    for path in files {
        let rel = path.strip_prefix(root).expect("walk stays under root");
        let rel = rel.to_string_lossy();
        hasher.update((rel.len() as u64).to_le_bytes());
        hasher.update(rel.as_bytes());
        let bytes = std::fs::read(&path)?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}

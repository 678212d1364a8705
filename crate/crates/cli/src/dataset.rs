//! Datasets are directories holding one subdirectory per instance, each with
//! an `instance.toml` descriptor. Paths in a descriptor are relative to its
//! own directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use monkeys_core::{validate_dataset, Instance, OracleCommand, SourceFilter};
use serde::Deserialize;

pub const DESCRIPTOR: &str = "instance.toml";

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Descriptor {
    instance_id: String,
    #[serde(default)]
    issue_text: Option<String>,
    #[serde(default)]
    issue_file: Option<PathBuf>,
    snapshot: PathBuf,
    #[serde(default)]
    filter: SourceFilter,
    #[serde(default)]
    gold_files: Option<BTreeSet<String>>,
    /// Oracle argv; `{workspace}` is replaced with the edited copy's path.
    #[serde(default)]
    oracle: Option<Vec<String>>,
}

fn load_descriptor(path: &Path) -> Result<Instance> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let d: Descriptor = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let issue_text = match (d.issue_text, d.issue_file) {
        (Some(t), None) => t,
        (None, Some(f)) => std::fs::read_to_string(dir.join(&f))
            .with_context(|| format!("reading issue file {}", dir.join(&f).display()))?,
        _ => bail!("{}: give exactly one of issue_text and issue_file", path.display()),
    };
    Ok(Instance {
        instance_id: d.instance_id,
        issue_text,
        codebase_ref: dir.join(d.snapshot),
        source_file_filter: d.filter,
        gold_edit_files: d.gold_files,
        oracle_eval: d.oracle.map(|argv| OracleCommand { argv }),
    })
}

/// All instances under `dir`, sorted by id and validated.
pub fn load_dataset(dir: &Path) -> Result<Vec<Instance>> {
    let entries = std::fs::read_dir(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    let mut instances = Vec::new();
    for entry in entries {
        let descriptor = entry?.path().join(DESCRIPTOR);
        if descriptor.is_file() {
            instances.push(load_descriptor(&descriptor)?);
        }
    }
    instances.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    validate_dataset(&instances).context("invalid dataset")?;
    if instances.is_empty() {
        bail!("dataset {} has no instances", dir.display());
    }
    Ok(instances)
}

/// The first `limit` instances by id.
pub fn apply_limit(mut instances: Vec<Instance>, limit: Option<usize>) -> Vec<Instance> {
    if let Some(n) = limit {
        instances.truncate(n);
    }
    instances
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_instance(root: &Path, id: &str, extra: &str) {
        let dir = root.join(id);
        std::fs::create_dir_all(dir.join("repo")).unwrap();
        std::fs::write(dir.join("repo/a.py"), "x = 1\n").unwrap();
        std::fs::write(
            dir.join(DESCRIPTOR),
            format!("instance_id = \"{id}\"\nissue_text = \"fix it\"\nsnapshot = \"repo\"\n{extra}"),
        )
        .unwrap();
    }

    #[test]
    fn loads_sorted_and_limits() {
        let root = tempfile::tempdir().unwrap();
        write_instance(root.path(), "b", "gold_files = [\"a.py\"]\noracle = [\"true\"]\n");
        write_instance(root.path(), "a", "");
        let all = load_dataset(root.path()).unwrap();
        assert_eq!(all.iter().map(|i| i.instance_id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert!(all[1].oracle_eval.is_some());
        assert_eq!(all[1].codebase_ref, root.path().join("b/repo"));
        assert_eq!(apply_limit(all, Some(1)).len(), 1);
    }

    #[test]
    fn rejects_bad_descriptors() {
        let root = tempfile::tempdir().unwrap();
        write_instance(root.path(), "a", "gold_files = [\"../etc/passwd\"]\n");
        assert!(load_dataset(root.path()).is_err());
        let root = tempfile::tempdir().unwrap();
        write_instance(root.path(), "a", "");
        write_instance(root.path(), "b", "");
        std::fs::write(
            root.path().join("b").join(DESCRIPTOR),
            "instance_id = \"a\"\nissue_text = \"x\"\nsnapshot = \"repo\"\n",
        )
        .unwrap();
        assert!(load_dataset(root.path()).is_err());
    }
}

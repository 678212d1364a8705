//! Codebase context: relevance scan over every source file, repeated model
//! rankings aggregated by mean rank, and assembly under a token cap.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::llm::{complete, ChatBackend, ChatMessage, ChatRequest, RetryPolicy, TokenUsage};
use crate::pool::parallel_map;
use crate::prompts::{PromptError, Prompts};
use crate::tokens::TokenCounter;
use crate::types::{Instance, Role, SCHEMA_VERSION};

pub const DEFAULT_CAP: usize = 128_000;
pub const DEFAULT_TARGET_TOKENS: usize = 60_000;
pub const DEFAULT_REPETITIONS: usize = 3;
pub const DEFAULT_CHUNK_TOKENS: usize = 32_000;

/// Summary stored for files whose relevance call failed; they are kept.
pub const FAILED_SCAN_SUMMARY: &str = "(relevance check failed; file kept)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextConfig {
    pub chunk_tokens: usize,
    pub repetitions: usize,
    pub target_tokens: usize,
    pub cap: usize,
    pub scan_temperature: f64,
    pub rank_temperature: f64,
    pub workers: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            chunk_tokens: DEFAULT_CHUNK_TOKENS,
            repetitions: DEFAULT_REPETITIONS,
            target_tokens: DEFAULT_TARGET_TOKENS,
            cap: DEFAULT_CAP,
            scan_temperature: 0.0,
            rank_temperature: 0.0,
            workers: 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("cannot list snapshot: {0}")]
    Listing(String),
    #[error("no relevant files to rank")]
    NothingToRank,
    #[error("ranking failed: no repetition produced a usable ranking ({0})")]
    RankingFailure(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceVerdict {
    pub file_path: String,
    pub relevant: bool,
    /// Nonempty exactly when `relevant`.
    pub summary: String,
    pub file_token_count: usize,
    /// Set when the verdict is a fail-closed default rather than a model answer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub usage: TokenUsage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub file_path: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanOutcome {
    pub verdicts: Vec<RelevanceVerdict>,
    pub skipped: Vec<SkippedFile>,
}

impl ScanOutcome {
    pub fn usage(&self) -> TokenUsage {
        self.verdicts.iter().map(|v| v.usage).sum()
    }

    pub fn total_tokens(&self) -> usize {
        self.verdicts.iter().map(|v| v.file_token_count).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFile {
    pub path: String,
    pub average_rank: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingRepetition {
    /// Paths in the order the model listed them; empty when dropped.
    pub listed: Vec<String>,
    pub dropped: bool,
    pub reprompted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub usage: TokenUsage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub order: Vec<RankedFile>,
    pub repetitions: Vec<RankingRepetition>,
}

impl Ranking {
    pub fn usage(&self) -> TokenUsage {
        self.repetitions.iter().map(|r| r.usage).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedContext {
    pub ranked: Vec<RankedFile>,
    /// Always a prefix of `ranked`.
    pub included_files: Vec<String>,
    pub total_included_tokens: usize,
    pub total_scanned_tokens: usize,
    pub cap: usize,
}

impl RankedContext {
    /// No file fit under the cap, or nothing was relevant.
    pub fn is_empty(&self) -> bool {
        self.included_files.is_empty()
    }
}

/// Everything the context stage persists for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextArtifact {
    pub schema_version: u32,
    pub instance_id: String,
    pub scan: ScanOutcome,
    pub ranking: Option<Ranking>,
    pub context: RankedContext,
}

impl ContextArtifact {
    pub fn relevance_usage(&self) -> TokenUsage {
        self.scan.usage()
    }

    pub fn ranking_usage(&self) -> TokenUsage {
        self.ranking.as_ref().map(Ranking::usage).unwrap_or_default()
    }
}

/// Relative paths (with `/` separators) of files the instance filter keeps, sorted.
pub fn list_source_files(instance: &Instance) -> Result<Vec<String>, ContextError> {
    let root = &instance.codebase_ref;
    let mut out = Vec::new();
    for entry in WalkDir::new(root).min_depth(1).sort_by_file_name() {
        let entry = entry.map_err(|e| ContextError::Listing(e.to_string()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(root).expect("walk stays under root");
        let rel = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        if instance.source_file_filter.accepts(&rel) {
            out.push(rel);
        }
    }
    out.sort();
    Ok(out)
}

/// Splits `text` at line boundaries into pieces of at most `budget` tokens.
/// A single line over budget becomes its own piece.
pub fn chunk_text(text: &str, budget: usize, counter: &dyn TokenCounter) -> Vec<String> {
    if counter.count(text) <= budget {
        return vec![text.to_string()];
    }
    let mut chunks = Vec::new();
    let mut current = String::new();
    for line in text.split_inclusive('\n') {
        if !current.is_empty() && counter.count(&current) + counter.count(line) > budget {
            chunks.push(std::mem::take(&mut current));
        }
        current.push_str(line);
    }
    if !current.is_empty() {
        chunks.push(current);
    }
    chunks
}

/// `(relevant, summary)` from a reply whose first nonempty line is the verdict.
fn parse_relevance(reply: &str) -> Option<(bool, String)> {
    let mut lines = reply.lines().skip_while(|l| l.trim().is_empty());
    let first = lines.next()?;
    let head = first.trim().trim_matches(|c: char| c == '*' || c == '#' || c == '`').trim();
    let upper = head.to_ascii_uppercase();
    let (relevant, rest) = if upper.starts_with("IRRELEVANT") {
        (false, &head["IRRELEVANT".len()..])
    } else if upper.starts_with("RELEVANT") {
        (true, &head["RELEVANT".len()..])
    } else {
        return None;
    };
    if !relevant {
        return Some((false, String::new()));
    }
    let mut summary = rest.trim_start_matches([':', '.', '-', ' ', '*']).trim().to_string();
    let tail: Vec<&str> = lines.collect();
    let tail = tail.join("\n");
    let tail = tail.trim();
    if !tail.is_empty() {
        if !summary.is_empty() {
            summary.push('\n');
        }
        summary.push_str(tail);
    }
    if summary.is_empty() {
        summary = "(no summary given)".into();
    }
    Some((true, summary))
}

struct ScanTools<'a> {
    backend: &'a dyn ChatBackend,
    counter: &'a dyn TokenCounter,
    prompts: &'a Prompts,
    retry: &'a RetryPolicy,
    config: &'a ContextConfig,
}

impl ScanTools<'_> {
    fn scan_file(&self, instance: &Instance, rel: &str) -> Result<RelevanceVerdict, SkippedFile> {
        let skipped = |reason: String| SkippedFile {
            file_path: rel.to_string(),
            reason,
        };
        let bytes = std::fs::read(instance.codebase_ref.join(rel)).map_err(|e| skipped(e.to_string()))?;
        let text = String::from_utf8(bytes)
            .map_err(|_| skipped("not valid UTF-8".into()))?
            .replace("\r\n", "\n");
        let tokens = self.counter.count(&text);
        let chunks = chunk_text(&text, self.config.chunk_tokens.max(1), self.counter);
        let mut verdict = RelevanceVerdict {
            file_path: rel.to_string(),
            relevant: false,
            summary: String::new(),
            file_token_count: tokens,
            error: None,
            usage: TokenUsage::default(),
        };
        let mut summaries = Vec::new();
        for (k, chunk) in chunks.iter().enumerate() {
            let (conversation, note) = if chunks.len() == 1 {
                (format!("{}/relevance/{rel}", instance.instance_id), String::new())
            } else {
                (
                    format!("{}/relevance/{rel}#{}", instance.instance_id, k + 1),
                    format!(" part=\"{} of {}\"", k + 1, chunks.len()),
                )
            };
            let prompt = self
                .prompts
                .render(
                    "relevance",
                    &[
                        ("issue", &instance.issue_text),
                        ("path", rel),
                        ("chunk_note", &note),
                        ("contents", chunk),
                    ],
                )
                .map_err(|e| skipped(e.to_string()))?;
            let request = ChatRequest::new(
                conversation,
                vec![ChatMessage::new(Role::User, prompt)],
                self.config.scan_temperature,
            );
            let outcome = complete(&request, self.backend, self.retry)
                .map_err(|e| e.to_string())
                .and_then(|done| {
                    verdict.usage = verdict.usage + done.usage;
                    parse_relevance(&done.text)
                        .ok_or_else(|| "reply did not start with RELEVANT or IRRELEVANT".to_string())
                });
            match outcome {
                Ok((true, summary)) => {
                    verdict.relevant = true;
                    summaries.push(summary);
                }
                Ok((false, _)) => {}
                Err(reason) => {
                    verdict.relevant = true;
                    verdict.error.get_or_insert(reason);
                }
            }
        }
        if verdict.relevant {
            verdict.summary = if summaries.is_empty() {
                FAILED_SCAN_SUMMARY.to_string()
            } else {
                summaries.join("\n")
            };
        }
        Ok(verdict)
    }
}

/// One relevance verdict per filtered file. Oversized files are split into
/// chunks and count as relevant if any chunk does; a failed call keeps the
/// file, flagged.
pub fn scan_relevance(
    instance: &Instance,
    backend: &dyn ChatBackend,
    counter: &dyn TokenCounter,
    prompts: &Prompts,
    retry: &RetryPolicy,
    config: &ContextConfig,
) -> Result<ScanOutcome, ContextError> {
    let files = list_source_files(instance)?;
    let tools = ScanTools {
        backend,
        counter,
        prompts,
        retry,
        config,
    };
    let results = parallel_map(&files, config.workers, |_, rel| tools.scan_file(instance, rel));
    let mut outcome = ScanOutcome::default();
    for r in results {
        match r {
            Ok(v) => outcome.verdicts.push(v),
            Err(s) => outcome.skipped.push(s),
        }
    }
    Ok(outcome)
}

fn strip_list_marker(line: &str) -> &str {
    let line = line.trim();
    let line = line.trim_start_matches(['-', '*', '•']).trim_start();
    let digits = line.len() - line.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return r.trim_start();
        }
    }
    line.trim_matches('`')
}

/// Paths from the `ranking` fenced block that name known files, first mention kept.
pub fn parse_ranking(reply: &str, known: &BTreeSet<String>) -> Result<Vec<String>, String> {
    let mut body: Option<Vec<&str>> = None;
    let mut inside = false;
    for line in reply.lines() {
        let t = line.trim();
        if !inside {
            if t.strip_prefix("```").is_some_and(|tag| tag.trim() == "ranking") {
                if body.is_some() {
                    return Err("more than one ranking block".into());
                }
                inside = true;
                body = Some(Vec::new());
            }
        } else if t == "```" {
            inside = false;
        } else if let Some(b) = body.as_mut() {
            b.push(line);
        }
    }
    if inside {
        return Err("unterminated ranking block".into());
    }
    let body = body.ok_or("no ```ranking block found")?;
    let mut seen = BTreeSet::new();
    let listed: Vec<String> = body
        .into_iter()
        .map(strip_list_marker)
        .filter(|p| known.contains(*p))
        .filter(|p| seen.insert(p.to_string()))
        .map(str::to_string)
        .collect();
    if listed.is_empty() {
        return Err("the ranking names none of the listed files".into());
    }
    Ok(listed)
}

/// Mean rank per file over `repetitions`; a file a repetition omits gets
/// rank `listed + 1` there. Sorted by mean rank, then path.
pub fn aggregate_rankings(files: &[String], repetitions: &[Vec<String>]) -> Vec<(String, f64)> {
    assert!(!repetitions.is_empty(), "at least one repetition");
    let mut sums: BTreeMap<&str, usize> = files.iter().map(|f| (f.as_str(), 0)).collect();
    for rep in repetitions {
        let pos: BTreeMap<&str, usize> = rep.iter().enumerate().map(|(i, p)| (p.as_str(), i + 1)).collect();
        for (file, sum) in sums.iter_mut() {
            *sum += pos.get(file).copied().unwrap_or(rep.len() + 1);
        }
    }
    let mut order: Vec<(&str, usize)> = sums.into_iter().collect();
    // equal repetition counts, so integer sums order exactly like means
    order.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    let n = repetitions.len() as f64;
    order
        .into_iter()
        .map(|(f, s)| (f.to_string(), s as f64 / n))
        .collect()
}

fn render_file_listing(relevant: &[&RelevanceVerdict]) -> String {
    relevant
        .iter()
        .map(|v| {
            format!(
                "<file path=\"{}\" tokens=\"{}\">\n{}\n</file>",
                v.file_path, v.file_token_count, v.summary
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Ranks the relevant files by repeated model rankings.
#[allow(clippy::too_many_arguments)]
pub fn rank_files(
    instance_id: &str,
    issue: &str,
    verdicts: &[RelevanceVerdict],
    backend: &dyn ChatBackend,
    prompts: &Prompts,
    retry: &RetryPolicy,
    config: &ContextConfig,
) -> Result<Ranking, ContextError> {
    let mut relevant: Vec<&RelevanceVerdict> = verdicts.iter().filter(|v| v.relevant).collect();
    if relevant.is_empty() {
        return Err(ContextError::NothingToRank);
    }
    // canonical order keeps the prompt independent of input order
    relevant.sort_by(|a, b| a.file_path.cmp(&b.file_path));
    relevant.dedup_by(|a, b| a.file_path == b.file_path);
    let tokens: BTreeMap<&str, usize> = relevant
        .iter()
        .map(|v| (v.file_path.as_str(), v.file_token_count))
        .collect();
    let files: Vec<String> = relevant.iter().map(|v| v.file_path.clone()).collect();

    if files.len() == 1 {
        return Ok(Ranking {
            order: vec![RankedFile {
                path: files[0].clone(),
                average_rank: 1.0,
                tokens: tokens[files[0].as_str()],
            }],
            repetitions: Vec::new(),
        });
    }

    let known: BTreeSet<String> = files.iter().cloned().collect();
    let prompt = prompts.render(
        "ranking",
        &[
            ("issue", issue),
            ("files", &render_file_listing(&relevant)),
            ("target_tokens", &config.target_tokens.to_string()),
        ],
    )?;
    let reps: Vec<usize> = (0..config.repetitions.max(1)).collect();
    let results = parallel_map(&reps, config.workers, |_, &r| {
        let conversation = format!("{instance_id}/ranking/{r}");
        let mut messages = vec![ChatMessage::new(Role::User, prompt.clone())];
        let mut rep = RankingRepetition {
            listed: Vec::new(),
            dropped: true,
            reprompted: false,
            error: None,
            usage: TokenUsage::default(),
        };
        for attempt in 0..2 {
            let request = ChatRequest::new(conversation.clone(), messages.clone(), config.rank_temperature);
            let done = match complete(&request, backend, retry) {
                Ok(done) => done,
                Err(e) => {
                    rep.error = Some(e.to_string());
                    return Ok(rep);
                }
            };
            rep.usage = rep.usage + done.usage;
            match parse_ranking(&done.text, &known) {
                Ok(listed) => {
                    rep.listed = listed;
                    rep.dropped = false;
                    rep.error = None;
                    return Ok(rep);
                }
                Err(reason) => {
                    rep.error = Some(reason.clone());
                    if attempt == 0 {
                        rep.reprompted = true;
                        messages.push(ChatMessage::new(Role::Assistant, done.text));
                        messages.push(ChatMessage::new(
                            Role::User,
                            prompts.render("ranking_correction", &[("reason", &reason)])?,
                        ));
                    }
                }
            }
        }
        Ok::<_, PromptError>(rep)
    });
    let repetitions = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let valid: Vec<Vec<String>> = repetitions
        .iter()
        .filter(|r| !r.dropped)
        .map(|r| r.listed.clone())
        .collect();
    if valid.is_empty() {
        let reasons = repetitions
            .iter()
            .filter_map(|r| r.error.clone())
            .collect::<Vec<_>>()
            .join("; ");
        return Err(ContextError::RankingFailure(reasons));
    }
    let order = aggregate_rankings(&files, &valid)
        .into_iter()
        .map(|(path, average_rank)| RankedFile {
            tokens: tokens[path.as_str()],
            path,
            average_rank,
        })
        .collect();
    Ok(Ranking { order, repetitions })
}

/// Takes whole files in rank order until the next one would exceed `cap`.
pub fn assemble_context(ranked: &[RankedFile], total_scanned_tokens: usize, cap: usize) -> RankedContext {
    let mut included_files = Vec::new();
    let mut total = 0usize;
    for f in ranked {
        if total + f.tokens > cap {
            break;
        }
        total += f.tokens;
        included_files.push(f.path.clone());
    }
    RankedContext {
        ranked: ranked.to_vec(),
        included_files,
        total_included_tokens: total,
        total_scanned_tokens,
        cap,
    }
}

/// Whether every gold file made it into the context; `None` without gold files.
pub fn compute_recall(context: &RankedContext, gold_files: &BTreeSet<String>) -> Option<bool> {
    if gold_files.is_empty() {
        return None;
    }
    let included: BTreeSet<&str> = context.included_files.iter().map(String::as_str).collect();
    Some(gold_files.iter().all(|g| included.contains(g.as_str())))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallSummary {
    /// `None` when no instance had gold files.
    pub recall: Option<f64>,
    pub evaluated: usize,
    pub excluded: usize,
}

pub fn dataset_recall(per_instance: &[Option<bool>]) -> RecallSummary {
    let evaluated = per_instance.iter().filter(|r| r.is_some()).count();
    let hits = per_instance.iter().filter(|r| **r == Some(true)).count();
    RecallSummary {
        recall: (evaluated > 0).then(|| hits as f64 / evaluated as f64),
        evaluated,
        excluded: per_instance.len() - evaluated,
    }
}

/// Scanned tokens over included tokens; `None` when nothing was included.
pub fn compression_factor(context: &RankedContext) -> Option<f64> {
    (context.total_included_tokens > 0)
        .then(|| context.total_scanned_tokens as f64 / context.total_included_tokens as f64)
}

/// Full context stage for one instance. Relevance goes to `scanner` and
/// ranking to `ranker`, which may be the same backend. An instance with no
/// relevant file gets an empty context rather than an error.
pub fn build_context(
    instance: &Instance,
    scanner: &dyn ChatBackend,
    ranker: &dyn ChatBackend,
    counter: &dyn TokenCounter,
    prompts: &Prompts,
    retry: &RetryPolicy,
    config: &ContextConfig,
) -> Result<ContextArtifact, ContextError> {
    let scan = scan_relevance(instance, scanner, counter, prompts, retry, config)?;
    let scanned = scan.total_tokens();
    let (ranking, context) = match rank_files(
        &instance.instance_id,
        &instance.issue_text,
        &scan.verdicts,
        ranker,
        prompts,
        retry,
        config,
    ) {
        Ok(ranking) => {
            let ctx = assemble_context(&ranking.order, scanned, config.cap);
            (Some(ranking), ctx)
        }
        Err(ContextError::NothingToRank) => (None, assemble_context(&[], scanned, config.cap)),
        Err(e) => return Err(e),
    };
    Ok(ContextArtifact {
        schema_version: SCHEMA_VERSION,
        instance_id: instance.instance_id.clone(),
        scan,
        ranking,
        context,
    })
}

/// Included files with their contents, for machine prompts.
pub fn render_context_files(snapshot: &Path, included: &[String]) -> std::io::Result<String> {
    let mut out = Vec::with_capacity(included.len());
    for rel in included {
        let text = std::fs::read_to_string(snapshot.join(rel))?.replace("\r\n", "\n");
        out.push(format!("<file path=\"{rel}\">\n{text}</file>"));
    }
    Ok(out.join("\n"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{MockBackend, PlaybookEntry, PlaybookFile, PlaybookScript};
    use crate::tokens::HeuristicCounter;
    use crate::types::SourceFilter;
    use proptest::prelude::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn fixture(files: &[(&str, &str)]) -> (tempfile::TempDir, Instance) {
        let dir = tempfile::tempdir().unwrap();
        for (rel, body) in files {
            let p = dir.path().join(rel);
            std::fs::create_dir_all(p.parent().unwrap()).unwrap();
            std::fs::write(p, body).unwrap();
        }
        let inst = Instance {
            instance_id: "i1".into(),
            issue_text: "the bug".into(),
            codebase_ref: dir.path().to_path_buf(),
            source_file_filter: SourceFilter::default(),
            gold_edit_files: None,
            oracle_eval: None,
        };
        (dir, inst)
    }

    fn playbook(entries: &[(&str, &[&str])]) -> MockBackend {
        let scripts = entries
            .iter()
            .map(|(key, replies)| PlaybookScript {
                key: key.to_string(),
                turns: replies.iter().map(|r| PlaybookEntry::reply(*r)).collect(),
            })
            .collect();
        MockBackend::new([PlaybookFile { scripts }]).unwrap()
    }

    fn scan(inst: &Instance, backend: &MockBackend, config: &ContextConfig) -> ScanOutcome {
        scan_relevance(
            inst,
            backend,
            &HeuristicCounter,
            &Prompts::builtin(),
            &RetryPolicy::immediate(1),
            config,
        )
        .unwrap()
    }

    #[test]
    fn scan_marks_scripted_files() {
        let (_d, inst) = fixture(&[
            ("a.py", "a = 1\n"),
            ("b.py", "b = 2\n"),
            ("c.py", "c = 3\n"),
            ("tests/test_a.py", "skip"),
            ("notes.md", "skip"),
        ]);
        let backend = playbook(&[
            ("i1/relevance/a.py", &["IRRELEVANT"]),
            ("i1/relevance/b.py", &["RELEVANT\nholds b"]),
            ("i1/relevance/c.py", &["IRRELEVANT"]),
        ]);
        let out = scan(&inst, &backend, &ContextConfig::default());
        let got: Vec<(&str, bool, &str)> = out
            .verdicts
            .iter()
            .map(|v| (v.file_path.as_str(), v.relevant, v.summary.as_str()))
            .collect();
        assert_eq!(got, vec![("a.py", false, ""), ("b.py", true, "holds b"), ("c.py", false, "")]);
        assert_eq!(backend.calls(), 3);
    }

    #[test]
    fn empty_repository_scans_to_nothing() {
        let (_d, inst) = fixture(&[("README.md", "x")]);
        let out = scan(&inst, &MockBackend::scripted(Vec::<String>::new()), &ContextConfig::default());
        assert!(out.verdicts.is_empty());
    }

    #[test]
    fn oversized_file_relevant_if_any_chunk_is() {
        // 3 lines of 40 bytes = 10 tokens each; budget 10 gives 3 chunks
        let line = format!("{}\n", "x".repeat(39));
        let body = line.repeat(3);
        let (_d, inst) = fixture(&[("big.py", &body)]);
        let config = ContextConfig {
            chunk_tokens: 10,
            ..ContextConfig::default()
        };
        for relevant_chunk in 1..=3 {
            let replies: Vec<(String, Vec<&str>)> = (1..=3)
                .map(|k| {
                    let reply = if k == relevant_chunk { "RELEVANT: part" } else { "IRRELEVANT" };
                    (format!("i1/relevance/big.py#{k}"), vec![reply])
                })
                .collect();
            let entries: Vec<(&str, &[&str])> =
                replies.iter().map(|(k, r)| (k.as_str(), r.as_slice())).collect();
            let backend = playbook(&entries);
            let out = scan(&inst, &backend, &config);
            assert_eq!(backend.calls(), 3);
            assert!(out.verdicts[0].relevant);
            assert_eq!(out.verdicts[0].summary, "part");
        }
        let entries: Vec<(String, Vec<&str>)> = (1..=3)
            .map(|k| (format!("i1/relevance/big.py#{k}"), vec!["IRRELEVANT"]))
            .collect();
        let entries: Vec<(&str, &[&str])> = entries.iter().map(|(k, r)| (k.as_str(), r.as_slice())).collect();
        assert!(!scan(&inst, &playbook(&entries), &config).verdicts[0].relevant);
    }

    #[test]
    fn failed_scan_keeps_file() {
        let (_d, inst) = fixture(&[("a.py", "a\n")]);
        let backend = playbook(&[]);
        let out = scan(&inst, &backend, &ContextConfig::default());
        let v = &out.verdicts[0];
        assert!(v.relevant);
        assert_eq!(v.summary, FAILED_SCAN_SUMMARY);
        assert!(v.error.is_some());
    }

    #[test]
    fn chunking_respects_budget() {
        let text = "aaaa\nbbbb\ncccc\ndddd\n";
        let chunks = chunk_text(text, 3, &HeuristicCounter);
        assert_eq!(chunks.concat(), text);
        assert!(chunks.iter().all(|c| HeuristicCounter.count(c) <= 3));
    }

    #[test]
    fn mean_rank_examples() {
        let files = s(&["A", "B", "C"]);
        let agg = aggregate_rankings(
            &files,
            &[s(&["A", "B", "C"]), s(&["B", "A", "C"]), s(&["A", "C", "B"])],
        );
        let names: Vec<&str> = agg.iter().map(|(f, _)| f.as_str()).collect();
        assert_eq!(names, ["A", "B", "C"]);
        // hand computed: A=(1+2+1)/3, B=(2+1+3)/3, C=(3+3+2)/3
        assert!((agg[0].1 - 4.0 / 3.0).abs() < 1e-12);
        assert!((agg[1].1 - 2.0).abs() < 1e-12);
        assert!((agg[2].1 - 8.0 / 3.0).abs() < 1e-12);

        let agg = aggregate_rankings(&s(&["A", "B"]), &[s(&["A", "B"]), s(&["B"])]);
        assert_eq!(agg, vec![("A".to_string(), 1.5), ("B".to_string(), 1.5)]);
    }

    fn verdict(path: &str, tokens: usize) -> RelevanceVerdict {
        RelevanceVerdict {
            file_path: path.into(),
            relevant: true,
            summary: format!("about {path}"),
            file_token_count: tokens,
            error: None,
            usage: TokenUsage::default(),
        }
    }

    fn ranking_block(paths: &[&str]) -> String {
        format!("```ranking\n{}\n```", paths.join("\n"))
    }

    #[test]
    fn rank_files_end_to_end() {
        let verdicts = vec![verdict("c.py", 1), verdict("a.py", 1), verdict("b.py", 1)];
        let r1 = ranking_block(&["a.py", "b.py", "c.py"]);
        let r2 = ranking_block(&["b.py", "a.py", "c.py"]);
        let r3 = ranking_block(&["a.py", "c.py", "b.py"]);
        let backend = playbook(&[
            ("i1/ranking/0", &[r1.as_str()]),
            ("i1/ranking/1", &[r2.as_str()]),
            ("i1/ranking/2", &[r3.as_str()]),
        ]);
        let ranking = rank_files(
            "i1",
            "bug",
            &verdicts,
            &backend,
            &Prompts::builtin(),
            &RetryPolicy::immediate(1),
            &ContextConfig::default(),
        )
        .unwrap();
        let order: Vec<&str> = ranking.order.iter().map(|f| f.path.as_str()).collect();
        assert_eq!(order, ["a.py", "b.py", "c.py"]);
    }

    #[test]
    fn ranking_reprompts_once_then_drops() {
        let verdicts = vec![verdict("a.py", 1), verdict("b.py", 1)];
        let good = ranking_block(&["b.py", "a.py"]);
        let backend = playbook(&[
            ("i1/ranking/0", &["no idea", good.as_str()]),
            ("i1/ranking/1", &["nope", "still nope"]),
            ("i1/ranking/2", &[good.as_str()]),
        ]);
        let ranking = rank_files(
            "i1",
            "bug",
            &verdicts,
            &backend,
            &Prompts::builtin(),
            &RetryPolicy::immediate(1),
            &ContextConfig::default(),
        )
        .unwrap();
        assert!(ranking.repetitions[0].reprompted && !ranking.repetitions[0].dropped);
        assert!(ranking.repetitions[1].dropped);
        assert_eq!(ranking.order[0].path, "b.py");

        let all_bad = playbook(&[("i1/ranking/*", &["x", "y"])]);
        let err = rank_files(
            "i1",
            "bug",
            &verdicts,
            &all_bad,
            &Prompts::builtin(),
            &RetryPolicy::immediate(1),
            &ContextConfig::default(),
        );
        assert!(matches!(err, Err(ContextError::RankingFailure(_))));
    }

    #[test]
    fn singleton_needs_no_calls() {
        let backend = MockBackend::scripted(Vec::<String>::new());
        let ranking = rank_files(
            "i1",
            "bug",
            &[verdict("f.py", 9)],
            &backend,
            &Prompts::builtin(),
            &RetryPolicy::immediate(1),
            &ContextConfig::default(),
        )
        .unwrap();
        assert_eq!(ranking.order[0].path, "f.py");
        assert_eq!(backend.calls(), 0);
    }

    #[test]
    fn parse_ranking_filters_unknown_and_markers() {
        let known: BTreeSet<String> = s(&["a.py", "b.py"]).into_iter().collect();
        let reply = "Sure.\n```ranking\n1. b.py\n- zzz.py\n`a.py`\nb.py\n```";
        assert_eq!(parse_ranking(reply, &known).unwrap(), s(&["b.py", "a.py"]));
        assert!(parse_ranking("```ranking\nzzz\n```", &known).is_err());
        assert!(parse_ranking("```ranking\na.py\n", &known).is_err());
    }

    fn ranked(sizes: &[(&str, usize)]) -> Vec<RankedFile> {
        sizes
            .iter()
            .enumerate()
            .map(|(i, (p, t))| RankedFile {
                path: p.to_string(),
                average_rank: (i + 1) as f64,
                tokens: *t,
            })
            .collect()
    }

    #[test]
    fn assembly_stops_at_first_overflow() {
        let r = ranked(&[("A", 50_000), ("B", 60_000), ("C", 30_000)]);
        let ctx = assemble_context(&r, 200_000, 128_000);
        assert_eq!(ctx.included_files, s(&["A", "B"]));
        assert_eq!(ctx.total_included_tokens, 110_000);

        let ctx = assemble_context(&ranked(&[("A", 200_000), ("B", 1)]), 0, 128_000);
        assert!(ctx.is_empty());

        let ctx = assemble_context(&ranked(&[("A", 1), ("B", 2)]), 3, 128_000);
        assert_eq!(ctx.included_files.len(), 2);
    }

    #[test]
    fn recall_and_compression() {
        let ctx = assemble_context(&ranked(&[("x", 50), ("y", 50)]), 1000, 1000);
        let gold = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<BTreeSet<_>>();
        assert_eq!(compute_recall(&ctx, &gold(&["x"])), Some(true));
        assert_eq!(compute_recall(&ctx, &gold(&["x", "z"])), Some(false));
        assert_eq!(compute_recall(&ctx, &gold(&[])), None);
        assert_eq!(compression_factor(&ctx), Some(10.0));
        let same = assemble_context(&ranked(&[("x", 5)]), 5, 10);
        assert_eq!(compression_factor(&same), Some(1.0));
        assert_eq!(compression_factor(&assemble_context(&[], 5, 10)), None);

        let mut flags = vec![Some(true); 27];
        flags.extend([Some(false), Some(false), None]);
        let summary = dataset_recall(&flags);
        assert_eq!(summary.evaluated, 29);
        assert_eq!(summary.excluded, 1);
        assert!((summary.recall.unwrap() - 27.0 / 29.0).abs() < 1e-12);
        assert_eq!(format!("{:.3}", summary.recall.unwrap()), "0.931");
    }

    proptest! {
        #[test]
        fn cap_and_prefix_hold(sizes in proptest::collection::vec(0usize..5000, 0..20), cap in 0usize..20_000) {
            let files: Vec<(String, usize)> = sizes.iter().enumerate().map(|(i, t)| (format!("f{i}"), *t)).collect();
            let refs: Vec<(&str, usize)> = files.iter().map(|(p, t)| (p.as_str(), *t)).collect();
            let r = ranked(&refs);
            let ctx = assemble_context(&r, 0, cap);
            prop_assert!(ctx.total_included_tokens <= cap);
            for (i, f) in ctx.included_files.iter().enumerate() {
                prop_assert_eq!(f, &r[i].path);
            }
        }

        #[test]
        fn recall_monotone_in_cap(sizes in proptest::collection::vec(1usize..5000, 1..12), gold_ix in 0usize..12, a in 0usize..30_000, b in 0usize..30_000) {
            let files: Vec<(String, usize)> = sizes.iter().enumerate().map(|(i, t)| (format!("f{i}"), *t)).collect();
            let refs: Vec<(&str, usize)> = files.iter().map(|(p, t)| (p.as_str(), *t)).collect();
            let r = ranked(&refs);
            let gold: BTreeSet<String> = [files[gold_ix % files.len()].0.clone()].into();
            let (lo, hi) = (a.min(b), a.max(b));
            let at_lo = compute_recall(&assemble_context(&r, 0, lo), &gold).unwrap();
            let at_hi = compute_recall(&assemble_context(&r, 0, hi), &gold).unwrap();
            prop_assert!(!at_lo || at_hi);
        }

        #[test]
        fn identical_repetitions_keep_order(n in 1usize..8, reps in 1usize..5, seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut files: Vec<String> = (0..n).map(|i| format!("f{i}")).collect();
            files.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let agg = aggregate_rankings(&files, &vec![files.clone(); reps]);
            let got: Vec<String> = agg.into_iter().map(|(f, _)| f).collect();
            prop_assert_eq!(got, files);
        }

        #[test]
        fn ranking_ignores_verdict_order(seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut verdicts = vec![verdict("a.py", 1), verdict("b.py", 2), verdict("c.py", 3)];
            let reply = ranking_block(&["c.py", "a.py"]);
            let backend = playbook(&[("i1/ranking/*", &[reply.as_str()])]);
            let run = |v: &[RelevanceVerdict]| rank_files("i1", "bug", v, &backend, &Prompts::builtin(), &RetryPolicy::immediate(1), &ContextConfig::default()).unwrap().order;
            let base = run(&verdicts);
            verdicts.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(run(&verdicts), base);
        }
    }
}

//! Coverage, score and cost metrics computed from recorded runs, including
//! the sweep over parallel machines and serial iterations.

use std::collections::{BTreeMap, HashMap};

use itertools::Itertools;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::RecallSummary;
use crate::llm::{usage_cost, PriceTable, TokenUsage};
use crate::pool::parallel_map;
use crate::sandbox::{apply_edit, evaluate_candidate, materialize, run_script, SandboxConfig};
use crate::selection::majority_expected_score;
use crate::types::{
    CorrectnessRecord, Edit, Instance, IterationSnapshot, TestScript, TestSignal, Trajectory,
};

/// Above this many machines the score sweep samples subsets instead of
/// enumerating them.
pub const EXHAUSTIVE_LIMIT: usize = 12;
pub const SAMPLED_SUBSETS: usize = 1000;
pub const SWEEP_SEED: u64 = 0x6d6f_6e6b;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnalyticsError {
    #[error("k = {k} exceeds the {n} candidates of an instance")]
    KTooLarge { k: usize, n: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("{correct} correct out of {n} candidates")]
    BadCount { n: usize, correct: usize },
}

/// Fraction of instances with at least one correct candidate.
pub fn coverage(records: &[CorrectnessRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.any_correct()).count() as f64 / records.len() as f64
}

/// C(n - c, k) / C(n, k) as a running product, so nothing overflows.
fn all_miss_probability(n: usize, c: usize, k: usize) -> f64 {
    if k > n - c {
        return 0.0;
    }
    (0..k).map(|t| (n - c - t) as f64 / (n - t) as f64).product()
}

/// Chance that a uniformly random k-subset of one instance's candidates
/// contains a correct one.
pub fn coverage_at_k_single(n: usize, c: usize, k: usize) -> Result<f64, AnalyticsError> {
    if c > n {
        return Err(AnalyticsError::BadCount { n, correct: c });
    }
    if k == 0 {
        return Err(AnalyticsError::ZeroK);
    }
    if k > n {
        return Err(AnalyticsError::KTooLarge { k, n });
    }
    Ok(1.0 - all_miss_probability(n, c, k))
}

/// Mean over instances of [`coverage_at_k_single`]; `counts` holds
/// (candidates, correct) per instance.
pub fn coverage_at_k(counts: &[(usize, usize)], k: usize) -> Result<f64, AnalyticsError> {
    if counts.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for &(n, c) in counts {
        sum += coverage_at_k_single(n, c, k)?;
    }
    Ok(sum / counts.len() as f64)
}

/// The snapshot a machine would have ended on with a budget of `i`
/// completions. Approval freezes the machine at its approval point.
pub fn truncate_at_iteration(trajectory: &Trajectory, i: usize) -> Option<&IterationSnapshot> {
    assert!(i >= 1, "iterations are counted from 1");
    let snaps = &trajectory.iteration_snapshots;
    if snaps.is_empty() {
        return None;
    }
    snaps.get(i.min(snaps.len()) - 1)
}

/// One generation machine: its optional testing trajectory and its editing
/// trajectory.
#[derive(Debug, Clone, Copy)]
pub struct MachinePair<'a> {
    pub testing: Option<&'a Trajectory>,
    pub editing: &'a Trajectory,
}

/// Everything the sweep needs about one instance, already evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepInstance {
    pub instance_id: String,
    /// `correct[m][i - 1]`: machine m's edit after i completions is correct.
    pub correct: Vec<Vec<bool>>,
    /// `passes[i - 1][a][b]`: machine b's test after i completions passes
    /// on machine a's edit after i completions.
    pub passes: Vec<Vec<Vec<bool>>>,
    /// `usage[m][i - 1]`: machine m's first i editing completions plus its
    /// whole testing trajectory, which seeded the editing machine.
    pub usage: Vec<Vec<TokenUsage>>,
}

impl SweepInstance {
    pub fn machines(&self) -> usize {
        self.correct.len()
    }

    pub fn max_iterations(&self) -> usize {
        self.passes.len()
    }

    fn correct_count(&self, i: usize) -> usize {
        self.correct.iter().filter(|c| c[i - 1]).count()
    }

    /// Expected majority-vote score when only the machines in `subset` run.
    pub fn subset_score(&self, subset: &[usize], i: usize) -> f64 {
        let grid = &self.passes[i - 1];
        let counts: Vec<usize> = subset
            .iter()
            .map(|&a| subset.iter().filter(|&&b| grid[a][b]).count())
            .collect();
        let correct: Vec<bool> = subset.iter().map(|&a| self.correct[a][i - 1]).collect();
        majority_expected_score(&counts, &correct)
    }
}

fn empty_edit() -> Edit {
    Edit::from_blocks(Vec::new())
}

/// Evaluates every truncation of every machine of one instance. Machines
/// are those whose editing trajectory ended with an edit; identical
/// (edit, test) pairs are run once.
pub fn collect_sweep_instance(
    instance: &Instance,
    machines: &[MachinePair<'_>],
    max_iterations: usize,
    sandbox: &SandboxConfig,
    workers: usize,
) -> Result<Option<SweepInstance>, crate::sandbox::SandboxError> {
    let machines: Vec<&MachinePair<'_>> =
        machines.iter().filter(|m| m.editing.final_edit().is_some()).collect();
    if machines.is_empty() {
        return Ok(None);
    }
    let snapshot = |m: &MachinePair<'_>, i: usize| -> (Edit, Option<TestScript>) {
        let snap = truncate_at_iteration(m.editing, i).expect("has snapshots");
        let test = snap
            .test
            .clone()
            .or_else(|| m.testing.and_then(|t| t.final_test().cloned()));
        (snap.edit.clone().unwrap_or_else(empty_edit), test)
    };
    let grid: Vec<Vec<(Edit, Option<TestScript>)>> = (1..=max_iterations)
        .map(|i| machines.iter().map(|m| snapshot(m, i)).collect())
        .collect();

    let mut edits: BTreeMap<String, Edit> = BTreeMap::new();
    let mut tests: BTreeMap<String, TestScript> = BTreeMap::new();
    for row in &grid {
        for (e, t) in row {
            edits.entry(e.digest()).or_insert_with(|| e.clone());
            if let Some(t) = t {
                tests.entry(t.digest()).or_insert_with(|| t.clone());
            }
        }
    }
    let edit_list: Vec<(&String, &Edit)> = edits.iter().collect();
    let verdicts = parallel_map(&edit_list, workers, |_, (_, e)| evaluate_candidate(instance, e, sandbox));
    let mut correct_by_digest = HashMap::new();
    for ((d, _), v) in edit_list.iter().zip(verdicts) {
        correct_by_digest.insert((*d).clone(), v?.correct);
    }

    let mut pairs: Vec<(String, String)> = Vec::new();
    for row in &grid {
        for (e, _) in row {
            for (_, t) in row {
                if let Some(t) = t {
                    pairs.push((e.digest(), t.digest()));
                }
            }
        }
    }
    pairs.sort();
    pairs.dedup();
    let outcomes = parallel_map(&pairs, workers, |_, (ed, td)| {
        let run = || -> Result<bool, crate::sandbox::SandboxError> {
            let mut ws = materialize(&instance.codebase_ref, sandbox)?;
            if apply_edit(&mut ws, &mut edits[ed].clone()).is_err() {
                return Ok(false);
            }
            Ok(run_script(&mut ws, &tests[td], sandbox)?.signal() == TestSignal::Fixed)
        };
        // an infrastructure failure counts as not passing, as in the vote matrix
        run().unwrap_or(false)
    });
    let pass_by_pair: HashMap<(String, String), bool> = pairs.into_iter().zip(outcomes).collect();

    let correct = (0..machines.len())
        .map(|m| grid.iter().map(|row| correct_by_digest[&row[m].0.digest()]).collect())
        .collect();
    let passes = grid
        .iter()
        .map(|row| {
            row.iter()
                .map(|(e, _)| {
                    row.iter()
                        .map(|(_, t)| t.as_ref().is_some_and(|t| pass_by_pair[&(e.digest(), t.digest())]))
                        .collect()
                })
                .collect()
        })
        .collect();
    let usage = machines
        .iter()
        .map(|m| {
            (1..=max_iterations)
                .map(|i| m.editing.usage_through(i) + m.testing.map(Trajectory::total_usage).unwrap_or_default())
                .collect()
        })
        .collect();
    Ok(Some(SweepInstance {
        instance_id: instance.instance_id.clone(),
        correct,
        passes,
        usage,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k_machines: usize,
    pub i_iterations: usize,
    pub coverage: f64,
    /// Expected majority-vote score.
    pub score: f64,
    /// Summed over instances, scaled to k of n machines.
    pub estimated_cost_usd: f64,
    pub instances: usize,
    /// Instances left out because they have fewer than k machines.
    pub excluded: usize,
}

/// The subsets the score at size `k` averages over: all of them for small
/// `n`, otherwise a seeded sample.
pub fn score_subsets(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    if n <= EXHAUSTIVE_LIMIT {
        return (0..n).combinations(k).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((n as u64) << 32) ^ k as u64);
    (0..SAMPLED_SUBSETS)
        .map(|_| {
            let mut s = rand::seq::index::sample(&mut rng, n, k).into_vec();
            s.sort_unstable();
            s
        })
        .collect()
}

/// Coverage, expected majority-vote score and cost at every (k, i).
pub fn sweep(data: &[SweepInstance], ks: &[usize], is: &[usize], prices: &PriceTable) -> Vec<SweepPoint> {
    let mut points = Vec::new();
    for &k in ks {
        for &i in is {
            let usable: Vec<&SweepInstance> = data.iter().filter(|d| k >= 1 && k <= d.machines()).collect();
            let excluded = data.len() - usable.len();
            let mut cov = 0.0;
            let mut score = 0.0;
            let mut cost = 0.0;
            for d in &usable {
                let i_eff = i.clamp(1, d.max_iterations());
                cov += coverage_at_k_single(d.machines(), d.correct_count(i_eff), k).expect("k checked");
                let subsets = score_subsets(d.machines(), k, SWEEP_SEED);
                score += subsets.iter().map(|s| d.subset_score(s, i_eff)).sum::<f64>() / subsets.len() as f64;
                let all: f64 = d.usage.iter().map(|u| usage_cost(&u[i_eff - 1], prices).usd()).sum();
                cost += all * k as f64 / d.machines() as f64;
            }
            let denom = usable.len().max(1) as f64;
            points.push(SweepPoint {
                k_machines: k,
                i_iterations: i,
                coverage: cov / denom,
                score: score / denom,
                estimated_cost_usd: cost,
                instances: usable.len(),
                excluded,
            });
        }
    }
    points
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub name: String,
    pub score: f64,
    /// (score - random) / (oracle - random); absent when the gap is zero.
    pub recovered_gap: Option<f64>,
}

/// Mean over instances of the fraction of correct candidates.
pub fn random_expected(records: &[CorrectnessRecord]) -> f64 {
    let per: Vec<f64> = records
        .iter()
        .filter(|r| !r.correct.is_empty())
        .map(|r| r.correct.iter().filter(|&&c| c).count() as f64 / r.correct.len() as f64)
        .collect();
    if records.is_empty() {
        return 0.0;
    }
    per.iter().sum::<f64>() / records.len() as f64
}

/// Rows: random, each method, oracle. `selections` maps a method name to
/// one selected index per record, in the same order.
pub fn selection_gap_report(
    records: &[CorrectnessRecord],
    selections: &BTreeMap<String, Vec<usize>>,
) -> Vec<GapRow> {
    let random = random_expected(records);
    let oracle = coverage(records);
    let gap = |s: f64| (oracle - random > 1e-12).then(|| (s - random) / (oracle - random));
    let mut rows = vec![GapRow {
        name: "random".into(),
        score: random,
        recovered_gap: gap(random),
    }];
    for (name, picks) in selections {
        assert_eq!(picks.len(), records.len(), "one pick per instance");
        let hits = records
            .iter()
            .zip(picks)
            .filter(|(r, &p)| r.correct.get(p).copied().unwrap_or(false))
            .count();
        let score = if records.is_empty() { 0.0 } else { hits as f64 / records.len() as f64 };
        rows.push(GapRow {
            name: name.clone(),
            score,
            recovered_gap: gap(score),
        });
    }
    rows.push(GapRow {
        name: "oracle".into(),
        score: oracle,
        recovered_gap: gap(oracle),
    });
    rows
}

/// Per-subtask summary: context recall, generation coverage, final score.
pub fn render_summary(recall: Option<&RecallSummary>, coverage: f64, scores: &[(String, f64)]) -> String {
    let mut out = String::new();
    match recall.and_then(|r| r.recall.map(|v| (v, r.evaluated))) {
        Some((v, n)) => out.push_str(&format!(
            "context recall   {:>6.1}%  ({n} instances with gold files)\n",
            v * 100.0
        )),
        None => out.push_str("context recall      n/a  (no gold files)\n"),
    }
    out.push_str(&format!("coverage         {:>6.1}%\n", coverage * 100.0));
    for (name, s) in scores {
        out.push_str(&format!("score {:<10} {:>6.1}%\n", name, s * 100.0));
    }
    out
}

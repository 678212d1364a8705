//! Stage commands over a run store. Every command is idempotent per
//! instance: finished outputs are skipped unless `force` is set, and a
//! failure in one instance never stops the others.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context as _, Result};
use monkeys_core::analytics::{
    collect_sweep_instance, coverage, render_summary, selection_gap_report, sweep, GapRow, MachinePair,
    SweepInstance, SweepPoint,
};
use monkeys_core::context::{build_context, compute_recall, dataset_recall, render_context_files, ContextArtifact};
use monkeys_core::llm::{render_ledger, ChatBackend, CostLedger, CostTable, RetryPolicy, Stage};
use monkeys_core::machines::{
    run_machine, trajectory_id, EditingDriver, MachineEnv, MachineError, TestingDriver,
};
use monkeys_core::pool::parallel_map;
use monkeys_core::prompts::Prompts;
use monkeys_core::sandbox::evaluate_candidate;
use monkeys_core::selection::{
    build_vote_matrix, candidate_tests, ingest_ensemble, render_edit, select, select_ensemble, ModelInputs,
    SelectionMethod, SelectionRecord, VoteMatrix,
};
use monkeys_core::tokens::HeuristicCounter;
use monkeys_core::{
    CandidateSample, CandidateSource, CorrectnessRecord, Instance, MachineKind, Trajectory, SCHEMA_VERSION,
};
use serde::{Deserialize, Serialize};

use crate::backends::{build_backend, Limited, RequestLimit};
use crate::config::RunConfig;
use crate::dataset::{apply_limit, load_dataset};
use crate::store::{
    read_json, read_json_opt, remove_stale_temps, write_atomic, write_json, RunStore, CANDIDATES, CONTEXT, CORRECTNESS,
    ENSEMBLE_CANDIDATES, MATRIX, METRICS,
};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CommandReport {
    pub command: String,
    pub completed: Vec<String>,
    pub skipped: Vec<String>,
    pub failed: Vec<(String, String)>,
}

impl CommandReport {
    fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            ..Self::default()
        }
    }

    pub fn success(&self) -> bool {
        self.failed.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "{}: {} completed, {} skipped, {} failed\n",
            self.command,
            self.completed.len(),
            self.skipped.len(),
            self.failed.len()
        );
        for (id, err) in &self.failed {
            out.push_str(&format!("  {id}: {err}\n"));
        }
        out
    }

    fn record(&mut self, id: &str, outcome: Result<Outcome>) {
        match outcome {
            Ok(Outcome::Done) => self.completed.push(id.into()),
            Ok(Outcome::Skipped) => self.skipped.push(id.into()),
            Err(e) => self.failed.push((id.into(), format!("{e:#}"))),
        }
    }
}

enum Outcome {
    Done,
    Skipped,
}

/// Per-instance summary written by `analyze`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub schema_version: u32,
    pub instance_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall: Option<bool>,
    pub candidates: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covered: Option<bool>,
    /// Method name to whether its pick is correct (`None` without an oracle).
    pub resolved: BTreeMap<String, Option<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub summary: String,
    pub gap: Vec<GapRow>,
    pub sweep: Vec<SweepPoint>,
    pub metrics: Vec<InstanceMetrics>,
}

/// Submission record for benchmark tooling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub instance_id: String,
    pub patch: String,
    pub method: String,
    pub candidate_id: String,
}

pub struct Runner {
    pub config: RunConfig,
    config_text: String,
    pub store: RunStore,
    pub instances: Vec<Instance>,
    scanner: Arc<dyn ChatBackend>,
    primary: Arc<dyn ChatBackend>,
    prompts: Prompts,
    retry: RetryPolicy,
    pub force: bool,
}

impl Runner {
    /// Builds backends from the config.
    pub fn open(config_path: &std::path::Path, limit: Option<usize>, force: bool) -> Result<Self> {
        let text = std::fs::read_to_string(config_path)
            .with_context(|| format!("reading {}", config_path.display()))?;
        let base = config_path.parent().unwrap_or(std::path::Path::new("."));
        let config = RunConfig::parse(&text, base)?;
        let scanner = build_backend(&config.backends.scanner)?;
        let primary = if config.backends.primary == config.backends.scanner {
            scanner.clone()
        } else {
            build_backend(&config.backends.primary)?
        };
        Self::with_backends(config, text, scanner, primary, limit, force)
    }

    /// Uses the given backends instead of the configured ones.
    pub fn with_backends(
        config: RunConfig,
        config_text: String,
        scanner: Arc<dyn ChatBackend>,
        primary: Arc<dyn ChatBackend>,
        limit: Option<usize>,
        force: bool,
    ) -> Result<Self> {
        config.validate()?;
        let instances = apply_limit(load_dataset(&config.dataset)?, limit);
        let prompts = match &config.prompts_dir {
            Some(dir) => Prompts::with_overrides(dir)?,
            None => Prompts::builtin(),
        };
        let gate = RequestLimit::new(config.workers.backend_requests);
        Ok(Self {
            store: RunStore::new(config.run_root()),
            retry: config.retry.policy(),
            scanner: Arc::new(Limited::new(scanner, gate.clone())),
            primary: Arc::new(Limited::new(primary, gate)),
            config,
            config_text,
            instances,
            prompts,
            force,
        })
    }

    fn stamp_config(&self) -> Result<()> {
        remove_stale_temps(self.store.root())?;
        write_atomic(&self.store.config_path(), self.config_text.as_bytes())
    }

    fn for_each_instance<F>(&self, command: &str, f: F) -> CommandReport
    where
        F: Fn(&Instance) -> Result<Outcome> + Sync,
    {
        let mut report = CommandReport::new(command);
        if let Err(e) = self.stamp_config() {
            report.failed.push(("<run>".into(), format!("{e:#}")));
            return report;
        }
        let outcomes = parallel_map(&self.instances, self.config.workers.instances, |_, inst| f(inst));
        for (inst, outcome) in self.instances.iter().zip(outcomes) {
            report.record(&inst.instance_id, outcome);
        }
        report
    }

    fn env(&self) -> MachineEnv<'_> {
        MachineEnv {
            backend: &*self.primary,
            retry: &self.retry,
            sandbox: &self.config.sandbox,
            prompts: &self.prompts,
        }
    }

    fn context_text(&self, inst: &Instance) -> Result<String> {
        let path = self.store.artifact(&inst.instance_id, CONTEXT);
        let art: ContextArtifact = read_json_opt(&path)?
            .ok_or_else(|| anyhow!("missing {CONTEXT}; run the context stage first"))?;
        Ok(render_context_files(&inst.codebase_ref, &art.context.included_files)?)
    }

    fn candidates(&self, inst: &Instance) -> Result<Vec<CandidateSample>> {
        read_json_opt(&self.store.artifact(&inst.instance_id, CANDIDATES))?
            .ok_or_else(|| anyhow!("missing {CANDIDATES}; run the generate stage first"))
    }

    // ---- context -------------------------------------------------------

    pub fn context(&self) -> CommandReport {
        self.for_each_instance("context", |inst| {
            let path = self.store.artifact(&inst.instance_id, CONTEXT);
            if path.exists() && !self.force {
                return Ok(Outcome::Skipped);
            }
            let art = build_context(
                inst,
                &*self.scanner,
                &*self.primary,
                &HeuristicCounter,
                &self.prompts,
                &self.retry,
                &self.config.stages.context,
            )?;
            write_json(&path, &art)?;
            Ok(Outcome::Done)
        })
    }

    // ---- generate ------------------------------------------------------

    fn resume_or_run(
        &self,
        path: &std::path::Path,
        fresh: Trajectory,
        driver: &mut dyn monkeys_core::machines::Driver,
    ) -> Result<Trajectory> {
        let start = match read_json_opt::<Trajectory>(path)? {
            Some(t) if t.is_finished() => return Ok(t),
            Some(t) => t,
            None => fresh,
        };
        let mut sink = |t: &Trajectory| write_json(path, t).map_err(|e| MachineError::Persist(format!("{e:#}")));
        Ok(run_machine(driver, start, self.env(), &self.config.stages.generation, &mut sink)?)
    }

    fn run_pair(&self, inst: &Instance, context: &str, m: usize) -> Result<()> {
        let iid = &inst.instance_id;
        let max = self.config.stages.generation.max_completions;
        let fresh = |kind| Trajectory::new(trajectory_id(iid, kind, m), iid, kind, max);
        let testing = self.resume_or_run(
            &self.store.trajectory_path(iid, MachineKind::Testing, m),
            fresh(MachineKind::Testing),
            &mut TestingDriver::new(inst),
        )?;
        // without a test there is nothing to debug the edit against
        let Some(seed) = testing.final_test().cloned() else {
            return Ok(());
        };
        self.resume_or_run(
            &self.store.trajectory_path(iid, MachineKind::Editing, m),
            fresh(MachineKind::Editing),
            &mut EditingDriver::new(inst, context, seed),
        )?;
        Ok(())
    }

    fn native_candidates(&self, inst: &Instance) -> Result<Vec<CandidateSample>> {
        let mut out = Vec::new();
        for m in 0..self.config.stages.machines_per_instance {
            let path = self.store.trajectory_path(&inst.instance_id, MachineKind::Editing, m);
            let Some(traj) = read_json_opt::<Trajectory>(&path)? else {
                continue;
            };
            let Some(edit) = traj.final_edit() else {
                continue;
            };
            out.push(CandidateSample {
                candidate_id: traj.trajectory_id.clone(),
                instance_id: inst.instance_id.clone(),
                edit: render_edit(inst, edit, &self.config.sandbox),
                test: traj.final_test().cloned(),
                source: CandidateSource::Native,
                trajectory_id: Some(traj.trajectory_id.clone()),
            });
        }
        Ok(out)
    }

    fn finish_generation(&self, inst: &Instance) -> Result<()> {
        let candidates = self.native_candidates(inst)?;
        if inst.oracle_eval.is_some() {
            let mut by_digest = BTreeMap::new();
            let mut correct = Vec::with_capacity(candidates.len());
            for c in &candidates {
                let digest = c.edit.digest();
                let hit = match by_digest.get(&digest) {
                    Some(&hit) => hit,
                    None => evaluate_candidate(inst, &c.edit, &self.config.sandbox)?.correct,
                };
                by_digest.insert(digest, hit);
                correct.push(hit);
            }
            let record = CorrectnessRecord {
                instance_id: inst.instance_id.clone(),
                correct,
            };
            write_json(&self.store.artifact(&inst.instance_id, CORRECTNESS), &record)?;
        }
        // written last: its presence marks the stage complete
        write_json(&self.store.artifact(&inst.instance_id, CANDIDATES), &candidates)
    }

    fn clear_generation(&self, inst: &Instance) -> Result<()> {
        let iid = &inst.instance_id;
        for name in [CANDIDATES, CORRECTNESS, MATRIX] {
            let p = self.store.artifact(iid, name);
            if p.exists() {
                std::fs::remove_file(p)?;
            }
        }
        for m in 0..self.config.stages.machines_per_instance {
            for kind in [MachineKind::Testing, MachineKind::Editing] {
                let p = self.store.trajectory_path(iid, kind, m);
                if p.exists() {
                    std::fs::remove_file(p)?;
                }
            }
        }
        Ok(())
    }

    pub fn generate(&self) -> CommandReport {
        let mut report = CommandReport::new("generate");
        if let Err(e) = self.stamp_config() {
            report.failed.push(("<run>".into(), format!("{e:#}")));
            return report;
        }
        let mut ready: Vec<(&Instance, String)> = Vec::new();
        for inst in &self.instances {
            let iid = &inst.instance_id;
            if self.store.artifact(iid, CANDIDATES).exists() && !self.force {
                report.skipped.push(iid.clone());
                continue;
            }
            let prepared = (|| {
                let context = self.context_text(inst)?;
                if self.force {
                    self.clear_generation(inst)?;
                }
                Ok::<_, anyhow::Error>(context)
            })();
            match prepared {
                Ok(ctx) => ready.push((inst, ctx)),
                Err(e) => report.failed.push((iid.clone(), format!("{e:#}"))),
            }
        }
        let n = self.config.stages.machines_per_instance;
        let units: Vec<(usize, usize)> = (0..ready.len()).flat_map(|k| (0..n).map(move |m| (k, m))).collect();
        let results = parallel_map(&units, self.config.workers.machines, |_, &(k, m)| {
            let (inst, ctx) = &ready[k];
            self.run_pair(inst, ctx, m)
        });
        let mut errors: BTreeMap<usize, String> = BTreeMap::new();
        for (&(k, m), r) in units.iter().zip(results) {
            if let Err(e) = r {
                errors.entry(k).or_insert_with(|| format!("machine {m}: {e:#}"));
            }
        }
        for (k, (inst, _)) in ready.iter().enumerate() {
            let outcome = match errors.remove(&k) {
                Some(e) => Err(anyhow!(e)),
                None => self.finish_generation(inst).map(|_| Outcome::Done),
            };
            report.record(&inst.instance_id, outcome);
        }
        report.completed.sort();
        report.failed.sort();
        report
    }

    // ---- select --------------------------------------------------------

    fn matrix(&self, inst: &Instance, candidates: &[CandidateSample]) -> Result<VoteMatrix> {
        let path = self.store.artifact(&inst.instance_id, MATRIX);
        if let Some(m) = read_json_opt::<VoteMatrix>(&path)? {
            if m.candidate_ids.len() == candidates.len() {
                return Ok(m);
            }
        }
        let tests = candidate_tests(candidates);
        let m = build_vote_matrix(inst, candidates, &tests, &self.config.sandbox, self.config.workers.sandbox);
        write_json(&path, &m)?;
        Ok(m)
    }

    fn selection_resume(&self, path: &std::path::Path) -> Result<Option<Trajectory>> {
        if self.force && path.exists() {
            std::fs::remove_file(path)?;
            return Ok(None);
        }
        read_json_opt(path)
    }

    pub fn select(&self, method: SelectionMethod) -> CommandReport {
        if method == SelectionMethod::Ensemble {
            let mut r = CommandReport::new("select");
            r.failed.push(("<run>".into(), "use the ensemble-select command".into()));
            return r;
        }
        let mut report = self.for_each_instance(&format!("select {}", method.name()), |inst| {
            let iid = &inst.instance_id;
            let out = self.store.selection_path(iid, method);
            if out.exists() && !self.force {
                return Ok(Outcome::Skipped);
            }
            let candidates = self.candidates(inst)?;
            if candidates.is_empty() {
                bail!("no candidate edits to select from");
            }
            let matrix = self.matrix(inst, &candidates)?;
            let traj_path = self.store.selection_trajectory_path(iid, method);
            let model = if method.uses_model() {
                let mut machine = self.config.stages.selection.clone();
                if matches!(method, SelectionMethod::Model | SelectionMethod::ModelTop3) {
                    machine.temperature = self.config.stages.model_select_temperature;
                }
                Some((self.context_text(inst)?, machine, self.selection_resume(&traj_path)?))
            } else {
                None
            };
            let mut sink = |t: &Trajectory| write_json(&traj_path, t).map_err(|e| MachineError::Persist(format!("{e:#}")));
            let (record, _) = match &model {
                Some((ctx, machine, resume)) => select(
                    inst,
                    &candidates,
                    &matrix,
                    method,
                    Some(ModelInputs {
                        env: self.env(),
                        machine,
                        context: ctx,
                        resume: resume.clone(),
                    }),
                    &mut sink,
                )?,
                None => select(inst, &candidates, &matrix, method, None, &mut sink)?,
            };
            write_json(&out, &record)?;
            Ok(Outcome::Done)
        });
        if let Err(e) = self.export_predictions(method) {
            report.failed.push(("<run>".into(), format!("{e:#}")));
        }
        report
    }

    fn export_predictions(&self, method: SelectionMethod) -> Result<()> {
        let mut lines = String::new();
        for inst in &self.instances {
            if let Some(rec) = read_json_opt::<SelectionRecord>(&self.store.selection_path(&inst.instance_id, method))? {
                let p = Prediction {
                    instance_id: rec.instance_id,
                    patch: rec.patch,
                    method: method.name().into(),
                    candidate_id: rec.candidate_id,
                };
                lines.push_str(&serde_json::to_string(&p)?);
                lines.push('\n');
            }
        }
        write_atomic(
            &self.store.report_path(&format!("predictions-{}.jsonl", method.name())),
            lines.as_bytes(),
        )
    }

    /// Pools the native pick with other systems' predictions and lets the
    /// selection machine choose directly.
    pub fn ensemble_select(&self, files: &[PathBuf], native: SelectionMethod) -> CommandReport {
        let input = match ingest_ensemble(files) {
            Ok(i) => i,
            Err(e) => {
                let mut r = CommandReport::new("ensemble-select");
                r.failed.push(("<run>".into(), e.to_string()));
                return r;
            }
        };
        let method = SelectionMethod::Ensemble;
        let mut report = self.for_each_instance("ensemble-select", |inst| {
            let iid = &inst.instance_id;
            let out = self.store.selection_path(iid, method);
            if out.exists() && !self.force {
                return Ok(Outcome::Skipped);
            }
            let pick: SelectionRecord = read_json_opt(&self.store.selection_path(iid, native))?
                .ok_or_else(|| anyhow!("missing selection-{}.json; run select first", native.name()))?;
            let candidates = self.candidates(inst)?;
            let native_cand = candidates
                .get(pick.selected_index)
                .ok_or_else(|| anyhow!("native selection index out of range"))?;
            let external = input.candidates.get(iid).cloned().unwrap_or_default();
            write_json(&self.store.artifact(iid, ENSEMBLE_CANDIDATES), &external)?;
            let context = self.context_text(inst)?;
            let traj_path = self.store.selection_trajectory_path(iid, method);
            let resume = self.selection_resume(&traj_path)?;
            let mut sink = |t: &Trajectory| write_json(&traj_path, t).map_err(|e| MachineError::Persist(format!("{e:#}")));
            let model = ModelInputs {
                env: self.env(),
                machine: &self.config.stages.selection,
                context: &context,
                resume,
            };
            let (record, _) = select_ensemble(inst, native_cand, &external, model, &mut sink)?;
            write_json(&out, &record)?;
            Ok(Outcome::Done)
        });
        let dropped = write_json(&self.store.report_path("ensemble-dropped.json"), &input.dropped)
            .and_then(|_| self.export_predictions(method));
        if let Err(e) = dropped {
            report.failed.push(("<run>".into(), format!("{e:#}")));
        }
        report
    }

    // ---- analyze -------------------------------------------------------

    fn instance_metrics(&self, inst: &Instance) -> Result<(InstanceMetrics, Option<CorrectnessRecord>)> {
        let iid = &inst.instance_id;
        let context: Option<ContextArtifact> = read_json_opt(&self.store.artifact(iid, CONTEXT))?;
        let recall = match (&context, &inst.gold_edit_files) {
            (Some(c), Some(gold)) => compute_recall(&c.context, gold),
            _ => None,
        };
        let candidates = self.candidates(inst)?;
        let correctness: Option<CorrectnessRecord> = read_json_opt(&self.store.artifact(iid, CORRECTNESS))?;
        let mut resolved = BTreeMap::new();
        for method in SelectionMethod::NATIVE {
            if let Some(rec) = read_json_opt::<SelectionRecord>(&self.store.selection_path(iid, method))? {
                let hit = correctness
                    .as_ref()
                    .map(|c| monkeys_core::is_resolved(c, rec.selected_index))
                    .transpose()?;
                resolved.insert(method.name().to_string(), hit);
            }
        }
        let ens = SelectionMethod::Ensemble;
        if let Some(rec) = read_json_opt::<SelectionRecord>(&self.store.selection_path(iid, ens))? {
            let hit = match inst.oracle_eval {
                Some(_) => {
                    let edit = monkeys_core::Edit::from_patch(rec.patch.clone());
                    Some(evaluate_candidate(inst, &edit, &self.config.sandbox)?.correct)
                }
                None => None,
            };
            resolved.insert(ens.name().to_string(), hit);
        }
        let metrics = InstanceMetrics {
            schema_version: SCHEMA_VERSION,
            instance_id: iid.clone(),
            recall,
            candidates: candidates.len(),
            correct: correctness.as_ref().map(|c| c.correct.clone()),
            covered: correctness.as_ref().map(CorrectnessRecord::any_correct),
            resolved,
        };
        Ok((metrics, correctness))
    }

    fn sweep_instance(&self, inst: &Instance) -> Result<Option<SweepInstance>> {
        if inst.oracle_eval.is_none() {
            return Ok(None);
        }
        let iid = &inst.instance_id;
        let mut trajs = Vec::new();
        for m in 0..self.config.stages.machines_per_instance {
            let testing: Option<Trajectory> =
                read_json_opt(&self.store.trajectory_path(iid, MachineKind::Testing, m))?;
            let editing: Option<Trajectory> =
                read_json_opt(&self.store.trajectory_path(iid, MachineKind::Editing, m))?;
            if let Some(e) = editing {
                trajs.push((testing, e));
            }
        }
        let pairs: Vec<MachinePair<'_>> = trajs
            .iter()
            .map(|(t, e)| MachinePair {
                testing: t.as_ref(),
                editing: e,
            })
            .collect();
        Ok(collect_sweep_instance(
            inst,
            &pairs,
            self.config.stages.generation.max_completions,
            &self.config.sandbox,
            self.config.workers.sandbox,
        )?)
    }

    pub fn analyze(&self) -> (CommandReport, Option<AnalysisReport>) {
        let results = parallel_map(&self.instances, self.config.workers.instances, |_, inst| {
            let m = self.instance_metrics(inst)?;
            let s = self.sweep_instance(inst)?;
            Ok::<_, anyhow::Error>((m, s))
        });
        let mut report = CommandReport::new("analyze");
        let mut metrics = Vec::new();
        let mut records = Vec::new();
        let mut sweep_data = Vec::new();
        for (inst, r) in self.instances.iter().zip(results) {
            match r {
                Ok(((m, c), s)) => {
                    if let Err(e) = write_json(&self.store.artifact(&inst.instance_id, METRICS), &m) {
                        report.failed.push((inst.instance_id.clone(), format!("{e:#}")));
                        continue;
                    }
                    report.completed.push(inst.instance_id.clone());
                    metrics.push(m);
                    records.extend(c);
                    sweep_data.extend(s);
                }
                Err(e) => report.failed.push((inst.instance_id.clone(), format!("{e:#}"))),
            }
        }
        match self.write_reports(&metrics, &records, &sweep_data) {
            Ok(analysis) => (report, Some(analysis)),
            Err(e) => {
                report.failed.push(("<run>".into(), format!("{e:#}")));
                (report, None)
            }
        }
    }

    fn write_reports(
        &self,
        metrics: &[InstanceMetrics],
        records: &[CorrectnessRecord],
        sweep_data: &[SweepInstance],
    ) -> Result<AnalysisReport> {
        let recall = dataset_recall(&metrics.iter().map(|m| m.recall).collect::<Vec<_>>());
        // methods evaluated on every instance with an oracle
        let with_oracle: Vec<&InstanceMetrics> = metrics.iter().filter(|m| m.correct.is_some()).collect();
        let methods: BTreeSet<String> = with_oracle.iter().flat_map(|m| m.resolved.keys().cloned()).collect();
        let mut scores = Vec::new();
        let mut selections = BTreeMap::new();
        for name in &methods {
            let hits: Option<Vec<bool>> = with_oracle
                .iter()
                .map(|m| m.resolved.get(name).copied().flatten())
                .collect();
            let Some(hits) = hits else { continue };
            let score = hits.iter().filter(|&&h| h).count() as f64 / hits.len().max(1) as f64;
            scores.push((name.clone(), score));
            if name != SelectionMethod::Ensemble.name() {
                let picks: Result<Vec<usize>> = with_oracle
                    .iter()
                    .map(|m| {
                        let method = SelectionMethod::parse(name).expect("known method");
                        let rec: SelectionRecord = read_json(&self.store.selection_path(&m.instance_id, method))?;
                        Ok(rec.selected_index)
                    })
                    .collect();
                selections.insert(name.clone(), picks?);
            }
        }
        let gap = selection_gap_report(records, &selections);
        let mut summary = render_summary(Some(&recall), coverage(records), &scores);
        summary.push_str(&format!(
            "instances        {:>6}  ({} with an oracle)\n",
            metrics.len(),
            records.len()
        ));

        let max_machines = sweep_data.iter().map(SweepInstance::machines).max().unwrap_or(0);
        let ks: Vec<usize> = (1..=max_machines).collect();
        let is: Vec<usize> = (1..=self.config.stages.generation.max_completions).collect();
        let points = sweep(sweep_data, &ks, &is, &self.config.prices);

        write_atomic(&self.store.report_path("summary.txt"), summary.as_bytes())?;
        write_csv(&self.store.report_path("gap.csv"), &gap)?;
        write_csv(&self.store.report_path("sweep.csv"), &points)?;
        Ok(AnalysisReport {
            summary,
            gap,
            sweep: points,
            metrics: metrics.to_vec(),
        })
    }

    // ---- costs ---------------------------------------------------------

    /// Rebuilds the cost ledger from every recorded usage in the store.
    pub fn costs(&self) -> Result<CostTable> {
        let ledger = CostLedger::new(self.config.prices);
        for inst in &self.instances {
            let iid = &inst.instance_id;
            if let Some(c) = read_json_opt::<ContextArtifact>(&self.store.artifact(iid, CONTEXT))? {
                ledger.record_usage(Stage::Relevance, c.relevance_usage());
                ledger.record_usage(Stage::Ranking, c.ranking_usage());
            }
            for path in self.store.trajectory_files(iid)? {
                let t: Trajectory = read_json(&path)?;
                let stage = match t.machine_kind {
                    MachineKind::Testing => Stage::GenTests,
                    MachineKind::Editing => Stage::GenEdits,
                    MachineKind::Selection => Stage::Selection,
                };
                ledger.record_usage(stage, t.total_usage());
            }
        }
        let table = render_ledger(&ledger).context("no usage recorded in the run store")?;
        #[derive(Serialize)]
        struct LedgerFile {
            schema_version: u32,
            prices: monkeys_core::llm::PriceTable,
            stages: BTreeMap<Stage, monkeys_core::llm::StageEntry>,
            total_nanodollars: i64,
        }
        write_json(
            &self.store.ledger_path(),
            &LedgerFile {
                schema_version: SCHEMA_VERSION,
                prices: self.config.prices,
                stages: ledger.snapshot(),
                total_nanodollars: ledger.grand_total().0,
            },
        )?;
        write_atomic(&self.store.report_path("costs.txt"), table.to_string().as_bytes())?;
        Ok(table)
    }
}

fn write_csv<T: Serialize>(path: &std::path::Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow!("csv: {e}"))?;
    write_atomic(path, &bytes)
}

//! Pipeline stages. Each stage loads its output from the artifact directory
//! when present and otherwise builds it (running earlier stages as needed).
//!
//! Layout under the output root:
//!
//! ```text
//! shared.cfg  demos.jsonl  bc_loss.csv  base_policy.txt
//! probe_rollouts.jsonl  probe.txt  probe_history.csv
//! <condition>/condition.cfg  train_log.csv  checkpoints/step_NNNN.txt  policy.txt
//! <condition>/eval_rollouts.jsonl  audit/step_NNNN.jsonl  audit.csv
//! <condition>/frozen_invariance.txt  threshold_sweep.csv  steer.csv
//! report/metrics.csv  threshold_sweep.csv  deciles.csv  terciles.csv  audit.csv  spearman.csv  probe.csv
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::core::{derive_stream, Rollout, Task};
use crate::error::{Error, Result};
use crate::labeling::commitment_point;
use crate::policy::{behavior_clone, freeze_base, init_policy, sample_rollout, FrozenBase, PolicyParams, FEATURE_DIM};
use crate::probe::{caa_sweep, fit_probe, labeled_steps, CaaEval, CaaRow};
use crate::synthenv::{gen_tasks, make_demos, DemoConfig};
use crate::trainer::{audit_frozen_probe, score_steps, train};

use super::config::{Condition, ExperimentConfig};
use super::records::{
    atomic_write, format_train_log, load_policy, load_probe, read_rollouts, save_policy, save_probe, write_rollouts,
    ProbeArtifact, RolloutRecord,
};
use super::report::{
    condition_metrics, deciles, emit_report, format_deciles, format_spearman, format_terciles, format_threshold_sweep,
    probe_oracle_spearman, terciles, threshold_sweep, MetricSettings, MetricsReport,
};

/// An output root paired with the configuration that owns it.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
    pub cfg: ExperimentConfig,
}

fn checkpoint_name(step: usize) -> String {
    format!("step_{step:04}")
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>, cfg: ExperimentConfig) -> Self {
        Self { root: root.into(), cfg }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn condition_dir(&self) -> PathBuf {
        self.root.join(self.cfg.grpo.condition.as_str())
    }

    pub fn cond_path(&self, name: &str) -> PathBuf {
        self.condition_dir().join(name)
    }

    pub fn checkpoint_path(&self, step: usize) -> PathBuf {
        self.condition_dir()
            .join("checkpoints")
            .join(format!("{}.txt", checkpoint_name(step)))
    }

    pub fn audit_path(&self, step: usize) -> PathBuf {
        self.condition_dir()
            .join("audit")
            .join(format!("{}.jsonl", checkpoint_name(step)))
    }

    /// Claims `file` for `text`, or checks that an earlier run wrote the same
    /// text there. Artifacts from a different configuration are never mixed.
    fn claim(&self, file: &Path, text: &str) -> Result<()> {
        if file.exists() {
            let old = std::fs::read_to_string(file)?;
            if old != text {
                return Err(Error::invalid(format!(
                    "{} was written by a different configuration; use a fresh output directory",
                    file.display()
                )));
            }
            return Ok(());
        }
        atomic_write(file, text.as_bytes())
    }

    fn claim_shared(&self) -> Result<()> {
        self.claim(&self.path("shared.cfg"), &self.cfg.shared_text())
    }

    fn claim_condition(&self) -> Result<()> {
        self.claim_shared()?;
        self.claim(&self.cond_path("condition.cfg"), &self.cfg.to_text())
    }

    fn stream(&self, purpose: &str) -> crate::core::RngStream {
        derive_stream(self.cfg.seed, purpose)
    }
}

/// Behavior cloning on theater demonstrations; the result is the frozen base.
pub fn pretrain(ws: &Workspace) -> Result<PolicyParams> {
    ws.claim_shared()?;
    let out = ws.path("base_policy.txt");
    if out.exists() {
        return load_policy(&out);
    }
    let cfg = &ws.cfg;
    let tasks = gen_tasks(&ws.stream("demo-tasks"), "demo", cfg.bc.demo_count, cfg.env.ranges)?;
    let demos = make_demos(
        &tasks,
        &DemoConfig {
            count: cfg.bc.demo_count,
            theater_p: cfg.bc.theater_p,
            max_len: cfg.env.max_len,
            rng: ws.stream("demos"),
        },
    )?;
    let records: Vec<_> = tasks
        .iter()
        .zip(&demos)
        .map(|(t, d)| RolloutRecord::new(t, d, None, false))
        .collect();
    write_rollouts(&ws.path("demos.jsonl"), &records)?;

    let init = init_policy(&ws.stream("policy-init"), FEATURE_DIM, cfg.policy.hidden);
    let bc = behavior_clone(&init, &demos, cfg.bc.epochs, cfg.bc.lr)?;
    let mut log = String::from("epoch,loss\n");
    for (e, l) in bc.losses.iter().enumerate() {
        let _ = writeln!(log, "{e},{l:?}");
    }
    atomic_write(&ws.path("bc_loss.csv"), log.as_bytes())?;
    save_policy(&out, &bc.params)?;
    Ok(bc.params)
}

fn sample_records(
    params: &PolicyParams,
    base: &FrozenBase,
    tasks: &[Task],
    temperature: f64,
    max_len: usize,
    stream: &crate::core::RngStream,
    condition: &str,
    checkpoint: usize,
) -> Result<Vec<(Task, Rollout)>> {
    tasks
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let mut r = sample_rollout(params, t, temperature, max_len, &stream.fork(i as u64), base)?;
            r.condition = condition.to_string();
            r.checkpoint = checkpoint as u32;
            Ok((t.clone(), r))
        })
        .collect()
}

fn scored_records(
    probe: &ProbeArtifact,
    base: &FrozenBase,
    sampled: &[(Task, Rollout)],
    store_activations: bool,
) -> Result<Vec<RolloutRecord>> {
    let rollouts: Vec<Rollout> = sampled.iter().map(|(_, r)| r.clone()).collect();
    let scores = score_steps(&probe.probe, base, &rollouts)?;
    Ok(sampled
        .iter()
        .zip(scores)
        .map(|((t, r), s)| RolloutRecord::new(t, r, Some(s), store_activations))
        .collect())
}

fn labeled_of(records: &[RolloutRecord]) -> Result<Vec<(Rollout, crate::labeling::CommitmentLabel)>> {
    records.iter().map(|r| Ok((r.rollout(), r.label()?))).collect()
}

/// Samples labeled base-policy rollouts and fits the probe on frozen-base
/// activations.
pub fn train_probe(ws: &Workspace) -> Result<ProbeArtifact> {
    let base_params = pretrain(ws)?;
    let out = ws.path("probe.txt");
    if out.exists() {
        return load_probe(&out);
    }
    let cfg = &ws.cfg;
    let base = freeze_base(&base_params);
    let tasks = gen_tasks(&ws.stream("probe-tasks"), "probe", cfg.probe.rollouts, cfg.env.ranges)?;
    let sampled = sample_records(
        &base_params,
        &base,
        &tasks,
        cfg.policy.temperature,
        cfg.env.max_len,
        &ws.stream("probe-rollouts"),
        "base",
        0,
    )?;
    let labeled: Vec<_> = sampled
        .iter()
        .map(|(t, r)| (r.clone(), commitment_point(t, r)))
        .collect();
    let fit = fit_probe(&labeled_steps(&base_params, &labeled), &cfg.probe.hyper, &ws.stream("probe-fit"))?;
    let art = ProbeArtifact {
        probe: fit.probe,
        held_out_auroc: fit.held_out_auroc,
        best_epoch: fit.best_epoch,
    };
    let records = scored_records(&art, &base, &sampled, cfg.eval.store_activations)?;
    write_rollouts(&ws.path("probe_rollouts.jsonl"), &records)?;
    let mut hist = String::from("epoch,held_out_auroc\n");
    for (e, a) in fit.auroc_history.iter().enumerate() {
        let _ = writeln!(hist, "{},{a:?}", e + 1);
    }
    atomic_write(&ws.path("probe_history.csv"), hist.as_bytes())?;
    save_probe(&out, &art, &cfg.probe.hyper)?;
    Ok(art)
}

/// GRPO for the configured condition. Writes the training log, periodic
/// checkpoints and the final policy.
pub fn grpo(ws: &Workspace) -> Result<PolicyParams> {
    let probe = train_probe(ws)?;
    let base_params = pretrain(ws)?;
    ws.claim_condition()?;
    let out = ws.cond_path("policy.txt");
    if out.exists() {
        return load_policy(&out);
    }
    let base = freeze_base(&base_params);
    let run = train(
        &base_params,
        &base,
        Some(&probe.probe),
        &ws.cfg.trainer_config(),
        ws.cfg.tau_schedule(),
        &ws.stream("grpo"),
    )?;
    atomic_write(&ws.cond_path("train_log.csv"), format_train_log(&run.log).as_bytes())?;
    for (step, params) in &run.checkpoints {
        save_policy(&ws.checkpoint_path(*step), params)?;
    }
    save_policy(&out, &run.params)?;
    Ok(run.params)
}

fn eval_tasks(ws: &Workspace) -> Result<Vec<Task>> {
    gen_tasks(&ws.stream("eval-tasks"), "eval", ws.cfg.eval.task_count, ws.cfg.env.ranges)
}

/// Decodes the trained policy on held-out tasks at `eval.temperature`.
pub fn eval(ws: &Workspace) -> Result<Vec<RolloutRecord>> {
    let policy = grpo(ws)?;
    let out = ws.cond_path("eval_rollouts.jsonl");
    if out.exists() {
        return read_rollouts(&out);
    }
    let probe = train_probe(ws)?;
    let base = freeze_base(&pretrain(ws)?);
    let cfg = &ws.cfg;
    let sampled = sample_records(
        &policy,
        &base,
        &eval_tasks(ws)?,
        cfg.eval.temperature,
        cfg.env.max_len,
        &ws.stream("eval-rollouts"),
        cfg.grpo.condition.as_str(),
        cfg.grpo.steps,
    )?;
    let records = scored_records(&probe, &base, &sampled, cfg.eval.store_activations)?;
    write_rollouts(&out, &records)?;
    Ok(records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditRow {
    pub checkpoint: usize,
    pub auroc: Option<f64>,
    pub steps: usize,
    pub positives: usize,
}

/// Checkpoint steps that exist for this run, preceded by 0 (the base policy).
pub fn audit_checkpoints(cfg: &ExperimentConfig) -> Vec<usize> {
    let every = cfg.grpo.checkpoint_every;
    std::iter::once(0)
        .chain((1..=cfg.grpo.steps / every).map(|k| k * every))
        .collect()
}

fn parse_audit_csv(path: &Path) -> Result<Vec<AuditRow>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let bad = || Error::Parse {
                path: path.display().to_string(),
                line: i + 2,
                msg: format!("bad audit row {l:?}"),
            };
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(AuditRow {
                checkpoint: f[0].parse().map_err(|_| bad())?,
                auroc: if f[1] == "NA" { None } else { Some(f[1].parse().map_err(|_| bad())?) },
                steps: f[2].parse().map_err(|_| bad())?,
                positives: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

fn format_audit(rows: &[AuditRow]) -> String {
    let mut s = String::from("checkpoint,auroc,steps,positives\n");
    for r in rows {
        let a = r.auroc.map_or_else(|| "NA".to_string(), |a| format!("{a:?}"));
        let _ = writeln!(s, "{},{a},{},{}", r.checkpoint, r.steps, r.positives);
    }
    s
}

/// Re-scores a fixed pre-training rollout set with the frozen probe and
/// compares against the scores stored when the probe was trained.
pub fn frozen_invariance(ws: &Workspace) -> Result<bool> {
    let probe = train_probe(ws)?;
    let base = freeze_base(&pretrain(ws)?);
    let records = read_rollouts(&ws.path("probe_rollouts.jsonl"))?;
    let rollouts: Vec<Rollout> = records.iter().map(|r| r.rollout()).collect();
    let fresh = score_steps(&probe.probe, &base, &rollouts)?;
    Ok(records.iter().zip(&fresh).all(|(r, f)| {
        r.probe_scores
            .as_ref()
            .is_some_and(|s| s.len() == f.len() && s.iter().zip(f).all(|(a, b)| a.to_bits() == b.to_bits()))
    }))
}

/// Frozen-probe AUROC on sampled rollouts from the base policy and every
/// checkpoint, against oracle step labels.
pub fn audit(ws: &Workspace) -> Result<Vec<AuditRow>> {
    grpo(ws)?;
    let out = ws.cond_path("audit.csv");
    if out.exists() {
        return parse_audit_csv(&out);
    }
    let probe = train_probe(ws)?;
    let base_params = pretrain(ws)?;
    let base = freeze_base(&base_params);
    let cfg = &ws.cfg;
    let tasks = gen_tasks(&ws.stream("audit-tasks"), "audit", cfg.eval.audit_tasks, cfg.env.ranges)?;
    let mut rows = Vec::new();
    for step in audit_checkpoints(cfg) {
        let params = if step == 0 {
            base_params.clone()
        } else {
            load_policy(&ws.checkpoint_path(step))?
        };
        let sampled = sample_records(
            &params,
            &base,
            &tasks,
            cfg.policy.temperature,
            cfg.env.max_len,
            &ws.stream("audit-rollouts"),
            cfg.grpo.condition.as_str(),
            step,
        )?;
        let records = scored_records(&probe, &base, &sampled, cfg.eval.store_activations)?;
        write_rollouts(&ws.audit_path(step), &records)?;
        let labeled = labeled_of(&records)?;
        let auroc = audit_frozen_probe(&probe.probe, &base, &labeled)?;
        rows.push(AuditRow {
            checkpoint: step,
            auroc,
            steps: labeled.iter().map(|(r, _)| r.steps()).sum(),
            positives: labeled
                .iter()
                .map(|(_, l)| l.step_labels.iter().map(|&y| y as usize).sum::<usize>())
                .sum(),
        });
    }
    let invariant = frozen_invariance(ws)?;
    atomic_write(
        &ws.cond_path("frozen_invariance.txt"),
        format!("bit_identical={invariant}\n").as_bytes(),
    )?;
    atomic_write(&out, format_audit(&rows).as_bytes())?;
    Ok(rows)
}

/// Mean probe perf ratio of the evaluation cache at each threshold.
pub fn sweep_theta(ws: &Workspace) -> Result<Vec<Option<f64>>> {
    let records = eval(ws)?;
    let thetas = &ws.cfg.eval.thresholds_sweep;
    let vals = threshold_sweep(&records, thetas)?;
    let text = format_threshold_sweep(thetas, &[(ws.cfg.grpo.condition.to_string(), vals.clone())]);
    atomic_write(&ws.cond_path("threshold_sweep.csv"), text.as_bytes())?;
    Ok(vals)
}

/// Activation steering on the trained policy, with the direction taken from
/// its final-checkpoint audit rollouts.
pub fn steer(ws: &Workspace) -> Result<Vec<CaaRow>> {
    let policy = grpo(ws)?;
    audit(ws)?;
    let cfg = &ws.cfg;
    let last = *audit_checkpoints(cfg).last().expect("step 0 is always audited");
    let labeled = labeled_of(&read_rollouts(&ws.audit_path(last))?)?;
    let base = freeze_base(&pretrain(ws)?);
    let rows = caa_sweep(
        &policy,
        &base,
        &labeled,
        cfg.steer.layer,
        &cfg.steer.coefficients,
        &eval_tasks(ws)?,
        CaaEval {
            temperature: cfg.eval.temperature,
            max_len: cfg.env.max_len,
        },
        &ws.stream("steer"),
    )?;
    let mut s = String::from("coefficient,perf_ratio,accuracy,mean_steps,n\n");
    for r in &rows {
        let _ = writeln!(
            s,
            "{:?},{:.3},{:.3},{:.3},{}",
            r.coefficient, r.perf_ratio, r.accuracy, r.mean_steps, r.n
        );
    }
    atomic_write(&ws.cond_path("steer.csv"), s.as_bytes())?;
    Ok(rows)
}

/// Everything `report` writes, also returned for programmatic checks.
#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub metrics: MetricsReport,
    pub threshold_sweep: Vec<(String, Vec<Option<f64>>)>,
    pub deciles: Vec<(String, [usize; 10])>,
    pub terciles: Vec<(String, [f64; 3])>,
    pub audit: Vec<(String, Vec<AuditRow>)>,
    pub probe_auroc: f64,
}

/// Aggregates the cached outputs of every condition present under the root.
/// Reads caches only; nothing is sampled or trained.
pub fn report(root: &Path, cfg: &ExperimentConfig) -> Result<ReportBundle> {
    let probe = load_probe(&root.join("probe.txt"))?;
    let settings = MetricSettings {
        delta_faithful: cfg.eval.delta_faithful,
        theta_probe: cfg.eval.theta_probe,
        resamples: cfg.eval.bootstrap_resamples,
    };
    let rng = derive_stream(cfg.seed, "report");
    let mut bundle = ReportBundle {
        metrics: MetricsReport::default(),
        threshold_sweep: Vec::new(),
        deciles: Vec::new(),
        terciles: Vec::new(),
        audit: Vec::new(),
        probe_auroc: probe.held_out_auroc,
    };
    let mut spear = Vec::new();
    for cond in Condition::ALL {
        let dir = root.join(cond.as_str());
        let cache = dir.join("eval_rollouts.jsonl");
        if !cache.exists() {
            continue;
        }
        let name = cond.to_string();
        let records = read_rollouts(&cache)?;
        bundle
            .metrics
            .rows
            .extend(condition_metrics(&name, &records, &settings, &rng.child(&name))?);
        bundle
            .threshold_sweep
            .push((name.clone(), threshold_sweep(&records, &cfg.eval.thresholds_sweep)?));
        bundle.deciles.push((name.clone(), deciles(&records)?));
        bundle.terciles.push((name.clone(), terciles(&records)?));
        spear.push((name.clone(), probe_oracle_spearman(&records)?));
        let audit_csv = dir.join("audit.csv");
        if audit_csv.exists() {
            bundle.audit.push((name, parse_audit_csv(&audit_csv)?));
        }
    }
    if bundle.metrics.rows.is_empty() {
        return Err(Error::Empty("evaluated conditions"));
    }
    let out = root.join("report");
    emit_report(&bundle.metrics, &out.join("metrics.csv"))?;
    atomic_write(
        &out.join("threshold_sweep.csv"),
        format_threshold_sweep(&cfg.eval.thresholds_sweep, &bundle.threshold_sweep).as_bytes(),
    )?;
    atomic_write(&out.join("deciles.csv"), format_deciles(&bundle.deciles).as_bytes())?;
    atomic_write(&out.join("terciles.csv"), format_terciles(&bundle.terciles).as_bytes())?;
    atomic_write(&out.join("spearman.csv"), format_spearman(&spear).as_bytes())?;
    let mut a = String::from("condition,checkpoint,auroc,steps,positives\n");
    for (cond, rows) in &bundle.audit {
        for r in rows {
            let v = r.auroc.map_or_else(|| "NA".to_string(), |x| format!("{x:.3}"));
            let _ = writeln!(a, "{cond},{},{v},{},{}", r.checkpoint, r.steps, r.positives);
        }
    }
    atomic_write(&out.join("audit.csv"), a.as_bytes())?;
    atomic_write(
        &out.join("probe.csv"),
        format!("held_out_auroc,best_epoch\n{:.3},{}\n", probe.held_out_auroc, probe.best_epoch).as_bytes(),
    )?;
    Ok(bundle)
}

/// Full pipeline for the configured condition: pretrain, probe, GRPO,
/// evaluation, audit, threshold sweep and report.
pub fn run_workspace(ws: &Workspace) -> Result<ReportBundle> {
    audit(ws)?;
    sweep_theta(ws)?;
    report(&ws.root, &ws.cfg)
}

pub fn run_experiment(config_path: &Path, out: &Path) -> Result<ReportBundle> {
    let cfg = ExperimentConfig::load(config_path)?;
    run_workspace(&Workspace::new(out, cfg))
}

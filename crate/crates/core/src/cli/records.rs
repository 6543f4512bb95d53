//! On-disk formats: rollout caches (one JSON record per line), flat
//! named-array checkpoints, and the per-step training log.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::core::{Action, Rollout, Task};
use crate::error::{Error, Result};
use crate::labeling::{commitment_point, CommitmentLabel};
use crate::policy::{PolicyParams, StepActivations};
use crate::probe::{Probe, ProbeHyper};
use crate::trainer::StepStats;

/// Writes through a sibling temp file and renames it into place.
pub fn atomic_write(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub values: Vec<u8>,
    pub modulus: u32,
    pub answer: u32,
}

/// One cached rollout with its task and oracle label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub task_id: String,
    pub seed: u64,
    pub condition: String,
    pub checkpoint: u32,
    pub task: TaskRecord,
    pub actions: Vec<Action>,
    pub forced_answers: Vec<u32>,
    pub answer: Option<u32>,
    pub correct: bool,
    pub commitment_index: Option<usize>,
    pub perf_ratio_oracle: f64,
    /// Frozen-probe score per reasoning step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_scores: Option<Vec<f64>>,
    pub step_logprobs: Vec<f64>,
    pub max_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activations: Option<Vec<StepActivations>>,
}

impl RolloutRecord {
    /// Labels the rollout with the oracle. Activations are kept only when
    /// `store_activations` is set.
    pub fn new(task: &Task, rollout: &Rollout, probe_scores: Option<Vec<f64>>, store_activations: bool) -> Self {
        let label = commitment_point(task, rollout);
        Self {
            task_id: rollout.task_id.clone(),
            seed: rollout.seed,
            condition: rollout.condition.clone(),
            checkpoint: rollout.checkpoint,
            task: TaskRecord {
                values: task.values.clone(),
                modulus: task.modulus,
                answer: task.answer,
            },
            actions: rollout.actions.clone(),
            forced_answers: rollout.forced_answers.clone(),
            answer: rollout.answer,
            correct: rollout.correct,
            commitment_index: label.commitment_index,
            perf_ratio_oracle: label.perf_ratio,
            probe_scores,
            step_logprobs: rollout.step_logprobs.clone(),
            max_len: rollout.max_len,
            activations: if store_activations { rollout.activations.clone() } else { None },
        }
    }

    pub fn task(&self) -> Result<Task> {
        let t = Task::new(self.task_id.clone(), self.task.values.clone(), self.task.modulus)?;
        if t.answer != self.task.answer {
            return Err(Error::invalid(format!(
                "task {}: stored answer {} but values give {}",
                self.task_id, self.task.answer, t.answer
            )));
        }
        Ok(t)
    }

    pub fn rollout(&self) -> Rollout {
        Rollout {
            task_id: self.task_id.clone(),
            seed: self.seed,
            n_values: self.task.values.len(),
            max_len: self.max_len,
            actions: self.actions.clone(),
            forced_answers: self.forced_answers.clone(),
            answer: self.answer,
            correct: self.correct,
            step_logprobs: self.step_logprobs.clone(),
            activations: self.activations.clone(),
            condition: self.condition.clone(),
            checkpoint: self.checkpoint,
        }
    }

    /// The stored oracle label, rebuilt into per-step form.
    pub fn label(&self) -> Result<CommitmentLabel> {
        CommitmentLabel::from_commitment(self.rollout().steps(), self.commitment_index)
    }

    pub fn steps(&self) -> usize {
        self.rollout().steps()
    }

    fn check(&self) -> Result<()> {
        let task = self.task()?;
        let rollout = self.rollout();
        rollout.check_invariants()?;
        let label = commitment_point(&task, &rollout);
        if label.commitment_index != self.commitment_index {
            return Err(Error::invalid(format!(
                "commitment index {:?} disagrees with the forced answers ({:?})",
                self.commitment_index, label.commitment_index
            )));
        }
        if let Some(s) = &self.probe_scores {
            if s.len() != rollout.steps() {
                return Err(Error::invalid(format!(
                    "{} probe scores for {} steps",
                    s.len(),
                    rollout.steps()
                )));
            }
        }
        Ok(())
    }
}

pub fn write_rollouts(path: &Path, records: &[RolloutRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::invalid(e.to_string()))?;
        out.push_str(&line);
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// Reads a cache written by [`write_rollouts`]. Blank lines are skipped; any
/// other line that does not decode to a consistent record is an error naming
/// its 1-based line number.
pub fn read_rollouts(path: &Path) -> Result<Vec<RolloutRecord>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RolloutRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(path, idx + 1, e.to_string()))?;
        rec.check().map_err(|e| parse_err(path, idx + 1, e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

/// A checkpoint file: `key value` metadata lines followed by named arrays.
///
/// ```text
/// profil-arrays 1
/// meta kind policy
/// array w1 96
/// 0.1 -0.25 ...
/// ```
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedArrays {
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<(String, Vec<f64>)>,
}

const ARRAYS_MAGIC: &str = "profil-arrays 1";

impl NamedArrays {
    pub fn to_text(&self) -> String {
        let mut s = format!("{ARRAYS_MAGIC}\n");
        for (k, v) in &self.meta {
            let _ = writeln!(s, "meta {k} {v}");
        }
        for (name, data) in &self.arrays {
            let _ = writeln!(s, "array {name} {}", data.len());
            let row: Vec<String> = data.iter().map(|x| format!("{x:?}")).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == ARRAYS_MAGIC => {}
            _ => return Err(parse_err(path, 1, format!("expected header `{ARRAYS_MAGIC}`"))),
        }
        let mut out = NamedArrays::default();
        while let Some((idx, line)) = lines.next() {
            let mut parts = line.splitn(3, ' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(""), None, None) => continue,
                (Some("meta"), Some(k), v) => {
                    out.meta.insert(k.to_string(), v.unwrap_or("").to_string());
                }
                (Some("array"), Some(name), Some(len)) => {
                    let len: usize = len
                        .trim()
                        .parse()
                        .map_err(|_| parse_err(path, idx + 1, format!("bad array length {len:?}")))?;
                    let (didx, data) = lines
                        .next()
                        .ok_or_else(|| parse_err(path, idx + 2, format!("array `{name}` has no data line")))?;
                    let values = data
                        .split_whitespace()
                        .map(|t| t.parse::<f64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| parse_err(path, didx + 1, e.to_string()))?;
                    if values.len() != len {
                        return Err(parse_err(
                            path,
                            didx + 1,
                            format!("array `{name}` declares {len} values, found {}", values.len()),
                        ));
                    }
                    out.arrays.push((name.to_string(), values));
                }
                _ => return Err(parse_err(path, idx + 1, format!("unrecognised line {line:?}"))),
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(path, &text)
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta
            .get(key)
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks metadata `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::invalid(format!("checkpoint metadata `{key}` = {raw:?} is malformed")))
    }
}

pub fn policy_to_arrays(params: &PolicyParams) -> NamedArrays {
    let mut meta = BTreeMap::new();
    meta.insert("kind".into(), "policy".into());
    meta.insert("feat_dim".into(), params.feat_dim.to_string());
    meta.insert("hidden".into(), params.hidden.to_string());
    NamedArrays {
        meta,
        arrays: params
            .named_arrays()
            .iter()
            .map(|(n, a)| (n.to_string(), a.to_vec()))
            .collect(),
    }
}

pub fn policy_from_arrays(na: &NamedArrays) -> Result<PolicyParams> {
    if na.meta.get("kind").map(String::as_str) != Some("policy") {
        return Err(Error::invalid("checkpoint is not a policy"));
    }
    let mut p = PolicyParams::zeros(na.meta_parse("feat_dim")?, na.meta_parse("hidden")?);
    let expected: Vec<(String, usize)> = p.named_arrays().iter().map(|(n, a)| (n.to_string(), a.len())).collect();
    if na.arrays.len() != expected.len() {
        return Err(Error::invalid(format!(
            "policy file has {} arrays, expected {}",
            na.arrays.len(),
            expected.len()
        )));
    }
    let mut flat = Vec::with_capacity(p.num_params());
    for ((name, data), (want, len)) in na.arrays.iter().zip(&expected) {
        if name != want || data.len() != *len {
            return Err(Error::invalid(format!(
                "policy array `{name}` (len {}) does not match `{want}` (len {len})",
                data.len()
            )));
        }
        flat.extend_from_slice(data);
    }
    p.set_flat(&flat);
    Ok(p)
}

pub fn save_policy(path: &Path, params: &PolicyParams) -> Result<()> {
    policy_to_arrays(params).save(path)
}

pub fn load_policy(path: &Path) -> Result<PolicyParams> {
    policy_from_arrays(&NamedArrays::load(path)?)
}

/// A trained probe with its held-out quality.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeArtifact {
    pub probe: Probe,
    pub held_out_auroc: f64,
    pub best_epoch: usize,
}

pub fn save_probe(path: &Path, art: &ProbeArtifact, hyper: &ProbeHyper) -> Result<()> {
    let p = &art.probe;
    let mut meta = BTreeMap::new();
    meta.insert("kind".into(), "probe".into());
    meta.insert("dim".into(), p.dim.to_string());
    meta.insert("heads".into(), p.heads.to_string());
    meta.insert("head_dim".into(), p.head_dim.to_string());
    meta.insert("held_out_auroc".into(), format!("{:?}", art.held_out_auroc));
    meta.insert("best_epoch".into(), art.best_epoch.to_string());
    meta.insert("lr".into(), format!("{:?}", hyper.lr));
    meta.insert("epochs".into(), hyper.epochs.to_string());
    NamedArrays {
        meta,
        arrays: p.named_arrays(),
    }
    .save(path)
}

pub fn load_probe(path: &Path) -> Result<ProbeArtifact> {
    let na = NamedArrays::load(path)?;
    if na.meta.get("kind").map(String::as_str) != Some("probe") {
        return Err(Error::invalid(format!("{} is not a probe file", path.display())));
    }
    let probe = Probe::from_named(
        na.meta_parse("dim")?,
        na.meta_parse("heads")?,
        na.meta_parse("head_dim")?,
        &na.arrays,
    )?;
    Ok(ProbeArtifact {
        probe,
        held_out_auroc: na.meta_parse("held_out_auroc")?,
        best_epoch: na.meta_parse("best_epoch")?,
    })
}

pub const TRAIN_LOG_HEADER: &str = "step,mean_reward,filter_rate,tau,mean_p_bar";

pub fn format_train_log(log: &[StepStats]) -> String {
    let mut s = format!("{TRAIN_LOG_HEADER}\n");
    for st in log {
        let _ = writeln!(
            s,
            "{},{:?},{:?},{:?},{:?}",
            st.step, st.mean_reward, st.filter_rate, st.tau, st.mean_p_bar
        );
    }
    s
}

/// A parsed training-log row.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub mean_reward: f64,
    pub filter_rate: f64,
    pub tau: f64,
    pub mean_p_bar: f64,
}

pub fn read_train_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, l)| l) != Some(TRAIN_LOG_HEADER) {
        return Err(parse_err(path, 1, "missing training-log header"));
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = |what: &str| parse_err(path, idx + 1, format!("bad {what}"));
        if f.len() != 5 {
            return Err(bad("column count"));
        }
        let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| bad(what));
        out.push(LogRow {
            step: f[0].parse().map_err(|_| bad("step"))?,
            mean_reward: num(f[1], "mean_reward")?,
            filter_rate: num(f[2], "filter_rate")?,
            tau: num(f[3], "tau")?,
            mean_p_bar: num(f[4], "mean_p_bar")?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::derive_stream;
    use crate::policy::{init_policy, FEATURE_DIM};

    #[test]
    fn named_arrays_round_trip_exactly() {
        let p = init_policy(&derive_stream(3, "t"), FEATURE_DIM, 5);
        let mut na = policy_to_arrays(&p);
        na.arrays[1].1[0] = 1e-300;
        na.arrays[1].1[1] = -0.1 - 0.2;
        let back = NamedArrays::parse(Path::new("x"), &na.to_text()).unwrap();
        assert_eq!(back, na);
        let mut q = p.clone();
        q.b1[0] = 1e-300;
        q.b1[1] = -0.1 - 0.2;
        assert_eq!(policy_from_arrays(&back).unwrap(), q);
    }

    #[test]
    fn arrays_reject_wrong_length() {
        let text = "profil-arrays 1\nmeta kind policy\narray w1 3\n1 2\n";
        match NamedArrays::parse(Path::new("f"), text).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 4),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn train_log_round_trips() {
        let log = vec![
            StepStats {
                step: 1,
                mean_reward: 0.5,
                filter_rate: 0.0,
                tau: 0.5,
                mean_p_bar: 0.0,
                accuracy: 0.5,
                mean_steps: 3.0,
            },
            StepStats {
                step: 2,
                mean_reward: 0.1 + 0.2,
                filter_rate: 0.125,
                tau: 0.21,
                mean_p_bar: 0.3,
                accuracy: 0.25,
                mean_steps: 4.0,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        atomic_write(&path, format_train_log(&log).as_bytes()).unwrap();
        let rows = read_train_log(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].mean_reward, 0.1 + 0.2);
        assert_eq!(rows[1].mean_p_bar, 0.3);
    }
}

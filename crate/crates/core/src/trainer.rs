//! Group-relative policy optimization with the probe filter.
//!
//! Per task, K rollouts are sampled and scored by the verifier. With the filter
//! on, any rollout whose mean frozen-probe score reaches `tau` has its reward
//! zeroed before group normalisation and its advantage zeroed after it, so it
//! adds nothing to the update. The update itself is the plain
//! advantage-weighted log-prob gradient, averaged over every rollout in the
//! batch and applied by gradient ascent.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::core::{RngStream, Rollout, Task};
use crate::error::{Error, Result};
use crate::labeling::CommitmentLabel;
use crate::policy::{logprob_grad, sample_rollout, FrozenBase, PolicyParams};
use crate::probe::{mean_performativity, probe_forward, Probe};
use crate::stats::auroc;
use crate::synthenv::{gen_tasks, TaskRanges};

pub const SIGMA_FLOOR: f64 = 1e-8;

/// Filtered rewards and the keep mask `p_bar < tau`; `p_bar == tau` is filtered.
pub fn apply_probe_filter(rewards: &[f64], p_bars: &[f64], tau: f64) -> Result<(Vec<f64>, Vec<bool>)> {
    if rewards.len() != p_bars.len() {
        return Err(Error::DimensionMismatch {
            expected: rewards.len(),
            got: p_bars.len(),
        });
    }
    let keep: Vec<bool> = p_bars.iter().map(|&p| p < tau).collect();
    let filtered = rewards
        .iter()
        .zip(&keep)
        .map(|(&r, &k)| if k { r } else { 0.0 })
        .collect();
    Ok((filtered, keep))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupStatsMode {
    /// Mean and std over all K filtered rewards, filtered ones as zeros.
    All,
    /// Mean and std over the kept rollouts only.
    Unfiltered,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupAdvantages {
    pub advantages: Vec<f64>,
    pub mu: f64,
    pub sigma: f64,
}

pub fn group_advantages(filtered: &[f64], keep: &[bool], mode: GroupStatsMode) -> Result<GroupAdvantages> {
    if filtered.len() != keep.len() {
        return Err(Error::DimensionMismatch {
            expected: filtered.len(),
            got: keep.len(),
        });
    }
    if filtered.len() < 2 {
        return Err(Error::invalid("group size must be at least 2"));
    }
    let pool: Vec<f64> = match mode {
        GroupStatsMode::All => filtered.to_vec(),
        GroupStatsMode::Unfiltered => filtered
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(&r, _)| r)
            .collect(),
    };
    if pool.is_empty() {
        return Ok(GroupAdvantages {
            advantages: vec![0.0; filtered.len()],
            mu: 0.0,
            sigma: 0.0,
        });
    }
    let n = pool.len() as f64;
    let mu = pool.iter().sum::<f64>() / n;
    let sigma = (pool.iter().map(|r| (r - mu).powi(2)).sum::<f64>() / n).sqrt();
    let advantages = if sigma < SIGMA_FLOOR {
        vec![0.0; filtered.len()]
    } else {
        filtered
            .iter()
            .zip(keep)
            .map(|(&r, &k)| if k { (r - mu) / sigma } else { 0.0 })
            .collect()
    };
    Ok(GroupAdvantages { advantages, mu, sigma })
}

pub fn length_penalty_reward(reward: f64, chain_steps: usize, lambda: f64) -> f64 {
    reward - lambda * chain_steps as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TauMode {
    Fixed,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauSchedule {
    pub mode: TauMode,
    pub tau_fixed: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub r_lo: f64,
    pub r_hi: f64,
    pub ema_decay: f64,
    /// EMA of batch mean reward.
    pub r_bar: f64,
}

impl TauSchedule {
    pub fn fixed(tau: f64) -> Self {
        Self {
            mode: TauMode::Fixed,
            tau_fixed: tau,
            ..Self::adaptive()
        }
    }

    pub fn adaptive() -> Self {
        Self {
            mode: TauMode::Adaptive,
            tau_fixed: 0.5,
            tau_min: 0.20,
            tau_max: 0.50,
            r_lo: 0.10,
            r_hi: 0.40,
            ema_decay: 0.9,
            r_bar: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_min <= self.tau_max) {
            return Err(Error::invalid("tau_min must not exceed tau_max"));
        }
        if !(self.r_lo < self.r_hi) {
            return Err(Error::invalid("r_lo must be below r_hi"));
        }
        if !(self.ema_decay >= 0.0 && self.ema_decay < 1.0) {
            return Err(Error::invalid("ema_decay must lie in [0, 1)"));
        }
        Ok(())
    }

    /// `tau_min + (tau_max - tau_min) * clip((r_bar - r_lo) / (r_hi - r_lo), 0, 1)`.
    pub fn adaptive_tau(&self) -> f64 {
        let frac = ((self.r_bar - self.r_lo) / (self.r_hi - self.r_lo)).clamp(0.0, 1.0);
        self.tau_min + (self.tau_max - self.tau_min) * frac
    }

    pub fn current_tau(&self) -> f64 {
        match self.mode {
            TauMode::Fixed => self.tau_fixed,
            TauMode::Adaptive => self.adaptive_tau(),
        }
    }

    pub fn update_ema(&self, batch_mean_reward: f64) -> Self {
        Self {
            r_bar: self.ema_decay * self.r_bar + (1.0 - self.ema_decay) * batch_mean_reward,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Plain,
    LengthPenalty,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainerConfig {
    pub group_size: usize,
    pub tasks_per_step: usize,
    pub lr: f64,
    pub steps: usize,
    pub reward_mode: RewardMode,
    pub lambda: f64,
    pub filter_enabled: bool,
    pub group_stats_mode: GroupStatsMode,
    pub temperature: f64,
    pub max_len: usize,
    pub ranges: TaskRanges,
    pub checkpoint_every: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            tasks_per_step: 16,
            lr: 0.05,
            steps: 200,
            reward_mode: RewardMode::Plain,
            lambda: 0.01,
            filter_enabled: false,
            group_stats_mode: GroupStatsMode::All,
            temperature: 1.0,
            max_len: crate::synthenv::DEFAULT_MAX_LEN,
            ranges: TaskRanges::default(),
            checkpoint_every: 20,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::invalid("group size K must be at least 2"));
        }
        if self.lambda < 0.0 {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        if self.tasks_per_step == 0 {
            return Err(Error::invalid("tasks_per_step must be positive"));
        }
        self.ranges.validate()
    }
}

/// Everything computed for one task's group before the update.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBatch {
    pub rewards: Vec<f64>,
    pub filtered_rewards: Vec<f64>,
    pub keep_mask: Vec<bool>,
    pub mu: f64,
    pub sigma: f64,
    pub advantages: Vec<f64>,
    pub probe_means: Vec<f64>,
    pub tau: f64,
}

/// Verifier reward, optionally length-penalised by reasoning steps.
pub fn rollout_reward(rollout: &Rollout, cfg: &TrainerConfig) -> f64 {
    let r = rollout.correct as u8 as f64;
    match cfg.reward_mode {
        RewardMode::Plain => r,
        RewardMode::LengthPenalty => length_penalty_reward(r, rollout.steps(), cfg.lambda),
    }
}

/// Mean per-step frozen-probe score; a zero-step chain scores 0.
pub fn probe_mean(probe: &Probe, base: &FrozenBase, rollout: &Rollout) -> Result<f64> {
    if rollout.steps() == 0 {
        return Ok(0.0);
    }
    Ok(mean_performativity(probe, base, rollout)?.mean)
}

pub fn score_group(
    rollouts: &[Rollout],
    base: &FrozenBase,
    probe: Option<&Probe>,
    cfg: &TrainerConfig,
    tau: f64,
) -> Result<GroupBatch> {
    let rewards: Vec<f64> = rollouts.iter().map(|r| rollout_reward(r, cfg)).collect();
    let probe_means = match probe {
        Some(p) => rollouts
            .iter()
            .map(|r| probe_mean(p, base, r))
            .collect::<Result<Vec<_>>>()?,
        None => vec![0.0; rollouts.len()],
    };
    let (filtered_rewards, keep_mask) = if cfg.filter_enabled {
        if probe.is_none() {
            return Err(Error::invalid("probe filter enabled without a probe"));
        }
        apply_probe_filter(&rewards, &probe_means, tau)?
    } else {
        (rewards.clone(), vec![true; rewards.len()])
    };
    let adv = group_advantages(&filtered_rewards, &keep_mask, cfg.group_stats_mode)?;
    Ok(GroupBatch {
        rewards,
        filtered_rewards,
        keep_mask,
        mu: adv.mu,
        sigma: adv.sigma,
        advantages: adv.advantages,
        probe_means,
        tau,
    })
}

/// `(1/denom) * sum_i A_i * grad log pi(y_i)`. Items with zero advantage are
/// skipped outright, so they cannot perturb the sum.
pub fn surrogate_gradient(params: &PolicyParams, items: &[(&Rollout, f64)], denom: usize) -> PolicyParams {
    let parts: Vec<PolicyParams> = items
        .par_iter()
        .filter(|(_, a)| *a != 0.0)
        .map(|(r, a)| logprob_grad(params, r, *a))
        .collect();
    let mut total = params.zeros_like();
    for g in &parts {
        total.add_scaled(g, 1.0);
    }
    total.scale(1.0 / denom as f64);
    total
}

/// Differentiable objective whose gradient `surrogate_gradient` returns.
pub fn surrogate_objective(params: &PolicyParams, items: &[(&Rollout, f64)], denom: usize) -> f64 {
    items
        .iter()
        .map(|(r, a)| a * crate::policy::trajectory_logprob(params, r))
        .sum::<f64>()
        / denom as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub mean_reward: f64,
    pub filter_rate: f64,
    pub tau: f64,
    pub mean_p_bar: f64,
    pub accuracy: f64,
    pub mean_steps: f64,
}

/// One update from already-sampled groups.
pub fn grpo_update(
    params: &PolicyParams,
    base: &FrozenBase,
    probe: Option<&Probe>,
    groups: &[Vec<Rollout>],
    cfg: &TrainerConfig,
    tau: f64,
) -> Result<(PolicyParams, StepStats, Vec<GroupBatch>)> {
    if groups.is_empty() {
        return Err(Error::Empty("GRPO task batch"));
    }
    let batches = groups
        .par_iter()
        .map(|g| score_group(g, base, probe, cfg, tau))
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<(&Rollout, f64)> = groups
        .iter()
        .zip(&batches)
        .flat_map(|(g, b)| g.iter().zip(b.advantages.iter().copied()))
        .collect();
    let total = items.len();
    let grad = surrogate_gradient(params, &items, total);
    let mut next = params.clone();
    next.add_scaled(&grad, cfg.lr);
    if !next.is_finite() {
        return Err(Error::NonFinite("GRPO update"));
    }

    let all = || groups.iter().flatten();
    let filtered = batches.iter().flat_map(|b| &b.keep_mask).filter(|k| !**k).count();
    let stats = StepStats {
        step: 0,
        mean_reward: batches.iter().flat_map(|b| &b.rewards).sum::<f64>() / total as f64,
        filter_rate: filtered as f64 / total as f64,
        tau,
        mean_p_bar: batches.iter().flat_map(|b| &b.probe_means).sum::<f64>() / total as f64,
        accuracy: all().filter(|r| r.correct).count() as f64 / total as f64,
        mean_steps: all().map(|r| r.steps() as f64).sum::<f64>() / total as f64,
    };
    Ok((next, stats, batches))
}

/// K rollouts per task; rollout `k` of task `i` uses `rng.fork(i).fork(k)`.
pub fn sample_groups(
    params: &PolicyParams,
    base: &FrozenBase,
    tasks: &[Task],
    cfg: &TrainerConfig,
    rng: &RngStream,
) -> Result<Vec<Vec<Rollout>>> {
    tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let ts = rng.fork(i as u64);
            (0..cfg.group_size)
                .map(|k| sample_rollout(params, task, cfg.temperature, cfg.max_len, &ts.fork(k as u64), base))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

pub fn grpo_step(
    params: &PolicyParams,
    base: &FrozenBase,
    probe: Option<&Probe>,
    tasks: &[Task],
    cfg: &TrainerConfig,
    schedule: &TauSchedule,
    rng: &RngStream,
) -> Result<(PolicyParams, StepStats)> {
    let groups = sample_groups(params, base, tasks, cfg, rng)?;
    let (next, stats, _) = grpo_update(params, base, probe, &groups, cfg, schedule.current_tau())?;
    Ok((next, stats))
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub params: PolicyParams,
    pub log: Vec<StepStats>,
    /// `(step, params)` every `checkpoint_every` steps.
    pub checkpoints: Vec<(usize, PolicyParams)>,
    pub schedule: TauSchedule,
}

/// Runs `cfg.steps` GRPO steps on fresh tasks. Step `s` draws its tasks from
/// `rng.child("tasks").fork(s)` and its rollouts from `rng.child("rollouts").fork(s)`.
pub fn train(
    init: &PolicyParams,
    base: &FrozenBase,
    probe: Option<&Probe>,
    cfg: &TrainerConfig,
    schedule: TauSchedule,
    rng: &RngStream,
) -> Result<TrainRun> {
    cfg.validate()?;
    schedule.validate()?;
    let task_rng = rng.child("tasks");
    let rollout_rng = rng.child("rollouts");
    let mut params = init.clone();
    let mut schedule = schedule;
    let mut log = Vec::with_capacity(cfg.steps);
    let mut checkpoints = Vec::new();
    for step in 1..=cfg.steps {
        let tasks = gen_tasks(&task_rng.fork(step as u64), &format!("train{step}"), cfg.tasks_per_step, cfg.ranges)?;
        let (next, mut stats) = grpo_step(
            &params,
            base,
            probe,
            &tasks,
            cfg,
            &schedule,
            &rollout_rng.fork(step as u64),
        )?;
        stats.step = step;
        schedule = schedule.update_ema(stats.accuracy);
        params = next;
        log.push(stats);
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            checkpoints.push((step, params.clone()));
        }
    }
    Ok(TrainRun {
        params,
        log,
        checkpoints,
        schedule,
    })
}

/// AUROC of frozen-probe step scores against oracle step labels; `None` when
/// the labels contain a single class.
pub fn audit_frozen_probe(
    probe: &Probe,
    base: &FrozenBase,
    labeled: &[(Rollout, CommitmentLabel)],
) -> Result<Option<f64>> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (r, l) in labeled {
        if r.steps() == 0 {
            continue;
        }
        scores.extend(mean_performativity(probe, base, r)?.per_step);
        labels.extend_from_slice(&l.step_labels);
    }
    audit_scores(&scores, &labels)
}

pub fn audit_scores(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    match auroc(scores, labels) {
        Ok(a) => Ok(Some(a)),
        Err(Error::SingleClass(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Scores every step of `rollouts` with the probe on frozen-base activations.
pub fn score_steps(probe: &Probe, base: &FrozenBase, rollouts: &[Rollout]) -> Result<Vec<Vec<f64>>> {
    rollouts
        .par_iter()
        .map(|r| {
            crate::policy::step_activations(base.params(), r)
                .iter()
                .map(|a| probe_forward(probe, a))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{derive_stream, Action};
    use crate::policy::{freeze_base, init_policy, trajectory_logprob, DEFAULT_HIDDEN, FEATURE_DIM};
    use proptest::prelude::*;

    #[test]
    fn filter_examples() {
        let (r, m) = apply_probe_filter(&[1.0, 1.0, 0.0], &[0.6, 0.1, 0.9], 0.5).unwrap();
        assert_eq!(r, vec![0.0, 1.0, 0.0]);
        assert_eq!(m, vec![false, true, false]);
        let (_, m) = apply_probe_filter(&[1.0], &[0.5], 0.5).unwrap();
        assert_eq!(m, vec![false]);
        let (r, m) = apply_probe_filter(&[1.0, 0.0, 1.0], &[0.2, 0.99, 0.0], 1.0).unwrap();
        assert_eq!(r, vec![1.0, 0.0, 1.0]);
        assert!(m.iter().all(|&k| k));
    }

    #[test]
    fn advantage_examples() {
        let a = group_advantages(&[0.0, 1.0, 0.0, 0.0], &[false, true, true, true], GroupStatsMode::All).unwrap();
        assert!((a.mu - 0.25).abs() < 1e-12);
        assert!((a.sigma - 0.4330).abs() < 1e-4);
        let want = [0.0, 1.732, -0.577, -0.577];
        for (x, w) in a.advantages.iter().zip(want) {
            assert!((x - w).abs() < 1e-3);
        }
        let a = group_advantages(&[0.7; 4], &[true; 4], GroupStatsMode::All).unwrap();
        assert_eq!(a.advantages, vec![0.0; 4]);
        let a = group_advantages(&[1.0, 0.0], &[true, true], GroupStatsMode::All).unwrap();
        assert_eq!((a.mu, a.sigma), (0.5, 0.5));
        assert_eq!(a.advantages, vec![1.0, -1.0]);
        let a = group_advantages(&[0.0, 0.0], &[false, false], GroupStatsMode::Unfiltered).unwrap();
        assert_eq!(a.advantages, vec![0.0, 0.0]);
        assert!(group_advantages(&[1.0], &[true], GroupStatsMode::All).is_err());
    }

    #[test]
    fn unfiltered_mode_ignores_filtered_entries() {
        let a = group_advantages(&[0.0, 1.0, 0.0, 1.0], &[false, true, true, true], GroupStatsMode::Unfiltered).unwrap();
        // kept rewards [1, 0, 1]: mu 2/3, sigma sqrt(2)/3
        assert!((a.mu - 2.0 / 3.0).abs() < 1e-12);
        assert!((a.sigma - 2f64.sqrt() / 3.0).abs() < 1e-12);
        assert_eq!(a.advantages[0], 0.0);
    }

    #[test]
    fn length_penalty_examples() {
        assert!((length_penalty_reward(1.0, 10, 0.01) - 0.9).abs() < 1e-12);
        assert_eq!(length_penalty_reward(0.7, 10, 0.0), 0.7);
        assert!((length_penalty_reward(0.0, 5, 0.01) + 0.05).abs() < 1e-12);
    }

    #[test]
    fn tau_schedule() {
        let s = TauSchedule::adaptive();
        let at = |r: f64| TauSchedule { r_bar: r, ..s }.adaptive_tau();
        assert!((at(0.11) - 0.21).abs() < 1e-12);
        assert!((at(0.18) - 0.28).abs() < 1e-12);
        assert_eq!(at(0.05), 0.20);
        assert_eq!(at(0.10), 0.20);
        assert_eq!(at(0.40), 0.50);
        assert_eq!(at(0.9), 0.50);

        let e = TauSchedule { r_bar: 0.1, ..s }.update_ema(0.1);
        assert!((e.r_bar - 0.1).abs() < 1e-15);
        let e = TauSchedule { r_bar: 0.0, ..s }.update_ema(1.0);
        assert!((e.r_bar - 0.1).abs() < 1e-15);
        let e = TauSchedule { r_bar: 0.3, ema_decay: 0.0, ..s }.update_ema(0.8);
        assert_eq!(e.r_bar, 0.8);
        assert_eq!(TauSchedule::fixed(0.35).current_tau(), 0.35);
    }

    proptest! {
        #[test]
        fn adaptive_tau_monotone(a in -1.0f64..2.0, b in -1.0f64..2.0) {
            let s = TauSchedule::adaptive();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let t_lo = TauSchedule { r_bar: lo, ..s }.adaptive_tau();
            let t_hi = TauSchedule { r_bar: hi, ..s }.adaptive_tau();
            prop_assert!(t_lo <= t_hi);
        }

        #[test]
        fn filtered_advantages_are_zero(
            rs in prop::collection::vec(0.0f64..1.0, 2..12),
            ps in prop::collection::vec(0.0f64..1.0, 12),
            tau in 0.0f64..1.0,
        ) {
            let ps = &ps[..rs.len()];
            let (rt, keep) = apply_probe_filter(&rs, ps, tau).unwrap();
            for mode in [GroupStatsMode::All, GroupStatsMode::Unfiltered] {
                let a = group_advantages(&rt, &keep, mode).unwrap();
                for k in 0..rs.len() {
                    prop_assert_eq!(rt[k], if keep[k] { rs[k] } else { 0.0 });
                    if !keep[k] { prop_assert_eq!(a.advantages[k], 0.0); }
                }
            }
        }
    }

    fn fixture() -> (PolicyParams, FrozenBase, Vec<Task>) {
        let p = init_policy(&derive_stream(11, "policy"), FEATURE_DIM, DEFAULT_HIDDEN);
        let base = freeze_base(&p);
        let tasks = gen_tasks(&derive_stream(11, "tasks"), "t", 4, TaskRanges::default()).unwrap();
        (p, base, tasks)
    }

    #[test]
    fn fully_filtered_batch_leaves_params_untouched() {
        let (p, base, tasks) = fixture();
        let probe = Probe::init(&derive_stream(1, "probe"), DEFAULT_HIDDEN, 8, 8);
        let cfg = TrainerConfig {
            filter_enabled: true,
            max_len: 10,
            ..TrainerConfig::default()
        };
        // tau = 0 filters everything since every score is > 0
        let (next, stats) = grpo_step(&p, &base, Some(&probe), &tasks, &cfg, &TauSchedule::fixed(0.0), &derive_stream(1, "s")).unwrap();
        assert_eq!(next, p);
        assert_eq!(stats.filter_rate, 1.0);
    }

    #[test]
    fn identical_rewards_leave_params_untouched() {
        let (p, base, tasks) = fixture();
        // max_len 1 never reaches the answer, so every reward is 0
        let cfg = TrainerConfig {
            max_len: 1,
            ..TrainerConfig::default()
        };
        let (next, _) = grpo_step(&p, &base, None, &tasks, &cfg, &TauSchedule::fixed(0.5), &derive_stream(2, "s")).unwrap();
        assert_eq!(next, p);
    }

    fn scripted(task: &Task, actions: &[Action], correct: bool) -> Rollout {
        Rollout {
            task_id: task.id.clone(),
            seed: 0,
            n_values: task.n(),
            max_len: 24,
            actions: actions.to_vec(),
            forced_answers: crate::synthenv::forced_answer_trajectory(task, actions),
            answer: None,
            correct,
            step_logprobs: vec![0.0; actions.len()],
            activations: None,
            condition: String::new(),
            checkpoint: 0,
        }
    }

    #[test]
    fn kept_correct_rollout_gains_probability() {
        use Action::*;
        let (p, base, _) = fixture();
        let task = Task::new("pair", vec![3, 4], 11).unwrap();
        let good = scripted(&task, &[Add, Add, Stop], true);
        let bad = scripted(&task, &[Add, Stop], false);
        let cfg = TrainerConfig {
            lr: 0.1,
            ..TrainerConfig::default()
        };
        let groups = vec![vec![good.clone(), bad]];
        let (next, _, batches) = grpo_update(&p, &base, None, &groups, &cfg, 0.5).unwrap();
        assert_eq!(batches[0].advantages, vec![1.0, -1.0]);
        assert!(trajectory_logprob(&next, &good) > trajectory_logprob(&p, &good));
    }

    #[test]
    fn filtered_rollout_gradient_is_exactly_absent() {
        let (p, base, tasks) = fixture();
        let cfg = TrainerConfig::default();
        let groups = sample_groups(&p, &base, &tasks, &cfg, &derive_stream(3, "s")).unwrap();
        let items: Vec<(&Rollout, f64)> = groups
            .iter()
            .flatten()
            .enumerate()
            .map(|(i, r)| (r, if i % 3 == 0 { 0.0 } else { (i as f64 * 0.37).sin() }))
            .collect();
        let with = surrogate_gradient(&p, &items, items.len());
        let without: Vec<_> = items.iter().copied().filter(|(_, a)| *a != 0.0).collect();
        assert_eq!(with, surrogate_gradient(&p, &without, items.len()));
    }

    #[test]
    fn baseline_logs_zero_filter_rate() {
        let (p, base, _) = fixture();
        let probe = Probe::init(&derive_stream(1, "probe"), DEFAULT_HIDDEN, 8, 8);
        let cfg = TrainerConfig {
            steps: 3,
            tasks_per_step: 2,
            ..TrainerConfig::default()
        };
        let run = train(&p, &base, Some(&probe), &cfg, TauSchedule::fixed(0.0), &derive_stream(4, "g")).unwrap();
        assert!(run.log.iter().all(|s| s.filter_rate == 0.0));
    }

    #[test]
    fn audit_edge_cases() {
        assert_eq!(audit_scores(&[0.1, 0.2], &[0, 0]).unwrap(), None);
        assert_eq!(audit_scores(&[0.1, 0.9], &[0, 1]).unwrap(), Some(1.0));
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let h = 1e-5;
        for seed in 0..20u64 {
            let p = init_policy(&derive_stream(seed, "sg"), FEATURE_DIM, 6);
            let base = freeze_base(&p);
            let tasks = crate::synthenv::gen_tasks(&derive_stream(seed, "t"), "t", 3, TaskRanges::default()).unwrap();
            let rollouts: Vec<Rollout> = tasks
                .iter()
                .enumerate()
                .map(|(i, t)| sample_rollout(&p, t, 1.0, 8, &derive_stream(seed, "r").fork(i as u64), &base).unwrap())
                .collect();
            let advs = [0.8, -1.3, 0.0];
            let items: Vec<(&Rollout, f64)> = rollouts.iter().zip(advs).collect();
            let analytic = surrogate_gradient(&p, &items, 5).to_flat();
            let flat = p.to_flat();
            let mut q = p.clone();
            let numeric: Vec<f64> = (0..flat.len())
                .map(|i| {
                    let mut x = flat.clone();
                    x[i] += h;
                    q.set_flat(&x);
                    let up = surrogate_objective(&q, &items, 5);
                    x[i] -= 2.0 * h;
                    q.set_flat(&x);
                    (up - surrogate_objective(&q, &items, 5)) / (2.0 * h)
                })
                .collect();
            let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(diff / norm <= 1e-4, "seed {seed}: rel err {}", diff / norm);
        }
    }
}

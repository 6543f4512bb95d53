//! Flat `key = value` experiment configuration with dotted keys.
//!
//! Lines starting with `#` (or anything after a `#`) are comments. Every key
//! has a default; a file only lists what it changes. Unknown keys, repeated
//! keys and unparsable values are rejected with the key named.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::policy::Layer;
use crate::probe::ProbeHyper;
use crate::synthenv::{TaskRanges, DEFAULT_MAX_LEN};
use crate::trainer::{GroupStatsMode, RewardMode, TauMode, TauSchedule, TrainerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    Baseline,
    Profil,
    LengthPenalty,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Baseline, Condition::Profil, Condition::LengthPenalty];

    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::Baseline => "baseline",
            Condition::Profil => "profil",
            Condition::LengthPenalty => "length_penalty",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("expected one of baseline, profil, length_penalty, got {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub ranges: TaskRanges,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub hidden: usize,
    /// Sampling temperature for RL, probe-training and audit rollouts.
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcConfig {
    pub epochs: usize,
    pub lr: f64,
    pub demo_count: usize,
    pub theater_p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub hyper: ProbeHyper,
    /// Labeled base-policy rollouts used to train the probe.
    pub rollouts: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrpoConfig {
    pub steps: usize,
    pub group_size: usize,
    pub tasks_per_step: usize,
    pub lr: f64,
    pub condition: Condition,
    pub tau_mode: TauMode,
    pub tau_fixed: f64,
    pub lambda: f64,
    pub group_stats_mode: GroupStatsMode,
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub task_count: usize,
    pub delta_faithful: f64,
    pub theta_probe: f64,
    pub thresholds_sweep: Vec<f64>,
    /// 0 is greedy decoding.
    pub temperature: f64,
    pub audit_tasks: usize,
    pub store_activations: bool,
    pub bootstrap_resamples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteerConfig {
    pub layer: Layer,
    pub coefficients: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub policy: PolicyConfig,
    pub bc: BcConfig,
    pub probe: ProbeConfig,
    pub grpo: GrpoConfig,
    pub eval: EvalConfig,
    pub steer: SteerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            env: EnvConfig {
                ranges: TaskRanges::default(),
                max_len: DEFAULT_MAX_LEN,
            },
            policy: PolicyConfig {
                hidden: crate::policy::DEFAULT_HIDDEN,
                temperature: 1.0,
            },
            bc: BcConfig {
                epochs: 200,
                lr: 0.05,
                demo_count: 2000,
                theater_p: 0.5,
            },
            probe: ProbeConfig {
                hyper: ProbeHyper::default(),
                rollouts: 800,
            },
            grpo: GrpoConfig {
                steps: 200,
                group_size: 8,
                tasks_per_step: 16,
                lr: 0.05,
                condition: Condition::Profil,
                tau_mode: TauMode::Fixed,
                tau_fixed: 0.5,
                lambda: 0.01,
                group_stats_mode: GroupStatsMode::All,
                checkpoint_every: 20,
            },
            eval: EvalConfig {
                task_count: 500,
                delta_faithful: 0.1,
                theta_probe: 0.5,
                thresholds_sweep: vec![0.05, 0.1, 0.2, 0.5],
                temperature: 0.0,
                audit_tasks: 500,
                store_activations: false,
                bootstrap_resamples: 5000,
            },
            steer: SteerConfig {
                layer: Layer::Second,
                coefficients: vec![0.0, 0.5, 1.0, 2.0, 4.0],
            },
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    raw.parse::<T>().map_err(|e| Error::Config {
        key: key.to_string(),
        msg: format!("cannot parse {raw:?}: {e}"),
    })
}

fn parse_list(key: &str, raw: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|s| parse_value::<f64>(key, s.trim()))
        .collect()
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config {
            key: key.to_string(),
            msg: format!("expected true or false, got {raw:?}"),
        }),
    }
}

fn parse_layer(key: &str, raw: &str) -> Result<Layer> {
    match raw {
        "1" => Ok(Layer::First),
        "2" => Ok(Layer::Second),
        _ => Err(Error::Config {
            key: key.to_string(),
            msg: format!("expected 1 or 2, got {raw:?}"),
        }),
    }
}

fn parse_enum<T>(key: &str, raw: &str, options: &[(&str, T)]) -> Result<T>
where
    T: Copy,
{
    options
        .iter()
        .find(|(name, _)| *name == raw)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::Config {
            key: key.to_string(),
            msg: format!(
                "expected one of {}, got {raw:?}",
                options.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
            ),
        })
}

const TAU_MODES: [(&str, TauMode); 2] = [("fixed", TauMode::Fixed), ("adaptive", TauMode::Adaptive)];
const STATS_MODES: [(&str, GroupStatsMode); 2] =
    [("all", GroupStatsMode::All), ("unfiltered", GroupStatsMode::Unfiltered)];

fn invalid(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.to_string(),
                msg: format!("line {} is not of the form key = value", idx + 1),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(invalid(key, "key given more than once"));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "env.n_min" => self.env.ranges.n_min = parse_value(key, v)?,
            "env.n_max" => self.env.ranges.n_max = parse_value(key, v)?,
            "env.m_min" => self.env.ranges.m_min = parse_value(key, v)?,
            "env.m_max" => self.env.ranges.m_max = parse_value(key, v)?,
            "env.max_len" => self.env.max_len = parse_value(key, v)?,
            "policy.hidden" => self.policy.hidden = parse_value(key, v)?,
            "policy.temperature" => self.policy.temperature = parse_value(key, v)?,
            "bc.epochs" => self.bc.epochs = parse_value(key, v)?,
            "bc.lr" => self.bc.lr = parse_value(key, v)?,
            "bc.demo_count" => self.bc.demo_count = parse_value(key, v)?,
            "bc.theater_p" => self.bc.theater_p = parse_value(key, v)?,
            "probe.heads" => self.probe.hyper.heads = parse_value(key, v)?,
            "probe.head_dim" => self.probe.hyper.head_dim = parse_value(key, v)?,
            "probe.lr" => self.probe.hyper.lr = parse_value(key, v)?,
            "probe.epochs" => self.probe.hyper.epochs = parse_value(key, v)?,
            "probe.holdout_frac" => self.probe.hyper.holdout_frac = parse_value(key, v)?,
            "probe.batch_size" => self.probe.hyper.batch_size = parse_value(key, v)?,
            "probe.rollouts" => self.probe.rollouts = parse_value(key, v)?,
            "grpo.steps" => self.grpo.steps = parse_value(key, v)?,
            "grpo.group_size" => self.grpo.group_size = parse_value(key, v)?,
            "grpo.tasks_per_step" => self.grpo.tasks_per_step = parse_value(key, v)?,
            "grpo.lr" => self.grpo.lr = parse_value(key, v)?,
            "grpo.condition" => self.grpo.condition = parse_value(key, v)?,
            "grpo.tau_mode" => self.grpo.tau_mode = parse_enum(key, v, &TAU_MODES)?,
            "grpo.tau_fixed" => self.grpo.tau_fixed = parse_value(key, v)?,
            "grpo.lambda" => self.grpo.lambda = parse_value(key, v)?,
            "grpo.group_stats_mode" => self.grpo.group_stats_mode = parse_enum(key, v, &STATS_MODES)?,
            "grpo.checkpoint_every" => self.grpo.checkpoint_every = parse_value(key, v)?,
            "eval.task_count" => self.eval.task_count = parse_value(key, v)?,
            "eval.delta_faithful" => self.eval.delta_faithful = parse_value(key, v)?,
            "eval.theta_probe" => self.eval.theta_probe = parse_value(key, v)?,
            "eval.thresholds_sweep" => self.eval.thresholds_sweep = parse_list(key, v)?,
            "eval.temperature" => self.eval.temperature = parse_value(key, v)?,
            "eval.audit_tasks" => self.eval.audit_tasks = parse_value(key, v)?,
            "eval.store_activations" => self.eval.store_activations = parse_bool(key, v)?,
            "eval.bootstrap_resamples" => self.eval.bootstrap_resamples = parse_value(key, v)?,
            "steer.layer" => self.steer.layer = parse_layer(key, v)?,
            "steer.coefficients" => self.steer.coefficients = parse_list(key, v)?,
            _ => return Err(invalid(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.env.ranges;
        if !(2 <= r.n_min && r.n_min <= r.n_max && r.n_max <= 8) {
            let key = if r.n_min < 2 || r.n_min > 8 { "env.n_min" } else { "env.n_max" };
            return Err(invalid(key, format!("need 2 <= n_min <= n_max <= 8, got [{}, {}]", r.n_min, r.n_max)));
        }
        if !(5 <= r.m_min && r.m_min <= r.m_max && r.m_max <= 13) {
            let key = if r.m_min < 5 || r.m_min > 13 { "env.m_min" } else { "env.m_max" };
            return Err(invalid(key, format!("need 5 <= m_min <= m_max <= 13, got [{}, {}]", r.m_min, r.m_max)));
        }
        if self.env.max_len <= r.n_max {
            return Err(invalid("env.max_len", "must exceed env.n_max"));
        }
        if self.policy.hidden == 0 {
            return Err(invalid("policy.hidden", "must be positive"));
        }
        if !(self.policy.temperature > 0.0 && self.policy.temperature.is_finite()) {
            return Err(invalid("policy.temperature", "must be positive"));
        }
        if !(self.bc.lr > 0.0) {
            return Err(invalid("bc.lr", "must be positive"));
        }
        if self.bc.demo_count == 0 {
            return Err(invalid("bc.demo_count", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.bc.theater_p) {
            return Err(invalid("bc.theater_p", "must lie in [0, 1)"));
        }
        let h = &self.probe.hyper;
        if h.heads == 0 {
            return Err(invalid("probe.heads", "must be positive"));
        }
        if h.head_dim == 0 {
            return Err(invalid("probe.head_dim", "must be positive"));
        }
        if !(h.lr > 0.0) {
            return Err(invalid("probe.lr", "must be positive"));
        }
        if !(h.holdout_frac > 0.0 && h.holdout_frac < 1.0) {
            return Err(invalid("probe.holdout_frac", "must lie in (0, 1)"));
        }
        if h.batch_size == 0 {
            return Err(invalid("probe.batch_size", "must be positive"));
        }
        if self.probe.rollouts < 2 {
            return Err(invalid("probe.rollouts", "need at least 2 rollouts"));
        }
        let g = &self.grpo;
        if g.group_size < 2 {
            return Err(invalid("grpo.group_size", "must be at least 2"));
        }
        if g.tasks_per_step == 0 {
            return Err(invalid("grpo.tasks_per_step", "must be positive"));
        }
        if !(g.lr >= 0.0 && g.lr.is_finite()) {
            return Err(invalid("grpo.lr", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&g.tau_fixed) {
            return Err(invalid("grpo.tau_fixed", "must lie in [0, 1]"));
        }
        if !(g.lambda >= 0.0 && g.lambda.is_finite()) {
            return Err(invalid("grpo.lambda", "must be non-negative"));
        }
        if g.checkpoint_every == 0 {
            return Err(invalid("grpo.checkpoint_every", "must be positive"));
        }
        let e = &self.eval;
        if e.task_count == 0 {
            return Err(invalid("eval.task_count", "must be positive"));
        }
        if !(0.0..=1.0).contains(&e.delta_faithful) {
            return Err(invalid("eval.delta_faithful", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&e.theta_probe) {
            return Err(invalid("eval.theta_probe", "must lie in [0, 1]"));
        }
        if e.thresholds_sweep.is_empty() || e.thresholds_sweep.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(invalid("eval.thresholds_sweep", "need one or more values in [0, 1]"));
        }
        if !(e.temperature >= 0.0 && e.temperature.is_finite()) {
            return Err(invalid("eval.temperature", "must be non-negative"));
        }
        if e.audit_tasks == 0 {
            return Err(invalid("eval.audit_tasks", "must be positive"));
        }
        if e.bootstrap_resamples == 0 {
            return Err(invalid("eval.bootstrap_resamples", "must be positive"));
        }
        if self.steer.coefficients.iter().any(|c| !c.is_finite()) {
            return Err(invalid("steer.coefficients", "must be finite"));
        }
        Ok(())
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        let g = &self.grpo;
        TrainerConfig {
            group_size: g.group_size,
            tasks_per_step: g.tasks_per_step,
            lr: g.lr,
            steps: g.steps,
            reward_mode: match g.condition {
                Condition::LengthPenalty => RewardMode::LengthPenalty,
                _ => RewardMode::Plain,
            },
            lambda: g.lambda,
            filter_enabled: g.condition == Condition::Profil,
            group_stats_mode: g.group_stats_mode,
            temperature: self.policy.temperature,
            max_len: self.env.max_len,
            ranges: self.env.ranges,
            checkpoint_every: g.checkpoint_every,
        }
    }

    pub fn tau_schedule(&self) -> TauSchedule {
        match self.grpo.tau_mode {
            TauMode::Fixed => TauSchedule::fixed(self.grpo.tau_fixed),
            TauMode::Adaptive => TauSchedule::adaptive(),
        }
    }

    /// Canonical text of the settings that shape the pretrained policy and
    /// the probe; artifacts built under a different prefix are not reused.
    pub fn shared_text(&self) -> String {
        self.to_text()
            .lines()
            .filter(|l| ["seed", "env.", "policy.", "bc.", "probe."].iter().any(|p| l.starts_with(p)))
            .map(|l| format!("{l}\n"))
            .collect()
    }

    /// Every key with its effective value, one per line.
    pub fn to_text(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let r = &self.env.ranges;
        let h = &self.probe.hyper;
        let g = &self.grpo;
        let e = &self.eval;
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "env.n_min = {}", r.n_min);
        let _ = writeln!(s, "env.n_max = {}", r.n_max);
        let _ = writeln!(s, "env.m_min = {}", r.m_min);
        let _ = writeln!(s, "env.m_max = {}", r.m_max);
        let _ = writeln!(s, "env.max_len = {}", self.env.max_len);
        let _ = writeln!(s, "policy.hidden = {}", self.policy.hidden);
        let _ = writeln!(s, "policy.temperature = {:?}", self.policy.temperature);
        let _ = writeln!(s, "bc.epochs = {}", self.bc.epochs);
        let _ = writeln!(s, "bc.lr = {:?}", self.bc.lr);
        let _ = writeln!(s, "bc.demo_count = {}", self.bc.demo_count);
        let _ = writeln!(s, "bc.theater_p = {:?}", self.bc.theater_p);
        let _ = writeln!(s, "probe.heads = {}", h.heads);
        let _ = writeln!(s, "probe.head_dim = {}", h.head_dim);
        let _ = writeln!(s, "probe.lr = {:?}", h.lr);
        let _ = writeln!(s, "probe.epochs = {}", h.epochs);
        let _ = writeln!(s, "probe.holdout_frac = {:?}", h.holdout_frac);
        let _ = writeln!(s, "probe.batch_size = {}", h.batch_size);
        let _ = writeln!(s, "probe.rollouts = {}", self.probe.rollouts);
        let _ = writeln!(s, "grpo.steps = {}", g.steps);
        let _ = writeln!(s, "grpo.group_size = {}", g.group_size);
        let _ = writeln!(s, "grpo.tasks_per_step = {}", g.tasks_per_step);
        let _ = writeln!(s, "grpo.lr = {:?}", g.lr);
        let _ = writeln!(s, "grpo.condition = {}", g.condition);
        let _ = writeln!(s, "grpo.tau_mode = {}", if g.tau_mode == TauMode::Fixed { "fixed" } else { "adaptive" });
        let _ = writeln!(s, "grpo.tau_fixed = {:?}", g.tau_fixed);
        let _ = writeln!(s, "grpo.lambda = {:?}", g.lambda);
        let _ = writeln!(
            s,
            "grpo.group_stats_mode = {}",
            if g.group_stats_mode == GroupStatsMode::All { "all" } else { "unfiltered" }
        );
        let _ = writeln!(s, "grpo.checkpoint_every = {}", g.checkpoint_every);
        let _ = writeln!(s, "eval.task_count = {}", e.task_count);
        let _ = writeln!(s, "eval.delta_faithful = {:?}", e.delta_faithful);
        let _ = writeln!(s, "eval.theta_probe = {:?}", e.theta_probe);
        let _ = writeln!(s, "eval.thresholds_sweep = {}", list(&e.thresholds_sweep));
        let _ = writeln!(s, "eval.temperature = {:?}", e.temperature);
        let _ = writeln!(s, "eval.audit_tasks = {}", e.audit_tasks);
        let _ = writeln!(s, "eval.store_activations = {}", e.store_activations);
        let _ = writeln!(s, "eval.bootstrap_resamples = {}", e.bootstrap_resamples);
        let _ = writeln!(s, "steer.layer = {}", if self.steer.layer == Layer::First { 1 } else { 2 });
        let _ = writeln!(s, "steer.coefficients = {}", list(&self.steer.coefficients));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(err: Error) -> String {
        match err {
            Error::Config { key, .. } => key,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
        assert_eq!(ExperimentConfig::parse("# nothing\n\n").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn parses_dotted_keys_and_comments() {
        let cfg = ExperimentConfig::parse(
            "seed = 9\ngrpo.tau_fixed=0.25 # tighter\ngrpo.condition = length_penalty\neval.thresholds_sweep = 0.1, 0.3\nsteer.layer = 1\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.grpo.tau_fixed, 0.25);
        assert_eq!(cfg.grpo.condition, Condition::LengthPenalty);
        assert_eq!(cfg.eval.thresholds_sweep, vec![0.1, 0.3]);
        assert_eq!(cfg.steer.layer, Layer::First);
        let t = cfg.trainer_config();
        assert_eq!(t.reward_mode, RewardMode::LengthPenalty);
        assert!(!t.filter_enabled);
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(key_of(ExperimentConfig::parse("grpo.tau = 0.5").unwrap_err()), "grpo.tau");
        assert_eq!(key_of(ExperimentConfig::parse("bc.lr = fast").unwrap_err()), "bc.lr");
        assert_eq!(key_of(ExperimentConfig::parse("grpo.condition = ppo").unwrap_err()), "grpo.condition");
        assert_eq!(key_of(ExperimentConfig::parse("env.n_max = 9").unwrap_err()), "env.n_max");
        assert_eq!(key_of(ExperimentConfig::parse("env.m_min = 4").unwrap_err()), "env.m_min");
        assert_eq!(key_of(ExperimentConfig::parse("grpo.group_size = 1").unwrap_err()), "grpo.group_size");
        assert_eq!(key_of(ExperimentConfig::parse("seed = 1\nseed = 2").unwrap_err()), "seed");
        assert_eq!(key_of(ExperimentConfig::parse("grpo.lambda = -1").unwrap_err()), "grpo.lambda");
        assert_eq!(key_of(ExperimentConfig::parse("eval.store_activations = maybe").unwrap_err()), "eval.store_activations");
    }

    #[test]
    fn text_dump_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 77;
        cfg.grpo.tau_mode = TauMode::Adaptive;
        cfg.grpo.group_stats_mode = GroupStatsMode::Unfiltered;
        cfg.eval.thresholds_sweep = vec![0.05, 0.125];
        cfg.bc.lr = 0.1 + 0.2;
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert!(!cfg.shared_text().contains("grpo."));
        assert!(cfg.shared_text().contains("bc.lr"));
    }
}

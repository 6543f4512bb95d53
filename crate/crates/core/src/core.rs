//! Shared domain types and the deterministic random-number contract.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::StepActivations;

/// A ModChain problem: add up `values` modulo `modulus`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub values: Vec<u8>,
    pub modulus: u32,
    pub answer: u32,
}

impl Task {
    pub const MIN_LEN: usize = 2;
    pub const MAX_LEN: usize = 8;
    pub const MIN_MODULUS: u32 = 5;
    pub const MAX_MODULUS: u32 = 13;

    pub fn new(id: impl Into<String>, values: Vec<u8>, modulus: u32) -> Result<Self> {
        if !(Self::MIN_LEN..=Self::MAX_LEN).contains(&values.len()) {
            return Err(Error::invalid(format!(
                "task length {} outside [{}, {}]",
                values.len(),
                Self::MIN_LEN,
                Self::MAX_LEN
            )));
        }
        if let Some(v) = values.iter().find(|&&v| v > 9) {
            return Err(Error::invalid(format!("task value {v} outside [0, 9]")));
        }
        if !(Self::MIN_MODULUS..=Self::MAX_MODULUS).contains(&modulus) {
            return Err(Error::invalid(format!(
                "modulus {modulus} outside [{}, {}]",
                Self::MIN_MODULUS,
                Self::MAX_MODULUS
            )));
        }
        let sum: u32 = values.iter().map(|&v| v as u32).sum();
        Ok(Self {
            id: id.into(),
            values,
            modulus,
            answer: sum % modulus,
        })
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    /// Checks the stored answer against the values, for tasks that came off disk.
    pub fn is_consistent(&self) -> bool {
        let sum: u32 = self.values.iter().map(|&v| v as u32).sum();
        self.modulus >= Self::MIN_MODULUS
            && self.values.len() >= Self::MIN_LEN
            && self.answer == sum % self.modulus
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Action {
    Add,
    Elab,
    Stop,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Add, Action::Elab, Action::Stop];

    pub fn index(self) -> usize {
        match self {
            Action::Add => 0,
            Action::Elab => 1,
            Action::Stop => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Action::Add => "ADD",
            Action::Elab => "ELAB",
            Action::Stop => "STOP",
        }
    }
}

impl std::fmt::Display for Action {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ADD" => Ok(Action::Add),
            "ELAB" => Ok(Action::Elab),
            "STOP" => Ok(Action::Stop),
            other => Err(Error::invalid(format!("unknown action `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EnvState {
    pub incorporated: usize,
    pub running_sum: u32,
    pub steps_elapsed: usize,
    pub last_action: Option<Action>,
    pub done: bool,
    /// Fixed by STOP.
    pub answer: Option<u32>,
}

/// One sampled chain. The terminal STOP is stored in `actions` but is not a
/// reasoning step, so `steps()` (T) excludes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub task_id: String,
    pub seed: u64,
    /// Number of task values; needed to rebuild step features.
    pub n_values: usize,
    /// Episode length limit the chain was sampled under.
    pub max_len: usize,
    pub actions: Vec<Action>,
    pub forced_answers: Vec<u32>,
    pub answer: Option<u32>,
    pub correct: bool,
    pub step_logprobs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activations: Option<Vec<StepActivations>>,
    pub condition: String,
    pub checkpoint: u32,
}

impl Rollout {
    pub fn terminated(&self) -> bool {
        self.actions.last() == Some(&Action::Stop)
    }

    /// Reasoning-step count T.
    pub fn steps(&self) -> usize {
        if self.terminated() {
            self.actions.len() - 1
        } else {
            self.actions.len()
        }
    }

    /// The non-terminal actions y_1..y_T.
    pub fn reasoning_actions(&self) -> &[Action] {
        &self.actions[..self.steps()]
    }

    /// Structural invariants every constructed rollout satisfies.
    pub fn check_invariants(&self) -> Result<()> {
        if self.forced_answers.len() != self.steps() {
            return Err(Error::invalid(format!(
                "rollout {}: {} forced answers for {} steps",
                self.task_id,
                self.forced_answers.len(),
                self.steps()
            )));
        }
        if self.step_logprobs.len() != self.actions.len() {
            return Err(Error::invalid(format!(
                "rollout {}: {} log-probs for {} actions",
                self.task_id,
                self.step_logprobs.len(),
                self.actions.len()
            )));
        }
        if let Some(acts) = &self.activations {
            if acts.len() != self.steps() {
                return Err(Error::invalid(format!(
                    "rollout {}: {} activation pairs for {} steps",
                    self.task_id,
                    acts.len(),
                    self.steps()
                )));
            }
        }
        if self.actions[..self.steps()].contains(&Action::Stop) {
            return Err(Error::invalid("STOP before the final action"));
        }
        Ok(())
    }
}

/// A reproducible random stream. Identical `(seed, stream_id)` pairs give
/// identical draws; distinct stream ids select distinct ChaCha streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// Child stream for the `index`-th independent consumer (rollout, resample, ...).
    pub fn fork(&self, index: u64) -> RngStream {
        RngStream {
            seed: self.seed,
            stream_id: splitmix64(self.stream_id ^ splitmix64(index.wrapping_add(1))),
        }
    }

    /// Child stream for a named sub-purpose.
    pub fn child(&self, purpose: &str) -> RngStream {
        RngStream {
            seed: self.seed,
            stream_id: splitmix64(self.stream_id ^ fnv1a(purpose.as_bytes())),
        }
    }

    /// Single 64-bit tag for this stream, stored on rollouts.
    pub fn fingerprint(&self) -> u64 {
        splitmix64(self.seed ^ self.stream_id.rotate_left(32))
    }
}

pub fn derive_stream(seed: u64, purpose: &str) -> RngStream {
    assert!(!purpose.is_empty(), "stream purpose must be non-empty");
    RngStream {
        seed,
        stream_id: fnv1a(purpose.as_bytes()),
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn draws(s: RngStream) -> Vec<u64> {
        let mut r = s.rng();
        (0..8).map(|_| r.gen()).collect()
    }

    #[test]
    fn same_seed_and_purpose_is_identical() {
        let a = derive_stream(42, "rollouts");
        let b = derive_stream(42, "rollouts");
        assert_eq!(a, b);
        assert_eq!(draws(a), draws(b));
    }

    #[test]
    fn purpose_and_seed_separate_streams() {
        let base = draws(derive_stream(42, "rollouts"));
        assert_ne!(base, draws(derive_stream(42, "probe")));
        assert_ne!(draws(derive_stream(42, "x")), draws(derive_stream(43, "x")));
    }

    #[test]
    fn forks_are_distinct_and_stable() {
        let s = derive_stream(7, "grpo");
        assert_eq!(draws(s.fork(3)), draws(s.fork(3)));
        assert_ne!(draws(s.fork(3)), draws(s.fork(4)));
        assert_ne!(draws(s.fork(0)), draws(s));
        assert_ne!(draws(s.child("a")), draws(s.child("b")));
    }

    #[test]
    fn task_answer_is_sum_mod_m() {
        assert_eq!(Task::new("a", vec![2, 3, 4], 7).unwrap().answer, 2);
        assert_eq!(Task::new("b", vec![0, 0], 5).unwrap().answer, 0);
        assert_eq!(Task::new("c", vec![9, 9, 9, 9], 13).unwrap().answer, 10);
        assert!(Task::new("d", vec![1], 7).is_err());
        assert!(Task::new("e", vec![1, 2], 4).is_err());
        assert!(Task::new("f", vec![1, 10], 7).is_err());
    }

    #[test]
    fn steps_exclude_terminal_stop() {
        let mut r = Rollout {
            task_id: "t".into(),
            seed: 0,
            n_values: 2,
            max_len: 24,
            actions: vec![Action::Add, Action::Add, Action::Stop],
            forced_answers: vec![1, 3],
            answer: Some(3),
            correct: true,
            step_logprobs: vec![0.0; 3],
            activations: None,
            condition: "demo".into(),
            checkpoint: 0,
        };
        assert_eq!(r.steps(), 2);
        r.check_invariants().unwrap();
        r.actions.pop();
        r.step_logprobs.pop();
        assert_eq!(r.steps(), 2);
        r.check_invariants().unwrap();
    }
}

//! ModChain: sum a short list of digits modulo `m`, one action per step.
//!
//! ADD folds the next value into the running sum, ELAB is an inert
//! "elaboration" step, and STOP emits `running_sum mod m`. Demonstrations add
//! every value, then keep elaborating for a geometric number of steps before
//! stopping; that tail is the planted theater.

use rand::Rng;

use crate::core::{Action, EnvState, RngStream, Rollout, Task};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskRanges {
    pub n_min: usize,
    pub n_max: usize,
    pub m_min: u32,
    pub m_max: u32,
}

impl Default for TaskRanges {
    fn default() -> Self {
        Self {
            n_min: 2,
            n_max: 8,
            m_min: 5,
            m_max: 13,
        }
    }
}

impl TaskRanges {
    pub fn validate(&self) -> Result<()> {
        if !(Task::MIN_LEN <= self.n_min && self.n_min <= self.n_max && self.n_max <= Task::MAX_LEN)
        {
            return Err(Error::invalid(format!(
                "n range [{}, {}] must satisfy 2 <= n_min <= n_max <= 8",
                self.n_min, self.n_max
            )));
        }
        if !(Task::MIN_MODULUS <= self.m_min
            && self.m_min <= self.m_max
            && self.m_max <= Task::MAX_MODULUS)
        {
            return Err(Error::invalid(format!(
                "modulus range [{}, {}] must satisfy 5 <= m_min <= m_max <= 13",
                self.m_min, self.m_max
            )));
        }
        Ok(())
    }
}

pub fn gen_task(rng: &RngStream, id: impl Into<String>, ranges: TaskRanges) -> Result<Task> {
    ranges.validate()?;
    let mut r = rng.rng();
    let n = r.gen_range(ranges.n_min..=ranges.n_max);
    let m = r.gen_range(ranges.m_min..=ranges.m_max);
    let values = (0..n).map(|_| r.gen_range(0..=9u8)).collect();
    Task::new(id, values, m)
}

/// `count` tasks with ids `{prefix}-{i}`, task `i` drawn from `rng.fork(i)`.
pub fn gen_tasks(rng: &RngStream, prefix: &str, count: usize, ranges: TaskRanges) -> Result<Vec<Task>> {
    (0..count)
        .map(|i| gen_task(&rng.fork(i as u64), format!("{prefix}-{i}"), ranges))
        .collect()
}

pub fn transition(state: &EnvState, action: Action, task: &Task) -> Result<EnvState> {
    if state.done {
        return Err(Error::EpisodeDone);
    }
    let mut next = *state;
    next.steps_elapsed += 1;
    next.last_action = Some(action);
    match action {
        Action::Add => {
            // Past the last value ADD is a legal no-op that still costs a step.
            if let Some(&v) = task.values.get(state.incorporated) {
                next.incorporated += 1;
                next.running_sum += v as u32;
            }
        }
        Action::Elab => {}
        Action::Stop => {
            next.done = true;
            next.answer = Some(next.running_sum % task.modulus);
        }
    }
    Ok(next)
}

pub fn verify(task: &Task, answer: Option<u32>) -> bool {
    answer == Some(task.answer)
}

/// The answer the chain would give if halted after `prefix`.
pub fn forced_answer(task: &Task, prefix: &[Action]) -> u32 {
    debug_assert!(!prefix.contains(&Action::Stop), "forced-answer prefix contains STOP");
    let adds = prefix.iter().filter(|&&a| a == Action::Add).count();
    let sum: u32 = task.values.iter().take(adds).map(|&v| v as u32).sum();
    sum % task.modulus
}

/// Forced answers after each step of `actions` (terminal STOP excluded).
pub fn forced_answer_trajectory(task: &Task, actions: &[Action]) -> Vec<u32> {
    let mut out = Vec::with_capacity(actions.len());
    let mut state = EnvState::default();
    for &a in actions.iter().take_while(|&&a| a != Action::Stop) {
        state = transition(&state, a, task).expect("non-terminal prefix");
        out.push(state.running_sum % task.modulus);
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct DemoConfig {
    pub count: usize,
    /// Probability of one more ELAB after the last ADD (and after each ELAB).
    pub theater_p: f64,
    pub max_len: usize,
    pub rng: RngStream,
}

impl DemoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::invalid("demo count must be positive"));
        }
        if !(0.0..1.0).contains(&self.theater_p) {
            return Err(Error::invalid(format!(
                "theater_p {} outside [0, 1)",
                self.theater_p
            )));
        }
        Ok(())
    }

    pub fn expected_tail(&self) -> f64 {
        self.theater_p / (1.0 - self.theater_p)
    }
}

/// Demonstration `i` solves `tasks[i % len]`: all ADDs, a geometric ELAB
/// tail, then STOP. Tails are capped so the whole demo fits in `max_len`.
pub fn make_demos(tasks: &[Task], cfg: &DemoConfig) -> Result<Vec<Rollout>> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Empty("demo tasks"));
    }
    let mut demos = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let task = &tasks[i % tasks.len()];
        let n = task.n();
        if n + 1 > cfg.max_len {
            return Err(Error::invalid(format!(
                "task {} needs {} actions but max_len is {}",
                task.id,
                n + 1,
                cfg.max_len
            )));
        }
        let stream = cfg.rng.fork(i as u64);
        let mut r = stream.rng();
        let cap = cfg.max_len - n - 1;
        let mut tail = 0;
        while tail < cap && r.gen::<f64>() < cfg.theater_p {
            tail += 1;
        }
        let mut actions = vec![Action::Add; n];
        actions.extend(std::iter::repeat(Action::Elab).take(tail));
        actions.push(Action::Stop);

        let forced_answers = forced_answer_trajectory(task, &actions);
        let mut state = EnvState::default();
        for &a in &actions {
            state = transition(&state, a, task)?;
        }
        demos.push(Rollout {
            task_id: task.id.clone(),
            seed: stream.fingerprint(),
            n_values: n,
            max_len: cfg.max_len,
            step_logprobs: vec![0.0; actions.len()],
            actions,
            forced_answers,
            answer: state.answer,
            correct: verify(task, state.answer),
            activations: None,
            condition: "demo".into(),
            checkpoint: 0,
        });
    }
    Ok(demos)
}

/// Number of ELAB steps after the last value was incorporated.
pub fn post_completion_elabs(actions: &[Action], n: usize) -> usize {
    let mut adds = 0;
    let mut count = 0;
    for &a in actions {
        match a {
            Action::Add => adds += 1,
            Action::Elab if adds >= n => count += 1,
            _ => {}
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::derive_stream;
    use proptest::prelude::*;

    fn task(values: &[u8], m: u32) -> Task {
        Task::new("t", values.to_vec(), m).unwrap()
    }

    #[test]
    fn gen_task_respects_ranges_and_is_deterministic() {
        let s = derive_stream(1, "tasks");
        let ranges = TaskRanges::default();
        for i in 0..200 {
            let t = gen_task(&s.fork(i), "x", ranges).unwrap();
            assert!(t.is_consistent());
            assert!((2..=8).contains(&t.n()));
            assert!((5..=13).contains(&t.modulus));
            assert_eq!(t, gen_task(&s.fork(i), "x", ranges).unwrap());
        }
        let bad = TaskRanges {
            n_min: 1,
            ..ranges
        };
        assert!(gen_task(&s, "x", bad).is_err());
        let bad = TaskRanges {
            m_min: 9,
            m_max: 8,
            ..ranges
        };
        assert!(gen_task(&s, "x", bad).is_err());
    }

    #[test]
    fn transitions() {
        let t = task(&[1, 2], 10);
        let s0 = EnvState::default();
        let s1 = transition(&s0, Action::Add, &t).unwrap();
        assert_eq!((s1.incorporated, s1.running_sum), (1, 1));
        let s2 = transition(&s1, Action::Add, &t).unwrap();
        let s3 = transition(&s2, Action::Elab, &t).unwrap();
        assert_eq!(s3.running_sum, 3);
        assert_eq!(s3.incorporated, 2);
        assert_eq!(s3.steps_elapsed, 3);
        let s4 = transition(&s3, Action::Add, &t).unwrap();
        assert_eq!((s4.incorporated, s4.running_sum, s4.steps_elapsed), (2, 3, 4));
        let done = transition(&s4, Action::Stop, &t).unwrap();
        assert!(done.done);
        assert_eq!(done.answer, Some(3));
        assert!(matches!(
            transition(&done, Action::Elab, &t),
            Err(Error::EpisodeDone)
        ));
    }

    #[test]
    fn verifier() {
        let t = task(&[2, 3, 4], 7);
        assert!(verify(&t, Some(2)));
        assert!(!verify(&t, None));
        assert!(!verify(&t, Some(3)));
    }

    #[test]
    fn forced_answer_examples() {
        let t = task(&[1, 2], 10);
        assert_eq!(forced_answer(&t, &[Action::Add]), 1);
        assert_eq!(forced_answer(&t, &[Action::Add, Action::Add]), 3);
        assert_eq!(forced_answer(&t, &[]), 0);
    }

    #[test]
    fn demos_with_zero_theater_have_no_tail() {
        let tasks = gen_tasks(&derive_stream(3, "t"), "t", 50, TaskRanges::default()).unwrap();
        let cfg = DemoConfig {
            count: 200,
            theater_p: 0.0,
            max_len: DEFAULT_MAX_LEN,
            rng: derive_stream(3, "demo"),
        };
        for (i, d) in make_demos(&tasks, &cfg).unwrap().iter().enumerate() {
            let t = &tasks[i % tasks.len()];
            assert_eq!(post_completion_elabs(&d.actions, t.n()), 0);
            assert!(verify(t, d.answer));
            d.check_invariants().unwrap();
        }
    }

    #[test]
    fn geometric_tail_mean() {
        let tasks = gen_tasks(&derive_stream(4, "t"), "t", 100, TaskRanges::default()).unwrap();
        let cfg = DemoConfig {
            count: 10_000,
            theater_p: 0.5,
            max_len: DEFAULT_MAX_LEN,
            rng: derive_stream(4, "demo"),
        };
        let demos = make_demos(&tasks, &cfg).unwrap();
        let mean = demos
            .iter()
            .zip(tasks.iter().cycle())
            .map(|(d, t)| post_completion_elabs(&d.actions, t.n()) as f64)
            .sum::<f64>()
            / demos.len() as f64;
        assert!((mean - cfg.expected_tail()).abs() <= 0.05, "mean tail {mean}");
        assert!(demos.iter().all(|d| d.correct && d.actions.len() <= DEFAULT_MAX_LEN));
    }

    #[test]
    fn tail_is_capped_by_max_len() {
        let t = task(&[1, 2, 3, 4, 5, 6, 7, 8], 13);
        let cfg = DemoConfig {
            count: 100,
            theater_p: 0.99,
            max_len: 12,
            rng: derive_stream(5, "demo"),
        };
        for d in make_demos(&[t], &cfg).unwrap() {
            assert!(d.actions.len() <= 12);
            assert!(d.correct);
        }
    }

    fn arb_task() -> impl Strategy<Value = Task> {
        (prop::collection::vec(0u8..=9, 2..=8), 5u32..=13)
            .prop_map(|(v, m)| Task::new("p", v, m).unwrap())
    }

    fn arb_prefix() -> impl Strategy<Value = Vec<Action>> {
        prop::collection::vec(prop_oneof![Just(Action::Add), Just(Action::Elab)], 0..20)
    }

    proptest! {
        #[test]
        fn full_adds_give_the_answer(t in arb_task()) {
            prop_assert_eq!(forced_answer(&t, &vec![Action::Add; t.n()]), t.answer);
        }

        #[test]
        fn elab_does_not_change_forced_answer(t in arb_task(), prefix in arb_prefix(), k in 0usize..5) {
            let mut longer = prefix.clone();
            longer.extend(std::iter::repeat(Action::Elab).take(k));
            prop_assert_eq!(forced_answer(&t, &prefix), forced_answer(&t, &longer));
        }

        #[test]
        fn replaying_a_demo_reproduces_its_answer(t in arb_task(), seed in any::<u64>()) {
            let cfg = DemoConfig { count: 3, theater_p: 0.5, max_len: DEFAULT_MAX_LEN, rng: derive_stream(seed, "demo") };
            for d in make_demos(std::slice::from_ref(&t), &cfg).unwrap() {
                let mut s = EnvState::default();
                for &a in &d.actions {
                    s = transition(&s, a, &t).unwrap();
                }
                prop_assert_eq!(s.answer, d.answer);
                prop_assert_eq!(forced_answer_trajectory(&t, &d.actions), d.forced_answers.clone());
            }
        }
    }
}

//! Two-hidden-layer tanh policy over {ADD, ELAB, STOP}.
//!
//! Gradients are written out by hand. Every hidden activation a rollout
//! carries comes from the [`FrozenBase`], never from the live parameters.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::core::{Action, EnvState, RngStream, Rollout, Task};
use crate::error::{Error, Result};
use crate::synthenv::{forced_answer, transition, verify};

pub const FEATURE_DIM: usize = 6;
pub const NUM_ACTIONS: usize = 3;
pub const DEFAULT_HIDDEN: usize = 16;

/// Weights are stored row-major: `w1[i * hidden + j]` maps input `i` to unit `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub feat_dim: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(feat_dim: usize, hidden: usize) -> Self {
        Self {
            feat_dim,
            hidden,
            w1: vec![0.0; feat_dim * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * hidden],
            b2: vec![0.0; hidden],
            w3: vec![0.0; hidden * NUM_ACTIONS],
            b3: vec![0.0; NUM_ACTIONS],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.feat_dim, self.hidden)
    }

    /// Named parameter arrays in a fixed order, for persistence and flat views.
    pub fn named_arrays(&self) -> [(&'static str, &Vec<f64>); 6] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("w3", &self.w3),
            ("b3", &self.b3),
        ]
    }

    fn arrays_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.named_arrays().iter().map(|(_, a)| a.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.named_arrays()
            .iter()
            .flat_map(|(_, a)| a.iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let mut off = 0;
        for a in self.arrays_mut() {
            let len = a.len();
            a.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &PolicyParams, scale: f64) {
        for (dst, src) in self.arrays_mut().into_iter().zip(other.named_arrays()) {
            for (d, s) in dst.iter_mut().zip(src.1) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in self.arrays_mut() {
            a.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named_arrays()
            .iter()
            .all(|(_, a)| a.iter().all(|x| x.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.named_arrays()
            .iter()
            .all(|(_, a)| a.iter().all(|&x| x == 0.0))
    }
}

/// Immutable snapshot of the pre-RL policy whose activations the probe reads.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBase {
    params: PolicyParams,
}

impl FrozenBase {
    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn activations(&self, feat: &StepFeatures) -> StepActivations {
        policy_forward(&self.params, feat).1
    }
}

pub fn freeze_base(params: &PolicyParams) -> FrozenBase {
    FrozenBase {
        params: params.clone(),
    }
}

/// `[incorporated/n, steps/L, last=ADD, last=ELAB, last=STOP-or-none, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepFeatures(pub [f64; FEATURE_DIM]);

impl StepFeatures {
    pub fn from_state(state: &EnvState, n: usize, max_len: usize) -> Self {
        let mut f = [0.0; FEATURE_DIM];
        f[0] = state.incorporated as f64 / n as f64;
        f[1] = state.steps_elapsed as f64 / max_len as f64;
        let slot = match state.last_action {
            Some(Action::Add) => 2,
            Some(Action::Elab) => 3,
            Some(Action::Stop) | None => 4,
        };
        f[slot] = 1.0;
        f[5] = 1.0;
        StepFeatures(f)
    }
}

/// Post-tanh activations of both hidden layers at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepActivations {
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    First,
    Second,
}

impl Layer {
    pub fn select<'a>(&self, acts: &'a StepActivations) -> &'a [f64] {
        match self {
            Layer::First => &acts.a1,
            Layer::Second => &acts.a2,
        }
    }
}

/// Activation shift applied inside the live policy: `a_layer -= shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct Steering {
    pub layer: Layer,
    pub shift: Vec<f64>,
}

pub fn init_policy(rng: &RngStream, feat_dim: usize, hidden: usize) -> PolicyParams {
    assert!(feat_dim > 0 && hidden > 0);
    let mut r = rng.rng();
    let mut p = PolicyParams::zeros(feat_dim, hidden);
    let mut fill = |w: &mut Vec<f64>, fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        w.iter_mut().for_each(|x| *x = r.gen_range(-bound..bound));
    };
    fill(&mut p.w1, feat_dim);
    fill(&mut p.w2, hidden);
    fill(&mut p.w3, hidden);
    p
}

fn affine_tanh(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let out = b.len();
    let mut z = b.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * out..(i + 1) * out];
        for (zj, wij) in z.iter_mut().zip(row) {
            *zj += wij * xi;
        }
    }
    z.iter_mut().for_each(|v| *v = v.tanh());
    z
}

fn output_logits(params: &PolicyParams, a2: &[f64]) -> [f64; NUM_ACTIONS] {
    let mut l = [0.0; NUM_ACTIONS];
    l.copy_from_slice(&params.b3);
    for (j, &aj) in a2.iter().enumerate() {
        for k in 0..NUM_ACTIONS {
            l[k] += params.w3[j * NUM_ACTIONS + k] * aj;
        }
    }
    l
}

pub fn policy_forward(params: &PolicyParams, feat: &StepFeatures) -> ([f64; NUM_ACTIONS], StepActivations) {
    policy_forward_steered(params, feat, None)
}

/// Forward pass; a steering shift replaces the named layer's output by
/// `a - shift` before it feeds the next layer.
pub fn policy_forward_steered(
    params: &PolicyParams,
    feat: &StepFeatures,
    steering: Option<&Steering>,
) -> ([f64; NUM_ACTIONS], StepActivations) {
    debug_assert_eq!(params.feat_dim, FEATURE_DIM);
    let mut a1 = affine_tanh(&params.w1, &params.b1, &feat.0);
    if let Some(s) = steering.filter(|s| s.layer == Layer::First) {
        a1.iter_mut().zip(&s.shift).for_each(|(a, v)| *a -= v);
    }
    let mut a2 = affine_tanh(&params.w2, &params.b2, &a1);
    if let Some(s) = steering.filter(|s| s.layer == Layer::Second) {
        a2.iter_mut().zip(&s.shift).for_each(|(a, v)| *a -= v);
    }
    let logits = output_logits(params, &a2);
    (logits, StepActivations { a1, a2 })
}

pub fn softmax(logits: &[f64; NUM_ACTIONS]) -> [f64; NUM_ACTIONS] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = logits.map(|l| (l - max).exp());
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= sum);
    p
}

pub fn log_softmax(logits: &[f64; NUM_ACTIONS]) -> [f64; NUM_ACTIONS] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.map(|l| l - lse)
}

/// Features of the state each action was chosen in, including the terminal STOP.
pub fn episode_features(rollout: &Rollout) -> Vec<StepFeatures> {
    let mut state = EnvState::default();
    let n = rollout.n_values;
    let mut out = Vec::with_capacity(rollout.actions.len());
    for &a in &rollout.actions {
        out.push(StepFeatures::from_state(&state, n, rollout.max_len));
        state.steps_elapsed += 1;
        state.last_action = Some(a);
        if a == Action::Add && state.incorporated < n {
            state.incorporated += 1;
        }
    }
    out
}

/// Activations of `params` at each reasoning step (terminal STOP excluded).
pub fn step_activations(params: &PolicyParams, rollout: &Rollout) -> Vec<StepActivations> {
    episode_features(rollout)
        .iter()
        .take(rollout.steps())
        .map(|f| policy_forward(params, f).1)
        .collect()
}

#[derive(Debug, Clone)]
pub struct SampleOptions<'a> {
    pub temperature: f64,
    pub max_len: usize,
    pub steering: Option<&'a Steering>,
}

impl SampleOptions<'_> {
    pub fn new(temperature: f64, max_len: usize) -> Self {
        Self {
            temperature,
            max_len,
            steering: None,
        }
    }
}

pub fn sample_rollout(
    params: &PolicyParams,
    task: &Task,
    temperature: f64,
    max_len: usize,
    rng: &RngStream,
    base: &FrozenBase,
) -> Result<Rollout> {
    sample_rollout_with(params, task, &SampleOptions::new(temperature, max_len), rng, base)
}

/// Samples until STOP or `max_len` actions. Temperature 0 is greedy argmax
/// (lowest index on ties). Log-probs are under the unsteered, untempered policy.
pub fn sample_rollout_with(
    params: &PolicyParams,
    task: &Task,
    opts: &SampleOptions<'_>,
    rng: &RngStream,
    base: &FrozenBase,
) -> Result<Rollout> {
    if opts.temperature < 0.0 || opts.temperature.is_nan() {
        return Err(Error::invalid("temperature must be >= 0"));
    }
    if opts.max_len == 0 {
        return Err(Error::invalid("max_len must be >= 1"));
    }
    let mut r = rng.rng();
    let n = task.n();
    let mut state = EnvState::default();
    let mut actions = Vec::new();
    let mut forced_answers = Vec::new();
    let mut step_logprobs = Vec::new();
    let mut activations = Vec::new();

    while !state.done && actions.len() < opts.max_len {
        let feat = StepFeatures::from_state(&state, n, opts.max_len);
        let (logits, _) = policy_forward_steered(params, &feat, opts.steering);
        let action = if opts.temperature == 0.0 {
            let mut best = 0;
            for k in 1..NUM_ACTIONS {
                if logits[k] > logits[best] {
                    best = k;
                }
            }
            Action::from_index(best).unwrap()
        } else {
            let probs = softmax(&logits.map(|l| l / opts.temperature));
            let u: f64 = r.gen();
            let mut acc = 0.0;
            let mut pick = NUM_ACTIONS - 1;
            for (k, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            Action::from_index(pick).unwrap()
        };
        let unsteered = if opts.steering.is_some() {
            policy_forward(params, &feat).0
        } else {
            logits
        };
        let lp = log_softmax(&unsteered)[action.index()];
        if !lp.is_finite() {
            return Err(Error::NonFinite("policy log-prob"));
        }
        step_logprobs.push(lp);
        actions.push(action);
        if action != Action::Stop {
            activations.push(base.activations(&feat));
            forced_answers.push(forced_answer(task, &actions));
        }
        state = transition(&state, action, task)?;
    }

    Ok(Rollout {
        task_id: task.id.clone(),
        seed: rng.fingerprint(),
        n_values: n,
        max_len: opts.max_len,
        actions,
        forced_answers,
        answer: state.answer,
        correct: verify(task, state.answer),
        step_logprobs,
        activations: Some(activations),
        condition: String::new(),
        checkpoint: 0,
    })
}

/// Sum over actions of log pi(a_t | s_t) under `params`.
pub fn trajectory_logprob(params: &PolicyParams, rollout: &Rollout) -> f64 {
    episode_features(rollout)
        .iter()
        .zip(&rollout.actions)
        .map(|(f, a)| log_softmax(&policy_forward(params, f).0)[a.index()])
        .sum()
}

/// Accumulates `weight * d/dparams [log softmax(logits)]` contracted with
/// `dlogits_coeff` into `grad`. For log pi(a) the coefficient is `e_a - pi`.
fn backprop_logits(
    params: &PolicyParams,
    feat: &StepFeatures,
    dlogits: &[f64; NUM_ACTIONS],
    grad: &mut PolicyParams,
) {
    let d = params.hidden;
    let (_, acts) = policy_forward(params, feat);
    let (a1, a2) = (&acts.a1, &acts.a2);

    let mut da2 = vec![0.0; d];
    for j in 0..d {
        for k in 0..NUM_ACTIONS {
            grad.w3[j * NUM_ACTIONS + k] += a2[j] * dlogits[k];
            da2[j] += params.w3[j * NUM_ACTIONS + k] * dlogits[k];
        }
    }
    for k in 0..NUM_ACTIONS {
        grad.b3[k] += dlogits[k];
    }
    let dz2: Vec<f64> = (0..d).map(|j| da2[j] * (1.0 - a2[j] * a2[j])).collect();
    let mut da1 = vec![0.0; d];
    for i in 0..d {
        for j in 0..d {
            grad.w2[i * d + j] += a1[i] * dz2[j];
            da1[i] += params.w2[i * d + j] * dz2[j];
        }
    }
    for j in 0..d {
        grad.b2[j] += dz2[j];
    }
    let dz1: Vec<f64> = (0..d).map(|j| da1[j] * (1.0 - a1[j] * a1[j])).collect();
    for (i, &fi) in feat.0.iter().enumerate() {
        for j in 0..d {
            grad.w1[i * d + j] += fi * dz1[j];
        }
    }
    for j in 0..d {
        grad.b1[j] += dz1[j];
    }
}

/// `weight * sum_t grad log pi(a_t | s_t)`, over every action including STOP.
pub fn logprob_grad(params: &PolicyParams, rollout: &Rollout, weight: f64) -> PolicyParams {
    let mut grad = params.zeros_like();
    if weight == 0.0 {
        return grad;
    }
    for (feat, a) in episode_features(rollout).iter().zip(&rollout.actions) {
        let probs = softmax(&policy_forward(params, feat).0);
        let mut coeff = [0.0; NUM_ACTIONS];
        for k in 0..NUM_ACTIONS {
            let target = if k == a.index() { 1.0 } else { 0.0 };
            coeff[k] = weight * (target - probs[k]);
        }
        backprop_logits(params, feat, &coeff, &mut grad);
    }
    grad
}

/// Behavior-cloning data: distinct (features, action) pairs with multiplicities.
#[derive(Debug, Clone)]
pub struct BcData {
    pairs: Vec<(StepFeatures, Action, f64)>,
    total: f64,
}

impl BcData {
    pub fn from_demos(demos: &[Rollout]) -> Result<Self> {
        if demos.is_empty() {
            return Err(Error::Empty("behavior-cloning demos"));
        }
        let mut counts: BTreeMap<([u64; FEATURE_DIM], usize), (StepFeatures, f64)> = BTreeMap::new();
        for d in demos {
            for (f, a) in episode_features(d).into_iter().zip(&d.actions) {
                let key = (f.0.map(f64::to_bits), a.index());
                counts.entry(key).or_insert((f, 0.0)).1 += 1.0;
            }
        }
        let pairs: Vec<_> = counts
            .into_iter()
            .map(|((_, a), (f, c))| (f, Action::from_index(a).unwrap(), c))
            .collect();
        let total = pairs.iter().map(|p| p.2).sum();
        Ok(Self { pairs, total })
    }

    pub fn len(&self) -> usize {
        self.total as usize
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0.0
    }
}

/// Mean cross-entropy of demo actions.
pub fn bc_loss(params: &PolicyParams, data: &BcData) -> f64 {
    let sum: f64 = data
        .pairs
        .iter()
        .map(|(f, a, c)| -c * log_softmax(&policy_forward(params, f).0)[a.index()])
        .sum();
    sum / data.total
}

pub fn bc_loss_grad(params: &PolicyParams, data: &BcData) -> PolicyParams {
    let mut grad = params.zeros_like();
    for (f, a, c) in &data.pairs {
        let probs = softmax(&policy_forward(params, f).0);
        let w = c / data.total;
        let mut coeff = [0.0; NUM_ACTIONS];
        for k in 0..NUM_ACTIONS {
            let target = if k == a.index() { 1.0 } else { 0.0 };
            coeff[k] = w * (probs[k] - target);
        }
        backprop_logits(params, f, &coeff, &mut grad);
    }
    grad
}

#[derive(Debug, Clone)]
pub struct BcOutcome {
    pub params: PolicyParams,
    /// Loss before training followed by the loss after each epoch.
    pub losses: Vec<f64>,
}

/// Full-batch gradient descent on the demo cross-entropy.
pub fn behavior_clone(params: &PolicyParams, demos: &[Rollout], epochs: usize, lr: f64) -> Result<BcOutcome> {
    if !(lr > 0.0) {
        return Err(Error::invalid("behavior-cloning lr must be positive"));
    }
    let data = BcData::from_demos(demos)?;
    let mut p = params.clone();
    let mut loss = bc_loss(&p, &data);
    let mut losses = Vec::with_capacity(epochs + 1);
    losses.push(loss);
    for _ in 0..epochs {
        let g = bc_loss_grad(&p, &data);
        // full-batch descent; the step is halved until the loss does not rise
        let mut step = lr;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let mut q = p.clone();
            q.add_scaled(&g, -step);
            let l = bc_loss(&q, &data);
            if l.is_finite() && l <= loss {
                accepted = Some((q, l));
                break;
            }
            step *= 0.5;
        }
        if let Some((q, l)) = accepted {
            p = q;
            loss = l;
        }
        if !p.is_finite() {
            return Err(Error::NonFinite("behavior cloning"));
        }
        losses.push(loss);
    }
    Ok(BcOutcome { params: p, losses })
}

const MAX_HALVINGS: usize = 30;

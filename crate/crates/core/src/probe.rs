//! Gated multi-head attention probe over frozen-base activations.
//!
//! Each step contributes two tokens, one per hidden layer. A token is the
//! layer's activation vector standardized across its entries, rescaled by a
//! learned per-layer gain and offset, then projected by that layer's key and
//! value matrices. Every head attends over the two tokens with its own learned
//! query, heads are mixed through sigmoid gates, and a linear readout gives a
//! single logit.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::core::{RngStream, Rollout, Task};
use crate::error::{Error, Result};
use crate::labeling::CommitmentLabel;
use crate::policy::{
    sample_rollout_with, step_activations, FrozenBase, Layer, PolicyParams, SampleOptions, Steering,
    StepActivations,
};
use crate::stats::{auroc, pearson};

const NORM_EPS: f64 = 1e-5;
const NUM_LAYERS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub heads: usize,
    pub head_dim: usize,
    /// Width of each activation vector.
    pub dim: usize,
    pub norm_gain: [Vec<f64>; NUM_LAYERS],
    pub norm_offset: [Vec<f64>; NUM_LAYERS],
    /// `dim x head_dim`, row-major.
    pub keys: [Vec<f64>; NUM_LAYERS],
    pub values: [Vec<f64>; NUM_LAYERS],
    /// `heads x head_dim`, row-major.
    pub queries: Vec<f64>,
    /// Gate pre-activations; the gate itself is `sigmoid(gates[h])`.
    pub gates: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Probe {
    pub fn zeros(dim: usize, heads: usize, head_dim: usize) -> Self {
        Self {
            heads,
            head_dim,
            dim,
            norm_gain: [vec![0.0; dim], vec![0.0; dim]],
            norm_offset: [vec![0.0; dim], vec![0.0; dim]],
            keys: [vec![0.0; dim * head_dim], vec![0.0; dim * head_dim]],
            values: [vec![0.0; dim * head_dim], vec![0.0; dim * head_dim]],
            queries: vec![0.0; heads * head_dim],
            gates: vec![0.0; heads],
            w_out: vec![0.0; head_dim],
            b_out: 0.0,
        }
    }

    /// Unit gains, zero offsets and gate pre-activations, uniform(+-1/sqrt(fan_in)) elsewhere.
    pub fn init(rng: &RngStream, dim: usize, heads: usize, head_dim: usize) -> Self {
        let mut r = rng.rng();
        let mut p = Self::zeros(dim, heads, head_dim);
        let mut fill = |w: &mut Vec<f64>, fan_in: usize| {
            let b = 1.0 / (fan_in as f64).sqrt();
            w.iter_mut().for_each(|x| *x = r.gen_range(-b..b));
        };
        for l in 0..NUM_LAYERS {
            p.norm_gain[l].iter_mut().for_each(|g| *g = 1.0);
            fill(&mut p.keys[l], dim);
            fill(&mut p.values[l], dim);
        }
        fill(&mut p.queries, head_dim);
        fill(&mut p.w_out, head_dim);
        p
    }

    pub fn gate(&self, h: usize) -> f64 {
        sigmoid(self.gates[h])
    }

    /// Named parameter arrays, in persistence order. The output bias is a
    /// one-element array.
    pub fn named_arrays(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for l in 0..NUM_LAYERS {
            out.push((format!("norm_gain.{l}"), self.norm_gain[l].clone()));
            out.push((format!("norm_offset.{l}"), self.norm_offset[l].clone()));
            out.push((format!("keys.{l}"), self.keys[l].clone()));
            out.push((format!("values.{l}"), self.values[l].clone()));
        }
        out.push(("queries".into(), self.queries.clone()));
        out.push(("gates".into(), self.gates.clone()));
        out.push(("w_out".into(), self.w_out.clone()));
        out.push(("b_out".into(), vec![self.b_out]));
        out
    }

    fn slots_mut(&mut self) -> Vec<&mut [f64]> {
        let [g0, g1] = &mut self.norm_gain;
        let [o0, o1] = &mut self.norm_offset;
        let [k0, k1] = &mut self.keys;
        let [v0, v1] = &mut self.values;
        vec![
            g0,
            o0,
            k0,
            v0,
            g1,
            o1,
            k1,
            v1,
            &mut self.queries,
            &mut self.gates,
            &mut self.w_out,
            std::slice::from_mut(&mut self.b_out),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.named_arrays().iter().map(|(_, a)| a.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.named_arrays().into_iter().flat_map(|(_, a)| a).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let mut off = 0;
        for s in self.slots_mut() {
            let n = s.len();
            s.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Rebuilds a probe from its named arrays; shapes are checked against the
    /// stated dimensions.
    pub fn from_named(dim: usize, heads: usize, head_dim: usize, arrays: &[(String, Vec<f64>)]) -> Result<Self> {
        let mut p = Self::zeros(dim, heads, head_dim);
        let expected = p.named_arrays();
        if arrays.len() != expected.len() {
            return Err(Error::invalid(format!(
                "probe file has {} arrays, expected {}",
                arrays.len(),
                expected.len()
            )));
        }
        let mut flat = Vec::with_capacity(p.num_params());
        for ((name, data), (want, shape)) in arrays.iter().zip(&expected) {
            if name != want || data.len() != shape.len() {
                return Err(Error::invalid(format!(
                    "probe array `{name}` (len {}) does not match `{want}` (len {})",
                    data.len(),
                    shape.len()
                )));
            }
            flat.extend_from_slice(data);
        }
        p.set_flat(&flat);
        Ok(p)
    }

    fn check_dims(&self, acts: &StepActivations) -> Result<()> {
        for a in [&acts.a1, &acts.a2] {
            if a.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: a.len(),
                });
            }
        }
        Ok(())
    }
}

/// Everything the backward pass needs from one forward evaluation.
struct Cache {
    /// (layer, standardized activations)
    normed: Vec<(usize, Vec<f64>)>,
    x: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// attention weights, `heads x tokens`
    alpha: Vec<Vec<f64>>,
    head_out: Vec<Vec<f64>>,
    z: Vec<f64>,
    logit: f64,
}

fn standardize(a: &[f64]) -> Vec<f64> {
    let n = a.len() as f64;
    let mean = a.iter().sum::<f64>() / n;
    let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + NORM_EPS).sqrt();
    a.iter().map(|x| (x - mean) * inv).collect()
}

fn project(w: &[f64], x: &[f64], out: usize) -> Vec<f64> {
    let mut y = vec![0.0; out];
    for (i, &xi) in x.iter().enumerate() {
        for (j, yj) in y.iter_mut().enumerate() {
            *yj += w[i * out + j] * xi;
        }
    }
    y
}

fn forward_tokens(probe: &Probe, tokens: &[(usize, &[f64])]) -> Cache {
    let dh = probe.head_dim;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut normed = Vec::with_capacity(tokens.len());
    let mut xs = Vec::with_capacity(tokens.len());
    let mut ks = Vec::with_capacity(tokens.len());
    let mut vs = Vec::with_capacity(tokens.len());
    for &(l, a) in tokens {
        let n = standardize(a);
        let x: Vec<f64> = n
            .iter()
            .zip(&probe.norm_gain[l])
            .zip(&probe.norm_offset[l])
            .map(|((ni, g), o)| g * ni + o)
            .collect();
        ks.push(project(&probe.keys[l], &x, dh));
        vs.push(project(&probe.values[l], &x, dh));
        normed.push((l, n));
        xs.push(x);
    }
    let mut alpha = Vec::with_capacity(probe.heads);
    let mut head_out = Vec::with_capacity(probe.heads);
    let mut z = vec![0.0; dh];
    for h in 0..probe.heads {
        let q = &probe.queries[h * dh..(h + 1) * dh];
        let e: Vec<f64> = ks
            .iter()
            .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale)
            .collect();
        let max = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = e.iter().map(|x| (x - max).exp()).collect();
        let sum: f64 = w.iter().sum();
        let a: Vec<f64> = w.iter().map(|x| x / sum).collect();
        let mut out = vec![0.0; dh];
        for (ai, v) in a.iter().zip(&vs) {
            for (o, vi) in out.iter_mut().zip(v) {
                *o += ai * vi;
            }
        }
        let g = probe.gate(h);
        for (zi, oi) in z.iter_mut().zip(&out) {
            *zi += g * oi;
        }
        alpha.push(a);
        head_out.push(out);
    }
    let logit = probe.b_out + probe.w_out.iter().zip(&z).map(|(w, zi)| w * zi).sum::<f64>();
    Cache {
        normed,
        x: xs,
        k: ks,
        v: vs,
        alpha,
        head_out,
        z,
        logit,
    }
}

fn step_tokens(acts: &StepActivations) -> [(usize, &[f64]); 2] {
    [(0, acts.a1.as_slice()), (1, acts.a2.as_slice())]
}

/// Accumulates `dlogit * d(logit)/d(params)` into `grad`.
fn backward(probe: &Probe, cache: &Cache, dlogit: f64, grad: &mut Probe) {
    let dh = probe.head_dim;
    let scale = 1.0 / (dh as f64).sqrt();
    grad.b_out += dlogit;
    let dz: Vec<f64> = probe.w_out.iter().map(|w| w * dlogit).collect();
    for (g, zi) in grad.w_out.iter_mut().zip(&cache.z) {
        *g += dlogit * zi;
    }
    let tokens = cache.k.len();
    let mut dk = vec![vec![0.0; dh]; tokens];
    let mut dv = vec![vec![0.0; dh]; tokens];
    for h in 0..probe.heads {
        let g = probe.gate(h);
        let head = &cache.head_out[h];
        let dgate: f64 = dz.iter().zip(head).map(|(a, b)| a * b).sum();
        grad.gates[h] += dgate * g * (1.0 - g);
        let dhead: Vec<f64> = dz.iter().map(|d| d * g).collect();
        let alpha = &cache.alpha[h];
        let dalpha: Vec<f64> = cache
            .v
            .iter()
            .map(|v| v.iter().zip(&dhead).map(|(a, b)| a * b).sum())
            .collect();
        for (t, a) in alpha.iter().enumerate() {
            for (d, hh) in dv[t].iter_mut().zip(&dhead) {
                *d += a * hh;
            }
        }
        let inner: f64 = alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
        let q = &probe.queries[h * dh..(h + 1) * dh];
        for t in 0..tokens {
            let de = alpha[t] * (dalpha[t] - inner) * scale;
            for j in 0..dh {
                grad.queries[h * dh + j] += de * cache.k[t][j];
                dk[t][j] += de * q[j];
            }
        }
    }
    for t in 0..tokens {
        let (l, ref n) = cache.normed[t];
        let x = &cache.x[t];
        let mut dx = vec![0.0; probe.dim];
        for i in 0..probe.dim {
            for j in 0..dh {
                grad.keys[l][i * dh + j] += x[i] * dk[t][j];
                grad.values[l][i * dh + j] += x[i] * dv[t][j];
                dx[i] += probe.keys[l][i * dh + j] * dk[t][j] + probe.values[l][i * dh + j] * dv[t][j];
            }
        }
        for i in 0..probe.dim {
            grad.norm_gain[l][i] += dx[i] * n[i];
            grad.norm_offset[l][i] += dx[i];
        }
    }
}

pub fn probe_logit(probe: &Probe, acts: &StepActivations) -> Result<f64> {
    probe.check_dims(acts)?;
    Ok(forward_tokens(probe, &step_tokens(acts)).logit)
}

/// Performativity score in (0, 1) for one step.
pub fn probe_forward(probe: &Probe, acts: &StepActivations) -> Result<f64> {
    probe_logit(probe, acts).map(sigmoid)
}

/// Binary cross-entropy with logits, averaged over `batch`.
pub fn bce_loss(probe: &Probe, batch: &[(&StepActivations, u8)]) -> f64 {
    batch
        .iter()
        .map(|(a, y)| {
            let s = forward_tokens(probe, &step_tokens(a)).logit;
            // log(1 + e^s) - y s, computed stably
            let softplus = s.max(0.0) + (-s.abs()).exp().ln_1p();
            softplus - *y as f64 * s
        })
        .sum::<f64>()
        / batch.len() as f64
}

pub fn bce_grad(probe: &Probe, batch: &[(&StepActivations, u8)]) -> Probe {
    let mut grad = Probe::zeros(probe.dim, probe.heads, probe.head_dim);
    let inv = 1.0 / batch.len() as f64;
    for (a, y) in batch {
        let cache = forward_tokens(probe, &step_tokens(a));
        backward(probe, &cache, (sigmoid(cache.logit) - *y as f64) * inv, &mut grad);
    }
    grad
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeHyper {
    pub lr: f64,
    pub epochs: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub holdout_frac: f64,
    pub batch_size: usize,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            epochs: 200,
            heads: 8,
            head_dim: 8,
            holdout_frac: 0.2,
            batch_size: 64,
        }
    }
}

impl ProbeHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.heads == 0 || self.head_dim == 0 || self.batch_size == 0 {
            return Err(Error::invalid(format!("bad probe hyperparameters {self:?}")));
        }
        if !(self.holdout_frac > 0.0 && self.holdout_frac < 1.0) {
            return Err(Error::invalid(format!(
                "holdout_frac {} outside (0, 1)",
                self.holdout_frac
            )));
        }
        Ok(())
    }
}

/// One labeled step. Steps sharing a `group` (rollout) land on the same side
/// of the train/held-out split.
#[derive(Debug, Clone)]
pub struct LabeledStep {
    pub acts: StepActivations,
    pub label: u8,
    pub group: usize,
}

#[derive(Debug, Clone)]
pub struct ProbeFit {
    pub probe: Probe,
    pub held_out_auroc: f64,
    pub best_epoch: usize,
    pub auroc_history: Vec<f64>,
    pub held_out_groups: Vec<usize>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Mini-batch Adam on BCE; keeps the epoch with the best held-out AUROC
/// (earliest on ties).
pub fn fit_probe(steps: &[LabeledStep], hyper: &ProbeHyper, rng: &RngStream) -> Result<ProbeFit> {
    hyper.validate()?;
    let first = steps.first().ok_or(Error::Empty("probe training steps"))?;
    let dim = first.acts.a1.len();

    let mut groups: Vec<usize> = steps.iter().map(|s| s.group).collect();
    groups.sort_unstable();
    groups.dedup();
    let mut split_rng = rng.child("split").rng();
    groups.shuffle(&mut split_rng);
    let n_hold = ((groups.len() as f64 * hyper.holdout_frac).round() as usize).clamp(1, groups.len().max(2) - 1);
    let mut held_out_groups: Vec<usize> = groups[..n_hold].to_vec();
    held_out_groups.sort_unstable();
    let is_held = |g: usize| held_out_groups.binary_search(&g).is_ok();

    let train: Vec<&LabeledStep> = steps.iter().filter(|s| !is_held(s.group)).collect();
    let held: Vec<&LabeledStep> = steps.iter().filter(|s| is_held(s.group)).collect();
    for (name, set) in [("training", &train), ("held-out", &held)] {
        let pos = set.iter().filter(|s| s.label == 1).count();
        if pos == 0 || pos == set.len() {
            if name == "training" {
                return Err(Error::SingleClass(set.first().map(|s| s.label).unwrap_or(0)));
            }
            return Err(Error::invalid(format!(
                "{name} split has a single class; add rollouts or change holdout_frac"
            )));
        }
    }
    for s in steps {
        if s.acts.a1.len() != dim || s.acts.a2.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: s.acts.a1.len().max(s.acts.a2.len()),
            });
        }
    }
    let held_labels: Vec<u8> = held.iter().map(|s| s.label).collect();

    let mut probe = Probe::init(&rng.child("init"), dim, hyper.heads, hyper.head_dim);
    let held_auroc = |p: &Probe| -> f64 {
        let scores: Vec<f64> = held
            .iter()
            .map(|s| forward_tokens(p, &step_tokens(&s.acts)).logit)
            .collect();
        auroc(&scores, &held_labels).expect("both classes checked")
    };

    let n_params = probe.num_params();
    let mut m = vec![0.0; n_params];
    let mut v = vec![0.0; n_params];
    let mut t = 0i32;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = rng.child("shuffle").rng();

    let mut best = (probe.clone(), f64::NEG_INFINITY, 0usize);
    let mut history = Vec::with_capacity(hyper.epochs);
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<(&StepActivations, u8)> =
                chunk.iter().map(|&i| (&train[i].acts, train[i].label)).collect();
            let g = bce_grad(&probe, &batch).to_flat();
            t += 1;
            let mut flat = probe.to_flat();
            let bc1 = 1.0 - BETA1.powi(t);
            let bc2 = 1.0 - BETA2.powi(t);
            for i in 0..n_params {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                flat[i] -= hyper.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
            }
            probe.set_flat(&flat);
        }
        let a = held_auroc(&probe);
        history.push(a);
        if a > best.1 {
            best = (probe.clone(), a, epoch);
        }
    }
    if hyper.epochs == 0 {
        best.1 = held_auroc(&probe);
    }
    Ok(ProbeFit {
        probe: best.0,
        held_out_auroc: best.1,
        best_epoch: best.2,
        auroc_history: history,
        held_out_groups,
    })
}

/// Labeled steps with activations from `params`, one group per rollout.
pub fn labeled_steps(params: &PolicyParams, labeled: &[(Rollout, CommitmentLabel)]) -> Vec<LabeledStep> {
    labeled
        .iter()
        .enumerate()
        .flat_map(|(g, (r, l))| {
            step_activations(params, r)
                .into_iter()
                .zip(l.step_labels.clone())
                .map(move |(acts, label)| LabeledStep {
                    acts,
                    label,
                    group: g,
                })
        })
        .collect()
}

/// Trains the probe on frozen-base activations of the labeled rollouts and
/// returns it with its best-epoch held-out AUROC.
pub fn train_probe(
    base: &FrozenBase,
    labeled: &[(Rollout, CommitmentLabel)],
    hyper: &ProbeHyper,
    rng: &RngStream,
) -> Result<(Probe, f64)> {
    let fit = fit_probe(&labeled_steps(base.params(), labeled), hyper, rng)?;
    Ok((fit.probe, fit.held_out_auroc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeScores {
    pub per_step: Vec<f64>,
    pub mean: f64,
}

impl ProbeScores {
    pub fn from_steps(per_step: Vec<f64>) -> Result<Self> {
        if per_step.is_empty() {
            return Err(Error::Empty("probe scores for a zero-step chain"));
        }
        let mean = per_step.iter().sum::<f64>() / per_step.len() as f64;
        Ok(Self { per_step, mean })
    }
}

/// Per-step probe scores on activations re-computed through the frozen base.
pub fn mean_performativity(probe: &Probe, base: &FrozenBase, rollout: &Rollout) -> Result<ProbeScores> {
    scores_under(probe, base.params(), rollout)
}

fn scores_under(probe: &Probe, params: &PolicyParams, rollout: &Rollout) -> Result<ProbeScores> {
    if rollout.steps() == 0 {
        return Err(Error::Empty("probe scores for a zero-step chain"));
    }
    let per_step = step_activations(params, rollout)
        .iter()
        .map(|a| probe_forward(probe, a))
        .collect::<Result<Vec<_>>>()?;
    ProbeScores::from_steps(per_step)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Agreement {
    /// Correlation of per-rollout mean scores, student vs frozen probe.
    pub pearson_of_means: Option<f64>,
    /// Student probe's own held-out AUROC.
    pub auroc: f64,
}

/// Trains an identically-shaped probe on the live policy's activations and
/// compares its per-rollout mean scores with the frozen probe's.
pub fn train_student_probe(
    policy: &PolicyParams,
    frozen: &Probe,
    base: &FrozenBase,
    labeled: &[(Rollout, CommitmentLabel)],
    hyper: &ProbeHyper,
    rng: &RngStream,
) -> Result<(Probe, Agreement)> {
    let fit = fit_probe(&labeled_steps(policy, labeled), hyper, rng)?;
    let mut student_means = Vec::new();
    let mut frozen_means = Vec::new();
    for (r, _) in labeled.iter().filter(|(r, _)| r.steps() > 0) {
        student_means.push(scores_under(&fit.probe, policy, r)?.mean);
        frozen_means.push(mean_performativity(frozen, base, r)?.mean);
    }
    Ok((
        fit.probe,
        Agreement {
            pearson_of_means: pearson(&student_means, &frozen_means),
            auroc: fit.held_out_auroc,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVector {
    pub layer: Layer,
    pub v: Vec<f64>,
    pub coefficient: f64,
}

impl SteeringVector {
    pub fn as_steering(&self) -> Steering {
        Steering {
            layer: self.layer,
            shift: self.v.iter().map(|x| x * self.coefficient).collect(),
        }
    }
}

/// Mean live-policy activation at `layer` over performative steps minus the
/// mean over faithful steps.
pub fn steering_direction(
    policy: &PolicyParams,
    labeled: &[(Rollout, CommitmentLabel)],
    layer: Layer,
) -> Result<Vec<f64>> {
    let d = policy.hidden;
    let mut sums = [vec![0.0; d], vec![0.0; d]];
    let mut counts = [0usize; 2];
    for (r, l) in labeled {
        for (acts, &y) in step_activations(policy, r).iter().zip(&l.step_labels) {
            let c = y as usize;
            counts[c] += 1;
            for (s, a) in sums[c].iter_mut().zip(layer.select(acts)) {
                *s += a;
            }
        }
    }
    if counts[0] == 0 || counts[1] == 0 {
        return Err(Error::invalid(format!(
            "steering needs performative and faithful steps (got {} performative, {} faithful)",
            counts[1], counts[0]
        )));
    }
    Ok((0..d)
        .map(|i| sums[1][i] / counts[1] as f64 - sums[0][i] / counts[0] as f64)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaaRow {
    pub coefficient: f64,
    pub perf_ratio: f64,
    pub accuracy: f64,
    pub mean_steps: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct CaaEval {
    pub temperature: f64,
    pub max_len: usize,
}

/// Evaluates the live policy with `a_layer -= c * v` for each coefficient.
/// Task `i` is sampled from `rng.fork(i)` at every coefficient.
pub fn caa_sweep(
    policy: &PolicyParams,
    base: &FrozenBase,
    baseline: &[(Rollout, CommitmentLabel)],
    layer: Layer,
    coefficients: &[f64],
    eval_tasks: &[Task],
    eval: CaaEval,
    rng: &RngStream,
) -> Result<Vec<CaaRow>> {
    if eval_tasks.is_empty() {
        return Err(Error::Empty("steering evaluation tasks"));
    }
    let v = steering_direction(policy, baseline, layer)?;
    coefficients
        .iter()
        .map(|&c| {
            let sv = SteeringVector {
                layer,
                v: v.clone(),
                coefficient: c,
            };
            let steering = sv.as_steering();
            let opts = SampleOptions {
                temperature: eval.temperature,
                max_len: eval.max_len,
                steering: Some(&steering),
            };
            let mut perf = 0.0;
            let mut correct = 0usize;
            let mut steps = 0usize;
            for (i, task) in eval_tasks.iter().enumerate() {
                let r = sample_rollout_with(policy, task, &opts, &rng.fork(i as u64), base)?;
                perf += crate::labeling::commitment_point(task, &r).perf_ratio;
                correct += r.correct as usize;
                steps += r.steps();
            }
            let n = eval_tasks.len();
            Ok(CaaRow {
                coefficient: c,
                perf_ratio: perf / n as f64,
                accuracy: correct as f64 / n as f64,
                mean_steps: steps as f64 / n as f64,
                n,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::derive_stream;

    fn rand_acts(r: &mut impl Rng, d: usize) -> StepActivations {
        StepActivations {
            a1: (0..d).map(|_| r.gen_range(-0.99..0.99)).collect(),
            a2: (0..d).map(|_| r.gen_range(-0.99..0.99)).collect(),
        }
    }

    #[test]
    fn closed_gates_leave_only_the_bias() {
        let mut p = Probe::init(&derive_stream(1, "p"), 16, 8, 8);
        p.gates.iter_mut().for_each(|g| *g = -20.0);
        p.b_out = 0.7;
        let a = rand_acts(&mut derive_stream(1, "a").rng(), 16);
        let s = probe_forward(&p, &a).unwrap();
        assert!((s - sigmoid(0.7)).abs() < 1e-6);
    }

    #[test]
    fn single_token_head_is_its_value() {
        let p = Probe::init(&derive_stream(2, "p"), 16, 1, 8);
        let a = rand_acts(&mut derive_stream(2, "a").rng(), 16);
        let c = forward_tokens(&p, &[(0, &a.a1)]);
        assert_eq!(c.alpha[0], vec![1.0]);
        assert_eq!(c.head_out[0], c.v[0]);
    }

    #[test]
    fn token_order_does_not_matter() {
        let p = Probe::init(&derive_stream(3, "p"), 16, 8, 8);
        let a = rand_acts(&mut derive_stream(3, "a").rng(), 16);
        let fwd = forward_tokens(&p, &[(0, &a.a1), (1, &a.a2)]).logit;
        let rev = forward_tokens(&p, &[(1, &a.a2), (0, &a.a1)]).logit;
        assert!((fwd - rev).abs() < 1e-12);
    }

    #[test]
    fn scores_strictly_inside_unit_interval() {
        let mut r = derive_stream(4, "a").rng();
        for i in 0..50 {
            let p = Probe::init(&derive_stream(i, "p"), 16, 8, 8);
            let s = probe_forward(&p, &rand_acts(&mut r, 16)).unwrap();
            assert!(s > 0.0 && s < 1.0);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let p = Probe::init(&derive_stream(5, "p"), 16, 8, 8);
        let bad = StepActivations {
            a1: vec![0.0; 15],
            a2: vec![0.0; 16],
        };
        assert!(matches!(probe_forward(&p, &bad), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn gate_moves_score_toward_unmixed_head() {
        let mut p = Probe::init(&derive_stream(6, "p"), 16, 1, 8);
        p.w_out.iter_mut().for_each(|w| *w *= 4.0);
        let a = rand_acts(&mut derive_stream(6, "a").rng(), 16);
        let c = forward_tokens(&p, &step_tokens(&a));
        let unmixed = sigmoid(p.b_out + p.w_out.iter().zip(&c.head_out[0]).map(|(w, h)| w * h).sum::<f64>());
        let mut last = f64::INFINITY;
        for g in [-6.0, -3.0, -1.0, 0.0, 1.0, 3.0, 6.0] {
            p.gates[0] = g;
            let gap = (probe_forward(&p, &a).unwrap() - unmixed).abs();
            assert!(gap < last, "gap {gap} at gate {g}");
            last = gap;
        }
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let h = 1e-5;
        for seed in 0..20 {
            let p = Probe::init(&derive_stream(seed, "p"), 16, 8, 8);
            let mut r = derive_stream(seed, "a").rng();
            let data: Vec<(StepActivations, u8)> = (0..6).map(|i| (rand_acts(&mut r, 16), (i % 2) as u8)).collect();
            let batch: Vec<(&StepActivations, u8)> = data.iter().map(|(a, y)| (a, *y)).collect();
            let analytic = bce_grad(&p, &batch).to_flat();
            let flat = p.to_flat();
            let mut q = p.clone();
            let numeric: Vec<f64> = (0..flat.len())
                .map(|i| {
                    let mut x = flat.clone();
                    x[i] += h;
                    q.set_flat(&x);
                    let up = bce_loss(&q, &batch);
                    x[i] -= 2.0 * h;
                    q.set_flat(&x);
                    (up - bce_loss(&q, &batch)) / (2.0 * h)
                })
                .collect();
            let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(diff / norm <= 1e-4, "seed {seed}: rel err {}", diff / norm);
        }
    }

    fn planted(n_groups: usize, shuffle_labels: bool, seed: u64) -> Vec<LabeledStep> {
        let mut r = derive_stream(seed, "planted").rng();
        let mut steps = Vec::new();
        for g in 0..n_groups {
            for _ in 0..5 {
                let mut acts = rand_acts(&mut r, 16);
                // label is a threshold on a single coordinate, with a margin
                let label = r.gen_bool(0.5) as u8;
                acts.a2[3] = if label == 1 { r.gen_range(0.4..0.99) } else { r.gen_range(-0.99..-0.2) };
                steps.push(LabeledStep { acts, label, group: g });
            }
        }
        if shuffle_labels {
            let mut labels: Vec<u8> = steps.iter().map(|s| s.label).collect();
            labels.shuffle(&mut r);
            for (s, l) in steps.iter_mut().zip(labels) {
                s.label = l;
            }
        }
        steps
    }

    #[test]
    fn separable_activations_reach_perfect_auroc() {
        let hyper = ProbeHyper {
            epochs: 60,
            ..ProbeHyper::default()
        };
        let fit = fit_probe(&planted(400, false, 7), &hyper, &derive_stream(7, "fit")).unwrap();
        assert_eq!(fit.held_out_auroc, 1.0);
    }

    #[test]
    fn shuffled_labels_stay_near_chance() {
        // 1000 held-out steps
        let hyper = ProbeHyper {
            epochs: 20,
            ..ProbeHyper::default()
        };
        let fit = fit_probe(&planted(1000, true, 8), &hyper, &derive_stream(8, "fit")).unwrap();
        let held = fit.held_out_groups.len() * 5;
        assert_eq!(held, 1000);
        assert!((0.40..=0.60).contains(&fit.held_out_auroc), "auroc {}", fit.held_out_auroc);
    }

    #[test]
    fn training_is_deterministic_and_rejects_one_class() {
        let hyper = ProbeHyper {
            epochs: 3,
            ..ProbeHyper::default()
        };
        let data = planted(50, false, 9);
        let a = fit_probe(&data, &hyper, &derive_stream(9, "fit")).unwrap();
        let b = fit_probe(&data, &hyper, &derive_stream(9, "fit")).unwrap();
        assert_eq!(a.probe, b.probe);
        assert_eq!(a.held_out_auroc, b.held_out_auroc);
        let one: Vec<LabeledStep> = data.into_iter().map(|s| LabeledStep { label: 0, ..s }).collect();
        assert!(matches!(fit_probe(&one, &hyper, &derive_stream(9, "fit")), Err(Error::SingleClass(0))));
    }

    #[test]
    fn mean_scores() {
        let s = ProbeScores::from_steps(vec![0.2, 0.4, 0.9]).unwrap();
        assert!((s.mean - 0.5).abs() < 1e-15);
        assert_eq!(ProbeScores::from_steps(vec![0.5; 4]).unwrap().mean, 0.5);
        assert!(ProbeScores::from_steps(vec![]).is_err());
    }

    #[test]
    fn random_score_agreement_is_near_zero() {
        let mut r = derive_stream(10, "agree").rng();
        let a: Vec<f64> = (0..200).map(|_| r.gen()).collect();
        let b: Vec<f64> = (0..200).map(|_| r.gen()).collect();
        assert!(pearson(&a, &b).unwrap().abs() < 0.2);
    }

    #[test]
    fn named_arrays_round_trip() {
        let p = Probe::init(&derive_stream(11, "p"), 16, 8, 8);
        let q = Probe::from_named(16, 8, 8, &p.named_arrays()).unwrap();
        assert_eq!(p, q);
        assert!(Probe::from_named(16, 4, 8, &p.named_arrays()).is_err());
    }
}

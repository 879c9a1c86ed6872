//! Tabular softmax policy with the clipped surrogate objective, GAE,
//! retrieval-position masking, and a KL penalty against a frozen
//! reference policy. Gradients are exact, so the update admits a direct
//! finite-difference check.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::trainer::TrainError;

/// Logit table keyed by abstract state. Unseen states are uniform.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxPolicy {
    table: BTreeMap<String, Vec<f64>>,
}

impl SoftmaxPolicy {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn logits(&self, key: &str, n_actions: usize) -> Vec<f64> {
        self.table
            .get(key)
            .cloned()
            .unwrap_or_else(|| vec![0.0; n_actions])
    }

    pub fn logits_mut(&mut self, key: &str, n_actions: usize) -> &mut Vec<f64> {
        self.table
            .entry(key.to_string())
            .or_insert_with(|| vec![0.0; n_actions])
    }

    pub fn probs(&self, key: &str, n_actions: usize) -> Vec<f64> {
        softmax(&self.logits(key, n_actions))
    }

    pub fn log_prob(&self, key: &str, n_actions: usize, action: usize) -> f64 {
        self.probs(key, n_actions)[action].ln()
    }

    pub fn sample(&self, key: &str, n_actions: usize, rng: &mut ChaCha8Rng) -> (usize, f64) {
        let probs = self.probs(key, n_actions);
        let draw: f64 = rng.random();
        let mut acc = 0.0;
        for (a, p) in probs.iter().enumerate() {
            acc += p;
            if draw < acc {
                return (a, p.ln());
            }
        }
        let last = n_actions - 1;
        (last, probs[last].ln())
    }

    pub fn greedy(&self, key: &str, n_actions: usize) -> usize {
        let probs = self.probs(key, n_actions);
        probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    pub fn states(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.table.iter()
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// One decision in a gathered batch. `masked` entries correspond to
/// retrieved-content positions and contribute nothing to the update
/// beyond the sequence-length normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchEntry {
    pub key: String,
    pub n_actions: usize,
    pub action: usize,
    pub old_log_prob: f64,
    pub reward_to_go: f64,
    pub advantage: f64,
    pub masked: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdvantageBatch {
    pub entries: Vec<BatchEntry>,
}

impl AdvantageBatch {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.entries.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        for e in &self.entries {
            if !e.advantage.is_finite() || !e.reward_to_go.is_finite() {
                return Err(TrainError::NonFinite("advantage"));
            }
        }
        Ok(())
    }
}

/// Generalized advantage estimation.
///
/// `values` carries one estimate per step plus the terminal bootstrap, so
/// `values.len() == rewards.len() + 1`. Returns per-step advantages and
/// discounted rewards-to-go (bootstrapped with the terminal value).
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    if values.len() != rewards.len() + 1 {
        return Err(TrainError::LengthMismatch(format!(
            "{} rewards need {} values, got {}",
            rewards.len(),
            rewards.len() + 1,
            values.len()
        )));
    }
    let n = rewards.len();
    let mut advantages = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        acc = delta + gamma * lambda * acc;
        advantages[t] = acc;
    }
    let mut rtg = vec![0.0; n];
    let mut tail = values[n];
    for t in (0..n).rev() {
        tail = rewards[t] + gamma * tail;
        rtg[t] = tail;
    }
    Ok((advantages, rtg))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoDiagnostics {
    pub objective: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub mean_kl: f64,
}

/// The clipped surrogate objective with masking and the KL penalty:
/// `(1/L) Σ I_t min(ratio_t A_t, clip(ratio_t) A_t) - kl_coef · KL`,
/// KL averaged over unmasked decisions against the reference policy.
pub fn surrogate_objective(
    policy: &SoftmaxPolicy,
    reference: &SoftmaxPolicy,
    batch: &AdvantageBatch,
    clip_epsilon: f64,
    kl_coefficient: f64,
) -> f64 {
    if batch.entries.is_empty() {
        return 0.0;
    }
    let total = batch.entries.len() as f64;
    let mut surrogate = 0.0;
    let mut kl_sum = 0.0;
    let mut unmasked = 0usize;
    for e in &batch.entries {
        if e.masked {
            continue;
        }
        unmasked += 1;
        let ratio = (policy.log_prob(&e.key, e.n_actions, e.action) - e.old_log_prob).exp();
        let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
        surrogate += (ratio * e.advantage).min(clipped * e.advantage);
        kl_sum += kl_divergence(policy, reference, &e.key, e.n_actions);
    }
    let kl_mean = if unmasked == 0 {
        0.0
    } else {
        kl_sum / unmasked as f64
    };
    surrogate / total - kl_coefficient * kl_mean
}

fn kl_divergence(
    policy: &SoftmaxPolicy,
    reference: &SoftmaxPolicy,
    key: &str,
    n_actions: usize,
) -> f64 {
    let p = policy.probs(key, n_actions);
    let q = reference.probs(key, n_actions);
    p.iter()
        .zip(&q)
        .map(|(&pi, &qi)| if pi > 0.0 { pi * (pi / qi).ln() } else { 0.0 })
        .sum()
}

/// Exact gradient of [`surrogate_objective`] with respect to the logits.
pub fn policy_gradient(
    policy: &SoftmaxPolicy,
    reference: &SoftmaxPolicy,
    batch: &AdvantageBatch,
    clip_epsilon: f64,
    kl_coefficient: f64,
) -> BTreeMap<String, Vec<f64>> {
    let total = batch.entries.len() as f64;
    let unmasked = batch.entries.iter().filter(|e| !e.masked).count() as f64;
    let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for e in &batch.entries {
        if e.masked {
            continue;
        }
        let probs = policy.probs(&e.key, e.n_actions);
        let ratio = (probs[e.action].ln() - e.old_log_prob).exp();
        let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
        let unclipped_term = ratio * e.advantage;
        let clipped_term = clipped * e.advantage;
        // d/d logits flows through the ratio only on the active branch;
        // a clamped ratio has zero derivative
        let pass_through =
            unclipped_term <= clipped_term || (ratio > 1.0 - clip_epsilon && ratio < 1.0 + clip_epsilon);
        let grad = grads
            .entry(e.key.clone())
            .or_insert_with(|| vec![0.0; e.n_actions]);
        if pass_through {
            let coeff = e.advantage * ratio / total;
            for (b, g) in grad.iter_mut().enumerate() {
                let indicator = if b == e.action { 1.0 } else { 0.0 };
                *g += coeff * (indicator - probs[b]);
            }
        }
        // KL penalty gradient: pi_c (ln(pi_c / ref_c) - KL)
        if kl_coefficient != 0.0 && unmasked > 0.0 {
            let refs = reference.probs(&e.key, e.n_actions);
            let kl = kl_divergence(policy, reference, &e.key, e.n_actions);
            for (c, g) in grad.iter_mut().enumerate() {
                let dkl = probs[c] * ((probs[c] / refs[c]).ln() - kl);
                *g -= kl_coefficient * dkl / unmasked;
            }
        }
    }
    grads
}

/// One gradient-ascent step on the surrogate. Errors on a non-finite
/// gradient; diagnostics are computed at the pre-update policy.
pub fn ppo_update(
    policy: &mut SoftmaxPolicy,
    reference: &SoftmaxPolicy,
    batch: &AdvantageBatch,
    clip_epsilon: f64,
    kl_coefficient: f64,
    learning_rate: f64,
) -> Result<PpoDiagnostics, TrainError> {
    batch.validate()?;
    let mut ratio_sum = 0.0;
    let mut clip_count = 0usize;
    let mut kl_sum = 0.0;
    let mut unmasked = 0usize;
    for e in &batch.entries {
        if e.masked {
            continue;
        }
        unmasked += 1;
        let ratio = (policy.log_prob(&e.key, e.n_actions, e.action) - e.old_log_prob).exp();
        ratio_sum += ratio;
        if ratio < 1.0 - clip_epsilon || ratio > 1.0 + clip_epsilon {
            clip_count += 1;
        }
        kl_sum += kl_divergence(policy, reference, &e.key, e.n_actions);
    }
    let objective = surrogate_objective(policy, reference, batch, clip_epsilon, kl_coefficient);
    let grads = policy_gradient(policy, reference, batch, clip_epsilon, kl_coefficient);
    for (key, grad) in &grads {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite("gradient"));
        }
        let logits = policy.logits_mut(key, grad.len());
        for (l, g) in logits.iter_mut().zip(grad) {
            *l += learning_rate * g;
        }
    }
    let denom = unmasked.max(1) as f64;
    Ok(PpoDiagnostics {
        objective,
        mean_ratio: ratio_sum / denom,
        clip_fraction: clip_count as f64 / denom,
        mean_kl: kl_sum / denom,
    })
}

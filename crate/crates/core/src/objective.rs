//! Clipped token-level surrogate loss, its exact gradient with respect to the
//! logits table, and the plain gradient-descent update.

use crate::advantage::{AdvantageReport, RewardedGroup};
use crate::policy::{log_softmax, LogitsTablePolicy};
use crate::tokens::TokenId;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub learning_rate: f64,
    /// Linear warm-up length in update steps; 0 disables warm-up.
    pub warmup_steps: usize,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            eps_low: 0.2,
            eps_high: 0.28,
            learning_rate: 1e-3,
            warmup_steps: 10,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.eps_low > 0.0 && self.eps_low < 1.0 && self.eps_high >= self.eps_low) {
            return Err(ObjectiveError::BadClip {
                low: self.eps_low,
                high: self.eps_high,
            });
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ObjectiveError::BadLearningRate(self.learning_rate));
        }
        Ok(())
    }

    /// Learning rate at 0-based update `step`.
    pub fn effective_lr(&self, step: usize) -> f64 {
        if step >= self.warmup_steps {
            self.learning_rate
        } else {
            self.learning_rate * step as f64 / self.warmup_steps as f64
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("token batch is empty")]
    EmptyBatch,
    #[error("gradient has {grad} columns, policy vocabulary has {policy}")]
    ShapeMismatch { grad: usize, policy: usize },
    #[error("clip range needs 0 < eps_low < 1 and eps_high >= eps_low, got ({low}, {high})")]
    BadClip { low: f64, high: f64 },
    #[error("learning rate must be finite and non-negative, got {0}")]
    BadLearningRate(f64),
    #[error("non-finite {what} in token batch")]
    NonFinite { what: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenSample {
    pub context: u64,
    pub token: TokenId,
    pub old_logprob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySamples {
    pub tokens: Vec<TokenSample>,
    pub advantage: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TokenBatch {
    pub trajectories: Vec<TrajectorySamples>,
    pub token_count: usize,
}

impl TokenBatch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.token_count == 0
    }

    pub fn push(&mut self, samples: TrajectorySamples) -> Result<(), ObjectiveError> {
        if !samples.advantage.is_finite() {
            return Err(ObjectiveError::NonFinite { what: "advantage" });
        }
        if samples.tokens.iter().any(|t| !t.old_logprob.is_finite()) {
            return Err(ObjectiveError::NonFinite { what: "old logprob" });
        }
        self.token_count += samples.tokens.len();
        self.trajectories.push(samples);
        Ok(())
    }

    /// Appends a response, scoring old logprobs with `snapshot`.
    pub fn push_response(
        &mut self,
        snapshot: &LogitsTablePolicy,
        prompt: &[TokenId],
        response: &[TokenId],
        advantage: f64,
    ) -> Result<(), ObjectiveError> {
        let mut ctx = prompt.to_vec();
        let mut tokens = Vec::with_capacity(response.len());
        for &tok in response {
            let key = snapshot.context_key(&ctx);
            tokens.push(TokenSample {
                context: key,
                token: tok,
                old_logprob: snapshot.log_probs_at_key(key)[tok.index()],
            });
            ctx.push(tok);
        }
        self.push(TrajectorySamples { tokens, advantage })
    }

    /// Appends every leaf of `group` with its advantage from `report`, reusing
    /// the logprobs recorded at sampling time as the old-policy values.
    pub fn push_group(
        &mut self,
        policy: &LogitsTablePolicy,
        group: &RewardedGroup,
        report: &AdvantageReport,
    ) -> Result<(), ObjectiveError> {
        for entry in &report.entries {
            let tree = &group.tree;
            let mut ctx = tree.query.prompt_tokens.clone();
            let mut tokens = Vec::new();
            for id in tree.node_path(entry.leaf).expect("report leaves belong to the tree") {
                let seg = &tree.nodes()[id.0].segment;
                for (&tok, &lp) in seg.tokens.iter().zip(&seg.logprobs) {
                    tokens.push(TokenSample {
                        context: policy.context_key(&ctx),
                        token: tok,
                        old_logprob: lp,
                    });
                    ctx.push(tok);
                }
            }
            self.push(TrajectorySamples {
                tokens,
                advantage: entry.advantage,
            })?;
        }
        Ok(())
    }

    pub fn contexts(&self) -> BTreeSet<u64> {
        self.trajectories
            .iter()
            .flat_map(|t| t.tokens.iter().map(|s| s.context))
            .collect()
    }

    /// Mean Shannon entropy of the policy rows over distinct visited contexts.
    pub fn mean_entropy(&self, policy: &LogitsTablePolicy) -> f64 {
        let ctxs = self.contexts();
        if ctxs.is_empty() {
            return 0.0;
        }
        ctxs.iter().map(|k| policy.entropy_at_key(*k)).sum::<f64>() / ctxs.len() as f64
    }
}

pub fn token_ratio(new_lp: f64, old_lp: f64) -> f64 {
    (new_lp - old_lp).exp()
}

fn clipped_term(ratio: f64, advantage: f64, cfg: &ClipConfig) -> (f64, bool) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - cfg.eps_low, 1.0 + cfg.eps_high) * advantage;
    if clipped < unclipped {
        (clipped, true)
    } else {
        (unclipped, false)
    }
}

/// Negative token-normalized clipped objective.
pub fn clipped_surrogate(
    batch: &TokenBatch,
    policy: &LogitsTablePolicy,
    cfg: &ClipConfig,
) -> Result<f64, ObjectiveError> {
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let mut total = 0.0;
    for traj in &batch.trajectories {
        for s in &traj.tokens {
            let new_lp = policy.log_probs_at_key(s.context)[s.token.index()];
            total += clipped_term(token_ratio(new_lp, s.old_logprob), traj.advantage, cfg).0;
        }
    }
    Ok(-total / batch.token_count as f64)
}

/// Sparse gradient over table rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TableGradient {
    pub vocab: usize,
    pub rows: BTreeMap<u64, Vec<f64>>,
}

impl TableGradient {
    pub fn zeros(vocab: usize) -> Self {
        Self {
            vocab,
            rows: BTreeMap::new(),
        }
    }

    pub fn get(&self, key: u64, col: usize) -> f64 {
        self.rows.get(&key).map_or(0.0, |r| r[col])
    }

    pub fn l2_norm(&self) -> f64 {
        self.rows.values().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Exact gradient of [`clipped_surrogate`] with respect to the logits table.
pub fn surrogate_gradient(
    batch: &TokenBatch,
    policy: &LogitsTablePolicy,
    cfg: &ClipConfig,
) -> Result<TableGradient, ObjectiveError> {
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let v = policy.vocab().size();
    let scale = -1.0 / batch.token_count as f64;
    let mut grad = TableGradient::zeros(v);
    for traj in &batch.trajectories {
        for s in &traj.tokens {
            let lp = log_softmax(policy.row(s.context));
            let ratio = token_ratio(lp[s.token.index()], s.old_logprob);
            if clipped_term(ratio, traj.advantage, cfg).1 {
                continue;
            }
            // d logprob(token) / d logits = onehot(token) - softmax(row)
            let coef = scale * traj.advantage * ratio;
            let row = grad.rows.entry(s.context).or_insert_with(|| vec![0.0; v]);
            for (c, g) in row.iter_mut().enumerate() {
                let onehot = if c == s.token.index() { 1.0 } else { 0.0 };
                *g += coef * (onehot - lp[c].exp());
            }
        }
    }
    Ok(grad)
}

/// `table <- table - lr(step) * gradient`.
pub fn apply_update(
    policy: &mut LogitsTablePolicy,
    gradient: &TableGradient,
    cfg: &ClipConfig,
    step: usize,
) -> Result<(), ObjectiveError> {
    if gradient.vocab != policy.vocab().size() {
        return Err(ObjectiveError::ShapeMismatch {
            grad: gradient.vocab,
            policy: policy.vocab().size(),
        });
    }
    let lr = cfg.effective_lr(step);
    if lr == 0.0 {
        return Ok(());
    }
    for (key, g) in &gradient.rows {
        if g.iter().all(|x| *x == 0.0) {
            continue;
        }
        let row = policy.row_mut(*key);
        for (w, dg) in row.iter_mut().zip(g) {
            *w -= lr * dg;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;

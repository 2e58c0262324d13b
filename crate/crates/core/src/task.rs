//! The verifiable toy task: modular addition of single digits.

use crate::tokens::{extract_answer, TokenId, TokenSeq, Trajectory, Vocabulary};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Default prompt budget; the longest prompt the generator may produce.
pub const DEFAULT_PROMPT_BUDGET: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub id: u64,
    pub prompt_tokens: TokenSeq,
    /// Hidden from the policy; only the reward function reads it.
    pub gold_answer: u64,
}

impl QuerySpec {
    /// Builds `[BOS, a, '+', b, ..., '=']` with gold `(a + b + ...) mod 10`.
    pub fn from_operands(id: u64, operands: &[u32]) -> Self {
        assert!(!operands.is_empty());
        let mut prompt = vec![Vocabulary::BOS];
        for (i, &op) in operands.iter().enumerate() {
            if i > 0 {
                prompt.push(Vocabulary::PLUS);
            }
            prompt.push(Vocabulary::digit(op));
        }
        prompt.push(Vocabulary::EQUALS);
        let gold = operands.iter().map(|&x| u64::from(x)).sum::<u64>() % 10;
        Self {
            id,
            prompt_tokens: prompt,
            gold_answer: gold,
        }
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_tokens.len()
    }

    pub fn operands(&self) -> Vec<u32> {
        self.prompt_tokens
            .iter()
            .filter_map(|t| Vocabulary::digit_value(*t))
            .collect()
    }
}

/// Draws a task with `difficulty` uniformly random single-digit operands.
pub fn make_task<R: Rng + ?Sized>(rng: &mut R, id: u64, difficulty: usize) -> QuerySpec {
    let operands: Vec<u32> = (0..difficulty.max(1)).map(|_| rng.gen_range(0..10)).collect();
    QuerySpec::from_operands(id, &operands)
}

/// Every two-operand task, in operand order. Handy as a fixed eval set.
pub fn all_two_operand_tasks() -> Vec<QuerySpec> {
    (0..100u32)
        .map(|i| QuerySpec::from_operands(u64::from(i), &[i / 10, i % 10]))
        .collect()
}

pub fn reward_tokens(tokens: &[TokenId], gold: u64) -> f64 {
    match extract_answer(tokens) {
        Some(a) if a == gold => 1.0,
        _ => 0.0,
    }
}

pub fn reward(traj: &Trajectory, gold: u64) -> f64 {
    reward_tokens(&traj.tokens, gold)
}

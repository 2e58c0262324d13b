//! Token-level primitives shared by every other module: the toy vocabulary,
//! segments and their stop reasons, boxed-answer extraction and the
//! repetition detector used for early stopping.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Index into a fixed vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub const fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub type TokenSeq = Vec<TokenId>;

/// Fixed toy vocabulary.
///
/// Layout: ids `0..=9` are the digits, followed by `BOS`, `EOS`, `ANS_OPEN`
/// and `ANS_CLOSE`. Everything at or above [`Vocabulary::FIRST_FILLER`] is a
/// filler token; the task generator uses the first two fillers as `+` and `=`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: u32,
}

impl Vocabulary {
    pub const BOS: TokenId = TokenId(10);
    pub const EOS: TokenId = TokenId(11);
    pub const ANS_OPEN: TokenId = TokenId(12);
    pub const ANS_CLOSE: TokenId = TokenId(13);
    pub const PLUS: TokenId = TokenId(14);
    pub const EQUALS: TokenId = TokenId(15);
    pub const FIRST_FILLER: u32 = 14;
    pub const MIN_SIZE: u32 = 14;
    pub const DEFAULT_SIZE: u32 = 24;

    pub fn new(size: u32) -> Option<Self> {
        (size >= Self::MIN_SIZE).then_some(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size as usize
    }

    pub fn contains(&self, tok: TokenId) -> bool {
        tok.0 < self.size
    }

    pub fn digit(d: u32) -> TokenId {
        assert!(d < 10, "digit out of range: {d}");
        TokenId(d)
    }

    pub fn digit_value(tok: TokenId) -> Option<u32> {
        (tok.0 < 10).then_some(tok.0)
    }

    pub fn is_marker(tok: TokenId) -> bool {
        tok == Self::ANS_OPEN || tok == Self::ANS_CLOSE
    }

    pub fn iter(&self) -> impl Iterator<Item = TokenId> {
        (0..self.size).map(TokenId)
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self {
            size: Self::DEFAULT_SIZE,
        }
    }
}

/// Why token-level decoding of a segment stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    /// Hit the segment budget; the path continues.
    BudgetExhausted,
    Eos,
    AnswerFound,
    RepetitionFail,
}

impl StopReason {
    pub fn terminates(self) -> bool {
        !matches!(self, StopReason::BudgetExhausted)
    }
}

/// A bounded run of generated tokens with their log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub tokens: TokenSeq,
    pub logprobs: Vec<f64>,
    pub stop: StopReason,
}

impl Segment {
    pub fn empty() -> Self {
        Self {
            tokens: Vec::new(),
            logprobs: Vec::new(),
            stop: StopReason::BudgetExhausted,
        }
    }

    pub fn new(tokens: TokenSeq, logprobs: Vec<f64>, stop: StopReason) -> Self {
        debug_assert_eq!(tokens.len(), logprobs.len());
        debug_assert!(logprobs.iter().all(|lp| *lp <= 0.0));
        Self { tokens, logprobs, stop }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn logprob_sum(&self) -> f64 {
        self.logprobs.iter().sum()
    }

    /// Arithmetic mean of the per-token logprobs, 0 for an empty segment.
    pub fn mean_logprob(&self) -> f64 {
        if self.logprobs.is_empty() {
            0.0
        } else {
            self.logprob_sum() / self.logprobs.len() as f64
        }
    }

    pub fn ends_with_eos(&self) -> bool {
        self.tokens.last() == Some(&Vocabulary::EOS)
    }
}

/// A complete root-to-leaf response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub query_id: u64,
    pub node_path: Vec<crate::tree::NodeId>,
    /// Response tokens only (prompt excluded).
    pub tokens: TokenSeq,
    pub reward: f64,
}

impl Trajectory {
    pub fn depth(&self) -> usize {
        self.node_path.len()
    }
}

/// Returns the integer enclosed by the last well-formed `ANS_OPEN digit+ ANS_CLOSE` span.
pub fn extract_answer(tokens: &[TokenId]) -> Option<u64> {
    for close in (0..tokens.len()).rev() {
        if tokens[close] != Vocabulary::ANS_CLOSE {
            continue;
        }
        let mut start = close;
        while start > 0 && Vocabulary::digit_value(tokens[start - 1]).is_some() {
            start -= 1;
        }
        if start == close || start == 0 || tokens[start - 1] != Vocabulary::ANS_OPEN {
            continue;
        }
        let mut value: u64 = 0;
        for tok in &tokens[start..close] {
            let d = u64::from(Vocabulary::digit_value(*tok).unwrap_or(0));
            value = value.saturating_mul(10).saturating_add(d);
        }
        return Some(value);
    }
    None
}

/// True iff the sequence ends with a well-formed answer span, i.e. the last
/// token is `ANS_CLOSE` directly preceded by `ANS_OPEN digit+`.
pub fn closes_answer(tokens: &[TokenId]) -> bool {
    let Some((&last, body)) = tokens.split_last() else {
        return false;
    };
    if last != Vocabulary::ANS_CLOSE {
        return false;
    }
    let digits = body
        .iter()
        .rev()
        .take_while(|t| Vocabulary::digit_value(**t).is_some())
        .count();
    digits > 0 && body.len() > digits && body[body.len() - digits - 1] == Vocabulary::ANS_OPEN
}

/// True iff some block of `>= min_len` tokens repeats back-to-back at least `min_reps` times.
pub fn has_repetition(tokens: &[TokenId], min_len: usize, min_reps: usize) -> bool {
    assert!(min_len >= 1 && min_reps >= 2, "invalid repetition parameters");
    let n = tokens.len();
    let mut period = min_len;
    while period * min_reps <= n {
        // A block of length `period` repeated R times back-to-back is the same
        // as a run of (R-1)*period consecutive positions with t[i] == t[i+period].
        let needed = (min_reps - 1) * period;
        let mut run = 0;
        for i in 0..n - period {
            if tokens[i] == tokens[i + period] {
                run += 1;
                if run >= needed {
                    return true;
                }
            } else {
                run = 0;
            }
        }
        period += 1;
    }
    false
}

//! A context-indexed logits table used as the trainable autoregressive policy.
//!
//! The context of a position is the window of the previous `k` tokens
//! (left-padded with `BOS`), packed base-|V| into an exact bucket index.
//! Only rows that were ever written are stored; every other row is all-zero
//! logits, i.e. the uniform distribution.

use crate::tokens::{closes_answer, Segment, StopReason, TokenId, Vocabulary};
use rand::Rng;
use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const DEFAULT_CONTEXT_ORDER: usize = 5;
pub const DEFAULT_SAMPLING_TEMPERATURE: f64 = 0.8;

const CHECKPOINT_MAGIC: &[u8; 8] = b"TREEPOLT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("context order {order} with vocabulary {vocab} overflows the bucket index")]
    ContextTooLarge { order: usize, vocab: usize },
    #[error("context order must be at least 1")]
    ZeroContext,
    #[error("sampling temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("conflicting hand-built rows for context {0}")]
    ContextCollision(u64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitsTablePolicy {
    vocab: Vocabulary,
    context_order: usize,
    temperature: f64,
    rows: BTreeMap<u64, Vec<f64>>,
    zero_row: Vec<f64>,
}

/// Frozen copy of the policy that produced a batch of rollouts.
pub type PolicySnapshot = std::sync::Arc<LogitsTablePolicy>;

impl LogitsTablePolicy {
    pub fn new(vocab: Vocabulary, context_order: usize, temperature: f64) -> Result<Self, PolicyError> {
        if context_order == 0 {
            return Err(PolicyError::ZeroContext);
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(PolicyError::BadTemperature(temperature));
        }
        (vocab.size() as u64)
            .checked_pow(context_order as u32)
            .ok_or(PolicyError::ContextTooLarge {
                order: context_order,
                vocab: vocab.size(),
            })?;
        Ok(Self {
            vocab,
            context_order,
            temperature,
            rows: BTreeMap::new(),
            zero_row: vec![0.0; vocab.size()],
        })
    }

    pub fn uniform() -> Self {
        Self::new(
            Vocabulary::default(),
            DEFAULT_CONTEXT_ORDER,
            DEFAULT_SAMPLING_TEMPERATURE,
        )
        .expect("default configuration is valid")
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    pub fn context_order(&self) -> usize {
        self.context_order
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, temperature: f64) -> Result<(), PolicyError> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(PolicyError::BadTemperature(temperature));
        }
        self.temperature = temperature;
        Ok(())
    }

    /// Number of context buckets, |V|^k.
    pub fn bucket_count(&self) -> u64 {
        (self.vocab.size() as u64).pow(self.context_order as u32)
    }

    pub fn parameter_count(&self) -> u64 {
        self.bucket_count() * self.vocab.size() as u64
    }

    pub fn stored_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> impl Iterator<Item = (u64, &[f64])> {
        self.rows.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn context_key(&self, prefix: &[TokenId]) -> u64 {
        let v = self.vocab.size() as u64;
        let k = self.context_order;
        let pad = k.saturating_sub(prefix.len());
        let window = &prefix[prefix.len().saturating_sub(k)..];
        std::iter::repeat_n(Vocabulary::BOS, pad)
            .chain(window.iter().copied())
            .fold(0u64, |acc, t| acc * v + u64::from(t.0))
    }

    pub fn row(&self, key: u64) -> &[f64] {
        self.rows.get(&key).map_or(&self.zero_row, |r| r.as_slice())
    }

    pub fn row_mut(&mut self, key: u64) -> &mut Vec<f64> {
        let width = self.vocab.size();
        self.rows.entry(key).or_insert_with(|| vec![0.0; width])
    }

    pub fn log_probs_at_key(&self, key: u64) -> Vec<f64> {
        log_softmax(self.row(key))
    }

    pub fn log_probs(&self, prefix: &[TokenId]) -> Vec<f64> {
        self.log_probs_at_key(self.context_key(prefix))
    }

    /// Exact temperature-1 log-probability of `token` after `prefix`.
    pub fn logprob(&self, prefix: &[TokenId], token: TokenId) -> f64 {
        self.log_probs(prefix)[token.index()]
    }

    /// Shannon entropy (nats) of the temperature-1 distribution of a row.
    pub fn entropy_at_key(&self, key: u64) -> f64 {
        let lp = self.log_probs_at_key(key);
        -lp.iter().map(|l| l.exp() * l).sum::<f64>()
    }

    /// Samples up to `budget` tokens.
    ///
    /// Tokens are drawn from the tempered distribution, but the recorded
    /// logprobs are those of the untempered policy. Decoding stops on `EOS`
    /// or on an `ANS_CLOSE` that completes a well-formed answer span.
    pub fn sample_segment<R: Rng + ?Sized>(&self, prefix: &[TokenId], budget: usize, rng: &mut R) -> Segment {
        assert!(budget >= 1, "segment budget must be positive");
        let mut context: Vec<TokenId> = prefix.to_vec();
        let mut tokens = Vec::with_capacity(budget);
        let mut logprobs = Vec::with_capacity(budget);
        let mut stop = StopReason::BudgetExhausted;
        let inv_t = 1.0 / self.temperature;
        let mut weights = vec![0.0; self.vocab.size()];
        for _ in 0..budget {
            let row = self.row(self.context_key(&context));
            let lp = log_softmax(row);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (w, &x) in weights.iter_mut().zip(row) {
                *w = ((x - max) * inv_t).exp();
                total += *w;
            }
            let mut u = rng.gen::<f64>() * total;
            let mut pick = weights.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            let tok = TokenId(pick as u32);
            tokens.push(tok);
            logprobs.push(lp[pick].min(0.0));
            context.push(tok);
            if tok == Vocabulary::EOS {
                stop = StopReason::Eos;
                break;
            }
            if tok == Vocabulary::ANS_CLOSE && closes_answer(&context) {
                stop = StopReason::AnswerFound;
                break;
            }
        }
        Segment::new(tokens, logprobs, stop)
    }

    /// Hand-built table that answers every task in `tasks` with
    /// `ANS_OPEN digit ANS_CLOSE` right after the prompt.
    pub fn solved_for(tasks: &[crate::task::QuerySpec], margin: f64) -> Result<Self, PolicyError> {
        let mut p = Self::uniform();
        let mut forced: BTreeMap<u64, TokenId> = BTreeMap::new();
        for q in tasks {
            let mut ctx = q.prompt_tokens.clone();
            let digit = Vocabulary::digit((q.gold_answer % 10) as u32);
            for next in [Vocabulary::ANS_OPEN, digit, Vocabulary::ANS_CLOSE] {
                let key = p.context_key(&ctx);
                match forced.insert(key, next) {
                    Some(prev) if prev != next => return Err(PolicyError::ContextCollision(key)),
                    _ => {}
                }
                p.row_mut(key)[next.index()] = margin;
                ctx.push(next);
            }
        }
        Ok(p)
    }

    /// Binary checkpoint: header (magic, version, vocab size, k, temperature,
    /// bucket count, stored row count) then `key, logits...` per stored row,
    /// all little-endian.
    pub fn write_checkpoint<W: Write>(&self, out: &mut W) -> io::Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(self.vocab.size() as u32).to_le_bytes())?;
        out.write_all(&(self.context_order as u32).to_le_bytes())?;
        out.write_all(&self.temperature.to_bits().to_le_bytes())?;
        out.write_all(&self.bucket_count().to_le_bytes())?;
        out.write_all(&(self.rows.len() as u64).to_le_bytes())?;
        for (key, row) in &self.rows {
            out.write_all(&key.to_le_bytes())?;
            for x in row {
                out.write_all(&x.to_bits().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<Self, PolicyError> {
        let bad = |m: &str| PolicyError::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        if read_u32(input)? != CHECKPOINT_VERSION {
            return Err(bad("unsupported version"));
        }
        let vocab_size = read_u32(input)?;
        let order = read_u32(input)? as usize;
        let temperature = f64::from_bits(read_u64(input)?);
        let buckets = read_u64(input)?;
        let nrows = read_u64(input)?;
        let vocab = Vocabulary::new(vocab_size).ok_or_else(|| bad("vocabulary too small"))?;
        let mut p = Self::new(vocab, order, temperature)?;
        if p.bucket_count() != buckets {
            return Err(bad("bucket count does not match vocabulary and order"));
        }
        for _ in 0..nrows {
            let key = read_u64(input)?;
            if key >= buckets {
                return Err(bad("row key out of range"));
            }
            let row = (0..vocab.size())
                .map(|_| read_u64(input).map(f64::from_bits))
                .collect::<io::Result<Vec<f64>>>()?;
            p.rows.insert(key, row);
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let mut f = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let mut f = io::BufReader::new(std::fs::File::open(path)?);
        Self::read_checkpoint(&mut f)
    }
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    log_softmax(row).into_iter().map(f64::exp).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{all_two_operand_tasks, reward_tokens, QuerySpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_row_logprob() {
        let p = LogitsTablePolicy::uniform();
        let lp = p.logprob(&[Vocabulary::BOS], TokenId(3));
        assert!((lp - (1.0f64 / 24.0).ln()).abs() < 1e-12);
        assert!((lp + 3.178).abs() < 1e-3);
    }

    #[test]
    fn dominant_logit_has_near_zero_logprob() {
        let mut p = LogitsTablePolicy::uniform();
        let key = p.context_key(&[Vocabulary::BOS]);
        p.row_mut(key)[5] = 20.0;
        let lp = p.logprob(&[Vocabulary::BOS], TokenId(5));
        assert!(lp < 0.0 && lp > -1e-7);
    }

    #[test]
    fn rows_normalize() {
        let mut p = LogitsTablePolicy::uniform();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for key in 0..50u64 {
            let row = p.row_mut(key * 7919);
            for x in row.iter_mut() {
                *x = rng.gen_range(-30.0..30.0);
            }
        }
        for key in (0..50u64).map(|k| k * 7919).chain([1, 2, 3]) {
            let s: f64 = p.log_probs_at_key(key).iter().map(|l| l.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12, "row {key} sums to {s}");
        }
    }

    #[test]
    fn context_key_pads_with_bos() {
        let p = LogitsTablePolicy::new(Vocabulary::default(), 3, 1.0).unwrap();
        assert_eq!(
            p.context_key(&[TokenId(4)]),
            p.context_key(&[Vocabulary::BOS, Vocabulary::BOS, TokenId(4)])
        );
        assert_eq!(
            p.context_key(&[TokenId(9), TokenId(1), TokenId(2), TokenId(3)]),
            p.context_key(&[TokenId(1), TokenId(2), TokenId(3)])
        );
        assert_ne!(
            p.context_key(&[TokenId(1), TokenId(2)]),
            p.context_key(&[TokenId(2), TokenId(1)])
        );
    }

    #[test]
    fn budget_one_gives_one_token() {
        let p = LogitsTablePolicy::uniform();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert_eq!(p.sample_segment(&[Vocabulary::BOS], 1, &mut rng).len(), 1);
        }
    }

    #[test]
    fn eos_policy_stops_immediately() {
        let mut p = LogitsTablePolicy::new(Vocabulary::default(), 1, 0.8).unwrap();
        for t in Vocabulary::default().iter() {
            p.row_mut(p.context_key(&[t]))[Vocabulary::EOS.index()] = 60.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seg = p.sample_segment(&[Vocabulary::BOS], 16, &mut rng);
        assert_eq!(seg.tokens, vec![Vocabulary::EOS]);
        assert_eq!(seg.stop, StopReason::Eos);
    }

    #[test]
    fn recorded_logprobs_are_untempered_log_softmax() {
        let mut p = LogitsTablePolicy::new(Vocabulary::default(), 2, 0.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for key in 0..(24 * 24) {
            for x in p.row_mut(key).iter_mut() {
                *x = rng.gen_range(-2.0..2.0);
            }
        }
        let prefix = vec![Vocabulary::BOS, TokenId(3)];
        let seg = p.sample_segment(&prefix, 12, &mut rng);
        let mut ctx = prefix.clone();
        for (tok, lp) in seg.tokens.iter().zip(&seg.logprobs) {
            // independent recomputation of log-softmax
            let row = p.row(p.context_key(&ctx));
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            let expected = row[tok.index()] - z.ln();
            assert!((lp - expected).abs() < 1e-12);
            ctx.push(*tok);
        }
    }

    #[test]
    fn empirical_frequencies_match_tempered_softmax() {
        let mut p = LogitsTablePolicy::new(Vocabulary::default(), 1, 0.8).unwrap();
        let key = p.context_key(&[TokenId(20)]);
        let row: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin() * 2.0).collect();
        *p.row_mut(key) = row.clone();
        let scaled: Vec<f64> = row.iter().map(|x| x / 0.8).collect();
        let probs = softmax(&scaled);
        let mut counts = [0usize; 24];
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        for _ in 0..n {
            counts[p.sample_segment(&[TokenId(20)], 1, &mut rng).tokens[0].index()] += 1;
        }
        for (c, pr) in counts.iter().zip(&probs) {
            let sigma = (n as f64 * pr * (1.0 - pr)).sqrt();
            assert!((*c as f64 - n as f64 * pr).abs() <= 3.0 * sigma + 1.0);
        }
    }

    #[test]
    fn solved_table_answers_every_task() {
        let tasks = all_two_operand_tasks();
        let p = LogitsTablePolicy::solved_for(&tasks, 40.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for q in &tasks {
            let seg = p.sample_segment(&q.prompt_tokens, 16, &mut rng);
            assert_eq!(seg.stop, StopReason::AnswerFound);
            assert_eq!(reward_tokens(&seg.tokens, q.gold_answer), 1.0);
        }
    }

    #[test]
    fn short_context_cannot_solve_addition() {
        let p = LogitsTablePolicy::new(Vocabulary::default(), 2, 0.8).unwrap();
        let tasks = [
            QuerySpec::from_operands(0, &[1, 2]),
            QuerySpec::from_operands(1, &[2, 2]),
        ];
        // with k = 2 the answer position only sees ('=', ANS_OPEN)
        let key_a = p.context_key(&[tasks[0].prompt_tokens.clone(), vec![Vocabulary::ANS_OPEN]].concat());
        let key_b = p.context_key(&[tasks[1].prompt_tokens.clone(), vec![Vocabulary::ANS_OPEN]].concat());
        assert_eq!(key_a, key_b);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut p = LogitsTablePolicy::uniform();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let key = rng.gen_range(0..p.bucket_count());
            for x in p.row_mut(key).iter_mut() {
                *x = rng.gen::<f64>() * 1e3 - 5e2;
            }
        }
        p.row_mut(0)[0] = f64::MIN_POSITIVE / 2.0;
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        let q = LogitsTablePolicy::read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(p.rows.len(), q.rows.len());
        for ((ka, ra), (kb, rb)) in p.rows().zip(q.rows()) {
            assert_eq!(ka, kb);
            assert!(ra.iter().zip(rb).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert_eq!(p.temperature().to_bits(), q.temperature().to_bits());
        let mut again = Vec::new();
        q.write_checkpoint(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(LogitsTablePolicy::read_checkpoint(&mut &b"NOTAPOLICY______"[..]).is_err());
    }
}

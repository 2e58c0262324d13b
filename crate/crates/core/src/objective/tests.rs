use super::*;
use crate::tokens::Vocabulary;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_policy() -> LogitsTablePolicy {
    LogitsTablePolicy::new(Vocabulary::new(16).unwrap(), 2, 1.0).unwrap()
}

fn one_token(context: u64, token: u32, old: f64, advantage: f64) -> TokenBatch {
    let mut b = TokenBatch::new();
    b.push(TrajectorySamples {
        tokens: vec![TokenSample {
            context,
            token: TokenId(token),
            old_logprob: old,
        }],
        advantage,
    })
    .unwrap();
    b
}

/// Random table rows plus a batch over a handful of contexts, with old
/// logprobs perturbed around the current policy so some tokens clip.
fn random_case(rng: &mut ChaCha8Rng) -> (LogitsTablePolicy, TokenBatch) {
    let mut p = small_policy();
    let contexts: Vec<u64> = (0..rng.gen_range(1..5))
        .map(|_| rng.gen_range(0..p.bucket_count()))
        .collect();
    for c in &contexts {
        for x in p.row_mut(*c).iter_mut() {
            *x = rng.gen_range(-2.0..2.0);
        }
    }
    let mut b = TokenBatch::new();
    for _ in 0..rng.gen_range(1..6) {
        let tokens = (0..rng.gen_range(1..8))
            .map(|_| {
                let context = contexts[rng.gen_range(0..contexts.len())];
                let token = TokenId(rng.gen_range(0..16));
                let lp = p.log_probs_at_key(context)[token.index()];
                TokenSample {
                    context,
                    token,
                    old_logprob: lp + rng.gen_range(-0.4..0.4),
                }
            })
            .collect();
        b.push(TrajectorySamples {
            tokens,
            advantage: rng.gen_range(-2.0..2.0),
        })
        .unwrap();
    }
    (p, b)
}

#[test]
fn ratio_examples() {
    assert_eq!(token_ratio(-1.0, -1.0), 1.0);
    assert!((token_ratio(-1.0, -1.5) - 0.5f64.exp()).abs() < 1e-12);
}

#[test]
fn clip_examples() {
    let p = small_policy();
    let cfg = ClipConfig::default();
    let lp = p.log_probs_at_key(0)[3];
    // r = 1.5 with A = 1 clips to 1.28
    let b = one_token(0, 3, lp - 1.5f64.ln(), 1.0);
    assert!((clipped_surrogate(&b, &p, &cfg).unwrap() + 1.28).abs() < 1e-12);
    // r = 0.5 with A = -1 takes the clipped -0.8
    let b = one_token(0, 3, lp - 0.5f64.ln(), -1.0);
    assert!((clipped_surrogate(&b, &p, &cfg).unwrap() - 0.8).abs() < 1e-12);
}

#[test]
fn on_policy_loss_is_minus_mean_advantage() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let (p, mut b) = random_case(&mut rng);
        for t in b.trajectories.iter_mut() {
            for s in t.tokens.iter_mut() {
                s.old_logprob = p.log_probs_at_key(s.context)[s.token.index()];
            }
        }
        let want = -b
            .trajectories
            .iter()
            .map(|t| t.advantage * t.tokens.len() as f64)
            .sum::<f64>()
            / b.token_count as f64;
        assert!((clipped_surrogate(&b, &p, &ClipConfig::default()).unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn clipped_token_has_zero_gradient() {
    let p = small_policy();
    let lp = p.log_probs_at_key(0)[3];
    let b = one_token(0, 3, lp - 1.5f64.ln(), 1.0);
    let g = surrogate_gradient(&b, &p, &ClipConfig::default()).unwrap();
    assert_eq!(g.l2_norm(), 0.0);
}

#[test]
fn on_policy_single_token_gradient() {
    let p = small_policy();
    let lp = p.log_probs_at_key(5)[3];
    let g = surrogate_gradient(&one_token(5, 3, lp, 1.0), &p, &ClipConfig::default()).unwrap();
    for c in 0..16 {
        let onehot = if c == 3 { 1.0 } else { 0.0 };
        assert!((g.get(5, c) + (onehot - 1.0 / 16.0)).abs() < 1e-12);
    }
    assert_eq!(g.rows.len(), 1);
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = ClipConfig::default();
    let h = 1e-5;
    let mut batches = 0;
    let mut coords = 0;
    while batches < 120 {
        let (mut p, b) = random_case(&mut rng);
        let g = surrogate_gradient(&b, &p, &cfg).unwrap();
        for key in b.contexts() {
            for c in 0..16 {
                let x = p.row(key)[c];
                p.row_mut(key)[c] = x + h;
                let up = clipped_surrogate(&b, &p, &cfg).unwrap();
                p.row_mut(key)[c] = x - h;
                let down = clipped_surrogate(&b, &p, &cfg).unwrap();
                p.row_mut(key)[c] = x;
                let fd = (up - down) / (2.0 * h);
                // a clip boundary inside [x - h, x + h] makes the difference
                // quotient meaningless; such coordinates are vanishingly rare
                let rel = (g.get(key, c) - fd).abs() / fd.abs().max(g.get(key, c).abs()).max(1e-6);
                assert!(rel < 1e-4, "row {key} col {c}: analytic {} vs fd {fd}", g.get(key, c));
                coords += 1;
            }
        }
        batches += 1;
    }
    assert!(coords > 1000);
}

#[test]
fn negative_gradient_is_a_descent_direction() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = ClipConfig {
        learning_rate: 1e-4,
        warmup_steps: 0,
        ..ClipConfig::default()
    };
    for _ in 0..100 {
        let (mut p, b) = random_case(&mut rng);
        let g = surrogate_gradient(&b, &p, &cfg).unwrap();
        if g.l2_norm() < 1e-9 {
            continue;
        }
        let before = clipped_surrogate(&b, &p, &cfg).unwrap();
        apply_update(&mut p, &g, &cfg, 0).unwrap();
        assert!(clipped_surrogate(&b, &p, &cfg).unwrap() < before);
    }
}

#[test]
fn duplicating_trajectories_keeps_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = ClipConfig::default();
    for _ in 0..50 {
        let (p, b) = random_case(&mut rng);
        let mut twice = TokenBatch::new();
        for t in b.trajectories.iter().chain(&b.trajectories) {
            twice.push(t.clone()).unwrap();
        }
        let (x, y) = (
            clipped_surrogate(&b, &p, &cfg).unwrap(),
            clipped_surrogate(&twice, &p, &cfg).unwrap(),
        );
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn warmup_is_linear() {
    let cfg = ClipConfig {
        learning_rate: 2.0,
        warmup_steps: 10,
        ..ClipConfig::default()
    };
    assert_eq!(cfg.effective_lr(0), 0.0);
    assert_eq!(cfg.effective_lr(5), 1.0);
    assert_eq!(cfg.effective_lr(10), 2.0);
    assert_eq!(cfg.effective_lr(99), 2.0);
    let flat = ClipConfig { warmup_steps: 0, ..cfg };
    assert_eq!(flat.effective_lr(0), 2.0);
}

#[test]
fn zero_gradient_leaves_policy_unchanged() {
    let mut p = small_policy();
    p.row_mut(3)[1] = 0.5;
    let before = p.clone();
    let mut g = TableGradient::zeros(16);
    g.rows.insert(7, vec![0.0; 16]);
    apply_update(
        &mut p,
        &g,
        &ClipConfig {
            warmup_steps: 0,
            ..ClipConfig::default()
        },
        0,
    )
    .unwrap();
    assert_eq!(p, before);
    assert_eq!(p.stored_rows(), 1);
}

#[test]
fn small_steps_commute() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = ClipConfig {
        learning_rate: 1e-8,
        warmup_steps: 0,
        ..ClipConfig::default()
    };
    for _ in 0..20 {
        let (p0, b1) = random_case(&mut rng);
        let (_, b2) = random_case(&mut rng);
        let mut seq = p0.clone();
        let g1 = surrogate_gradient(&b1, &seq, &cfg).unwrap();
        apply_update(&mut seq, &g1, &cfg, 0).unwrap();
        let g2 = surrogate_gradient(&b2, &seq, &cfg).unwrap();
        apply_update(&mut seq, &g2, &cfg, 0).unwrap();

        let mut summed = p0.clone();
        let mut g = surrogate_gradient(&b1, &p0, &cfg).unwrap();
        for (k, row) in surrogate_gradient(&b2, &p0, &cfg).unwrap().rows {
            let acc = g.rows.entry(k).or_insert_with(|| vec![0.0; 16]);
            for (a, x) in acc.iter_mut().zip(row) {
                *a += x;
            }
        }
        apply_update(&mut summed, &g, &cfg, 0).unwrap();
        for (k, row) in seq.rows() {
            for (a, b) in row.iter().zip(summed.row(k)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn shape_mismatch_rejected() {
    let mut p = small_policy();
    let g = TableGradient::zeros(24);
    assert_eq!(
        apply_update(&mut p, &g, &ClipConfig::default(), 50),
        Err(ObjectiveError::ShapeMismatch { grad: 24, policy: 16 })
    );
}

#[test]
fn empty_and_non_finite_batches_rejected() {
    let p = small_policy();
    let cfg = ClipConfig::default();
    assert_eq!(
        clipped_surrogate(&TokenBatch::new(), &p, &cfg),
        Err(ObjectiveError::EmptyBatch)
    );
    assert_eq!(
        surrogate_gradient(&TokenBatch::new(), &p, &cfg).unwrap_err(),
        ObjectiveError::EmptyBatch
    );
    let mut b = TokenBatch::new();
    assert!(b
        .push(TrajectorySamples {
            tokens: Vec::new(),
            advantage: f64::NAN
        })
        .is_err());
}

#[test]
fn bad_clip_configs_rejected() {
    for cfg in [
        ClipConfig {
            eps_low: 0.0,
            ..ClipConfig::default()
        },
        ClipConfig {
            eps_high: 0.1,
            ..ClipConfig::default()
        },
        ClipConfig {
            learning_rate: f64::INFINITY,
            ..ClipConfig::default()
        },
    ] {
        assert!(cfg.validate().is_err());
    }
}

#[test]
fn push_response_scores_with_snapshot() {
    let mut p = LogitsTablePolicy::uniform();
    let prompt = crate::task::QuerySpec::from_operands(0, &[1, 2]).prompt_tokens;
    let key = p.context_key(&prompt);
    p.row_mut(key)[Vocabulary::ANS_OPEN.index()] = 2.0;
    let mut b = TokenBatch::new();
    b.push_response(&p, &prompt, &[Vocabulary::ANS_OPEN, Vocabulary::digit(3)], 1.0)
        .unwrap();
    assert_eq!(b.token_count, 2);
    let s = &b.trajectories[0].tokens;
    assert_eq!(s[0].context, key);
    assert_eq!(s[0].old_logprob, p.log_probs(&prompt)[Vocabulary::ANS_OPEN.index()]);
    assert!((s[1].old_logprob + (24f64).ln()).abs() < 1e-12);
    // one peaked row and one uniform row
    let want = (p.entropy_at_key(key) + 24f64.ln()) / 2.0;
    assert!((b.mean_entropy(&p) - want).abs() < 1e-12);
}

proptest! {
    #[test]
    fn loss_is_finite_and_gradient_rows_sum_to_zero(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, b) = random_case(&mut rng);
        let cfg = ClipConfig::default();
        prop_assert!(clipped_surrogate(&b, &p, &cfg).unwrap().is_finite());
        // softmax-row gradients are orthogonal to the all-ones direction
        for row in surrogate_gradient(&b, &p, &cfg).unwrap().rows.values() {
            prop_assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}

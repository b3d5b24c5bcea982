use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use granalign::pairs::{
    build_dpo_pairs, pair_candidates, parse_steer_suffix, select_best, AnnotatedPrompt, PairConfig,
    SteerTemplate,
};
use granalign::policy::{TinyPolicy, Token, Vocab};
use granalign::schema::{PromptSample, QualityScores, Source};

fn scores() -> impl Strategy<Value = QualityScores> {
    prop::array::uniform5(0i64..=4).prop_map(|raw| QualityScores::new(raw).unwrap())
}

fn hc(s: &QualityScores) -> i64 {
    s.helpfulness() as i64 + s.correctness() as i64
}

fn hcc(s: &QualityScores) -> i64 {
    hc(s) + s.coherence() as i64
}

proptest! {
    #[test]
    fn pairs_respect_margin(set in prop::collection::vec(scores(), 2..8), seed in any::<u64>()) {
        let cfg = PairConfig { seed, ..Default::default() };
        let (chosen, eligible) = pair_candidates(&set, &cfg).unwrap();
        let best = set.iter().map(hc).max().unwrap();
        prop_assert_eq!(hc(&set[chosen]), best);
        prop_assert!(set[..chosen].iter().all(|s| hc(s) < best));
        for &j in &eligible {
            prop_assert!(j != chosen);
            prop_assert!(hcc(&set[chosen]) - hcc(&set[j]) >= 2);
        }
        let missing = (0..set.len()).filter(|j| *j != chosen && !eligible.contains(j));
        for j in missing {
            prop_assert!(hcc(&set[chosen]) - hcc(&set[j]) < 2);
        }

        let sample = PromptSample { id: "p".into(), image_ref: None, question: "q".into(), source: Source::Synthetic };
        let texts: Vec<String> = (0..set.len()).map(|i| format!("r{i}")).collect();
        let prompts = [AnnotatedPrompt { sample: &sample, completions: &texts, scores: &set }];
        let (built, stats) = build_dpo_pairs(&prompts, &cfg);
        prop_assert_eq!(built.len() + stats.dropped, 1);
        if let Some(p) = built.first() {
            prop_assert!(eligible.contains(&p.rejected_index));
            prop_assert_eq!(p.chosen_index, chosen);
            prop_assert_eq!(&p.chosen, &texts[chosen]);
        }
    }

    #[test]
    fn best_of_k_is_maximal(set in prop::collection::vec(scores(), 1..8)) {
        let best = select_best(&set).unwrap();
        prop_assert!(set.iter().all(|s| s.rs_score() <= set[best].rs_score()));
    }

    #[test]
    fn steer_suffix_round_trips(s in scores(), q in "[a-zA-Z ?]{0,40}") {
        let t = SteerTemplate::default();
        prop_assert_eq!(parse_steer_suffix(&t.condition(&q, &s)), Some(s));
    }

    #[test]
    fn sampled_tokens_stay_in_alphabet(seed in any::<u64>(), temp in 0.1f64..3.0) {
        let vocab = Vocab::new(7).unwrap();
        let mut p = TinyPolicy::uniform(vocab, 2).unwrap();
        let ctx = p.context_of(&[1, 2]);
        p.row_mut(ctx)[3] = 5.0;
        let out = p.sample(&[1, 2], temp, seed, 20).unwrap();
        prop_assert!(out.len() <= 20);
        prop_assert!(out.iter().all(|&t| (t as usize) < 7));
    }
}

/// First-token frequencies over 10^5 draws match `softmax(logits / T)`
/// within 3 standard deviations.
#[test]
fn sampler_matches_tempered_softmax() {
    let vocab = Vocab::new(4).unwrap();
    let mut p = TinyPolicy::uniform(vocab, 1).unwrap();
    let prompt: Vec<Token> = vec![2];
    let ctx = p.context_of(&prompt);
    let logits = [0.3, -1.0, 1.2, 0.0, -0.4];
    p.row_mut(ctx).copy_from_slice(&logits);
    let temperature = 0.7;
    let z: f64 = logits.iter().map(|l| (l / temperature).exp()).sum();
    let expected: Vec<f64> = logits.iter().map(|l| (l / temperature).exp() / z).collect();

    let draws = 100_000;
    let mut counts = [0usize; 5];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..draws {
        let out = p.sample_with(&prompt, temperature, &mut rng, 1).unwrap();
        let t = out.first().map_or(vocab.eos() as usize, |&t| t as usize);
        counts[t] += 1;
    }
    for (i, (&c, &q)) in counts.iter().zip(&expected).enumerate() {
        let sigma = (draws as f64 * q * (1.0 - q)).sqrt();
        let dev = (c as f64 - draws as f64 * q).abs();
        assert!(
            dev <= 3.0 * sigma,
            "symbol {i}: {c} vs {:.1} (3 sigma {:.1})",
            draws as f64 * q,
            3.0 * sigma
        );
    }
}

#[test]
fn seq_logprob_matches_manual_chain() {
    let vocab = Vocab::new(3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = TinyPolicy::uniform(vocab, 1).unwrap();
    for h in [vec![], vec![0], vec![1], vec![2]] {
        let ctx = p.context_of(&h);
        for v in p.row_mut(ctx) {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    let log_softmax = |row: &[f64], j: usize| {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row[j] - m - row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let prompt: Vec<Token> = vec![0];
    let response: Vec<Token> = vec![2, 1];
    let mut want = 0.0;
    let mut prev = 0;
    for &t in response.iter().chain(std::iter::once(&vocab.eos())) {
        want += log_softmax(p.row(p.context_of(&[prev])).unwrap(), t as usize);
        prev = t;
    }
    let got = p.seq_logprob(&prompt, &response).unwrap();
    assert_eq!(got.token_count, 3);
    assert!((got.sum_logprob - want).abs() < 1e-12);
}

use super::*;
use crate::corpus::ContrastiveInstance;
use crate::objective::CombinedObjective;

fn uniform_table(n_words: usize) -> TableLm {
    let words: Vec<String> = (0..n_words).map(|i| format!("w{i}")).collect();
    let vocab = Vocab::from_tokens(words);
    let n = vocab.len();
    TableLm::new(vocab).with_default(Dist::uniform(n))
}

fn passages_ctx() -> LmContext {
    LmContext {
        question: vec![],
        passages: Some(vec![vec![]]),
        prefix: vec![],
    }
}

fn small_toy() -> (ToyLm, Vocab) {
    let vocab = Vocab::build(["alpha beta gamma delta eps zeta. eta theta!"]);
    let mut cfg = ToyConfig::new(vocab.len());
    cfg.d_model = 8;
    cfg.d_ff = 16;
    cfg.window = 48;
    cfg.init_seed = 7;
    (ToyLm::new(cfg, vocab.clone()).unwrap(), vocab)
}

#[test]
fn uniform_table_logprobs() {
    // four tokens in total: the five specials are part of the vocabulary, so
    // build a table whose default is uniform over exactly four explicit ids
    let lm = uniform_table(3);
    let n = lm.vocab_size();
    let four: Vec<(TokenId, f64)> = (5..5 + 3)
        .chain([EOS])
        .map(|t| (t as TokenId, 0.25))
        .collect();
    let lm = lm.with_default(Dist::sparse(n, &four).unwrap());
    let lps = token_logprobs(&lm, &passages_ctx(), &[5, 6]).unwrap();
    assert_eq!(lps.len(), 2);
    for lp in lps {
        assert!((lp - 0.25f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn table_first_value() {
    let vocab = Vocab::from_tokens(["x".to_string(), "y".to_string()]);
    let x = vocab.id("x").unwrap();
    let n = vocab.len();
    let mut lm = TableLm::new(vocab);
    lm.set(&[], Dist::sparse(n, &[(x, 0.5)]).unwrap());
    let lps = token_logprobs(&lm, &passages_ctx(), &[x, x]).unwrap();
    assert!((lps[0] - 0.5f64.ln()).abs() < 1e-12);
}

#[test]
fn out_of_vocab_and_empty_rejected() {
    let lm = uniform_table(2);
    assert!(matches!(
        token_logprobs(&lm, &passages_ctx(), &[99]),
        Err(Error::OutOfVocab { .. })
    ));
    assert!(token_logprobs(&lm, &passages_ctx(), &[]).is_err());
    let (toy, _) = small_toy();
    assert!(matches!(
        token_logprobs(&toy, &passages_ctx(), &[999]),
        Err(Error::OutOfVocab { .. })
    ));
}

#[test]
fn table_distributions_normalize() {
    let vocab = Vocab::from_tokens(["a".to_string(), "b".to_string()]);
    let n = vocab.len();
    let d = Dist::sparse(n, &[(5, 0.3), (6, 0.3)]).unwrap();
    assert!((d.total_mass() - 1.0).abs() < 1e-9);
    assert!(Dist::sparse(n, &[(5, 0.7), (6, 0.7)]).is_err());
    assert!((Dist::uniform(n).total_mass() - 1.0).abs() < 1e-9);
}

#[test]
fn table_spec_parses_and_conditions_on_passages() {
    let json = r#"{
        "tokens": ["a", "b", "."],
        "entries": [
            {"history": [], "passages": true, "probs": {"a": 1.0}},
            {"history": [], "passages": false, "probs": {"b": 1.0}},
            {"history": ["a"], "probs": {".": 0.5, "<eos>": 0.5}}
        ]
    }"#;
    let spec: super::table::TableSpec = serde_json::from_str(json).unwrap();
    let lm = TableLm::from_spec(&spec).unwrap();
    let a = lm.vocab().id("a").unwrap();
    let with = token_logprobs(&lm, &passages_ctx(), &[a]).unwrap();
    let without = token_logprobs(&lm, &passages_ctx().closed_book(), &[a]).unwrap();
    assert_eq!(with[0], 0.0);
    assert_eq!(without[0], f64::NEG_INFINITY);
}

#[test]
fn toy_distributions_normalize_everywhere() {
    let (toy, vocab) = small_toy();
    let ctx = LmContext {
        question: vocab.tokenize("alpha beta"),
        passages: Some(vec![vocab.tokenize("gamma delta eps.")]),
        prefix: vec![Sentence(vocab.tokenize("zeta."))],
    };
    let mut state = toy.start(&ctx).unwrap();
    for tok in vocab.tokenize("eta theta alpha!") {
        let lps = state.next_logprobs();
        assert_eq!(lps.len(), vocab.len());
        assert!(lps.iter().all(|lp| lp.is_finite() && *lp <= 0.0));
        let mass: f64 = lps.iter().map(|lp| lp.exp()).sum();
        assert!((mass - 1.0).abs() < 1e-6, "mass {mass}");
        state.push(tok).unwrap();
    }
}

#[test]
fn incremental_matches_full_forward() {
    let (toy, vocab) = small_toy();
    let ctx = LmContext {
        question: vocab.tokenize("alpha"),
        passages: Some(vec![
            vocab.tokenize("beta gamma."),
            vocab.tokenize("delta!"),
        ]),
        prefix: vec![],
    };
    let seq = vocab.tokenize("gamma delta eps zeta.");
    let full = toy.token_logprobs(&ctx, &seq).unwrap();
    let mut state = toy.start(&ctx).unwrap();
    for (i, &tok) in seq.iter().enumerate() {
        assert!((state.next_logprobs()[tok as usize] - full[i]).abs() < 1e-10);
        state.push(tok).unwrap();
    }
}

#[test]
fn toy_respects_window() {
    let (toy, vocab) = small_toy();
    let long: Vec<TokenId> = std::iter::repeat_n(vocab.id("alpha").unwrap(), 60).collect();
    let ctx = LmContext {
        question: long,
        passages: None,
        prefix: vec![],
    };
    assert!(matches!(
        toy.start(&ctx),
        Err(Error::ContextOverflow { .. })
    ));
}

fn chain_table() -> (TableLm, [TokenId; 4]) {
    let vocab = Vocab::from_tokens(["a", "b", "c", "."].map(String::from));
    let [a, b, c, dot] = ["a", "b", "c", "."].map(|w| vocab.id(w).unwrap());
    let n = vocab.len();
    let mut lm = TableLm::new(vocab);
    lm.set(
        &[],
        Dist::sparse(n, &[(a, 0.6), (b, 0.3), (c, 0.1)]).unwrap(),
    );
    lm.set(&[a], Dist::sparse(n, &[(dot, 0.7), (EOS, 0.3)]).unwrap());
    lm.set(&[b], Dist::sparse(n, &[(dot, 1.0)]).unwrap());
    lm.set(&[c], Dist::sparse(n, &[(dot, 1.0)]).unwrap());
    (lm, [a, b, c, dot])
}

#[test]
fn low_temperature_is_greedy() {
    let (lm, [a, _, _, dot]) = chain_table();
    let cfg = SamplingConfig {
        top_p: 1.0,
        temperature: 1e-6,
        ..SamplingConfig::default()
    };
    for seed in 0..20 {
        let s = sample_sentence(&lm, &passages_ctx(), &cfg, seed).unwrap();
        assert_eq!(s.sentence.tokens(), &[a, dot]);
        assert!(!s.terminal && !s.truncated);
    }
    let g = greedy_sentence(&lm, &passages_ctx(), 64, Segmentation::Sentence).unwrap();
    assert_eq!(g.sentence.tokens(), &[a, dot]);
}

#[test]
fn immediate_eos_is_terminal_with_empty_body() {
    let vocab = Vocab::from_tokens(["a".to_string()]);
    let n = vocab.len();
    let mut lm = TableLm::new(vocab);
    lm.set(&[], Dist::sparse(n, &[(EOS, 1.0)]).unwrap());
    let s = sample_sentence(&lm, &passages_ctx(), &SamplingConfig::default(), 3).unwrap();
    assert!(s.terminal);
    assert!(s.body().is_empty());
    assert_eq!(s.sentence.tokens(), &[EOS]);
}

#[test]
fn truncation_is_flagged() {
    let vocab = Vocab::from_tokens(["a".to_string()]);
    let a = vocab.id("a").unwrap();
    let n = vocab.len();
    let lm = TableLm::new(vocab).with_default(Dist::sparse(n, &[(a, 1.0)]).unwrap());
    let cfg = SamplingConfig {
        max_tokens: 5,
        ..SamplingConfig::default()
    };
    let s = sample_sentence(&lm, &passages_ctx(), &cfg, 0).unwrap();
    assert!(s.truncated && !s.terminal);
    assert_eq!(s.sentence.len(), 5);
}

#[test]
fn sampling_is_seed_deterministic() {
    let (lm, _) = chain_table();
    let cfg = SamplingConfig::default();
    let a: Vec<_> = (0..30)
        .map(|s| sample_sentence(&lm, &passages_ctx(), &cfg, s).unwrap())
        .collect();
    let b: Vec<_> = (0..30)
        .map(|s| sample_sentence(&lm, &passages_ctx(), &cfg, s).unwrap())
        .collect();
    assert_eq!(a, b);
}

#[test]
fn sampling_matches_table_frequencies() {
    // sentences "a ." (0.6*0.7), "a <eos>" (0.6*0.3), "b ." (0.3), "c ." (0.1)
    let (lm, [a, b, c, dot]) = chain_table();
    let cfg = SamplingConfig {
        top_p: 1.0,
        ..SamplingConfig::default()
    };
    let n = 10_000;
    let mut counts = std::collections::HashMap::new();
    for seed in 0..n {
        let s = sample_sentence(&lm, &passages_ctx(), &cfg, derive_seed(99, &[seed])).unwrap();
        *counts.entry(s.sentence.0).or_insert(0usize) += 1;
    }
    let expected = [
        (vec![a, dot], 0.42),
        (vec![a, EOS], 0.18),
        (vec![b, dot], 0.3),
        (vec![c, dot], 0.1),
    ];
    let total: usize = counts.values().sum();
    assert_eq!(total, n as usize);
    for (sent, p) in expected {
        let got = *counts.get(&sent).unwrap_or(&0) as f64;
        let mean = p * n as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!(
            (got - mean).abs() <= 3.0 * sigma,
            "{sent:?}: {got} vs {mean}±{sigma}"
        );
    }
}

#[test]
fn nucleus_excludes_tail() {
    // top_p = 0.5 keeps only "a" (0.6 >= 0.5)
    let (lm, [a, ..]) = chain_table();
    let cfg = SamplingConfig {
        top_p: 0.5,
        ..SamplingConfig::default()
    };
    for seed in 0..200 {
        let s = sample_sentence(&lm, &passages_ctx(), &cfg, seed).unwrap();
        assert_eq!(s.sentence.tokens()[0], a);
    }
    let bad = SamplingConfig {
        top_p: 0.0,
        ..SamplingConfig::default()
    };
    assert!(sample_sentence(&lm, &passages_ctx(), &bad, 0).is_err());
}

fn toy_instance(vocab: &Vocab) -> (ContrastiveInstance, ContextIndex) {
    let mut contexts = ContextIndex::new();
    contexts.insert(
        "i0".into(),
        ItemContext {
            question: vocab.tokenize("alpha beta"),
            passages: vec![vocab.tokenize("gamma delta eps."), vocab.tokenize("zeta!")],
        },
    );
    let inst = ContrastiveInstance {
        item_id: "i0".into(),
        prefix: vec![Sentence(vocab.tokenize("eta."))],
        target: Sentence(vocab.tokenize("gamma delta eps.")),
        negative: Sentence(vocab.tokenize("theta alpha!")),
        with_passages: true,
    };
    (inst, contexts)
}

#[test]
fn zero_learning_rate_leaves_parameters_bitwise() {
    let (mut toy, vocab) = small_toy();
    let (inst, contexts) = toy_instance(&vocab);
    let before = toy.params().clone();
    let obj = CombinedObjective::default();
    for _ in 0..3 {
        train_step(&mut toy, std::slice::from_ref(&inst), &contexts, &obj, 0.0).unwrap();
    }
    let after = toy.params();
    for (x, y) in before.flat().iter().zip(after.flat()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
    assert_eq!(toy.step_count(), 3);
}

#[test]
fn single_pair_overfits_monotonically() {
    let (mut toy, vocab) = small_toy();
    let (inst, contexts) = toy_instance(&vocab);
    let obj = CombinedObjective::default();
    let losses: Vec<f64> = (0..200)
        .map(|_| {
            train_step(&mut toy, std::slice::from_ref(&inst), &contexts, &obj, 3e-3)
                .unwrap()
                .total
        })
        .collect();
    assert!(toy.params().all_finite());
    for w in losses[20..].windows(2) {
        assert!(w[1] < w[0], "loss went up: {} -> {}", w[0], w[1]);
    }
    assert!(losses[199] < losses[0]);
}

#[test]
fn checkpoint_round_trip() {
    let (mut toy, vocab) = small_toy();
    let (inst, contexts) = toy_instance(&vocab);
    train_step(
        &mut toy,
        &[inst],
        &contexts,
        &CombinedObjective::default(),
        1e-2,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    toy.save(&path).unwrap();
    let back = ToyLm::load(&path).unwrap();
    assert_eq!(back.params(), toy.params());
    assert_eq!(back.step_count(), 1);
    assert_eq!(back.params().digest(), toy.params().digest());
}

#[test]
fn seeds_fan_out_deterministically() {
    assert_eq!(derive_seed(1, &[2, 3]), derive_seed(1, &[2, 3]));
    assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
    assert_ne!(seed_for_key(5, "a"), seed_for_key(5, "b"));
}

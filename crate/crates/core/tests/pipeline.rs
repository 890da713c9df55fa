use priodiff::corpus::{
    load_corpus, save_corpus, synth_continuous_corpus, synth_grammar_corpus, ContinuousConfig, GrammarConfig, TokenSequence, Vocab,
};
use priodiff::denoiser::{generate, mean_vlb, train_tabular, OracleDenoiser, TabularConfig, UniformDenoiser};
use priodiff::diffusion::{forward_marginal, reverse_step, sample_forward};
use priodiff::priority::{decode_full, greedy_order_oracle, TableDecoder};
use priodiff::quantizer::{ToyVq, ToyVqConfig};
use priodiff::rng::seeded;
use priodiff::schedule::{linear_base_schedule, CachedSchedules, StaticPrioritySchedule};

#[test]
fn corpus_file_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let corpus = synth_grammar_corpus(3, &GrammarConfig { conditions: 2, ..GrammarConfig::default() }).unwrap();
    save_corpus(&a, &corpus).unwrap();
    let vocab = Vocab::new(16).unwrap();
    save_corpus(&b, &load_corpus(&a, vocab).unwrap()).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn oracle_reverse_step_inverts_forward_in_distribution() {
    let k = 3;
    let vocab = Vocab::new(k).unwrap();
    let table = linear_base_schedule(6, k, 0.7, 0.3).unwrap();
    let x0 = TokenSequence::new("x", vec![1], None, vocab).unwrap();
    let oracle = OracleDenoiser::new(x0.clone());
    let mut rng = seeded(5);
    let draws = 20_000;
    for t in [2, 4, 6] {
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            let xt = sample_forward(&x0, &table, t, &mut rng).unwrap();
            let prev = reverse_step(&xt, &oracle, &table, t, &mut rng).unwrap();
            counts[prev.active()[0]] += 1;
        }
        let expect = forward_marginal(1, table.row(0), t - 1, vocab).unwrap();
        let mut chi2 = 0.0;
        let mut cells = 0;
        for (c, p) in counts.iter().zip(expect.probs()) {
            if *p > 0.0 {
                let e = p * draws as f64;
                chi2 += (*c as f64 - e).powi(2) / e;
                cells += 1;
            } else {
                assert_eq!(*c, 0);
            }
        }
        // 1% critical values for 1..=3 degrees of freedom
        let critical = [6.635, 9.210, 11.345][cells - 2];
        assert!(chi2 < critical, "t={t}: chi2 {chi2} with {} dof", cells - 1);
    }
}

#[test]
fn trained_denoiser_beats_uniform_with_margin() {
    let corpus = synth_grammar_corpus(1, &GrammarConfig { categories: 6, sequences: 120, ..GrammarConfig::default() }).unwrap();
    let (train, heldout) = corpus.split_at(100);
    let table = linear_base_schedule(8, 6, 0.9, 0.1).unwrap();
    let (model, trace) = train_tabular(train, heldout, &table, &TabularConfig::default()).unwrap();
    let uniform = mean_vlb(&UniformDenoiser::new(6), heldout, &table, 8, 0).unwrap();
    assert!((trace.untrained_vlb - uniform).abs() < 1e-9);
    let trained = mean_vlb(&model, heldout, &table, 8, 0).unwrap();
    assert!(trained < 0.9 * uniform, "trained {trained} vs uniform {uniform}");
}

#[test]
fn training_is_deterministic() {
    let corpus = synth_grammar_corpus(2, &GrammarConfig { categories: 4, sequences: 30, ..GrammarConfig::default() }).unwrap();
    let table = linear_base_schedule(5, 4, 0.9, 0.1).unwrap();
    let cfg = TabularConfig { epochs: 1, ..TabularConfig::default() };
    let (a, ta) = train_tabular(&corpus[..25], &corpus[25..], &table, &cfg).unwrap();
    let (b, tb) = train_tabular(&corpus[..25], &corpus[25..], &table, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
    let ga = generate(&a, &table, 10, None, &mut seeded(4)).unwrap();
    let gb = generate(&b, &table, 10, None, &mut seeded(4)).unwrap();
    assert_eq!(ga, gb);
}

#[test]
fn conditions_with_disjoint_tokens_stay_apart() {
    let vocab = Vocab::new(6).unwrap();
    let mut corpus = Vec::new();
    let mut rng = seeded(8);
    use rand::Rng;
    for j in 0..60 {
        let c = j % 2;
        let tokens: Vec<usize> = (0..10).map(|_| 3 * c + rng.random_range(0..3)).collect();
        corpus.push(TokenSequence::new(format!("c{j}"), tokens, Some(c as i64), vocab).unwrap());
    }
    let table = linear_base_schedule(10, 6, 0.9, 0.1).unwrap();
    let (model, _) = train_tabular(&corpus[..50], &corpus[50..], &table, &TabularConfig::default()).unwrap();
    let (mut inside, mut total) = (0, 0);
    for j in 0..100 {
        let c = j % 2;
        let g = generate(&model, &table, 10, Some(c as i64), &mut rng).unwrap();
        for &t in g.sequence.active() {
            total += 1;
            if t / 3 == c {
                inside += 1;
            }
        }
    }
    let share = inside as f64 / total as f64;
    assert!(share >= 0.95, "{share}");
}

#[test]
fn priority_schedules_train_through_the_cache() {
    let corpus = synth_grammar_corpus(6, &GrammarConfig { categories: 8, sequences: 40, ..GrammarConfig::default() }).unwrap();
    let base = linear_base_schedule(10, 8, 0.9, 0.1).unwrap();
    let entropy = priodiff::priority::token_entropy(&priodiff::corpus::count_frequencies(&corpus).unwrap()).unwrap();
    let provider = StaticPrioritySchedule { base, entropy };
    let cache = CachedSchedules::precompute(&provider, &corpus).unwrap();
    let cfg = TabularConfig { epochs: 1, ..TabularConfig::default() };
    let (_, direct) = train_tabular(&corpus[..30], &corpus[30..], &provider, &cfg).unwrap();
    let (_, cached) = train_tabular(&corpus[..30], &corpus[30..], &cache, &cfg).unwrap();
    assert_eq!(direct, cached);
    assert!(direct.heldout_vlb[0] < direct.untrained_vlb);
}

#[test]
fn greedy_oracle_sorts_separable_contributions() {
    let magnitudes = [0.3, 2.0, 1.1, 4.0, 0.7];
    let decoder = TableDecoder::separable(&magnitudes, 5, 9).unwrap();
    let vocab = Vocab::new(5).unwrap();
    let seq = TokenSequence::new("g", vec![0, 1, 2, 3, 4, 1], None, vocab).unwrap();
    let order = greedy_order_oracle(&seq, &decoder, &decode_full(&decoder, &seq).unwrap()).unwrap();
    assert_eq!(order, vec![3, 1, 5, 2, 4, 0]);
}

#[test]
fn small_gradient_step_lowers_vq_objective() {
    let data = synth_continuous_corpus(2, &ContinuousConfig::default()).unwrap();
    let cfg = ToyVqConfig { delta: 0.2, ..ToyVqConfig::default() };
    let model = ToyVq::new(6, &cfg).unwrap();
    let (before, grads) = model.gradients(&data, cfg.weights()).unwrap();
    let stepped: Vec<f64> = model
        .parameters()
        .iter()
        .zip(grads.flatten())
        .map(|(p, g)| p - 1e-4 * g)
        .collect();
    let after = model.with_parameters(&stepped).unwrap().objective(&data, cfg.weights()).unwrap();
    assert!(after.total < before.total);
    for v in [after.reconstruction, after.embedding, after.commitment, after.orthogonal] {
        assert!(v >= 0.0);
    }
}

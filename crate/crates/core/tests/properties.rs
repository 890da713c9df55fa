use proptest::prelude::*;

use priodiff::corpus::{count_frequencies, parse_corpus, synth_grammar_corpus, write_corpus, GrammarConfig, TokenSequence, Vocab};
use priodiff::denoiser::{generate, Denoiser, OracleDenoiser, TabularConfig, TabularDenoiser, UniformDenoiser};
use priodiff::diffusion::{forward_marginal, posterior, reverse_distributions, vlb, TransitionMatrix, VlbMode};
use priodiff::priority::{kendall_tau, rank_scores, static_scores, PriorityScores};
use priodiff::quantizer::{l2_normalize, orth_reg, Codebook};
use priodiff::rng::seeded;
use priodiff::schedule::{apply_priority, linear_base_schedule, ScheduleRow};
use priodiff::verify::random_row;

fn sequence(k: usize) -> impl Strategy<Value = TokenSequence> {
    (prop::collection::vec(0..k, 1..12), 0usize..4, prop::option::of(-3i64..3)).prop_map(move |(tokens, pads, cond)| {
        let mut t = tokens;
        t.extend(std::iter::repeat_n(k + 1, pads));
        TokenSequence::new("s", t, cond, Vocab::new(k).unwrap()).unwrap()
    })
}

fn weights(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..50.0, len)
}

proptest! {
    #[test]
    fn corpus_round_trip(seqs in prop::collection::vec(sequence(5), 1..6)) {
        let corpus: Vec<_> = seqs
            .into_iter()
            .enumerate()
            .map(|(i, s)| TokenSequence::new(format!("id{i}"), s.tokens().to_vec(), s.condition(), s.vocab()).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_corpus(&mut buf, &corpus).unwrap();
        let back = parse_corpus(buf.as_slice(), Vocab::new(5).unwrap()).unwrap();
        prop_assert_eq!(&back, &corpus);
        let mut again = Vec::new();
        write_corpus(&mut again, &back).unwrap();
        prop_assert_eq!(buf, again);
    }

    #[test]
    fn counts_total_active_lengths(seqs in prop::collection::vec(sequence(4), 1..8)) {
        let stats = count_frequencies(&seqs).unwrap();
        prop_assert_eq!(stats.total, seqs.iter().map(|s| s.len() as u64).sum::<u64>());
        prop_assert_eq!(stats.total, stats.counts.iter().sum::<u64>());
    }

    #[test]
    fn grammar_is_pure(seed in 0u64..1000) {
        let cfg = GrammarConfig { sequences: 5, ..GrammarConfig::default() };
        prop_assert_eq!(synth_grammar_corpus(seed, &cfg).unwrap(), synth_grammar_corpus(seed, &cfg).unwrap());
    }

    #[test]
    fn normalize_gives_unit_norm(v in prop::collection::vec(-10.0f64..10.0, 1..8)) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
        let u = l2_normalize(&v).unwrap();
        prop_assert!((u.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quantize_is_scale_invariant(seed in 0u64..500, scale in 1e-3f64..1e3) {
        let book = Codebook::random_unit(12, 5, seed).unwrap();
        let other = Codebook::random_unit(20, 5, seed + 1).unwrap();
        let rows: Vec<Vec<f64>> = (0..20).map(|k| other.entry(k).to_vec()).collect();
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x * scale).collect()).collect();
        let a = book.assign(&priodiff::corpus::ContinuousSequence::from_frames(&rows).unwrap()).unwrap();
        let b = book.assign(&priodiff::corpus::ContinuousSequence::from_frames(&scaled).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn orth_reg_is_permutation_invariant(seed in 0u64..500, shift in 1usize..7) {
        let book = Codebook::random_unit(7, 4, seed).unwrap();
        let rows: Vec<Vec<f64>> = (0..7).map(|k| book.entry((k + shift) % 7).to_vec()).collect();
        let permuted = Codebook::from_rows(&rows).unwrap();
        prop_assert!((orth_reg(&book).unwrap() - orth_reg(&permuted).unwrap()).abs() < 1e-12);
        prop_assert!(orth_reg(&book).unwrap() >= 0.0);
    }

    #[test]
    fn static_scores_ignore_entropy_scale(seq in sequence(4), h in weights(4..5), c in 1e-3f64..1e3) {
        let scaled: Vec<f64> = h.iter().map(|v| v * c).collect();
        let a = static_scores(&seq, &h).unwrap();
        let b = static_scores(&seq, &scaled).unwrap();
        for (x, y) in a.scores().iter().zip(b.scores()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        prop_assert!((a.scores().iter().sum::<f64>() - seq.len() as f64).abs() < 1e-9);
    }

    #[test]
    fn rank_scores_have_mean_one(n in 1usize..30, seed in 0u64..100) {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeded(seed));
        let f = rank_scores(&order).unwrap();
        prop_assert!((f.scores().iter().sum::<f64>() - n as f64).abs() < 1e-9);
        prop_assert!((kendall_tau(&order, &order).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn transition_columns_are_stochastic(a in 0.0f64..1.0, g in 0.0f64..1.0, k in 1usize..10) {
        prop_assume!(a + g <= 1.0);
        let q = TransitionMatrix::build(a, g, k).unwrap();
        for s in q.column_sums() {
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        prop_assert_eq!(q.get(k, k), 1.0);
    }

    #[test]
    fn priority_tables_are_valid(w in weights(1..20), steps in 2usize..16, k in 2usize..12, g in 0.0f64..1.0) {
        let base = linear_base_schedule(steps, k, g, 1.0 - g).unwrap();
        let f = PriorityScores::from_weights(&w).unwrap();
        let table = apply_priority(&base, &f).unwrap();
        table.validate().unwrap();
        for row in table.rows() {
            for t in 0..=steps {
                let mass = row.alpha_bar[t] + k as f64 * row.beta_bar[t] + row.gamma_bar[t];
                prop_assert!((mass - 1.0).abs() < 1e-9);
            }
            let rebuilt = ScheduleRow::from_per_step(&row.alpha[1..], &row.gamma[1..], k).unwrap();
            for t in 0..=steps {
                prop_assert!((rebuilt.alpha_bar[t] - row.alpha_bar[t]).abs() < 1e-9);
                prop_assert!((rebuilt.gamma_bar[t] - row.gamma_bar[t]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn posterior_chain_rule(seed in 0u64..300, x0 in 0usize..3, steps in 2usize..7) {
        let k = 3;
        let vocab = Vocab::new(k).unwrap();
        let row = random_row(steps, k, &mut seeded(seed)).unwrap();
        for t in 1..=steps {
            let prev = forward_marginal(x0, &row, t - 1, vocab).unwrap();
            let now = forward_marginal(x0, &row, t, vocab).unwrap();
            // Σ_{x_t} q(x_t | x0) q(x_{t-1} | x_t, x0) = q(x_{t-1} | x0)
            let mut back = [0.0; 4];
            for xt in 0..=k {
                if now.prob(xt) == 0.0 {
                    continue;
                }
                let post = posterior(xt, x0, &row, t, vocab).unwrap();
                for (b, p) in back.iter_mut().zip(post.probs()) {
                    *b += now.prob(xt) * p;
                }
            }
            for (b, p) in back.iter().zip(prev.probs()) {
                prop_assert!((b - p).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reverse_kernels_are_distributions(seq in sequence(3), t in 1usize..6, seed in 0u64..100) {
        let table = linear_base_schedule(5, 3, 0.8, 0.2).unwrap();
        let xt = priodiff::diffusion::sample_forward(&seq, &table, t, &mut seeded(seed)).unwrap();
        for den in [&UniformDenoiser::new(3) as &dyn Denoiser, &OracleDenoiser::new(seq.clone())] {
            for d in reverse_distributions(&xt, den, &table, t).unwrap() {
                prop_assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn bound_terms_are_nonnegative(tokens in prop::collection::vec(0usize..2, 1..4)) {
        let x0 = TokenSequence::new("b", tokens, None, Vocab::new(2).unwrap()).unwrap();
        let table = linear_base_schedule(3, 2, 0.7, 0.3).unwrap();
        let r = vlb(&x0, &UniformDenoiser::new(2), &table, VlbMode::Exact).unwrap();
        prop_assert!(r.prior >= 0.0 && r.reconstruction >= 0.0);
        prop_assert!(r.intermediate.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn generation_emits_no_mask(len in 1usize..12, seed in 0u64..200) {
        let table = linear_base_schedule(6, 4, 0.9, 0.1).unwrap();
        let model = TabularDenoiser::new(4, 6, TabularConfig::default()).unwrap();
        let g = generate(&model, &table, len, None, &mut seeded(seed)).unwrap();
        prop_assert_eq!(g.sequence.len(), len);
        prop_assert!(!g.sequence.contains_mask());
        for step in &g.trajectory {
            prop_assert_eq!(step.padded_len(), len);
        }
    }
}

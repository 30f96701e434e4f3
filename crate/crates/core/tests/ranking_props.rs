use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use kgseq_core::bpe::{BpeVocab, STOP};
use kgseq_core::complex::{evaluate_complex, ComplexModel};
use kgseq_core::decode::{beam_search, greedy, sample, sample_naive, StepModel, TableModel};
use kgseq_core::exec::Serial;
use kgseq_core::kg::{drop_edges, KnowledgeGraph, Query, Scope, Triple};
use kgseq_core::lp::{evaluate_lp, rank_query, Decoding, Metrics, ScoredCandidate, Seq2SeqRanker};
use kgseq_core::model::{ModelConfig, Seq2Seq};
use kgseq_core::qa::{rerank, RerankedAnswer};
use kgseq_core::textmap::{MentionMode, NameTable, TextRegistry};

fn three() -> TableModel {
    TableModel::new(vec![(vec![3, 4], 0.5), (vec![3, 5], 0.3), (vec![6], 0.2)], 8).unwrap()
}

/// Empirical frequencies of the three sequences within 3 binomial sigmas.
fn check_frequencies(draws: &[(Vec<u32>, usize)], n: usize) {
    let m = three();
    for (seq, p) in m.sequences() {
        let got = draws.iter().filter(|d| &d.0 == seq).map(|d| d.1).sum::<usize>() as f64;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((got - n as f64 * p).abs() <= 3.0 * sd, "{seq:?}: {got} vs {}", n as f64 * p);
    }
}

#[test]
fn tree_sampler_frequencies_match_the_table() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n = 10_000;
    let s = sample(&three(), &(), n, &mut rng).unwrap();
    check_frequencies(&s.into_iter().map(|d| (d.tokens, d.count)).collect::<Vec<_>>(), n);
}

#[test]
fn naive_sampler_frequencies_match_the_table() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 10_000;
    let s = sample_naive(&three(), &(), n, &mut rng).unwrap();
    check_frequencies(&s.into_iter().map(|d| (d.tokens, d.count)).collect::<Vec<_>>(), n);
}

fn table_strategy() -> impl Strategy<Value = TableModel> {
    // distinct stop-free sequences over tokens 3..7 of length 1..=3
    prop::collection::btree_map(prop::collection::vec(3u32..7, 1..=3), 1u32..100, 1..8).prop_map(|m| {
        TableModel::new(m.into_iter().map(|(s, w)| (s, w as f64)).collect(), 8).unwrap()
    })
}

fn by_prob(m: &TableModel) -> Vec<(Vec<u32>, f64)> {
    let mut v = m.sequences().to_vec();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // A beam at least as wide as the support keeps every prefix alive, so it
    // recovers the full ordering.
    #[test]
    fn wide_beam_enumerates_the_table(m in table_strategy()) {
        let want = by_prob(&m);
        let got = beam_search(&m, &(), want.len().max(8)).unwrap();
        prop_assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g.logprob - w.1.ln()).abs() < 1e-9);
            prop_assert!((m.prob(&g.tokens) - w.1).abs() < 1e-12);
        }
    }

    // When the first token determines the rest, the beam is exact for any width.
    #[test]
    fn beam_is_exact_on_root_branching_tables(
        weights in prop::collection::vec(1u32..100, 1..6),
        k in 1usize..6,
    ) {
        let seqs: Vec<(Vec<u32>, f64)> = weights
            .iter()
            .enumerate()
            .map(|(i, &w)| (vec![3 + i as u32, 3 + ((i as u32 + 1) % 5)], w as f64))
            .collect();
        let m = TableModel::new(seqs, 8).unwrap();
        let want = by_prob(&m);
        let got = beam_search(&m, &(), k).unwrap();
        prop_assert_eq!(got.len(), k.min(want.len()));
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((m.prob(&g.tokens) - w.1).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_one_equals_greedy(m in table_strategy()) {
        let g = greedy(&m, &()).unwrap().unwrap();
        let b = beam_search(&m, &(), 1).unwrap();
        prop_assert_eq!(&b[0].tokens, &g.tokens);
    }
}

fn candidates() -> impl Strategy<Value = Vec<ScoredCandidate>> {
    prop::collection::btree_map(0u32..30, -20.0f64..0.0, 1..20).prop_map(|m| {
        m.into_iter()
            .map(|(entity, logprob)| ScoredCandidate { entity, logprob })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn enlarging_the_filter_never_worsens_rank(
        c in candidates(),
        gold in 0u32..30,
        a in prop::collection::btree_set(0u32..30, 0..10),
        extra in prop::collection::btree_set(0u32..30, 0..10),
    ) {
        let q = Query::tail(0, 0);
        let small = rank_query(q, &c, gold, &a);
        let big: BTreeSet<u32> = a.union(&extra).copied().collect();
        let large = rank_query(q, &c, gold, &big);
        match (small.rank, large.rank) {
            (Some(s), Some(l)) => prop_assert!(l <= s),
            (None, None) => {}
            other => prop_assert!(false, "presence changed: {:?}", other),
        }
    }

    #[test]
    fn rank_is_invariant_under_monotone_transforms(c in candidates(), gold in 0u32..30, k in -4i32..4) {
        let q = Query::tail(0, 0);
        let t: Vec<ScoredCandidate> = c
            .iter()
            .map(|x| ScoredCandidate { entity: x.entity, logprob: 2f64.powi(k) * x.logprob.exp() })
            .collect();
        prop_assert_eq!(rank_query(q, &c, gold, &BTreeSet::new()).rank, rank_query(q, &t, gold, &BTreeSet::new()).rank);
    }

    #[test]
    fn metrics_are_ordered(ranks in prop::collection::vec(prop::option::of(1usize..30), 1..50)) {
        let mut m = Metrics::default();
        for r in &ranks {
            m.add(*r);
        }
        prop_assert!((0.0..=1.0).contains(&m.mrr()));
        prop_assert!(m.hits_at_1() <= m.hits_at_3() && m.hits_at_3() <= m.hits_at_10());
        // split and merge
        let (x, y) = ranks.split_at(ranks.len() / 2);
        let (mut a, mut b) = (Metrics::default(), Metrics::default());
        x.iter().for_each(|r| a.add(*r));
        y.iter().for_each(|r| b.add(*r));
        a.merge(&b);
        prop_assert_eq!(a.n, m.n);
        prop_assert_eq!((a.hits1, a.hits3, a.hits10), (m.hits1, m.hits3, m.hits10));
        prop_assert!((a.rr_sum - m.rr_sum).abs() < 1e-12);
    }

    #[test]
    fn complex_is_linear_in_the_subject(seed in 0u64..1000, w in -3.0f64..3.0) {
        let mut m = ComplexModel::new(3, 1, 4, seed).unwrap();
        let a = m.score_triple(0, 0, 2).unwrap();
        let b = m.score_triple(1, 0, 2).unwrap();
        let width = m.entities.shape()[1];
        let (r0, r1): (Vec<f64>, Vec<f64>) = (m.entities.row(0).to_vec(), m.entities.row(1).to_vec());
        for j in 0..width {
            m.entities.data_mut()[j] = r0[j] + w * r1[j];
        }
        prop_assert!((m.score_triple(0, 0, 2).unwrap() - (a + w * b)).abs() < 1e-10);
    }
}

fn hyps() -> impl Strategy<Value = Vec<RerankedAnswer>> {
    prop::collection::vec((0u32..8, -10.0f64..0.0), 1..6).prop_map(|v| {
        let mut v: Vec<RerankedAnswer> = v
            .into_iter()
            .map(|(e, lp)| RerankedAnswer {
                mention: format!("e{e}"),
                entity: Some(e),
                base_logprob: lp,
                final_score: lp,
                in_neighborhood: false,
            })
            .collect();
        v.sort_by(|a, b| b.base_logprob.total_cmp(&a.base_logprob));
        v
    })
}

fn star() -> KnowledgeGraph {
    // 0 is linked to 1..=3; 4..8 are isolated from it
    KnowledgeGraph::new(vec![Triple::new(0, 0, 1), Triple::new(2, 0, 0), Triple::new(0, 0, 3), Triple::new(5, 0, 6)], 8, 1)
        .unwrap()
}

proptest! {
    #[test]
    fn alpha_zero_is_the_identity(h in hyps()) {
        let (s, c) = rerank(&h, Some(0), 0.0, 1, &star()).unwrap();
        prop_assert_eq!(c, Some(0));
        prop_assert!(s.iter().zip(&h).all(|(a, b)| a.final_score == b.base_logprob));
    }

    #[test]
    fn larger_alpha_only_helps_neighbours(h in hyps(), a1 in 0.0f64..5.0, d in 0.0f64..5.0) {
        let kg = star();
        let (lo, _) = rerank(&h, Some(0), a1, 1, &kg).unwrap();
        let (hi, _) = rerank(&h, Some(0), a1 + d, 1, &kg).unwrap();
        for i in 0..h.len() {
            for j in 0..h.len() {
                if lo[i].in_neighborhood && !lo[j].in_neighborhood && lo[i].final_score > lo[j].final_score {
                    prop_assert!(hi[i].final_score > hi[j].final_score);
                }
            }
        }
    }

    #[test]
    fn huge_alpha_puts_neighbours_first(h in hyps()) {
        let (s, c) = rerank(&h, Some(0), 100.0, 1, &star()).unwrap();
        if s.iter().any(|x| x.in_neighborhood) {
            prop_assert!(s[c.unwrap()].in_neighborhood);
        }
    }
}

/// A tiny untrained model over a 10-entity graph: exhaustive mention scoring
/// through the ranking code equals a direct full-scoring oracle computed on
/// the teacher-forced path.
#[test]
fn exhaustive_scoring_matches_full_scoring_oracle() {
    let names: Vec<String> = (0..10).map(|i| format!("node {i}")).collect();
    let triples: Vec<Triple> = (0..10).flat_map(|i| [Triple::new(i, 0, (i + 1) % 10), Triple::new(i, 1, (i * 3) % 10)]).collect();
    let g = KnowledgeGraph::new(triples, 10, 2).unwrap();
    let split = drop_edges(&g, 0.3, 4).unwrap();
    let (reg, _) = TextRegistry::build(
        &NameTable::from_names(&names),
        &NameTable::from_names(&["to", "times three"]),
        MentionMode::OneToOne,
    )
    .unwrap();
    let corpus: Vec<String> = reg.lp_corpus(&g).unwrap().into_iter().flat_map(|(a, b)| [a, b]).collect();
    let vocab = BpeVocab::train(&corpus, 60, 2).unwrap();
    let mut c = ModelConfig::desk(vocab.len());
    (c.d_model, c.n_heads, c.d_ff, c.n_enc_layers, c.n_dec_layers, c.num_buckets) = (16, 2, 16, 1, 1, 8);
    let model = Seq2Seq::<f64>::new(c, 5).unwrap();
    let ranker = Seq2SeqRanker::new(&model, &vocab, &reg, Decoding::Exhaustive, 0);
    let probe = split.test.triples();
    let rep = evaluate_lp(&split, probe, Scope::ALL, &Serial, |q, _, i| Ok((ranker.candidates(q, i as u64)?, None))).unwrap();

    let mut oracle = Metrics::default();
    for (row, (q, gold)) in rep.rows.iter().zip(kgseq_core::lp::probe_queries(probe)) {
        let input = vocab.encode(&reg.verbalize_lp(q).unwrap());
        let score = |e: u32| {
            let mut t = vocab.encode(reg.entity(e).unwrap());
            t.push(STOP);
            -model.teacher_forced_loss(&input, &t).unwrap() * t.len() as f64
        };
        let known = split.known_positives(q, Scope::ALL);
        let sg = score(gold);
        let better = (0..10u32)
            .filter(|&e| e != gold && !known.contains(&e))
            .filter(|&e| {
                let s = score(e);
                s > sg || (s == sg && e < gold)
            })
            .count();
        assert_eq!(row.rank, Some(better + 1));
        oracle.add(Some(better + 1));
        // the incremental path and the teacher-forced path agree closely
        let inc = model.sequence_log_prob(&model.prepare(&input).unwrap(), &{
            let mut t = vocab.encode(reg.entity(gold).unwrap());
            t.push(STOP);
            t
        });
        assert!((inc.unwrap() - sg).abs() < 1e-9);
    }
    assert_eq!(oracle, rep.overall);
}

/// ComplEx evaluation and the shared ranking agree on identical scores.
#[test]
fn complex_evaluation_uses_the_shared_ranking() {
    let triples: Vec<Triple> = (0..12).map(|i| Triple::new(i, i % 3, (i * 5 + 1) % 12)).collect();
    let g = KnowledgeGraph::new(triples, 12, 3).unwrap();
    let split = drop_edges(&g, 0.5, 1).unwrap();
    let m = ComplexModel::new(12, 3, 6, 9).unwrap();
    let a = evaluate_complex(&m, &split, split.test.triples(), Scope::ALL, &Serial).unwrap();
    let b = evaluate_lp(&split, split.test.triples(), Scope::ALL, &Serial, |q, _, _| {
        let scores = m.score_all(q)?;
        Ok((
            scores
                .into_iter()
                .enumerate()
                .map(|(e, s)| ScoredCandidate { entity: e as u32, logprob: s })
                .collect(),
            None,
        ))
    })
    .unwrap();
    assert_eq!(a.rows.iter().map(|r| r.rank).collect::<Vec<_>>(), b.rows.iter().map(|r| r.rank).collect::<Vec<_>>());
    // an untrained model ranks near the analytic random baseline
    let full = evaluate_complex(&m, &split, g.triples(), Scope::TRAIN, &Serial).unwrap();
    assert!(full.overall.mrr() < 3.0 * kgseq_core::lp::random_mrr(12));
}

use std::collections::BTreeSet;

use proptest::prelude::*;

use kgseq_core::kg::{KnowledgeGraph, Triple};
use kgseq_core::pathpred::{build_mapping, mine_paths, traverse, Path, SignedRel};
use kgseq_core::qa::QaSplit;
use kgseq_core::synth::{movie_qa, MovieConfig};
use kgseq_core::textmap::{MentionMode, TextRegistry};

fn graph(n: u32, r: u32, max_edges: usize) -> impl Strategy<Value = KnowledgeGraph> {
    prop::collection::vec((0..n, 0..r, 0..n), 0..max_edges).prop_map(move |es| {
        KnowledgeGraph::new(es.into_iter().map(|(s, p, o)| Triple::new(s, p, o)).collect(), n as usize, r as usize)
            .unwrap()
    })
}

/// Signed edges as a flat list, independent of the graph's indexes.
fn signed_edges(kg: &KnowledgeGraph) -> Vec<(u32, SignedRel, u32)> {
    kg.triples()
        .iter()
        .flat_map(|t| [(t.s, SignedRel::fwd(t.p), t.o), (t.o, SignedRel::inv(t.p), t.s)])
        .collect()
}

/// Paths by enumerating every walk of length `k`.
fn walk_oracle(kg: &KnowledgeGraph, h: u32, a: u32, k: usize) -> BTreeSet<Path> {
    let edges = signed_edges(kg);
    let mut out = BTreeSet::new();
    let mut stack = vec![(h, Vec::<SignedRel>::new())];
    while let Some((x, p)) = stack.pop() {
        if p.len() == k {
            if x == a {
                out.insert(p);
            }
            continue;
        }
        for &(s, r, o) in &edges {
            if s == x {
                let mut q = p.clone();
                q.push(r);
                stack.push((o, q));
            }
        }
    }
    out
}

/// Relation-by-relation frontier expansion over the flat edge list.
fn traverse_oracle(kg: &KnowledgeGraph, h: u32, path: &[SignedRel]) -> BTreeSet<u32> {
    let edges = signed_edges(kg);
    let mut f: BTreeSet<u32> = [h].into();
    for r in path {
        f = edges.iter().filter(|(s, rr, _)| f.contains(s) && rr == r).map(|e| e.2).collect();
    }
    f
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn two_hop_paths_match_a_double_loop(kg in graph(30, 3, 60), h in 0u32..30, a in 0u32..30) {
        let edges = signed_edges(&kg);
        let mut want = BTreeSet::new();
        for &(s1, r1, o1) in &edges {
            for &(s2, r2, o2) in &edges {
                if s1 == h && o1 == s2 && o2 == a {
                    want.insert(vec![r1, r2]);
                }
            }
        }
        let got: BTreeSet<Path> = mine_paths(&kg, h, a, 2).into_iter().collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn mining_is_complete_up_to_three_hops(kg in graph(12, 2, 18), h in 0u32..12, a in 0u32..12, k in 1usize..=3) {
        let got: BTreeSet<Path> = mine_paths(&kg, h, a, k).into_iter().collect();
        prop_assert_eq!(got, walk_oracle(&kg, h, a, k));
    }

    #[test]
    fn traversal_matches_the_oracle(
        kg in graph(20, 3, 40),
        h in 0u32..20,
        path in prop::collection::vec((0u32..3, any::<bool>()), 1..4),
    ) {
        let path: Path = path.into_iter().map(|(relation, inverse)| SignedRel { relation, inverse }).collect();
        prop_assert_eq!(traverse(&kg, h, &path), traverse_oracle(&kg, h, &path));
    }

    #[test]
    fn adding_edges_never_shrinks_answers(
        kg in graph(20, 3, 30),
        extra in prop::collection::vec((0u32..20, 0u32..3, 0u32..20), 0..10),
        h in 0u32..20,
        path in prop::collection::vec((0u32..3, any::<bool>()), 1..4),
    ) {
        let path: Path = path.into_iter().map(|(relation, inverse)| SignedRel { relation, inverse }).collect();
        let mut t = kg.triples().to_vec();
        t.extend(extra.into_iter().map(|(s, p, o)| Triple::new(s, p, o)));
        let bigger = KnowledgeGraph::new(t, 20, 3).unwrap();
        prop_assert!(traverse(&kg, h, &path).is_subset(&traverse(&bigger, h, &path)));
    }
}

#[test]
fn mapping_recovers_the_generating_paths() {
    let qa = movie_qa(&MovieConfig::default()).unwrap();
    let reg = TextRegistry::build(&qa.kg.entities, &qa.kg.relations, MentionMode::SurfaceForm).unwrap().0;
    let train = qa.split(QaSplit::Train);
    let (m, stats) = build_mapping(&train, &qa.kg.graph, &reg, 1).unwrap();
    assert_eq!(stats.skipped, 0);
    assert_eq!(m.paths.len(), qa.templates.len());
    for tpl in &qa.templates {
        let key = kgseq_core::pathpred::Template { base: tpl.text.clone(), hops: 1 };
        assert_eq!(m.get(&key).unwrap().relations, tpl.path, "{}", tpl.text);
    }
}

//! Hard-routing ensembles.
//!
//! Link prediction: queries with no other train answers go to the seq2seq
//! model, the rest to ComplEx. QA: PathPred first, the QA model when its
//! answer set is empty.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::kg::{KgSplit, Query};
use crate::lp::{Route, ScoredCandidate};
use crate::qa::QaExample;
use crate::textmap::TextRegistry;

/// Route for a link-prediction query, a pure function of the train graph.
pub fn lp_route(split: &KgSplit, q: Query, gold: u32) -> Route {
    if split.train.answers(q).iter().all(|&e| e == gold) {
        Route::Seq2Seq
    } else {
        Route::Complex
    }
}

/// Candidates from the routed member only; the other closure is not called.
pub fn lp_ensemble_candidates(
    split: &KgSplit,
    q: Query,
    gold: u32,
    seq2seq: impl FnOnce() -> Result<Vec<ScoredCandidate>>,
    complex: impl FnOnce() -> Result<Vec<ScoredCandidate>>,
) -> Result<(Vec<ScoredCandidate>, Option<Route>)> {
    let route = lp_route(split, q, gold);
    let cands = match route {
        Route::Seq2Seq => seq2seq()?,
        _ => complex()?,
    };
    Ok((cands, Some(route)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleAnswer {
    pub route: Route,
    pub answer: Option<String>,
    pub entity: Option<u32>,
    /// The full PathPred set when that route was taken.
    pub set: BTreeSet<u32>,
}

/// PathPred's lowest-id answer when its set is non-empty, otherwise the
/// QA model's answer from `fallback`.
pub fn qa_ensemble_answer(
    pathpred_set: BTreeSet<u32>,
    registry: &TextRegistry,
    fallback: impl FnOnce() -> Result<Option<(String, Option<u32>)>>,
) -> Result<EnsembleAnswer> {
    if let Some(&e) = pathpred_set.first() {
        return Ok(EnsembleAnswer {
            route: Route::PathPred,
            answer: Some(registry.entity(e)?.into()),
            entity: Some(e),
            set: pathpred_set,
        });
    }
    let fb = fallback()?;
    Ok(EnsembleAnswer {
        route: Route::Seq2Seq,
        entity: fb.as_ref().and_then(|x| x.1),
        answer: fb.map(|x| x.0),
        set: pathpred_set,
    })
}

/// Both hit conventions: the single answer by surface form, and (on the
/// PathPred route) set intersection with the gold ids.
pub fn qa_hits(ans: &EnsembleAnswer, ex: &QaExample, registry: &TextRegistry) -> (bool, bool) {
    let single = ans.answer.as_deref().is_some_and(|a| ex.is_correct(a));
    let set = match ans.route {
        Route::PathPred => crate::pathpred::set_hit(&ans.set, &crate::pathpred::answer_ids(ex, registry)),
        _ => single,
    };
    (single, set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::kg::{drop_edges, KnowledgeGraph, Triple};
    use crate::qa::QaSplit;
    use crate::textmap::MentionMode;
    use alloc::vec;

    fn split() -> KgSplit {
        let g = KnowledgeGraph::new(
            vec![Triple::new(0, 0, 1), Triple::new(0, 0, 2), Triple::new(0, 0, 3), Triple::new(4, 0, 5)],
            6,
            1,
        )
        .unwrap();
        drop_edges(&g, 0.0, 0).unwrap()
    }

    fn boom() -> Result<Vec<ScoredCandidate>> {
        Err(Error::Domain("not routed here".into()))
    }

    #[test]
    fn routing_rule() {
        let s = split();
        // (?,0,1) has only head 0, the gold
        assert_eq!(lp_route(&s, Query::head(0, 1), 0), Route::Seq2Seq);
        // (0,0,?) has 3 train answers
        assert_eq!(lp_route(&s, Query::tail(0, 0), 1), Route::Complex);
        // unseen anchor
        assert_eq!(lp_route(&s, Query::tail(5, 0), 1), Route::Seq2Seq);
    }

    #[test]
    fn unrouted_member_is_never_called() {
        let s = split();
        let (c, r) = lp_ensemble_candidates(&s, Query::tail(5, 0), 1, || Ok(vec![]), boom).unwrap();
        assert!(c.is_empty());
        assert_eq!(r, Some(Route::Seq2Seq));
        let (_, r) = lp_ensemble_candidates(&s, Query::tail(0, 0), 1, boom, || Ok(vec![])).unwrap();
        assert_eq!(r, Some(Route::Complex));
    }

    #[test]
    fn qa_fallback_rule() {
        let reg = TextRegistry::from_mentions(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["r".into()],
            MentionMode::SurfaceForm,
        )
        .unwrap();
        let ex = QaExample {
            question: "q".into(),
            topic: Some(0),
            answers: vec!["c".into()],
            split: QaSplit::Test,
        };
        let a = qa_ensemble_answer([2, 1].into_iter().collect(), &reg, || unreachable!()).unwrap();
        assert_eq!((a.route, a.entity), (Route::PathPred, Some(1)));
        // lowest id is wrong, the set still intersects
        assert_eq!(qa_hits(&a, &ex, &reg), (false, true));
        let b = qa_ensemble_answer(BTreeSet::new(), &reg, || Ok(Some(("c".into(), Some(2))))).unwrap();
        assert_eq!(b.route, Route::Seq2Seq);
        assert_eq!(qa_hits(&b, &ex, &reg), (true, true));
    }
}

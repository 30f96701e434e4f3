//! Relation-path baseline: questions are reduced to templates, each mapped
//! to its most frequent relation path between topic entity and answer.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::error::{domain, Error, Result};
use crate::kg::KnowledgeGraph;
use crate::qa::QaExample;
use crate::textmap::{normalize_text, TextRegistry};

pub const PLACEHOLDER: &str = "NE";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Template {
    pub base: String,
    pub hops: usize,
}

/// Byte offsets where `m` occurs in `q` not flanked by alphanumerics.
fn whole_matches(q: &str, m: &str) -> Vec<usize> {
    let word = |c: Option<char>| c.is_some_and(char::is_alphanumeric);
    q.match_indices(m)
        .map(|(i, _)| i)
        .filter(|&i| !word(q[..i].chars().next_back()) && !word(q[i + m.len()..].chars().next()))
        .collect()
}

/// Replaces the single whole-word occurrence of `topic_mention` with the
/// placeholder.
pub fn extract_template(question: &str, topic_mention: &str, hops: usize) -> Result<Template> {
    let q = normalize_text(question);
    let m = normalize_text(topic_mention);
    if m.is_empty() {
        return Err(domain("empty topic mention"));
    }
    let at = whole_matches(&q, &m);
    match at.len() {
        1 => Ok(Template {
            base: format!("{}{PLACEHOLDER}{}", &q[..at[0]], &q[at[0] + m.len()..]),
            hops,
        }),
        0 => Err(domain(format!("topic mention {m:?} not found in {q:?}"))),
        n => Err(domain(format!("topic mention {m:?} occurs {n} times in {q:?}"))),
    }
}

/// A relation traversed forwards (`+r`, subject to object) or inversely.
/// Forward sorts before inverse for the same relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SignedRel {
    pub relation: u32,
    pub inverse: bool,
}

impl SignedRel {
    pub fn fwd(relation: u32) -> Self {
        SignedRel { relation, inverse: false }
    }
    pub fn inv(relation: u32) -> Self {
        SignedRel { relation, inverse: true }
    }
}

pub type Path = Vec<SignedRel>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelPath {
    pub relations: Path,
    pub support: usize,
}

/// One hop from a set of entities along a signed relation.
pub fn step(kg: &KnowledgeGraph, from: &BTreeSet<u32>, r: SignedRel) -> BTreeSet<u32> {
    let mut out = BTreeSet::new();
    for &e in from {
        let next = if r.inverse { kg.heads(r.relation, e) } else { kg.tails(e, r.relation) };
        out.extend(next.iter().copied());
    }
    out
}

pub fn traverse(kg: &KnowledgeGraph, h: u32, path: &[SignedRel]) -> BTreeSet<u32> {
    let mut frontier = BTreeSet::new();
    frontier.insert(h);
    for &r in path {
        if frontier.is_empty() {
            break;
        }
        frontier = step(kg, &frontier, r);
    }
    frontier
}

fn signed_out(kg: &KnowledgeGraph, e: u32) -> BTreeSet<SignedRel> {
    kg.incident(e)
        .map(|t| if t.s == e { SignedRel::fwd(t.p) } else { SignedRel::inv(t.p) })
        .chain(kg.incident(e).filter(|t| t.s == e && t.o == e).map(|t| SignedRel::inv(t.p)))
        .collect()
}

/// Every distinct signed-relation sequence of length exactly `k` that leads
/// from `h` to `a`, sorted. Intermediate entities may repeat.
pub fn mine_paths(kg: &KnowledgeGraph, h: u32, a: u32, k: usize) -> Vec<Path> {
    if k == 0 || h as usize >= kg.num_entities() || a as usize >= kg.num_entities() {
        return Vec::new();
    }
    // prefix -> reachable set
    let mut layer: BTreeMap<Path, BTreeSet<u32>> = BTreeMap::new();
    layer.insert(Vec::new(), [h].into_iter().collect());
    for _ in 0..k {
        let mut next: BTreeMap<Path, BTreeSet<u32>> = BTreeMap::new();
        for (prefix, reach) in &layer {
            let rels: BTreeSet<SignedRel> = reach.iter().flat_map(|&e| signed_out(kg, e)).collect();
            for r in rels {
                let s = step(kg, reach, r);
                if !s.is_empty() {
                    let mut p = prefix.clone();
                    p.push(r);
                    next.insert(p, s);
                }
            }
        }
        layer = next;
    }
    layer.into_iter().filter(|(_, s)| s.contains(&a)).map(|(p, _)| p).collect()
}

/// Template to path table.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Mapping {
    pub paths: BTreeMap<Template, RelPath>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MappingStats {
    pub skipped: usize,
    pub unmapped_templates: usize,
}

impl Mapping {
    pub fn get(&self, t: &Template) -> Option<&RelPath> {
        self.paths.get(t)
    }
}

/// Resolves gold answer mentions to entity ids (lowest id per mention).
pub fn answer_ids(ex: &QaExample, registry: &TextRegistry) -> BTreeSet<u32> {
    ex.answers
        .iter()
        .filter_map(|a| registry.mention_to_entity(&normalize_text(a)))
        .collect()
}

/// Aggregates mined paths over all (template, topic, answer) tuples and
/// keeps the most supported path per template, ties to the smallest path.
pub fn build_mapping(
    qa_train: &[QaExample],
    kg: &KnowledgeGraph,
    registry: &TextRegistry,
    hops: usize,
) -> Result<(Mapping, MappingStats)> {
    let mut counts: BTreeMap<Template, BTreeMap<Path, usize>> = BTreeMap::new();
    let mut stats = MappingStats::default();
    for ex in qa_train {
        let Some(h) = ex.topic else {
            stats.skipped += 1;
            continue;
        };
        let t = match extract_template(&ex.question, registry.entity(h)?, hops) {
            Ok(t) => t,
            Err(e) => {
                log::warn!("skipping question: {e}");
                stats.skipped += 1;
                continue;
            }
        };
        let slot = counts.entry(t).or_default();
        for a in answer_ids(ex, registry) {
            for p in mine_paths(kg, h, a, hops) {
                *slot.entry(p).or_default() += 1;
            }
        }
    }
    let mut mapping = Mapping::default();
    for (t, paths) in counts {
        // BTreeMap iterates paths in ascending order, so `>` keeps the smallest on ties
        let mut best: Option<(&Path, usize)> = None;
        for (p, &c) in &paths {
            if best.is_none_or(|(_, bc)| c > bc) {
                best = Some((p, c));
            }
        }
        match best {
            Some((p, c)) => {
                mapping.paths.insert(
                    t,
                    RelPath {
                        relations: p.clone(),
                        support: c,
                    },
                );
            }
            None => stats.unmapped_templates += 1,
        }
    }
    Ok((mapping, stats))
}

/// Traverses the mapped path from `h`; empty when the template is unmapped
/// or the traversal breaks.
pub fn answer_pathpred(mapping: &Mapping, template: &Template, h: u32, kg: &KnowledgeGraph) -> BTreeSet<u32> {
    match mapping.get(template) {
        Some(p) if (h as usize) < kg.num_entities() => traverse(kg, h, &p.relations),
        _ => BTreeSet::new(),
    }
}

/// Answer set for a question, or empty when no template can be extracted.
pub fn answer_question(
    mapping: &Mapping,
    ex: &QaExample,
    registry: &TextRegistry,
    kg: &KnowledgeGraph,
    hops: usize,
) -> BTreeSet<u32> {
    let Some(h) = ex.topic else { return BTreeSet::new() };
    let Ok(m) = registry.entity(h) else { return BTreeSet::new() };
    match extract_template(&ex.question, m, hops) {
        Ok(t) => answer_pathpred(mapping, &t, h, kg),
        Err(_) => BTreeSet::new(),
    }
}

/// A question counts as answered when the set intersects the gold answers.
pub fn set_hit(set: &BTreeSet<u32>, gold: &BTreeSet<u32>) -> bool {
    set.intersection(gold).next().is_some()
}

/// Fraction of questions whose gold path, run on `kg`, reaches a gold answer.
pub fn gt_query_accuracy(
    examples: &[(QaExample, Path)],
    kg: &KnowledgeGraph,
    registry: &TextRegistry,
) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let ok = examples
        .iter()
        .filter(|(ex, p)| ex.topic.is_some_and(|h| set_hit(&traverse(kg, h, p), &answer_ids(ex, registry))))
        .count();
    ok as f64 / examples.len() as f64
}

// ---- text form ---------------------------------------------------------

/// `+name` or `-name`, names from the registry.
pub fn format_path(path: &[SignedRel], registry: &TextRegistry) -> Result<String> {
    let mut parts = Vec::with_capacity(path.len());
    for r in path {
        let sign = if r.inverse { '-' } else { '+' };
        parts.push(format!("{sign}{}", registry.relation(r.relation)?));
    }
    Ok(parts.join(","))
}

pub fn parse_path(text: &str, registry: &TextRegistry) -> Result<Path> {
    text.split(',')
        .map(|tok| {
            let tok = tok.trim();
            let (inverse, name) = match tok.chars().next() {
                Some('+') => (false, &tok[1..]),
                Some('-') => (true, &tok[1..]),
                Some('\u{2212}') => (true, &tok['\u{2212}'.len_utf8()..]),
                _ => return Err(domain(format!("path token {tok:?} needs a + or - sign"))),
            };
            let relation = registry.mention_to_relation(name).ok_or_else(|| Error::Resolution {
                line: 0,
                name: name.to_string(),
            })?;
            Ok(SignedRel { relation, inverse })
        })
        .collect()
}

impl fmt::Display for SignedRel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", if self.inverse { '-' } else { '+' }, self.relation)
    }
}

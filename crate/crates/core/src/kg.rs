//! Integer-id triple store with (s,p)/(p,o) indices, seeded edge dropping,
//! known-positive lookup and undirected neighbourhoods.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{domain, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub s: u32,
    pub p: u32,
    pub o: u32,
}

impl Triple {
    pub fn new(s: u32, p: u32, o: u32) -> Self {
        Triple { s, p, o }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    /// `(s, p, ?)`
    Tail,
    /// `(?, p, o)`
    Head,
}

/// A link-prediction query: the known entity, the relation and which side is missing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Query {
    pub anchor: u32,
    pub relation: u32,
    pub direction: Direction,
}

impl Query {
    pub fn tail(s: u32, p: u32) -> Self {
        Query {
            anchor: s,
            relation: p,
            direction: Direction::Tail,
        }
    }

    pub fn head(p: u32, o: u32) -> Self {
        Query {
            anchor: o,
            relation: p,
            direction: Direction::Head,
        }
    }

    /// The query and its gold answer for one side of a triple.
    pub fn from_triple(t: Triple, direction: Direction) -> (Self, u32) {
        match direction {
            Direction::Tail => (Query::tail(t.s, t.p), t.o),
            Direction::Head => (Query::head(t.p, t.o), t.s),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    triples: Vec<Triple>,
    by_sp: BTreeMap<(u32, u32), Vec<u32>>,
    by_po: BTreeMap<(u32, u32), Vec<u32>>,
    by_entity: Vec<Vec<u32>>,
    num_entities: usize,
    num_relations: usize,
    duplicates: usize,
}

impl KnowledgeGraph {
    /// Builds the indices. Duplicate triples are dropped (first occurrence
    /// wins) and counted in [`KnowledgeGraph::duplicates`].
    pub fn new(triples: Vec<Triple>, num_entities: usize, num_relations: usize) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut kept = Vec::with_capacity(triples.len());
        let mut duplicates = 0;
        for t in triples {
            if t.s as usize >= num_entities || t.o as usize >= num_entities {
                return Err(domain(format!(
                    "triple {t:?} has an entity outside [0, {num_entities})"
                )));
            }
            if t.p as usize >= num_relations {
                return Err(domain(format!(
                    "triple {t:?} has a relation outside [0, {num_relations})"
                )));
            }
            if seen.insert(t) {
                kept.push(t);
            } else {
                duplicates += 1;
            }
        }
        let mut by_sp: BTreeMap<(u32, u32), Vec<u32>> = BTreeMap::new();
        let mut by_po: BTreeMap<(u32, u32), Vec<u32>> = BTreeMap::new();
        let mut by_entity = vec![Vec::new(); num_entities];
        for (i, t) in kept.iter().enumerate() {
            by_sp.entry((t.s, t.p)).or_default().push(t.o);
            by_po.entry((t.p, t.o)).or_default().push(t.s);
            by_entity[t.s as usize].push(i as u32);
            if t.o != t.s {
                by_entity[t.o as usize].push(i as u32);
            }
        }
        for v in by_sp.values_mut().chain(by_po.values_mut()) {
            v.sort_unstable();
        }
        Ok(KnowledgeGraph {
            triples: kept,
            by_sp,
            by_po,
            by_entity,
            num_entities,
            num_relations,
            duplicates,
        })
    }

    pub fn empty(num_entities: usize, num_relations: usize) -> Self {
        KnowledgeGraph::new(Vec::new(), num_entities, num_relations).expect("empty graph")
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    /// Number of duplicate input triples dropped at construction.
    pub fn duplicates(&self) -> usize {
        self.duplicates
    }

    pub fn contains(&self, t: Triple) -> bool {
        self.tails(t.s, t.p).binary_search(&t.o).is_ok()
    }

    /// Sorted objects of `(s, p, ?)`.
    pub fn tails(&self, s: u32, p: u32) -> &[u32] {
        self.by_sp.get(&(s, p)).map_or(&[], |v| v.as_slice())
    }

    /// Sorted subjects of `(?, p, o)`.
    pub fn heads(&self, p: u32, o: u32) -> &[u32] {
        self.by_po.get(&(p, o)).map_or(&[], |v| v.as_slice())
    }

    pub fn answers(&self, q: Query) -> &[u32] {
        match q.direction {
            Direction::Tail => self.tails(q.anchor, q.relation),
            Direction::Head => self.heads(q.relation, q.anchor),
        }
    }

    /// Triples touching `e` on either side.
    pub fn incident(&self, e: u32) -> impl Iterator<Item = &Triple> + '_ {
        self.by_entity
            .get(e as usize)
            .into_iter()
            .flatten()
            .map(move |&i| &self.triples[i as usize])
    }

    /// Entities within `hops` undirected edges of `e`, including `e`.
    pub fn neighborhood(&self, e: u32, hops: usize) -> Result<BTreeSet<u32>> {
        if hops == 0 {
            return Err(domain("neighbourhood needs hops >= 1"));
        }
        if e as usize >= self.num_entities {
            return Err(domain(format!("unknown entity {e}")));
        }
        let mut seen = BTreeSet::new();
        seen.insert(e);
        let mut queue = VecDeque::new();
        queue.push_back((e, 0usize));
        while let Some((x, d)) = queue.pop_front() {
            if d == hops {
                continue;
            }
            for t in self.incident(x) {
                let y = if t.s == x { t.o } else { t.s };
                if seen.insert(y) {
                    queue.push_back((y, d + 1));
                }
            }
        }
        Ok(seen)
    }
}

/// Which splits contribute known positives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scope {
    pub train: bool,
    pub valid: bool,
    pub test: bool,
}

impl Scope {
    pub const TRAIN: Scope = Scope {
        train: true,
        valid: false,
        test: false,
    };
    pub const ALL: Scope = Scope {
        train: true,
        valid: true,
        test: true,
    };

    pub fn parse(s: &str) -> Result<Self> {
        let mut scope = Scope {
            train: false,
            valid: false,
            test: false,
        };
        for part in s.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "train" => scope.train = true,
                "valid" => scope.valid = true,
                "test" => scope.test = true,
                other => return Err(Error::Config(format!("unknown split {other:?} in scope"))),
            }
        }
        Ok(scope)
    }
}

impl core::fmt::Display for Scope {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let parts: Vec<&str> = [
            (self.train, "train"),
            (self.valid, "valid"),
            (self.test, "test"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        f.write_str(&parts.join("+"))
    }
}

/// Train/valid/test graphs over one id space.
#[derive(Debug, Clone, PartialEq)]
pub struct KgSplit {
    pub train: KnowledgeGraph,
    pub valid: KnowledgeGraph,
    pub test: KnowledgeGraph,
    pub seed: u64,
    pub fraction: f64,
}

impl KgSplit {
    /// Triples not kept for training, valid first.
    pub fn remainder(&self) -> impl Iterator<Item = &Triple> + '_ {
        self.valid.triples().iter().chain(self.test.triples())
    }

    pub fn known_positives(&self, q: Query, scope: Scope) -> BTreeSet<u32> {
        let mut out = BTreeSet::new();
        for (on, g) in [
            (scope.train, &self.train),
            (scope.valid, &self.valid),
            (scope.test, &self.test),
        ] {
            if on {
                out.extend(g.answers(q).iter().copied());
            }
        }
        out
    }

    /// Every triple of every split.
    pub fn full_graph(&self) -> KnowledgeGraph {
        let all: Vec<Triple> = self
            .train
            .triples()
            .iter()
            .chain(self.remainder())
            .copied()
            .collect();
        KnowledgeGraph::new(all, self.train.num_entities(), self.train.num_relations())
            .expect("split graphs share an id space")
    }
}

/// Keeps `⌈(1−fraction)·|K|⌉` uniformly chosen triples for training. The
/// dropped remainder is halved into valid (first `⌊r/2⌋`) and test. Each
/// part keeps the source order.
pub fn drop_edges(graph: &KnowledgeGraph, fraction: f64, seed: u64) -> Result<KgSplit> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("drop fraction {fraction} outside [0, 1]")));
    }
    let n = graph.len();
    let keep = libm::ceil((1.0 - fraction) * n as f64 - 1e-9).max(0.0) as usize;
    let keep = keep.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let rest = n - keep;
    let mut train_idx = order[..keep].to_vec();
    let mut valid_idx = order[keep..keep + rest / 2].to_vec();
    let mut test_idx = order[keep + rest / 2..].to_vec();
    let build = |idx: &mut Vec<usize>| {
        idx.sort_unstable();
        let ts = idx.iter().map(|&i| graph.triples()[i]).collect();
        KnowledgeGraph::new(ts, graph.num_entities(), graph.num_relations())
    };
    Ok(KgSplit {
        train: build(&mut train_idx)?,
        valid: build(&mut valid_idx)?,
        test: build(&mut test_idx)?,
        seed,
        fraction,
    })
}

/// How triple-file tokens become ids.
pub enum IdResolver<'a> {
    /// Tokens are names; ids are assigned densely in first-seen order.
    Dense,
    /// Tokens are decimal ids.
    Raw,
    /// Tokens must resolve through a lookup; misses are resolution errors.
    Strict {
        entity: &'a dyn Fn(&str) -> Option<u32>,
        relation: &'a dyn Fn(&str) -> Option<u32>,
        num_entities: usize,
        num_relations: usize,
    },
}

/// A parsed triple file.
#[derive(Debug, Clone)]
pub struct ParsedGraph {
    pub graph: KnowledgeGraph,
    /// Names in id order; only filled for [`IdResolver::Dense`].
    pub entity_names: Vec<String>,
    pub relation_names: Vec<String>,
}

/// Parses tab-separated `s p o` lines; `#` lines and blank lines are skipped.
pub fn parse_triples(text: &str, resolver: &IdResolver<'_>) -> Result<ParsedGraph> {
    let mut ent: BTreeMap<String, u32> = BTreeMap::new();
    let mut rel: BTreeMap<String, u32> = BTreeMap::new();
    let mut entity_names = Vec::new();
    let mut relation_names = Vec::new();
    let mut triples = Vec::new();
    let (mut max_e, mut max_r) = (0usize, 0usize);

    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let t = match resolver {
            IdResolver::Dense => {
                let intern = |map: &mut BTreeMap<String, u32>, names: &mut Vec<String>, k: &str| {
                    *map.entry(k.to_string()).or_insert_with(|| {
                        names.push(k.to_string());
                        names.len() as u32 - 1
                    })
                };
                let s = intern(&mut ent, &mut entity_names, fields[0]);
                let p = intern(&mut rel, &mut relation_names, fields[1]);
                let o = intern(&mut ent, &mut entity_names, fields[2]);
                Triple::new(s, p, o)
            }
            IdResolver::Raw => {
                let num = |f: &str| {
                    f.parse::<u32>().map_err(|_| Error::Parse {
                        line: line_no,
                        message: format!("{f:?} is not an integer id"),
                    })
                };
                let t = Triple::new(num(fields[0])?, num(fields[1])?, num(fields[2])?);
                max_e = max_e.max(t.s.max(t.o) as usize + 1);
                max_r = max_r.max(t.p as usize + 1);
                t
            }
            IdResolver::Strict {
                entity, relation, ..
            } => {
                let miss = |name: &str| Error::Resolution {
                    line: line_no,
                    name: name.to_string(),
                };
                Triple::new(
                    entity(fields[0]).ok_or_else(|| miss(fields[0]))?,
                    relation(fields[1]).ok_or_else(|| miss(fields[1]))?,
                    entity(fields[2]).ok_or_else(|| miss(fields[2]))?,
                )
            }
        };
        triples.push(t);
    }

    let (ne, nr) = match resolver {
        IdResolver::Dense => (entity_names.len(), relation_names.len()),
        IdResolver::Raw => (max_e, max_r),
        IdResolver::Strict {
            num_entities,
            num_relations,
            ..
        } => (*num_entities, *num_relations),
    };
    Ok(ParsedGraph {
        graph: KnowledgeGraph::new(triples, ne, nr)?,
        entity_names,
        relation_names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> KnowledgeGraph {
        KnowledgeGraph::new(vec![Triple::new(0, 0, 1), Triple::new(1, 0, 2)], 4, 1).unwrap()
    }

    #[test]
    fn parses_names_densely() {
        let p = parse_triples("a\tr\tb\nb\tr\tc\n", &IdResolver::Dense).unwrap();
        assert_eq!(p.graph.num_entities(), 3);
        assert_eq!(p.graph.num_relations(), 1);
        assert_eq!(p.graph.len(), 2);
        assert_eq!(p.entity_names, ["a", "b", "c"]);
    }

    #[test]
    fn empty_file_gives_empty_graph() {
        let p = parse_triples("", &IdResolver::Dense).unwrap();
        assert_eq!(p.graph.len(), 0);
        assert_eq!(p.graph.num_entities(), 0);
    }

    #[test]
    fn duplicate_lines_are_counted_once() {
        let text = "# comment\na\tr\tb\na\tr\tb\nb\tr\ta\n";
        let p = parse_triples(text, &IdResolver::Dense).unwrap();
        let oracle: BTreeSet<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(p.graph.len(), oracle.len());
        assert_eq!(p.graph.duplicates(), 1);
    }

    #[test]
    fn malformed_line_names_its_number() {
        let err = parse_triples("a\tr\tb\na\tr\n", &IdResolver::Dense).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn strict_resolver_reports_unknown_names() {
        let e = |s: &str| (s == "a").then_some(0);
        let r = |s: &str| (s == "r").then_some(0);
        let res = IdResolver::Strict {
            entity: &e,
            relation: &r,
            num_entities: 1,
            num_relations: 1,
        };
        let err = parse_triples("a\tr\tzz\n", &res).unwrap_err();
        assert_eq!(
            err,
            Error::Resolution {
                line: 1,
                name: "zz".into()
            }
        );
    }

    #[test]
    fn raw_ids_set_counts() {
        let p = parse_triples("0\t1\t5\n", &IdResolver::Raw).unwrap();
        assert_eq!((p.graph.num_entities(), p.graph.num_relations()), (6, 2));
    }

    #[test]
    fn zero_fraction_keeps_everything() {
        let g = chain();
        let s = drop_edges(&g, 0.0, 3).unwrap();
        assert_eq!(s.train.triples(), g.triples());
        assert_eq!(s.remainder().count(), 0);
    }

    #[test]
    fn half_drop_keeps_ceiling() {
        let triples: Vec<Triple> = (0..70).map(|i| Triple::new(i, 0, (i + 1) % 101)).collect();
        let g = KnowledgeGraph::new(triples, 101, 1).unwrap();
        let s = drop_edges(&g, 0.5, 1).unwrap();
        assert_eq!(s.train.len(), 35);
        let g7 = KnowledgeGraph::new(g.triples()[..7].to_vec(), 101, 1).unwrap();
        assert_eq!(drop_edges(&g7, 0.5, 1).unwrap().train.len(), 4);
        assert_eq!(drop_edges(&g, 0.5, 1).unwrap(), s);
    }

    #[test]
    fn known_positives_lookup() {
        let train = KnowledgeGraph::new(vec![Triple::new(0, 0, 1), Triple::new(0, 0, 2)], 4, 1).unwrap();
        let split = KgSplit {
            train,
            valid: KnowledgeGraph::empty(4, 1),
            test: KnowledgeGraph::empty(4, 1),
            seed: 0,
            fraction: 0.0,
        };
        let got = split.known_positives(Query::tail(0, 0), Scope::TRAIN);
        assert_eq!(got.into_iter().collect::<Vec<_>>(), [1, 2]);
        assert!(split.known_positives(Query::tail(3, 0), Scope::ALL).is_empty());
    }

    #[test]
    fn neighbourhoods() {
        let g = chain();
        assert_eq!(g.neighborhood(3, 1).unwrap().into_iter().collect::<Vec<_>>(), [3]);
        assert_eq!(g.neighborhood(0, 2).unwrap().into_iter().collect::<Vec<_>>(), [0, 1, 2]);
        assert_eq!(g.neighborhood(2, 1).unwrap().into_iter().collect::<Vec<_>>(), [1, 2]);
        assert!(g.neighborhood(9, 1).is_err());
        assert!(g.neighborhood(0, 0).is_err());
    }

    #[test]
    fn scope_round_trips_through_text() {
        assert_eq!(Scope::parse("train+valid+test").unwrap(), Scope::ALL);
        assert_eq!(Scope::ALL.to_string(), "train+valid+test");
        assert!(Scope::parse("dev").is_err());
    }
}

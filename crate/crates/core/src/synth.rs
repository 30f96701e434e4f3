//! Synthetic benchmarks that need no downloads.
//!
//! `grid_kg` builds coloured rows of numbered items plus hubs. Some
//! relations follow from the names ("opposite of" keeps the number and swaps
//! the colour), while hub membership is random and has a large fan-in.
//!
//! `movie_qa` builds a small film graph with templated one-hop questions
//! whose generating relation paths are known.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config, Result};
use crate::kg::{KnowledgeGraph, Triple};
use crate::pathpred::{Path, SignedRel, PLACEHOLDER};
use crate::qa::{QaExample, QaSplit};
use crate::textmap::NameTable;

pub struct SynthKg {
    pub graph: KnowledgeGraph,
    pub entities: NameTable,
    pub relations: NameTable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub colours: Vec<String>,
    pub items: usize,
    pub hubs: Vec<String>,
    /// Items within this distance in a row are "next to" each other.
    pub span: usize,
    pub seed: u64,
}

impl Default for GridConfig {
    /// 64 entities, 4 relations, 534 triples.
    fn default() -> Self {
        GridConfig {
            colours: ["red", "blue"].map(String::from).to_vec(),
            items: 31,
            hubs: ["north hub", "south hub"].map(String::from).to_vec(),
            span: 3,
            seed: 0,
        }
    }
}

pub const NEXT_TO: u32 = 0;
pub const OPPOSITE_OF: u32 = 1;
pub const ACROSS_FROM: u32 = 2;
pub const MEMBER_OF: u32 = 3;

pub fn grid_kg(cfg: &GridConfig) -> Result<SynthKg> {
    if cfg.colours.is_empty() || cfg.items == 0 || cfg.hubs.is_empty() {
        return Err(config("grid needs colours, items and hubs"));
    }
    let n_items = cfg.colours.len() * cfg.items;
    let id = |c: usize, i: usize| (c * cfg.items + i) as u32;
    let mut names: Vec<String> = Vec::with_capacity(n_items + cfg.hubs.len());
    for c in &cfg.colours {
        for i in 1..=cfg.items {
            names.push(format!("{c} {i}"));
        }
    }
    names.extend(cfg.hubs.iter().cloned());
    let mut t = Vec::new();
    for c in 0..cfg.colours.len() {
        for i in 0..cfg.items {
            for j in 0..cfg.items {
                if i != j && i.abs_diff(j) <= cfg.span {
                    t.push(Triple::new(id(c, i), NEXT_TO, id(c, j)));
                }
            }
        }
    }
    // each colour pairs with the next one cyclically
    let nc = cfg.colours.len();
    if nc > 1 {
        for c in 0..nc {
            let d = (c + 1) % nc;
            if nc == 2 && c == 1 {
                // the pair (0, 1) was emitted in both directions already
                break;
            }
            for i in 0..cfg.items {
                let mirror = cfg.items - 1 - i;
                t.push(Triple::new(id(c, i), OPPOSITE_OF, id(d, i)));
                t.push(Triple::new(id(d, i), OPPOSITE_OF, id(c, i)));
                t.push(Triple::new(id(c, i), ACROSS_FROM, id(d, mirror)));
                t.push(Triple::new(id(d, mirror), ACROSS_FROM, id(c, i)));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for e in 0..n_items {
        let h = rng.random_range(0..cfg.hubs.len());
        t.push(Triple::new(e as u32, MEMBER_OF, (n_items + h) as u32));
    }
    let rels = ["next to", "opposite of", "across from", "member of"];
    Ok(SynthKg {
        graph: KnowledgeGraph::new(t, names.len(), rels.len())?,
        entities: NameTable::from_names(&names),
        relations: NameTable::from_names(&rels),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MovieConfig {
    pub films: usize,
    pub directors: usize,
    pub actors: usize,
    pub genres: usize,
    pub cast_size: usize,
    /// Fractions of questions for train and valid; the rest is test.
    pub train_frac: f64,
    pub valid_frac: f64,
    pub seed: u64,
}

impl Default for MovieConfig {
    fn default() -> Self {
        MovieConfig {
            films: 24,
            directors: 8,
            actors: 16,
            genres: 4,
            cast_size: 2,
            train_frac: 0.6,
            valid_frac: 0.2,
            seed: 0,
        }
    }
}

pub const DIRECTED_BY: u32 = 0;
pub const STARRING: u32 = 1;
pub const HAS_GENRE: u32 = 2;

/// A question template with the path that generates its answers.
#[derive(Debug, Clone, PartialEq)]
pub struct QaTemplate {
    /// Contains the placeholder once.
    pub text: String,
    pub path: Path,
}

pub fn movie_templates() -> Vec<QaTemplate> {
    let t = |text: &str, path: Path| QaTemplate {
        text: text.replace("{}", PLACEHOLDER),
        path,
    };
    alloc::vec![
        t("who directed {}", alloc::vec![SignedRel::fwd(DIRECTED_BY)]),
        t("which films did {} direct", alloc::vec![SignedRel::inv(DIRECTED_BY)]),
        t("who acted in {}", alloc::vec![SignedRel::fwd(STARRING)]),
        t("which films did {} act in", alloc::vec![SignedRel::inv(STARRING)]),
        t("what is the genre of {}", alloc::vec![SignedRel::fwd(HAS_GENRE)]),
    ]
}

pub struct SynthQa {
    pub kg: SynthKg,
    /// Every question with the path that generated it.
    pub questions: Vec<(QaExample, Path)>,
    pub templates: Vec<QaTemplate>,
}

impl SynthQa {
    pub fn split(&self, s: QaSplit) -> Vec<QaExample> {
        self.questions
            .iter()
            .filter(|(q, _)| q.split == s)
            .map(|(q, _)| q.clone())
            .collect()
    }
}

pub fn movie_qa(cfg: &MovieConfig) -> Result<SynthQa> {
    if cfg.films == 0 || cfg.directors == 0 || cfg.actors < cfg.cast_size || cfg.genres == 0 {
        return Err(config("movie graph sizes are inconsistent"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut names = Vec::new();
    names.extend((1..=cfg.films).map(|i| format!("film {i}")));
    names.extend((1..=cfg.directors).map(|i| format!("director {i}")));
    names.extend((1..=cfg.actors).map(|i| format!("actor {i}")));
    names.extend((1..=cfg.genres).map(|i| format!("genre {i}")));
    let dir0 = cfg.films;
    let act0 = dir0 + cfg.directors;
    let gen0 = act0 + cfg.actors;
    let mut t = Vec::new();
    let mut actors: Vec<usize> = (0..cfg.actors).collect();
    for f in 0..cfg.films {
        let fid = f as u32;
        // every director gets at least one film when possible
        let d = if f < cfg.directors { f } else { rng.random_range(0..cfg.directors) };
        t.push(Triple::new(fid, DIRECTED_BY, (dir0 + d) as u32));
        actors.shuffle(&mut rng);
        for &a in &actors[..cfg.cast_size] {
            t.push(Triple::new(fid, STARRING, (act0 + a) as u32));
        }
        t.push(Triple::new(fid, HAS_GENRE, (gen0 + rng.random_range(0..cfg.genres)) as u32));
    }
    let graph = KnowledgeGraph::new(t, names.len(), 3)?;
    let templates = movie_templates();
    let mut questions = Vec::new();
    for tpl in &templates {
        let topics = match tpl.path[0] {
            r if !r.inverse => 0..cfg.films,
            r if r.relation == DIRECTED_BY => dir0..act0,
            _ => act0..gen0,
        };
        for h in topics {
            let answers = crate::pathpred::traverse(&graph, h as u32, &tpl.path);
            if answers.is_empty() {
                continue;
            }
            let ex = QaExample {
                question: tpl.text.replace(PLACEHOLDER, &names[h]),
                topic: Some(h as u32),
                answers: answers.iter().map(|&a| names[a as usize].clone()).collect(),
                split: QaSplit::Train,
            };
            questions.push((ex, tpl.path.clone()));
        }
    }
    questions.shuffle(&mut rng);
    let n = questions.len();
    let n_train = libm::round(cfg.train_frac * n as f64) as usize;
    let n_valid = libm::round(cfg.valid_frac * n as f64) as usize;
    for (i, (q, _)) in questions.iter_mut().enumerate() {
        q.split = if i < n_train {
            QaSplit::Train
        } else if i < n_train + n_valid {
            QaSplit::Valid
        } else {
            QaSplit::Test
        };
    }
    let rels = ["directed by", "starring", "has genre"].map(ToString::to_string);
    Ok(SynthQa {
        kg: SynthKg {
            graph,
            entities: NameTable::from_names(&names),
            relations: NameTable::from_names(&rels),
        },
        questions,
        templates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_shape() {
        let g = grid_kg(&GridConfig::default()).unwrap();
        assert_eq!(g.graph.num_entities(), 64);
        assert_eq!(g.graph.num_relations(), 4);
        assert_eq!(g.graph.len(), 534);
        assert_eq!(g.graph.duplicates(), 0);
        // red 1 is opposite blue 1 and across from blue 31
        assert!(g.graph.contains(Triple::new(0, OPPOSITE_OF, 31)));
        assert!(g.graph.contains(Triple::new(0, ACROSS_FROM, 61)));
        let fan_in: usize = [62u32, 63].iter().map(|&h| g.graph.heads(MEMBER_OF, h).len()).sum();
        assert_eq!(fan_in, 62);
    }

    #[test]
    fn movie_questions_follow_their_paths() {
        let qa = movie_qa(&MovieConfig::default()).unwrap();
        assert!(qa.questions.len() > 50);
        for (q, p) in &qa.questions {
            let got = crate::pathpred::traverse(&qa.kg.graph, q.topic.unwrap(), p);
            assert_eq!(got.len(), q.answers.len());
        }
        let n = |s| qa.split(s).len();
        assert_eq!(n(QaSplit::Train) + n(QaSplit::Valid) + n(QaSplit::Test), qa.questions.len());
    }

    #[test]
    fn generators_are_seeded() {
        let a = movie_qa(&MovieConfig::default()).unwrap();
        let b = movie_qa(&MovieConfig::default()).unwrap();
        assert_eq!(a.questions, b.questions);
        let c = grid_kg(&GridConfig { seed: 3, ..GridConfig::default() }).unwrap();
        let d = grid_kg(&GridConfig { seed: 3, ..GridConfig::default() }).unwrap();
        assert_eq!(c.graph.triples(), d.graph.triples());
    }
}

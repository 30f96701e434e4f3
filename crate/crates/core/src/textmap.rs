//! Entity and relation mentions, disambiguation, and verbalisation of
//! link-prediction and QA inputs.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use unicode_normalization::UnicodeNormalization;

use crate::error::{domain, Result};
use crate::kg::{Direction, KnowledgeGraph, Query};

pub const SEPARATOR: &str = " | ";
pub const TAIL_PREFIX: &str = "predict tail: ";
pub const HEAD_PREFIX: &str = "predict head: ";
pub const ANSWER_PREFIX: &str = "predict answer: ";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MentionMode {
    /// Mentions are unique; disambiguation is applied.
    OneToOne,
    /// Mentions are surface forms and may collide.
    SurfaceForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    PredictTail,
    PredictHead,
    PredictAnswer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerbalizedExample {
    pub input: String,
    pub target: String,
    pub kind: TaskKind,
}

/// Trims, collapses runs of whitespace to one space and applies NFC.
pub fn normalize_text(s: &str) -> String {
    let joined = s.split_whitespace().collect::<Vec<_>>().join(" ");
    joined.nfc().collect()
}

fn nfc(s: &str) -> String {
    s.nfc().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextRegistry {
    entity_mentions: Vec<String>,
    relation_mentions: Vec<String>,
    entity_reverse: BTreeMap<String, u32>,
    relation_reverse: BTreeMap<String, u32>,
    mode: MentionMode,
}

/// Names (and optional descriptions) for one id space.
#[derive(Debug, Clone, Default)]
pub struct NameTable {
    pub names: Vec<String>,
    pub descriptions: Vec<Option<String>>,
}

impl NameTable {
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Self {
        NameTable {
            names: names.iter().map(|s| s.as_ref().to_string()).collect(),
            descriptions: Vec::new(),
        }
    }

    fn description(&self, i: usize) -> Option<&str> {
        self.descriptions
            .get(i)
            .and_then(|d| d.as_deref())
            .filter(|d| !d.trim().is_empty())
    }
}

fn check_text(kind: &str, id: usize, s: &str) -> Result<()> {
    if s.contains(SEPARATOR) || s.contains('\t') || s.contains('\n') || s.contains('\r') {
        return Err(domain(format!(
            "{kind} {id} text {s:?} contains a tab, newline or the reserved separator"
        )));
    }
    Ok(())
}

/// Mentions for one id space plus any warnings raised while building them.
fn build_mentions(
    kind: &str,
    table: &NameTable,
    mode: MentionMode,
    warnings: &mut Vec<String>,
) -> Result<Vec<String>> {
    let mut names = Vec::with_capacity(table.names.len());
    for (i, raw) in table.names.iter().enumerate() {
        check_text(kind, i, raw)?;
        if let Some(d) = table.description(i) {
            check_text(kind, i, d)?;
        }
        if raw.trim().is_empty() {
            warnings.push(format!("{kind} {i} has an empty name"));
            names.push(format!("{kind} {i}"));
        } else {
            names.push(raw.clone());
        }
    }
    if mode == MentionMode::SurfaceForm {
        return Ok(names);
    }

    let mut group: BTreeMap<String, usize> = BTreeMap::new();
    for n in &names {
        *group.entry(nfc(n)).or_default() += 1;
    }
    let cand: Vec<String> = names
        .iter()
        .enumerate()
        .map(|(i, n)| match table.description(i) {
            Some(d) if group[&nfc(n)] > 1 => format!("{n}{SEPARATOR}{d}"),
            _ => n.clone(),
        })
        .collect();
    let keys: Vec<String> = cand.iter().map(|c| nfc(c)).collect();
    let mut count: BTreeMap<&str, usize> = BTreeMap::new();
    for k in &keys {
        *count.entry(k.as_str()).or_default() += 1;
    }
    let reserved: BTreeSet<&str> = count.keys().copied().collect();

    let mut used: BTreeSet<String> = keys
        .iter()
        .filter(|k| count[k.as_str()] == 1)
        .cloned()
        .collect();
    let mut out = cand.clone();
    for i in 0..cand.len() {
        if count[keys[i].as_str()] == 1 {
            continue;
        }
        if used.insert(keys[i].clone()) {
            continue;
        }
        let mut k = 1usize;
        loop {
            let m = format!("{}{SEPARATOR}{k}", cand[i]);
            let key = nfc(&m);
            if !reserved.contains(key.as_str()) && !used.contains(&key) {
                used.insert(key);
                out[i] = m;
                break;
            }
            k += 1;
        }
    }
    Ok(out)
}

fn reverse_of(mentions: &[String]) -> BTreeMap<String, u32> {
    let mut rev = BTreeMap::new();
    for (i, m) in mentions.iter().enumerate() {
        rev.entry(nfc(m)).or_insert(i as u32);
    }
    rev
}

impl TextRegistry {
    /// Builds mentions for entities and relations. Returns the registry and
    /// warnings (empty names replaced by `"entity <id>"`).
    pub fn build(
        entities: &NameTable,
        relations: &NameTable,
        mode: MentionMode,
    ) -> Result<(Self, Vec<String>)> {
        let mut warnings = Vec::new();
        let entity_mentions = build_mentions("entity", entities, mode, &mut warnings)?;
        let relation_mentions = build_mentions("relation", relations, mode, &mut warnings)?;
        Ok((
            TextRegistry {
                entity_reverse: reverse_of(&entity_mentions),
                relation_reverse: reverse_of(&relation_mentions),
                entity_mentions,
                relation_mentions,
                mode,
            },
            warnings,
        ))
    }

    /// Uses the given mentions verbatim. One-to-one mode rejects collisions.
    pub fn from_mentions(
        entity_mentions: Vec<String>,
        relation_mentions: Vec<String>,
        mode: MentionMode,
    ) -> Result<Self> {
        let reg = TextRegistry {
            entity_reverse: reverse_of(&entity_mentions),
            relation_reverse: reverse_of(&relation_mentions),
            entity_mentions,
            relation_mentions,
            mode,
        };
        if mode == MentionMode::OneToOne
            && (reg.entity_reverse.len() != reg.entity_mentions.len()
                || reg.relation_reverse.len() != reg.relation_mentions.len())
        {
            return Err(domain("one-to-one registry has colliding mentions"));
        }
        Ok(reg)
    }

    pub fn mode(&self) -> MentionMode {
        self.mode
    }

    pub fn num_entities(&self) -> usize {
        self.entity_mentions.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relation_mentions.len()
    }

    pub fn entity_mentions(&self) -> &[String] {
        &self.entity_mentions
    }

    pub fn relation_mentions(&self) -> &[String] {
        &self.relation_mentions
    }

    pub fn entity(&self, id: u32) -> Result<&str> {
        self.entity_mentions
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| domain(format!("entity {id} is not registered")))
    }

    pub fn relation(&self, id: u32) -> Result<&str> {
        self.relation_mentions
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| domain(format!("relation {id} is not registered")))
    }

    /// Exact lookup after NFC; the lowest id wins among surface-form collisions.
    pub fn mention_to_entity(&self, mention: &str) -> Option<u32> {
        self.entity_reverse.get(&nfc(mention)).copied()
    }

    pub fn mention_to_relation(&self, mention: &str) -> Option<u32> {
        self.relation_reverse.get(&nfc(mention)).copied()
    }

    /// The same registry with surface-form lookup semantics.
    pub fn as_surface_form(&self) -> TextRegistry {
        TextRegistry {
            mode: MentionMode::SurfaceForm,
            ..self.clone()
        }
    }

    pub fn verbalize_lp(&self, q: Query) -> Result<String> {
        let prefix = match q.direction {
            Direction::Tail => TAIL_PREFIX,
            Direction::Head => HEAD_PREFIX,
        };
        Ok(format!(
            "{prefix}{}{SEPARATOR}{}",
            self.entity(q.anchor)?,
            self.relation(q.relation)?
        ))
    }

    /// Both verbalised examples of a triple, tail first.
    pub fn lp_examples(&self, t: crate::kg::Triple) -> Result<[VerbalizedExample; 2]> {
        let ex = |d: Direction, kind| -> Result<VerbalizedExample> {
            let (q, gold) = Query::from_triple(t, d);
            Ok(VerbalizedExample {
                input: self.verbalize_lp(q)?,
                target: self.entity(gold)?.to_string(),
                kind,
            })
        };
        Ok([
            ex(Direction::Tail, TaskKind::PredictTail)?,
            ex(Direction::Head, TaskKind::PredictHead)?,
        ])
    }

    /// `input\ttarget` lines, two per triple, for tokenizer training.
    pub fn lp_corpus(&self, graph: &KnowledgeGraph) -> Result<Vec<(String, String)>> {
        let mut out = Vec::with_capacity(2 * graph.len());
        for &t in graph.triples() {
            for ex in self.lp_examples(t)? {
                out.push((ex.input, ex.target));
            }
        }
        Ok(out)
    }
}

pub fn verbalize_qa(question: &str) -> Result<String> {
    let q = normalize_text(question);
    if q.is_empty() {
        return Err(domain("empty question"));
    }
    Ok(format!("{ANSWER_PREFIX}{q}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn reg(names: &[&str], desc: Vec<Option<String>>) -> TextRegistry {
        let ents = NameTable {
            names: names.iter().map(|s| s.to_string()).collect(),
            descriptions: desc,
        };
        TextRegistry::build(&ents, &NameTable::from_names(&["born in"]), MentionMode::OneToOne)
            .unwrap()
            .0
    }

    #[test]
    fn description_breaks_a_collision() {
        let r = reg(&["Bensi", "Bensi"], vec![Some("family name".into()), None]);
        assert_eq!(r.entity_mentions(), ["Bensi | family name", "Bensi"]);
    }

    #[test]
    fn integer_suffixes_in_id_order() {
        let r = reg(&["X", "X", "X"], vec![]);
        assert_eq!(r.entity_mentions(), ["X", "X | 1", "X | 2"]);
    }

    #[test]
    fn suffix_skips_mentions_already_taken() {
        // the description of id 2 already produces "X | 1"
        let r = reg(&["X", "X", "X"], vec![None, None, Some("1".into())]);
        assert_eq!(r.entity_mentions(), ["X", "X | 2", "X | 1"]);
    }

    #[test]
    fn unique_names_are_verbatim() {
        let r = reg(&["a", "b"], vec![]);
        assert_eq!(r.entity_mentions(), ["a", "b"]);
    }

    #[test]
    fn empty_name_is_substituted_with_a_warning() {
        let ents = NameTable::from_names(&["", "b"]);
        let (r, w) = TextRegistry::build(&ents, &NameTable::from_names(&["r"]), MentionMode::OneToOne).unwrap();
        assert_eq!(r.entity(0).unwrap(), "entity 0");
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn separator_in_a_name_is_rejected() {
        let ents = NameTable::from_names(&["a | b"]);
        assert!(TextRegistry::build(&ents, &NameTable::default(), MentionMode::OneToOne).is_err());
        let ents = NameTable::from_names(&["a\tb"]);
        assert!(TextRegistry::build(&ents, &NameTable::default(), MentionMode::SurfaceForm).is_err());
    }

    #[test]
    fn surface_form_keeps_collisions_and_returns_lowest_id() {
        let ents = NameTable::from_names(&["x", "y", "x"]);
        let (r, _) = TextRegistry::build(&ents, &NameTable::default(), MentionMode::SurfaceForm).unwrap();
        assert_eq!(r.entity_mentions(), ["x", "y", "x"]);
        assert_eq!(r.mention_to_entity("x"), Some(0));
    }

    #[test]
    fn verbalizes_both_directions() {
        let ents = NameTable::from_names(&["barack obama", "united states"]);
        let (r, _) = TextRegistry::build(&ents, &NameTable::from_names(&["born in"]), MentionMode::OneToOne).unwrap();
        assert_eq!(r.verbalize_lp(Query::tail(0, 0)).unwrap(), "predict tail: barack obama | born in");
        assert_eq!(r.verbalize_lp(Query::head(0, 1)).unwrap(), "predict head: united states | born in");
        assert!(r.verbalize_lp(Query::tail(5, 0)).is_err());
        assert_eq!(r.mention_to_entity("united states"), Some(1));
        assert_eq!(r.mention_to_entity("not an entity at all"), None);
    }

    #[test]
    fn qa_inputs_are_normalised() {
        assert_eq!(verbalize_qa("who directed Inception").unwrap(), "predict answer: who directed Inception");
        assert_eq!(verbalize_qa("  who   directed Inception ").unwrap(), "predict answer: who directed Inception");
        let q = "what movies did NE act in".replace("NE", "Brad Pitt");
        assert_eq!(verbalize_qa(&q).unwrap(), "predict answer: what movies did Brad Pitt act in");
        assert!(verbalize_qa("   ").is_err());
    }

    #[test]
    fn lookup_is_nfc_insensitive() {
        let composed = "caf\u{e9}";
        let decomposed = "cafe\u{301}";
        let (r, _) = TextRegistry::build(
            &NameTable::from_names(&[composed]),
            &NameTable::default(),
            MentionMode::OneToOne,
        )
        .unwrap();
        assert_eq!(r.mention_to_entity(decomposed), Some(0));
    }
}

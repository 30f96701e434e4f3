//! On-disk formats. Text formats are UTF-8 with tab-separated fields;
//! binary formats are little-endian with a magic tag and version.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use kgseq_core::bpe::{BpeVocab, Merge, MARKER};
use kgseq_core::complex::ComplexModel;
use kgseq_core::kg::{parse_triples, IdResolver, KgSplit, KnowledgeGraph, Triple};
use kgseq_core::lp::{format_metrics, Bucket, LpReport};
use kgseq_core::model::{ModelConfig, ModelState, Seq2Seq};
use kgseq_core::optim::AdamState;
use kgseq_core::pathpred::{format_path, parse_path, Mapping, RelPath, Template};
use kgseq_core::qa::{QaExample, QaSplit};
use kgseq_core::textmap::{MentionMode, NameTable, TextRegistry};
use kgseq_core::{Precision, Real, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{AppError, AppResult};

pub fn read_text(path: &Path) -> AppResult<String> {
    fs::read_to_string(path).map_err(|e| AppError::io(path, e))
}

/// Writes through a temporary file so readers never see partial output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> AppResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| AppError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| AppError::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> AppResult<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| AppError::io(path, e))?))
}

fn data_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> AppError {
    AppError::Data(format!("{}:{line}: {msg}", path.display()))
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

// ---- names and triples ---------------------------------------------------

/// `id \t name [\t description]`, ids dense from 0.
pub fn read_names(path: &Path) -> AppResult<NameTable> {
    let text = read_text(path)?;
    let mut names = Vec::new();
    let mut descriptions = Vec::new();
    for (no, line) in lines(&text) {
        let f: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&f.len()) {
            return Err(data_err(path, no, "expected id, name and optional description"));
        }
        let id: usize = f[0].parse().map_err(|_| data_err(path, no, format!("bad id {:?}", f[0])))?;
        if id != names.len() {
            return Err(data_err(path, no, format!("ids must be dense and ordered, expected {}", names.len())));
        }
        names.push(f[1].to_string());
        descriptions.push(f.get(2).filter(|d| !d.is_empty()).map(|d| d.to_string()));
    }
    Ok(NameTable { names, descriptions })
}

pub fn names_text(t: &NameTable) -> String {
    let mut s = String::new();
    for (i, n) in t.names.iter().enumerate() {
        match t.descriptions.get(i).and_then(|d| d.as_deref()) {
            Some(d) => writeln!(s, "{i}\t{n}\t{d}").unwrap(),
            None => writeln!(s, "{i}\t{n}").unwrap(),
        }
    }
    s
}

pub fn write_names(path: &Path, t: &NameTable) -> AppResult<()> {
    write_atomic(path, names_text(t).as_bytes())
}

/// `s \t p \t o` as integer ids, checked against the declared counts.
pub fn read_triples(path: &Path, num_entities: usize, num_relations: usize) -> AppResult<KnowledgeGraph> {
    let text = read_text(path)?;
    let ent = move |s: &str| s.parse::<u32>().ok().filter(|&x| (x as usize) < num_entities);
    let rel = move |s: &str| s.parse::<u32>().ok().filter(|&x| (x as usize) < num_relations);
    let parsed = parse_triples(
        &text,
        &IdResolver::Strict {
            entity: &ent,
            relation: &rel,
            num_entities,
            num_relations,
        },
    )
    .map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
    if parsed.graph.duplicates() > 0 {
        log::warn!("{}: {} duplicate triples dropped", path.display(), parsed.graph.duplicates());
    }
    Ok(parsed.graph)
}

pub fn triples_text(triples: &[Triple]) -> String {
    let mut s = String::with_capacity(triples.len() * 12);
    for t in triples {
        writeln!(s, "{}\t{}\t{}", t.s, t.p, t.o).unwrap();
    }
    s
}

pub fn write_triples(path: &Path, triples: &[Triple]) -> AppResult<()> {
    write_atomic(path, triples_text(triples).as_bytes())
}

/// Counts, seed and content hashes of the three split files.
pub fn split_manifest(split: &KgSplit) -> String {
    let mut s = String::from("kgseq-split 1\n");
    writeln!(s, "fraction\t{}", split.fraction).unwrap();
    writeln!(s, "seed\t{}", split.seed).unwrap();
    writeln!(s, "entities\t{}", split.train.num_entities()).unwrap();
    writeln!(s, "relations\t{}", split.train.num_relations()).unwrap();
    for (name, g) in [("train", &split.train), ("valid", &split.valid), ("test", &split.test)] {
        writeln!(s, "{name}\t{}\t{}", g.len(), sha256_hex(triples_text(g.triples()).as_bytes())).unwrap();
    }
    s
}

// ---- registry --------------------------------------------------------------
//
// First line `mode \t one-to-one|surface-form`, then `e \t id \t mention`
// and `r \t id \t mention` lines.

pub fn registry_text(reg: &TextRegistry) -> String {
    let mode = match reg.mode() {
        MentionMode::OneToOne => "one-to-one",
        MentionMode::SurfaceForm => "surface-form",
    };
    let mut s = format!("mode\t{mode}\n");
    for (i, m) in reg.entity_mentions().iter().enumerate() {
        writeln!(s, "e\t{i}\t{m}").unwrap();
    }
    for (i, m) in reg.relation_mentions().iter().enumerate() {
        writeln!(s, "r\t{i}\t{m}").unwrap();
    }
    s
}

pub fn parse_mode(s: &str) -> Option<MentionMode> {
    match s {
        "one-to-one" => Some(MentionMode::OneToOne),
        "surface-form" => Some(MentionMode::SurfaceForm),
        _ => None,
    }
}

pub fn read_registry(path: &Path) -> AppResult<TextRegistry> {
    let text = read_text(path)?;
    let mut mode = None;
    let (mut ents, mut rels) = (Vec::new(), Vec::new());
    for (no, line) in lines(&text) {
        let f: Vec<&str> = line.splitn(3, '\t').collect();
        match (f.first(), f.len()) {
            (Some(&"mode"), 2) => mode = parse_mode(f[1]),
            (Some(&k @ ("e" | "r")), 3) => {
                let list = if k == "e" { &mut ents } else { &mut rels };
                if f[1].parse::<usize>().ok() != Some(list.len()) {
                    return Err(data_err(path, no, "mention ids must be dense and ordered"));
                }
                list.push(f[2].to_string());
            }
            _ => return Err(data_err(path, no, "unrecognised registry line")),
        }
    }
    let mode = mode.ok_or_else(|| data_err(path, 1, "missing mode line"))?;
    Ok(TextRegistry::from_mentions(ents, rels, mode)?)
}

// ---- tokenizer -------------------------------------------------------------

fn escape_symbols(symbols: &[u16]) -> String {
    let mut s = String::new();
    for &b in symbols {
        match b {
            MARKER => s.push('\u{2581}'),
            0x5c => s.push_str("\\\\"),
            0x21..=0x7e => s.push(b as u8 as char),
            _ => write!(s, "\\x{b:02x}").unwrap(),
        }
    }
    s
}

fn unescape_symbols(s: &str) -> Option<Vec<u16>> {
    let mut out = Vec::new();
    let mut it = s.chars();
    while let Some(c) = it.next() {
        match c {
            '\u{2581}' => out.push(MARKER),
            '\\' => match it.next()? {
                '\\' => out.push(0x5c),
                'x' => {
                    let h: String = it.by_ref().take(2).collect();
                    out.push(u16::from_str_radix(&h, 16).ok()?);
                }
                _ => return None,
            },
            c if c.is_ascii_graphic() => out.push(c as u16),
            _ => return None,
        }
    }
    (!out.is_empty()).then_some(out)
}

/// Versioned text: header, then one escaped token per line (ids from the
/// first non-special id), then merges as id triples.
pub fn vocab_text(v: &BpeVocab) -> String {
    let mut s = String::from("kgseq-bpe 1\n");
    writeln!(s, "target_size\t{}", v.target_size()).unwrap();
    writeln!(s, "tokens\t{}", v.tokens().len()).unwrap();
    for t in v.tokens() {
        writeln!(s, "{}", escape_symbols(t)).unwrap();
    }
    writeln!(s, "merges\t{}", v.merges().len()).unwrap();
    for m in v.merges() {
        writeln!(s, "{}\t{}\t{}", m.left, m.right, m.result).unwrap();
    }
    s
}

struct Lines<'a> {
    it: std::iter::Enumerate<std::str::Lines<'a>>,
    path: &'a Path,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> AppResult<(usize, &'a str)> {
        self.it
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| data_err(self.path, 0, format!("truncated before {what}")))
    }

    fn count(&mut self, key: &str) -> AppResult<usize> {
        let (no, l) = self.next(key)?;
        l.strip_prefix(key)
            .and_then(|r| r.strip_prefix('\t'))
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| data_err(self.path, no, format!("expected `{key}\\t<count>`")))
    }
}

pub fn parse_vocab(text: &str, path: &Path) -> AppResult<BpeVocab> {
    let mut ls = Lines { it: text.lines().enumerate(), path };
    let (no, head) = ls.next("header")?;
    if head != "kgseq-bpe 1" {
        return Err(data_err(path, no, "not a version 1 vocabulary"));
    }
    let target = ls.count("target_size")?;
    let n = ls.count("tokens")?;
    let mut tokens = Vec::with_capacity(n);
    for _ in 0..n {
        let (no, l) = ls.next("token")?;
        tokens.push(unescape_symbols(l).ok_or_else(|| data_err(path, no, "bad token escape"))?);
    }
    let m = ls.count("merges")?;
    let mut merges = Vec::with_capacity(m);
    for _ in 0..m {
        let (no, l) = ls.next("merge")?;
        let f: Vec<u32> = l.split('\t').filter_map(|x| x.parse().ok()).collect();
        if f.len() != 3 {
            return Err(data_err(path, no, "merge needs three ids"));
        }
        merges.push(Merge {
            left: f[0],
            right: f[1],
            result: f[2],
        });
    }
    Ok(BpeVocab::from_parts(tokens, merges, target)?)
}

pub fn read_vocab(path: &Path) -> AppResult<BpeVocab> {
    parse_vocab(&read_text(path)?, path)
}

// ---- checkpoints -------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"KGSQCKPT";
const CKPT_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> AppResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| AppError::Data("truncated binary file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> AppResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> AppResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> AppResult<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn tensor<T: Real>(&mut self) -> AppResult<Tensor<T>> {
        let ndim = self.u32()? as usize;
        let shape: Vec<usize> = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<AppResult<_>>()?;
        let n: usize = shape.iter().product();
        let bytes = self.take(n * T::BYTES)?;
        let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        Ok(Tensor::new(shape, data)?)
    }
}

fn put_tensor<T: Real>(out: &mut Vec<u8>, t: &Tensor<T>) {
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(out);
    }
}

fn config_fields(c: &ModelConfig) -> [u64; 9] {
    [
        c.d_model as u64,
        c.n_heads as u64,
        c.d_ff as u64,
        c.n_enc_layers as u64,
        c.n_dec_layers as u64,
        c.vocab_size as u64,
        c.max_len as u64,
        c.num_buckets as u64,
        c.max_distance as u64,
    ]
}

/// Model parameters, Adam moments and the step counter.
pub fn checkpoint_bytes<T: Real>(state: &ModelState<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&T::PRECISION.bits().to_le_bytes());
    let c = state.model.config();
    for f in config_fields(c) {
        out.extend_from_slice(&f.to_le_bytes());
    }
    out.extend_from_slice(&c.dropout.to_bits().to_le_bytes());
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&state.adam.t.to_le_bytes());
    let params = state.model.params();
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for group in [params, &state.adam.m[..], &state.adam.v[..]] {
        for t in group {
            put_tensor(&mut out, t);
        }
    }
    out
}

/// Precision recorded in a checkpoint header.
pub fn checkpoint_precision(bytes: &[u8]) -> AppResult<Precision> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != CKPT_MAGIC {
        return Err(AppError::Data("not a kgseq checkpoint".into()));
    }
    if r.u32()? != CKPT_VERSION {
        return Err(AppError::Data("unsupported checkpoint version".into()));
    }
    Precision::from_bits(r.u32()?).ok_or_else(|| AppError::Data("unknown checkpoint precision".into()))
}

pub fn parse_checkpoint<T: Real>(bytes: &[u8]) -> AppResult<ModelState<T>> {
    if checkpoint_precision(bytes)? != T::PRECISION {
        return Err(AppError::Config(format!(
            "checkpoint precision differs from the requested {}-bit model",
            T::PRECISION.bits()
        )));
    }
    let mut r = Reader { buf: bytes, pos: 16 };
    let mut f = [0usize; 9];
    for x in f.iter_mut() {
        *x = r.u64()? as usize;
    }
    let config = ModelConfig {
        d_model: f[0],
        n_heads: f[1],
        d_ff: f[2],
        n_enc_layers: f[3],
        n_dec_layers: f[4],
        vocab_size: f[5],
        max_len: f[6],
        num_buckets: f[7],
        max_distance: f[8],
        dropout: r.f64()?,
    };
    let step = r.u64()?;
    let t = r.u64()?;
    let n = r.u64()? as usize;
    let read_group = |r: &mut Reader|  (0..n).map(|_| r.tensor::<T>()).collect::<AppResult<Vec<_>>>();
    let params = read_group(&mut r)?;
    let m = read_group(&mut r)?;
    let v = read_group(&mut r)?;
    if r.pos != bytes.len() {
        return Err(AppError::Data("trailing bytes after checkpoint".into()));
    }
    let model = Seq2Seq::from_params(config, params)?;
    Ok(ModelState {
        model,
        adam: AdamState { m, v, t },
        step,
    })
}

const CPLX_MAGIC: &[u8; 8] = b"KGSQCPLX";

/// Header `(|E|, |R|, rank, seed)` then entity and relation rows as f64.
pub fn complex_bytes(m: &ComplexModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CPLX_MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    for x in [m.num_entities() as u64, m.num_relations() as u64, m.rank as u64, m.seed] {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for &x in m.entities.data().iter().chain(m.relations.data()) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn parse_complex(bytes: &[u8]) -> AppResult<ComplexModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != CPLX_MAGIC || r.u32()? != 1 {
        return Err(AppError::Data("not a version 1 ComplEx file".into()));
    }
    let (ne, nr, rank, seed) = (r.u64()? as usize, r.u64()? as usize, r.u64()? as usize, r.u64()?);
    let mut rows = |n: usize| -> AppResult<Tensor<f64>> {
        let data = (0..n * 2 * rank).map(|_| r.f64()).collect::<AppResult<Vec<_>>>()?;
        Ok(Tensor::new(vec![n, 2 * rank], data)?)
    };
    let entities = rows(ne)?;
    let relations = rows(nr)?;
    if r.pos != bytes.len() {
        return Err(AppError::Data("trailing bytes after ComplEx model".into()));
    }
    Ok(ComplexModel {
        rank,
        seed,
        entities,
        relations,
    })
}

// ---- QA --------------------------------------------------------------------

/// `question \t topic-id or - \t answer|answer...`
pub fn read_qa(path: &Path, split: QaSplit, num_entities: usize) -> AppResult<Vec<QaExample>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (no, line) in lines(&text) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(data_err(path, no, "expected question, topic and answers"));
        }
        let topic = match f[1] {
            "-" => None,
            t => Some(
                t.parse::<u32>()
                    .ok()
                    .filter(|&x| (x as usize) < num_entities)
                    .ok_or_else(|| data_err(path, no, format!("bad topic entity {t:?}")))?,
            ),
        };
        let answers = f[2].split('|').map(str::trim).filter(|a| !a.is_empty()).map(String::from).collect();
        let ex = QaExample {
            question: f[0].to_string(),
            topic,
            answers,
            split,
        };
        ex.validate().map_err(|e| data_err(path, no, e))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn qa_text(examples: &[QaExample]) -> String {
    let mut s = String::new();
    for ex in examples {
        let topic = ex.topic.map_or("-".to_string(), |t| t.to_string());
        writeln!(s, "{}\t{topic}\t{}", ex.question, ex.answers.join("|")).unwrap();
    }
    s
}

/// `template \t signed path \t support`
pub fn mapping_text(m: &Mapping, reg: &TextRegistry) -> AppResult<String> {
    let mut s = String::new();
    for (t, p) in &m.paths {
        writeln!(s, "{}\t{}\t{}", t.base, format_path(&p.relations, reg)?, p.support).unwrap();
    }
    Ok(s)
}

pub fn read_mapping(path: &Path, reg: &TextRegistry) -> AppResult<Mapping> {
    let text = read_text(path)?;
    let mut paths = BTreeMap::new();
    for (no, line) in lines(&text) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(data_err(path, no, "expected template, path and support"));
        }
        let relations = parse_path(f[1], reg).map_err(|e| data_err(path, no, e))?;
        let support = f[2].parse().map_err(|_| data_err(path, no, "bad support count"))?;
        let hops = relations.len();
        paths.insert(
            Template {
                base: f[0].to_string(),
                hops,
            },
            RelPath { relations, support },
        );
    }
    Ok(Mapping { paths })
}

// ---- reports -----------------------------------------------------------------

/// Per-query rows for a link-prediction run.
pub fn lp_rows_tsv(rep: &LpReport, reg: &TextRegistry) -> String {
    let mut s = String::from("direction\tanchor\trelation\tgold\trank\tnum_filtered\ttrain_others\troute\ttop\ttop_logprob\n");
    for r in &rep.rows {
        let dir = match r.query.direction {
            kgseq_core::kg::Direction::Tail => "tail",
            kgseq_core::kg::Direction::Head => "head",
        };
        let name = |e: u32| reg.entity(e).unwrap_or("?").to_string();
        writeln!(
            s,
            "{dir}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            name(r.query.anchor),
            reg.relation(r.query.relation).unwrap_or("?"),
            name(r.gold),
            r.rank.map_or("-".into(), |x| x.to_string()),
            r.num_filtered,
            r.train_others,
            r.route.map_or("-", |x| x.tag()),
            r.best.map_or("-".into(), |b| name(b.entity)),
            r.best.map_or("-".into(), |b| format!("{:.6}", b.logprob)),
        )
        .unwrap();
    }
    s
}

/// Overall line, the three bucket lines and route shares.
pub fn lp_summary_tsv(rep: &LpReport) -> String {
    let mut s = String::new();
    writeln!(s, "{}", format_metrics("all", &rep.overall)).unwrap();
    for b in Bucket::ALL {
        writeln!(s, "{}", format_metrics(&format!("bucket {}", b.label()), rep.bucket(b))).unwrap();
    }
    for (route, share) in rep.route_shares() {
        writeln!(s, "route {}\t{share:.4}", route.tag()).unwrap();
    }
    s
}

//! The commands. Each reads and writes only inside its run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use kgseq_core::bpe::BpeVocab;
use kgseq_core::complex::{evaluate_complex, train_complex, ComplexModel};
use kgseq_core::ensemble::{lp_ensemble_candidates, qa_ensemble_answer, qa_hits};
use kgseq_core::exec::{Executor, Serial};
use kgseq_core::kg::{drop_edges, KgSplit, KnowledgeGraph, Scope, Triple};
use kgseq_core::lp::{
    encode_examples, evaluate_lp, make_lp_examples, random_mrr, train_lp, Bucket, Decoding, LpReport,
    Seq2SeqRanker, TrainConfig, TrainHooks,
};
use kgseq_core::model::{ModelState, Seq2Seq};
use kgseq_core::pathpred::{self, Mapping};
use kgseq_core::qa::{
    evaluate_qa, finetune_qa as core_finetune, predict_all, rerank, tune_alpha, QaExample, QaMixer, QaReport,
    QaSplit, RerankedAnswer, ALPHA_GRID,
};
use kgseq_core::synth::{grid_kg, movie_qa, GridConfig, MovieConfig};
use kgseq_core::textmap::{verbalize_qa, NameTable, TextRegistry};
use kgseq_core::{Precision, Real};

use crate::config::RunConfig;
use crate::error::{AppError, AppResult};
use crate::formats::*;
use crate::parallel::RayonExecutor;
use crate::rundir::{stage_key, RunDir};

pub const ENTITIES: &str = "data/entities.tsv";
pub const RELATIONS: &str = "data/relations.tsv";
pub const SPLIT_INFO: &str = "data/split.txt";
pub const REGISTRY: &str = "registry/registry.tsv";
pub const VOCAB: &str = "tokenizer/vocab.txt";
pub const LP_CKPT: &str = "checkpoints/lp.ckpt";
pub const QA_CKPT: &str = "checkpoints/qa.ckpt";
pub const COMPLEX: &str = "checkpoints/complex.bin";
pub const MAPPING: &str = "pathpred/mapping.tsv";
pub const SUMMARY_MD: &str = "reports/summary.md";

/// Graph split or QA split a command evaluates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalSplit {
    Train,
    Valid,
    Test,
}

impl EvalSplit {
    pub fn name(self) -> &'static str {
        match self {
            EvalSplit::Train => "train",
            EvalSplit::Valid => "valid",
            EvalSplit::Test => "test",
        }
    }

    fn qa(self) -> QaSplit {
        match self {
            EvalSplit::Train => QaSplit::Train,
            EvalSplit::Valid => QaSplit::Valid,
            EvalSplit::Test => QaSplit::Test,
        }
    }
}

fn graph_file(s: EvalSplit) -> String {
    format!("data/{}.tsv", s.name())
}

fn qa_file(s: QaSplit) -> String {
    format!("data/qa_{}.tsv", s.name())
}

pub struct Ctx {
    pub rd: RunDir,
    pub cfg: RunConfig,
    pub force: bool,
}

impl Ctx {
    pub fn new(run: &Path, cfg: RunConfig, force: bool) -> AppResult<Self> {
        Ok(Ctx {
            rd: RunDir::open(run)?,
            cfg,
            force,
        })
    }

    /// Records a completed stage with a snapshot of the config it ran under.
    fn finish(&mut self, stage: &str, key: &str) -> AppResult<()> {
        let text = self.cfg.render();
        self.rd.write(&format!("stages/{stage}.config.txt"), text.as_bytes())?;
        self.rd.finish_stage(stage, key)
    }

    fn hash(&self, rel: &str) -> String {
        self.rd.artifact_hash(rel).unwrap_or("-").to_string()
    }

    fn key(&self, sections: &[&str], inputs: &[&str]) -> String {
        let hs: Vec<(String, String)> = inputs.iter().map(|r| (r.to_string(), self.hash(r))).collect();
        let refs: Vec<(&str, &str)> = hs.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        stage_key(&self.cfg, sections, &refs)
    }

    fn exec(&self) -> AppResult<RayonExecutor> {
        RayonExecutor::new(self.cfg.workers()?)
    }

    pub fn names(&self) -> AppResult<(NameTable, NameTable)> {
        self.rd.require(ENTITIES, "split")?;
        self.rd.require(RELATIONS, "split")?;
        Ok((read_names(&self.rd.path(ENTITIES))?, read_names(&self.rd.path(RELATIONS))?))
    }

    pub fn split(&self) -> AppResult<KgSplit> {
        let info = self.rd.require_text(SPLIT_INFO, "split")?;
        let field = |k: &str| {
            info.lines()
                .find_map(|l| l.strip_prefix(k).and_then(|r| r.strip_prefix('\t')))
                .ok_or_else(|| AppError::Data(format!("{SPLIT_INFO}: missing {k}")))
        };
        let ne: usize = field("entities")?.parse().map_err(|_| AppError::Data("bad entity count".into()))?;
        let nr: usize = field("relations")?.parse().map_err(|_| AppError::Data("bad relation count".into()))?;
        let load = |s: EvalSplit| -> AppResult<KnowledgeGraph> {
            let rel = graph_file(s);
            self.rd.require(&rel, "split")?;
            read_triples(&self.rd.path(&rel), ne, nr)
        };
        Ok(KgSplit {
            train: load(EvalSplit::Train)?,
            valid: load(EvalSplit::Valid)?,
            test: load(EvalSplit::Test)?,
            seed: field("seed")?.parse().map_err(|_| AppError::Data("bad split seed".into()))?,
            fraction: field("fraction")?.parse().map_err(|_| AppError::Data("bad split fraction".into()))?,
        })
    }

    pub fn registry(&self) -> AppResult<TextRegistry> {
        self.rd.require(REGISTRY, "build-registry")?;
        read_registry(&self.rd.path(REGISTRY))
    }

    pub fn vocab(&self) -> AppResult<BpeVocab> {
        let text = self.rd.require_text(VOCAB, "train-tokenizer")?;
        parse_vocab(&text, &self.rd.path(VOCAB))
    }

    pub fn qa(&self, s: QaSplit) -> AppResult<Vec<QaExample>> {
        let rel = qa_file(s);
        let ne = read_names(&self.rd.path(ENTITIES))?.names.len();
        self.rd.require(&rel, "split --data <dir with qa_*.tsv>")?;
        read_qa(&self.rd.path(&rel), s, ne)
    }

    pub fn complex(&self) -> AppResult<ComplexModel> {
        parse_complex(&self.rd.require(COMPLEX, "train-complex")?)
    }

    pub fn mapping(&self, reg: &TextRegistry) -> AppResult<Mapping> {
        self.rd.require(MAPPING, "pathpred build")?;
        read_mapping(&self.rd.path(MAPPING), reg)
    }

    fn write_summary(&mut self, name: &str, kv: &[(String, String)]) -> AppResult<()> {
        let mut s = String::new();
        for (k, v) in kv {
            writeln!(s, "{k}\t{v}").unwrap();
        }
        self.rd.write(&format!("reports/{name}.summary.tsv"), s.as_bytes())
    }
}

/// A checkpoint of either precision.
pub enum AnyState {
    F32(ModelState<f32>),
    F64(ModelState<f64>),
}

macro_rules! with_state {
    ($any:expr, $s:ident => $body:expr) => {
        match $any {
            AnyState::F32($s) => $body,
            AnyState::F64($s) => $body,
        }
    };
}

pub fn load_state(bytes: &[u8]) -> AppResult<AnyState> {
    Ok(match checkpoint_precision(bytes)? {
        Precision::F32 => AnyState::F32(parse_checkpoint(bytes)?),
        Precision::F64 => AnyState::F64(parse_checkpoint(bytes)?),
    })
}

// ---- synth -----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SynthKind {
    Grid,
    Movie,
}

/// Writes a bundled synthetic dataset in the input layout.
pub fn synth(out: &Path, kind: SynthKind, seed: u64) -> AppResult<()> {
    let (kg, qa) = match kind {
        SynthKind::Grid => (grid_kg(&GridConfig { seed, ..GridConfig::default() })?, None),
        SynthKind::Movie => {
            let q = movie_qa(&MovieConfig { seed, ..MovieConfig::default() })?;
            let splits = [QaSplit::Train, QaSplit::Valid, QaSplit::Test].map(|s| (s, q.split(s)));
            (q.kg, Some(splits))
        }
    };
    write_names(&out.join("entities.tsv"), &kg.entities)?;
    write_names(&out.join("relations.tsv"), &kg.relations)?;
    write_triples(&out.join("triples.tsv"), kg.graph.triples())?;
    for (s, ex) in qa.into_iter().flatten() {
        write_atomic(&out.join(format!("qa_{}.tsv", s.name())), qa_text(&ex).as_bytes())?;
    }
    log::info!("wrote {} triples to {}", kg.graph.len(), out.display());
    Ok(())
}

// ---- split, registry, tokenizer --------------------------------------------

pub fn split(ctx: &mut Ctx) -> AppResult<()> {
    let dir = ctx
        .cfg
        .data_dir()
        .ok_or_else(|| AppError::Config("data.dir is not set; pass --data or set it in the config".into()))?;
    let src_ent = dir.join("entities.tsv");
    let src_rel = dir.join("relations.tsv");
    let src_tri = dir.join("triples.tsv");
    let ents = read_names(&src_ent)?;
    let rels = read_names(&src_rel)?;
    let graph = read_triples(&src_tri, ents.names.len(), rels.names.len())?;
    let mut inputs = vec![
        ("entities".to_string(), sha256_file(&src_ent)?),
        ("relations".to_string(), sha256_file(&src_rel)?),
        ("triples".to_string(), sha256_file(&src_tri)?),
    ];
    let mut qa = Vec::new();
    for s in [QaSplit::Train, QaSplit::Valid, QaSplit::Test] {
        let p = dir.join(format!("qa_{}.tsv", s.name()));
        if p.exists() {
            inputs.push((format!("qa_{}", s.name()), sha256_file(&p)?));
            qa.push((s, read_qa(&p, s, ents.names.len())?));
        }
    }
    let refs: Vec<(&str, &str)> = inputs.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    let key = stage_key(&ctx.cfg, &["split"], &refs);
    ctx.rd.check_stage("split", &key, ctx.force)?;

    let sp = drop_edges(&graph, ctx.cfg.get("split", "fraction")?, ctx.cfg.get("split", "seed")?)?;
    ctx.rd.write(ENTITIES, names_text(&ents).as_bytes())?;
    ctx.rd.write(RELATIONS, names_text(&rels).as_bytes())?;
    for (s, g) in [(EvalSplit::Train, &sp.train), (EvalSplit::Valid, &sp.valid), (EvalSplit::Test, &sp.test)] {
        ctx.rd.write(&graph_file(s), triples_text(g.triples()).as_bytes())?;
    }
    ctx.rd.write(SPLIT_INFO, split_manifest(&sp).as_bytes())?;
    for (s, ex) in &qa {
        ctx.rd.write(&qa_file(*s), qa_text(ex).as_bytes())?;
    }
    log::info!(
        "split {} triples: train {} valid {} test {}",
        graph.len(),
        sp.train.len(),
        sp.valid.len(),
        sp.test.len()
    );
    ctx.finish("split", &key)
}

pub fn build_registry(ctx: &mut Ctx) -> AppResult<()> {
    let (ents, rels) = ctx.names()?;
    let key = ctx.key(&["registry"], &[ENTITIES, RELATIONS]);
    ctx.rd.check_stage("build-registry", &key, ctx.force)?;
    let (reg, warnings) = TextRegistry::build(&ents, &rels, ctx.cfg.mention_mode()?)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    ctx.rd.write(REGISTRY, registry_text(&reg).as_bytes())?;
    ctx.finish("build-registry", &key)
}

/// Every mention, both link-prediction texts of every train triple, and the
/// QA training questions and answers when present.
pub fn tokenizer_corpus(
    reg: &TextRegistry,
    train: &KnowledgeGraph,
    qa_train: &[QaExample],
) -> AppResult<Vec<String>> {
    let mut corpus: Vec<String> = reg.entity_mentions().to_vec();
    corpus.extend(reg.relation_mentions().iter().cloned());
    for (a, b) in reg.lp_corpus(train)? {
        corpus.push(a);
        corpus.push(b);
    }
    for ex in qa_train {
        corpus.push(verbalize_qa(&ex.question)?);
        corpus.extend(ex.answers.iter().cloned());
    }
    Ok(corpus)
}

fn optional_qa(ctx: &Ctx, s: QaSplit) -> AppResult<Vec<QaExample>> {
    if ctx.rd.path(&qa_file(s)).exists() {
        ctx.qa(s)
    } else {
        Ok(Vec::new())
    }
}

pub fn train_tokenizer(ctx: &mut Ctx) -> AppResult<()> {
    let reg = ctx.registry()?;
    let sp = ctx.split()?;
    let qa_train = optional_qa(ctx, QaSplit::Train)?;
    let key = ctx.key(&["tokenizer"], &[REGISTRY, "data/train.tsv", "data/qa_train.tsv"]);
    ctx.rd.check_stage("train-tokenizer", &key, ctx.force)?;
    let corpus = tokenizer_corpus(&reg, &sp.train, &qa_train)?;
    let vocab = BpeVocab::train(
        &corpus,
        ctx.cfg.get("tokenizer", "target_size")?,
        ctx.cfg.get("tokenizer", "min_frequency")?,
    )?;
    log::info!("vocabulary of {} tokens", vocab.len());
    ctx.rd.write(VOCAB, vocab_text(&vocab).as_bytes())?;
    ctx.finish("train-tokenizer", &key)
}

// ---- link prediction ---------------------------------------------------------

/// Writes checkpoints and validates during training.
struct RunHooks<'a, T> {
    rd: &'a mut RunDir,
    ckpt: &'static str,
    failure: Option<AppError>,
    validate: Option<Box<dyn FnMut(&ModelState<T>) -> Option<f64> + 'a>>,
}

impl<T: Real> TrainHooks<T> for RunHooks<'_, T> {
    fn on_checkpoint(&mut self, state: &ModelState<T>) -> kgseq_core::Result<()> {
        let r = self.rd.write(self.ckpt, &checkpoint_bytes(state)).and_then(|_| self.rd.save_manifest());
        r.map_err(|e| {
            let msg = e.to_string();
            self.failure = Some(e);
            kgseq_core::Error::Domain(msg)
        })
    }

    fn validate(&mut self, state: &ModelState<T>) -> Option<f64> {
        self.validate.as_mut().and_then(|f| f(state))
    }
}

fn loss_tsv(previous: Option<&str>, keep_through: u64, losses: &[(u64, f64)]) -> String {
    let mut s = String::from("step\tloss\n");
    for line in previous.into_iter().flat_map(|p| p.lines().skip(1)) {
        let step = line.split('\t').next().and_then(|x| x.parse::<u64>().ok());
        if step.is_some_and(|x| x <= keep_through) {
            writeln!(s, "{line}").unwrap();
        }
    }
    for (step, l) in losses {
        writeln!(s, "{step}\t{l}").unwrap();
    }
    s
}

/// Filtered MRR of the seq2seq model on `probe` with the configured decoding.
pub fn seq2seq_report<T: Real, E: Executor>(
    model: &Seq2Seq<T>,
    vocab: &BpeVocab,
    reg: &TextRegistry,
    split: &KgSplit,
    probe: &[Triple],
    decoding: Decoding,
    seed: u64,
    scope: Scope,
    exec: &E,
) -> AppResult<LpReport> {
    let ranker = Seq2SeqRanker::new(model, vocab, reg, decoding, seed);
    Ok(evaluate_lp(split, probe, scope, exec, |q, _, i| Ok((ranker.candidates(q, i as u64)?, None)))?)
}

fn train_lp_t<T: Real>(ctx: &mut Ctx, key: &str, resume: Option<ModelState<T>>) -> AppResult<()> {
    let vocab = ctx.vocab()?;
    let reg = ctx.registry()?;
    let sp = ctx.split()?;
    let data = encode_examples(&vocab, &make_lp_examples(&sp.train, &reg)?);
    let mut cfg: TrainConfig = ctx.cfg.train_config()?;
    let (mut state, start) = match resume {
        Some(s) => {
            let at = s.step;
            (s, at)
        }
        None => {
            let mc = ctx.cfg.model_config(vocab.len())?;
            (ModelState::new(Seq2Seq::<T>::new(mc, ctx.cfg.get("model", "seed")?)?), 0)
        }
    };
    if start >= cfg.steps {
        log::info!("checkpoint is already at step {start}; nothing to do");
        return Ok(());
    }
    cfg.start_step = start;
    log::info!(
        "training {} parameters on {} examples from step {start} to {}",
        state.model.config().param_count(),
        data.len(),
        cfg.steps
    );
    ctx.finish("train-lp", key)?;
    let decoding = ctx.cfg.decoding()?;
    let seed: u64 = ctx.cfg.get("inference", "seed")?;
    let probe: Vec<Triple> = sp.valid.triples().iter().take(100).copied().collect();
    let (vocab_r, reg_r, sp_r) = (&vocab, &reg, &sp);
    let validate: Option<Box<dyn FnMut(&ModelState<T>) -> Option<f64>>> = if probe.is_empty() {
        None
    } else {
        Some(Box::new(move |st: &ModelState<T>| {
            seq2seq_report(&st.model, vocab_r, reg_r, sp_r, &probe, decoding, seed, Scope::ALL, &Serial)
                .ok()
                .map(|r| r.overall.mrr())
        }))
    };
    let previous = std::fs::read_to_string(ctx.rd.path("reports/train_lp_loss.tsv")).ok();
    let mut hooks = RunHooks {
        rd: &mut ctx.rd,
        ckpt: LP_CKPT,
        failure: None,
        validate,
    };
    let res = train_lp(&mut state, &data, &cfg, &mut hooks);
    if let Some(e) = hooks.failure.take() {
        return Err(e);
    }
    let summary = res?;
    drop(hooks);
    ctx.rd.write(LP_CKPT, &checkpoint_bytes(&state))?;
    let losses = loss_tsv(previous.as_deref().filter(|_| start > 0), start, &summary.losses);
    ctx.rd.write("reports/train_lp_loss.tsv", losses.as_bytes())?;
    if summary.stopped_early {
        log::info!("stopped early at step {}", state.step);
    }
    ctx.rd.save_manifest()
}

/// Trains from scratch, or continues a checkpoint written under the same
/// settings. The step target may grow between runs.
pub fn train_lp_cmd(ctx: &mut Ctx) -> AppResult<()> {
    let mut masked = ctx.cfg.clone();
    masked.set("train", "steps", "*")?;
    let inputs = [VOCAB, REGISTRY, "data/train.tsv"];
    let hs: Vec<(String, String)> = inputs.iter().map(|r| (r.to_string(), ctx.hash(r))).collect();
    let refs: Vec<(&str, &str)> = hs.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    let key = stage_key(&masked, &["model", "train"], &refs);
    ctx.rd.check_stage("train-lp", &key, ctx.force)?;
    let same = ctx.rd.stage_hash("train-lp") == Some(key.as_str());
    let resume = if same && ctx.rd.path(LP_CKPT).exists() {
        Some(load_state(&ctx.rd.require(LP_CKPT, "train-lp")?)?)
    } else {
        None
    };
    match (resume, ctx.cfg.precision()?) {
        (Some(any), _) => with_state!(any, s => train_lp_t(ctx, &key, Some(s))),
        (None, Precision::F32) => train_lp_t::<f32>(ctx, &key, None),
        (None, Precision::F64) => train_lp_t::<f64>(ctx, &key, None),
    }
}

fn probe_of(sp: &KgSplit, s: EvalSplit) -> &[Triple] {
    match s {
        EvalSplit::Train => sp.train.triples(),
        EvalSplit::Valid => sp.valid.triples(),
        EvalSplit::Test => sp.test.triples(),
    }
}

pub fn lp_summary(model: &str, s: EvalSplit, rep: &LpReport, num_entities: usize) -> Vec<(String, String)> {
    let mut kv = vec![
        ("model".into(), model.into()),
        ("split".into(), s.name().into()),
        ("n".into(), rep.overall.n.to_string()),
        ("mrr".into(), format!("{:.6}", rep.overall.mrr())),
        ("hits1".into(), format!("{:.6}", rep.overall.hits_at_1())),
        ("hits3".into(), format!("{:.6}", rep.overall.hits_at_3())),
        ("hits10".into(), format!("{:.6}", rep.overall.hits_at_10())),
        ("random_mrr".into(), format!("{:.6}", random_mrr(num_entities))),
    ];
    for b in Bucket::ALL {
        let m = rep.bucket(b);
        kv.push((format!("bucket {} n", b.label()), m.n.to_string()));
        kv.push((format!("bucket {} mrr", b.label()), format!("{:.6}", m.mrr())));
    }
    for (r, share) in rep.route_shares() {
        kv.push((format!("route {}", r.tag()), format!("{share:.6}")));
    }
    kv
}

fn write_lp_report(ctx: &mut Ctx, model: &str, s: EvalSplit, rep: &LpReport, reg: &TextRegistry) -> AppResult<()> {
    let name = format!("{model}_{}", s.name());
    ctx.rd.write(&format!("reports/{name}.tsv"), lp_rows_tsv(rep, reg).as_bytes())?;
    let kv = lp_summary(model, s, rep, reg.num_entities());
    ctx.write_summary(&name, &kv)?;
    println!("{}", kgseq_core::lp::format_metrics(&name, &rep.overall));
    for b in Bucket::ALL {
        println!("{}", kgseq_core::lp::format_metrics(&format!("  bucket {}", b.label()), rep.bucket(b)));
    }
    let key = ctx.key(&["inference"], &[LP_CKPT, COMPLEX]);
    ctx.finish(&format!("eval-{name}"), &key)
}

pub fn eval_lp(ctx: &mut Ctx, s: EvalSplit) -> AppResult<()> {
    let vocab = ctx.vocab()?;
    let reg = ctx.registry()?;
    let sp = ctx.split()?;
    let any = load_state(&ctx.rd.require(LP_CKPT, "train-lp")?)?;
    let (decoding, seed, scope, exec) =
        (ctx.cfg.decoding()?, ctx.cfg.get("inference", "seed")?, ctx.cfg.filter_scope()?, ctx.exec()?);
    let rep = with_state!(any, st => seq2seq_report(&st.model, &vocab, &reg, &sp, probe_of(&sp, s), decoding, seed, scope, &exec))?;
    write_lp_report(ctx, "lp", s, &rep, &reg)
}

// ---- ComplEx -----------------------------------------------------------------

pub fn train_complex_cmd(ctx: &mut Ctx) -> AppResult<()> {
    let sp = ctx.split()?;
    let key = ctx.key(&["complex"], &["data/train.tsv"]);
    ctx.rd.check_stage("train-complex", &key, ctx.force)?;
    let (model, losses) = train_complex(&sp.train, &ctx.cfg.complex_config()?)?;
    ctx.rd.write(COMPLEX, &complex_bytes(&model))?;
    let steps: Vec<(u64, f64)> = losses.iter().enumerate().map(|(i, &l)| (i as u64 + 1, l)).collect();
    ctx.rd.write("reports/train_complex_loss.tsv", loss_tsv(None, 0, &steps).as_bytes())?;
    ctx.finish("train-complex", &key)
}

pub fn eval_complex(ctx: &mut Ctx, s: EvalSplit) -> AppResult<()> {
    let reg = ctx.registry()?;
    let sp = ctx.split()?;
    let model = ctx.complex()?;
    let rep = evaluate_complex(&model, &sp, probe_of(&sp, s), ctx.cfg.filter_scope()?, &ctx.exec()?)?;
    write_lp_report(ctx, "complex", s, &rep, &reg)
}

pub fn ensemble_lp(ctx: &mut Ctx, s: EvalSplit) -> AppResult<()> {
    let vocab = ctx.vocab()?;
    let reg = ctx.registry()?;
    let sp = ctx.split()?;
    let complex = ctx.complex()?;
    let any = load_state(&ctx.rd.require(LP_CKPT, "train-lp")?)?;
    let (decoding, seed, scope, exec) =
        (ctx.cfg.decoding()?, ctx.cfg.get("inference", "seed")?, ctx.cfg.filter_scope()?, ctx.exec()?);
    let rep = with_state!(any, st => {
        let ranker = Seq2SeqRanker::new(&st.model, &vocab, &reg, decoding, seed);
        evaluate_lp(&sp, probe_of(&sp, s), scope, &exec, |q, gold, i| {
            lp_ensemble_candidates(&sp, q, gold, || ranker.candidates(q, i as u64), || complex.candidates(q))
        })
    })?;
    write_lp_report(ctx, "ensemble_lp", s, &rep, &reg)
}

// ---- QA ----------------------------------------------------------------------

fn mix_report(batches: usize, exact: usize, qa: usize, lp: usize) -> String {
    format!("batches\t{batches}\nexact_half\t{exact}\nqa_sequences\t{qa}\nlp_sequences\t{lp}\n")
}

fn finetune_t<T: Real>(ctx: &mut Ctx, mut state: ModelState<T>, key: &str) -> AppResult<()> {
    let vocab = ctx.vocab()?;
    let reg = ctx.registry()?;
    let sp = ctx.split()?;
    let qa_train = ctx.qa(QaSplit::Train)?;
    let mixer = QaMixer::new(&vocab, &reg, &qa_train, &sp.train)?;
    let cfg = ctx.cfg.qa_train_config()?;
    // the optimiser restarts; the weights come from pretraining
    state = ModelState::new(state.model);
    let (mut batches, mut exact, mut nq, mut nl) = (0usize, 0usize, 0usize, 0usize);
    let b = cfg.batch_size.max(2);
    core_finetune(&mut state, &mixer, &cfg, &mut kgseq_core::lp::NoHooks, |q, l| {
        batches += 1;
        exact += (q == b / 2 && l == b - b / 2) as usize;
        nq += q;
        nl += l;
    })?;
    log::info!("finetuned {batches} batches, {exact} with an exact half split");
    ctx.rd.write(QA_CKPT, &checkpoint_bytes(&state))?;
    ctx.rd.write("reports/finetune_mix.tsv", mix_report(batches, exact, nq, nl).as_bytes())?;
    ctx.finish("finetune-qa", key)
}

pub fn finetune_qa(ctx: &mut Ctx) -> AppResult<()> {
    let key = ctx.key(&["qa"], &[LP_CKPT, VOCAB, REGISTRY, "data/train.tsv", "data/qa_train.tsv"]);
    ctx.rd.check_stage("finetune-qa", &key, ctx.force)?;
    let any = load_state(&ctx.rd.require(LP_CKPT, "train-lp")?)?;
    with_state!(any, s => finetune_t(ctx, s, &key))
}

/// Beam hypotheses of the finetuned model for one QA split.
pub fn qa_predictions(ctx: &Ctx, s: QaSplit) -> AppResult<(Vec<QaExample>, Vec<Vec<RerankedAnswer>>)> {
    let vocab = ctx.vocab()?;
    let reg = ctx.registry()?;
    let ex = ctx.qa(s)?;
    let beam: usize = ctx.cfg.get("inference", "beam")?;
    let exec = ctx.exec()?;
    let any = load_state(&ctx.rd.require(QA_CKPT, "finetune-qa")?)?;
    let preds = with_state!(any, st => predict_all(&st.model, &vocab, &reg, &ex, beam, &exec))?;
    Ok((ex, preds))
}

/// The configured α, or the best grid value on the validation questions.
fn resolve_alpha(ctx: &Ctx, kg: &KnowledgeGraph, hops: usize) -> AppResult<(f64, Vec<(f64, f64)>)> {
    match ctx.cfg.alpha()? {
        Some(a) => Ok((a, Vec::new())),
        None => {
            let (ex, preds) = qa_predictions(ctx, QaSplit::Valid)?;
            Ok(tune_alpha(&ALPHA_GRID, &ex, &preds, hops, kg)?)
        }
    }
}

fn qa_rows_tsv(rep: &QaReport) -> String {
    let mut s = String::from("question\tanswer\thit\n");
    for r in &rep.rows {
        writeln!(s, "{}\t{}\t{}", r.question, r.answer.as_deref().unwrap_or("-"), r.hit as u8).unwrap();
    }
    s
}

pub fn eval_qa(ctx: &mut Ctx, s: EvalSplit) -> AppResult<()> {
    let sp = ctx.split()?;
    let hops: usize = ctx.cfg.get("inference", "hops")?;
    let (alpha, table) = resolve_alpha(ctx, &sp.train, hops)?;
    let (ex, preds) = qa_predictions(ctx, s.qa())?;
    let base = evaluate_qa(&ex, &preds, 0.0, hops, &sp.train)?;
    let rep = evaluate_qa(&ex, &preds, alpha, hops, &sp.train)?;
    let name = format!("qa_{}", s.name());
    let mut t = String::from("alpha\tvalid_hits1\n");
    for (a, h) in &table {
        writeln!(t, "{a}\t{h:.6}").unwrap();
    }
    ctx.rd.write("reports/qa_alpha.tsv", t.as_bytes())?;
    ctx.rd.write(&format!("reports/{name}.tsv"), qa_rows_tsv(&rep).as_bytes())?;
    let kv = vec![
        ("model".into(), "qa".into()),
        ("split".into(), s.name().into()),
        ("n".into(), rep.n.to_string()),
        ("alpha".into(), alpha.to_string()),
        ("hits1".into(), format!("{:.6}", rep.hits_at_1())),
        ("hits1 alpha=0".into(), format!("{:.6}", base.hits_at_1())),
    ];
    ctx.write_summary(&name, &kv)?;
    println!("{name}\tn={}\talpha={alpha}\tH@1={:.4}\t(alpha=0: {:.4})", rep.n, rep.hits_at_1(), base.hits_at_1());
    let key = ctx.key(&["inference"], &[QA_CKPT]);
    ctx.finish(&format!("eval-{name}"), &key)
}

// ---- PathPred ------------------------------------------------------------------

pub fn pathpred_build(ctx: &mut Ctx) -> AppResult<()> {
    let reg = ctx.registry()?;
    let sp = ctx.split()?;
    let qa_train = ctx.qa(QaSplit::Train)?;
    let key = ctx.key(&["pathpred"], &[REGISTRY, "data/train.tsv", "data/qa_train.tsv"]);
    ctx.rd.check_stage("pathpred-build", &key, ctx.force)?;
    let (m, stats) = pathpred::build_mapping(&qa_train, &sp.train, &reg, ctx.cfg.get("pathpred", "hops")?)?;
    log::info!(
        "{} templates mapped, {} unmapped, {} questions skipped",
        m.paths.len(),
        stats.unmapped_templates,
        stats.skipped
    );
    ctx.rd.write(MAPPING, mapping_text(&m, &reg)?.as_bytes())?;
    ctx.finish("pathpred-build", &key)
}

pub fn pathpred_eval(ctx: &mut Ctx, s: EvalSplit) -> AppResult<()> {
    let reg = ctx.registry()?;
    let sp = ctx.split()?;
    let m = ctx.mapping(&reg)?;
    let ex = ctx.qa(s.qa())?;
    let hops: usize = ctx.cfg.get("pathpred", "hops")?;
    let mut rep = QaReport::default();
    let mut single = 0usize;
    let mut covered = 0usize;
    for e in &ex {
        let set = pathpred::answer_question(&m, e, &reg, &sp.train, hops);
        let gold = pathpred::answer_ids(e, &reg);
        covered += !set.is_empty() as usize;
        single += set.first().is_some_and(|x| gold.contains(x)) as usize;
        let shown = set.iter().filter_map(|&x| reg.entity(x).ok()).collect::<Vec<_>>().join("|");
        rep.push(&e.question, (!shown.is_empty()).then_some(shown), pathpred::set_hit(&set, &gold));
    }
    let name = format!("pathpred_{}", s.name());
    ctx.rd.write(&format!("reports/{name}.tsv"), qa_rows_tsv(&rep).as_bytes())?;
    let n = rep.n.max(1) as f64;
    let kv = vec![
        ("model".into(), "pathpred".into()),
        ("split".into(), s.name().into()),
        ("n".into(), rep.n.to_string()),
        ("hits1".into(), format!("{:.6}", rep.hits_at_1())),
        ("hits1 lowest id".into(), format!("{:.6}", single as f64 / n)),
        ("coverage".into(), format!("{:.6}", covered as f64 / n)),
    ];
    ctx.write_summary(&name, &kv)?;
    println!("{name}\tn={}\tH@1={:.4}\tcoverage={:.4}", rep.n, rep.hits_at_1(), covered as f64 / n);
    let key = ctx.key(&["pathpred"], &[MAPPING]);
    ctx.finish(&format!("eval-{name}"), &key)
}

pub fn ensemble_qa(ctx: &mut Ctx, s: EvalSplit) -> AppResult<()> {
    let reg = ctx.registry()?;
    let sp = ctx.split()?;
    let m = ctx.mapping(&reg)?;
    let hops: usize = ctx.cfg.get("inference", "hops")?;
    let pp_hops: usize = ctx.cfg.get("pathpred", "hops")?;
    let (alpha, _) = resolve_alpha(ctx, &sp.train, hops)?;
    let (ex, preds) = qa_predictions(ctx, s.qa())?;
    let mut rep = QaReport::default();
    let mut single = 0usize;
    let mut routed = 0usize;
    for (e, hyps) in ex.iter().zip(&preds) {
        let set = pathpred::answer_question(&m, e, &reg, &sp.train, pp_hops);
        let a = qa_ensemble_answer(set, &reg, || {
            let (sc, c) = rerank(hyps, e.topic, alpha, hops, &sp.train)?;
            Ok(c.map(|c| (sc[c].mention.clone(), sc[c].entity)))
        })?;
        let (single_hit, set_hit) = qa_hits(&a, e, &reg);
        single += single_hit as usize;
        routed += (a.route == kgseq_core::lp::Route::PathPred) as usize;
        rep.push(&e.question, a.answer.clone(), set_hit);
    }
    let name = format!("ensemble_qa_{}", s.name());
    ctx.rd.write(&format!("reports/{name}.tsv"), qa_rows_tsv(&rep).as_bytes())?;
    let n = rep.n.max(1) as f64;
    let kv = vec![
        ("model".into(), "ensemble_qa".into()),
        ("split".into(), s.name().into()),
        ("n".into(), rep.n.to_string()),
        ("alpha".into(), alpha.to_string()),
        ("hits1".into(), format!("{:.6}", rep.hits_at_1())),
        ("hits1 lowest id".into(), format!("{:.6}", single as f64 / n)),
        ("route pathpred".into(), format!("{:.6}", routed as f64 / n)),
    ];
    ctx.write_summary(&name, &kv)?;
    println!("{name}\tn={}\tH@1={:.4}\tpathpred share={:.4}", rep.n, rep.hits_at_1(), routed as f64 / n);
    let key = ctx.key(&["inference", "pathpred"], &[QA_CKPT, MAPPING]);
    ctx.finish(&format!("eval-{name}"), &key)
}

// ---- report ----------------------------------------------------------------------

pub fn read_summary(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('\t'))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// Collates every `reports/*.summary.tsv` into a markdown summary.
pub fn report(ctx: &mut Ctx) -> AppResult<String> {
    let dir = ctx.rd.path("reports");
    let mut files: Vec<_> = match std::fs::read_dir(&dir) {
        Ok(rd) => rd.filter_map(|e| e.ok()).map(|e| e.path()).collect(),
        Err(_) => Vec::new(),
    };
    files.retain(|p| p.to_string_lossy().ends_with(".summary.tsv"));
    files.sort();
    if files.is_empty() {
        return Err(AppError::MissingArtifact {
            path: dir.join("*.summary.tsv"),
            producer: "eval-lp",
        });
    }
    let mut lp = Vec::new();
    let mut qa = Vec::new();
    for p in &files {
        let kv = read_summary(&read_text(p)?);
        if kv.contains_key("mrr") {
            lp.push(kv);
        } else if kv.contains_key("hits1") {
            qa.push(kv);
        }
    }
    let get = |kv: &BTreeMap<String, String>, k: &str| kv.get(k).cloned().unwrap_or_else(|| "-".into());
    let mut md = String::from("# Results\n");
    if !lp.is_empty() {
        md.push_str("\n## Link prediction\n\n| model | split | n | MRR | Hits@1 | Hits@3 | Hits@10 |\n|---|---|---|---|---|---|---|\n");
        for kv in &lp {
            writeln!(
                md,
                "| {} | {} | {} | {} | {} | {} | {} |",
                get(kv, "model"),
                get(kv, "split"),
                get(kv, "n"),
                get(kv, "mrr"),
                get(kv, "hits1"),
                get(kv, "hits3"),
                get(kv, "hits10")
            )
            .unwrap();
        }
        md.push_str("\n## MRR by number of other train answers\n\n| model | split | 0 | 1-10 | >10 |\n|---|---|---|---|---|\n");
        for kv in &lp {
            let cell = |b: Bucket| {
                format!("{} (n={})", get(kv, &format!("bucket {} mrr", b.label())), get(kv, &format!("bucket {} n", b.label())))
            };
            writeln!(
                md,
                "| {} | {} | {} | {} | {} |",
                get(kv, "model"),
                get(kv, "split"),
                cell(Bucket::Zero),
                cell(Bucket::OneToTen),
                cell(Bucket::MoreThanTen)
            )
            .unwrap();
        }
        if let Some(r) = lp.first().and_then(|kv| kv.get("random_mrr")) {
            writeln!(md, "\nRandom-ranking MRR for this entity count: {r}").unwrap();
        }
    }
    if !qa.is_empty() {
        md.push_str("\n## Question answering\n\n| model | split | n | Hits@1 | notes |\n|---|---|---|---|---|\n");
        for kv in &qa {
            let notes = match get(kv, "model").as_str() {
                "qa" => format!("alpha={}, alpha=0 gives {}", get(kv, "alpha"), get(kv, "hits1 alpha=0")),
                "pathpred" => format!("coverage {}", get(kv, "coverage")),
                _ => format!("pathpred share {}", get(kv, "route pathpred")),
            };
            writeln!(md, "| {} | {} | {} | {} | {notes} |", get(kv, "model"), get(kv, "split"), get(kv, "n"), get(kv, "hits1"))
                .unwrap();
        }
    }
    ctx.rd.write(SUMMARY_MD, md.as_bytes())?;
    ctx.rd.save_manifest()?;
    Ok(md)
}

//! Question answering: equal-mix finetuning, beam answers and
//! neighbourhood reranking, string-level hits@1.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::bpe::BpeVocab;
use crate::decode::{beam_search, StepModel};
use crate::error::{config, Result};
use crate::exec::Executor;
use crate::kg::KnowledgeGraph;
use crate::lp::{
    encode_example, encode_examples, make_lp_examples, train_loop, Encoded, EpochSampler, TrainConfig, TrainHooks,
    TrainSummary,
};
use crate::model::ModelState;
use crate::optim::LrSchedule;
use crate::real::Real;
use crate::textmap::{normalize_text, verbalize_qa, TextRegistry};

pub const DEFAULT_BEAM: usize = 4;
pub const FINETUNE_LR: f64 = 0.001;
pub const FINETUNE_BATCH: usize = crate::lp::DEFAULT_BATCH / 2;
pub const ALPHA_GRID: [f64; 5] = [0.0, 0.5, 1.0, 2.0, 4.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum QaSplit {
    Train,
    Valid,
    Test,
}

impl QaSplit {
    pub fn name(self) -> &'static str {
        match self {
            QaSplit::Train => "train",
            QaSplit::Valid => "valid",
            QaSplit::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(QaSplit::Train),
            "valid" => Some(QaSplit::Valid),
            "test" => Some(QaSplit::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaExample {
    pub question: String,
    pub topic: Option<u32>,
    /// Gold answer mentions, compared by surface form.
    pub answers: Vec<String>,
    pub split: QaSplit,
}

impl QaExample {
    pub fn validate(&self) -> Result<()> {
        if normalize_text(&self.question).is_empty() {
            return Err(config("QA example with an empty question"));
        }
        if self.split == QaSplit::Train && self.answers.is_empty() {
            return Err(config(alloc::format!("training question without answers: {}", self.question)));
        }
        Ok(())
    }

    /// Whether `mention` equals any gold answer after normalisation.
    pub fn is_correct(&self, mention: &str) -> bool {
        let m = normalize_text(mention);
        self.answers.iter().any(|a| normalize_text(a) == m)
    }
}

/// Pre-tokenised finetuning data: every (question, gold answer) pair and
/// both link-prediction examples of every background triple.
pub struct QaMixer {
    /// `qa[i]` holds one encoding per gold answer of question `i`.
    qa: Vec<Vec<Encoded>>,
    lp: Vec<Encoded>,
}

impl QaMixer {
    pub fn new(vocab: &BpeVocab, registry: &TextRegistry, qa_train: &[QaExample], kg: &KnowledgeGraph) -> Result<Self> {
        if qa_train.is_empty() {
            return Err(config("no QA training examples"));
        }
        let mut qa = Vec::with_capacity(qa_train.len());
        for ex in qa_train {
            ex.validate()?;
            if ex.answers.is_empty() {
                return Err(config("QA training question without answers"));
            }
            let input = verbalize_qa(&ex.question)?;
            qa.push(ex.answers.iter().map(|a| encode_example(vocab, &input, a)).collect());
        }
        let lp = encode_examples(vocab, &make_lp_examples(kg, registry)?);
        if lp.is_empty() {
            return Err(config("background KG is empty"));
        }
        Ok(QaMixer { qa, lp })
    }

    /// Epoch order over the questions.
    pub fn sampler(&self) -> EpochSampler {
        EpochSampler::new(self.qa.len())
    }

    /// `⌊b/2⌋` QA pairs (one gold answer drawn uniformly per question) and
    /// `⌈b/2⌉` link-prediction pairs drawn uniformly from the KG.
    pub fn batch(&self, order: &mut EpochSampler, b: usize, rng: &mut ChaCha8Rng) -> MixedBatch<'_> {
        let nq = b / 2;
        let qa = order
            .take(nq, rng)
            .into_iter()
            .map(|i| self.qa[i].choose(rng).expect("answers are non-empty"))
            .collect();
        let lp = (0..b - nq).map(|_| &self.lp[rng.random_range(0..self.lp.len())]).collect();
        MixedBatch { qa, lp }
    }
}

pub struct MixedBatch<'a> {
    pub qa: Vec<&'a Encoded>,
    pub lp: Vec<&'a Encoded>,
}

impl<'a> MixedBatch<'a> {
    pub fn pairs(&self) -> Vec<(&'a [u32], &'a [u32])> {
        self.qa
            .iter()
            .chain(&self.lp)
            .map(|e| (e.input.as_slice(), e.target.as_slice()))
            .collect()
    }
}

/// Finetuning settings: half the pretraining batch and a fixed learning rate.
pub fn finetune_config(steps: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: FINETUNE_BATCH,
        steps,
        schedule: LrSchedule::Constant(FINETUNE_LR),
        seed,
        ..TrainConfig::default()
    }
}

/// Runs the training loop on equal-mix batches. `on_batch` sees each
/// batch's (QA, LP) composition before its step.
pub fn finetune_qa<T: Real, H: TrainHooks<T>>(
    state: &mut ModelState<T>,
    mixer: &QaMixer,
    cfg: &TrainConfig,
    hooks: &mut H,
    mut on_batch: impl FnMut(usize, usize),
) -> Result<TrainSummary> {
    let b = cfg.batch_size.max(2);
    let mut order = mixer.sampler();
    train_loop(state, cfg, hooks, |rng| {
        let mb = mixer.batch(&mut order, b, rng);
        on_batch(mb.qa.len(), mb.lp.len());
        mb.pairs()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankedAnswer {
    pub mention: String,
    pub entity: Option<u32>,
    pub base_logprob: f64,
    pub final_score: f64,
    pub in_neighborhood: bool,
}

/// Beam hypotheses for a question, best first, with unreranked scores.
pub fn answer_question<M: StepModel>(
    model: &M,
    vocab: &BpeVocab,
    registry: &TextRegistry,
    question: &str,
    beam: usize,
) -> Result<Vec<RerankedAnswer>> {
    let ctx = model.prepare(&vocab.encode(&verbalize_qa(question)?))?;
    let mut out = Vec::new();
    for d in beam_search(model, &ctx, beam)? {
        let mention = normalize_text(&vocab.decode(&d.tokens)?);
        out.push(RerankedAnswer {
            entity: registry.mention_to_entity(&mention),
            mention,
            base_logprob: d.logprob,
            final_score: d.logprob,
            in_neighborhood: false,
        });
    }
    Ok(out)
}

/// Adds `alpha` to hypotheses inside the `hops`-neighbourhood of the topic
/// entity. Without a topic the scores pass through. Returns the index of
/// the chosen answer (ties keep beam order).
pub fn rerank(
    hyps: &[RerankedAnswer],
    topic: Option<u32>,
    alpha: f64,
    hops: usize,
    kg: &KnowledgeGraph,
) -> Result<(Vec<RerankedAnswer>, Option<usize>)> {
    let hood: BTreeSet<u32> = match topic {
        Some(e) => kg.neighborhood(e, hops)?,
        None => BTreeSet::new(),
    };
    let out: Vec<RerankedAnswer> = hyps
        .iter()
        .map(|h| {
            let inside = h.entity.is_some_and(|e| hood.contains(&e));
            RerankedAnswer {
                in_neighborhood: inside,
                final_score: if inside { h.base_logprob + alpha } else { h.base_logprob },
                ..h.clone()
            }
        })
        .collect();
    let mut chosen: Option<usize> = None;
    for (i, h) in out.iter().enumerate() {
        if chosen.is_none_or(|c| h.final_score > out[c].final_score) {
            chosen = Some(i);
        }
    }
    Ok((out, chosen))
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaRow {
    pub question: String,
    pub answer: Option<String>,
    pub hit: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QaReport {
    pub n: usize,
    pub hits: usize,
    pub rows: Vec<QaRow>,
}

impl QaReport {
    pub fn hits_at_1(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.hits as f64 / self.n as f64
        }
    }

    pub fn push(&mut self, question: &str, answer: Option<String>, hit: bool) {
        self.n += 1;
        self.hits += hit as usize;
        self.rows.push(QaRow {
            question: question.into(),
            answer,
            hit,
        });
    }
}

/// Beam hypotheses for every question (computed once, reranked per α).
pub fn predict_all<M: StepModel + Sync, E: Executor>(
    model: &M,
    vocab: &BpeVocab,
    registry: &TextRegistry,
    examples: &[QaExample],
    beam: usize,
    exec: &E,
) -> Result<Vec<Vec<RerankedAnswer>>>
where
    M::Context: Send,
{
    exec.map(examples, |_, ex| answer_question(model, vocab, registry, &ex.question, beam))
        .into_iter()
        .collect()
}

/// Hits@1 of the reranked choice, compared by surface form only.
pub fn evaluate_qa(
    examples: &[QaExample],
    predictions: &[Vec<RerankedAnswer>],
    alpha: f64,
    hops: usize,
    kg: &KnowledgeGraph,
) -> Result<QaReport> {
    let mut rep = QaReport::default();
    for (ex, hyps) in examples.iter().zip(predictions) {
        let (scored, chosen) = rerank(hyps, ex.topic, alpha, hops, kg)?;
        let answer = chosen.map(|c| scored[c].mention.clone());
        let hit = answer.as_deref().is_some_and(|a| ex.is_correct(a));
        rep.push(&ex.question, answer, hit);
    }
    Ok(rep)
}

/// Best α on validation; ties go to the smaller α.
pub fn tune_alpha(
    grid: &[f64],
    examples: &[QaExample],
    predictions: &[Vec<RerankedAnswer>],
    hops: usize,
    kg: &KnowledgeGraph,
) -> Result<(f64, Vec<(f64, f64)>)> {
    let mut table = Vec::with_capacity(grid.len());
    let mut best = (f64::NEG_INFINITY, 0.0);
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    for &a in &sorted {
        let h = evaluate_qa(examples, predictions, a, hops, kg)?.hits_at_1();
        table.push((a, h));
        if h > best.0 {
            best = (h, a);
        }
    }
    Ok((best.1, table))
}

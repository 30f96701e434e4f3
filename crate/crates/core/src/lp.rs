//! Link prediction: training examples, the training loop, candidate
//! generation by decoding, filtered ranking and metrics.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bpe::{BpeVocab, STOP};
use crate::decode::{beam_search, sample, Decoded, StepModel};
use crate::error::Result;
use crate::exec::Executor;
use crate::kg::{Direction, KgSplit, KnowledgeGraph, Query, Scope, Triple};
use crate::model::ModelState;
use crate::optim::{AdamConfig, LrSchedule};
use crate::real::Real;
use crate::textmap::{TextRegistry, VerbalizedExample};

pub const DEFAULT_BATCH: usize = 320;
pub const DEFAULT_SAMPLE_SIZE: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredCandidate {
    pub entity: u32,
    pub logprob: f64,
}

/// Token ids of one training pair; the target ends with the stop id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
}

/// Two verbalised examples per triple (tail query, then head query).
pub fn make_lp_examples(graph: &KnowledgeGraph, registry: &TextRegistry) -> Result<Vec<VerbalizedExample>> {
    let mut out = Vec::with_capacity(2 * graph.len());
    for &t in graph.triples() {
        out.extend(registry.lp_examples(t)?);
    }
    Ok(out)
}

pub fn encode_example(vocab: &BpeVocab, input: &str, target: &str) -> Encoded {
    let mut t = vocab.encode(target);
    t.push(STOP);
    Encoded {
        input: vocab.encode(input),
        target: t,
    }
}

pub fn encode_examples(vocab: &BpeVocab, examples: &[VerbalizedExample]) -> Vec<Encoded> {
    examples
        .iter()
        .map(|e| encode_example(vocab, &e.input, &e.target))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Validation interval in steps; 0 disables early stopping.
    pub eval_every: u64,
    /// Validation rounds without improvement before stopping.
    pub patience: usize,
    pub min_delta: f64,
    /// Steps of this run already applied to the state (when resuming). Their
    /// batches are redrawn and discarded so the data order matches an
    /// uninterrupted run.
    pub start_step: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: DEFAULT_BATCH,
            steps: 1000,
            schedule: LrSchedule::Warmup {
                peak: 1e-3,
                warmup: 100,
            },
            adam: AdamConfig::default(),
            seed: 0,
            log_every: 100,
            checkpoint_every: 0,
            eval_every: 0,
            patience: 3,
            min_delta: 1e-3,
            start_step: 0,
        }
    }
}

/// Callbacks from the training loop. All have no-op defaults.
pub trait TrainHooks<T> {
    fn on_log(&mut self, _step: u64, _mean_loss: f64) {}
    fn on_checkpoint(&mut self, _state: &ModelState<T>) -> Result<()> {
        Ok(())
    }
    /// Validation score, higher is better.
    fn validate(&mut self, _state: &ModelState<T>) -> Option<f64> {
        None
    }
}

pub struct NoHooks;
impl<T> TrainHooks<T> for NoHooks {}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainSummary {
    pub steps_run: u64,
    /// `(step, loss)` for every step.
    pub losses: Vec<(u64, f64)>,
    pub stopped_early: bool,
    pub best_valid: Option<f64>,
}

/// Generic loop over `(input, target)` batches drawn by `next_batch`.
pub fn train_loop<'d, T: Real, H: TrainHooks<T>>(
    state: &mut ModelState<T>,
    cfg: &TrainConfig,
    hooks: &mut H,
    mut next_batch: impl FnMut(&mut ChaCha8Rng) -> Vec<(&'d [u32], &'d [u32])>,
) -> Result<TrainSummary> {
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.start_step.min(cfg.steps) {
        next_batch(&mut data_rng);
    }
    let mut summary = TrainSummary::default();
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0usize;
    let mut window = 0.0;
    let mut in_window = 0u64;
    for i in cfg.start_step + 1..=cfg.steps {
        let batch = next_batch(&mut data_rng);
        // one dropout stream per step keeps resumed runs on the same masks
        let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d00d);
        drop_rng.set_stream(i);
        let loss = state.train_step(&batch, &cfg.schedule, &cfg.adam, &mut drop_rng)?;
        summary.steps_run = i;
        summary.losses.push((state.step, loss));
        window += loss;
        in_window += 1;
        if cfg.log_every > 0 && i % cfg.log_every == 0 {
            let mean = window / in_window as f64;
            log::info!("step {} loss {mean:.4}", state.step);
            hooks.on_log(state.step, mean);
            window = 0.0;
            in_window = 0;
        }
        if cfg.checkpoint_every > 0 && i % cfg.checkpoint_every == 0 {
            hooks.on_checkpoint(state)?;
        }
        if cfg.eval_every > 0 && i % cfg.eval_every == 0 {
            if let Some(v) = hooks.validate(state) {
                log::info!("step {} validation {v:.4}", state.step);
                if v > best + cfg.min_delta {
                    best = v;
                    stale = 0;
                } else {
                    stale += 1;
                }
                summary.best_valid = Some(best.max(v));
                if stale >= cfg.patience {
                    summary.stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(summary)
}

/// Cycles through `n` items in a fresh seeded shuffle every epoch.
pub struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    pub fn new(n: usize) -> Self {
        EpochSampler {
            order: (0..n).collect(),
            pos: n,
        }
    }

    pub fn take(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        if self.order.is_empty() {
            return out;
        }
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Teacher-forced training on link-prediction pairs, shuffled per epoch.
pub fn train_lp<T: Real, H: TrainHooks<T>>(
    state: &mut ModelState<T>,
    data: &[Encoded],
    cfg: &TrainConfig,
    hooks: &mut H,
) -> Result<TrainSummary> {
    if data.is_empty() {
        return Err(crate::error::config("no training examples"));
    }
    let mut sampler = EpochSampler::new(data.len());
    let b = cfg.batch_size.max(1);
    train_loop(state, cfg, hooks, |rng| {
        sampler
            .take(b, rng)
            .into_iter()
            .map(|j| (data[j].input.as_slice(), data[j].target.as_slice()))
            .collect()
    })
}

// ---- candidates ---------------------------------------------------------

/// Maps decoded sequences to entities; unmatched strings are dropped and
/// an entity reached by several sequences keeps its best log-probability.
pub fn collapse(decoded: &[Decoded], vocab: &BpeVocab, registry: &TextRegistry) -> Vec<ScoredCandidate> {
    let mut best: BTreeMap<u32, f64> = BTreeMap::new();
    for d in decoded {
        let Ok(text) = vocab.decode(&d.tokens) else { continue };
        if let Some(e) = registry.mention_to_entity(&text) {
            let slot = best.entry(e).or_insert(f64::NEG_INFINITY);
            *slot = slot.max(d.logprob);
        }
    }
    best.into_iter()
        .map(|(entity, logprob)| ScoredCandidate { entity, logprob })
        .collect()
}

/// How the seq2seq model proposes candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoding {
    Sample(usize),
    Beam(usize),
    /// Score every registered mention (test oracle for tiny graphs).
    Exhaustive,
}

/// Candidate generator around any step model, tokenizer and registry.
pub struct Seq2SeqRanker<'a, M> {
    pub model: &'a M,
    pub vocab: &'a BpeVocab,
    pub registry: &'a TextRegistry,
    pub decoding: Decoding,
    pub seed: u64,
    mention_ids: Vec<Vec<u32>>,
}

impl<'a, M: StepModel> Seq2SeqRanker<'a, M> {
    pub fn new(model: &'a M, vocab: &'a BpeVocab, registry: &'a TextRegistry, decoding: Decoding, seed: u64) -> Self {
        let mention_ids = registry
            .entity_mentions()
            .iter()
            .map(|m| {
                let mut ids = vocab.encode(m);
                ids.push(STOP);
                ids
            })
            .collect();
        Seq2SeqRanker {
            model,
            vocab,
            registry,
            decoding,
            seed,
            mention_ids,
        }
    }

    /// Candidates for the verbalised `input`; `stream` picks an independent
    /// random stream so results do not depend on evaluation order.
    pub fn candidates_for_text(&self, input: &str, stream: u64) -> Result<Vec<ScoredCandidate>> {
        let ctx = self.model.prepare(&self.vocab.encode(input))?;
        match self.decoding {
            Decoding::Sample(n) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(stream);
                Ok(collapse(&sample(self.model, &ctx, n, &mut rng)?, self.vocab, self.registry))
            }
            Decoding::Beam(k) => Ok(collapse(&beam_search(self.model, &ctx, k)?, self.vocab, self.registry)),
            Decoding::Exhaustive => self
                .mention_ids
                .iter()
                .enumerate()
                .map(|(e, ids)| {
                    Ok(ScoredCandidate {
                        entity: e as u32,
                        logprob: self.model.sequence_log_prob(&ctx, ids)?,
                    })
                })
                .collect(),
        }
    }

    pub fn candidates(&self, q: Query, stream: u64) -> Result<Vec<ScoredCandidate>> {
        self.candidates_for_text(&self.registry.verbalize_lp(q)?, stream)
    }
}

// ---- ranking ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub query: Query,
    pub gold: u32,
    /// 1-based filtered rank; `None` when the gold was never proposed.
    pub rank: Option<usize>,
    /// Size of the filter set `known ∖ {gold}`.
    pub num_filtered: usize,
    /// Surviving candidates, best first.
    pub candidates: Vec<ScoredCandidate>,
}

impl RankingResult {
    pub fn reciprocal_rank(&self) -> f64 {
        self.rank.map_or(0.0, |r| 1.0 / r as f64)
    }
}

/// Removes `known ∖ {gold}`, sorts by descending log-probability (ties by
/// ascending entity id) and locates the gold.
pub fn rank_query(query: Query, candidates: &[ScoredCandidate], gold: u32, known: &BTreeSet<u32>) -> RankingResult {
    let mut kept: Vec<ScoredCandidate> = candidates
        .iter()
        .filter(|c| c.entity == gold || !known.contains(&c.entity))
        .copied()
        .collect();
    kept.sort_by(|a, b| b.logprob.total_cmp(&a.logprob).then(a.entity.cmp(&b.entity)));
    let rank = kept.iter().position(|c| c.entity == gold).map(|i| i + 1);
    RankingResult {
        query,
        gold,
        rank,
        num_filtered: known.iter().filter(|&&e| e != gold).count(),
        candidates: kept,
    }
}

/// Running sums for MRR and Hits@k; merging is associative.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Metrics {
    pub n: usize,
    pub rr_sum: f64,
    pub hits1: usize,
    pub hits3: usize,
    pub hits10: usize,
}

impl Metrics {
    pub fn add(&mut self, rank: Option<usize>) {
        self.n += 1;
        if let Some(r) = rank {
            self.rr_sum += 1.0 / r as f64;
            self.hits1 += (r <= 1) as usize;
            self.hits3 += (r <= 3) as usize;
            self.hits10 += (r <= 10) as usize;
        }
    }

    pub fn merge(&mut self, o: &Metrics) {
        self.n += o.n;
        self.rr_sum += o.rr_sum;
        self.hits1 += o.hits1;
        self.hits3 += o.hits3;
        self.hits10 += o.hits10;
    }

    fn frac(&self, x: f64) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            x / self.n as f64
        }
    }

    pub fn mrr(&self) -> f64 {
        self.frac(self.rr_sum)
    }
    pub fn hits_at_1(&self) -> f64 {
        self.frac(self.hits1 as f64)
    }
    pub fn hits_at_3(&self) -> f64 {
        self.frac(self.hits3 as f64)
    }
    pub fn hits_at_10(&self) -> f64 {
        self.frac(self.hits10 as f64)
    }
}

/// Bucket by the number of other answers to filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Bucket {
    Zero,
    OneToTen,
    MoreThanTen,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Zero, Bucket::OneToTen, Bucket::MoreThanTen];

    pub fn of(count: usize) -> Self {
        match count {
            0 => Bucket::Zero,
            1..=10 => Bucket::OneToTen,
            _ => Bucket::MoreThanTen,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Bucket::Zero => "0",
            Bucket::OneToTen => "1-10",
            Bucket::MoreThanTen => ">10",
        }
    }
}

/// Which ensemble member answered a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Route {
    Seq2Seq,
    Complex,
    PathPred,
}

impl Route {
    pub fn tag(self) -> &'static str {
        match self {
            Route::Seq2Seq => "seq2seq",
            Route::Complex => "complex",
            Route::PathPred => "pathpred",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRow {
    pub query: Query,
    pub gold: u32,
    pub rank: Option<usize>,
    pub num_filtered: usize,
    /// `|train answers ∖ {gold}|`, the bucket key.
    pub train_others: usize,
    pub route: Option<Route>,
    pub best: Option<ScoredCandidate>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LpReport {
    pub overall: Metrics,
    pub buckets: [Metrics; 3],
    pub rows: Vec<QueryRow>,
}

impl LpReport {
    pub fn bucket(&self, b: Bucket) -> &Metrics {
        &self.buckets[b as usize]
    }

    /// Fraction of queries per route tag.
    pub fn route_shares(&self) -> Vec<(Route, f64)> {
        let mut counts: BTreeMap<Route, usize> = BTreeMap::new();
        for r in &self.rows {
            if let Some(route) = r.route {
                *counts.entry(route).or_default() += 1;
            }
        }
        let n = self.rows.len().max(1) as f64;
        counts.into_iter().map(|(k, c)| (k, c as f64 / n)).collect()
    }
}

/// Both directions of every probe triple.
pub fn probe_queries(probe: &[Triple]) -> Vec<(Query, u32)> {
    probe
        .iter()
        .flat_map(|&t| [Query::from_triple(t, Direction::Tail), Query::from_triple(t, Direction::Head)])
        .collect()
}

/// Filtered evaluation with any candidate source. `rank_fn` receives the
/// query, its gold answer and the query's index (for seeding).
pub fn evaluate_lp<E, F>(
    split: &KgSplit,
    probe: &[Triple],
    filter_scope: Scope,
    exec: &E,
    rank_fn: F,
) -> Result<LpReport>
where
    E: Executor,
    F: Fn(Query, u32, usize) -> Result<(Vec<ScoredCandidate>, Option<Route>)> + Sync,
{
    let queries = probe_queries(probe);
    let results = exec.map(&queries, |i, &(q, gold)| -> Result<QueryRow> {
        let (cands, route) = rank_fn(q, gold, i)?;
        let known = split.known_positives(q, filter_scope);
        let r = rank_query(q, &cands, gold, &known);
        let train_others = split.train.answers(q).iter().filter(|&&e| e != gold).count();
        Ok(QueryRow {
            query: q,
            gold,
            rank: r.rank,
            num_filtered: r.num_filtered,
            train_others,
            route,
            best: r.candidates.first().copied(),
        })
    });
    let mut report = LpReport::default();
    for row in results {
        let row = row?;
        report.overall.add(row.rank);
        report.buckets[Bucket::of(row.train_others) as usize].add(row.rank);
        report.rows.push(row);
    }
    Ok(report)
}

/// `(1/N)·Σ_{k=1..N} 1/k`: expected reciprocal rank of a uniformly random
/// ranking over `n` entities.
pub fn random_mrr(n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    (1..=n).map(|k| 1.0 / k as f64).sum::<f64>() / n as f64
}

pub fn format_metrics(label: &str, m: &Metrics) -> String {
    format!(
        "{label}\tn={}\tMRR={:.4}\tH@1={:.4}\tH@3={:.4}\tH@10={:.4}",
        m.n,
        m.mrr(),
        m.hits_at_1(),
        m.hits_at_3(),
        m.hits_at_10()
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Serial;
    use alloc::vec;

    fn sc(entity: u32, logprob: f64) -> ScoredCandidate {
        ScoredCandidate { entity, logprob }
    }

    #[test]
    fn sole_candidate_ranks_first() {
        let r = rank_query(Query::tail(0, 0), &[sc(4, -1.0)], 4, &BTreeSet::new());
        assert_eq!(r.rank, Some(1));
    }

    #[test]
    fn missing_gold_is_unranked() {
        let r = rank_query(Query::tail(0, 0), &[sc(1, -1.0)], 4, &BTreeSet::new());
        assert_eq!(r.rank, None);
        assert_eq!(r.reciprocal_rank(), 0.0);
    }

    #[test]
    fn filtered_rank_matches_a_sort_scan() {
        let cands = [sc(0, -0.5), sc(1, -0.1), sc(2, -2.0), sc(3, -0.3), sc(4, -0.3)];
        let known: BTreeSet<u32> = [1, 3, 4].into_iter().collect(); // gold 4 stays
        let r = rank_query(Query::tail(9, 0), &cands, 4, &known);
        // independent oracle: count strictly better survivors, then equal ones with smaller id
        let better = cands
            .iter()
            .filter(|c| c.entity != 4 && !known.contains(&c.entity))
            .filter(|c| c.logprob > -0.3 || (c.logprob == -0.3 && c.entity < 4))
            .count();
        assert_eq!(r.rank, Some(better + 1));
        assert_eq!(r.num_filtered, 2);
        assert_eq!(r.candidates.len(), 3);
    }

    #[test]
    fn ties_break_by_entity_id() {
        let r = rank_query(Query::tail(0, 0), &[sc(7, -1.0), sc(3, -1.0)], 7, &BTreeSet::new());
        assert_eq!(r.rank, Some(2));
    }

    #[test]
    fn metrics_and_buckets() {
        let mut m = Metrics::default();
        m.add(Some(1));
        m.add(Some(4));
        m.add(None);
        assert!((m.mrr() - (1.0 + 0.25) / 3.0).abs() < 1e-15);
        assert_eq!((m.hits1, m.hits3, m.hits10), (1, 1, 2));
        assert_eq!(Bucket::of(0), Bucket::Zero);
        assert_eq!(Bucket::of(10), Bucket::OneToTen);
        assert_eq!(Bucket::of(11), Bucket::MoreThanTen);
    }

    #[test]
    fn perfect_ranker_scores_one() {
        let g = KnowledgeGraph::new(vec![Triple::new(0, 0, 1), Triple::new(1, 0, 2)], 3, 1).unwrap();
        let split = crate::kg::drop_edges(&g, 0.0, 0).unwrap();
        let rep = evaluate_lp(&split, g.triples(), Scope::ALL, &Serial, |_, gold, _| {
            Ok((vec![sc(gold, 0.0)], None))
        })
        .unwrap();
        assert_eq!(rep.overall.n, 4);
        assert_eq!(rep.overall.mrr(), 1.0);
        assert_eq!(rep.overall.hits_at_1(), 1.0);
    }

    #[test]
    fn random_baseline_formula() {
        assert_eq!(random_mrr(1), 1.0);
        assert!((random_mrr(2) - 0.75).abs() < 1e-15);
        assert!((random_mrr(64) - 0.0738).abs() < 1e-3);
    }

    #[test]
    fn epoch_sampler_visits_everything_once_per_epoch() {
        let mut s = EpochSampler::new(5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = s.take(5, &mut rng);
        a.sort();
        assert_eq!(a, [0, 1, 2, 3, 4]);
    }

    #[test]
    fn zero_steps_change_nothing() {
        use crate::model::{ModelConfig, Seq2Seq};
        let mut c = ModelConfig::desk(10);
        c.d_model = 8;
        c.n_heads = 2;
        c.d_ff = 8;
        c.n_enc_layers = 1;
        c.n_dec_layers = 1;
        let mut st = ModelState::new(Seq2Seq::<f32>::new(c, 0).unwrap());
        let before = st.model.params().to_vec();
        let data = [Encoded {
            input: vec![3],
            target: vec![4, STOP],
        }];
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let s = train_lp(&mut st, &data, &cfg, &mut NoHooks).unwrap();
        assert_eq!(s.steps_run, 0);
        assert_eq!(st.model.params(), before.as_slice());
    }

    #[test]
    fn resumed_training_matches_an_uninterrupted_run() {
        use crate::model::{ModelConfig, Seq2Seq};
        let mut c = ModelConfig::desk(10);
        (c.d_model, c.n_heads, c.d_ff, c.n_enc_layers, c.n_dec_layers, c.dropout) = (8, 2, 8, 1, 1, 0.2);
        let data: Vec<Encoded> = (3..9)
            .map(|t| Encoded {
                input: vec![t, 3],
                target: vec![t + 1, STOP],
            })
            .collect();
        let cfg = TrainConfig {
            batch_size: 4,
            steps: 6,
            ..TrainConfig::default()
        };
        let fresh = || ModelState::new(Seq2Seq::<f64>::new(c, 1).unwrap());
        let mut whole = fresh();
        train_lp(&mut whole, &data, &cfg, &mut NoHooks).unwrap();
        let mut part = fresh();
        train_lp(&mut part, &data, &TrainConfig { steps: 3, ..cfg }, &mut NoHooks).unwrap();
        let s = train_lp(&mut part, &data, &TrainConfig { start_step: 3, ..cfg }, &mut NoHooks).unwrap();
        assert_eq!(s.losses.len(), 3);
        assert_eq!(part.step, 6);
        assert_eq!(part.model.params(), whole.model.params());
        assert_eq!(part.adam, whole.adam);
    }
}

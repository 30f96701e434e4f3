//! Autoregressive decoding: ancestral sampling, beam search and sequence
//! scoring over any model with a next-token distribution.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Binomial;

use crate::bpe::{PAD, STOP};
use crate::error::{domain, Result};
use crate::model::{DecoderState, Encoded, Seq2Seq};
use crate::real::Real;
use crate::tensor::log_softmax;

/// A model exposing next-token log-probabilities with branchable state.
pub trait StepModel {
    type Context;
    type State: Clone;

    fn prepare(&self, input: &[u32]) -> Result<Self::Context>;

    /// State after the start token, with log-probabilities of the first token.
    fn start(&self, ctx: &Self::Context) -> Result<(Self::State, Vec<f64>)>;

    /// Feeds `token` after `state`; returns the new state and the
    /// log-probabilities of the token that follows.
    fn extend(&self, ctx: &Self::Context, state: &Self::State, token: u32) -> Result<(Self::State, Vec<f64>)>;

    fn stop_id(&self) -> u32 {
        STOP
    }

    /// Longest sequence, stop token included, the decoder may emit.
    fn max_decode_len(&self) -> usize;

    /// `Σ_t log p(w_t | w_<t)` for a full sequence ending in the stop token.
    fn sequence_log_prob(&self, ctx: &Self::Context, seq: &[u32]) -> Result<f64> {
        let (mut state, mut lp) = self.start(ctx)?;
        let mut total = 0.0;
        for (i, &w) in seq.iter().enumerate() {
            total += *lp
                .get(w as usize)
                .ok_or_else(|| domain(alloc::format!("token {w} outside vocabulary")))?;
            if i + 1 < seq.len() {
                (state, lp) = self.extend(ctx, &state, w)?;
            }
        }
        Ok(total)
    }
}

impl<T: Real> StepModel for Seq2Seq<T> {
    type Context = Encoded<T>;
    type State = DecoderState<T>;

    fn prepare(&self, input: &[u32]) -> Result<Encoded<T>> {
        self.encode(input)
    }

    fn start(&self, ctx: &Encoded<T>) -> Result<(DecoderState<T>, Vec<f64>)> {
        let mut st = self.start_state();
        let logits = self.step(ctx, &mut st, PAD)?;
        Ok((st, log_softmax(&logits)))
    }

    fn extend(&self, ctx: &Encoded<T>, state: &DecoderState<T>, token: u32) -> Result<(DecoderState<T>, Vec<f64>)> {
        let mut st = state.clone();
        let logits = self.step(ctx, &mut st, token)?;
        Ok((st, log_softmax(&logits)))
    }

    fn max_decode_len(&self) -> usize {
        self.config().max_len
    }
}

/// A finished sequence (stop token excluded from `tokens`, included in `logprob`).
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<u32>,
    pub logprob: f64,
    /// How many of the draws produced this sequence (1 for beam results).
    pub count: usize,
}

fn probs(lp: &[f64]) -> Vec<f64> {
    lp.iter().map(|&l| libm::exp(l)).collect()
}

/// Draws `n` ancestral samples at temperature 1. Draws that share a prefix
/// are advanced together: at each distinct prefix the counts of the next
/// token are drawn from a multinomial, which gives the same joint law as
/// `n` independent samples. Draws reaching the length limit without the
/// stop token are discarded.
pub fn sample<M: StepModel, G: Rng>(model: &M, ctx: &M::Context, n: usize, rng: &mut G) -> Result<Vec<Decoded>> {
    let stop = model.stop_id();
    let max_len = model.max_decode_len();
    let mut out = Vec::new();
    if n == 0 || max_len == 0 {
        return Ok(out);
    }
    let (state, lp) = model.start(ctx)?;
    let mut stack = vec![(state, lp, Vec::<u32>::new(), 0.0f64, n)];
    while let Some((state, lp, prefix, score, count)) = stack.pop() {
        let counts = multinomial(count, &probs(&lp), rng);
        for (tok, c) in counts {
            let s = score + lp[tok as usize];
            if tok == stop {
                out.push(Decoded {
                    tokens: prefix.clone(),
                    logprob: s,
                    count: c,
                });
            } else if prefix.len() + 1 < max_len {
                let (st, next) = model.extend(ctx, &state, tok)?;
                let mut p = prefix.clone();
                p.push(tok);
                stack.push((st, next, p, s, c));
            }
        }
    }
    out.sort_by(|a, b| a.tokens.cmp(&b.tokens));
    Ok(out)
}

/// Non-zero category counts of `n` draws, in category order.
fn multinomial<G: Rng>(n: usize, p: &[f64], rng: &mut G) -> Vec<(u32, usize)> {
    let mut out = Vec::new();
    let mut left = n as u64;
    let mut mass: f64 = p.iter().sum();
    let last = p.iter().rposition(|&x| x > 0.0);
    for (i, &pi) in p.iter().enumerate() {
        if left == 0 {
            break;
        }
        if pi <= 0.0 {
            continue;
        }
        let c = if Some(i) == last || mass <= pi {
            left
        } else {
            let q = (pi / mass).clamp(0.0, 1.0);
            Binomial::new(left, q).expect("valid binomial").sample(rng)
        };
        mass -= pi;
        if c > 0 {
            out.push((i as u32, c as usize));
            left -= c;
        }
    }
    out
}

/// Reference sampler: `n` fully independent ancestral draws.
pub fn sample_naive<M: StepModel, G: Rng>(model: &M, ctx: &M::Context, n: usize, rng: &mut G) -> Result<Vec<Decoded>> {
    let stop = model.stop_id();
    let max_len = model.max_decode_len();
    let mut seen: BTreeMap<Vec<u32>, Decoded> = BTreeMap::new();
    for _ in 0..n {
        let (mut state, mut lp) = model.start(ctx)?;
        let mut prefix = Vec::new();
        let mut score = 0.0;
        loop {
            let dist = WeightedIndex::new(probs(&lp)).map_err(|e| domain(alloc::format!("{e}")))?;
            let tok = dist.sample(rng) as u32;
            score += lp[tok as usize];
            if tok == stop {
                seen.entry(prefix.clone())
                    .and_modify(|d| d.count += 1)
                    .or_insert(Decoded {
                        tokens: prefix,
                        logprob: score,
                        count: 1,
                    });
                break;
            }
            if prefix.len() + 1 >= max_len {
                break;
            }
            (state, lp) = model.extend(ctx, &state, tok)?;
            prefix.push(tok);
        }
    }
    Ok(seen.into_values().collect())
}

/// Length-unnormalised beam search. Returns up to `beam` finished
/// sequences by descending log-probability; ties keep the earlier sequence
/// in token order.
pub fn beam_search<M: StepModel>(model: &M, ctx: &M::Context, beam: usize) -> Result<Vec<Decoded>> {
    let stop = model.stop_id();
    let max_len = model.max_decode_len();
    let mut finished: Vec<Decoded> = Vec::new();
    if beam == 0 || max_len == 0 {
        return Ok(finished);
    }
    let (state, lp) = model.start(ctx)?;
    let mut active = vec![(state, lp, Vec::<u32>::new(), 0.0f64)];
    while !active.is_empty() {
        let mut cand: Vec<(f64, usize, u32)> = Vec::new();
        for (h, (_, lp, _, score)) in active.iter().enumerate() {
            for (tok, &l) in lp.iter().enumerate() {
                if l.is_finite() {
                    cand.push((score + l, h, tok as u32));
                }
            }
        }
        cand.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| active[a.1].2.cmp(&active[b.1].2))
                .then(a.2.cmp(&b.2))
        });
        cand.truncate(beam);
        let mut next = Vec::new();
        for (s, h, tok) in cand {
            let (state, _, prefix, _) = &active[h];
            if tok == stop {
                finished.push(Decoded {
                    tokens: prefix.clone(),
                    logprob: s,
                    count: 1,
                });
            } else if prefix.len() + 1 < max_len {
                let (st, lp) = model.extend(ctx, state, tok)?;
                let mut p = prefix.clone();
                p.push(tok);
                next.push((st, lp, p, s));
            }
        }
        finished.sort_by(|a, b| b.logprob.total_cmp(&a.logprob).then_with(|| a.tokens.cmp(&b.tokens)));
        finished.truncate(beam);
        active = next;
        if finished.len() == beam {
            let worst = finished[beam - 1].logprob;
            let best_active = active.iter().map(|a| a.3).fold(f64::NEG_INFINITY, f64::max);
            if best_active <= worst {
                break;
            }
        }
    }
    Ok(finished)
}

/// Argmax decoding until the stop token or the length limit.
pub fn greedy<M: StepModel>(model: &M, ctx: &M::Context) -> Result<Option<Decoded>> {
    let stop = model.stop_id();
    let (mut state, mut lp) = model.start(ctx)?;
    let mut tokens = Vec::new();
    let mut score = 0.0;
    for _ in 0..model.max_decode_len() {
        let tok = (0..lp.len())
            .max_by(|&a, &b| lp[a].total_cmp(&lp[b]).then(b.cmp(&a)))
            .ok_or_else(|| domain("empty distribution"))? as u32;
        score += lp[tok as usize];
        if tok == stop {
            return Ok(Some(Decoded {
                tokens,
                logprob: score,
                count: 1,
            }));
        }
        (state, lp) = model.extend(ctx, &state, tok)?;
        tokens.push(tok);
    }
    Ok(None)
}

/// An enumerable toy model: a fixed distribution over whole sequences
/// (stop token excluded), exposed through its prefix-conditional laws.
#[derive(Debug, Clone)]
pub struct TableModel {
    seqs: Vec<(Vec<u32>, f64)>,
    vocab: usize,
    max_len: usize,
}

impl TableModel {
    /// `seqs` must have positive weights; they are normalised.
    pub fn new(seqs: Vec<(Vec<u32>, f64)>, vocab: usize) -> Result<Self> {
        let total: f64 = seqs.iter().map(|s| s.1).sum();
        if !(total > 0.0) || seqs.iter().any(|s| s.1 < 0.0 || s.0.contains(&STOP)) {
            return Err(domain("table needs positive weights and stop-free sequences"));
        }
        if seqs.iter().flat_map(|s| &s.0).any(|&t| t as usize >= vocab) || (STOP as usize) >= vocab {
            return Err(domain("table token outside vocabulary"));
        }
        let max_len = seqs.iter().map(|s| s.0.len() + 1).max().unwrap_or(1);
        Ok(TableModel {
            seqs: seqs.into_iter().map(|(s, w)| (s, w / total)).collect(),
            vocab,
            max_len,
        })
    }

    /// Exact probability of a sequence (stop excluded).
    pub fn prob(&self, tokens: &[u32]) -> f64 {
        self.seqs.iter().filter(|s| s.0 == tokens).map(|s| s.1).sum()
    }

    pub fn sequences(&self) -> &[(Vec<u32>, f64)] {
        &self.seqs
    }

    fn next(&self, prefix: &[u32]) -> Vec<f64> {
        let mut p = vec![0.0; self.vocab];
        let mut total = 0.0;
        for (s, w) in &self.seqs {
            if s.len() >= prefix.len() && &s[..prefix.len()] == prefix {
                total += w;
                match s.get(prefix.len()) {
                    Some(&t) => p[t as usize] += w,
                    None => p[STOP as usize] += w,
                }
            }
        }
        p.iter()
            .map(|&x| if x > 0.0 { libm::log(x / total) } else { f64::NEG_INFINITY })
            .collect()
    }
}

impl StepModel for TableModel {
    type Context = ();
    type State = Vec<u32>;

    fn prepare(&self, _input: &[u32]) -> Result<()> {
        Ok(())
    }

    fn start(&self, _ctx: &()) -> Result<(Vec<u32>, Vec<f64>)> {
        Ok((Vec::new(), self.next(&[])))
    }

    fn extend(&self, _ctx: &(), state: &Vec<u32>, token: u32) -> Result<(Vec<u32>, Vec<f64>)> {
        let mut s = state.clone();
        s.push(token);
        let lp = self.next(&s);
        Ok((s, lp))
    }

    fn max_decode_len(&self) -> usize {
        self.max_len
    }
}

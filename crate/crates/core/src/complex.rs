//! ComplEx embeddings trained with 1vsAll cross-entropy.
//!
//! Each embedding row stores the real parts followed by the imaginary parts.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config, domain, Error, Result};
use crate::exec::Executor;
use crate::kg::{Direction, KgSplit, KnowledgeGraph, Query, Scope, Triple};
use crate::lp::{evaluate_lp, LpReport, ScoredCandidate};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::{log_softmax, Tensor};

pub const INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexModel {
    pub rank: usize,
    pub seed: u64,
    /// `[|E|, 2·rank]`
    pub entities: Tensor<f64>,
    /// `[|R|, 2·rank]`
    pub relations: Tensor<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexConfig {
    pub rank: usize,
    pub steps: u64,
    pub lr: f64,
    /// Triples per step; each contributes a tail and a head query.
    pub batch_size: usize,
    pub seed: u64,
    /// L2 penalty on all embeddings; 0 disables it.
    pub weight_decay: f64,
}

impl Default for ComplexConfig {
    fn default() -> Self {
        ComplexConfig {
            rank: 32,
            steps: 1000,
            lr: 0.01,
            batch_size: 128,
            seed: 0,
            weight_decay: 0.0,
        }
    }
}

impl ComplexModel {
    pub fn new(num_entities: usize, num_relations: usize, rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(config("ComplEx rank must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).map_err(|_| domain("bad init std"))?;
        let mut fill = |rows: usize| {
            let data = (0..rows * 2 * rank).map(|_| normal.sample(&mut rng)).collect();
            Tensor::new(vec![rows, 2 * rank], data)
        };
        Ok(ComplexModel {
            rank,
            seed,
            entities: fill(num_entities)?,
            relations: fill(num_relations)?,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.entities.shape()[0]
    }

    pub fn num_relations(&self) -> usize {
        self.relations.shape()[0]
    }

    fn check(&self, e: &[u32], r: u32) -> Result<()> {
        if e.iter().any(|&x| x as usize >= self.num_entities()) || r as usize >= self.num_relations() {
            return Err(domain("id out of range for ComplEx model"));
        }
        Ok(())
    }

    /// `Re(Σ_k s_k · p_k · conj(o_k))`
    pub fn score_triple(&self, s: u32, p: u32, o: u32) -> Result<f64> {
        self.check(&[s, o], p)?;
        let d = self.rank;
        let (es, ep, eo) = (self.entities.row(s as usize), self.relations.row(p as usize), self.entities.row(o as usize));
        let mut acc = 0.0;
        for k in 0..d {
            let (a, b) = (es[k], es[d + k]);
            let (c, dd) = (ep[k], ep[d + k]);
            let (e, f) = (eo[k], eo[d + k]);
            acc += (a * c - b * dd) * e + (a * dd + b * c) * f;
        }
        Ok(acc)
    }

    /// The query folded into one complex vector so that the score of a
    /// candidate `x` is `Re⟨q, x⟩ = Σ q_re·x_re + q_im·x_im`.
    fn query_vector(&self, q: Query) -> Vec<f64> {
        let d = self.rank;
        let ep = self.relations.row(q.relation as usize);
        let ea = self.entities.row(q.anchor as usize);
        let mut v = vec![0.0; 2 * d];
        for k in 0..d {
            let (c, dd) = (ep[k], ep[d + k]);
            let (x, y) = (ea[k], ea[d + k]);
            match q.direction {
                // s·p
                Direction::Tail => {
                    v[k] = x * c - y * dd;
                    v[d + k] = x * dd + y * c;
                }
                // p·conj(o)
                Direction::Head => {
                    v[k] = c * x + dd * y;
                    v[d + k] = c * y - dd * x;
                }
            }
        }
        v
    }

    /// Raw scores for every entity as the answer of `q`.
    pub fn score_all(&self, q: Query) -> Result<Vec<f64>> {
        self.check(&[q.anchor], q.relation)?;
        let v = self.query_vector(q);
        Ok((0..self.num_entities())
            .map(|e| self.entities.row(e).iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Every entity with its log-softmax score.
    pub fn candidates(&self, q: Query) -> Result<Vec<ScoredCandidate>> {
        let lp = log_softmax(&self.score_all(q)?);
        Ok(lp
            .into_iter()
            .enumerate()
            .map(|(e, logprob)| ScoredCandidate {
                entity: e as u32,
                logprob,
            })
            .collect())
    }

    /// Mean 1vsAll cross-entropy over both directions of `batch`, and the
    /// gradients with respect to `[entities, relations]`.
    pub fn loss_and_grad(&self, batch: &[Triple], weight_decay: f64) -> Result<(f64, [Tensor<f64>; 2])> {
        let d = self.rank;
        let ne = self.num_entities();
        let mut ge = Tensor::<f64>::zeros(self.entities.shape());
        let mut gr = Tensor::<f64>::zeros(self.relations.shape());
        if batch.is_empty() {
            return Ok((0.0, [ge, gr]));
        }
        let norm = 1.0 / (2 * batch.len()) as f64;
        let mut loss = 0.0;
        for &t in batch {
            self.check(&[t.s, t.o], t.p)?;
            for dir in [Direction::Tail, Direction::Head] {
                let (q, gold) = Query::from_triple(t, dir);
                let v = self.query_vector(q);
                let scores: Vec<f64> = (0..ne)
                    .map(|e| self.entities.row(e).iter().zip(&v).map(|(a, b)| a * b).sum())
                    .collect();
                let lp = log_softmax(&scores);
                loss -= lp[gold as usize] * norm;
                // dL/dscore = softmax − onehot
                let g: Vec<f64> = lp
                    .iter()
                    .enumerate()
                    .map(|(e, &l)| (libm::exp(l) - (e as u32 == gold) as u8 as f64) * norm)
                    .collect();
                let mut gv = vec![0.0; 2 * d];
                {
                    let ged = ge.data_mut();
                    for (e, &ge_e) in g.iter().enumerate() {
                        let row = self.entities.row(e);
                        for j in 0..2 * d {
                            gv[j] += ge_e * row[j];
                            ged[e * 2 * d + j] += ge_e * v[j];
                        }
                    }
                }
                // chain through the query vector
                let ep = self.relations.row(q.relation as usize);
                let ea = self.entities.row(q.anchor as usize);
                let a0 = q.anchor as usize * 2 * d;
                let r0 = q.relation as usize * 2 * d;
                let (ged, grd) = (ge.data_mut(), gr.data_mut());
                for k in 0..d {
                    let (c, dd) = (ep[k], ep[d + k]);
                    let (x, y) = (ea[k], ea[d + k]);
                    let (gu, gw) = (gv[k], gv[d + k]);
                    match dir {
                        Direction::Tail => {
                            // u = xc − y·dd, w = x·dd + yc
                            ged[a0 + k] += gu * c + gw * dd;
                            ged[a0 + d + k] += -gu * dd + gw * c;
                            grd[r0 + k] += gu * x + gw * y;
                            grd[r0 + d + k] += -gu * y + gw * x;
                        }
                        Direction::Head => {
                            // u = cx + dd·y, w = cy − dd·x
                            ged[a0 + k] += gu * c - gw * dd;
                            ged[a0 + d + k] += gu * dd + gw * c;
                            grd[r0 + k] += gu * x + gw * y;
                            grd[r0 + d + k] += gu * y - gw * x;
                        }
                    }
                }
            }
        }
        if weight_decay > 0.0 {
            for (p, g) in [(&self.entities, &mut ge), (&self.relations, &mut gr)] {
                for (gi, &pi) in g.data_mut().iter_mut().zip(p.data()) {
                    *gi += weight_decay * pi;
                }
                loss += 0.5 * weight_decay * p.data().iter().map(|x| x * x).sum::<f64>();
            }
        }
        Ok((loss, [ge, gr]))
    }
}

/// Trains from a seeded init with Adam on shuffled minibatches.
pub fn train_complex(graph: &KnowledgeGraph, cfg: &ComplexConfig) -> Result<(ComplexModel, Vec<f64>)> {
    let mut model = ComplexModel::new(graph.num_entities(), graph.num_relations(), cfg.rank, cfg.seed)?;
    let mut adam = AdamState::zeros_like(&[model.entities.clone(), model.relations.clone()]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<Triple> = graph.triples().to_vec();
    let b = cfg.batch_size.max(1).min(order.len());
    let mut pos = order.len();
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    if order.is_empty() {
        return Ok((model, losses));
    }
    for step in 1..=cfg.steps {
        if pos + b > order.len() {
            order.shuffle(&mut rng);
            pos = 0;
        }
        let (loss, grads) = model.loss_and_grad(&order[pos..pos + b], cfg.weight_decay)?;
        pos += b;
        if !loss.is_finite() {
            return Err(Error::NonFinite { step });
        }
        let take = |t: &mut Tensor<f64>| core::mem::replace(t, Tensor::zeros(&[0]));
        let mut params = [take(&mut model.entities), take(&mut model.relations)];
        adam_step(&mut params, &grads, &mut adam, cfg.lr, &AdamConfig::default())?;
        [model.entities, model.relations] = params;
        losses.push(loss);
        if step % 100 == 0 {
            log::info!("complex step {step} loss {loss:.4}");
        }
    }
    Ok((model, losses))
}

/// Exhaustive filtered evaluation through the shared ranking code.
pub fn evaluate_complex<E: Executor>(
    model: &ComplexModel,
    split: &KgSplit,
    probe: &[Triple],
    filter_scope: Scope,
    exec: &E,
) -> Result<LpReport> {
    evaluate_lp(split, probe, filter_scope, exec, |q, _, _| Ok((model.candidates(q)?, None)))
}

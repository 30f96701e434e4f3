//! Encoder-decoder transformer: relative position biases shared across the
//! layers of each stack, pre-norm residual blocks, ReLU feed-forward layers
//! and a shared input/output embedding.
//!
//! Training runs on the autodiff tape with the batch packed row-wise;
//! attention is computed per example, so no padding or masking of pad
//! positions is needed. Inference uses a tape-free path with cached
//! encoder keys/values and incremental decoder state.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::bpe::PAD;
use crate::error::{domain, Error, Result};
use crate::optim::{adam_step, AdamConfig, AdamState, LrSchedule};
use crate::real::Real;
use crate::tensor::{dot, gemm_nn, gemm_nt, Tensor};

const LN_EPS: f64 = 1e-6;
const MASKED: f64 = -1e9;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub vocab_size: usize,
    /// Longest accepted input or target, in tokens.
    pub max_len: usize,
    pub dropout: f64,
    pub num_buckets: usize,
    pub max_distance: usize,
}

impl ModelConfig {
    /// Desk-scale default.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            n_enc_layers: 3,
            n_dec_layers: 3,
            vocab_size,
            max_len: 64,
            dropout: 0.1,
            num_buckets: 32,
            max_distance: 128,
        }
    }

    /// The published small preset; only used for shape bookkeeping here.
    pub fn t5_small() -> Self {
        ModelConfig {
            d_model: 512,
            n_heads: 8,
            d_ff: 2048,
            n_enc_layers: 6,
            n_dec_layers: 6,
            vocab_size: 32128,
            max_len: 512,
            dropout: 0.1,
            num_buckets: 32,
            max_distance: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab_size < 3 || self.d_ff == 0 || self.max_len == 0 {
            return bad("vocab_size, d_ff and max_len must be positive (vocab >= 3)".into());
        }
        if self.num_buckets < 4 || self.max_distance < self.num_buckets / 2 {
            return bad("need num_buckets >= 4 and max_distance >= num_buckets / 2".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Number of scalar parameters.
    pub fn param_count(&self) -> usize {
        Layout::new(self)
            .specs
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }
}

/// T5 relative position bucket for `relative = key_pos − query_pos`.
pub fn relative_bucket(relative: i64, bidirectional: bool, num_buckets: usize, max_distance: usize) -> usize {
    let mut ret = 0usize;
    let mut n = -relative;
    let mut buckets = num_buckets;
    if bidirectional {
        buckets /= 2;
        if n < 0 {
            ret += buckets;
        }
        n = n.abs();
    } else {
        n = n.max(0);
    }
    let max_exact = buckets / 2;
    let n = n as usize;
    if n < max_exact {
        return ret + n;
    }
    let ratio = libm::log(n as f64 / max_exact as f64) / libm::log(max_distance as f64 / max_exact as f64);
    let large = max_exact + (ratio * (buckets - max_exact) as f64) as usize;
    ret + large.min(buckets - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Normal,
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    q: usize,
    k: usize,
    v: usize,
    o: usize,
}

#[derive(Debug, Clone, Copy)]
struct Ff {
    wi: usize,
    wo: usize,
}

#[derive(Debug, Clone, Copy)]
struct EncLayer {
    ln_attn: Norm,
    attn: Attn,
    ln_ff: Norm,
    ff: Ff,
}

#[derive(Debug, Clone, Copy)]
struct DecLayer {
    ln_self: Norm,
    self_attn: Attn,
    ln_cross: Norm,
    cross: Attn,
    ln_ff: Norm,
    ff: Ff,
}

#[derive(Debug, Clone)]
struct Layout {
    specs: Vec<ParamSpec>,
    embed: usize,
    enc_bias: usize,
    dec_bias: usize,
    enc: Vec<EncLayer>,
    enc_norm: Norm,
    dec: Vec<DecLayer>,
    dec_norm: Norm,
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let mut specs = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| {
            specs.push(ParamSpec { name, shape, init });
            specs.len() - 1
        };
        let (d, f) = (c.d_model, c.d_ff);
        let embed = add("shared.embedding".into(), vec![c.vocab_size, d], Init::Normal);
        let enc_bias = add("encoder.relative_bias".into(), vec![c.num_buckets, c.n_heads], Init::Normal);
        let dec_bias = add("decoder.relative_bias".into(), vec![c.num_buckets, c.n_heads], Init::Normal);
        let norm = |add: &mut dyn FnMut(String, Vec<usize>, Init) -> usize, p: &str| Norm {
            gain: add(format!("{p}.gain"), vec![d], Init::Ones),
            bias: add(format!("{p}.bias"), vec![d], Init::Zeros),
        };
        let attn = |add: &mut dyn FnMut(String, Vec<usize>, Init) -> usize, p: &str| Attn {
            q: add(format!("{p}.q"), vec![d, d], Init::Normal),
            k: add(format!("{p}.k"), vec![d, d], Init::Normal),
            v: add(format!("{p}.v"), vec![d, d], Init::Normal),
            o: add(format!("{p}.o"), vec![d, d], Init::Normal),
        };
        let ff = |add: &mut dyn FnMut(String, Vec<usize>, Init) -> usize, p: &str| Ff {
            wi: add(format!("{p}.wi"), vec![d, f], Init::Normal),
            wo: add(format!("{p}.wo"), vec![f, d], Init::Normal),
        };
        let mut enc = Vec::new();
        for l in 0..c.n_enc_layers {
            let p = format!("encoder.layer{l}");
            enc.push(EncLayer {
                ln_attn: norm(&mut add, &format!("{p}.attn_norm")),
                attn: attn(&mut add, &format!("{p}.attn")),
                ln_ff: norm(&mut add, &format!("{p}.ff_norm")),
                ff: ff(&mut add, &format!("{p}.ff")),
            });
        }
        let enc_norm = norm(&mut add, "encoder.final_norm");
        let mut dec = Vec::new();
        for l in 0..c.n_dec_layers {
            let p = format!("decoder.layer{l}");
            dec.push(DecLayer {
                ln_self: norm(&mut add, &format!("{p}.self_norm")),
                self_attn: attn(&mut add, &format!("{p}.self_attn")),
                ln_cross: norm(&mut add, &format!("{p}.cross_norm")),
                cross: attn(&mut add, &format!("{p}.cross_attn")),
                ln_ff: norm(&mut add, &format!("{p}.ff_norm")),
                ff: ff(&mut add, &format!("{p}.ff")),
            });
        }
        let dec_norm = norm(&mut add, "decoder.final_norm");
        Layout {
            specs,
            embed,
            enc_bias,
            dec_bias,
            enc,
            enc_norm,
            dec,
            dec_norm,
        }
    }
}

/// Transformer weights. Parameters are stored in a fixed order given by
/// [`Seq2Seq::param_specs`].
#[derive(Debug, Clone)]
pub struct Seq2Seq<T> {
    config: ModelConfig,
    layout: Layout,
    params: Vec<Tensor<T>>,
}

/// Per-example key/value rows cached from the encoder for every decoder layer.
#[derive(Debug, Clone)]
pub struct Encoded<T> {
    len: usize,
    cross_k: Vec<Vec<T>>,
    cross_v: Vec<Vec<T>>,
}

/// Decoder self-attention keys/values for the positions fed so far.
#[derive(Debug, Clone)]
pub struct DecoderState<T> {
    pos: usize,
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T> DecoderState<T> {
    /// Number of tokens fed, including the start token.
    pub fn len(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos == 0
    }
}

type R = ChaCha8Rng;

impl<T: Real> Seq2Seq<T> {
    /// Seeded initialisation: normal(0, 0.02) weights, unit gains, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let params = layout
            .specs
            .iter()
            .map(|s| {
                let n = s.shape.iter().product();
                let data = match s.init {
                    Init::Normal => (0..n).map(|_| T::from_f64(normal.sample(&mut rng))).collect(),
                    Init::Ones => vec![T::one(); n],
                    Init::Zeros => vec![T::zero(); n],
                };
                Tensor::new(s.shape.clone(), data).expect("param shape")
            })
            .collect();
        Ok(Seq2Seq {
            config,
            layout,
            params,
        })
    }

    /// Rebuilds a model from stored tensors, checking every shape.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.specs.len() {
            return Err(domain(format!(
                "expected {} parameter tensors, got {}",
                layout.specs.len(),
                params.len()
            )));
        }
        for (s, p) in layout.specs.iter().zip(&params) {
            if p.shape() != s.shape.as_slice() {
                return Err(Error::Shape {
                    op: "load_param",
                    left: s.shape.clone(),
                    right: p.shape().to_vec(),
                });
            }
        }
        Ok(Seq2Seq {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.layout.specs
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<Tensor<T>> {
        self.params
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_len {
            return Err(Error::Overlength {
                len,
                max: self.config.max_len,
            });
        }
        Ok(())
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(domain(format!("token id {bad} outside vocabulary {}", self.config.vocab_size)));
        }
        Ok(())
    }

    // ---- tape path -------------------------------------------------------

    /// Logits `[Σ len(dec_inputs), vocab]` for a packed batch. Row `t` of an
    /// example depends on its input and `dec_input[..=t]` only.
    pub fn forward_tape<'p>(
        &'p self,
        tape: &Tape<'p, T>,
        inputs: &[&[u32]],
        dec_inputs: &[&[u32]],
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        if inputs.len() != dec_inputs.len() || inputs.is_empty() {
            return Err(domain("need one decoder input per encoder input"));
        }
        for s in inputs.iter().chain(dec_inputs) {
            if s.is_empty() {
                return Err(domain("empty token sequence"));
            }
            self.check_len(s.len())?;
            self.check_ids(s)?;
        }
        let p: Vec<Var> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(t, i))
            .collect();
        let lay = &self.layout;
        let rate = self.config.dropout;
        let segs = |xs: &[&[u32]]| -> Vec<(usize, usize)> {
            let mut off = 0;
            xs.iter()
                .map(|x| {
                    off += x.len();
                    (off - x.len(), x.len())
                })
                .collect()
        };
        let enc_segs = segs(inputs);
        let dec_segs = segs(dec_inputs);

        // encoder
        let ids: Vec<u32> = inputs.iter().flat_map(|x| x.iter().copied()).collect();
        let mut x = tape.embedding(p[lay.embed], &ids)?;
        x = dropout(tape, x, rate, &mut rng)?;
        let mut bias = BiasCache::new(p[lay.enc_bias], true);
        for l in &lay.enc {
            let h = self.norm_tape(tape, &p, l.ln_attn, x)?;
            let a = self.attention_tape(tape, &p, l.attn, h, h, &enc_segs, &enc_segs, Some(&mut bias))?;
            x = tape.add(x, dropout(tape, a, rate, &mut rng)?)?;
            let h = self.norm_tape(tape, &p, l.ln_ff, x)?;
            let f = self.ff_tape(tape, &p, l.ff, h, &mut rng)?;
            x = tape.add(x, dropout(tape, f, rate, &mut rng)?)?;
        }
        let enc = self.norm_tape(tape, &p, lay.enc_norm, x)?;
        let enc = dropout(tape, enc, rate, &mut rng)?;

        // decoder
        let ids: Vec<u32> = dec_inputs.iter().flat_map(|x| x.iter().copied()).collect();
        let mut y = tape.embedding(p[lay.embed], &ids)?;
        y = dropout(tape, y, rate, &mut rng)?;
        let mut bias = BiasCache::new(p[lay.dec_bias], false);
        for l in &lay.dec {
            let h = self.norm_tape(tape, &p, l.ln_self, y)?;
            let a = self.attention_tape(tape, &p, l.self_attn, h, h, &dec_segs, &dec_segs, Some(&mut bias))?;
            y = tape.add(y, dropout(tape, a, rate, &mut rng)?)?;
            let h = self.norm_tape(tape, &p, l.ln_cross, y)?;
            let a = self.attention_tape(tape, &p, l.cross, h, enc, &dec_segs, &enc_segs, None)?;
            y = tape.add(y, dropout(tape, a, rate, &mut rng)?)?;
            let h = self.norm_tape(tape, &p, l.ln_ff, y)?;
            let f = self.ff_tape(tape, &p, l.ff, h, &mut rng)?;
            y = tape.add(y, dropout(tape, f, rate, &mut rng)?)?;
        }
        let h = self.norm_tape(tape, &p, lay.dec_norm, y)?;
        let h = dropout(tape, h, rate, &mut rng)?;
        let logits = tape.matmul_t(h, p[lay.embed])?;
        tape.scale(logits, 1.0 / libm::sqrt(self.config.d_model as f64))
    }

    fn norm_tape<'p>(&self, tape: &Tape<'p, T>, p: &[Var], n: Norm, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[n.gain], p[n.bias], LN_EPS)
    }

    fn ff_tape<'p>(&self, tape: &Tape<'p, T>, p: &[Var], f: Ff, x: Var, rng: &mut Option<&mut R>) -> Result<Var> {
        let h = tape.matmul(x, p[f.wi])?;
        let h = tape.relu(h)?;
        let h = dropout(tape, h, self.config.dropout, rng)?;
        tape.matmul(h, p[f.wo])
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_tape<'p>(
        &self,
        tape: &Tape<'p, T>,
        p: &[Var],
        a: Attn,
        xq: Var,
        xkv: Var,
        q_segs: &[(usize, usize)],
        kv_segs: &[(usize, usize)],
        mut bias: Option<&mut BiasCache>,
    ) -> Result<Var> {
        let (heads, dk) = (self.config.n_heads, self.config.head_dim());
        let scale = 1.0 / libm::sqrt(dk as f64);
        let q = tape.matmul(xq, p[a.q])?;
        let k = tape.matmul(xkv, p[a.k])?;
        let v = tape.matmul(xkv, p[a.v])?;
        let mut outs = Vec::with_capacity(q_segs.len());
        for (&(qo, ql), &(ko, kl)) in q_segs.iter().zip(kv_segs) {
            let head_bias = match bias.as_deref_mut() {
                Some(b) => Some(b.get(tape, &self.config, ql)?),
                None => None,
            };
            let mut hs = Vec::with_capacity(heads);
            for h in 0..heads {
                let cols = (h * dk, (h + 1) * dk);
                let qh = tape.block(q, (qo, qo + ql), cols)?;
                let kh = tape.block(k, (ko, ko + kl), cols)?;
                let vh = tape.block(v, (ko, ko + kl), cols)?;
                let mut s = tape.scale(tape.matmul_t(qh, kh)?, scale)?;
                if let Some(b) = &head_bias {
                    s = tape.add(s, b[h])?;
                }
                let w = tape.softmax(s, 1)?;
                hs.push(tape.matmul(w, vh)?);
            }
            outs.push(if heads == 1 { hs[0] } else { tape.concat(&hs, 1)? });
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 0)? };
        tape.matmul(cat, p[a.o])
    }

    /// Mean over examples of the per-example mean cross-entropy of the
    /// target tokens under teacher forcing. Targets must end with the stop
    /// token, which counts towards their length.
    pub fn batch_loss<'p>(
        &'p self,
        tape: &Tape<'p, T>,
        batch: &[(&[u32], &[u32])],
        rng: Option<&mut R>,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(domain("empty batch"));
        }
        let mut dec_inputs = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        let b = batch.len() as f64;
        for (_, target) in batch {
            if target.is_empty() {
                return Err(domain("empty target sequence"));
            }
            dec_inputs.push(decoder_input(target));
            targets.extend_from_slice(target);
            let w = T::from_f64(1.0 / (b * target.len() as f64));
            weights.extend(core::iter::repeat_n(w, target.len()));
        }
        let inputs: Vec<&[u32]> = batch.iter().map(|(i, _)| *i).collect();
        let dec: Vec<&[u32]> = dec_inputs.iter().map(Vec::as_slice).collect();
        let logits = self.forward_tape(tape, &inputs, &dec, rng)?;
        tape.weighted_cross_entropy(logits, &targets, &weights)
    }

    /// `(1/T)·Σ_t −log p(w_t | input, w_<t)` for one target, evaluation mode.
    pub fn teacher_forced_loss(&self, input: &[u32], target: &[u32]) -> Result<f64> {
        let tape = Tape::new();
        let loss = self.batch_loss(&tape, &[(input, target)], None)?;
        let v = tape.value(loss).data()[0].as_f64();
        Ok(v)
    }

    /// Logits `[len(prefix) + 1, vocab]`: row `t` scores the token that
    /// follows `prefix[..t]`. Dropout is applied only when `rng` is given.
    pub fn forward_logits(&self, input: &[u32], prefix: &[u32], rng: Option<&mut R>) -> Result<Tensor<T>> {
        let mut dec = Vec::with_capacity(prefix.len() + 1);
        dec.push(PAD);
        dec.extend_from_slice(prefix);
        let tape = Tape::new();
        let logits = self.forward_tape(&tape, &[input], &[&dec], rng)?;
        let out = tape.value(logits).clone();
        Ok(out)
    }

    // ---- inference path --------------------------------------------------

    /// Runs the encoder once and projects its output to every decoder
    /// layer's cross-attention keys and values.
    pub fn encode(&self, input: &[u32]) -> Result<Encoded<T>> {
        if input.is_empty() {
            return Err(domain("empty input sequence"));
        }
        self.check_len(input.len())?;
        self.check_ids(input)?;
        let c = &self.config;
        let (d, n) = (c.d_model, input.len());
        let lay = &self.layout;
        let mut x = Vec::with_capacity(n * d);
        for &id in input {
            x.extend_from_slice(self.params[lay.embed].row(id as usize));
        }
        let bias_table = self.params[lay.enc_bias].data();
        let mut bias = vec![T::zero(); c.n_heads * n * n];
        for i in 0..n {
            for j in 0..n {
                let b = relative_bucket(j as i64 - i as i64, true, c.num_buckets, c.max_distance);
                for h in 0..c.n_heads {
                    bias[(h * n + i) * n + j] = bias_table[b * c.n_heads + h];
                }
            }
        }
        for l in &lay.enc {
            let h = self.norm_rows(&x, l.ln_attn);
            let q = self.linear(&h, n, l.attn.q);
            let k = self.linear(&h, n, l.attn.k);
            let v = self.linear(&h, n, l.attn.v);
            let a = self.attend(&q, n, &k, &v, n, Some(&bias));
            let a = self.linear(&a, n, l.attn.o);
            add_into(&mut x, &a);
            let h = self.norm_rows(&x, l.ln_ff);
            let f = self.ff_rows(&h, n, l.ff);
            add_into(&mut x, &f);
        }
        let enc = self.norm_rows(&x, lay.enc_norm);
        let (cross_k, cross_v) = lay
            .dec
            .iter()
            .map(|l| (self.linear(&enc, n, l.cross.k), self.linear(&enc, n, l.cross.v)))
            .unzip();
        Ok(Encoded {
            len: n,
            cross_k,
            cross_v,
        })
    }

    pub fn start_state(&self) -> DecoderState<T> {
        let layers = self.layout.dec.len();
        DecoderState {
            pos: 0,
            k: vec![Vec::new(); layers],
            v: vec![Vec::new(); layers],
        }
    }

    /// Feeds `token` at the next decoder position and returns the logits
    /// for the token after it.
    pub fn step(&self, enc: &Encoded<T>, state: &mut DecoderState<T>, token: u32) -> Result<Vec<T>> {
        self.check_ids(&[token])?;
        let c = &self.config;
        let lay = &self.layout;
        let (d, t) = (c.d_model, state.pos);
        if t >= c.max_len + 1 {
            return Err(Error::Overlength {
                len: t + 1,
                max: c.max_len + 1,
            });
        }
        let mut x = self.params[lay.embed].row(token as usize).to_vec();
        let bias_table = self.params[lay.dec_bias].data();
        let len = t + 1;
        let mut bias = vec![T::zero(); c.n_heads * len];
        for j in 0..len {
            let b = relative_bucket(j as i64 - t as i64, false, c.num_buckets, c.max_distance);
            for h in 0..c.n_heads {
                bias[h * len + j] = bias_table[b * c.n_heads + h];
            }
        }
        for (li, l) in lay.dec.iter().enumerate() {
            let h = self.norm_rows(&x, l.ln_self);
            let q = self.linear(&h, 1, l.self_attn.q);
            state.k[li].extend(self.linear(&h, 1, l.self_attn.k));
            state.v[li].extend(self.linear(&h, 1, l.self_attn.v));
            let a = self.attend(&q, 1, &state.k[li], &state.v[li], len, Some(&bias));
            add_into(&mut x, &self.linear(&a, 1, l.self_attn.o));
            let h = self.norm_rows(&x, l.ln_cross);
            let q = self.linear(&h, 1, l.cross.q);
            let a = self.attend(&q, 1, &enc.cross_k[li], &enc.cross_v[li], enc.len, None);
            add_into(&mut x, &self.linear(&a, 1, l.cross.o));
            let h = self.norm_rows(&x, l.ln_ff);
            add_into(&mut x, &self.ff_rows(&h, 1, l.ff));
        }
        state.pos += 1;
        let h = self.norm_rows(&x, lay.dec_norm);
        let mut logits = vec![T::zero(); c.vocab_size];
        gemm_nt(&h, self.params[lay.embed].data(), &mut logits, 1, d, c.vocab_size);
        let s = T::from_f64(1.0 / libm::sqrt(d as f64));
        for v in logits.iter_mut() {
            *v *= s;
        }
        Ok(logits)
    }

    fn linear(&self, x: &[T], rows: usize, w: usize) -> Vec<T> {
        let w = &self.params[w];
        let (k, n) = (w.shape()[0], w.shape()[1]);
        let mut out = vec![T::zero(); rows * n];
        gemm_nn(x, w.data(), &mut out, rows, k, n);
        out
    }

    fn norm_rows(&self, x: &[T], n: Norm) -> Vec<T> {
        let g = self.params[n.gain].data();
        let b = self.params[n.bias].data();
        let d = g.len();
        let mut out = Vec::with_capacity(x.len());
        let eps = T::from_f64(LN_EPS);
        let dt = T::from_f64(d as f64);
        for row in x.chunks(d) {
            let mu = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dt;
            let inv = T::one() / (var + eps).sqrt();
            out.extend(row.iter().enumerate().map(|(j, &v)| (v - mu) * inv * g[j] + b[j]));
        }
        out
    }

    fn ff_rows(&self, x: &[T], rows: usize, f: Ff) -> Vec<T> {
        let mut h = self.linear(x, rows, f.wi);
        for v in h.iter_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        self.linear(&h, rows, f.wo)
    }

    /// Multi-head attention of `nq` query rows over `nk` key/value rows.
    /// `bias` is laid out `[head, nq, nk]`.
    fn attend(&self, q: &[T], nq: usize, k: &[T], v: &[T], nk: usize, bias: Option<&[T]>) -> Vec<T> {
        let c = &self.config;
        let (d, dk) = (c.d_model, c.head_dim());
        let scale = T::from_f64(1.0 / libm::sqrt(dk as f64));
        let mut out = vec![T::zero(); nq * d];
        let mut w = vec![T::zero(); nk];
        for h in 0..c.n_heads {
            let cols = h * dk..(h + 1) * dk;
            for i in 0..nq {
                let qi = &q[i * d..][cols.clone()];
                for j in 0..nk {
                    w[j] = dot(qi, &k[j * d..][cols.clone()]) * scale;
                    if let Some(b) = bias {
                        w[j] += b[(h * nq + i) * nk + j];
                    }
                }
                crate::tensor::softmax_in_place(&mut w);
                let o = &mut out[i * d..][cols.clone()];
                for j in 0..nk {
                    crate::tensor::axpy(w[j], &v[j * d..][cols.clone()], o);
                }
            }
        }
        out
    }
}

/// `[PAD] + target[..T−1]`
pub fn decoder_input(target: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(target.len());
    v.push(PAD);
    v.extend_from_slice(&target[..target.len().saturating_sub(1)]);
    v
}

fn add_into<T: Real>(x: &mut [T], y: &[T]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

fn dropout<'p, T: Real>(tape: &Tape<'p, T>, x: Var, rate: f64, rng: &mut Option<&mut R>) -> Result<Var> {
    let Some(rng) = rng.as_deref_mut() else {
        return Ok(x);
    };
    if rate <= 0.0 {
        return Ok(x);
    }
    let shape = tape.shape(x);
    let n = shape.iter().product();
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..n)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let m = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, m)
}

/// Per-head relative bias matrices for each sequence length, computed once
/// per forward pass because the table is shared by all layers of a stack.
struct BiasCache {
    table: Var,
    bidirectional: bool,
    by_len: BTreeMap<usize, Vec<Var>>,
}

impl BiasCache {
    fn new(table: Var, bidirectional: bool) -> Self {
        BiasCache {
            table,
            bidirectional,
            by_len: BTreeMap::new(),
        }
    }

    fn get<T: Real>(&mut self, tape: &Tape<'_, T>, c: &ModelConfig, n: usize) -> Result<Vec<Var>> {
        if let Some(v) = self.by_len.get(&n) {
            return Ok(v.clone());
        }
        let mut ids = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                ids.push(relative_bucket(j as i64 - i as i64, self.bidirectional, c.num_buckets, c.max_distance) as u32);
            }
        }
        let rows = tape.embedding(self.table, &ids)?;
        let mask = (!self.bidirectional).then(|| {
            let mut m = vec![T::zero(); n * n];
            for i in 0..n {
                for j in i + 1..n {
                    m[i * n + j] = T::from_f64(MASKED);
                }
            }
            tape.constant(Tensor::new(vec![n, n], m).expect("mask shape"))
        });
        let mut heads = Vec::with_capacity(c.n_heads);
        for h in 0..c.n_heads {
            let col = tape.block(rows, (0, n * n), (h, h + 1))?;
            let mut b = tape.reshape(col, &[n, n])?;
            if let Some(m) = mask {
                b = tape.add(b, m)?;
            }
            heads.push(b);
        }
        self.by_len.insert(n, heads.clone());
        Ok(heads)
    }
}

/// Model weights together with optimiser moments and a step counter.
#[derive(Debug, Clone)]
pub struct ModelState<T> {
    pub model: Seq2Seq<T>,
    pub adam: AdamState<T>,
    pub step: u64,
}

impl<T: Real> ModelState<T> {
    pub fn new(model: Seq2Seq<T>) -> Self {
        let adam = AdamState::zeros_like(model.params());
        ModelState { model, adam, step: 0 }
    }

    /// One optimiser update on `batch`; returns the batch loss. A non-finite
    /// loss or gradient aborts before any parameter changes.
    pub fn train_step(
        &mut self,
        batch: &[(&[u32], &[u32])],
        schedule: &LrSchedule,
        adam: &AdamConfig,
        rng: &mut R,
    ) -> Result<f64> {
        let step = self.step + 1;
        let mut grads: Vec<Tensor<T>> = self.model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        let loss = {
            let tape = Tape::new();
            let loss = self.model.batch_loss(&tape, batch, Some(rng))?;
            let value = tape.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite { step });
            }
            tape.backward(loss)?.accumulate_params(&mut grads);
            value
        };
        let lr = schedule.lr(self.adam.t + 1);
        adam_step(self.model.params_mut(), &grads, &mut self.adam, lr, adam).map_err(|_| Error::NonFinite { step })?;
        self.step = step;
        Ok(loss)
    }
}

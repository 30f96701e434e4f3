//! Allocation-only core: knowledge graph storage, text verbalisation, a BPE
//! tokenizer, a reverse-mode autodiff kernel, an encoder-decoder transformer,
//! sampled link-prediction ranking, a ComplEx baseline, question answering
//! with neighbourhood reranking, relation-path prediction and rule-based
//! ensembles.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autograd;
pub mod bpe;
pub mod complex;
pub mod decode;
pub mod ensemble;
pub mod error;
pub mod exec;
pub mod kg;
pub mod lp;
pub mod model;
pub mod optim;
pub mod pathpred;
pub mod qa;
pub mod real;
pub mod synth;
pub mod tensor;
pub mod textmap;

pub use error::{Error, Result};
pub use real::{Precision, Real};
pub use tensor::Tensor;

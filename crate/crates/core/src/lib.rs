//! Nearest-neighbor language modeling with the efficiency toolkit around it.
//!
//! The crate is organized the way a request flows through a kNN-LM:
//!
//! * [`lm`] is the parametric side: a vocabulary, a smoothed count LM that
//!   provides `p_NLM`, the context encoder used as the key function, and the
//!   n-gram suffix tables used as adaptor features.
//! * [`datastore`] holds the `(key, next token, weight)` records and their
//!   binary file format.
//! * [`index`] searches the keys: exact flat scan, inverted-file lists and
//!   product quantization.
//! * [`dist`] turns neighbors into the kNN distribution and interpolates it
//!   with the parametric one.
//! * [`pruning`], [`pca`] and [`adaptor`] are the three ways of making the
//!   above cheaper: fewer records, fewer dimensions, fewer searches.
//! * [`harness`] wires everything into a pipeline with perplexity and
//!   throughput reports, and [`synth`] generates the toy benchmark corpora.
//!
//! Runnable walkthroughs for each piece live in `examples/`.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptor;
pub mod datastore;
pub mod dist;
pub mod error;
pub mod harness;
pub mod index;
pub mod kmeans;
pub mod lm;
pub mod pca;
pub mod pruning;
pub mod synth;

mod binio;

pub use datastore::{Datastore, DatastoreRecord};
pub use dist::{DenseDist, SparseDist};
pub use error::{Error, Result};
pub use index::{NeighborHit, SearchIndex};
pub use lm::{TokenId, Vocabulary};

//! Purchase-intention knowledge graph construction.
//!
//! The crate covers every stage between raw co-purchase logs and an
//! evaluated knowledge graph:
//!
//! * [`ingest`] loads catalogs, builds the co-buy graph and samples pairs.
//! * [`generation`] renders relation prompts, calls a text-generation
//!   service and cleans the raw continuations into assertion tails.
//! * [`annotation`] holds vote bookkeeping and agreement statistics.
//! * [`population`] turns annotations into training files, ingests scorer
//!   output and filters the corpus by threshold.
//! * [`mining`] mines frequent dependency sub-tree patterns and assigns each
//!   tail to its longest matching pattern.
//! * [`conceptualize`] lifts tails to abstract intentions through an IsA table.
//! * [`kgstore`] assembles, persists and summarizes the graph.
//! * [`embed`] trains the pair-head translational embedding.
//! * [`receval`] measures how much the learned item features help rating
//!   prediction.
//!
//! The guide under `book/` walks through each stage; its code listings are
//! compiled and run as doc-tests of this crate.

pub mod annotation;
pub mod conceptualize;
pub mod embed;
mod error;
pub mod generation;
pub mod ids;
pub mod ingest;
pub mod jsonl;
pub mod kgstore;
pub mod mining;
pub mod population;
pub mod receval;
pub mod service;
pub mod text;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/generation.md")]
    mod generation {}
    #[doc = include_str!("../../../book/src/annotation.md")]
    mod annotation {}
    #[doc = include_str!("../../../book/src/population.md")]
    mod population {}
    #[doc = include_str!("../../../book/src/mining.md")]
    mod mining {}
    #[doc = include_str!("../../../book/src/conceptualization.md")]
    mod conceptualization {}
    #[doc = include_str!("../../../book/src/graph.md")]
    mod graph {}
    #[doc = include_str!("../../../book/src/embedding.md")]
    mod embedding {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}

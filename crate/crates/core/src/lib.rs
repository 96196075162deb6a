//! Branch probability estimation for a small compiler IR.
//!
//! The crate covers the whole pipeline: CFG analyses over the IR
//! ([`ir`]), the classic static heuristics ([`heuristics`]), per-branch
//! feature extraction and encoding ([`features`]), labeled datasets
//! ([`dataset`]), a feed-forward network trained with Adagrad ([`model`]),
//! evaluation metrics ([`eval`]) and a synthetic profiled corpus
//! ([`synth`]).

pub mod ir;
pub mod heuristics;
pub mod features;
pub mod dataset;
pub mod model;
pub mod eval;
pub mod synth;
pub mod pipeline;

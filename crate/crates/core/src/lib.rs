//! Dense scene-graph prediction toolkit.
//!
//! A scene graph is a set of labeled, boxed entities plus directed,
//! possibly multi-label relations between them. This crate trains and
//! evaluates a small set-prediction model that decodes a fixed budget of
//! entity queries and scores every ordered query pair against every
//! predicate, so a scene graph comes out of a single forward pass:
//!
//! - [`graph`]: entities, boxes, relation tensors, datasets, and their JSON
//!   form.
//! - [`matching`]: optimal query-to-ground-truth assignment (Hungarian, with
//!   a brute-force oracle) under a class + box + relation cost.
//! - [`relation`]: pairwise relation scoring with a compatibility filter and
//!   entity-confidence re-scoring.
//! - [`losses`]: box, entity, and focal relation losses over a matched
//!   assignment.
//! - [`autodiff`]: the minimal reverse-mode tensor engine and AdamW used for
//!   training.
//! - [`synth`]: synthetic scene generation with rule-derived relation labels,
//!   plus featurization into input tokens.
//! - [`model`]: the query decoder itself, its multi-task training loop, and
//!   checkpointing.
//! - [`infer`]: post-processing of a decoded graph into ranked triplets with
//!   a rare-predicate adjustment and duplicate suppression.
//! - [`metrics`]: recall, predicate-balanced mean recall, zero-shot recall,
//!   and subset breakdowns over ranked triplets.

pub mod autodiff;
pub mod error;
pub mod graph;
pub mod infer;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod relation;
pub mod synth;

pub use error::{Error, Result};

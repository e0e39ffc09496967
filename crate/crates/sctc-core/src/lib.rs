//! Two-stage human-object interaction head, end to end at desk scale.
//!
//! The pipeline mirrors a two-stage HOI detector with the detector and text
//! encoder replaced by synthetic fixtures:
//!
//! 1. [`fixtures`] — on-disk scene format plus deterministic synthetic
//!    datasets with exactly known ground truth.
//! 2. [`interaction`] — candidate human-object pairs, 8-dim spatial features,
//!    and the projected interaction feature per pair.
//! 3. [`distill`] — L1 regression of interaction features onto fixed text
//!    embeddings keyed by HOI category.
//! 4. [`sta`] — per-pair graph (human/object nodes, interaction-feature edge),
//!    interactiveness scoring, top-K proposal selection.
//! 5. [`ctd`] — dependency graph over the selected proposals fusing instance,
//!    semantic, and layout relations into an adjacency matrix.
//! 6. [`decoder`] — transformer action decoder cross-attending to the scene
//!    feature map, plus score composition.
//! 7. [`evaluation`] — greedy triplet matching and Full/Rare/Non-Rare mAP.
//!
//! Everything differentiable runs on the reverse-mode tape in [`tape`] and is
//! verified against central finite differences (see [`gradcheck`]).

pub mod config;
pub mod ctd;
pub mod decoder;
pub mod distill;
pub mod error;
pub mod evaluation;
pub mod fixtures;
pub mod gradcheck;
pub mod interaction;
pub mod model;
pub mod optim;
pub mod sta;
pub mod tape;
pub mod train;

pub use error::{Error, Result};

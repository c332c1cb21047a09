//! Prune-and-share (Pear) for low-rank adapters on a frozen tiny transformer.
//!
//! The crate trains LoRA-style adapter pairs on a frozen backbone, scores
//! each pair with a first-order Taylor criterion during warm-up, prunes the
//! weakest pairs and lets the strongest survivors take over the pruned
//! positions through weight tying.

pub mod adapter;
pub mod cli;
pub mod compare;
pub mod alloc;
pub mod error;
pub mod importance;
pub mod io;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod planner;
pub mod tape;
pub mod task;
pub mod tensor;

pub use adapter::{AdapterBank, AdapterPair, AdapterSlot, PositionId, Projection, ShapeSignature, Site};
pub use error::{PearError, Result};
pub use importance::{ImportanceReport, TaylorRule};
pub use model::{build_model, AdaptedModel, AdapterConfig, Backbone, BackboneConfig, BindMode};
pub use planner::{apply, checkpoint_da, checkpoint_sba, plan, KnowledgeCheckpointConfig, PruneMode, SharePlan};
pub use tape::{Tape, Var};
pub use tensor::Tensor;


//! Few-shot action recognition with decoupled spatial and temporal knowledge.
//!
//! Class-level attribute text (objects, ordered action states) is turned into
//! embeddings that condition two compensators: one builds object prototypes
//! from patch tokens, the other builds frame prototypes from frame features.
//! Queries are matched against support classes with a set distance over the
//! object prototypes and an ordered alignment over the frame prototypes.

pub mod attention;
pub mod autograd;
pub mod config;
pub mod data;
pub mod encoders;
pub mod episodic;
pub mod error;
pub mod knowledge;
pub mod metrics;
pub mod model;
pub mod params;
pub mod skc;
pub mod tkc;

pub use error::{Error, Result};

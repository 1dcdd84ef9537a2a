//! Open-world object detection at desk scale: pseudo-unknown text
//! embeddings, per-class contrastive anchor OOD scoring, a cosine detection
//! head, incremental training, synthetic worlds and OWOD metrics.

pub mod commands;
pub mod config;
pub mod detection;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod mscal;
pub mod pipeline;
pub mod pyramid;
pub mod seed;
pub mod training;
pub mod world;

pub use error::{Error, Result};

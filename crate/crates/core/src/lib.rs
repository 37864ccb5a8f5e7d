//! Occluded person re-identification with dynamic masked prototype matching.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`backbone`]: patch tokenization and a small vision transformer.
//! - [`spt`]: saliency-guided patch transfer (occlusion synthesis in token space).
//! - [`prototype`]: coarse / learnable / masked prototype matrices and prompt anchoring.
//! - [`hmg`]: hierarchical mask generator for the prototype mask.
//! - [`losses`]: identity, triplet, head-decorrelation and budget objectives.
//! - [`trainer`]: the three training stages and PK batch construction.
//! - [`evaluator`]: CMC / mAP retrieval evaluation and head correlation.
//! - [`data`]: synthetic dataset generation, manifests and the array archive.

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod hmg;
pub mod losses;
pub mod optim;
pub mod params;
pub mod prototype;
pub mod spt;
pub mod trainer;

pub use config::Config;
pub use error::{Error, Result};

//! Text-to-video retrieval by fusing frozen expert features.
//!
//! Per-modality expert sequences ([`experts`]) are fused by a transformer
//! [`aggregator`] into `M` unit-norm chunks. Captions go through a
//! pluggable encoder and a gated mixture projection ([`textpipe`]) onto the
//! same layout, so the dot product is a weighted sum of per-modality
//! cosines ([`scoring`]). Training mixes weighted corpora ([`datamix`]) over
//! staged freeze schedules ([`trainer`]); [`retrieval`] builds galleries
//! and computes R@K / MdR / MnR.

pub mod aggregator;
pub mod bench;
pub mod config;
pub mod datamix;
pub mod error;
pub mod experts;
pub mod model;
pub mod nn;
pub mod retrieval;
pub mod rng;
pub mod scoring;
pub mod textpipe;
pub mod trainer;
mod transformer;

pub use error::{Error, Result};
pub use mmfuse_numcore as numcore;

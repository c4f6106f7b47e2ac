//! Urban region function recognition from per-region user-visit logs and
//! overhead imagery.
//!
//! The pipeline parses hourly visit logs, derives three families of visit
//! features (per-region statistics, per-user activity profiles averaged over
//! a region's visitors, and a region graph built from co-visited regions),
//! trains three probability-emitting branches (image, temporal,
//! multi-dimension) and fuses their out-of-fold probabilities with a stacked
//! gradient-boosted-tree head.
//!
//! The image and temporal branches are gradient-boosted trees over
//! hand-crafted raster statistics and week-averaged visit tensors. They stand
//! in for deep image and sequence networks and expose the same
//! feature-to-probability contract, see [`branches`].

pub mod branches;
pub mod error;
pub mod export;
pub mod features;
pub mod fusion;
pub mod gbdt;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
pub use model::{CalendarWindow, Category, RegionRecord, TemporalTensor, VisitLog, N_CATEGORIES};

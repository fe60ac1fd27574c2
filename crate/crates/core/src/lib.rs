//! Short-term object-interaction anticipation toolkit.
//!
//! - [`tensor`]: dense `f64` kernels.
//! - [`attention`]: frame-guided pooling, dual image-video attention and
//!   feature-pyramid fusion, each with an analytic reverse pass.
//! - [`affordance`]: activity-zone database, KNN affordance priors and
//!   product fusion with classifier probabilities.
//! - [`hotspot`]: interaction-hotspot maps and confidence re-weighting.
//! - [`eval`]: Top-k mAP under the Noun, Noun+Verb, Noun+TTC and All criteria.
//! - [`curation`]: turning active-object boxes and action segments into
//!   anticipation ground truth.
//! - [`detection`] and [`io`]: shared record types and their file formats.
//! - [`synth`]: seeded end-to-end scenario used by the demo.

pub mod affordance;
pub mod attention;
pub mod curation;
pub mod detection;
pub mod error;
pub mod eval;
pub mod hotspot;
pub mod io;
pub mod synth;
pub mod tensor;

pub use error::{Result, StaError};

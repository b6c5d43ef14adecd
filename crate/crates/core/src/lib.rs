//! Lifting multi-view 2D instance masks to 3D part segmentation of point clouds.
//!
//! The pipeline renders a cloud from a camera rig, oversegments it into
//! superpoints, votes semantic labels from per-view masks, groups superpoints
//! into initial instances and then refines those instances with an EM loop
//! that alternates Hungarian matching of masks to projected instance scores
//! with gradient descent on per-superpoint instance logits.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod em;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod grouping;
pub mod hungarian;
pub mod masks;
pub mod par;
pub mod pipeline;
pub mod postprocess;
pub mod segmentation;
pub mod spatial;
pub mod superpoints;
pub mod synthetic;
pub mod voting;

pub use error::{Error, Result};

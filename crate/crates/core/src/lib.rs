//! Visual localization against a reference map, in three stages:
//!
//! 1. global-descriptor retrieval of the most similar keyframes ([`retrieval`]),
//! 2. sparse-to-dense hypercolumn matching and PnP-RANSAC, re-ranking the
//!    candidates by inlier count and yielding an initial pose ([`rerank`]),
//! 3. coarse-to-fine feature-metric Levenberg-Marquardt refinement ([`align`]).
//!
//! Features come in as data ([`feature::FeaturePyramid`] files). The
//! [`synth`] module renders feature pyramids from a smooth analytic world
//! feature field so every stage can be checked against ground truth, and
//! [`evaluation`] runs the stages in the R+A, R+P and R+P+A configurations.
//! [`cli`] wraps it all in the `featloc` command.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod cli;
pub mod evaluation;
pub mod feature;
pub mod geometry;
pub mod rerank;
pub mod retrieval;
pub mod scene_map;
pub mod synth;

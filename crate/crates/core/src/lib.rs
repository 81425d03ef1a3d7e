//! Iterative centerline tracking of tubular trees in 3D volumes.
//!
//! A tracker walks a vessel tree from one or two seed points. At each accepted
//! point a predictor reports a probability distribution over a fixed lattice
//! of movement directions, a bifurcation probability and a stop probability.
//! The crate bundles everything needed to exercise that loop end to end:
//! synthetic phantom trees and volumes, training-sample generation, a
//! from-scratch inference engine for the dual-resolution classifier, the
//! tracker itself, and overlap metrics against a reference tree.

pub mod error;
pub mod geometry;
pub mod labeling;
pub mod metrics;
pub mod network;
pub mod phantom;
pub mod spatial;
pub mod sphere;
pub mod tracker;
pub mod tree;
pub mod volume;

pub use error::{Error, Result};

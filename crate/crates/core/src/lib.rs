//! Branching Brownian particle systems coded by contour excursions, their
//! increasing-rearrangement reflection, and the statistics used to study
//! the path behaviour of the reflected system.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod branching;
pub mod error;
pub mod reflection;
pub mod rng;
pub mod stats;
pub mod stochastic;
pub mod tree_coding;

pub use error::{Error, Result};
pub use rng::{RandomSource, RngStream};
pub use stochastic::{GridPath, ObservationGrid, Polyline, PolylinePath, TimeGrid};
pub use tree_coding::{ContourProcess, EdgeLabel, LocalTimeField, MarkedForest};
pub use analysis::{DensityEstimate, ScalingTable, SeparationProfile, TestReport};
pub use branching::{HistoricalSystem, InitialMeasure, MeasureAtoms, Snake, StoppedPath};
pub use reflection::{reflect_system, ReflectedSystem};

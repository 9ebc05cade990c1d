//! Analytics for panels of annual nighttime-luminosity grids.
//!
//! The measurement chain: annual differencing of DN grids, active-pixel
//! demeaning per scope, cross-sectional dispersion, a three-state Markov
//! persistence model on the demeaned changes, fixed-effects aggregate growth
//! and diverging-color change maps. [`synth`] generates panels with planted
//! dynamics for verification.

pub mod cli;
pub mod grid;
pub mod growth;
pub mod keyval;
pub mod markov;
pub mod pipeline;
pub mod regions;
pub mod render;
pub mod stats;
pub mod synth;

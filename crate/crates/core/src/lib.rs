//! Measurement and estimation toolkit for listening logs.
//!
//! The pipeline runs, in order: [`ingest`] (parse, filter, sessionize),
//! [`embed`] (song vectors from sessions), [`taste`] (centroids at user,
//! city and country scope), [`geo`] and [`metrics`] (exploration,
//! adaptation, travel and controls) and finally [`econ`] (fixed-effects
//! panels and difference-in-differences). [`synth`] generates data with
//! planted ground truth for every stage.

pub mod calendar;
pub mod econ;
pub mod embed;
pub mod error;
pub mod geo;
pub mod ingest;
pub mod metrics;
pub mod store;
pub mod synth;
pub mod table;
pub mod taste;

pub use error::{Error, Result};

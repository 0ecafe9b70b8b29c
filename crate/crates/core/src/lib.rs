//! Learned correction of lithographic fabrication deviations.
//!
//! A forward model learns how layouts deform during fabrication; an inverse
//! "corrector" model, trained through a frozen forward ensemble, pre-distorts
//! layouts so that their fabricated outcome lands closer to the nominal
//! design. Full layouts are processed window by window and overlap-averaged.

pub mod cli;
pub mod correct;
pub mod error;
pub mod fabsim;
pub mod metrics;
pub mod neural;
pub mod par;
pub mod patterns;
pub mod raster;
pub mod training;

pub use error::{Error, Result};

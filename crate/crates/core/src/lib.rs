//! Two-stage talking face generation.
//!
//! Audio is first mapped to a facial landmark sequence by [`atnet`], which works in the
//! PCA coefficient space of [`landmark_space`]. The landmark sequence then drives
//! [`vgnet`], a convolutional recurrent generator that composites attention-gated motion
//! over an example face image. [`discriminator`] and [`objectives`] provide the adversarial
//! and pixel losses used by [`trainer`]; [`metrics`] and [`inference`] cover evaluation
//! and the end-to-end cascade.

pub mod atnet;
pub mod checkpoint;
pub mod discriminator;
pub mod error;
pub mod inference;
pub mod landmark_space;
pub mod media;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod probe;
pub mod trainer;
pub mod vgnet;

pub use error::{Error, Result};

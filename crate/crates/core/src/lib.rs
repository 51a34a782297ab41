//! Semi-fragile watermarking in a spherical semantic latent space.
//!
//! A frozen encoder maps images onto the unit sphere. A key-derived set of
//! orthonormal directions carries the message as signed projections, an
//! embedder renders the perturbed feature back into the image, and an
//! extractor reads the bits back. Training pits the watermarker against a
//! policy-gradient attacker that composes benign and malicious transforms.

pub mod archive;
pub mod attacker;
pub mod attacks;
pub mod backbone;
pub mod codec;
pub mod config;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod extractor;
pub mod image;
pub mod model;
pub mod nn;
pub mod seed;
pub mod synth;
pub mod train;

pub use backbone::{Backbone, BackboneConfig, LatentFeature};
pub use codec::{DirectionSet, Message, ProjectionTargets};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use image::Image;
pub use model::Watermarker;

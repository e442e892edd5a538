//! Indoor lighting estimation from images of known objects.
//!
//! The crate covers the whole pipeline: equirectangular HDR environment maps
//! ([`envmap`]), a real spherical-harmonics basis ([`sphharm`]), procedural
//! box-room lighting scenes ([`scenegen`]), single-bounce object rendering
//! through light transport matrices ([`render`]), a ridge-regularized SH
//! lighting fit ([`shfit`]), a small neural-network kernel with hand-written
//! backpropagation ([`nn`]), the lighting autoencoder and illumination
//! predictor ([`models`]), and solid-angle weighted evaluation
//! ([`metrics`]).

pub mod dataset;
pub mod envmap;
pub mod eval;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod render;
pub mod rng;
pub mod scenegen;
pub mod selftest;
pub mod shfit;
pub mod sphharm;

pub use error::{Error, Result};

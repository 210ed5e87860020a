//! Object-compositional neural implicit surfaces.
//!
//! A scene is a set of `K` objects, the last of which is the background. One
//! network predicts a signed distance per object plus a shared feature; the
//! scene surface is the zero level set of their minimum. Training renders
//! color and per-object semantics by volume rendering and compares them with
//! posed images and instance masks.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod error;
pub mod evalmesh;
pub mod fields;
pub mod geometry;
pub mod io;
pub mod rendering;
pub mod training;

pub use error::{Error, Result};

//! Curation of pseudo labels for domain-adaptive 3D object detection, on top
//! of [`redb_core`]: file formats, the detector protocol, the round loop,
//! and a simulator for desk-scale experiments.

pub mod cli;
pub mod config;
pub mod error;
pub mod events;
pub mod io;
pub mod kv;
pub mod pipeline;
pub mod proto;
pub mod sim;
pub mod stages;

pub use error::{Error, Result};

//! Core algorithms for curating Reliable, Diverse and class-Balanced (ReDB)
//! pseudo labels for domain-adaptive 3D object detection.
//!
//! This crate is `no_std` and only needs an allocator. Everything that
//! touches files, processes or threads lives in the `redb` crate.
//!
//! - [`geom`]: oriented boxes, BEV/3D IoU by convex clipping, NMS with groups.
//! - [`cloud`]: point clouds, object cropping, point removal, pasting, object scaling.
//! - [`detection`]: detector outputs and confidence filtering.
//! - [`cde`]: cross-domain examination of pseudo labels.
//! - [`obc`]: overlapped-box counting, Gaussian KDE, inverse-density downsampling.
//! - [`balance`]: object pools, class-balanced sampling, collision-free injection.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod balance;
pub mod cde;
pub mod cloud;
pub mod detection;
pub mod geom;
mod math;
pub mod obc;
pub mod seed;

pub use balance::{ObjectPool, RoundSchedule};
pub use cde::{CdeConfig, CdeVerdict};
pub use cloud::{LabelSet, ObjectBankEntry, Point, PointCloud, Provenance};
pub use detection::InferenceResult;
pub use geom::{Box3D, BevPolygon, IouKind};
pub use obc::{Bandwidth, KdeModel, ObcConfig};

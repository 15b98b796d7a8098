//! Synthetic two-domain datasets, a cluster-based mock detector and
//! pseudo-label scoring.
//!
//! The target domain differs from the source by object size (object shift)
//! and by a sparser sensor (environmental shift). The mock detector is noisy
//! and prone to false positives on target frames, clean on source frames,
//! and improves with every train call.

mod domain;
mod eval;
mod mock;
mod spec;

pub use domain::{generate_domain, generate_frame, write_domain, ClassSpec, DomainSpec, SimFrame};
pub use eval::{evaluate, ClassMetrics, Evaluation};
pub use mock::{cluster_points, fit_box, EchoDetector, MockDetector, MockDetectorSpec, NeverDetector, NoiseSpec};
pub use spec::SimSpec;

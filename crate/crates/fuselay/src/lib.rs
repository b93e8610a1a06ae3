//! Multi-layer visual-inertial-GNSS fusion.
//!
//! The estimator runs in two nested layers. The inner layer is a
//! tightly-coupled sliding-window bundle adjustment fusing feature tracks,
//! IMU preintegration and GNSS velocity; it produces drift-restrained local
//! poses in the initial world frame `w0`. The outer layer is a loosely-coupled
//! 4-DOF pose graph over a long horizon fusing those local poses with GNSS
//! position and course; it estimates the world-frame correction `q_w_w0` and
//! the antenna lever arm online and feeds the correction back to the inner
//! layer. A three-step MAP initialization (GNSS-velocity-aided visual
//! odometry, numerical world-frame alignment, joint VI-GNSS refinement)
//! bootstraps both layers.
//!
//! The crate also ships a deterministic sensor simulator, dataset ingestion
//! (EuRoC-style CSV), trajectory metrics, and a small pipeline CLI
//! (`simulate | init | run | eval`). See the `examples/` directory for one
//! runnable example per capability.

pub mod config;
pub mod geometry;
pub mod initializer;
pub mod inner;
pub mod io;
pub mod metrics;
pub mod outer;
pub mod pipeline;
pub mod preintegration;
pub mod simulator;
pub mod solver;

pub use geometry::{EulerYPR, Pose};
pub use inner::{FrameState, InnerConfig, SlidingWindow};
pub use io::TrajectoryRecord;
pub use outer::{OuterConfig, PoseGraph};
pub use preintegration::Preintegration;
pub use simulator::{GnssSample, GroundTruth, ImuSample, NoiseSpec, TrajectorySpec};

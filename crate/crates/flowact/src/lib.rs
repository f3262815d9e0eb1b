//! Object-flow manipulation pipeline.
//!
//! The crate implements a complete desk-scale system in which *object flow*,
//! the 2D trajectories of keypoints on task-relevant objects, acts as the
//! interface between high-level task intent and low-level robot actions:
//!
//! * [`sim`] is a deterministic kinematic tabletop simulator with a pinhole
//!   camera, depth/segmentation rendering, a free-flying gripper, and four
//!   object families (pick-and-place, pouring, a prismatic drawer, cloth).
//! * [`explore`] collects scripted exploration and demonstration episodes
//!   and densifies on-object keypoint tracks for training data.
//! * [`filters`] reduces raw keypoint sets to moving, task-relevant ones.
//! * [`flowgen`] is a latent temporal diffusion model that generates a task
//!   flow from an initial observation and a task label.
//! * [`policy`] is a flow-conditioned diffusion policy with a temporal
//!   alignment head that localizes the current state within the task flow.
//! * [`heuristic`] is a learning-free baseline that converts flow into rigid
//!   transforms and replays them open loop.
//! * [`harness`] wires everything into cacheable pipeline stages, paired
//!   evaluation, and result tables.
//!
//! Everything is pure `f64` on a single thread and every stochastic choice
//! is drawn from an explicitly seeded generator, so a given configuration
//! reproduces byte-identical artifacts on every run.

pub mod flowcore;
pub mod nn;
pub mod sim;
pub mod explore;
pub mod filters;
pub mod flowgen;
pub mod policy;
pub mod heuristic;
pub mod harness;

//! Deterministic kinematic tabletop simulator.
//!
//! The world is purely kinematic: a free-flying 6-DOF gripper (or a sphere
//! agent for cross-embodiment demonstrations) moves toward commanded
//! Cartesian targets under a per-step speed cap, grasps by proximity, and
//! objects update by attachment rules rather than forces. A pinhole camera
//! with a triangle z-buffer provides ground-truth projections, depth,
//! segmentation, and occlusion in place of learned perception.
//!
//! Everything is a pure function of `(state, input)`; trajectories are fully
//! determined by `(seed, action sequence)`.

pub mod camera;
pub mod mesh;
pub mod observe;
pub mod raster;
pub mod world;

pub use camera::{Camera, CameraConfig};
pub use mesh::TriMesh;
pub use observe::{obs_image, observe, render_frame, Observation, OBS_IMAGE_SIDE};
pub use raster::RenderOut;
pub use world::{
    reset, step, task_success, Action, Attachment, ClothState, DrawerState, Embodiment, EnvKind,
    GripperState, MaterialPoint, ObjectState, RigidKind, Task, WorldState,
};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("unknown env kind: {0}")]
    UnknownEnv(String),
    #[error("unknown task: {0}")]
    UnknownTask(String),
    #[error("task_success queried for {task:?} on a scene without the required objects")]
    WrongScene { task: Task },
}

/// Axis-aligned workspace box the gripper is clamped into.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Workspace {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for Workspace {
    fn default() -> Self {
        Self { min: [0.2, -0.6, 0.0], max: [1.0, 0.6, 0.5] }
    }
}

/// Success thresholds per task.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SuccessConfig {
    /// Max plate drift during pickplace, meters.
    pub plate_displacement_max: f64,
    /// Min cup tilt for a pour, radians.
    pub pour_min_tilt: f64,
    /// Required horizontal interval overlap with the bowl, as a fraction of
    /// the cup's own extent.
    pub pour_overlap_frac: f64,
    /// Slack below max extension still counting as fully open, meters.
    pub drawer_open_tol: f64,
    /// Max drawer-base drift, meters.
    pub drawer_pushback_max: f64,
    /// Max distance from the folded corner to its diagonal target, meters.
    pub fold_tol: f64,
}

impl Default for SuccessConfig {
    fn default() -> Self {
        Self {
            plate_displacement_max: 0.05,
            pour_min_tilt: 30f64.to_radians(),
            pour_overlap_frac: 0.5,
            drawer_open_tol: 0.005,
            drawer_pushback_max: 0.05,
            fold_tol: 0.04,
        }
    }
}

/// Full simulator configuration. Serialized inside the experiment config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub camera: CameraConfig,
    pub workspace: Workspace,
    /// Max translation per control step, meters.
    pub max_speed: f64,
    /// Max rotation per control step, radians.
    pub max_rot: f64,
    /// Proximity radius for grasp engagement, meters.
    pub grasp_radius: f64,
    /// Additive Gaussian pixel noise on tracked projections (0 = oracle).
    pub pixel_noise_sigma: f64,
    /// Cloth particle grid side.
    pub cloth_grid: usize,
    /// Cloth edge length, meters.
    pub cloth_size: f64,
    /// Drawer joint limit, meters.
    pub drawer_max_extension: f64,
    pub success: SuccessConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            camera: CameraConfig::default(),
            workspace: Workspace::default(),
            max_speed: 0.04,
            max_rot: 0.3,
            grasp_radius: 0.02,
            pixel_noise_sigma: 0.0,
            cloth_grid: 9,
            cloth_size: 0.2,
            drawer_max_extension: 0.12,
            success: SuccessConfig::default(),
        }
    }
}

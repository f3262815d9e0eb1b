//! Pinhole camera with a look-at pose.
//!
//! Camera frame convention: x right, y down, z forward (depth). Pixel
//! coordinates follow the flow canvas: u along image x, v along image y,
//! both in `[0, 256)` when on screen.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::flowcore::CANVAS;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraConfig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub eye: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            fx: 210.0,
            fy: 210.0,
            cx: 128.0,
            cy: 128.0,
            eye: [1.25, 0.0, 0.85],
            look_at: [0.5, 0.0, 0.05],
            up: [0.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation (rows: camera x, y, z axes in world frame).
    pub rot: Matrix3<f64>,
    pub eye: Vector3<f64>,
}

/// Depth below which geometry is treated as behind the camera.
pub const Z_NEAR: f64 = 0.05;

impl Camera {
    pub fn from_config(cfg: &CameraConfig) -> Self {
        let eye = Vector3::from(cfg.eye);
        let target = Vector3::from(cfg.look_at);
        let up = Vector3::from(cfg.up);
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let rot = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self { fx: cfg.fx, fy: cfg.fy, cx: cfg.cx, cy: cfg.cy, rot, eye }
    }

    /// World point to camera-frame coordinates.
    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rot * (p - self.eye)
    }

    /// Project to `(u, v, depth)`. `None` when at or behind the near plane.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let pc = self.to_camera(p);
        if pc.z < Z_NEAR {
            return None;
        }
        let u = self.fx * pc.x / pc.z + self.cx;
        let v = self.fy * pc.y / pc.z + self.cy;
        Some((u, v, pc.z))
    }

    /// Inverse of [`Camera::project`] given the depth.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        let pc = Vector3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        );
        self.rot.transpose() * pc + self.eye
    }

    pub fn on_canvas(u: f64, v: f64) -> bool {
        u >= 0.0 && u < CANVAS && v >= 0.0 && v < CANVAS
    }
}

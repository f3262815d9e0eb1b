//! Ground-truth perception: point tracking with visibility, segment and
//! depth rendering, detector-style bounding boxes, and the low-resolution
//! image the flow generator conditions on.

use nalgebra::Vector3;

use crate::flowcore::{BoundingBox, Keypoint2D};

use super::camera::Camera;
use super::raster::{render, view_points, PointView, RenderOut};
use super::world::{body_meshes, world_points, MaterialPoint, WorldState, TABLE_ID};
use super::SimConfig;

/// Side of the pooled observation image.
pub const OBS_IMAGE_SIDE: usize = 32;

/// One frame's ground-truth readout for a set of tracked material points.
#[derive(Debug, Clone)]
pub struct Observation {
    /// Per query point: canvas position, depth, and visibility.
    pub points: Vec<PointView>,
    /// Gripper pose and grip as `[x, y, z, rx, ry, rz, g]` (axis-angle
    /// rotation, g = 1 closed).
    pub proprio: [f64; 7],
    /// Axis-aligned canvas boxes per object segment id, occlusion ignored.
    pub bboxes: Vec<(i32, BoundingBox)>,
}

/// Gripper proprioception vector for a state.
pub fn proprio(state: &WorldState) -> [f64; 7] {
    let aa = state.gripper.rot.scaled_axis();
    [
        state.gripper.pos.x,
        state.gripper.pos.y,
        state.gripper.pos.z,
        aa.x,
        aa.y,
        aa.z,
        if state.gripper.open { 0.0 } else { 1.0 },
    ]
}

/// Full z-buffer pass over the scene: per-pixel depth and segment ids.
pub fn render_frame(state: &WorldState, cfg: &SimConfig, cam: &Camera) -> RenderOut {
    let meshes = body_meshes(state, cfg);
    let refs: Vec<_> = meshes.iter().map(|(id, m)| (*id, m)).collect();
    render(&refs, cam)
}

/// Track the query points in the current state.
///
/// Visibility is resolved by ray casting against every scene body, so it is
/// exact rather than raster-quantized. Bounding boxes come from projected
/// mesh vertices and ignore occlusion, like an idealized detector.
pub fn observe(
    state: &WorldState,
    cfg: &SimConfig,
    cam: &Camera,
    query: &[MaterialPoint],
) -> Observation {
    let meshes = body_meshes(state, cfg);
    let refs: Vec<_> = meshes.iter().map(|(id, m)| (*id, m)).collect();
    let world: Vec<Vector3<f64>> = world_points(state, cfg, query);
    let points = view_points(&refs, cam, &world);
    let mut bboxes = Vec::new();
    for (id, mesh) in &meshes {
        if *id == TABLE_ID || *id >= 2 + state.objects.len() as i32 {
            continue;
        }
        let kps: Vec<Keypoint2D> = mesh
            .verts
            .iter()
            .filter_map(|v| cam.project(v))
            .map(|(u, v, _)| Keypoint2D { u, v, visible: Camera::on_canvas(u, v) })
            .collect();
        if let Some(bb) = BoundingBox::around_points(&kps) {
            bboxes.push((*id, bb));
        }
    }
    Observation { points, proprio: proprio(state), bboxes }
}

/// Pool a rendered frame to the `[2, 32, 32]` conditioning image: channel 0
/// is depth scaled to roughly unit range, channel 1 is the segment id field
/// scaled down. Average pooling over 8x8 blocks.
pub fn obs_image(r: &RenderOut) -> Vec<f64> {
    let side = OBS_IMAGE_SIDE;
    let factor = super::raster::RES / side;
    let mut out = vec![0.0f64; 2 * side * side];
    let norm = 1.0 / (factor * factor) as f64;
    for i in 0..side {
        for j in 0..side {
            let mut depth = 0.0;
            let mut seg = 0.0;
            for di in 0..factor {
                for dj in 0..factor {
                    let (d, s) = r.at((j * factor + dj) as f64, (i * factor + di) as f64);
                    depth += (d / 2.0).clamp(0.0, 1.0);
                    seg += s as f64 / 8.0;
                }
            }
            out[i * side + j] = depth * norm;
            out[side * side + i * side + j] = seg * norm;
        }
    }
    out
}

//! Z-buffer triangle rasterizer and ray-cast visibility oracle.
//!
//! Produces 256x256 depth (meters, 0 = nothing) and segmentation (body id,
//! 0 = background) images, and answers per-point occlusion queries by
//! casting a ray from the camera eye to the point through every triangle.

use nalgebra::Vector3;

use super::camera::{Camera, Z_NEAR};
use super::mesh::TriMesh;
use crate::flowcore::CANVAS;

pub const RES: usize = CANVAS as usize;

/// Rendered depth + segmentation frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOut {
    /// Row-major `[RES*RES]`, meters; 0.0 where nothing was hit.
    pub depth: Vec<f64>,
    /// Row-major `[RES*RES]` body ids; 0 = background.
    pub seg: Vec<i32>,
}

impl RenderOut {
    pub fn at(&self, u: f64, v: f64) -> (f64, i32) {
        if !Camera::on_canvas(u, v) {
            return (0.0, 0);
        }
        let idx = (v as usize) * RES + (u as usize);
        (self.depth[idx], self.seg[idx])
    }

    /// Pixel count of the segment with the given id.
    pub fn segment_area(&self, id: i32) -> usize {
        self.seg.iter().filter(|&&s| s == id).count()
    }
}

/// Rasterize `(body_id, mesh)` pairs into a depth/segmentation frame.
/// Pixel centers sample at `(j + 0.5, i + 0.5)`.
pub fn render(bodies: &[(i32, &TriMesh)], cam: &Camera) -> RenderOut {
    let mut depth = vec![0.0f64; RES * RES];
    let mut seg = vec![0i32; RES * RES];
    for (id, mesh) in bodies {
        for tri in &mesh.tris {
            let pa = cam.to_camera(&mesh.verts[tri[0]]);
            let pb = cam.to_camera(&mesh.verts[tri[1]]);
            let pc = cam.to_camera(&mesh.verts[tri[2]]);
            if pa.z < Z_NEAR || pb.z < Z_NEAR || pc.z < Z_NEAR {
                continue;
            }
            let sa = (cam.fx * pa.x / pa.z + cam.cx, cam.fy * pa.y / pa.z + cam.cy);
            let sb = (cam.fx * pb.x / pb.z + cam.cx, cam.fy * pb.y / pb.z + cam.cy);
            let sc = (cam.fx * pc.x / pc.z + cam.cx, cam.fy * pc.y / pc.z + cam.cy);
            let min_u = sa.0.min(sb.0).min(sc.0).floor().max(0.0) as usize;
            let max_u = (sa.0.max(sb.0).max(sc.0).ceil() as isize).min(RES as isize - 1);
            let min_v = sa.1.min(sb.1).min(sc.1).floor().max(0.0) as usize;
            let max_v = (sa.1.max(sb.1).max(sc.1).ceil() as isize).min(RES as isize - 1);
            if max_u < 0 || max_v < 0 {
                continue;
            }
            let area = edge(&sa, &sb, &sc);
            if area.abs() < 1e-12 {
                continue;
            }
            let (iza, izb, izc) = (1.0 / pa.z, 1.0 / pb.z, 1.0 / pc.z);
            for i in min_v..=max_v as usize {
                for j in min_u..=max_u as usize {
                    let p = (j as f64 + 0.5, i as f64 + 0.5);
                    let w0 = edge(&sb, &sc, &p) / area;
                    let w1 = edge(&sc, &sa, &p) / area;
                    let w2 = edge(&sa, &sb, &p) / area;
                    if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                        continue;
                    }
                    let z = 1.0 / (w0 * iza + w1 * izb + w2 * izc);
                    let idx = i * RES + j;
                    if depth[idx] == 0.0 || z < depth[idx] {
                        depth[idx] = z;
                        seg[idx] = *id;
                    }
                }
            }
        }
    }
    RenderOut { depth, seg }
}

fn edge(a: &(f64, f64), b: &(f64, f64), p: &(f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// Occlusion slack along the view ray, meters: a point counts occluded only
/// when some surface is at least this much closer than the point itself.
const OCCLUSION_EPS: f64 = 1e-4;

/// Projection of a queried world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointView {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub visible: bool,
}

/// Project a point and test occlusion by casting the eye-to-point ray
/// against every triangle. Off-canvas or behind-camera points come back with
/// `visible = false` and the unclamped projection (or zeros when behind).
pub fn view_point(bodies: &[(i32, &TriMesh)], cam: &Camera, p: &Vector3<f64>) -> PointView {
    let Some((u, v, depth)) = cam.project(p) else {
        return PointView { u: 0.0, v: 0.0, depth: 0.0, visible: false };
    };
    if !Camera::on_canvas(u, v) {
        return PointView { u, v, depth, visible: false };
    }
    let dir = p - cam.eye;
    let t_max = 1.0 - OCCLUSION_EPS / dir.norm();
    for (_, mesh) in bodies {
        for tri in &mesh.tris {
            if let Some(t) = ray_triangle(
                &cam.eye,
                &dir,
                &mesh.verts[tri[0]],
                &mesh.verts[tri[1]],
                &mesh.verts[tri[2]],
            ) {
                if t > 1e-9 && t < t_max {
                    return PointView { u, v, depth, visible: false };
                }
            }
        }
    }
    PointView { u, v, depth, visible: true }
}

/// Batch [`view_point`] over many queries.
pub fn view_points(
    bodies: &[(i32, &TriMesh)],
    cam: &Camera,
    points: &[Vector3<f64>],
) -> Vec<PointView> {
    points.iter().map(|p| view_point(bodies, cam, p)).collect()
}

/// Moller-Trumbore; returns the ray parameter t with hit = origin + t*dir.
fn ray_triangle(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let h = dir.cross(&e2);
    let det = e1.dot(&h);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - a;
    let u = s.dot(&h) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(e2.dot(&q) * inv)
}

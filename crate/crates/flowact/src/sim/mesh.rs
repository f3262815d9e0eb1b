//! Triangle meshes and primitive builders for the scene bodies.

use nalgebra::{Isometry3, Vector3};

#[derive(Debug, Clone)]
pub struct TriMesh {
    pub verts: Vec<Vector3<f64>>,
    pub tris: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn transformed(&self, iso: &Isometry3<f64>) -> TriMesh {
        TriMesh {
            verts: self.verts.iter().map(|v| iso.transform_vector(v) + iso.translation.vector).collect(),
            tris: self.tris.clone(),
        }
    }

    pub fn merged(parts: &[TriMesh]) -> TriMesh {
        let mut verts = Vec::new();
        let mut tris = Vec::new();
        for part in parts {
            let base = verts.len();
            verts.extend_from_slice(&part.verts);
            tris.extend(part.tris.iter().map(|t| [t[0] + base, t[1] + base, t[2] + base]));
        }
        TriMesh { verts, tris }
    }
}

/// Axis-aligned box centered at the origin with the given half extents.
pub fn box_mesh(hx: f64, hy: f64, hz: f64) -> TriMesh {
    let verts = vec![
        Vector3::new(-hx, -hy, -hz),
        Vector3::new(hx, -hy, -hz),
        Vector3::new(hx, hy, -hz),
        Vector3::new(-hx, hy, -hz),
        Vector3::new(-hx, -hy, hz),
        Vector3::new(hx, -hy, hz),
        Vector3::new(hx, hy, hz),
        Vector3::new(-hx, hy, hz),
    ];
    let tris = vec![
        [0, 1, 2], [0, 2, 3], // bottom
        [4, 6, 5], [4, 7, 6], // top
        [0, 5, 1], [0, 4, 5], // -y
        [3, 2, 6], [3, 6, 7], // +y
        [0, 3, 7], [0, 7, 4], // -x
        [1, 5, 6], [1, 6, 2], // +x
    ];
    TriMesh { verts, tris }
}

/// Right prism with a regular `nseg`-gon cross-section (cylinder stand-in),
/// axis along z, centered at the origin.
pub fn prism_mesh(radius: f64, half_height: f64, nseg: usize) -> TriMesh {
    let mut verts = Vec::with_capacity(2 * nseg + 2);
    for ring in 0..2 {
        let z = if ring == 0 { -half_height } else { half_height };
        for k in 0..nseg {
            let a = std::f64::consts::TAU * k as f64 / nseg as f64;
            verts.push(Vector3::new(radius * a.cos(), radius * a.sin(), z));
        }
    }
    let bottom_center = verts.len();
    verts.push(Vector3::new(0.0, 0.0, -half_height));
    let top_center = verts.len();
    verts.push(Vector3::new(0.0, 0.0, half_height));
    let mut tris = Vec::new();
    for k in 0..nseg {
        let k1 = (k + 1) % nseg;
        // side quad
        tris.push([k, k1, nseg + k1]);
        tris.push([k, nseg + k1, nseg + k]);
        // caps
        tris.push([bottom_center, k1, k]);
        tris.push([top_center, nseg + k, nseg + k1]);
    }
    TriMesh { verts, tris }
}

/// UV sphere centered at the origin.
pub fn sphere_mesh(radius: f64, nlat: usize, nlon: usize) -> TriMesh {
    let mut verts = Vec::new();
    for i in 0..=nlat {
        let theta = std::f64::consts::PI * i as f64 / nlat as f64;
        for j in 0..nlon {
            let phi = std::f64::consts::TAU * j as f64 / nlon as f64;
            verts.push(Vector3::new(
                radius * theta.sin() * phi.cos(),
                radius * theta.sin() * phi.sin(),
                radius * theta.cos(),
            ));
        }
    }
    let mut tris = Vec::new();
    let at = |i: usize, j: usize| i * nlon + (j % nlon);
    for i in 0..nlat {
        for j in 0..nlon {
            tris.push([at(i, j), at(i + 1, j), at(i + 1, j + 1)]);
            tris.push([at(i, j), at(i + 1, j + 1), at(i, j + 1)]);
        }
    }
    TriMesh { verts, tris }
}

/// Two-triangle horizontal quad spanning `[x0,x1] x [y0,y1]` at height `z`.
pub fn quad_mesh(x0: f64, x1: f64, y0: f64, y1: f64, z: f64) -> TriMesh {
    let verts = vec![
        Vector3::new(x0, y0, z),
        Vector3::new(x1, y0, z),
        Vector3::new(x1, y1, z),
        Vector3::new(x0, y1, z),
    ];
    TriMesh { verts, tris: vec![[0, 1, 2], [0, 2, 3]] }
}

/// Surface mesh over a `g x g` particle grid (row-major particles).
pub fn grid_mesh(particles: &[Vector3<f64>], g: usize) -> TriMesh {
    assert_eq!(particles.len(), g * g);
    let mut tris = Vec::with_capacity(2 * (g - 1) * (g - 1));
    for i in 0..g - 1 {
        for j in 0..g - 1 {
            let a = i * g + j;
            let b = i * g + j + 1;
            let c = (i + 1) * g + j;
            let d = (i + 1) * g + j + 1;
            tris.push([a, b, d]);
            tris.push([a, d, c]);
        }
    }
    TriMesh { verts: particles.to_vec(), tris }
}

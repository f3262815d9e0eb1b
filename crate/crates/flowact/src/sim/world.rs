//! World state, scene reset, the kinematic step rule, and success metrics.

use nalgebra::{Isometry3, Rotation2, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mesh::{box_mesh, grid_mesh, prism_mesh, quad_mesh, sphere_mesh, TriMesh};
use super::{SimConfig, SimError};

/// Scene families. `Cloth` and `Fold` share a scene; the split mirrors the
/// exploration-vs-task distinction in the dataset layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Rigid,
    Drawer,
    Cloth,
    Pickplace,
    Pour,
    Fold,
    LongHorizon,
}

impl std::str::FromStr for EnvKind {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, SimError> {
        Ok(match s {
            "rigid" => Self::Rigid,
            "drawer" => Self::Drawer,
            "cloth" => Self::Cloth,
            "pickplace" => Self::Pickplace,
            "pour" => Self::Pour,
            "fold" => Self::Fold,
            "long_horizon" => Self::LongHorizon,
            other => return Err(SimError::UnknownEnv(other.to_string())),
        })
    }
}

impl std::fmt::Display for EnvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Rigid => "rigid",
            Self::Drawer => "drawer",
            Self::Cloth => "cloth",
            Self::Pickplace => "pickplace",
            Self::Pour => "pour",
            Self::Fold => "fold",
            Self::LongHorizon => "long_horizon",
        };
        f.write_str(s)
    }
}

/// Evaluation tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Pickplace,
    Pour,
    Drawer,
    Fold,
    LongHorizon,
}

impl Task {
    pub fn env(self) -> EnvKind {
        match self {
            Self::Pickplace => EnvKind::Pickplace,
            Self::Pour => EnvKind::Pour,
            Self::Drawer => EnvKind::Drawer,
            Self::Fold => EnvKind::Fold,
            Self::LongHorizon => EnvKind::LongHorizon,
        }
    }

    pub fn all() -> [Task; 4] {
        [Self::Pickplace, Self::Pour, Self::Drawer, Self::Fold]
    }

    /// Task id used by the flow generator's conditioning table.
    pub fn id(self) -> usize {
        match self {
            Self::Pickplace => 0,
            Self::Pour => 1,
            Self::Drawer => 2,
            Self::Fold => 3,
            Self::LongHorizon => 4,
        }
    }
}

impl std::str::FromStr for Task {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, SimError> {
        Ok(match s {
            "pickplace" => Self::Pickplace,
            "pour" => Self::Pour,
            "drawer" => Self::Drawer,
            "fold" => Self::Fold,
            "long_horizon" => Self::LongHorizon,
            other => return Err(SimError::UnknownTask(other.to_string())),
        })
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Pickplace => "pickplace",
            Self::Pour => "pour",
            Self::Drawer => "drawer",
            Self::Fold => "fold",
            Self::LongHorizon => "long_horizon",
        };
        f.write_str(s)
    }
}

/// Which body performs the manipulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Embodiment {
    Robot,
    Sphere,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RigidKind {
    Mug,
    Plate,
    Bowl,
    Cube,
}

impl RigidKind {
    pub fn half_height(self) -> f64 {
        match self {
            Self::Mug => 0.035,
            Self::Plate => 0.005,
            Self::Bowl => 0.02,
            Self::Cube => 0.02,
        }
    }

    /// Horizontal half extent (radius for round bodies).
    pub fn half_width(self) -> f64 {
        match self {
            Self::Mug => 0.025,
            Self::Plate => 0.055,
            Self::Bowl => 0.05,
            Self::Cube => 0.02,
        }
    }

    fn mesh(self) -> TriMesh {
        match self {
            Self::Mug => box_mesh(0.025, 0.025, 0.035),
            Self::Plate => prism_mesh(0.055, 0.005, 12),
            Self::Bowl => prism_mesh(0.05, 0.02, 12),
            Self::Cube => box_mesh(0.02, 0.02, 0.02),
        }
    }

    /// Grasp point in the body frame, if the body is graspable.
    fn grasp_local(self) -> Option<Vector3<f64>> {
        match self {
            Self::Mug => Some(Vector3::new(0.0, 0.0, 0.035)),
            Self::Cube => Some(Vector3::new(0.0, 0.0, 0.02)),
            Self::Plate | Self::Bowl => None,
        }
    }
}

/// Drawer geometry constants (base frame: +x is the opening direction).
pub mod drawer_geom {
    /// Base outer half extents.
    pub const BASE_HX: f64 = 0.09;
    pub const BASE_HY: f64 = 0.07;
    pub const BASE_HZ: f64 = 0.05;
    /// Sliding slab half extents.
    pub const SLAB_HX: f64 = 0.08;
    pub const SLAB_HY: f64 = 0.06;
    pub const SLAB_HZ: f64 = 0.04;
    /// Slab center x at zero extension.
    pub const SLAB_X0: f64 = 0.01;
    /// Handle half extents and protrusion from the slab front face.
    pub const HANDLE_HX: f64 = 0.02;
    pub const HANDLE_HY: f64 = 0.04;
    pub const HANDLE_HZ: f64 = 0.01;

    /// Handle center x in the base frame at extension `e`.
    pub fn handle_x(e: f64) -> f64 {
        SLAB_X0 + e + SLAB_HX + HANDLE_HX
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrawerState {
    pub pos: Vector3<f64>,
    pub yaw: f64,
    pub extension: f64,
    pub init_pos: Vector3<f64>,
}

impl DrawerState {
    pub fn base_iso(&self) -> Isometry3<f64> {
        Isometry3::from_parts(
            self.pos.into(),
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), self.yaw),
        )
    }

    /// Prismatic axis in world frame.
    pub fn axis(&self) -> Vector3<f64> {
        Vector3::new(self.yaw.cos(), self.yaw.sin(), 0.0)
    }

    pub fn handle_world(&self) -> Vector3<f64> {
        self.base_iso()
            .transform_point(&nalgebra::Point3::new(
                drawer_geom::handle_x(self.extension),
                0.0,
                0.0,
            ))
            .coords
    }

    pub fn pushback(&self) -> f64 {
        (self.pos - self.init_pos).norm()
    }
}

/// Cloth height above the table surface when flat.
pub const CLOTH_Z0: f64 = 0.001;
/// Extra height of the folded-over layer above the static layer.
const CLOTH_LAYER: f64 = 0.002;

#[derive(Debug, Clone, PartialEq)]
pub struct ClothState {
    /// World position of the (0,0) corner when flat.
    pub origin: Vector3<f64>,
    pub yaw: f64,
    /// Corner currently attached to the gripper, by corner index 0..4.
    pub grasped: Option<usize>,
    /// Grasped corner's world position (valid while grasped).
    pub corner_pos: Vector3<f64>,
    /// Completed fold: (corner index, released corner xy).
    pub fold: Option<(usize, [f64; 2])>,
}

/// Grid indices of the four cloth corners, order: (0,0), (0,G-1), (G-1,0),
/// (G-1,G-1).
pub fn cloth_corner_ij(corner: usize, g: usize) -> (usize, usize) {
    match corner {
        0 => (0, 0),
        1 => (0, g - 1),
        2 => (g - 1, 0),
        3 => (g - 1, g - 1),
        _ => panic!("corner index {corner} out of range"),
    }
}

/// The diagonally opposite corner.
pub fn cloth_opposite_corner(corner: usize) -> usize {
    3 - corner
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectState {
    Rigid { kind: RigidKind, pose: Isometry3<f64> },
    Drawer(DrawerState),
    Cloth(ClothState),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GripperState {
    pub pos: Vector3<f64>,
    pub rot: UnitQuaternion<f64>,
    pub open: bool,
}

impl GripperState {
    pub fn iso(&self) -> Isometry3<f64> {
        Isometry3::from_parts(self.pos.into(), self.rot)
    }
}

/// What the closed gripper is holding.
#[derive(Debug, Clone, PartialEq)]
pub enum Attachment {
    Rigid { obj: usize, rel: Isometry3<f64> },
    DrawerHandle { obj: usize },
    ClothCorner { obj: usize, corner: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub env: EnvKind,
    pub embodiment: Embodiment,
    pub t: usize,
    pub gripper: GripperState,
    pub objects: Vec<ObjectState>,
    pub attachment: Option<Attachment>,
    /// Last step's action target was clamped to the workspace.
    pub clamped: bool,
}

/// Absolute Cartesian target for one control step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    pub pos: Vector3<f64>,
    /// Axis-angle target orientation.
    pub axis_angle: Vector3<f64>,
    /// Gripper command; > 0.5 means closed.
    pub grip: f64,
}

impl Action {
    pub fn to_vec7(&self) -> [f64; 7] {
        [
            self.pos.x,
            self.pos.y,
            self.pos.z,
            self.axis_angle.x,
            self.axis_angle.y,
            self.axis_angle.z,
            self.grip,
        ]
    }

    pub fn from_vec7(v: &[f64]) -> Self {
        Self {
            pos: Vector3::new(v[0], v[1], v[2]),
            axis_angle: Vector3::new(v[3], v[4], v[5]),
            grip: v[6],
        }
    }

    pub fn closed(&self) -> bool {
        self.grip > 0.5
    }

    pub fn rot(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_scaled_axis(self.axis_angle)
    }
}

/// A point bound to scene material, so it can be re-located in any later
/// state of the same episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MaterialPoint {
    Rigid { obj: usize, local: [f64; 3] },
    DrawerBase { obj: usize, local: [f64; 3] },
    /// Local coords in the base frame at zero extension; follows the slab.
    DrawerSlab { obj: usize, local: [f64; 3] },
    /// Continuous cloth grid coordinates in `[0, G-1]^2`.
    Cloth { obj: usize, a: f64, b: f64 },
    Agent { local: [f64; 3] },
    Fixed { world: [f64; 3] },
}

impl MaterialPoint {
    /// Points that belong to a manipulable object (not agent, background, or
    /// table).
    pub fn on_object(&self) -> bool {
        !matches!(self, Self::Agent { .. } | Self::Fixed { .. })
    }
}

/// Cloth particle positions for the current state, row-major `[G*G]`.
pub fn cloth_particles(cfg: &SimConfig, st: &ClothState) -> Vec<Vector3<f64>> {
    let g = cfg.cloth_grid;
    let spacing = cfg.cloth_size / (g - 1) as f64;
    let rot = Rotation2::new(st.yaw);
    let rest = |i: usize, j: usize| -> Vector3<f64> {
        let xy = rot * Vector2::new(i as f64 * spacing, j as f64 * spacing);
        Vector3::new(st.origin.x + xy.x, st.origin.y + xy.y, CLOTH_Z0)
    };
    let mut pts: Vec<Vector3<f64>> = Vec::with_capacity(g * g);
    for i in 0..g {
        for j in 0..g {
            pts.push(rest(i, j));
        }
    }
    let (corner, p) = match (st.grasped, st.fold) {
        (Some(c), _) => (c, st.corner_pos),
        (None, Some((c, xy))) => (c, Vector3::new(xy[0], xy[1], CLOTH_Z0)),
        (None, None) => return pts,
    };
    let (ci, cj) = cloth_corner_ij(corner, g);
    let c0 = rest(ci, cj);
    let d = Vector2::new(p.x - c0.x, p.y - c0.y);
    let dist = d.norm();
    let h = (p.z - c0.z).max(0.0);
    if dist < 1e-6 {
        // Pure lift: a taut tent around the grasped corner.
        for pt in pts.iter_mut() {
            let r = (*pt - c0).norm();
            pt.z += (h - r).max(0.0);
        }
        return pts;
    }
    // Fold by rotation about a hinge line perpendicular to the travel
    // direction. The hinge distance r is chosen so the corner lands exactly
    // on p; it is capped at the cloth's far edge so a high lift drapes
    // instead of levitating the whole sheet.
    let u = d / dist;
    let s_of = |pt: &Vector3<f64>| (Vector2::new(pt.x, pt.y) - Vector2::new(c0.x, c0.y)).dot(&u);
    let s_max = pts.iter().map(|pt| s_of(pt)).fold(f64::MIN, f64::max);
    let r = ((dist * dist + h * h) / (2.0 * dist)).min(s_max);
    let theta = h.atan2(r - dist);
    let (sin_t, cos_t) = (theta.sin(), theta.cos());
    // The folded-over part rides slightly above the static part, but only
    // once released: while grasped the corner must track the gripper exactly.
    let layer = if st.grasped.is_some() { 0.0 } else { CLOTH_LAYER * (-cos_t).max(0.0) };
    for pt in pts.iter_mut() {
        let s = s_of(pt);
        if s >= r - 1e-12 {
            continue;
        }
        let lateral = Vector2::new(pt.x - c0.x, pt.y - c0.y) - u * s;
        let s_new = r - (r - s) * cos_t;
        let z_new = c0.z + (r - s) * sin_t + layer;
        pt.x = c0.x + u.x * s_new + lateral.x;
        pt.y = c0.y + u.y * s_new + lateral.y;
        pt.z = z_new;
    }
    pts
}

fn drawer_base_mesh() -> TriMesh {
    use drawer_geom::*;
    let wall = 0.005;
    let parts = [
        // back wall
        box_mesh(wall, BASE_HY, BASE_HZ)
            .transformed(&Isometry3::translation(-BASE_HX + wall, 0.0, 0.0)),
        // side walls
        box_mesh(BASE_HX, wall, BASE_HZ)
            .transformed(&Isometry3::translation(0.0, -BASE_HY + wall, 0.0)),
        box_mesh(BASE_HX, wall, BASE_HZ)
            .transformed(&Isometry3::translation(0.0, BASE_HY - wall, 0.0)),
        // floor and roof
        box_mesh(BASE_HX, BASE_HY, wall)
            .transformed(&Isometry3::translation(0.0, 0.0, -BASE_HZ + wall)),
        box_mesh(BASE_HX, BASE_HY, wall)
            .transformed(&Isometry3::translation(0.0, 0.0, BASE_HZ - wall)),
    ];
    TriMesh::merged(&parts)
}

fn drawer_mesh(state: &DrawerState) -> TriMesh {
    use drawer_geom::*;
    let e = state.extension;
    let slab = box_mesh(SLAB_HX, SLAB_HY, SLAB_HZ)
        .transformed(&Isometry3::translation(SLAB_X0 + e, 0.0, 0.0));
    let handle = box_mesh(HANDLE_HX, HANDLE_HY, HANDLE_HZ)
        .transformed(&Isometry3::translation(handle_x(e), 0.0, 0.0));
    TriMesh::merged(&[drawer_base_mesh(), slab, handle]).transformed(&state.base_iso())
}

fn agent_mesh(gr: &GripperState, emb: Embodiment) -> TriMesh {
    match emb {
        Embodiment::Robot => {
            let finger =
                box_mesh(0.01, 0.01, 0.03).transformed(&Isometry3::translation(0.0, 0.0, 0.03));
            let palm =
                box_mesh(0.025, 0.025, 0.01).transformed(&Isometry3::translation(0.0, 0.0, 0.07));
            TriMesh::merged(&[finger, palm]).transformed(&gr.iso())
        }
        Embodiment::Sphere => sphere_mesh(0.035, 6, 10)
            .transformed(&Isometry3::translation(gr.pos.x, gr.pos.y, gr.pos.z + 0.035)),
    }
}

/// Table surface bounds (world frame).
pub const TABLE: (f64, f64, f64, f64) = (0.2, 1.0, -0.6, 0.6);

/// Body id of the table segment.
pub const TABLE_ID: i32 = 1;

/// Segment id of object index `i`.
pub fn object_seg_id(i: usize) -> i32 {
    2 + i as i32
}

/// Segment id of the agent body.
pub fn agent_seg_id(state: &WorldState) -> i32 {
    2 + state.objects.len() as i32
}

/// World-frame meshes with their segment ids, table first, agent last.
pub fn body_meshes(state: &WorldState, cfg: &SimConfig) -> Vec<(i32, TriMesh)> {
    let mut out = Vec::with_capacity(state.objects.len() + 2);
    out.push((TABLE_ID, quad_mesh(TABLE.0, TABLE.1, TABLE.2, TABLE.3, 0.0)));
    for (i, obj) in state.objects.iter().enumerate() {
        let mesh = match obj {
            ObjectState::Rigid { kind, pose } => kind.mesh().transformed(pose),
            ObjectState::Drawer(d) => drawer_mesh(d),
            ObjectState::Cloth(c) => grid_mesh(&cloth_particles(cfg, c), cfg.cloth_grid),
        };
        out.push((object_seg_id(i), mesh));
    }
    out.push((agent_seg_id(state), agent_mesh(&state.gripper, state.embodiment)));
    out
}

/// World position of a material point in the given state.
pub fn world_point(state: &WorldState, cfg: &SimConfig, mp: &MaterialPoint) -> Vector3<f64> {
    let at = |iso: &Isometry3<f64>, local: &[f64; 3]| {
        iso.transform_point(&nalgebra::Point3::new(local[0], local[1], local[2])).coords
    };
    match mp {
        MaterialPoint::Rigid { obj, local } => match &state.objects[*obj] {
            ObjectState::Rigid { pose, .. } => at(pose, local),
            other => panic!("material point kind mismatch: {other:?}"),
        },
        MaterialPoint::DrawerBase { obj, local } => match &state.objects[*obj] {
            ObjectState::Drawer(d) => at(&d.base_iso(), local),
            other => panic!("material point kind mismatch: {other:?}"),
        },
        MaterialPoint::DrawerSlab { obj, local } => match &state.objects[*obj] {
            ObjectState::Drawer(d) => {
                let shifted = [local[0] + d.extension, local[1], local[2]];
                at(&d.base_iso(), &shifted)
            }
            other => panic!("material point kind mismatch: {other:?}"),
        },
        MaterialPoint::Cloth { obj, a, b } => match &state.objects[*obj] {
            ObjectState::Cloth(c) => {
                cloth_bilinear(&cloth_particles(cfg, c), cfg.cloth_grid, *a, *b)
            }
            other => panic!("material point kind mismatch: {other:?}"),
        },
        MaterialPoint::Agent { local } => at(&state.gripper.iso(), local),
        MaterialPoint::Fixed { world } => Vector3::new(world[0], world[1], world[2]),
    }
}

fn cloth_bilinear(pts: &[Vector3<f64>], g: usize, a: f64, b: f64) -> Vector3<f64> {
    let i0 = (a.floor() as usize).min(g - 2);
    let j0 = (b.floor() as usize).min(g - 2);
    let fa = (a - i0 as f64).clamp(0.0, 1.0);
    let fb = (b - j0 as f64).clamp(0.0, 1.0);
    let p00 = pts[i0 * g + j0];
    let p01 = pts[i0 * g + j0 + 1];
    let p10 = pts[(i0 + 1) * g + j0];
    let p11 = pts[(i0 + 1) * g + j0 + 1];
    p00 * (1.0 - fa) * (1.0 - fb)
        + p01 * (1.0 - fa) * fb
        + p10 * fa * (1.0 - fb)
        + p11 * fa * fb
}

/// Batch version of [`world_point`]: cloth particle grids are built once per
/// cloth object instead of once per query point.
pub fn world_points(
    state: &WorldState,
    cfg: &SimConfig,
    mps: &[MaterialPoint],
) -> Vec<Vector3<f64>> {
    let mut cloth_cache: Vec<Option<Vec<Vector3<f64>>>> = vec![None; state.objects.len()];
    mps.iter()
        .map(|mp| match mp {
            MaterialPoint::Cloth { obj, a, b } => {
                let pts = cloth_cache[*obj].get_or_insert_with(|| match &state.objects[*obj] {
                    ObjectState::Cloth(c) => cloth_particles(cfg, c),
                    other => panic!("material point kind mismatch: {other:?}"),
                });
                cloth_bilinear(pts, cfg.cloth_grid, *a, *b)
            }
            other => world_point(state, cfg, other),
        })
        .collect()
}

/// Bind a frame-0 world point to scene material using its segment id.
///
/// Assumes the state is a reset state (drawer closed, cloth flat), which is
/// where dense keypoint registration happens.
pub fn resolve_material_point(
    state: &WorldState,
    cfg: &SimConfig,
    world: &Vector3<f64>,
    seg: i32,
) -> MaterialPoint {
    if seg == agent_seg_id(state) {
        let local = state.gripper.iso().inverse_transform_point(&(*world).into());
        return MaterialPoint::Agent { local: [local.x, local.y, local.z] };
    }
    let idx = seg - 2;
    if idx < 0 || idx as usize >= state.objects.len() {
        return MaterialPoint::Fixed { world: [world.x, world.y, world.z] };
    }
    let obj = idx as usize;
    match &state.objects[obj] {
        ObjectState::Rigid { pose, .. } => {
            let local = pose.inverse_transform_point(&(*world).into());
            MaterialPoint::Rigid { obj, local: [local.x, local.y, local.z] }
        }
        ObjectState::Drawer(d) => {
            use drawer_geom::*;
            let q = d.base_iso().inverse_transform_point(&(*world).into());
            let e = d.extension;
            let on_front = q.x >= SLAB_X0 + e + SLAB_HX - 0.01;
            let on_handle = q.x >= SLAB_X0 + e + SLAB_HX - 1e-6
                && q.y.abs() <= HANDLE_HY + 1e-6
                && q.z.abs() <= HANDLE_HZ + 1e-6;
            if on_front || on_handle {
                MaterialPoint::DrawerSlab { obj, local: [q.x - e, q.y, q.z] }
            } else {
                MaterialPoint::DrawerBase { obj, local: [q.x, q.y, q.z] }
            }
        }
        ObjectState::Cloth(c) => {
            let g = cfg.cloth_grid;
            let spacing = cfg.cloth_size / (g - 1) as f64;
            let rel = Rotation2::new(-c.yaw)
                * Vector2::new(world.x - c.origin.x, world.y - c.origin.y);
            let a = (rel.x / spacing).clamp(0.0, (g - 1) as f64);
            let b = (rel.y / spacing).clamp(0.0, (g - 1) as f64);
            MaterialPoint::Cloth { obj, a, b }
        }
    }
}

/// Grasp candidates: (attachment to create, world grasp point).
fn grasp_candidates(state: &WorldState, cfg: &SimConfig) -> Vec<(Attachment, Vector3<f64>)> {
    let mut out = Vec::new();
    for (i, obj) in state.objects.iter().enumerate() {
        match obj {
            ObjectState::Rigid { kind, pose } => {
                if let Some(local) = kind.grasp_local() {
                    let p = pose.transform_point(&local.into()).coords;
                    // rel filled in at attach time
                    out.push((Attachment::Rigid { obj: i, rel: Isometry3::identity() }, p));
                }
            }
            ObjectState::Drawer(d) => {
                // The whole handle bar is graspable: offer the bar point
                // nearest to the gripper.
                use drawer_geom::*;
                let iso = d.base_iso();
                let q = iso.inverse_transform_point(&state.gripper.pos.into());
                let p = iso
                    .transform_point(&nalgebra::Point3::new(
                        handle_x(d.extension),
                        q.y.clamp(-HANDLE_HY, HANDLE_HY),
                        q.z.clamp(-HANDLE_HZ, HANDLE_HZ),
                    ))
                    .coords;
                out.push((Attachment::DrawerHandle { obj: i }, p));
            }
            ObjectState::Cloth(c) => {
                if c.grasped.is_none() && c.fold.is_none() {
                    let pts = cloth_particles(cfg, c);
                    for corner in 0..4 {
                        let (ci, cj) = cloth_corner_ij(corner, cfg.cloth_grid);
                        out.push((
                            Attachment::ClothCorner { obj: i, corner },
                            pts[ci * cfg.cloth_grid + cj],
                        ));
                    }
                }
            }
        }
    }
    out
}

/// Support height under a horizontal position: plate top, open-slab floor,
/// or the table.
fn support_height(state: &WorldState, skip_obj: usize, xy: Vector2<f64>) -> f64 {
    let mut z = 0.0f64;
    for (i, obj) in state.objects.iter().enumerate() {
        if i == skip_obj {
            continue;
        }
        match obj {
            ObjectState::Rigid { kind: RigidKind::Plate, pose } => {
                let c = pose.translation.vector;
                if (xy - Vector2::new(c.x, c.y)).norm() < RigidKind::Plate.half_width() {
                    z = z.max(c.z + RigidKind::Plate.half_height());
                }
            }
            ObjectState::Drawer(d) => {
                use drawer_geom::*;
                let q = d
                    .base_iso()
                    .inverse_transform_point(&nalgebra::Point3::new(xy.x, xy.y, 0.0));
                let slab_cx = SLAB_X0 + d.extension;
                if (q.x - slab_cx).abs() < SLAB_HX && q.y.abs() < SLAB_HY {
                    z = z.max(d.pos.z + SLAB_HZ);
                }
            }
            _ => {}
        }
    }
    z
}

fn settle_rigid(state: &mut WorldState, obj: usize) {
    let (kind, xy) = match &state.objects[obj] {
        ObjectState::Rigid { kind, pose } => {
            (*kind, Vector2::new(pose.translation.vector.x, pose.translation.vector.y))
        }
        _ => return,
    };
    let z = support_height(state, obj, xy) + kind.half_height();
    if let ObjectState::Rigid { pose, .. } = &mut state.objects[obj] {
        pose.translation.vector.z = z;
    }
}

fn sample(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Build the initial world for an env kind. Object poses are drawn from the
/// documented per-env ranges; identical `(env, seed)` gives a bit-identical
/// state.
pub fn reset(env: EnvKind, seed: u64, _cfg: &SimConfig) -> WorldState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mug = |rng: &mut ChaCha8Rng| ObjectState::Rigid {
        kind: RigidKind::Mug,
        pose: Isometry3::translation(
            sample(rng, 0.42, 0.76),
            sample(rng, -0.1, 0.02),
            RigidKind::Mug.half_height(),
        ),
    };
    let dish = |rng: &mut ChaCha8Rng, kind: RigidKind| ObjectState::Rigid {
        kind,
        pose: Isometry3::translation(
            sample(rng, 0.42, 0.65),
            sample(rng, 0.24, 0.32),
            kind.half_height(),
        ),
    };
    let drawer = |rng: &mut ChaCha8Rng, z_lo: f64, z_hi: f64| {
        let pos = Vector3::new(
            sample(rng, 0.45, 0.62),
            sample(rng, -0.4, -0.32),
            sample(rng, z_lo, z_hi),
        );
        ObjectState::Drawer(DrawerState {
            pos,
            yaw: sample(rng, 3.0 * std::f64::consts::PI / 8.0, std::f64::consts::PI / 2.0),
            extension: 0.0,
            init_pos: pos,
        })
    };
    let cloth = |rng: &mut ChaCha8Rng| {
        ObjectState::Cloth(ClothState {
            origin: Vector3::new(sample(rng, 0.32, 0.44), sample(rng, -0.32, 0.32), 0.0),
            yaw: sample(rng, -std::f64::consts::PI / 8.0, std::f64::consts::PI / 8.0),
            grasped: None,
            corner_pos: Vector3::zeros(),
            fold: None,
        })
    };
    let objects = match env {
        EnvKind::Rigid => {
            let m = mug(&mut rng);
            let side = if seed % 2 == 0 { RigidKind::Plate } else { RigidKind::Bowl };
            vec![m, dish(&mut rng, side)]
        }
        EnvKind::Pickplace => {
            let m = mug(&mut rng);
            vec![m, dish(&mut rng, RigidKind::Plate)]
        }
        EnvKind::Pour => {
            let m = mug(&mut rng);
            vec![m, dish(&mut rng, RigidKind::Bowl)]
        }
        EnvKind::Drawer => vec![drawer(&mut rng, 0.05, 0.18)],
        EnvKind::Cloth | EnvKind::Fold => vec![cloth(&mut rng)],
        EnvKind::LongHorizon => {
            let d = drawer(&mut rng, 0.05, 0.12);
            let cube = ObjectState::Rigid {
                kind: RigidKind::Cube,
                pose: Isometry3::translation(
                    sample(&mut rng, 0.42, 0.76),
                    sample(&mut rng, -0.1, 0.02),
                    RigidKind::Cube.half_height(),
                ),
            };
            vec![d, cube]
        }
    };
    WorldState {
        env,
        embodiment: Embodiment::Robot,
        t: 0,
        gripper: GripperState {
            pos: Vector3::new(0.45, 0.0, 0.35),
            rot: UnitQuaternion::identity(),
            open: true,
        },
        objects,
        attachment: None,
        clamped: false,
    }
}

fn clamp_workspace(p: Vector3<f64>, ws: &super::Workspace) -> (Vector3<f64>, bool) {
    let q = Vector3::new(
        p.x.clamp(ws.min[0], ws.max[0]),
        p.y.clamp(ws.min[1], ws.max[1]),
        p.z.clamp(ws.min[2], ws.max[2]),
    );
    (q, q != p)
}

/// Advance the world by one control step. Pure: returns the next state.
pub fn step(state: &WorldState, action: &Action, cfg: &SimConfig) -> WorldState {
    let mut st = state.clone();
    st.t += 1;

    let (target, clamped) = clamp_workspace(action.pos, &cfg.workspace);
    st.clamped = clamped;
    let old_pos = st.gripper.pos;
    let delta = target - old_pos;
    let dist = delta.norm();
    st.gripper.pos = if dist <= cfg.max_speed || dist < 1e-12 {
        target
    } else {
        old_pos + delta * (cfg.max_speed / dist)
    };
    let target_rot = action.rot();
    let angle = st.gripper.rot.angle_to(&target_rot);
    st.gripper.rot = if angle <= cfg.max_rot || angle < 1e-12 {
        target_rot
    } else {
        st.gripper.rot.slerp(&target_rot, cfg.max_rot / angle)
    };

    let moved = st.gripper.pos - old_pos;

    // Attached objects follow the gripper.
    match st.attachment.clone() {
        Some(Attachment::Rigid { obj, rel }) => {
            if let ObjectState::Rigid { pose, .. } = &mut st.objects[obj] {
                *pose = st.gripper.iso() * rel;
            }
        }
        Some(Attachment::DrawerHandle { obj }) => {
            if let ObjectState::Drawer(d) = &mut st.objects[obj] {
                let along = moved.dot(&d.axis());
                let new_e = d.extension + along;
                if new_e < 0.0 {
                    // Pushing past the closed stop shoves the whole cabinet.
                    let overshoot = -new_e;
                    d.pos -= d.axis() * overshoot;
                    d.extension = 0.0;
                } else {
                    d.extension = new_e.min(cfg.drawer_max_extension);
                }
            }
        }
        Some(Attachment::ClothCorner { obj, .. }) => {
            if let ObjectState::Cloth(c) = &mut st.objects[obj] {
                c.corner_pos = st.gripper.pos;
            }
        }
        None => {}
    }

    // Bulldozer contacts: an unattached gripper shoves plates, drawer slabs,
    // and drawer bases it penetrates.
    let attached_to = |st: &WorldState, i: usize| match &st.attachment {
        Some(Attachment::Rigid { obj, .. })
        | Some(Attachment::DrawerHandle { obj })
        | Some(Attachment::ClothCorner { obj, .. }) => *obj == i,
        None => false,
    };
    let tip = st.gripper.pos;
    let moved_xy = Vector3::new(moved.x, moved.y, 0.0);
    for i in 0..st.objects.len() {
        if attached_to(&st, i) {
            continue;
        }
        match &mut st.objects[i] {
            ObjectState::Rigid { kind: RigidKind::Plate, pose } => {
                let c = pose.translation.vector;
                let horiz = (Vector2::new(tip.x, tip.y) - Vector2::new(c.x, c.y)).norm();
                if horiz < RigidKind::Plate.half_width() + 0.005
                    && tip.z < c.z + RigidKind::Plate.half_height() + 0.005
                {
                    pose.translation.vector += moved_xy;
                }
            }
            ObjectState::Drawer(d) => {
                use drawer_geom::*;
                let q = d.base_iso().inverse_transform_point(&tip.into());
                let in_base =
                    q.x.abs() < BASE_HX && q.y.abs() < BASE_HY && q.z.abs() < BASE_HZ;
                let slab_cx = SLAB_X0 + d.extension;
                let in_slab = (q.x - slab_cx).abs() < SLAB_HX + HANDLE_HX * 2.0
                    && q.y.abs() < SLAB_HY
                    && q.z.abs() < SLAB_HZ
                    && q.x > slab_cx;
                if in_slab && d.extension > 0.0 {
                    let along = moved.dot(&d.axis());
                    if along < 0.0 {
                        let new_e = d.extension + along;
                        if new_e < 0.0 {
                            d.pos -= d.axis() * (-new_e);
                            d.extension = 0.0;
                        } else {
                            d.extension = new_e;
                        }
                    }
                } else if in_base {
                    d.pos += moved_xy;
                }
            }
            _ => {}
        }
    }

    // Gripper open/close transitions.
    let want_closed = action.closed();
    if want_closed && st.gripper.open {
        st.gripper.open = false;
        let mut best: Option<(f64, Attachment)> = None;
        for (att, p) in grasp_candidates(&st, cfg) {
            let d = (p - st.gripper.pos).norm();
            if d <= cfg.grasp_radius && best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                best = Some((d, att));
            }
        }
        if let Some((_, att)) = best {
            let att = match att {
                Attachment::Rigid { obj, .. } => {
                    let pose = match &st.objects[obj] {
                        ObjectState::Rigid { pose, .. } => *pose,
                        _ => unreachable!(),
                    };
                    Attachment::Rigid { obj, rel: st.gripper.iso().inverse() * pose }
                }
                other => other,
            };
            if let Attachment::ClothCorner { obj, corner } = &att {
                if let ObjectState::Cloth(c) = &mut st.objects[*obj] {
                    c.grasped = Some(*corner);
                    c.corner_pos = st.gripper.pos;
                }
            }
            st.attachment = Some(att);
        }
    } else if !want_closed && !st.gripper.open {
        st.gripper.open = true;
        match st.attachment.take() {
            Some(Attachment::Rigid { obj, .. }) => settle_rigid(&mut st, obj),
            Some(Attachment::ClothCorner { obj, corner }) => {
                if let ObjectState::Cloth(c) = &mut st.objects[obj] {
                    c.grasped = None;
                    c.fold = Some((corner, [c.corner_pos.x, c.corner_pos.y]));
                }
            }
            _ => {}
        }
    }

    st
}

/// Terminal success check for a task, comparing the final state against the
/// episode's initial state.
///
/// # Errors
///
/// [`SimError::WrongScene`] when the state lacks the objects the task needs.
pub fn task_success(
    init: &WorldState,
    fin: &WorldState,
    task: Task,
    cfg: &SimConfig,
) -> Result<bool, SimError> {
    let find_rigid = |st: &WorldState, kind: RigidKind| {
        st.objects.iter().enumerate().find_map(|(i, o)| match o {
            ObjectState::Rigid { kind: k, pose } if *k == kind => Some((i, *pose)),
            _ => None,
        })
    };
    let find_drawer = |st: &WorldState| {
        st.objects.iter().find_map(|o| match o {
            ObjectState::Drawer(d) => Some(d.clone()),
            _ => None,
        })
    };
    let err = || SimError::WrongScene { task };
    match task {
        Task::Pickplace => {
            let (mug_i, mug) = find_rigid(fin, RigidKind::Mug).ok_or_else(err)?;
            let (_, plate) = find_rigid(fin, RigidKind::Plate).ok_or_else(err)?;
            let (_, plate0) = find_rigid(init, RigidKind::Plate).ok_or_else(err)?;
            let mug_c = mug.translation.vector;
            let plate_c = plate.translation.vector;
            let on_plate = (Vector2::new(mug_c.x, mug_c.y) - Vector2::new(plate_c.x, plate_c.y))
                .norm()
                < RigidKind::Plate.half_width();
            let resting = mug_c.z
                < RigidKind::Plate.half_height() * 2.0 + RigidKind::Mug.half_height() + 0.01;
            let plate_still = (plate.translation.vector - plate0.translation.vector).norm()
                < cfg.success.plate_displacement_max;
            let released = !matches!(
                &fin.attachment,
                Some(Attachment::Rigid { obj, .. }) if *obj == mug_i
            );
            Ok(on_plate && resting && plate_still && released)
        }
        Task::Pour => {
            let (_, mug) = find_rigid(fin, RigidKind::Mug).ok_or_else(err)?;
            let (_, mug0) = find_rigid(init, RigidKind::Mug).ok_or_else(err)?;
            let (_, bowl) = find_rigid(fin, RigidKind::Bowl).ok_or_else(err)?;
            let up0 = mug0.rotation * Vector3::z();
            let up = mug.rotation * Vector3::z();
            let tilt = up0.angle(&up);
            let mug_c = mug.translation.vector;
            let bowl_c = bowl.translation.vector;
            let mug_r = RigidKind::Mug.half_width();
            let bowl_r = RigidKind::Bowl.half_width();
            let need = cfg.success.pour_overlap_frac * 2.0 * mug_r;
            let overlap = |a: f64, b: f64| {
                let lo = (a - mug_r).max(b - bowl_r);
                let hi = (a + mug_r).min(b + bowl_r);
                hi - lo
            };
            let over = overlap(mug_c.x, bowl_c.x) >= need && overlap(mug_c.y, bowl_c.y) >= need;
            Ok(tilt > cfg.success.pour_min_tilt && over)
        }
        Task::Drawer => {
            let d = find_drawer(fin).ok_or_else(err)?;
            let open = d.extension >= cfg.drawer_max_extension - cfg.success.drawer_open_tol;
            Ok(open && d.pushback() < cfg.success.drawer_pushback_max)
        }
        Task::Fold => {
            let cloth = fin
                .objects
                .iter()
                .find_map(|o| match o {
                    ObjectState::Cloth(c) => Some(c.clone()),
                    _ => None,
                })
                .ok_or_else(err)?;
            let g = cfg.cloth_grid;
            let pts = cloth_particles(cfg, &cloth);
            let rest = {
                let flat = ClothState { grasped: None, fold: None, ..cloth.clone() };
                cloth_particles(cfg, &flat)
            };
            for corner in 0..4 {
                let (ci, cj) = cloth_corner_ij(corner, g);
                let (oi, oj) = cloth_corner_ij(cloth_opposite_corner(corner), g);
                let cur = pts[ci * g + cj];
                let target = rest[oi * g + oj];
                let dist = (Vector2::new(cur.x, cur.y) - Vector2::new(target.x, target.y)).norm();
                if dist < cfg.success.fold_tol {
                    return Ok(true);
                }
            }
            Ok(false)
        }
        Task::LongHorizon => {
            let d = find_drawer(fin).ok_or_else(err)?;
            let open = d.extension >= cfg.drawer_max_extension - cfg.success.drawer_open_tol;
            let (_, cube) = find_rigid(fin, RigidKind::Cube).ok_or_else(err)?;
            use drawer_geom::*;
            let q = d.base_iso().inverse_transform_point(&cube.translation.vector.into());
            let slab_cx = SLAB_X0 + d.extension;
            let inside = (q.x - slab_cx).abs() < SLAB_HX
                && q.y.abs() < SLAB_HY
                && q.z > 0.0
                && q.z < SLAB_HZ + 0.06;
            Ok(open && inside)
        }
    }
}

//! Learning-free baseline: pick a contact point from the visible object
//! points, then replay the object's motion by fitting rigid transforms
//! between consecutive ground-truth 3D flow frames and applying them to the
//! end effector, open loop.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::explore::Episode;
use crate::filters::{apply_filters, FilterConfig, FilterError};
use crate::sim::raster::RenderOut;
use crate::sim::world::{
    reset, step, task_success, world_points, Action, Embodiment, Task, WorldState,
};
use crate::sim::{render_frame, Camera, SimConfig, SimError};

#[derive(Debug, Error)]
pub enum HeuristicError {
    #[error("rigid fit needs at least 3 points, got {got}")]
    TooFewPoints { got: usize },
    #[error("point set is collinear, rigid fit is underdetermined")]
    Degenerate,
    #[error("consensus kept only {got} inliers, need at least 3")]
    TooFewInliers { got: usize },
    #[error("no visible points to select a contact from")]
    NoVisiblePoints,
    #[error("flow has no frames")]
    EmptyFlow,
    #[error("episode carries no task label")]
    NoTask,
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Consensus loop settings for rigid transform estimation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Residual below which a correspondence counts as an inlier, meters.
    pub inlier_threshold: f64,
    pub sample_size: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { iterations: 256, inlier_threshold: 0.005, sample_size: 3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct HeuristicConfig {
    pub ransac: RansacConfig,
    /// A commanded end-effector displacement above this between consecutive
    /// flow frames marks the episode failed, standing in for a hardware
    /// safety stop.
    pub jump_limit: f64,
    /// Step budget for the scripted approach to the contact point.
    pub max_approach_steps: usize,
}

impl Default for HeuristicConfig {
    fn default() -> Self {
        Self { ransac: RansacConfig::default(), jump_limit: 0.10, max_approach_steps: 400 }
    }
}

/// Proper rigid motion `p -> R p + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

/// Least-squares rigid alignment of `a[idx]` onto `b[idx]` via the singular
/// value decomposition of the cross-covariance. `None` when the source
/// points are collinear and the rotation is underdetermined.
fn kabsch(a: &[Vector3<f64>], b: &[Vector3<f64>], idx: &[usize]) -> Option<RigidTransform> {
    if idx.len() < 3 {
        return None;
    }
    let n = idx.len() as f64;
    let mut ca = Vector3::zeros();
    let mut cb = Vector3::zeros();
    for &i in idx {
        ca += a[i];
        cb += b[i];
    }
    ca /= n;
    cb /= n;
    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for &i in idx {
        let da = a[i] - ca;
        let db = b[i] - cb;
        h += da * db.transpose();
        spread += da * da.transpose();
    }
    let mut sv: Vec<f64> = spread.svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    if sv[1] <= 1e-9 * sv[0].max(1e-300) {
        return None;
    }
    let svd = h.svd(true, true);
    let u = svd.u?;
    let vt = svd.v_t?;
    let v = vt.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        let k = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|(_, x), (_, y)| x.total_cmp(y))
            .map(|(k, _)| k)
            .unwrap();
        d[(k, k)] = -1.0;
    }
    let r = v * d * u.transpose();
    Some(RigidTransform { rotation: r, translation: cb - r * ca })
}

fn sample_distinct(rng: &mut ChaCha8Rng, m: usize, k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let i = rng.random_range(0..m);
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

/// Estimate the rigid motion mapping `a` onto `b` with a consensus loop:
/// minimal samples propose transforms, the largest inlier set wins, and the
/// final fit minimizes the residual over those inliers.
///
/// # Errors
///
/// Fewer than 3 points, a collinear source set, or a consensus set below 3.
pub fn estimate_transform(
    a: &[Vector3<f64>],
    b: &[Vector3<f64>],
    cfg: &RansacConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(RigidTransform, Vec<usize>), HeuristicError> {
    assert_eq!(a.len(), b.len(), "correspondence count");
    assert!(cfg.sample_size >= 3, "rigid fit needs 3-point samples");
    let m = a.len();
    if m < 3 {
        return Err(HeuristicError::TooFewPoints { got: m });
    }
    let all: Vec<usize> = (0..m).collect();
    if m <= cfg.sample_size {
        let t = kabsch(a, b, &all).ok_or(HeuristicError::Degenerate)?;
        return Ok((t, all));
    }
    let mut best: Option<Vec<usize>> = None;
    for _ in 0..cfg.iterations {
        let idx = sample_distinct(rng, m, cfg.sample_size);
        let Some(t) = kabsch(a, b, &idx) else { continue };
        let inliers: Vec<usize> = (0..m)
            .filter(|&i| (t.apply(&a[i]) - b[i]).norm() < cfg.inlier_threshold)
            .collect();
        if best.as_ref().is_none_or(|cur| inliers.len() > cur.len()) {
            best = Some(inliers);
        }
    }
    let inliers = best.ok_or(HeuristicError::Degenerate)?;
    if inliers.len() < 3 {
        return Err(HeuristicError::TooFewInliers { got: inliers.len() });
    }
    let t = kabsch(a, b, &inliers).ok_or(HeuristicError::Degenerate)?;
    Ok((t, inliers))
}

/// Contact point for grasping: the centroid of the camera-visible object
/// points.
///
/// # Errors
///
/// [`HeuristicError::NoVisiblePoints`] when nothing is visible.
pub fn select_contact_point(visible: &[Vector3<f64>]) -> Result<Vector3<f64>, HeuristicError> {
    if visible.is_empty() {
        return Err(HeuristicError::NoVisiblePoints);
    }
    Ok(visible.iter().sum::<Vector3<f64>>() / visible.len() as f64)
}

/// Ground-truth 3D flow of the filtered object keypoints: world positions
/// per demo step, plus frame-0 visibility from the executing robot's camera.
#[derive(Debug, Clone)]
pub struct GroundTruthFlow {
    /// `[t][k]` world positions, one frame before every demo action.
    pub points: Vec<Vec<Vector3<f64>>>,
    pub visible0: Vec<bool>,
}

/// Depth slack for the contact-visibility test, meters. Keypoints sit on
/// reconstructed surfaces a few millimeters off the meshes, so visibility
/// compares against the rendered depth buffer with this much give.
pub const CONTACT_DEPTH_TOL: f64 = 0.005;

fn depth_visible(frame: &RenderOut, cam: &Camera, p: &Vector3<f64>) -> bool {
    let Some((u, v, d)) = cam.project(p) else {
        return false;
    };
    if !Camera::on_canvas(u, v) {
        return false;
    }
    let (dr, _) = frame.at(u, v);
    dr == 0.0 || d - dr < CONTACT_DEPTH_TOL
}

/// Extract the ground-truth 3D flow from a demonstration by replaying it and
/// reading the surviving object keypoints' true world positions each step.
/// Frame-0 visibility is judged from the executing robot's viewpoint through
/// `contact_cam`.
///
/// # Errors
///
/// Filtering failures when no object keypoint survives.
pub fn ground_truth_flow(
    demo: &Episode,
    filter: &FilterConfig,
    cfg: &SimConfig,
    contact_cam: &Camera,
) -> Result<GroundTruthFlow, HeuristicError> {
    let survivors: Vec<usize> = apply_filters(&demo.tracks, &demo.frame0(), filter)
        .into_iter()
        .filter(|&k| demo.material_points[k].on_object())
        .collect();
    if survivors.is_empty() {
        return Err(HeuristicError::Filter(FilterError::NoSurvivors { wanted: 1 }));
    }
    let mps: Vec<_> = survivors.iter().map(|&k| demo.material_points[k].clone()).collect();
    let mut st = reset(demo.env, demo.seed, cfg);
    st.embodiment = demo.embodiment;
    let mut points = Vec::with_capacity(demo.actions.len());
    for a in &demo.actions {
        points.push(world_points(&st, cfg, &mps));
        st = step(&st, &Action::from_vec7(a), cfg);
    }
    let mut robot0 = reset(demo.env, demo.seed, cfg);
    robot0.embodiment = Embodiment::Robot;
    let frame = render_frame(&robot0, cfg, contact_cam);
    let w0 = world_points(&robot0, cfg, &mps);
    let visible0 = w0.iter().map(|p| depth_visible(&frame, contact_cam, p)).collect();
    Ok(GroundTruthFlow { points, visible0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    /// Transform estimation failed between these consecutive frames.
    Estimation { step: usize },
    /// The commanded end-effector jump exceeded the limit.
    Jump { step: usize },
}

#[derive(Debug, Clone)]
pub struct HeuristicOutcome {
    pub success: bool,
    /// Whether closing at the contact point attached anything.
    pub grasped: bool,
    pub failure: Option<FailureKind>,
    pub actions: Vec<[f64; 7]>,
    pub final_state: WorldState,
}

fn clamp_pos(p: Vector3<f64>, cfg: &SimConfig) -> Vector3<f64> {
    Vector3::new(
        p.x.clamp(cfg.workspace.min[0], cfg.workspace.max[0]),
        p.y.clamp(cfg.workspace.min[1], cfg.workspace.max[1]),
        p.z.clamp(cfg.workspace.min[2], cfg.workspace.max[2]),
    )
}

/// Run the baseline on a prepared flow: approach the contact point straight
/// on, close the gripper, then chain per-frame rigid transforms onto the
/// end-effector pose with the task checked after every step. A final release
/// lets placed objects settle.
///
/// # Errors
///
/// Empty flow, no visible contact candidates, or scene/task mismatches.
pub fn rollout_from_flow(
    task: Task,
    env_seed: u64,
    flow: &GroundTruthFlow,
    hcfg: &HeuristicConfig,
    cfg: &SimConfig,
    seed: u64,
) -> Result<HeuristicOutcome, HeuristicError> {
    if flow.points.is_empty() {
        return Err(HeuristicError::EmptyFlow);
    }
    let visible: Vec<Vector3<f64>> = flow.points[0]
        .iter()
        .zip(&flow.visible0)
        .filter(|(_, &v)| v)
        .map(|(p, _)| *p)
        .collect();
    let contact = select_contact_point(&visible)?;
    // Close around the contact point rather than on it: the jaws span the
    // grasp radius, so the palm stops one span above.
    let standoff = clamp_pos(contact + Vector3::new(0.0, 0.0, cfg.grasp_radius), cfg);
    let mut st = reset(task.env(), env_seed, cfg);
    st.embodiment = Embodiment::Robot;
    let init = st.clone();
    let mut actions: Vec<[f64; 7]> = Vec::new();
    let mut success = false;
    let exec = |st: &mut WorldState,
                    pos: Vector3<f64>,
                    rot: &UnitQuaternion<f64>,
                    grip: f64,
                    actions: &mut Vec<[f64; 7]>|
     -> Result<bool, HeuristicError> {
        let aa = rot.scaled_axis();
        let a = [pos.x, pos.y, pos.z, aa.x, aa.y, aa.z, grip];
        *st = step(st, &Action::from_vec7(&a), cfg);
        actions.push(a);
        Ok(task_success(&init, st, task, cfg)?)
    };
    let rot0 = st.gripper.rot;
    for _ in 0..hcfg.max_approach_steps {
        if (st.gripper.pos - standoff).norm() < 1e-9 {
            break;
        }
        success |= exec(&mut st, standoff, &rot0, 0.0, &mut actions)?;
    }
    success |= exec(&mut st, standoff, &rot0, 1.0, &mut actions)?;
    let grasped = st.attachment.is_some();
    let mut pose_pos = st.gripper.pos;
    let mut pose_rot = st.gripper.rot;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failure = None;
    for t in 0..flow.points.len().saturating_sub(1) {
        if success {
            break;
        }
        match estimate_transform(&flow.points[t], &flow.points[t + 1], &hcfg.ransac, &mut rng) {
            Err(_) => {
                failure = Some(FailureKind::Estimation { step: t });
                break;
            }
            Ok((tr, _)) => {
                let new_pos = tr.apply(&pose_pos);
                if (new_pos - pose_pos).norm() > hcfg.jump_limit {
                    failure = Some(FailureKind::Jump { step: t });
                    break;
                }
                pose_pos = new_pos;
                pose_rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(
                    tr.rotation,
                )) * pose_rot;
                success |=
                    exec(&mut st, clamp_pos(pose_pos, cfg), &pose_rot, 1.0, &mut actions)?;
            }
        }
    }
    if failure.is_none() && !success {
        success |= exec(&mut st, clamp_pos(pose_pos, cfg), &pose_rot, 0.0, &mut actions)?;
    }
    Ok(HeuristicOutcome {
        success: success && failure.is_none(),
        grasped,
        failure,
        actions,
        final_state: st,
    })
}

/// Full baseline episode from a demonstration: filter its tracks, read the
/// ground-truth 3D flow, and execute on a fresh instance of the same scene.
///
/// # Errors
///
/// Missing task label, filtering failures, or rollout preconditions.
pub fn heuristic_rollout(
    demo: &Episode,
    hcfg: &HeuristicConfig,
    cfg: &SimConfig,
    cam: &Camera,
    seed: u64,
) -> Result<HeuristicOutcome, HeuristicError> {
    let task = demo.task.ok_or(HeuristicError::NoTask)?;
    let filter = FilterConfig::for_env(demo.env);
    let flow = ground_truth_flow(demo, &filter, cfg, cam)?;
    rollout_from_flow(task, demo.seed, &flow, hcfg, cfg, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explore::{demo_collect, densify_object_keypoints};
    use crate::sim::world::ObjectState;
    use crate::sim::CameraConfig;

    fn rand_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                )
            })
            .collect()
    }

    fn random_rigid(rng: &mut ChaCha8Rng) -> RigidTransform {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let angle = rng.random_range(-3.0..3.0);
        let r = Rotation3::new(axis.normalize() * angle);
        RigidTransform {
            rotation: *r.matrix(),
            translation: Vector3::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            ),
        }
    }

    #[test]
    fn recovers_identity_on_equal_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_points(10, &mut rng);
        let (t, inliers) =
            estimate_transform(&a, &a, &RansacConfig::default(), &mut rng).unwrap();
        assert_eq!(inliers.len(), 10);
        assert!((t.rotation - Matrix3::identity()).norm() < 1e-9);
        assert!(t.translation.norm() < 1e-9);
        let resid: f64 = a.iter().map(|p| (t.apply(p) - p).norm()).fold(0.0, f64::max);
        assert!(resid < 1e-9);
    }

    #[test]
    fn recovers_pure_translation_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_points(12, &mut rng);
        let shift = Vector3::new(0.1, 0.0, 0.0);
        let b: Vec<_> = a.iter().map(|p| p + shift).collect();
        let (t, _) = estimate_transform(&a, &b, &RansacConfig::default(), &mut rng).unwrap();
        assert!((t.rotation - Matrix3::identity()).norm() < 1e-9);
        assert!((t.translation - shift).norm() < 1e-9);
    }

    #[test]
    fn recovers_rotation_under_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_points(25, &mut rng);
        let r = Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2);
        let mut b: Vec<_> = a.iter().map(|p| r * p).collect();
        let outliers = [0usize, 5, 10, 15, 20];
        for &i in &outliers {
            b[i] += Vector3::new(0.09, -0.07, 0.05);
        }
        let (t, inliers) =
            estimate_transform(&a, &b, &RansacConfig::default(), &mut rng).unwrap();
        assert!((t.rotation - r.matrix()).norm() < 1e-3);
        assert!(t.translation.norm() < 1e-3);
        assert_eq!(inliers.len(), 20);
        for &i in &outliers {
            assert!(!inliers.contains(&i), "outlier {i} kept");
        }
    }

    #[test]
    fn rejects_tiny_and_collinear_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let two = rand_points(2, &mut rng);
        assert!(matches!(
            estimate_transform(&two, &two, &RansacConfig::default(), &mut rng),
            Err(HeuristicError::TooFewPoints { got: 2 })
        ));
        let line: Vec<_> = (0..6).map(|i| Vector3::new(0.01 * i as f64, 0.0, 0.0)).collect();
        assert!(matches!(
            estimate_transform(&line, &line, &RansacConfig::default(), &mut rng),
            Err(HeuristicError::Degenerate)
        ));
    }

    #[test]
    fn estimate_is_equivariant_under_frame_changes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = RansacConfig::default();
        for _ in 0..20 {
            let a = rand_points(8, &mut rng);
            let t_true = random_rigid(&mut rng);
            let b: Vec<_> = a.iter().map(|p| t_true.apply(p)).collect();
            let g = random_rigid(&mut rng);
            let ga: Vec<_> = a.iter().map(|p| g.apply(p)).collect();
            let gb: Vec<_> = b.iter().map(|p| g.apply(p)).collect();
            let (t_hat, _) = estimate_transform(&ga, &gb, &cfg, &mut rng).unwrap();
            let conj_rot = g.rotation * t_true.rotation * g.rotation.transpose();
            let conj_t =
                g.rotation * t_true.translation + g.translation - conj_rot * g.translation;
            assert!((t_hat.rotation - conj_rot).norm() < 1e-6);
            assert!((t_hat.translation - conj_t).norm() < 1e-6);
        }
    }

    #[test]
    fn estimated_rotations_are_proper_and_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = RansacConfig::default();
        for _ in 0..50 {
            let a = rand_points(9, &mut rng);
            let t_true = random_rigid(&mut rng);
            let b: Vec<_> = a.iter().map(|p| t_true.apply(p)).collect();
            let (t, _) = estimate_transform(&a, &b, &cfg, &mut rng).unwrap();
            assert!((t.rotation.determinant() - 1.0).abs() < 1e-9);
            assert!((t.rotation.transpose() * t.rotation - Matrix3::identity()).norm() < 1e-9);
        }
    }

    #[test]
    fn contact_point_is_the_visible_centroid() {
        let sym = vec![
            Vector3::new(0.1, 0.0, 0.0),
            Vector3::new(-0.1, 0.0, 0.0),
            Vector3::new(0.0, 0.1, 0.0),
            Vector3::new(0.0, -0.1, 0.0),
        ];
        let c = select_contact_point(&sym).unwrap();
        assert!(c.norm() < 1e-12);
        assert!(matches!(select_contact_point(&[]), Err(HeuristicError::NoVisiblePoints)));
    }

    #[test]
    fn occlusion_moves_the_contact_off_the_handle() {
        let handle: Vec<Vector3<f64>> =
            (0..10).map(|i| Vector3::new(0.3, -0.02 + 0.004 * i as f64, 0.05)).collect();
        let body: Vec<Vector3<f64>> =
            (0..40).map(|i| Vector3::new(0.2, -0.06 + 0.003 * i as f64, 0.03)).collect();
        let on_handle = select_contact_point(&handle).unwrap();
        assert!((on_handle.x - 0.3).abs() < 1e-9, "handle-only view grasps the handle");
        let mut all = handle.clone();
        all.extend(body.iter().copied());
        let mixed = select_contact_point(&all).unwrap();
        assert!(
            (mixed.x - 0.3).abs() > 0.05,
            "body points drag the contact off the handle: {mixed:?}"
        );
    }

    fn flat_triangle(center: Vector3<f64>) -> Vec<Vector3<f64>> {
        vec![
            center + Vector3::new(0.03, 0.0, 0.0),
            center + Vector3::new(-0.02, 0.025, 0.0),
            center + Vector3::new(-0.01, -0.03, 0.01),
        ]
    }

    #[test]
    fn estimation_failure_marks_the_episode() {
        let line: Vec<Vector3<f64>> =
            (0..3).map(|i| Vector3::new(0.5, 0.02 * i as f64, 0.3)).collect();
        let flow = GroundTruthFlow {
            points: vec![line.clone(), line],
            visible0: vec![true; 3],
        };
        let out = rollout_from_flow(
            Task::Pickplace,
            0,
            &flow,
            &HeuristicConfig::default(),
            &SimConfig::default(),
            1,
        )
        .unwrap();
        assert!(!out.success);
        assert_eq!(out.failure, Some(FailureKind::Estimation { step: 0 }));
    }

    #[test]
    fn teleporting_flow_trips_the_jump_limit() {
        let t0 = flat_triangle(Vector3::new(0.5, 0.0, 0.3));
        let t1: Vec<_> = t0.iter().map(|p| p + Vector3::new(0.5, 0.0, 0.0)).collect();
        let flow = GroundTruthFlow { points: vec![t0, t1], visible0: vec![true; 3] };
        let out = rollout_from_flow(
            Task::Pickplace,
            0,
            &flow,
            &HeuristicConfig::default(),
            &SimConfig::default(),
            1,
        )
        .unwrap();
        assert!(!out.success);
        assert_eq!(out.failure, Some(FailureKind::Jump { step: 0 }));
    }

    #[test]
    fn rigid_demos_replay_to_success() {
        let cfg = SimConfig::default();
        let cam = Camera::from_config(&CameraConfig::default());
        for task in [Task::Pickplace, Task::Pour] {
            let mut wins = 0;
            let mut tried = 0;
            for seed in 0..4 {
                let demo = densify_object_keypoints(
                    &demo_collect(task, Embodiment::Sphere, seed, 1.0, &cfg, &cam),
                    &cfg,
                    &cam,
                );
                if !demo.valid {
                    continue;
                }
                tried += 1;
                let out = heuristic_rollout(&demo, &HeuristicConfig::default(), &cfg, &cam, seed)
                    .unwrap();
                if out.success {
                    wins += 1;
                }
            }
            assert!(tried >= 2, "{task:?} demos mostly invalid");
            assert!(wins * 3 >= tried * 2, "{task:?}: only {wins}/{tried} replays succeeded");
        }
    }

    #[test]
    fn cloth_folding_never_succeeds() {
        let cfg = SimConfig::default();
        let cam = Camera::from_config(&CameraConfig::default());
        for seed in 0..3 {
            let demo = densify_object_keypoints(
                &demo_collect(Task::Fold, Embodiment::Sphere, seed, 1.0, &cfg, &cam),
                &cfg,
                &cam,
            );
            if !demo.valid {
                continue;
            }
            let out =
                heuristic_rollout(&demo, &HeuristicConfig::default(), &cfg, &cam, seed).unwrap();
            assert!(!out.success, "deformable motion admits no rigid replay");
            assert!(!out.grasped, "mid-cloth contact is far from any corner");
        }
    }

    #[test]
    fn centroid_contact_defeats_the_drawer() {
        let cfg = SimConfig::default();
        let cam = Camera::from_config(&CameraConfig::default());
        let mut low = CameraConfig::default();
        low.eye = [0.55, 0.35, 0.18];
        low.look_at = [0.53, -0.36, 0.12];
        let low_cam = Camera::from_config(&low);
        let mut tried = 0;
        for seed in 0..4 {
            let demo = densify_object_keypoints(
                &demo_collect(Task::Drawer, Embodiment::Sphere, seed, 1.0, &cfg, &cam),
                &cfg,
                &cam,
            );
            if !demo.valid {
                continue;
            }
            tried += 1;
            for contact_cam in [&cam, &low_cam] {
                let out =
                    heuristic_rollout(&demo, &HeuristicConfig::default(), &cfg, contact_cam, seed)
                        .unwrap();
                assert!(!out.success, "face-centroid contact must not open the drawer");
                let d = out
                    .final_state
                    .objects
                    .iter()
                    .find_map(|o| match o {
                        ObjectState::Drawer(d) => Some(d.clone()),
                        _ => None,
                    })
                    .unwrap();
                assert!(
                    d.extension < cfg.drawer_max_extension - cfg.success.drawer_open_tol,
                    "drawer should stay shut, got extension {}",
                    d.extension
                );
            }
        }
        assert!(tried > 0);
    }
}

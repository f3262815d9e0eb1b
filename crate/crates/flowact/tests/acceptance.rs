//! Acceptance gate: every shipped behavior is checked here, one printed
//! pass/fail line per criterion.
//!
//! Fast criteria use exact, independently implemented oracles. Experiment
//! criteria share one trained pipeline fixture in a persistent directory
//! under the target tree, so repeated runs reuse cached stages; a cloned
//! directory evaluates the fast-demo condition and a small smoke
//! configuration checks end-to-end determinism and wall time.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flowact::explore::{bezier_waypoints, collect_valid, demo_collect, BezierSpec};
use flowact::filters::{apply_filters, FilterConfig, MovementMetric};
use flowact::flowcore::{
    pack_rect_flow, sample_multi_object, unpack_rect_flow, BoundingBox, Keypoint2D,
    KeypointTrackSet, CANVAS, FLOW_FRAMES, FLOW_SIDE,
};
use flowact::flowgen::{
    ae_decode, ae_encode, condition_tokens, denoise, denormalize_flow_frame,
    flow_sample_from_episode, init_autoencoder, load_ae, normalize_flow_frame, diffusion_loss,
    ConditionInputs, FlowgenConfig, FlowgenModel, LatentSample, NoiseSchedule, FLOW_SLOTS,
};
use flowact::harness::{
    config_hash, load_config, run_pipeline, success_pct, AblationFlags, AeBudget,
    ExperimentConfig, Method, Regime, ResultTable, StageId, TrainBudget,
};
use flowact::heuristic::{estimate_transform, RansacConfig};
use flowact::nn::gradcheck::fd_check_params;
use flowact::nn::tape::Tape;
use flowact::nn::ParamStore;
use flowact::policy::{
    policy_losses, state_encode, ActionStats, PolicyConfig, PolicyModel, PolicyVariant,
    TrainSample,
};
use flowact::sim::raster::RES;
use flowact::sim::{Camera, Embodiment, EnvKind, RenderOut, Task};

fn criterion(tag: &str, ok: bool, detail: String) {
    println!("criterion {tag}: {} ({detail})", if ok { "pass" } else { "FAIL" });
    assert!(ok, "criterion {tag} failed: {detail}");
}

// ---------------------------------------------------------------------------
// Criterion 1: cubic trajectory evaluation against a De Casteljau oracle.

fn de_casteljau(p: &[Vector3<f64>; 4], t: f64) -> Vector3<f64> {
    let mut pts = p.to_vec();
    for level in (1..4).rev() {
        for i in 0..level {
            pts[i] = pts[i] * (1.0 - t) + pts[i + 1] * t;
        }
    }
    pts[0]
}

#[test]
fn c01_bezier_exactness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut max_err = 0.0f64;
    for _ in 0..1000 {
        let ctrl: [Vector3<f64>; 4] = std::array::from_fn(|_| {
            Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
        });
        let k = rng.random_range(2..=32);
        let spec = BezierSpec { p0: ctrl[0], p1: ctrl[1], p2: ctrl[2], p3: ctrl[3], k };
        let wps = bezier_waypoints(&spec);
        assert_eq!(wps.len(), k);
        assert_eq!(wps[0], ctrl[0], "curve must start exactly at the first control point");
        assert_eq!(wps[k - 1], ctrl[3], "curve must end exactly at the last control point");
        let lo = Vector3::new(
            ctrl.iter().map(|p| p.x).fold(f64::INFINITY, f64::min),
            ctrl.iter().map(|p| p.y).fold(f64::INFINITY, f64::min),
            ctrl.iter().map(|p| p.z).fold(f64::INFINITY, f64::min),
        );
        let hi = Vector3::new(
            ctrl.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max),
            ctrl.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max),
            ctrl.iter().map(|p| p.z).fold(f64::NEG_INFINITY, f64::max),
        );
        for (i, w) in wps.iter().enumerate() {
            let t = i as f64 / (k - 1) as f64;
            let oracle = de_casteljau(&ctrl, t);
            max_err = max_err.max((w - oracle).norm());
            for d in 0..3 {
                assert!(
                    w[d] >= lo[d] - 1e-12 && w[d] <= hi[d] + 1e-12,
                    "waypoint leaves the control hull's bounding box"
                );
            }
            // Convex-hull membership via the Bernstein weights: all four are
            // non-negative and sum to one, and their combination rebuilds
            // the waypoint.
            let s = 1.0 - t;
            let weights = [s * s * s, 3.0 * s * s * t, 3.0 * s * t * t, t * t * t];
            assert!(weights.iter().all(|&w| w >= 0.0));
            assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let combo: Vector3<f64> =
                ctrl.iter().zip(&weights).map(|(p, &w)| p * w).sum();
            max_err = max_err.max((w - combo).norm());
        }
    }
    let elapsed = start.elapsed();
    criterion(
        "1 (trajectory exactness)",
        max_err < 1e-12 && elapsed < Duration::from_secs(5),
        format!("max error {max_err:.2e}, {elapsed:.1?}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: flow packing round trip and apportionment oracle.

fn largest_remainder_oracle(areas: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = areas.iter().sum();
    let exact: Vec<f64> = areas.iter().map(|a| a / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest: usize = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..areas.len()).collect();
    order.sort_by(|&i, &j| {
        let ri = exact[i] - exact[i].floor();
        let rj = exact[j] - exact[j].floor();
        rj.partial_cmp(&ri).unwrap().then(i.cmp(&j))
    });
    for &i in &order {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

#[test]
fn c02_flow_packing() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for trial in 0..10_000 {
        let (h, w) = if trial % 10 == 0 {
            (FLOW_SIDE, FLOW_SIDE)
        } else {
            (rng.random_range(1..=8), rng.random_range(1..=8))
        };
        let pts: Vec<Keypoint2D> = (0..h * w)
            .map(|_| {
                Keypoint2D::new(
                    rng.random_range(-500.0..500.0),
                    rng.random_range(-500.0..500.0),
                    rng.random_bool(0.8),
                )
            })
            .collect();
        let img = pack_rect_flow(&pts, h, w).unwrap();
        let back = unpack_rect_flow(&img);
        assert_eq!(back.len(), pts.len());
        for (a, b) in pts.iter().zip(&back) {
            assert!(a.u == b.u && a.v == b.v && a.visible == b.visible, "round trip not exact");
        }
    }
    // Apportionment across disjoint boxes follows largest-remainder counts.
    for _ in 0..200 {
        let n_boxes = rng.random_range(1..=6);
        let mut boxes = Vec::with_capacity(n_boxes);
        for b in 0..n_boxes {
            let u0 = 40.0 * b as f64 + rng.random_range(0.5..4.0);
            let v0 = rng.random_range(0.5..40.0);
            boxes.push(BoundingBox::new(
                u0,
                v0,
                u0 + rng.random_range(3.0..34.0),
                v0 + rng.random_range(3.0..150.0),
            ));
        }
        let total = rng.random_range(n_boxes..2000);
        let pts = sample_multi_object(&boxes, total).unwrap();
        assert_eq!(pts.len(), total);
        let expected =
            largest_remainder_oracle(&boxes.iter().map(|b| b.area()).collect::<Vec<_>>(), total);
        let mut got = vec![0usize; n_boxes];
        for p in &pts {
            let owner = boxes
                .iter()
                .position(|b| {
                    p.u >= b.u_min - 1e-9
                        && p.u <= b.u_max + 1e-9
                        && p.v >= b.v_min - 1e-9
                        && p.v <= b.v_max + 1e-9
                })
                .expect("every sampled keypoint lies in a box");
            got[owner] += 1;
        }
        assert_eq!(got, expected, "apportionment must match the largest-remainder oracle");
    }
    let elapsed = start.elapsed();
    criterion(
        "2 (flow packing)",
        elapsed < Duration::from_secs(5),
        format!("10000 round trips + 200 apportionments, {elapsed:.1?}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: filter chain against brute-force enumeration.

fn brute_force_filters(
    tracks: &KeypointTrackSet,
    frame0: &RenderOut,
    cfg: &FilterConfig,
) -> Vec<usize> {
    let mut keep = Vec::new();
    for n in 0..tracks.n_pts {
        let k0 = tracks.at(0, n);
        let mut best = 0.0f64;
        for t in 0..tracks.t_len {
            let k = tracks.at(t, n);
            best = best.max(((k.u - k0.u).powi(2) + (k.v - k0.v).powi(2)).sqrt());
        }
        if best < cfg.moving_threshold {
            continue;
        }
        if !(k0.u >= 0.0 && k0.u < CANVAS && k0.v >= 0.0 && k0.v < CANVAS) {
            continue;
        }
        let (depth, seg) = frame0.at(k0.u, k0.v);
        if seg == 0 || (frame0.segment_area(seg) as f64) > cfg.segment_area_threshold {
            continue;
        }
        if depth <= 0.0 {
            continue;
        }
        keep.push(n);
    }
    keep
}

#[test]
fn c03_filter_suite() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    // The published thresholds arrive through the configuration default,
    // including the halved cloth movement threshold and the zero-depth rule
    // exercised below.
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    fs::write(&cfg_path, serde_json::to_vec(&ExperimentConfig::default()).unwrap()).unwrap();
    let loaded = load_config(&cfg_path).unwrap();
    assert_eq!(loaded.filter.moving_threshold, 20.0);
    assert_eq!(loaded.filter.segment_area_threshold, 10_000.0);
    assert_eq!(loaded.cloth_filter.moving_threshold, 10.0);
    assert_eq!(FilterConfig::for_env(EnvKind::Cloth).moving_threshold, 10.0);

    for set in 0..100 {
        // A frame with one small segment, one above-threshold segment, and
        // zero-depth background; a third segment has positive area but a
        // depth hole region is impossible here, so the depth rule is hit by
        // background starts instead.
        let mut frame = RenderOut { depth: vec![0.0; RES * RES], seg: vec![0; RES * RES] };
        for i in 20..60 {
            for j in 20..80 {
                frame.seg[i * RES + j] = 2;
                frame.depth[i * RES + j] = 1.0;
            }
        }
        for i in 100..220 {
            for j in 100..220 {
                frame.seg[i * RES + j] = 3;
                frame.depth[i * RES + j] = 1.3;
            }
        }
        let n = 40;
        let t_len = 6;
        let mut tracks = KeypointTrackSet::new(t_len, n);
        for pt in 0..n {
            let (u0, v0) = if pt % 4 == 0 {
                (rng.random_range(-30.0..290.0), rng.random_range(-30.0..290.0))
            } else {
                (rng.random_range(0.0..CANVAS), rng.random_range(0.0..CANVAS))
            };
            let drift = rng.random_range(0.0..12.0);
            for t in 0..t_len {
                tracks.set_at(
                    t,
                    pt,
                    Keypoint2D::new(u0 + drift * t as f64, v0, true),
                );
            }
        }
        let cfg = if set % 3 == 0 {
            loaded.filter
        } else {
            FilterConfig {
                moving_threshold: rng.random_range(0.0..50.0),
                segment_area_threshold: rng.random_range(1000.0..20_000.0),
                metric: MovementMetric::MaxDeviation,
            }
        };
        let got = apply_filters(&tracks, &frame, &cfg);
        let want = brute_force_filters(&tracks, &frame, &cfg);
        assert_eq!(got, want, "filter chain must equal brute-force enumeration");
    }
    let elapsed = start.elapsed();
    criterion(
        "3 (filter suite)",
        elapsed < Duration::from_secs(10),
        format!("100 sets exact, thresholds 20/10/10000 from config, {elapsed:.1?}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: rigid transform recovery.

fn random_rigid(rng: &mut ChaCha8Rng) -> (Matrix3<f64>, Vector3<f64>) {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let axis = if axis.norm() < 1e-6 { Vector3::z() } else { axis.normalize() };
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let r = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
    let t = Vector3::new(
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
    );
    (*r.matrix(), t)
}

fn rotation_angle_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let m = a.transpose() * b;
    let c = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

#[test]
fn c04_rigid_transform_recovery() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let cfg = RansacConfig::default();
    let mut max_resid = 0.0f64;
    for _ in 0..1000 {
        let pts: Vec<Vector3<f64>> = (0..10)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                )
            })
            .collect();
        let (r, t) = random_rigid(&mut rng);
        let moved: Vec<Vector3<f64>> = pts.iter().map(|p| r * p + t).collect();
        let (est, inliers) = estimate_transform(&pts, &moved, &cfg, &mut rng).unwrap();
        assert_eq!(inliers.len(), 10);
        let resid = pts
            .iter()
            .zip(&moved)
            .map(|(a, b)| (est.apply(a) - b).norm())
            .fold(0.0, f64::max);
        max_resid = max_resid.max(resid);
    }
    let noiseless_ok = max_resid < 1e-9;

    // 20% outliers plus up-to-5 mm inlier noise; the inlier gate widens to
    // three noise radii so noisy inliers stay inside it.
    let noisy_cfg = RansacConfig { iterations: 512, inlier_threshold: 0.015, sample_size: 3 };
    let mut hits = 0;
    for _ in 0..100 {
        let pts: Vec<Vector3<f64>> = (0..10)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                )
            })
            .collect();
        let (r, t) = random_rigid(&mut rng);
        let mut moved: Vec<Vector3<f64>> = pts
            .iter()
            .map(|p| {
                let dir = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                let dir = if dir.norm() < 1e-6 { Vector3::x() } else { dir.normalize() };
                r * p + t + dir * rng.random_range(0.0..0.005)
            })
            .collect();
        for i in [2usize, 7] {
            moved[i] += Vector3::new(0.11, -0.09, 0.08);
        }
        let Ok((est, _)) = estimate_transform(&pts, &moved, &noisy_cfg, &mut rng) else {
            continue;
        };
        let rot_err = rotation_angle_deg(&est.rotation, &r);
        let trans_err = (est.translation - t).norm();
        if rot_err < 1.0 && trans_err < 0.005 {
            hits += 1;
        }
    }
    let elapsed = start.elapsed();
    criterion(
        "4 (rigid transform recovery)",
        noiseless_ok && hits >= 95 && elapsed < Duration::from_secs(30),
        format!("noiseless max residual {max_resid:.1e}, noisy hits {hits}/100, {elapsed:.1?}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: gradients, stop-gradients, and zero-init invariance.

fn tiny_policy_cfg() -> PolicyConfig {
    PolicyConfig {
        n_keypoints: 4,
        state_dim: 8,
        z_dim: 6,
        state_layers: 1,
        xi_layers: 1,
        psi_layers: 1,
        heads: 2,
        ff_mult: 1,
        head_hidden: 8,
        action_len: 2,
        diffusion_steps: 6,
        infer_steps: 2,
        flow_frames: 3,
        xi_max_frames: 3,
        exec_horizon: 2,
        variant: PolicyVariant::Full,
    }
}

fn synthetic_sample(cfg: &PolicyConfig, rng: &mut ChaCha8Rng) -> TrainSample {
    let n = cfg.n_keypoints;
    let pix =
        |rng: &mut ChaCha8Rng| (rng.random_range(20.0..230.0), rng.random_range(20.0..230.0));
    let f_t: Vec<(f64, f64)> = (0..n).map(|_| pix(rng)).collect();
    let x0: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-0.5..1.5)).collect();
    let flow_frames: Vec<Vec<(f64, f64)>> =
        (0..cfg.flow_frames).map(|_| (0..n).map(|_| pix(rng)).collect()).collect();
    let remaining: Vec<Vec<(f64, f64)>> =
        (0..2).map(|_| (0..n).map(|_| pix(rng)).collect()).collect();
    let chunk: Vec<[f64; 7]> = (0..cfg.action_len)
        .map(|_| std::array::from_fn(|_| rng.random_range(-0.5..0.5)))
        .collect();
    TrainSample {
        f_t,
        x0,
        rho: std::array::from_fn(|_| rng.random_range(-0.5..0.5)),
        chunk,
        flow_frames,
        remaining,
        t: 1,
        flow_indices: vec![0, 2, 4],
        keypoints: (0..n).collect(),
    }
}

#[test]
fn c05_gradient_and_stop_gradient_checks() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let cfg = tiny_policy_cfg();
    let mut store = ParamStore::new();
    let model = PolicyModel::init(&mut store, &mut rng, &cfg);
    let schedule = NoiseSchedule::cosine(cfg.diffusion_steps);
    let batch: Vec<TrainSample> = (0..2).map(|_| synthetic_sample(&cfg, &mut rng)).collect();
    let stats = ActionStats::from_actions(batch.iter().flat_map(|s| s.chunk.iter()));
    let draw_rng = ChaCha8Rng::seed_from_u64(505);

    let losses = |s: &ParamStore| {
        let mut tape = Tape::new();
        let mut r = draw_rng.clone();
        let (la, lal) =
            policy_losses(&mut tape, s, &model, &stats, &batch, &schedule, &mut r).unwrap();
        (tape.scalar(la), tape.scalar(lal))
    };
    let mut tape = Tape::new();
    let mut r = draw_rng.clone();
    let (la, lal) =
        policy_losses(&mut tape, &store, &model, &stats, &batch, &schedule, &mut r).unwrap();
    let action_back = tape.backward(la);
    let action_grads = tape.collect_param_grads(&action_back);
    let align_back = tape.backward(lal);
    let align_grads = tape.collect_param_grads(&align_back);

    // Stop-gradient structure: the alignment loss must not reach the target
    // encoder, while the action loss must train it.
    let align_leaks: f64 = align_grads
        .iter()
        .filter(|(k, _)| k.starts_with("xi."))
        .flat_map(|(_, g)| g.iter())
        .map(|v| v.abs())
        .sum();
    let action_xi: f64 = action_grads
        .iter()
        .filter(|(k, _)| k.starts_with("xi."))
        .flat_map(|(_, g)| g.iter())
        .map(|v| v.abs())
        .sum();
    assert_eq!(align_leaks, 0.0, "alignment loss must not update the target encoder");
    assert!(action_xi > 0.0, "action loss must update the target encoder");
    let psi_in_action: f64 = action_grads
        .iter()
        .filter(|(k, _)| k.starts_with("psi."))
        .flat_map(|(_, g)| g.iter())
        .map(|v| v.abs())
        .sum();
    assert_eq!(psi_in_action, 0.0, "action loss must not update the alignment module");

    let action_fd = fd_check_params(
        &mut store,
        &|s| losses(s).0,
        &action_grads,
        3,
        1e-5,
        &mut rng,
    );
    // The alignment target is recomputed but detached, so finite differences
    // agree with the analytic gradient only on parameters that do not feed
    // the detached branch: the alignment module's own weights.
    let psi_grads: BTreeMap<String, Vec<f64>> = align_grads
        .iter()
        .filter(|(k, _)| k.starts_with("psi."))
        .map(|(k, g)| (k.clone(), g.clone()))
        .collect();
    assert!(!psi_grads.is_empty(), "alignment loss must reach the alignment module");
    let align_fd = fd_check_params(
        &mut store,
        &|s| losses(s).1,
        &psi_grads,
        3,
        1e-5,
        &mut rng,
    );

    // Flow-generator denoiser: finite differences, frozen encoder, zero-init
    // condition invariance.
    let fg = FlowgenConfig {
        latent_channels: 2,
        ae_channels: [4, 6, 8],
        dim: 8,
        blocks: 1,
        heads: 2,
        ff_mult: 1,
        diffusion_steps: 6,
        infer_steps: 2,
        n_tasks: 4,
    };
    let mut fg_store = ParamStore::new();
    init_autoencoder(&mut fg_store, &mut rng, &fg);
    let fg_model = FlowgenModel::init(&mut fg_store, &mut rng, &fg);
    let spatial = 16;
    let latent_len = fg.latent_channels * FLOW_FRAMES * spatial;
    let mk_cond = |task_id: usize, shift: f64, rng: &mut ChaCha8Rng| ConditionInputs {
        task_id,
        obs_image: (0..2 * 32 * 32).map(|_| rng.random_range(0.0..1.0) + shift).collect(),
        f0: (0..FLOW_SLOTS)
            .map(|_| (rng.random_range(0.0..CANVAS), rng.random_range(0.0..CANVAS)))
            .collect(),
    };
    let samples: Vec<LatentSample> = (0..2)
        .map(|i| LatentSample {
            latent: (0..latent_len).map(|_| rng.random_range(-1.0..1.0)).collect(),
            cond: mk_cond(i, 0.0, &mut rng),
        })
        .collect();
    let refs: Vec<&LatentSample> = samples.iter().collect();
    let fg_draw = ChaCha8Rng::seed_from_u64(606);
    let fg_loss = |s: &ParamStore| {
        let mut tape = Tape::new();
        let mut r = fg_draw.clone();
        let l = diffusion_loss(&mut tape, s, &fg_model, &schedule, &refs, &mut r);
        tape.scalar(l)
    };
    let mut tape = Tape::new();
    let mut r = fg_draw.clone();
    let l = diffusion_loss(&mut tape, &fg_store, &fg_model, &schedule, &refs, &mut r);
    let fg_back = tape.backward(l);
    let fg_grads = tape.collect_param_grads(&fg_back);
    let ae_grads: f64 = fg_grads
        .iter()
        .filter(|(k, _)| k.starts_with("ae."))
        .flat_map(|(_, g)| g.iter())
        .map(|v| v.abs())
        .sum();
    assert_eq!(ae_grads, 0.0, "the frozen flow encoder must receive zero gradient");
    let denoiser_fd =
        fd_check_params(&mut fg_store, &fg_loss, &fg_grads, 3, 1e-5, &mut rng);

    // Zero-initialized condition projections: at initialization the denoiser
    // output is independent of the conditioning inputs.
    let latent: Vec<f64> = (0..latent_len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut outs = Vec::new();
    for task_id in [0usize, 3] {
        let cond = mk_cond(task_id, 0.7 * task_id as f64, &mut rng);
        let mut tape = Tape::new();
        let zt = tape.constant(latent.clone(), &[fg.latent_channels, FLOW_FRAMES, 4, 4]);
        let ctx = condition_tokens(&mut tape, &fg_store, &fg_model, &cond);
        let eps = denoise(&mut tape, &fg_store, &fg_model, zt, 3, ctx);
        outs.push(tape.val(eps).data.clone());
    }
    let cond_dev = outs[0]
        .iter()
        .zip(&outs[1])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(
        cond_dev < 1e-12,
        "denoiser must be condition-invariant at initialization, deviation {cond_dev:.2e}"
    );

    let elapsed = start.elapsed();
    let worst = action_fd.max(align_fd).max(denoiser_fd);
    criterion(
        "5 (gradient checks)",
        worst < 1e-4 && elapsed < Duration::from_secs(120),
        format!(
            "fd action {action_fd:.1e}, align {align_fd:.1e}, denoiser {denoiser_fd:.1e}, \
             stop-gradients exact, {elapsed:.1?}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: permutation invariance of the state encoder.

#[test]
fn c06_permutation_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let cfg = PolicyConfig { n_keypoints: 12, ..tiny_policy_cfg() };
    let mut store = ParamStore::new();
    let model = PolicyModel::init(&mut store, &mut rng, &cfg);
    let n = cfg.n_keypoints;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let f_t: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random_range(0.0..CANVAS), rng.random_range(0.0..CANVAS)))
            .collect();
        let x0: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-0.5..1.5)).collect();
        let base = state_encode(&store, &model, &f_t, &x0).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let j = rng.random_range(k..n);
            perm.swap(k, j);
        }
        let pf: Vec<(f64, f64)> = perm.iter().map(|&i| f_t[i]).collect();
        let mut px = Vec::with_capacity(3 * n);
        for &i in &perm {
            px.extend_from_slice(&x0[3 * i..3 * i + 3]);
        }
        let permuted = state_encode(&store, &model, &pf, &px).unwrap();
        let num: f64 =
            base.iter().zip(&permuted).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let den: f64 = base.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        worst = worst.max(num / den);
    }
    criterion(
        "6 (permutation invariance)",
        worst < 1e-5,
        format!("max relative deviation {worst:.2e} over 100 permutations"),
    );
}

// ---------------------------------------------------------------------------
// Experiment fixture: one trained pipeline shared by criteria 7 to 10.

struct Fixture {
    cfg: ExperimentConfig,
    out: PathBuf,
    table: ResultTable,
    fast_table: ResultTable,
    train_elapsed: Duration,
    ae_elapsed: Duration,
    trained_fresh: bool,
}

fn acceptance_cfg() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 0;
    cfg.explore_per_env = 6;
    cfg.demos_per_task = 12;
    cfg.flow_demos_per_task = 12;
    cfg.eval_episodes = 20;
    cfg.max_cycles = 60;
    cfg.policy = PolicyConfig {
        n_keypoints: 32,
        state_dim: 32,
        z_dim: 32,
        state_layers: 2,
        xi_layers: 2,
        psi_layers: 2,
        heads: 2,
        ff_mult: 2,
        head_hidden: 128,
        action_len: 16,
        diffusion_steps: 50,
        infer_steps: 16,
        flow_frames: 8,
        xi_max_frames: 8,
        exec_horizon: 8,
        variant: PolicyVariant::Full,
    };
    cfg.flowgen = FlowgenConfig {
        latent_channels: 4,
        ae_channels: [12, 24, 48],
        dim: 32,
        blocks: 2,
        heads: 4,
        ff_mult: 2,
        diffusion_steps: 50,
        infer_steps: 16,
        n_tasks: 4,
    };
    cfg.ae_train = AeBudget { epochs: 30, lr: 1e-3, batch: 16 };
    cfg.flowgen_train = TrainBudget { steps: 3000, lr: 1e-3, batch: 4 };
    cfg.policy_train = TrainBudget { steps: 6000, lr: 1e-3, batch: 8 };
    cfg
}

fn copy_tree(src: &Path, dst: &Path) {
    fs::create_dir_all(dst).unwrap();
    for entry in fs::read_dir(src).unwrap() {
        let entry = entry.unwrap();
        let to = dst.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_tree(&entry.path(), &to);
        } else {
            fs::copy(entry.path(), &to).unwrap();
        }
    }
}

fn run_stages_timed(cfg: &ExperimentConfig, out: &Path) -> Vec<(StageId, bool, Duration)> {
    flowact::harness::pipeline_stages(cfg)
        .into_iter()
        .map(|stage| {
            let t0 = Instant::now();
            let run = flowact::harness::run_stage(cfg, out, stage).unwrap();
            let dt = t0.elapsed();
            println!(
                "stage {}: {} in {dt:.1?}",
                run.stage,
                if run.cached { "cached" } else { "ran" }
            );
            (stage, run.cached, dt)
        })
        .collect()
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
        let out = root.join("acceptance");
        let out_fast = root.join("acceptance-fast-demo");
        let cfg = acceptance_cfg();
        let runs = run_stages_timed(&cfg, &out);
        let is_training = |s: StageId| {
            matches!(s, StageId::TrainAe | StageId::TrainFlowgen | StageId::TrainPolicy(_))
        };
        let train_elapsed = runs
            .iter()
            .filter(|(s, cached, _)| is_training(*s) && !cached)
            .map(|&(_, _, d)| d)
            .sum();
        let ae_elapsed = runs
            .iter()
            .find(|(s, _, _)| matches!(s, StageId::TrainAe))
            .map(|&(_, cached, d)| if cached { Duration::ZERO } else { d })
            .unwrap();
        let trained_fresh = runs.iter().any(|(s, cached, _)| is_training(*s) && !cached);
        let table = flowact::harness::read_result_table(&out).unwrap();
        assert_eq!(table.config_hash, config_hash(&cfg));

        // Fast-demonstration condition: the same trained artifacts evaluated
        // on held-out demonstrations at twice the training pace. Generation,
        // filtering, and training artifacts are synced over so only the
        // pace-dependent stages run.
        let mut fast_cfg = cfg.clone();
        fast_cfg.eval_pace = 2.0;
        for sub in ["data", "demos", "filtered", "ckpt", "stages"] {
            copy_tree(&out.join(sub), &out_fast.join(sub));
        }
        run_stages_timed(&fast_cfg, &out_fast);
        let fast_table = flowact::harness::read_result_table(&out_fast).unwrap();
        Fixture { cfg, out, table, fast_table, train_elapsed, ae_elapsed, trained_fresh }
    })
}

fn pct(table: &ResultTable, method: Method, task: Task, regime: Regime) -> f64 {
    table
        .get(method, task, regime)
        .unwrap_or_else(|| panic!("missing row {method:?} {task} {regime:?}"))
        .success_pct
}

fn mean_demo_pct(table: &ResultTable, method: Method) -> f64 {
    let tasks = Task::all();
    tasks.iter().map(|&t| pct(table, method, t, Regime::Demo)).sum::<f64>() / tasks.len() as f64
}

// ---------------------------------------------------------------------------
// Criterion 7: autoencoder reconstruction on held-out flows.

#[test]
fn c07_autoencoder_quality() {
    let fx = fixture();
    let (store, fg_cfg) = load_ae(&Path::new(&fx.out).join("ckpt").join("ae.ckpt")).unwrap();
    let cam = Camera::from_config(&fx.cfg.sim.camera);
    let mut frames: Vec<Vec<f64>> = Vec::new();
    for (ti, task) in Task::all().into_iter().enumerate() {
        let eps = collect_valid(2, 9_700_000 + ti as u64 * 1000, |s| {
            demo_collect(task, Embodiment::Sphere, s, 1.0, &fx.cfg.sim, &cam)
        });
        assert_eq!(eps.len(), 2, "held-out demonstrations for {task}");
        for (i, ep) in eps.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(3100 + (ti * 10 + i) as u64);
            let sample = flow_sample_from_episode(ep, &fx.cfg.sim, &cam, &mut rng).unwrap();
            for t in 0..sample.flow.t {
                frames.push(normalize_flow_frame(&sample.flow.frame(t)));
            }
        }
    }
    let latents = ae_encode(&store, &fg_cfg, &frames);
    let mut err_sum = 0.0;
    let mut err_n = 0usize;
    for (frame, latent) in frames.iter().zip(&latents) {
        let decoded = ae_decode(&store, &fg_cfg, latent);
        let a = denormalize_flow_frame(frame, FLOW_SIDE, FLOW_SIDE);
        let b = denormalize_flow_frame(&decoded, FLOW_SIDE, FLOW_SIDE);
        for i in 0..FLOW_SIDE {
            for j in 0..FLOW_SIDE {
                let du = a.get(0, i, j) - b.get(0, i, j);
                let dv = a.get(1, i, j) - b.get(1, i, j);
                err_sum += (du * du + dv * dv).sqrt();
                err_n += 1;
            }
        }
    }
    let mean_px = err_sum / err_n as f64;
    let budget_ok = fx.ae_elapsed < Duration::from_secs(3 * 3600);
    criterion(
        "7 (autoencoder quality)",
        mean_px < 2.0 && budget_ok,
        format!(
            "held-out mean decode error {mean_px:.3} px over {} frames, training {:.1?}",
            frames.len(),
            fx.ae_elapsed
        ),
    );
}

// ---------------------------------------------------------------------------
// Criteria 8 and 9: policy success under both conditioning regimes.

#[test]
fn c08_demo_conditioned_policy() {
    let fx = fixture();
    let got: BTreeMap<&str, f64> = [
        ("pickplace", pct(&fx.table, Method::Full, Task::Pickplace, Regime::Demo)),
        ("pour", pct(&fx.table, Method::Full, Task::Pour, Regime::Demo)),
        ("drawer", pct(&fx.table, Method::Full, Task::Drawer, Regime::Demo)),
        ("fold", pct(&fx.table, Method::Full, Task::Fold, Regime::Demo)),
    ]
    .into();
    let ok = got["pickplace"] >= 80.0
        && got["pour"] >= 70.0
        && got["drawer"] >= 70.0
        && got["fold"] >= 60.0;
    let budget_ok = !fx.trained_fresh || fx.train_elapsed < Duration::from_secs(2 * 3600);
    criterion(
        "8 (demonstration-conditioned policy)",
        ok && budget_ok,
        format!(
            "pickplace {:.0}/80 pour {:.0}/70 drawer {:.0}/70 fold {:.0}/60, pipeline {:?}",
            got["pickplace"], got["pour"], got["drawer"], got["fold"], fx.train_elapsed
        ),
    );
}

#[test]
fn c09_language_conditioned_pipeline() {
    let fx = fixture();
    let pp = pct(&fx.table, Method::Full, Task::Pickplace, Regime::Lang);
    let pour = pct(&fx.table, Method::Full, Task::Pour, Regime::Lang);
    let drawer = pct(&fx.table, Method::Full, Task::Drawer, Regime::Lang);
    criterion(
        "9 (language-conditioned pipeline)",
        pp >= 60.0 && pour >= 50.0 && drawer >= 50.0,
        format!("pickplace {pp:.0}/60 pour {pour:.0}/50 drawer {drawer:.0}/50"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 10: ablation orderings.

#[test]
fn c10_ablation_orderings() {
    let fx = fixture();
    let full_fast = mean_demo_pct(&fx.fast_table, Method::Full);
    let noalign_fast = mean_demo_pct(&fx.fast_table, Method::NoAlignment);
    let a_ok = full_fast - noalign_fast >= 20.0;
    criterion(
        "10a (alignment under pace shift)",
        a_ok,
        format!("2x-pace demo mean: full {full_fast:.0} vs no_alignment {noalign_fast:.0}"),
    );

    let full = mean_demo_pct(&fx.table, Method::Full);
    let grid = mean_demo_pct(&fx.table, Method::GridFlow);
    let b_ok = full - grid >= 20.0;
    criterion(
        "10b (object flow vs grid flow)",
        b_ok,
        format!("cross-embodiment demo mean: full {full:.0} vs grid_flow {grid:.0}"),
    );

    let drawer_full = pct(&fx.table, Method::Full, Task::Drawer, Regime::Demo);
    let drawer_h = pct(&fx.table, Method::Heuristic, Task::Drawer, Regime::Demo);
    let fold_h = pct(&fx.table, Method::Heuristic, Task::Fold, Regime::Demo);
    let c_ok = drawer_full > drawer_h && fold_h == 0.0;
    criterion(
        "10c (learned policy vs replay heuristic)",
        c_ok,
        format!("drawer {drawer_full:.0} vs {drawer_h:.0}, heuristic fold {fold_h:.0}"),
    );
}

// ---------------------------------------------------------------------------
// Criteria 11 and 12: determinism and the smoke pipeline.

struct Smoke {
    elapsed: Duration,
    table: ResultTable,
    text_a: Vec<u8>,
    text_b: Vec<u8>,
    json_a: Vec<u8>,
    json_b: Vec<u8>,
}

fn smoke_cfg() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 123;
    cfg.explore_per_env = 2;
    cfg.demos_per_task = 5;
    cfg.flow_demos_per_task = 5;
    cfg.eval_episodes = 5;
    cfg.max_cycles = 10;
    cfg.policy = PolicyConfig {
        n_keypoints: 16,
        state_dim: 16,
        z_dim: 16,
        state_layers: 1,
        xi_layers: 1,
        psi_layers: 1,
        heads: 2,
        ff_mult: 1,
        head_hidden: 32,
        action_len: 8,
        diffusion_steps: 10,
        infer_steps: 4,
        flow_frames: 4,
        xi_max_frames: 4,
        exec_horizon: 4,
        variant: PolicyVariant::Full,
    };
    cfg.flowgen = FlowgenConfig {
        latent_channels: 2,
        ae_channels: [6, 12, 24],
        dim: 16,
        blocks: 1,
        heads: 2,
        ff_mult: 1,
        diffusion_steps: 10,
        infer_steps: 4,
        n_tasks: 4,
    };
    cfg.ae_train = AeBudget { epochs: 2, lr: 1e-3, batch: 16 };
    cfg.flowgen_train = TrainBudget { steps: 60, lr: 1e-3, batch: 2 };
    cfg.policy_train = TrainBudget { steps: 60, lr: 1e-3, batch: 2 };
    cfg.ablations = AblationFlags { no_alignment: true, grid_flow: true, heuristic: true };
    cfg
}

fn smoke() -> &'static Smoke {
    static SMOKE: OnceLock<Smoke> = OnceLock::new();
    SMOKE.get_or_init(|| {
        let cfg = smoke_cfg();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let start = Instant::now();
        run_pipeline(&cfg, dir_a.path()).unwrap();
        let elapsed = start.elapsed();
        run_pipeline(&cfg, dir_b.path()).unwrap();
        let results = |d: &Path| {
            (
                fs::read(d.join("results").join("results.txt")).unwrap(),
                fs::read(d.join("results").join("results.json")).unwrap(),
            )
        };
        let (text_a, json_a) = results(dir_a.path());
        let (text_b, json_b) = results(dir_b.path());
        let table = flowact::harness::read_result_table(dir_a.path()).unwrap();
        Smoke { elapsed, table, text_a, text_b, json_a, json_b }
    })
}

#[test]
fn c11_determinism() {
    let s = smoke();
    let ok = s.text_a == s.text_b && s.json_a == s.json_b;
    criterion(
        "11 (determinism)",
        ok,
        format!(
            "two full pipeline runs: results.txt {} bytes identical, results.json {} bytes \
             identical",
            s.text_a.len(),
            s.json_a.len()
        ),
    );
}

#[test]
fn c12_smoke_pipeline() {
    let s = smoke();
    let cfg = smoke_cfg();
    let methods = [Method::Full, Method::NoAlignment, Method::GridFlow, Method::Heuristic];
    let mut cells = 0;
    for &m in &methods {
        for &task in &cfg.tasks {
            for regime in [Regime::Demo, Regime::Lang] {
                if m == Method::Heuristic && regime == Regime::Lang {
                    continue;
                }
                let row = s.table.get(m, task, regime).expect("complete table");
                assert_eq!(row.episodes, 5);
                assert!(row.success_pct.is_finite());
                assert!(
                    (row.success_pct - success_pct(row.successes, row.episodes)).abs() < 1e-12
                );
                cells += 1;
            }
        }
    }
    criterion(
        "12 (smoke pipeline)",
        s.elapsed < Duration::from_secs(600),
        format!("{cells} table cells valid, run took {:.1?}", s.elapsed),
    );
}

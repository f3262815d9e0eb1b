//! Motion-filter suite turning raw keypoint tracks into clean object flows:
//! a movement filter, a segment-area filter, a depth filter, and the
//! keypoint selector feeding the policy.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flowcore::{Keypoint2D, KeypointTrackSet, TaskFlow, CANVAS};
use crate::sim::raster::RenderOut;
use crate::sim::world::EnvKind;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("no keypoints survived filtering; cannot select {wanted}")]
    NoSurvivors { wanted: usize },
}

/// How per-keypoint movement is summarized over time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MovementMetric {
    /// Largest L2 deviation from the initial location over all frames.
    #[default]
    MaxDeviation,
    /// Distance between the final and initial location.
    Endpoint,
    /// Sum of per-frame step lengths.
    PathLength,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Minimum canvas-space movement (pixels) for a keypoint to count as
    /// part of the manipulated object.
    pub moving_threshold: f64,
    /// Maximum pixel area of the segment a keypoint may sit on; larger
    /// segments are treated as background.
    pub segment_area_threshold: f64,
    pub metric: MovementMetric,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            moving_threshold: 20.0,
            segment_area_threshold: 10_000.0,
            metric: MovementMetric::MaxDeviation,
        }
    }
}

impl FilterConfig {
    /// Per-env defaults: cloth moves less in image space, so its movement
    /// threshold is halved.
    pub fn for_env(env: EnvKind) -> Self {
        let mut cfg = Self::default();
        if matches!(env, EnvKind::Cloth | EnvKind::Fold) {
            cfg.moving_threshold = 10.0;
        }
        cfg
    }
}

/// Movement summary of one keypoint's `(u, v)` series.
pub fn movement(series: &[(f64, f64)], metric: MovementMetric) -> f64 {
    if series.is_empty() {
        return 0.0;
    }
    let (u0, v0) = series[0];
    match metric {
        MovementMetric::MaxDeviation => series
            .iter()
            .map(|&(u, v)| ((u - u0).powi(2) + (v - v0).powi(2)).sqrt())
            .fold(0.0, f64::max),
        MovementMetric::Endpoint => {
            let &(u, v) = series.last().expect("nonempty");
            ((u - u0).powi(2) + (v - v0).powi(2)).sqrt()
        }
        MovementMetric::PathLength => series
            .windows(2)
            .map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt())
            .sum(),
    }
}

/// Indices of keypoints whose movement reaches `threshold` pixels.
pub fn moving_filter(
    tracks: &KeypointTrackSet,
    threshold: f64,
    metric: MovementMetric,
) -> Vec<usize> {
    (0..tracks.n_pts)
        .filter(|&n| {
            let series: Vec<(f64, f64)> = (0..tracks.t_len)
                .map(|t| {
                    let kp = tracks.at(t, n);
                    (kp.u, kp.v)
                })
                .collect();
            movement(&series, metric) >= threshold
        })
        .collect()
}

/// [`moving_filter`] over a packed task flow: each of the `h * w` slots is
/// one keypoint.
pub fn moving_filter_flow(flow: &TaskFlow, threshold: f64, metric: MovementMetric) -> Vec<usize> {
    (0..flow.h * flow.w)
        .filter(|&n| {
            let (i, j) = (n / flow.w, n % flow.w);
            let series: Vec<(f64, f64)> =
                (0..flow.t).map(|f| (flow.get(0, f, i, j), flow.get(1, f, i, j))).collect();
            movement(&series, metric) >= threshold
        })
        .collect()
}

fn on_canvas(kp: &Keypoint2D) -> bool {
    kp.u >= 0.0 && kp.u < CANVAS && kp.v >= 0.0 && kp.v < CANVAS
}

/// Indices of keypoints sitting on segments no larger than `area_threshold`
/// pixels. Off-canvas keypoints and background (id 0) are removed.
pub fn segment_area_filter(
    points: &[Keypoint2D],
    frame0: &RenderOut,
    area_threshold: f64,
) -> Vec<usize> {
    points
        .iter()
        .enumerate()
        .filter(|(_, kp)| {
            if !on_canvas(kp) {
                return false;
            }
            let (_, seg) = frame0.at(kp.u, kp.v);
            seg != 0 && (frame0.segment_area(seg) as f64) <= area_threshold
        })
        .map(|(n, _)| n)
        .collect()
}

/// Indices of keypoints with a valid (positive) depth reading at frame 0.
pub fn depth_filter(points: &[Keypoint2D], frame0: &RenderOut) -> Vec<usize> {
    points
        .iter()
        .enumerate()
        .filter(|(_, kp)| {
            if !on_canvas(kp) {
                return false;
            }
            frame0.at(kp.u, kp.v).0 > 0.0
        })
        .map(|(n, _)| n)
        .collect()
}

/// The fixed filter chain: moving, then segment area, then depth, each
/// operating on the survivors of the previous stage. Returns indices into
/// the original track set.
pub fn apply_filters(
    tracks: &KeypointTrackSet,
    frame0: &RenderOut,
    cfg: &FilterConfig,
) -> Vec<usize> {
    let moving = moving_filter(tracks, cfg.moving_threshold, cfg.metric);
    let pts0 = tracks.frame_points(0);
    let stage: Vec<Keypoint2D> = moving.iter().map(|&n| pts0[n]).collect();
    let seg_kept = segment_area_filter(&stage, frame0, cfg.segment_area_threshold);
    let stage2: Vec<usize> = seg_kept.iter().map(|&k| moving[k]).collect();
    let pts: Vec<Keypoint2D> = stage2.iter().map(|&n| pts0[n]).collect();
    depth_filter(&pts, frame0).into_iter().map(|k| stage2[k]).collect()
}

/// Choose `n` keypoints from the survivor list: uniform without replacement
/// when enough survive, otherwise every survivor plus uniform resamples to
/// pad the count.
///
/// # Errors
///
/// [`FilterError::NoSurvivors`] when the survivor list is empty.
pub fn select_policy_keypoints<R: Rng>(
    survivors: &[usize],
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>, FilterError> {
    if survivors.is_empty() {
        return Err(FilterError::NoSurvivors { wanted: n });
    }
    if survivors.len() >= n {
        let mut pool: Vec<usize> = survivors.to_vec();
        for k in 0..n {
            let j = rng.random_range(k..pool.len());
            pool.swap(k, j);
        }
        pool.truncate(n);
        Ok(pool)
    } else {
        let mut out: Vec<usize> = survivors.to_vec();
        while out.len() < n {
            out.push(survivors[rng.random_range(0..survivors.len())]);
        }
        Ok(out)
    }
}

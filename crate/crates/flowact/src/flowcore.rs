//! Core flow data types and deterministic keypoint/flow operations.
//!
//! A *flow image* stores one frame of keypoint state on a rectangular grid:
//! three channels `(u, v, visibility)` over an `H x W` lattice of slots, in
//! C order `[3, H, W]`. A *task flow* stacks `T` such frames as `[3, T, H, W]`.
//! Pixel coordinates live on a fixed `256 x 256` canvas. Keypoints that leave
//! view keep their last visible coordinates with the visibility channel set
//! to zero, so downstream consumers never see garbage positions.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Side length of the square pixel canvas all flows are expressed on.
pub const CANVAS: f64 = 256.0;

/// Default flow image lattice side (`H = W = 32`).
pub const FLOW_SIDE: usize = 32;

/// Default number of temporal frames in a task flow.
pub const FLOW_FRAMES: usize = 32;

/// Errors from flow construction and serialization.
#[derive(Debug, thiserror::Error)]
pub enum FlowError {
    #[error("bounding box has no area: ({u_min}, {v_min}, {u_max}, {v_max})")]
    DegenerateBbox {
        u_min: f64,
        v_min: f64,
        u_max: f64,
        v_max: f64,
    },
    #[error("bounding box list is empty")]
    NoBboxes,
    #[error("expected {expected} keypoints for a {h}x{w} flow image, got {got}")]
    SlotCountMismatch { expected: usize, got: usize, h: usize, w: usize },
    #[error("need at least {need} frames, got {got}")]
    TooFewFrames { need: usize, got: usize },
    #[error("embedding dimension {dim} is not divisible by {div}")]
    BadEmbeddingDim { dim: usize, div: usize },
    #[error("track set has {n_pts} points, cannot pack into {h}x{w} slots")]
    UnpackableTracks { n_pts: usize, h: usize, w: usize },
    #[error("shape mismatch reading {path}: sidecar says {sidecar:?}, file holds {actual} floats")]
    ShapeMismatch {
        path: String,
        sidecar: Vec<usize>,
        actual: usize,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> FlowError {
    FlowError::Io { path: path.display().to_string(), source }
}

/// One tracked point in pixel space.
///
/// `visible` is false once the point is occluded or off screen; `u`/`v` then
/// hold the last coordinates at which it was seen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint2D {
    pub u: f64,
    pub v: f64,
    pub visible: bool,
}

impl Keypoint2D {
    pub fn new(u: f64, v: f64, visible: bool) -> Self {
        Self { u, v, visible }
    }
}

/// Axis-aligned pixel-space bounding box, `min` corner inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
}

impl BoundingBox {
    pub fn new(u_min: f64, v_min: f64, u_max: f64, v_max: f64) -> Self {
        Self { u_min, v_min, u_max, v_max }
    }

    pub fn width(&self) -> f64 {
        self.u_max - self.u_min
    }

    pub fn height(&self) -> f64 {
        self.v_max - self.v_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.u_min + self.u_max), 0.5 * (self.v_min + self.v_max))
    }

    /// Smallest box containing every visible point, or `None` if none are.
    pub fn around_points(points: &[Keypoint2D]) -> Option<Self> {
        let mut it = points.iter().filter(|p| p.visible);
        let first = it.next()?;
        let mut b = Self::new(first.u, first.v, first.u, first.v);
        for p in it {
            b.u_min = b.u_min.min(p.u);
            b.v_min = b.v_min.min(p.v);
            b.u_max = b.u_max.max(p.u);
            b.v_max = b.v_max.max(p.v);
        }
        Some(b)
    }
}

/// One frame of flow on an `h x w` slot lattice, channels `(u, v, visibility)`.
///
/// Data is C order `[3, h, w]`: channel-major, then rows, then columns.
#[derive(Debug, Clone, PartialEq)]
pub struct RectFlowImage {
    pub data: Vec<f64>,
    pub h: usize,
    pub w: usize,
}

impl RectFlowImage {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self { data: vec![0.0; 3 * h * w], h, w }
    }

    #[inline]
    pub fn idx(&self, c: usize, i: usize, j: usize) -> usize {
        (c * self.h + i) * self.w + j
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.idx(c, i, j)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, i: usize, j: usize, val: f64) {
        let k = self.idx(c, i, j);
        self.data[k] = val;
    }
}

/// `T` flow frames over a shared slot lattice, C order `[3, T, h, w]`.
///
/// `frame_indices` records which source-episode frames each slice came from
/// when the flow was subsampled from a longer track set.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskFlow {
    pub data: Vec<f64>,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub frame_indices: Option<Vec<usize>>,
}

impl TaskFlow {
    pub fn zeros(t: usize, h: usize, w: usize) -> Self {
        Self { data: vec![0.0; 3 * t * h * w], t, h, w, frame_indices: None }
    }

    #[inline]
    pub fn idx(&self, c: usize, f: usize, i: usize, j: usize) -> usize {
        ((c * self.t + f) * self.h + i) * self.w + j
    }

    #[inline]
    pub fn get(&self, c: usize, f: usize, i: usize, j: usize) -> f64 {
        self.data[self.idx(c, f, i, j)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, f: usize, i: usize, j: usize, val: f64) {
        let k = self.idx(c, f, i, j);
        self.data[k] = val;
    }

    /// Copy of frame `f` as a standalone flow image.
    pub fn frame(&self, f: usize) -> RectFlowImage {
        let mut img = RectFlowImage::zeros(self.h, self.w);
        for c in 0..3 {
            for i in 0..self.h {
                for j in 0..self.w {
                    img.set(c, i, j, self.get(c, f, i, j));
                }
            }
        }
        img
    }

    /// Overwrite frame `f` from a flow image of matching lattice size.
    pub fn set_frame(&mut self, f: usize, img: &RectFlowImage) {
        assert_eq!((img.h, img.w), (self.h, self.w), "lattice size mismatch");
        for c in 0..3 {
            for i in 0..self.h {
                for j in 0..self.w {
                    self.set(c, f, i, j, img.get(c, i, j));
                }
            }
        }
    }
}

/// Dense pixel tracks for `n_pts` keypoints over `t_len` frames.
///
/// `tracks` is C order `[t_len, n_pts, 3]` with channels `(u, v, visibility)`.
/// `initial_xyz` holds the camera-frame 3D position of each point at frame 0,
/// flattened `[n_pts, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointTrackSet {
    pub tracks: Vec<f64>,
    pub t_len: usize,
    pub n_pts: usize,
    pub initial_xyz: Vec<f64>,
}

impl KeypointTrackSet {
    pub fn new(t_len: usize, n_pts: usize) -> Self {
        Self {
            tracks: vec![0.0; t_len * n_pts * 3],
            t_len,
            n_pts,
            initial_xyz: vec![0.0; n_pts * 3],
        }
    }

    #[inline]
    pub fn at(&self, t: usize, n: usize) -> Keypoint2D {
        let k = (t * self.n_pts + n) * 3;
        Keypoint2D::new(self.tracks[k], self.tracks[k + 1], self.tracks[k + 2] > 0.5)
    }

    #[inline]
    pub fn set_at(&mut self, t: usize, n: usize, kp: Keypoint2D) {
        let k = (t * self.n_pts + n) * 3;
        self.tracks[k] = kp.u;
        self.tracks[k + 1] = kp.v;
        self.tracks[k + 2] = if kp.visible { 1.0 } else { 0.0 };
    }

    pub fn frame_points(&self, t: usize) -> Vec<Keypoint2D> {
        (0..self.n_pts).map(|n| self.at(t, n)).collect()
    }

    pub fn initial_xyz_of(&self, n: usize) -> [f64; 3] {
        [
            self.initial_xyz[3 * n],
            self.initial_xyz[3 * n + 1],
            self.initial_xyz[3 * n + 2],
        ]
    }

    /// New track set restricted to the given point indices (order kept,
    /// duplicates allowed).
    pub fn select_points(&self, indices: &[usize]) -> Self {
        let mut out = Self::new(self.t_len, indices.len());
        for (m, &n) in indices.iter().enumerate() {
            for t in 0..self.t_len {
                out.set_at(t, m, self.at(t, n));
            }
            let xyz = self.initial_xyz_of(n);
            out.initial_xyz[3 * m..3 * m + 3].copy_from_slice(&xyz);
        }
        out
    }

    /// New track set restricted to the given frame indices (order kept).
    pub fn select_frames(&self, frames: &[usize]) -> Self {
        let mut out = Self::new(frames.len(), self.n_pts);
        for (f, &t) in frames.iter().enumerate() {
            for n in 0..self.n_pts {
                out.set_at(f, n, self.at(t, n));
            }
        }
        out.initial_xyz.copy_from_slice(&self.initial_xyz);
        out
    }
}

/// Evenly spaced `h x w` lattice of keypoints spanning `bbox` inclusively.
///
/// Row-major order: slot `(i, j)` maps to
/// `u = u_min + j * width / (w - 1)`, `v = v_min + i * height / (h - 1)`.
/// A dimension of size 1 collapses to the box center along that axis. All
/// points are marked visible.
///
/// # Errors
///
/// [`FlowError::DegenerateBbox`] if the box has non-positive width or height.
pub fn sample_grid_in_bbox(
    bbox: &BoundingBox,
    h: usize,
    w: usize,
) -> Result<Vec<Keypoint2D>, FlowError> {
    if bbox.width() <= 0.0 || bbox.height() <= 0.0 {
        return Err(FlowError::DegenerateBbox {
            u_min: bbox.u_min,
            v_min: bbox.v_min,
            u_max: bbox.u_max,
            v_max: bbox.v_max,
        });
    }
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let v = if h == 1 {
            0.5 * (bbox.v_min + bbox.v_max)
        } else {
            bbox.v_min + i as f64 * bbox.height() / (h - 1) as f64
        };
        for j in 0..w {
            let u = if w == 1 {
                0.5 * (bbox.u_min + bbox.u_max)
            } else {
                bbox.u_min + j as f64 * bbox.width() / (w - 1) as f64
            };
            out.push(Keypoint2D::new(u, v, true));
        }
    }
    Ok(out)
}

/// Apportion `total` into `weights.len()` integer counts proportional to
/// `weights`, using largest-remainder rounding. Counts sum to `total`
/// exactly; ties in remainder break toward the lower index.
pub fn largest_remainder_quotas(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 || weights.is_empty() {
        let mut q = vec![0; weights.len()];
        if let Some(first) = q.first_mut() {
            *first = total;
        }
        return q;
    }
    let exact: Vec<f64> = weights.iter().map(|w| w.max(0.0) / sum * total as f64).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = quotas.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for k in 0..total.saturating_sub(assigned) {
        quotas[order[k % order.len()]] += 1;
    }
    quotas
}

/// Grid-sample `total` keypoints across several boxes, apportioning per-box
/// counts by box area with largest-remainder rounding.
///
/// Each box gets an aspect-matched grid truncated row-major to its quota;
/// results are concatenated in box order and padded by repeating the last
/// point if short. A single box with a square count reproduces
/// [`sample_grid_in_bbox`] exactly.
///
/// # Errors
///
/// [`FlowError::NoBboxes`] on an empty list, or [`FlowError::DegenerateBbox`]
/// if any box with a nonzero quota has no area.
pub fn sample_multi_object(
    bboxes: &[BoundingBox],
    total: usize,
) -> Result<Vec<Keypoint2D>, FlowError> {
    if bboxes.is_empty() {
        return Err(FlowError::NoBboxes);
    }
    let areas: Vec<f64> = bboxes.iter().map(|b| b.area()).collect();
    let quotas = largest_remainder_quotas(&areas, total);
    let mut out = Vec::with_capacity(total);
    for (bbox, &n) in bboxes.iter().zip(&quotas) {
        if n == 0 {
            continue;
        }
        let aspect = bbox.width() / bbox.height();
        let w = ((n as f64 * aspect).sqrt().ceil() as usize).max(1);
        let h = n.div_ceil(w).max(1);
        let grid = sample_grid_in_bbox(bbox, h, w)?;
        out.extend_from_slice(&grid[..n.min(grid.len())]);
    }
    while out.len() < total {
        let last = *out.last().expect("quotas sum to total > 0");
        out.push(last);
    }
    out.truncate(total);
    Ok(out)
}

/// Pack `h * w` keypoints (row-major slot order) into a flow image.
///
/// # Errors
///
/// [`FlowError::SlotCountMismatch`] if the list length is not `h * w`.
pub fn pack_rect_flow(
    points: &[Keypoint2D],
    h: usize,
    w: usize,
) -> Result<RectFlowImage, FlowError> {
    if points.len() != h * w {
        return Err(FlowError::SlotCountMismatch { expected: h * w, got: points.len(), h, w });
    }
    let mut img = RectFlowImage::zeros(h, w);
    for i in 0..h {
        for j in 0..w {
            let p = points[i * w + j];
            img.set(0, i, j, p.u);
            img.set(1, i, j, p.v);
            img.set(2, i, j, if p.visible { 1.0 } else { 0.0 });
        }
    }
    Ok(img)
}

/// Inverse of [`pack_rect_flow`]: recover the row-major keypoint list.
///
/// Visibility is thresholded at 0.5 so decoded continuous channels stay
/// interpretable.
pub fn unpack_rect_flow(img: &RectFlowImage) -> Vec<Keypoint2D> {
    let mut out = Vec::with_capacity(img.h * img.w);
    for i in 0..img.h {
        for j in 0..img.w {
            out.push(Keypoint2D::new(
                img.get(0, i, j),
                img.get(1, i, j),
                img.get(2, i, j) > 0.5,
            ));
        }
    }
    out
}

/// Choose `t` strictly increasing frame indices from `0..t_len`, always
/// including the first and last frame; interior indices are drawn uniformly
/// without replacement.
///
/// # Errors
///
/// [`FlowError::TooFewFrames`] if `t_len < t` or `t < 2`.
pub fn sample_flow_frame_indices<R: Rng>(
    t_len: usize,
    t: usize,
    rng: &mut R,
) -> Result<Vec<usize>, FlowError> {
    if t < 2 || t_len < t {
        return Err(FlowError::TooFewFrames { need: t.max(2), got: t_len });
    }
    let mut interior: Vec<usize> = (1..t_len - 1).collect();
    // Partial Fisher-Yates: the first t-2 slots become the sample.
    let take = t - 2;
    for k in 0..take {
        let j = rng.random_range(k..interior.len());
        interior.swap(k, j);
    }
    let mut chosen: Vec<usize> = interior[..take].to_vec();
    chosen.push(0);
    chosen.push(t_len - 1);
    chosen.sort_unstable();
    Ok(chosen)
}

/// Rewrite invisible samples so their `(u, v)` hold the last visible
/// location (or the first visible location during a leading invisible run),
/// keeping visibility flags unchanged. Never-visible points pass through
/// untouched. This keeps packed flow images spatially smooth.
pub fn freeze_invisible_tracks(tracks: &KeypointTrackSet) -> KeypointTrackSet {
    let mut out = tracks.clone();
    for n in 0..tracks.n_pts {
        let Some(first) = (0..tracks.t_len).find(|&t| tracks.at(t, n).visible) else {
            continue;
        };
        let mut last = tracks.at(first, n);
        for t in 0..tracks.t_len {
            let kp = tracks.at(t, n);
            if kp.visible {
                last = kp;
            } else {
                out.set_at(t, n, Keypoint2D::new(last.u, last.v, false));
            }
        }
    }
    out
}

/// Subsample a rect-packable track set (`n_pts == h * w`) down to `t` frames
/// and pack it as a task flow. Frame 0 and the final frame are always kept,
/// and invisible samples are frozen at their last visible location.
///
/// # Errors
///
/// [`FlowError::UnpackableTracks`] if `n_pts != h * w`, or
/// [`FlowError::TooFewFrames`] if the track set is shorter than `t`.
pub fn subsample_task_flow<R: Rng>(
    tracks: &KeypointTrackSet,
    t: usize,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Result<TaskFlow, FlowError> {
    if tracks.n_pts != h * w {
        return Err(FlowError::UnpackableTracks { n_pts: tracks.n_pts, h, w });
    }
    let frames = sample_flow_frame_indices(tracks.t_len, t, rng)?;
    let frozen = freeze_invisible_tracks(tracks);
    let mut flow = TaskFlow::zeros(t, h, w);
    for (f, &src) in frames.iter().enumerate() {
        let img = pack_rect_flow(&frozen.frame_points(src), h, w)?;
        flow.set_frame(f, &img);
    }
    flow.frame_indices = Some(frames);
    Ok(flow)
}

/// Sinusoidal positional encoding of a scalar into `dim` values, interleaved
/// `sin`/`cos` over geometrically spaced frequencies `10000^(-2k/dim)`.
///
/// # Errors
///
/// [`FlowError::BadEmbeddingDim`] if `dim` is odd or zero.
pub fn encode_sinusoidal_1d(t: f64, dim: usize) -> Result<Vec<f64>, FlowError> {
    if dim == 0 || dim % 2 != 0 {
        return Err(FlowError::BadEmbeddingDim { dim, div: 2 });
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (10000f64).powf(-(2.0 * k as f64) / dim as f64);
        out[2 * k] = (t * freq).sin();
        out[2 * k + 1] = (t * freq).cos();
    }
    Ok(out)
}

/// 2D positional encoding: the concatenation of 1D encodings of `u` and `v`,
/// each `dim / 2` wide.
///
/// # Errors
///
/// [`FlowError::BadEmbeddingDim`] if `dim` is not divisible by 4.
pub fn encode_sinusoidal_2d(u: f64, v: f64, dim: usize) -> Result<Vec<f64>, FlowError> {
    if dim == 0 || dim % 4 != 0 {
        return Err(FlowError::BadEmbeddingDim { dim, div: 4 });
    }
    let mut out = encode_sinusoidal_1d(u, dim / 2)?;
    out.extend(encode_sinusoidal_1d(v, dim / 2)?);
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct FlowSidecar {
    shape: Vec<usize>,
    canvas: f64,
    channels: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    frame_indices: Option<Vec<usize>>,
}

fn write_f32_file(path: &Path, data: &[f64]) -> Result<(), FlowError> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &x in data {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&bytes).map_err(|e| io_err(path, e))
}

fn read_f32_file(path: &Path) -> Result<Vec<f64>, FlowError> {
    let mut f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| io_err(path, e))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn sidecar_path(base: &Path) -> std::path::PathBuf {
    base.with_extension("json")
}

fn data_path(base: &Path) -> std::path::PathBuf {
    base.with_extension("f32")
}

fn write_sidecar(base: &Path, sidecar: &FlowSidecar) -> Result<(), FlowError> {
    let path = sidecar_path(base);
    let text = serde_json::to_string_pretty(sidecar)
        .map_err(|e| FlowError::Json { path: path.display().to_string(), source: e })?;
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

fn read_sidecar(base: &Path) -> Result<FlowSidecar, FlowError> {
    let path = sidecar_path(base);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| FlowError::Json { path: path.display().to_string(), source: e })
}

/// Write a task flow as `<base>.f32` (little-endian f32, C order
/// `[3, T, H, W]`) plus a `<base>.json` sidecar describing shape, canvas
/// size, channel order, and source frame indices.
///
/// # Errors
///
/// Propagates filesystem and JSON failures.
pub fn write_task_flow(base: &Path, flow: &TaskFlow) -> Result<(), FlowError> {
    write_f32_file(&data_path(base), &flow.data)?;
    write_sidecar(
        base,
        &FlowSidecar {
            shape: vec![3, flow.t, flow.h, flow.w],
            canvas: CANVAS,
            channels: vec!["u".into(), "v".into(), "visibility".into()],
            frame_indices: flow.frame_indices.clone(),
        },
    )
}

/// Read a task flow written by [`write_task_flow`].
///
/// # Errors
///
/// [`FlowError::ShapeMismatch`] if the sidecar shape disagrees with the file
/// length, plus filesystem and JSON failures.
pub fn read_task_flow(base: &Path) -> Result<TaskFlow, FlowError> {
    let sidecar = read_sidecar(base)?;
    let data = read_f32_file(&data_path(base))?;
    if sidecar.shape.len() != 4 || sidecar.shape.iter().product::<usize>() != data.len() {
        return Err(FlowError::ShapeMismatch {
            path: data_path(base).display().to_string(),
            sidecar: sidecar.shape,
            actual: data.len(),
        });
    }
    Ok(TaskFlow {
        data,
        t: sidecar.shape[1],
        h: sidecar.shape[2],
        w: sidecar.shape[3],
        frame_indices: sidecar.frame_indices,
    })
}

/// Write a single flow image as `<base>.f32` + `<base>.json`, shape `[3, H, W]`.
///
/// # Errors
///
/// Propagates filesystem and JSON failures.
pub fn write_flow_image(base: &Path, img: &RectFlowImage) -> Result<(), FlowError> {
    write_f32_file(&data_path(base), &img.data)?;
    write_sidecar(
        base,
        &FlowSidecar {
            shape: vec![3, img.h, img.w],
            canvas: CANVAS,
            channels: vec!["u".into(), "v".into(), "visibility".into()],
            frame_indices: None,
        },
    )
}

/// Read a flow image written by [`write_flow_image`].
///
/// # Errors
///
/// [`FlowError::ShapeMismatch`] if the sidecar shape disagrees with the file
/// length, plus filesystem and JSON failures.
pub fn read_flow_image(base: &Path) -> Result<RectFlowImage, FlowError> {
    let sidecar = read_sidecar(base)?;
    let data = read_f32_file(&data_path(base))?;
    if sidecar.shape.len() != 3 || sidecar.shape.iter().product::<usize>() != data.len() {
        return Err(FlowError::ShapeMismatch {
            path: data_path(base).display().to_string(),
            sidecar: sidecar.shape,
            actual: data.len(),
        });
    }
    Ok(RectFlowImage { data, h: sidecar.shape[1], w: sidecar.shape[2] })
}

/// Raw f32 array IO used by episode directories and checkpoints.
///
/// # Errors
///
/// Propagates filesystem failures.
pub fn write_f32_array(path: &Path, data: &[f64]) -> Result<(), FlowError> {
    write_f32_file(path, data)
}

/// Counterpart to [`write_f32_array`].
///
/// # Errors
///
/// Propagates filesystem failures.
pub fn read_f32_array(path: &Path) -> Result<Vec<f64>, FlowError> {
    read_f32_file(path)
}

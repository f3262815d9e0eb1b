//! Flow-conditioned manipulation policy: a permutation-invariant keypoint
//! state encoder, a temporal alignment module that locates task progress
//! against the conditioning flow, and a diffusion action head, deployed
//! closed-loop in the simulator with receding-horizon execution.

use std::path::Path;

use nalgebra::Rotation3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::explore::{resolve_canvas_points, Episode};
use crate::filters::{
    apply_filters, moving_filter_flow, select_policy_keypoints, FilterConfig, FilterError,
    MovementMetric,
};
use crate::flowcore::{
    encode_sinusoidal_1d, encode_sinusoidal_2d, freeze_invisible_tracks,
    sample_flow_frame_indices, FlowError, KeypointTrackSet, TaskFlow,
};
use crate::flowgen::{ddim_time_pairs, NoiseSchedule};
use crate::nn::ckpt::{load_checkpoint, save_checkpoint, CkptError};
use crate::nn::layers::{LayerNorm, Linear, TransformerBlock};
use crate::nn::optim::{box_muller, AdamWCfg, Init, ParamStore};
use crate::nn::tape::{Tape, T};
use crate::sim::world::{reset, step, task_success, Action, Embodiment, Task};
use crate::sim::{observe, render_frame, Camera, SimConfig, Workspace};

/// Proprioception with the orientation expanded to the first two rotation
/// matrix columns.
pub const PROPRIO_DIM: usize = 10;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("non-finite values in policy inputs")]
    NanInput,
    #[error("loss became non-finite at step {step} (action {action}, align {align})")]
    NanLoss { step: usize, action: f64, align: f64 },
    #[error("remaining flow is empty")]
    EmptyRemainder,
    #[error("task flow has no frames")]
    EmptyFlow,
    #[error("shape mismatch: {what}")]
    Shape { what: String },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
}

/// Which policy variant a checkpoint implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyVariant {
    /// Alignment module predicts the remaining-flow latent.
    Full,
    /// No alignment: the head is conditioned on the pooled full-flow encoding.
    NoAlignment,
    /// Full architecture trained on uniform-grid keypoints instead of object
    /// keypoints.
    GridFlow,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PolicyConfig {
    /// Keypoints per state, N.
    pub n_keypoints: usize,
    /// State representation width; the point descriptor is two halves of it.
    pub state_dim: usize,
    /// Alignment latent width.
    pub z_dim: usize,
    pub state_layers: usize,
    pub xi_layers: usize,
    pub psi_layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub head_hidden: usize,
    /// Action chunk length, L.
    pub action_len: usize,
    pub diffusion_steps: usize,
    pub infer_steps: usize,
    /// Frames of the conditioning task flow.
    pub flow_frames: usize,
    /// Cap on remaining-flow frames fed to the target encoder.
    pub xi_max_frames: usize,
    /// Actions executed per control cycle, E.
    pub exec_horizon: usize,
    pub variant: PolicyVariant,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            n_keypoints: 128,
            state_dim: 384,
            z_dim: 384,
            state_layers: 4,
            xi_layers: 4,
            psi_layers: 8,
            heads: 4,
            ff_mult: 2,
            head_hidden: 256,
            action_len: 16,
            diffusion_steps: 50,
            infer_steps: 16,
            flow_frames: 32,
            xi_max_frames: 32,
            exec_horizon: 8,
            variant: PolicyVariant::Full,
        }
    }
}

impl PolicyConfig {
    fn validate(&self) {
        assert_eq!(self.state_dim % 2, 0, "state_dim must split into two halves");
        assert_eq!((self.state_dim / 2) % 4, 0, "descriptor half must fit 2D sinusoids");
        assert_eq!(self.state_dim % self.heads, 0, "heads must divide state_dim");
        assert_eq!(self.head_hidden % 2, 0, "head_hidden must fit 1D sinusoids");
        assert!(self.action_len > 0 && self.n_keypoints > 0);
    }

    fn cond_core_dim(&self) -> usize {
        match self.variant {
            PolicyVariant::NoAlignment => self.state_dim,
            _ => self.z_dim,
        }
    }

    fn cond_dim(&self) -> usize {
        self.cond_core_dim() + self.state_dim + PROPRIO_DIM
    }

    fn chunk_dim(&self) -> usize {
        self.action_len * 7
    }
}

/// Per-dimension action bounds used to map chunks into `[-1, 1]` for the
/// diffusion head.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ActionStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ActionStats {
    pub fn from_actions<'a>(actions: impl Iterator<Item = &'a [f64; 7]>) -> Self {
        let mut min = vec![f64::INFINITY; 7];
        let mut max = vec![f64::NEG_INFINITY; 7];
        for a in actions {
            for d in 0..7 {
                min[d] = min[d].min(a[d]);
                max[d] = max[d].max(a[d]);
            }
        }
        Self { min, max }
    }

    pub fn normalize(&self, a: &[f64; 7]) -> [f64; 7] {
        let mut out = [0.0; 7];
        for d in 0..7 {
            let span = self.max[d] - self.min[d];
            out[d] = if span > 1e-9 { 2.0 * (a[d] - self.min[d]) / span - 1.0 } else { 0.0 };
        }
        out
    }

    pub fn denormalize(&self, a: &[f64; 7]) -> [f64; 7] {
        let mut out = [0.0; 7];
        for d in 0..7 {
            let span = self.max[d] - self.min[d];
            out[d] = if span > 1e-9 { (a[d] + 1.0) / 2.0 * span + self.min[d] } else { self.min[d] };
        }
        out
    }
}

/// Clamp an action to the workspace: position inside the box, rotation
/// components within one half turn, grip in `[0, 1]`.
pub fn clamp_action(a: &[f64; 7], ws: &Workspace) -> [f64; 7] {
    let mut out = *a;
    for d in 0..3 {
        out[d] = out[d].clamp(ws.min[d], ws.max[d]);
    }
    for d in 3..6 {
        out[d] = out[d].clamp(-std::f64::consts::PI, std::f64::consts::PI);
    }
    out[6] = out[6].clamp(0.0, 1.0);
    out
}

/// Expand 7-dim proprioception (position, axis-angle, grip) into the policy's
/// continuous form with the rotation as two matrix columns.
pub fn expand_proprio(rho: &[f64; 7]) -> [f64; PROPRIO_DIM] {
    let m = Rotation3::new(nalgebra::Vector3::new(rho[3], rho[4], rho[5]));
    [
        rho[0],
        rho[1],
        rho[2],
        m[(0, 0)],
        m[(1, 0)],
        m[(2, 0)],
        m[(0, 1)],
        m[(1, 1)],
        m[(2, 1)],
        rho[6],
    ]
}

struct FrameEncoder {
    x0_proj: Linear,
    blocks: Vec<TransformerBlock>,
    ln: LayerNorm,
}

struct SeqEncoder {
    cls: String,
    blocks: Vec<TransformerBlock>,
    ln: LayerNorm,
    out: Linear,
}

struct AlignModule {
    s_proj: Linear,
    rho_proj: Linear,
    cls: String,
    blocks: Vec<TransformerBlock>,
    ln: LayerNorm,
    out: Linear,
}

struct ActionHead {
    x_in: Linear,
    cond: Linear,
    t1: Linear,
    t2: Linear,
    f1: Linear,
    f2: Linear,
    out: Linear,
}

/// Layer structure over a parameter store; the variant decides whether the
/// alignment and target encoders exist at all.
pub struct PolicyModel {
    pub cfg: PolicyConfig,
    phi: FrameEncoder,
    xi: Option<SeqEncoder>,
    psi: Option<AlignModule>,
    head: ActionHead,
}

impl PolicyModel {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &PolicyConfig) -> Self {
        cfg.validate();
        let sd = cfg.state_dim;
        let hh = cfg.head_hidden;
        store.add("phi.cls", &[sd], Init::Normal(0.02), rng);
        let phi = FrameEncoder {
            x0_proj: Linear::init(store, rng, "phi.x0", 3, sd / 2, true),
            blocks: (0..cfg.state_layers)
                .map(|i| {
                    TransformerBlock::init(
                        store,
                        rng,
                        &format!("phi.b{i}"),
                        sd,
                        cfg.heads,
                        cfg.ff_mult,
                    )
                })
                .collect(),
            ln: LayerNorm::init(store, rng, "phi.ln", sd),
        };
        let with_alignment = cfg.variant != PolicyVariant::NoAlignment;
        let xi = with_alignment.then(|| {
            store.add("xi.cls", &[sd], Init::Normal(0.02), rng);
            SeqEncoder {
                cls: "xi.cls".to_string(),
                blocks: (0..cfg.xi_layers)
                    .map(|i| {
                        TransformerBlock::init(
                            store,
                            rng,
                            &format!("xi.b{i}"),
                            sd,
                            cfg.heads,
                            cfg.ff_mult,
                        )
                    })
                    .collect(),
                ln: LayerNorm::init(store, rng, "xi.ln", sd),
                out: Linear::init(store, rng, "xi.out", sd, cfg.z_dim, true),
            }
        });
        let psi = with_alignment.then(|| {
            store.add("psi.cls", &[sd], Init::Normal(0.02), rng);
            AlignModule {
                s_proj: Linear::init(store, rng, "psi.s", sd, sd, true),
                rho_proj: Linear::init(store, rng, "psi.rho", PROPRIO_DIM, sd, true),
                cls: "psi.cls".to_string(),
                blocks: (0..cfg.psi_layers)
                    .map(|i| {
                        TransformerBlock::init(
                            store,
                            rng,
                            &format!("psi.b{i}"),
                            sd,
                            cfg.heads,
                            cfg.ff_mult,
                        )
                    })
                    .collect(),
                ln: LayerNorm::init(store, rng, "psi.ln", sd),
                out: Linear::init(store, rng, "psi.out", sd, cfg.z_dim, true),
            }
        });
        let head = ActionHead {
            x_in: Linear::init(store, rng, "head.in", cfg.chunk_dim(), hh, true),
            cond: Linear::init(store, rng, "head.cond", cfg.cond_dim(), hh, true),
            t1: Linear::init(store, rng, "head.t1", hh, hh, true),
            t2: Linear::init(store, rng, "head.t2", hh, hh, true),
            f1: Linear::init(store, rng, "head.f1", 3 * hh, hh, true),
            f2: Linear::init(store, rng, "head.f2", hh, hh, true),
            out: Linear::init(store, rng, "head.out", hh, cfg.chunk_dim(), true),
        };
        Self { cfg: cfg.clone(), phi, xi, psi, head }
    }

    /// Rebuild the layer structure for an existing parameter set.
    pub fn for_store(cfg: &PolicyConfig) -> Self {
        let mut scratch = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Self::init(&mut scratch, &mut rng, cfg)
    }
}

fn check_finite(values: impl IntoIterator<Item = f64>) -> Result<(), PolicyError> {
    for v in values {
        if !v.is_finite() {
            return Err(PolicyError::NanInput);
        }
    }
    Ok(())
}

/// Encode a batch of keypoint frames into state vectors `[B, state_dim]`.
/// Each frame pairs current pixel positions with that sample's initial 3D
/// coordinates; a learnable CLS token summarizes, and no positional
/// information is attached to the points.
fn state_encode_batch(
    tape: &mut Tape,
    store: &ParamStore,
    model: &PolicyModel,
    frames: &[(&[(f64, f64)], &[f64])],
) -> T {
    let cfg = &model.cfg;
    let (n, sd) = (cfg.n_keypoints, cfg.state_dim);
    let b = frames.len();
    let half = sd / 2;
    let mut sin_data = Vec::with_capacity(b * n * half);
    let mut x0_data = Vec::with_capacity(b * n * 3);
    for (pts, x0) in frames {
        assert_eq!(pts.len(), n, "keypoint count");
        assert_eq!(x0.len(), n * 3, "initial coordinate count");
        for &(u, v) in *pts {
            sin_data.extend(encode_sinusoidal_2d(u, v, half).expect("descriptor half"));
        }
        x0_data.extend_from_slice(x0);
    }
    let sin = tape.constant(sin_data, &[b, n, half]);
    let x0 = tape.constant(x0_data, &[b, n, 3]);
    let x0f = model.phi.x0_proj.fwd(tape, store, x0);
    let desc = tape.concat_last(sin, x0f);
    let cls_slot = tape.zeros(&[b, 1, sd]);
    let cls_param = tape.param(store, "phi.cls");
    let cls = tape.add_bcast_tail(cls_slot, cls_param);
    let mut x = tape.concat_axis1(cls, desc);
    for block in &model.phi.blocks {
        x = block.fwd(tape, store, x);
    }
    let x = model.phi.ln.fwd(tape, store, x);
    tape.select_axis1(x, 0)
}

/// Run one frame through the state encoder.
///
/// # Errors
///
/// [`PolicyError::NanInput`] on non-finite inputs, [`PolicyError::Shape`] on
/// a wrong keypoint count.
pub fn state_encode(
    store: &ParamStore,
    model: &PolicyModel,
    f_t: &[(f64, f64)],
    x0: &[f64],
) -> Result<Vec<f64>, PolicyError> {
    if f_t.len() != model.cfg.n_keypoints || x0.len() != 3 * model.cfg.n_keypoints {
        return Err(PolicyError::Shape {
            what: format!("{} points, {} coordinates", f_t.len(), x0.len()),
        });
    }
    check_finite(f_t.iter().flat_map(|&(u, v)| [u, v]).chain(x0.iter().copied()))?;
    let mut tape = Tape::new();
    let out = state_encode_batch(&mut tape, store, model, &[(f_t, x0)]);
    Ok(tape.val(out).data.clone())
}

fn positional_rows(start: usize, count: usize, dim: usize) -> Vec<f64> {
    let mut rows = Vec::with_capacity(count * dim);
    for i in 0..count {
        rows.extend(encode_sinusoidal_1d((start + i) as f64, dim).expect("even state dim"));
    }
    rows
}

/// Target encoder over per-frame state encodings `[k, state_dim]` of the
/// remaining flow; fixed temporal positions plus a CLS token.
fn xi_forward(tape: &mut Tape, store: &ParamStore, model: &PolicyModel, frame_encs: T) -> T {
    let xi = model.xi.as_ref().expect("variant with target encoder");
    let sd = model.cfg.state_dim;
    let k = tape.shape(frame_encs)[0];
    let pos = tape.constant(positional_rows(0, k, sd), &[k, sd]);
    let tok = tape.add(frame_encs, pos);
    let tok = tape.reshape(tok, &[1, k, sd]);
    let cls = tape.param(store, &xi.cls);
    let cls = tape.reshape(cls, &[1, 1, sd]);
    let mut x = tape.concat_axis1(cls, tok);
    for block in &xi.blocks {
        x = block.fwd(tape, store, x);
    }
    let x = xi.ln.fwd(tape, store, x);
    let c = tape.select_axis1(x, 0);
    xi.out.fwd(tape, store, c)
}

/// Alignment module: complete-flow frame encodings plus the current state and
/// proprioception, all carrying temporal positions, summarized by a CLS token
/// into the predicted remaining-flow latent.
fn psi_forward(
    tape: &mut Tape,
    store: &ParamStore,
    model: &PolicyModel,
    flow_encs: T,
    s_t: T,
    rho: &[f64; PROPRIO_DIM],
) -> T {
    let psi = model.psi.as_ref().expect("variant with alignment");
    let sd = model.cfg.state_dim;
    let k = tape.shape(flow_encs)[0];
    let pos = tape.constant(positional_rows(0, k, sd), &[k, sd]);
    let flow_tok = tape.add(flow_encs, pos);
    let flow_tok = tape.reshape(flow_tok, &[1, k, sd]);
    let s = psi.s_proj.fwd(tape, store, s_t);
    let s_pos = tape.constant(positional_rows(k, 1, sd), &[1, sd]);
    let s = tape.add(s, s_pos);
    let s = tape.reshape(s, &[1, 1, sd]);
    let rho_in = tape.constant(rho.to_vec(), &[1, PROPRIO_DIM]);
    let r = psi.rho_proj.fwd(tape, store, rho_in);
    let r_pos = tape.constant(positional_rows(k + 1, 1, sd), &[1, sd]);
    let r = tape.add(r, r_pos);
    let r = tape.reshape(r, &[1, 1, sd]);
    let cls = tape.param(store, &psi.cls);
    let cls = tape.reshape(cls, &[1, 1, sd]);
    let x = tape.concat_axis1(cls, flow_tok);
    let x = tape.concat_axis1(x, s);
    let mut x = tape.concat_axis1(x, r);
    for block in &psi.blocks {
        x = block.fwd(tape, store, x);
    }
    let x = psi.ln.fwd(tape, store, x);
    let c = tape.select_axis1(x, 0);
    psi.out.fwd(tape, store, c)
}

/// Mean of the rows of `encs [k, d]` as `[1, d]`.
fn mean_rows(tape: &mut Tape, encs: T) -> T {
    let k = tape.shape(encs)[0];
    let ones = tape.constant(vec![1.0 / k as f64; k], &[1, k]);
    tape.matmul(ones, encs)
}

/// Encode the ground-truth remaining flow into the alignment target latent.
///
/// # Errors
///
/// [`PolicyError::EmptyRemainder`] without frames; shape and NaN checks as in
/// [`state_encode`].
pub fn target_encode_remaining(
    store: &ParamStore,
    model: &PolicyModel,
    remaining: &[Vec<(f64, f64)>],
    x0: &[f64],
) -> Result<Vec<f64>, PolicyError> {
    if remaining.is_empty() {
        return Err(PolicyError::EmptyRemainder);
    }
    check_finite(remaining.iter().flatten().flat_map(|&(u, v)| [u, v]))?;
    let mut tape = Tape::new();
    let frames: Vec<(&[(f64, f64)], &[f64])> =
        remaining.iter().map(|f| (f.as_slice(), x0)).collect();
    let encs = state_encode_batch(&mut tape, store, model, &frames);
    let z = xi_forward(&mut tape, store, model, encs);
    Ok(tape.val(z).data.clone())
}

/// Predict the remaining-flow latent from the complete task flow, the current
/// state, and proprioception.
///
/// # Errors
///
/// [`PolicyError::EmptyFlow`] without flow frames; shape errors as in
/// [`state_encode`].
pub fn align_forward(
    store: &ParamStore,
    model: &PolicyModel,
    flow_frames: &[Vec<(f64, f64)>],
    x0: &[f64],
    s_t: &[f64],
    rho: &[f64; 7],
) -> Result<Vec<f64>, PolicyError> {
    if flow_frames.is_empty() {
        return Err(PolicyError::EmptyFlow);
    }
    if s_t.len() != model.cfg.state_dim {
        return Err(PolicyError::Shape { what: format!("state of {} values", s_t.len()) });
    }
    let mut tape = Tape::new();
    let frames: Vec<(&[(f64, f64)], &[f64])> =
        flow_frames.iter().map(|f| (f.as_slice(), x0)).collect();
    let encs = state_encode_batch(&mut tape, store, model, &frames);
    let s = tape.constant(s_t.to_vec(), &[1, model.cfg.state_dim]);
    let z = psi_forward(&mut tape, store, model, encs, s, &expand_proprio(rho));
    Ok(tape.val(z).data.clone())
}

/// Noise predictor over normalized action chunks: embeddings of the noisy
/// chunk, the condition vector, and the diffusion timestep feed a GELU MLP.
fn head_forward(
    tape: &mut Tape,
    store: &ParamStore,
    model: &PolicyModel,
    x_noisy: T,
    cond: T,
    t_steps: &[usize],
) -> T {
    let hh = model.cfg.head_hidden;
    let b = t_steps.len();
    let mut t_data = Vec::with_capacity(b * hh);
    for &t in t_steps {
        t_data.extend(encode_sinusoidal_1d(t as f64, hh).expect("even head width"));
    }
    let temb = tape.constant(t_data, &[b, hh]);
    let temb = model.head.t1.fwd(tape, store, temb);
    let temb = tape.gelu(temb);
    let temb = model.head.t2.fwd(tape, store, temb);
    let xe = model.head.x_in.fwd(tape, store, x_noisy);
    let ce = model.head.cond.fwd(tape, store, cond);
    let h = tape.concat_last(xe, ce);
    let h = tape.concat_last(h, temb);
    let h = model.head.f1.fwd(tape, store, h);
    let h = tape.gelu(h);
    let h = model.head.f2.fwd(tape, store, h);
    let h = tape.gelu(h);
    model.head.out.fwd(tape, store, h)
}

/// One training sample drawn from an episode. Pixel positions are frozen at
/// the last visible location; the keypoint subset and flow subsampling are
/// redrawn per sample.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub f_t: Vec<(f64, f64)>,
    /// Flattened `[N, 3]` camera-frame initial coordinates.
    pub x0: Vec<f64>,
    pub rho: [f64; 7],
    /// Unnormalized actions `[L][7]` starting at the sampled step.
    pub chunk: Vec<[f64; 7]>,
    /// Complete conditioning flow, one pixel list per subsampled frame.
    pub flow_frames: Vec<Vec<(f64, f64)>>,
    /// Ground-truth remaining flow from the sampled step on.
    pub remaining: Vec<Vec<(f64, f64)>>,
    /// Episode step this sample was drawn at.
    pub t: usize,
    /// Episode frame indices of `flow_frames`.
    pub flow_indices: Vec<usize>,
    /// Keypoint indices into the episode track set.
    pub keypoints: Vec<usize>,
}

/// Per-episode data prepared for policy training.
#[derive(Debug, Clone)]
pub struct EpisodePolicyData {
    pub frozen: KeypointTrackSet,
    /// Keypoint indices eligible for selection.
    pub survivors: Vec<usize>,
    pub actions: Vec<[f64; 7]>,
    pub proprio: Vec<[f64; 7]>,
}

/// Prepare an episode: freeze invisible track segments and pick the eligible
/// keypoints. With a filter config, only moving on-object points survive;
/// without one every track is eligible (the uniform-grid ablation).
///
/// # Errors
///
/// [`PolicyError::Filter`] when filtering leaves no keypoints.
pub fn prepare_episode(
    ep: &Episode,
    filter: Option<&FilterConfig>,
) -> Result<EpisodePolicyData, PolicyError> {
    let survivors = match filter {
        Some(fcfg) => {
            let frame0 = ep.frame0();
            let s = apply_filters(&ep.tracks, &frame0, fcfg);
            if s.is_empty() {
                return Err(PolicyError::Filter(FilterError::NoSurvivors { wanted: 1 }));
            }
            s
        }
        None => (0..ep.tracks.n_pts).collect(),
    };
    Ok(EpisodePolicyData {
        frozen: freeze_invisible_tracks(&ep.tracks),
        survivors,
        actions: ep.actions.clone(),
        proprio: ep.proprio.clone(),
    })
}

fn pixels_at(frozen: &KeypointTrackSet, t: usize, kps: &[usize]) -> Vec<(f64, f64)> {
    kps.iter()
        .map(|&k| {
            let p = frozen.at(t, k);
            (p.u, p.v)
        })
        .collect()
}

fn cap_evenly(len: usize, cap: usize) -> Vec<usize> {
    if len <= cap {
        return (0..len).collect();
    }
    let mut out: Vec<usize> = (0..cap)
        .map(|i| (i as f64 * (len - 1) as f64 / (cap - 1) as f64).round() as usize)
        .collect();
    out.dedup();
    out
}

/// Draw one training sample: a fresh keypoint subset, a fresh endpoint-pinned
/// flow subsampling, a uniform step, and the action chunk from that step.
///
/// # Errors
///
/// Selection or subsampling failures for degenerate episodes.
pub fn draw_train_sample(
    data: &EpisodePolicyData,
    cfg: &PolicyConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainSample, PolicyError> {
    let n_steps = data.frozen.t_len;
    let kps = select_policy_keypoints(&data.survivors, cfg.n_keypoints, rng)?;
    let flow_indices =
        sample_flow_frame_indices(n_steps, cfg.flow_frames.min(n_steps), rng)?;
    let t = rng.random_range(0..n_steps);
    let flow_frames: Vec<Vec<(f64, f64)>> =
        flow_indices.iter().map(|&i| pixels_at(&data.frozen, i, &kps)).collect();
    let f_t = pixels_at(&data.frozen, t, &kps);
    let mut remaining: Vec<Vec<(f64, f64)>> = vec![f_t.clone()];
    for (&idx, frame) in flow_indices.iter().zip(&flow_frames) {
        if idx > t {
            remaining.push(frame.clone());
        }
    }
    let keep = cap_evenly(remaining.len(), cfg.xi_max_frames.max(1));
    let remaining: Vec<Vec<(f64, f64)>> =
        keep.into_iter().map(|i| remaining[i].clone()).collect();
    let mut x0 = Vec::with_capacity(kps.len() * 3);
    for &k in &kps {
        x0.extend_from_slice(&data.frozen.initial_xyz[3 * k..3 * k + 3]);
    }
    let chunk: Vec<[f64; 7]> = (0..cfg.action_len)
        .map(|i| data.actions[(t + i).min(n_steps - 1)])
        .collect();
    Ok(TrainSample {
        f_t,
        x0,
        rho: data.proprio[t],
        chunk,
        flow_frames,
        remaining,
        t,
        flow_indices,
        keypoints: kps,
    })
}

/// Build both training losses on the caller's tape. The action head is
/// conditioned on the target-encoder latent so that encoder learns from the
/// action objective, while the alignment loss sees that latent detached and
/// so trains only the alignment module.
///
/// Returns `(action_loss, align_loss)` nodes, each shaped `[1]`.
///
/// # Errors
///
/// Input validation failures; see [`PolicyError`].
pub fn policy_losses(
    tape: &mut Tape,
    store: &ParamStore,
    model: &PolicyModel,
    stats: &ActionStats,
    batch: &[TrainSample],
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(T, T), PolicyError> {
    if batch.is_empty() {
        return Err(PolicyError::Shape { what: "empty batch".to_string() });
    }
    let cfg = &model.cfg;
    let with_alignment = cfg.variant != PolicyVariant::NoAlignment;
    for s in batch {
        if s.flow_frames.is_empty() {
            return Err(PolicyError::EmptyFlow);
        }
        if with_alignment && s.remaining.is_empty() {
            return Err(PolicyError::EmptyRemainder);
        }
        if s.chunk.len() != cfg.action_len {
            return Err(PolicyError::Shape { what: format!("chunk of {}", s.chunk.len()) });
        }
        check_finite(
            s.f_t
                .iter()
                .chain(s.flow_frames.iter().flatten())
                .chain(s.remaining.iter().flatten())
                .flat_map(|&(u, v)| [u, v])
                .chain(s.x0.iter().copied())
                .chain(s.rho.iter().copied())
                .chain(s.chunk.iter().flatten().copied()),
        )?;
    }
    // One batched pass of the state encoder over every frame the batch needs:
    // the current frame, the conditioning flow, and the remaining flow.
    let mut frames: Vec<(&[(f64, f64)], &[f64])> = Vec::new();
    let mut rows: Vec<(usize, Vec<usize>, Vec<usize>)> = Vec::new();
    for s in batch {
        let cur = frames.len();
        frames.push((s.f_t.as_slice(), s.x0.as_slice()));
        let flow_rows: Vec<usize> = s
            .flow_frames
            .iter()
            .map(|f| {
                frames.push((f.as_slice(), s.x0.as_slice()));
                frames.len() - 1
            })
            .collect();
        let rem_rows: Vec<usize> = if with_alignment {
            s.remaining
                .iter()
                .map(|f| {
                    frames.push((f.as_slice(), s.x0.as_slice()));
                    frames.len() - 1
                })
                .collect()
        } else {
            Vec::new()
        };
        rows.push((cur, flow_rows, rem_rows));
    }
    let encs = state_encode_batch(tape, store, model, &frames);
    let mut conds: Vec<T> = Vec::with_capacity(batch.len());
    let mut align_terms: Vec<T> = Vec::with_capacity(batch.len());
    for (s, (cur, flow_rows, rem_rows)) in batch.iter().zip(&rows) {
        let s_t = tape.gather_rows(encs, std::slice::from_ref(cur));
        let core = if with_alignment {
            let flow_encs = tape.gather_rows(encs, flow_rows);
            let s_tape = s_t;
            let z = psi_forward(tape, store, model, flow_encs, s_tape, &expand_proprio(&s.rho));
            let rem_encs = tape.gather_rows(encs, rem_rows);
            let zhat = xi_forward(tape, store, model, rem_encs);
            let zhat_detached = tape.detach(zhat);
            align_terms.push(tape.mse(zhat_detached, z));
            zhat
        } else {
            let flow_encs = tape.gather_rows(encs, flow_rows);
            mean_rows(tape, flow_encs)
        };
        let rho = tape.constant(expand_proprio(&s.rho).to_vec(), &[1, PROPRIO_DIM]);
        let c = tape.concat_last(core, s_t);
        conds.push(tape.concat_last(c, rho));
    }
    let mut cond = tape.reshape(conds[0], &[1, 1, cfg.cond_dim()]);
    for &c in &conds[1..] {
        let c3 = tape.reshape(c, &[1, 1, cfg.cond_dim()]);
        cond = tape.concat_axis1(cond, c3);
    }
    let cond = tape.reshape(cond, &[batch.len(), cfg.cond_dim()]);
    // Standard noise-prediction objective in normalized action space.
    let cd = cfg.chunk_dim();
    let mut noisy = Vec::with_capacity(batch.len() * cd);
    let mut eps = Vec::with_capacity(batch.len() * cd);
    let mut t_steps = Vec::with_capacity(batch.len());
    for s in batch {
        let t_step = rng.random_range(1..=schedule.n_steps());
        let ab = schedule.alpha_bar[t_step];
        let flat: Vec<f64> =
            s.chunk.iter().flat_map(|a| stats.normalize(a)).collect();
        for x in flat {
            let e = box_muller(rng);
            noisy.push(ab.sqrt() * x + (1.0 - ab).sqrt() * e);
            eps.push(e);
        }
        t_steps.push(t_step);
    }
    let x_noisy = tape.constant(noisy, &[batch.len(), cd]);
    let eps_t = tape.constant(eps, &[batch.len(), cd]);
    let eps_hat = head_forward(tape, store, model, x_noisy, cond, &t_steps);
    let action_loss = tape.mse(eps_hat, eps_t);
    let align_loss = if align_terms.is_empty() {
        tape.zeros(&[1])
    } else {
        let mut total = align_terms[0];
        for &t in &align_terms[1..] {
            total = tape.add(total, t);
        }
        tape.scale(total, 1.0 / align_terms.len() as f64)
    };
    Ok((action_loss, align_loss))
}

/// One optimizer step over a batch; returns `(action_loss, align_loss)`.
///
/// # Errors
///
/// [`PolicyError::NanLoss`] with both loss values on divergence; input
/// validation as in [`policy_losses`].
pub fn policy_train_step(
    store: &mut ParamStore,
    model: &PolicyModel,
    stats: &ActionStats,
    batch: &[TrainSample],
    schedule: &NoiseSchedule,
    opt: &AdamWCfg,
    step_idx: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64), PolicyError> {
    let mut tape = Tape::new();
    let (action_loss, align_loss) =
        policy_losses(&mut tape, store, model, stats, batch, schedule, rng)?;
    let total = tape.add(action_loss, align_loss);
    let (av, gv) = (tape.scalar(action_loss), tape.scalar(align_loss));
    if !av.is_finite() || !gv.is_finite() {
        return Err(PolicyError::NanLoss { step: step_idx, action: av, align: gv });
    }
    let grads = tape.backward(total);
    let pg = tape.collect_param_grads(&grads);
    store.adamw_step(&pg, opt);
    Ok((av, gv))
}

/// Train a policy by drawing fresh samples every step.
///
/// # Errors
///
/// Empty dataset, degenerate episodes, or loss divergence.
pub fn train_policy(
    episodes: &[EpisodePolicyData],
    model: &PolicyModel,
    store: &mut ParamStore,
    stats: &ActionStats,
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<(f64, f64)>, PolicyError> {
    if episodes.is_empty() {
        return Err(PolicyError::Shape { what: "no training episodes".to_string() });
    }
    let schedule = NoiseSchedule::cosine(model.cfg.diffusion_steps);
    let opt = AdamWCfg { lr, ..AdamWCfg::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = Vec::with_capacity(steps);
    for step_idx in 0..steps {
        let picked: Vec<TrainSample> = (0..batch.max(1))
            .map(|_| {
                let ep = &episodes[rng.random_range(0..episodes.len())];
                draw_train_sample(ep, &model.cfg, &mut rng)
            })
            .collect::<Result<_, _>>()?;
        let losses = policy_train_step(
            store, model, stats, &picked, &schedule, &opt, step_idx, &mut rng,
        )?;
        history.push(losses);
    }
    Ok(history)
}

/// Deterministically sample an action chunk for a condition; the predicted
/// clean chunk is clamped to the normalized box at every step, and the final
/// actions are clamped to the workspace.
pub fn action_sample(
    store: &ParamStore,
    model: &PolicyModel,
    stats: &ActionStats,
    ws: &Workspace,
    cond_core: &[f64],
    s_t: &[f64],
    rho: &[f64; 7],
    seed: u64,
    stream: u64,
) -> Vec<[f64; 7]> {
    let cfg = &model.cfg;
    assert_eq!(cond_core.len(), cfg.cond_core_dim(), "condition width");
    let cd = cfg.chunk_dim();
    let schedule = NoiseSchedule::cosine(cfg.diffusion_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut x: Vec<f64> = (0..cd).map(|_| box_muller(&mut rng)).collect();
    let mut cond_vec = Vec::with_capacity(cfg.cond_dim());
    cond_vec.extend_from_slice(cond_core);
    cond_vec.extend_from_slice(s_t);
    cond_vec.extend_from_slice(&expand_proprio(rho));
    for (t_cur, t_next) in ddim_time_pairs(cfg.diffusion_steps, cfg.infer_steps) {
        let mut tape = Tape::new();
        let xt = tape.constant(x.clone(), &[1, cd]);
        let cond = tape.constant(cond_vec.clone(), &[1, cfg.cond_dim()]);
        let eps = head_forward(&mut tape, store, model, xt, cond, &[t_cur]);
        let ev = &tape.val(eps).data;
        let (ab_c, ab_n) = (schedule.alpha_bar[t_cur], schedule.alpha_bar[t_next]);
        for (xi, ei) in x.iter_mut().zip(ev) {
            let x0 = ((*xi - (1.0 - ab_c).sqrt() * ei) / ab_c.sqrt()).clamp(-1.0, 1.0);
            *xi = ab_n.sqrt() * x0 + (1.0 - ab_n).sqrt() * ei;
        }
    }
    (0..cfg.action_len)
        .map(|i| {
            let mut a = [0.0; 7];
            a.copy_from_slice(&x[i * 7..(i + 1) * 7]);
            clamp_action(&stats.denormalize(&a), ws)
        })
        .collect()
}

/// Build the policy's conditioning flow from episode tracks: select keypoints
/// among the survivors, subsample frames with the endpoints pinned, and carry
/// the initial coordinates.
///
/// # Errors
///
/// Selection or subsampling failures.
pub fn policy_flow_from_tracks(
    tracks: &KeypointTrackSet,
    survivors: &[usize],
    n: usize,
    t_frames: usize,
    rng: &mut ChaCha8Rng,
) -> Result<KeypointTrackSet, PolicyError> {
    let kps = select_policy_keypoints(survivors, n, rng)?;
    let idx = sample_flow_frame_indices(tracks.t_len, t_frames.min(tracks.t_len), rng)?;
    let frozen = freeze_invisible_tracks(tracks);
    let mut out = KeypointTrackSet::new(idx.len(), n);
    for (ti, &src_t) in idx.iter().enumerate() {
        for (j, &k) in kps.iter().enumerate() {
            out.set_at(ti, j, frozen.at(src_t, k));
        }
    }
    for (j, &k) in kps.iter().enumerate() {
        out.initial_xyz[3 * j..3 * j + 3]
            .copy_from_slice(&tracks.initial_xyz[3 * k..3 * k + 3]);
    }
    Ok(out)
}

/// Build the policy's conditioning flow from a generated task flow: keep the
/// moving lattice slots and select keypoints among them. Initial coordinates
/// are left zero; rollouts recover them from the scene depth.
///
/// # Errors
///
/// [`PolicyError::EmptyFlow`] for a frameless flow, selection failures when
/// nothing moves.
pub fn policy_flow_from_taskflow(
    flow: &TaskFlow,
    n: usize,
    moving_threshold: f64,
    metric: MovementMetric,
    rng: &mut ChaCha8Rng,
) -> Result<KeypointTrackSet, PolicyError> {
    if flow.t == 0 {
        return Err(PolicyError::EmptyFlow);
    }
    let survivors = moving_filter_flow(flow, moving_threshold, metric);
    let kps = select_policy_keypoints(&survivors, n, rng)?;
    let mut out = KeypointTrackSet::new(flow.t, n);
    for t in 0..flow.t {
        for (j, &slot) in kps.iter().enumerate() {
            let (i, jj) = (slot / flow.w, slot % flow.w);
            out.set_at(
                t,
                j,
                crate::flowcore::Keypoint2D::new(
                    flow.get(0, t, i, jj),
                    flow.get(1, t, i, jj),
                    flow.get(2, t, i, jj) > 0.5,
                ),
            );
        }
    }
    Ok(out)
}

/// Result of one closed-loop episode.
#[derive(Debug, Clone)]
pub struct RolloutOutcome {
    pub success: bool,
    /// The tracker lost every keypoint and the episode was abandoned.
    pub aborted: bool,
    pub cycles: usize,
    pub steps: usize,
    pub actions: Vec<[f64; 7]>,
}

/// Run the policy closed-loop: every cycle re-observes the tracked keypoints,
/// re-encodes the state, re-aligns against the conditioning flow, samples a
/// chunk, and executes its first `exec_horizon` actions.
///
/// # Errors
///
/// [`PolicyError::EmptyFlow`] for a frameless flow, shape mismatches between
/// the flow and the configured keypoint count.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    store: &ParamStore,
    model: &PolicyModel,
    stats: &ActionStats,
    task: Task,
    env_seed: u64,
    flow: &KeypointTrackSet,
    seed: u64,
    max_cycles: usize,
    cfg: &SimConfig,
    cam: &Camera,
) -> Result<RolloutOutcome, PolicyError> {
    let pcfg = &model.cfg;
    if flow.t_len == 0 {
        return Err(PolicyError::EmptyFlow);
    }
    if flow.n_pts != pcfg.n_keypoints {
        return Err(PolicyError::Shape {
            what: format!("flow over {} points, policy expects {}", flow.n_pts, pcfg.n_keypoints),
        });
    }
    let mut state = reset(task.env(), env_seed, cfg);
    state.embodiment = Embodiment::Robot;
    let init = state.clone();
    let frame0 = render_frame(&state, cfg, cam);
    let frozen_flow = freeze_invisible_tracks(flow);
    let pixels0: Vec<(f64, f64)> = (0..flow.n_pts)
        .map(|j| {
            let p = frozen_flow.at(0, j);
            (p.u, p.v)
        })
        .collect();
    let query = resolve_canvas_points(&state, cfg, cam, &frame0, &pixels0);
    let mut x0 = Vec::with_capacity(flow.n_pts * 3);
    for &(u, v) in &pixels0 {
        let (d, _) = frame0.at(u, v);
        let depth = if d > 0.0 { d } else { 3.0 };
        let p = cam.to_camera(&cam.unproject(u, v, depth));
        x0.extend_from_slice(&[p.x, p.y, p.z]);
    }
    // The conditioning flow is fixed for the episode, so encode it once.
    let flow_frame_encs: Vec<f64> = {
        let mut tape = Tape::new();
        let frames: Vec<Vec<(f64, f64)>> =
            (0..frozen_flow.t_len).map(|t| pixels_at(&frozen_flow, t, &all_indices(flow.n_pts))).collect();
        let refs: Vec<(&[(f64, f64)], &[f64])> =
            frames.iter().map(|f| (f.as_slice(), x0.as_slice())).collect();
        let encs = state_encode_batch(&mut tape, store, model, &refs);
        tape.val(encs).data.clone()
    };
    let k_flow = frozen_flow.t_len;
    let sd = pcfg.state_dim;
    let mut last = pixels0.clone();
    let mut outcome = RolloutOutcome {
        success: false,
        aborted: false,
        cycles: 0,
        steps: 0,
        actions: Vec::new(),
    };
    for cycle in 0..max_cycles {
        let obs = observe(&state, cfg, cam, &query);
        let mut any_visible = false;
        for (j, p) in obs.points.iter().enumerate() {
            if p.visible {
                last[j] = (p.u, p.v);
                any_visible = true;
            }
        }
        if !any_visible {
            outcome.aborted = true;
            break;
        }
        let rho = obs.proprio;
        let (cond_core, s_val) = {
            let mut tape = Tape::new();
            let s = state_encode_batch(&mut tape, store, model, &[(last.as_slice(), &x0)]);
            let s_val = tape.val(s).data.clone();
            let encs = tape.constant(flow_frame_encs.clone(), &[k_flow, sd]);
            let core = match pcfg.variant {
                PolicyVariant::NoAlignment => mean_rows(&mut tape, encs),
                _ => psi_forward(&mut tape, store, model, encs, s, &expand_proprio(&rho)),
            };
            (tape.val(core).data.clone(), s_val)
        };
        let chunk = action_sample(
            store,
            model,
            stats,
            &cfg.workspace,
            &cond_core,
            &s_val,
            &rho,
            seed,
            cycle as u64,
        );
        outcome.cycles += 1;
        for a in chunk.iter().take(pcfg.exec_horizon.max(1).min(pcfg.action_len)) {
            state = step(&state, &Action::from_vec7(a), cfg);
            outcome.actions.push(*a);
            outcome.steps += 1;
        }
        if task_success(&init, &state, task, cfg).unwrap_or(false) {
            outcome.success = true;
            break;
        }
    }
    Ok(outcome)
}

fn all_indices(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Persist a policy checkpoint with its config and action statistics.
///
/// # Errors
///
/// Checkpoint serialization failures.
pub fn save_policy(
    path: &Path,
    store: &ParamStore,
    cfg: &PolicyConfig,
    stats: &ActionStats,
    extra: serde_json::Value,
) -> Result<(), PolicyError> {
    let meta = serde_json::json!({
        "kind": "policy",
        "config": cfg,
        "stats": stats,
        "extra": extra,
    });
    save_checkpoint(path, store, &meta)?;
    Ok(())
}

/// Load a policy checkpoint and rebuild its model structure.
///
/// # Errors
///
/// Missing file, corrupt container, or metadata without config and stats.
pub fn load_policy(path: &Path) -> Result<(PolicyModel, ParamStore, ActionStats), PolicyError> {
    let (store, meta) = load_checkpoint(path)?;
    let cfg: PolicyConfig = serde_json::from_value(meta["config"].clone())
        .map_err(|e| PolicyError::Shape { what: format!("bad checkpoint config: {e}") })?;
    let stats: ActionStats = serde_json::from_value(meta["stats"].clone())
        .map_err(|e| PolicyError::Shape { what: format!("bad checkpoint stats: {e}") })?;
    Ok((PolicyModel::for_store(&cfg), store, stats))
}

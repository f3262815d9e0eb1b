//! Task flow generation: a convolutional autoencoder over flow images and a
//! temporal diffusion denoiser over the latent sequence, conditioned on task
//! identity, the initial observation image, and the initial keypoints.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::explore::{track_flow_grid, Episode, ExploreError};
use crate::flowcore::{
    encode_sinusoidal_1d, encode_sinusoidal_2d, pack_rect_flow, subsample_task_flow, FlowError,
    Keypoint2D, RectFlowImage, TaskFlow, CANVAS, FLOW_FRAMES, FLOW_SIDE,
};
use crate::nn::ckpt::{load_checkpoint, save_checkpoint, CkptError};
use crate::nn::layers::{LayerNorm, Linear, Mha};
use crate::nn::optim::{box_muller, AdamWCfg, Init, ParamStore};
use crate::nn::tape::{Tape, T};
use crate::sim::{obs_image, Camera, SimConfig, OBS_IMAGE_SIDE};

/// Latent spatial side: the flow lattice compressed 8x.
pub const LATENT_SIDE: usize = FLOW_SIDE / 8;
/// Tokens per latent frame.
pub const SPATIAL_TOKENS: usize = LATENT_SIDE * LATENT_SIDE;
/// Dimension of the pooled sinusoidal encoding of the initial keypoints.
pub const F0_ENC_DIM: usize = 64;
/// Flow-image slots, also the keypoint count the generator is conditioned on.
pub const FLOW_SLOTS: usize = FLOW_SIDE * FLOW_SIDE;

#[derive(Debug, Error)]
pub enum FlowgenError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("loss became non-finite at step {step}")]
    NanLoss { step: usize },
    #[error("shape mismatch: {what}")]
    Shape { what: String },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Explore(#[from] ExploreError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
}

/// Architecture of the autoencoder and denoiser.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FlowgenConfig {
    /// Latent channels C; latent shape is `[C, 4, 4]` per frame.
    pub latent_channels: usize,
    /// Encoder channel widths for the three stride-2 stages.
    pub ae_channels: [usize; 3],
    /// Denoiser token dimension.
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Diffusion timestep count used in training.
    pub diffusion_steps: usize,
    /// Deterministic sampler steps at inference.
    pub infer_steps: usize,
    /// Size of the task embedding table.
    pub n_tasks: usize,
}

impl Default for FlowgenConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            ae_channels: [12, 24, 48],
            dim: 32,
            blocks: 2,
            heads: 4,
            ff_mult: 2,
            diffusion_steps: 50,
            infer_steps: 16,
            n_tasks: 4,
        }
    }
}

/// Map a flow image into the model's `[-1, 1]` box: pixel coordinates are
/// divided by half the canvas and shifted, visibility maps to plus or minus
/// one.
pub fn normalize_flow_frame(img: &RectFlowImage) -> Vec<f64> {
    let hw = img.h * img.w;
    let mut out = vec![0.0; 3 * hw];
    for k in 0..hw {
        out[k] = img.data[k] / (CANVAS / 2.0) - 1.0;
        out[hw + k] = img.data[hw + k] / (CANVAS / 2.0) - 1.0;
        out[2 * hw + k] = 2.0 * img.data[2 * hw + k] - 1.0;
    }
    out
}

/// Inverse of [`normalize_flow_frame`]; coordinates are clamped to the canvas
/// and visibility to `[0, 1]`.
pub fn denormalize_flow_frame(data: &[f64], h: usize, w: usize) -> RectFlowImage {
    assert_eq!(data.len(), 3 * h * w, "flow frame size");
    let hw = h * w;
    let mut img = RectFlowImage::zeros(h, w);
    for k in 0..hw {
        img.data[k] = ((data[k] + 1.0) * (CANVAS / 2.0)).clamp(0.0, CANVAS);
        img.data[hw + k] = ((data[hw + k] + 1.0) * (CANVAS / 2.0)).clamp(0.0, CANVAS);
        img.data[2 * hw + k] = ((data[2 * hw + k] + 1.0) / 2.0).clamp(0.0, 1.0);
    }
    img
}

fn conv_param<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
) {
    store.add(
        &format!("{name}.w"),
        &[cout, cin, k, k],
        Init::Xavier { fan_in: cin * k * k, fan_out: cout * k * k },
        rng,
    );
    store.add(&format!("{name}.b"), &[cout], Init::Zeros, rng);
}

fn conv_fwd(tape: &mut Tape, store: &ParamStore, name: &str, x: T, stride: usize) -> T {
    let w = tape.param(store, &format!("{name}.w"));
    let b = tape.param(store, &format!("{name}.b"));
    tape.conv2d(x, w, b, stride, 1)
}

/// Create the autoencoder parameters under the `ae.` namespace.
pub fn init_autoencoder<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &FlowgenConfig) {
    let [a0, a1, a2] = cfg.ae_channels;
    let c = cfg.latent_channels;
    conv_param(store, rng, "ae.enc0", 3, a0, 3);
    conv_param(store, rng, "ae.enc1", a0, a1, 3);
    conv_param(store, rng, "ae.enc2", a1, a2, 3);
    conv_param(store, rng, "ae.enc_out", a2, c, 3);
    conv_param(store, rng, "ae.dec_in", c, a2, 3);
    conv_param(store, rng, "ae.dec0", a2, a1, 3);
    conv_param(store, rng, "ae.dec1", a1, a0, 3);
    conv_param(store, rng, "ae.dec2", a0, a0, 3);
    conv_param(store, rng, "ae.dec_out", a0, 3, 3);
}

/// Encoder forward: `[B,3,32,32] -> [B,C,4,4]`.
pub fn ae_encode_t(tape: &mut Tape, store: &ParamStore, _cfg: &FlowgenConfig, x: T) -> T {
    let h = conv_fwd(tape, store, "ae.enc0", x, 2);
    let h = tape.gelu(h);
    let h = conv_fwd(tape, store, "ae.enc1", h, 2);
    let h = tape.gelu(h);
    let h = conv_fwd(tape, store, "ae.enc2", h, 2);
    let h = tape.gelu(h);
    conv_fwd(tape, store, "ae.enc_out", h, 1)
}

/// Decoder forward: `[B,C,4,4] -> [B,3,32,32]`.
pub fn ae_decode_t(tape: &mut Tape, store: &ParamStore, _cfg: &FlowgenConfig, z: T) -> T {
    let h = conv_fwd(tape, store, "ae.dec_in", z, 1);
    let h = tape.gelu(h);
    let h = tape.upsample2x(h);
    let h = conv_fwd(tape, store, "ae.dec0", h, 1);
    let h = tape.gelu(h);
    let h = tape.upsample2x(h);
    let h = conv_fwd(tape, store, "ae.dec1", h, 1);
    let h = tape.gelu(h);
    let h = tape.upsample2x(h);
    let h = conv_fwd(tape, store, "ae.dec2", h, 1);
    let h = tape.gelu(h);
    conv_fwd(tape, store, "ae.dec_out", h, 1)
}

/// Run the encoder as inference over a batch of normalized frames.
pub fn ae_encode(store: &ParamStore, cfg: &FlowgenConfig, frames: &[Vec<f64>]) -> Vec<Vec<f64>> {
    frames
        .iter()
        .map(|f| {
            let mut tape = Tape::new();
            let x = tape.constant(f.clone(), &[1, 3, FLOW_SIDE, FLOW_SIDE]);
            let z = ae_encode_t(&mut tape, store, cfg, x);
            tape.val(z).data.clone()
        })
        .collect()
}

/// Run the decoder as inference over one latent frame `[C,4,4]`.
pub fn ae_decode(store: &ParamStore, cfg: &FlowgenConfig, latent: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(
        latent.to_vec(),
        &[1, cfg.latent_channels, LATENT_SIDE, LATENT_SIDE],
    );
    let y = ae_decode_t(&mut tape, store, cfg, z);
    tape.val(y).data.clone()
}

/// Train the autoencoder on normalized flow frames with AdamW and an MSE
/// reconstruction objective. With `decoder_only`, encoder parameters are
/// frozen and only `ae.dec*` weights move. Returns the store and the mean
/// loss per epoch.
///
/// # Errors
///
/// [`FlowgenError::EmptyDataset`] without frames, [`FlowgenError::NanLoss`]
/// if the objective diverges.
pub fn train_ae(
    frames: &[Vec<f64>],
    cfg: &FlowgenConfig,
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
    decoder_only: bool,
    init_store: Option<ParamStore>,
) -> Result<(ParamStore, Vec<f64>), FlowgenError> {
    if frames.is_empty() {
        return Err(FlowgenError::EmptyDataset);
    }
    for (i, f) in frames.iter().enumerate() {
        if f.len() != 3 * FLOW_SIDE * FLOW_SIDE {
            return Err(FlowgenError::Shape { what: format!("frame {i} has {} values", f.len()) });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = match init_store {
        Some(s) => s,
        None => {
            let mut s = ParamStore::new();
            init_autoencoder(&mut s, &mut rng, cfg);
            s
        }
    };
    let opt = AdamWCfg { lr, ..AdamWCfg::default() };
    let mut history = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..frames.len()).collect();
    for epoch in 0..epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch.max(1)) {
            let mut tape = Tape::new();
            let mut data = Vec::with_capacity(chunk.len() * 3 * FLOW_SIDE * FLOW_SIDE);
            for &i in chunk {
                data.extend_from_slice(&frames[i]);
            }
            let x = tape.constant(data, &[chunk.len(), 3, FLOW_SIDE, FLOW_SIDE]);
            let z = ae_encode_t(&mut tape, &store, cfg, x);
            let y = ae_decode_t(&mut tape, &store, cfg, z);
            let loss = tape.mse(y, x);
            let lv = tape.scalar(loss);
            if !lv.is_finite() {
                return Err(FlowgenError::NanLoss { step: epoch });
            }
            let grads = tape.backward(loss);
            let mut pg = tape.collect_param_grads(&grads);
            if decoder_only {
                pg.retain(|name, _| name.starts_with("ae.dec"));
            }
            store.adamw_step(&pg, &opt);
            epoch_loss += lv;
            batches += 1;
        }
        history.push(epoch_loss / batches as f64);
    }
    Ok((store, history))
}

/// Cosine noise schedule: `alpha_bar[t]` for `t` in `0..=n`, with
/// `alpha_bar[0] = 1` and a strictly decreasing tail.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn cosine(n_steps: usize) -> Self {
        let s = 0.008;
        let f = |t: f64| {
            let x = (t / n_steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0.0);
        let mut alpha_bar: Vec<f64> = (0..=n_steps).map(|t| f(t as f64) / f0).collect();
        // Clamp per-step drops so no single beta exceeds 0.999.
        for t in 1..alpha_bar.len() {
            let min_ratio = 1e-3;
            if alpha_bar[t] < alpha_bar[t - 1] * min_ratio {
                alpha_bar[t] = alpha_bar[t - 1] * min_ratio;
            }
        }
        Self { alpha_bar }
    }

    pub fn n_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }
}

/// Descending `(t_current, t_next)` pairs for the deterministic sampler,
/// covering `n_train` down to zero in `n_infer` strides.
pub fn ddim_time_pairs(n_train: usize, n_infer: usize) -> Vec<(usize, usize)> {
    let mut times: Vec<usize> = (0..=n_infer)
        .map(|i| ((n_infer - i) as f64 * n_train as f64 / n_infer as f64).round() as usize)
        .collect();
    times.dedup();
    times.windows(2).map(|w| (w[0], w[1])).collect()
}

struct DenoiserBlock {
    ln_t: LayerNorm,
    attn_t: Mha,
    ln_s: LayerNorm,
    attn_s: Mha,
    ln_c: LayerNorm,
    attn_c: Mha,
    ln_f: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl DenoiserBlock {
    fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        ff_mult: usize,
    ) -> Self {
        let block = Self {
            ln_t: LayerNorm::init(store, rng, &format!("{name}.ln_t"), dim),
            attn_t: Mha::init(store, rng, &format!("{name}.tattn"), dim, heads),
            ln_s: LayerNorm::init(store, rng, &format!("{name}.ln_s"), dim),
            attn_s: Mha::init(store, rng, &format!("{name}.sattn"), dim, heads),
            ln_c: LayerNorm::init(store, rng, &format!("{name}.ln_c"), dim),
            attn_c: Mha::init(store, rng, &format!("{name}.cattn"), dim, heads),
            ln_f: LayerNorm::init(store, rng, &format!("{name}.ln_f"), dim),
            ff1: Linear::init(store, rng, &format!("{name}.ff1"), dim, dim * ff_mult, true),
            ff2: Linear::init(store, rng, &format!("{name}.ff2"), dim * ff_mult, dim, true),
        };
        // Zero the cross-attention output projection so conditioning is
        // inert until the optimizer moves it.
        store.get_mut(&block.attn_c.wo.w).data.fill(0.0);
        block
    }

    /// `x [T,S,D]`, `ctx [1,K,D]`.
    fn fwd(&self, tape: &mut Tape, store: &ParamStore, x: T, ctx: T) -> T {
        let shape = tape.shape(x).to_vec();
        let (tf, s, d) = (shape[0], shape[1], shape[2]);
        // Temporal attention: each spatial cell attends along time.
        let p = tape.permute(x, &[1, 0, 2]);
        let n = self.ln_t.fwd(tape, store, p);
        let a = self.attn_t.fwd(tape, store, n, n);
        let p = tape.add(p, a);
        let x = tape.permute(p, &[1, 0, 2]);
        // Spatial attention within each frame.
        let n = self.ln_s.fwd(tape, store, x);
        let a = self.attn_s.fwd(tape, store, n, n);
        let x = tape.add(x, a);
        // Cross-attention from every token to the condition tokens.
        let r = tape.reshape(x, &[1, tf * s, d]);
        let n = self.ln_c.fwd(tape, store, r);
        let a = self.attn_c.fwd(tape, store, n, ctx);
        let r = tape.add(r, a);
        let x = tape.reshape(r, &[tf, s, d]);
        // Feed-forward.
        let n = self.ln_f.fwd(tape, store, x);
        let h = self.ff1.fwd(tape, store, n);
        let h = tape.gelu(h);
        let h = self.ff2.fwd(tape, store, h);
        tape.add(x, h)
    }
}

/// The denoiser plus condition encoders. Construction writes parameters into
/// the store; loading a checkpoint rebuilds the same structure and swaps the
/// store underneath.
pub struct FlowgenModel {
    pub cfg: FlowgenConfig,
    dn_in: Linear,
    temb1: Linear,
    temb2: Linear,
    blocks: Vec<DenoiserBlock>,
    dn_ln: LayerNorm,
    dn_out: Linear,
    f0_proj: Linear,
}

impl FlowgenModel {
    /// Create denoiser and condition parameters under the `dn.` and `cond.`
    /// namespaces.
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &FlowgenConfig) -> Self {
        let d = cfg.dim;
        let c = cfg.latent_channels;
        store.add("cond.task", &[cfg.n_tasks, d], Init::Normal(0.02), rng);
        conv_param(store, rng, "cond.img0", 2, 8, 3);
        conv_param(store, rng, "cond.img1", 8, 16, 3);
        conv_param(store, rng, "cond.img2", 16, d, 3);
        let blocks = (0..cfg.blocks)
            .map(|i| {
                DenoiserBlock::init(store, rng, &format!("dn.b{i}"), d, cfg.heads, cfg.ff_mult)
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            dn_in: Linear::init(store, rng, "dn.in", c, d, true),
            temb1: Linear::init(store, rng, "dn.temb1", d, d, true),
            temb2: Linear::init(store, rng, "dn.temb2", d, d, true),
            blocks,
            dn_ln: LayerNorm::init(store, rng, "dn.ln_out", d),
            dn_out: Linear::init(store, rng, "dn.out", d, c, true),
            f0_proj: Linear::init(store, rng, "cond.f0", F0_ENC_DIM, d, true),
        }
    }

    /// Rebuild the layer structure for an existing parameter set.
    pub fn for_store(cfg: &FlowgenConfig) -> Self {
        let mut scratch = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Self::init(&mut scratch, &mut rng, cfg)
    }
}

/// Raw conditioning inputs for one generation or training sample.
#[derive(Debug, Clone)]
pub struct ConditionInputs {
    pub task_id: usize,
    /// Pooled observation image `[2, 32, 32]`.
    pub obs_image: Vec<f64>,
    /// Initial keypoint pixel positions, one per flow slot.
    pub f0: Vec<(f64, f64)>,
}

/// Mean sinusoidal encoding of the initial keypoints.
fn f0_pooled(f0: &[(f64, f64)]) -> Vec<f64> {
    let mut acc = vec![0.0; F0_ENC_DIM];
    for &(u, v) in f0 {
        let e = encode_sinusoidal_2d(u, v, F0_ENC_DIM).expect("dim divisible by four");
        for (a, b) in acc.iter_mut().zip(&e) {
            *a += b;
        }
    }
    let n = f0.len().max(1) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Encode a condition bundle as cross-attention context `[1, K, D]`: one
/// task token, sixteen image patch tokens, one pooled initial-keypoint token.
pub fn condition_tokens(
    tape: &mut Tape,
    store: &ParamStore,
    model: &FlowgenModel,
    cond: &ConditionInputs,
) -> T {
    let d = model.cfg.dim;
    assert_eq!(
        cond.obs_image.len(),
        2 * OBS_IMAGE_SIDE * OBS_IMAGE_SIDE,
        "observation image size"
    );
    let table = tape.param(store, "cond.task");
    let task = tape.gather_rows(table, &[cond.task_id]);
    let task = tape.reshape(task, &[1, 1, d]);
    let img = tape.constant(
        cond.obs_image.clone(),
        &[1, 2, OBS_IMAGE_SIDE, OBS_IMAGE_SIDE],
    );
    let h = conv_fwd(tape, store, "cond.img0", img, 2);
    let h = tape.gelu(h);
    let h = conv_fwd(tape, store, "cond.img1", h, 2);
    let h = tape.gelu(h);
    let h = conv_fwd(tape, store, "cond.img2", h, 2);
    let h = tape.reshape(h, &[1, d, SPATIAL_TOKENS]);
    let patches = tape.permute(h, &[0, 2, 1]);
    let f0 = tape.constant(f0_pooled(&cond.f0), &[1, F0_ENC_DIM]);
    let f0 = model.f0_proj.fwd(tape, store, f0);
    let f0 = tape.reshape(f0, &[1, 1, d]);
    let cat = tape.concat_axis1(task, patches);
    tape.concat_axis1(cat, f0)
}

/// Predict the noise component of a latent sequence `[C, T, 4, 4]` at
/// diffusion time `t_step`.
pub fn denoise(
    tape: &mut Tape,
    store: &ParamStore,
    model: &FlowgenModel,
    z: T,
    t_step: usize,
    ctx: T,
) -> T {
    let cfg = &model.cfg;
    let (c, tf, s) = (cfg.latent_channels, FLOW_FRAMES, SPATIAL_TOKENS);
    assert_eq!(
        tape.shape(z),
        &[c, tf, LATENT_SIDE, LATENT_SIDE],
        "latent shape"
    );
    let r = tape.reshape(z, &[c, tf, s]);
    let tok = tape.permute(r, &[1, 2, 0]);
    let mut x = model.dn_in.fwd(tape, store, tok);
    let temb = encode_sinusoidal_1d(t_step as f64, cfg.dim).expect("even dim");
    let temb = tape.constant(temb, &[1, cfg.dim]);
    let temb = model.temb1.fwd(tape, store, temb);
    let temb = tape.gelu(temb);
    let temb = model.temb2.fwd(tape, store, temb);
    let temb = tape.reshape(temb, &[cfg.dim]);
    x = tape.add_bcast_tail(x, temb);
    for block in &model.blocks {
        x = block.fwd(tape, store, x, ctx);
    }
    let n = model.dn_ln.fwd(tape, store, x);
    let e = model.dn_out.fwd(tape, store, n);
    let back = tape.permute(e, &[2, 0, 1]);
    tape.reshape(back, &[c, tf, LATENT_SIDE, LATENT_SIDE])
}

/// One training sample: a pre-encoded latent sequence and its conditions.
/// Latents come from the frozen encoder as plain values, so no gradient can
/// reach encoder parameters through this path.
#[derive(Debug, Clone)]
pub struct LatentSample {
    /// `[C, T, 4, 4]`.
    pub latent: Vec<f64>,
    pub cond: ConditionInputs,
}

/// Encode a task flow's frames and stack them as `[C, T, 4, 4]`.
pub fn encode_flow_latents(
    store: &ParamStore,
    cfg: &FlowgenConfig,
    flow: &TaskFlow,
) -> Vec<f64> {
    let frames: Vec<Vec<f64>> =
        (0..flow.t).map(|f| normalize_flow_frame(&flow.frame(f))).collect();
    let encoded = ae_encode(store, cfg, &frames);
    let (c, s) = (cfg.latent_channels, SPATIAL_TOKENS);
    let mut out = vec![0.0; c * flow.t * s];
    for (t, frame) in encoded.iter().enumerate() {
        for ch in 0..c {
            for k in 0..s {
                out[(ch * flow.t + t) * s + k] = frame[ch * s + k];
            }
        }
    }
    out
}

/// Noise-prediction loss over a batch, averaged per sample. Timesteps and
/// noise draws come from `rng`; the loss node is returned on the caller's
/// tape.
pub fn diffusion_loss(
    tape: &mut Tape,
    store: &ParamStore,
    model: &FlowgenModel,
    schedule: &NoiseSchedule,
    batch: &[&LatentSample],
    rng: &mut ChaCha8Rng,
) -> T {
    assert!(!batch.is_empty(), "empty diffusion batch");
    let cfg = &model.cfg;
    let (c, tf, s) = (cfg.latent_channels, FLOW_FRAMES, SPATIAL_TOKENS);
    let mut total = tape.zeros(&[1]);
    for sample in batch {
        assert_eq!(sample.latent.len(), c * tf * s, "latent size");
        let t_step = rng.random_range(1..=schedule.n_steps());
        let ab = schedule.alpha_bar[t_step];
        let noise: Vec<f64> = (0..sample.latent.len()).map(|_| box_muller(rng)).collect();
        let noisy: Vec<f64> = sample
            .latent
            .iter()
            .zip(&noise)
            .map(|(z, e)| ab.sqrt() * z + (1.0 - ab).sqrt() * e)
            .collect();
        let zt = tape.constant(noisy, &[c, tf, LATENT_SIDE, LATENT_SIDE]);
        let eps = tape.constant(noise, &[c, tf, LATENT_SIDE, LATENT_SIDE]);
        let ctx = condition_tokens(tape, store, model, &sample.cond);
        let eps_hat = denoise(tape, store, model, zt, t_step, ctx);
        let l = tape.mse(eps_hat, eps);
        let l = tape.reshape(l, &[1]);
        total = tape.add(total, l);
    }
    let total = tape.scale(total, 1.0 / batch.len() as f64);
    tape.reshape(total, &[])
}

/// Train the denoiser and condition encoders on pre-encoded latent samples.
/// Returns per-step losses.
///
/// # Errors
///
/// [`FlowgenError::EmptyDataset`] without samples, [`FlowgenError::NanLoss`]
/// on divergence.
pub fn train_flowgen(
    samples: &[LatentSample],
    model: &FlowgenModel,
    store: &mut ParamStore,
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>, FlowgenError> {
    if samples.is_empty() {
        return Err(FlowgenError::EmptyDataset);
    }
    let schedule = NoiseSchedule::cosine(model.cfg.diffusion_steps);
    let opt = AdamWCfg { lr, ..AdamWCfg::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let picked: Vec<&LatentSample> = (0..batch.max(1))
            .map(|_| &samples[rng.random_range(0..samples.len())])
            .collect();
        let mut tape = Tape::new();
        let loss = diffusion_loss(&mut tape, store, model, &schedule, &picked, &mut rng);
        let lv = tape.scalar(loss);
        if !lv.is_finite() {
            return Err(FlowgenError::NanLoss { step });
        }
        let grads = tape.backward(loss);
        let pg = tape.collect_param_grads(&grads);
        store.adamw_step(&pg, &opt);
        history.push(lv);
    }
    Ok(history)
}

/// Deterministically sample a latent sequence for the given conditions.
pub fn sample_latents(
    store: &ParamStore,
    model: &FlowgenModel,
    cond: &ConditionInputs,
    seed: u64,
) -> Vec<f64> {
    let cfg = &model.cfg;
    let schedule = NoiseSchedule::cosine(cfg.diffusion_steps);
    let n = cfg.latent_channels * FLOW_FRAMES * SPATIAL_TOKENS;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..n).map(|_| box_muller(&mut rng)).collect();
    for (t_cur, t_next) in ddim_time_pairs(cfg.diffusion_steps, cfg.infer_steps) {
        let mut tape = Tape::new();
        let zt = tape.constant(
            x.clone(),
            &[cfg.latent_channels, FLOW_FRAMES, LATENT_SIDE, LATENT_SIDE],
        );
        let ctx = condition_tokens(&mut tape, store, model, cond);
        let eps = denoise(&mut tape, store, model, zt, t_cur, ctx);
        let ev = &tape.val(eps).data;
        let (ab_c, ab_n) = (schedule.alpha_bar[t_cur], schedule.alpha_bar[t_next]);
        for (xi, ei) in x.iter_mut().zip(ev) {
            let x0 = (*xi - (1.0 - ab_c).sqrt() * ei) / ab_c.sqrt();
            *xi = ab_n.sqrt() * x0 + (1.0 - ab_n).sqrt() * ei;
        }
    }
    x
}

/// Generate a task flow for a scene: sample latents, decode each frame, and
/// pin frame zero to the exact initial keypoints.
///
/// # Errors
///
/// [`FlowgenError::Shape`] if the keypoint count does not fill the slot
/// lattice.
pub fn generate_task_flow(
    store: &ParamStore,
    model: &FlowgenModel,
    obs: &[f64],
    f0: &[Keypoint2D],
    task_id: usize,
    seed: u64,
) -> Result<TaskFlow, FlowgenError> {
    if f0.len() != FLOW_SLOTS {
        return Err(FlowgenError::Shape {
            what: format!("{} initial keypoints for {FLOW_SLOTS} slots", f0.len()),
        });
    }
    let cond = ConditionInputs {
        task_id,
        obs_image: obs.to_vec(),
        f0: f0.iter().map(|k| (k.u, k.v)).collect(),
    };
    let latents = sample_latents(store, model, &cond, seed);
    let cfg = &model.cfg;
    let (c, s) = (cfg.latent_channels, SPATIAL_TOKENS);
    let mut flow = TaskFlow::zeros(FLOW_FRAMES, FLOW_SIDE, FLOW_SIDE);
    for t in 0..FLOW_FRAMES {
        let mut frame_latent = vec![0.0; c * s];
        for ch in 0..c {
            for k in 0..s {
                frame_latent[ch * s + k] = latents[(ch * FLOW_FRAMES + t) * s + k];
            }
        }
        let decoded = ae_decode(store, cfg, &frame_latent);
        flow.set_frame(t, &denormalize_flow_frame(&decoded, FLOW_SIDE, FLOW_SIDE));
    }
    flow.set_frame(0, &pack_rect_flow(f0, FLOW_SIDE, FLOW_SIDE)?);
    Ok(flow)
}

/// One flow-generation training sample extracted from a demonstration.
#[derive(Debug, Clone)]
pub struct FlowSample {
    pub flow: TaskFlow,
    pub task_id: usize,
    pub obs_image: Vec<f64>,
    pub f0: Vec<Keypoint2D>,
}

/// Build a flow sample from a demonstration episode: track the slot lattice,
/// subsample to the flow frame count, and pair with the initial observation.
///
/// # Errors
///
/// Tracking or subsampling failures (missing bounding boxes, episodes
/// shorter than the flow frame count).
pub fn flow_sample_from_episode(
    ep: &Episode,
    cfg: &SimConfig,
    cam: &Camera,
    rng: &mut ChaCha8Rng,
) -> Result<FlowSample, FlowgenError> {
    let task = ep.task.ok_or(FlowgenError::Shape {
        what: "episode has no task label".to_string(),
    })?;
    let (tracks, _mps) = track_flow_grid(ep, FLOW_SLOTS, cfg, cam)?;
    let flow = subsample_task_flow(&tracks, FLOW_FRAMES, FLOW_SIDE, FLOW_SIDE, rng)?;
    let f0: Vec<Keypoint2D> = (0..tracks.n_pts).map(|n| tracks.at(0, n)).collect();
    Ok(FlowSample {
        flow,
        task_id: task.id(),
        obs_image: obs_image(&ep.frame0()),
        f0,
    })
}

/// Persist an autoencoder checkpoint.
///
/// # Errors
///
/// Checkpoint serialization failures.
pub fn save_ae(
    path: &Path,
    store: &ParamStore,
    cfg: &FlowgenConfig,
    extra: serde_json::Value,
) -> Result<(), FlowgenError> {
    let meta = serde_json::json!({ "kind": "flow_ae", "config": cfg, "extra": extra });
    save_checkpoint(path, store, &meta)?;
    Ok(())
}

/// Load an autoencoder checkpoint.
///
/// # Errors
///
/// Missing file, corrupt container, or metadata without a config.
pub fn load_ae(path: &Path) -> Result<(ParamStore, FlowgenConfig), FlowgenError> {
    let (store, meta) = load_checkpoint(path)?;
    let cfg: FlowgenConfig = serde_json::from_value(meta["config"].clone())
        .map_err(|e| FlowgenError::Shape { what: format!("bad checkpoint config: {e}") })?;
    Ok((store, cfg))
}

/// Persist a full flow-generation checkpoint (autoencoder + denoiser +
/// condition encoders in one store).
///
/// # Errors
///
/// Checkpoint serialization failures.
pub fn save_flowgen(
    path: &Path,
    store: &ParamStore,
    cfg: &FlowgenConfig,
    extra: serde_json::Value,
) -> Result<(), FlowgenError> {
    let meta = serde_json::json!({ "kind": "flowgen", "config": cfg, "extra": extra });
    save_checkpoint(path, store, &meta)?;
    Ok(())
}

/// Load a flow-generation checkpoint and rebuild the model structure.
///
/// # Errors
///
/// Missing file, corrupt container, or metadata without a config.
pub fn load_flowgen(path: &Path) -> Result<(FlowgenModel, ParamStore), FlowgenError> {
    let (store, meta) = load_checkpoint(path)?;
    let cfg: FlowgenConfig = serde_json::from_value(meta["config"].clone())
        .map_err(|e| FlowgenError::Shape { what: format!("bad checkpoint config: {e}") })?;
    Ok((FlowgenModel::for_store(&cfg), store))
}

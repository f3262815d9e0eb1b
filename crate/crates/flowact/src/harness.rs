//! Experiment harness: one validated configuration drives data generation,
//! training, and evaluation as cacheable pipeline stages, and every artifact
//! is stamped with the configuration hash that produced it.
//!
//! Stages form a linear dependency chain; each stage's cache key mixes its
//! own settings with the keys of the stages it consumes, so editing one knob
//! re-runs exactly the affected suffix of the pipeline. Evaluation pairs
//! methods on identical environment seeds and conditioning sources, and
//! writes a plain-text and a JSON result table plus a line-delimited episode
//! log.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::explore::{
    collect_valid, demo_collect, densify_object_keypoints, explore_cloth, explore_drawer,
    explore_rigid, read_episode, resolve_canvas_points, track_flow_grid, write_episode, Episode,
    ExploreError,
};
use crate::filters::{FilterConfig, FilterError};
use crate::flowcore::{
    sample_multi_object, subsample_task_flow, FlowError, Keypoint2D, KeypointTrackSet, TaskFlow,
    FLOW_FRAMES, FLOW_SIDE,
};
use crate::flowgen::{
    encode_flow_latents, flow_sample_from_episode, generate_task_flow, load_ae, load_flowgen,
    normalize_flow_frame, save_ae, save_flowgen, train_ae, train_flowgen, ConditionInputs,
    FlowSample, FlowgenConfig, FlowgenError, FlowgenModel, LatentSample, FLOW_SLOTS,
};
use crate::heuristic::{heuristic_rollout, FailureKind, HeuristicConfig, HeuristicError};
use crate::nn::ckpt::CkptError;
use crate::nn::{checkpoint_file_hash, ParamStore};
use crate::policy::{
    load_policy, policy_flow_from_taskflow, policy_flow_from_tracks, prepare_episode, rollout,
    save_policy, train_policy, ActionStats, PolicyConfig, PolicyError, PolicyModel, PolicyVariant,
};
use crate::sim::raster::RES;
use crate::sim::world::{reset, Embodiment, EnvKind, Task};
use crate::sim::{
    obs_image, observe, render_frame, Camera, CameraConfig, RenderOut, SimConfig,
};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact for stage {stage}: {path}")]
    MissingArtifact { stage: String, path: String },
    #[error("stage {stage} failed: {what}")]
    Stage { stage: String, what: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Explore(#[from] ExploreError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Flowgen(#[from] FlowgenError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Heuristic(#[from] HeuristicError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
}

impl HarnessError {
    /// Process exit code: 2 for configuration errors, 3 for missing
    /// artifacts, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::MissingArtifact { .. } => 3,
            _ => 1,
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> HarnessError {
    HarnessError::Io { path: path.display().to_string(), source }
}

// ---------------------------------------------------------------------------
// Configuration

/// Step-count training budget for a diffusion model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainBudget {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for TrainBudget {
    fn default() -> Self {
        Self { steps: 3000, lr: 1e-3, batch: 8 }
    }
}

/// Epoch-count training budget for the flow autoencoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeBudget {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for AeBudget {
    fn default() -> Self {
        Self { epochs: 60, lr: 1e-3, batch: 16 }
    }
}

/// Which comparison methods are trained and evaluated beside the full model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub no_alignment: bool,
    pub grid_flow: bool,
    pub heuristic: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self { no_alignment: true, grid_flow: true, heuristic: true }
    }
}

/// The complete experiment description. Everything the pipeline does is a
/// pure function of this structure, so its serialized hash identifies every
/// artifact produced from it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub tasks: Vec<Task>,
    /// Exploration episodes per scene family, for autoencoder training.
    pub explore_per_env: usize,
    /// Robot demonstrations per task, for policy training.
    pub demos_per_task: usize,
    /// Sphere demonstrations per task, for flow-generator training.
    pub flow_demos_per_task: usize,
    /// Held-out sphere demonstrations per task; also the episode count of
    /// every evaluation cell.
    pub eval_episodes: usize,
    /// Speed multiplier of the training demonstrations.
    pub demo_pace: f64,
    /// Speed multiplier of the held-out evaluation demonstrations.
    pub eval_pace: f64,
    /// Control-cycle budget per policy rollout.
    pub max_cycles: usize,
    pub sim: SimConfig,
    /// Keypoint filter for rigid scenes.
    pub filter: FilterConfig,
    /// Keypoint filter for cloth scenes.
    pub cloth_filter: FilterConfig,
    pub flowgen: FlowgenConfig,
    pub policy: PolicyConfig,
    pub ae_train: AeBudget,
    pub flowgen_train: TrainBudget,
    pub policy_train: TrainBudget,
    pub ablations: AblationFlags,
    pub heuristic: HeuristicConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tasks: Task::all().to_vec(),
            explore_per_env: 8,
            demos_per_task: 16,
            flow_demos_per_task: 16,
            eval_episodes: 20,
            demo_pace: 1.0,
            eval_pace: 1.0,
            max_cycles: 60,
            sim: SimConfig::default(),
            filter: FilterConfig::default(),
            cloth_filter: FilterConfig::for_env(EnvKind::Fold),
            flowgen: FlowgenConfig::default(),
            policy: PolicyConfig::default(),
            ae_train: AeBudget::default(),
            flowgen_train: TrainBudget::default(),
            policy_train: TrainBudget::default(),
            ablations: AblationFlags::default(),
            heuristic: HeuristicConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Check every field combination the pipeline depends on.
    ///
    /// # Errors
    ///
    /// [`HarnessError::Config`] naming the offending field.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |what: &str| Err(HarnessError::Config(what.to_string()));
        if self.tasks.is_empty() {
            return bad("tasks must not be empty");
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].contains(t) {
                return bad(&format!("task {t} listed twice"));
            }
        }
        if self.demos_per_task == 0 || self.flow_demos_per_task == 0 {
            return bad("each task needs at least one training demonstration");
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes must be at least 1");
        }
        if !(self.demo_pace > 0.0 && self.demo_pace.is_finite()) {
            return bad("demo_pace must be positive and finite");
        }
        if !(self.eval_pace > 0.0 && self.eval_pace.is_finite()) {
            return bad("eval_pace must be positive and finite");
        }
        if self.max_cycles == 0 {
            return bad("max_cycles must be at least 1");
        }
        for (name, f) in [("filter", &self.filter), ("cloth_filter", &self.cloth_filter)] {
            if !(f.moving_threshold >= 0.0 && f.moving_threshold.is_finite()) {
                return bad(&format!("{name}.moving_threshold must be non-negative"));
            }
            if !(f.segment_area_threshold > 0.0) {
                return bad(&format!("{name}.segment_area_threshold must be positive"));
            }
        }
        let p = &self.policy;
        if p.state_dim % 2 != 0 || (p.state_dim / 2) % 4 != 0 {
            return bad("policy.state_dim must be an even value whose half fits 2D sinusoids");
        }
        if p.heads == 0 || p.state_dim % p.heads != 0 {
            return bad("policy.heads must divide policy.state_dim");
        }
        if p.head_hidden % 2 != 0 {
            return bad("policy.head_hidden must be even");
        }
        if p.n_keypoints == 0 || p.action_len == 0 {
            return bad("policy.n_keypoints and policy.action_len must be positive");
        }
        if p.exec_horizon == 0 || p.exec_horizon > p.action_len {
            return bad("policy.exec_horizon must be in 1..=action_len");
        }
        if p.flow_frames < 2 {
            return bad("policy.flow_frames must be at least 2");
        }
        if p.xi_max_frames == 0 {
            return bad("policy.xi_max_frames must be at least 1");
        }
        if p.diffusion_steps < 2 || p.infer_steps == 0 || p.infer_steps > p.diffusion_steps {
            return bad("policy diffusion steps must satisfy 1 <= infer <= train, train >= 2");
        }
        let g = &self.flowgen;
        if g.dim == 0 || g.heads == 0 || g.dim % g.heads != 0 {
            return bad("flowgen.heads must divide flowgen.dim");
        }
        if g.latent_channels == 0 || g.blocks == 0 {
            return bad("flowgen.latent_channels and flowgen.blocks must be positive");
        }
        if g.diffusion_steps < 2 || g.infer_steps == 0 || g.infer_steps > g.diffusion_steps {
            return bad("flowgen diffusion steps must satisfy 1 <= infer <= train, train >= 2");
        }
        let max_id = self.tasks.iter().map(|t| t.id()).max().unwrap_or(0);
        if g.n_tasks <= max_id {
            return bad("flowgen.n_tasks must exceed the largest task id");
        }
        for (name, lr, count) in [
            ("ae_train", self.ae_train.lr, self.ae_train.epochs.min(self.ae_train.batch)),
            (
                "flowgen_train",
                self.flowgen_train.lr,
                self.flowgen_train.steps.min(self.flowgen_train.batch),
            ),
            (
                "policy_train",
                self.policy_train.lr,
                self.policy_train.steps.min(self.policy_train.batch),
            ),
        ] {
            if !(lr > 0.0 && lr.is_finite()) || count == 0 {
                return bad(&format!("{name} needs a positive learning rate, steps, and batch"));
            }
        }
        let h = &self.heuristic;
        if h.ransac.iterations == 0 || h.ransac.sample_size < 3 {
            return bad("heuristic.ransac needs iterations >= 1 and sample_size >= 3");
        }
        if !(h.ransac.inlier_threshold > 0.0) || !(h.jump_limit > 0.0) {
            return bad("heuristic thresholds must be positive");
        }
        if !(self.sim.grasp_radius > 0.0 && self.sim.max_speed > 0.0) {
            return bad("sim.grasp_radius and sim.max_speed must be positive");
        }
        Ok(())
    }

    /// The keypoint filter for a scene family.
    pub fn filter_for(&self, env: EnvKind) -> &FilterConfig {
        if matches!(env, EnvKind::Cloth | EnvKind::Fold) {
            &self.cloth_filter
        } else {
            &self.filter
        }
    }
}

/// Parse and validate a configuration file.
///
/// # Errors
///
/// [`HarnessError::Config`] for unreadable files, malformed or unknown
/// fields, and invalid values.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let bytes = fs::read(path)
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg: ExperimentConfig = serde_json::from_slice(&bytes)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Content hash of a configuration, stamped into every artifact it produces.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    sha_hex(&serde_json::to_vec(cfg).expect("config always serializes"))
}

fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

// ---------------------------------------------------------------------------
// Stages and cache keys

/// The pipeline's stages in dependency order. Demo generation and filtering
/// are split into a training side and an evaluation side so that changing
/// only evaluation settings leaves every training stage cached.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageId {
    GenData,
    GenDemos,
    GenEvalDemos,
    FilterFlow,
    FilterEval,
    TrainAe,
    TrainFlowgen,
    TrainPolicy(PolicyVariant),
    Eval,
}

fn variant_name(v: PolicyVariant) -> &'static str {
    match v {
        PolicyVariant::Full => "full",
        PolicyVariant::NoAlignment => "no_alignment",
        PolicyVariant::GridFlow => "grid_flow",
    }
}

impl StageId {
    pub fn name(self) -> String {
        match self {
            Self::GenData => "gen-data".to_string(),
            Self::GenDemos => "gen-demos".to_string(),
            Self::GenEvalDemos => "gen-eval-demos".to_string(),
            Self::FilterFlow => "filter-flow".to_string(),
            Self::FilterEval => "filter-eval".to_string(),
            Self::TrainAe => "train-ae".to_string(),
            Self::TrainFlowgen => "train-flowgen".to_string(),
            Self::TrainPolicy(v) => format!("train-policy-{}", variant_name(v).replace('_', "-")),
            Self::Eval => "eval".to_string(),
        }
    }
}

/// The stages a configuration runs, in order.
pub fn pipeline_stages(cfg: &ExperimentConfig) -> Vec<StageId> {
    let mut stages = vec![
        StageId::GenData,
        StageId::GenDemos,
        StageId::GenEvalDemos,
        StageId::FilterFlow,
        StageId::FilterEval,
        StageId::TrainAe,
        StageId::TrainFlowgen,
        StageId::TrainPolicy(PolicyVariant::Full),
    ];
    if cfg.ablations.no_alignment {
        stages.push(StageId::TrainPolicy(PolicyVariant::NoAlignment));
    }
    if cfg.ablations.grid_flow {
        stages.push(StageId::TrainPolicy(PolicyVariant::GridFlow));
    }
    stages.push(StageId::Eval);
    stages
}

/// Cache key of a stage: a hash over the settings it reads and the keys of
/// the stages it consumes, so any upstream change propagates downstream.
pub fn stage_key(cfg: &ExperimentConfig, stage: StageId) -> String {
    let part = |v: serde_json::Value| serde_json::to_string(&v).expect("hash input serializes");
    let own = match stage {
        StageId::GenData => part(serde_json::json!({
            "sim": cfg.sim, "explore_per_env": cfg.explore_per_env, "seed": cfg.seed,
        })),
        StageId::GenDemos => part(serde_json::json!({
            "sim": cfg.sim, "tasks": cfg.tasks, "demos_per_task": cfg.demos_per_task,
            "flow_demos_per_task": cfg.flow_demos_per_task, "demo_pace": cfg.demo_pace,
            "seed": cfg.seed,
        })),
        StageId::GenEvalDemos => part(serde_json::json!({
            "sim": cfg.sim, "tasks": cfg.tasks, "eval_episodes": cfg.eval_episodes,
            "eval_pace": cfg.eval_pace, "seed": cfg.seed,
        })),
        StageId::FilterFlow => format!(
            "{}|{}|{}",
            stage_key(cfg, StageId::GenData),
            stage_key(cfg, StageId::GenDemos),
            part(serde_json::json!({
                "filter": cfg.filter, "cloth_filter": cfg.cloth_filter, "seed": cfg.seed,
            })),
        ),
        StageId::FilterEval => format!(
            "{}|{}",
            stage_key(cfg, StageId::GenEvalDemos),
            part(serde_json::json!({ "filter": cfg.filter, "cloth_filter": cfg.cloth_filter })),
        ),
        StageId::TrainAe => format!(
            "{}|{}",
            stage_key(cfg, StageId::FilterFlow),
            part(serde_json::json!({
                "flowgen": cfg.flowgen, "ae_train": cfg.ae_train, "seed": cfg.seed,
            })),
        ),
        StageId::TrainFlowgen => format!(
            "{}|{}",
            stage_key(cfg, StageId::TrainAe),
            part(serde_json::json!({
                "flowgen": cfg.flowgen, "flowgen_train": cfg.flowgen_train, "seed": cfg.seed,
            })),
        ),
        StageId::TrainPolicy(v) => {
            let upstream = if v == PolicyVariant::GridFlow {
                stage_key(cfg, StageId::GenDemos)
            } else {
                stage_key(cfg, StageId::FilterFlow)
            };
            format!(
                "{upstream}|{}",
                part(serde_json::json!({
                    "policy": cfg.policy, "policy_train": cfg.policy_train,
                    "variant": variant_name(v), "seed": cfg.seed,
                })),
            )
        }
        StageId::Eval => {
            let mut upstream = vec![
                stage_key(cfg, StageId::GenEvalDemos),
                stage_key(cfg, StageId::FilterEval),
                stage_key(cfg, StageId::TrainFlowgen),
            ];
            for m in enabled_methods(cfg) {
                if let Some(v) = m.variant() {
                    upstream.push(stage_key(cfg, StageId::TrainPolicy(v)));
                }
            }
            format!(
                "{}|{}",
                upstream.join("|"),
                part(serde_json::json!({
                    "eval_episodes": cfg.eval_episodes, "max_cycles": cfg.max_cycles,
                    "ablations": cfg.ablations, "heuristic": cfg.heuristic,
                    "filter": cfg.filter, "cloth_filter": cfg.cloth_filter, "seed": cfg.seed,
                })),
            )
        }
    };
    sha_hex(format!("{}\n{own}", stage.name()).as_bytes())
}

// ---------------------------------------------------------------------------
// Artifact layout

/// Paths of every artifact under one output directory.
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn log(&self) -> PathBuf {
        self.root.join("log.jsonl")
    }

    fn marker(&self, stage: StageId) -> PathBuf {
        self.root.join("stages").join(format!("{}.hash", stage.name()))
    }

    fn data_dir(&self, env: EnvKind, i: usize) -> PathBuf {
        self.root.join("data").join(env.to_string()).join(format!("{i:03}"))
    }

    fn demo_dir(&self, set: &str, task: Task, i: usize) -> PathBuf {
        self.root.join("demos").join(set).join(task.to_string()).join(format!("{i:03}"))
    }

    fn filtered_dir(&self, set: &str, task: Task, i: usize) -> PathBuf {
        self.root.join("filtered").join(set).join(task.to_string()).join(format!("{i:03}"))
    }

    fn flow_sample_dir(&self, task: Task, i: usize) -> PathBuf {
        self.root.join("filtered").join("flow").join(task.to_string()).join(format!("{i:03}"))
    }

    fn ae_frames(&self) -> PathBuf {
        self.root.join("filtered").join("ae_frames.f32")
    }

    fn ae_frames_meta(&self) -> PathBuf {
        self.root.join("filtered").join("ae_frames.json")
    }

    pub fn ckpt_ae(&self) -> PathBuf {
        self.root.join("ckpt").join("ae.ckpt")
    }

    pub fn ckpt_flowgen(&self) -> PathBuf {
        self.root.join("ckpt").join("flowgen.ckpt")
    }

    pub fn ckpt_policy(&self, v: PolicyVariant) -> PathBuf {
        self.root.join("ckpt").join(format!("policy_{}.ckpt", variant_name(v)))
    }

    pub fn results_text(&self) -> PathBuf {
        self.root.join("results").join("results.txt")
    }

    pub fn results_json(&self) -> PathBuf {
        self.root.join("results").join("results.json")
    }

    pub fn episode_log(&self) -> PathBuf {
        self.root.join("results").join("episodes.jsonl")
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(path, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn append_line(path: &Path, line: &str) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(path, e))?;
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    writeln!(f, "{line}").map_err(|e| io_err(path, e))
}

fn write_f32(path: &Path, data: &[f64]) -> Result<(), HarnessError> {
    let mut bytes = Vec::with_capacity(4 * data.len());
    for &v in data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_bytes(path, &bytes)
}

fn read_f32(path: &Path) -> Result<Vec<f64>, HarnessError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

fn read_episode_for(dir: &Path, produced_by: &str) -> Result<Episode, HarnessError> {
    if !dir.join("manifest.json").exists() {
        return Err(HarnessError::MissingArtifact {
            stage: produced_by.to_string(),
            path: dir.display().to_string(),
        });
    }
    Ok(read_episode(dir)?)
}

fn require(path: &Path, produced_by: &str) -> Result<(), HarnessError> {
    if path.exists() {
        Ok(())
    } else {
        Err(HarnessError::MissingArtifact {
            stage: produced_by.to_string(),
            path: path.display().to_string(),
        })
    }
}

/// The scene a stored flow sample was observed in, enough to re-render its
/// initial observation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FlowScene {
    pub env: EnvKind,
    pub seed: u64,
    pub embodiment: Embodiment,
}

#[derive(Debug, Serialize, Deserialize)]
struct FlowSampleMeta {
    task_id: usize,
    t: usize,
    h: usize,
    w: usize,
    n_f0: usize,
    #[serde(default)]
    scene: Option<FlowScene>,
}

/// Persist a flow sample as a metadata file plus raw arrays.
///
/// # Errors
///
/// Filesystem failures.
pub fn write_flow_sample(
    dir: &Path,
    s: &FlowSample,
    scene: Option<FlowScene>,
) -> Result<(), HarnessError> {
    let meta = FlowSampleMeta {
        task_id: s.task_id,
        t: s.flow.t,
        h: s.flow.h,
        w: s.flow.w,
        n_f0: s.f0.len(),
        scene,
    };
    write_bytes(&dir.join("meta.json"), &serde_json::to_vec_pretty(&meta)?)?;
    write_f32(&dir.join("flow.f32"), &s.flow.data)?;
    write_f32(&dir.join("obs.f32"), &s.obs_image)?;
    let f0: Vec<f64> = s
        .f0
        .iter()
        .flat_map(|k| [k.u, k.v, if k.visible { 1.0 } else { 0.0 }])
        .collect();
    write_f32(&dir.join("f0.f32"), &f0)
}

/// Load a flow sample written by [`write_flow_sample`]. A missing sample is
/// reported as a missing artifact of the `produced_by` stage.
///
/// # Errors
///
/// Missing or truncated files.
pub fn read_flow_sample(
    dir: &Path,
    produced_by: &str,
) -> Result<(FlowSample, Option<FlowScene>), HarnessError> {
    let meta_path = dir.join("meta.json");
    require(&meta_path, produced_by)?;
    let meta: FlowSampleMeta =
        serde_json::from_slice(&fs::read(&meta_path).map_err(|e| io_err(&meta_path, e))?)?;
    let mut flow = TaskFlow::zeros(meta.t, meta.h, meta.w);
    flow.data = read_f32(&dir.join("flow.f32"))?;
    if flow.data.len() != 3 * meta.t * meta.h * meta.w {
        return Err(HarnessError::Stage {
            stage: produced_by.to_string(),
            what: format!("flow sample {} has a truncated flow array", dir.display()),
        });
    }
    let obs_image = read_f32(&dir.join("obs.f32"))?;
    let f0_flat = read_f32(&dir.join("f0.f32"))?;
    if f0_flat.len() != 3 * meta.n_f0 {
        return Err(HarnessError::Stage {
            stage: produced_by.to_string(),
            what: format!("flow sample {} has a truncated keypoint array", dir.display()),
        });
    }
    let f0 = f0_flat
        .chunks_exact(3)
        .map(|c| Keypoint2D::new(c[0], c[1], c[2] > 0.5))
        .collect();
    Ok((FlowSample { flow, task_id: meta.task_id, obs_image, f0 }, meta.scene))
}

fn stage_outputs(cfg: &ExperimentConfig, lay: &Layout, stage: StageId) -> Vec<PathBuf> {
    let envs = [EnvKind::Rigid, EnvKind::Drawer, EnvKind::Cloth];
    match stage {
        StageId::GenData => envs
            .iter()
            .flat_map(|&e| {
                (0..cfg.explore_per_env).map(move |i| (e, i))
            })
            .map(|(e, i)| lay.data_dir(e, i).join("manifest.json"))
            .collect(),
        StageId::GenDemos => cfg
            .tasks
            .iter()
            .flat_map(|&t| {
                let train =
                    (0..cfg.demos_per_task).map(move |i| lay.demo_dir("train", t, i));
                let flow =
                    (0..cfg.flow_demos_per_task).map(move |i| lay.demo_dir("flow", t, i));
                train.chain(flow)
            })
            .map(|d| d.join("manifest.json"))
            .collect(),
        StageId::GenEvalDemos => cfg
            .tasks
            .iter()
            .flat_map(|&t| (0..cfg.eval_episodes).map(move |i| lay.demo_dir("eval", t, i)))
            .map(|d| d.join("manifest.json"))
            .collect(),
        StageId::FilterFlow => {
            let mut out: Vec<PathBuf> = cfg
                .tasks
                .iter()
                .flat_map(|&t| {
                    let dense = (0..cfg.demos_per_task)
                        .map(move |i| lay.filtered_dir("train", t, i).join("manifest.json"));
                    let flow = (0..cfg.flow_demos_per_task)
                        .map(move |i| lay.flow_sample_dir(t, i).join("meta.json"));
                    dense.chain(flow)
                })
                .collect();
            out.push(lay.ae_frames());
            out.push(lay.ae_frames_meta());
            out
        }
        StageId::FilterEval => cfg
            .tasks
            .iter()
            .flat_map(|&t| {
                (0..cfg.eval_episodes)
                    .map(move |i| lay.filtered_dir("eval", t, i).join("manifest.json"))
            })
            .collect(),
        StageId::TrainAe => vec![lay.ckpt_ae()],
        StageId::TrainFlowgen => vec![lay.ckpt_flowgen()],
        StageId::TrainPolicy(v) => vec![lay.ckpt_policy(v)],
        StageId::Eval => vec![lay.results_text(), lay.results_json(), lay.episode_log()],
    }
}

// ---------------------------------------------------------------------------
// Stage execution

fn log_event(lay: &Layout, value: serde_json::Value) -> Result<(), HarnessError> {
    append_line(&lay.log(), &serde_json::to_string(&value)?)
}

/// Outcome of asking for one stage: either it was run or its cached outputs
/// were still valid for the current configuration.
#[derive(Debug, Clone, Serialize)]
pub struct StageRun {
    pub stage: String,
    pub cached: bool,
}

/// Run one stage, reusing its outputs when the cache marker matches the
/// stage key and every output file exists.
///
/// # Errors
///
/// Configuration errors, missing upstream artifacts (naming the stage that
/// should have produced them), and stage execution failures.
pub fn run_stage(
    cfg: &ExperimentConfig,
    out: &Path,
    stage: StageId,
) -> Result<StageRun, HarnessError> {
    cfg.validate()?;
    let lay = Layout::new(out);
    let key = stage_key(cfg, stage);
    let marker = lay.marker(stage);
    let fresh = fs::read_to_string(&marker).map(|k| k == key).unwrap_or(false);
    if fresh && stage_outputs(cfg, &lay, stage).iter().all(|p| p.exists()) {
        log_event(&lay, serde_json::json!({ "stage": stage.name(), "event": "cached" }))?;
        return Ok(StageRun { stage: stage.name(), cached: true });
    }
    log_event(&lay, serde_json::json!({ "stage": stage.name(), "event": "start" }))?;
    match stage {
        StageId::GenData => exec_gen_data(cfg, &lay)?,
        StageId::GenDemos => exec_gen_demos(cfg, &lay)?,
        StageId::GenEvalDemos => exec_gen_eval_demos(cfg, &lay)?,
        StageId::FilterFlow => exec_filter_flow(cfg, &lay)?,
        StageId::FilterEval => exec_filter_eval(cfg, &lay)?,
        StageId::TrainAe => exec_train_ae(cfg, &lay)?,
        StageId::TrainFlowgen => exec_train_flowgen(cfg, &lay)?,
        StageId::TrainPolicy(v) => exec_train_policy(cfg, &lay, v)?,
        StageId::Eval => {
            run_eval(cfg, out)?;
        }
    }
    write_bytes(&marker, key.as_bytes())?;
    log_event(&lay, serde_json::json!({ "stage": stage.name(), "event": "done" }))?;
    Ok(StageRun { stage: stage.name(), cached: false })
}

fn stage_err(stage: StageId, what: String) -> HarnessError {
    HarnessError::Stage { stage: stage.name(), what }
}

fn exec_gen_data(cfg: &ExperimentConfig, lay: &Layout) -> Result<(), HarnessError> {
    let cam = Camera::from_config(&cfg.sim.camera);
    type Gen = fn(u64, &SimConfig, &Camera) -> Episode;
    let gens: [(EnvKind, Gen); 3] = [
        (EnvKind::Rigid, explore_rigid),
        (EnvKind::Drawer, explore_drawer),
        (EnvKind::Cloth, explore_cloth),
    ];
    for (env, gen) in gens {
        let base = derive_seed(cfg.seed, &format!("gen-data/{env}"));
        let eps = collect_valid(cfg.explore_per_env, base, |s| gen(s, &cfg.sim, &cam));
        if eps.len() < cfg.explore_per_env {
            return Err(stage_err(
                StageId::GenData,
                format!("only {} of {} valid {env} episodes", eps.len(), cfg.explore_per_env),
            ));
        }
        for (i, ep) in eps.iter().enumerate() {
            write_episode(&lay.data_dir(env, i), ep)?;
        }
    }
    Ok(())
}

fn collect_demos(
    cfg: &ExperimentConfig,
    lay: &Layout,
    stage: StageId,
    set: &str,
    embodiment: Embodiment,
    n: usize,
    pace: f64,
) -> Result<(), HarnessError> {
    let cam = Camera::from_config(&cfg.sim.camera);
    for &task in &cfg.tasks {
        let base = derive_seed(cfg.seed, &format!("{}/{set}/{task}", stage.name()));
        let eps = collect_valid(n, base, |s| {
            demo_collect(task, embodiment, s, pace, &cfg.sim, &cam)
        });
        if eps.len() < n {
            return Err(stage_err(
                stage,
                format!("only {} of {n} valid {task} demonstrations", eps.len()),
            ));
        }
        for (i, ep) in eps.iter().enumerate() {
            write_episode(&lay.demo_dir(set, task, i), ep)?;
        }
    }
    Ok(())
}

fn exec_gen_demos(cfg: &ExperimentConfig, lay: &Layout) -> Result<(), HarnessError> {
    collect_demos(
        cfg,
        lay,
        StageId::GenDemos,
        "train",
        Embodiment::Robot,
        cfg.demos_per_task,
        cfg.demo_pace,
    )?;
    collect_demos(
        cfg,
        lay,
        StageId::GenDemos,
        "flow",
        Embodiment::Sphere,
        cfg.flow_demos_per_task,
        cfg.demo_pace,
    )
}

fn exec_gen_eval_demos(cfg: &ExperimentConfig, lay: &Layout) -> Result<(), HarnessError> {
    collect_demos(
        cfg,
        lay,
        StageId::GenEvalDemos,
        "eval",
        Embodiment::Sphere,
        cfg.eval_episodes,
        cfg.eval_pace,
    )
}

fn densify_into(
    cfg: &ExperimentConfig,
    lay: &Layout,
    stage: StageId,
    set: &str,
    upstream: &str,
    n: usize,
) -> Result<(), HarnessError> {
    let cam = Camera::from_config(&cfg.sim.camera);
    for &task in &cfg.tasks {
        for i in 0..n {
            let ep = read_episode_for(&lay.demo_dir(set, task, i), upstream)?;
            let dense = densify_object_keypoints(&ep, &cfg.sim, &cam);
            if !dense.valid {
                return Err(stage_err(
                    stage,
                    format!("densification left no keypoints for {set}/{task}/{i:03}"),
                ));
            }
            write_episode(&lay.filtered_dir(set, task, i), &dense)?;
        }
    }
    Ok(())
}

fn exec_filter_flow(cfg: &ExperimentConfig, lay: &Layout) -> Result<(), HarnessError> {
    let cam = Camera::from_config(&cfg.sim.camera);
    densify_into(cfg, lay, StageId::FilterFlow, "train", "gen-demos", cfg.demos_per_task)?;
    let mut ae_frames: Vec<f64> = Vec::new();
    let mut n_frames = 0usize;
    for &task in &cfg.tasks {
        for i in 0..cfg.flow_demos_per_task {
            let ep = read_episode_for(&lay.demo_dir("flow", task, i), "gen-demos")?;
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("flow-sample/{task}/{i}")));
            let sample = flow_sample_from_episode(&ep, &cfg.sim, &cam, &mut rng)?;
            let scene = FlowScene { env: ep.env, seed: ep.seed, embodiment: ep.embodiment };
            write_flow_sample(&lay.flow_sample_dir(task, i), &sample, Some(scene))?;
            for t in 0..sample.flow.t {
                ae_frames.extend(normalize_flow_frame(&sample.flow.frame(t)));
                n_frames += 1;
            }
        }
    }
    for env in [EnvKind::Rigid, EnvKind::Drawer, EnvKind::Cloth] {
        for i in 0..cfg.explore_per_env {
            let ep = read_episode_for(&lay.data_dir(env, i), "gen-data")?;
            let (tracks, _) = track_flow_grid(&ep, FLOW_SLOTS, &cfg.sim, &cam)?;
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("ae-flow/{env}/{i}")));
            let flow = subsample_task_flow(&tracks, FLOW_FRAMES, FLOW_SIDE, FLOW_SIDE, &mut rng)?;
            for t in 0..flow.t {
                ae_frames.extend(normalize_flow_frame(&flow.frame(t)));
                n_frames += 1;
            }
        }
    }
    write_f32(&lay.ae_frames(), &ae_frames)?;
    write_bytes(
        &lay.ae_frames_meta(),
        &serde_json::to_vec_pretty(&serde_json::json!({ "frames": n_frames }))?,
    )
}

fn exec_filter_eval(cfg: &ExperimentConfig, lay: &Layout) -> Result<(), HarnessError> {
    densify_into(cfg, lay, StageId::FilterEval, "eval", "gen-eval-demos", cfg.eval_episodes)
}

fn exec_train_ae(cfg: &ExperimentConfig, lay: &Layout) -> Result<(), HarnessError> {
    require(&lay.ae_frames(), "filter-flow")?;
    let flat = read_f32(&lay.ae_frames())?;
    let frame_len = 3 * FLOW_SIDE * FLOW_SIDE;
    if flat.is_empty() || flat.len() % frame_len != 0 {
        return Err(stage_err(
            StageId::TrainAe,
            format!("autoencoder corpus holds {} values, not whole frames", flat.len()),
        ));
    }
    let frames: Vec<Vec<f64>> = flat.chunks_exact(frame_len).map(|c| c.to_vec()).collect();
    let (store, losses) = train_ae(
        &frames,
        &cfg.flowgen,
        cfg.ae_train.epochs,
        cfg.ae_train.lr,
        cfg.ae_train.batch,
        derive_seed(cfg.seed, "train-ae"),
        false,
        None,
    )?;
    save_ae(
        &lay.ckpt_ae(),
        &store,
        &cfg.flowgen,
        serde_json::json!({
            "config_hash": config_hash(cfg),
            "frames": frames.len(),
            "loss_history": losses,
        }),
    )?;
    Ok(())
}

fn exec_train_flowgen(cfg: &ExperimentConfig, lay: &Layout) -> Result<(), HarnessError> {
    require(&lay.ckpt_ae(), "train-ae")?;
    let (mut store, fg_cfg) = load_ae(&lay.ckpt_ae())?;
    let mut samples = Vec::new();
    for &task in &cfg.tasks {
        for i in 0..cfg.flow_demos_per_task {
            let (s, _) = read_flow_sample(&lay.flow_sample_dir(task, i), "filter-flow")?;
            let latent = encode_flow_latents(&store, &fg_cfg, &s.flow);
            samples.push(LatentSample {
                latent,
                cond: ConditionInputs {
                    task_id: s.task_id,
                    obs_image: s.obs_image,
                    f0: s.f0.iter().map(|k| (k.u, k.v)).collect(),
                },
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "train-flowgen/init"));
    let model = FlowgenModel::init(&mut store, &mut rng, &fg_cfg);
    let losses = train_flowgen(
        &samples,
        &model,
        &mut store,
        cfg.flowgen_train.steps,
        cfg.flowgen_train.batch,
        cfg.flowgen_train.lr,
        derive_seed(cfg.seed, "train-flowgen"),
    )?;
    save_flowgen(
        &lay.ckpt_flowgen(),
        &store,
        &fg_cfg,
        serde_json::json!({
            "config_hash": config_hash(cfg),
            "samples": samples.len(),
            "loss_history": losses,
        }),
    )?;
    Ok(())
}

fn exec_train_policy(
    cfg: &ExperimentConfig,
    lay: &Layout,
    variant: PolicyVariant,
) -> Result<(), HarnessError> {
    let grid = variant == PolicyVariant::GridFlow;
    let mut episodes = Vec::new();
    for &task in &cfg.tasks {
        for i in 0..cfg.demos_per_task {
            let ep = if grid {
                read_episode_for(&lay.demo_dir("train", task, i), "gen-demos")?
            } else {
                read_episode_for(&lay.filtered_dir("train", task, i), "filter-flow")?
            };
            let filter = if grid { None } else { Some(cfg.filter_for(ep.env)) };
            episodes.push(prepare_episode(&ep, filter)?);
        }
    }
    let stats = ActionStats::from_actions(episodes.iter().flat_map(|e| e.actions.iter()));
    let mut pcfg = cfg.policy.clone();
    pcfg.variant = variant;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        cfg.seed,
        &format!("train-policy/{}/init", variant_name(variant)),
    ));
    let model = PolicyModel::init(&mut store, &mut rng, &pcfg);
    let losses = train_policy(
        &episodes,
        &model,
        &mut store,
        &stats,
        cfg.policy_train.steps,
        cfg.policy_train.batch,
        cfg.policy_train.lr,
        derive_seed(cfg.seed, &format!("train-policy/{}", variant_name(variant))),
    )?;
    let (diff_loss, align_loss): (Vec<f64>, Vec<f64>) = losses.into_iter().unzip();
    save_policy(
        &lay.ckpt_policy(variant),
        &store,
        &pcfg,
        &stats,
        serde_json::json!({
            "config_hash": config_hash(cfg),
            "episodes": episodes.len(),
            "diffusion_loss": diff_loss,
            "alignment_loss": align_loss,
        }),
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation

/// An evaluated method: the full model, one of its ablations, or the
/// learning-free baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Full,
    NoAlignment,
    GridFlow,
    Heuristic,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoAlignment => "no_alignment",
            Self::GridFlow => "grid_flow",
            Self::Heuristic => "heuristic",
        }
    }

    /// The policy variant backing this method, if it is policy-based.
    pub fn variant(self) -> Option<PolicyVariant> {
        match self {
            Self::Full => Some(PolicyVariant::Full),
            Self::NoAlignment => Some(PolicyVariant::NoAlignment),
            Self::GridFlow => Some(PolicyVariant::GridFlow),
            Self::Heuristic => None,
        }
    }
}

/// Where the conditioning flow comes from: a held-out demonstration or the
/// flow generator prompted with the task label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Demo,
    Lang,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Self::Demo => "demo",
            Self::Lang => "lang",
        }
    }
}

/// The methods a configuration evaluates, in table order.
pub fn enabled_methods(cfg: &ExperimentConfig) -> Vec<Method> {
    let mut methods = vec![Method::Full];
    if cfg.ablations.no_alignment {
        methods.push(Method::NoAlignment);
    }
    if cfg.ablations.grid_flow {
        methods.push(Method::GridFlow);
    }
    if cfg.ablations.heuristic {
        methods.push(Method::Heuristic);
    }
    methods
}

/// One evaluated episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub method: Method,
    pub task: Task,
    pub regime: Regime,
    pub episode: usize,
    pub env_seed: u64,
    pub success: bool,
    pub steps: usize,
    pub cycles: usize,
    pub failure: Option<String>,
}

/// One result cell: a method on a task under one conditioning regime.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub task: Task,
    pub regime: Regime,
    pub episodes: usize,
    pub successes: usize,
    pub success_pct: f64,
    pub outcomes: Vec<bool>,
    pub config_hash: String,
    pub checkpoints: BTreeMap<String, String>,
}

/// The full evaluation table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultTable {
    pub config_hash: String,
    pub checkpoints: BTreeMap<String, String>,
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn get(&self, method: Method, task: Task, regime: Regime) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.task == task && r.regime == regime)
    }

    /// Fixed-width plain-text rendering; identical inputs give identical
    /// bytes.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "config {}", self.config_hash);
        for (name, hash) in &self.checkpoints {
            let _ = writeln!(out, "checkpoint {name} {hash}");
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<14} {:<13} {:<7} {:>8} {:>10} {:>9}",
            "method", "task", "regime", "episodes", "successes", "success%"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<14} {:<13} {:<7} {:>8} {:>10} {:>9.1}",
                r.method.name(),
                r.task.to_string(),
                r.regime.name(),
                r.episodes,
                r.successes,
                r.success_pct,
            );
        }
        out
    }
}

/// Exact success percentage for a cell.
pub fn success_pct(successes: usize, episodes: usize) -> f64 {
    assert!(episodes > 0, "a result cell needs at least one episode");
    100.0 * successes as f64 / episodes as f64
}

/// Initial-scene conditions for the flow generator: the pooled observation
/// image and the slot lattice's starting keypoints, built exactly the way
/// training samples build them.
pub struct SceneCondition {
    pub obs_image: Vec<f64>,
    pub f0: Vec<Keypoint2D>,
}

/// Observe a freshly reset scene the way flow-generation training data does.
///
/// # Errors
///
/// [`HarnessError::Flow`] if the scene exposes no object bounding boxes.
pub fn scene_condition(
    sim: &SimConfig,
    cam: &Camera,
    task: Task,
    env_seed: u64,
) -> Result<SceneCondition, HarnessError> {
    let mut state = reset(task.env(), env_seed, sim);
    state.embodiment = Embodiment::Robot;
    let frame0 = render_frame(&state, sim, cam);
    let obs = observe(&state, sim, cam, &[]);
    let boxes: Vec<_> = obs.bboxes.iter().map(|(_, b)| *b).collect();
    let kps = sample_multi_object(&boxes, FLOW_SLOTS)?;
    let uv: Vec<(f64, f64)> = kps.iter().map(|k| (k.u, k.v)).collect();
    let mps = resolve_canvas_points(&state, sim, cam, &frame0, &uv);
    let seen = observe(&state, sim, cam, &mps);
    let f0 = seen
        .points
        .iter()
        .map(|p| Keypoint2D::new(p.u, p.v, p.visible))
        .collect();
    Ok(SceneCondition { obs_image: obs_image(&frame0), f0 })
}

/// Generate a task flow for an evaluation scene from the trained generator.
///
/// # Errors
///
/// [`HarnessError::MissingArtifact`] without a flow-generator checkpoint,
/// generation failures otherwise.
pub fn generate_flow_for_scene(
    cfg: &ExperimentConfig,
    out: &Path,
    task: Task,
    env_seed: u64,
    sample_seed: u64,
) -> Result<TaskFlow, HarnessError> {
    let lay = Layout::new(out);
    require(&lay.ckpt_flowgen(), "train-flowgen")?;
    let (model, store) = load_flowgen(&lay.ckpt_flowgen())?;
    let cam = Camera::from_config(&cfg.sim.camera);
    let scene = scene_condition(&cfg.sim, &cam, task, env_seed)?;
    Ok(generate_task_flow(&store, &model, &scene.obs_image, &scene.f0, task.id(), sample_seed)?)
}

/// Run one evaluation cell's episodes. Environment seeds and conditioning
/// draws depend only on `(task, regime, episode)`, so different methods face
/// identical scenes and identical conditioning sources.
///
/// # Errors
///
/// Missing checkpoints or demonstrations (naming the producing stage),
/// rollout failures, and invalid requests such as a language-conditioned
/// heuristic.
pub fn rollout_episodes(
    cfg: &ExperimentConfig,
    out: &Path,
    method: Method,
    task: Task,
    regime: Regime,
    episodes: usize,
    camera_override: Option<&CameraConfig>,
) -> Result<Vec<EpisodeRecord>, HarnessError> {
    if episodes == 0 {
        return Err(HarnessError::Config("episodes must be at least 1".to_string()));
    }
    if episodes > cfg.eval_episodes {
        return Err(HarnessError::Config(format!(
            "requested {episodes} episodes but only {} held-out demonstrations exist per task",
            cfg.eval_episodes
        )));
    }
    if method == Method::Heuristic && regime == Regime::Lang {
        return Err(HarnessError::Config(
            "the heuristic baseline replays demonstration flow and has no language regime"
                .to_string(),
        ));
    }
    let lay = Layout::new(out);
    let cam = Camera::from_config(camera_override.unwrap_or(&cfg.sim.camera));
    let pair_seed =
        |i: usize| derive_seed(cfg.seed, &format!("eval/{task}/{}/{i}", regime.name()));
    let mut records = Vec::with_capacity(episodes);
    if method == Method::Heuristic {
        for i in 0..episodes {
            let dense = read_episode_for(&lay.filtered_dir("eval", task, i), "filter-eval")?;
            let out_h = heuristic_rollout(&dense, &cfg.heuristic, &cfg.sim, &cam, pair_seed(i))?;
            let failure = out_h.failure.map(|f| match f {
                FailureKind::Estimation { step } => format!("estimation@{step}"),
                FailureKind::Jump { step } => format!("jump@{step}"),
            });
            records.push(EpisodeRecord {
                method,
                task,
                regime,
                episode: i,
                env_seed: dense.seed,
                success: out_h.success,
                steps: out_h.actions.len(),
                cycles: 0,
                failure,
            });
        }
        return Ok(records);
    }
    let variant = method.variant().expect("non-heuristic methods are policy-backed");
    let policy_path = lay.ckpt_policy(variant);
    require(&policy_path, &StageId::TrainPolicy(variant).name())?;
    let (model, store, stats) = load_policy(&policy_path)?;
    let flowgen = if regime == Regime::Lang {
        require(&lay.ckpt_flowgen(), "train-flowgen")?;
        Some(load_flowgen(&lay.ckpt_flowgen())?)
    } else {
        None
    };
    for i in 0..episodes {
        let raw = read_episode_for(&lay.demo_dir("eval", task, i), "gen-eval-demos")?;
        let env_seed = raw.seed;
        let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(i));
        let n = model.cfg.n_keypoints;
        let t_frames = model.cfg.flow_frames;
        let flow = match regime {
            Regime::Demo => {
                if method == Method::GridFlow {
                    let all: Vec<usize> = (0..raw.tracks.n_pts).collect();
                    policy_flow_from_tracks(&raw.tracks, &all, n, t_frames, &mut rng)?
                } else {
                    let dense =
                        read_episode_for(&lay.filtered_dir("eval", task, i), "filter-eval")?;
                    let data = prepare_episode(&dense, Some(cfg.filter_for(dense.env)))?;
                    policy_flow_from_tracks(&dense.tracks, &data.survivors, n, t_frames, &mut rng)?
                }
            }
            Regime::Lang => {
                let (fg_model, fg_store) =
                    flowgen.as_ref().expect("language regime loads the flow generator");
                let scene = scene_condition(&cfg.sim, &cam, task, env_seed)?;
                let task_flow = generate_task_flow(
                    fg_store,
                    fg_model,
                    &scene.obs_image,
                    &scene.f0,
                    task.id(),
                    derive_seed(cfg.seed, &format!("gen-flow/{task}/{i}")),
                )?;
                let fcfg = cfg.filter_for(task.env());
                policy_flow_from_taskflow(
                    &task_flow,
                    n,
                    fcfg.moving_threshold,
                    fcfg.metric,
                    &mut rng,
                )?
            }
        };
        let out_r = rollout(
            &store,
            &model,
            &stats,
            task,
            env_seed,
            &flow,
            pair_seed(i),
            cfg.max_cycles,
            &cfg.sim,
            &cam,
        )?;
        records.push(EpisodeRecord {
            method,
            task,
            regime,
            episode: i,
            env_seed,
            success: out_r.success,
            steps: out_r.steps,
            cycles: out_r.cycles,
            failure: out_r.aborted.then(|| "tracking_lost".to_string()),
        });
    }
    Ok(records)
}

/// Evaluate every enabled method on every task under both conditioning
/// regimes, writing the result table (text and JSON) and the episode log.
///
/// # Errors
///
/// Missing artifacts name the stage that should have produced them; rollout
/// and serialization failures otherwise.
pub fn run_eval(cfg: &ExperimentConfig, out: &Path) -> Result<ResultTable, HarnessError> {
    cfg.validate()?;
    let lay = Layout::new(out);
    let methods = enabled_methods(cfg);
    let mut checkpoints = BTreeMap::new();
    for m in &methods {
        if let Some(v) = m.variant() {
            let p = lay.ckpt_policy(v);
            require(&p, &StageId::TrainPolicy(v).name())?;
            checkpoints.insert(format!("policy_{}", variant_name(v)), checkpoint_file_hash(&p)?);
        }
    }
    require(&lay.ckpt_flowgen(), "train-flowgen")?;
    checkpoints.insert("flowgen".to_string(), checkpoint_file_hash(&lay.ckpt_flowgen())?);
    let hash = config_hash(cfg);
    let mut rows = Vec::new();
    let mut all_records = Vec::new();
    for &method in &methods {
        for &task in &cfg.tasks {
            for regime in [Regime::Demo, Regime::Lang] {
                if method == Method::Heuristic && regime == Regime::Lang {
                    continue;
                }
                let records =
                    rollout_episodes(cfg, out, method, task, regime, cfg.eval_episodes, None)?;
                let successes = records.iter().filter(|r| r.success).count();
                let mut row_ckpts = BTreeMap::new();
                if let Some(v) = method.variant() {
                    let name = format!("policy_{}", variant_name(v));
                    row_ckpts.insert(name.clone(), checkpoints[&name].clone());
                    if regime == Regime::Lang {
                        row_ckpts.insert("flowgen".to_string(), checkpoints["flowgen"].clone());
                    }
                }
                rows.push(ResultRow {
                    method,
                    task,
                    regime,
                    episodes: records.len(),
                    successes,
                    success_pct: success_pct(successes, records.len()),
                    outcomes: records.iter().map(|r| r.success).collect(),
                    config_hash: hash.clone(),
                    checkpoints: row_ckpts,
                });
                all_records.extend(records);
            }
        }
    }
    let mut episode_lines = String::new();
    for r in &all_records {
        episode_lines.push_str(&serde_json::to_string(r)?);
        episode_lines.push('\n');
    }
    write_bytes(&lay.episode_log(), episode_lines.as_bytes())?;
    let table = ResultTable { config_hash: hash, checkpoints, rows };
    let mut json = serde_json::to_vec_pretty(&table)?;
    json.push(b'\n');
    write_bytes(&lay.results_json(), &json)?;
    write_bytes(&lay.results_text(), table.render_text().as_bytes())?;
    Ok(table)
}

/// Read a previously written result table.
///
/// # Errors
///
/// [`HarnessError::MissingArtifact`] if evaluation has not run.
pub fn read_result_table(out: &Path) -> Result<ResultTable, HarnessError> {
    let lay = Layout::new(out);
    require(&lay.results_json(), "eval")?;
    let bytes = fs::read(lay.results_json()).map_err(|e| io_err(&lay.results_json(), e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

// ---------------------------------------------------------------------------
// Pipeline

/// Outcome of a full pipeline invocation.
#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport {
    pub config_hash: String,
    pub stages: Vec<StageRun>,
}

/// Run every stage in order, skipping the ones whose cached outputs are
/// still valid. A failing stage leaves earlier stages' markers in place, so
/// a re-run resumes where it stopped.
///
/// # Errors
///
/// The first failing stage's error.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<PipelineReport, HarnessError> {
    cfg.validate()?;
    let lay = Layout::new(out);
    let doc = serde_json::json!({ "hash": config_hash(cfg), "config": cfg });
    write_bytes(&lay.config(), &serde_json::to_vec_pretty(&doc)?)?;
    let mut stages = Vec::new();
    for stage in pipeline_stages(cfg) {
        stages.push(run_stage(cfg, out, stage)?);
    }
    Ok(PipelineReport { config_hash: config_hash(cfg), stages })
}

// ---------------------------------------------------------------------------
// Flow overlays

/// Color of trajectory dots at frame `t` of `t_len`: a fixed blue-to-red
/// gradient, so earlier motion is cool and later motion warm.
pub fn time_color(t: usize, t_len: usize) -> [u8; 3] {
    let a = if t_len <= 1 { 1.0 } else { t as f64 / (t_len - 1) as f64 };
    [(255.0 * a).round() as u8, 64, (255.0 * (1.0 - a)).round() as u8]
}

/// Draw keypoint trajectories over an initial observation: the depth image
/// as a gray backdrop and one dot per visible keypoint per frame, colored by
/// [`time_color`] and centered on the rounded `(u, v)` position.
pub fn flow_overlay_image(frame0: &RenderOut, flow: &KeypointTrackSet) -> image::RgbImage {
    let side = RES as u32;
    let mut img = image::RgbImage::new(side, side);
    for i in 0..RES {
        for j in 0..RES {
            let d = frame0.depth[i * RES + j];
            let shade = if d > 0.0 {
                (235.0 - 160.0 * ((d - 0.8) / 1.4).clamp(0.0, 1.0)) as u8
            } else {
                18
            };
            img.put_pixel(j as u32, i as u32, image::Rgb([shade, shade, shade]));
        }
    }
    for t in 0..flow.t_len {
        let color = image::Rgb(time_color(t, flow.t_len));
        for k in 0..flow.n_pts {
            let p = flow.at(t, k);
            if !p.visible {
                continue;
            }
            let (cx, cy) = (p.u.round() as i64, p.v.round() as i64);
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let (x, y) = (cx + dx, cy + dy);
                    if x >= 0 && y >= 0 && x < side as i64 && y < side as i64 {
                        img.put_pixel(x as u32, y as u32, color);
                    }
                }
            }
        }
    }
    img
}

/// Render [`flow_overlay_image`] to a PNG file.
///
/// # Errors
///
/// Filesystem and encoding failures.
pub fn render_flow_overlay(
    frame0: &RenderOut,
    flow: &KeypointTrackSet,
    path: &Path,
) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(path, e))?;
    }
    let img = flow_overlay_image(frame0, flow);
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| HarnessError::Stage {
        stage: "render".to_string(),
        what: format!("cannot write {}: {e}", path.display()),
    })
}

/// View a task flow's slot lattice as a keypoint track set, for overlays.
pub fn taskflow_tracks(flow: &TaskFlow) -> KeypointTrackSet {
    let mut out = KeypointTrackSet::new(flow.t, flow.h * flow.w);
    for t in 0..flow.t {
        for i in 0..flow.h {
            for j in 0..flow.w {
                out.set_at(
                    t,
                    i * flow.w + j,
                    Keypoint2D::new(
                        flow.get(0, t, i, j),
                        flow.get(1, t, i, j),
                        flow.get(2, t, i, j) > 0.5,
                    ),
                );
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;
    use tempfile::tempdir;

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.tasks = vec![Task::Pickplace];
        cfg.explore_per_env = 1;
        cfg.demos_per_task = 1;
        cfg.flow_demos_per_task = 1;
        cfg.eval_episodes = 1;
        cfg.max_cycles = 2;
        cfg.policy = PolicyConfig {
            n_keypoints: 8,
            state_dim: 8,
            z_dim: 8,
            state_layers: 1,
            xi_layers: 1,
            psi_layers: 1,
            heads: 2,
            ff_mult: 1,
            head_hidden: 16,
            action_len: 4,
            diffusion_steps: 8,
            infer_steps: 2,
            flow_frames: 4,
            xi_max_frames: 4,
            exec_horizon: 4,
            variant: PolicyVariant::Full,
        };
        cfg.flowgen = FlowgenConfig {
            latent_channels: 2,
            ae_channels: [4, 6, 8],
            dim: 8,
            blocks: 1,
            heads: 2,
            ff_mult: 1,
            diffusion_steps: 8,
            infer_steps: 2,
            n_tasks: 4,
        };
        cfg.ae_train = AeBudget { epochs: 1, lr: 1e-3, batch: 8 };
        cfg.flowgen_train = TrainBudget { steps: 2, lr: 1e-3, batch: 2 };
        cfg.policy_train = TrainBudget { steps: 2, lr: 1e-3, batch: 2 };
        cfg.ablations = AblationFlags { no_alignment: false, grid_flow: false, heuristic: true };
        cfg
    }

    #[test]
    fn config_roundtrips_and_hashes_stably() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(config_hash(&cfg), config_hash(&back));
        let mut other = cfg.clone();
        other.seed = 7;
        assert_ne!(config_hash(&cfg), config_hash(&other));
    }

    #[test]
    fn unknown_and_invalid_config_fields_are_rejected() {
        let err = serde_json::from_str::<ExperimentConfig>(r#"{"sede": 3}"#);
        assert!(err.is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.eval_episodes = 0;
        let e = cfg.validate().unwrap_err();
        assert_eq!(e.exit_code(), 2);
        cfg = ExperimentConfig::default();
        cfg.tasks.clear();
        assert!(cfg.validate().is_err());
        cfg = ExperimentConfig::default();
        cfg.demo_pace = 0.0;
        assert!(cfg.validate().is_err());
        let missing = HarnessError::MissingArtifact {
            stage: "train-ae".to_string(),
            path: "x".to_string(),
        };
        assert_eq!(missing.exit_code(), 3);
        let stage = HarnessError::Stage { stage: "eval".to_string(), what: "x".to_string() };
        assert_eq!(stage.exit_code(), 1);
    }

    #[test]
    fn bad_config_files_are_config_errors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        let e = load_config(&path).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        fs::write(&path, b"{ not json").unwrap();
        let e = load_config(&path).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        fs::write(&path, serde_json::to_vec(&ExperimentConfig::default()).unwrap()).unwrap();
        assert!(load_config(&path).is_ok());
    }

    #[test]
    fn filter_changes_invalidate_filtering_and_downstream_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.filter.moving_threshold = 25.0;
        let same = [
            StageId::GenData,
            StageId::GenDemos,
            StageId::GenEvalDemos,
            StageId::TrainPolicy(PolicyVariant::GridFlow),
        ];
        for s in same {
            assert_eq!(stage_key(&a, s), stage_key(&b, s), "{} should keep its key", s.name());
        }
        let changed = [
            StageId::FilterFlow,
            StageId::FilterEval,
            StageId::TrainAe,
            StageId::TrainFlowgen,
            StageId::TrainPolicy(PolicyVariant::Full),
            StageId::TrainPolicy(PolicyVariant::NoAlignment),
            StageId::Eval,
        ];
        for s in changed {
            assert_ne!(stage_key(&a, s), stage_key(&b, s), "{} should change its key", s.name());
        }
    }

    #[test]
    fn training_changes_leave_upstream_stages_cached() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.policy_train.steps += 1;
        for s in [
            StageId::GenData,
            StageId::GenDemos,
            StageId::GenEvalDemos,
            StageId::FilterFlow,
            StageId::FilterEval,
            StageId::TrainAe,
            StageId::TrainFlowgen,
        ] {
            assert_eq!(stage_key(&a, s), stage_key(&b, s));
        }
        assert_ne!(
            stage_key(&a, StageId::TrainPolicy(PolicyVariant::Full)),
            stage_key(&b, StageId::TrainPolicy(PolicyVariant::Full))
        );
        assert_ne!(stage_key(&a, StageId::Eval), stage_key(&b, StageId::Eval));
        let mut c = a.clone();
        c.eval_pace = 2.0;
        for s in [
            StageId::GenData,
            StageId::GenDemos,
            StageId::FilterFlow,
            StageId::TrainAe,
            StageId::TrainFlowgen,
            StageId::TrainPolicy(PolicyVariant::Full),
        ] {
            assert_eq!(stage_key(&a, s), stage_key(&c, s));
        }
        assert_ne!(stage_key(&a, StageId::GenEvalDemos), stage_key(&c, StageId::GenEvalDemos));
        assert_ne!(stage_key(&a, StageId::FilterEval), stage_key(&c, StageId::FilterEval));
        assert_ne!(stage_key(&a, StageId::Eval), stage_key(&c, StageId::Eval));
    }

    #[test]
    fn success_percentages_are_exact_fractions() {
        assert_eq!(success_pct(17, 20), 85.0);
        assert_eq!(success_pct(0, 20), 0.0);
        assert_eq!(success_pct(20, 20), 100.0);
        assert!((success_pct(1, 3) - 100.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn result_tables_render_deterministically_and_roundtrip() {
        let row = ResultRow {
            method: Method::Full,
            task: Task::Pickplace,
            regime: Regime::Demo,
            episodes: 3,
            successes: 1,
            success_pct: success_pct(1, 3),
            outcomes: vec![true, false, false],
            config_hash: "abc".to_string(),
            checkpoints: BTreeMap::from([("policy_full".to_string(), "def".to_string())]),
        };
        let table = ResultTable {
            config_hash: "abc".to_string(),
            checkpoints: BTreeMap::from([("policy_full".to_string(), "def".to_string())]),
            rows: vec![row],
        };
        let text = table.render_text();
        assert_eq!(text, table.render_text());
        assert!(text.contains("config abc"));
        assert!(text.contains("checkpoint policy_full def"));
        assert!(text.contains("33.3"));
        let json = serde_json::to_string(&table).unwrap();
        let back: ResultTable = serde_json::from_str(&json).unwrap();
        assert_eq!(back.rows[0].successes, 1);
        assert_eq!(back.rows[0].checkpoints["policy_full"], "def");
        assert!(back.get(Method::Full, Task::Pickplace, Regime::Demo).is_some());
        assert!(back.get(Method::Heuristic, Task::Pickplace, Regime::Demo).is_none());
    }

    fn flat_frame() -> RenderOut {
        RenderOut { depth: vec![0.0; RES * RES], seg: vec![0; RES * RES] }
    }

    #[test]
    fn overlay_dots_land_on_rounded_positions() {
        let mut flow = KeypointTrackSet::new(3, 1);
        flow.set_at(0, 0, Keypoint2D::new(40.2, 60.7, true));
        flow.set_at(1, 0, Keypoint2D::new(80.5, 60.0, true));
        flow.set_at(2, 0, Keypoint2D::new(120.0, 61.4, false));
        let img = flow_overlay_image(&flat_frame(), &flow);
        assert_eq!(img.get_pixel(40, 61).0, time_color(0, 3));
        assert_eq!(img.get_pixel(81, 60).0, time_color(1, 3));
        let bg = img.get_pixel(0, 0).0;
        assert_eq!(img.get_pixel(120, 61).0, bg, "invisible points are not drawn");
    }

    #[test]
    fn static_flow_renders_single_color_dots() {
        let t_len = 5;
        let mut flow = KeypointTrackSet::new(t_len, 2);
        for t in 0..t_len {
            flow.set_at(t, 0, Keypoint2D::new(50.0, 50.0, true));
            flow.set_at(t, 1, Keypoint2D::new(200.0, 130.0, true));
        }
        let img = flow_overlay_image(&flat_frame(), &flow);
        let last = time_color(t_len - 1, t_len);
        assert_eq!(img.get_pixel(50, 50).0, last);
        assert_eq!(img.get_pixel(200, 130).0, last);
        let mut a = Vec::new();
        img.write_to(&mut Cursor::new(&mut a), image::ImageFormat::Png).unwrap();
        let img2 = flow_overlay_image(&flat_frame(), &flow);
        let mut b = Vec::new();
        img2.write_to(&mut Cursor::new(&mut b), image::ImageFormat::Png).unwrap();
        assert_eq!(a, b, "overlay rendering is deterministic");
    }

    #[test]
    fn missing_upstream_artifacts_name_their_stage() {
        let dir = tempdir().unwrap();
        let cfg = tiny_config();
        let err = run_stage(&cfg, dir.path(), StageId::FilterFlow).unwrap_err();
        match err {
            HarnessError::MissingArtifact { stage, .. } => assert_eq!(stage, "gen-demos"),
            other => panic!("expected a missing artifact, got {other}"),
        }
        let err = run_eval(&cfg, dir.path()).unwrap_err();
        match err {
            HarnessError::MissingArtifact { stage, .. } => {
                assert_eq!(stage, "train-policy-full");
            }
            other => panic!("expected a missing artifact, got {other}"),
        }
    }

    #[test]
    fn micro_pipeline_runs_caches_and_invalidates() {
        let dir = tempdir().unwrap();
        let cfg = tiny_config();
        let report = run_pipeline(&cfg, dir.path()).unwrap();
        assert!(report.stages.iter().all(|s| !s.cached), "first run executes every stage");
        let lay = Layout::new(dir.path());
        let table = read_result_table(dir.path()).unwrap();
        assert_eq!(table.config_hash, config_hash(&cfg));
        assert_eq!(table.rows.len(), 3, "full demo, full lang, heuristic demo");
        for row in &table.rows {
            assert_eq!(row.episodes, 1);
            assert_eq!(row.outcomes.len(), 1);
            assert!(row.success_pct == 0.0 || row.success_pct == 100.0);
            assert_eq!(row.config_hash, table.config_hash);
        }
        assert!(table.get(Method::Full, Task::Pickplace, Regime::Demo).is_some());
        assert!(table.get(Method::Full, Task::Pickplace, Regime::Lang).is_some());
        assert!(table.get(Method::Heuristic, Task::Pickplace, Regime::Demo).is_some());
        let text_before = fs::read(lay.results_text()).unwrap();
        let episodes_log = fs::read_to_string(lay.episode_log()).unwrap();
        assert_eq!(episodes_log.lines().count(), 3);
        for line in episodes_log.lines() {
            let rec: EpisodeRecord = serde_json::from_str(line).unwrap();
            assert_eq!(rec.task, Task::Pickplace);
        }

        let report2 = run_pipeline(&cfg, dir.path()).unwrap();
        assert!(report2.stages.iter().all(|s| s.cached), "unchanged config reuses every stage");
        assert_eq!(fs::read(lay.results_text()).unwrap(), text_before);

        let mut cfg2 = cfg.clone();
        cfg2.filter.moving_threshold = 18.0;
        let report3 = run_pipeline(&cfg2, dir.path()).unwrap();
        let cached: BTreeMap<&str, bool> =
            report3.stages.iter().map(|s| (s.stage.as_str(), s.cached)).collect();
        assert!(cached["gen-data"] && cached["gen-demos"] && cached["gen-eval-demos"]);
        assert!(!cached["filter-flow"] && !cached["filter-eval"]);
        assert!(!cached["train-ae"] && !cached["train-flowgen"]);
        assert!(!cached["train-policy-full"] && !cached["eval"]);
    }
}

//! Command line driver for the flow-conditioned manipulation pipeline.
//!
//! Every subcommand reads one experiment configuration (a JSON file, or the
//! built-in defaults), works under one output directory, and reuses cached
//! stage outputs when the relevant configuration is unchanged. Exit codes:
//! 2 for configuration errors, 3 for missing artifacts, 1 for runtime
//! failures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flowact::explore::read_episode;
use flowact::harness::{
    generate_flow_for_scene, load_config, read_flow_sample, render_flow_overlay, rollout_episodes,
    run_eval, run_pipeline, run_stage, scene_condition, success_pct, taskflow_tracks,
    write_flow_sample, ExperimentConfig, FlowScene, HarnessError, Method, Regime, StageId,
    StageRun,
};
use flowact::flowgen::FlowSample;
use flowact::policy::PolicyVariant;
use flowact::sim::{
    render_frame, reset, Camera, CameraConfig, Embodiment, RenderOut, SimConfig, Task,
};

#[derive(Parser)]
#[command(name = "flowact", version, about = "Flow-conditioned manipulation pipeline")]
struct Cli {
    /// Experiment configuration file (JSON); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding all pipeline artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Override the configuration's base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate exploration episodes for autoencoder training.
    GenData,
    /// Collect training demonstrations and held-out evaluation demonstrations.
    GenDemos,
    /// Filter demonstrations into policy training data and the flow corpus.
    FilterFlow,
    /// Train the flow autoencoder.
    TrainAe,
    /// Train the flow generator on the frozen autoencoder's latents.
    TrainFlowgen,
    /// Train the manipulation policy: every enabled variant, or a single one.
    TrainPolicy {
        /// One of full, no_alignment, grid_flow.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Generate a task flow for a fresh scene and save it with an overlay.
    GenFlow {
        #[arg(long)]
        task: String,
        /// Scene seed; the base seed when omitted.
        #[arg(long)]
        env_seed: Option<u64>,
        /// Directory the flow sample and overlay are written to.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Roll out a trained policy on held-out evaluation scenes.
    Rollout {
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        /// One of full, no_alignment, grid_flow.
        #[arg(long, default_value = "full")]
        method: String,
        /// Conditioning source: demo or lang.
        #[arg(long, default_value = "demo")]
        regime: String,
        /// Camera override: a JSON camera description or a path to one.
        #[arg(long)]
        camera_pose: Option<String>,
    },
    /// Roll out the learning-free replay baseline on evaluation scenes.
    RolloutHeuristic {
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        /// Camera override: a JSON camera description or a path to one.
        #[arg(long)]
        camera_pose: Option<String>,
    },
    /// Evaluate every enabled method and write the result tables.
    Eval,
    /// Render a keypoint-trajectory overlay to a PNG.
    Render {
        /// Episode directory, as written by gen-data or gen-demos.
        #[arg(long, conflicts_with = "flow")]
        episode: Option<PathBuf>,
        /// Flow-sample directory, as written by filter-flow or gen-flow.
        #[arg(long)]
        flow: Option<PathBuf>,
        /// Output PNG path.
        #[arg(long)]
        png: PathBuf,
    },
    /// Run every stage in order, reusing cached results.
    Pipeline,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn report(run: &StageRun) {
    println!("{}: {}", run.stage, if run.cached { "cached" } else { "done" });
}

fn parse_task(s: &str) -> Result<Task, HarnessError> {
    s.parse().map_err(|_| HarnessError::Config(format!("unknown task {s}")))
}

fn parse_variant(s: &str) -> Result<PolicyVariant, HarnessError> {
    match s {
        "full" => Ok(PolicyVariant::Full),
        "no_alignment" => Ok(PolicyVariant::NoAlignment),
        "grid_flow" => Ok(PolicyVariant::GridFlow),
        _ => Err(HarnessError::Config(format!("unknown policy variant {s}"))),
    }
}

fn parse_method(s: &str) -> Result<Method, HarnessError> {
    match s {
        "full" => Ok(Method::Full),
        "no_alignment" => Ok(Method::NoAlignment),
        "grid_flow" => Ok(Method::GridFlow),
        "heuristic" => Ok(Method::Heuristic),
        _ => Err(HarnessError::Config(format!("unknown method {s}"))),
    }
}

fn parse_regime(s: &str) -> Result<Regime, HarnessError> {
    match s {
        "demo" => Ok(Regime::Demo),
        "lang" => Ok(Regime::Lang),
        _ => Err(HarnessError::Config(format!("unknown regime {s}"))),
    }
}

fn parse_camera(s: &str) -> Result<CameraConfig, HarnessError> {
    let text = if Path::new(s).exists() {
        fs::read_to_string(s)
            .map_err(|e| HarnessError::Config(format!("cannot read camera pose {s}: {e}")))?
    } else {
        s.to_string()
    };
    serde_json::from_str(&text)
        .map_err(|e| HarnessError::Config(format!("bad camera pose {s}: {e}")))
}

fn scene_frame(sim: &SimConfig, cam: &Camera, scene: &FlowScene) -> RenderOut {
    let mut state = reset(scene.env, scene.seed, sim);
    state.embodiment = scene.embodiment;
    render_frame(&state, sim, cam)
}

fn print_rollouts(
    cfg: &ExperimentConfig,
    out: &Path,
    method: Method,
    task: &str,
    regime: Regime,
    episodes: usize,
    camera_pose: Option<&str>,
) -> Result<(), HarnessError> {
    let task = parse_task(task)?;
    let camera = camera_pose.map(parse_camera).transpose()?;
    let records = rollout_episodes(cfg, out, method, task, regime, episodes, camera.as_ref())?;
    for r in &records {
        println!("{}", serde_json::to_string(r)?);
    }
    let successes = records.iter().filter(|r| r.success).count();
    println!(
        "success {successes}/{} ({:.1}%)",
        records.len(),
        success_pct(successes, records.len())
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let out = cli.out.as_path();
    match cli.cmd {
        Cmd::GenData => report(&run_stage(&cfg, out, StageId::GenData)?),
        Cmd::GenDemos => {
            report(&run_stage(&cfg, out, StageId::GenDemos)?);
            report(&run_stage(&cfg, out, StageId::GenEvalDemos)?);
        }
        Cmd::FilterFlow => {
            report(&run_stage(&cfg, out, StageId::FilterFlow)?);
            report(&run_stage(&cfg, out, StageId::FilterEval)?);
        }
        Cmd::TrainAe => report(&run_stage(&cfg, out, StageId::TrainAe)?),
        Cmd::TrainFlowgen => report(&run_stage(&cfg, out, StageId::TrainFlowgen)?),
        Cmd::TrainPolicy { variant } => {
            let variants = match variant.as_deref() {
                Some(v) => vec![parse_variant(v)?],
                None => {
                    let mut vs = vec![PolicyVariant::Full];
                    if cfg.ablations.no_alignment {
                        vs.push(PolicyVariant::NoAlignment);
                    }
                    if cfg.ablations.grid_flow {
                        vs.push(PolicyVariant::GridFlow);
                    }
                    vs
                }
            };
            for v in variants {
                report(&run_stage(&cfg, out, StageId::TrainPolicy(v))?);
            }
        }
        Cmd::GenFlow { task, env_seed, dir } => {
            let task = parse_task(&task)?;
            let env_seed = env_seed.unwrap_or(cfg.seed);
            let flow = generate_flow_for_scene(&cfg, out, task, env_seed, cfg.seed)?;
            let cam = Camera::from_config(&cfg.sim.camera);
            let scene = scene_condition(&cfg.sim, &cam, task, env_seed)?;
            let sample = FlowSample {
                flow,
                task_id: task.id(),
                obs_image: scene.obs_image,
                f0: scene.f0,
            };
            let provenance =
                FlowScene { env: task.env(), seed: env_seed, embodiment: Embodiment::Robot };
            let dir = dir
                .unwrap_or_else(|| out.join("gen").join(format!("{task}-{env_seed:08}")));
            write_flow_sample(&dir, &sample, Some(provenance))?;
            let frame0 = scene_frame(&cfg.sim, &cam, &provenance);
            render_flow_overlay(&frame0, &taskflow_tracks(&sample.flow), &dir.join("overlay.png"))?;
            println!("wrote {}", dir.display());
        }
        Cmd::Rollout { task, episodes, method, regime, camera_pose } => {
            let method = parse_method(&method)?;
            if method == Method::Heuristic {
                return Err(HarnessError::Config(
                    "use rollout-heuristic for the replay baseline".to_string(),
                ));
            }
            print_rollouts(
                &cfg,
                out,
                method,
                &task,
                parse_regime(&regime)?,
                episodes,
                camera_pose.as_deref(),
            )?;
        }
        Cmd::RolloutHeuristic { task, episodes, camera_pose } => {
            print_rollouts(
                &cfg,
                out,
                Method::Heuristic,
                &task,
                Regime::Demo,
                episodes,
                camera_pose.as_deref(),
            )?;
        }
        Cmd::Eval => {
            let table = run_eval(&cfg, out)?;
            print!("{}", table.render_text());
        }
        Cmd::Render { episode, flow, png } => {
            let cam = Camera::from_config(&cfg.sim.camera);
            match (episode, flow) {
                (Some(dir), None) => {
                    if !dir.join("manifest.json").exists() {
                        return Err(HarnessError::Config(format!(
                            "no episode at {}",
                            dir.display()
                        )));
                    }
                    let ep = read_episode(&dir)?;
                    render_flow_overlay(&ep.frame0(), &ep.tracks, &png)?;
                }
                (None, Some(dir)) => {
                    if !dir.join("meta.json").exists() {
                        return Err(HarnessError::Config(format!(
                            "no flow sample at {}",
                            dir.display()
                        )));
                    }
                    let (sample, scene) = read_flow_sample(&dir, "filter-flow")?;
                    let frame0 = match scene {
                        Some(s) => scene_frame(&cfg.sim, &cam, &s),
                        None => RenderOut {
                            depth: vec![0.0; flowact::sim::raster::RES * flowact::sim::raster::RES],
                            seg: vec![0; flowact::sim::raster::RES * flowact::sim::raster::RES],
                        },
                    };
                    render_flow_overlay(&frame0, &taskflow_tracks(&sample.flow), &png)?;
                }
                _ => {
                    return Err(HarnessError::Config(
                        "render needs exactly one of --episode or --flow".to_string(),
                    ));
                }
            }
            println!("wrote {}", png.display());
        }
        Cmd::Pipeline => {
            let result = run_pipeline(&cfg, out)?;
            for s in &result.stages {
                report(s);
            }
            println!("config {}", result.config_hash);
            println!("results in {}", out.join("results").display());
        }
    }
    Ok(())
}

//! Command-line frontend. Exit codes: 0 success, 1 configuration or usage
//! error, 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::checkpoint::{Checkpoint, StageTag};
use super::config::PipelineConfig;
use super::stages::{self, NerfState, RunContext, Stage2State};
use super::PipelineError;
use crate::diffusion::AnalyticScene;
use crate::fields::Grid3;
use crate::image_io::save_png;
use crate::render_volume::CameraPolicy;
use crate::tetmesh::load_obj;

#[derive(Debug, Parser)]
#[command(name = "distill3d", version, about = "Two-stage score-distillation 3D synthesis")]
struct Cli {
    /// Parallel render workers; overrides the config. Runs are only
    /// reproducible bit-for-bit with 1.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run both stages.
    Generate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run stage 1 only; leaves a nerf checkpoint.
    Stage1 {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run stage 2 from a nerf, geometry, or texture checkpoint directory.
    Stage2 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        from: PathBuf,
        /// Accept a nerf checkpoint whose stage 1 did not finish.
        #[arg(long)]
        allow_incomplete: bool,
    },
    /// Render turntable frames of a textured mesh.
    Render {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        texture: PathBuf,
        /// Config supplying camera and background; defaults apply otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "turntable")]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        frames: usize,
    },
    /// Render an analytic scene's rgb and normal images from one view, for
    /// use as image prompts.
    Prompts {
        /// JSON scene description.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        normal: PathBuf,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        azimuth: f64,
        #[arg(long, default_value_t = 15.0, allow_negative_numbers = true)]
        elevation: f64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        supersample: usize,
    },
    /// Run the built-in invariant suite.
    Check,
}

fn load_config(path: &Path, workers: Option<usize>) -> Result<PipelineConfig, PipelineError> {
    if !path.is_file() {
        return Err(PipelineError::Config(format!("config file {} does not exist", path.display())));
    }
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(w) = workers {
        cfg.workers = w;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Generate { config } => {
            let cfg = load_config(&config, cli.workers)?;
            let out = stages::generate(cfg)?;
            println!("mesh: {} vertices, {} faces", out.mesh.vertices.len(), out.mesh.faces.len());
        }
        Command::Stage1 { config } => {
            let cfg = load_config(&config, cli.workers)?;
            let mut ctx = RunContext::new(cfg, false)?;
            let init = NerfState::init(&ctx.config)?;
            let state = stages::run_stage1(&mut ctx, init)?;
            println!("stage 1 finished after {} iterations", state.iteration);
        }
        Command::Stage2 {
            config,
            from,
            allow_incomplete,
        } => {
            let cfg = load_config(&config, cli.workers)?;
            let (ck, _) = Checkpoint::load(&from)?;
            let state = if ck.stage == StageTag::Nerf {
                let (nerf, _) = NerfState::load(&from)?;
                Stage2State::from_nerf(&cfg, &nerf)?
            } else {
                Stage2State::load(&cfg, &from)?
            };
            let mut ctx = RunContext::new(cfg, true)?;
            let out = stages::run_stage2(&mut ctx, state, allow_incomplete)?;
            println!("mesh: {} vertices, {} faces", out.mesh.vertices.len(), out.mesh.faces.len());
        }
        Command::Render {
            mesh,
            texture,
            config,
            out,
            frames,
        } => {
            let mut cfg = match config {
                Some(p) => load_config(&p, cli.workers)?,
                None => render_only_config(),
            };
            cfg.turntable_frames = frames.max(1);
            let mesh = load_obj(&mesh).map_err(|e| PipelineError::Config(e.to_string()))?;
            let texture = Grid3::load(&texture).map_err(|e| PipelineError::Config(e.to_string()))?;
            let n = stages::write_mesh_turntable(&mesh, &texture, &cfg, &out)?;
            println!("wrote {n} frames to {}", out.display());
        }
        Command::Prompts {
            scene,
            rgb,
            normal,
            azimuth,
            elevation,
            size,
            supersample,
        } => {
            let text = std::fs::read_to_string(&scene).map_err(|e| PipelineError::Config(format!("cannot read scene {}: {e}", scene.display())))?;
            let scene: AnalyticScene = serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("invalid scene: {e}")))?;
            let policy = CameraPolicy {
                width: size,
                height: size,
                ..CameraPolicy::default()
            };
            let cam = policy.pose(azimuth, elevation).map_err(|e| PipelineError::Config(e.to_string()))?;
            save_png(&scene.render(&cam, [1.0; 3], supersample), &rgb)?;
            save_png(&scene.render_normals(&cam, supersample), &normal)?;
        }
        Command::Check => {
            let results = crate::check::run_suite();
            let mut failed = 0;
            for r in &results {
                println!("{} {}{}", if r.passed { "PASS" } else { "FAIL" }, r.name, if r.detail.is_empty() { String::new() } else { format!(": {}", r.detail) });
                failed += usize::from(!r.passed);
            }
            println!("{} checks, {failed} failed", results.len());
            if failed > 0 {
                return Err(PipelineError::ChecksFailed(failed));
            }
        }
    }
    Ok(())
}

fn render_only_config() -> PipelineConfig {
    serde_json::from_value(serde_json::json!({
        "schema": 1,
        "input_image": "",
        "output_dir": "",
        "stage1_denoiser": {"type": "image_prompt_oracle"},
    }))
    .expect("built-in render config parses")
}

/// Parses `argv` (including the program name) and runs the command.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

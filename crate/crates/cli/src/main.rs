//! `lss`: dataset generation, training, rollouts and evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use lss_core::gradcheck;
use lss_core::losses::LossWeights;
use lss_core::nn::{load_checkpoint, save_checkpoint};
use lss_core::par::Exec;
use lss_core::rollout::{
    bench_timing, compare, evaluate, export_latent_trajectories, latent_csv, rollout, write_pgm, EvalReport, Mode,
    RolloutConfig, ScenarioMutator, SceneResult, SummaryRow,
};
use lss_core::scene::{generate_dataset, read_dataset, write_dataset, SceneKind, SceneSequence};
use lss_core::train::{fit, Arch, TrainConfig};
use lss_core::LssError;

#[derive(Debug, Parser)]
#[command(name = "lss", version, about = "Latent-space-subdivided smoke prediction")]
struct Cli {
    /// Worker threads; 1 runs everything sequentially. Results do not depend
    /// on this value.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a dataset of scenes.
    Gen(GenArgs),
    /// Train encoder, decoder and predictor jointly.
    Train(TrainArgs),
    /// Roll one scene out and compare it with its ground truth.
    Rollout(RolloutArgs),
    /// PSNR of both rollout modes over a test dataset.
    Eval(EvalArgs),
    /// Latent trajectories projected onto three principal components.
    ExportLatent(ExportArgs),
    /// Mean time per step of the solver and of Vel-mode prediction.
    Bench(BenchArgs),
    /// Finite-difference check of every layer and loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, value_parser = parse_kind)]
    scene: SceneKind,
    #[arg(long)]
    scenes: usize,
    #[arg(long)]
    frames: usize,
    /// Resolution as WxH; defaults to the scene's standard size.
    #[arg(long, value_parser = parse_res)]
    res: Option<(usize, usize)>,
    #[arg(long, env = "LSS_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 16, value_parser = parse_latent)]
    latent: usize,
    #[arg(long, default_value_t = 0.66, value_parser = parse_split)]
    split: f64,
    #[arg(long, default_value_t = 6, value_parser = parse_ni)]
    ni: usize,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(2..=4))]
    window: u64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Prediction loss weight; 0 trains the direct-loss-only baseline.
    #[arg(long, default_value_t = 1.0)]
    w_pred: f64,
    #[arg(long, default_value = "desk", value_parser = parse_arch)]
    arch: Arch,
    #[arg(long, env = "LSS_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Loss trace destination; defaults to `<out>.trace.csv`.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RolloutArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    mode: Mode,
    #[arg(long)]
    steps: usize,
    /// Dataset file, optionally followed by `#index`.
    #[arg(long)]
    scene: String,
    /// `obstacle:x,y,r`, `inflow:x,y,r` or `sink:x0,y0,x1,y1` in cells;
    /// repeatable.
    #[arg(long, value_parser = parse_mutator)]
    mutate: Vec<ScenarioMutator>,
    #[arg(long)]
    report: PathBuf,
    /// Directory for per-step density images.
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "vel,velden", value_parser = parse_mode)]
    modes: Vec<Mode>,
    #[arg(long, value_delimiter = ',', default_value = "100,400")]
    horizons: Vec<usize>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 5)]
    scenes: usize,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, env = "LSS_SEED", default_value_t = 0)]
    seed: u64,
}

fn parse_kind(s: &str) -> Result<SceneKind, String> {
    s.parse().map_err(|e: LssError| e.to_string())
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: LssError| e.to_string())
}

fn parse_mutator(s: &str) -> Result<ScenarioMutator, String> {
    s.parse().map_err(|e: LssError| e.to_string())
}

fn parse_res(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("resolution must look like 32x64")?;
    Ok((w.parse().map_err(|_| "bad width")?, h.parse().map_err(|_| "bad height")?))
}

fn parse_split(s: &str) -> Result<f64, String> {
    match s {
        "0" | "0.0" => Ok(0.0),
        "0.33" | "0.5" | "0.66" => Ok(s.parse().expect("literal")),
        _ => Err(format!("split must be one of 0.0, 0.33, 0.5, 0.66; got {s}")),
    }
}

fn parse_latent(s: &str) -> Result<usize, String> {
    match s {
        "16" | "32" | "48" => Ok(s.parse().expect("literal")),
        _ => Err(format!("latent must be one of 16, 32, 48; got {s}")),
    }
}

fn parse_ni(s: &str) -> Result<usize, String> {
    match s {
        "1" | "6" | "12" => Ok(s.parse().expect("literal")),
        _ => Err(format!("ni must be one of 1, 6, 12; got {s}")),
    }
}

fn parse_arch(s: &str) -> Result<Arch, String> {
    match s {
        "desk" => Ok(Arch::Desk),
        "full" => Ok(Arch::Full),
        _ => Err(format!("arch must be desk or full; got {s}")),
    }
}

fn load_scene(spec: &str) -> anyhow::Result<SceneSequence> {
    let (path, index) = match spec.rsplit_once('#') {
        Some((p, i)) => (p, i.parse::<usize>().with_context(|| format!("bad scene index in '{spec}'"))?),
        None => (spec, 0),
    };
    let mut scenes = read_dataset(Path::new(path))?;
    if index >= scenes.len() {
        return Err(LssError::contract(format!("{path} holds {} scenes, index {index} requested", scenes.len())).into());
    }
    Ok(scenes.swap_remove(index))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let exec = if cli.jobs == 1 { Exec::Sequential } else { Exec::Parallel };
    if cli.jobs > 1 {
        rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global().context("thread pool")?;
    }
    println!("effective-config: jobs={} {:?}", cli.jobs, cli.command);
    match cli.command {
        Command::Gen(a) => {
            let res = a.res.unwrap_or(a.scene.default_resolution());
            let seeds: Vec<u64> = (0..a.scenes as u64).map(|k| a.seed.wrapping_add(k)).collect();
            let seqs = generate_dataset(a.scene, res, a.frames, &seeds, &a.scene.solver_config(), exec)?;
            write_dataset(&a.out, &seqs)?;
            println!("wrote {} scenes of {} frames to {}", seqs.len(), a.frames, a.out.display());
        }
        Command::Train(a) => {
            let data = read_dataset(&a.data)?;
            let cfg = TrainConfig {
                window: a.window as usize,
                n_i: a.ni,
                batch: a.batch,
                lr: a.lr,
                epochs: a.epochs,
                max_steps: a.max_steps,
                seed: a.seed,
                weights: LossWeights { w_ae_pred: a.w_pred, ..LossWeights::default() },
                split_fraction: a.split,
                total_dim: a.latent,
                arch: a.arch,
                exec,
                ..TrainConfig::default()
            };
            let out = fit(&data, &cfg)?;
            save_checkpoint(&a.out, &out.checkpoint)?;
            let trace = a.trace.unwrap_or_else(|| {
                let mut p = a.out.clone().into_os_string();
                p.push(".trace.csv");
                p.into()
            });
            out.trace.write(&trace)?;
            let best = out.validation.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
            println!("trained {} steps; best validation loss {best:.6}; trace {}", out.checkpoint.steps, trace.display());
        }
        Command::Rollout(a) => {
            let ckpt = load_checkpoint(&a.ckpt)?;
            let scene = load_scene(&a.scene)?;
            let r = rollout(&ckpt, &scene, &RolloutConfig { mode: a.mode, steps: a.steps, mutators: a.mutate })?;
            let report = compare(&r, &scene)?;
            let eval = EvalReport {
                summary: vec![SummaryRow { mode: a.mode, horizon: a.steps, psnr_u: report.mean_u, psnr_rho: report.mean_rho }],
                scenes: vec![SceneResult { scene: 0, mode: a.mode, report }],
            };
            eval.write(&a.report)?;
            if let Some(dir) = a.pgm {
                fs::create_dir_all(&dir)?;
                for (k, rho) in r.density.iter().enumerate() {
                    write_pgm(&dir.join(format!("rho_{:05}.pgm", r.first_frame + k)), rho)?;
                }
            }
            println!("mode {} steps {}: mean psnr u {:.3} rho {:.3}", a.mode, a.steps, eval.summary[0].psnr_u, eval.summary[0].psnr_rho);
        }
        Command::Eval(a) => {
            let ckpt = load_checkpoint(&a.ckpt)?;
            let scenes = read_dataset(&a.data)?;
            let report = evaluate(&ckpt, &scenes, &a.modes, &a.horizons, exec)?;
            report.write(&a.report)?;
            for r in &report.summary {
                println!("{} horizon {}: psnr u {:.3} rho {:.3}", r.mode, r.horizon, r.psnr_u, r.psnr_rho);
            }
        }
        Command::ExportLatent(a) => {
            let ckpt = load_checkpoint(&a.ckpt)?;
            let scenes = read_dataset(&a.data)?;
            let pts = export_latent_trajectories(&ckpt, &scenes, exec)?;
            fs::write(&a.out, latent_csv(&pts))?;
            println!("wrote {} latent points to {}", pts.len(), a.out.display());
        }
        Command::Bench(a) => {
            let ckpt = load_checkpoint(&a.ckpt)?;
            let scenes = read_dataset(&a.data)?;
            let n = a.scenes.min(scenes.len());
            let t = bench_timing(&ckpt, &scenes[..n], a.steps)?;
            println!("simulation solve {:.6} s total {:.6} s", t.sim_solve, t.sim_total);
            println!("prediction solve {:.6} s total {:.6} s", t.pred_solve, t.pred_total);
        }
        Command::Gradcheck(a) => {
            let results = gradcheck::run_all(a.seed)?;
            let mut worst: f64 = 0.0;
            for r in &results {
                println!("{:<16} entries {:>5} max relative error {:.3e}", r.name, r.entries, r.max_rel_error);
                worst = worst.max(r.max_rel_error);
            }
            println!("max relative error {worst:.3e}");
            if results.iter().any(|r| !r.passed()) {
                bail!(LssError::Training(format!("gradient check failed: {worst:e} > {:e}", gradcheck::GRAD_TOLERANCE)));
            }
        }
    }
    Ok(())
}

/// Exit code and class name of an error.
fn classify(err: &anyhow::Error) -> (u8, &'static str) {
    match err.downcast_ref::<LssError>() {
        Some(LssError::Io(_) | LssError::Parse { .. } | LssError::Length { .. }) => (3, "io"),
        Some(LssError::Contract(_)) => (4, "contract"),
        Some(LssError::Solver { .. }) => (5, "solver"),
        Some(LssError::Training(_)) => (6, "training"),
        None if err.downcast_ref::<std::io::Error>().is_some() => (3, "io"),
        None => (4, "contract"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, class) = classify(&err);
            let msg = format!("{err:#}").replace('\n', " ");
            eprintln!("error class={class} code={code} message={msg:?}");
            ExitCode::from(code)
        }
    }
}

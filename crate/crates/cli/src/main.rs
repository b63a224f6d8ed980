use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tokenview::data::{build_dataset, write_ppm, Dataset, Split};
use tokenview::eval::{
    evaluate, grad_suite, probe_intrinsic, reference_pose_sweep, sweep_tsv, synth_command, GradCase,
};
use tokenview::geometry::{pose_grid, Pose, DATASET_AZIMUTHS};
use tokenview::model::Model;
use tokenview::tensor::{DType, Scalar};
use tokenview::training::{
    checkpoint_dtype, load_checkpoint, save_checkpoint, stage_checkpoint_path, Checkpoint, Stage, TrainConfig, Trainer,
};

#[derive(Parser)]
#[command(name = "tokenview", version, about = "Single-image novel view synthesis on procedural voxel objects")]
struct Cli {
    /// Seed overriding the config or command default.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output location (directory, or report file where noted).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a procedural dataset of voxel chairs.
    GenData(GenDataArgs),
    /// Train stage 1, stage 2 or both.
    Train(TrainArgs),
    /// Score every ordered view pair of a split and write a TSV report.
    Eval(EvalArgs),
    /// Synthesize views of an arbitrary image.
    Synth(SynthArgs),
    /// Compare intrinsic representations across the views of one object.
    Probe(ProbeArgs),
    /// Train and evaluate once per reference pose.
    SweepRefPose(SweepArgs),
    /// Finite-difference checks of every differentiable operation.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 20)]
    objects: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = DATASET_AZIMUTHS)]
    azimuths: usize,
    /// Comma-separated elevations in degrees.
    #[arg(long, default_value = "0,10,20", value_delimiter = ',')]
    elevations: Vec<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    stage: StageArg,
    /// Continue from a checkpoint instead of initializing.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Target pose as `azimuth,elevation`; repeatable.
    #[arg(long = "pose", required = true, value_parser = parse_pose)]
    poses: Vec<Pose>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    object: String,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Reference pose as `azimuth,elevation`; repeatable.
    #[arg(long = "pose", required = true, value_parser = parse_pose)]
    poses: Vec<Pose>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Number of seeds, starting at `--seed` (default 0).
    #[arg(long, default_value_t = 3)]
    seeds: u64,
}

fn parse_pose(s: &str) -> Result<Pose, String> {
    let (a, e) = s.split_once(',').ok_or_else(|| format!("expected `azimuth,elevation`, got `{s}`"))?;
    let a: f64 = a.trim().parse().map_err(|e| format!("azimuth: {e}"))?;
    let e: f64 = e.trim().parse().map_err(|e| format!("elevation: {e}"))?;
    Pose::new(a, e).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn out_dir(cli_out: &Option<PathBuf>, default: &str) -> PathBuf {
    cli_out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let out = out_dir(&cli.out, "data");
            let poses = pose_grid(a.azimuths, &a.elevations)?;
            let ds = build_dataset(a.objects, &poses, a.size, cli.seed.unwrap_or(0), &out)?;
            println!("wrote {} views of {} objects to {}", ds.num_views(), ds.objects.len(), out.display());
        }
        Command::Train(a) => {
            let mut config = TrainConfig::load(&a.config)?;
            if let Some(seed) = cli.seed {
                config.seed = seed;
            }
            if let Some(out) = &cli.out {
                config.checkpoint_dir = out.clone();
            }
            match config.precision {
                DType::F32 => train::<f32>(config, a.stage, a.resume.as_deref())?,
                DType::F64 => train::<f64>(config, a.stage, a.resume.as_deref())?,
            }
        }
        Command::Eval(a) => {
            let split = match a.split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let out = out_dir(&cli.out, "report.tsv");
            with_checkpoint(&a.checkpoint, |ctx| {
                let ds = Dataset::load(&a.dataset)?;
                let report = match ctx {
                    Loaded::F32(m, c) => evaluate(&m, &c.params, &ds, split)?,
                    Loaded::F64(m, c) => evaluate(&m, &c.params, &ds, split)?,
                };
                report.write_tsv(&out)?;
                println!(
                    "{} pairs: L1 {:.5} SSIM {:.5} (copy-source L1 {:.5}, beaten on {:.1}%) -> {}",
                    report.rows.len(),
                    report.mean_l1,
                    report.mean_ssim,
                    report.mean_copy_l1,
                    100.0 * report.beats_copy_fraction(),
                    out.display()
                );
                Ok(())
            })?;
        }
        Command::Synth(a) => {
            let out = out_dir(&cli.out, "synth");
            let paths = with_checkpoint(&a.checkpoint, |ctx| {
                Ok(match ctx {
                    Loaded::F32(m, c) => synth_command(&m, &c.params, &a.input, &a.poses, &out)?,
                    Loaded::F64(m, c) => synth_command(&m, &c.params, &a.input, &a.poses, &out)?,
                })
            })?;
            for p in paths {
                println!("{}", p.display());
            }
        }
        Command::Probe(a) => {
            let out = out_dir(&cli.out, "probe");
            let (stats, grid) = with_checkpoint(&a.checkpoint, |ctx| {
                let ds = Dataset::load(&a.dataset)?;
                Ok(match ctx {
                    Loaded::F32(m, c) => probe_intrinsic(&m, &c.params, &ds, &a.object)?,
                    Loaded::F64(m, c) => probe_intrinsic(&m, &c.params, &ds, &a.object)?,
                })
            })?;
            let path = out.join(format!("probe_{}.ppm", a.object));
            write_ppm(&path, &grid)?;
            println!("object\tintra\tinter\tratio");
            println!(
                "{}\t{}\t{}\t{}",
                stats.object, stats.mean_intra_distance, stats.mean_inter_distance, stats.ratio
            );
            println!("grid -> {}", path.display());
        }
        Command::SweepRefPose(a) => {
            let mut config = TrainConfig::load(&a.config)?;
            if let Some(seed) = cli.seed {
                config.seed = seed;
            }
            let out = out_dir(&cli.out, "sweep");
            config.checkpoint_dir = out.clone();
            let ds = Dataset::load(&config.dataset)?;
            let rows = match config.precision {
                DType::F32 => reference_pose_sweep::<f32>(&config, &ds, &a.poses)?,
                DType::F64 => reference_pose_sweep::<f64>(&config, &ds, &a.poses)?,
            };
            let text = sweep_tsv(&rows);
            let path = out.join("sweep.tsv");
            std::fs::create_dir_all(&out).map_err(|e| anyhow!("{}: {e}", out.display()))?;
            std::fs::write(&path, &text).map_err(|e| anyhow!("{}: {e}", path.display()))?;
            print!("{text}");
        }
        Command::GradCheck(a) => {
            let first = cli.seed.unwrap_or(0);
            let seeds: Vec<u64> = (first..first + a.seeds).collect();
            let cases = grad_suite(&seeds)?;
            println!("op\tseed\tmax_rel_err\ttol\tresult");
            for GradCase { op, seed, max_rel_err, tol, pass } in &cases {
                println!("{op}\t{seed}\t{max_rel_err:.3e}\t{tol:e}\t{}", if *pass { "pass" } else { "FAIL" });
            }
            let failed = cases.iter().filter(|c| !c.pass).count();
            if failed > 0 {
                bail!("{failed} of {} gradient checks failed", cases.len());
            }
        }
    }
    Ok(())
}

enum Loaded {
    F32(Model, Checkpoint<f32>),
    F64(Model, Checkpoint<f64>),
}

fn with_checkpoint<R>(path: &Path, f: impl FnOnce(Loaded) -> anyhow::Result<R>) -> anyhow::Result<R> {
    let loaded = match checkpoint_dtype(path)? {
        DType::F32 => {
            let (m, c) = load_checkpoint::<f32>(path)?;
            Loaded::F32(m, c)
        }
        DType::F64 => {
            let (m, c) = load_checkpoint::<f64>(path)?;
            Loaded::F64(m, c)
        }
    };
    f(loaded)
}

fn train<T: Scalar>(config: TrainConfig, stage: StageArg, resume: Option<&Path>) -> anyhow::Result<()> {
    let ds = Dataset::load(&config.dataset)?;
    let (model, ckpt) = match resume {
        Some(path) => {
            let (model, mut ckpt) = load_checkpoint::<T>(path)?;
            if ckpt.config.model != config.model {
                bail!("{}: model layout differs from the config", path.display());
            }
            // Schedule, logging and paths follow the new config.
            ckpt.config = config.clone();
            (model, ckpt)
        }
        None => Checkpoint::<T>::initial(&config)?,
    };
    let mut trainer = Trainer::new(model, ckpt, &ds)?;
    let dir = config.checkpoint_dir.clone();
    if matches!(stage, StageArg::One | StageArg::Both) {
        let records = trainer.run_stage1()?;
        let path = stage_checkpoint_path(&dir, Stage::One);
        save_checkpoint(trainer.checkpoint(), &path)?;
        report("stage 1", records.last().map(|r| r.total()), &path);
    }
    if matches!(stage, StageArg::Two | StageArg::Both) {
        let records = trainer.run_stage2()?;
        let path = stage_checkpoint_path(&dir, Stage::Two);
        save_checkpoint(trainer.checkpoint(), &path)?;
        report("stage 2", records.last().map(|r| r.total()), &path);
    }
    Ok(())
}

fn report(stage: &str, last: Option<f64>, path: &Path) {
    match last {
        Some(l) => println!("{stage}: final L_Total {l:.5} -> {}", path.display()),
        None => println!("{stage}: no steps to run -> {}", path.display()),
    }
}

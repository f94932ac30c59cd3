//! The `forge` command line: config-driven tasks with a reproducibility
//! manifest per run.

pub mod config;
pub mod error;
pub mod manifest;
pub mod tasks;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

pub use config::{RunConfig, Task};
pub use error::{CliError, CliResult};
pub use manifest::{Manifest, MANIFEST_NAME};

#[derive(Parser, Debug)]
#[command(name = "forge", version, about = "Controllable 3D lesion shape and texture synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Procedural training shapes
    GenShapes(RunArgs),
    /// Fit the latent codec and train the shape denoiser
    TrainShapeModel(RunArgs),
    /// Train the lesion texture prior
    TrainTextureModel(RunArgs),
    /// Curvature-guided mask synthesis
    SynthMask(RunArgs),
    /// Intensity-guided lesion insertion into a background volume
    SynthVolume(RunArgs),
    /// Run synth-mask or synth-volume over a list of guidance values
    Sweep(RunArgs),
    /// MMD, coverage and pairwise Dice between two mask sets
    Metrics(RunArgs),
    /// Triangle meshes from SDF volumes
    ExportMesh(RunArgs),
    /// Re-run a manifest and compare artifact hashes
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// JSON run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set guidance.eta0=0.5`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    manifest: PathBuf,
    /// Defaults to `<run dir>-replay` beside the run directory
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn holds_files(dir: &Path) -> CliResult<bool> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_dir() || holds_files(&path)? {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Removes what an earlier run left in `dir`. A directory with foreign files
/// is refused.
/// Returns whether the directory already existed.
fn prepare_output(dir: &Path) -> CliResult<bool> {
    let existed = dir.exists();
    if existed {
        if !dir.is_dir() {
            return Err(CliError::Config(format!("output {} is not a directory", dir.display())));
        }
        let manifest = dir.join(MANIFEST_NAME);
        if manifest.exists() {
            let old = Manifest::read(&manifest)?;
            for a in &old.artifacts {
                let p = dir.join(&a.path);
                if p.is_file() {
                    fs::remove_file(p)?;
                }
            }
            fs::remove_file(&manifest)?;
        }
        if holds_files(dir)? {
            return Err(CliError::Config(format!("output {} is not empty", dir.display())));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(existed)
}

/// Runs a resolved configuration into its output directory and writes the
/// manifest.
pub fn run(cfg: &RunConfig, jobs: usize) -> CliResult<Manifest> {
    let out = cfg.output_dir()?.to_path_buf();
    let existed = prepare_output(&out)?;
    if let Err(e) = tasks::execute(cfg, &out, jobs) {
        // the directory held no files before this run
        if existed {
            for entry in fs::read_dir(&out)?.filter_map(Result::ok) {
                let p = entry.path();
                let _ = if p.is_dir() { fs::remove_dir_all(p) } else { fs::remove_file(p) };
            }
        } else {
            let _ = fs::remove_dir_all(&out);
        }
        return Err(e);
    }
    let manifest = Manifest::build(cfg, &out)?;
    manifest.write(&out)?;
    info!("{}: {} artifacts in {}", manifest.task, manifest.artifacts.len(), out.display());
    Ok(manifest)
}

/// Re-runs the configuration recorded in `path` and checks every artifact
/// hash.
pub fn replay(path: &Path, output: Option<PathBuf>, jobs: usize) -> CliResult<Manifest> {
    let recorded = Manifest::read(path)?;
    let mut cfg = recorded.config.clone();
    let default_output = || {
        let run_dir = path.parent().and_then(|p| fs::canonicalize(p).ok()).unwrap_or_default();
        let name = run_dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
        run_dir.with_file_name(format!("{name}-replay"))
    };
    cfg.output = Some(output.unwrap_or_else(default_output));
    let task = cfg.task.ok_or_else(|| CliError::Config("manifest has no task".into()))?;
    let cfg = cfg.resolve(task)?;
    let fresh = run(&cfg, jobs)?;
    let diffs = recorded.differences(&fresh);
    if !diffs.is_empty() {
        return Err(CliError::Data(format!("replay differs: {}", diffs.join(", "))));
    }
    Ok(fresh)
}

fn dispatch(command: Command) -> CliResult<()> {
    let (task, args) = match command {
        Command::Replay(r) => {
            let m = replay(&r.manifest, r.output, r.jobs)?;
            println!("replay ok: {} artifacts match", m.artifacts.len());
            return Ok(());
        }
        Command::GenShapes(a) => (Task::GenShapes, a),
        Command::TrainShapeModel(a) => (Task::TrainShapeModel, a),
        Command::TrainTextureModel(a) => (Task::TrainTextureModel, a),
        Command::SynthMask(a) => (Task::SynthMask, a),
        Command::SynthVolume(a) => (Task::SynthVolume, a),
        Command::Sweep(a) => (Task::Sweep, a),
        Command::Metrics(a) => (Task::Metrics, a),
        Command::ExportMesh(a) => (Task::ExportMesh, a),
    };
    let mut cfg = RunConfig::load(args.config.as_deref(), &args.set)?;
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    if args.output.is_some() {
        cfg.output = args.output;
    }
    if args.jobs == 0 {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    let m = run(&cfg.resolve(task)?, args.jobs)?;
    println!("{}: wrote {} artifacts", m.task, m.artifacts.len());
    Ok(())
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("forge: {e}");
            e.exit_code()
        }
    }
}

use clap::{Args, Parser, Subcommand};
use evidepth::config::RunConfig;
use evidepth::gradcheck::{micro_grad_check, GradCheckSettings};
use evidepth::pipeline::{run_eval, run_infer, run_voxelize, InferRequest};
use evidepth::synth::{build_split, SceneSpec};
use evidepth::{checkpoint, train, Error};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "evidepth", version, about = "Event + image depth estimation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Accumulate an event file into a voxel grid and write its time planes.
    Voxelize(VoxelizeArgs),
    /// Generate a synthetic split: rendered frames, events, depth, manifest.
    MakeSynth(MakeSynthArgs),
    /// Train from a run config, writing logs and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint against one or more manifests.
    Eval(EvalArgs),
    /// Predict depth for one image + event pair.
    Infer(InferArgs),
    /// Compare analytic gradients against central finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct VoxelizeArgs {
    /// EVT1 event file.
    #[arg(long)]
    events: PathBuf,
    #[arg(long, default_value_t = 3)]
    bins: usize,
    /// Keep only the trailing window of this many microseconds.
    #[arg(long)]
    window_us: Option<u64>,
    /// Output raster holding one plane per time bin.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MakeSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 3)]
    objects: usize,
    /// Nearest object depth, meters.
    #[arg(long, default_value_t = 4.0)]
    near: f64,
    /// Background depth, meters.
    #[arg(long, default_value_t = 12.0)]
    far: f64,
    /// Contrast threshold in log-intensity units.
    #[arg(long, default_value_t = 0.2)]
    theta: f64,
    /// Event window per sample, microseconds.
    #[arg(long, default_value_t = 50_000)]
    window_us: u64,
    /// Render low-contrast noisy frames while keeping events clean.
    #[arg(long)]
    night: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config file; omitted fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set lr=1e-3. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest CSVs; one result row per manifest.
    #[arg(required = true)]
    manifests: Vec<PathBuf>,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PPM frame.
    #[arg(long)]
    image: PathBuf,
    /// EVT1 event file covering the same sensor.
    #[arg(long)]
    events: PathBuf,
    /// Output depth raster.
    #[arg(long)]
    out: PathBuf,
    /// Directory for per-token attention maps (PGM).
    #[arg(long)]
    dump_attn: Option<PathBuf>,
    /// Directory for per-stage depth rasters.
    #[arg(long)]
    dump_stages: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Coordinates sampled per parameter tensor.
    #[arg(long, default_value_t = 4)]
    coords: usize,
    #[arg(long, default_value_t = 2e-6)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
        Err(e) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> evidepth::Result<()> {
    match cli.cmd {
        Cmd::Voxelize(a) => {
            let grid = run_voxelize(&a.events, a.bins, a.window_us, &a.out)?;
            let (h, w) = grid.sensor_size();
            println!(
                "wrote {} ({} bins over {}x{}, signed total {:+.3})",
                a.out.display(),
                grid.bins(),
                h,
                w,
                grid.total()
            );
        }
        Cmd::MakeSynth(a) => {
            let spec = SceneSpec {
                seed: a.seed,
                height: a.height,
                width: a.width,
                n_objects: a.objects,
                depth_range: (a.near, a.far),
                theta: a.theta,
                window_us: a.window_us,
                night: a.night,
                ..SceneSpec::default()
            };
            let manifest = build_split(&spec, a.count, &a.out)?;
            println!("wrote {} samples, manifest {}", a.count, manifest.display());
        }
        Cmd::Train(a) => {
            let mut cfg = match &a.config {
                Some(path) => RunConfig::load(path)?,
                None => RunConfig::default(),
            };
            for s in &a.sets {
                let (key, value) = s
                    .split_once('=')
                    .ok_or_else(|| Error::usage(format!("--set wants KEY=VALUE, got '{s}'")))?;
                cfg.set(key.trim(), value.trim())?;
            }
            let report = train::train(&cfg)?;
            println!(
                "{} steps, final loss {:.6}",
                report.steps_run, report.final_total
            );
            println!("log        {}", report.log_path.display());
            println!("checkpoint {}", report.checkpoint_path.display());
        }
        Cmd::Eval(a) => {
            let ck = checkpoint::load(&a.checkpoint)?;
            let rows = run_eval(&ck, &a.manifests)?;
            let mut csv = String::from("split,a1,a2,a3,rel,rms,rmslog,n_valid\n");
            println!(
                "{:<12} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>8}",
                "split", "a1", "a2", "a3", "REL", "RMS", "RMSlog", "n_valid"
            );
            for (label, r) in &rows {
                println!(
                    "{:<12} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>8}",
                    label, r.a1, r.a2, r.a3, r.rel, r.rms, r.rmslog, r.n_valid
                );
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    label, r.a1, r.a2, r.a3, r.rel, r.rms, r.rmslog, r.n_valid
                ));
            }
            if let Some(path) = &a.csv {
                std::fs::write(path, csv)?;
                println!("csv        {}", path.display());
            }
        }
        Cmd::Infer(a) => {
            let ck = checkpoint::load(&a.checkpoint)?;
            let req = InferRequest {
                image: &a.image,
                events: &a.events,
                out: &a.out,
                dump_attn: a.dump_attn.as_deref(),
                dump_stages: a.dump_stages.as_deref(),
            };
            let art = run_infer(&ck, &req)?;
            let s: Vec<String> = art.mean_s_evt.iter().map(|v| format!("{v:.4}")).collect();
            println!("wrote {} (mean event score by iteration: {})", a.out.display(), s.join(" "));
        }
        Cmd::GradCheck(a) => {
            let settings = GradCheckSettings {
                coords_per_tensor: a.coords,
                eps: a.eps,
                seed: a.seed,
                ..GradCheckSettings::default()
            };
            let report = micro_grad_check(&settings)?;
            let (name, idx, fd, ad) = &report.worst;
            println!(
                "checked {} coordinates, max relative error {:.3e}",
                report.n_checked, report.max_rel_err
            );
            println!("worst: {name}[{idx}]  fd {fd:.6e}  analytic {ad:.6e}");
            if report.max_rel_err >= a.tol {
                return Err(Error::numeric(format!(
                    "gradient check failed: {:.3e} >= {:.3e}",
                    report.max_rel_err, a.tol
                )));
            }
        }
    }
    Ok(())
}

//! `dimsplat` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use dimsplat::image::{load_image, save_image};
use dimsplat::losses::{psnr, ssim};
use dimsplat::prior::{extract_prior, PriorConfig};
use dimsplat::scene::{load_checkpoint, Camera, CameraJson, Dataset};
use dimsplat::trainer::{render_view, synth_dataset, train, SynthSpec, TrainConfig};
use dimsplat::Error;

#[derive(Parser, Debug)]
#[command(
    name = "dimsplat",
    version,
    about = "Gaussian splatting for scenes captured in low light"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Overrides the seed in the config or spec file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(short, long, global = true, conflicts_with = "quiet")]
    verbose: bool,
    /// Only report errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    /// Print machine-readable JSON lines on stdout.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute the illumination-invariant structure prior of an image.
    ExtractPrior(ExtractPriorArgs),
    /// Write a synthetic low-light scene.
    Synth(SynthArgs),
    /// Optimize a scene from a manifest.
    Train(TrainArgs),
    /// Render every channel of a checkpoint from one camera.
    Render(RenderArgs),
    /// Compare images with PSNR and SSIM.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct ExtractPriorArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Also write the map as an 8-bit PNG.
    #[arg(long)]
    preview: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// JSON spec; omitted fields take their defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    scene: PathBuf,
    /// JSON training config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Print progress every this many steps.
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    camera: PathBuf,
    #[arg(long)]
    out_prefix: PathBuf,
    /// Training config whose render and denoiser settings to use.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.0, 0.0, 0.0])]
    background: Vec<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Rendered image; repeat to compare several pairs.
    #[arg(long = "render", required = true)]
    renders: Vec<PathBuf>,
    /// Reference image, one per `--render`.
    #[arg(long = "ref", required = true)]
    refs: Vec<PathBuf>,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match (cli.global.verbose, cli.global.quiet) {
        (true, _) => "debug",
        (_, true) => "error",
        _ => "info",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();

    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } => 3,
        _ => 2,
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    validate(cli)?;
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("cannot configure thread pool: {e}")))?;
    }
    match &cli.command {
        Command::ExtractPrior(a) => cmd_extract_prior(a, &cli.global),
        Command::Synth(a) => cmd_synth(a, &cli.global),
        Command::Train(a) => cmd_train(a, &cli.global),
        Command::Render(a) => cmd_render(a, &cli.global),
        Command::Eval(a) => cmd_eval(a),
    }
}

/// Argument checks that need no file access, so bad invocations fail before any work.
fn validate(cli: &Cli) -> Result<(), Failure> {
    if cli.global.threads == Some(0) {
        return Err(Failure::Usage("--threads must be at least 1".into()));
    }
    match &cli.command {
        Command::Eval(a) if a.renders.len() != a.refs.len() => Err(Failure::Usage(format!(
            "got {} --render but {} --ref",
            a.renders.len(),
            a.refs.len()
        ))),
        Command::Train(a) if a.log_every == 0 => {
            Err(Failure::Usage("--log-every must be at least 1".into()))
        }
        Command::ExtractPrior(a) => {
            for (name, v) in [("sigma", a.sigma), ("beta", a.beta), ("gamma", a.gamma)] {
                if v.is_some_and(|v| !v.is_finite()) {
                    return Err(Failure::Usage(format!("--{name} must be finite")));
                }
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn cmd_extract_prior(a: &ExtractPriorArgs, g: &Global) -> Result<(), Failure> {
    let mut cfg = PriorConfig::default();
    if let Some(v) = a.sigma {
        cfg.sigma = v;
    }
    if let Some(v) = a.beta {
        cfg.beta = v;
    }
    if let Some(v) = a.gamma {
        cfg.gamma = v;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let img = load_image(&a.input)?;
    let prior = extract_prior(&img, &cfg)?;
    save_image(&prior, &a.output)?;
    if let Some(p) = &a.preview {
        save_image(&prior, p)?;
    }
    if g.json {
        println!(
            "{}",
            json!({"output": a.output, "width": prior.width(), "height": prior.height(), "mean": prior.mean()})
        );
    } else {
        log::info!(
            "wrote {} ({}x{})",
            a.output.display(),
            prior.width(),
            prior.height()
        );
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs, g: &Global) -> Result<(), Failure> {
    let mut spec: SynthSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => SynthSpec::default(),
    };
    if let Some(s) = g.seed {
        spec.seed = s;
    }
    let manifest = synth_dataset(&spec, &a.out)?;
    let path = a.out.join("scene.json");
    if g.json {
        println!(
            "{}",
            json!({"manifest": path, "views": manifest.cameras.len()})
        );
    } else {
        log::info!(
            "wrote {} views to {}",
            manifest.cameras.len(),
            path.display()
        );
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs, g: &Global) -> Result<(), Failure> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let ds = Dataset::load(&a.scene)?;
    log::info!("{} views, {} initial points", ds.len(), ds.points.len());
    let trainer = train(&ds, &cfg, Some(&a.out), |o| {
        if o.step % a.log_every == 0 || o.step == cfg.iterations {
            if g.json {
                println!(
                    "{}",
                    json!({"step": o.step, "total": o.losses.total, "n_gaussians": o.n_gaussians})
                );
            } else {
                log::info!(
                    "step {:>6}  loss {:.5}  gaussians {}",
                    o.step,
                    o.losses.total,
                    o.n_gaussians
                );
            }
        }
    })?;
    let fin = a.out.join("final.ckpt");
    if g.json {
        println!(
            "{}",
            json!({"checkpoint": fin, "steps": trainer.step(), "n_gaussians": trainer.cloud.len()})
        );
    } else {
        log::info!("wrote {}", fin.display());
    }
    Ok(())
}

fn cmd_render(a: &RenderArgs, g: &Global) -> Result<(), Failure> {
    let cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    cfg.validate()?;
    let cam_json: CameraJson = read_json(&a.camera)?;
    let cam = Camera::from_json(&cam_json)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let bg = [a.background[0], a.background[1], a.background[2]];
    let v = render_view(&ck.cloud, ck.pdm.as_ref(), &cam, bg, &cfg)?;
    let prefix = a.out_prefix.to_string_lossy();
    let outputs = [
        ("r0", &v.r0, "png"),
        ("r", &v.r, "png"),
        ("pr", &v.pr, "pfm"),
        ("dr", &v.dr, "pfm"),
        ("lr", &v.lr, "pfm"),
        ("ngs", &v.ngs, "pfm"),
        ("i_out", &v.i_out, "png"),
    ];
    if let Some(dir) = a.out_prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    let mut written = Vec::new();
    for (name, img, ext) in outputs {
        let path = PathBuf::from(format!("{prefix}_{name}.{ext}"));
        save_image(img, &path)?;
        written.push(path);
    }
    if g.json {
        println!("{}", json!({"files": written}));
    } else {
        for p in &written {
            log::info!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<(), Failure> {
    for (r, f) in a.renders.iter().zip(&a.refs) {
        let x = load_image(r)?;
        let y = load_image(f)?;
        let p = psnr(&x, &y)?;
        let s = ssim(&x, &y)?;
        if !s.is_finite() || p.is_nan() {
            return Err(Error::NonFinite {
                step: 0,
                term: "metric".into(),
            }
            .into());
        }
        println!("{}", json!({"render": r, "ref": f, "psnr": p, "ssim": s}));
    }
    Ok(())
}

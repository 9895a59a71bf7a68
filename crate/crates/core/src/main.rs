use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use pqreg::engine::{self, AuditConfig, Checkpoint, TrainConfig};
use pqreg::io;
use pqreg::network::UNetConfig;
use pqreg::phantom::{phantom_pair, PhantomSpec, SmoothWarpSpec};
use pqreg::pipeline::{normalize_b0, preprocess};
use pqreg::steerable::Padding;

#[derive(Parser)]
#[command(name = "pqreg", version, about = "Equivariant diffeomorphic registration of raw dMRI")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic crossing-tube pairs with known smooth warps.
    Phantom(PhantomArgs),
    /// b0 normalization and SH low-pass of a single-shell container.
    Preprocess(PreprocessArgs),
    /// Train the registration network.
    Train(TrainArgs),
    /// Register a moving image to a fixed image with a checkpoint.
    Register(RegisterArgs),
    /// Compare a warped attenuation with the fixed image.
    Evaluate(EvaluateArgs),
    /// Octahedral equivariance audit; exits nonzero on failure.
    CheckEquivariance(AuditArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 24)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rician noise std relative to S0.
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    /// Largest velocity magnitude of the ground-truth warp, voxels.
    #[arg(long, default_value_t = 2.0)]
    max_velocity: f64,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 5)]
    lmax: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma_spatial: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Moving images; paired in order with `--fixed`.
    #[arg(long, required = true)]
    moving: Vec<PathBuf>,
    #[arg(long, required = true)]
    fixed: Vec<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// JSON training config; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    halve_every: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    sigma_q: Option<f64>,
    #[arg(long)]
    sigma_angular: Option<f64>,
    #[arg(long)]
    squaring_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lmax: Option<usize>,
    #[arg(long)]
    sigma_spatial: Option<f64>,
    /// Init scale of the velocity layer; 0 starts at the identity map.
    #[arg(long)]
    output_gain: Option<f64>,
    /// Gradient norm cap per step.
    #[arg(long, conflicts_with = "no_grad_clip")]
    max_grad_norm: Option<f64>,
    #[arg(long)]
    no_grad_clip: bool,
    #[arg(long)]
    depth: Option<usize>,
    /// Per-level `scalars:vectors`, comma separated, e.g. `8:4,16:8,32:16`.
    #[arg(long)]
    widths: Option<String>,
    #[arg(long)]
    periodic: bool,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    /// 4×4 affine (mm) from fixed to moving coordinates; identity if absent.
    #[arg(long)]
    affine: Option<PathBuf>,
    #[arg(long)]
    warped: PathBuf,
    #[arg(long)]
    deformation: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Warped attenuation container (output of `register`).
    #[arg(long)]
    warped: PathBuf,
    /// Raw fixed image; preprocessed with `--lmax`/`--sigma-spatial`.
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    deformation: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    sigma_q: Option<f64>,
    #[arg(long, default_value_t = 5)]
    lmax: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma_spatial: f64,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    grid: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Drop the lift sign in the transporter (negative control).
    #[arg(long)]
    fault: bool,
}

fn parse_widths(s: &str) -> anyhow::Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(|w| {
            let (a, b) = w.split_once(':').with_context(|| format!("width `{w}` is not scalars:vectors"))?;
            Ok((a.trim().parse()?, b.trim().parse()?))
        })
        .collect()
}

fn train_config(a: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut c: TrainConfig = match &a.config {
        Some(p) => io::read_json(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { c.$f = v; })* };
    }
    set!(epochs, lr, halve_every, momentum, lambda, sigma_angular, squaring_steps, seed, lmax, sigma_spatial, output_gain);
    if a.sigma_q.is_some() {
        c.sigma_q = a.sigma_q;
    }
    if a.max_grad_norm.is_some() {
        c.max_grad_norm = a.max_grad_norm;
    }
    if a.no_grad_clip {
        c.max_grad_norm = None;
    }
    if let Some(w) = &a.widths {
        c.unet.widths = parse_widths(w)?;
        c.unet.depth = c.unet.widths.len();
    }
    if let Some(d) = a.depth {
        if a.widths.is_none() {
            let base = UNetConfig::default().widths[0];
            c.unet.widths = (0..d).map(|l| (base.0 << l, base.1 << l)).collect();
        }
        c.unet.depth = d;
    }
    if a.periodic {
        c.unet.padding = Padding::Periodic;
    }
    c.validate()?;
    Ok(c)
}

fn cmd_phantom(a: &PhantomArgs) -> anyhow::Result<()> {
    std::fs::create_dir_all(&a.out_dir)?;
    let mut spec = PhantomSpec::crossing([a.size; 3]);
    spec.noise_std = a.noise * spec.s0;
    let warp = SmoothWarpSpec {
        max_velocity: a.max_velocity,
        ..SmoothWarpSpec::default()
    };
    for i in 0..a.pairs {
        let p = phantom_pair(&spec, &warp, a.seed + i as u64)?;
        let f = |name: &str| a.out_dir.join(format!("{name}_{i}"));
        io::write_volume(&f("fixed").with_extension("pqv"), &p.fixed.dwi)?;
        io::write_volume(&f("moving").with_extension("pqv"), &p.moving.dwi)?;
        io::write_mask(&f("mask").with_extension("pqm"), spec.shape, &p.fixed.labels)?;
        io::write_deformation(&f("truth").with_extension("pqd"), &p.truth)?;
        println!("pair {i}: max displacement {:.3} voxels", p.truth.max_displacement());
    }
    Ok(())
}

fn cmd_preprocess(a: &PreprocessArgs) -> anyhow::Result<()> {
    let s = io::read_volume(&a.input)?;
    let e = preprocess(&s, a.lmax, a.sigma_spatial)?;
    let out = engine::attenuation_container(e.shape, e.spacing, e.b, &e.dirs, &e.data)?;
    io::write_volume(&a.output, &out)?;
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> anyhow::Result<()> {
    if a.moving.len() != a.fixed.len() {
        bail!("{} moving images but {} fixed images", a.moving.len(), a.fixed.len());
    }
    let cfg = train_config(a)?;
    let pairs = a
        .moving
        .iter()
        .zip(&a.fixed)
        .map(|(m, f)| Ok((io::read_volume(m)?, io::read_volume(f)?)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let (ckpt, log) = engine::train(&pairs, &cfg, |m| log::info!("{}", m.to_line()))?;
    io::write_json(&a.checkpoint, &ckpt)?;
    if let Some(p) = &a.metrics {
        io::write_metrics(p, &log)?;
    }
    if let Some(last) = log.last() {
        println!("final: {}", last.to_line());
    }
    Ok(())
}

fn cmd_register(a: &RegisterArgs) -> anyhow::Result<()> {
    let ckpt: Checkpoint = io::read_json(&a.checkpoint)?;
    let moving = io::read_volume(&a.moving)?;
    let fixed = io::read_volume(&a.fixed)?;
    let affine = match &a.affine {
        Some(p) => io::read_affine(p)?,
        None => nalgebra::Matrix4::identity(),
    };
    let r = engine::register(&ckpt, &moving, &fixed, &affine)?;
    io::write_volume(&a.warped, &r.warped)?;
    io::write_deformation(&a.deformation, &r.deformation)?;
    println!("max p-displacement {:.4} voxels", r.deformation.max_displacement());
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> anyhow::Result<()> {
    let warped_raw = io::read_volume(&a.warped)?;
    let fixed_raw = io::read_volume(&a.fixed)?;
    let fixed = engine::octahedral_columns(&preprocess(&fixed_raw, a.lmax, a.sigma_spatial)?)?;
    let warped = engine::octahedral_columns(&normalize_b0(&warped_raw)?.remove(0))?;
    let labels = match &a.mask {
        Some(p) => Some(io::read_mask(p)?.1),
        None => None,
    };
    let deform = match (&a.deformation, &a.truth) {
        (Some(d), Some(t)) => Some((io::read_deformation(d)?, io::read_deformation(t)?)),
        (None, None) => None,
        _ => bail!("--deformation and --truth go together"),
    };
    let b = fixed_raw.qvecs.iter().map(|q| q.b).fold(0.0, f64::max);
    let sigma_q = a.sigma_q.unwrap_or(b.sqrt());
    let q_norms = vec![b.sqrt(); fixed.ncols()];
    let report = engine::evaluate(&warped, &fixed, &q_norms, sigma_q, labels.as_deref(), deform.as_ref().map(|(d, t)| (d, t)))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(p) = &a.report {
        io::write_json(p, &report)?;
    }
    Ok(())
}

fn cmd_audit(a: &AuditArgs) -> anyhow::Result<bool> {
    let ckpt: Option<Checkpoint> = match &a.checkpoint {
        Some(p) => Some(io::read_json(p)?),
        None => None,
    };
    let cfg = AuditConfig {
        grid: a.grid,
        seed: a.seed,
        fault: a.fault,
        ..AuditConfig::default()
    };
    let report = engine::check_equivariance(ckpt.as_ref().map(|c| (&c.config.unet, &c.params)), &cfg)?;
    for (stage, r) in &report.stages {
        let mark = if *r < report.threshold { "ok" } else { "FAIL" };
        println!("{stage:<18} {r:.3e}  {mark}");
    }
    println!("identity residual  {:.3e}", report.identity_residual);
    Ok(report.passed())
}

fn threads_from_env() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("PQREG_THREADS") {
        let n: usize = v.parse().with_context(|| format!("PQREG_THREADS={v} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    threads_from_env()?;
    match &cli.cmd {
        Command::Phantom(a) => cmd_phantom(a)?,
        Command::Preprocess(a) => cmd_preprocess(a)?,
        Command::Train(a) => cmd_train(a)?,
        Command::Register(a) => cmd_register(a)?,
        Command::Evaluate(a) => cmd_evaluate(a)?,
        Command::CheckEquivariance(a) => return cmd_audit(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

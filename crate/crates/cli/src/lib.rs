//! Command-line front-end for the evpix simulator.
//!
//! Settings are layered: built-in defaults, then an optional TOML file
//! (`--config`), then flags. Every run writes `manifest.toml` next to its
//! outputs; `evpix replay manifest.toml --out DIR` reruns it.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use evpix::event_stream::SigmaAlphaMode;

use config::{ConfigError, Manifest, ModelSection, RunConfig, SamplerChoice, StreamFormat};

#[derive(Debug, Parser)]
#[command(name = "evpix", version, about = "Event-pixel simulator and exit-time diagnostics")]
pub struct Cli {
    /// Worker threads (default: available parallelism). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ModelArgs {
    /// Filter cutoff (rad/s).
    #[arg(long, allow_hyphen_values = true)]
    pub omega: Option<f64>,
    /// Refractory period (s).
    #[arg(long, allow_hyphen_values = true)]
    pub rho: Option<f64>,
    /// Normalized off threshold.
    #[arg(long, allow_hyphen_values = true)]
    pub theta_minus: Option<f64>,
    /// Normalized on threshold.
    #[arg(long, allow_hyphen_values = true)]
    pub theta_plus: Option<f64>,
    #[arg(long, value_parser = parse_mode)]
    pub sigma_alpha_mode: Option<SigmaAlphaMode>,
}

fn parse_mode(s: &str) -> Result<SigmaAlphaMode, String> {
    match s {
        "paper-literal" => Ok(SigmaAlphaMode::PaperLiteral),
        "sde-consistent" => Ok(SigmaAlphaMode::SdeConsistent),
        _ => Err(format!("expected paper-literal or sde-consistent, got {s}")),
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate an event stream and summarize it.
    Stream {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, allow_hyphen_values = true)]
        start: Option<f64>,
        #[arg(long, value_enum)]
        sampler: Option<SamplerChoice>,
        #[arg(long)]
        lattice_spacing: Option<f64>,
        #[arg(long, value_enum)]
        format: Option<StreamFormat>,
        #[arg(long)]
        bins_per_decade: Option<usize>,
    },
    /// Exit statistics of one OU exit problem.
    ExitStats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        omega: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        lower: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        upper: Option<f64>,
        /// Start point.
        #[arg(long, allow_hyphen_values = true)]
        x: Option<f64>,
        /// Monte Carlo samples per sampler.
        #[arg(long)]
        n: Option<usize>,
        /// Exit with code 3 when the samplers disagree.
        #[arg(long)]
        cross_check: bool,
    },
    /// Conditional event probabilities and expectations over a z grid.
    Conditionals {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, allow_hyphen_values = true)]
        z_min: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        z_max: Option<f64>,
        #[arg(long)]
        points: Option<usize>,
        /// Events of a Monte Carlo overlay (0 disables).
        #[arg(long)]
        overlay_events: Option<usize>,
    },
    /// Deterministic recursion, cobweb trace and fixed points.
    Dynamics {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, allow_hyphen_values = true)]
        z0: Option<f64>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Kernel density estimates of m-step transition densities.
    Mstep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, allow_hyphen_values = true)]
        z: Option<f64>,
        /// Comma-separated step counts.
        #[arg(long, value_delimiter = ',')]
        m: Option<Vec<usize>>,
        #[arg(long)]
        replicas: Option<usize>,
    },
    /// Rerun a manifest.
    Replay {
        manifest: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn base(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, common.seed);
    Ok(cfg)
}

fn apply_model(cfg: &mut RunConfig, m: &ModelArgs) -> anyhow::Result<()> {
    let any = m.omega.is_some() || m.rho.is_some() || m.theta_minus.is_some() || m.theta_plus.is_some();
    if !any && m.sigma_alpha_mode.is_none() {
        return Ok(());
    }
    if cfg.front_end.is_some() {
        if any {
            return Err(ConfigError("model flags given with a [front_end] configuration".into()).into());
        }
        cfg.front_end.as_mut().unwrap().sigma_alpha_mode = m.sigma_alpha_mode.unwrap();
        return Ok(());
    }
    let s = cfg.model.get_or_insert_with(ModelSection::default);
    s.omega = m.omega.or(s.omega);
    s.rho = m.rho.or(s.rho);
    s.theta_minus = m.theta_minus.or(s.theta_minus);
    s.theta_plus = m.theta_plus.or(s.theta_plus);
    s.sigma_alpha_mode = m.sigma_alpha_mode.or(s.sigma_alpha_mode);
    Ok(())
}

/// Resolved command name, configuration and output directory.
pub fn resolve(cmd: Command) -> anyhow::Result<(String, RunConfig, PathBuf)> {
    Ok(match cmd {
        Command::Stream { common, model, n, start, sampler, lattice_spacing, format, bins_per_decade } => {
            let mut cfg = base(&common)?;
            apply_model(&mut cfg, &model)?;
            let s = &mut cfg.stream;
            set(&mut s.n, n);
            set(&mut s.start, start);
            set(&mut s.sampler, sampler);
            set(&mut s.lattice_spacing, lattice_spacing);
            set(&mut s.format, format);
            set(&mut s.bins_per_decade, bins_per_decade);
            ("stream".into(), cfg, common.out)
        }
        Command::ExitStats { common, omega, lower, upper, x, n, cross_check } => {
            let mut cfg = base(&common)?;
            let e = &mut cfg.exit;
            set(&mut e.omega, omega);
            set(&mut e.lower, lower);
            set(&mut e.upper, upper);
            set(&mut e.start, x);
            set(&mut e.n, n);
            e.cross_check |= cross_check;
            ("exit-stats".into(), cfg, common.out)
        }
        Command::Conditionals { common, model, z_min, z_max, points, overlay_events } => {
            let mut cfg = base(&common)?;
            apply_model(&mut cfg, &model)?;
            let c = &mut cfg.conditionals;
            set(&mut c.z_min, z_min);
            set(&mut c.z_max, z_max);
            set(&mut c.points, points);
            set(&mut c.overlay_events, overlay_events);
            ("conditionals".into(), cfg, common.out)
        }
        Command::Dynamics { common, model, z0, n } => {
            let mut cfg = base(&common)?;
            apply_model(&mut cfg, &model)?;
            set(&mut cfg.dynamics.z0, z0);
            set(&mut cfg.dynamics.n, n);
            ("dynamics".into(), cfg, common.out)
        }
        Command::Mstep { common, model, z, m, replicas } => {
            let mut cfg = base(&common)?;
            apply_model(&mut cfg, &model)?;
            set(&mut cfg.mstep.z, z);
            set(&mut cfg.mstep.m, m);
            set(&mut cfg.mstep.replicas, replicas);
            ("mstep".into(), cfg, common.out)
        }
        Command::Replay { manifest, out } => {
            let m = Manifest::from_file(&manifest)?;
            if m.version != env!("CARGO_PKG_VERSION") {
                eprintln!("warning: manifest written by version {}", m.version);
            }
            (m.command, m.config, out)
        }
    })
}

/// Parses nothing; runs an already parsed command line.
pub fn execute(cli: Cli) -> anyhow::Result<String> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let (command, cfg, out) = resolve(cli.command)?;
    commands::run(&command, &cfg, &out)
}

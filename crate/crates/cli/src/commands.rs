//! Subcommand implementations. Each writes its files into an output
//! directory and returns the text printed on standard output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use evpix::analysis::{isi_histograms, ks_two_sample, mean_and_se, summarize, KsResult, SummaryTable};
use evpix::dynamics::{
    critical_point, default_search_interval, find_fixed_points, iterate_conditionals, lemeray_trace,
    near_determinism_interval, write_lemeray_csv, Classification, CriticalPoint, FixedPointReport,
};
use evpix::event_stream::{
    conditional_event_probs, conditional_expected_isi, conditional_expected_z, m_step_density_kde,
    simulate_event_stream, Polarity, StreamOptions, TimeSampler,
};
use evpix::ou_exit::{
    exit_side_probs, expected_exit_position, expected_exit_time, oracle_step, sample_exit_path_oracle, sample_exit_pathfree,
    ExitProblem, ExitSample, ExitTimeTable, Side, TableOptions,
};
use evpix::rng::stream;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Manifest, RunConfig, SamplerChoice, StreamFormat, MANIFEST_FILE};

/// A run whose numbers came out but failed a requested check.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct CheckFailed(pub String);

fn create(out: &Path, name: &str) -> anyhow::Result<BufWriter<File>> {
    let path = out.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json<T: Serialize>(out: &Path, name: &str, value: &T) -> anyhow::Result<()> {
    let mut w = create(out, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub const COMMANDS: [&str; 5] = ["stream", "exit-stats", "conditionals", "dynamics", "mstep"];

/// Runs `command`, writing its outputs and the manifest into `out`.
pub fn run(command: &str, cfg: &RunConfig, out: &Path) -> anyhow::Result<String> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let text = match command {
        "stream" => cmd_stream(cfg, out)?.to_string(),
        "exit-stats" => render(&cmd_exit_stats(cfg, out)?)?,
        "conditionals" => render(&cmd_conditionals(cfg, out)?)?,
        "dynamics" => render(&cmd_dynamics(cfg, out)?)?,
        "mstep" => render(&cmd_mstep(cfg, out)?)?,
        other => anyhow::bail!(crate::config::ConfigError(format!("unknown command {other:?}"))),
    };
    let mut w = create(out, MANIFEST_FILE)?;
    w.write_all(Manifest::new(command, cfg).to_toml()?.as_bytes())?;
    w.flush()?;
    Ok(text)
}

fn render<T: Serialize>(v: &T) -> anyhow::Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

pub fn stream_options(cfg: &RunConfig) -> StreamOptions {
    let s = &cfg.stream;
    let sampler = match s.sampler {
        SamplerChoice::Pathfree => TimeSampler::Lattice { spacing: s.lattice_spacing },
        SamplerChoice::PathfreeExact => TimeSampler::Exact,
        SamplerChoice::Oracle => TimeSampler::PathOracle { dt_factor: s.oracle_dt_factor },
    };
    StreamOptions {
        sampler,
        table: TableOptions::default(),
    }
}

/// Event stream, summary table and ISI histograms.
pub fn cmd_stream(cfg: &RunConfig, out: &Path) -> anyhow::Result<SummaryTable> {
    let p = cfg.model_params()?;
    let s = simulate_event_stream(&p, cfg.stream.start, cfg.stream.n, cfg.seed, &stream_options(cfg))?;
    match cfg.stream.format {
        StreamFormat::Jsonl => {
            let mut w = create(out, "events.jsonl")?;
            s.write_jsonl(&mut w)?;
            w.flush()?;
        }
        StreamFormat::Csv => {
            let mut w = create(out, "events.csv")?;
            s.write_csv(&mut w)?;
            w.flush()?;
        }
    }
    let table = summarize(&s)?;
    write_json(out, "summary.json", &table)?;
    let mut w = create(out, "summary.txt")?;
    write!(w, "{table}")?;
    w.flush()?;
    let h = isi_histograms(&s, cfg.stream.bins_per_decade)?;
    let mut w = create(out, "isi_histograms.csv")?;
    h.write_csv(&mut w)?;
    w.flush()?;
    Ok(table)
}

#[derive(Debug, Clone, Serialize)]
pub struct SamplerStats {
    pub n: usize,
    pub mean_time: f64,
    pub se_time: f64,
    pub lower_fraction: f64,
}

impl SamplerStats {
    fn of(s: &[ExitSample]) -> Self {
        let t: Vec<f64> = s.iter().map(|e| e.time).collect();
        let (mean_time, se_time) = mean_and_se(&t);
        Self {
            n: s.len(),
            mean_time,
            se_time,
            lower_fraction: s.iter().filter(|e| e.side == Side::Lower).count() as f64 / s.len() as f64,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExitStatsReport {
    pub problem: ExitProblem,
    pub prob_lower: f64,
    pub prob_upper: f64,
    /// Seconds.
    pub expected_exit_time: f64,
    pub expected_exit_position: f64,
    /// Set when the start lies on a boundary.
    pub immediate_exit: Option<Side>,
    pub conditional_mean_lower: Option<f64>,
    pub conditional_mean_upper: Option<f64>,
    pub pathfree: Option<SamplerStats>,
    pub oracle: Option<SamplerStats>,
    pub ks: Option<KsResult>,
    pub cross_check_passed: Option<bool>,
}

/// Closed-form exit statistics, conditional densities and Monte Carlo
/// samples from both samplers.
pub fn cmd_exit_stats(cfg: &RunConfig, out: &Path) -> anyhow::Result<ExitStatsReport> {
    let e = &cfg.exit;
    let p = ExitProblem::new(e.omega, e.lower, e.upper, e.start)?;
    let (prob_lower, prob_upper) = exit_side_probs(&p)?;
    let mut report = ExitStatsReport {
        problem: p,
        prob_lower,
        prob_upper,
        expected_exit_time: expected_exit_time(&p)?,
        expected_exit_position: expected_exit_position(&p)?,
        immediate_exit: p.boundary_side(),
        conditional_mean_lower: None,
        conditional_mean_upper: None,
        pathfree: None,
        oracle: None,
        ks: None,
        cross_check_passed: None,
    };
    if report.immediate_exit.is_some() {
        write_json(out, "exit_stats.json", &report)?;
        return Ok(report);
    }
    if e.n < 2 {
        return Err(crate::config::ConfigError("exit.n must be at least 2".into()).into());
    }
    let table = ExitTimeTable::build(&p, &TableOptions::default())?;
    report.conditional_mean_lower = Some(table.conditional_mean(Side::Lower));
    report.conditional_mean_upper = Some(table.conditional_mean(Side::Upper));

    let t_end = table.quantile(Side::Lower, 0.999)?.max(table.quantile(Side::Upper, 0.999)?);
    let mut w = create(out, "exit_densities.csv")?;
    writeln!(w, "# t in seconds; densities in 1/s, conditional on the exit side")?;
    writeln!(w, "t,density_lower,density_upper,cdf_lower,cdf_upper")?;
    for k in 0..e.density_points.max(2) {
        let t = t_end * k as f64 / (e.density_points.max(2) - 1) as f64;
        writeln!(
            w,
            "{t},{},{},{},{}",
            table.density(Side::Lower, t),
            table.density(Side::Upper, t),
            table.cdf(Side::Lower, t),
            table.cdf(Side::Upper, t)
        )?;
    }
    w.flush()?;

    let dt = oracle_step(&p, e.oracle_dt_factor);
    let a: Vec<ExitSample> = (0..e.n as u64)
        .into_par_iter()
        .map(|i| sample_exit_pathfree(&p, &table, &mut stream(cfg.seed, "exit-pathfree", i)))
        .collect::<Result<_, _>>()?;
    let b: Vec<ExitSample> = (0..e.n as u64)
        .into_par_iter()
        .map(|i| sample_exit_path_oracle(&p, dt, &mut stream(cfg.seed, "exit-oracle", i)))
        .collect::<Result<_, _>>()?;
    let mut w = create(out, "exit_samples.csv")?;
    writeln!(w, "# time in seconds")?;
    writeln!(w, "sampler,side,time")?;
    for (name, s) in [("pathfree", &a), ("oracle", &b)] {
        for x in s.iter() {
            let side = match x.side {
                Side::Lower => "lower",
                Side::Upper => "upper",
            };
            writeln!(w, "{name},{side},{}", x.time)?;
        }
    }
    w.flush()?;
    let ta: Vec<f64> = a.iter().map(|x| x.time).collect();
    let tb: Vec<f64> = b.iter().map(|x| x.time).collect();
    let ks = ks_two_sample(&ta, &tb)?;
    let pa = SamplerStats::of(&a);
    let pb = SamplerStats::of(&b);
    let sd = (prob_lower * prob_upper / e.n as f64).sqrt();
    let sides_ok = (pa.lower_fraction - prob_lower).abs() <= 3.0 * sd && (pb.lower_fraction - prob_lower).abs() <= 3.0 * sd;
    let passed = ks.p_value >= e.ks_alpha && sides_ok;
    report.pathfree = Some(pa);
    report.oracle = Some(pb);
    report.ks = Some(ks);
    report.cross_check_passed = Some(passed);
    write_json(out, "exit_stats.json", &report)?;
    if e.cross_check && !passed {
        return Err(CheckFailed(format!(
            "samplers disagree: KS p = {:.3e}, side frequencies within 3 sigma: {sides_ok}",
            ks.p_value
        ))
        .into());
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionalsReport {
    pub critical_point: CriticalPoint,
    pub overlay_bins: usize,
}

/// Conditional curves over a z grid plus the critical-point report.
pub fn cmd_conditionals(cfg: &RunConfig, out: &Path) -> anyhow::Result<ConditionalsReport> {
    let p = cfg.model_params()?;
    let c = &cfg.conditionals;
    if !(c.z_min < c.z_max) || c.points < 2 {
        return Err(crate::config::ConfigError("conditionals: need z_min < z_max and points >= 2".into()).into());
    }
    let zs: Vec<f64> = (0..c.points)
        .map(|i| c.z_min + (c.z_max - c.z_min) * i as f64 / (c.points - 1) as f64)
        .collect();
    let rows: Vec<[f64; 5]> = zs
        .par_iter()
        .map(|&z| {
            let (off, on) = conditional_event_probs(&p, z)?;
            Ok([z, on, off, conditional_expected_isi(&p, z)?, conditional_expected_z(&p, z)?])
        })
        .collect::<evpix::error::Result<_>>()?;
    let mut w = create(out, "conditionals.csv")?;
    writeln!(w, "# z dimensionless; e_isi in seconds")?;
    writeln!(w, "z,p_on,p_off,e_isi,e_z")?;
    for r in &rows {
        writeln!(w, "{},{},{},{},{}", r[0], r[1], r[2], r[3], r[4])?;
    }
    w.flush()?;
    let cp = critical_point(&p)?;
    write_json(out, "critical_point.json", &cp)?;
    let mut overlay_bins = 0;
    if c.overlay_events > 0 {
        let s = simulate_event_stream(&p, cfg.stream.start, c.overlay_events, cfg.seed, &stream_options(cfg))?;
        let mut bins: std::collections::BTreeMap<i64, Vec<(bool, f64, f64)>> = Default::default();
        for e in &s.events {
            let k = (e.z_before / c.overlay_bin_width).floor() as i64;
            bins.entry(k).or_default().push((e.polarity == Polarity::On, e.isi, e.z_after));
        }
        let mut w = create(out, "conditionals_overlay.csv")?;
        writeln!(w, "# binned by reference level before each event; isi in seconds")?;
        writeln!(w, "z_center,count,p_on,mean_isi,mean_z_next")?;
        for (k, v) in &bins {
            let n = v.len() as f64;
            let z = (*k as f64 + 0.5) * c.overlay_bin_width;
            let on = v.iter().filter(|x| x.0).count() as f64 / n;
            let isi = v.iter().map(|x| x.1).sum::<f64>() / n;
            let zn = v.iter().map(|x| x.2).sum::<f64>() / n;
            writeln!(w, "{z},{},{on},{isi},{zn}", v.len())?;
        }
        w.flush()?;
        overlay_bins = bins.len();
    }
    Ok(ConditionalsReport {
        critical_point: cp,
        overlay_bins,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct NearDeterminism {
    pub level: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DynamicsReport {
    pub z0: f64,
    pub n: usize,
    pub classification: Classification,
    pub fixed_points: Vec<FixedPointReport>,
    pub critical_point: CriticalPoint,
    pub near_determinism: Option<NearDeterminism>,
}

/// Recursion iterates, cobweb trace and fixed-point report.
pub fn cmd_dynamics(cfg: &RunConfig, out: &Path) -> anyhow::Result<DynamicsReport> {
    let p = cfg.model_params()?;
    let d = &cfg.dynamics;
    let trace = iterate_conditionals(&p, d.z0, d.n)?;
    let mut w = create(out, "iterates.csv")?;
    writeln!(w, "# z dimensionless; w_k in seconds")?;
    trace.write_csv(&mut w)?;
    w.flush()?;
    let cob = lemeray_trace(&p, d.z0, d.n)?;
    let mut w = create(out, "cobweb.csv")?;
    writeln!(w, "# plot coordinates (dimensionless) of each cobweb vertex")?;
    write_lemeray_csv(&cob, &mut w)?;
    w.flush()?;
    let report = DynamicsReport {
        z0: d.z0,
        n: d.n,
        classification: trace.classification,
        fixed_points: find_fixed_points(&p, default_search_interval(&p))?,
        critical_point: critical_point(&p)?,
        near_determinism: near_determinism_interval(&p, d.determinism_level)
            .ok()
            .map(|(lower, upper)| NearDeterminism {
                level: d.determinism_level,
                lower,
                upper,
            }),
    };
    write_json(out, "dynamics.json", &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct MstepCurve {
    pub m: usize,
    pub bandwidth: f64,
    pub mode: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MstepReport {
    pub start: f64,
    pub replicas: usize,
    pub z_star: f64,
    pub curves: Vec<MstepCurve>,
}

/// Kernel density estimates of the m-step transition densities.
pub fn cmd_mstep(cfg: &RunConfig, out: &Path) -> anyhow::Result<MstepReport> {
    let p = cfg.model_params()?;
    let m = &cfg.mstep;
    let curves = m_step_density_kde(&p, m.z, &m.m, m.replicas, cfg.seed)?;
    let mut w = create(out, "mstep.csv")?;
    writeln!(w, "# z dimensionless; density per unit z")?;
    writeln!(w, "m,z,density")?;
    for (k, c) in &curves {
        for (z, f) in c.grid.iter().zip(&c.density) {
            writeln!(w, "{k},{z},{f}")?;
        }
    }
    w.flush()?;
    let report = MstepReport {
        start: m.z,
        replicas: m.replicas,
        z_star: critical_point(&p)?.probability_crossing,
        curves: curves
            .iter()
            .map(|(k, c)| MstepCurve {
                m: *k,
                bandwidth: c.bandwidth,
                mode: c.mode(),
            })
            .collect(),
    };
    write_json(out, "mstep.json", &report)?;
    Ok(report)
}

/// Process exit code for a failed run: 2 for bad input, 3 for numerical
/// or check failures, 1 for anything else (I/O).
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<crate::config::ConfigError>().is_some() {
        return 2;
    }
    if let Some(e) = err.downcast_ref::<evpix::error::Error>() {
        return if e.is_validation() { 2 } else { 3 };
    }
    if err.downcast_ref::<CheckFailed>().is_some() {
        return 3;
    }
    1
}

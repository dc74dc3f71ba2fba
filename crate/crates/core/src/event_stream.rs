//! Event generation for the canonical pixel model.
//!
//! After each event the reference voltage is reset to `Z_n` and the
//! filtered voltage leaves `[Z_n - theta_minus, Z_n + theta_plus]` after an
//! OU exit time. The reference chain obeys
//!
//! ```text
//! Z_n   = alpha * X_{T_n} + sigma_alpha * xi_n,   alpha = exp(-omega rho)
//! ISI_n = rho + tau_n
//! ```
//!
//! where `X_{T_n}` is the exit position. Because the side of the exit only
//! depends on `Z_{n-1}`, the chain can be simulated without any exit times;
//! the times are then filled in independently per event.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{kde, KdeCurve};
use crate::error::{Error, Result};
use crate::ou_exit::{
    exit_side_probs, expected_exit_time, sample_exit_path_oracle, ExitProblem, ExitTableCache, ExitTimeTable, Side,
    TableOptions,
};
use crate::rng::stream;
use crate::specfun::normal_pdf;

/// Variance convention for the reference reset noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaAlphaMode {
    /// `sigma_alpha^2 = (1 - alpha^2) / 2`.
    #[default]
    PaperLiteral,
    /// `sigma_alpha^2 = (1 - alpha^2) / (2 omega)`, the OU transition variance over `rho`.
    SdeConsistent,
}

/// The four effective parameters of the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub omega: f64,
    pub rho: f64,
    pub theta_minus_tilde: f64,
    pub theta_plus_tilde: f64,
    #[serde(default)]
    pub sigma_alpha_mode: SigmaAlphaMode,
}

impl ModelParams {
    pub fn new(omega: f64, rho: f64, theta_minus_tilde: f64, theta_plus_tilde: f64) -> Result<Self> {
        let p = Self {
            omega,
            rho,
            theta_minus_tilde,
            theta_plus_tilde,
            sigma_alpha_mode: SigmaAlphaMode::PaperLiteral,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_mode(mut self, mode: SigmaAlphaMode) -> Self {
        self.sigma_alpha_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(Error::invalid("omega", format!("must be positive and finite, got {}", self.omega)));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::invalid("rho", format!("must be non-negative and finite, got {}", self.rho)));
        }
        if !(self.theta_minus_tilde > 0.0 && self.theta_minus_tilde.is_finite()) {
            return Err(Error::invalid(
                "theta_minus",
                format!("must be positive and finite, got {}", self.theta_minus_tilde),
            ));
        }
        if !(self.theta_plus_tilde > 0.0 && self.theta_plus_tilde.is_finite()) {
            return Err(Error::invalid(
                "theta_plus",
                format!("must be positive and finite, got {}", self.theta_plus_tilde),
            ));
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        (-self.omega * self.rho).exp()
    }

    pub fn sigma_alpha(&self) -> f64 {
        let one_minus_a2 = -(-2.0 * self.omega * self.rho).exp_m1();
        match self.sigma_alpha_mode {
            SigmaAlphaMode::PaperLiteral => (one_minus_a2 / 2.0).sqrt(),
            SigmaAlphaMode::SdeConsistent => (one_minus_a2 / (2.0 * self.omega)).sqrt(),
        }
    }

    /// Parameters with the two thresholds swapped.
    pub fn mirrored(&self) -> Self {
        Self {
            theta_minus_tilde: self.theta_plus_tilde,
            theta_plus_tilde: self.theta_minus_tilde,
            ..*self
        }
    }

    /// Exit problem faced when the reference voltage is `z`.
    pub fn exit_problem(&self, z: f64) -> Result<ExitProblem> {
        ExitProblem::around(self.omega, z, self.theta_minus_tilde, self.theta_plus_tilde)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    On,
    Off,
}

impl Polarity {
    pub fn from_side(side: Side) -> Self {
        match side {
            Side::Lower => Polarity::Off,
            Side::Upper => Polarity::On,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Polarity::On => "on",
            Polarity::Off => "off",
        }
    }
}

/// One event and the reference-voltage update it triggers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub index: u64,
    #[serde(rename = "timestamp_s")]
    pub timestamp: f64,
    pub polarity: Polarity,
    #[serde(rename = "isi_s")]
    pub isi: f64,
    pub z_before: f64,
    pub z_after: f64,
    pub exit_position: f64,
    /// Standard normal draw of the reset; not serialized.
    #[serde(skip)]
    pub xi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventStream {
    pub params: ModelParams,
    pub seed: u64,
    pub start: f64,
    pub events: Vec<Event>,
}

/// How exit times are drawn for each event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TimeSampler {
    /// Path-free sampler with a table built for every event's own start.
    Exact,
    /// Path-free sampler reusing tables on a lattice in `z`; quantiles are
    /// interpolated linearly between the two neighbouring lattice points.
    Lattice { spacing: f64 },
    /// Bridge-corrected path simulation with step `dt_factor / omega`.
    PathOracle { dt_factor: f64 },
}

impl Default for TimeSampler {
    fn default() -> Self {
        TimeSampler::Lattice { spacing: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StreamOptions {
    pub sampler: TimeSampler,
    pub table: TableOptions,
}

/// Stream labels for the seeded generators.
pub mod labels {
    pub const CHAIN: &str = "chain";
    pub const EXIT_TIME: &str = "exit-time";
    pub const ORACLE: &str = "exit-oracle";
    pub const STATIONARY: &str = "stationary";
    pub const MSTEP: &str = "mstep";
}

/// One step of the reference chain from `z`: exit side and new value.
fn chain_step<R: Rng + ?Sized>(p: &ModelParams, z: f64, rng: &mut R) -> Result<(Side, f64, f64, f64)> {
    let (p_off, _) = exit_side_probs(&p.exit_problem(z)?)?;
    let side = if rng.gen::<f64>() < p_off { Side::Lower } else { Side::Upper };
    let xi: f64 = rng.sample(StandardNormal);
    let x = exit_position(p, z, side);
    Ok((side, x, xi, p.alpha() * x + p.sigma_alpha() * xi))
}

fn exit_position(p: &ModelParams, z: f64, side: Side) -> f64 {
    match side {
        Side::Lower => z - p.theta_minus_tilde,
        Side::Upper => z + p.theta_plus_tilde,
    }
}

/// Reference chain `Z_0 = start, Z_1, ..., Z_n` without exit times.
pub fn simulate_reference_chain<R: Rng + ?Sized>(p: &ModelParams, start: f64, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    p.validate()?;
    if n < 1 {
        return Err(Error::invalid("n", "must be at least 1"));
    }
    if !start.is_finite() {
        return Err(Error::invalid("start", "must be finite"));
    }
    let mut out = Vec::with_capacity(n + 1);
    let mut z = start;
    out.push(z);
    for _ in 0..n {
        z = chain_step(p, z, rng)?.3;
        out.push(z);
    }
    Ok(out)
}

fn lattice_table(
    p: &ModelParams,
    cache: &ExitTableCache,
    spacing: f64,
    key: i64,
    opts: &TableOptions,
) -> Result<std::sync::Arc<ExitTimeTable>> {
    cache.get_or_build(key, || ExitTimeTable::build(&p.exit_problem(key as f64 * spacing)?, opts))
}

/// Exit time for an event whose side is already known.
fn draw_exit_time(
    p: &ModelParams,
    z: f64,
    side: Side,
    u: f64,
    opts: &StreamOptions,
    cache: &ExitTableCache,
) -> Result<f64> {
    match opts.sampler {
        TimeSampler::Exact => ExitTimeTable::build(&p.exit_problem(z)?, &opts.table)?.quantile(side, u),
        TimeSampler::Lattice { spacing } => {
            let pos = z / spacing;
            let k0 = pos.floor();
            let w = pos - k0;
            let k0 = k0 as i64;
            let t0 = lattice_table(p, cache, spacing, k0, &opts.table)?.quantile(side, u)?;
            if w == 0.0 {
                return Ok(t0);
            }
            let t1 = lattice_table(p, cache, spacing, k0 + 1, &opts.table)?.quantile(side, u)?;
            Ok((1.0 - w) * t0 + w * t1)
        }
        TimeSampler::PathOracle { .. } => unreachable!("oracle times are drawn jointly with the side"),
    }
}

/// Event stream of `n` events from `Z_0 = start` with master seed `seed`.
///
/// The chain is drawn from the `chain` stream; the exit time of event `i`
/// comes from its own `exit-time` stream, so the times are computed in
/// parallel and the result does not depend on the thread count. With the
/// path oracle the side and time come jointly from per-event `exit-oracle`
/// streams.
pub fn simulate_event_stream(p: &ModelParams, start: f64, n: usize, seed: u64, opts: &StreamOptions) -> Result<EventStream> {
    p.validate()?;
    if n < 1 {
        return Err(Error::invalid("n", "must be at least 1"));
    }
    if !start.is_finite() {
        return Err(Error::invalid("start", "must be finite"));
    }
    if let TimeSampler::Lattice { spacing } = opts.sampler {
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::invalid("spacing", "must be positive and finite"));
        }
    }
    let alpha = p.alpha();
    let sigma_alpha = p.sigma_alpha();
    let mut chain_rng = stream(seed, labels::CHAIN, 0);
    let mut events = Vec::with_capacity(n);
    let mut z = start;
    if let TimeSampler::PathOracle { dt_factor } = opts.sampler {
        let dt = dt_factor / p.omega;
        for i in 0..n {
            let mut rng = stream(seed, labels::ORACLE, i as u64);
            let s = sample_exit_path_oracle(&p.exit_problem(z)?, dt, &mut rng)?;
            let xi: f64 = chain_rng.sample(StandardNormal);
            let x = exit_position(p, z, s.side);
            let z_after = alpha * x + sigma_alpha * xi;
            events.push(Event {
                index: i as u64 + 1,
                timestamp: 0.0,
                polarity: Polarity::from_side(s.side),
                isi: p.rho + s.time,
                z_before: z,
                z_after,
                exit_position: x,
                xi,
            });
            z = z_after;
        }
    } else {
        for i in 0..n {
            let (side, x, xi, z_after) = chain_step(p, z, &mut chain_rng)?;
            events.push(Event {
                index: i as u64 + 1,
                timestamp: 0.0,
                polarity: Polarity::from_side(side),
                isi: 0.0,
                z_before: z,
                z_after,
                exit_position: x,
                xi,
            });
            z = z_after;
        }
        let cache = ExitTableCache::new();
        let taus: Vec<Result<f64>> = events
            .par_iter()
            .enumerate()
            .map(|(i, e)| {
                let u: f64 = stream(seed, labels::EXIT_TIME, i as u64).gen();
                let side = match e.polarity {
                    Polarity::Off => Side::Lower,
                    Polarity::On => Side::Upper,
                };
                draw_exit_time(p, e.z_before, side, u, opts, &cache)
            })
            .collect();
        for (e, tau) in events.iter_mut().zip(taus) {
            e.isi = p.rho + tau?;
        }
    }
    let mut t = 0.0;
    for e in events.iter_mut() {
        t += e.isi;
        e.timestamp = t;
    }
    Ok(EventStream {
        params: *p,
        seed,
        start,
        events,
    })
}

/// Density of `Z_n` given `Z_{n-1} = z`: a two-component normal mixture.
pub fn one_step_transition_density(p: &ModelParams, z: f64, z_prime: f64) -> Result<f64> {
    p.validate()?;
    let s = p.sigma_alpha();
    if s == 0.0 {
        return Err(Error::Domain {
            function: "one_step_transition_density",
            reason: "rho = 0 makes the transition a point mass".into(),
        });
    }
    let (pl, pu) = conditional_event_probs(p, z)?;
    let a = p.alpha();
    let ml = a * (z - p.theta_minus_tilde);
    let mu = a * (z + p.theta_plus_tilde);
    Ok(pl * normal_pdf((z_prime - ml) / s) / s + pu * normal_pdf((z_prime - mu) / s) / s)
}

/// `(P(off | Z_{n-1} = z), P(on | Z_{n-1} = z))`.
pub fn conditional_event_probs(p: &ModelParams, z: f64) -> Result<(f64, f64)> {
    p.validate()?;
    exit_side_probs(&p.exit_problem(z)?)
}

/// `E(ISI_n | Z_{n-1} = z) = rho + E tau`.
pub fn conditional_expected_isi(p: &ModelParams, z: f64) -> Result<f64> {
    p.validate()?;
    Ok(p.rho + expected_exit_time(&p.exit_problem(z)?)?)
}

/// `E(Z_n | Z_{n-1} = z) = alpha (z - theta_minus P_off + theta_plus P_on)`.
pub fn conditional_expected_z(p: &ModelParams, z: f64) -> Result<f64> {
    let (p_off, p_on) = conditional_event_probs(p, z)?;
    Ok(p.alpha() * (z - p.theta_minus_tilde * p_off + p.theta_plus_tilde * p_on))
}

/// Monte Carlo stationary statistics from the reference chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationaryStats {
    pub pi_off: f64,
    pub pi_on: f64,
    pub mean_isi: f64,
    pub r_total: f64,
    pub r_on: f64,
    pub r_off: f64,
    pub samples: usize,
}

/// Default number of discarded chain steps.
pub const DEFAULT_BURN_IN: usize = 10_000;

/// Average the conditional event probabilities and mean ISI over a long
/// chain run from `start`, after discarding `burn_in` steps.
pub fn stationary_stats(p: &ModelParams, start: f64, burn_in: usize, samples: usize, seed: u64) -> Result<StationaryStats> {
    p.validate()?;
    if burn_in < 1000 {
        return Err(Error::invalid("burn_in", "must be at least 1000"));
    }
    if samples < 1 {
        return Err(Error::invalid("samples", "must be at least 1"));
    }
    let mut rng = stream(seed, labels::STATIONARY, 0);
    let chain = simulate_reference_chain(p, start, burn_in + samples - 1, &mut rng)?;
    let kept = &chain[burn_in..];
    let per: Vec<Result<(f64, f64)>> = kept
        .par_iter()
        .map(|&z| Ok((conditional_event_probs(p, z)?.1, conditional_expected_isi(p, z)?)))
        .collect();
    let mut on = 0.0;
    let mut isi = 0.0;
    for v in per {
        let (a, b) = v?;
        on += a;
        isi += b;
    }
    let n = kept.len() as f64;
    let pi_on = on / n;
    let pi_off = 1.0 - pi_on;
    let mean_isi = isi / n;
    let r_total = 1.0 / mean_isi;
    Ok(StationaryStats {
        pi_off,
        pi_on,
        mean_isi,
        r_total,
        r_on: pi_on * r_total,
        r_off: pi_off * r_total,
        samples: kept.len(),
    })
}

/// Bandwidth used when every sample is identical (the `m = 0` density).
pub const POINT_MASS_BANDWIDTH: f64 = 0.01;

/// Kernel density estimates of `Z_m` for each `m` in `m_list`, from
/// `replicas` independent chains started at `z`.
pub fn m_step_density_kde(p: &ModelParams, z: f64, m_list: &[usize], replicas: usize, seed: u64) -> Result<Vec<(usize, KdeCurve)>> {
    p.validate()?;
    if replicas < 10_000 {
        return Err(Error::invalid("replicas", "must be at least 10000"));
    }
    if m_list.is_empty() {
        return Err(Error::invalid("m_list", "must not be empty"));
    }
    let m_max = *m_list.iter().max().unwrap();
    let rows: Vec<Result<Vec<f64>>> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(seed, labels::MSTEP, r as u64);
            let chain = if m_max == 0 {
                vec![z]
            } else {
                simulate_reference_chain(p, z, m_max, &mut rng)?
            };
            Ok(m_list.iter().map(|&m| chain[m]).collect())
        })
        .collect();
    let mut columns = vec![Vec::with_capacity(replicas); m_list.len()];
    for row in rows {
        for (c, v) in columns.iter_mut().zip(row?) {
            c.push(v);
        }
    }
    m_list
        .iter()
        .zip(columns)
        .map(|(&m, samples)| {
            let degenerate = samples.iter().all(|&v| v == samples[0]);
            let bw = if degenerate { Some(POINT_MASS_BANDWIDTH) } else { None };
            Ok((m, kde(&samples, bw)?))
        })
        .collect()
}

/// Empirical `P(E_n = j | E_{n-1} = i)`; each row sums to exactly 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub on_on: f64,
    pub on_off: f64,
    pub off_on: f64,
    pub off_off: f64,
    /// Pair counts `[on->on, on->off, off->on, off->off]`.
    pub counts: [u64; 4],
}

pub fn polarity_transition_matrix(s: &EventStream) -> Result<TransitionMatrix> {
    if s.events.len() < 2 {
        return Err(Error::DegenerateSample("need at least two events".into()));
    }
    let mut c = [0u64; 4];
    for w in s.events.windows(2) {
        let k = match (w[0].polarity, w[1].polarity) {
            (Polarity::On, Polarity::On) => 0,
            (Polarity::On, Polarity::Off) => 1,
            (Polarity::Off, Polarity::On) => 2,
            (Polarity::Off, Polarity::Off) => 3,
        };
        c[k] += 1;
    }
    let row = |same: u64, other: u64| -> (f64, f64) {
        let n = same + other;
        if n == 0 {
            (f64::NAN, f64::NAN)
        } else {
            let a = same as f64 / n as f64;
            (a, 1.0 - a)
        }
    };
    let (on_on, on_off) = row(c[0], c[1]);
    let (off_off, off_on) = row(c[3], c[2]);
    Ok(TransitionMatrix {
        on_on,
        on_off,
        off_on,
        off_off,
        counts: c,
    })
}

/// Column names shared by the JSON-lines and CSV encodings.
pub const EVENT_COLUMNS: [&str; 7] = ["index", "timestamp_s", "polarity", "isi_s", "z_before", "z_after", "exit_position"];

#[derive(Serialize, Deserialize)]
struct StreamHeader {
    params: ModelParams,
    seed: u64,
    start: f64,
    n_events: usize,
    units: String,
}

const UNITS: &str = "timestamp_s and isi_s in seconds; z and exit_position dimensionless";

impl EventStream {
    /// JSON lines: a header object with params and seed, then one event per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = StreamHeader {
            params: self.params,
            seed: self.seed,
            start: self.start,
            n_events: self.events.len(),
            units: UNITS.into(),
        };
        serde_json::to_writer(&mut w, &serde_json::json!({ "header": header }))?;
        writeln!(w)?;
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            writeln!(w)?;
        }
        Ok(())
    }

    /// Inverse of [`write_jsonl`](Self::write_jsonl); the reset draws are not
    /// stored, so `xi` is recomputed from the update rule.
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let bad = |m: String| Error::DegenerateSample(format!("malformed event stream: {m}"));
        let first = lines
            .next()
            .ok_or_else(|| bad("empty input".into()))?
            .map_err(|e| bad(e.to_string()))?;
        let v: serde_json::Value = serde_json::from_str(&first).map_err(|e| bad(e.to_string()))?;
        let header: StreamHeader =
            serde_json::from_value(v.get("header").cloned().ok_or_else(|| bad("missing header".into()))?)
                .map_err(|e| bad(e.to_string()))?;
        let (a, s) = (header.params.alpha(), header.params.sigma_alpha());
        let mut events = Vec::with_capacity(header.n_events);
        for line in lines {
            let line = line.map_err(|e| bad(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut e: Event = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            e.xi = if s > 0.0 { (e.z_after - a * e.exit_position) / s } else { 0.0 };
            events.push(e);
        }
        Ok(Self {
            params: header.params,
            seed: header.seed,
            start: header.start,
            events,
        })
    }

    /// CSV with a `#` comment line carrying params and seed.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let params = serde_json::to_string(&self.params)?;
        writeln!(w, "# params: {params}; seed: {}; start: {}; {UNITS}", self.seed, self.start)?;
        writeln!(w, "{}", EVENT_COLUMNS.join(","))?;
        for e in &self.events {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                e.index,
                e.timestamp,
                e.polarity.as_str(),
                e.isi,
                e.z_before,
                e.z_after,
                e.exit_position
            )?;
        }
        Ok(())
    }

    /// Reference values `Z_0, ..., Z_n`.
    pub fn chain(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.events.len() + 1);
        out.push(self.start);
        out.extend(self.events.iter().map(|e| e.z_after));
        out
    }

    pub fn record_time(&self) -> f64 {
        self.events.last().map_or(0.0, |e| e.timestamp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn baseline() -> ModelParams {
        ModelParams::new(5.0, 0.002, 0.96, 0.94).unwrap()
    }

    #[test]
    fn derived_alpha_and_sigma() {
        let p = baseline();
        assert_relative_eq!(p.alpha(), (-0.01f64).exp(), max_relative = 1e-15);
        let a = p.alpha();
        assert_relative_eq!(p.sigma_alpha().powi(2), (1.0 - a * a) / 2.0, max_relative = 1e-12);
        let q = p.with_mode(SigmaAlphaMode::SdeConsistent);
        assert_relative_eq!(q.sigma_alpha().powi(2), (1.0 - a * a) / 10.0, max_relative = 1e-12);
    }

    #[test]
    fn validation_names_field() {
        for (p, field) in [
            (ModelParams::new(0.0, 0.1, 1.0, 1.0), "omega"),
            (ModelParams::new(1.0, -0.1, 1.0, 1.0), "rho"),
            (ModelParams::new(1.0, 0.1, 0.0, 1.0), "theta_minus"),
            (ModelParams::new(1.0, 0.1, 1.0, f64::NAN), "theta_plus"),
        ] {
            match p {
                Err(Error::InvalidParameter { field: f, .. }) => assert_eq!(f, field),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn chain_with_full_damping_forgets_start() {
        let p = ModelParams::new(5.0, 1e3, 0.9, 0.9).unwrap();
        assert_eq!(p.alpha(), 0.0);
        let mut rng = stream(2, "test", 0);
        let c = simulate_reference_chain(&p, 50.0, 20_000, &mut rng).unwrap();
        let tail = &c[1..];
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        let var = tail.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / tail.len() as f64;
        assert!(mean.abs() < 4.0 * (0.5 / tail.len() as f64).sqrt());
        assert!((var / 0.5 - 1.0).abs() < 0.05);
    }

    #[test]
    fn conditional_symmetry_at_origin() {
        let p = ModelParams::new(3.0, 0.01, 0.8, 0.8).unwrap();
        let (off, on) = conditional_event_probs(&p, 0.0).unwrap();
        assert_relative_eq!(off, 0.5, epsilon = 1e-15);
        assert_relative_eq!(on, 0.5, epsilon = 1e-15);
        assert!(conditional_expected_z(&p, 0.0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn conditional_isi_tends_to_rho() {
        let p = ModelParams::new(5.0, 0.02, 1e-4, 1e-4).unwrap();
        let v = conditional_expected_isi(&p, 0.1).unwrap();
        assert!((v - 0.02).abs() < 1e-7);
    }

    #[test]
    fn full_damping_kills_expectation() {
        let p = ModelParams::new(5.0, 1e3, 0.96, 0.94).unwrap();
        for z in [-1.0, 0.0, 0.7] {
            assert_eq!(conditional_expected_z(&p, z).unwrap(), 0.0);
        }
    }

    #[test]
    fn transition_density_integrates_to_one() {
        let p = baseline();
        let f = |zp: f64| one_step_transition_density(&p, -0.5, zp).unwrap();
        // composite Simpson over a wide window
        let (a, b, n) = (-4.0, 4.0, 8000);
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        assert!((s * h / 3.0 - 1.0).abs() < 1e-8);
    }

    #[test]
    fn transition_density_without_memory() {
        let p = ModelParams::new(5.0, 1e3, 0.96, 0.94).unwrap();
        let s = p.sigma_alpha();
        for z in [-1.0, 0.3] {
            let d = one_step_transition_density(&p, z, 0.2).unwrap();
            assert_relative_eq!(d, normal_pdf(0.2 / s) / s, max_relative = 1e-14);
        }
    }

    #[test]
    fn stream_invariants_and_determinism() {
        let p = baseline();
        let opts = StreamOptions::default();
        let a = simulate_event_stream(&p, 0.0, 300, 11, &opts).unwrap();
        let b = simulate_event_stream(&p, 0.0, 300, 11, &opts).unwrap();
        assert_eq!(a, b);
        let mut prev_t = 0.0;
        let mut prev_z = 0.0;
        for e in &a.events {
            assert_eq!(e.z_before, prev_z);
            assert!(e.isi >= p.rho);
            assert!(e.timestamp > prev_t);
            assert_eq!(e.timestamp, prev_t + e.isi);
            assert_eq!(e.z_after, p.alpha() * e.exit_position + p.sigma_alpha() * e.xi);
            match e.polarity {
                Polarity::On => assert_eq!(e.exit_position, e.z_before + p.theta_plus_tilde),
                Polarity::Off => assert_eq!(e.exit_position, e.z_before - p.theta_minus_tilde),
            }
            prev_t = e.timestamp;
            prev_z = e.z_after;
        }
    }

    #[test]
    fn zero_refractory_period_gives_pure_exit_times() {
        let p = ModelParams::new(5.0, 0.0, 0.96, 0.94).unwrap();
        let s = simulate_event_stream(&p, 0.0, 50, 5, &StreamOptions::default()).unwrap();
        for e in &s.events {
            assert_eq!(e.z_after, e.exit_position);
            assert!(e.isi > 0.0);
        }
    }

    #[test]
    fn chain_of_stream_matches_reference_chain() {
        let p = baseline();
        let s = simulate_event_stream(&p, 0.2, 100, 3, &StreamOptions::default()).unwrap();
        let mut rng = stream(3, labels::CHAIN, 0);
        let c = simulate_reference_chain(&p, 0.2, 100, &mut rng).unwrap();
        assert_eq!(s.chain(), c);
    }

    #[test]
    fn jsonl_round_trip() {
        let p = baseline();
        let s = simulate_event_stream(&p, 0.0, 40, 8, &StreamOptions::default()).unwrap();
        let mut buf = Vec::new();
        s.write_jsonl(&mut buf).unwrap();
        let back = EventStream::read_jsonl(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back.events.len(), 40);
        for (a, b) in s.events.iter().zip(&back.events) {
            assert_eq!(a.timestamp, b.timestamp);
            assert_eq!(a.z_after, b.z_after);
            assert!((a.xi - b.xi).abs() < 1e-9);
        }
        let mut csv = Vec::new();
        s.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("# params: "));
        assert_eq!(text.lines().nth(1).unwrap(), EVENT_COLUMNS.join(","));
        assert_eq!(text.lines().count(), 42);
    }

    #[test]
    fn transition_rows_sum_to_one() {
        let s = simulate_event_stream(&baseline(), 0.0, 500, 1, &StreamOptions::default()).unwrap();
        let m = polarity_transition_matrix(&s).unwrap();
        assert_eq!(m.on_on + m.on_off, 1.0);
        assert_eq!(m.off_on + m.off_off, 1.0);
        assert_eq!(m.counts.iter().sum::<u64>(), 499);
    }

    #[test]
    fn stationary_probabilities_sum_to_one() {
        let s = stationary_stats(&baseline(), 0.0, 1000, 2000, 4).unwrap();
        assert_eq!(s.pi_on + s.pi_off, 1.0);
        assert!(stationary_stats(&baseline(), 0.0, 10, 2000, 4).is_err());
    }

    #[test]
    fn m_step_zero_is_point_mass() {
        let p = baseline();
        let curves = m_step_density_kde(&p, -0.5, &[0], 10_000, 1).unwrap();
        let c = &curves[0].1;
        assert_eq!(c.bandwidth, POINT_MASS_BANDWIDTH);
        let peak = c.eval(-0.5);
        assert_relative_eq!(peak, normal_pdf(0.0) / POINT_MASS_BANDWIDTH, max_relative = 1e-3);
    }
}

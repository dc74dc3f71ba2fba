//! Deterministic diagnostics of the conditional-expectation recursion
//! `z_n = f(z_{n-1})`, `f(z) = E(Z_n | Z_{n-1} = z)`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_stream::{conditional_event_probs, conditional_expected_isi, conditional_expected_z, ModelParams};

/// Recurrence tolerance used to classify the tail of a trace.
pub const CLASSIFY_TOL: f64 = 1e-6;
/// Central-difference step for `f'`.
pub const DERIVATIVE_STEP: f64 = 1e-5;
/// Root tolerance for bisection.
pub const ROOT_TOL: f64 = 1e-10;
/// `||f'| - 1|` below this is reported as marginal.
pub const MARGINAL_BAND: f64 = 1e-3;
const SCAN_POINTS: usize = 4001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Classification {
    FixedPoint { z: f64, stable: bool },
    LimitCycle { points: Vec<f64> },
    Undetermined { tail: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecursionTrace {
    /// `z_0, ..., z_n`.
    pub z_iterates: Vec<f64>,
    /// `u_k = P(off | z_{k-1})`, `k = 1..n`.
    pub u_iterates: Vec<f64>,
    /// `v_k = P(on | z_{k-1})`.
    pub v_iterates: Vec<f64>,
    /// `w_k = E(ISI | z_{k-1})`.
    pub w_iterates: Vec<f64>,
    pub classification: Classification,
}

impl RecursionTrace {
    /// CSV rows `k,z_k,u_k,v_k,w_k` (first row has no conditionals).
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "k,z_k,u_k,v_k,w_k")?;
        for (k, z) in self.z_iterates.iter().enumerate() {
            if k == 0 {
                writeln!(w, "0,{z},,,")?;
            } else {
                let j = k - 1;
                writeln!(w, "{k},{z},{},{},{}", self.u_iterates[j], self.v_iterates[j], self.w_iterates[j])?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointReport {
    pub location: f64,
    pub derivative: f64,
    pub stable: bool,
    pub marginal: bool,
}

/// `f'(z)` by central difference.
pub fn derivative(p: &ModelParams, z: f64) -> Result<f64> {
    let h = DERIVATIVE_STEP;
    Ok((conditional_expected_z(p, z + h)? - conditional_expected_z(p, z - h)?) / (2.0 * h))
}

fn report(p: &ModelParams, z: f64) -> Result<FixedPointReport> {
    let d = derivative(p, z)?;
    Ok(FixedPointReport {
        location: z,
        derivative: d,
        stable: d.abs() < 1.0,
        marginal: (d.abs() - 1.0).abs() < MARGINAL_BAND,
    })
}

fn bisect<F: Fn(f64) -> Result<f64>>(g: F, mut a: f64, mut b: f64, tol: f64) -> Result<f64> {
    let mut ga = g(a)?;
    if ga == 0.0 {
        return Ok(a);
    }
    let gb = g(b)?;
    if gb == 0.0 {
        return Ok(b);
    }
    if ga.signum() == gb.signum() {
        return Err(Error::Domain {
            function: "bisect",
            reason: format!("no sign change on [{a}, {b}]"),
        });
    }
    while b - a > tol {
        let m = 0.5 * (a + b);
        let gm = g(m)?;
        if gm == 0.0 {
            return Ok(m);
        }
        if gm.signum() == ga.signum() {
            a = m;
            ga = gm;
        } else {
            b = m;
        }
    }
    Ok(0.5 * (a + b))
}

/// Root of `g` in a bracket grown around `center`.
fn root_near<F: Fn(f64) -> Result<f64>>(g: F, center: f64, half_width: f64) -> Option<f64> {
    let mut w = half_width.max(1e-9);
    for _ in 0..30 {
        let (a, b) = (center - w, center + w);
        if let (Ok(ga), Ok(gb)) = (g(a), g(b)) {
            if ga.signum() != gb.signum() || ga == 0.0 || gb == 0.0 {
                return bisect(&g, a, b, ROOT_TOL).ok();
            }
        }
        w *= 2.0;
    }
    None
}

/// Aitken extrapolation of a sequence whose increments shrink geometrically.
fn geometric_limit(seq: &[f64]) -> Option<(f64, f64)> {
    if seq.len() < 4 {
        return None;
    }
    let d: Vec<f64> = seq.windows(2).map(|w| w[1] - w[0]).collect();
    let ratios: Vec<f64> = d.windows(2).map(|w| (w[1] / w[0]).abs()).collect();
    if ratios.iter().any(|r| !(r.is_finite() && *r < 1.0)) {
        return None;
    }
    let n = d.len();
    let last = seq[seq.len() - 1];
    let denom = d[n - 1] - d[n - 2];
    if denom == 0.0 {
        return Some((last, 0.0));
    }
    let limit = last - d[n - 1] * d[n - 1] / denom;
    Some((limit, (limit - last).abs()))
}

fn classify(p: &ModelParams, z: &[f64]) -> Result<Classification> {
    let start = (z.len() * 4 / 5).min(z.len().saturating_sub(3));
    let tail = &z[start..];
    let step1 = tail.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
    let step2 = tail.windows(3).map(|w| (w[2] - w[0]).abs()).fold(0.0, f64::max);
    let f = |x: f64| conditional_expected_z(p, x);
    let ff = |x: f64| f(f(x)?);
    let fixed = |guess: f64, width: f64| -> Result<Option<Classification>> {
        match root_near(|x| Ok(f(x)? - x), guess, width) {
            Some(r) => Ok(Some(Classification::FixedPoint {
                z: r,
                stable: derivative(p, r)?.abs() < 1.0,
            })),
            None => Ok(None),
        }
    };
    let cycle = |guess: f64, width: f64| -> Result<Option<Classification>> {
        let Some(a) = root_near(|x| Ok(ff(x)? - x), guess, width) else {
            return Ok(None);
        };
        let b = f(a)?;
        if (b - a).abs() <= CLASSIFY_TOL || (f(b)? - a).abs() > CLASSIFY_TOL {
            return Ok(None);
        }
        let mut pts = vec![a, b];
        pts.sort_by(f64::total_cmp);
        Ok(Some(Classification::LimitCycle { points: pts }))
    };
    let last = *tail.last().unwrap();
    if step1 < CLASSIFY_TOL {
        if let Some(c) = fixed(last, 10.0 * CLASSIFY_TOL)? {
            return Ok(c);
        }
    }
    if step2 < CLASSIFY_TOL && step1 >= CLASSIFY_TOL {
        if let Some(c) = cycle(last, 10.0 * CLASSIFY_TOL)? {
            return Ok(c);
        }
    }
    // slow geometric convergence: extrapolate, then confirm by root finding
    if let Some((lim, err)) = geometric_limit(tail) {
        if let Some(c) = fixed(lim, 2.0 * err + CLASSIFY_TOL)? {
            if let Classification::FixedPoint { z: r, .. } = c {
                if (r - lim).abs() < 10.0 * err + CLASSIFY_TOL {
                    return Ok(c);
                }
            }
        }
    }
    let even: Vec<f64> = tail.iter().copied().step_by(2).collect();
    if let Some((lim, err)) = geometric_limit(&even) {
        if let Some(c) = cycle(lim, 2.0 * err + CLASSIFY_TOL)? {
            return Ok(c);
        }
    }
    Ok(Classification::Undetermined { tail: tail.to_vec() })
}

/// Runs the conditional recursion for `n` steps from `z0` and classifies
/// the last fifth of the iterates.
pub fn iterate_conditionals(p: &ModelParams, z0: f64, n: usize) -> Result<RecursionTrace> {
    p.validate()?;
    if n == 0 {
        return Err(Error::invalid("n", "must be at least 1"));
    }
    let mut z = Vec::with_capacity(n + 1);
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    z.push(z0);
    for k in 0..n {
        let zk = z[k];
        let (p_off, p_on) = conditional_event_probs(p, zk)?;
        u.push(p_off);
        v.push(p_on);
        w.push(conditional_expected_isi(p, zk)?);
        z.push(p.alpha() * (zk - p.theta_minus_tilde * p_off + p.theta_plus_tilde * p_on));
    }
    let classification = classify(p, &z)?;
    Ok(RecursionTrace {
        z_iterates: z,
        u_iterates: u,
        v_iterates: v,
        w_iterates: w,
        classification,
    })
}

/// `[-(theta_minus + 3), theta_plus + 3]` scaled by `max(1, 1/sqrt(2 omega))`.
pub fn default_search_interval(p: &ModelParams) -> (f64, f64) {
    let s = (1.0 / (2.0 * p.omega).sqrt()).max(1.0);
    (-(p.theta_minus_tilde + 3.0) * s, (p.theta_plus_tilde + 3.0) * s)
}

/// All sign changes of `g` on a uniform grid, refined by bisection.
fn scan_roots<G: Fn(f64) -> Result<f64> + Sync>(g: G, a: f64, b: f64, points: usize) -> Result<Vec<f64>> {
    let h = (b - a) / (points - 1) as f64;
    let xs: Vec<f64> = (0..points).map(|i| a + i as f64 * h).collect();
    let vals: Vec<f64> = xs.par_iter().map(|&x| g(x)).collect::<Result<_>>()?;
    let mut roots = Vec::new();
    for i in 0..points - 1 {
        if vals[i] == 0.0 {
            roots.push(xs[i]);
        } else if vals[i + 1] != 0.0 && vals[i].signum() != vals[i + 1].signum() {
            roots.push(bisect(&g, xs[i], xs[i + 1], ROOT_TOL)?);
        }
    }
    if vals[points - 1] == 0.0 {
        roots.push(xs[points - 1]);
    }
    Ok(roots)
}

/// Roots of `f(z) - z` on `[a, b]` with stability from `f'`.
pub fn find_fixed_points(p: &ModelParams, search: (f64, f64)) -> Result<Vec<FixedPointReport>> {
    p.validate()?;
    let (a, b) = search;
    if !(a < b) {
        return Err(Error::invalid("search_interval", format!("empty interval [{a}, {b}]")));
    }
    scan_roots(|z| Ok(conditional_expected_z(p, z)? - z), a, b, SCAN_POINTS)?
        .into_iter()
        .map(|z| report(p, z))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentType {
    Start,
    Horizontal,
    Vertical,
}

impl SegmentType {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Start => "start",
            Self::Horizontal => "horizontal",
            Self::Vertical => "vertical",
        }
    }
}

/// Cobweb vertex `(x, y)` reached by a segment of the given type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CobwebPoint {
    pub k: usize,
    pub x: f64,
    pub y: f64,
    pub segment_type: SegmentType,
}

/// Cobweb path: `(z_0, z_1)`, then horizontally to the diagonal
/// `(z_1, z_1)`, then vertically to the curve `(z_1, z_2)`, and so on.
pub fn lemeray_trace(p: &ModelParams, z0: f64, n: usize) -> Result<Vec<CobwebPoint>> {
    p.validate()?;
    if n == 0 {
        return Err(Error::invalid("n", "must be at least 1"));
    }
    let mut z = vec![z0];
    for k in 0..=n {
        z.push(conditional_expected_z(p, z[k])?);
    }
    let mut out = Vec::with_capacity(2 * n + 1);
    out.push(CobwebPoint { k: 0, x: z[0], y: z[1], segment_type: SegmentType::Start });
    for k in 1..=n {
        out.push(CobwebPoint { k, x: z[k], y: z[k], segment_type: SegmentType::Horizontal });
        out.push(CobwebPoint { k, x: z[k], y: z[k + 1], segment_type: SegmentType::Vertical });
    }
    Ok(out)
}

/// CSV with columns `k,z_k,z_k+1,segment_type`, holding the plot
/// coordinates of each cobweb vertex.
pub fn write_lemeray_csv<W: Write>(trace: &[CobwebPoint], mut w: W) -> std::io::Result<()> {
    writeln!(w, "k,z_k,z_k+1,segment_type")?;
    for c in trace {
        writeln!(w, "{},{},{},{}", c.k, c.x, c.y, c.segment_type.as_str())?;
    }
    Ok(())
}

/// Three characterizations of the critical reference level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalPoint {
    /// `P(on | z) = P(off | z) = 1/2`.
    pub probability_crossing: f64,
    /// Grid argmax of `E(ISI | z)`.
    pub isi_argmax: f64,
    /// Root of `E(Z_n | Z_{n-1} = z)` nearest the origin.
    pub expectation_root: f64,
}

impl CriticalPoint {
    pub fn spread(&self) -> f64 {
        let v = [self.probability_crossing, self.isi_argmax, self.expectation_root];
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        hi - lo
    }
}

fn nearest_to(roots: &[f64], target: f64) -> Option<f64> {
    roots.iter().copied().min_by(|a, b| (a - target).abs().total_cmp(&(b - target).abs()))
}

pub fn critical_point(p: &ModelParams) -> Result<CriticalPoint> {
    p.validate()?;
    let (a, b) = default_search_interval(p);
    let on_minus_half = |z: f64| Ok(conditional_event_probs(p, z)?.1 - 0.5);
    let crossings = scan_roots(on_minus_half, a, b, SCAN_POINTS)?;
    let z_star = nearest_to(&crossings, 0.0).ok_or(Error::Convergence {
        function: "critical_point",
        iterations: SCAN_POINTS,
    })?;
    let roots = scan_roots(|z| conditional_expected_z(p, z), a, b, SCAN_POINTS)?;
    let expectation_root = nearest_to(&roots, 0.0).ok_or(Error::Convergence {
        function: "critical_point",
        iterations: SCAN_POINTS,
    })?;
    // ISI argmax: coarse grid around z*, then golden-section refinement
    let half = 0.5 * (p.theta_minus_tilde + p.theta_plus_tilde);
    let grid: Vec<f64> = (0..=400).map(|i| z_star - half + i as f64 * half / 200.0).collect();
    let isi: Vec<f64> = grid.par_iter().map(|&z| conditional_expected_isi(p, z)).collect::<Result<_>>()?;
    let k = (0..isi.len()).fold(0, |best, i| if isi[i] > isi[best] { i } else { best });
    let step = half / 200.0;
    let (mut lo, mut hi) = (grid[k] - step, grid[k] + step);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = hi - g * (hi - lo);
    let mut d = lo + g * (hi - lo);
    let (mut fc, mut fd) = (conditional_expected_isi(p, c)?, conditional_expected_isi(p, d)?);
    while hi - lo > 1e-8 {
        if fc > fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = conditional_expected_isi(p, c)?;
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = conditional_expected_isi(p, d)?;
        }
    }
    Ok(CriticalPoint {
        probability_crossing: z_star,
        isi_argmax: 0.5 * (lo + hi),
        expectation_root,
    })
}

/// `(lo, hi)` around the critical point such that `P(on | z) >= level`
/// for `z <= lo` and `P(off | z) >= level` for `z >= hi`.
pub fn near_determinism_interval(p: &ModelParams, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.5 && level < 1.0) {
        return Err(Error::invalid("level", format!("must lie in (0.5, 1), got {level}")));
    }
    let z_star = critical_point(p)?.probability_crossing;
    let (a, b) = default_search_interval(p);
    let on = |z: f64| Ok(conditional_event_probs(p, z)?.1 - level);
    let off = |z: f64| Ok(conditional_event_probs(p, z)?.0 - level);
    let lo = scan_roots(on, a, z_star, SCAN_POINTS)?.into_iter().fold(f64::NEG_INFINITY, f64::max);
    let hi = scan_roots(off, z_star, b, SCAN_POINTS)?.into_iter().fold(f64::INFINITY, f64::min);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Convergence {
            function: "near_determinism_interval",
            iterations: SCAN_POINTS,
        });
    }
    Ok((lo, hi))
}

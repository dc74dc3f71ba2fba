//! Exit statistics of the standardized OU process `dX = -omega X dt + dW`
//! from an interval `[lower, upper]`.
//!
//! Closed forms give the exit-side law and the mean exit time. The full
//! joint law of `(tau, X_tau)` comes from the backward equation
//! `dg/dt = g''/2 - omega x g'` with three sets of boundary data:
//!
//! | function | meaning               | g(lower, t) | g(upper, t) |
//! |----------|-----------------------|-------------|-------------|
//! | `g1`     | `P(tau <= t)`         | 1           | 1           |
//! | `g2`     | `P(tau <= t, lower)`  | 1           | 0           |
//! | `g3`     | `P(tau <= t, upper)`  | 0           | 1           |
//!
//! all with `g(x, 0) = 0` in the interior.
//!
//! Two samplers are provided. [`sample_exit_pathfree`] draws the side from
//! the closed form and inverts a tabulated conditional CDF;
//! [`sample_exit_path_oracle`] steps the exact transition with a
//! Brownian-bridge crossing test and serves as an independent check.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, RwLock};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::{lagrange4_uniform, Pchip};
use crate::specfun::{dawson, dawson_integral, erfcx, erfi_ratio, hyp2f2_11_3h2_2};

const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;
const FRAC_4_PI: f64 = 4.0 / std::f64::consts::PI;

/// Band around [0, 1] a PDE solution may occupy before it is rejected.
const STABILITY_EPS: f64 = 1e-6;

/// Above this `omega * max(l^2, u^2)` the mean exit time uses the scaled route.
const HYPERGEOMETRIC_ROUTE_LIMIT: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Lower,
    Upper,
}

/// Exit of the standardized OU process from `[lower, upper]` started at `start`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitProblem {
    pub omega: f64,
    pub lower: f64,
    pub upper: f64,
    pub start: f64,
}

impl ExitProblem {
    pub fn new(omega: f64, lower: f64, upper: f64, start: f64) -> Result<Self> {
        let p = Self { omega, lower, upper, start };
        p.validate()?;
        Ok(p)
    }

    /// Interval `[z - theta_minus, z + theta_plus]` started at `z`.
    pub fn around(omega: f64, z: f64, theta_minus: f64, theta_plus: f64) -> Result<Self> {
        Self::new(omega, z - theta_minus, z + theta_plus, z)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(Error::invalid("omega", format!("must be positive and finite, got {}", self.omega)));
        }
        if !(self.lower.is_finite() && self.upper.is_finite() && self.start.is_finite()) {
            return Err(Error::invalid("lower/upper/start", "must be finite"));
        }
        if self.lower == self.upper {
            return Err(Error::DegenerateInterval(self.lower));
        }
        if self.lower > self.upper {
            return Err(Error::invalid("lower", format!("{} exceeds upper {}", self.lower, self.upper)));
        }
        if !(self.lower..=self.upper).contains(&self.start) {
            return Err(Error::invalid("start", format!("{} outside [{}, {}]", self.start, self.lower, self.upper)));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    /// Side on which the start point sits, if any.
    pub fn boundary_side(&self) -> Option<Side> {
        if self.start == self.lower {
            Some(Side::Lower)
        } else if self.start == self.upper {
            Some(Side::Upper)
        } else {
            None
        }
    }
}

/// One draw of `(tau, side)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitSample {
    pub time: f64,
    pub side: Side,
}

/// `(P(exit at lower), P(exit at upper))`; the two always sum to one.
///
/// The smaller probability is evaluated directly from an erfi ratio and the
/// larger one as its complement, so neither loses relative accuracy.
pub fn exit_side_probs(p: &ExitProblem) -> Result<(f64, f64)> {
    p.validate()?;
    let s = p.omega.sqrt();
    let (l, x, u) = (s * p.lower, s * p.start, s * p.upper);
    let pl = erfi_ratio(u, x, l)?;
    let pu = erfi_ratio(l, x, u)?;
    if pl <= pu {
        Ok((pl, 1.0 - pl))
    } else {
        Ok((1.0 - pu, pu))
    }
}

pub fn expected_exit_position(p: &ExitProblem) -> Result<f64> {
    let (pl, pu) = exit_side_probs(p)?;
    Ok(p.lower * pl + p.upper * pu)
}

/// Mean exit time `E tau`.
///
/// Uses `P_l G(l) + P_u G(u) - G(x)` with `G(y) = y^2 F(omega y^2)` for small
/// arguments and [`expected_exit_time_scaled`] otherwise, where the
/// hypergeometric terms grow like `exp(omega y^2)` and cancel.
pub fn expected_exit_time(p: &ExitProblem) -> Result<f64> {
    p.validate()?;
    if p.boundary_side().is_some() {
        return Ok(0.0);
    }
    let m = p.omega * p.lower.powi(2).max(p.upper.powi(2));
    if m <= HYPERGEOMETRIC_ROUTE_LIMIT {
        expected_exit_time_hypergeometric(p)
    } else {
        expected_exit_time_scaled(p)
    }
}

/// Mean exit time from the `2F2` closed form.
pub fn expected_exit_time_hypergeometric(p: &ExitProblem) -> Result<f64> {
    p.validate()?;
    let (pl, pu) = exit_side_probs(p)?;
    let g = |y: f64| -> Result<f64> { Ok(y * y * hyp2f2_11_3h2_2(p.omega * y * y)?) };
    let gx = g(p.start)?;
    let v = pl * (g(p.lower)? - gx) + pu * (g(p.upper)? - gx);
    Ok(v.max(0.0))
}

/// `m * exp(e)`, for quantities that overflow `f64`.
#[derive(Debug, Clone, Copy)]
struct Scaled {
    m: f64,
    e: f64,
}

impl Scaled {
    fn sum(terms: &[Scaled]) -> Scaled {
        let e = terms
            .iter()
            .filter(|t| t.m != 0.0)
            .map(|t| t.e)
            .fold(f64::NEG_INFINITY, f64::max);
        if e == f64::NEG_INFINITY {
            return Scaled { m: 0.0, e: 0.0 };
        }
        let m = terms.iter().map(|t| t.m * (t.e - e).exp()).sum();
        Scaled { m, e }
    }
}

/// `erfi(a y2) erfi(a y1) (erf(a y2) - erf(a y1))` for `y1 <= y2`.
fn k_term(a: f64, y1: f64, y2: f64) -> Scaled {
    if y2 <= 0.0 {
        return k_term(a, -y2, -y1);
    }
    let (z1, z2) = (a * y1, a * y2);
    let (q1, q2) = (z1 * z1, z2 * z2);
    let dd = FRAC_4_PI * dawson(z1) * dawson(z2);
    if y1 >= 0.0 {
        // erf difference as a difference of erfc, no cancellation
        Scaled {
            m: dd * (erfcx(z1) - erfcx(z2) * (q1 - q2).exp()),
            e: q2,
        }
    } else {
        Scaled {
            m: dd * (libm::erf(z2) - libm::erf(z1)),
            e: q1 + q2,
        }
    }
}

/// Mean exit time with every `exp(omega y^2)` factor carried symbolically.
///
/// Integrating `G'(y) = sqrt(pi/omega) exp(omega y^2) erf(sqrt(omega) y)` by
/// parts gives
///
/// ```text
/// E tau = pi/(2 omega) N / Delta - 2/omega (P_u I(x, u) - P_l I(l, x))
/// N     = K(x, u) - K(l, u) + K(l, x)
/// Delta = erfi(a u) - erfi(a l)
/// I     = integral of D over the scaled interval, a = sqrt(omega)
/// ```
///
/// with `K` from `erfi(a y1) erfi(a y2) (erf(a y2) - erf(a y1))`.
pub fn expected_exit_time_scaled(p: &ExitProblem) -> Result<f64> {
    p.validate()?;
    if p.boundary_side().is_some() {
        return Ok(0.0);
    }
    let (pl, pu) = exit_side_probs(p)?;
    let a = p.omega.sqrt();
    let (l, x, u) = (p.lower, p.start, p.upper);
    let ql = (a * l).powi(2);
    let qu = (a * u).powi(2);
    let delta = Scaled::sum(&[
        Scaled { m: FRAC_2_SQRT_PI * dawson(a * u), e: qu },
        Scaled { m: -FRAC_2_SQRT_PI * dawson(a * l), e: ql },
    ]);
    let kxu = k_term(a, x, u);
    let mut klu = k_term(a, l, u);
    let klx = k_term(a, l, x);
    klu.m = -klu.m;
    let n = Scaled::sum(&[kxu, klu, klx]);
    let ratio = n.m / delta.m * (n.e - delta.e).exp();
    let first = std::f64::consts::FRAC_PI_2 / p.omega * ratio;
    let i_xu = dawson_integral(a * x, a * u);
    let i_lx = dawson_integral(a * l, a * x);
    let second = 2.0 / p.omega * (pu * i_xu - pl * i_lx);
    let v = first - second;
    if !v.is_finite() {
        return Err(Error::Overflow {
            function: "expected_exit_time",
            argument: p.start,
        });
    }
    Ok(v.max(0.0))
}

/// Tridiagonal generator `g''/2 - omega x g'` on the interior nodes.
///
/// The drift is upwinded where the cell Peclet number
/// `|omega x| dx / (1/2)` exceeds 2.
#[derive(Debug, Clone)]
struct Generator {
    lo: Vec<f64>,
    di: Vec<f64>,
    up: Vec<f64>,
}

impl Generator {
    fn new(omega: f64, x0: f64, dx: f64, nx: usize) -> Self {
        let m = nx - 2;
        let mut lo = vec![0.0; m];
        let mut di = vec![0.0; m];
        let mut up = vec![0.0; m];
        let diff = 0.5 / (dx * dx);
        for j in 0..m {
            let x = x0 + (j + 1) as f64 * dx;
            let b = -omega * x;
            lo[j] = diff;
            di[j] = -2.0 * diff;
            up[j] = diff;
            if b.abs() * dx > 1.0 {
                if b > 0.0 {
                    di[j] -= b / dx;
                    up[j] += b / dx;
                } else {
                    lo[j] -= b / dx;
                    di[j] += b / dx;
                }
            } else {
                lo[j] -= b / (2.0 * dx);
                up[j] += b / (2.0 * dx);
            }
        }
        Self { lo, di, up }
    }

    fn len(&self) -> usize {
        self.di.len()
    }
}

/// Boundary data of `(g1, g2, g3)` at `(lower, upper)`.
const BOUNDARY: [(f64, f64); 3] = [(1.0, 1.0), (1.0, 0.0), (0.0, 1.0)];

/// Factorized `(I - theta dt A)` for the Thomas algorithm.
struct Factor {
    a: Vec<f64>,
    cp: Vec<f64>,
    inv: Vec<f64>,
}

impl Factor {
    fn new(op: &Generator, dt: f64, theta: f64) -> Self {
        let m = op.len();
        let a: Vec<f64> = op.lo.iter().map(|v| -theta * dt * v).collect();
        let b: Vec<f64> = op.di.iter().map(|v| 1.0 - theta * dt * v).collect();
        let c: Vec<f64> = op.up.iter().map(|v| -theta * dt * v).collect();
        Self::from_bands(a, b, c, m)
    }

    fn from_bands(a: Vec<f64>, b: Vec<f64>, c: Vec<f64>, m: usize) -> Self {
        let mut cp = vec![0.0; m];
        let mut inv = vec![0.0; m];
        inv[0] = 1.0 / b[0];
        cp[0] = c[0] * inv[0];
        for i in 1..m {
            let den = b[i] - a[i] * cp[i - 1];
            inv[i] = 1.0 / den;
            cp[i] = c[i] * inv[i];
        }
        Self { a, cp, inv }
    }

    /// Solve in place; `d` holds the right-hand side on entry.
    fn solve(&self, d: &mut [f64]) {
        let m = d.len();
        d[0] *= self.inv[0];
        for i in 1..m {
            d[i] = (d[i] - self.a[i] * d[i - 1]) * self.inv[i];
        }
        for i in (0..m - 1).rev() {
            d[i] -= self.cp[i] * d[i + 1];
        }
    }
}

/// Advance the interior values of `g` by one theta-step of size `dt`.
fn theta_step(
    op: &Generator,
    fac: &Factor,
    dt: f64,
    theta: f64,
    bc: &[(f64, f64); 3],
    g: &mut [Vec<f64>; 3],
    rhs: &mut [f64],
) {
    let m = op.len();
    for (k, gk) in g.iter_mut().enumerate() {
        let (bl, bu) = bc[k];
        let explicit = (1.0 - theta) * dt;
        for j in 0..m {
            let left = if j == 0 { bl } else { gk[j - 1] };
            let right = if j + 1 == m { bu } else { gk[j + 1] };
            rhs[j] = gk[j] + explicit * (op.lo[j] * left + op.di[j] * gk[j] + op.up[j] * right);
        }
        // boundary values are constant in time, so the implicit part adds theta*dt times them
        rhs[0] += theta * dt * op.lo[0] * bl;
        rhs[m - 1] += theta * dt * op.up[m - 1] * bu;
        fac.solve(rhs);
        gk.copy_from_slice(rhs);
    }
}

/// Discrete steady state `A g = 0` with the boundary data of `g2` and `g3`.
fn steady_state(op: &Generator) -> [Vec<f64>; 2] {
    let m = op.len();
    let fac = Factor::from_bands(op.lo.clone(), op.di.clone(), op.up.clone(), m);
    let mut out = [vec![0.0; m], vec![0.0; m]];
    for (k, o) in out.iter_mut().enumerate() {
        let (bl, bu) = BOUNDARY[k + 1];
        o[0] -= op.lo[0] * bl;
        o[m - 1] -= op.up[m - 1] * bu;
        fac.solve(o);
    }
    out
}

fn check_band(values: &[f64], x0: f64, dx: f64, t: f64) -> Result<()> {
    for (j, &v) in values.iter().enumerate() {
        if !(v >= -STABILITY_EPS && v <= 1.0 + STABILITY_EPS) {
            return Err(Error::Instability {
                value: v,
                x: x0 + (j + 1) as f64 * dx,
                t,
            });
        }
    }
    Ok(())
}

/// `g1, g2, g3` on a uniform space-time grid, stored row-major `[t][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PdeSolution {
    pub grid_x: Vec<f64>,
    pub grid_t: Vec<f64>,
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
    pub g3: Vec<f64>,
}

impl PdeSolution {
    pub fn nx(&self) -> usize {
        self.grid_x.len()
    }

    pub fn nt(&self) -> usize {
        self.grid_t.len()
    }

    pub fn t_max(&self) -> f64 {
        *self.grid_t.last().unwrap()
    }

    pub fn at(&self, which: usize, it: usize, ix: usize) -> f64 {
        let g = match which {
            1 => &self.g1,
            2 => &self.g2,
            3 => &self.g3,
            _ => panic!("component must be 1, 2 or 3"),
        };
        g[it * self.nx() + ix]
    }

    /// Row of `g_which` at time index `it`.
    pub fn row(&self, which: usize, it: usize) -> &[f64] {
        let nx = self.nx();
        let g = match which {
            1 => &self.g1,
            2 => &self.g2,
            3 => &self.g3,
            _ => panic!("component must be 1, 2 or 3"),
        };
        &g[it * nx..(it + 1) * nx]
    }

    /// `g_which(x, t_index)` by 4-point Lagrange interpolation in `x`.
    pub fn interp_x(&self, which: usize, it: usize, x: f64) -> f64 {
        let nx = self.nx();
        let dx = self.grid_x[1] - self.grid_x[0];
        let (i0, w) = lagrange4_uniform(self.grid_x[0], dx, nx, x);
        let row = self.row(which, it);
        (0..4).map(|j| w[j] * row[i0 + j]).sum()
    }

    /// CSV with columns `x,t,g1,g2,g3`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# x: normalized position (dimensionless), t: seconds, g1..g3: probabilities")?;
        writeln!(w, "x,t,g1,g2,g3")?;
        let nx = self.nx();
        for (it, t) in self.grid_t.iter().enumerate() {
            for (ix, x) in self.grid_x.iter().enumerate() {
                let k = it * nx + ix;
                writeln!(w, "{x},{t},{},{},{}", self.g1[k], self.g2[k], self.g3[k])?;
            }
        }
        Ok(())
    }
}

/// Number of implicit-Euler half steps that replace the first two
/// Crank-Nicolson steps.
const RANNACHER_HALF_STEPS: usize = 4;

/// Solve the three backward-equation problems on `nx` nodes and `nt` steps.
pub fn solve_exit_pdes(p: &ExitProblem, t_max: f64, nx: usize, nt: usize) -> Result<PdeSolution> {
    p.validate()?;
    if nx < 64 {
        return Err(Error::invalid("nx", "must be at least 64"));
    }
    if nt < 64 {
        return Err(Error::invalid("nt", "must be at least 64"));
    }
    if !(t_max > 0.0 && t_max.is_finite()) {
        return Err(Error::invalid("t_max", "must be positive and finite"));
    }
    let dx = p.width() / (nx - 1) as f64;
    let dt = t_max / nt as f64;
    let op = Generator::new(p.omega, p.lower, dx, nx);
    let m = op.len();
    let grid_x: Vec<f64> = (0..nx).map(|i| p.lower + i as f64 * dx).collect();
    let grid_t: Vec<f64> = (0..=nt).map(|k| k as f64 * dt).collect();
    let mut out = [
        Vec::with_capacity((nt + 1) * nx),
        Vec::with_capacity((nt + 1) * nx),
        Vec::with_capacity((nt + 1) * nx),
    ];
    // The solution is carried in two forms: g itself, and the residual
    // r = s - g from the discrete steady state s (zero boundary data). Each
    // cell reports g while it is below half its limit and s - r afterwards,
    // so both small values and values near the limit keep full relative
    // precision and every row is nondecreasing in t to the last bit.
    let [s2, s3] = steady_state(&op);
    let steady = [vec![1.0; m], s2, s3];
    let mut r = steady.clone();
    let mut g = [vec![0.0; m], vec![0.0; m], vec![0.0; m]];
    let mut late = [vec![false; m], vec![false; m], vec![false; m]];
    let mut row = [vec![0.0; m], vec![0.0; m], vec![0.0; m]];
    let push = |out: &mut [Vec<f64>; 3], g: &[Vec<f64>; 3]| {
        for k in 0..3 {
            out[k].push(BOUNDARY[k].0);
            out[k].extend_from_slice(&g[k]);
            out[k].push(BOUNDARY[k].1);
        }
    };
    push(&mut out, &row);
    let zero = [(0.0, 0.0); 3];
    let half = Factor::new(&op, 0.5 * dt, 1.0);
    let cn = Factor::new(&op, dt, 0.5);
    let mut rhs = vec![0.0; m];
    let mut it = 0usize;
    let mut half_steps = 0usize;
    while it < nt {
        if half_steps < RANNACHER_HALF_STEPS {
            theta_step(&op, &half, 0.5 * dt, 1.0, &BOUNDARY, &mut g, &mut rhs);
            theta_step(&op, &half, 0.5 * dt, 1.0, &zero, &mut r, &mut rhs);
            half_steps += 1;
            if half_steps % 2 == 1 {
                continue;
            }
        } else {
            theta_step(&op, &cn, dt, 0.5, &BOUNDARY, &mut g, &mut rhs);
            theta_step(&op, &cn, dt, 0.5, &zero, &mut r, &mut rhs);
        }
        it += 1;
        let t = grid_t[it];
        for k in 0..3 {
            for j in 0..m {
                late[k][j] |= g[k][j] > 0.5 * steady[k][j];
                row[k][j] = if late[k][j] { steady[k][j] - r[k][j] } else { g[k][j] };
            }
            check_band(&row[k], p.lower, dx, t)?;
        }
        push(&mut out, &row);
    }
    let [g1, g2, g3] = out;
    Ok(PdeSolution { grid_x, grid_t, g1, g2, g3 })
}

/// `P(tau <= t | exit on side)` from a solved grid.
pub fn conditional_exit_cdf(sol: &PdeSolution, p: &ExitProblem, side: Side, t: f64) -> Result<f64> {
    p.validate()?;
    if !(t >= 0.0) {
        return Err(Error::Domain {
            function: "conditional_exit_cdf",
            reason: format!("negative time {t}"),
        });
    }
    let t_max = sol.t_max();
    if t > t_max * (1.0 + 1e-12) {
        return Err(Error::Extrapolation { t, t_max });
    }
    let (pl, pu) = exit_side_probs(p)?;
    let (which, prob) = match side {
        Side::Lower => (2, pl),
        Side::Upper => (3, pu),
    };
    if prob == 0.0 {
        return Err(Error::Domain {
            function: "conditional_exit_cdf",
            reason: "side has zero probability".into(),
        });
    }
    let dt = sol.grid_t[1] - sol.grid_t[0];
    let k = ((t / dt).floor() as usize).min(sol.nt() - 2);
    let s = ((t - sol.grid_t[k]) / dt).clamp(0.0, 1.0);
    let g0 = sol.interp_x(which, k, p.start);
    let g1 = sol.interp_x(which, k + 1, p.start);
    Ok(((1.0 - s) * g0 + s * g1) / prob)
}

/// Controls for [`ExitTimeTable::build`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableOptions {
    /// Grid nodes across the interval, boundaries included.
    pub nx: usize,
    /// Stop once every conditional residual `1 - F(t)` is below this.
    pub residual_tol: f64,
    /// Or once successive residual decay ratios agree to this for 10 steps.
    pub ratio_tol: f64,
    /// Geometric growth factor of the time step.
    pub growth: f64,
    pub max_steps: usize,
}

impl Default for TableOptions {
    fn default() -> Self {
        Self {
            nx: 201,
            residual_tol: 1e-7,
            ratio_tol: 1e-10,
            growth: 1.1,
            max_steps: 2_000_000,
        }
    }
}

/// Exponential continuation `1 - F(t) = r exp(-lambda (t - t_end))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpTail {
    pub t_end: f64,
    pub residual: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
struct SideCdf {
    curve: Pchip,
    tail: Option<ExpTail>,
}

impl SideCdf {
    fn new(times: Vec<f64>, mut cdf: Vec<f64>, tail: Option<ExpTail>) -> Self {
        let mut run = 0.0f64;
        for v in cdf.iter_mut() {
            run = run.max(v.clamp(0.0, 1.0));
            *v = run;
        }
        Self {
            curve: Pchip::new(times, cdf),
            tail,
        }
    }

    fn cdf(&self, t: f64) -> f64 {
        let times = self.curve.x();
        if t <= 0.0 {
            return 0.0;
        }
        if t <= *times.last().unwrap() {
            return self.curve.eval(t);
        }
        match self.tail {
            Some(tail) => 1.0 - tail.residual * (-tail.lambda * (t - tail.t_end)).exp(),
            None => *self.curve.y().last().unwrap(),
        }
    }

    fn density(&self, t: f64) -> f64 {
        let times = self.curve.x();
        if t <= 0.0 {
            return 0.0;
        }
        if t <= *times.last().unwrap() {
            return self.curve.derivative(t).max(0.0);
        }
        match self.tail {
            Some(tail) => tail.lambda * tail.residual * (-tail.lambda * (t - tail.t_end)).exp(),
            None => 0.0,
        }
    }

    fn invert(&self, u: f64) -> Result<f64> {
        let y = self.curve.y();
        let covered = *y.last().unwrap();
        if u <= covered {
            // first node with F >= u closes the bracketing segment
            let k = y.partition_point(|&v| v < u).max(1);
            return Ok(self.curve.invert_in_segment(k - 1, u, 1e-10));
        }
        match self.tail {
            Some(tail) => Ok(tail.t_end + (tail.residual / (1.0 - u)).ln() / tail.lambda),
            None => Err(Error::TailMass { draw: u, covered }),
        }
    }

    fn mean(&self) -> f64 {
        // integral of 1 - F
        let t = self.curve.x();
        let y = self.curve.y();
        let mut acc = 0.0;
        for k in 0..t.len() - 1 {
            let h = t[k + 1] - t[k];
            // Simpson on each PCHIP segment
            let mid = self.curve.eval(0.5 * (t[k] + t[k + 1]));
            acc += h / 6.0 * ((1.0 - y[k]) + 4.0 * (1.0 - mid) + (1.0 - y[k + 1]));
        }
        if let Some(tail) = self.tail {
            acc += tail.residual / tail.lambda;
        }
        acc
    }
}

/// Conditional exit-time CDFs at the start point of one problem.
///
/// Only the column of the backward-equation solution at the start point is
/// kept, on a time grid that starts at `dx^2 / 4` and grows geometrically up
/// to `dx`. Each conditional CDF is normalized by the discrete steady state,
/// so it tends to exactly 1, and is continued by its asymptotic exponential
/// tail once the decay rate has settled.
#[derive(Debug, Clone)]
pub struct ExitTimeTable {
    problem: ExitProblem,
    lower: SideCdf,
    upper: SideCdf,
}

impl ExitTimeTable {
    pub fn build(p: &ExitProblem, opts: &TableOptions) -> Result<Self> {
        p.validate()?;
        if opts.nx < 8 {
            return Err(Error::invalid("nx", "must be at least 8"));
        }
        if !(opts.growth >= 1.0) {
            return Err(Error::invalid("growth", "must be at least 1"));
        }
        let nx = opts.nx;
        let dx = p.width() / (nx - 1) as f64;
        let op = Generator::new(p.omega, p.lower, dx, nx);
        let m = op.len();
        let (i0, w) = lagrange4_uniform(p.lower, dx, nx, p.start);
        // value at the start from interior values plus boundary data
        let at_start = |interior: &[f64], k: usize| -> f64 {
            (0..4)
                .map(|j| {
                    let idx = i0 + j;
                    let v = if idx == 0 {
                        BOUNDARY[k].0
                    } else if idx == nx - 1 {
                        BOUNDARY[k].1
                    } else {
                        interior[idx - 1]
                    };
                    w[j] * v
                })
                .sum()
        };
        let ss = steady_state(&op);
        let norm = [at_start(&ss[0], 1), at_start(&ss[1], 2)];

        let dt_max = dx;
        let mut dt = 0.25 * dx * dx;
        let mut g = [vec![0.0; m], vec![0.0; m], vec![0.0; m]];
        let mut rhs = vec![0.0; m];
        let mut times = vec![0.0];
        let mut cdf = [vec![0.0], vec![0.0]];
        let mut t = 0.0;
        let mut cn_cache: Option<(f64, Factor)> = None;
        let mut ratio_prev = [f64::NAN; 2];
        let mut settled = 0usize;
        let mut step = 0usize;
        loop {
            if step >= opts.max_steps {
                return Err(Error::Convergence {
                    function: "ExitTimeTable::build",
                    iterations: step,
                });
            }
            if step < RANNACHER_HALF_STEPS {
                let f = Factor::new(&op, dt, 1.0);
                theta_step(&op, &f, dt, 1.0, &BOUNDARY, &mut g, &mut rhs);
            } else {
                if cn_cache.as_ref().map(|c| c.0) != Some(dt) {
                    cn_cache = Some((dt, Factor::new(&op, dt, 0.5)));
                }
                let f = &cn_cache.as_ref().unwrap().1;
                theta_step(&op, f, dt, 0.5, &BOUNDARY, &mut g, &mut rhs);
            }
            step += 1;
            t += dt;
            for gk in &g {
                check_band(gk, p.lower, dx, t)?;
            }
            times.push(t);
            let mut resid = [0.0; 2];
            for s in 0..2 {
                let v = if norm[s] > 0.0 { at_start(&g[s + 1], s + 1) / norm[s] } else { 1.0 };
                cdf[s].push(v);
                resid[s] = 1.0 - v;
            }
            let at_max = dt >= dt_max;
            if resid.iter().all(|&r| r < opts.residual_tol) && step > RANNACHER_HALF_STEPS {
                break;
            }
            if at_max && step > RANNACHER_HALF_STEPS + 1 {
                let n = times.len();
                let mut ok = true;
                for s in 0..2 {
                    let r0 = 1.0 - cdf[s][n - 2];
                    let r1 = 1.0 - cdf[s][n - 1];
                    let ratio = r1 / r0;
                    if !(ratio > 0.0 && ratio < 1.0) || !((ratio - ratio_prev[s]).abs() <= opts.ratio_tol) {
                        ok = false;
                    }
                    ratio_prev[s] = ratio;
                }
                settled = if ok { settled + 1 } else { 0 };
                if settled >= 10 {
                    break;
                }
            }
            dt = (dt * opts.growth).min(dt_max);
        }
        let tail_for = |c: &[f64]| -> Option<ExpTail> {
            let n = c.len();
            let back = 10.min(n - 2);
            let (ra, rb) = (1.0 - c[n - 1 - back], 1.0 - c[n - 1]);
            let lambda = (ra / rb).ln() / (times[n - 1] - times[n - 1 - back]);
            if rb > 0.0 && ra > rb && lambda.is_finite() && lambda > 0.0 {
                Some(ExpTail {
                    t_end: times[n - 1],
                    residual: rb,
                    lambda,
                })
            } else {
                None
            }
        };
        let [cl, cu] = cdf;
        let tl = tail_for(&cl);
        let tu = tail_for(&cu);
        Ok(Self {
            problem: *p,
            lower: SideCdf::new(times.clone(), cl, tl),
            upper: SideCdf::new(times, cu, tu),
        })
    }

    /// Table from the start column of a full grid solution, without tail.
    ///
    /// Draws beyond the covered mass fail with [`Error::TailMass`].
    pub fn from_solution(sol: &PdeSolution, p: &ExitProblem) -> Result<Self> {
        let (pl, pu) = exit_side_probs(p)?;
        let mut cl = Vec::with_capacity(sol.nt());
        let mut cu = Vec::with_capacity(sol.nt());
        for it in 0..sol.nt() {
            cl.push(if pl > 0.0 { sol.interp_x(2, it, p.start) / pl } else { 1.0 });
            cu.push(if pu > 0.0 { sol.interp_x(3, it, p.start) / pu } else { 1.0 });
        }
        Ok(Self {
            problem: *p,
            lower: SideCdf::new(sol.grid_t.clone(), cl, None),
            upper: SideCdf::new(sol.grid_t.clone(), cu, None),
        })
    }

    pub fn problem(&self) -> &ExitProblem {
        &self.problem
    }

    fn side(&self, side: Side) -> &SideCdf {
        match side {
            Side::Lower => &self.lower,
            Side::Upper => &self.upper,
        }
    }

    /// `P(tau <= t | exit on side)`.
    pub fn cdf(&self, side: Side, t: f64) -> f64 {
        self.side(side).cdf(t)
    }

    /// Density of `tau` given the side, from the monotone interpolant.
    pub fn density(&self, side: Side, t: f64) -> f64 {
        self.side(side).density(t)
    }

    /// Quantile of `tau` given the side.
    pub fn quantile(&self, side: Side, u: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&u) {
            return Err(Error::Domain {
                function: "quantile",
                reason: format!("probability {u} outside [0, 1)"),
            });
        }
        self.side(side).invert(u)
    }

    /// `E(tau | side)` from the tabulated CDF.
    pub fn conditional_mean(&self, side: Side) -> f64 {
        self.side(side).mean()
    }

    pub fn tail(&self, side: Side) -> Option<ExpTail> {
        self.side(side).tail
    }

    /// Last tabulated time.
    pub fn horizon(&self) -> f64 {
        *self.lower.curve.x().last().unwrap()
    }
}

/// Draw `(tau, side)` for `p`: side from the closed form, time by inverting
/// the conditional CDF of `table`.
///
/// `table` normally belongs to `p` itself; a table of a nearby problem may be
/// passed to trade exactness for speed.
pub fn sample_exit_pathfree<R: Rng + ?Sized>(p: &ExitProblem, table: &ExitTimeTable, rng: &mut R) -> Result<ExitSample> {
    if let Some(side) = p.boundary_side() {
        return Ok(ExitSample { time: 0.0, side });
    }
    let (pl, _) = exit_side_probs(p)?;
    let side = if rng.gen::<f64>() < pl { Side::Lower } else { Side::Upper };
    let time = table.quantile(side, rng.gen::<f64>())?;
    Ok(ExitSample { time, side })
}

/// Exponent beyond which the bridge crossing probability is treated as zero.
const BRIDGE_NEGLIGIBLE: f64 = 40.0;

/// Oracle step `factor * min(1/omega, d^2)`, `d` the distance from the
/// start to the nearer boundary, so the step resolves both the relaxation
/// time and the diffusive time to reach the boundary.
pub fn oracle_step(p: &ExitProblem, factor: f64) -> f64 {
    let d = (p.start - p.lower).min(p.upper - p.start);
    if d > 0.0 {
        factor * (1.0 / p.omega).min(d * d)
    } else {
        factor / p.omega
    }
}

/// Fine-step simulation of the exit with a Brownian-bridge crossing test.
///
/// Each step draws the exact OU transition. A crossing seen at a grid point
/// is placed by linear interpolation; a crossing hidden between two inside
/// points is detected with probability `exp(-2 (b - x0)(b - x1) / dt)` and
/// placed at the middle of the step.
pub fn sample_exit_path_oracle<R: Rng + ?Sized>(p: &ExitProblem, dt: f64, rng: &mut R) -> Result<ExitSample> {
    p.validate()?;
    if !(dt > 0.0 && dt <= 0.01 / p.omega * (1.0 + 1e-12)) {
        return Err(Error::invalid("dt", format!("must lie in (0, 0.01/omega], got {dt}")));
    }
    if let Some(side) = p.boundary_side() {
        return Ok(ExitSample { time: 0.0, side });
    }
    let alpha = (-p.omega * dt).exp();
    let sd = (-(-2.0 * p.omega * dt).exp_m1() / (2.0 * p.omega)).sqrt();
    let (l, u) = (p.lower, p.upper);
    let mut x0 = p.start;
    let mut t = 0.0;
    let mut n = 0u64;
    loop {
        let z: f64 = rng.sample(StandardNormal);
        let x1 = alpha * x0 + sd * z;
        if x1 <= l {
            return Ok(ExitSample {
                time: t + dt * (x0 - l) / (x0 - x1),
                side: Side::Lower,
            });
        }
        if x1 >= u {
            return Ok(ExitSample {
                time: t + dt * (u - x0) / (x1 - x0),
                side: Side::Upper,
            });
        }
        let el = 2.0 * (x0 - l) * (x1 - l) / dt;
        if el < BRIDGE_NEGLIGIBLE && rng.gen::<f64>() < (-el).exp() {
            return Ok(ExitSample { time: t + 0.5 * dt, side: Side::Lower });
        }
        let eu = 2.0 * (u - x0) * (u - x1) / dt;
        if eu < BRIDGE_NEGLIGIBLE && rng.gen::<f64>() < (-eu).exp() {
            return Ok(ExitSample { time: t + 0.5 * dt, side: Side::Upper });
        }
        x0 = x1;
        n += 1;
        t = n as f64 * dt;
    }
}

/// Shared cache of exit-time tables keyed by an integer lattice index.
///
/// Readers proceed concurrently; a miss builds the table outside the lock
/// and the first insertion wins.
#[derive(Debug, Default)]
pub struct ExitTableCache {
    map: RwLock<HashMap<i64, Arc<ExitTimeTable>>>,
}

impl ExitTableCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_build<F>(&self, key: i64, build: F) -> Result<Arc<ExitTimeTable>>
    where
        F: FnOnce() -> Result<ExitTimeTable>,
    {
        if let Some(t) = self.map.read().expect("cache lock poisoned").get(&key) {
            return Ok(Arc::clone(t));
        }
        let table = Arc::new(build()?);
        let mut w = self.map.write().expect("cache lock poisoned");
        Ok(Arc::clone(w.entry(key).or_insert(table)))
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

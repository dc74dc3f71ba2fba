//! Special functions behind the closed-form exit statistics.
//!
//! `erfi` and the Dawson function share one positive-term Maclaurin series,
//! so neither suffers cancellation on its own. Large arguments go through
//! Dawson scaling, `erfi(z) = 2/sqrt(pi) * exp(z^2) * D(z)`, which is also
//! what lets [`erfi_ratio`] cancel the common exponential factor before it
//! overflows.

use crate::error::{Error, Result};

const TWO_OVER_SQRT_PI: f64 = 1.128_379_167_095_512_6;
const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Largest `z^2` for which `exp(z^2)` is finite.
const EXP_ARG_MAX: f64 = 709.782_712_893_384;

/// Below this |z| erfi is summed directly from its Maclaurin series.
const ERFI_SERIES_LIMIT: f64 = 4.0;
/// Below this |z| the Dawson function is derived from the same series.
const DAWSON_SERIES_LIMIT: f64 = 6.0;

/// Accuracy controls for series evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub rel_tol: f64,
    pub max_terms: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-12,
            max_terms: 10_000,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.rel_tol <= 1e-6) {
            return Err(Error::invalid("rel_tol", "must lie in (0, 1e-6]"));
        }
        if self.max_terms < 64 {
            return Err(Error::invalid("max_terms", "must be at least 64"));
        }
        Ok(())
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// `sum_k z^(2k+1) / (k! (2k+1))` for `z >= 0`; all terms positive.
fn erfi_series_core(z: f64) -> f64 {
    let z2 = z * z;
    let mut power = z; // z^(2k+1)/k!
    let mut acc = CompensatedSum::default();
    acc.add(z);
    let mut k = 0usize;
    loop {
        k += 1;
        power *= z2 / k as f64;
        let term = power / (2 * k + 1) as f64;
        acc.add(term);
        // past the peak the terms shrink geometrically
        if (k as f64) > z2 && term <= 1e-17 * acc.value() {
            break;
        }
    }
    acc.value()
}

/// Asymptotic expansion `D(z) ~ 1/(2z) sum (2k-1)!! / (2z^2)^k`, |z| > 6.
fn dawson_asymptotic(z: f64) -> f64 {
    let inv = 1.0 / (2.0 * z * z);
    let mut term = 1.0;
    let mut acc = 1.0;
    for k in 1..200 {
        let next = term * (2 * k - 1) as f64 * inv;
        if next > term {
            break;
        }
        term = next;
        acc += term;
        if term < 1e-17 * acc {
            break;
        }
    }
    acc / (2.0 * z)
}

/// Dawson function `D(z) = exp(-z^2) * integral_0^z exp(t^2) dt`.
pub fn dawson(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    let a = z.abs();
    if a == 0.0 {
        return z;
    }
    let d = if a <= DAWSON_SERIES_LIMIT {
        (-a * a).exp() * erfi_series_core(a)
    } else if a.is_infinite() {
        0.0
    } else {
        dawson_asymptotic(a)
    };
    d.copysign(z)
}

/// Imaginary error function `erfi(z) = 2/sqrt(pi) * integral_0^z exp(t^2) dt`.
///
/// Returns [`Error::Overflow`] once `exp(z^2)` leaves the `f64` range; use
/// [`erfi_scaled`] or [`erfi_ratio`] there.
pub fn erfi(z: f64) -> Result<f64> {
    if !z.is_finite() {
        return Err(Error::Domain {
            function: "erfi",
            reason: format!("non-finite argument {z}"),
        });
    }
    let a = z.abs();
    let v = if a <= ERFI_SERIES_LIMIT {
        TWO_OVER_SQRT_PI * erfi_series_core(a)
    } else {
        let q = a * a;
        if q > EXP_ARG_MAX {
            return Err(Error::Overflow {
                function: "erfi",
                argument: z,
            });
        }
        let v = TWO_OVER_SQRT_PI * q.exp() * dawson(a);
        if !v.is_finite() {
            return Err(Error::Overflow {
                function: "erfi",
                argument: z,
            });
        }
        v
    };
    Ok(v.copysign(z))
}

/// `exp(-z^2) * erfi(z)`, finite for every real `z`.
pub fn erfi_scaled(z: f64) -> f64 {
    TWO_OVER_SQRT_PI * dawson(z)
}

/// `(erfi(a) - erfi(b)) / (erfi(a) - erfi(c))` without forming erfi itself.
///
/// This is the shape of both exit-side probabilities: with `s = sqrt(omega)`
/// the lower-exit probability is `erfi_ratio(s*u, s*x, s*l)` and the
/// upper-exit probability is `erfi_ratio(s*l, s*x, s*u)`. The factor
/// `exp(max(a^2, b^2, c^2))` is cancelled analytically, so arguments far
/// beyond the overflow limit of `erfi` are fine.
pub fn erfi_ratio(a: f64, b: f64, c: f64) -> Result<f64> {
    if !(a.is_finite() && b.is_finite() && c.is_finite()) {
        return Err(Error::Domain {
            function: "erfi_ratio",
            reason: "non-finite argument".into(),
        });
    }
    if a == c {
        return Err(Error::Domain {
            function: "erfi_ratio",
            reason: format!("empty denominator interval at {a}"),
        });
    }
    if a == b {
        return Ok(0.0);
    }
    let m = (a * a).max(b * b).max(c * c);
    let s = |y: f64| ((y * y - m).exp()) * dawson(y);
    let (sa, sb, sc) = (s(a), s(b), s(c));
    Ok((sa - sb) / (sa - sc))
}

/// `2F2(1, 1; 3/2, 2; x)` with default options.
pub fn hyp2f2_11_3h2_2(x: f64) -> Result<f64> {
    hyp2f2_11_3h2_2_with(x, &EvalOptions::default())
}

/// `2F2(1, 1; 3/2, 2; x) = sum_k k! / ((3/2)_k (2)_k) x^k` for `x >= 0`.
///
/// Terms are positive, so compensated summation keeps the full relative
/// accuracy up to the overflow threshold (x around 700).
pub fn hyp2f2_11_3h2_2_with(x: f64, opts: &EvalOptions) -> Result<f64> {
    if !(x >= 0.0) || !x.is_finite() {
        return Err(Error::Domain {
            function: "hyp2f2_11_3h2_2",
            reason: format!("argument must be finite and >= 0, got {x}"),
        });
    }
    let mut acc = CompensatedSum::default();
    let mut term = 1.0;
    acc.add(term);
    for k in 0..opts.max_terms {
        let kf = k as f64;
        let ratio = x * (kf + 1.0) / ((kf + 1.5) * (kf + 2.0));
        term *= ratio;
        acc.add(term);
        let sum = acc.value();
        if !sum.is_finite() {
            return Err(Error::Overflow {
                function: "hyp2f2_11_3h2_2",
                argument: x,
            });
        }
        // ratios decrease monotonically, so the tail is bounded by a geometric series
        let next = x * (kf + 2.0) / ((kf + 2.5) * (kf + 3.0));
        if next < 1.0 && term * next / (1.0 - next) <= opts.rel_tol * sum {
            return Ok(sum);
        }
    }
    Err(Error::Convergence {
        function: "hyp2f2_11_3h2_2",
        iterations: opts.max_terms,
    })
}

/// Scaled complementary error function `exp(x^2) erfc(x)` for `x >= 0`.
pub fn erfcx(x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    if x < 4.0 {
        return (x * x).exp() * libm::erfc(x);
    }
    if x > 5e7 {
        return FRAC_1_SQRT_PI / x;
    }
    // Laplace continued fraction, evaluated backwards:
    // erfcx(x) = (1/sqrt(pi)) / (x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
    let n_terms = if x < 8.0 { 90 } else { 40 };
    let mut tail = x;
    for k in (1..=n_terms).rev() {
        tail = x + (k as f64 * 0.5) / tail;
    }
    FRAC_1_SQRT_PI / tail
}

const GL10_NODES: [f64; 5] = [
    0.148_874_338_981_631_2,
    0.433_395_394_129_247_2,
    0.679_409_568_299_024_4,
    0.865_063_366_688_984_5,
    0.973_906_528_517_171_7,
];
const GL10_WEIGHTS: [f64; 5] = [
    0.295_524_224_714_752_9,
    0.269_266_719_309_996_3,
    0.219_086_362_515_982,
    0.149_451_349_150_580_6,
    0.066_671_344_308_688_1,
];

/// `integral_{t0}^{t1} D(t) dt` by composite 10-point Gauss-Legendre.
pub fn dawson_integral(t0: f64, t1: f64) -> f64 {
    if t0 == t1 {
        return 0.0;
    }
    let panels = ((t1 - t0).abs() / 0.5).ceil().max(1.0) as usize;
    let width = (t1 - t0) / panels as f64;
    let mut acc = CompensatedSum::default();
    for p in 0..panels {
        let mid = t0 + (p as f64 + 0.5) * width;
        let half = 0.5 * width;
        let mut panel = 0.0;
        for (node, weight) in GL10_NODES.iter().zip(GL10_WEIGHTS.iter()) {
            panel += weight * (dawson(mid - half * node) + dawson(mid + half * node));
        }
        acc.add(panel * half);
    }
    acc.value()
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Adaptive Simpson quadrature to relative tolerance `rtol`, independent of the series above.
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, rtol: f64) -> f64 {
        fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                return left + right + (left + right - whole) / 15.0;
            }
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
        let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        let tol = (rtol * whole.abs()).max(1e-300);
        rec(f, a, b, fa, fm, fb, whole, tol, 30)
    }

    fn erfi_quad(z: f64) -> f64 {
        TWO_OVER_SQRT_PI * simpson(&|t: f64| (t * t).exp(), 0.0, z, 1e-13)
    }

    #[test]
    fn erfi_at_zero_and_one() {
        assert_eq!(erfi(0.0).unwrap(), 0.0);
        let oracle = erfi_quad(1.0);
        assert_relative_eq!(oracle, 1.650_425_759, epsilon = 1e-9);
        assert_relative_eq!(erfi(1.0).unwrap(), oracle, max_relative = 1e-12);
    }

    #[test]
    fn erfi_is_odd() {
        for z in [0.5, 1.0, 2.0, 4.5, 7.0] {
            assert_eq!(erfi(-z).unwrap(), -erfi(z).unwrap());
        }
    }

    #[test]
    fn erfi_matches_quadrature_across_branches() {
        for z in [0.1, 0.9, 2.5, 3.9, 4.1, 5.0, 6.3, 8.0] {
            let q = erfi_quad(z);
            assert_relative_eq!(erfi(z).unwrap(), q, max_relative = 1e-11);
        }
    }

    #[test]
    fn erfi_overflow_is_signalled() {
        assert!(matches!(erfi(27.0), Err(Error::Overflow { .. })));
        assert!(erfi_scaled(27.0).is_finite());
    }

    #[test]
    fn erfi_dawson_identity() {
        for i in 0..=100 {
            let z = -5.0 + 0.1 * i as f64;
            let lhs = erfi(z).unwrap();
            let rhs = TWO_OVER_SQRT_PI * (z * z).exp() * dawson(z);
            assert_relative_eq!(lhs, rhs, max_relative = 1e-12, epsilon = 1e-300);
        }
    }

    #[test]
    fn dawson_maximum() {
        // golden-section search over the quadrature oracle
        let d = |z: f64| (-z * z).exp() * simpson(&|t: f64| (t * t).exp(), 0.0, z, 1e-13);
        let g = 0.5 * (5f64.sqrt() - 1.0);
        let (mut a, mut b) = (0.5, 1.5);
        while b - a > 1e-9 {
            let c = b - g * (b - a);
            let e = a + g * (b - a);
            if d(c) > d(e) {
                b = e;
            } else {
                a = c;
            }
        }
        let zmax = 0.5 * (a + b);
        assert!((zmax - 0.924).abs() < 1e-3);
        assert!((d(zmax) - 0.541044).abs() < 1e-6);
        assert_relative_eq!(dawson(zmax), d(zmax), max_relative = 1e-12);
        for i in 0..400 {
            let z = -20.0 + 0.1 * i as f64;
            assert!(dawson(z).abs() <= d(zmax) + 1e-15);
        }
    }

    #[test]
    fn dawson_large_argument() {
        assert_eq!(dawson(0.0), 0.0);
        // leading term 1/(2z); the first correction is 1/(2z^2) relative
        let lead = 1.0 / 40.0;
        assert!((dawson(20.0) / lead - 1.0).abs() < 1.01 * 0.5 / 400.0);
        assert_relative_eq!(dawson(20.0), 0.025_031_367_926_403_67, max_relative = 1e-14);
        // continuity across the series/asymptotic switch
        let z = DAWSON_SERIES_LIMIT;
        let series = (-z * z).exp() * erfi_series_core(z);
        assert_relative_eq!(series, dawson_asymptotic(z), max_relative = 1e-14);
        assert_relative_eq!(dawson(6.5), 0.077_867_818_986_069_87, max_relative = 1e-13);
    }

    #[test]
    fn erfi_ratio_basic_forms() {
        assert_eq!(erfi_ratio(1.3, 1.3, -0.4).unwrap(), 0.0);
        assert_eq!(erfi_ratio(2.0, 0.0, -2.0).unwrap(), 0.5);
        assert!(erfi_ratio(1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn erfi_ratio_matches_direct_evaluation() {
        let args = [(3.0, 0.2, -1.0), (1.0, -0.5, -2.9), (-0.3, 2.0, 2.7), (2.2, 1.1, -3.0)];
        for (a, b, c) in args {
            let direct = (erfi(a).unwrap() - erfi(b).unwrap()) / (erfi(a).unwrap() - erfi(c).unwrap());
            assert_relative_eq!(erfi_ratio(a, b, c).unwrap(), direct, max_relative = 1e-12);
        }
    }

    #[test]
    fn erfi_ratio_complementary_forms_sum_to_one() {
        for (l, x, u) in [(-1.0, 0.0, 2.0), (10.0, 12.0, 14.0), (-30.0, -29.5, -28.0)] {
            let lower = erfi_ratio(u, x, l).unwrap();
            let upper = erfi_ratio(l, x, u).unwrap();
            assert!((lower + upper - 1.0).abs() < 1e-13, "{lower} + {upper}");
        }
    }

    #[test]
    fn hyp2f2_values() {
        assert_eq!(hyp2f2_11_3h2_2(0.0).unwrap(), 1.0);
        let h = 1e-6;
        let slope = (hyp2f2_11_3h2_2(h).unwrap() - 1.0) / h;
        assert!((slope - 1.0 / 3.0).abs() < 1e-6);
        // high-precision term-by-term summation
        assert_relative_eq!(hyp2f2_11_3h2_2(2.0).unwrap(), 2.250_801_208_114_537_3, max_relative = 1e-12);
        assert_relative_eq!(hyp2f2_11_3h2_2(60.0).unwrap(), 2.196_265_293_204_513_9e23, max_relative = 1e-12);
        assert!(hyp2f2_11_3h2_2(-1.0).is_err());
        assert!(matches!(hyp2f2_11_3h2_2(800.0), Err(Error::Overflow { .. })));
    }

    #[test]
    fn hyp2f2_partial_sums_increase() {
        let x = 7.5;
        let tight = EvalOptions { rel_tol: 1e-16, max_terms: 10_000 };
        let full = hyp2f2_11_3h2_2_with(x, &tight).unwrap();
        let mut term = 1.0;
        let mut partial = 1.0;
        for k in 0..200 {
            let kf = k as f64;
            term *= x * (kf + 1.0) / ((kf + 1.5) * (kf + 2.0));
            let next = partial + term;
            assert!(next >= partial);
            partial = next;
            assert!(partial <= full * (1.0 + 1e-14));
        }
    }

    #[test]
    fn erfcx_reference_values() {
        // 30-digit reference values
        let table = [
            (3.9, 0.140_314_181_600_689_7),
            (4.0, 0.136_999_457_625_061_4),
            (4.5, 0.122_484_804_273_841_4),
            (5.0, 0.110_704_637_733_068_6),
            (5.5, 0.100_962_218_399_499_1),
            (10.0, 0.056_140_992_743_822_59),
        ];
        for (x, v) in table {
            assert_relative_eq!(erfcx(x), v, max_relative = 1e-13);
        }
        assert_relative_eq!(erfcx(100.0), FRAC_1_SQRT_PI / 100.0 * (1.0 - 0.5e-4), max_relative = 1e-8);
    }

    #[test]
    fn dawson_integral_matches_quadrature() {
        let q = simpson(&dawson, -1.0, 7.3, 1e-13);
        assert_relative_eq!(dawson_integral(-1.0, 7.3), q, max_relative = 1e-11);
        assert_relative_eq!(dawson_integral(7.3, -1.0), -q, max_relative = 1e-11);
    }

    #[test]
    fn eval_options_validation() {
        assert!(EvalOptions::default().validate().is_ok());
        assert!(EvalOptions { rel_tol: 1e-3, max_terms: 100 }.validate().is_err());
        assert!(EvalOptions { rel_tol: 1e-10, max_terms: 10 }.validate().is_err());
        let tight = EvalOptions { rel_tol: 1e-12, max_terms: 64 };
        assert!(matches!(hyp2f2_11_3h2_2_with(500.0, &tight), Err(Error::Convergence { .. })));
    }

    #[test]
    fn normal_helpers() {
        assert_relative_eq!(normal_pdf(0.0), FRAC_1_SQRT_2PI);
        assert_relative_eq!(normal_cdf(0.0), 0.5);
        assert_relative_eq!(normal_cdf(1.959_963_984_540_054), 0.975, max_relative = 1e-12);
    }
}

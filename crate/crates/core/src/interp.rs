//! Shape-preserving interpolation used for CDF tables.

/// Monotone piecewise-cubic Hermite interpolant (Fritsch-Carlson slopes).
#[derive(Debug, Clone)]
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

fn edge_slope(h0: f64, h1: f64, m0: f64, m1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
    if d.signum() != m0.signum() {
        0.0
    } else if m0.signum() != m1.signum() && d.abs() > 3.0 * m0.abs() {
        3.0 * m0
    } else {
        d
    }
}

impl Pchip {
    /// `x` strictly increasing, `y` the same length, at least two points.
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        assert!(x.len() >= 2 && x.len() == y.len());
        let n = x.len();
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let m: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d[0] = m[0];
            d[1] = m[0];
        } else {
            for k in 1..n - 1 {
                if m[k - 1] * m[k] > 0.0 {
                    let w1 = 2.0 * h[k] + h[k - 1];
                    let w2 = h[k] + 2.0 * h[k - 1];
                    d[k] = (w1 + w2) / (w1 / m[k - 1] + w2 / m[k]);
                }
            }
            d[0] = edge_slope(h[0], h[1], m[0], m[1]);
            d[n - 1] = edge_slope(h[n - 2], h[n - 3], m[n - 2], m[n - 3]);
        }
        Self { x, y, d }
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Index `k` with `x[k] <= t <= x[k+1]`, clamped to the table.
    pub fn segment(&self, t: f64) -> usize {
        let k = self.x.partition_point(|&v| v <= t);
        k.saturating_sub(1).min(self.x.len() - 2)
    }

    fn hermite(&self, k: usize, t: f64) -> (f64, f64) {
        let h = self.x[k + 1] - self.x[k];
        let s = (t - self.x[k]) / h;
        let (y0, y1, d0, d1) = (self.y[k], self.y[k + 1], self.d[k], self.d[k + 1]);
        let s2 = s * s;
        let s3 = s2 * s;
        let v = (2.0 * s3 - 3.0 * s2 + 1.0) * y0
            + (s3 - 2.0 * s2 + s) * h * d0
            + (-2.0 * s3 + 3.0 * s2) * y1
            + (s3 - s2) * h * d1;
        let dv = ((6.0 * s2 - 6.0 * s) * (y0 - y1)) / h + (3.0 * s2 - 4.0 * s + 1.0) * d0 + (3.0 * s2 - 2.0 * s) * d1;
        (v, dv)
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.hermite(self.segment(t), t).0
    }

    pub fn derivative(&self, t: f64) -> f64 {
        self.hermite(self.segment(t), t).1
    }

    /// Solve `eval(t) = target` inside segment `k` by bisection to `tol`.
    pub fn invert_in_segment(&self, k: usize, target: f64, tol: f64) -> f64 {
        let (mut lo, mut hi) = (self.x[k], self.x[k + 1]);
        while hi - lo > tol {
            let mid = 0.5 * (lo + hi);
            if self.hermite(k, mid).0 < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Weights of the 4-point Lagrange interpolant on a uniform grid.
///
/// Returns the first node index and the weights for nodes `i0..i0+4`.
pub fn lagrange4_uniform(x0: f64, dx: f64, n: usize, x: f64) -> (usize, [f64; 4]) {
    assert!(n >= 4);
    let pos = (x - x0) / dx;
    let i0 = (pos.floor() as i64 - 1).clamp(0, n as i64 - 4) as usize;
    let s = pos - i0 as f64;
    let mut w = [0.0; 4];
    for (j, wj) in w.iter_mut().enumerate() {
        let mut v = 1.0;
        for m in 0..4 {
            if m != j {
                v *= (s - m as f64) / (j as f64 - m as f64);
            }
        }
        *wj = v;
    }
    (i0, w)
}

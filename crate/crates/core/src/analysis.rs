//! Summary statistics, ISI histograms, kernel densities and KS tests.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_stream::{polarity_transition_matrix, EventStream, Polarity};
use crate::specfun::normal_pdf;

/// Consecutive-polarity class of an event pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransitionClass {
    OnOff,
    OffOn,
    OnOn,
    OffOff,
}

impl TransitionClass {
    pub const ALL: [TransitionClass; 4] = [Self::OnOff, Self::OffOn, Self::OnOn, Self::OffOff];

    pub fn of(prev: Polarity, next: Polarity) -> Self {
        match (prev, next) {
            (Polarity::On, Polarity::Off) => Self::OnOff,
            (Polarity::Off, Polarity::On) => Self::OffOn,
            (Polarity::On, Polarity::On) => Self::OnOn,
            (Polarity::Off, Polarity::Off) => Self::OffOff,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::OnOff => "on->off",
            Self::OffOn => "off->on",
            Self::OnOn => "on->on",
            Self::OffOff => "off->off",
        }
    }

    pub fn is_opposite(&self) -> bool {
        matches!(self, Self::OnOff | Self::OffOn)
    }
}

/// Log-binned ISI counts for the four transition classes on shared edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsiHistograms {
    pub edges: Vec<f64>,
    /// Counts indexed like [`TransitionClass::ALL`].
    pub counts: [Vec<u64>; 4],
}

impl IsiHistograms {
    pub fn class_counts(&self, c: TransitionClass) -> &[u64] {
        let k = TransitionClass::ALL.iter().position(|&x| x == c).unwrap();
        &self.counts[k]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Geometric centre of the most populated bin of a class.
    pub fn modal_isi(&self, c: TransitionClass) -> Option<f64> {
        let counts = self.class_counts(c);
        let (k, &n) = counts.iter().enumerate().max_by_key(|&(i, &n)| (n, std::cmp::Reverse(i)))?;
        if n == 0 {
            return None;
        }
        Some((self.edges[k] * self.edges[k + 1]).sqrt())
    }

    /// CSV rows `class,bin_left,bin_right,count`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# bin edges in seconds")?;
        writeln!(w, "class,bin_left,bin_right,count")?;
        for (c, counts) in TransitionClass::ALL.iter().zip(&self.counts) {
            for (k, n) in counts.iter().enumerate() {
                writeln!(w, "{},{},{},{}", c.label(), self.edges[k], self.edges[k + 1], n)?;
            }
        }
        Ok(())
    }
}

/// Default histogram resolution.
pub const DEFAULT_BINS_PER_DECADE: usize = 10;

/// ISI of each event pair binned on a log axis from `rho` (or the smallest
/// ISI when `rho = 0`) to the largest ISI.
pub fn isi_histograms(s: &EventStream, bins_per_decade: usize) -> Result<IsiHistograms> {
    if s.events.len() < 2 {
        return Err(Error::DegenerateSample("need at least two events".into()));
    }
    if bins_per_decade == 0 {
        return Err(Error::invalid("bins_per_decade", "must be positive"));
    }
    let isis = s.events[1..].iter().map(|e| e.isi);
    let hi = isis.clone().fold(f64::NEG_INFINITY, f64::max);
    let lo = if s.params.rho > 0.0 {
        s.params.rho
    } else {
        isis.fold(f64::INFINITY, f64::min)
    };
    let decades = (hi / lo).log10().max(0.0);
    let nbins = ((decades * bins_per_decade as f64).ceil() as usize).max(1);
    let mut edges: Vec<f64> = (0..=nbins)
        .map(|k| lo * 10f64.powf(k as f64 / bins_per_decade as f64))
        .collect();
    let last = edges.len() - 1;
    edges[last] = edges[last].max(hi);
    let mut counts = [vec![0u64; nbins], vec![0u64; nbins], vec![0u64; nbins], vec![0u64; nbins]];
    for w in s.events.windows(2) {
        let c = TransitionClass::of(w[0].polarity, w[1].polarity);
        let k = TransitionClass::ALL.iter().position(|&x| x == c).unwrap();
        let bin = ((w[1].isi / lo).log10() * bins_per_decade as f64).floor();
        let bin = (bin.max(0.0) as usize).min(nbins - 1);
        // guard against rounding at the edges
        let bin = if w[1].isi < edges[bin] && bin > 0 {
            bin - 1
        } else if w[1].isi >= edges[bin + 1] && bin + 1 < nbins {
            bin + 1
        } else {
            bin
        };
        counts[k][bin] += 1;
    }
    Ok(IsiHistograms { edges, counts })
}

/// The rows of the synthetic-stream summary table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub n_events: usize,
    pub record_time_s: f64,
    pub p_on: f64,
    pub p_off: f64,
    pub p_on_to_on: f64,
    pub p_on_to_off: f64,
    pub p_off_to_on: f64,
    pub p_off_to_off: f64,
    pub p_opposite_pairs: f64,
    pub r_total: f64,
    pub r_on: f64,
    pub r_off: f64,
}

pub fn summarize(s: &EventStream) -> Result<SummaryTable> {
    let m = polarity_transition_matrix(s)?;
    let n = s.events.len();
    let n_on = s.events.iter().filter(|e| e.polarity == Polarity::On).count();
    let p_on = n_on as f64 / n as f64;
    let p_off = 1.0 - p_on;
    let pairs = (n - 1) as f64;
    let opposite = (m.counts[1] + m.counts[2]) as f64 / pairs;
    let record_time_s = s.record_time();
    let r_total = n as f64 / record_time_s;
    Ok(SummaryTable {
        n_events: n,
        record_time_s,
        p_on,
        p_off,
        p_on_to_on: m.on_on,
        p_on_to_off: m.on_off,
        p_off_to_on: m.off_on,
        p_off_to_off: m.off_off,
        p_opposite_pairs: opposite,
        r_total,
        r_on: p_on * r_total,
        r_off: p_off * r_total,
    })
}

impl SummaryTable {
    fn rows(&self) -> Vec<(&'static str, String)> {
        let f = |v: f64| format!("{v:.3}");
        vec![
            ("number of events", self.n_events.to_string()),
            ("record time (s)", f(self.record_time_s)),
            ("record time (weeks)", f(self.record_time_s / 604_800.0)),
            ("on event probability", f(self.p_on)),
            ("off event probability", f(self.p_off)),
            ("on-to-on probability", f(self.p_on_to_on)),
            ("on-to-off probability", f(self.p_on_to_off)),
            ("off-to-on probability", f(self.p_off_to_on)),
            ("off-to-off probability", f(self.p_off_to_off)),
            ("opposite polarity pairs", f(self.p_opposite_pairs)),
            ("total event rate (ev/s)", f(self.r_total)),
            ("on event rate (ev/s)", f(self.r_on)),
            ("off event rate (ev/s)", f(self.r_off)),
        ]
    }
}

impl fmt::Display for SummaryTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = self.rows();
        let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let vw = rows.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
        for (k, v) in rows {
            writeln!(f, "{k:<w$}  {v:>vw$}")?;
        }
        Ok(())
    }
}

/// Gaussian kernel density estimate tabulated on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl KdeCurve {
    /// Linear interpolation on the grid, zero outside it.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.grid.len();
        let (a, b) = (self.grid[0], self.grid[n - 1]);
        if !(x >= a && x <= b) {
            return 0.0;
        }
        let h = (b - a) / (n - 1) as f64;
        let pos = (x - a) / h;
        let k = (pos.floor() as usize).min(n - 2);
        let s = pos - k as f64;
        (1.0 - s) * self.density[k] + s * self.density[k + 1]
    }

    /// Trapezoid integral over the grid.
    pub fn mass(&self) -> f64 {
        let h = self.grid[1] - self.grid[0];
        let inner: f64 = self.density.iter().sum();
        h * (inner - 0.5 * (self.density[0] + self.density[self.density.len() - 1]))
    }

    /// Grid point of maximal density.
    pub fn mode(&self) -> f64 {
        let k = self
            .density
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
            .0;
        self.grid[k]
    }
}

/// Maximum of `|f(x) - g(x)|` over the union of both grids.
pub fn sup_distance(f: &KdeCurve, g: &KdeCurve) -> f64 {
    f.grid
        .iter()
        .chain(&g.grid)
        .map(|&x| (f.eval(x) - g.eval(x)).abs())
        .fold(0.0, f64::max)
}

pub const KDE_GRID_POINTS: usize = 512;
/// Grid refinement used for binned evaluation of large samples.
const KDE_BIN_REFINE: usize = 8;
/// Above this sample count the estimate is computed from linear binning.
const KDE_EXACT_LIMIT: usize = 20_000;

fn quantile_sorted(s: &[f64], q: f64) -> f64 {
    let pos = q * (s.len() - 1) as f64;
    let k = pos.floor() as usize;
    let frac = pos - k as f64;
    if k + 1 < s.len() {
        s[k] * (1.0 - frac) + s[k + 1] * frac
    } else {
        s[k]
    }
}

/// Silverman's rule `0.9 min(sd, IQR/1.34) n^(-1/5)`.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let scale = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(spread > 1e-12 * scale.max(f64::MIN_POSITIVE)) {
        return Err(Error::DegenerateSample("zero spread; pass an explicit bandwidth".into()));
    }
    Ok(0.9 * spread * n.powf(-0.2))
}

/// Gaussian KDE on 512 points spanning the sample range plus three bandwidths.
pub fn kde(samples: &[f64], bandwidth: Option<f64>) -> Result<KdeCurve> {
    if samples.len() < 100 {
        return Err(Error::DegenerateSample(format!("{} samples, need at least 100", samples.len())));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::DegenerateSample("non-finite sample".into()));
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::invalid("bandwidth", format!("must be positive, got {h}"))),
        None => silverman_bandwidth(samples)?,
    };
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    let n = KDE_GRID_POINTS;
    let step = (hi - lo) / (n - 1) as f64;
    let grid: Vec<f64> = (0..n).map(|i| lo + i as f64 * step).collect();
    let norm = 1.0 / (samples.len() as f64 * h);
    let density: Vec<f64> = if samples.len() <= KDE_EXACT_LIMIT {
        grid.par_iter()
            .map(|&x| samples.iter().map(|&s| normal_pdf((x - s) / h)).sum::<f64>() * norm)
            .collect()
    } else {
        // linear binning on a refined grid, then direct kernel sums over bins
        let m = (n - 1) * KDE_BIN_REFINE + 1;
        let fine = (hi - lo) / (m - 1) as f64;
        let mut weights = vec![0.0; m];
        for &s in samples {
            let pos = (s - lo) / fine;
            let k = (pos.floor() as usize).min(m - 2);
            let frac = pos - k as f64;
            weights[k] += 1.0 - frac;
            weights[k + 1] += frac;
        }
        let reach = ((6.0 * h / fine).ceil() as usize).max(1);
        let kernel: Vec<f64> = (0..=reach).map(|j| normal_pdf(j as f64 * fine / h)).collect();
        (0..n)
            .into_par_iter()
            .map(|i| {
                let c = i * KDE_BIN_REFINE;
                let a = c.saturating_sub(reach);
                let b = (c + reach).min(m - 1);
                (a..=b).map(|j| weights[j] * kernel[c.abs_diff(j)]).sum::<f64>() * norm
            })
            .collect()
    };
    Ok(KdeCurve { grid, density, bandwidth: h })
}

/// Two-sample Kolmogorov-Smirnov result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// `Q_KS(lambda) = 2 sum (-1)^(k-1) exp(-2 k^2 lambda^2)`.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample KS statistic with the asymptotic p-value
/// `Q_KS((sqrt(ne) + 0.12 + 0.11 / sqrt(ne)) D)`, `ne = n m / (n + m)`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::DegenerateSample("empty sample".into()));
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let v = x[i].min(y[j]);
        while i < n && x[i] <= v {
            i += 1;
        }
        while j < m && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let en = ne.sqrt();
    let p_value = kolmogorov_survival((en + 0.12 + 0.11 / en) * d);
    Ok(KsResult { statistic: d, p_value })
}

/// One-sample KS statistic against a continuous CDF.
pub fn ks_one_sample<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> Result<KsResult> {
    if samples.is_empty() {
        return Err(Error::DegenerateSample("empty sample".into()));
    }
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &v) in x.iter().enumerate() {
        let f = cdf(v);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    let en = n.sqrt();
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_survival((en + 0.12 + 0.11 / en) * d),
    })
}

/// Sample skewness.
pub fn skewness(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let m2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = x.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    m3 / m2.powf(1.5)
}

/// Mean and standard error of the mean.
pub fn mean_and_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_stream::{Event, ModelParams};
    use crate::rng::stream;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn fixture(pols: &[Polarity], isi: f64) -> EventStream {
        let mut t = 0.0;
        let events = pols
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                t += isi * (1 + i % 3) as f64;
                Event {
                    index: i as u64 + 1,
                    timestamp: t,
                    polarity: p,
                    isi: isi * (1 + i % 3) as f64,
                    z_before: 0.0,
                    z_after: 0.0,
                    exit_position: 0.0,
                    xi: 0.0,
                }
            })
            .collect();
        EventStream {
            params: ModelParams::new(5.0, 0.002, 0.96, 0.94).unwrap(),
            seed: 0,
            start: 0.0,
            events,
        }
    }

    use Polarity::{Off, On};

    #[test]
    fn summary_of_hand_fixture() {
        let s = fixture(&[On, Off, On, On, Off], 1.0);
        let t = summarize(&s).unwrap();
        assert_eq!(t.p_on, 0.6);
        assert!((t.p_on_to_off - 2.0 / 3.0).abs() < 1e-15);
        assert!((t.p_on_to_on - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(t.p_off_to_on, 1.0);
        assert_eq!(t.p_opposite_pairs, 0.75);
        assert_eq!(t.record_time_s, s.record_time());
        assert!((t.r_on + t.r_off - t.r_total).abs() < 1e-15);
        let two = fixture(&[Off, On], 0.5);
        let t = summarize(&two).unwrap();
        assert_eq!((t.p_on, t.p_off_to_on, t.p_opposite_pairs), (0.5, 1.0, 1.0));
        assert!(summarize(&fixture(&[On], 1.0)).is_err());
    }

    #[test]
    fn shuffling_keeps_marginals_only() {
        let mut pols = vec![On; 30];
        pols.extend(vec![Off; 30]);
        let ordered = summarize(&fixture(&pols, 1.0)).unwrap();
        pols.shuffle(&mut stream(1, "test", 0));
        let shuffled = summarize(&fixture(&pols, 1.0)).unwrap();
        assert_eq!(ordered.p_on, shuffled.p_on);
        assert_ne!(ordered.p_on_to_on, shuffled.p_on_to_on);
    }

    #[test]
    fn alternating_stream_has_no_same_polarity_pairs() {
        let pols: Vec<Polarity> = (0..40).map(|i| if i % 2 == 0 { On } else { Off }).collect();
        let h = isi_histograms(&fixture(&pols, 0.01), 10).unwrap();
        assert!(h.class_counts(TransitionClass::OnOn).iter().all(|&c| c == 0));
        assert!(h.class_counts(TransitionClass::OffOff).iter().all(|&c| c == 0));
        assert_eq!(h.total(), 39);
    }

    #[test]
    fn histogram_edges_cover_range() {
        let pols: Vec<Polarity> = (0..50).map(|i| if i % 3 == 0 { On } else { Off }).collect();
        let s = fixture(&pols, 0.3);
        let h = isi_histograms(&s, 10).unwrap();
        assert_eq!(h.edges[0], s.params.rho);
        assert!(*h.edges.last().unwrap() >= 0.9);
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "class,bin_left,bin_right,count");
    }

    #[test]
    fn kde_of_normal_samples() {
        let mut rng = stream(2, "test", 0);
        let x: Vec<f64> = (0..100_000).map(|_| rng.sample(StandardNormal)).collect();
        let c = kde(&x, None).unwrap();
        let sup = c.grid.iter().zip(&c.density).map(|(&g, &d)| (d - normal_pdf(g)).abs()).fold(0.0, f64::max);
        assert!(sup < 0.02, "{sup}");
        assert!((c.mass() - 1.0).abs() < 1e-6);
        assert!(c.density.iter().all(|&d| d >= 0.0));
    }

    #[test]
    fn binned_and_exact_kde_agree() {
        let mut rng = stream(5, "test", 0);
        let x: Vec<f64> = (0..20_001).map(|_| rng.sample::<f64, _>(StandardNormal).abs()).collect();
        let binned = kde(&x, Some(0.1)).unwrap();
        let exact = kde(&x[..20_000], Some(0.1)).unwrap();
        assert!(sup_distance(&binned, &exact) < 5e-3);
    }

    #[test]
    fn kde_of_constant_samples() {
        let x = vec![0.3; 500];
        assert!(matches!(kde(&x, None), Err(Error::DegenerateSample(_))));
        let c = kde(&x, Some(0.05)).unwrap();
        assert!((c.mode() - 0.3).abs() < 0.001);
        assert!((c.eval(0.3) - normal_pdf(0.0) / 0.05).abs() < 0.01);
        // grid stops three bandwidths out
        let within = 1.0 - 2.0 * crate::specfun::normal_cdf(-3.0);
        assert!((c.mass() - within).abs() < 1e-5);
    }

    #[test]
    fn ks_detects_shift_and_accepts_equal_laws() {
        let mut rng = stream(3, "test", 0);
        let a: Vec<f64> = (0..5000).map(|_| rng.sample(StandardNormal)).collect();
        let b: Vec<f64> = (0..5000).map(|_| rng.sample(StandardNormal)).collect();
        let c: Vec<f64> = b.iter().map(|v| v + 0.2).collect();
        assert!(ks_two_sample(&a, &b).unwrap().p_value > 0.01);
        assert!(ks_two_sample(&a, &c).unwrap().p_value < 1e-6);
        let one = ks_one_sample(&a, crate::specfun::normal_cdf).unwrap();
        assert!(one.p_value > 0.01);
    }

    #[test]
    fn ks_statistic_on_disjoint_samples() {
        let r = ks_two_sample(&[1.0, 2.0, 3.0], &[4.0, 5.0]).unwrap();
        assert_eq!(r.statistic, 1.0);
        let r = ks_two_sample(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(r.statistic, 0.0);
    }

    #[test]
    fn summary_renders_three_decimals() {
        let t = summarize(&fixture(&[On, Off, On, On, Off], 1.0)).unwrap();
        let text = t.to_string();
        assert!(text.contains("0.600"));
        assert_eq!(text.lines().count(), 13);
    }
}

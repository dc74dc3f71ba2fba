//! Acceptance criteria. Each test prints one PASS/FAIL line.
//!
//! Run with `cargo test -p evpix-cli --test acceptance -- --nocapture`.
//! The full-scale stream run is opt-in: `-- --ignored`.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use evpix::analysis::{kde, ks_one_sample, ks_two_sample, mean_and_se, summarize, sup_distance};
use evpix::dynamics::{
    critical_point, default_search_interval, find_fixed_points, iterate_conditionals, near_determinism_interval,
    Classification,
};
use evpix::event_stream::{
    conditional_event_probs, labels, simulate_event_stream, simulate_reference_chain, ModelParams,
    StreamOptions,
};
use evpix::ou_exit::{
    exit_side_probs, expected_exit_time, oracle_step, sample_exit_path_oracle, sample_exit_pathfree, solve_exit_pdes, ExitProblem,
    ExitTimeTable, Side, TableOptions,
};
use evpix::photovoltage::{asymptotic_params, sample_post_amp_voltages, FrontEndParams};
use evpix::rng::stream;
use evpix::specfun::normal_cdf;
use rand::Rng;

fn verdict(id: u32, title: &str, checks: &[(String, bool)]) {
    let ok = checks.iter().all(|c| c.1);
    let detail: Vec<String> = checks
        .iter()
        .map(|(d, pass)| format!("{}{d}", if *pass { "" } else { "!! " }))
        .collect();
    println!("{} criterion {id} ({title}): {}", if ok { "PASS" } else { "FAIL" }, detail.join("; "));
    assert!(ok, "criterion {id} failed");
}

fn within(name: &str, value: f64, target: f64, tol: f64) -> (String, bool) {
    let ok = (value - target).abs() <= tol;
    (format!("{name} = {value:.5} (target {target} +- {tol})"), ok)
}

fn baseline() -> ModelParams {
    ModelParams::new(5.0, 0.002, 0.96, 0.94).unwrap()
}

#[test]
fn criterion_1_exit_time_golden_value() {
    let p = ExitProblem::new(2.0, -0.5, 1.0, 0.0).unwrap();
    let n = 100_000u64;
    let table = ExitTimeTable::build(&p, &TableOptions::default()).unwrap();
    let a: Vec<f64> = (0..n)
        .map(|i| sample_exit_pathfree(&p, &table, &mut stream(1, "acceptance-pathfree", i)).unwrap().time)
        .collect();
    let b: Vec<f64> = (0..n)
        .map(|i| sample_exit_path_oracle(&p, oracle_step(&p, 0.01), &mut stream(1, "acceptance-oracle", i)).unwrap().time)
        .collect();
    verdict(
        1,
        "exit-time golden value",
        &[
            within("analytic E tau", expected_exit_time(&p).unwrap(), 0.6918, 0.0005),
            within("path-free mean", mean_and_se(&a).0, 0.6918, 0.01),
            within("path-oracle mean", mean_and_se(&b).0, 0.6918, 0.01),
        ],
    );
}

#[test]
fn criterion_2_sampler_equivalence() {
    let n = 10_000u64;
    let mut pick = stream(2, "acceptance-problems", 0);
    let mut checks = Vec::new();
    for k in 0..5 {
        // omega * width^2 <= 12 keeps exit times finite at desk scale
        let omega = pick.gen_range(0.5..10.0);
        let width = pick.gen_range(0.5..(12.0f64 / omega).sqrt().min(3.0));
        let lower = -pick.gen_range(0.0..width);
        let start = lower + width * pick.gen_range(0.1..0.9);
        let p = ExitProblem::new(omega, lower, lower + width, start).unwrap();
        let table = ExitTimeTable::build(&p, &TableOptions::default()).unwrap();
        let a: Vec<_> = (0..n)
            .map(|i| sample_exit_pathfree(&p, &table, &mut stream(2, &format!("pathfree-{k}"), i)).unwrap())
            .collect();
        let b: Vec<_> = (0..n)
            .map(|i| sample_exit_path_oracle(&p, oracle_step(&p, 0.01), &mut stream(2, &format!("oracle-{k}"), i)).unwrap())
            .collect();
        let (pl, _) = exit_side_probs(&p).unwrap();
        let sd = (pl * (1.0 - pl) / n as f64).sqrt();
        let fa = a.iter().filter(|e| e.side == Side::Lower).count() as f64 / n as f64;
        let fb = b.iter().filter(|e| e.side == Side::Lower).count() as f64 / n as f64;
        let ks = ks_two_sample(
            &a.iter().map(|e| e.time).collect::<Vec<_>>(),
            &b.iter().map(|e| e.time).collect::<Vec<_>>(),
        )
        .unwrap();
        let ok = (fa - pl).abs() <= 3.0 * sd && (fb - pl).abs() <= 3.0 * sd && ks.p_value > 0.01;
        checks.push((
            format!(
                "problem {k} (w={omega:.2}, [{lower:.2}, {:.2}], x={start:.2}): P_l={pl:.4}, freq {fa:.4}/{fb:.4}, KS p={:.3}",
                lower + width,
                ks.p_value
            ),
            ok,
        ));
    }
    verdict(2, "sampler equivalence", &checks);
}

fn event_statistics_checks(n: usize) -> Vec<(String, bool)> {
    let s = simulate_event_stream(&baseline(), 0.0, n, 1, &StreamOptions::default()).unwrap();
    let t = summarize(&s).unwrap();
    vec![
        within("p_on", t.p_on, 0.505, 0.015),
        within("opposite pairs", t.p_opposite_pairs, 0.916, 0.015),
        within("on->off", t.p_on_to_off, 0.923, 0.02),
        within("off->on", t.p_off_to_on, 0.906, 0.02),
        within("r_total", t.r_total, 0.431, 0.03),
    ]
}

#[test]
fn criterion_3_event_statistics_at_desk_scale() {
    verdict(3, "event statistics, N = 1e5", &event_statistics_checks(100_000));
}

#[test]
#[ignore = "full-scale run; opt in with --ignored"]
fn criterion_3_event_statistics_full_scale() {
    verdict(3, "event statistics, N = 1e6", &event_statistics_checks(1_000_000));
}

#[test]
fn criterion_4_refractory_period() {
    let p = ModelParams::new(5.0, 0.39, 0.96, 0.94).unwrap();
    let s = simulate_event_stream(&p, 0.0, 100_000, 1, &StreamOptions::default()).unwrap();
    let t = summarize(&s).unwrap();
    let (mut same, mut opposite) = (Vec::new(), Vec::new());
    for w in s.events.windows(2) {
        if w[0].polarity == w[1].polarity {
            same.push(w[1].isi);
        } else {
            opposite.push(w[1].isi);
        }
    }
    let ks = ks_two_sample(&same, &opposite).unwrap();
    let fp = find_fixed_points(&p, default_search_interval(&p)).unwrap();
    let single_stable = fp.len() == 1 && fp[0].stable && (fp[0].location - 0.005).abs() <= 0.003;
    verdict(
        4,
        "refractory-period experiment",
        &[
            within("r_total", t.r_total, 0.361, 0.03),
            (
                format!(
                    "same vs opposite ISI KS D = {:.4}, p = {:.3e} (n = {}/{}), need p > 0.01",
                    ks.statistic,
                    ks.p_value,
                    same.len(),
                    opposite.len()
                ),
                ks.p_value > 0.01,
            ),
            (format!("fixed points {:?}", fp.iter().map(|f| (f.location, f.stable)).collect::<Vec<_>>()), single_stable),
        ],
    );
}

#[test]
fn criterion_5_dynamics_diagnostics() {
    let p = baseline();
    let fp = find_fixed_points(&p, default_search_interval(&p)).unwrap();
    let single_unstable = fp.len() == 1 && !fp[0].stable && (fp[0].location - 0.009).abs() <= 0.003;
    let trace = iterate_conditionals(&p, 0.0, 50).unwrap();
    let cycle = match &trace.classification {
        Classification::LimitCycle { points } => {
            (format!("2-cycle {points:?}"), (points[0] + 0.624).abs() <= 0.005 && (points[1] - 0.312).abs() <= 0.005)
        }
        other => (format!("classified {other:?}"), false),
    };
    let cp = critical_point(&p).unwrap();
    let (lo, hi) = near_determinism_interval(&p, 0.99).unwrap();
    let p_at = |z: f64| conditional_event_probs(&p, z).unwrap();
    verdict(
        5,
        "dynamics diagnostics",
        &[
            (format!("fixed points {:?}", fp.iter().map(|f| (f.location, f.derivative)).collect::<Vec<_>>()), single_unstable),
            cycle,
            within("z*", cp.probability_crossing, 0.01, 0.005),
            (format!("characterization spread {:.2e}", cp.spread()), cp.spread() <= 0.005),
            within("0.99 interval lower", lo, -0.029, 0.005),
            within("0.99 interval upper", hi, 0.049, 0.005),
            (
                format!(
                    "P(on | -0.029) = {:.3}, P(off | 0.049) = {:.3}",
                    p_at(-0.029).1,
                    p_at(0.049).0
                ),
                true,
            ),
        ],
    );
}

/// Standard error of a chain mean from 100 batch means.
fn batch_se(x: &[f64]) -> f64 {
    let b = 100;
    let len = x.len() / b;
    let means: Vec<f64> = x.chunks_exact(len).map(|c| c.iter().sum::<f64>() / len as f64).collect();
    mean_and_se(&means).1
}

#[test]
fn criterion_6_symmetry() {
    let n = 1_000_000;
    let burn = 10_000;
    let sym = ModelParams::new(5.0, 0.002, 0.95, 0.95).unwrap();
    let z = simulate_reference_chain(&sym, 0.0, n + burn, &mut stream(6, labels::CHAIN, 0)).unwrap();
    let z = &z[burn + 1..];
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    let se = batch_se(z);
    let p = baseline();
    let a = simulate_reference_chain(&p, 0.0, n + burn, &mut stream(6, labels::CHAIN, 1)).unwrap();
    let b = simulate_reference_chain(&p.mirrored(), 0.0, n + burn, &mut stream(6, labels::CHAIN, 2)).unwrap();
    let f = kde(&a[burn + 1..], None).unwrap();
    let g = kde(&b[burn + 1..].iter().map(|v| -v).collect::<Vec<_>>(), None).unwrap();
    let sup = sup_distance(&f, &g);
    verdict(
        6,
        "symmetry",
        &[
            (format!("symmetric chain mean {mean:.2e} (batch SE {se:.2e})"), mean.abs() <= 4.0 * se),
            (format!("mirrored KDE sup-distance {sup:.4}"), sup < 0.05),
        ],
    );
}

#[test]
fn criterion_7_pde_closed_form() {
    let mut checks = Vec::new();
    for (omega, lower, upper, x) in [(2.0, -0.5, 1.0, 0.0), (5.0, -0.5, 0.5, 0.1), (1.0, -1.0, 0.5, -0.2)] {
        let p = ExitProblem::new(omega, lower, upper, x).unwrap();
        let sol = solve_exit_pdes(&p, 20.0 / omega, 401, 4000).unwrap();
        let last = sol.nt() - 1;
        let g2 = sol.interp_x(2, last, x);
        let (pl, _) = exit_side_probs(&p).unwrap();
        let mut additivity: f64 = 0.0;
        let mut monotone = true;
        for it in 0..sol.nt() {
            for ix in 0..sol.nx() {
                additivity = additivity.max((sol.at(1, it, ix) - sol.at(2, it, ix) - sol.at(3, it, ix)).abs());
                if it > 0 {
                    for which in 1..=3 {
                        monotone &= sol.at(which, it, ix) >= sol.at(which, it - 1, ix);
                    }
                }
            }
        }
        checks.push(within(&format!("({omega}, {lower}, {upper}, {x}) g2(T)"), g2, pl, 1e-4));
        checks.push((format!("max |g1 - g2 - g3| {additivity:.1e}"), additivity <= 1e-8));
        checks.push((format!("monotone in t: {monotone}"), monotone));
    }
    verdict(7, "PDE / closed-form cross-check", &checks);
}

#[test]
fn criterion_8_asymptotic_normality() {
    let mut d = Vec::new();
    for (k, l) in [10.0, 1e2, 1e3, 1e4].into_iter().enumerate() {
        let fe = FrontEndParams {
            beta1: 1.0,
            beta2: 1.0,
            beta3: 0.0,
            sigma: 1e-3,
            xi1: 0.01,
            xi2: 0.0,
            radiance: l,
        };
        let g = asymptotic_params(&fe).unwrap();
        let v = sample_post_amp_voltages(&fe, 100_000, &mut stream(8, "voltages", k as u64)).unwrap();
        d.push(ks_one_sample(&v, |x| normal_cdf((x - g.mu_v) / g.sigma_v)).unwrap().statistic);
    }
    let decreasing = d.windows(2).all(|w| w[1] < w[0]);
    verdict(8, "asymptotic normality", &[(format!("KS distances {d:.4?} for L = 10..1e4"), decreasing)]);
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn criterion_9_determinism() {
    let bin = env!("CARGO_BIN_EXE_evpix");
    let tmp = tempfile::tempdir().unwrap();
    let model = ["--omega", "5", "--rho", "0.002", "--theta-minus", "0.96", "--theta-plus", "0.94"];
    let runs: Vec<(&str, Vec<&str>)> = vec![
        ("stream", [&model[..], &["--n", "5000", "--seed", "9"]].concat()),
        ("exit-stats", vec!["--n", "2000", "--seed", "9"]),
        ("conditionals", [&model[..], &["--points", "101", "--overlay-events", "3000"]].concat()),
        ("dynamics", model.to_vec()),
        ("mstep", [&model[..], &["--m", "0,1,5", "--replicas", "10000"]].concat()),
    ];
    let mut checks = Vec::new();
    for (cmd, args) in runs {
        let first = tmp.path().join(format!("{cmd}-a"));
        let second = tmp.path().join(format!("{cmd}-b"));
        let st = Command::new(bin).arg(cmd).args(&args).arg("--out").arg(&first).output().unwrap();
        assert!(st.status.success(), "{cmd}: {}", String::from_utf8_lossy(&st.stderr));
        let st = Command::new(bin)
            .args(["--threads", "1", "replay"])
            .arg(first.join("manifest.toml"))
            .arg("--out")
            .arg(&second)
            .output()
            .unwrap();
        assert!(st.status.success(), "{cmd} replay: {}", String::from_utf8_lossy(&st.stderr));
        let (a, b) = (read_tree(&first), read_tree(&second));
        checks.push((format!("{cmd}: {} files", a.len()), a.len() > 1 && a == b));
    }
    verdict(9, "determinism from manifests", &checks);
}

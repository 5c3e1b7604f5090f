//! Acceptance criteria. Runs every criterion, prints one PASS/FAIL line
//! each, and exits non-zero if any failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use detalloc::allocator::{self, general_allocate, proposed_allocation, waterfill_allocate, GeneralOptions};
use detalloc::config::ScenarioConfig;
use detalloc::divergence::{self, d2j_dp2, dj_dp, in_region_s, j_orthogonal_term, orth_coeffs};
use detalloc::montecarlo::{
    empirical_moments, estimate_j_mc, estimate_pd_fc, grid_oracle, Hypothesis, McConfig, McEstimate, OracleObjective,
};
use detalloc::scenario::{
    build_cross_channel, dbm_to_mw, pathloss_gain, Allocation, ChannelSpec, GainConvention, Scenario, SensorProfile,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err(format!($($msg)*));
        }
    };
}

fn fixture(name: &str) -> ScenarioConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    ScenarioConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn at_dbm(cfg: &ScenarioConfig, dbm: f64) -> Scenario {
    cfg.scenario.with_p_tot(dbm_to_mw(dbm)).unwrap()
}

fn proposed(s: &Scenario) -> Allocation {
    proposed_allocation(s, None).unwrap().allocation
}

fn dbm_range(start: f64, stop: f64, step: f64) -> Vec<f64> {
    let n = ((stop - start) / step).round() as usize;
    (0..=n).map(|i| start + step * i as f64).collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn combined_se(a: &McEstimate, b: &McEstimate) -> f64 {
    (a.stderr * a.stderr + b.stderr * b.stderr).sqrt()
}

fn ac01_pathloss() -> Outcome {
    let pl2 = pathloss_gain(2.0, 55.0, 2.0, 1.0).unwrap().pl_db;
    let pl5 = pathloss_gain(5.0, 55.0, 2.0, 1.0).unwrap().pl_db;
    ensure!((pl2 - 61.02).abs() <= 0.1 && (pl5 - 68.98).abs() <= 0.1, "PL(2 m) = {pl2}, PL(5 m) = {pl5}");
    Ok(format!("gains -{pl2:.4} dB and -{pl5:.4} dB"))
}

fn random_sensor(rng: &mut ChaCha8Rng) -> SensorProfile {
    let p_f = rng.random_range(0.0..0.6);
    let p_d = rng.random_range(p_f + 0.02..=1.0);
    SensorProfile::new(p_d, p_f, 2.0).unwrap()
}

fn ac02_affine_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.random_range(1..=8);
        let sigma2 = 10f64.powf(rng.random_range(-9.0..-5.0));
        let gains: Vec<f64> = (0..k).map(|_| 10f64.powf(rng.random_range(-8.0..-4.0))).collect();
        let sensors: Vec<SensorProfile> = (0..k).map(|_| random_sensor(&mut rng)).collect();
        let p: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..2.0)).collect();
        let s = Scenario::new(sensors, ChannelSpec::orthogonal(&gains, sigma2).unwrap(), 2.0 * k as f64).unwrap();
        let alloc = Allocation::new(p);
        let orth = divergence::j_orthogonal(&alloc.p, s.sensors(), &gains, sigma2);
        let mimo = divergence::j_approx(&s, &alloc).unwrap();
        worst = worst.max(rel_err(orth, 2.0 * (mimo + k as f64)));
    }
    ensure!(worst <= 1e-9, "max relative error {worst:e}");
    Ok(format!("1000 scenarios, max relative error {worst:.2e}"))
}

fn ac03_derivatives() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let p_f: f64 = rng.random_range(0.0..0.6);
        // every tenth point is uninformative to exercise the zero case
        let p_d = if i % 10 == 0 { p_f } else { rng.random_range(p_f + 0.02..=1.0) };
        let g = 10f64.powf(rng.random_range(-8.0..-5.0));
        let s2 = 10f64.powf(rng.random_range(-9.0..-6.0));
        let unit = s2 / g;
        let x: f64 = rng.random_range(0.0..20.0);
        let p = x * unit;
        let c = orth_coeffs(p_d, p_f);
        let d = dj_dp(&c, p, g, s2);
        ensure!(d >= 0.0, "dj_dp = {d} < 0 at P_D={p_d}, P_F={p_f}");
        if p_d > p_f {
            ensure!(d > 0.0, "dj_dp = {d} not positive at P_D={p_d} > P_F={p_f}");
            let h = 1e-4 * unit * x.max(1.0);
            let fd = (j_orthogonal_term(&c, p + h, g, s2) - j_orthogonal_term(&c, p - h, g, s2)) / (2.0 * h);
            worst = worst.max(rel_err(d, fd));
        } else {
            ensure!(d.abs() < 1e-300 || d == 0.0, "dj_dp = {d} for an uninformative sensor");
        }
    }
    ensure!(worst <= 1e-6, "max relative error vs central differences {worst:e}");
    Ok(format!("1000 points, max relative error {worst:.2e}, dJ/dP >= 0 everywhere"))
}

fn ac04_region_s() -> Outcome {
    let mut checked = 0;
    for i in 1..=99 {
        for j in 1..=99 {
            let (p_d, p_f) = (i as f64 / 100.0, j as f64 / 100.0);
            if p_d <= p_f {
                continue;
            }
            let r = in_region_s(p_d, p_f);
            if r.c0.abs() <= 1e-12 {
                continue;
            }
            let radical = r.r1 <= p_d && p_d <= r.r2;
            ensure!((r.c0 > 0.0) == radical, "sign mismatch at ({p_d}, {p_f}): C0 = {}", r.c0);
            checked += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (g, s2, p_max) = (10f64.powf(-6.1), 1e-7, 2.0);
    let (mut inside, mut outside) = (0, 0);
    while inside < 200 || outside < 200 {
        let p_f: f64 = rng.random_range(0.0..0.99);
        let p_d: f64 = rng.random_range(p_f..1.0);
        if p_d <= p_f {
            continue;
        }
        let r = in_region_s(p_d, p_f);
        let c = orth_coeffs(p_d, p_f);
        if r.inside && inside < 200 {
            for step in 0..=40 {
                let p = p_max * step as f64 / 40.0;
                let v = d2j_dp2(&c, p, g, s2).value;
                ensure!(v <= 0.0, "d2J/dP2 = {v} > 0 at P = {p} for in-region ({p_d}, {p_f})");
            }
            inside += 1;
        } else if !r.inside && outside < 200 {
            let v = d2j_dp2(&c, 0.0, g, s2).value;
            ensure!(v > 0.0, "d2J/dP2(0) = {v} <= 0 for out-of-region ({p_d}, {p_f})");
            outside += 1;
        }
    }
    Ok(format!("{checked} grid points agree; 200 concave and 200 convex-at-zero pairs"))
}

fn ac05_waterfilling() -> Outcome {
    let mut worst_general: f64 = 0.0;
    let mut worst_grid: f64 = 0.0;
    let step = 0.02;
    for case in 2..=4 {
        let cfg = fixture(&format!("two_orth_case{case}.toml"));
        for dbm in dbm_range(-14.0, 6.0, 2.0) {
            let s = at_dbm(&cfg, dbm);
            let (wf, _) = waterfill_allocate(&s).map_err(|e| format!("case {case}: {e}"))?;
            let gen = general_allocate(&s, &GeneralOptions::default()).unwrap();
            ensure!(gen.certified, "case {case} at {dbm} dBm: general solver not certified");
            let oracle = grid_oracle(&s, OracleObjective::ApproxJ, step).unwrap();
            for j in 0..2 {
                worst_general = worst_general.max((wf.p[j] - gen.allocation.p[j]).abs());
                worst_grid = worst_grid.max((wf.p[j] - oracle.best.p[j]).abs());
            }
            let cap = s.caps()[0];
            let want = [s.p_tot().min(cap), (s.p_tot() - cap).max(0.0)];
            ensure!(
                (wf.p[0] - want[0]).abs() <= 1e-4 && (wf.p[1] - want[1]).abs() <= 1e-4,
                "case {case} at {dbm} dBm: {:?}, expected sensor 1 first {:?}",
                wf.p,
                want
            );
        }
    }
    ensure!(worst_general <= 1e-4, "waterfill vs general differs by {worst_general:e} mW");
    ensure!(worst_grid <= step + 1e-9, "waterfill vs grid oracle differs by {worst_grid} mW");
    Ok(format!(
        "cases 2-4, 11 budgets: |wf - general| <= {worst_general:.1e} mW, |wf - grid| <= {worst_grid:.3} mW"
    ))
}

fn ac06_case1_pattern() -> Outcome {
    let cfg = fixture("two_orth_case1.toml");
    let mut worst: f64 = 0.0;
    for dbm in dbm_range(-14.0, 3.0, 1.0) {
        let s = at_dbm(&cfg, dbm);
        let sol = general_allocate(&s, &GeneralOptions::default()).unwrap();
        let p = &sol.allocation.p;
        ensure!(p[0] < 1e-6, "{dbm} dBm: sensor 1 gets {} mW", p[0]);
        ensure!((p[1] - s.p_tot()).abs() < 1e-6, "{dbm} dBm: sensor 2 gets {} of {} mW", p[1], s.p_tot());
        worst = worst.max(p[0]);
    }
    Ok(format!("18 budgets -14..3 dBm, sensor 1 power <= {worst:.1e} mW"))
}

const TABLE_BUDGETS: [f64; 5] = [-7.0, -2.8, 3.5, 8.8, 13.0];

#[rustfmt::skip]
const TABLES: [[[f64; 10]; 5]; 4] = [
    [
        [0., 0., 0., 0., 0., 7., 15., 21., 26., 31.],
        [0., 0., 0., 0., 6., 11., 16., 19., 23., 25.],
        [0., 0., 0., 5., 9., 12., 15., 17., 20., 22.],
        [0., 3., 7., 9., 10., 11., 13., 14., 16., 17.],
        [10.; 10],
    ],
    [
        [100., 0., 0., 0., 0., 0., 0., 0., 0., 0.],
        [74., 26., 0., 0., 0., 0., 0., 0., 0., 0.],
        [36., 23., 15., 10., 7., 5., 3., 1., 0., 0.],
        [18., 14., 12., 10., 9., 8., 8., 7., 7., 7.],
        [10.; 10],
    ],
    [
        [100., 0., 0., 0., 0., 0., 0., 0., 0., 0.],
        [81., 19., 0., 0., 0., 0., 0., 0., 0., 0.],
        [54., 33., 13., 0., 0., 0., 0., 0., 0., 0.],
        [26., 26., 21., 15., 8., 3., 0., 0., 0., 0.],
        [10.; 10],
    ],
    [
        [100., 0., 0., 0., 0., 0., 0., 0., 0., 0.],
        [100., 0., 0., 0., 0., 0., 0., 0., 0., 0.],
        [73., 27., 0., 0., 0., 0., 0., 0., 0., 0.],
        [26., 26., 26., 15., 7., 0., 0., 0., 0., 0.],
        [10.; 10],
    ],
];

fn ac07_tables() -> Outcome {
    let mut report = Vec::new();
    let mut failed = Vec::new();
    for (t, table) in TABLES.iter().enumerate() {
        let cfg = fixture(&format!("ten_orth_case{}.toml", t + 1));
        let mut worst: f64 = 0.0;
        let mut worst_at = (0.0, 0);
        for (b, &dbm) in TABLE_BUDGETS.iter().enumerate() {
            let s = at_dbm(&cfg, dbm);
            let pct = proposed(&s).percentages(s.p_tot());
            for j in 0..10 {
                let e = (pct[j] - table[b][j]).abs();
                if e > worst {
                    worst = e;
                    worst_at = (dbm, j + 1);
                }
            }
        }
        let line = format!(
            "table {}: max error {worst:.1} pp (sensor {} at {} dBm)",
            ["I", "II", "III", "IV"][t],
            worst_at.1,
            worst_at.0
        );
        if worst > 2.0 {
            failed.push(line.clone());
        }
        report.push(line);
    }
    let cfg = fixture("ten_orth_case5.toml");
    let mut worst_v: f64 = 0.0;
    for &dbm in &TABLE_BUDGETS {
        let s = at_dbm(&cfg, dbm);
        for pct in proposed(&s).percentages(s.p_tot()) {
            worst_v = worst_v.max((pct - 10.0).abs());
        }
    }
    let line = format!("table V: max deviation from 10% {worst_v:.1e} pp");
    if worst_v > 1e-4 {
        failed.push(line.clone());
    }
    report.push(line);
    if failed.is_empty() {
        Ok(report.join("; "))
    } else {
        Err(report.join("; "))
    }
}

fn ac08_moments() -> Outcome {
    let cross = Scenario::new(
        vec![
            SensorProfile::new(0.8, 0.1, 2.0).unwrap(),
            SensorProfile::new(0.6, 0.2, 2.0).unwrap(),
        ],
        build_cross_channel([0.8, 0.5], 0.3, 0.5, GainConvention::Power).unwrap(),
        3.0,
    )
    .unwrap();
    let h = DMatrix::from_row_slice(2, 3, &[1.0, 0.4, -0.3, 0.2, 0.9, 0.5]);
    let r = DMatrix::from_row_slice(2, 2, &[0.6, 0.2, 0.2, 0.9]);
    let general = Scenario::new(
        vec![
            SensorProfile::new(0.9, 0.04, 2.0).unwrap(),
            SensorProfile::new(0.7, 0.3, 2.0).unwrap(),
            SensorProfile::new(0.5, 0.1, 2.0).unwrap(),
        ],
        ChannelSpec::general(h, r).unwrap(),
        4.0,
    )
    .unwrap();
    let cases = [
        ("cross", cross, Allocation::new(vec![1.0, 1.5])),
        ("general 3x2", general, Allocation::new(vec![1.2, 0.8, 1.5])),
    ];
    let mut worst: f64 = 0.0;
    for (name, s, alloc) in &cases {
        let m = divergence::gaussian_moments(s, alloc).unwrap();
        for (hyp, mu, sigma) in [(Hypothesis::H0, &m.mu0, &m.sigma0), (Hypothesis::H1, &m.mu1, &m.sigma1)] {
            let e = empirical_moments(s, alloc, hyp, 1_000_000, 8).unwrap();
            for a in 0..mu.len() {
                let z = (e.mean[a] - mu[a]).abs() / e.mean_stderr[a];
                ensure!(z <= 3.0, "{name} {hyp:?}: mean[{a}] off by {z:.2} standard errors");
                worst = worst.max(z);
                for b in a..mu.len() {
                    let z = (e.cov[(a, b)] - sigma[(a, b)]).abs() / e.cov_stderr[(a, b)];
                    ensure!(z <= 3.0, "{name} {hyp:?}: cov[{a},{b}] off by {z:.2} standard errors");
                    worst = worst.max(z);
                }
            }
        }
    }
    Ok(format!("10^6 draws per hypothesis, worst deviation {worst:.2} standard errors"))
}

const FIXTURES: [&str; 13] = [
    "two_orth_case1.toml",
    "two_orth_case2.toml",
    "two_orth_case3.toml",
    "two_orth_case4.toml",
    "two_cross_case1.toml",
    "two_cross_case2.toml",
    "two_cross_case3.toml",
    "two_cross_case4.toml",
    "ten_orth_case1.toml",
    "ten_orth_case2.toml",
    "ten_orth_case3.toml",
    "ten_orth_case4.toml",
    "ten_orth_case5.toml",
];

fn ac09_data_processing() -> Outcome {
    let mc = McConfig::new(20_000, 9, 0.04).unwrap();
    let mut tightest = f64::INFINITY;
    for name in FIXTURES {
        let cfg = fixture(name);
        let s = &cfg.scenario;
        let j_u = divergence::bernoulli_j_upper_bound(s.sensors());
        for alloc in [proposed(s), allocator::equal_allocation(s)] {
            let est = estimate_j_mc(s, &alloc, &mc).unwrap();
            ensure!(
                est.value <= j_u + 3.0 * est.stderr,
                "{name}: J(y) = {} ± {} exceeds J(u) = {j_u}",
                est.value,
                est.stderr
            );
            tightest = tightest.min((j_u - est.value) / est.stderr.max(1e-300));
        }
    }
    Ok(format!("13 fixtures x 2 allocations, smallest margin {tightest:.1} standard errors"))
}

fn ac10_approximation() -> Outcome {
    let cfg = fixture("ten_orth_case1.toml");
    let mc = McConfig::new(100_000, 10, 0.04).unwrap();
    let mut parts = Vec::new();
    for (dbm, band) in [(-7.0, 0.05), (13.0, 0.15)] {
        let s = at_dbm(&cfg, dbm);
        let alloc = proposed(&s);
        let approx = divergence::j_approx(&s, &alloc).unwrap();
        let est = estimate_j_mc(&s, &alloc, &mc).unwrap();
        let err = rel_err(est.value, approx);
        let part = format!(
            "{dbm} dBm: MC {:.4} ± {:.4} vs approx {approx:.4} ({:.1}%)",
            est.value,
            est.stderr,
            100.0 * err
        );
        ensure!(err <= band, "{part} outside {:.0}%", 100.0 * band);
        parts.push(part);
    }
    Ok(parts.join("; "))
}

/// Budget (dBm) at which the `curve` reaches `target`, by linear interpolation.
fn budget_for(curve: &[(f64, f64)], target: f64) -> Option<f64> {
    curve.windows(2).find_map(|w| {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        (y0 <= target && target <= y1 && y1 > y0).then(|| x0 + (target - y0) / (y1 - y0) * (x1 - x0))
    })
}

fn ac11_dominance() -> Outcome {
    let mc = McConfig::new(20_000, 11, 0.04).unwrap();
    let pd = |s: &Scenario, a: &Allocation| estimate_pd_fc(s, a, &mc).unwrap();
    let mut notes = Vec::new();
    let mut missing = Vec::new();
    for case in 1..=4 {
        let cfg = fixture(&format!("two_orth_case{case}.toml"));
        let equal: Vec<(f64, McEstimate)> = dbm_range(-14.0, 9.0, 1.0)
            .into_iter()
            .map(|dbm| {
                let s = at_dbm(&cfg, dbm);
                (dbm, pd(&s, &allocator::equal_allocation(&s)))
            })
            .collect();
        let equal_curve: Vec<(f64, f64)> = equal.iter().map(|(x, e)| (*x, e.value)).collect();
        let mut matched = None;
        let mut best_saving = f64::NEG_INFINITY;
        for (i, dbm) in dbm_range(-14.0, 6.0, 1.0).into_iter().enumerate() {
            let s = at_dbm(&cfg, dbm);
            let prop = pd(&s, &proposed(&s));
            let eq = &equal[i].1;
            ensure!(
                prop.value >= eq.value - 2.0 * combined_se(&prop, eq),
                "case {case} at {dbm} dBm: proposed {:.4} < equal {:.4}",
                prop.value,
                eq.value
            );
            if (-10.0..=2.0).contains(&dbm) {
                let eq3 = &equal[i + 3].1;
                if matched.is_none() && (prop.value - eq3.value).abs() <= 2.0 * combined_se(&prop, eq3) {
                    matched = Some(dbm);
                }
                if let Some(x) = budget_for(&equal_curve, prop.value) {
                    best_saving = best_saving.max(x - dbm);
                }
            }
        }
        match matched {
            Some(at) => notes.push(format!("case {case}: 3 dB saving at {at} dBm (max {best_saving:.1} dB)")),
            None => missing.push(format!("case {case}: no 3 dB match, max saving {best_saving:.1} dB")),
        }
    }
    let cfg = fixture("ten_orth_case4.toml");
    let mut weak = None;
    for dbm in dbm_range(-7.0, 8.0, 1.0) {
        let s = at_dbm(&cfg, dbm);
        let prop = pd(&s, &proposed(&s));
        let s5 = at_dbm(&cfg, dbm + 5.0);
        let eq5 = pd(&s5, &allocator::equal_allocation(&s5));
        if prop.value >= eq5.value - 2.0 * combined_se(&prop, &eq5) {
            weak = Some(dbm);
            break;
        }
    }
    match weak {
        Some(at) => notes.push(format!("ten-sensor case 4: >= equal at +5 dB from {at} dBm")),
        None => missing.push("ten-sensor case 4: never reaches equal allocation at +5 dB".into()),
    }
    let mut all = notes;
    all.extend(missing.iter().cloned());
    if missing.is_empty() {
        Ok(format!("dominance at every budget; {}", all.join("; ")))
    } else {
        Err(format!("dominance at every budget; {}", all.join("; ")))
    }
}

fn ac12_trivial() -> Outcome {
    let mc = McConfig::new(5000, 12, 0.04).unwrap();
    for name in ["two_orth_case2.toml", "two_cross_case3.toml", "ten_orth_case1.toml"] {
        let s = fixture(name).scenario;
        let zero = Allocation::zeros(s.k());
        let j = divergence::j_approx(&s, &zero).unwrap();
        ensure!(j.abs() < 1e-12, "{name}: J = {j} at A = 0");
        let est = estimate_pd_fc(&s, &zero, &mc).unwrap();
        ensure!((est.value - 0.04).abs() < 1e-9, "{name}: P_D,FC = {} at A = 0", est.value);
        let big = s.with_p_tot(1.01 * s.cap_sum()).unwrap();
        let caps = big.caps();
        ensure!(proposed(&big).p == caps, "{name}: proposed allocation not at full power");
        ensure!(
            general_allocate(&big, &GeneralOptions::default()).unwrap().allocation.p == caps,
            "{name}: general solver not at full power"
        );
        if big.is_orthogonal() && big.flags().all_in_region_s() {
            let (wf, _) = waterfill_allocate(&big).unwrap();
            ensure!(wf.p == caps, "{name}: waterfilling not at full power");
        }
    }
    Ok("J(A=0) = 0, P_D,FC(A=0) = P_F,FC, full power above the cap sum".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("pathloss reproduction", ac01_pathloss),
        ("affine objective identity", ac02_affine_identity),
        ("derivative suite", ac03_derivatives),
        ("region S equivalence", ac04_region_s),
        ("waterfilling correctness", ac05_waterfilling),
        ("case 1 pattern", ac06_case1_pattern),
        ("table reproduction", ac07_tables),
        ("Monte Carlo moments", ac08_moments),
        ("data-processing bound", ac09_data_processing),
        ("approximation quality", ac10_approximation),
        ("detection dominance", ac11_dominance),
        ("trivial identities", ac12_trivial),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("AC-{:02} PASS {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("AC-{:02} FAIL {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failures} failed", criteria.len() - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}

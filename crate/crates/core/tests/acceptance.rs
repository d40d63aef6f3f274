//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Run with `cargo test -p mobility-core --test acceptance`.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use mobility::calibration::{
    calibrate_cohort, calibrate_sequence, random_init, simulated_moments, CalibrationSettings, Objective,
};
use mobility::decomposition::decompose;
use mobility::estimators::{duncan_index, fulltime_correction, ira, trend_fit, EstimateRecord};
use mobility::lw::{lw_cohort, lw_fit, proxy_contributions, LwOptions, LwSpec, ProxyBlock, ProxyMatrix};
use mobility::model::{simulate_population, BaseDraws, ModelParams, Param, Role};
use mobility::pipeline::{run_pipeline, PipelineConfig};
use mobility::population::{build_pairs, IncomeWindow};
use mobility::ranking::percentile_ranks;
use mobility::stats;
use mobility::synth::{default_maps, generate_synthetic, synthesize, ProxyLoadings, SynthSpec};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn normals(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn se1951() -> ModelParams {
    ModelParams::new(0.131, 0.301, 0.580, 0.286, 0.511).unwrap()
}

fn criterion1() -> Outcome {
    let n = 100_000;
    let mut ok = true;
    let mut parts = Vec::new();
    for (k, rho) in [0.1f64, 0.3, 0.5].into_iter().enumerate() {
        let t = Instant::now();
        let z1 = normals(n, 100 + 2 * k as u64);
        let z2 = normals(n, 101 + 2 * k as u64);
        let x: Vec<f64> = z1.clone();
        let y: Vec<f64> = z1
            .iter()
            .zip(&z2)
            .map(|(a, b)| rho * a + (1.0 - rho * rho).sqrt() * b)
            .collect();
        let est = ira(
            &percentile_ranks(&y).unwrap(),
            &percentile_ranks(&x).unwrap(),
            0,
            "copula",
        )
        .unwrap();
        let secs = t.elapsed().as_secs_f64();
        let oracle = 6.0 / std::f64::consts::PI * (rho / 2.0).asin();
        let err = (est.slope - oracle).abs();
        ok &= err <= 0.01 && secs < 5.0;
        parts.push(format!(
            "rho={rho}: slope {:.4} vs {oracle:.4} (err {err:.4}, {secs:.2}s)",
            est.slope
        ));
    }
    outcome(ok, parts.join("; "))
}

fn criterion2() -> Outcome {
    let t = Instant::now();
    let maps = default_maps();
    let truth = se1951();
    let target_draws = Arc::new(BaseDraws::generate(100_000, 0xA11CE));
    let targets = simulated_moments(&truth, &maps, &target_draws).unwrap();
    let settings = CalibrationSettings {
        n_sim: 100_000,
        seed: 0xB0B,
        ..Default::default()
    };
    let init = random_init(0x1417);
    let fit = calibrate_cohort(&targets, &init, &settings, &maps).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let errs: Vec<f64> = Param::ALL
        .iter()
        .map(|&p| (fit.params.get(p) - truth.get(p)).abs())
        .collect();
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    let pass = worst <= 0.05 && fit.fit_distance < 1e-4 && secs < 600.0;
    let fitted: Vec<String> = Param::ALL
        .iter()
        .map(|&p| format!("{}={:.3}", p.name(), fit.params.get(p)))
        .collect();
    outcome(
        pass,
        format!(
            "init {:?} -> {}; max |err| {worst:.4}; fit_distance {:.2e}; {} iterations; {secs:.0}s",
            init.to_array().map(|v| (v * 1000.0).round() / 1000.0),
            fitted.join(" "),
            fit.fit_distance,
            fit.iterations
        ),
    )
}

/// SE 1962 levels for ψ, κ, α; φ^M 0.368→0.594 and φ^D 0.591→0.935 linear
/// over 1962–1979.
fn drifting_chain() -> Vec<(i32, ModelParams)> {
    (1962..=1979)
        .map(|c| {
            let s = (c - 1962) as f64 / 17.0;
            let p = ModelParams::new(
                0.289,
                0.257,
                0.632,
                0.368 + s * (0.594 - 0.368),
                0.591 + s * (0.935 - 0.591),
            );
            (c, p.unwrap())
        })
        .collect()
}

fn attribution_line(label: &str, r: &mobility::decomposition::DecompositionResult) -> (bool, String) {
    let c = &r.contributions_x100;
    let fixed_max = [Param::Psi, Param::Kappa, Param::Alpha]
        .iter()
        .map(|p| c[p].abs())
        .fold(0.0, f64::max);
    let share = (c[&Param::PhiM] + c[&Param::PhiD]) / r.simulated_trend_x100;
    let pass = fixed_max < 0.05 && share >= 0.9;
    let detail = format!(
        "{label}: trend(β̃) {:.4}; ψ {:+.4} κ {:+.4} α {:+.4} φM {:+.4} φD {:+.4}; φ share {:.3}",
        r.simulated_trend_x100,
        c[&Param::Psi],
        c[&Param::Kappa],
        c[&Param::Alpha],
        c[&Param::PhiM],
        c[&Param::PhiD],
        share
    );
    (pass, detail)
}

fn criterion3() -> Outcome {
    let t = Instant::now();
    let planted = drifting_chain();
    let maps = default_maps();
    let map_fn = |_c: i32| Ok(maps.clone());
    let n = 100_000;

    let direct = decompose(&planted, &map_fn, n, 0xDEC0, None, 1962..=1979, None).unwrap();
    let (pass_direct, line_direct) = attribution_line("planted chain", &direct);

    // End to end: recover the chain by calibration on independent draws,
    // then decompose the recovered chain.
    let target_draws = Arc::new(BaseDraws::generate(n, 0xA11CE));
    let targets: Vec<_> = planted
        .iter()
        .map(|(c, p)| (*c, simulated_moments(p, &maps, &target_draws).unwrap()))
        .collect();
    let settings = CalibrationSettings {
        n_sim: n,
        seed: 0xB0B,
        ..Default::default()
    };
    let chain = calibrate_sequence(&targets, &map_fn, &settings, 0x1417).unwrap();
    let recovered: Vec<(i32, ModelParams)> = chain.iter().map(|c| (c.cohort, *c.params().unwrap())).collect();
    let e2e = decompose(&recovered, &map_fn, n, 0xDEC0, None, 1962..=1979, None).unwrap();
    let (pass_e2e, line_e2e) = attribution_line("calibrated chain", &e2e);
    let secs = t.elapsed().as_secs_f64();
    outcome(
        pass_direct && pass_e2e && secs < 7200.0,
        format!("{line_direct} | {line_e2e} | {secs:.0}s"),
    )
}

fn criterion4() -> Outcome {
    let n = 100_000;
    let truth = 0.35;
    let s = normals(n, 400);
    let e1 = normals(n, 401);
    let e2 = normals(n, 402);
    let e3 = normals(n, 403);
    // var(s) = 1, var(e1) = 2/3: reliability of income 0.6
    let sd1 = (2.0f64 / 3.0).sqrt();
    let income: Vec<f64> = (0..n).map(|i| s[i] + sd1 * e1[i]).collect();
    let education: Vec<f64> = (0..n).map(|i| s[i] + 0.5 * e2[i]).collect();
    let y: Vec<f64> = (0..n).map(|i| truth * s[i] + e3[i]).collect();
    let mut m = ProxyMatrix::new("log_income", income.clone()).unwrap();
    m.push_column("education", ProxyBlock::Education, education).unwrap();
    let fit = lw_fit(&y, &m).unwrap();
    let ols = stats::fit_line(&income, &y, "ols").unwrap().slope;
    let closed = (fit.beta_lw - ols) / (truth - ols);
    let sum: f64 = proxy_contributions(&fit).unwrap().values().sum();
    let pass = ols < fit.beta_lw && fit.beta_lw < truth && closed >= 0.5 && (sum - 1.0).abs() <= 1e-9;
    outcome(
        pass,
        format!(
            "OLS {ols:.4} < β_LW {:.4} < {truth}; gap closed {:.1}%; contributions sum - 1 = {:.1e}",
            fit.beta_lw,
            100.0 * closed,
            sum - 1.0
        ),
    )
}

fn criterion5() -> Outcome {
    let params = ModelParams::new(0.289, 0.257, 0.632, 0.368, 0.591).unwrap();
    let spec = SynthSpec {
        chain: vec![(1962, params), (1963, params), (1964, params)],
        families: 20_000,
        seed: 55,
        proxies: ProxyLoadings::NOISE,
    };
    let maps = default_maps();
    let pop = synthesize(&spec, &|_| Ok(maps.clone())).unwrap();
    let pairs = build_pairs(
        &pop,
        1962..=1964,
        IncomeWindow::child_default(),
        IncomeWindow::parent_default(),
    )
    .unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for c in 1962..=1964 {
        let r = lw_cohort(&pop, &pairs.cohort(c), LwSpec::SON_FATHER, &LwOptions::default(), c).unwrap();
        let d = (r.estimate.slope - r.ira.slope).abs();
        ok &= d < 0.01;
        parts.push(format!(
            "{c}: LW {:.4} IRA {:.4} |diff| {d:.4}",
            r.estimate.slope, r.ira.slope
        ));
    }
    outcome(ok, parts.join("; "))
}

fn criterion6() -> Outcome {
    let d0 = duncan_index(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
    let d1 = duncan_index(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
    let d3 = duncan_index(&[0.7, 0.3], &[0.4, 0.6]).unwrap();
    let series: BTreeMap<i32, f64> = [
        (1966, 0.50),
        (1967, 0.52),
        (1968, 0.54),
        (1969, 0.56),
        (1970, 0.58),
        (1971, 0.70),
        (1972, 0.70),
    ]
    .into_iter()
    .collect();
    let corrected = fulltime_correction(&series, 1971, 1966..=1970).unwrap();
    let v72 = corrected[&1972];
    // 0.7 - 0.4 is not exactly representable; exact means equal to the
    // nearest double of the hand value
    let pass = d0 == 0.0 && d1 == 1.0 && (d3 - 0.3).abs() <= f64::EPSILON && (v72 - 0.60).abs() <= 1e-12;
    outcome(
        pass,
        format!(
            "duncan {d0}, {d1}, {d3}; corrected 1972 = {v72} (|err| {:.1e})",
            (v72 - 0.6).abs()
        ),
    )
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let key = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(key, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion7() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("fixture.csv");
    let params = ModelParams::new(0.289, 0.257, 0.632, 0.368, 0.591).unwrap();
    let spec = SynthSpec {
        chain: vec![
            (1962, params),
            (1963, params.with(Param::PhiM, 0.4)),
            (1964, params.with(Param::PhiM, 0.43)),
        ],
        families: 2_000,
        seed: 77,
        proxies: ProxyLoadings::default(),
    };
    let maps = default_maps();
    generate_synthetic(&spec, &|_| Ok(maps.clone()), &data).unwrap();
    let mut config = PipelineConfig {
        seed: 99,
        output_dir: tmp.path().join("out"),
        cohorts: [1962, 1964],
        ..Default::default()
    };
    config.input.microdata = Some(data);
    config.calibrate.n_sim = 20_000;
    config.calibrate.max_iters = 20;
    config.calibrate.map_knots = 500;

    let (m1, r1) = run_pipeline(&config);
    let first = snapshot(&config.output_dir);
    std::fs::remove_dir_all(&config.output_dir).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let (_, r2) = pool.install(|| run_pipeline(&config));
    let second = snapshot(&config.output_dir);
    let files_equal = first == second;
    let ran = r1.is_ok() && r2.is_ok() && m1.succeeded();

    let draws = Arc::new(BaseDraws::generate(100_000, 5));
    let targets = simulated_moments(&se1951(), &maps, &draws).unwrap();
    let objective = Objective {
        targets,
        maps: &maps,
        draws: draws.clone(),
        weights: [1.0; 5],
    };
    let at = ModelParams::new(0.2, 0.3, 0.5, 0.4, 0.6).unwrap().to_array();
    let a = objective.loss(&at).unwrap();
    let b = objective.loss(&at).unwrap();
    let c = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| objective.loss(&at).unwrap());
    let crn = a.to_bits() == b.to_bits() && a.to_bits() == c.to_bits();
    outcome(
        ran && files_equal && crn,
        format!(
            "pipeline ok: {ran}; {} output files byte-identical across reruns (3 vs default threads): {files_equal}; \
             loss {a:.6e} bit-identical on re-evaluation and single-threaded: {crn}",
            first.len()
        ),
    )
}

fn criterion8() -> Outcome {
    let maps = default_maps();
    let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
    let mut worst_mean: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    let mut seed = 800;
    for psi in grid {
        for kappa in grid {
            let p = ModelParams::new(psi, kappa, 0.632, 0.368, 0.591).unwrap();
            seed += 1;
            let pop = simulate_population(&p, &maps, 100_000, seed).unwrap();
            for role in Role::ALL {
                let x = pop.skills(role);
                worst_mean = worst_mean.max(stats::mean(x).abs());
                worst_var = worst_var.max((stats::variance(x) - 1.0).abs());
            }
        }
    }
    outcome(
        worst_mean <= 0.01 && worst_var <= 0.02,
        format!("25 grid points × 4 roles: max |mean| {worst_mean:.4}, max |var - 1| {worst_var:.4}"),
    )
}

fn series(f: impl Fn(i32) -> f64) -> Vec<EstimateRecord> {
    (1962..=1979)
        .map(|t| EstimateRecord {
            spec_label: "all".into(),
            cohort: t,
            slope: f(t),
            intercept: 0.0,
            se_slope: 0.0,
            n: 1,
        })
        .collect()
}

fn criterion9() -> Outcome {
    let line = trend_fit(&series(|t| 0.18 + 0.003 * (t - 1962) as f64), 1962..=1979).unwrap();
    // "exact" up to floating-point summation error
    let exact = (line.slope_x100 - 0.3).abs() < 1e-12;
    let dk = trend_fit(
        &series(|t| 0.190 + (0.265 - 0.190) * (t - 1962) as f64 / 17.0),
        1962..=1979,
    )
    .unwrap();
    // positive and within a factor of two of 0.530
    let same_order = dk.slope_x100 > 0.530 / 2.0 && dk.slope_x100 < 0.530 * 2.0;
    outcome(
        exact && same_order,
        format!(
            "noiseless slope_x100 {:.15}; DK-shaped trend {:.4} (expected about 0.530)",
            line.slope_x100, dk.slope_x100
        ),
    )
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(usize, fn() -> Outcome); 9] = [
        (1, criterion1),
        (2, criterion2),
        (3, criterion3),
        (4, criterion4),
        (5, criterion5),
        (6, criterion6),
        (7, criterion7),
        (8, criterion8),
        (9, criterion9),
    ];
    let mut failed = 0;
    for (k, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&k)) {
            continue;
        }
        let t = Instant::now();
        let o = f();
        println!(
            "criterion {k}: {} ({:.1}s) {}",
            if o.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            o.detail
        );
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} criterion/criteria failed");
        ExitCode::FAILURE
    } else {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    }
}

//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::f64::consts::PI;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use mvsde::distance::{
    build_psi_eigen, build_psi_explicit_with, empirical_distance, lp_matching, matching_cost, sorted_matching,
    CostSpec, GammaSpec, PhiMap, PsiFunction,
};
use mvsde::fpe1d::compare_particle_pde;
use mvsde::fpe1d::{solve, FpConfig, FpKernel, FpScheme, Grid1D, NEGATIVE_TOL};
use mvsde::model::{builtin_scenario, ou_coefficients, ModelConfig, OrderParams, Scenario};
use mvsde::pipeline::{certify_scenario, cost_for, fp_problem, granular_puncture, particle_marginal};
use mvsde::simulator::{
    run_decay_experiment, step_coupled, stream_rng, CoupledEnsemble, Coupling, DecayCurve, ParticleEnsemble,
};
use mvsde::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

type Criterion = (&'static str, fn() -> Result<Outcome>);

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

// ---------------------------------------------------------------- profile oracles

fn random_gamma_specs(seed: u64, count: usize) -> Vec<GammaSpec> {
    let mut rng = stream_rng(seed, 0);
    (0..count)
        .map(|_| {
            let lambda: f64 = rng.random_range(0.2..3.0);
            let theta0: f64 = rng.random_range(0.0..0.5);
            let delta: f64 = rng.random_range(0.3..2.0);
            let theta1: f64 = rng.random_range(0.0..1.0);
            let theta2 = theta0 + delta;
            // b = (theta1 + theta2) kappa / (2 lambda) stays below 0.9; see the slope criterion.
            let b: f64 = rng.random_range(0.05..0.9);
            GammaSpec {
                theta0,
                theta1,
                theta2,
                kappa_puncture: b * 2.0 * lambda / (theta1 + theta2),
                lambda_iso: lambda,
            }
        })
        .collect()
}

/// Integral of gamma over [0, t], written out independently of the library.
fn big_gamma(g: &GammaSpec, t: f64) -> f64 {
    let a = g.theta1 + g.theta2;
    let d = g.theta2 - g.theta0;
    let sk = g.kappa_puncture.sqrt();
    if t <= sk {
        (a - d) * t * t / 2.0
    } else {
        a * g.kappa_puncture / 2.0 + a * g.kappa_puncture * (t / sk).ln() - d * t * t / 2.0
    }
}

/// psi'(0) = int_0^inf t exp(Gamma(t) / 2 lambda) dt by composite Simpson.
fn simpson_integral(g: &GammaSpec) -> f64 {
    let d = g.theta2 - g.theta0;
    let r0 = (g.kappa_puncture * (g.theta1 + g.theta2) / d).sqrt();
    let upper = 10.0 * r0 + 40.0 * (2.0 * g.lambda_iso / d).sqrt();
    let n = 400_000;
    let h = upper / n as f64;
    let f = |t: f64| t * (big_gamma(g, t) / (2.0 * g.lambda_iso)).exp();
    let mut s = f(0.0) + f(upper);
    for i in 1..n {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn criterion_1() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut worst_integral: f64 = 0.0;
    for g in random_gamma_specs(101, 10) {
        let (psi, info) = build_psi_explicit_with(&g, 2048)?;
        let two_l = 2.0 * g.lambda_iso;
        let kink = g.kappa_puncture.sqrt();
        for (i, &r) in psi.grid.iter().enumerate() {
            let h = 1e-4 * r.max(1.0);
            let p = |s: f64| g.dpsi(s);
            // Second-order one-sided stencils away from 0 and the kink of gamma'.
            let d2 = if r < 2.0 * h || (r > kink && r - kink < 2.0 * h) {
                (-3.0 * p(r)? + 4.0 * p(r + h)? - p(r + 2.0 * h)?) / (2.0 * h)
            } else if r <= kink && kink - r < 2.0 * h {
                (3.0 * p(r)? - 4.0 * p(r - h)? + p(r - 2.0 * h)?) / (2.0 * h)
            } else {
                (p(r + h)? - p(r - h)?) / (2.0 * h)
            };
            let res = two_l * d2 + g.gamma(r) * psi.deriv1[i] + two_l * r;
            worst = worst.max(res.abs() / (1.0 + r));
        }
        let oracle = simpson_integral(&g);
        worst_integral = worst_integral.max((info.integral - oracle).abs() / oracle);
    }
    outcome(
        worst <= 1e-6 && worst_integral <= 1e-8,
        format!("max residual/(1+r) {worst:.3e}, psi'(0) vs Simpson rel {worst_integral:.3e}"),
    )
}

fn criterion_2() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for g in random_gamma_specs(101, 10) {
        let (psi, info) = build_psi_explicit_with(&g, 2048)?;
        let target = 2.0 * g.lambda_iso / (g.theta2 - g.theta0);
        let rel = (psi.deriv(10.0 * info.r0) - target).abs() / target;
        worst = worst.max(rel);
    }
    outcome(worst < 0.01, format!("max relative gap {worst:.5}"))
}

/// First root of 4 alpha w cos(w l) = K sin(w l) on (0, pi / l), giving q = (16 alpha^2 w^2 + K^2) / (8 alpha).
fn eigen_oracle(alpha: f64, k: f64, l: f64) -> f64 {
    let f = |w: f64| 4.0 * alpha * w * (w * l).cos() - k * (w * l).sin();
    let n = 10_000;
    let step = PI / l / n as f64;
    let mut lo = step * 1e-3;
    let mut hi = lo;
    for i in 1..=n {
        hi = i as f64 * step;
        if f(hi) <= 0.0 {
            break;
        }
        lo = hi;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let w = 0.5 * (lo + hi);
    (16.0 * alpha * alpha * w * w + k * k) / (8.0 * alpha)
}

fn criterion_3() -> Result<Outcome> {
    let mut worst_closed: f64 = 0.0;
    for (a, l) in [(1.0, 1.0), (0.5, 2.0), (2.0, 3.0), (0.25, 5.0), (3.0, 0.7)] {
        let (_, q) = build_psi_eigen(a, 0.0, l)?;
        let exact = a * PI * PI / (2.0 * l * l);
        worst_closed = worst_closed.max((q - exact).abs() / exact);
    }
    let mut worst_root: f64 = 0.0;
    // |K| l < 4 alpha keeps the first eigenfunction oscillatory.
    for (a, k, l) in [
        (1.0, 1.0, 2.0),
        (0.5, 0.6, 3.0),
        (1.0, -0.5, 2.0),
        (2.0, 3.0, 1.0),
        (0.25, -0.2, 1.0),
    ] {
        let (_, q) = build_psi_eigen(a, k, l)?;
        let exact = eigen_oracle(a, k, l);
        worst_root = worst_root.max((q - exact).abs() / exact);
    }
    outcome(
        worst_closed < 1e-8 && worst_root < 1e-8,
        format!("K = 0 rel {worst_closed:.2e}, K != 0 rel {worst_root:.2e}"),
    )
}

fn brute_force(cost: &CostSpec, x: &[f64], y: &[f64], d: usize) -> f64 {
    let n = x.len() / d;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| best = best.min(matching_cost(cost, x, y, d, p)));
    best
}

fn permute(p: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
    if k == p.len() {
        f(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, f);
        p.swap(k, i);
    }
}

fn criterion_4() -> Result<Outcome> {
    let mut rng = stream_rng(404, 0);
    let v = Arc::new(|x: &[f64]| 1.0 + x.iter().map(|a| a * a).sum::<f64>());
    let mut worst: f64 = 0.0;
    for inst in 0..50 {
        let d = 1 + inst % 2;
        let n = rng.random_range(2..=8usize);
        let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y: Vec<f64> = (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let costs = [
            CostSpec::Psi(PsiFunction::identity()),
            CostSpec::Psi(PsiFunction::power(0.5)?),
            CostSpec::Psi(PsiFunction::power(2.0)?),
            CostSpec::Weighted {
                psi: PsiFunction::power(0.5)?,
                v: v.clone(),
                beta: 0.3,
            },
            CostSpec::Phi(PhiMap::uniform(d, Arc::new(|r: f64| r.signum() * r.abs().powi(3)))),
        ];
        for c in &costs {
            let got = empirical_distance(c, &x, &y, d)?;
            let want = brute_force(c, &x, &y, d);
            worst = worst.max((got - want).abs() / want.max(1e-300));
        }
    }
    let convex = CostSpec::Psi(PsiFunction::power(2.0)?);
    let mut equal = 0;
    for _ in 0..50 {
        let n = 256;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..7.0)).collect();
        let sorted = matching_cost(&convex, &x, &y, 1, &sorted_matching(&x, &y));
        let lp = matching_cost(&convex, &x, &y, 1, &lp_matching(&convex, &x, &y, 1, n)?);
        if sorted == lp {
            equal += 1;
        }
    }
    outcome(
        worst <= 1e-12 && equal == 50,
        format!("brute force max rel {worst:.1e}; sorted == LP on {equal}/50"),
    )
}

// ---------------------------------------------------------------- particles

fn criterion_5() -> Result<Outcome> {
    let n = 100_000;
    let (alpha, h, r0) = (0.25, 1e-4, 1.0);
    let c = ou_coefficients(1, alpha, 0.0, 0.0, 0.0);
    let x = ParticleEnsemble::new(vec![0.5 * r0; n], 1, 55)?;
    let mut ce = CoupledEnsemble::new(x, vec![-0.5 * r0; n])?;
    let eps = (alpha * h).sqrt();
    let phi = Normal::new(0.0, 1.0).unwrap();
    let checkpoints = [0.5, 1.0, 2.0];
    let mut lines = Vec::new();
    let mut pass = true;
    let mut step = 0u64;
    for &t in &checkpoints {
        let target = (t / h).round() as u64;
        while step < target {
            step_coupled(&mut ce, &c, &c, h, eps)?;
            step += 1;
        }
        let survival = (n - ce.n_coupled()) as f64 / n as f64;
        let exact = 2.0 * phi.cdf(r0 / (2.0 * (alpha * t).sqrt())) - 1.0;
        // Standard errors of the estimate and of the oracle evaluated at the estimate, combined.
        let se = ((exact * (1.0 - exact) + survival * (1.0 - survival)) / n as f64).sqrt();
        let z = (survival - exact).abs() / se;
        pass &= z <= 3.0;
        lines.push(format!("t={t}: {survival:.4} vs {exact:.4} ({z:.2} se)"));
    }
    outcome(pass, lines.join(", "))
}

fn order_scenario(dim: usize) -> Scenario {
    let mut sc = builtin_scenario("orderpreserving").unwrap();
    if let ModelConfig::OrderPreserving(p) = &mut sc.model {
        *p = OrderParams { dim, ..p.clone() };
    }
    sc
}

fn criterion_6() -> Result<Outcome> {
    let mut worst = 0usize;
    let mut records = 0usize;
    for dim in [1, 3] {
        for seed in 1..=5 {
            let mut sc = order_scenario(dim);
            sc.sim.n = 1000;
            sc.sim.t = 5.0;
            sc.sim.seed = seed;
            sc.sim.bootstrap = 100;
            sc.sim.pair_bootstrap = 20;
            let cost = cost_for(&sc, sc.sim.cost)?;
            let curve = run_decay_experiment(&sc, &cost, Coupling::Synchronous)?;
            let v = curve.violations.expect("synchronous runs count violations");
            records += v.len();
            worst = worst.max(v.into_iter().max().unwrap_or(0));
        }
    }
    outcome(
        worst == 0,
        format!("max violations {worst} over {records} records (d = 1, 3; 5 seeds)"),
    )
}

fn fitted(curve: &DecayCurve) -> Result<(f64, f64)> {
    match &curve.fit {
        Some(f) => Ok((f.rate, f.ci_half)),
        None => Err(mvsde::Error::Degenerate(curve.fit_error.clone().unwrap_or_default())),
    }
}

fn criterion_7() -> Result<Outcome> {
    let sc = builtin_scenario("orderpreserving").unwrap();
    let cost = cost_for(&sc, sc.sim.cost)?;
    let curve = run_decay_experiment(&sc, &cost, Coupling::Synchronous)?;
    let (rate, ci) = fitted(&curve)?;
    let bound = 1.0 - 2.0 * 0.2;
    outcome(
        rate >= bound - 2.0 * ci,
        format!("fitted {rate:.4} +- {ci:.4} vs q - 2 alpha = {bound}"),
    )
}

fn criterion_8() -> Result<Outcome> {
    let sc = builtin_scenario("granular").unwrap();
    let (cert, _) = certify_scenario(&sc)?;
    let k = cert.theorem_rate;
    let cost = cost_for(&sc, sc.sim.cost)?;
    let curve = run_decay_experiment(&sc, &cost, sc.sim.coupling)?;
    let (rate, ci) = fitted(&curve)?;
    outcome(
        rate >= k - 2.0 * ci,
        format!("fitted {rate:.4} +- {ci:.4} vs certificate k = {k:.4}"),
    )
}

fn criterion_9() -> Result<Outcome> {
    let mut sc = builtin_scenario("granular").unwrap();
    sc.rates.lines = 1000;
    let ModelConfig::Granular(p) = &sc.model else {
        unreachable!()
    };
    let rep = granular_puncture(&sc, p);
    let bound = 4.0 * p.lambda0();
    outcome(
        !rep.unbounded && rep.lines >= 1000 && rep.kappa <= bound + 1e-6,
        format!(
            "kappa {:.6} <= 4 lambda0 = {bound:.6} over {} lines",
            rep.kappa, rep.lines
        ),
    )
}

fn criterion_10() -> Result<Outcome> {
    let seeds = 12u64;
    let mut lines = Vec::new();
    let mut pass = true;
    for name in ["ou", "granular"] {
        let mut sc = builtin_scenario(name).unwrap();
        sc.sim.h = 1e-3;
        let sec = sc.fpe.as_mut().unwrap();
        sec.t = 2.0;
        sec.m = 512;
        let (mut grid, cfg) = fp_problem(&sc)?;
        solve(&mut grid, &cfg, |_, _| Ok(()))?;
        let mut mean = [0.0; 2];
        let mut worst_small: f64 = 0.0;
        for (slot, n) in [4096usize, 16384].into_iter().enumerate() {
            for seed in 1..=seeds {
                sc.sim.n = n;
                sc.sim.seed = seed;
                let w1 = compare_particle_pde(&particle_marginal(&sc)?, &grid)?;
                mean[slot] += w1 / seeds as f64;
                if slot == 0 {
                    worst_small = worst_small.max(w1);
                }
            }
        }
        let ratio = mean[1] / mean[0];
        pass &= worst_small <= 0.05 && (0.35..=0.65).contains(&ratio);
        lines.push(format!(
            "{name}: max W1 {worst_small:.4} at N=4096, mean {:.4} -> {:.4} at 4N (ratio {ratio:.3})",
            mean[0], mean[1]
        ));
    }
    outcome(pass, lines.join("; "))
}

fn criterion_11() -> Result<Outcome> {
    let steps = 100_000u64;
    let mut problems: Vec<(String, Grid1D, FpConfig)> = Vec::new();
    for name in ["ou", "granular"] {
        for scheme in [FpScheme::Explicit, FpScheme::Semiimplicit] {
            let mut sc = builtin_scenario(name).unwrap();
            sc.fpe.as_mut().unwrap().scheme = scheme;
            let (g, cfg) = fp_problem(&sc)?;
            problems.push((format!("{name}/{scheme:?}"), g, cfg));
        }
    }
    // Translation-invariant attraction through the FFT path, started off-center.
    let grid = Grid1D::from_cdf(512, -6.0, 6.0, |x| Normal::new(1.5, 0.7).unwrap().cdf(x))?;
    let mut cfg = FpConfig {
        a: Arc::new(|x: f64| 0.5 + 0.25 * x.sin().powi(2)),
        grad_g: Arc::new(|x: f64| x),
        kernel: FpKernel::Translation {
            w: Arc::new(|z: f64| 1.0 - (-0.5 * z * z).exp()),
            dw: Arc::new(|z: f64| z * (-0.5 * z * z).exp()),
        },
        dt: 1.0,
        t: 1.0,
        scheme: FpScheme::Explicit,
    };
    cfg.dt = 0.5 * mvsde::fpe1d::stable_dt(&grid, &cfg);
    problems.push(("attraction/Explicit".into(), grid, cfg));

    let mut pass = true;
    let mut lines = Vec::new();
    for (name, mut grid, mut cfg) in problems {
        cfg.t = steps as f64 * cfg.dt;
        let rep = solve(&mut grid, &cfg, |_, _| Ok(()))?;
        let ok = rep.steps >= steps && rep.mass_error <= 1e-12 && rep.min_rho >= NEGATIVE_TOL;
        pass &= ok;
        lines.push(format!(
            "{name}: {} steps, mass {:.1e}, min {:.1e}",
            rep.steps, rep.mass_error, rep.min_rho
        ));
    }
    outcome(pass, lines.join("; "))
}

fn criterion_12() -> Result<Outcome> {
    let mut checked = Vec::new();
    for (name, n, t) in [
        ("example21", 600, 1.0),
        ("granular", 1000, 1.0),
        ("orderpreserving", 1000, 1.0),
    ] {
        let mut sc = builtin_scenario(name).unwrap();
        sc.sim.n = n;
        sc.sim.t = t;
        sc.sim.seed = 2024;
        let cost = cost_for(&sc, sc.sim.cost)?;
        let mut csvs = Vec::new();
        for threads in [1, 2, 8] {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .expect("thread pool");
            let curve = pool.install(|| run_decay_experiment(&sc, &cost, sc.sim.coupling))?;
            csvs.push(curve.to_csv());
        }
        if !(csvs[0] == csvs[1] && csvs[1] == csvs[2]) {
            return outcome(false, format!("{name}: decay CSVs differ across thread counts"));
        }
        checked.push(name);
    }
    outcome(
        true,
        format!("byte-identical CSVs at 1, 2, 8 threads for {}", checked.join(", ")),
    )
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("profile ODE residual", criterion_1),
        ("asymptotic slope", criterion_2),
        ("eigenvalue closed form and root oracle", criterion_3),
        ("optimal transport exactness", criterion_4),
        ("reflection coupling survival", criterion_5),
        ("order preservation", criterion_6),
        ("order-preserving contraction", criterion_7),
        ("granular contraction", criterion_8),
        ("puncture mass bound", criterion_9),
        ("particle-PDE cross-validation", criterion_10),
        ("FP conservation and positivity", criterion_11),
        ("thread-count determinism", criterion_12),
    ];
    let only: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match run() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{} {id:>2} {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

//! Scenario-level wiring: distance profiles, costs, PDE problems and rate certificates.

use std::sync::Arc;

use crate::distance::{build_psi_eigen, build_psi_explicit_with, rate_constants_g2, CostSpec, PhiMap, PsiFunction};
use crate::error::{Error, Result};
use crate::fpe1d::{compare_particle_pde, solve, stable_dt, Fn1, FpConfig, FpKernel, FpReport, Grid1D};
use crate::model::{
    example21_law_probes, fit_k0, grid_probe, CoefficientSet, Example21Params, GranularParams, LyapunovSpec,
    ModelConfig, PsiSpec, Scenario,
};
use crate::rates::{
    alpha_lb, beta_sweep, kappa_lb, lambda_lb, one_sided_lipschitz, pair_extremum, puncture_mass, q_from_profile,
    theorem22_rate, PairDomain, PunctureReport, RateCertificate, SearchBudget, SweepRow,
};
use crate::simulator::{estimate_stationary, CostKind};

const DEFAULT_EXPLICIT_NODES: usize = 2048;

pub fn search_budget(sc: &Scenario) -> SearchBudget {
    SearchBudget {
        starts: sc.rates.starts,
        max_evals: sc.rates.evals,
        radius: sc.rates.probe_radius,
        seed: sc.sim.seed,
        ..SearchBudget::default()
    }
}

/// Dirac law probes along the first axis.
pub fn law_probes(sc: &Scenario) -> Vec<Vec<f64>> {
    let d = sc.dim();
    match &sc.model {
        ModelConfig::Example21(_) if d == 1 => example21_law_probes(),
        _ => example21_law_probes()
            .into_iter()
            .filter(|p| p[0] <= sc.rates.probe_radius)
            .map(|p| {
                let mut v = vec![0.0; d];
                v[0] = p[0];
                v
            })
            .collect(),
    }
}

fn probe_points(sc: &Scenario) -> Vec<f64> {
    let d = sc.dim();
    let per_axis = match d {
        1 => 4001,
        2 => 121,
        3 => 31,
        _ => 11,
    };
    let r = sc.rates.probe_radius;
    grid_probe(d, -r, r, per_axis)
}

/// Sup of the one-sided Lipschitz constant over the law probes, floored at zero.
pub fn drift_k(sc: &Scenario) -> Result<(f64, Vec<f64>)> {
    let c = sc.coefficients();
    let e = one_sided_lipschitz(&c, &law_probes(sc), &search_budget(sc))?;
    Ok((e.value, e.witness))
}

/// The eigen profile on [0, l]; without an explicit K the drift term K r psi' is bounded
/// by K+ l psi' on [0, l].
pub fn eigen_psi(sc: &Scenario, l: f64, k: Option<f64>) -> Result<(PsiFunction, f64, f64)> {
    let c = sc.coefficients();
    let k_eff = match k {
        Some(k) => k,
        None => drift_k(sc)?.0.max(0.0) * l,
    };
    let (psi, q) = build_psi_eigen(c.alpha, k_eff, l)?;
    Ok((psi, q, k_eff))
}

fn granular_params(sc: &Scenario) -> Result<&GranularParams> {
    match &sc.model {
        ModelConfig::Granular(p) => Ok(p),
        other => Err(Error::Structure(format!(
            "the explicit profile needs the granular family, scenario has `{}`",
            other.family()
        ))),
    }
}

pub fn granular_puncture(sc: &Scenario, p: &GranularParams) -> PunctureReport {
    let sb = p.s_b();
    puncture_mass(
        &*sb,
        p.theta2,
        p.dim,
        sc.rates.lines,
        sc.rates.probe_radius,
        sc.sim.seed,
    )
}

/// The scenario's distance profile.
pub fn scenario_psi(sc: &Scenario) -> Result<PsiFunction> {
    match &sc.psi {
        PsiSpec::Identity => Ok(PsiFunction::identity()),
        PsiSpec::Power { p } => PsiFunction::power(*p),
        PsiSpec::Eigen { l, k } => eigen_psi(sc, *l, *k).map(|r| r.0),
        PsiSpec::Explicit { nodes } => {
            let p = granular_params(sc)?;
            let kappa = granular_puncture(sc, p);
            if kappa.unbounded {
                return Err(Error::Integrability("puncture mass is unbounded".into()));
            }
            let g = p.gamma_spec(kappa.kappa);
            build_psi_explicit_with(&g, nodes.unwrap_or(DEFAULT_EXPLICIT_NODES)).map(|r| r.0)
        }
    }
}

pub fn phi_map(sc: &Scenario) -> PhiMap {
    match &sc.model {
        ModelConfig::OrderPreserving(p) => p.phi_map(),
        _ => PhiMap::identity(sc.dim()),
    }
}

/// Cost used for the recorded decay curve.
pub fn cost_for(sc: &Scenario, kind: CostKind) -> Result<CostSpec> {
    Ok(match kind {
        CostKind::Psi => CostSpec::Psi(scenario_psi(sc)?),
        CostKind::W1 => CostSpec::Psi(PsiFunction::identity()),
        CostKind::Phi => CostSpec::Phi(phi_map(sc)),
        CostKind::Weighted => {
            let c = sc.coefficients();
            let spec = c.lyapunov.ok_or_else(|| {
                Error::Structure(format!(
                    "family `{}` has no Lyapunov function for a weighted cost",
                    sc.model.family()
                ))
            })?;
            CostSpec::Weighted {
                psi: scenario_psi(sc)?,
                v: spec.v,
                beta: sc.sim.beta,
            }
        }
    })
}

/// Initial grid and solver configuration of the 1D Fokker-Planck equation for this scenario.
pub fn fp_problem(sc: &Scenario) -> Result<(Grid1D, FpConfig)> {
    let sec = sc
        .fpe
        .as_ref()
        .ok_or_else(|| Error::Config(format!("scenario `{}` has no [fpe] section", sc.name)))?;
    if sc.dim() != 1 {
        return Err(Error::Config("the PDE solver is one-dimensional".into()));
    }
    let (a, grad_g, kernel): (Fn1, Fn1, FpKernel) = match &sc.model {
        ModelConfig::Granular(p) => {
            let (al, c, q, a2) = (p.alpha, p.sigma_hat, p.quartic, p.a2);
            (
                Arc::new(move |x: f64| al + (c * x.sin()).powi(2)),
                Arc::new(move |x: f64| q * x * x * x - a2 * x),
                if p.s == 0.0 {
                    FpKernel::Zero
                } else {
                    FpKernel::Quadratic { s: p.s }
                },
            )
        }
        ModelConfig::Ou(p) => {
            let (a, rate) = (p.alpha + p.sigma_hat * p.sigma_hat, p.rate);
            (
                Arc::new(move |_| a),
                Arc::new(move |x: f64| rate * x),
                if p.s == 0.0 {
                    FpKernel::Zero
                } else {
                    FpKernel::Quadratic { s: p.s }
                },
            )
        }
        other => {
            return Err(Error::Structure(format!(
                "family `{}` is not of granular-media form",
                other.family()
            )))
        }
    };
    let grid = Grid1D::from_cdf(sec.m, sec.x_lo, sec.x_hi, |x| sc.init.mu.cdf(x))?;
    let mut cfg = FpConfig {
        a,
        grad_g,
        kernel,
        dt: 1.0,
        t: sec.t,
        scheme: sec.scheme,
    };
    cfg.dt = match sec.dt {
        Some(dt) => dt,
        // Half the bound at t = 0 leaves room for the velocity to grow.
        None => 0.5 * stable_dt(&grid, &cfg),
    };
    Ok((grid, cfg))
}

/// Particle marginal at the PDE horizon: `sim.n` particles started from mu, stepped to `fpe.t`.
pub fn particle_marginal(sc: &Scenario) -> Result<Vec<f64>> {
    let t = sc
        .fpe
        .as_ref()
        .ok_or_else(|| Error::Config(format!("scenario `{}` has no [fpe] section", sc.name)))?
        .t;
    estimate_stationary(sc, t, sc.sim.n)
}

/// W1 distance between the particle marginal and the PDE solution at `fpe.t`.
pub fn particle_pde_distance(sc: &Scenario) -> Result<(f64, Grid1D, FpReport)> {
    let (mut grid, cfg) = fp_problem(sc)?;
    let report = solve(&mut grid, &cfg, |_, _| Ok(()))?;
    let samples = particle_marginal(sc)?;
    Ok((compare_particle_pde(&samples, &grid)?, grid, report))
}

/// Sup over pairs of |V(x) - V(y)| / (psi(|x - y|)(V(x) + V(y))) and sup over |x - y| <= l
/// of V(x) / V(y), the constants that turn the moment perturbation into a theta bound.
fn moment_constants(
    spec: &LyapunovSpec,
    psi: &PsiFunction,
    dim: usize,
    l: f64,
    budget: &SearchBudget,
) -> (crate::rates::Extremum, crate::rates::Extremum) {
    let c0_obj = |x: &[f64], y: &[f64]| {
        let r = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let (vx, vy) = ((spec.v)(x), (spec.v)(y));
        (vx - vy).abs() / (psi.eval(r) * (vx + vy))
    };
    let rho_obj = |x: &[f64], y: &[f64]| (spec.v)(x) / (spec.v)(y);
    let c0 = pair_extremum(
        PairDomain {
            dim,
            min_gap: 1e-6,
            max_gap: f64::INFINITY,
        },
        &c0_obj,
        budget,
        true,
    );
    let rho = pair_extremum(
        PairDomain {
            dim,
            min_gap: 1e-9,
            max_gap: l,
        },
        &rho_obj,
        budget,
        true,
    );
    (c0, rho)
}

fn inf_v(spec: &LyapunovSpec, dim: usize, budget: &SearchBudget) -> f64 {
    let f = |x: &[f64]| (spec.v)(x);
    let starts: Vec<Vec<f64>> = vec![vec![0.0; dim], vec![1.0; dim], vec![-1.0; dim]];
    crate::rates::multistart_min(&f, &starts, 1.0, budget).value
}

fn weighted_certificate(sc: &Scenario) -> Result<(RateCertificate, Vec<SweepRow>)> {
    let c: CoefficientSet = sc.coefficients();
    let d = c.dim;
    let base = c
        .lyapunov
        .clone()
        .ok_or_else(|| Error::Structure(format!("family `{}` has no Lyapunov function", sc.model.family())))?;
    let budget = search_budget(sc);
    let probe = probe_points(sc);
    let laws = law_probes(sc);
    let (k_drift, k_witness) = drift_k(sc)?;
    // Per-family bound on the law perturbation, as a function of (psi, l, beta).
    let ex21: Option<&Example21Params> = match &sc.model {
        ModelConfig::Example21(p) => Some(p),
        ModelConfig::Ou(p) if p.s != 0.0 => {
            return Err(Error::Structure(
                "no theta bound for the quadratic interaction in the weighted pipeline".into(),
            ))
        }
        _ => None,
    };
    let infv = inf_v(&base, d, &budget);
    let k0s: Vec<(f64, f64)> = sc
        .rates
        .k1_grid
        .iter()
        .map(|&k1| {
            let mut s = base.clone();
            s.k1 = k1;
            fit_k0(&c, &s, k1, &probe, &laws).map(|k0| (k1, k0))
        })
        .collect::<Result<_>>()?;
    let ls: Vec<f64> = match &sc.psi {
        PsiSpec::Eigen { l, .. } => {
            let mut v = sc.rates.l_grid.clone();
            if !v.contains(l) {
                v.push(*l);
            }
            v
        }
        _ => sc.rates.l_grid.clone(),
    };
    let mut psi_cache: Vec<(f64, PsiFunction, f64, Option<f64>)> = Vec::new();
    for &l in &ls {
        let (psi, k_eff) = match &sc.psi {
            PsiSpec::Eigen { k, .. } => {
                let (psi, _q, k_eff) = eigen_psi(sc, l, *k)?;
                (psi, Some(k_eff))
            }
            _ => (scenario_psi(sc)?, None),
        };
        let q = q_from_profile(&psi, c.alpha, k_drift, l);
        psi_cache.push((l, psi, q, k_eff));
    }
    // (l, c0, rho_l, c0 witness, rho_l witness)
    type MomentRow = (f64, f64, f64, Vec<f64>, Vec<f64>);
    let mut moment_cache: Vec<MomentRow> = Vec::new();
    if ex21.is_some() {
        for (l, psi, _, _) in &psi_cache {
            let (c0, rho) = moment_constants(&base, psi, d, *l, &budget);
            moment_cache.push((*l, c0.value, rho.value, c0.witness, rho.witness));
        }
    }
    let cert_at = |beta: f64, l: f64| -> Result<RateCertificate> {
        let (_, psi, q_l, k_eff) = psi_cache.iter().find(|p| p.0 == l).expect("cached l");
        let mut best: Option<RateCertificate> = None;
        for &(k1, k0) in &k0s {
            let mut spec = base.clone();
            spec.k0 = k0;
            spec.k1 = k1;
            let kap = kappa_lb(&spec, d, l, beta, &budget);
            let alp = alpha_lb(&c, &spec, psi, l, beta, &budget);
            let mut cert = RateCertificate::new(&sc.name, "weighted");
            let theta = match ex21 {
                Some(p) => {
                    let (_, c0, rho, w0, wr) = moment_cache.iter().find(|m| m.0 == l).expect("cached l");
                    cert.constants.insert("c0".into(), *c0);
                    cert.constants.insert("rho_l".into(), *rho);
                    cert.constants.insert("inf_v".into(), infv);
                    cert.witnesses.insert("c0".into(), w0.clone());
                    cert.witnesses.insert("rho_l".into(), wr.clone());
                    p.epsilon * p.phi_moment_lipschitz() * c0 * psi.sup_deriv * (1.0 / infv + beta * (1.0 + rho)) / beta
                }
                None => 0.0,
            };
            let (lambda, rate) = lambda_lb(kap.value, *q_l, k0, beta, alp.value, theta);
            cert.kappa_lb = Some(kap.value);
            cert.alpha_lb = Some(alp.value);
            cert.lambda_lb = Some(lambda);
            cert.q_l = *q_l;
            cert.theta = theta;
            cert.k0 = Some(k0);
            cert.k1 = Some(k1);
            cert.beta = Some(beta);
            cert.l = Some(l);
            cert.k_drift = Some(k_drift);
            cert.c_psi = Some(psi.c_psi);
            cert.psi_sup_deriv = Some(psi.sup_deriv);
            if let Some(k) = k_eff {
                cert.constants.insert("eigen_k".into(), *k);
            }
            cert.witnesses.insert("kappa".into(), kap.witness.clone());
            cert.witnesses.insert("alpha".into(), alp.witness.clone());
            cert.witnesses.insert("k_drift".into(), k_witness.clone());
            cert.budget = Some(budget);
            cert.tolerances.insert("search_step".into(), budget.tol);
            cert.tolerances.insert("alpha_gap".into(), 1e-6 * l);
            if !kap.converged || !alp.converged {
                cert.warnings
                    .push("pattern search budget exhausted before convergence".into());
            }
            cert.set_rate(rate);
            if best.as_ref().is_none_or(|b| cert.theorem_rate > b.theorem_rate) {
                best = Some(cert);
            }
        }
        best.ok_or_else(|| Error::Empty("k1 grid is empty".into()))
    };
    beta_sweep(&sc.rates.beta_grid, &ls, cert_at)
}

fn explicit_certificate(sc: &Scenario) -> Result<RateCertificate> {
    let p = granular_params(sc)?;
    let punct = granular_puncture(sc, p);
    let mut cert = RateCertificate::new(&sc.name, "explicit");
    if punct.unbounded {
        return Err(Error::Integrability(format!(
            "super-level set of S_b reaches the scan limit {}",
            punct.scan_limit
        )));
    }
    let g = p.gamma_spec(punct.kappa);
    let g2 = rate_constants_g2(&g, p.varphi())?;
    cert.q_l = g2.q;
    cert.theta = g2.theta;
    cert.psi_sup_deriv = Some(g2.integral);
    cert.constants.insert("lambda0".into(), p.lambda0());
    cert.constants.insert("theta0".into(), g.theta0);
    cert.constants.insert("theta1".into(), g.theta1);
    cert.constants.insert("theta2".into(), g.theta2);
    cert.constants.insert("varphi".into(), p.varphi());
    cert.constants.insert("r0".into(), g.r0());
    cert.witnesses.insert("puncture_x".into(), punct.witness_x.clone());
    cert.witnesses.insert("puncture_v".into(), punct.witness_v.clone());
    cert.tolerances.insert("quadrature_rel".into(), 1e-13);
    if !g2.nc_pass {
        cert.warnings
            .push(format!("varphi = {} violates the bound {}", p.varphi(), g2.nc_bound));
    }
    cert.set_rate(g2.k);
    cert.g2 = Some(g2);
    cert.puncture = Some(punct);
    Ok(cert)
}

fn order_certificate(sc: &Scenario) -> Result<RateCertificate> {
    let ModelConfig::OrderPreserving(p) = &sc.model else {
        unreachable!("dispatch by family")
    };
    let (rate, _) = theorem22_rate(p.q, p.strength, p.strength);
    let mut cert = RateCertificate::new(&sc.name, "order");
    cert.q_l = p.q;
    cert.theta = 2.0 * p.strength;
    cert.constants.insert("theta1".into(), p.strength);
    cert.constants.insert("theta2".into(), p.strength);
    cert.set_rate(rate);
    Ok(cert)
}

/// Certificate for the scenario's family; the sweep rows are empty outside the weighted pipeline.
pub fn certify_scenario(sc: &Scenario) -> Result<(RateCertificate, Vec<SweepRow>)> {
    match &sc.model {
        ModelConfig::Granular(_) => explicit_certificate(sc).map(|c| (c, vec![])),
        ModelConfig::OrderPreserving(_) => order_certificate(sc).map(|c| (c, vec![])),
        ModelConfig::Example21(_) | ModelConfig::Ou(_) => weighted_certificate(sc),
    }
}

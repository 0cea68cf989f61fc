//! Numerical evaluation of the rate functionals and assembly of rate certificates.
//!
//! Suprema and infima over pairs (x, y) are estimated by multi-start Hooke-Jeeves pattern
//! search. Every reported extremum carries the witness at which it was evaluated, so a
//! certificate can be re-checked by plugging the witness back into the objective.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distance::{G2Constants, PsiFunction};
use crate::error::{Error, Result};
use crate::model::{CoefficientSet, LyapunovSpec};
use crate::simulator::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchBudget {
    pub starts: usize,
    /// Objective evaluations per start.
    pub max_evals: usize,
    /// Final pattern step.
    pub tol: f64,
    /// Radius of the box the starts are drawn from.
    pub radius: f64,
    pub seed: u64,
}

impl Default for SearchBudget {
    fn default() -> Self {
        SearchBudget {
            starts: 24,
            max_evals: 4000,
            tol: 1e-9,
            radius: 50.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extremum {
    pub value: f64,
    pub witness: Vec<f64>,
    pub evals: usize,
    /// False when some start ran out of budget before its step fell below tolerance.
    pub converged: bool,
}

/// Hooke-Jeeves pattern search minimizing `f` from `x0`. Non-finite values count as +inf.
pub fn hooke_jeeves(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], step: f64, tol: f64, max_evals: usize) -> Extremum {
    let clean = |v: f64| if v.is_nan() { f64::INFINITY } else { v };
    let n = x0.len();
    let mut base = x0.to_vec();
    let mut fb = clean(f(&base));
    let mut evals = 1;
    let mut h = step;
    let explore = |p: &mut Vec<f64>, fp: &mut f64, h: f64, evals: &mut usize| {
        for i in 0..n {
            if *evals >= max_evals {
                return;
            }
            let orig = p[i];
            p[i] = orig + h;
            let up = clean(f(p));
            *evals += 1;
            if up < *fp {
                *fp = up;
                continue;
            }
            p[i] = orig - h;
            let dn = clean(f(p));
            *evals += 1;
            if dn < *fp {
                *fp = dn;
                continue;
            }
            p[i] = orig;
        }
    };
    while h > tol && evals < max_evals {
        let mut trial = base.clone();
        let mut ft = fb;
        explore(&mut trial, &mut ft, h, &mut evals);
        if ft < fb {
            // Pattern moves while they keep paying off.
            loop {
                let jump: Vec<f64> = trial.iter().zip(&base).map(|(t, b)| 2.0 * t - b).collect();
                base = trial;
                fb = ft;
                if evals >= max_evals {
                    break;
                }
                let mut fj = clean(f(&jump));
                evals += 1;
                let mut jp = jump;
                explore(&mut jp, &mut fj, h, &mut evals);
                if fj < fb {
                    trial = jp;
                    ft = fj;
                } else {
                    break;
                }
            }
        } else {
            h *= 0.5;
        }
    }
    Extremum {
        value: fb,
        witness: base,
        evals,
        converged: h <= tol,
    }
}

/// Minimum over all starts; ties go to the earliest start, so the result is schedule independent.
pub fn multistart_min(
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    starts: &[Vec<f64>],
    step: f64,
    budget: &SearchBudget,
) -> Extremum {
    let runs: Vec<Extremum> = starts
        .par_iter()
        .map(|s| hooke_jeeves(f, s, step, budget.tol, budget.max_evals))
        .collect();
    let converged = runs.iter().all(|r| r.converged);
    let evals = runs.iter().map(|r| r.evals).sum();
    let mut best = runs
        .into_iter()
        .reduce(|a, b| if b.value < a.value { b } else { a })
        .expect("at least one start");
    best.evals = evals;
    best.converged = converged;
    best
}

pub fn multistart_max(
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    starts: &[Vec<f64>],
    step: f64,
    budget: &SearchBudget,
) -> Extremum {
    let neg = |z: &[f64]| -f(z);
    let mut e = multistart_min(&neg, starts, step, budget);
    e.value = -e.value;
    e
}

/// Pairs parametrized by center c and offset w, x = c + w/2, y = c - w/2, with |w|
/// projected into [min_gap, max_gap].
#[derive(Debug, Clone, Copy)]
pub struct PairDomain {
    pub dim: usize,
    pub min_gap: f64,
    pub max_gap: f64,
}

impl PairDomain {
    /// Map search coordinates z = (c, w) to the flat pair (x, y).
    pub fn pair(&self, z: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let (c, w) = z.split_at(d);
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let target = norm.clamp(self.min_gap, self.max_gap);
        let mut dir = vec![0.0; d];
        if norm > 0.0 {
            dir.iter_mut().zip(w).for_each(|(u, v)| *u = v / norm);
        } else {
            dir[0] = 1.0;
        }
        let mut out = vec![0.0; 2 * d];
        for i in 0..d {
            out[i] = c[i] + 0.5 * target * dir[i];
            out[d + i] = c[i] - 0.5 * target * dir[i];
        }
        out
    }

    /// Deterministic starts: centers on a radial grid plus seeded random ones, offsets at
    /// several gap levels.
    pub fn starts(&self, budget: &SearchBudget) -> Vec<Vec<f64>> {
        let d = self.dim;
        let r = budget.radius;
        let mut out = Vec::new();
        let hi = if self.max_gap.is_finite() {
            self.max_gap
        } else {
            self.min_gap.max(1.0) * 4.0
        };
        let gaps = [self.min_gap.max(1e-12), 0.5 * (self.min_gap + hi), hi];
        let radial = [0.0, 0.05, 0.2, 0.5, 1.0];
        'outer: for &g in &gaps {
            for &s in &radial {
                for sign in [1.0, -1.0] {
                    let mut z = vec![0.0; 2 * d];
                    z[0] = sign * s * r;
                    z[d] = g;
                    out.push(z);
                    if out.len() >= budget.starts.max(1) / 2 {
                        break 'outer;
                    }
                }
            }
        }
        let mut rng = stream_rng(budget.seed, 0);
        while out.len() < budget.starts.max(2) {
            let mut z: Vec<f64> = (0..d).map(|_| rng.random_range(-r..r)).collect();
            let g: f64 = rng.random_range(self.min_gap..=hi.max(self.min_gap));
            let mut w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let nw = w.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            w.iter_mut().for_each(|v| *v *= g / nw);
            z.extend(w);
            out.push(z);
        }
        out
    }
}

pub fn pair_extremum(
    domain: PairDomain,
    obj: &(dyn Fn(&[f64], &[f64]) -> f64 + Sync),
    budget: &SearchBudget,
    maximize: bool,
) -> Extremum {
    let d = domain.dim;
    let f = |z: &[f64]| {
        let p = domain.pair(z);
        obj(&p[..d], &p[d..])
    };
    let starts = domain.starts(budget);
    let step = 0.1 * budget.radius.max(1.0);
    let mut e = if maximize {
        multistart_max(&f, &starts, step, budget)
    } else {
        multistart_min(&f, &starts, step, budget)
    };
    e.witness = domain.pair(&e.witness);
    // Report the objective at the mapped witness exactly.
    e.value = obj(&e.witness[..d], &e.witness[d..]);
    e
}

/// inf over |x - y| > l of (K1 V(x) + K1 V(y) - 2 K0) / (1/beta + V(x) + V(y)).
pub fn kappa_lb(spec: &LyapunovSpec, dim: usize, l: f64, beta: f64, budget: &SearchBudget) -> Extremum {
    let (k0, k1) = (spec.k0, spec.k1);
    let obj = |x: &[f64], y: &[f64]| {
        let (vx, vy) = ((spec.v)(x), (spec.v)(y));
        (k1 * vx + k1 * vy - 2.0 * k0) / (1.0 / beta + vx + vy)
    };
    let domain = PairDomain {
        dim,
        min_gap: l * (1.0 + 1e-9),
        max_gap: f64::INFINITY,
    };
    pair_extremum(domain, &obj, budget, false)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// The weighted gradient term inside the supremum defining alpha_{l,beta}, without c_psi.
pub fn alpha_objective(c: &CoefficientSet, spec: &LyapunovSpec, beta: f64, x: &[f64], y: &[f64]) -> f64 {
    let d = c.dim;
    let r = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let (vx, vy) = ((spec.v)(x), (spec.v)(y));
    let den = r * (1.0 / beta + vx + vy);
    let mut gx = vec![0.0; d];
    let mut gy = vec![0.0; d];
    (spec.grad_v)(x, &mut gx);
    (spec.grad_v)(y, &mut gy);
    let dg: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a - b).collect();
    let mut total = c.alpha * norm(&dg);
    if let Some(sf) = &c.sigma_hat {
        let mut sx = vec![0.0; d * d];
        let mut sy = vec![0.0; d * d];
        sf(x, &mut sx);
        sf(y, &mut sy);
        // u = sigma_hat(x)^T grad V(x) + sigma_hat(y)^T grad V(y)
        let mut u = vec![0.0; d];
        for j in 0..d {
            for i in 0..d {
                u[j] += sx[i * d + j] * gx[i] + sy[i * d + j] * gy[i];
            }
        }
        let mut w = vec![0.0; d];
        for i in 0..d {
            for j in 0..d {
                w[i] += (sx[i * d + j] - sy[i * d + j]) * u[j];
            }
        }
        total += norm(&w);
    }
    total / den
}

/// c_psi sup over 0 < |x - y| < l of the weighted gradient term; the diagonal is excluded
/// by a gap of 1e-6 l, close enough that the ratio has converged to its C^2 limit.
pub fn alpha_lb(
    c: &CoefficientSet,
    spec: &LyapunovSpec,
    psi: &PsiFunction,
    l: f64,
    beta: f64,
    budget: &SearchBudget,
) -> Extremum {
    let obj = |x: &[f64], y: &[f64]| alpha_objective(c, spec, beta, x, y);
    let domain = PairDomain {
        dim: c.dim,
        min_gap: 1e-6 * l,
        max_gap: l * (1.0 - 1e-9),
    };
    let mut e = pair_extremum(domain, &obj, budget, true);
    e.value *= psi.c_psi;
    e
}

/// One-sided Lipschitz constant of the drift against a fixed law:
/// sup [<b(x) - b(y), x - y> + |sigma_hat(x) - sigma_hat(y)|_HS^2 / 2] / |x - y|^2.
pub fn one_sided_lipschitz(c: &CoefficientSet, laws: &[Vec<f64>], budget: &SearchBudget) -> Result<Extremum> {
    let d = c.dim;
    let mut best: Option<Extremum> = None;
    for lp in laws {
        let law = c.law(lp, None)?;
        let obj = |x: &[f64], y: &[f64]| {
            let mut bx = vec![0.0; d];
            let mut by = vec![0.0; d];
            let mut s = vec![0.0; 2 * d];
            c.drift_with(x, &law, &mut bx, &mut s);
            c.drift_with(y, &law, &mut by, &mut s);
            let mut ip = 0.0;
            let mut r2 = 0.0;
            for i in 0..d {
                ip += (bx[i] - by[i]) * (x[i] - y[i]);
                r2 += (x[i] - y[i]) * (x[i] - y[i]);
            }
            if let Some(sf) = &c.sigma_hat {
                let mut sx = vec![0.0; d * d];
                let mut sy = vec![0.0; d * d];
                sf(x, &mut sx);
                sf(y, &mut sy);
                ip += 0.5 * sx.iter().zip(&sy).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            ip / r2
        };
        let domain = PairDomain {
            dim: d,
            min_gap: 1e-4,
            max_gap: f64::INFINITY,
        };
        let e = pair_extremum(domain, &obj, budget, true);
        if best.as_ref().is_none_or(|b| e.value > b.value) {
            best = Some(e);
        }
    }
    best.ok_or_else(|| Error::Empty("no law probes".into()))
}

/// inf over (0, l] of -(2 alpha psi'' + K r psi') / psi, the largest q_l compatible with the
/// drift bound K |x - y|^2 on the distance process.
pub fn q_from_profile(psi: &PsiFunction, alpha: f64, k: f64, l: f64) -> f64 {
    let n = 4000;
    (1..=n)
        .map(|i| l * i as f64 / n as f64)
        .map(|r| -(2.0 * alpha * psi.second_deriv(r) + k * r * psi.deriv(r)) / psi.eval(r))
        .fold(f64::INFINITY, f64::min)
}

/// (lambda, theorem rate) with lambda = min(kappa, q_l - 2 K0 beta - alpha).
pub fn lambda_lb(kappa: f64, q_l: f64, k0: f64, beta: f64, alpha: f64, theta: f64) -> (f64, f64) {
    let lambda = kappa.min(q_l - 2.0 * k0 * beta - alpha);
    (lambda, lambda - theta)
}

/// q - theta1 - theta2 and whether it is positive.
pub fn theorem22_rate(q: f64, theta1: f64, theta2: f64) -> (f64, bool) {
    let r = q - theta1 - theta2;
    (r, r > 0.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PunctureReport {
    pub kappa: f64,
    pub witness_x: Vec<f64>,
    pub witness_v: Vec<f64>,
    pub lines: usize,
    /// Some line had its super-level set reach the scan limit.
    pub unbounded: bool,
    pub scan_limit: f64,
}

/// Length of {s in [-limit, limit] : f(s) > level}, with crossings refined by bisection.
/// The bool reports whether the set touches the scan limit.
pub fn superlevel_length(f: &dyn Fn(f64) -> f64, level: f64, limit: f64, step: f64) -> (f64, bool) {
    let above = |s: f64| f(s) > level;
    let refine = |mut a: f64, mut b: f64| {
        // a and b straddle the level; return the crossing.
        let fa = above(a);
        for _ in 0..60 {
            let m = 0.5 * (a + b);
            if above(m) == fa {
                a = m;
            } else {
                b = m;
            }
        }
        0.5 * (a + b)
    };
    let n = (2.0 * limit / step).ceil() as usize;
    let h = 2.0 * limit / n as f64;
    let mut total = 0.0;
    let mut prev_s = -limit;
    let mut prev = above(prev_s);
    let touches = prev || above(limit);
    let mut start = if prev { Some(-limit) } else { None };
    for k in 1..=n {
        let s = -limit + k as f64 * h;
        let cur = above(s);
        if cur != prev {
            let x = refine(prev_s, s);
            if cur {
                start = Some(x);
            } else if let Some(a) = start.take() {
                total += x - a;
            }
        }
        prev = cur;
        prev_s = s;
    }
    if let Some(a) = start {
        total += limit - a;
    }
    (total, touches)
}

/// sup over sampled lines x + s v of the measure of {S_b > -theta2}. Lines are seeded:
/// the coordinate axes and diagonal through the origin, then random bases in the probe box.
pub fn puncture_mass(
    s_b: &(dyn Fn(&[f64]) -> f64 + Sync),
    theta2: f64,
    dim: usize,
    lines: usize,
    radius: f64,
    seed: u64,
) -> PunctureReport {
    let limit = 4.0 * radius.max(1.0);
    let mut specs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for i in 0..dim {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        specs.push((vec![0.0; dim], v));
    }
    specs.push((vec![0.0; dim], vec![1.0 / (dim as f64).sqrt(); dim]));
    let mut rng = stream_rng(seed, 0);
    while specs.len() < lines.max(1) {
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-radius..radius)).collect();
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let nv = norm(&v).max(1e-300);
        v.iter_mut().for_each(|a| *a /= nv);
        specs.push((x, v));
    }
    let results: Vec<(f64, bool)> = specs
        .par_iter()
        .map(|(x, v)| {
            let f = |s: f64| {
                let p: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + s * b).collect();
                s_b(&p)
            };
            superlevel_length(&f, -theta2, limit, 1e-2)
        })
        .collect();
    let mut best = 0usize;
    for (i, r) in results.iter().enumerate() {
        if r.0 > results[best].0 {
            best = i;
        }
    }
    PunctureReport {
        kappa: results[best].0,
        witness_x: specs[best].0.clone(),
        witness_v: specs[best].1.clone(),
        lines: specs.len(),
        unbounded: results.iter().any(|r| r.1),
        scan_limit: limit,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateCertificate {
    pub scenario: String,
    /// "weighted", "explicit" or "order".
    pub pipeline: String,
    pub theorem_rate: f64,
    pub contractive: bool,
    pub theta: f64,
    pub q_l: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa_lb: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_lb: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_lb: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l: Option<f64>,
    /// One-sided Lipschitz constant of the drift.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_drift: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_psi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psi_sup_deriv: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g2: Option<G2Constants>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub puncture: Option<PunctureReport>,
    /// Named auxiliary constants, such as the sup ratios entering theta.
    pub constants: BTreeMap<String, f64>,
    pub witnesses: BTreeMap<String, Vec<f64>>,
    pub budget: Option<SearchBudget>,
    pub tolerances: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

impl RateCertificate {
    pub fn new(scenario: &str, pipeline: &str) -> Self {
        RateCertificate {
            scenario: scenario.into(),
            pipeline: pipeline.into(),
            theorem_rate: f64::NAN,
            contractive: false,
            theta: 0.0,
            q_l: f64::NAN,
            kappa_lb: None,
            alpha_lb: None,
            lambda_lb: None,
            k0: None,
            k1: None,
            beta: None,
            l: None,
            k_drift: None,
            c_psi: None,
            psi_sup_deriv: None,
            g2: None,
            puncture: None,
            constants: BTreeMap::new(),
            witnesses: BTreeMap::new(),
            budget: None,
            tolerances: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }

    pub fn set_rate(&mut self, rate: f64) {
        self.theorem_rate = rate;
        self.contractive = rate > 0.0;
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub l: f64,
    pub k1: f64,
    pub theorem_rate: f64,
}

/// Evaluate `cert` at every (beta, l) and keep the largest theorem rate (first on ties).
pub fn beta_sweep(
    betas: &[f64],
    ls: &[f64],
    mut cert: impl FnMut(f64, f64) -> Result<RateCertificate>,
) -> Result<(RateCertificate, Vec<SweepRow>)> {
    if betas.is_empty() || ls.is_empty() {
        return Err(Error::Empty("beta and l grids must be nonempty".into()));
    }
    let mut best: Option<RateCertificate> = None;
    let mut rows = Vec::new();
    for &l in ls {
        for &b in betas {
            let c = cert(b, l)?;
            rows.push(SweepRow {
                beta: b,
                l,
                k1: c.k1.unwrap_or(f64::NAN),
                theorem_rate: c.theorem_rate,
            });
            if best.as_ref().is_none_or(|x| c.theorem_rate > x.theorem_rate) {
                best = Some(c);
            }
        }
    }
    let mut best = best.expect("nonempty grid");
    if !best.contractive {
        best.warnings.push("no grid point gives a positive rate".into());
    }
    Ok((best, rows))
}

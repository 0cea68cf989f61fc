//! Euler-Maruyama particle systems, reflection and synchronous couplings, decay curves.
//!
//! Every particle owns counter-based ChaCha streams keyed by (master seed, particle index), so
//! results do not depend on how rayon schedules the particles. The interaction term is
//! computed from a snapshot of the previous step (Jacobi sweep).

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distance::{optimal_matching, CostSpec};
use crate::error::{Error, Result};
use crate::model::{CoefficientSet, InitLaw, Law, Scenario};

/// Offset separating the B2 streams from the B1 streams of the same particle.
const B2_OFFSET: u64 = 1 << 62;
pub const STREAM_INIT: u64 = u64::MAX;
pub const STREAM_BOOTSTRAP: u64 = u64::MAX - 1;
pub const STREAM_SUBSAMPLE: u64 = u64::MAX - 2;

const BLOWUP: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coupling {
    #[default]
    Reflection,
    Synchronous,
}

/// Cost used for the recorded distance curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostKind {
    /// The scenario's psi.
    #[default]
    Psi,
    /// psi(|x - y|)(1 + beta V(x) + beta V(y)) with the scenario's Lyapunov function.
    Weighted,
    /// d_phi with the scenario's component maps.
    Phi,
    /// Plain Euclidean distance.
    W1,
}

fn default_record_every() -> usize {
    50
}
fn default_bootstrap() -> usize {
    1000
}
fn default_pair_bootstrap() -> usize {
    200
}
fn default_beta() -> f64 {
    0.1
}
fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub h: f64,
    pub t: f64,
    #[serde(default)]
    pub seed: u64,
    /// Coupling threshold; defaults to sqrt(alpha h).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_couple: Option<f64>,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    #[serde(default)]
    pub coupling: Coupling,
    #[serde(default)]
    pub cost: CostKind,
    /// Weight of V in the weighted cost.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Re-pair Y to X by optimal matching at every record.
    #[serde(default, skip_serializing_if = "is_false")]
    pub rematch: bool,
    /// Batch size for pairwise kernels without a separable form.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample: Option<usize>,
    /// Fit window [t0, t1]; defaults to [T/4, T].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_window: Option<[f64; 2]>,
    /// Moving-block bootstrap resamples for the rate CI.
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    /// Pair bootstrap resamples for the per-point CI.
    #[serde(default = "default_pair_bootstrap")]
    pub pair_bootstrap: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n: 1000,
            h: 1e-3,
            t: 1.0,
            seed: 1,
            eps_couple: None,
            record_every: default_record_every(),
            coupling: Coupling::Reflection,
            cost: CostKind::Psi,
            beta: default_beta(),
            rematch: false,
            subsample: None,
            fit_window: None,
            bootstrap: default_bootstrap(),
            pair_bootstrap: default_pair_bootstrap(),
        }
    }
}

impl SimConfig {
    pub fn steps(&self) -> Result<u64> {
        let k = (self.t / self.h).round();
        if !(k >= 1.0) || ((k * self.h) - self.t).abs() > 1e-9 * self.t {
            return Err(Error::Config(format!(
                "horizon T = {} is not an integer multiple of h = {}",
                self.t, self.h
            )));
        }
        Ok(k as u64)
    }

    pub fn eps_for(&self, alpha: f64) -> f64 {
        self.eps_couple.unwrap_or_else(|| (alpha * self.h).sqrt())
    }
}

/// A seeded stream for a reserved purpose or a particle.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Clone)]
struct Streams {
    b1: ChaCha8Rng,
    b2: Option<ChaCha8Rng>,
}

#[derive(Clone)]
pub struct ParticleEnsemble {
    pub dim: usize,
    /// Flat n*d states.
    pub states: Vec<f64>,
    pub time: f64,
    pub step: u64,
    seed: u64,
    streams: Vec<Streams>,
}

impl ParticleEnsemble {
    pub fn new(states: Vec<f64>, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 || states.is_empty() || !states.len().is_multiple_of(dim) {
            return Err(Error::Invalid("ensemble must be a nonempty n*d array".into()));
        }
        let n = states.len() / dim;
        let streams = (0..n as u64)
            .map(|i| Streams {
                b1: stream_rng(seed, i),
                b2: None,
            })
            .collect();
        Ok(ParticleEnsemble {
            dim,
            states,
            time: 0.0,
            step: 0,
            seed,
            streams,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn ensure_b2(&mut self) {
        let seed = self.seed;
        for (i, s) in self.streams.iter_mut().enumerate() {
            if s.b2.is_none() {
                s.b2 = Some(stream_rng(seed, B2_OFFSET + i as u64));
            }
        }
    }
}

/// Per-thread workspace.
struct Scratch {
    drift: Vec<f64>,
    tmp: Vec<f64>,
    xi1: Vec<f64>,
    xi2: Vec<f64>,
    sig: Vec<f64>,
    refl: Vec<f64>,
}

impl Scratch {
    fn new(d: usize) -> Self {
        Scratch {
            drift: vec![0.0; d],
            tmp: vec![0.0; 2 * d],
            xi1: vec![0.0; d],
            xi2: vec![0.0; d],
            sig: vec![0.0; d * d],
            refl: vec![0.0; d],
        }
    }
}

fn draw(st: &mut Streams, s: &mut Scratch, with_b2: bool) {
    for v in s.xi1.iter_mut() {
        *v = st.b1.sample(StandardNormal);
    }
    if with_b2 {
        let r = st.b2.as_mut().expect("b2 streams initialized");
        for v in s.xi2.iter_mut() {
            *v = r.sample(StandardNormal);
        }
    }
}

/// x <- x + b h + sqrt(alpha h) xi1 + sigma_hat(x) sqrt(h) xi2, with `xi1` taken from `noise1`.
fn em_move(
    c: &CoefficientSet,
    law: &Law<'_>,
    x: &mut [f64],
    noise1: &[f64],
    xi2: &[f64],
    h: f64,
    drift: &mut [f64],
    tmp: &mut [f64],
    sig: &mut [f64],
) {
    let d = c.dim;
    c.drift_with(x, law, drift, tmp);
    let sah = (c.alpha * h).sqrt();
    let sh = h.sqrt();
    if let Some(sf) = &c.sigma_hat {
        sf(x, sig);
        for i in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += sig[i * d + k] * xi2[k];
            }
            tmp[i] = acc;
        }
        for i in 0..d {
            x[i] += drift[i] * h + sah * noise1[i] + sh * tmp[i];
        }
    } else {
        for i in 0..d {
            x[i] += drift[i] * h + sah * noise1[i];
        }
    }
}

fn bad(x: &[f64]) -> bool {
    x.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP)
}

fn subsample_indices(seed: u64, step: u64, n: usize, m: Option<usize>, c: &CoefficientSet) -> Option<Vec<usize>> {
    let m = m?;
    if m >= n || !c.law_needs_pairs() {
        return None;
    }
    let mut r = stream_rng(seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15), STREAM_SUBSAMPLE);
    Some((0..m).map(|_| r.random_range(0..n)).collect())
}

/// One Euler-Maruyama step of the particle system against its own empirical law.
pub fn step_em(ens: &mut ParticleEnsemble, c: &CoefficientSet, h: f64, subsample: Option<usize>) -> Result<()> {
    if !(h > 0.0) {
        return Err(Error::Invalid(format!("step h = {h} must be positive")));
    }
    if c.dim != ens.dim {
        return Err(Error::Invalid(
            "dimension mismatch between ensemble and coefficients".into(),
        ));
    }
    let d = ens.dim;
    let with_b2 = c.sigma_hat.is_some();
    if with_b2 {
        ens.ensure_b2();
    }
    let prev = ens.states.clone();
    let idx = subsample_indices(ens.seed, ens.step, ens.len(), subsample, c);
    let law = c.law(&prev, idx.as_deref())?;
    let first_bad = ens
        .states
        .par_chunks_mut(d)
        .zip(ens.streams.par_iter_mut())
        .enumerate()
        .map_init(
            || Scratch::new(d),
            |s, (i, (x, st))| {
                draw(st, s, with_b2);
                let Scratch {
                    drift,
                    tmp,
                    xi1,
                    xi2,
                    sig,
                    ..
                } = s;
                em_move(c, &law, x, xi1, xi2, h, drift, tmp, sig);
                bad(x).then_some(i)
            },
        )
        .flatten()
        .min();
    ens.step += 1;
    ens.time = ens.step as f64 * h;
    if let Some(p) = first_bad {
        return Err(Error::BlowUp {
            particle: p,
            step: ens.step,
            detail: format!("state {:?}", &ens.states[p * d..(p + 1) * d]),
        });
    }
    Ok(())
}

/// Two particle systems driven by shared per-pair noise. X consumes the streams; Y reuses
/// X's increments (reflected before coupling), so X is unaffected by the coupling.
#[derive(Clone)]
pub struct CoupledEnsemble {
    pub x: ParticleEnsemble,
    pub y: Vec<f64>,
    pub coupled: Vec<bool>,
    pub tau: Vec<f64>,
}

impl CoupledEnsemble {
    pub fn new(x: ParticleEnsemble, y: Vec<f64>) -> Result<Self> {
        if y.len() != x.states.len() {
            return Err(Error::Invalid("X and Y must have the same size".into()));
        }
        let n = x.len();
        Ok(CoupledEnsemble {
            x,
            y,
            coupled: vec![false; n],
            tau: vec![f64::INFINITY; n],
        })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn n_coupled(&self) -> usize {
        self.coupled.iter().filter(|c| **c).count()
    }

    pub fn time(&self) -> f64 {
        self.x.time
    }
}

/// Distance from the origin to the segment [a, b].
fn segment_min_norm(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut dd = 0.0;
    for i in 0..a.len() {
        let di = b[i] - a[i];
        ab += a[i] * di;
        dd += di * di;
    }
    let s = if dd > 0.0 { (-ab / dd).clamp(0.0, 1.0) } else { 0.0 };
    a.iter()
        .zip(b)
        .map(|(p, q)| p + s * (q - p))
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

fn check_pair(c: &CoefficientSet, ce: &CoupledEnsemble) -> Result<()> {
    if c.dim != ce.x.dim {
        return Err(Error::Invalid(
            "dimension mismatch between ensemble and coefficients".into(),
        ));
    }
    Ok(())
}

fn coupled_step(
    ce: &mut CoupledEnsemble,
    cx: &CoefficientSet,
    cy: &CoefficientSet,
    h: f64,
    eps: Option<f64>,
    subsample: Option<usize>,
) -> Result<()> {
    check_pair(cx, ce)?;
    check_pair(cy, ce)?;
    if !(h > 0.0) {
        return Err(Error::Invalid(format!("step h = {h} must be positive")));
    }
    let d = ce.x.dim;
    let with_b2 = cx.sigma_hat.is_some() || cy.sigma_hat.is_some();
    if with_b2 {
        ce.x.ensure_b2();
    }
    let t_now = ce.x.time;
    let t_next = (ce.x.step + 1) as f64 * h;
    let reflect = eps.is_some();
    let eps = eps.unwrap_or(0.0);
    // A gap that is exactly zero at the step boundary counts as met.
    for i in 0..ce.len() {
        if !ce.coupled[i] && ce.x.states[i * d..(i + 1) * d] == ce.y[i * d..(i + 1) * d] {
            ce.coupled[i] = true;
            ce.tau[i] = t_now;
        }
    }
    let px = ce.x.states.clone();
    let py = ce.y.clone();
    let ix = subsample_indices(ce.x.seed, ce.x.step, ce.len(), subsample, cx);
    let iy = subsample_indices(ce.x.seed ^ 1, ce.x.step, ce.len(), subsample, cy);
    let lx = cx.law(&px, ix.as_deref())?;
    let ly = cy.law(&py, iy.as_deref())?;
    let first_bad =
        ce.x.states
            .par_chunks_mut(d)
            .zip(ce.y.par_chunks_mut(d))
            .zip(ce.x.streams.par_iter_mut())
            .zip(ce.coupled.par_iter_mut().zip(ce.tau.par_iter_mut()))
            .enumerate()
            .map_init(
                || (Scratch::new(d), vec![0.0; d], vec![0.0; d]),
                |(s, g0, g1), (i, (((x, y), st), (cpl, tau)))| {
                    draw(st, s, with_b2);
                    for k in 0..d {
                        g0[k] = x[k] - y[k];
                    }
                    let Scratch {
                        drift,
                        tmp,
                        xi1,
                        xi2,
                        sig,
                        refl,
                    } = s;
                    em_move(cx, &lx, x, xi1, xi2, h, drift, tmp, sig);
                    if reflect && !*cpl {
                        let r = g0.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = g0.iter().zip(xi1.iter()).map(|(u, z)| u * z).sum::<f64>() / r;
                        for k in 0..d {
                            refl[k] = xi1[k] - 2.0 * dot * g0[k] / r;
                        }
                        em_move(cy, &ly, y, refl, xi2, h, drift, tmp, sig);
                        for k in 0..d {
                            g1[k] = x[k] - y[k];
                        }
                        let end = g1.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if end <= eps || segment_min_norm(g0, g1) <= eps {
                            *cpl = true;
                            *tau = t_next;
                        }
                    } else {
                        em_move(cy, &ly, y, xi1, xi2, h, drift, tmp, sig);
                    }
                    (bad(x) || bad(y)).then_some(i)
                },
            )
            .flatten()
            .min();
    ce.x.step += 1;
    ce.x.time = t_next;
    if let Some(p) = first_bad {
        return Err(Error::BlowUp {
            particle: p,
            step: ce.x.step,
            detail: format!(
                "X {:?}, Y {:?}",
                &ce.x.states[p * d..(p + 1) * d],
                &ce.y[p * d..(p + 1) * d]
            ),
        });
    }
    Ok(())
}

/// Reflection coupling until the pair meets (within `eps_couple`), synchronous afterwards.
pub fn step_coupled(
    ce: &mut CoupledEnsemble,
    cx: &CoefficientSet,
    cy: &CoefficientSet,
    h: f64,
    eps_couple: f64,
) -> Result<()> {
    if !(eps_couple > 0.0) {
        return Err(Error::Invalid("eps_couple must be positive".into()));
    }
    coupled_step(ce, cx, cy, h, Some(eps_couple), None)
}

/// Identical noise on both sides; requires diagonal sigma_hat.
pub fn step_synchronous(ce: &mut CoupledEnsemble, cx: &CoefficientSet, cy: &CoefficientSet, h: f64) -> Result<()> {
    for c in [cx, cy] {
        if c.sigma_hat.is_some() && !c.sigma_hat_diagonal {
            return Err(Error::Structure(
                "synchronous order-preserving coupling needs a diagonal sigma_hat".into(),
            ));
        }
    }
    coupled_step(ce, cx, cy, h, None, None)
}

/// Number of (pair, component) entries with X < Y.
pub fn order_violation_count(ce: &CoupledEnsemble) -> usize {
    ce.x.states.iter().zip(&ce.y).filter(|(a, b)| a < b).count()
}

fn sample_law(law: &InitLaw, rng: &mut ChaCha8Rng, count: usize) -> Vec<f64> {
    (0..count)
        .map(|_| match *law {
            InitLaw::Normal { mean, std } => mean + std * rng.sample::<f64, _>(StandardNormal),
            InitLaw::Uniform { lo, hi } => rng.random_range(lo..hi),
            InitLaw::Dirac { at } => at,
        })
        .collect()
}

/// Initial samples from the reserved init stream: X from mu, then Y from nu.
/// Identical laws give identical samples.
pub fn initial_samples(sc: &Scenario) -> (Vec<f64>, Vec<f64>) {
    let n = sc.sim.n * sc.dim();
    let mut rng = stream_rng(sc.sim.seed, STREAM_INIT);
    let x = sample_law(&sc.init.mu, &mut rng, n);
    let y = if sc.init.mu == sc.init.nu {
        x.clone()
    } else {
        sample_law(&sc.init.nu, &mut rng, n)
    };
    (x, y)
}

/// Build the coupled ensemble: sample, optionally order-split or pair by optimal matching.
pub fn initial_coupled(sc: &Scenario, cost: &CostSpec) -> Result<CoupledEnsemble> {
    let d = sc.dim();
    let (mut x, mut y) = initial_samples(sc);
    if sc.init.order_split {
        for k in 0..x.len() {
            let (a, b) = (x[k], y[k]);
            x[k] = a.max(b);
            y[k] = a.min(b);
        }
    } else if sc.init.matching && sc.init.mu != sc.init.nu {
        let (assign, _) = optimal_matching(cost, &x, &y, d)?;
        y = permute(&y, &assign, d);
    }
    CoupledEnsemble::new(ParticleEnsemble::new(x, d, sc.sim.seed)?, y)
}

fn permute(y: &[f64], assign: &[usize], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(y.len());
    for &j in assign {
        out.extend_from_slice(&y[j * d..(j + 1) * d]);
    }
    out
}

/// Mean pair cost over the current pairing, and a pair-bootstrap 95% half-width.
pub fn pair_cost_estimate(cost: &CostSpec, ce: &CoupledEnsemble, resamples: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let d = ce.x.dim;
    let costs: Vec<f64> =
        ce.x.states
            .par_chunks(d)
            .zip(ce.y.par_chunks(d))
            .map(|(a, b)| cost.pair(a, b))
            .collect();
    let n = costs.len();
    let mean = costs.iter().sum::<f64>() / n as f64;
    if resamples < 2 || mean == 0.0 {
        return (mean, 0.0);
    }
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| costs[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    stats.sort_by(f64::total_cmp);
    (
        (mean),
        0.5 * (quantile(&stats, 0.975) - quantile(&stats, 0.025)).max(0.0),
    )
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    /// Decay rate, minus the slope of log distance.
    pub rate: f64,
    pub intercept: f64,
    pub ci_half: f64,
    /// Root-mean-square residual of the log-linear fit.
    pub residual: f64,
    pub n_used: usize,
    pub n_zero_excluded: usize,
    pub window: [f64; 2],
}

fn ols(t: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = t.len() as f64;
    let mt = t.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (a, b) in t.iter().zip(y) {
        sxy += (a - mt) * (b - my);
        sxx += (a - mt) * (a - mt);
    }
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some((slope, my - slope * mt))
}

/// Least squares of log distance on t over `window`, with a moving-block bootstrap CI
/// (block length sqrt(n)) for the rate.
pub fn fit_decay(times: &[f64], dist: &[f64], window: [f64; 2], resamples: usize, seed: u64) -> Result<FitResult> {
    let tol = 1e-9 * window[1].abs().max(1.0);
    let rows: Vec<(f64, f64)> = times
        .iter()
        .zip(dist)
        .filter(|(t, _)| **t >= window[0] - tol && **t <= window[1] + tol)
        .map(|(t, d)| (*t, *d))
        .collect();
    let zeros = rows.iter().filter(|r| !(r.1 > 0.0)).count();
    if !rows.is_empty() && zeros == rows.len() {
        return Err(Error::Degenerate("all distances in the fit window are zero".into()));
    }
    let used: Vec<(f64, f64)> = rows.into_iter().filter(|r| r.1 > 0.0).collect();
    if used.len() < 4 {
        return Err(Error::Invalid(format!(
            "fit needs at least 4 positive rows in the window, found {}",
            used.len()
        )));
    }
    let t: Vec<f64> = used.iter().map(|r| r.0).collect();
    let y: Vec<f64> = used.iter().map(|r| r.1.ln()).collect();
    let (slope, intercept) = ols(&t, &y).ok_or_else(|| Error::Degenerate("fit window has a single time".into()))?;
    let n = t.len();
    let residual = (t
        .iter()
        .zip(&y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum::<f64>()
        / n as f64)
        .sqrt();
    let block = ((n as f64).sqrt().round() as usize).clamp(1, n);
    let mut rng = stream_rng(seed, STREAM_BOOTSTRAP);
    let mut rates = Vec::with_capacity(resamples);
    let (mut bt, mut by) = (Vec::with_capacity(n + block), Vec::with_capacity(n + block));
    for _ in 0..resamples {
        bt.clear();
        by.clear();
        while bt.len() < n {
            let s = rng.random_range(0..=n - block);
            bt.extend_from_slice(&t[s..s + block]);
            by.extend_from_slice(&y[s..s + block]);
        }
        bt.truncate(n);
        by.truncate(n);
        if let Some((sl, _)) = ols(&bt, &by) {
            rates.push(-sl);
        }
    }
    let ci_half = if rates.len() >= 2 {
        rates.sort_by(f64::total_cmp);
        0.5 * (quantile(&rates, 0.975) - quantile(&rates, 0.025)).max(0.0)
    } else {
        0.0
    };
    Ok(FitResult {
        rate: -slope,
        intercept,
        ci_half,
        residual,
        n_used: n,
        n_zero_excluded: zeros,
        window,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecayCurve {
    pub times: Vec<f64>,
    pub distance: Vec<f64>,
    pub ci_half: Vec<f64>,
    pub n_coupled: Vec<usize>,
    /// Order violations per record when the scenario starts ordered.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub violations: Option<Vec<usize>>,
    pub fit: Option<FitResult>,
    pub degenerate: bool,
    pub fit_error: Option<String>,
    pub seed: u64,
    pub coupling: Coupling,
    pub cost: String,
    pub eps_couple: Option<f64>,
}

impl DecayCurve {
    /// CSV "t,distance,ci_half,n_coupled", 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,distance,ci_half,n_coupled\n");
        for i in 0..self.times.len() {
            s.push_str(&format!(
                "{:.16e},{:.16e},{:.16e},{}\n",
                self.times[i], self.distance[i], self.ci_half[i], self.n_coupled[i]
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Parse a decay CSV back into (t, distance) columns.
pub fn read_curve_csv(text: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty curve file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let ti = cols.iter().position(|c| *c == "t");
    let di = cols.iter().position(|c| *c == "distance");
    let (Some(ti), Some(di)) = (ti, di) else {
        return Err(Error::Parse(format!("header `{header}` lacks t and distance columns")));
    };
    let (mut t, mut d) = (Vec::new(), Vec::new());
    for (k, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let get = |i: usize| -> Result<f64> {
            f.get(i)
                .ok_or_else(|| Error::Parse(format!("line {}: missing column {i}", k + 2)))?
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", k + 2)))
        };
        t.push(get(ti)?);
        d.push(get(di)?);
    }
    if t.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Parse("times must be strictly increasing".into()));
    }
    Ok((t, d))
}

/// Observer hook called at every record with the current coupled state.
pub type Observer<'a> = &'a mut dyn FnMut(&CoupledEnsemble) -> Result<()>;

/// Simulate the coupled system and record the mean pair cost every `record_every` steps.
pub fn run_decay_experiment(sc: &Scenario, cost: &CostSpec, coupling: Coupling) -> Result<DecayCurve> {
    run_decay_experiment_with(sc, cost, coupling, &mut |_| Ok(()))
}

pub fn run_decay_experiment_with(
    sc: &Scenario,
    cost: &CostSpec,
    coupling: Coupling,
    observer: Observer<'_>,
) -> Result<DecayCurve> {
    let cfg = &sc.sim;
    let steps = cfg.steps()?;
    let c = sc.coefficients();
    let eps = cfg.eps_for(c.alpha);
    let d = sc.dim();
    let mut ce = initial_coupled(sc, cost)?;
    let mut rng = stream_rng(cfg.seed ^ 0x5EED, STREAM_BOOTSTRAP);
    let mut curve = DecayCurve {
        times: vec![],
        distance: vec![],
        ci_half: vec![],
        n_coupled: vec![],
        violations: sc.init.order_split.then(Vec::new),
        fit: None,
        degenerate: false,
        fit_error: None,
        seed: cfg.seed,
        coupling,
        cost: cost.name().into(),
        eps_couple: (coupling == Coupling::Reflection).then_some(eps),
    };
    let record = |ce: &CoupledEnsemble, curve: &mut DecayCurve, rng: &mut ChaCha8Rng| {
        let (m, ci) = pair_cost_estimate(cost, ce, cfg.pair_bootstrap, rng);
        curve.times.push(ce.time());
        curve.distance.push(m);
        curve.ci_half.push(ci);
        curve.n_coupled.push(ce.n_coupled());
        if let Some(v) = curve.violations.as_mut() {
            v.push(order_violation_count(ce));
        }
    };
    record(&ce, &mut curve, &mut rng);
    observer(&ce)?;
    for k in 1..=steps {
        match coupling {
            Coupling::Reflection => coupled_step(&mut ce, &c, &c, cfg.h, Some(eps), cfg.subsample)?,
            Coupling::Synchronous => {
                if c.sigma_hat.is_some() && !c.sigma_hat_diagonal {
                    return Err(Error::Structure(
                        "synchronous coupling needs a diagonal sigma_hat".into(),
                    ));
                }
                coupled_step(&mut ce, &c, &c, cfg.h, None, cfg.subsample)?
            }
        }
        if k % cfg.record_every as u64 == 0 || k == steps {
            if cfg.rematch {
                let (assign, _) = optimal_matching(cost, &ce.x.states, &ce.y, d)?;
                if assign.iter().enumerate().any(|(i, j)| i != *j) {
                    ce.y = permute(&ce.y, &assign, d);
                    let old = ce.coupled.clone();
                    for (i, &j) in assign.iter().enumerate() {
                        ce.coupled[i] = old[j] && i == j;
                    }
                }
            }
            record(&ce, &mut curve, &mut rng);
            observer(&ce)?;
        }
    }
    let window = cfg.fit_window.unwrap_or([cfg.t / 4.0, cfg.t]);
    if curve.distance.iter().all(|v| *v == 0.0) {
        curve.degenerate = true;
    } else {
        match fit_decay(&curve.times, &curve.distance, window, cfg.bootstrap, cfg.seed) {
            Ok(f) => curve.fit = Some(f),
            Err(Error::Degenerate(m)) => {
                curve.degenerate = true;
                curve.fit_error = Some(m);
            }
            Err(e) => curve.fit_error = Some(e.to_string()),
        }
    }
    Ok(curve)
}

/// Long run of the mu-side system; after `burn_in`, snapshots one time unit apart
/// are concatenated until `n_samples` points are collected.
pub fn estimate_stationary(sc: &Scenario, burn_in: f64, n_samples: usize) -> Result<Vec<f64>> {
    let c = sc.coefficients();
    let d = sc.dim();
    let h = sc.sim.h;
    let (x, _) = initial_samples(sc);
    let mut ens = ParticleEnsemble::new(x, d, sc.sim.seed)?;
    let burn = (burn_in / h).round() as u64;
    for _ in 0..burn {
        step_em(&mut ens, &c, h, sc.sim.subsample)?;
    }
    let thin = ((1.0 / h).round() as u64).max(1);
    let mut out = Vec::with_capacity(n_samples * d);
    loop {
        let take = (n_samples - out.len() / d).min(ens.len());
        out.extend_from_slice(&ens.states[..take * d]);
        if out.len() / d >= n_samples {
            break;
        }
        for _ in 0..thin {
            step_em(&mut ens, &c, h, sc.sim.subsample)?;
        }
    }
    Ok(out)
}

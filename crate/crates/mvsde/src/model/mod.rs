//! Coefficient sets, empirical-law drift evaluation and probe-based hypothesis checks.

mod presets;
mod scenario;

pub use presets::*;
pub use scenario::*;

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// Vector field written into the output slice.
pub type VectorFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// Matrix field written row-major into a d*d slice.
pub type MatrixFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type PairFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
pub type PairScalarFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
/// Moment kernel Phi(x, s) written into the output slice.
pub type MomentFn = Arc<dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync>;

/// A pairwise kernel whose empirical mean factors through feature means:
/// mean_j K(x, y_j) = combine(x, mean_j features(y_j)).
#[derive(Clone)]
pub struct Separable {
    pub n_features: usize,
    pub features: VectorFn,
    pub combine: PairFn,
}

#[derive(Clone)]
pub enum InteractionKernel {
    None,
    /// b_i(x, mu) gains mean over mu of Z_i(x, .).
    PairwiseZ {
        z: PairFn,
        separable: Option<Separable>,
    },
    /// b(x, mu) gains minus the mean over mu of grad_x W(x, .).
    GradientW {
        grad_w: PairFn,
        separable: Option<Separable>,
    },
    /// b(x, mu) gains epsilon * Phi(x, log mu(weight)).
    MomentPhi {
        phi: MomentFn,
        epsilon: f64,
        weight: ScalarFn,
    },
}

impl InteractionKernel {
    pub fn name(&self) -> &'static str {
        match self {
            InteractionKernel::None => "none",
            InteractionKernel::PairwiseZ { .. } => "pairwise_z",
            InteractionKernel::GradientW { .. } => "gradient_w",
            InteractionKernel::MomentPhi { .. } => "moment_phi",
        }
    }
}

#[derive(Clone)]
pub struct LyapunovSpec {
    pub v: ScalarFn,
    pub grad_v: VectorFn,
    pub hess_v: Option<MatrixFn>,
    pub k0: f64,
    pub k1: f64,
    pub beta: f64,
    pub l: f64,
}

impl fmt::Debug for LyapunovSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LyapunovSpec")
            .field("k0", &self.k0)
            .field("k1", &self.k1)
            .field("beta", &self.beta)
            .field("l", &self.l)
            .finish_non_exhaustive()
    }
}

impl LyapunovSpec {
    /// Hessian of V, analytic when available, else central differences of grad V.
    pub fn hessian(&self, x: &[f64], out: &mut [f64]) {
        if let Some(h) = &self.hess_v {
            h(x, out);
            return;
        }
        let d = x.len();
        let mut xp = x.to_vec();
        let mut gp = vec![0.0; d];
        let mut gm = vec![0.0; d];
        for i in 0..d {
            let h = 1e-5 * (1.0 + x[i].abs());
            xp[i] = x[i] + h;
            (self.grad_v)(&xp, &mut gp);
            xp[i] = x[i] - h;
            (self.grad_v)(&xp, &mut gm);
            xp[i] = x[i];
            for j in 0..d {
                out[i * d + j] = (gp[j] - gm[j]) / (2.0 * h);
            }
        }
        for i in 0..d {
            for j in 0..i {
                let m = 0.5 * (out[i * d + j] + out[j * d + i]);
                out[i * d + j] = m;
                out[j * d + i] = m;
            }
        }
    }
}

#[derive(Clone)]
pub struct CoefficientSet {
    pub dim: usize,
    /// Isotropic part of a = alpha I + sigma_hat sigma_hat^T.
    pub alpha: f64,
    pub sigma_hat: Option<MatrixFn>,
    /// Set when sigma_hat is diagonal with entry i depending on x_i only.
    pub sigma_hat_diagonal: bool,
    pub base_drift: VectorFn,
    pub interaction: InteractionKernel,
    pub lyapunov: Option<LyapunovSpec>,
    /// Independently coded full diffusion matrix, used to cross-check the decomposition.
    pub diffusion_full: Option<MatrixFn>,
}

impl fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("dim", &self.dim)
            .field("alpha", &self.alpha)
            .field("sigma_hat", &self.sigma_hat.is_some())
            .field("interaction", &self.interaction.name())
            .field("lyapunov", &self.lyapunov)
            .finish_non_exhaustive()
    }
}

/// Precomputed view of an empirical measure, built once per step (Jacobi snapshot).
pub struct Law<'a> {
    points: &'a [f64],
    n: usize,
    data: LawData,
}

enum LawData {
    None,
    Features(Vec<f64>),
    LogMoment(f64),
    Direct(Option<Vec<usize>>),
}

impl<'a> Law<'a> {
    pub fn len(&self) -> usize {
        self.n
    }
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

const SUM_CHUNK: usize = 1024;

/// Chunked mean whose association order is fixed by the data, not the scheduler.
fn chunked_feature_mean(points: &[f64], dim: usize, sep: &Separable) -> Vec<f64> {
    let n = points.len() / dim;
    let k = sep.n_features;
    let mut total = vec![0.0; k];
    let mut f = vec![0.0; k];
    for chunk in points.chunks(SUM_CHUNK * dim) {
        let mut part = vec![0.0; k];
        for y in chunk.chunks_exact(dim) {
            (sep.features)(y, &mut f);
            for (p, v) in part.iter_mut().zip(&f) {
                *p += v;
            }
        }
        for (t, p) in total.iter_mut().zip(&part) {
            *t += p;
        }
    }
    let inv = 1.0 / n as f64;
    total.iter_mut().for_each(|t| *t *= inv);
    total
}

impl CoefficientSet {
    /// a(x) = alpha I + sigma_hat sigma_hat^T, row-major.
    pub fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        out.iter_mut().for_each(|v| *v = 0.0);
        if let Some(sh) = &self.sigma_hat {
            let mut s = vec![0.0; d * d];
            sh(x, &mut s);
            for i in 0..d {
                for j in 0..d {
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += s[i * d + k] * s[j * d + k];
                    }
                    out[i * d + j] = acc;
                }
            }
        }
        for i in 0..d {
            out[i * d + i] += self.alpha;
        }
    }

    /// True when the law enters through an O(N) pairwise sum per particle.
    pub fn law_needs_pairs(&self) -> bool {
        matches!(
            &self.interaction,
            InteractionKernel::PairwiseZ { separable: None, .. } | InteractionKernel::GradientW { separable: None, .. }
        )
    }

    /// Summarize an ensemble (flat, n*d) for repeated drift evaluation.
    /// `subsample` restricts pairwise kernels without a separable form to the given indices.
    pub fn law<'a>(&self, points: &'a [f64], subsample: Option<&[usize]>) -> Result<Law<'a>> {
        let d = self.dim;
        if points.is_empty() || !points.len().is_multiple_of(d) {
            return Err(Error::Empty("ensemble must be a nonempty n*d array".into()));
        }
        let n = points.len() / d;
        let data = match &self.interaction {
            InteractionKernel::None => LawData::None,
            InteractionKernel::PairwiseZ { separable: Some(s), .. }
            | InteractionKernel::GradientW { separable: Some(s), .. } => {
                LawData::Features(chunked_feature_mean(points, d, s))
            }
            InteractionKernel::PairwiseZ { .. } | InteractionKernel::GradientW { .. } => {
                LawData::Direct(subsample.map(|s| s.to_vec()))
            }
            InteractionKernel::MomentPhi { weight, .. } => {
                let mut acc = 0.0;
                for y in points.chunks_exact(d) {
                    acc += weight(y);
                }
                let m = acc / n as f64;
                if !(m > 0.0) || !m.is_finite() {
                    return Err(Error::Domain(format!(
                        "moment mu(V) = {m} is not positive; log undefined"
                    )));
                }
                LawData::LogMoment(m.ln())
            }
        };
        Ok(Law { points, n, data })
    }

    /// Drift at x against a precomputed law; `scratch` needs length >= dim.
    pub fn drift_with(&self, x: &[f64], law: &Law<'_>, out: &mut [f64], scratch: &mut [f64]) {
        let d = self.dim;
        (self.base_drift)(x, out);
        match (&self.interaction, &law.data) {
            (InteractionKernel::None, _) => {}
            (InteractionKernel::PairwiseZ { separable: Some(s), .. }, LawData::Features(m)) => {
                (s.combine)(x, m, &mut scratch[..d]);
                for i in 0..d {
                    out[i] += scratch[i];
                }
            }
            (InteractionKernel::GradientW { separable: Some(s), .. }, LawData::Features(m)) => {
                (s.combine)(x, m, &mut scratch[..d]);
                for i in 0..d {
                    out[i] -= scratch[i];
                }
            }
            (InteractionKernel::PairwiseZ { z, .. }, LawData::Direct(idx)) => {
                let mean = pair_mean(z, x, law.points, d, idx.as_deref(), scratch);
                for i in 0..d {
                    out[i] += mean[i];
                }
            }
            (InteractionKernel::GradientW { grad_w, .. }, LawData::Direct(idx)) => {
                let mean = pair_mean(grad_w, x, law.points, d, idx.as_deref(), scratch);
                for i in 0..d {
                    out[i] -= mean[i];
                }
            }
            (InteractionKernel::MomentPhi { phi, epsilon, .. }, LawData::LogMoment(s)) => {
                phi(x, *s, &mut scratch[..d]);
                for i in 0..d {
                    out[i] += epsilon * scratch[i];
                }
            }
            _ => unreachable!("law summary built for a different kernel"),
        }
    }

    /// Drift with the law replaced by the uniform empirical measure of `ensemble`.
    pub fn evaluate_drift(&self, x: &[f64], ensemble: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("x must be a finite point of dimension dim".into()));
        }
        let law = self.law(ensemble, None)?;
        let mut out = vec![0.0; self.dim];
        let mut scratch = vec![0.0; 2 * self.dim];
        self.drift_with(x, &law, &mut out, &mut scratch);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite drift at x = {x:?}")));
        }
        Ok(out)
    }
}

fn pair_mean<'s>(
    k: &PairFn,
    x: &[f64],
    points: &[f64],
    d: usize,
    idx: Option<&[usize]>,
    scratch: &'s mut [f64],
) -> &'s [f64] {
    let (acc, tmp) = scratch.split_at_mut(d);
    let tmp = &mut tmp[..d];
    acc.iter_mut().for_each(|v| *v = 0.0);
    let count = match idx {
        Some(ix) => {
            for &j in ix {
                k(x, &points[j * d..(j + 1) * d], tmp);
                for i in 0..d {
                    acc[i] += tmp[i];
                }
            }
            ix.len()
        }
        None => {
            for y in points.chunks_exact(d) {
                k(x, y, tmp);
                for i in 0..d {
                    acc[i] += tmp[i];
                }
            }
            points.len() / d
        }
    };
    let inv = 1.0 / count as f64;
    acc.iter_mut().for_each(|v| *v *= inv);
    acc
}

/// Smallest eigenvalue of a symmetric row-major d*d matrix.
pub fn min_eigenvalue(m: &[f64], d: usize) -> f64 {
    match d {
        1 => m[0],
        2 => {
            let (a, b, c) = (m[0], 0.5 * (m[1] + m[2]), m[3]);
            let mid = 0.5 * (a + c);
            let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
            mid - rad
        }
        _ => {
            let mat = DMatrix::from_row_slice(d, d, m);
            let sym = 0.5 * (&mat + mat.transpose());
            sym.symmetric_eigenvalues().min()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LyapunovReport {
    /// max over probes of L V - K0 + K1 V; nonpositive means the drift condition holds on the probe.
    pub max_residual: f64,
    pub worst_point: Vec<f64>,
    pub worst_law: usize,
    /// max over probes of |sigma^T grad V| / (1 + V).
    pub h11_max: f64,
    pub h11_point: Vec<f64>,
    pub v_nonnegative: bool,
    pub v_grows_radially: bool,
    pub probes: usize,
}

impl LyapunovReport {
    pub fn holds(&self) -> bool {
        self.max_residual <= 0.0 && self.v_nonnegative && self.v_grows_radially
    }
}

/// Split generator terms at x: (half trace part, b . grad V, V, |sigma^T grad V|).
fn generator_parts(c: &CoefficientSet, spec: &LyapunovSpec, x: &[f64], law: &Law<'_>) -> Result<(f64, f64, f64, f64)> {
    let d = c.dim;
    let v = (spec.v)(x);
    let mut g = vec![0.0; d];
    (spec.grad_v)(x, &mut g);
    let mut h = vec![0.0; d * d];
    spec.hessian(x, &mut h);
    let mut a = vec![0.0; d * d];
    c.diffusion(x, &mut a);
    let mut b = vec![0.0; d];
    let mut scratch = vec![0.0; 2 * d];
    c.drift_with(x, law, &mut b, &mut scratch);
    let mut tr = 0.0;
    for i in 0..d {
        for j in 0..d {
            tr += a[i * d + j] * h[j * d + i];
        }
    }
    let bg: f64 = b.iter().zip(&g).map(|(p, q)| p * q).sum();
    let mut quad = 0.0;
    for i in 0..d {
        for j in 0..d {
            quad += g[i] * a[i * d + j] * g[j];
        }
    }
    let all = [v, bg, tr, quad];
    if all.iter().any(|t| !t.is_finite()) || g.iter().any(|t| !t.is_finite()) {
        return Err(Error::Numerical(format!("non-finite V or derivative at x = {x:?}")));
    }
    Ok((0.5 * tr, bg, v, quad.max(0.0).sqrt()))
}

fn default_laws(c: &CoefficientSet, laws: &[Vec<f64>]) -> Vec<Vec<f64>> {
    if laws.is_empty() {
        vec![vec![0.0; c.dim]]
    } else {
        laws.to_vec()
    }
}

/// Probe-based check of L_mu V <= K0 - K1 V and of the gradient bound on V.
/// `probe` is a flat n*d array; each law is a flat ensemble.
pub fn check_lyapunov(
    c: &CoefficientSet,
    spec: &LyapunovSpec,
    probe: &[f64],
    law_probe: &[Vec<f64>],
) -> Result<LyapunovReport> {
    let d = c.dim;
    if probe.is_empty() || !probe.len().is_multiple_of(d) {
        return Err(Error::Empty("probe set must be a nonempty n*d array".into()));
    }
    let laws = default_laws(c, law_probe);
    let mut rep = LyapunovReport {
        max_residual: f64::NEG_INFINITY,
        worst_point: vec![],
        worst_law: 0,
        h11_max: 0.0,
        h11_point: vec![],
        v_nonnegative: true,
        v_grows_radially: true,
        probes: 0,
    };
    for (li, lp) in laws.iter().enumerate() {
        let law = c.law(lp, None)?;
        for x in probe.chunks_exact(d) {
            let (half_tr, bg, v, sg) = generator_parts(c, spec, x, &law)?;
            // Grouped so that exact identities such as the OU case cancel to zero.
            let r = (half_tr - spec.k0) + (bg + spec.k1 * v);
            if r > rep.max_residual {
                rep.max_residual = r;
                rep.worst_point = x.to_vec();
                rep.worst_law = li;
            }
            let ratio = sg / (1.0 + v);
            if ratio > rep.h11_max || rep.h11_point.is_empty() {
                rep.h11_max = ratio;
                rep.h11_point = x.to_vec();
            }
            if v < 0.0 {
                rep.v_nonnegative = false;
            }
            rep.probes += 1;
        }
    }
    rep.v_grows_radially = radial_growth(spec, d);
    Ok(rep)
}

/// V increases without bound along axis and diagonal rays (checked out to radius 1e3).
fn radial_growth(spec: &LyapunovSpec, d: usize) -> bool {
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for i in 0..d {
        for s in [1.0, -1.0] {
            let mut e = vec![0.0; d];
            e[i] = s;
            dirs.push(e);
        }
    }
    dirs.push(vec![1.0 / (d as f64).sqrt(); d]);
    dirs.iter().all(|e| {
        let at = |r: f64| (spec.v)(&e.iter().map(|v| v * r).collect::<Vec<_>>());
        let (v10, v100, v1000) = (at(10.0), at(100.0), at(1000.0));
        v1000 > v100 && v100 > v10 && v1000 > at(0.0)
    })
}

/// Smallest K0 making the drift condition hold on the probe for the given K1.
pub fn fit_k0(c: &CoefficientSet, spec: &LyapunovSpec, k1: f64, probe: &[f64], law_probe: &[Vec<f64>]) -> Result<f64> {
    let d = c.dim;
    let laws = default_laws(c, law_probe);
    let mut k0 = f64::NEG_INFINITY;
    for lp in &laws {
        let law = c.law(lp, None)?;
        for x in probe.chunks_exact(d) {
            let (half_tr, bg, v, _) = generator_parts(c, spec, x, &law)?;
            let mut need = half_tr + bg + k1 * v;
            // Step up until the residual, grouped as in check_lyapunov, is nonpositive.
            while (half_tr - need) + (bg + k1 * v) > 0.0 {
                need = need.next_up();
            }
            k0 = k0.max(need);
        }
    }
    Ok(k0)
}

#[derive(Clone)]
pub struct Potential {
    pub value: ScalarFn,
    pub hessian: Option<MatrixFn>,
}

#[derive(Clone)]
pub struct PairPotential {
    pub value: PairScalarFn,
    /// Hessian in the first argument.
    pub hessian_x: Option<PairFn>,
}

fn fd_hessian(f: &dyn Fn(&[f64]) -> f64, x: &[f64], out: &mut [f64]) {
    let d = x.len();
    let mut y = x.to_vec();
    let f0 = f(x);
    for i in 0..d {
        let hi = 1e-4 * (1.0 + x[i].abs());
        for j in i..d {
            let hj = 1e-4 * (1.0 + x[j].abs());
            let v = if i == j {
                y[i] = x[i] + hi;
                let fp = f(&y);
                y[i] = x[i] - hi;
                let fm = f(&y);
                y[i] = x[i];
                (fp - 2.0 * f0 + fm) / (hi * hi)
            } else {
                let mut e = |si: f64, sj: f64| {
                    y[i] = x[i] + si * hi;
                    y[j] = x[j] + sj * hj;
                    let r = f(&y);
                    y[i] = x[i];
                    y[j] = x[j];
                    r
                };
                (e(1.0, 1.0) - e(1.0, -1.0) - e(-1.0, 1.0) + e(-1.0, -1.0)) / (4.0 * hi * hj)
            };
            out[i * d + j] = v;
            out[j * d + i] = v;
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cc1Report {
    pub pass: bool,
    /// min over probes of (smallest Hessian eigenvalue - required bound).
    pub worst_margin: f64,
    pub witness_x: Vec<f64>,
    pub witness_z: Vec<f64>,
    pub probes: usize,
}

/// Checks that the smallest eigenvalue of the Hessian of G + W(., z) at x is at least
/// theta2 when |x| >= lambda0 and at least -theta1 inside. Probe entries are (x, z) pairs.
pub fn check_cc1(
    g: &Potential,
    w: &PairPotential,
    dim: usize,
    lambda0: f64,
    theta1: f64,
    theta2: f64,
    probe: &[(Vec<f64>, Vec<f64>)],
) -> Result<Cc1Report> {
    let mut rep = Cc1Report {
        pass: true,
        worst_margin: f64::INFINITY,
        witness_x: vec![],
        witness_z: vec![],
        probes: probe.len(),
    };
    let mut hg = vec![0.0; dim * dim];
    let mut hw = vec![0.0; dim * dim];
    for (x, z) in probe {
        match &g.hessian {
            Some(h) => h(x, &mut hg),
            None => fd_hessian(&*g.value, x, &mut hg),
        }
        match &w.hessian_x {
            Some(h) => h(x, z, &mut hw),
            None => {
                let wz = |y: &[f64]| (w.value)(y, z);
                fd_hessian(&wz, x, &mut hw)
            }
        }
        let sum: Vec<f64> = hg.iter().zip(&hw).map(|(a, b)| a + b).collect();
        if sum.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "Hessian evaluation failed at x = {x:?}, z = {z:?}"
            )));
        }
        let lmin = min_eigenvalue(&sum, dim);
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let bound = if r >= lambda0 { theta2 } else { -theta1 };
        let margin = lmin - bound;
        if margin < rep.worst_margin {
            rep.worst_margin = margin;
            rep.witness_x = x.clone();
            rep.witness_z = z.clone();
        }
    }
    // Finite-difference Hessians carry O(1e-8) rounding noise.
    let tol = if g.hessian.is_some() && w.hessian_x.is_some() {
        1e-12
    } else {
        1e-6
    };
    rep.pass = rep.worst_margin >= -tol;
    Ok(rep)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecompositionReport {
    /// max |a_full(x) - (alpha I + sigma_hat sigma_hat^T)(x)| when an independent a is supplied.
    pub max_abs_diff: Option<f64>,
    pub min_eigenvalue: f64,
    pub psd: bool,
    /// Largest finite-difference Lipschitz ratio of sigma_hat over probe pairs.
    pub sigma_hat_lipschitz: f64,
}

pub fn check_decomposition(c: &CoefficientSet, probe: &[f64]) -> Result<DecompositionReport> {
    let d = c.dim;
    let mut a = vec![0.0; d * d];
    let mut full = vec![0.0; d * d];
    let mut max_diff: Option<f64> = None;
    let mut lmin = f64::INFINITY;
    let mut scale: f64 = 1.0;
    for x in probe.chunks_exact(d) {
        c.diffusion(x, &mut a);
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite diffusion at {x:?}")));
        }
        let asym = (0..d)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .map(|(i, j)| (a[i * d + j] - a[j * d + i]).abs())
            .fold(0.0, f64::max);
        if asym > 0.0 {
            return Err(Error::Numerical(format!("asymmetric diffusion at {x:?}")));
        }
        lmin = lmin.min(min_eigenvalue(&a, d));
        scale = scale.max(a.iter().fold(0.0_f64, |m, v| m.max(v.abs())));
        if let Some(f) = &c.diffusion_full {
            f(x, &mut full);
            let diff = a.iter().zip(&full).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            max_diff = Some(max_diff.unwrap_or(0.0).max(diff));
        }
    }
    let mut lip: f64 = 0.0;
    if let Some(sh) = &c.sigma_hat {
        let pts: Vec<&[f64]> = probe.chunks_exact(d).collect();
        let mut s1 = vec![0.0; d * d];
        let mut s2 = vec![0.0; d * d];
        for w in pts.windows(2) {
            let dist = w[0]
                .iter()
                .zip(w[1])
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            if dist == 0.0 {
                continue;
            }
            sh(w[0], &mut s1);
            sh(w[1], &mut s2);
            let hs = s1.iter().zip(&s2).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            lip = lip.max(hs / dist);
        }
    }
    Ok(DecompositionReport {
        max_abs_diff: max_diff,
        min_eigenvalue: lmin,
        psd: lmin >= -1e-12 * scale,
        sigma_hat_lipschitz: lip,
    })
}

/// Uniform grid probe on [lo, hi]^d with `per_axis` points per coordinate, flat.
pub fn grid_probe(dim: usize, lo: f64, hi: f64, per_axis: usize) -> Vec<f64> {
    let per_axis = per_axis.max(2);
    let total = per_axis.pow(dim as u32);
    let mut out = Vec::with_capacity(total * dim);
    for mut k in 0..total {
        for _ in 0..dim {
            let i = k % per_axis;
            k /= per_axis;
            out.push(lo + (hi - lo) * i as f64 / (per_axis - 1) as f64);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ou(alpha: f64) -> CoefficientSet {
        ou_coefficients(1, alpha, 1.0, 0.0, 0.0)
    }

    #[test]
    fn linear_drift_zero_at_origin() {
        let c = ou(1.0);
        assert_eq!(c.evaluate_drift(&[0.0], &[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn quadratic_w_against_dirac() {
        let c = ou_coefficients(1, 1.0, 1.0, 0.0, 1.0);
        assert_eq!(c.evaluate_drift(&[1.0], &[0.0]).unwrap(), vec![-2.0]);
    }

    #[test]
    fn example21_tail_drift() {
        let c = example21_coefficients(&Example21Params::default());
        let mut out = [0.0];
        (c.base_drift)(&[2.0], &mut out);
        // b0(2) = -|2|^{-p} 2 with p = 1/2 differs from the p = 1 value; check that formula.
        assert!((out[0] + 2.0_f64.powf(0.5)).abs() < 1e-15);
        let mut p1 = Example21Params::default();
        p1.p = 1.0;
        let c1 = example21_coefficients(&p1);
        (c1.base_drift)(&[2.0], &mut out);
        assert_eq!(out[0], -1.0);
    }

    #[test]
    fn example21_drift_is_c1_at_unit_sphere() {
        for p in [0.25, 0.5, 1.0] {
            let par = Example21Params {
                p,
                ..Example21Params::default()
            };
            let c = example21_coefficients(&par);
            let b = |x: f64| {
                let mut o = [0.0];
                (c.base_drift)(&[x], &mut o);
                o[0]
            };
            let h = 1e-7;
            assert!((b(1.0 - 1e-12) - b(1.0 + 1e-12)).abs() < 1e-10);
            let dl = (b(1.0) - b(1.0 - h)) / h;
            let dr = (b(1.0 + h) - b(1.0)) / h;
            assert!((dl - dr).abs() < 1e-5, "p={p} {dl} {dr}");
        }
    }

    #[test]
    fn moment_phi_rejects_nonpositive_moment() {
        let mut c = example21_coefficients(&Example21Params::default());
        if let InteractionKernel::MomentPhi { weight, .. } = &mut c.interaction {
            *weight = Arc::new(|_x: &[f64]| 0.0);
        }
        assert!(matches!(c.evaluate_drift(&[0.0], &[1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn ou_lyapunov_identity_is_exactly_zero() {
        let c = CoefficientSet { alpha: 2.0, ..ou(1.0) };
        let spec = quadratic_lyapunov(1, 2.0, 2.0);
        let probe = grid_probe(1, -7.0, 7.0, 301);
        let rep = check_lyapunov(&c, &spec, &probe, &[]).unwrap();
        assert_eq!(rep.max_residual, 0.0);
        // Every single probe cancels, not just the maximum.
        for x in probe.chunks(1) {
            let rep = check_lyapunov(&c, &spec, x, &[]).unwrap();
            assert_eq!(rep.max_residual, 0.0);
        }
        assert!(rep.holds());
    }

    #[test]
    fn ou_lyapunov_violation_detected() {
        let c = CoefficientSet { alpha: 2.0, ..ou(1.0) };
        let spec = quadratic_lyapunov(1, 2.0, 3.0);
        let probe = grid_probe(1, -3.0, 3.0, 61);
        let rep = check_lyapunov(&c, &spec, &probe, &[]).unwrap();
        assert!(rep.max_residual > 0.0);
        assert!(rep.worst_point[0].abs() > 2f64.sqrt());
    }

    #[test]
    fn example21_lyapunov_with_fitted_constants() {
        let par = Example21Params::default();
        let c = example21_coefficients(&par);
        let probe = grid_probe(1, -50.0, 50.0, 4001);
        let laws = example21_law_probes();
        for k1 in [0.1, 0.3, 0.45] {
            let mut spec = c.lyapunov.clone().unwrap();
            spec.k1 = k1;
            spec.k0 = fit_k0(&c, &spec, k1, &probe, &laws).unwrap();
            let rep = check_lyapunov(&c, &spec, &probe, &laws).unwrap();
            assert!(rep.max_residual <= 0.0);
            // Independent oracle: closed-form second derivative of V on a shifted dense grid.
            let p = par.p;
            let worst = (0..=20000)
                .map(|i| -50.0 + 100.0 * i as f64 / 20000.0 + 1e-3)
                .map(|x: f64| {
                    let u = (1.0 + x * x).powf(p / 2.0);
                    let v = u.exp();
                    let du = p * (1.0 + x * x).powf(p / 2.0 - 1.0) * x;
                    let ddu = p * (1.0 + x * x).powf(p / 2.0 - 1.0)
                        + p * (p - 2.0) * x * x * (1.0 + x * x).powf(p / 2.0 - 2.0);
                    let vpp = v * (du * du + ddu);
                    let b0 = if x.abs() >= 1.0 {
                        -x.abs().powf(-p) * x
                    } else {
                        -(1.0 + p / 2.0) * x + (p / 2.0) * x.powi(3)
                    };
                    // worst case over the moment argument: |eps Phi| <= eps |x|/sqrt(1+x^2)
                    let phi = par.epsilon * par.amplitude * x.abs() / (1.0 + x * x).sqrt();
                    0.5 * par.alpha * vpp + b0 * v * du + phi * (v * du).abs() - spec.k0 + k1 * v
                })
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(worst <= 1e-9, "k1={k1} oracle residual {worst}");
        }
    }

    #[test]
    fn cc1_constant_and_negative() {
        let g = Potential {
            value: Arc::new(|x: &[f64]| 0.5 * x[0] * x[0]),
            hessian: None,
        };
        let w = zero_pair_potential();
        let probe: Vec<_> = (0..41).map(|i| (vec![-10.0 + 0.5 * i as f64], vec![0.0])).collect();
        assert!(check_cc1(&g, &w, 1, 1.0, 0.0, 1.0, &probe).unwrap().pass);
        let gneg = Potential {
            value: Arc::new(|x: &[f64]| -0.5 * x[0] * x[0]),
            hessian: None,
        };
        assert!(!check_cc1(&gneg, &w, 1, 1.0, 0.0, 0.1, &probe).unwrap().pass);
    }

    #[test]
    fn cc1_double_well() {
        let g = Potential {
            value: Arc::new(|x: &[f64]| x[0].powi(4) / 4.0 - x[0] * x[0] / 2.0),
            hessian: None,
        };
        let w = zero_pair_potential();
        let probe: Vec<_> = (0..201)
            .flat_map(|i| (0..21).map(move |j| (vec![-10.0 + 0.1 * i as f64], vec![-10.0 + j as f64])))
            .collect();
        let rep = check_cc1(&g, &w, 1, 2.0, 1.0, 1.0, &probe).unwrap();
        // Grid oracle: min of 3x^2 - 1 minus the bound over the same x grid.
        let oracle = (0..201)
            .map(|i| -10.0 + 0.1 * i as f64)
            .map(|x: f64| 3.0 * x * x - 1.0 - if x.abs() >= 2.0 { 1.0 } else { -1.0 })
            .fold(f64::INFINITY, f64::min);
        assert!(rep.pass);
        assert!((rep.worst_margin - oracle).abs() < 1e-5);
    }

    #[test]
    fn decomposition_matches_independent_diffusion() {
        let par = GranularParams {
            sigma_hat: 0.3,
            dim: 2,
            ..GranularParams::default()
        };
        let c = granular_coefficients(&par);
        let probe = grid_probe(2, -3.0, 3.0, 9);
        let rep = check_decomposition(&c, &probe).unwrap();
        assert!(rep.max_abs_diff.unwrap() < 1e-14);
        assert!(rep.psd);
        assert!(rep.sigma_hat_lipschitz <= 0.3 + 1e-12);
    }

    #[test]
    fn separable_paths_match_direct_sums() {
        let op = order_preserving_coefficients(&OrderParams {
            dim: 3,
            ..OrderParams::default()
        });
        let gr = granular_coefficients(&GranularParams {
            dim: 2,
            ..GranularParams::default()
        });
        for c in [op, gr] {
            let d = c.dim;
            let pts: Vec<f64> = (0..60).map(|i| ((i * 37 % 17) as f64 - 8.0) * 0.23).collect();
            let pts = &pts[..(60 / d) * d];
            let x: Vec<f64> = (0..d).map(|i| 0.3 * i as f64 - 0.2).collect();
            let fast = c.evaluate_drift(&x, pts).unwrap();
            let mut slow_c = c.clone();
            slow_c.interaction = match &c.interaction {
                InteractionKernel::PairwiseZ { z, .. } => InteractionKernel::PairwiseZ {
                    z: z.clone(),
                    separable: None,
                },
                InteractionKernel::GradientW { grad_w, .. } => InteractionKernel::GradientW {
                    grad_w: grad_w.clone(),
                    separable: None,
                },
                other => other.clone(),
            };
            let slow = slow_c.evaluate_drift(&x, pts).unwrap();
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()), "{a} {b}");
            }
        }
    }

    proptest! {
        #[test]
        fn decomposition_consistent(x in -20.0f64..20.0, y in -20.0f64..20.0, s in 0.0f64..2.0) {
            let c = granular_coefficients(&GranularParams { sigma_hat: s, dim: 2, ..GranularParams::default() });
            let mut a = [0.0; 4];
            let mut f = [0.0; 4];
            c.diffusion(&[x, y], &mut a);
            (c.diffusion_full.as_ref().unwrap())(&[x, y], &mut f);
            for k in 0..4 {
                prop_assert!((a[k] - f[k]).abs() <= 1e-14 * (1.0 + f[k].abs()));
            }
        }

        #[test]
        fn dirac_law_equals_kernel(x in -5.0f64..5.0, y in -5.0f64..5.0, s in 0.0f64..2.0) {
            let c = ou_coefficients(1, 1.0, 0.7, 0.0, s);
            let got = c.evaluate_drift(&[x], &[y]).unwrap()[0];
            let want = -0.7 * x - s * (x - y);
            prop_assert!((got - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }

        #[test]
        fn drift_permutation_invariant_and_additive(
            pts in proptest::collection::vec(-4.0f64..4.0, 2..40),
            x in -3.0f64..3.0,
            split in 1usize..39,
        ) {
            let c = order_preserving_coefficients(&OrderParams::default());
            let direct = CoefficientSet {
                interaction: match &c.interaction {
                    InteractionKernel::PairwiseZ { z, .. } => InteractionKernel::PairwiseZ { z: z.clone(), separable: None },
                    o => o.clone(),
                },
                ..c.clone()
            };
            let base = {
                let mut o = [0.0];
                (c.base_drift)(&[x], &mut o);
                o[0]
            };
            let a = direct.evaluate_drift(&[x], &pts).unwrap()[0];
            let mut rev = pts.clone();
            rev.reverse();
            let b = direct.evaluate_drift(&[x], &rev).unwrap()[0];
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            // Means compose: the interaction over a concatenation is the size-weighted mix.
            let k = split.min(pts.len() - 1);
            let (p1, p2) = pts.split_at(k);
            let i1 = direct.evaluate_drift(&[x], p1).unwrap()[0] - base;
            let i2 = direct.evaluate_drift(&[x], p2).unwrap()[0] - base;
            let mix = (k as f64 * i1 + (pts.len() - k) as f64 * i2) / pts.len() as f64;
            prop_assert!((a - base - mix).abs() <= 1e-10 * (1.0 + mix.abs()));
        }
    }
}

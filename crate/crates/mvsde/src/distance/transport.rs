//! Optimal transport between equal-weight empirical measures.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::psi::PsiFunction;
use crate::error::{Error, Result};
use crate::model::ScalarFn;

/// Largest instance handed to the dense assignment solver.
pub const MAX_ASSIGNMENT_N: usize = 4096;

pub type CoordFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Increasing component maps phi_i defining d_phi(x, y) = sum_i |phi_i(x_i) - phi_i(y_i)|.
#[derive(Clone)]
pub struct PhiMap {
    pub components: Vec<CoordFn>,
}

impl PhiMap {
    pub fn uniform(dim: usize, f: CoordFn) -> Self {
        PhiMap {
            components: vec![f; dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        PhiMap::uniform(dim, Arc::new(|r| r))
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn distance(&self, x: &[f64], y: &[f64]) -> f64 {
        self.components
            .iter()
            .zip(x.iter().zip(y))
            .map(|(f, (a, b))| (f(*a) - f(*b)).abs())
            .sum()
    }

    /// Checks strict increase of every component at the given sorted abscissae.
    pub fn check_monotone(&self, probe: &[f64]) -> Result<()> {
        for (i, f) in self.components.iter().enumerate() {
            for w in probe.windows(2) {
                if w[1] > w[0] && !(f(w[1]) > f(w[0])) {
                    return Err(Error::Invalid(format!(
                        "phi component {i} is not increasing between {} and {}",
                        w[0], w[1]
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone)]
pub enum CostSpec {
    /// psi(|x - y|).
    Psi(PsiFunction),
    /// psi(|x - y|)(1 + beta V(x) + beta V(y)).
    Weighted { psi: PsiFunction, v: ScalarFn, beta: f64 },
    /// sum_i |phi_i(x_i) - phi_i(y_i)|.
    Phi(PhiMap),
}

fn euclid(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

impl CostSpec {
    pub fn name(&self) -> &'static str {
        match self {
            CostSpec::Psi(_) => "psi",
            CostSpec::Weighted { .. } => "weighted",
            CostSpec::Phi(_) => "phi",
        }
    }

    pub fn pair(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            CostSpec::Psi(psi) => psi.eval(euclid(x, y)),
            CostSpec::Weighted { psi, v, beta } => psi.eval(euclid(x, y)) * (1.0 + beta * v(x) + beta * v(y)),
            CostSpec::Phi(phi) => phi.distance(x, y),
        }
    }

    /// Whether the 1D sorted matching is optimal for this cost.
    fn sorted_is_optimal(&self) -> bool {
        match self {
            CostSpec::Psi(psi) => psi.convex,
            CostSpec::Phi(_) => true,
            CostSpec::Weighted { .. } => false,
        }
    }

    /// Dense n*n cost matrix, row i for X_i. Weights are evaluated once per point.
    pub fn matrix(&self, x: &[f64], y: &[f64], dim: usize) -> Result<Vec<f64>> {
        let n = x.len() / dim;
        let mut m = vec![0.0; n * n];
        match self {
            CostSpec::Weighted { psi, v, beta } => {
                let vx: Vec<f64> = x.chunks_exact(dim).map(|p| v(p)).collect();
                let vy: Vec<f64> = y.chunks_exact(dim).map(|p| v(p)).collect();
                m.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
                    let xi = &x[i * dim..(i + 1) * dim];
                    for (j, c) in row.iter_mut().enumerate() {
                        let r = euclid(xi, &y[j * dim..(j + 1) * dim]);
                        *c = psi.eval(r) * (1.0 + beta * vx[i] + beta * vy[j]);
                    }
                });
            }
            _ => {
                m.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
                    let xi = &x[i * dim..(i + 1) * dim];
                    for (j, c) in row.iter_mut().enumerate() {
                        *c = self.pair(xi, &y[j * dim..(j + 1) * dim]);
                    }
                });
            }
        }
        if let Some(k) = m.iter().position(|c| !c.is_finite()) {
            return Err(Error::Numerical(format!(
                "cost overflow between X[{}] and Y[{}]",
                k / n,
                k % n
            )));
        }
        Ok(m)
    }
}

/// Minimum-cost perfect matching on a dense n*n matrix by shortest augmenting paths with
/// potentials (Hungarian method, O(n^3)). Returns the column assigned to each row.
pub fn solve_assignment(cost: &[f64], n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Empty("assignment of size 0".into()));
    }
    if cost.len() != n * n {
        return Err(Error::Invalid("cost matrix must be n*n".into()));
    }
    // 1-based arrays, column 0 is the virtual source.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|m| *m = inf);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            if j1 == 0 || !delta.is_finite() {
                return Err(Error::Numerical("assignment solver lost feasibility".into()));
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    Ok(assign)
}

fn check_inputs(x: &[f64], y: &[f64], dim: usize) -> Result<usize> {
    if dim == 0 || !x.len().is_multiple_of(dim) || !y.len().is_multiple_of(dim) {
        return Err(Error::Invalid("sample arrays must be n*d".into()));
    }
    if x.is_empty() || y.is_empty() {
        return Err(Error::Empty("empirical distance of an empty sample".into()));
    }
    if x.len() != y.len() {
        return Err(Error::Invalid(format!(
            "samples must have equal size ({} vs {})",
            x.len() / dim,
            y.len() / dim
        )));
    }
    Ok(x.len() / dim)
}

/// Pair sorted X with sorted Y; returns the Y index matched to each X index.
pub fn sorted_matching(x: &[f64], y: &[f64]) -> Vec<usize> {
    let mut ix: Vec<usize> = (0..x.len()).collect();
    let mut iy: Vec<usize> = (0..y.len()).collect();
    ix.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    iy.sort_by(|&a, &b| y[a].total_cmp(&y[b]).then(a.cmp(&b)));
    let mut assign = vec![0; x.len()];
    for (a, b) in ix.into_iter().zip(iy) {
        assign[a] = b;
    }
    assign
}

/// Mean pair cost of an assignment, summed in X-index order.
pub fn matching_cost(cost: &CostSpec, x: &[f64], y: &[f64], dim: usize, assign: &[usize]) -> f64 {
    let mut s = 0.0;
    for (i, &j) in assign.iter().enumerate() {
        s += cost.pair(&x[i * dim..(i + 1) * dim], &y[j * dim..(j + 1) * dim]);
    }
    s / assign.len() as f64
}

/// Optimal matching and its mean cost, choosing the sorted path in 1D when it is exact.
pub fn optimal_matching(cost: &CostSpec, x: &[f64], y: &[f64], dim: usize) -> Result<(Vec<usize>, f64)> {
    let n = check_inputs(x, y, dim)?;
    let assign = if dim == 1 && cost.sorted_is_optimal() {
        sorted_matching(x, y)
    } else {
        lp_matching(cost, x, y, dim, n)?
    };
    let c = matching_cost(cost, x, y, dim, &assign);
    if !c.is_finite() {
        return Err(Error::Numerical("transport cost overflow".into()));
    }
    Ok((assign, c))
}

/// Matching from the assignment solver regardless of dimension or cost shape.
pub fn lp_matching(cost: &CostSpec, x: &[f64], y: &[f64], dim: usize, n: usize) -> Result<Vec<usize>> {
    if n > MAX_ASSIGNMENT_N {
        return Err(Error::Invalid(format!(
            "n = {n} exceeds the exact solver cap {MAX_ASSIGNMENT_N}; use the entropic estimator"
        )));
    }
    let m = cost.matrix(x, y, dim)?;
    solve_assignment(&m, n)
}

/// Exact transport cost between equal-weight empirical measures (flat n*d arrays).
pub fn empirical_distance(cost: &CostSpec, x: &[f64], y: &[f64], dim: usize) -> Result<f64> {
    optimal_matching(cost, x, y, dim).map(|r| r.1)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RatioBracket {
    /// W / (sup psi' (1 + beta mean V(X) + beta mean V(Y))).
    pub lower: f64,
    /// Ratio at the numerator-optimal matching.
    pub upper: f64,
    /// Minimum ratio over matchings, by Dinkelbach iteration.
    pub exact: f64,
}

fn ratio_parts(
    psi: &PsiFunction,
    x: &[f64],
    y: &[f64],
    dim: usize,
    wx: &[f64],
    wy: &[f64],
    assign: &[usize],
) -> (f64, f64) {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &j) in assign.iter().enumerate() {
        let r = euclid(&x[i * dim..(i + 1) * dim], &y[j * dim..(j + 1) * dim]);
        let w = 1.0 + wx[i] + wy[j];
        num += psi.eval(r) * w;
        den += psi.deriv(r) * w;
    }
    (num, den)
}

/// Bracket for the ratio quasi-distance inf_pi int psi w d pi / int psi' w d pi, w = 1 + beta V + beta V.
pub fn empirical_ratio_distance(cost: &CostSpec, x: &[f64], y: &[f64], dim: usize) -> Result<RatioBracket> {
    let CostSpec::Weighted { psi, v, beta } = cost else {
        return Err(Error::Invalid("ratio distance needs a weighted cost".into()));
    };
    let n = check_inputs(x, y, dim)?;
    let wx: Vec<f64> = x.chunks_exact(dim).map(|p| beta * v(p)).collect();
    let wy: Vec<f64> = y.chunks_exact(dim).map(|p| beta * v(p)).collect();
    let num_m = cost.matrix(x, y, dim)?;
    let assign = solve_assignment(&num_m, n)?;
    let (num, den) = ratio_parts(psi, x, y, dim, &wx, &wy, &assign);
    if num == 0.0 {
        return Ok(RatioBracket {
            lower: 0.0,
            upper: 0.0,
            exact: 0.0,
        });
    }
    if !(den > 0.0) {
        return Err(Error::Degenerate(
            "every matched pair sits where psi' = 0; the ratio is undefined".into(),
        ));
    }
    let w = num / n as f64;
    let mean_w = 1.0 + wx.iter().sum::<f64>() / n as f64 + wy.iter().sum::<f64>() / n as f64;
    let lower = if psi.sup_deriv.is_finite() && psi.sup_deriv > 0.0 {
        w / (psi.sup_deriv * mean_w)
    } else {
        0.0
    };
    let upper = num / den;
    // Dinkelbach: the minimizer of sum (num_ij - lam den_ij) improves lam until it stalls.
    let mut lam = upper;
    let mut m = vec![0.0; n * n];
    for _ in 0..100 {
        m.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            let xi = &x[i * dim..(i + 1) * dim];
            for (j, c) in row.iter_mut().enumerate() {
                let r = euclid(xi, &y[j * dim..(j + 1) * dim]);
                let wt = 1.0 + wx[i] + wy[j];
                *c = (psi.eval(r) - lam * psi.deriv(r)) * wt;
            }
        });
        let a = solve_assignment(&m, n)?;
        let (nn, dd) = ratio_parts(psi, x, y, dim, &wx, &wy, &a);
        if !(dd > 0.0) {
            break;
        }
        let next = nn / dd;
        if !(next < lam * (1.0 - 1e-15)) {
            break;
        }
        lam = next;
    }
    Ok(RatioBracket {
        lower,
        upper,
        exact: lam,
    })
}

/// W_phi between equal-weight samples; sorted matching in 1D, assignment otherwise.
pub fn d_phi_distance(phi: &PhiMap, x: &[f64], y: &[f64]) -> Result<f64> {
    let dim = phi.dim();
    check_inputs(x, y, dim)?;
    for c in 0..dim {
        let mut coords: Vec<f64> = x
            .iter()
            .skip(c)
            .step_by(dim)
            .chain(y.iter().skip(c).step_by(dim))
            .copied()
            .collect();
        coords.sort_by(f64::total_cmp);
        coords.dedup();
        PhiMap {
            components: vec![phi.components[c].clone()],
        }
        .check_monotone(&coords)?;
    }
    empirical_distance(&CostSpec::Phi(phi.clone()), x, y, dim)
}

/// Entropic transport cost <P, C> with regularization `eps` (log-domain Sinkhorn).
/// Biased upward relative to the exact cost; intended for n beyond the exact cap.
pub fn sinkhorn_distance(cost: &CostSpec, x: &[f64], y: &[f64], dim: usize, eps: f64, iters: usize) -> Result<f64> {
    let n = check_inputs(x, y, dim)?;
    if !(eps > 0.0) {
        return Err(Error::Invalid("sinkhorn eps must be positive".into()));
    }
    let c = cost.matrix(x, y, dim)?;
    let log_w = -(n as f64).ln();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n];
    let lse = |vals: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = vals.collect();
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
    };
    for _ in 0..iters {
        for i in 0..n {
            f[i] = -eps * lse(&mut (0..n).map(|j| (g[j] - c[i * n + j]) / eps + log_w));
        }
        for j in 0..n {
            g[j] = -eps * lse(&mut (0..n).map(|i| (f[i] - c[i * n + j]) / eps + log_w));
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let p = ((f[i] + g[j] - c[i * n + j]) / eps + 2.0 * log_w).exp();
            total += p * c[i * n + j];
        }
    }
    Ok(total)
}

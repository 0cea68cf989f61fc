//! Distance-shaping functions: closed forms, the mixed eigenproblem and the explicit integral profile.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad::integrate;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PsiShape {
    Identity,
    Power(f64),
    Tabulated,
}

/// A distance profile psi with tabulated derivatives.
///
/// Tabulated shapes are evaluated by cubic Hermite interpolation on the stored
/// derivatives with Fritsch-Carlson slope limiting, so monotone data stays monotone.
/// Beyond the last node the profile is constant when truncated at `l` and extended
/// linearly otherwise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsiFunction {
    pub shape: PsiShape,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub deriv1: Vec<f64>,
    pub deriv2: Vec<f64>,
    pub l: Option<f64>,
    pub concave: bool,
    pub convex: bool,
    pub c_psi: f64,
    pub sup_deriv: f64,
}

impl PsiFunction {
    pub fn identity() -> Self {
        let grid: Vec<f64> = (0..=256).map(|i| i as f64 / 16.0).collect();
        PsiFunction {
            shape: PsiShape::Identity,
            values: grid.clone(),
            deriv1: vec![1.0; grid.len()],
            deriv2: vec![0.0; grid.len()],
            grid,
            l: None,
            concave: true,
            convex: true,
            c_psi: 1.0,
            sup_deriv: 1.0,
        }
    }

    /// psi(r) = r^p.
    pub fn power(p: f64) -> Result<Self> {
        if !(p > 0.0) || !p.is_finite() {
            return Err(Error::Invalid(format!("power exponent {p} must be positive")));
        }
        let grid: Vec<f64> = (0..=256).map(|i| i as f64 / 16.0).collect();
        let values = grid.iter().map(|r| r.powf(p)).collect();
        let deriv1 = grid.iter().map(|r| p * r.powf(p - 1.0)).collect();
        let deriv2 = grid.iter().map(|r| p * (p - 1.0) * r.powf(p - 2.0)).collect();
        Ok(PsiFunction {
            shape: PsiShape::Power(p),
            grid,
            values,
            deriv1,
            deriv2,
            l: None,
            concave: p <= 1.0,
            convex: p >= 1.0,
            c_psi: p,
            sup_deriv: if p == 1.0 { 1.0 } else { f64::INFINITY },
        })
    }

    /// Build from tabulated nodes; checks the shape invariants and fills the derived constants.
    pub fn tabulated(
        grid: Vec<f64>,
        values: Vec<f64>,
        deriv1: Vec<f64>,
        deriv2: Vec<f64>,
        l: Option<f64>,
    ) -> Result<Self> {
        let n = grid.len();
        if n < 2 || values.len() != n || deriv1.len() != n || deriv2.len() != n {
            return Err(Error::Invalid("psi tables must have equal length >= 2".into()));
        }
        if grid[0] != 0.0 || values[0] != 0.0 {
            return Err(Error::Invalid("psi must start at r = 0 with psi(0) = 0".into()));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Invalid("psi grid must be strictly increasing".into()));
        }
        if values.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Invalid("psi must be strictly increasing on its grid".into()));
        }
        let scale = deriv2.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
        let concave = deriv2.iter().all(|&v| v <= 1e-12 * scale);
        let convex = deriv2.iter().all(|&v| v >= -1e-12 * scale);
        let mut psi = PsiFunction {
            shape: PsiShape::Tabulated,
            grid,
            values,
            deriv1,
            deriv2,
            l,
            concave,
            convex,
            c_psi: 0.0,
            sup_deriv: 0.0,
        };
        psi.c_psi = c_psi(&psi);
        psi.sup_deriv = psi.deriv1.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
        Ok(psi)
    }

    fn locate(&self, r: f64) -> usize {
        match self.grid.binary_search_by(|g| g.total_cmp(&r)) {
            Ok(i) => i.min(self.grid.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.grid.len() - 2),
        }
    }

    fn hermite(&self, r: f64) -> (f64, f64) {
        let i = self.locate(r);
        let (x0, x1) = (self.grid[i], self.grid[i + 1]);
        let h = x1 - x0;
        let (y0, y1) = (self.values[i], self.values[i + 1]);
        let delta = (y1 - y0) / h;
        let (mut m0, mut m1) = (self.deriv1[i], self.deriv1[i + 1]);
        if delta > 0.0 {
            let (a, b) = (m0 / delta, m1 / delta);
            let s = a * a + b * b;
            if s > 9.0 {
                let tau = 3.0 / s.sqrt();
                m0 *= tau;
                m1 *= tau;
            }
        }
        let t = (r - x0) / h;
        let (t2, t3) = (t * t, t * t * t);
        let v = (2.0 * t3 - 3.0 * t2 + 1.0) * y0
            + (t3 - 2.0 * t2 + t) * h * m0
            + (-2.0 * t3 + 3.0 * t2) * y1
            + (t3 - t2) * h * m1;
        let d = ((6.0 * t2 - 6.0 * t) * y0
            + (3.0 * t2 - 4.0 * t + 1.0) * h * m0
            + (-6.0 * t2 + 6.0 * t) * y1
            + (3.0 * t2 - 2.0 * t) * h * m1)
            / h;
        (v, d)
    }

    /// psi(r) for r >= 0.
    pub fn eval(&self, r: f64) -> f64 {
        let r = r.abs();
        match self.shape {
            PsiShape::Identity => r,
            PsiShape::Power(p) => r.powf(p),
            PsiShape::Tabulated => {
                let last = *self.grid.last().unwrap();
                if r >= last {
                    let v = *self.values.last().unwrap();
                    return match self.l {
                        Some(_) => v,
                        None => v + self.deriv1.last().unwrap() * (r - last),
                    };
                }
                self.hermite(r).0
            }
        }
    }

    /// psi'(r) for r >= 0.
    pub fn deriv(&self, r: f64) -> f64 {
        let r = r.abs();
        match self.shape {
            PsiShape::Identity => 1.0,
            PsiShape::Power(p) => p * r.powf(p - 1.0),
            PsiShape::Tabulated => {
                let last = *self.grid.last().unwrap();
                if r >= last {
                    return match self.l {
                        Some(_) => 0.0,
                        None => *self.deriv1.last().unwrap(),
                    };
                }
                if let Ok(i) = self.grid.binary_search_by(|g| g.total_cmp(&r)) {
                    return self.deriv1[i];
                }
                self.hermite(r).1
            }
        }
    }

    /// psi''(r) for 0 < r <= l, linear between tabulated nodes.
    pub fn second_deriv(&self, r: f64) -> f64 {
        let r = r.abs();
        match self.shape {
            PsiShape::Identity => 0.0,
            PsiShape::Power(p) => p * (p - 1.0) * r.powf(p - 2.0),
            PsiShape::Tabulated => {
                let g = &self.grid;
                if r >= *g.last().unwrap() {
                    return *self.deriv2.last().unwrap();
                }
                let i = g.partition_point(|x| *x <= r).clamp(1, g.len() - 1) - 1;
                let t = (r - g[i]) / (g[i + 1] - g[i]);
                self.deriv2[i] * (1.0 - t) + self.deriv2[i + 1] * t
            }
        }
    }

    /// CSV with header "r,psi,dpsi,ddpsi", 17 significant digits.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "r,psi,dpsi,ddpsi")?;
        for i in 0..self.grid.len() {
            writeln!(
                f,
                "{:.16e},{:.16e},{:.16e},{:.16e}",
                self.grid[i], self.values[i], self.deriv1[i], self.deriv2[i]
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

/// sup over r > 0 of r psi'(r) / psi(r); the r -> 0 limit is psi'(0)/psi'(0) = 1.
pub fn c_psi(psi: &PsiFunction) -> f64 {
    match psi.shape {
        PsiShape::Identity => 1.0,
        PsiShape::Power(p) => p,
        PsiShape::Tabulated => {
            let mut c: f64 = if psi.deriv1[0] > 0.0 { 1.0 } else { 0.0 };
            for i in 1..psi.grid.len() {
                c = c.max(psi.grid[i] * psi.deriv1[i] / psi.values[i]);
            }
            c
        }
    }
}

fn eigen_rhs(alpha: f64, k: f64, q: f64, y: [f64; 2]) -> [f64; 2] {
    [y[1], -(k * y[1] + q * y[0]) / (2.0 * alpha)]
}

/// RK4 from psi(0) = 0, psi'(0) = 1. Returns nodes when `keep`, and whether psi' reached 0.
fn shoot(alpha: f64, k: f64, q: f64, l: f64, steps: usize, keep: bool) -> (bool, Vec<[f64; 2]>) {
    let h = l / steps as f64;
    let mut y = [0.0, 1.0];
    let mut out = Vec::new();
    if keep {
        out.reserve(steps + 1);
        out.push(y);
    }
    for _ in 0..steps {
        let k1 = eigen_rhs(alpha, k, q, y);
        let k2 = eigen_rhs(alpha, k, q, [y[0] + 0.5 * h * k1[0], y[1] + 0.5 * h * k1[1]]);
        let k3 = eigen_rhs(alpha, k, q, [y[0] + 0.5 * h * k2[0], y[1] + 0.5 * h * k2[1]]);
        let k4 = eigen_rhs(alpha, k, q, [y[0] + h * k3[0], y[1] + h * k3[1]]);
        for j in 0..2 {
            y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        if keep {
            out.push(y);
        }
        if y[1] <= 0.0 && !keep {
            return (true, out);
        }
    }
    let hit = if keep { out.iter().any(|v| v[1] <= 0.0) } else { false };
    (hit, out)
}

/// First eigenpair of 2 alpha psi'' + K psi' = -q psi on [0, l], psi(0) = 0, psi'(l) = 0,
/// normalized by psi'(0) = 1, by shooting and bisection on whether psi' vanishes in [0, l].
pub fn build_psi_eigen(alpha: f64, k: f64, l: f64) -> Result<(PsiFunction, f64)> {
    if !(alpha > 0.0) || !(l > 0.0) || !k.is_finite() {
        return Err(Error::Invalid(format!(
            "need alpha > 0, l > 0, finite K (got {alpha}, {l}, {k})"
        )));
    }
    let stiff = (k.abs() * l / (2.0 * alpha)).ceil().max(1.0);
    let steps = ((2000.0 * stiff) as usize).min(400_000);
    let hits = |q: f64| shoot(alpha, k, q, l, steps, false).0;
    if hits(0.0) {
        return Err(Error::Solver("psi' vanishes already at q = 0".into()));
    }
    let mut lo = 0.0;
    let mut hi = alpha * (std::f64::consts::PI / l).powi(2);
    let mut tries = 0;
    while !hits(hi) {
        lo = hi;
        hi *= 2.0;
        tries += 1;
        if tries > 200 || !hi.is_finite() {
            return Err(Error::Solver(format!(
                "no sign change of psi'(l) up to q = {hi:e} (alpha {alpha}, K {k}, l {l})"
            )));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if hits(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let q = lo;
    let (_, ys) = shoot(alpha, k, q, l, steps, true);
    let h = l / steps as f64;
    let grid: Vec<f64> = (0..=steps).map(|i| if i == steps { l } else { i as f64 * h }).collect();
    let values: Vec<f64> = ys.iter().map(|y| y[0]).collect();
    let mut deriv1: Vec<f64> = ys.iter().map(|y| y[1]).collect();
    // psi'(l) is zero up to the bisection width; pin it to the boundary condition.
    *deriv1.last_mut().unwrap() = 0.0;
    let deriv2: Vec<f64> = values
        .iter()
        .zip(&deriv1)
        .map(|(v, d)| -(k * d + q * v) / (2.0 * alpha))
        .collect();
    let psi = PsiFunction::tabulated(grid, values, deriv1, deriv2, Some(l))?;
    Ok((psi, q))
}

/// Constants of the piecewise profile gamma(r) = (theta1 + theta2) min(kappa / r, r) - (theta2 - theta0) r.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaSpec {
    pub theta0: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub kappa_puncture: f64,
    pub lambda_iso: f64,
}

impl GammaSpec {
    pub fn validate(&self) -> Result<()> {
        let all = [self.theta0, self.theta1, self.theta2, self.kappa_puncture];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || !(self.lambda_iso > 0.0) {
            return Err(Error::Invalid(format!("invalid gamma constants {self:?}")));
        }
        if !(self.theta2 > self.theta0) {
            return Err(Error::Integrability(format!(
                "theta2 = {} must exceed theta0 = {} for the profile integral to converge",
                self.theta2, self.theta0
            )));
        }
        Ok(())
    }

    fn a(&self) -> f64 {
        self.theta1 + self.theta2
    }

    pub fn delta(&self) -> f64 {
        self.theta2 - self.theta0
    }

    pub fn r0(&self) -> f64 {
        (self.kappa_puncture * self.a() / self.delta()).sqrt()
    }

    pub fn gamma(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        self.a() * (self.kappa_puncture / r).min(r) - self.delta() * r
    }

    /// Integral of gamma over [0, t] in closed form.
    pub fn gamma_integral(&self, t: f64) -> f64 {
        let (a, k, d) = (self.a(), self.kappa_puncture, self.delta());
        let sk = k.sqrt();
        if t <= sk || k == 0.0 {
            (a * if k == 0.0 { 0.0 } else { 1.0 } - d) * t * t / 2.0
        } else {
            a * (k / 2.0 + k * (t / sk).ln()) - d * t * t / 2.0
        }
    }

    /// Width of the Gaussian tail of the integrand.
    fn tail_width(&self) -> f64 {
        (2.0 * self.lambda_iso / self.delta()).sqrt()
    }

    /// psi'(r) = int_r^inf t exp((Gamma(t) - Gamma(r)) / 2 lambda) dt with the tail truncated
    /// where the integrand falls below 1e-14 of its running peak.
    pub fn dpsi(&self, r: f64) -> Result<f64> {
        self.validate()?;
        let two_l = 2.0 * self.lambda_iso;
        let gr = self.gamma_integral(r);
        let f = |t: f64| t * ((self.gamma_integral(t) - gr) / two_l).exp();
        let w = self.tail_width();
        let start = r.max(0.0);
        let floor_t = (10.0 * self.r0()).max(start);
        let step = 0.25 * w;
        let mut peak = f(start).max(f(floor_t));
        let mut t = start;
        let mut iters = 0usize;
        loop {
            t += step;
            let v = f(t);
            if !v.is_finite() {
                return Err(Error::Integrability(format!("integrand overflow at t = {t}")));
            }
            peak = peak.max(v);
            if t >= floor_t && v < 1e-14 * peak && self.gamma(t) < 0.0 {
                break;
            }
            iters += 1;
            if iters > 1_000_000 {
                return Err(Error::Integrability(format!(
                    "integrand not decaying by t = {t}; check theta2 > theta0"
                )));
            }
        }
        let t_star = t;
        // Panels of about one tail width keep the adaptive rule well resolved. The kink of
        // gamma at sqrt(kappa) is a panel edge: the Kronrod error estimate assumes smoothness.
        let panels = (((t_star - start) / w).ceil() as usize).max(1);
        let hp = (t_star - start) / panels as f64;
        let mut edges: Vec<f64> = (0..panels).map(|i| start + i as f64 * hp).collect();
        edges.push(t_star);
        let kink = self.kappa_puncture.sqrt();
        if kink > start && kink < t_star {
            let at = edges.partition_point(|e| *e < kink);
            if edges[at] != kink {
                edges.insert(at, kink);
            }
        }
        let mut total = 0.0;
        for ab in edges.windows(2) {
            total += integrate(&f, ab[0], ab[1], 1e-300, 1e-13, 400).value;
        }
        Ok(total)
    }

    /// The normalizing integral I = psi'(0).
    pub fn integral(&self) -> Result<f64> {
        self.dpsi(0.0)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ExplicitPsiInfo {
    pub integral: f64,
    pub r0: f64,
    pub r_max: f64,
}

/// Tabulated explicit profile on a grid graded towards 0; default 2048 nodes.
pub fn build_psi_explicit(g: &GammaSpec) -> Result<PsiFunction> {
    build_psi_explicit_with(g, 2048).map(|p| p.0)
}

pub fn build_psi_explicit_with(g: &GammaSpec, nodes: usize) -> Result<(PsiFunction, ExplicitPsiInfo)> {
    g.validate()?;
    let nodes = nodes.max(16);
    let r0 = g.r0();
    let r_max = (10.0 * r0).max(12.0 * g.tail_width()).max(1.0);
    let c: f64 = 4.0;
    let grid: Vec<f64> = (0..nodes)
        .map(|i| r_max * ((c * i as f64 / (nodes - 1) as f64).exp() - 1.0) / (c.exp() - 1.0))
        .collect();
    let deriv1 = grid.iter().map(|&r| g.dpsi(r)).collect::<Result<Vec<f64>>>()?;
    // psi(r_{i+1}) - psi(r_i) by a 15-point Kronrod panel over the nested psi'.
    let mut values = vec![0.0; nodes];
    for i in 1..nodes {
        let (inc, _) = crate::quad::gk15(&|s: f64| g.dpsi(s).unwrap_or(f64::NAN), grid[i - 1], grid[i]);
        if !inc.is_finite() {
            return Err(Error::Integrability(format!(
                "psi increment not finite near r = {}",
                grid[i]
            )));
        }
        values[i] = values[i - 1] + inc;
    }
    let two_l = 2.0 * g.lambda_iso;
    let deriv2: Vec<f64> = grid
        .iter()
        .zip(&deriv1)
        .map(|(&r, &d)| -g.gamma(r) * d / two_l - r)
        .collect();
    let integral = deriv1[0];
    let mut psi = PsiFunction::tabulated(grid, values, deriv1, deriv2, None)?;
    // Concavity forces sup |psi'| = psi'(0).
    if psi.concave {
        psi.sup_deriv = integral;
    }
    Ok((psi, ExplicitPsiInfo { integral, r0, r_max }))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct G2Constants {
    pub q: f64,
    pub theta: f64,
    pub k: f64,
    pub integral: f64,
    /// Largest measure-Lipschitz constant for which the rate stays positive.
    pub nc_bound: f64,
    pub nc_pass: bool,
}

/// q = 2 lambda / I, theta = varphi (theta2 - theta0) I / (2 lambda), k = q - theta.
pub fn rate_constants_g2(g: &GammaSpec, varphi: f64) -> Result<G2Constants> {
    if !(varphi >= 0.0) {
        return Err(Error::Invalid(format!("varphi = {varphi} must be nonnegative")));
    }
    let i = g.integral()?;
    let two_l = 2.0 * g.lambda_iso;
    let q = two_l / i;
    let theta = varphi * g.delta() * i / two_l;
    let nc_bound = two_l * two_l / (g.delta() * i * i);
    Ok(G2Constants {
        q,
        theta,
        k: q - theta,
        integral: i,
        nc_bound,
        nc_pass: varphi < nc_bound,
    })
}

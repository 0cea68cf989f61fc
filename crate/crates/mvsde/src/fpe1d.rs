//! One-dimensional finite-volume solver for the nonlinear Fokker-Planck equation
//!
//! ```text
//! d/dt rho = (1/2)(a rho)'' + (rho (G' + (W * rho)'))'
//! ```
//!
//! written in flux form J = -(1/2)(a rho)' + rho v with v = -(G' + d/dx W * rho).
//! Fluxes live on cell faces, walls carry zero flux, so mass changes only by rounding.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Fn1 = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type Fn2 = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Cells below this value abort the solve.
pub const NEGATIVE_TOL: f64 = -1e-12;
/// Wall cells holding more than this mass flag domain truncation.
pub const WALL_MASS_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FpScheme {
    #[default]
    Explicit,
    /// Implicit diffusion, explicit advection.
    Semiimplicit,
}

#[derive(Debug, Clone)]
pub struct Grid1D {
    pub x_lo: f64,
    pub x_hi: f64,
    pub dx: f64,
    pub centers: Vec<f64>,
    /// Cell averages.
    pub rho: Vec<f64>,
    pub time: f64,
}

impl Grid1D {
    pub fn new(m: usize, x_lo: f64, x_hi: f64) -> Result<Self> {
        if m < 3 || !(x_hi > x_lo) {
            return Err(Error::Config(format!(
                "grid needs m >= 3 and x_lo < x_hi, got m = {m}, [{x_lo}, {x_hi}]"
            )));
        }
        let dx = (x_hi - x_lo) / m as f64;
        let centers = (0..m).map(|i| x_lo + (i as f64 + 0.5) * dx).collect();
        Ok(Grid1D {
            x_lo,
            x_hi,
            dx,
            centers,
            rho: vec![1.0 / (x_hi - x_lo); m],
            time: 0.0,
        })
    }

    /// Cell averages of the law with distribution function `cdf`, renormalized to unit mass.
    pub fn from_cdf(m: usize, x_lo: f64, x_hi: f64, cdf: impl Fn(f64) -> f64) -> Result<Self> {
        let mut g = Grid1D::new(m, x_lo, x_hi)?;
        let mut prev = cdf(x_lo);
        for i in 0..m {
            let next = cdf(g.face(i + 1));
            g.rho[i] = (next - prev).max(0.0);
            prev = next;
        }
        let total: f64 = g.rho.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Config("initial law has no mass on the grid".into()));
        }
        let dx = g.dx;
        g.rho.iter_mut().for_each(|r| *r /= total * dx);
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    /// Position of face k, k = 0..=M.
    pub fn face(&self, k: usize) -> f64 {
        self.x_lo + k as f64 * self.dx
    }

    pub fn mass(&self) -> f64 {
        neumaier(self.rho.iter().map(|r| r * self.dx))
    }

    pub fn min(&self) -> f64 {
        self.rho.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        neumaier(self.centers.iter().zip(&self.rho).map(|(x, r)| x * r * self.dx)) / self.mass()
    }

    /// Variance of the piecewise-constant density (includes the dx^2/12 cell term).
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let s = neumaier(
            self.centers
                .iter()
                .zip(&self.rho)
                .map(|(x, r)| (x - m) * (x - m) * r * self.dx),
        );
        s / self.mass() + self.dx * self.dx / 12.0
    }

    /// Mass in the outermost cells on each side.
    pub fn wall_mass(&self) -> f64 {
        let k = (self.len() / 64).max(1);
        let m = self.len();
        (self.rho[..k].iter().sum::<f64>() + self.rho[m - k..].iter().sum::<f64>()) * self.dx
    }

    /// Piecewise-linear distribution function of the grid measure.
    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.x_lo {
            return 0.0;
        }
        if x >= self.x_hi {
            return 1.0;
        }
        let pos = (x - self.x_lo) / self.dx;
        let i = (pos.floor() as usize).min(self.len() - 1);
        let before: f64 = self.rho[..i].iter().sum::<f64>() * self.dx;
        before + self.rho[i] * (x - self.face(i))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,rho\n");
        for (x, r) in self.centers.iter().zip(&self.rho) {
            s.push_str(&format!("{x:.16e},{r:.16e}\n"));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

fn neumaier(it: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for v in it {
        let t = s + v;
        c += if s.abs() >= v.abs() { (s - t) + v } else { (v - t) + s };
        s = t;
    }
    s + c
}

/// Interaction kernel W(x, y).
#[derive(Clone)]
pub enum FpKernel {
    Zero,
    /// s |x - y|^2 / 2, evaluated through the first two moments.
    Quadratic {
        s: f64,
    },
    /// W(x, y) = w(x - y); convolutions go through the FFT.
    Translation {
        w: Fn1,
        dw: Fn1,
    },
    /// Arbitrary W with its x-derivative; direct sums.
    General {
        w: Fn2,
        dw_x: Fn2,
    },
}

impl FpKernel {
    fn value(&self, x: f64, y: f64) -> f64 {
        match self {
            FpKernel::Zero => 0.0,
            FpKernel::Quadratic { s } => 0.5 * s * (x - y) * (x - y),
            FpKernel::Translation { w, .. } => w(x - y),
            FpKernel::General { w, .. } => w(x, y),
        }
    }

    fn dx(&self, x: f64, y: f64) -> f64 {
        match self {
            FpKernel::Zero => 0.0,
            FpKernel::Quadratic { s } => s * (x - y),
            FpKernel::Translation { dw, .. } => dw(x - y),
            FpKernel::General { dw_x, .. } => dw_x(x, y),
        }
    }
}

#[derive(Clone)]
pub struct FpConfig {
    /// Scalar diffusion a(x).
    pub a: Fn1,
    /// G'(x).
    pub grad_g: Fn1,
    pub kernel: FpKernel,
    pub dt: f64,
    pub t: f64,
    pub scheme: FpScheme,
}

/// (W * rho)(x_i) = sum_j W(x_i, x_j) rho_j dx, by direct summation.
pub fn convolve_w_direct(grid: &Grid1D, kernel: &FpKernel) -> Vec<f64> {
    grid.centers
        .iter()
        .map(|&x| {
            grid.centers
                .iter()
                .zip(&grid.rho)
                .map(|(&y, r)| kernel.value(x, y) * r)
                .sum::<f64>()
                * grid.dx
        })
        .collect()
}

/// (W * rho) at the cell centers, using the moment or FFT path when the kernel allows.
pub fn convolve_w(grid: &Grid1D, kernel: &FpKernel) -> Vec<f64> {
    let m = grid.len();
    match kernel {
        FpKernel::Zero => vec![0.0; m],
        FpKernel::Quadratic { s } => {
            let (m0, m1, m2) = moments(grid);
            grid.centers
                .iter()
                .map(|x| 0.5 * s * (x * x * m0 - 2.0 * x * m1 + m2))
                .collect()
        }
        FpKernel::Translation { w, .. } => {
            // Offsets x_i - x_j = (i - j) dx, i - j in [-(m-1), m-1].
            fft_convolve(&grid.rho, |k| w(k as f64 * grid.dx), m, 0)
                .into_iter()
                .map(|v| v * grid.dx)
                .collect()
        }
        FpKernel::General { .. } => convolve_w_direct(grid, kernel),
    }
}

/// d/dx (W * rho) at the M - 1 interior faces.
pub fn convolve_grad_faces(grid: &Grid1D, kernel: &FpKernel) -> Vec<f64> {
    let m = grid.len();
    let faces: Vec<f64> = (1..m).map(|k| grid.face(k)).collect();
    match kernel {
        FpKernel::Zero => vec![0.0; m - 1],
        FpKernel::Quadratic { s } => {
            let (m0, m1, _) = moments(grid);
            faces.iter().map(|x| s * (x * m0 - m1)).collect()
        }
        FpKernel::Translation { dw, .. } => {
            // Face k (between cells k-1 and k) minus center j is (k - j - 1/2) dx.
            let full = fft_convolve(&grid.rho, |k| dw((k as f64 - 0.5) * grid.dx), m, 1);
            full.into_iter().take(m - 1).map(|v| v * grid.dx).collect()
        }
        FpKernel::General { .. } => faces
            .iter()
            .map(|&x| {
                grid.centers
                    .iter()
                    .zip(&grid.rho)
                    .map(|(&y, r)| kernel.dx(x, y) * r)
                    .sum::<f64>()
                    * grid.dx
            })
            .collect(),
    }
}

/// Direct face gradient, for checking the fast paths.
pub fn convolve_grad_faces_direct(grid: &Grid1D, kernel: &FpKernel) -> Vec<f64> {
    (1..grid.len())
        .map(|k| {
            let x = grid.face(k);
            grid.centers
                .iter()
                .zip(&grid.rho)
                .map(|(&y, r)| kernel.dx(x, y) * r)
                .sum::<f64>()
                * grid.dx
        })
        .collect()
}

fn moments(grid: &Grid1D) -> (f64, f64, f64) {
    let dx = grid.dx;
    let m0 = neumaier(grid.rho.iter().map(|r| r * dx));
    let m1 = neumaier(grid.centers.iter().zip(&grid.rho).map(|(x, r)| x * r * dx));
    let m2 = neumaier(grid.centers.iter().zip(&grid.rho).map(|(x, r)| x * x * r * dx));
    (m0, m1, m2)
}

/// out_i = sum_j kern(i + shift - j) rho_j for i in 0..m, via a zero-padded FFT.
fn fft_convolve(rho: &[f64], kern: impl Fn(i64) -> f64, m: usize, shift: i64) -> Vec<f64> {
    let len = (3 * m).next_power_of_two();
    let mut a: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); len];
    for (j, r) in rho.iter().enumerate() {
        a[j] = Complex::new(*r, 0.0);
    }
    // Kernel index o = i - j + shift ranges over [shift - (m-1), shift + m - 1];
    // store o at position (o + m - 1) so everything is nonnegative.
    let mut b: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); len];
    for p in 0..(2 * m - 1) {
        let o = p as i64 - (m as i64 - 1) + shift;
        b[p] = Complex::new(kern(o), 0.0);
    }
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= *y;
    }
    inv.process(&mut a);
    let scale = 1.0 / len as f64;
    (0..m).map(|i| a[i + m - 1].re * scale).collect()
}

fn minmod(a: f64, b: f64) -> f64 {
    if a * b <= 0.0 {
        0.0
    } else if a.abs() < b.abs() {
        a
    } else {
        b
    }
}

/// Face velocities v = -(G' + (W * rho)') at the interior faces.
pub fn face_velocity(grid: &Grid1D, cfg: &FpConfig) -> Vec<f64> {
    let conv = convolve_grad_faces(grid, &cfg.kernel);
    (1..grid.len())
        .map(|k| -((cfg.grad_g)(grid.face(k)) + conv[k - 1]))
        .collect()
}

/// Largest dt satisfying the positivity bound of the chosen scheme at the current state.
pub fn stable_dt(grid: &Grid1D, cfg: &FpConfig) -> f64 {
    let v = face_velocity(grid, cfg);
    let vmax = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let amax = grid.centers.iter().fold(0.0f64, |m, &x| m.max((cfg.a)(x)));
    let adv = 2.0 * vmax / grid.dx;
    let rate = match cfg.scheme {
        FpScheme::Explicit => amax / (grid.dx * grid.dx) + adv,
        FpScheme::Semiimplicit => adv,
    };
    if rate > 0.0 {
        1.0 / rate
    } else {
        f64::INFINITY
    }
}

/// One conservative step. The stability bound is checked against the current state first.
pub fn step_fp(grid: &mut Grid1D, cfg: &FpConfig) -> Result<()> {
    let m = grid.len();
    let dx = grid.dx;
    let dt = cfg.dt;
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt = {dt} must be positive")));
    }
    let v = face_velocity(grid, cfg);
    let bound = stable_dt(grid, cfg);
    if dt > bound * (1.0 + 1e-12) {
        return Err(Error::Config(format!(
            "dt = {dt} exceeds the stability bound {bound:.6e}"
        )));
    }
    let rho = &grid.rho;
    let av: Vec<f64> = grid.centers.iter().map(|&x| (cfg.a)(x)).collect();
    let slope = |i: usize| -> f64 {
        if i == 0 || i + 1 == m {
            0.0
        } else {
            minmod(rho[i] - rho[i - 1], rho[i + 1] - rho[i])
        }
    };
    // flux[k] lives on face k, k = 0..=m; walls stay zero.
    let mut flux = vec![0.0; m + 1];
    for k in 1..m {
        let vk = v[k - 1];
        let left = rho[k - 1] + 0.5 * slope(k - 1);
        let right = rho[k] - 0.5 * slope(k);
        flux[k] = vk.max(0.0) * left + vk.min(0.0) * right;
        if cfg.scheme == FpScheme::Explicit {
            flux[k] -= 0.5 * (av[k] * rho[k] - av[k - 1] * rho[k - 1]) / dx;
        }
    }
    let c = dt / dx;
    let mut next: Vec<f64> = (0..m).map(|i| rho[i] - c * (flux[i + 1] - flux[i])).collect();
    if cfg.scheme == FpScheme::Semiimplicit {
        // Re-express the implicit solve as face fluxes so the update telescopes.
        let u = implicit_diffusion(&next, &av, dt, dx);
        let mut dflux = vec![0.0; m + 1];
        for k in 1..m {
            dflux[k] = -0.5 * (av[k] * u[k] - av[k - 1] * u[k - 1]) / dx;
        }
        for i in 0..m {
            next[i] -= c * (dflux[i + 1] - dflux[i]);
        }
    }
    grid.rho = next;
    grid.time += dt;
    let (imin, min) = grid
        .rho
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, r)| if *r < acc.1 { (i, *r) } else { acc });
    if min < NEGATIVE_TOL {
        return Err(Error::Scheme(format!(
            "density {min:.3e} at cell {imin} (x = {:.4}) after t = {:.6}",
            grid.centers[imin], grid.time
        )));
    }
    Ok(())
}

/// Solve (I - dt D) u = rhs with D u = (1/2)(a u)'' under zero-flux walls (Thomas algorithm).
/// Columns of I - dt D sum to one, so the solve conserves mass.
fn implicit_diffusion(rhs: &[f64], a: &[f64], dt: f64, dx: f64) -> Vec<f64> {
    let m = rhs.len();
    let k = 0.5 * dt / (dx * dx);
    let mut lower = vec![0.0; m];
    let mut diag = vec![0.0; m];
    let mut upper = vec![0.0; m];
    for i in 0..m {
        let nb = (i > 0) as u8 as f64 + (i + 1 < m) as u8 as f64;
        diag[i] = 1.0 + k * nb * a[i];
        if i > 0 {
            lower[i] = -k * a[i - 1];
        }
        if i + 1 < m {
            upper[i] = -k * a[i + 1];
        }
    }
    let mut cp = vec![0.0; m];
    let mut dp = vec![0.0; m];
    cp[0] = upper[0] / diag[0];
    dp[0] = rhs[0] / diag[0];
    for i in 1..m {
        let den = diag[i] - lower[i] * cp[i - 1];
        cp[i] = upper[i] / den;
        dp[i] = (rhs[i] - lower[i] * dp[i - 1]) / den;
    }
    let mut u = vec![0.0; m];
    u[m - 1] = dp[m - 1];
    for i in (0..m - 1).rev() {
        u[i] = dp[i] - cp[i] * u[i + 1];
    }
    u
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FpReport {
    pub steps: u64,
    pub dt: f64,
    pub final_time: f64,
    pub mass_error: f64,
    pub min_rho: f64,
    pub max_wall_mass: f64,
    pub truncated: bool,
}

/// Integrate to `cfg.t`; the last step is shortened to land on the horizon.
/// `on_step` sees the grid after every step.
pub fn solve(
    grid: &mut Grid1D,
    cfg: &FpConfig,
    mut on_step: impl FnMut(u64, &Grid1D) -> Result<()>,
) -> Result<FpReport> {
    let mass0 = grid.mass();
    let mut report = FpReport {
        steps: 0,
        dt: cfg.dt,
        final_time: grid.time,
        mass_error: 0.0,
        min_rho: grid.min(),
        max_wall_mass: grid.wall_mass(),
        truncated: false,
    };
    let n = (cfg.t / cfg.dt).ceil() as u64;
    let mut local = cfg.clone();
    for k in 0..n {
        local.dt = (cfg.t - k as f64 * cfg.dt).min(cfg.dt);
        if local.dt <= 0.0 {
            break;
        }
        step_fp(grid, &local)?;
        report.steps += 1;
        report.min_rho = report.min_rho.min(grid.min());
        report.max_wall_mass = report.max_wall_mass.max(grid.wall_mass());
        report.mass_error = report.mass_error.max((grid.mass() - mass0).abs());
        on_step(report.steps, grid)?;
    }
    report.final_time = grid.time;
    report.truncated = report.max_wall_mass > WALL_MASS_TOL;
    Ok(report)
}

/// Exact W1 between the empirical law of `samples` and the grid measure, as the integral of
/// |F_particle - F_grid| with F_grid piecewise linear.
pub fn compare_particle_pde(samples: &[f64], grid: &Grid1D) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("no particle samples".into()));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::Invalid("non-finite particle sample".into()));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let m = grid.len();
    let mass = grid.mass();
    // Grid CDF at every face.
    let mut fg = Vec::with_capacity(m + 1);
    let mut acc = 0.0;
    fg.push(0.0);
    for r in &grid.rho {
        acc += r * grid.dx / mass;
        fg.push(acc);
    }
    let grid_cdf = |x: f64| -> f64 {
        if x <= grid.x_lo {
            0.0
        } else if x >= grid.x_hi {
            1.0
        } else {
            let i = (((x - grid.x_lo) / grid.dx).floor() as usize).min(m - 1);
            let t = (x - grid.face(i)) / grid.dx;
            fg[i] + t * (fg[i + 1] - fg[i])
        }
    };
    let mut points: Vec<f64> = (0..=m).map(|k| grid.face(k)).chain(s.iter().copied()).collect();
    points.sort_by(f64::total_cmp);
    points.dedup();
    let mut total = 0.0;
    let mut j = 0usize;
    for w in points.windows(2) {
        let (p, q) = (w[0], w[1]);
        while j < s.len() && s[j] <= p {
            j += 1;
        }
        let fp = j as f64 / n;
        let f0 = grid_cdf(p) - fp;
        let f1 = grid_cdf(q) - fp;
        let len = q - p;
        total += if f0 * f1 >= 0.0 {
            0.5 * (f0.abs() + f1.abs()) * len
        } else {
            0.5 * (f0 * f0 + f1 * f1) / (f0.abs() + f1.abs()) * len
        };
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cnst(v: f64) -> Fn1 {
        Arc::new(move |_| v)
    }

    fn gaussian(m: usize, lo: f64, hi: f64, mean: f64, sd: f64) -> Grid1D {
        Grid1D::from_cdf(m, lo, hi, |x| {
            0.5 * statrs::function::erf::erfc(-(x - mean) / (sd * 2f64.sqrt()))
        })
        .unwrap()
    }

    fn ou(scheme: FpScheme) -> FpConfig {
        FpConfig {
            a: cnst(2.0),
            grad_g: Arc::new(|x| x),
            kernel: FpKernel::Zero,
            dt: 1e-4,
            t: 1.0,
            scheme,
        }
    }

    #[test]
    fn dirac_convolution() {
        let mut g = Grid1D::new(201, -1.005, 1.005).unwrap();
        g.rho.iter_mut().for_each(|r| *r = 0.0);
        g.rho[100] = 1.0 / g.dx;
        let k = FpKernel::General {
            w: Arc::new(|x, y| (x - y) * (x - y)),
            dw_x: Arc::new(|x, y| 2.0 * (x - y)),
        };
        let c = convolve_w(&g, &k);
        for (x, v) in g.centers.iter().zip(&c) {
            assert!((v - x * x).abs() < 1e-12);
        }
        assert!(convolve_w(&g, &FpKernel::Zero).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gaussian_quadratic_convolution() {
        let g = gaussian(400, -8.0, 8.0, 0.7, 1.1);
        let c = convolve_w(&g, &FpKernel::Quadratic { s: 1.0 });
        let (m, v) = (g.mean(), g.variance() - g.dx * g.dx / 12.0);
        // (W * rho)(x) = x^2/2 - mean x + (var + mean^2)/2.
        for (x, cv) in g.centers.iter().zip(&c) {
            let want = 0.5 * x * x - m * x + 0.5 * (v + m * m);
            assert!((cv - want).abs() < 1e-10, "{cv} vs {want}");
        }
    }

    #[test]
    fn fast_paths_match_direct() {
        let g = gaussian(300, -5.0, 7.0, 1.0, 1.3);
        let quad = FpKernel::Quadratic { s: 0.7 };
        let trans = FpKernel::Translation {
            w: Arc::new(|r: f64| (r * r).sqrt().powi(3) / 3.0),
            dw: Arc::new(|r: f64| r * r.abs()),
        };
        for k in [&quad, &trans] {
            let fast = convolve_w(&g, k);
            let slow = convolve_w_direct(&g, k);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
            }
            let fast = convolve_grad_faces(&g, k);
            let slow = convolve_grad_faces_direct(&g, k);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn uniform_is_steady_without_forces() {
        let mut g = Grid1D::new(50, 0.0, 1.0).unwrap();
        let cfg = FpConfig {
            grad_g: cnst(0.0),
            dt: 1e-5,
            ..ou(FpScheme::Explicit)
        };
        let before = g.rho.clone();
        for _ in 0..100 {
            step_fp(&mut g, &cfg).unwrap();
        }
        for (a, b) in g.rho.iter().zip(&before) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn ou_relaxes_to_standard_normal() {
        for scheme in [FpScheme::Explicit, FpScheme::Semiimplicit] {
            let mut g = gaussian(512, -8.0, 8.0, 1.0, 0.5);
            let mut cfg = ou(scheme);
            cfg.dt = 0.5 * stable_dt(&g, &cfg);
            cfg.t = 10.0;
            let rep = solve(&mut g, &cfg, |_, _| Ok(())).unwrap();
            assert!(
                (g.variance() - 1.0).abs() < 1e-3,
                "{scheme:?} variance {}",
                g.variance()
            );
            assert!(g.mean().abs() < 1e-3);
            assert!(rep.mass_error < 1e-12, "{scheme:?} mass error {:e}", rep.mass_error);
            assert!(!rep.truncated);
        }
    }

    #[test]
    fn unstable_dt_rejected() {
        let mut g = gaussian(100, -5.0, 5.0, 0.0, 1.0);
        let mut cfg = ou(FpScheme::Explicit);
        cfg.dt = 2.0 * stable_dt(&g, &cfg);
        assert!(matches!(step_fp(&mut g, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn symmetric_problem_stays_even() {
        let mut g = gaussian(256, -6.0, 6.0, 0.0, 1.5);
        let cfg = FpConfig {
            a: Arc::new(|x: f64| 1.0 + 0.5 * x.sin().powi(2)),
            grad_g: Arc::new(|x: f64| x * x * x - 0.5 * x),
            kernel: FpKernel::Quadratic { s: 0.1 },
            dt: 0.0,
            t: 0.5,
            scheme: FpScheme::Explicit,
        };
        let cfg = FpConfig {
            dt: 0.5 * stable_dt(&g, &cfg),
            ..cfg
        };
        solve(&mut g, &cfg, |_, _| Ok(())).unwrap();
        let m = g.len();
        for i in 0..m / 2 {
            assert!((g.rho[i] - g.rho[m - 1 - i]).abs() < 1e-10);
        }
    }

    #[test]
    fn w1_of_grid_samples() {
        let g = gaussian(512, -8.0, 8.0, 0.0, 1.0);
        let quantile = |n: usize| -> Vec<f64> {
            // Midpoint quantiles of the grid law by bisection on its CDF.
            (0..n)
                .map(|k| {
                    let p = (k as f64 + 0.5) / n as f64;
                    let (mut lo, mut hi) = (-8.0, 8.0);
                    for _ in 0..80 {
                        let mid = 0.5 * (lo + hi);
                        if g.cdf(mid) < p {
                            lo = mid
                        } else {
                            hi = mid
                        }
                    }
                    0.5 * (lo + hi)
                })
                .collect()
        };
        let w1 = compare_particle_pde(&quantile(1000), &g).unwrap();
        let w4 = compare_particle_pde(&quantile(4000), &g).unwrap();
        assert!(w1 < 2e-3 && w4 < w1);
        // Oracle: two point masses against a uniform cell.
        let mut u = Grid1D::new(4, 0.0, 1.0).unwrap();
        u.rho = vec![1.0; 4];
        let w = compare_particle_pde(&[0.0, 1.0], &u).unwrap();
        assert!((w - 0.25).abs() < 1e-14);
        let w = compare_particle_pde(&[0.5], &u).unwrap();
        assert!((w - 0.25).abs() < 1e-14);
    }
}

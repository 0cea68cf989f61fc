//! Built-in coefficient families.

use std::sync::Arc;

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use super::*;
use crate::distance::{GammaSpec, PhiMap};
use crate::error::{Error, Result};

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// V(x) = |x|^2 with analytic derivatives.
pub fn quadratic_lyapunov(dim: usize, k0: f64, k1: f64) -> LyapunovSpec {
    LyapunovSpec {
        v: Arc::new(|x: &[f64]| x.iter().map(|v| v * v).sum()),
        grad_v: Arc::new(|x: &[f64], g: &mut [f64]| {
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi = 2.0 * xi;
            }
        }),
        hess_v: Some(Arc::new(move |_x: &[f64], h: &mut [f64]| {
            h.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..dim {
                h[i * dim + i] = 2.0;
            }
        })),
        k0,
        k1,
        beta: 1.0,
        l: 1.0,
    }
}

pub fn zero_pair_potential() -> PairPotential {
    PairPotential {
        value: Arc::new(|_x: &[f64], _y: &[f64]| 0.0),
        hessian_x: Some(Arc::new(|_x: &[f64], _y: &[f64], h: &mut [f64]| {
            h.iter_mut().for_each(|v| *v = 0.0)
        })),
    }
}

fn quadratic_w_kernel(s: f64) -> InteractionKernel {
    if s == 0.0 {
        return InteractionKernel::None;
    }
    InteractionKernel::GradientW {
        grad_w: Arc::new(move |x: &[f64], y: &[f64], out: &mut [f64]| {
            for i in 0..x.len() {
                out[i] = s * (x[i] - y[i]);
            }
        }),
        separable: Some(Separable {
            n_features: 0, // fixed below; features are the coordinates themselves
            features: Arc::new(|y: &[f64], f: &mut [f64]| f.copy_from_slice(y)),
            combine: Arc::new(move |x: &[f64], m: &[f64], out: &mut [f64]| {
                for i in 0..x.len() {
                    out[i] = s * (x[i] - m[i]);
                }
            }),
        }),
    }
}

fn with_feature_count(k: InteractionKernel, dim: usize) -> InteractionKernel {
    match k {
        InteractionKernel::GradientW {
            grad_w,
            separable: Some(mut s),
        } => {
            s.n_features = dim;
            InteractionKernel::GradientW {
                grad_w,
                separable: Some(s),
            }
        }
        other => other,
    }
}

fn constant_sigma_hat(dim: usize, c: f64) -> Option<MatrixFn> {
    (c != 0.0).then(|| {
        Arc::new(move |_x: &[f64], s: &mut [f64]| {
            s.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..dim {
                s[i * dim + i] = c;
            }
        }) as MatrixFn
    })
}

fn scaled_identity(dim: usize, v: f64) -> MatrixFn {
    Arc::new(move |_x: &[f64], a: &mut [f64]| {
        a.iter_mut().for_each(|e| *e = 0.0);
        for i in 0..dim {
            a[i * dim + i] = v;
        }
    })
}

/// b(x) = -rate x + quadratic interaction of strength s; sigma_hat = c I.
pub fn ou_coefficients(dim: usize, alpha: f64, rate: f64, sigma_hat: f64, s: f64) -> CoefficientSet {
    let tr = (alpha + sigma_hat * sigma_hat) * dim as f64;
    CoefficientSet {
        dim,
        alpha,
        sigma_hat: constant_sigma_hat(dim, sigma_hat),
        sigma_hat_diagonal: true,
        base_drift: Arc::new(move |x: &[f64], out: &mut [f64]| {
            for i in 0..x.len() {
                out[i] = -rate * x[i];
            }
        }),
        interaction: with_feature_count(quadratic_w_kernel(s), dim),
        // For s = 0: L|x|^2 = tr(a) - 2 rate |x|^2 exactly.
        lyapunov: Some(quadratic_lyapunov(dim, tr, 2.0 * rate)),
        diffusion_full: Some(scaled_identity(dim, alpha + sigma_hat * sigma_hat)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example21Params {
    pub dim: usize,
    pub p: f64,
    pub epsilon: f64,
    #[serde(default = "one")]
    pub amplitude: f64,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default)]
    pub sigma_hat: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for Example21Params {
    fn default() -> Self {
        Example21Params {
            dim: 1,
            p: 0.5,
            epsilon: 0.01,
            amplitude: 1.0,
            alpha: 1.0,
            sigma_hat: 0.0,
        }
    }
}

impl Example21Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::Config(format!("p = {} must lie in (0, 1]", self.p)));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon = {} must lie in [0, 1)", self.epsilon)));
        }
        if !(self.alpha > 0.0) || self.dim == 0 {
            return Err(Error::Config("alpha > 0 and dim >= 1 required".into()));
        }
        Ok(())
    }

    /// Bound on |d Phi / ds|, the sensitivity of the drift to log mu(V).
    pub fn phi_moment_lipschitz(&self) -> f64 {
        self.amplitude
    }
}

/// V(x) = exp((1 + |x|^2)^{p/2}).
pub fn example21_lyapunov(p: f64) -> LyapunovSpec {
    let v = move |x: &[f64]| (1.0 + norm2(x)).powf(p / 2.0).exp();
    LyapunovSpec {
        v: Arc::new(v),
        grad_v: Arc::new(move |x: &[f64], g: &mut [f64]| {
            let r2 = norm2(x);
            let f = (1.0 + r2).powf(p / 2.0).exp() * p * (1.0 + r2).powf(p / 2.0 - 1.0);
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi = f * xi;
            }
        }),
        hess_v: Some(Arc::new(move |x: &[f64], h: &mut [f64]| {
            // V = e^u, u = (1+r^2)^{p/2}; grad u = c(r) x with c = p (1+r^2)^{p/2-1}.
            let d = x.len();
            let r2 = norm2(x);
            let v = (1.0 + r2).powf(p / 2.0).exp();
            let c = p * (1.0 + r2).powf(p / 2.0 - 1.0);
            let dc = p * (p - 2.0) * (1.0 + r2).powf(p / 2.0 - 2.0); // d c / d(r^2) times 2
            for i in 0..d {
                for j in 0..d {
                    let delta = if i == j { 1.0 } else { 0.0 };
                    h[i * d + j] = v * (c * c * x[i] * x[j] + c * delta + dc * x[i] * x[j]);
                }
            }
        })),
        k0: 0.0,
        k1: 0.0,
        beta: 0.1,
        l: 5.0,
    }
}

/// Dirac laws whose log-moments log V(x) sweep more than a full period of the sine in Phi.
pub fn example21_law_probes() -> Vec<Vec<f64>> {
    [
        0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0, 6.5, 8.0, 10.0, 12.0, 15.0, 20.0, 25.0, 30.0, 40.0, 50.0,
    ]
    .iter()
    .map(|&x| vec![x])
    .collect()
}

/// b = b0 + eps Phi(x, log mu(V)) with b0(x) = -|x|^{-p} x outside the unit ball,
/// and the C^1 radial interpolation -x((1 + p/2) - (p/2)|x|^2) inside.
pub fn example21_coefficients(par: &Example21Params) -> CoefficientSet {
    let p = par.p;
    let amp = par.amplitude;
    let d = par.dim;
    let lyap = example21_lyapunov(p);
    let weight = lyap.v.clone();
    let a = par.alpha + par.sigma_hat * par.sigma_hat;
    CoefficientSet {
        dim: d,
        alpha: par.alpha,
        sigma_hat: constant_sigma_hat(d, par.sigma_hat),
        sigma_hat_diagonal: true,
        base_drift: Arc::new(move |x: &[f64], out: &mut [f64]| {
            let r2 = norm2(x);
            let w = if r2 >= 1.0 {
                r2.powf(-p / 2.0)
            } else {
                (1.0 + p / 2.0) - (p / 2.0) * r2
            };
            for i in 0..x.len() {
                out[i] = -w * x[i];
            }
        }),
        interaction: InteractionKernel::MomentPhi {
            phi: Arc::new(move |x: &[f64], s: f64, out: &mut [f64]| {
                let f = amp * s.sin() / (1.0 + norm2(x)).sqrt();
                for i in 0..x.len() {
                    out[i] = f * x[i];
                }
            }),
            epsilon: par.epsilon,
            weight,
        },
        lyapunov: Some(lyap),
        diffusion_full: Some(scaled_identity(d, a)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GranularParams {
    pub dim: usize,
    /// Isotropic diffusion intensity.
    pub alpha: f64,
    /// G(x) = quartic |x|^4 / 4 - a2 |x|^2 / 2.
    pub quartic: f64,
    pub a2: f64,
    /// W(x, y) = s |x - y|^2 / 2.
    pub s: f64,
    /// Convexity level required outside the radius lambda0.
    pub theta2: f64,
    /// sigma_hat(x) = c diag(sin x_i).
    #[serde(default)]
    pub sigma_hat: f64,
}

impl Default for GranularParams {
    fn default() -> Self {
        GranularParams {
            dim: 1,
            alpha: 2.0,
            quartic: 1.0,
            a2: 0.5,
            s: 0.1,
            theta2: 1.0,
            sigma_hat: 0.0,
        }
    }
}

impl GranularParams {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || !(self.alpha > 0.0) {
            return Err(Error::Config("granular: dim >= 1 and alpha > 0 required".into()));
        }
        if self.quartic < 0.0 || self.s < 0.0 || self.theta2 < 0.0 {
            return Err(Error::Config("granular: quartic, s, theta2 must be nonnegative".into()));
        }
        Ok(())
    }

    /// Smallest Hessian eigenvalue of G at radius r is m quartic r^2 - a2 with
    /// m = 3 in one dimension (no transverse direction) and 1 otherwise.
    fn radial_factor(&self) -> f64 {
        if self.dim == 1 {
            3.0
        } else {
            1.0
        }
    }

    /// Radius beyond which the Hessian of G + W(., z) is at least theta2.
    pub fn lambda0(&self) -> f64 {
        let m = self.radial_factor() * self.quartic;
        if m == 0.0 {
            return if self.s - self.a2 >= self.theta2 {
                0.0
            } else {
                f64::INFINITY
            };
        }
        ((self.theta2 + self.a2 - self.s) / m).max(0.0).sqrt()
    }

    pub fn theta1(&self) -> f64 {
        (self.a2 - self.s).max(0.0)
    }

    /// (1/2) ||sigma_hat(x) - sigma_hat(y)||_HS^2 <= theta0 |x - y|^2.
    pub fn theta0(&self) -> f64 {
        0.5 * self.sigma_hat * self.sigma_hat
    }

    /// Measure-Lipschitz constant of the drift, equal to the bound on the mixed Hessian of W.
    pub fn varphi(&self) -> f64 {
        self.s
    }

    /// Sup over unit v of <grad_v b(., mu)(x), v>, independent of mu for quadratic W.
    pub fn s_b(&self) -> ScalarFn {
        let (m, q, a2, s) = (self.radial_factor(), self.quartic, self.a2, self.s);
        Arc::new(move |x: &[f64]| a2 - s - m * q * norm2(x))
    }

    pub fn potentials(&self) -> (Potential, PairPotential) {
        let (q, a2, s, d) = (self.quartic, self.a2, self.s, self.dim);
        let g = Potential {
            value: Arc::new(move |x: &[f64]| {
                let r2 = norm2(x);
                q * r2 * r2 / 4.0 - a2 * r2 / 2.0
            }),
            hessian: Some(Arc::new(move |x: &[f64], h: &mut [f64]| {
                let r2 = norm2(x);
                for i in 0..d {
                    for j in 0..d {
                        let delta = if i == j { 1.0 } else { 0.0 };
                        h[i * d + j] = q * (r2 * delta + 2.0 * x[i] * x[j]) - a2 * delta;
                    }
                }
            })),
        };
        let w = PairPotential {
            value: Arc::new(move |x: &[f64], y: &[f64]| {
                0.5 * s * x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            }),
            hessian_x: Some(Arc::new(move |_x: &[f64], _y: &[f64], h: &mut [f64]| {
                h.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..d {
                    h[i * d + i] = s;
                }
            })),
        };
        (g, w)
    }

    /// Gamma constants with the given puncture mass kappa.
    pub fn gamma_spec(&self, kappa: f64) -> GammaSpec {
        GammaSpec {
            theta0: self.theta0(),
            theta1: self.theta1(),
            theta2: self.theta2,
            kappa_puncture: kappa,
            lambda_iso: self.alpha,
        }
    }
}

pub fn granular_coefficients(par: &GranularParams) -> CoefficientSet {
    let (q, a2, d, c, al) = (par.quartic, par.a2, par.dim, par.sigma_hat, par.alpha);
    let sigma_hat = (c != 0.0).then(|| {
        Arc::new(move |x: &[f64], s: &mut [f64]| {
            s.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..d {
                s[i * d + i] = c * x[i].sin();
            }
        }) as MatrixFn
    });
    CoefficientSet {
        dim: d,
        alpha: al,
        sigma_hat,
        sigma_hat_diagonal: true,
        base_drift: Arc::new(move |x: &[f64], out: &mut [f64]| {
            let r2 = norm2(x);
            for i in 0..x.len() {
                out[i] = -(q * r2 - a2) * x[i];
            }
        }),
        interaction: with_feature_count(quadratic_w_kernel(par.s), d),
        lyapunov: None,
        diffusion_full: Some(Arc::new(move |x: &[f64], a: &mut [f64]| {
            a.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..d {
                let si = c * x[i].sin();
                a[i * d + i] = al + si * si;
            }
        })),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderParams {
    pub dim: usize,
    /// Target rate in L_i phi_i = -q phi_i.
    pub q: f64,
    /// Interaction strength; the theorem constants are theta1 = theta2 = strength.
    pub strength: f64,
    /// Exponent in phi(r) = sgn(r) e^{eps |r|} for |r| >= 1.
    pub eps: f64,
    /// Constant diffusion coefficient of every component.
    pub sigma: f64,
}

impl Default for OrderParams {
    fn default() -> Self {
        OrderParams {
            dim: 1,
            q: 1.0,
            strength: 0.2,
            eps: 1.0,
            sigma: std::f64::consts::SQRT_2,
        }
    }
}

/// Odd C^3 profile: sgn(r) e^{eps|r|} outside [-1, 1], degree-7 odd polynomial inside.
#[derive(Debug, Clone, Copy)]
pub struct OrderProfile {
    eps: f64,
    a: [f64; 4],
}

impl OrderProfile {
    pub fn new(eps: f64) -> Self {
        let e = eps.exp();
        // Rows: value, first, second, third derivative of sum a_k r^{2k+1} at r = 1.
        let m = Matrix4::new(
            1.0, 1.0, 1.0, 1.0, //
            1.0, 3.0, 5.0, 7.0, //
            0.0, 6.0, 20.0, 42.0, //
            0.0, 6.0, 60.0, 210.0,
        );
        let rhs = Vector4::new(e, eps * e, eps * eps * e, eps * eps * eps * e);
        let sol = m.lu().solve(&rhs).expect("nonsingular Hermite system");
        OrderProfile {
            eps,
            a: [sol[0], sol[1], sol[2], sol[3]],
        }
    }

    /// (phi, phi', phi'') at r.
    pub fn eval(&self, r: f64) -> (f64, f64, f64) {
        let ar = r.abs();
        if ar >= 1.0 {
            let e = (self.eps * ar).exp();
            (r.signum() * e, self.eps * e, r.signum() * self.eps * self.eps * e)
        } else {
            let [a1, a3, a5, a7] = self.a;
            let r2 = r * r;
            let v = r * (a1 + r2 * (a3 + r2 * (a5 + r2 * a7)));
            let d1 = a1 + r2 * (3.0 * a3 + r2 * (5.0 * a5 + r2 * 7.0 * a7));
            let d2 = r * (6.0 * a3 + r2 * (20.0 * a5 + r2 * 42.0 * a7));
            (v, d1, d2)
        }
    }

    pub fn value(&self, r: f64) -> f64 {
        self.eval(r).0
    }
}

impl OrderParams {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || !(self.q > 0.0) || !(self.eps > 0.0) || !(self.sigma > 0.0) {
            return Err(Error::Config(
                "orderpreserving: dim >= 1, q, eps, sigma > 0 required".into(),
            ));
        }
        if self.strength < 0.0 {
            return Err(Error::Config("orderpreserving: strength must be nonnegative".into()));
        }
        let prof = OrderProfile::new(self.eps);
        for i in 0..=2000 {
            let r = i as f64 / 2000.0;
            if !(prof.eval(r).1 > 0.0) {
                return Err(Error::Config(format!(
                    "orderpreserving: interior profile not increasing at r = {r} for eps = {}",
                    self.eps
                )));
            }
        }
        Ok(())
    }

    pub fn phi_map(&self) -> PhiMap {
        let prof = OrderProfile::new(self.eps);
        PhiMap::uniform(self.dim, Arc::new(move |r: f64| prof.value(r)))
    }
}

/// Example-4 system: b_i = -(q phi + sigma^2/2 phi'')/phi' + strength G(mu)/phi'(x_i),
/// with G(y) = mean_j phi(y_j), so that L_i phi_i = -q phi_i.
pub fn order_preserving_coefficients(par: &OrderParams) -> CoefficientSet {
    let prof = OrderProfile::new(par.eps);
    let (q, half_s2, k, d) = (par.q, 0.5 * par.sigma * par.sigma, par.strength, par.dim);
    let g_of = move |y: &[f64]| y.iter().map(|&v| prof.value(v)).sum::<f64>() / y.len() as f64;
    let separable = Separable {
        n_features: 1,
        features: Arc::new(move |y: &[f64], f: &mut [f64]| f[0] = g_of(y)),
        combine: Arc::new(move |x: &[f64], m: &[f64], out: &mut [f64]| {
            for i in 0..x.len() {
                out[i] = k * m[0] / prof.eval(x[i]).1;
            }
        }),
    };
    CoefficientSet {
        dim: d,
        alpha: par.sigma * par.sigma,
        sigma_hat: None,
        sigma_hat_diagonal: true,
        base_drift: Arc::new(move |x: &[f64], out: &mut [f64]| {
            for i in 0..x.len() {
                let (p, p1, p2) = prof.eval(x[i]);
                out[i] = -(q * p + half_s2 * p2) / p1;
            }
        }),
        interaction: InteractionKernel::PairwiseZ {
            z: Arc::new(move |x: &[f64], y: &[f64], out: &mut [f64]| {
                let g = g_of(y);
                for i in 0..x.len() {
                    out[i] = k * g / prof.eval(x[i]).1;
                }
            }),
            separable: Some(separable),
        },
        lyapunov: None,
        diffusion_full: Some(scaled_identity(d, par.sigma * par.sigma)),
    }
}

//! Beta distribution in mean/precision and shape parameterizations, the
//! zero-inflated mixture likelihood, and maximum-likelihood estimation of
//! the precision φ.

use crate::errors::{Result, ZiqeError};
use crate::special::{digamma_checked, ln_gamma_checked};

/// Smallest distance kept from the {0, 1} boundary when clamping responses.
pub const BOUNDARY_EPS: f64 = 1e-6;

/// Beta distribution described by its mean μ ∈ (0,1) and precision φ > 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaMeanPrecision {
    mu: f64,
    phi: f64,
}

impl BetaMeanPrecision {
    pub fn new(mu: f64, phi: f64) -> Result<Self> {
        if !mu.is_finite() || mu <= 0.0 || mu >= 1.0 {
            return Err(ZiqeError::domain(format!("mu must lie in (0,1), got {mu}")));
        }
        if !phi.is_finite() || phi <= 0.0 {
            return Err(ZiqeError::domain(format!("phi must be positive, got {phi}")));
        }
        Ok(BetaMeanPrecision { mu, phi })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn to_shape(&self) -> BetaShape {
        BetaShape {
            a: self.mu * self.phi,
            b: (1.0 - self.mu) * self.phi,
        }
    }
}

/// Beta distribution described by its shape parameters (a, b), with φ = a + b.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaShape {
    a: f64,
    b: f64,
}

impl BetaShape {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !a.is_finite() || a <= 0.0 || !b.is_finite() || b <= 0.0 {
            return Err(ZiqeError::domain(format!(
                "shape parameters must be positive, got a={a} b={b}"
            )));
        }
        Ok(BetaShape { a, b })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn to_mean_precision(&self) -> BetaMeanPrecision {
        BetaMeanPrecision {
            mu: self.a / (self.a + self.b),
            phi: self.a + self.b,
        }
    }
}

/// Point mass at zero with weight `lambda_zero`, Beta elsewhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroInflatedParams {
    pub lambda_zero: f64,
    pub beta: BetaMeanPrecision,
}

impl ZeroInflatedParams {
    pub fn new(lambda_zero: f64, beta: BetaMeanPrecision) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda_zero) || !lambda_zero.is_finite() {
            return Err(ZiqeError::domain(format!(
                "lambda_zero must lie in [0,1], got {lambda_zero}"
            )));
        }
        Ok(ZeroInflatedParams { lambda_zero, beta })
    }
}

/// Log-density of Beta(μφ, (1−μ)φ) at y ∈ (0,1).
pub fn beta_log_pdf(y: f64, params: &BetaMeanPrecision) -> Result<f64> {
    if !y.is_finite() || y <= 0.0 || y >= 1.0 {
        return Err(ZiqeError::domain(format!("y must lie in (0,1), got {y}")));
    }
    let a = params.mu * params.phi;
    let b = (1.0 - params.mu) * params.phi;
    Ok(ln_gamma_checked(params.phi)? - ln_gamma_checked(a)? - ln_gamma_checked(b)?
        + (a - 1.0) * y.ln()
        + (b - 1.0) * (1.0 - y).ln())
}

/// Variance σ = μ(1−μ)/(1+φ).
pub fn beta_variance(params: &BetaMeanPrecision) -> f64 {
    params.mu * (1.0 - params.mu) / (1.0 + params.phi)
}

/// Log-likelihood of the zero-inflated mixture at y ∈ [0, 1).
///
/// The discrete branch contributes ln λ at y = 0; elsewhere the Bernoulli
/// complement ln(1−λ) plus the Beta log-density, with y clamped away from
/// the support boundary first.
pub fn zero_inflated_log_likelihood(y: f64, params: &ZeroInflatedParams) -> Result<f64> {
    if !y.is_finite() || !(0.0..1.0).contains(&y) {
        return Err(ZiqeError::domain(format!("y must lie in [0,1), got {y}")));
    }
    if y == 0.0 {
        Ok(params.lambda_zero.ln())
    } else {
        let clamped = y.clamp(BOUNDARY_EPS, 1.0 - BOUNDARY_EPS);
        Ok((1.0 - params.lambda_zero).ln() + beta_log_pdf(clamped, &params.beta)?)
    }
}

/// Beta log-likelihood of `samples` under shape (a, b), divided by n.
fn mean_log_likelihood(sum_ln_y: f64, sum_ln_1my: f64, a: f64, b: f64) -> f64 {
    let lg = |x: f64| ln_gamma_checked(x).unwrap_or(f64::NEG_INFINITY);
    lg(a + b) - lg(a) - lg(b) + (a - 1.0) * sum_ln_y + (b - 1.0) * sum_ln_1my
}

/// Gradient of the mean log-likelihood in (ln a, ln b).
fn grad_log_params(sum_ln_y: f64, sum_ln_1my: f64, a: f64, b: f64) -> (f64, f64) {
    let psi = |x: f64| digamma_checked(x).unwrap_or(f64::NEG_INFINITY);
    let da = psi(a + b) - psi(a) + sum_ln_y;
    let db = psi(a + b) - psi(b) + sum_ln_1my;
    (a * da, b * db)
}

/// Fits φ = â + b̂ by maximizing the Beta log-likelihood over (ln a, ln b).
///
/// Newton steps with a finite-difference Hessian of the analytic gradient,
/// backtracking line search, method-of-moments initialization. Converges to
/// gradient norm ≤ 1e-8 or stops after 200 iterations.
pub fn fit_phi_mle(samples: &[f64]) -> Result<f64> {
    if samples.len() < 10 {
        return Err(ZiqeError::domain(format!(
            "need at least 10 samples for phi MLE, got {}",
            samples.len()
        )));
    }
    for &y in samples {
        if !y.is_finite() || y <= 0.0 || y >= 1.0 {
            return Err(ZiqeError::domain(format!(
                "phi MLE samples must lie strictly inside (0,1), got {y}"
            )));
        }
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
    if var < 1e-12 {
        return Err(ZiqeError::Optimization(
            "precision diverges: sample variance is zero".into(),
        ));
    }
    let sum_ln_y = samples.iter().map(|y| y.ln()).sum::<f64>() / n;
    let sum_ln_1my = samples.iter().map(|y| (1.0 - y).ln()).sum::<f64>() / n;

    // Method-of-moments start.
    let phi0 = (mean * (1.0 - mean) / var - 1.0).max(0.1);
    let mut u = (mean * phi0).ln();
    let mut v = ((1.0 - mean) * phi0).ln();

    let ll = |u: f64, v: f64| mean_log_likelihood(sum_ln_y, sum_ln_1my, u.exp(), v.exp());
    let grad = |u: f64, v: f64| grad_log_params(sum_ln_y, sum_ln_1my, u.exp(), v.exp());

    for _ in 0..200 {
        let (gu, gv) = grad(u, v);
        if (gu * gu + gv * gv).sqrt() <= 1e-8 {
            break;
        }
        // Finite-difference Hessian columns from the analytic gradient.
        let h = 1e-6;
        let (gu_u, gv_u) = {
            let (p0, p1) = grad(u + h, v);
            let (m0, m1) = grad(u - h, v);
            ((p0 - m0) / (2.0 * h), (p1 - m1) / (2.0 * h))
        };
        let (gu_v, gv_v) = {
            let (p0, p1) = grad(u, v + h);
            let (m0, m1) = grad(u, v - h);
            ((p0 - m0) / (2.0 * h), (p1 - m1) / (2.0 * h))
        };
        let det = gu_u * gv_v - gu_v * gv_u;
        // Newton direction; fall back to gradient ascent on a bad Hessian.
        let (mut du, mut dv) = if det.abs() > 1e-14 {
            (
                -(gv_v * gu - gu_v * gv) / det,
                -(-gv_u * gu + gu_u * gv) / det,
            )
        } else {
            (gu, gv)
        };
        if du * gu + dv * gv <= 0.0 {
            du = gu;
            dv = gv;
        }
        let base = ll(u, v);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let (nu, nv) = (u + step * du, v + step * dv);
            if ll(nu, nv) > base {
                u = nu;
                v = nv;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    let phi = u.exp() + v.exp();
    if !phi.is_finite() || phi > 1e12 {
        return Err(ZiqeError::Optimization("precision diverges".into()));
    }
    Ok(phi)
}

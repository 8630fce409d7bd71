//! Normal-normal closed forms: PP and straPP priors and posteriors,
//! estimator moments, and the MSE crossing threshold.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{Matrix, SymMatrix, Vector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClosedFormError {
    #[error("design matrix is singular")]
    SingularDesign,
    #[error("historical and current variances are equal; the power prior is unbiased")]
    EqualVariances,
    #[error("percent bias is zero")]
    ZeroBias,
    #[error("invalid setup: {0}")]
    InvalidSetup(String),
}

/// Which normal-normal prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NnKind {
    PowerPrior,
    StraPp,
}

/// Result of [`mse_threshold`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Threshold {
    /// Magnitude of `β₁₁*`.
    Crossing(f64),
    /// The radicand is not positive: the straPP MSE never exceeds the PP MSE.
    NoCrossing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalNormalSetup {
    pub x0: Matrix,
    pub x1: Matrix,
    pub sigma0: f64,
    pub sigma1: f64,
    pub a0: f64,
    pub y0: Option<Vector>,
    pub y1: Option<Vector>,
}

/// A Gaussian given by mean and covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: Vector,
    pub cov: SymMatrix,
}

impl NormalNormalSetup {
    pub fn new(x0: Matrix, x1: Matrix, sigma0: f64, sigma1: f64, a0: f64) -> Result<Self, ClosedFormError> {
        if !(sigma0 > 0.0 && sigma1 > 0.0 && sigma0.is_finite() && sigma1.is_finite()) {
            return Err(ClosedFormError::InvalidSetup("standard deviations must be positive".into()));
        }
        if !(0.0..=1.0).contains(&a0) {
            return Err(ClosedFormError::InvalidSetup(format!("a0 = {a0} outside [0, 1]")));
        }
        if x0.ncols() != x1.ncols() {
            return Err(ClosedFormError::InvalidSetup("designs have different column counts".into()));
        }
        Ok(NormalNormalSetup { x0, x1, sigma0, sigma1, a0, y0: None, y1: None })
    }

    pub fn with_responses(mut self, y0: Vector, y1: Vector) -> Result<Self, ClosedFormError> {
        if y0.len() != self.x0.nrows() || y1.len() != self.x1.nrows() {
            return Err(ClosedFormError::InvalidSetup("response length does not match design".into()));
        }
        self.y0 = Some(y0);
        self.y1 = Some(y1);
        Ok(self)
    }

    fn y0(&self) -> Result<&Vector, ClosedFormError> {
        self.y0.as_ref().ok_or_else(|| ClosedFormError::InvalidSetup("historical responses required".into()))
    }

    fn y1(&self) -> Result<&Vector, ClosedFormError> {
        self.y1.as_ref().ok_or_else(|| ClosedFormError::InvalidSetup("current responses required".into()))
    }

    fn xtx0(&self) -> Matrix {
        self.x0.transpose() * &self.x0
    }

    fn xtx1(&self) -> Matrix {
        self.x1.transpose() * &self.x1
    }

    /// Posterior precision (up to the divisor) and the weights on `X₀ᵀY₀`, `X₁ᵀY₁`.
    fn posterior_parts(&self, kind: NnKind) -> Result<(Matrix, f64, f64), ClosedFormError> {
        let (s0, s1, a0) = (self.sigma0, self.sigma1, self.a0);
        let w1 = 1.0 / (s1 * s1);
        let w0 = match kind {
            NnKind::PowerPrior => a0 / (s0 * s0),
            NnKind::StraPp => a0 / (s0 * s1),
        };
        // Hist-data precision weight: PP uses a₀/σ₀², straPP a₀/σ₁².
        let h0 = match kind {
            NnKind::PowerPrior => a0 / (s0 * s0),
            NnKind::StraPp => a0 / (s1 * s1),
        };
        let prec = self.xtx1() * w1 + self.xtx0() * h0;
        let cov = prec.try_inverse().ok_or(ClosedFormError::SingularDesign)?;
        Ok((cov, w0, w1))
    }
}

fn sym(m: Matrix) -> SymMatrix {
    SymMatrix::symmetrized(m)
}

/// Historical MLE `(X₀ᵀX₀)⁻¹X₀ᵀY₀`.
fn hist_ols(setup: &NormalNormalSetup) -> Result<(Vector, Matrix), ClosedFormError> {
    let inv = setup.xtx0().try_inverse().ok_or(ClosedFormError::SingularDesign)?;
    let b = &inv * (setup.x0.transpose() * setup.y0()?);
    Ok((b, inv))
}

/// The PP or straPP prior on `β₁`; requires `a₀ > 0`.
pub fn nn_prior(setup: &NormalNormalSetup, kind: NnKind) -> Result<Gaussian, ClosedFormError> {
    if setup.a0 <= 0.0 {
        return Err(ClosedFormError::InvalidSetup("the prior is improper at a0 = 0".into()));
    }
    let (b0, inv) = hist_ols(setup)?;
    let (mean, var) = match kind {
        NnKind::PowerPrior => (b0, setup.sigma0 * setup.sigma0),
        NnKind::StraPp => (b0 * (setup.sigma1 / setup.sigma0), setup.sigma1 * setup.sigma1),
    };
    Ok(Gaussian { mean, cov: sym(inv * (var / setup.a0)) })
}

/// Posterior of `β₁` under a uniform initial prior.
pub fn nn_posterior(setup: &NormalNormalSetup, kind: NnKind) -> Result<Gaussian, ClosedFormError> {
    let (cov, w0, w1) = setup.posterior_parts(kind)?;
    let rhs = setup.x1.transpose() * setup.y1()? * w1 + setup.x0.transpose() * setup.y0()? * w0;
    Ok(Gaussian { mean: &cov * rhs, cov: sym(cov) })
}

/// Sampling mean and covariance of the posterior-mean estimator when the
/// data are generated at `β₁` and `β₀ = (σ₀/σ₁)β₁`.
pub fn nn_estimator_moments(setup: &NormalNormalSetup, kind: NnKind, beta1: &Vector) -> Result<Gaussian, ClosedFormError> {
    let (cov, w0, w1) = setup.posterior_parts(kind)?;
    let beta0 = beta1 * (setup.sigma0 / setup.sigma1);
    let (g0, g1) = (setup.xtx0(), setup.xtx1());
    let mean = &cov * (&g1 * beta1 * w1 + &g0 * beta0 * w0);
    let s0sq = setup.sigma0 * setup.sigma0;
    let s1sq = setup.sigma1 * setup.sigma1;
    let middle = g1 * (w1 * w1 * s1sq) + g0 * (w0 * w0 * s0sq);
    Ok(Gaussian { mean, cov: sym(&cov * middle * &cov) })
}

/// Analytic bias of the posterior-mean estimator under the straPP truth.
pub fn nn_bias(setup: &NormalNormalSetup, kind: NnKind, beta1: &Vector) -> Result<Vector, ClosedFormError> {
    Ok(nn_estimator_moments(setup, kind, beta1)?.mean - beta1)
}

/// `|β₁₁*|` for the balanced intercept-plus-treatment design, where the
/// straPP and PP posterior-mean MSEs for the treatment effect coincide.
pub fn mse_threshold(n0: usize, n1: usize, a0: f64, sigma0: f64, sigma1: f64) -> Result<Threshold, ClosedFormError> {
    if n0 == 0 || n1 == 0 {
        return Err(ClosedFormError::InvalidSetup("sample sizes must be positive".into()));
    }
    if !(a0 > 0.0 && a0 <= 1.0) {
        return Err(ClosedFormError::InvalidSetup(format!("a0 = {a0} must lie in (0, 1]")));
    }
    if !(sigma0 > 0.0 && sigma1 > 0.0) {
        return Err(ClosedFormError::InvalidSetup("standard deviations must be positive".into()));
    }
    if sigma0 == sigma1 {
        return Err(ClosedFormError::EqualVariances);
    }
    let (n0, n1) = (n0 as f64, n1 as f64);
    let (v0, v1) = (sigma0 * sigma0, sigma1 * sigma1);
    let lead = 2.0 * (n1 * v0 + a0 * n0 * v1) / (a0 * n0 * (sigma0 - sigma1));
    let radicand = (n1 + a0 * a0 * n0) / (n1 + a0 * n0).powi(2) - v0 * (n1 * v0 + a0 * a0 * n0 * v1) / (n1 * v0 + a0 * n0 * v1).powi(2);
    if radicand <= 0.0 {
        Ok(Threshold::NoCrossing)
    } else {
        Ok(Threshold::Crossing(lead.abs() * radicand.sqrt()))
    }
}

/// True iff the straPP has no larger MSE than the PP at `β`:
/// `(var_s − var_p)/pct_bias_p² ≤ β²`.
pub fn theorem1_condition(var_s: f64, var_p: f64, pct_bias_p: f64, beta: f64) -> Result<bool, ClosedFormError> {
    if pct_bias_p == 0.0 {
        return Err(ClosedFormError::ZeroBias);
    }
    Ok((var_s - var_p) / (pct_bias_p * pct_bias_p) <= beta * beta)
}

/// Balanced design: intercept and a treatment indicator on the first `⌊n/2⌋` rows.
pub fn balanced_design(n: usize) -> Matrix {
    Matrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { (i < n / 2) as u8 as f64 })
}

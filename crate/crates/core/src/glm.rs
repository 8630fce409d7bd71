//! Canonical-link GLM families, likelihoods, Fisher information and MLE fitting.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::SVD;
use rand::Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::linalg::{LinalgError, Matrix, SymMatrix, Vector};

/// Linear predictors beyond this magnitude saturate the logistic weight.
pub const BERNOULLI_SATURATION: f64 = 30.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GlmError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid response {value} at row {row} for the {family} family")]
    InvalidResponse { row: usize, value: f64, family: String },
    #[error("design matrix is rank deficient (condition {0:e})")]
    RankDeficient(f64),
    #[error("maximum likelihood fit did not converge after {iterations} iterations (score norm {score_norm:e})")]
    NonConvergence { iterations: usize, score_norm: f64 },
    #[error("data are separable: the likelihood has no finite maximizer")]
    SeparableData,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Response family with its canonical link. The exponential family is
/// parameterized by its log mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GlmFamily {
    NormalKnownVariance { sigma: f64 },
    NormalUnknownVariance,
    BernoulliLogit,
    PoissonLog,
    ExponentialLog,
}

impl fmt::Display for GlmFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GlmFamily::NormalKnownVariance { sigma } => write!(f, "normal-known:{sigma}"),
            GlmFamily::NormalUnknownVariance => f.write_str("normal"),
            GlmFamily::BernoulliLogit => f.write_str("bernoulli"),
            GlmFamily::PoissonLog => f.write_str("poisson"),
            GlmFamily::ExponentialLog => f.write_str("exponential"),
        }
    }
}

impl FromStr for GlmFamily {
    type Err = GlmError;

    /// Accepts `normal`, `normal-known:<sigma>`, `bernoulli`, `poisson`, `exponential`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        if let Some(sigma) = s.strip_prefix("normal-known:") {
            let sigma: f64 = sigma
                .parse()
                .map_err(|_| GlmError::InvalidParameter(format!("bad sigma in '{s}'")))?;
            return GlmFamily::normal_known(sigma);
        }
        match s.as_str() {
            "normal" | "normal-unknown" => Ok(GlmFamily::NormalUnknownVariance),
            "bernoulli" | "binary" | "logistic" => Ok(GlmFamily::BernoulliLogit),
            "poisson" => Ok(GlmFamily::PoissonLog),
            "exponential" => Ok(GlmFamily::ExponentialLog),
            _ => Err(GlmError::InvalidParameter(format!("unknown family '{s}'"))),
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl GlmFamily {
    pub fn normal_known(sigma: f64) -> Result<Self, GlmError> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(GlmError::InvalidParameter(format!("sigma must be positive, got {sigma}")));
        }
        Ok(GlmFamily::NormalKnownVariance { sigma })
    }

    /// Dispersion when it is not a free parameter (`φ = σ⁻²` for known-variance normal).
    pub fn fixed_phi(&self) -> Option<f64> {
        match self {
            GlmFamily::NormalKnownVariance { sigma } => Some(1.0 / (sigma * sigma)),
            GlmFamily::NormalUnknownVariance => None,
            _ => Some(1.0),
        }
    }

    pub fn has_free_dispersion(&self) -> bool {
        self.fixed_phi().is_none()
    }

    /// Whether the Fisher weights vary with the linear predictor.
    pub fn information_depends_on_beta(&self) -> bool {
        matches!(self, GlmFamily::BernoulliLogit | GlmFamily::PoissonLog)
    }

    pub fn is_normal(&self) -> bool {
        matches!(
            self,
            GlmFamily::NormalKnownVariance { .. } | GlmFamily::NormalUnknownVariance
        )
    }

    /// Exact log density of one response at linear predictor `eta`.
    pub fn log_density(&self, y: f64, eta: f64, phi: f64) -> f64 {
        match self {
            GlmFamily::NormalKnownVariance { .. } | GlmFamily::NormalUnknownVariance => {
                let r = y - eta;
                0.5 * phi.ln() - 0.5 * LN_2PI - 0.5 * phi * r * r
            }
            GlmFamily::BernoulliLogit => y * eta - softplus(eta),
            GlmFamily::PoissonLog => y * eta - eta.exp() - ln_gamma(y + 1.0),
            GlmFamily::ExponentialLog => -eta - y * (-eta).exp(),
        }
    }

    pub fn mean(&self, eta: f64) -> f64 {
        match self {
            GlmFamily::NormalKnownVariance { .. } | GlmFamily::NormalUnknownVariance => eta,
            GlmFamily::BernoulliLogit => logistic(eta),
            GlmFamily::PoissonLog | GlmFamily::ExponentialLog => eta.exp(),
        }
    }

    /// `∂ log f / ∂η`.
    pub fn dlogf_deta(&self, y: f64, eta: f64, phi: f64) -> f64 {
        match self {
            GlmFamily::NormalKnownVariance { .. } | GlmFamily::NormalUnknownVariance => {
                phi * (y - eta)
            }
            GlmFamily::BernoulliLogit => y - logistic(eta),
            GlmFamily::PoissonLog => y - eta.exp(),
            GlmFamily::ExponentialLog => y * (-eta).exp() - 1.0,
        }
    }

    /// Per-observation Fisher weight `v_i` (before the dispersion factor).
    ///
    /// For the exponential model with log link the expected information
    /// per observation is exactly one, whatever the mean.
    pub fn fisher_weight(&self, eta: f64) -> f64 {
        match self {
            GlmFamily::BernoulliLogit => {
                let p = logistic(eta);
                p * (1.0 - p)
            }
            GlmFamily::PoissonLog => eta.exp(),
            _ => 1.0,
        }
    }

    /// `d v_i / dη`.
    pub fn fisher_weight_derivative(&self, eta: f64) -> f64 {
        match self {
            GlmFamily::BernoulliLogit => {
                let p = logistic(eta);
                p * (1.0 - p) * (1.0 - 2.0 * p)
            }
            GlmFamily::PoissonLog => eta.exp(),
            _ => 0.0,
        }
    }

    /// [`fisher_weight`](Self::fisher_weight) and its derivative together.
    pub fn fisher_weight_with_derivative(&self, eta: f64) -> (f64, f64) {
        match self {
            GlmFamily::BernoulliLogit => {
                let p = logistic(eta);
                let w = p * (1.0 - p);
                (w, w * (1.0 - 2.0 * p))
            }
            GlmFamily::PoissonLog => {
                let m = eta.exp();
                (m, m)
            }
            _ => (1.0, 0.0),
        }
    }

    pub fn validate_response(&self, y: f64) -> bool {
        if !y.is_finite() {
            return false;
        }
        match self {
            GlmFamily::NormalKnownVariance { .. } | GlmFamily::NormalUnknownVariance => true,
            GlmFamily::BernoulliLogit => y == 0.0 || y == 1.0,
            GlmFamily::PoissonLog => y >= 0.0 && y.fract() == 0.0,
            GlmFamily::ExponentialLog => y > 0.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, eta: f64, phi: f64, rng: &mut R) -> f64 {
        match self {
            GlmFamily::NormalKnownVariance { .. } | GlmFamily::NormalUnknownVariance => {
                Normal::new(eta, 1.0 / phi.sqrt()).expect("finite normal").sample(rng)
            }
            GlmFamily::BernoulliLogit => {
                if rng.random::<f64>() < logistic(eta) {
                    1.0
                } else {
                    0.0
                }
            }
            GlmFamily::PoissonLog => {
                let mu = eta.exp();
                if mu <= 0.0 {
                    0.0
                } else {
                    Poisson::new(mu).expect("positive rate").sample(rng)
                }
            }
            GlmFamily::ExponentialLog => Exp::new((-eta).exp()).expect("positive rate").sample(rng),
        }
    }
}

/// Regression coefficients and the dispersion `φ` (a precision for normal models).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmParams {
    pub beta: Vector,
    pub phi: f64,
}

impl GlmParams {
    pub fn new(beta: Vector, phi: f64) -> Self {
        GlmParams { beta, phi }
    }

    /// Coefficients with the family's fixed dispersion (or `phi_if_free`).
    pub fn for_family(family: &GlmFamily, beta: Vector, phi_if_free: f64) -> Self {
        GlmParams { beta, phi: family.fixed_phi().unwrap_or(phi_if_free) }
    }

    pub fn from_slice(family: &GlmFamily, beta: &[f64]) -> Self {
        Self::for_family(family, Vector::from_column_slice(beta), 1.0)
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    pub fn validate(&self) -> Result<(), GlmError> {
        if !(self.phi > 0.0 && self.phi.is_finite()) {
            return Err(GlmError::InvalidParameter(format!("phi must be positive, got {}", self.phi)));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(GlmError::InvalidParameter("non-finite coefficient".into()));
        }
        Ok(())
    }
}

/// One study's responses and design matrix, with cached cross products.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vector,
    x: Matrix,
    xtx: Matrix,
    xty: Vector,
    yty: f64,
    sum_ln_y_factorial: f64,
}

impl Dataset {
    /// Builds a dataset, rejecting mismatched shapes and rank-deficient designs.
    pub fn new(y: Vector, x: Matrix) -> Result<Self, GlmError> {
        if y.len() != x.nrows() {
            return Err(GlmError::DimensionMismatch(format!(
                "{} responses but {} design rows",
                y.len(),
                x.nrows()
            )));
        }
        if x.ncols() == 0 || x.nrows() < x.ncols() {
            return Err(GlmError::RankDeficient(f64::INFINITY));
        }
        let sv = SVD::new(x.clone(), false, false).singular_values;
        let ratio = sv.min() / sv.max();
        if !(ratio > 1e-10) {
            return Err(GlmError::RankDeficient(1.0 / ratio));
        }
        let xt = x.transpose();
        let xtx = &xt * &x;
        let xty = &xt * &y;
        let yty = y.dot(&y);
        let sum_ln_y_factorial = y
            .iter()
            .map(|&v| if v >= 0.0 && v.fract() == 0.0 { ln_gamma(v + 1.0) } else { f64::NAN })
            .sum();
        Ok(Dataset { y, x, xtx, xty, yty, sum_ln_y_factorial })
    }

    /// Like [`Dataset::new`] but also checks every response against `family`.
    pub fn for_family(y: Vector, x: Matrix, family: &GlmFamily) -> Result<Self, GlmError> {
        let d = Dataset::new(y, x)?;
        d.validate_for(family)?;
        Ok(d)
    }

    pub fn validate_for(&self, family: &GlmFamily) -> Result<(), GlmError> {
        for (row, &v) in self.y.iter().enumerate() {
            if !family.validate_response(v) {
                return Err(GlmError::InvalidResponse {
                    row: row + 1,
                    value: v,
                    family: family.to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &Vector {
        &self.y
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn xtx(&self) -> &Matrix {
        &self.xtx
    }

    pub fn xty(&self) -> &Vector {
        &self.xty
    }

    pub fn yty(&self) -> f64 {
        self.yty
    }
}

fn check_dims(params: &GlmParams, p: usize) -> Result<(), GlmError> {
    if params.dim() != p {
        return Err(GlmError::DimensionMismatch(format!(
            "{} coefficients for a design with {} columns",
            params.dim(),
            p
        )));
    }
    Ok(())
}

/// Exact log-likelihood. Responses must already be valid for the family
/// (checked at dataset construction), so this is safe for hot loops.
pub fn log_likelihood_unchecked(family: &GlmFamily, beta: &Vector, phi: f64, data: &Dataset) -> f64 {
    match family {
        GlmFamily::NormalKnownVariance { .. } | GlmFamily::NormalUnknownVariance => {
            let rss = data.yty - 2.0 * beta.dot(&data.xty) + (&data.xtx * beta).dot(beta);
            let n = data.n() as f64;
            0.5 * n * (phi.ln() - LN_2PI) - 0.5 * phi * rss.max(0.0)
        }
        GlmFamily::PoissonLog => {
            let eta = &data.x * beta;
            data.y.dot(&eta) - eta.iter().map(|e| e.exp()).sum::<f64>() - data.sum_ln_y_factorial
        }
        GlmFamily::BernoulliLogit => {
            let eta = &data.x * beta;
            data.y.dot(&eta) - eta.iter().map(|&e| softplus(e)).sum::<f64>()
        }
        GlmFamily::ExponentialLog => {
            let eta = &data.x * beta;
            eta.iter().zip(data.y.iter()).map(|(&e, &y)| -e - y * (-e).exp()).sum()
        }
    }
}

pub fn log_likelihood(family: &GlmFamily, params: &GlmParams, data: &Dataset) -> Result<f64, GlmError> {
    check_dims(params, data.p())?;
    params.validate()?;
    data.validate_for(family)?;
    Ok(log_likelihood_unchecked(family, &params.beta, params.phi, data))
}

/// Gradient of the log-likelihood in `β`.
pub fn score(family: &GlmFamily, params: &GlmParams, data: &Dataset) -> Result<Vector, GlmError> {
    check_dims(params, data.p())?;
    let eta = &data.x * &params.beta;
    let u = Vector::from_iterator(
        data.n(),
        eta.iter().zip(data.y.iter()).map(|(&e, &y)| family.dlogf_deta(y, e, params.phi)),
    );
    Ok(data.x.transpose() * u)
}

/// `φ · Xᵀ diag(w) X` for arbitrary per-row weights.
pub(crate) fn weighted_cross(x: &Matrix, w: &[f64], phi: f64) -> Matrix {
    let p = x.ncols();
    let mut m = Matrix::zeros(p, p);
    for (i, &wi) in w.iter().enumerate() {
        if wi == 0.0 {
            continue;
        }
        for a in 0..p {
            let xa = x[(i, a)] * wi;
            if xa == 0.0 {
                continue;
            }
            for b in a..p {
                m[(a, b)] += xa * x[(i, b)];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            m[(a, b)] = m[(b, a)];
        }
    }
    m * phi
}

fn check_saturation(family: &GlmFamily, eta: &Vector) -> Result<(), GlmError> {
    if matches!(family, GlmFamily::BernoulliLogit)
        && eta.iter().any(|e| !(e.abs() <= BERNOULLI_SATURATION))
    {
        return Err(GlmError::InvalidParameter(
            "logistic linear predictor saturated; information underflows".into(),
        ));
    }
    if eta.iter().any(|e| !e.is_finite()) {
        return Err(GlmError::InvalidParameter("non-finite linear predictor".into()));
    }
    Ok(())
}

/// Fisher information `φ Xᵀ V(β) X` for the regression coefficients.
pub fn fisher_information(family: &GlmFamily, params: &GlmParams, x: &Matrix) -> Result<SymMatrix, GlmError> {
    check_dims(params, x.ncols())?;
    let eta = x * &params.beta;
    let w: Vec<f64> = eta.iter().map(|&e| family.fisher_weight(e)).collect();
    Ok(SymMatrix::symmetrized(weighted_cross(x, &w, params.phi)))
}

/// Observed information `-∂²ℓ/∂β∂βᵀ`. Equals the Fisher information for
/// every family here except the exponential, whose log link is not canonical.
pub fn observed_information(family: &GlmFamily, params: &GlmParams, data: &Dataset) -> Result<SymMatrix, GlmError> {
    check_dims(params, data.p())?;
    let eta = &data.x * &params.beta;
    let w: Vec<f64> = eta
        .iter()
        .zip(data.y.iter())
        .map(|(&e, &y)| match family {
            GlmFamily::ExponentialLog => y * (-e).exp(),
            _ => family.fisher_weight(e),
        })
        .collect();
    Ok(SymMatrix::symmetrized(weighted_cross(&data.x, &w, params.phi)))
}

/// Information together with `∂I/∂β_j` for each `j` in `coords`.
///
/// Returns an error when a logistic predictor saturates.
pub fn fisher_information_with_derivatives(
    family: &GlmFamily,
    params: &GlmParams,
    x: &Matrix,
    coords: &[usize],
) -> Result<(SymMatrix, Vec<SymMatrix>), GlmError> {
    check_dims(params, x.ncols())?;
    let eta = x * &params.beta;
    check_saturation(family, &eta)?;
    let w: Vec<f64> = eta.iter().map(|&e| family.fisher_weight(e)).collect();
    let info = SymMatrix::symmetrized(weighted_cross(x, &w, params.phi));
    let p = x.ncols();
    if !family.information_depends_on_beta() {
        return Ok((info, coords.iter().map(|_| SymMatrix::zeros(p)).collect()));
    }
    let dw: Vec<f64> = eta.iter().map(|&e| family.fisher_weight_derivative(e)).collect();
    let mut derivs = Vec::with_capacity(coords.len());
    let mut wj = vec![0.0; x.nrows()];
    for &j in coords {
        for i in 0..x.nrows() {
            wj[i] = dw[i] * x[(i, j)];
        }
        derivs.push(SymMatrix::symmetrized(weighted_cross(x, &wj, params.phi)));
    }
    Ok((info, derivs))
}

/// Maximum likelihood fit.
#[derive(Debug, Clone, PartialEq)]
pub struct MleFit {
    pub params: GlmParams,
    /// Inverse Fisher information for `β` at the estimate.
    pub covariance: SymMatrix,
    pub loglik: f64,
    pub iterations: usize,
    /// Asymptotic variance of `log φ̂` for free-dispersion families.
    pub log_phi_variance: Option<f64>,
}

const MLE_MAX_ITER: usize = 100;
const MLE_SCORE_TOL: f64 = 1e-8;

/// Damped Newton (Fisher scoring) from `β = 0` with step halving.
pub fn fit_mle(family: &GlmFamily, data: &Dataset) -> Result<MleFit, GlmError> {
    data.validate_for(family)?;
    let p = data.p();
    let n = data.n() as f64;

    if family.is_normal() {
        let chol = data.xtx.clone().cholesky().ok_or(GlmError::RankDeficient(f64::INFINITY))?;
        let beta = chol.solve(&data.xty);
        let rss = (data.yty - beta.dot(&data.xty)).max(0.0);
        let (phi, log_phi_variance) = match family.fixed_phi() {
            Some(phi) => (phi, None),
            None => {
                if rss <= 0.0 {
                    return Err(GlmError::InvalidParameter("zero residual variance".into()));
                }
                (n / rss, Some(2.0 / n))
            }
        };
        let params = GlmParams::new(beta, phi);
        let covariance = SymMatrix::symmetrized(chol.inverse() / phi);
        let loglik = log_likelihood_unchecked(family, &params.beta, phi, data);
        return Ok(MleFit { params, covariance, loglik, iterations: 1, log_phi_variance });
    }

    let phi = family.fixed_phi().unwrap_or(1.0);
    let mut params = GlmParams::new(Vector::zeros(p), phi);
    let mut ll = log_likelihood_unchecked(family, &params.beta, phi, data);
    let mut score_norm = f64::INFINITY;
    for it in 0..MLE_MAX_ITER {
        let g = score(family, &params, data)?;
        score_norm = g.amax();
        if score_norm < MLE_SCORE_TOL {
            return finish_fit(family, data, params, ll, it);
        }
        let info = fisher_information(family, &params, &data.x)?;
        let step = match info.as_matrix().clone().cholesky() {
            Some(c) => c.solve(&g),
            None => return Err(separable_or(family, data, &params, it, score_norm)),
        };
        // Newton decrement has hit rounding level; further steps cannot help.
        if step.dot(&g) < 1e-20 {
            return finish_fit(family, data, params, ll, it);
        }
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let cand = &params.beta + &step * t;
            let cll = log_likelihood_unchecked(family, &cand, phi, data);
            if cll.is_finite() && cll >= ll - 1e-12 * ll.abs().max(1.0) {
                params.beta = cand;
                ll = cll;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            return Err(separable_or(family, data, &params, it, score_norm));
        }
        let eta_max = (&data.x * &params.beta).amax();
        if params.beta.amax() > 1e4 || (matches!(family, GlmFamily::BernoulliLogit) && eta_max > 2.0 * BERNOULLI_SATURATION) {
            return Err(GlmError::SeparableData);
        }
    }
    Err(separable_or(family, data, &params, MLE_MAX_ITER, score_norm))
}

fn separable_or(family: &GlmFamily, data: &Dataset, params: &GlmParams, iterations: usize, score_norm: f64) -> GlmError {
    let eta_max = (&data.x * &params.beta).amax();
    let limit = match family {
        GlmFamily::BernoulliLogit => BERNOULLI_SATURATION,
        _ => 200.0,
    };
    if eta_max > limit {
        GlmError::SeparableData
    } else {
        GlmError::NonConvergence { iterations, score_norm }
    }
}

fn finish_fit(family: &GlmFamily, data: &Dataset, params: GlmParams, loglik: f64, iterations: usize) -> Result<MleFit, GlmError> {
    // A vanishing score can also mean the estimate is running off to
    // infinity with fitted probabilities (or rates) pinned at the boundary.
    let eta = &data.x * &params.beta;
    let diverging = match family {
        GlmFamily::BernoulliLogit => eta.amax() > 15.0,
        GlmFamily::PoissonLog => eta.min() < -20.0,
        _ => false,
    };
    if diverging {
        return Err(GlmError::SeparableData);
    }
    let info = fisher_information(family, &params, &data.x)?;
    let covariance = info.inverse_spd().map_err(|_| GlmError::SeparableData)?;
    Ok(MleFit { params, covariance, loglik, iterations, log_phi_variance: None })
}

/// Standard normal log-density helper shared by the prior evaluators.
pub(crate) fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (2.0 * PI * var).ln() - 0.5 * d * d / var
}

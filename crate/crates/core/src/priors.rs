//! Log-density evaluators for the historical-data priors.
//!
//! Values are exact up to an additive constant; improper components
//! (uniform initial priors) contribute zero. Points outside the support
//! evaluate to `-∞`, never NaN.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::glm::{fit_mle, log_likelihood_unchecked, normal_logpdf, observed_information, Dataset, GlmError, GlmParams};
use crate::linalg::{Matrix, Vector};
use crate::transform::{
    map_params, side_logdet, standardize, Direction, Side, TransformContext, TransformError,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PriorError {
    #[error("invalid prior specification: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Glm(#[from] GlmError),
    #[error(transparent)]
    Transform(#[from] TransformError),
}

/// Gamma density with shape and rate (inverse scale).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPrior {
    pub fn new(shape: f64, rate: f64) -> Result<Self, PriorError> {
        if !(shape > 0.0 && rate > 0.0 && shape.is_finite() && rate.is_finite()) {
            return Err(PriorError::InvalidSpec(format!("gamma({shape}, {rate}) needs positive finite hyperparameters")));
        }
        Ok(GammaPrior { shape, rate })
    }

    pub fn log_density(&self, x: f64) -> f64 {
        if !(x > 0.0) || !x.is_finite() {
            return f64::NEG_INFINITY;
        }
        self.shape * self.rate.ln() - ln_gamma(self.shape) + (self.shape - 1.0) * x.ln() - self.rate * x
    }
}

/// Initial prior applied independently to each regression coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitialPrior {
    #[default]
    UniformImproper,
    Normal { variance: f64 },
}

impl InitialPrior {
    pub fn log_density<I: IntoIterator<Item = f64>>(&self, coords: I) -> f64 {
        match self {
            InitialPrior::UniformImproper => {
                if coords.into_iter().all(f64::is_finite) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            InitialPrior::Normal { variance } => coords.into_iter().map(|x| normal_logpdf(x, 0.0, *variance)).sum(),
        }
    }

    pub fn is_proper(&self) -> bool {
        matches!(self, InitialPrior::Normal { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PriorKind {
    #[serde(alias = "uip")]
    UniformImproper,
    #[serde(alias = "pp")]
    PowerPrior { a0: f64 },
    #[serde(alias = "app")]
    AsymptoticPp { a0: f64 },
    #[serde(alias = "com")]
    Commensurate { b0: f64 },
    #[serde(rename = "strapp")]
    StraPp { a0: f64 },
    #[serde(rename = "gen-strapp", alias = "gs")]
    GenStraPp { a0: f64, omega0: f64 },
}

impl PriorKind {
    pub fn a0(&self) -> Option<f64> {
        match *self {
            PriorKind::PowerPrior { a0 }
            | PriorKind::AsymptoticPp { a0 }
            | PriorKind::StraPp { a0 }
            | PriorKind::GenStraPp { a0, .. } => Some(a0),
            PriorKind::UniformImproper | PriorKind::Commensurate { .. } => None,
        }
    }

    /// Short label used in tables, e.g. `straPP` or `GS`.
    pub fn label(&self) -> &'static str {
        match self {
            PriorKind::UniformImproper => "UIP",
            PriorKind::PowerPrior { .. } => "PP",
            PriorKind::AsymptoticPp { .. } => "APP",
            PriorKind::Commensurate { .. } => "COM",
            PriorKind::StraPp { .. } => "straPP",
            PriorKind::GenStraPp { .. } => "GS",
        }
    }

    /// Hyperparameter description, e.g. `a0=0.5;omega0=1`.
    pub fn hyper(&self) -> String {
        match *self {
            PriorKind::UniformImproper => String::new(),
            PriorKind::PowerPrior { a0 } | PriorKind::AsymptoticPp { a0 } | PriorKind::StraPp { a0 } => format!("a0={a0}"),
            PriorKind::Commensurate { b0 } => format!("b0={b0}"),
            PriorKind::GenStraPp { a0, omega0 } => format!("a0={a0};omega0={omega0}"),
        }
    }

    pub fn validate(&self) -> Result<(), PriorError> {
        if let Some(a0) = self.a0() {
            if !(0.0..=1.0).contains(&a0) {
                return Err(PriorError::InvalidSpec(format!("a0 must lie in [0, 1], got {a0}")));
            }
        }
        match *self {
            PriorKind::Commensurate { b0 } if !(b0 > 0.0 && b0.is_finite()) => {
                Err(PriorError::InvalidSpec(format!("b0 must be positive, got {b0}")))
            }
            PriorKind::GenStraPp { omega0, .. } if !(omega0 > 0.0 && omega0.is_finite()) => {
                Err(PriorError::InvalidSpec(format!("omega0 must be positive, got {omega0}")))
            }
            _ => Ok(()),
        }
    }
}

/// Gaussian approximation cached for the asymptotic power prior.
#[derive(Debug, Clone)]
struct AppCache {
    mean: Vector,
    precision: Matrix,
    log_norm: f64,
}

/// Shape of the commensurability hyperprior.
pub const COMMENSURATE_SHAPE: f64 = 2.0;

/// A fully specified prior together with the transform context that
/// identifies the two models and the borrowed coordinates.
#[derive(Debug, Clone)]
pub struct PriorSpec {
    pub kind: PriorKind,
    pub ctx: TransformContext,
    pub initial_prior: InitialPrior,
    /// Prior on free dispersions (`φ₀`, `φ₁`); `None` means flat.
    pub dispersion_prior: Option<GammaPrior>,
    app: Option<AppCache>,
}

impl PriorSpec {
    /// Builds and validates a prior. The historical dataset is needed to
    /// cache the asymptotic power prior's mode and curvature.
    pub fn new(
        kind: PriorKind,
        ctx: TransformContext,
        initial_prior: InitialPrior,
        dispersion_prior: Option<GammaPrior>,
        hist: &Dataset,
    ) -> Result<Self, PriorError> {
        kind.validate()?;
        if let InitialPrior::Normal { variance } = initial_prior {
            if !(variance > 0.0) {
                return Err(PriorError::InvalidSpec("initial prior variance must be positive".into()));
            }
        }
        if hist.p() != ctx.p() {
            return Err(PriorError::InvalidSpec("historical design does not match the transform context".into()));
        }
        let app = match kind {
            PriorKind::AsymptoticPp { a0 } if a0 > 0.0 => Some(build_app(&ctx, hist, a0)?),
            _ => None,
        };
        Ok(PriorSpec { kind, ctx, initial_prior, dispersion_prior, app })
    }

    pub fn a0(&self) -> Option<f64> {
        self.kind.a0()
    }

    /// True when the prior reduces to the initial prior (`a₀ = 0`).
    pub fn reduces_to_initial(&self) -> bool {
        matches!(self.kind, PriorKind::UniformImproper) || self.a0() == Some(0.0)
    }

    /// Whether the density is a normalized probability density. Uniform
    /// initial priors and power priors are only known up to a constant.
    pub fn is_normalized(&self) -> bool {
        matches!(self.kind, PriorKind::AsymptoticPp { .. }) && self.initial_prior.is_proper()
            || matches!(self.kind, PriorKind::UniformImproper) && self.initial_prior.is_proper()
    }

    pub fn omega0(&self) -> Option<f64> {
        match self.kind {
            PriorKind::GenStraPp { omega0, .. } => Some(omega0),
            _ => None,
        }
    }

    fn log_dispersion(&self, phi: f64) -> f64 {
        if !(phi > 0.0) || !phi.is_finite() {
            return f64::NEG_INFINITY;
        }
        self.dispersion_prior.map_or(0.0, |g| g.log_density(phi))
    }

    /// `log π₀` over the current parameter: coefficients plus free dispersion.
    pub fn log_initial_curr(&self, curr: &GlmParams) -> f64 {
        let mut lp = self.initial_prior.log_density(curr.beta.iter().copied());
        if self.ctx.curr_family().has_free_dispersion() {
            lp += self.log_dispersion(curr.phi);
        }
        lp
    }

    fn log_initial_curr_unborrowed(&self, curr: &GlmParams) -> f64 {
        let mut lp = self.initial_prior.log_density(self.ctx.unborrowed().into_iter().map(|j| curr.beta[j]));
        if self.ctx.curr_family().has_free_dispersion() {
            lp += self.log_dispersion(curr.phi);
        }
        lp
    }

    fn log_initial_hist(&self, hist: &GlmParams) -> f64 {
        let mut lp = self.initial_prior.log_density(hist.beta.iter().copied());
        if self.ctx.hist_family().has_free_dispersion() {
            lp += self.log_dispersion(hist.phi);
        }
        lp
    }

    fn hist_loglik(&self, hist: &GlmParams, data: &Dataset) -> f64 {
        finite_or_neg_inf(log_likelihood_unchecked(self.ctx.hist_family(), &hist.beta, hist.phi, data))
    }

    fn check_curr(&self, curr: &GlmParams) -> Result<(), PriorError> {
        if curr.dim() != self.ctx.p() {
            return Err(PriorError::InvalidSpec(format!(
                "parameter of length {} for a {}-coefficient model",
                curr.dim(),
                self.ctx.p()
            )));
        }
        Ok(())
    }

    /// Historical parameter carrying `η₂` and `φ₀`; `None` is allowed only
    /// when there is nothing to supply.
    fn hist_nuisance(&self, nuisance: Option<&GlmParams>, fallback: &GlmParams) -> Result<GlmParams, PriorError> {
        match nuisance {
            Some(h) => {
                if h.dim() != self.ctx.p() {
                    return Err(PriorError::InvalidSpec("historical parameter has the wrong length".into()));
                }
                Ok(h.clone())
            }
            None => {
                if !self.ctx.is_full() || self.ctx.hist_family().has_free_dispersion() {
                    return Err(PriorError::InvalidSpec(
                        "partial borrowing or a free historical dispersion needs historical nuisance values".into(),
                    ));
                }
                Ok(GlmParams::for_family(self.ctx.hist_family(), fallback.beta.clone(), 1.0))
            }
        }
    }
}

fn finite_or_neg_inf(x: f64) -> f64 {
    if x.is_nan() {
        f64::NEG_INFINITY
    } else {
        x
    }
}

fn build_app(ctx: &TransformContext, hist: &Dataset, a0: f64) -> Result<AppCache, PriorError> {
    let fit = fit_mle(ctx.hist_family(), hist)?;
    let h = observed_information(ctx.hist_family(), &fit.params, hist)?;
    let cov = h.inverse_spd().map_err(GlmError::from)?;
    let b = ctx.borrowed();
    let cov_bb = cov.submatrix(b);
    let precision = cov_bb
        .inverse_spd()
        .map_err(GlmError::from)?
        .scale(a0)
        .into_matrix();
    let chol = precision.clone().cholesky().ok_or(GlmError::Linalg(crate::linalg::LinalgError::SingularMatrix))?;
    let logdet: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let r = b.len() as f64;
    let mean = Vector::from_iterator(b.len(), b.iter().map(|&j| fit.params.beta[j]));
    Ok(AppCache { mean, precision, log_norm: -0.5 * r * (2.0 * std::f64::consts::PI).ln() + 0.5 * logdet })
}

fn require(spec: &PriorSpec, ok: bool, what: &str) -> Result<(), PriorError> {
    if ok {
        Ok(())
    } else {
        Err(PriorError::InvalidSpec(format!("{what} evaluator called with a {} prior", spec.kind.label())))
    }
}

/// Log density of the (improper) uniform prior, or of any prior at `a₀ = 0`.
pub fn log_initial_prior(spec: &PriorSpec, curr: &GlmParams) -> Result<f64, PriorError> {
    spec.check_curr(curr)?;
    Ok(spec.log_initial_curr(curr))
}

/// Power prior (partial-borrowing form when not every coordinate is borrowed).
///
/// Borrowed coordinates of the historical parameter are the current
/// `θ_B`; `hist_nuisance` supplies `η₂` and `φ₀` where they exist.
pub fn log_power_prior(
    spec: &PriorSpec,
    curr: &GlmParams,
    hist_nuisance: Option<&GlmParams>,
    hist: &Dataset,
) -> Result<f64, PriorError> {
    let a0 = match spec.kind {
        PriorKind::PowerPrior { a0 } => a0,
        _ => return require(spec, false, "power prior").map(|_| 0.0),
    };
    spec.check_curr(curr)?;
    if a0 == 0.0 {
        return Ok(spec.log_initial_curr(curr));
    }
    let mut eta = spec.hist_nuisance(hist_nuisance, curr)?;
    for &j in spec.ctx.borrowed() {
        eta.beta[j] = curr.beta[j];
    }
    let mut lp = a0 * spec.hist_loglik(&eta, hist) + spec.log_initial_curr(curr);
    if !spec.ctx.is_full() {
        lp += spec.initial_prior.log_density(spec.ctx.unborrowed().into_iter().map(|j| eta.beta[j]));
    }
    if spec.ctx.hist_family().has_free_dispersion() {
        lp += spec.log_dispersion(eta.phi);
    }
    Ok(finite_or_neg_inf(lp))
}

/// Asymptotic power prior: Gaussian at the historical MLE with covariance
/// `(a₀ H)⁻¹` on the borrowed coordinates, `H` the observed information.
pub fn log_asymptotic_pp(spec: &PriorSpec, curr: &GlmParams) -> Result<f64, PriorError> {
    require(spec, matches!(spec.kind, PriorKind::AsymptoticPp { .. }), "asymptotic power prior")?;
    spec.check_curr(curr)?;
    let Some(app) = &spec.app else {
        return Ok(spec.log_initial_curr(curr));
    };
    let b = spec.ctx.borrowed();
    let d = Vector::from_iterator(b.len(), b.iter().map(|&j| curr.beta[j])) - &app.mean;
    let quad = (&app.precision * &d).dot(&d);
    Ok(finite_or_neg_inf(app.log_norm - 0.5 * quad + spec.log_initial_curr_unborrowed(curr)))
}

/// Joint commensurate density over `(θ, η, τ)`: historical likelihood,
/// Gaussian tether of the borrowed coordinates, `π₀(θ)` and the gamma
/// hyperprior on `τ`. `η` carries a flat prior.
pub fn log_commensurate_joint(
    spec: &PriorSpec,
    curr: &GlmParams,
    hist_params: &GlmParams,
    tau: f64,
    hist: &Dataset,
) -> Result<f64, PriorError> {
    let b0 = match spec.kind {
        PriorKind::Commensurate { b0 } => b0,
        _ => return require(spec, false, "commensurate").map(|_| 0.0),
    };
    spec.check_curr(curr)?;
    if hist_params.dim() != spec.ctx.p() {
        return Err(PriorError::InvalidSpec("historical parameter has the wrong length".into()));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Ok(f64::NEG_INFINITY);
    }
    let var = 1.0 / tau;
    let tether: f64 = spec
        .ctx
        .borrowed()
        .iter()
        .map(|&j| normal_logpdf(curr.beta[j], hist_params.beta[j], var))
        .sum();
    let mut lp = spec.hist_loglik(hist_params, hist)
        + tether
        + spec.log_initial_curr(curr)
        + GammaPrior { shape: COMMENSURATE_SHAPE, rate: b0 }.log_density(tau);
    if spec.ctx.hist_family().has_free_dispersion() {
        lp += spec.log_dispersion(hist_params.phi);
    }
    Ok(finite_or_neg_inf(lp))
}

/// straPP at a pair `(θ, η)` already satisfying `s₀(η) = s₁(θ) + c₀`.
///
/// Includes `a₀ ℓ₀(η)`, `π₀(η)`, the log-Jacobian `log|dη_B/dθ_B|`,
/// `π₀(θ₂)` and the dispersion priors.
pub fn log_strapp_pair(spec: &PriorSpec, curr: &GlmParams, hist_params: &GlmParams, hist: &Dataset) -> Result<f64, PriorError> {
    let a0 = match spec.kind {
        PriorKind::StraPp { a0 } | PriorKind::GenStraPp { a0, .. } => a0,
        _ => return require(spec, false, "straPP").map(|_| 0.0),
    };
    spec.check_curr(curr)?;
    if a0 == 0.0 {
        return Ok(spec.log_initial_curr(curr));
    }
    let logdet = match (side_logdet(&spec.ctx, Side::Curr, curr), side_logdet(&spec.ctx, Side::Hist, hist_params)) {
        (Ok(l1), Ok(l0)) => l1 - l0,
        _ => return Ok(f64::NEG_INFINITY),
    };
    log_strapp_pair_with_logdet(spec, curr, hist_params, logdet, hist)
}

/// [`log_strapp_pair`] with the log-Jacobian `log|dη_B/dθ_B|` supplied.
pub fn log_strapp_pair_with_logdet(
    spec: &PriorSpec,
    curr: &GlmParams,
    hist_params: &GlmParams,
    logdet: f64,
    hist: &Dataset,
) -> Result<f64, PriorError> {
    let a0 = match spec.kind {
        PriorKind::StraPp { a0 } | PriorKind::GenStraPp { a0, .. } => a0,
        _ => return require(spec, false, "straPP").map(|_| 0.0),
    };
    spec.check_curr(curr)?;
    if a0 == 0.0 {
        return Ok(spec.log_initial_curr(curr));
    }
    let lp = a0 * spec.hist_loglik(hist_params, hist)
        + spec.log_initial_hist(hist_params)
        + logdet
        + spec.log_initial_curr_unborrowed(curr);
    Ok(finite_or_neg_inf(lp))
}

/// straPP density of the current parameter. The historical parameter is
/// recovered by solving the constraint; `hist_nuisance` supplies `η₂`,
/// `φ₀` and a warm start. Solver failures evaluate to `-∞`.
pub fn log_strapp(
    spec: &PriorSpec,
    curr: &GlmParams,
    hist_nuisance: Option<&GlmParams>,
    hist: &Dataset,
) -> Result<f64, PriorError> {
    require(spec, matches!(spec.kind, PriorKind::StraPp { .. } | PriorKind::GenStraPp { .. }), "straPP")?;
    spec.check_curr(curr)?;
    if spec.reduces_to_initial() {
        return Ok(spec.log_initial_curr(curr));
    }
    let template = spec.hist_nuisance(hist_nuisance, curr)?;
    match map_params(&spec.ctx, curr, Direction::CurrToHist, Some(&template)) {
        Ok(eta) => log_strapp_pair(spec, curr, &eta, hist),
        Err(_) => Ok(f64::NEG_INFINITY),
    }
}

/// Gen-straPP density over `(θ, c₀)`: the straPP under the shifted
/// transform plus `log N_r(c₀ | 0, ω₀ I)`.
pub fn log_gen_strapp(
    spec: &PriorSpec,
    curr: &GlmParams,
    c0: &Vector,
    hist_nuisance: Option<&GlmParams>,
    hist: &Dataset,
) -> Result<f64, PriorError> {
    let omega0 = match spec.kind {
        PriorKind::GenStraPp { omega0, .. } => omega0,
        _ => return require(spec, false, "Gen-straPP").map(|_| 0.0),
    };
    spec.check_curr(curr)?;
    if c0.len() != spec.ctx.r() {
        return Err(PriorError::InvalidSpec(format!("c0 has length {} but {} coordinates are borrowed", c0.len(), spec.ctx.r())));
    }
    let c0_term: f64 = c0.iter().map(|&c| normal_logpdf(c, 0.0, omega0)).sum();
    if spec.reduces_to_initial() {
        return Ok(spec.log_initial_curr(curr));
    }
    let mut shifted = spec.clone();
    shifted.ctx = spec.ctx.with_shift(c0.clone())?;
    Ok(finite_or_neg_inf(log_strapp(&shifted, curr, hist_nuisance, hist)? + c0_term))
}

/// Empirical `ω₀`: largest absolute difference between the standardized
/// historical and current MLEs.
pub fn empirical_omega(hist: &Dataset, curr: &Dataset, ctx: &TransformContext) -> Result<f64, PriorError> {
    let h = fit_mle(ctx.hist_family(), hist)?;
    let c = fit_mle(ctx.curr_family(), curr)?;
    let s0 = standardize(ctx, Side::Hist, &h.params)?;
    let s1 = standardize(ctx, Side::Curr, &c.params)?;
    Ok((s0 - s1).amax())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::{log_likelihood, GlmFamily};
    use crate::linalg::{spd_sqrt, SymMatrix};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};
    use std::sync::Arc;

    fn design(n: usize, p: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, p, |i, j| match j {
            0 => 1.0,
            1 => (i < n / 2) as u8 as f64,
            _ => StandardNormal.sample(&mut rng),
        })
    }

    fn data(fam: &GlmFamily, x: Matrix, beta: &[f64], seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eta = &x * Vector::from_column_slice(beta);
        let phi = fam.fixed_phi().unwrap_or(1.0);
        let y = eta.map(|e| fam.sample(e, phi, &mut rng));
        Dataset::for_family(y, x, fam).unwrap()
    }

    fn spec(kind: PriorKind, h: GlmFamily, c: GlmFamily, hist: &Dataset) -> PriorSpec {
        let ctx = TransformContext::full(h, c, Arc::new(hist.x().clone())).unwrap();
        PriorSpec::new(kind, ctx, InitialPrior::UniformImproper, None, hist).unwrap()
    }

    fn pt(fam: &GlmFamily, b: &[f64]) -> GlmParams {
        GlmParams::from_slice(fam, b)
    }

    fn mvn_logpdf(x: &Vector, mean: &Vector, cov: &Matrix) -> f64 {
        let d = x - mean;
        let chol = cov.clone().cholesky().unwrap();
        let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        -0.5 * (d.len() as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + d.dot(&chol.solve(&d)))
    }

    #[test]
    fn gamma_density_textbook_value() {
        let g = GammaPrior::new(2.0, 2.0).unwrap();
        assert_relative_eq!(g.log_density(1.0), 4f64.ln() - 2.0, epsilon = 1e-14);
        assert_eq!(g.log_density(0.0), f64::NEG_INFINITY);
    }

    #[test]
    fn power_prior_limits() {
        let fam = GlmFamily::BernoulliLogit;
        let hist = data(&fam, design(60, 2, 1), &[0.2, 0.5], 2);
        let t = pt(&fam, &[0.1, 0.4]);
        let one = spec(PriorKind::PowerPrior { a0: 1.0 }, fam, fam, &hist);
        assert_relative_eq!(
            log_power_prior(&one, &t, None, &hist).unwrap(),
            log_likelihood(&fam, &t, &hist).unwrap(),
            epsilon = 1e-12
        );
        let zero = spec(PriorKind::PowerPrior { a0: 0.0 }, fam, fam, &hist);
        assert_eq!(log_power_prior(&zero, &t, None, &hist).unwrap(), 0.0);
    }

    #[test]
    fn power_prior_derivative_in_a0_is_loglik() {
        let fam = GlmFamily::PoissonLog;
        let hist = data(&fam, design(50, 2, 3), &[0.3, 0.2], 4);
        let t = pt(&fam, &[0.2, 0.1]);
        let h = 1e-5;
        let lp = |a0: f64| log_power_prior(&spec(PriorKind::PowerPrior { a0 }, fam, fam, &hist), &t, None, &hist).unwrap();
        let fd = (lp(0.5 + h) - lp(0.5 - h)) / (2.0 * h);
        assert_relative_eq!(fd, log_likelihood(&fam, &t, &hist).unwrap(), max_relative = 1e-6);
    }

    #[test]
    fn normal_normal_priors_match_gaussian_forms() {
        let (s0, s1, a0) = (1.5, 0.8, 0.6);
        let h = GlmFamily::NormalKnownVariance { sigma: s0 };
        let c = GlmFamily::NormalKnownVariance { sigma: s1 };
        let x = design(40, 2, 5);
        let hist = data(&h, x.clone(), &[1.0, 0.5], 6);
        let xtx = x.transpose() * &x;
        let xtx_inv = xtx.clone().try_inverse().unwrap();
        let bhat = &xtx_inv * x.transpose() * hist.y();
        let pp = spec(PriorKind::PowerPrior { a0 }, h, c, &hist);
        let app = spec(PriorKind::AsymptoticPp { a0 }, h, c, &hist);
        let st = spec(PriorKind::StraPp { a0 }, h, c, &hist);
        let pp_cov = &xtx_inv * (s0 * s0 / a0);
        let st_mean = &bhat * (s1 / s0);
        let st_cov = &xtx_inv * (s1 * s1 / a0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let u = Vector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
            let v = Vector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
            let (tu, tv) = (GlmParams::new(u.clone(), 1.0 / (s1 * s1)), GlmParams::new(v.clone(), 1.0 / (s1 * s1)));
            let oracle = mvn_logpdf(&u, &bhat, &pp_cov) - mvn_logpdf(&v, &bhat, &pp_cov);
            let got = log_power_prior(&pp, &tu, None, &hist).unwrap() - log_power_prior(&pp, &tv, None, &hist).unwrap();
            assert_relative_eq!(got, oracle, epsilon = 1e-8);
            let got_app = log_asymptotic_pp(&app, &tu).unwrap() - log_asymptotic_pp(&app, &tv).unwrap();
            assert_relative_eq!(got_app, oracle, epsilon = 1e-8);
            let oracle_s = mvn_logpdf(&u, &st_mean, &st_cov) - mvn_logpdf(&v, &st_mean, &st_cov);
            let got_s = log_strapp(&st, &tu, None, &hist).unwrap() - log_strapp(&st, &tv, None, &hist).unwrap();
            assert_relative_eq!(got_s, oracle_s, epsilon = 1e-8);
        }
    }

    #[test]
    fn app_mode_is_maximal() {
        let fam = GlmFamily::BernoulliLogit;
        let hist = data(&fam, design(120, 2, 8), &[-0.2, 0.6], 9);
        let app = spec(PriorKind::AsymptoticPp { a0: 0.7 }, fam, fam, &hist);
        let mle = fit_mle(&fam, &hist).unwrap().params;
        let top = log_asymptotic_pp(&app, &mle).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let mut q = mle.clone();
            q.beta[0] += rng.random_range(-0.3..0.3);
            q.beta[1] += rng.random_range(-0.3..0.3);
            assert!(log_asymptotic_pp(&app, &q).unwrap() < top);
        }
    }

    /// Second-order expansion of the historical log-likelihood about its
    /// maximum, normalized as a Gaussian by integration on a grid.
    #[test]
    fn app_matches_quadratic_expansion_oracle() {
        let fam = GlmFamily::BernoulliLogit;
        let x = Matrix::from_element(80, 1, 1.0);
        let hist = data(&fam, x, &[0.4], 11);
        let a0 = 0.5;
        let app = spec(PriorKind::AsymptoticPp { a0 }, fam, fam, &hist);
        let mle = fit_mle(&fam, &hist).unwrap().params.beta[0];
        let ll = |b: f64| log_likelihood_unchecked(&fam, &Vector::from_element(1, b), 1.0, &hist);
        let h = 1e-4;
        let curv = -(ll(mle + h) - 2.0 * ll(mle) + ll(mle - h)) / (h * h);
        let q = |b: f64| -0.5 * a0 * curv * (b - mle).powi(2);
        let (lo, hi, m) = (mle - 3.0, mle + 3.0, 20_000);
        let dx = (hi - lo) / m as f64;
        let z: f64 = (0..m).map(|i| q(lo + (i as f64 + 0.5) * dx).exp() * dx).sum();
        for probe in [-0.4, -0.1, 0.0, 0.15, 0.5] {
            let b = mle + probe;
            let got = log_asymptotic_pp(&app, &pt(&fam, &[b])).unwrap();
            assert!((got - (q(b) - z.ln())).abs() < 1e-6, "probe {probe}");
        }
    }

    #[test]
    fn commensurate_parts_add_up() {
        let fam = GlmFamily::BernoulliLogit;
        let hist = data(&fam, design(40, 2, 12), &[0.1, 0.3], 13);
        let com = spec(PriorKind::Commensurate { b0: 2.0 }, fam, GlmFamily::PoissonLog, &hist);
        let eta = pt(&fam, &[0.2, 0.4]);
        let th = pt(&GlmFamily::PoissonLog, &[0.2, 0.4]);
        let at_mean = log_commensurate_joint(&com, &th, &eta, 1.0, &hist).unwrap();
        let expected = log_likelihood(&fam, &eta, &hist).unwrap() - (2.0 * std::f64::consts::PI).ln() + 4f64.ln() - 2.0;
        assert_relative_eq!(at_mean, expected, epsilon = 1e-10);
        let off = pt(&GlmFamily::PoissonLog, &[0.5, 0.1]);
        assert!(log_commensurate_joint(&com, &off, &eta, 1.0, &hist).unwrap() < at_mean);
        assert_eq!(log_commensurate_joint(&com, &th, &eta, -1.0, &hist).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn strapp_identity_transform_is_power_prior() {
        let fam = GlmFamily::PoissonLog;
        let hist = data(&fam, design(60, 3, 14), &[0.3, 0.2, -0.1], 15);
        let st = spec(PriorKind::StraPp { a0: 0.8 }, fam, fam, &hist);
        let pp = spec(PriorKind::PowerPrior { a0: 0.8 }, fam, fam, &hist);
        let t = pt(&fam, &[0.25, 0.1, 0.0]);
        assert_relative_eq!(
            log_strapp(&st, &t, None, &hist).unwrap(),
            log_power_prior(&pp, &t, None, &hist).unwrap(),
            epsilon = 1e-8
        );
    }

    #[test]
    fn strapp_at_zero_a0_is_initial_prior() {
        let h = GlmFamily::BernoulliLogit;
        let c = GlmFamily::NormalUnknownVariance;
        let hist = data(&h, design(60, 2, 16), &[0.3, 0.2], 17);
        let ctx = TransformContext::full(h, c, Arc::new(hist.x().clone())).unwrap();
        let disp = Some(GammaPrior::new(0.01, 0.01).unwrap());
        let init = InitialPrior::Normal { variance: 10.0 };
        let st = PriorSpec::new(PriorKind::StraPp { a0: 0.0 }, ctx.clone(), init, disp, &hist).unwrap();
        let uip = PriorSpec::new(PriorKind::UniformImproper, ctx, init, disp, &hist).unwrap();
        let t = GlmParams::new(Vector::from_vec(vec![0.4, -1.0]), 0.3);
        assert_eq!(log_strapp(&st, &t, None, &hist).unwrap(), log_initial_prior(&uip, &t).unwrap());
    }

    #[test]
    fn gen_strapp_offsets() {
        let h = GlmFamily::BernoulliLogit;
        let c = GlmFamily::NormalKnownVariance { sigma: 2.0 };
        let hist = data(&h, design(80, 2, 18), &[0.5, 0.25], 19);
        let ctx = TransformContext::full(h, c, Arc::new(hist.x().clone())).unwrap();
        let st = PriorSpec::new(PriorKind::StraPp { a0: 1.0 }, ctx.clone(), InitialPrior::UniformImproper, None, &hist).unwrap();
        let gs = PriorSpec::new(PriorKind::GenStraPp { a0: 1.0, omega0: 2.0 }, ctx, InitialPrior::UniformImproper, None, &hist).unwrap();
        let zero = Vector::zeros(2);
        let mut offsets = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..30 {
            let t = pt(&c, &[rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)]);
            offsets.push(log_gen_strapp(&gs, &t, &zero, None, &hist).unwrap() - log_strapp(&st, &t, None, &hist).unwrap());
        }
        let expected = 2.0 * normal_logpdf(0.0, 0.0, 2.0);
        for o in offsets {
            assert_relative_eq!(o, expected, epsilon = 1e-12);
        }
    }

    /// Eq: joint over (θ, η) written as a commensurate-type density, at a₀ = 1.
    #[test]
    fn gen_strapp_commensurate_factorization() {
        let h = GlmFamily::BernoulliLogit;
        let c = GlmFamily::PoissonLog;
        let x = design(70, 2, 21);
        let hist = data(&h, x.clone(), &[0.2, 0.4], 22);
        let omega0 = 0.7;
        let ctx = TransformContext::full(h, c, Arc::new(x.clone())).unwrap();
        let gs = PriorSpec::new(PriorKind::GenStraPp { a0: 1.0, omega0 }, ctx.clone(), InitialPrior::UniformImproper, None, &hist).unwrap();
        // Independent standardization by direct matrix arithmetic.
        let std_of = |fam: &GlmFamily, b: &Vector| -> Vector {
            let eta = &x * b;
            let mut i = Matrix::zeros(2, 2);
            for r in 0..x.nrows() {
                let xi = x.row(r).transpose();
                i += &xi * xi.transpose() * fam.fisher_weight(eta[r]);
            }
            spd_sqrt(&SymMatrix::symmetrized(i)).unwrap().as_matrix() * b
        };
        let fd_logdet = |fam: &GlmFamily, b: &Vector| -> f64 {
            let hh = 1e-6;
            let mut j = Matrix::zeros(2, 2);
            for k in 0..2 {
                let mut up = b.clone();
                up[k] += hh;
                let mut dn = b.clone();
                dn[k] -= hh;
                j.set_column(k, &((std_of(fam, &up) - std_of(fam, &dn)) / (2.0 * hh)));
            }
            j.determinant().abs().ln()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..5 {
            let theta = Vector::from_fn(2, |_, _| rng.random_range(-0.5..0.5));
            let eta = Vector::from_fn(2, |_, _| rng.random_range(-0.5..0.5));
            let s0 = std_of(&h, &eta);
            let s1 = std_of(&c, &theta);
            let eq15 = log_likelihood(&h, &GlmParams::new(eta.clone(), 1.0), &hist).unwrap()
                + (0..2).map(|k| normal_logpdf(s1[k], s0[k], omega0)).sum::<f64>()
                + fd_logdet(&c, &theta);
            let c0 = &s0 - &s1;
            let ours = log_gen_strapp(&gs, &GlmParams::new(theta.clone(), 1.0), &c0, Some(&GlmParams::new(eta.clone(), 1.0)), &hist).unwrap()
                + side_logdet(&ctx, Side::Hist, &GlmParams::new(eta.clone(), 1.0)).unwrap();
            // finite differences limit the oracle's own accuracy
            assert!((ours - eq15).abs() < 1e-7, "{ours} vs {eq15}");
        }
    }

    #[test]
    fn empirical_omega_scalar_case() {
        // 1-d normal-normal with X₀ᵀX₀ = 1: standardized MLEs are β̂/σ.
        let s0 = 1.0;
        let s1 = 2.0;
        let h = GlmFamily::NormalKnownVariance { sigma: s0 };
        let c = GlmFamily::NormalKnownVariance { sigma: s1 };
        let hist = Dataset::new(Vector::from_vec(vec![2.0]), Matrix::from_element(1, 1, 1.0)).unwrap();
        let curr = Dataset::new(Vector::from_vec(vec![3.0]), Matrix::from_element(1, 1, 1.0)).unwrap();
        let ctx = TransformContext::full(h, c, Arc::new(hist.x().clone())).unwrap();
        assert_relative_eq!(empirical_omega(&hist, &curr, &ctx).unwrap(), 0.5, epsilon = 1e-12);
        let same = Dataset::new(Vector::from_vec(vec![4.0]), Matrix::from_element(1, 1, 1.0)).unwrap();
        assert!(empirical_omega(&hist, &same, &ctx).unwrap() < 1e-12);
    }

    #[test]
    fn never_nan_outside_support() {
        let fam = GlmFamily::BernoulliLogit;
        let hist = data(&fam, design(30, 2, 24), &[0.1, 0.2], 25);
        let st = spec(PriorKind::StraPp { a0: 1.0 }, fam, GlmFamily::PoissonLog, &hist);
        let wild = pt(&GlmFamily::PoissonLog, &[50.0, -80.0]);
        let v = log_strapp(&st, &wild, None, &hist).unwrap();
        assert!(!v.is_nan());
    }
}

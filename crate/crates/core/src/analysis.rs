//! Posterior summaries: moments, HPD intervals, DIC.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::glm::{log_likelihood_unchecked, Dataset, GlmFamily, GlmParams};
use crate::linalg::Vector;
use crate::sampler::Chain;

/// Default number of batches for batch-means standard errors.
pub const DEFAULT_BATCHES: usize = 20;

/// Minimum sample count for an HPD interval.
pub const HPD_MIN_SAMPLES: usize = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("chain has no draws")]
    EmptyChain,
    #[error("HPD interval needs at least {HPD_MIN_SAMPLES} samples, got {0}")]
    TooFewSamples(usize),
    #[error("level must lie in (0, 1), got {0}")]
    InvalidLevel(f64),
    #[error("chain lacks column {0}")]
    MissingColumn(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub level: f64,
    pub hpd_lower: Vec<f64>,
    pub hpd_upper: Vec<f64>,
    pub dic: Option<f64>,
    pub dic_mcse: Option<f64>,
    pub acceptance_rate: f64,
    pub max_constraint_residual: Option<f64>,
}

impl PosteriorSummary {
    /// Moments and HPD intervals for every chain column, with DIC filled in
    /// when the family and current data are given.
    pub fn from_chain(chain: &Chain, level: f64, dic_for: Option<(&GlmFamily, &Dataset)>) -> Result<Self, AnalysisError> {
        let (mean, sd) = posterior_summary(chain)?;
        let mut lo = Vec::with_capacity(chain.dim());
        let mut hi = Vec::with_capacity(chain.dim());
        for j in 0..chain.dim() {
            let mut col = chain.column_at(j);
            col.sort_by(f64::total_cmp);
            let (a, b) = hpd_interval(&col, level)?;
            lo.push(a);
            hi.push(b);
        }
        let (dic, dic_mcse) = match dic_for {
            Some((fam, data)) => {
                let d = dic(chain, fam, data)?;
                let se = dic_mcse(chain, fam, data, DEFAULT_BATCHES)?;
                (Some(d), Some(se))
            }
            None => (None, None),
        };
        Ok(PosteriorSummary {
            names: chain.names.clone(),
            mean,
            sd,
            level,
            hpd_lower: lo,
            hpd_upper: hi,
            dic,
            dic_mcse,
            acceptance_rate: chain.acceptance_rate(),
            max_constraint_residual: chain.max_constraint_residual,
        })
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Coordinatewise sample mean and standard deviation (denominator `n − 1`).
pub fn posterior_summary(chain: &Chain) -> Result<(Vec<f64>, Vec<f64>), AnalysisError> {
    if chain.is_empty() {
        return Err(AnalysisError::EmptyChain);
    }
    let mut mean = Vec::with_capacity(chain.dim());
    let mut sd = Vec::with_capacity(chain.dim());
    for j in 0..chain.dim() {
        let (m, s) = mean_sd(&chain.column_at(j));
        mean.push(m);
        sd.push(s);
    }
    Ok((mean, sd))
}

/// Sample mean and `n − 1` standard deviation; sd is 0 for a single value.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

/// Narrowest window of `⌈level·n⌉` consecutive sorted samples; ties go to
/// the smallest lower endpoint.
pub fn hpd_interval(sorted: &[f64], level: f64) -> Result<(f64, f64), AnalysisError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(AnalysisError::InvalidLevel(level));
    }
    let n = sorted.len();
    if n < HPD_MIN_SAMPLES {
        return Err(AnalysisError::TooFewSamples(n));
    }
    let m = ((level * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut best = 0;
    let mut width = f64::INFINITY;
    for i in 0..=n - m {
        let w = sorted[i + m - 1] - sorted[i];
        if w < width {
            width = w;
            best = i;
        }
    }
    Ok((sorted[best], sorted[best + m - 1]))
}

/// `2·mean(Dev) − Dev(mean)` for an arbitrary log-likelihood over parameter rows.
pub fn dic_from_draws<F: Fn(&[f64]) -> f64>(draws: &[Vec<f64>], loglik: F) -> Result<f64, AnalysisError> {
    if draws.is_empty() {
        return Err(AnalysisError::EmptyChain);
    }
    let n = draws.len() as f64;
    let mean_dev = draws.iter().map(|d| -2.0 * loglik(d)).sum::<f64>() / n;
    let d = draws[0].len();
    let bar: Vec<f64> = (0..d).map(|j| draws.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    Ok(2.0 * mean_dev + 2.0 * loglik(&bar))
}

fn likelihood_rows(chain: &Chain, family: &GlmFamily, p: usize, range: std::ops::Range<usize>) -> Result<Vec<Vec<f64>>, AnalysisError> {
    let start = chain.index_of("beta1[0]").ok_or_else(|| AnalysisError::MissingColumn("beta1[0]".into()))?;
    let phi = if family.has_free_dispersion() {
        Some(chain.index_of("phi1").ok_or_else(|| AnalysisError::MissingColumn("phi1".into()))?)
    } else {
        None
    };
    Ok(range
        .map(|i| {
            let d = chain.draw(i);
            let mut row = d[start..start + p].to_vec();
            if let Some(k) = phi {
                row.push(d[k]);
            }
            row
        })
        .collect())
}

fn glm_dic(rows: &[Vec<f64>], family: &GlmFamily, curr: &Dataset) -> Result<f64, AnalysisError> {
    let p = curr.p();
    let fixed = family.fixed_phi().unwrap_or(1.0);
    dic_from_draws(rows, |r| {
        let beta = Vector::from_column_slice(&r[..p]);
        let phi = if r.len() > p { r[p] } else { fixed };
        log_likelihood_unchecked(family, &beta, phi, curr)
    })
}

/// DIC of the current-data model; `φ₁` enters per draw.
pub fn dic(chain: &Chain, family: &GlmFamily, curr: &Dataset) -> Result<f64, AnalysisError> {
    if chain.is_empty() {
        return Err(AnalysisError::EmptyChain);
    }
    let rows = likelihood_rows(chain, family, curr.p(), 0..chain.len())?;
    glm_dic(&rows, family, curr)
}

/// Batch-means Monte Carlo standard error of [`dic`]: the DIC is computed
/// on each of `batches` contiguous segments.
pub fn dic_mcse(chain: &Chain, family: &GlmFamily, curr: &Dataset, batches: usize) -> Result<f64, AnalysisError> {
    if chain.is_empty() {
        return Err(AnalysisError::EmptyChain);
    }
    let rows = likelihood_rows(chain, family, curr.p(), 0..chain.len())?;
    let b = batches.clamp(2, rows.len().max(2));
    let size = rows.len() / b;
    if size == 0 {
        return Ok(f64::NAN);
    }
    let vals: Vec<f64> = (0..b)
        .map(|k| glm_dic(&rows[k * size..(k + 1) * size], family, curr))
        .collect::<Result<_, _>>()?;
    // Each batch DIC estimates the full-chain value with b× the variance.
    let (_, sd) = mean_sd(&vals);
    Ok(sd / (b as f64).sqrt())
}

/// Batch-means standard error of the mean of a correlated series.
pub fn batch_means_se(xs: &[f64], batches: usize) -> f64 {
    batch_statistic_se(xs, batches, |s| s.iter().sum::<f64>() / s.len() as f64)
}

/// Batch-means standard error of a general statistic.
pub fn batch_statistic_se<F: Fn(&[f64]) -> f64>(xs: &[f64], batches: usize, stat: F) -> f64 {
    let b = batches.max(2);
    let size = xs.len() / b;
    if size < 2 {
        return f64::NAN;
    }
    let vals: Vec<f64> = (0..b).map(|k| stat(&xs[k * size..(k + 1) * size])).collect();
    mean_sd(&vals).1 / (b as f64).sqrt()
}

/// Parameters of draw `i` of the current model, for callers that need them.
pub fn curr_params(chain: &Chain, i: usize, family: &GlmFamily, p: usize) -> GlmParams {
    chain.curr_params(i, p, family.fixed_phi())
}

//! Fitting a set of priors to one pair of datasets, and the `a₀ × ω₀`
//! DIC grid. Shared by the command line tool and the test suites.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{dic_mcse, PosteriorSummary, DEFAULT_BATCHES};
use crate::glm::{Dataset, GlmFamily};
use crate::io::{load_dataset, AnalysisConfig, CellResult};
use crate::priors::{GammaPrior, InitialPrior, PriorKind, PriorSpec};
use crate::sampler::{sample_posterior, Chain, McmcConfig, RngStream};
use crate::transform::TransformContext;
use crate::Error;

/// Datasets and model choices shared by every prior cell.
#[derive(Debug, Clone)]
pub struct FitInputs {
    pub hist: Dataset,
    pub curr: Dataset,
    pub ctx: TransformContext,
    pub initial_prior: InitialPrior,
    pub dispersion_prior: Option<GammaPrior>,
    pub names: Vec<String>,
}

impl FitInputs {
    pub fn new(
        hist: Dataset,
        curr: Dataset,
        hist_family: GlmFamily,
        curr_family: GlmFamily,
        borrowed: Vec<usize>,
    ) -> Result<Self, Error> {
        let ctx = TransformContext::new(hist_family, curr_family, Arc::new(hist.x().clone()), borrowed)?;
        let names = (0..hist.p()).map(|j| format!("beta1[{j}]")).collect();
        Ok(FitInputs { hist, curr, ctx, initial_prior: InitialPrior::UniformImproper, dispersion_prior: None, names })
    }

    pub fn from_config(cfg: &AnalysisConfig) -> Result<Self, Error> {
        let h = &cfg.historical;
        let c = &cfg.current;
        let hist = load_dataset(&h.csv, &h.response, &cfg.covariates, &h.family)?;
        let curr = load_dataset(&c.csv, &c.response, &cfg.covariates, &c.family)?;
        let mut inputs = Self::new(hist, curr, h.family, c.family, cfg.borrowed())?;
        inputs.initial_prior = cfg.initial_prior;
        inputs.dispersion_prior = cfg.dispersion_prior;
        inputs.names = cfg.coefficient_names();
        Ok(inputs)
    }

    pub fn curr_family(&self) -> &GlmFamily {
        self.ctx.curr_family()
    }

    pub fn spec(&self, kind: PriorKind) -> Result<PriorSpec, Error> {
        Ok(PriorSpec::new(kind, self.ctx.clone(), self.initial_prior, self.dispersion_prior, &self.hist)?)
    }
}

/// MCMC settings for a run. Chain `c` of cell `k` uses stream
/// `(seed, k · 2^16 + c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub mcmc: McmcConfig,
    pub seed: u64,
    pub chains: usize,
    pub workers: usize,
    pub level: f64,
}

impl RunSettings {
    fn stream(&self, cell: usize, chain: usize) -> RngStream {
        RngStream::new(self.seed, ((cell as u64) << 16) + chain as u64)
    }
}

/// Runs every chain of one cell and merges them.
pub fn fit_chain(inputs: &FitInputs, kind: PriorKind, run: &RunSettings, cell: usize) -> Result<Chain, Error> {
    let spec = inputs.spec(kind)?;
    let chains = (0..run.chains.max(1))
        .map(|c| sample_posterior(&spec, &inputs.hist, &inputs.curr, &run.mcmc, run.stream(cell, c)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Chain::merge(chains)?)
}

fn relabel(mut s: PosteriorSummary, names: &[String]) -> PosteriorSummary {
    for (j, n) in names.iter().enumerate() {
        let key = format!("beta1[{j}]");
        if let Some(i) = s.index_of(&key) {
            s.names[i] = n.clone();
        }
    }
    s
}

/// Summary of one cell, with current coefficients renamed to `names`.
pub fn fit_cell(inputs: &FitInputs, kind: PriorKind, run: &RunSettings, cell: usize) -> Result<CellResult, Error> {
    let chain = fit_chain(inputs, kind, run, cell)?;
    log::info!(
        "{} {}: acceptance {:.3}, solver failures {}, max residual {:?}",
        kind.label(),
        kind.hyper(),
        chain.acceptance_rate(),
        chain.solver_failures,
        chain.max_constraint_residual
    );
    let s = PosteriorSummary::from_chain(&chain, run.level, Some((inputs.curr_family(), &inputs.curr)))?;
    Ok(CellResult::new(kind, relabel(s, &inputs.names)))
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, Error> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Sim(crate::simharness::SimError::Pool(e.to_string())))
}

/// Fits each prior; a failed cell keeps its error.
pub fn fit_cells(inputs: &FitInputs, kinds: &[PriorKind], run: &RunSettings) -> Result<Vec<Result<CellResult, Error>>, Error> {
    let pool = pool(run.workers)?;
    Ok(pool.install(|| {
        kinds.par_iter().enumerate().map(|(k, kind)| fit_cell(inputs, *kind, run, k)).collect()
    }))
}

/// One entry of the DIC grid. `dic` is `None` when the cell failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub a0: f64,
    pub omega0: f64,
    pub prior: String,
    pub dic: Option<f64>,
    pub dic_mcse: Option<f64>,
    pub error: Option<String>,
}

/// Prior used at a grid point: straPP when `ω₀ = 0`, Gen-straPP otherwise.
pub fn grid_prior(a0: f64, omega0: f64) -> PriorKind {
    if omega0 == 0.0 {
        PriorKind::StraPp { a0 }
    } else {
        PriorKind::GenStraPp { a0, omega0 }
    }
}

/// DIC over `a0s × omega0s`, ordered `ω₀`-major. Failures become `None`.
pub fn dic_grid(inputs: &FitInputs, a0s: &[f64], omega0s: &[f64], run: &RunSettings) -> Result<Vec<GridCell>, Error> {
    let points: Vec<(f64, f64)> = omega0s.iter().flat_map(|&w| a0s.iter().map(move |&a| (a, w))).collect();
    let pool = pool(run.workers)?;
    Ok(pool.install(|| {
        points
            .par_iter()
            .enumerate()
            .map(|(k, &(a0, omega0))| {
                let kind = grid_prior(a0, omega0);
                let res = fit_chain(inputs, kind, run, k).and_then(|chain| {
                    let fam = inputs.curr_family();
                    let d = crate::analysis::dic(&chain, fam, &inputs.curr)?;
                    let se = dic_mcse(&chain, fam, &inputs.curr, DEFAULT_BATCHES)?;
                    Ok::<_, Error>((d, se))
                });
                let (dic, dic_mcse, error) = match res {
                    Ok((d, se)) if d.is_finite() => (Some(d), Some(se), None),
                    Ok((d, _)) => (None, None, Some(format!("non-finite DIC {d}"))),
                    Err(e) => {
                        log::warn!("grid cell a0={a0} omega0={omega0} failed: {e}");
                        (None, None, Some(e.to_string()))
                    }
                };
                GridCell { a0, omega0, prior: kind.label().into(), dic, dic_mcse, error }
            })
            .collect()
    }))
}

//! Simulation studies: scenario presets, truth solving, replicate execution
//! and metric aggregation.
//!
//! Designs are fixed per scenario: the first `⌊n/2⌋` rows are treated and
//! the optional age column is a single standard-normal draw (seed 0), shared
//! by every replicate. Truths are solved once per grid point on that design.
//! Replicate `r` draws its data and its chains from streams indexed by `r`,
//! so every grid point and prior sees common random numbers.

use std::sync::Arc;

use log::{info, warn};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{hpd_interval, mean_sd};
use crate::closedform::{nn_posterior, ClosedFormError, NnKind, NormalNormalSetup};
use crate::glm::{Dataset, GlmError, GlmFamily, GlmParams};
use crate::linalg::{Matrix, Vector};
use crate::priors::{empirical_omega, InitialPrior, PriorError, PriorKind, PriorSpec};
use crate::sampler::{sample_posterior, McmcConfig, RngStream, SamplerError};
use crate::transform::{map_params_with_shift, standardize, Direction, Side, TransformContext, TransformError};

/// Failure fraction above which a cell's metrics are reported as NaN.
pub const MAX_CELL_FAILURE_RATE: f64 = 0.01;

/// Column of the current-model coefficient tracked by the metrics.
pub const TARGET_COEF: usize = 1;

/// Stream offset separating chain randomness from data randomness.
const CHAIN_STREAM_OFFSET: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("truth solve failed at x = {x}: {source}")]
    TruthSolve { x: f64, source: TransformError },
    #[error(transparent)]
    Glm(#[from] GlmError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    ClosedForm(#[from] ClosedFormError),
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioName {
    NormalNormal,
    BinaryPoisson,
    BinaryNormalViolated,
    BinaryNormalHolds,
    PoissonExponential,
}

impl ScenarioName {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioName::NormalNormal => "normal-normal",
            ScenarioName::BinaryPoisson => "binary-poisson",
            ScenarioName::BinaryNormalViolated => "binary-normal-violated",
            ScenarioName::BinaryNormalHolds => "binary-normal-holds",
            ScenarioName::PoissonExponential => "poisson-exponential",
        }
    }
}

/// `ω₀` for a simulated Gen-straPP: a number or `"empirical"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Omega0 {
    Fixed(f64),
    Empirical,
}

impl Serialize for Omega0 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Omega0::Fixed(v) => s.serialize_f64(*v),
            Omega0::Empirical => s.serialize_str("empirical"),
        }
    }
}

impl<'de> Deserialize<'de> for Omega0 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Omega0::Fixed(v)),
            Raw::Text(t) if t == "empirical" => Ok(Omega0::Empirical),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("omega0 must be a number or \"empirical\", got {t:?}"))),
        }
    }
}

/// A prior in a scenario's comparison list; `a₀` comes from the scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SimPrior {
    #[serde(alias = "uip")]
    UniformImproper,
    #[serde(alias = "pp")]
    PowerPrior,
    #[serde(alias = "app")]
    AsymptoticPp,
    #[serde(alias = "com")]
    Commensurate { b0: f64 },
    #[serde(rename = "strapp")]
    StraPp,
    #[serde(rename = "gen-strapp", alias = "gs")]
    GenStraPp { omega0: Omega0 },
}

impl SimPrior {
    pub fn label(&self) -> &'static str {
        match self {
            SimPrior::UniformImproper => "UIP",
            SimPrior::PowerPrior => "PP",
            SimPrior::AsymptoticPp => "APP",
            SimPrior::Commensurate { .. } => "COM",
            SimPrior::StraPp => "straPP",
            SimPrior::GenStraPp { .. } => "GS",
        }
    }

    pub fn hyper(&self) -> String {
        match self {
            SimPrior::Commensurate { b0 } => format!("b0={b0}"),
            SimPrior::GenStraPp { omega0: Omega0::Fixed(w) } => format!("omega0={w}"),
            SimPrior::GenStraPp { omega0: Omega0::Empirical } => "omega0=empirical".into(),
            _ => "NA".into(),
        }
    }

    fn kind(&self, a0: f64, omega_e: impl FnOnce() -> Result<f64, PriorError>) -> Result<PriorKind, PriorError> {
        Ok(match *self {
            SimPrior::UniformImproper => PriorKind::UniformImproper,
            SimPrior::PowerPrior => PriorKind::PowerPrior { a0 },
            SimPrior::AsymptoticPp => PriorKind::AsymptoticPp { a0 },
            SimPrior::Commensurate { b0 } => PriorKind::Commensurate { b0 },
            SimPrior::StraPp => PriorKind::StraPp { a0 },
            SimPrior::GenStraPp { omega0: Omega0::Fixed(w) } => PriorKind::GenStraPp { a0, omega0: w },
            SimPrior::GenStraPp { omega0: Omega0::Empirical } => PriorKind::GenStraPp { a0, omega0: omega_e()?.max(1e-8) },
        })
    }
}

/// What the grid value `x` sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "kebab-case")]
pub enum GridTarget {
    /// A coefficient of the given side.
    Coefficient(usize),
    /// A coordinate of the shift `c₀`.
    Shift(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: ScenarioName,
    pub hist_family: GlmFamily,
    pub curr_family: GlmFamily,
    pub n0: usize,
    pub n1: usize,
    pub a0: f64,
    pub include_age: bool,
    pub borrowed: Vec<usize>,
    /// The side whose coefficients are specified; the other is solved.
    pub given: Side,
    pub given_beta: Vec<f64>,
    /// Unborrowed coefficients of the solved side, in index order.
    pub solved_unborrowed: Vec<f64>,
    pub grid_target: GridTarget,
    pub grid: Vec<f64>,
    pub priors: Vec<SimPrior>,
    pub replicates: usize,
    pub base_seed: u64,
    pub mcmc: McmcConfig,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_level")]
    pub level: f64,
}

fn default_workers() -> usize {
    1
}

fn default_level() -> f64 {
    0.95
}

/// Evenly spaced points on `[lo, hi]`, or on `[lo, hi)` when `open`.
pub fn linspace(lo: f64, hi: f64, n: usize, open: bool) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => {
            let div = if open { n } else { n - 1 } as f64;
            (0..n).map(|k| lo + (hi - lo) * k as f64 / div).collect()
        }
    }
}

/// Default number of grid points when the config leaves the grid open.
pub const DEFAULT_GRID_POINTS: usize = 7;

/// Desk-scale replicate and draw counts.
pub const DESK_REPLICATES: usize = 500;
pub const DESK_DRAWS: usize = 10_000;
/// Paper-scale replicate and draw counts.
pub const PAPER_REPLICATES: usize = 5_000;
pub const PAPER_DRAWS: usize = 25_000;

fn sims(b0s: &[f64], omegas: &[Omega0], base: &[SimPrior]) -> Vec<SimPrior> {
    let mut v = base.to_vec();
    v.extend(omegas.iter().map(|&omega0| SimPrior::GenStraPp { omega0 }));
    v.extend(b0s.iter().map(|&b0| SimPrior::Commensurate { b0 }));
    v
}

impl Scenario {
    /// The scenario with its published inputs at desk scale.
    pub fn preset(name: ScenarioName) -> Scenario {
        use SimPrior::*;
        let known = |s: f64| GlmFamily::NormalKnownVariance { sigma: s };
        let main4 = [UniformImproper, PowerPrior, AsymptoticPp, StraPp];
        let fixed = |ws: &[f64]| ws.iter().map(|&w| Omega0::Fixed(w)).collect::<Vec<_>>();
        let mcmc = McmcConfig::new(DESK_DRAWS, 5_000);
        let base = Scenario {
            name,
            hist_family: known(3.0),
            curr_family: known(1.0),
            n0: 50,
            n1: 100,
            a0: 0.5,
            include_age: false,
            borrowed: vec![0, 1],
            given: Side::Curr,
            given_beta: vec![1.0, 0.0],
            solved_unborrowed: vec![],
            grid_target: GridTarget::Coefficient(1),
            grid: linspace(0.0, 1.8, DEFAULT_GRID_POINTS, false),
            priors: main4.to_vec(),
            replicates: DESK_REPLICATES,
            base_seed: 1,
            mcmc,
            workers: 1,
            level: 0.95,
        };
        match name {
            ScenarioName::NormalNormal => base,
            ScenarioName::BinaryPoisson => Scenario {
                hist_family: GlmFamily::BernoulliLogit,
                curr_family: GlmFamily::PoissonLog,
                n0: 150,
                n1: 150,
                a0: 1.0,
                include_age: true,
                borrowed: vec![1, 2],
                given_beta: vec![0.2, 0.0, -0.1],
                solved_unborrowed: vec![-0.6],
                grid: linspace(0.05, 0.35, DEFAULT_GRID_POINTS, true),
                priors: sims(&[1.0, 8.0, 16.0], &fixed(&[1.0, 2.0, 4.0]), &main4),
                ..base
            },
            ScenarioName::BinaryNormalViolated => Scenario {
                hist_family: GlmFamily::BernoulliLogit,
                curr_family: known(2.0),
                n0: 100,
                n1: 50,
                a0: 1.0,
                given: Side::Hist,
                given_beta: vec![0.5, 0.25],
                grid_target: GridTarget::Shift(1),
                grid: linspace(-1.5, 1.5, DEFAULT_GRID_POINTS, false),
                priors: sims(&[2.0, 4.0, 8.0], &[Omega0::Fixed(1.0), Omega0::Fixed(4.0), Omega0::Empirical], &[StraPp]),
                ..base
            },
            ScenarioName::BinaryNormalHolds => Scenario {
                hist_family: GlmFamily::BernoulliLogit,
                curr_family: known(2.0),
                n0: 100,
                n1: 50,
                a0: 1.0,
                given: Side::Hist,
                given_beta: vec![0.5, 0.0],
                grid: linspace(0.0, 2.0, DEFAULT_GRID_POINTS, false),
                priors: sims(&[2.0, 4.0, 8.0], &fixed(&[0.1, 0.5, 1.0]), &main4),
                ..base
            },
            ScenarioName::PoissonExponential => Scenario {
                hist_family: GlmFamily::PoissonLog,
                curr_family: GlmFamily::ExponentialLog,
                n0: 100,
                n1: 100,
                a0: 1.0,
                include_age: true,
                borrowed: vec![1, 2],
                given: Side::Hist,
                given_beta: vec![0.55, 0.0, 0.1],
                solved_unborrowed: vec![0.25],
                grid: linspace(-0.35, 0.5, DEFAULT_GRID_POINTS, false),
                priors: sims(&[2.0, 4.0, 8.0], &fixed(&[0.1, 0.5, 1.0]), &main4),
                ..base
            },
        }
    }

    /// Switches replicate and draw counts to the published scale.
    pub fn paper_scale(mut self) -> Self {
        self.replicates = PAPER_REPLICATES;
        self.mcmc.draws = PAPER_DRAWS;
        self
    }

    pub fn p(&self) -> usize {
        2 + self.include_age as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        let p = self.p();
        if self.given_beta.len() != p {
            return bad(format!("given_beta has {} entries, design has {p} columns", self.given_beta.len()));
        }
        if self.solved_unborrowed.len() != p - self.borrowed.len() {
            return bad("solved_unborrowed must cover every unborrowed coordinate".into());
        }
        if self.n0 < 2 * p || self.n1 < 2 * p {
            return bad("sample sizes too small for the design".into());
        }
        if !(0.0..=1.0).contains(&self.a0) {
            return bad(format!("a0 = {} outside [0, 1]", self.a0));
        }
        match self.grid_target {
            GridTarget::Coefficient(j) if j >= p => return bad("grid coefficient out of range".into()),
            GridTarget::Shift(k) if k >= self.borrowed.len() => return bad("grid shift coordinate out of range".into()),
            _ => {}
        }
        if self.mcmc.draws < 20 {
            return bad("at least 20 draws are needed for HPD intervals".into());
        }
        if self.workers == 0 {
            return bad("workers must be positive".into());
        }
        Ok(())
    }

    /// Fixed design for one side: intercept, treatment on the first `⌊n/2⌋`
    /// rows, and optionally a standard-normal age column drawn from seed 0.
    pub fn design(&self, side: Side) -> Matrix {
        let n = match side {
            Side::Hist => self.n0,
            Side::Curr => self.n1,
        };
        let mut rng = RngStream::new(0, side as u64).rng();
        let age: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Matrix::from_fn(n, self.p(), |i, j| match j {
            0 => 1.0,
            1 => (i < n / 2) as u8 as f64,
            _ => age[i],
        })
    }

    pub fn context(&self) -> Result<TransformContext, SimError> {
        TransformContext::new(self.hist_family, self.curr_family, Arc::new(self.design(Side::Hist)), self.borrowed.clone())
            .map_err(|e| SimError::InvalidScenario(e.to_string()))
    }
}

/// Partial scenario read from a config file; unset fields keep the preset.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub preset: Option<ScenarioName>,
    pub sigma0: Option<f64>,
    pub sigma1: Option<f64>,
    pub n0: Option<usize>,
    pub n1: Option<usize>,
    pub a0: Option<f64>,
    pub grid: Option<Vec<f64>>,
    pub grid_points: Option<usize>,
    pub priors: Option<Vec<SimPrior>>,
    pub replicates: Option<usize>,
    pub base_seed: Option<u64>,
    pub draws: Option<usize>,
    pub burn_in: Option<usize>,
    pub workers: Option<usize>,
    pub paper_scale: Option<bool>,
}

impl ScenarioConfig {
    pub fn resolve(&self) -> Result<Scenario, SimError> {
        let name = self.preset.ok_or_else(|| SimError::InvalidScenario("preset is required".into()))?;
        let mut s = Scenario::preset(name);
        if self.paper_scale == Some(true) {
            s = s.paper_scale();
        }
        let known = |sig: f64| GlmFamily::normal_known(sig).map_err(|e| SimError::InvalidScenario(e.to_string()));
        if let Some(v) = self.sigma0 {
            if !s.hist_family.is_normal() {
                return Err(SimError::InvalidScenario("sigma0 applies only to a normal historical model".into()));
            }
            s.hist_family = known(v)?;
        }
        if let Some(v) = self.sigma1 {
            if !s.curr_family.is_normal() {
                return Err(SimError::InvalidScenario("sigma1 applies only to a normal current model".into()));
            }
            s.curr_family = known(v)?;
        }
        if let Some(k) = self.grid_points {
            let (lo, hi) = (s.grid[0], *s.grid.last().unwrap());
            let open = name == ScenarioName::BinaryPoisson;
            let hi = if open { 0.35 } else { hi };
            s.grid = linspace(lo, hi, k, open);
        }
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f.clone() { s.$f = v; } )* };
        }
        set!(n0, n1, a0, grid, priors, replicates, base_seed, workers);
        if let Some(d) = self.draws {
            s.mcmc.draws = d;
        }
        if let Some(b) = self.burn_in {
            s.mcmc.burn_in = b;
        }
        s.validate()?;
        Ok(s)
    }
}

/// True parameters at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub x: f64,
    pub hist: GlmParams,
    pub curr: GlmParams,
    pub c0: Vec<f64>,
}

/// Solves the unspecified side so `s₀(η) = s₁(θ) + c₀` holds on the
/// scenario's historical design.
pub fn solve_truth(scenario: &Scenario, x: f64) -> Result<Truth, SimError> {
    scenario.validate()?;
    let ctx = scenario.context()?;
    let p = scenario.p();
    let mut given = scenario.given_beta.clone();
    let mut c0 = vec![0.0; scenario.borrowed.len()];
    match scenario.grid_target {
        GridTarget::Coefficient(j) => given[j] = x,
        GridTarget::Shift(k) => c0[k] = x,
    }
    let c0v = Vector::from_vec(c0.clone());
    let mut template = Vector::zeros(p);
    for (a, j) in ctx.unborrowed().into_iter().enumerate() {
        template[j] = scenario.solved_unborrowed[a];
    }
    let (given_fam, solved_fam, dir) = match scenario.given {
        Side::Curr => (scenario.curr_family, scenario.hist_family, Direction::CurrToHist),
        Side::Hist => (scenario.hist_family, scenario.curr_family, Direction::HistToCurr),
    };
    let g = GlmParams::from_slice(&given_fam, &given);
    let t = GlmParams::from_slice(&solved_fam, template.as_slice());
    let solved = map_params_with_shift(&ctx, &g, dir, Some(&t), &c0v).map_err(|source| SimError::TruthSolve { x, source })?;
    let (hist, curr) = match scenario.given {
        Side::Curr => (solved, g),
        Side::Hist => (g, solved),
    };
    let res = (standardize(&ctx, Side::Hist, &hist).and_then(|s0| Ok(s0 - standardize(&ctx, Side::Curr, &curr)? - &c0v)))
        .map_err(|source| SimError::TruthSolve { x, source })?
        .amax();
    if res > 1e-10 {
        return Err(SimError::TruthSolve { x, source: TransformError::NonConvergence { best_residual: res } });
    }
    Ok(Truth { x, hist, curr, c0 })
}

/// Draws responses for one side at the truth on the scenario's design.
pub fn generate_dataset<R: Rng + ?Sized>(scenario: &Scenario, side: Side, truth: &Truth, rng: &mut R) -> Result<Dataset, SimError> {
    let (fam, params) = match side {
        Side::Hist => (&scenario.hist_family, &truth.hist),
        Side::Curr => (&scenario.curr_family, &truth.curr),
    };
    generate_on(fam, params, scenario.design(side), rng)
}

fn generate_on<R: Rng + ?Sized>(fam: &GlmFamily, params: &GlmParams, x: Matrix, rng: &mut R) -> Result<Dataset, SimError> {
    let eta = &x * &params.beta;
    let y = eta.map(|e| fam.sample(e, params.phi, rng));
    Ok(Dataset::for_family(y, x, fam)?)
}

/// Aggregated performance of one prior at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario: String,
    pub prior: String,
    pub hyper: String,
    pub x: f64,
    pub avg_log_var: f64,
    pub bias: f64,
    pub log_mse: f64,
    pub coverage: f64,
    pub n_fail: usize,
}

/// Posterior summary of the tracked coefficient for one replicate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplicateOutcome {
    pub mean: f64,
    pub var: f64,
    pub covered: bool,
}

fn summarize_target(draws: &mut [f64], truth: f64, level: f64) -> Option<ReplicateOutcome> {
    let (mean, sd) = mean_sd(draws);
    draws.sort_by(f64::total_cmp);
    let (lo, hi) = hpd_interval(draws, level).ok()?;
    Some(ReplicateOutcome { mean, var: sd * sd, covered: lo <= truth && truth <= hi })
}

/// Aggregates replicate outcomes; NaN metrics when more than 1% failed.
pub fn aggregate(scenario: &str, prior: &SimPrior, x: f64, truth: f64, outcomes: &[Option<ReplicateOutcome>]) -> MetricsRow {
    let ok: Vec<&ReplicateOutcome> = outcomes.iter().flatten().collect();
    let n_fail = outcomes.len() - ok.len();
    let invalid = ok.is_empty() || n_fail as f64 > MAX_CELL_FAILURE_RATE * outcomes.len() as f64;
    if n_fail > 0 {
        warn!("{scenario} {} {} x={x}: {n_fail} of {} replicates failed", prior.label(), prior.hyper(), outcomes.len());
    }
    let (avg_log_var, bias, log_mse, coverage) = if invalid {
        (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
    } else {
        let n = ok.len() as f64;
        let mean_est = ok.iter().map(|o| o.mean).sum::<f64>() / n;
        let mse = ok.iter().map(|o| (o.mean - truth).powi(2)).sum::<f64>() / n;
        (
            ok.iter().map(|o| o.var.ln()).sum::<f64>() / n,
            mean_est - truth,
            mse.ln(),
            ok.iter().filter(|o| o.covered).count() as f64 / n,
        )
    };
    MetricsRow {
        scenario: scenario.into(),
        prior: prior.label().into(),
        hyper: prior.hyper(),
        x,
        avg_log_var,
        bias,
        log_mse,
        coverage,
        n_fail,
    }
}

/// Fits every prior of the scenario to one simulated data pair.
fn run_replicate(scenario: &Scenario, ctx: &TransformContext, truth: &Truth, rep: usize) -> Vec<Option<ReplicateOutcome>> {
    let mut rng = RngStream::new(scenario.base_seed, rep as u64).rng();
    let data = generate_dataset(scenario, Side::Hist, truth, &mut rng)
        .and_then(|h| Ok((h, generate_dataset(scenario, Side::Curr, truth, &mut rng)?)));
    let (hist, curr) = match data {
        Ok(d) => d,
        Err(e) => {
            warn!("replicate {rep}: data generation failed: {e}");
            return vec![None; scenario.priors.len()];
        }
    };
    let chain_stream = RngStream::new(scenario.base_seed, CHAIN_STREAM_OFFSET + rep as u64);
    let target = truth.curr.beta[TARGET_COEF];
    scenario
        .priors
        .iter()
        .map(|prior| {
            let run = || -> Result<Option<ReplicateOutcome>, SimError> {
                let kind = prior.kind(scenario.a0, || empirical_omega(&hist, &curr, ctx))?;
                let spec = PriorSpec::new(kind, ctx.clone(), InitialPrior::UniformImproper, None, &hist)?;
                let chain = sample_posterior(&spec, &hist, &curr, &scenario.mcmc, chain_stream)?;
                let mut col = chain.column(&format!("beta1[{TARGET_COEF}]")).expect("current coefficients are recorded");
                Ok(summarize_target(&mut col, target, scenario.level))
            };
            run().unwrap_or_else(|e| {
                warn!("replicate {rep} {} {}: {e}", prior.label(), prior.hyper());
                None
            })
        })
        .collect()
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, SimError> {
    rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().map_err(|e| SimError::Pool(e.to_string()))
}

/// Runs every grid point × prior × replicate and aggregates one row per
/// (grid point, prior), grid-major.
pub fn run_scenario(scenario: &Scenario) -> Result<Vec<MetricsRow>, SimError> {
    scenario.validate()?;
    if scenario.replicates == 0 {
        return Ok(vec![]);
    }
    let ctx = scenario.context()?;
    let truths: Vec<Truth> = scenario.grid.iter().map(|&x| solve_truth(scenario, x)).collect::<Result<_, _>>()?;
    let jobs: Vec<(usize, usize)> = (0..truths.len()).flat_map(|g| (0..scenario.replicates).map(move |r| (g, r))).collect();
    info!(
        "{}: {} grid points × {} priors × {} replicates on {} workers",
        scenario.name.as_str(),
        truths.len(),
        scenario.priors.len(),
        scenario.replicates,
        scenario.workers
    );
    let results: Vec<Vec<Option<ReplicateOutcome>>> =
        pool(scenario.workers)?.install(|| jobs.par_iter().map(|&(g, r)| run_replicate(scenario, &ctx, &truths[g], r)).collect());
    let mut rows = Vec::with_capacity(truths.len() * scenario.priors.len());
    for (g, truth) in truths.iter().enumerate() {
        let cell = &results[g * scenario.replicates..(g + 1) * scenario.replicates];
        for (k, prior) in scenario.priors.iter().enumerate() {
            let outcomes: Vec<Option<ReplicateOutcome>> = cell.iter().map(|r| r[k]).collect();
            rows.push(aggregate(scenario.name.as_str(), prior, truth.x, truth.curr.beta[TARGET_COEF], &outcomes));
        }
    }
    Ok(rows)
}

/// Closed-form posterior means under straPP and PP for normal-normal
/// replicates generated at `β₁` and `β₀ = (σ₀/σ₁)β₁`.
pub fn nn_closed_form_replicates(
    setup: &NormalNormalSetup,
    beta1: &Vector,
    replicates: usize,
    stream: RngStream,
) -> Result<Vec<(Vector, Vector)>, SimError> {
    let mut rng = stream.rng();
    let beta0 = beta1 * (setup.sigma0 / setup.sigma1);
    let m0 = &setup.x0 * &beta0;
    let m1 = &setup.x1 * beta1;
    (0..replicates)
        .map(|_| {
            let y0 = m0.map(|m| m + setup.sigma0 * rng.sample::<f64, _>(StandardNormal));
            let y1 = m1.map(|m| m + setup.sigma1 * rng.sample::<f64, _>(StandardNormal));
            let s = setup.clone().with_responses(y0, y1)?;
            Ok((nn_posterior(&s, NnKind::StraPp)?.mean, nn_posterior(&s, NnKind::PowerPrior)?.mean))
        })
        .collect()
}

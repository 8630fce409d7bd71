use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use strapp::closedform::{mse_threshold, Threshold};
use strapp::io::{write_metrics_csv, write_results, AnalysisConfig, IoError, Provenance};
use strapp::sampler::McmcConfig;
use strapp::simharness::{run_scenario, Scenario, ScenarioConfig, ScenarioName};
use strapp::workflow::{dic_grid, fit_cells, FitInputs, GridCell, RunSettings};
use strapp::{Error, EXIT_VALIDATION};

#[derive(Parser, Debug)]
#[command(name = "strapp", version, about = "Scale transformed power priors for GLMs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit each configured prior and write posterior summaries.
    Fit(RunArgs),
    /// DIC over the configured a0 x omega0 grid.
    DicGrid(RunArgs),
    /// Run a simulation scenario and write its metrics table.
    Simulate(SimArgs),
    /// MSE threshold on the percent bias for the normal-normal model.
    Threshold(ThresholdArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Analysis config (TOML).
    #[arg(long, env = "STRAPP_CONFIG")]
    config: PathBuf,
    #[arg(long, env = "STRAPP_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "STRAPP_DRAWS")]
    draws: Option<usize>,
    #[arg(long, env = "STRAPP_BURN_IN")]
    burn_in: Option<usize>,
    #[arg(long, env = "STRAPP_CHAINS")]
    chains: Option<usize>,
    #[arg(long, env = "STRAPP_WORKERS", default_value_t = 1)]
    workers: usize,
    /// Overrides the config's output directory.
    #[arg(long, env = "STRAPP_OUTPUT")]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimArgs {
    /// Scenario config (TOML); `--preset` alone runs a preset unchanged.
    #[arg(long, env = "STRAPP_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_preset)]
    preset: Option<ScenarioName>,
    #[arg(long, env = "STRAPP_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "STRAPP_DRAWS")]
    draws: Option<usize>,
    #[arg(long, env = "STRAPP_BURN_IN")]
    burn_in: Option<usize>,
    #[arg(long, env = "STRAPP_REPLICATES")]
    replicates: Option<usize>,
    #[arg(long, env = "STRAPP_WORKERS")]
    workers: Option<usize>,
    /// Use the publication-size replicate and draw counts.
    #[arg(long, env = "STRAPP_PAPER_SCALE")]
    paper_scale: bool,
    /// Metrics CSV path; printed to stdout when omitted.
    #[arg(long, env = "STRAPP_OUTPUT")]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ThresholdArgs {
    #[arg(long, default_value_t = 50)]
    n0: usize,
    #[arg(long, default_value_t = 100)]
    n1: usize,
    #[arg(long, default_value_t = 0.5)]
    a0: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma0: f64,
    #[arg(long, default_value_t = 3.0)]
    sigma1: f64,
}

fn parse_preset(s: &str) -> Result<ScenarioName, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| {
        "expected one of normal-normal, binary-poisson, binary-normal-violated, binary-normal-holds, poisson-exponential".into()
    })
}

#[derive(Serialize)]
struct RunProvenance<'a> {
    config: &'a AnalysisConfig,
    run: &'a RunSettings,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Io(IoError::Config(msg.into()))
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(IoError::IoFailure { path: path.display().to_string(), message: e.to_string() })
}

fn load_run(args: &RunArgs) -> Result<(AnalysisConfig, RunSettings), Error> {
    let mut cfg = AnalysisConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.mcmc.seed = s;
    }
    if let Some(d) = args.draws {
        cfg.mcmc.draws = d;
    }
    if let Some(b) = args.burn_in {
        cfg.mcmc.burn_in = b;
    }
    if let Some(c) = args.chains {
        cfg.mcmc.chains = c;
    }
    if let Some(o) = &args.output {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    let run = RunSettings {
        mcmc: McmcConfig::new(cfg.mcmc.draws, cfg.mcmc.burn_in),
        seed: cfg.mcmc.seed,
        chains: cfg.mcmc.chains,
        workers: args.workers,
        level: cfg.level,
    };
    Ok((cfg, run))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("NA".into(), |d| format!("{d:.3}"))
}

fn cmd_fit(args: &RunArgs) -> Result<(), Error> {
    let (cfg, run) = load_run(args)?;
    if cfg.priors.is_empty() {
        return Err(config_err("no priors configured"));
    }
    let inputs = FitInputs::from_config(&cfg)?;
    let results = fit_cells(&inputs, &cfg.priors, &run)?;
    let mut cells = Vec::new();
    let mut first_err = None;
    let mut out = std::io::stdout().lock();
    for (kind, res) in cfg.priors.iter().zip(results) {
        match res {
            Ok(cell) => {
                let s = &cell.summary;
                let _ = writeln!(out, "{} {}  DIC {}  acceptance {:.3}", cell.label, cell.hyper, fmt_opt(s.dic), s.acceptance_rate);
                for j in 0..s.names.len() {
                    let _ = writeln!(
                        out,
                        "  {:<16} {:>11.5} {:>10.5}  [{:.5}, {:.5}]",
                        s.names[j], s.mean[j], s.sd[j], s.hpd_lower[j], s.hpd_upper[j]
                    );
                }
                cells.push(cell);
            }
            Err(e) => {
                let _ = writeln!(out, "{} {}  failed: {e}", kind.label(), kind.hyper());
                first_err.get_or_insert(e);
            }
        }
    }
    let prov = Provenance::new(&RunProvenance { config: &cfg, run: &run }, run.seed);
    write_results(&cells, &cfg.output_dir, &prov)?;
    match first_err {
        Some(e) if cells.is_empty() => Err(e),
        _ => Ok(()),
    }
}

fn write_grid(cells: &[GridCell], path: &Path, prov: &Provenance) -> Result<(), Error> {
    let mut text = format!("# {}\n", serde_json::to_string(prov).map_err(|e| io_err(path, e))?);
    text.push_str("a0,omega0,prior,dic,dic_mcse\n");
    for c in cells {
        let na = |v: Option<f64>| v.map_or("NA".into(), |d| d.to_string());
        text.push_str(&format!("{},{},{},{},{}\n", c.a0, c.omega0, c.prior, na(c.dic), na(c.dic_mcse)));
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn cmd_dic_grid(args: &RunArgs) -> Result<(), Error> {
    let (cfg, run) = load_run(args)?;
    let grid = cfg.grid.clone().ok_or_else(|| config_err("dic-grid needs a [grid] section"))?;
    let inputs = FitInputs::from_config(&cfg)?;
    let cells = dic_grid(&inputs, &grid.a0, &grid.omega0, &run)?;
    let mut out = std::io::stdout().lock();
    let _ = write!(out, "{:>8}", "omega0");
    for a in &grid.a0 {
        let _ = write!(out, " {:>11}", format!("a0={a}"));
    }
    let _ = writeln!(out);
    for (i, w) in grid.omega0.iter().enumerate() {
        let label = if *w == 0.0 { "0*".to_string() } else { w.to_string() };
        let _ = write!(out, "{label:>8}");
        for c in &cells[i * grid.a0.len()..(i + 1) * grid.a0.len()] {
            let _ = write!(out, " {:>11}", fmt_opt(c.dic));
        }
        let _ = writeln!(out);
    }
    fs::create_dir_all(&cfg.output_dir).map_err(|e| io_err(&cfg.output_dir, e))?;
    let prov = Provenance::new(&RunProvenance { config: &cfg, run: &run }, run.seed);
    write_grid(&cells, &cfg.output_dir.join("dic_grid.csv"), &prov)
}

fn resolve_scenario(args: &SimArgs) -> Result<Scenario, Error> {
    let mut sc = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            toml::from_str::<ScenarioConfig>(&text).map_err(|e| config_err(e.to_string()))?
        }
        None => ScenarioConfig::default(),
    };
    if args.preset.is_some() {
        sc.preset = args.preset;
    }
    if sc.preset.is_none() {
        return Err(config_err("simulate needs --preset or a config with `preset`"));
    }
    if args.paper_scale {
        sc.paper_scale = Some(true);
    }
    sc.base_seed = args.seed.or(sc.base_seed);
    sc.draws = args.draws.or(sc.draws);
    sc.burn_in = args.burn_in.or(sc.burn_in);
    sc.replicates = args.replicates.or(sc.replicates);
    sc.workers = args.workers.or(sc.workers);
    Ok(sc.resolve()?)
}

fn cmd_simulate(args: &SimArgs) -> Result<(), Error> {
    let scenario = resolve_scenario(args)?;
    log::info!(
        "{}: {} grid points x {} replicates x {} priors, {} draws",
        scenario.name.as_str(),
        scenario.grid.len(),
        scenario.replicates,
        scenario.priors.len(),
        scenario.mcmc.draws
    );
    let rows = run_scenario(&scenario)?;
    let prov = Provenance::new(&scenario, scenario.base_seed);
    match &args.output {
        Some(p) => {
            let f = fs::File::create(p).map_err(|e| io_err(p, e))?;
            write_metrics_csv(&rows, std::io::BufWriter::new(f), Some(&prov))?;
            println!("wrote {} rows to {}", rows.len(), p.display());
        }
        None => write_metrics_csv(&rows, std::io::stdout().lock(), Some(&prov))?,
    }
    Ok(())
}

fn cmd_threshold(a: &ThresholdArgs) -> Result<(), Error> {
    match mse_threshold(a.n0, a.n1, a.a0, a.sigma0, a.sigma1)? {
        Threshold::Crossing(t) => println!("{t:.5}"),
        Threshold::NoCrossing => println!("none"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("STRAPP_LOG", "info")).init();
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::DicGrid(a) => cmd_dic_grid(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Threshold(a) => cmd_threshold(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = e.exit_code();
            debug_assert!(code == EXIT_VALIDATION || code == strapp::EXIT_NUMERICAL);
            ExitCode::from(code as u8)
        }
    }
}

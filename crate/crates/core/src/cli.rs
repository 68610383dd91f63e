//! Command-line front end.
//!
//! Failures print one line to stderr, `error kind=<config|data|numeric> code=<n>: <message>`,
//! and exit with 2, 3 or 4 respectively.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::ensemble::{ForecastCase, ReforecastCase};
use crate::error::{Error, ErrorClass, Result};
use crate::io;
use crate::pipeline::{run_emos_stage, run_qm_stage, scoring, split_by_lead, EmosOutput, Evaluation, LeadCases, QmOutput};
use crate::synth;

#[derive(Debug, Parser)]
#[command(name = "csg-emos", version, about = "Dual-resolution ensemble post-processing and verification")]
struct Cli {
    /// TOML configuration file.
    #[arg(short, long, global = true, env = "CSGEMOS_CONFIG")]
    config: Option<PathBuf>,
    /// Override a configuration entry, e.g. `--set emos.window_days=20`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(short, long, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true)]
    forecasts: Option<PathBuf>,
    #[arg(long, global = true)]
    observations: Option<PathBuf>,
    #[arg(long, global = true)]
    reforecasts: Option<PathBuf>,
    /// Worker threads (0 = all cores). Results do not depend on this.
    #[arg(short = 'j', long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dual-resolution dataset with reforecasts.
    Simulate,
    /// Cluster locations per training window and fit semi-local EMOS.
    Fit,
    /// Quantile-map forecasts against the reforecast archive and dump weights.
    Qm,
    /// Score raw and post-processed forecasts.
    Verify,
    /// Cluster locations per training window without fitting.
    Cluster,
    /// Full plot-data bundle: scores, curves, reliability, fits, clusters, weights.
    Report,
    /// Print the effective configuration.
    Config,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), std::env::vars(), &cli.set)?;
    if let Some(o) = &cli.output {
        cfg.paths.output = o.clone();
    }
    if let Some(p) = &cli.forecasts {
        cfg.paths.forecasts = Some(p.clone());
    }
    if let Some(p) = &cli.observations {
        cfg.paths.observations = Some(p.clone());
    }
    if let Some(p) = &cli.reforecasts {
        cfg.paths.reforecasts = Some(p.clone());
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn existing<'a>(path: Option<&'a Path>, key: &str) -> Result<&'a Path> {
    let p = path.ok_or_else(|| Error::Config(format!("paths.{key} is not set")))?;
    if !p.is_file() {
        return Err(Error::Config(format!("paths.{key}: {} does not exist", p.display())));
    }
    Ok(p)
}

fn observations(cfg: &RunConfig) -> Result<Option<&Path>> {
    cfg.paths
        .observations
        .as_deref()
        .map(|p| existing(Some(p), "observations"))
        .transpose()
}

fn read_forecasts(cfg: &RunConfig) -> Result<Vec<ForecastCase>> {
    let path = existing(cfg.paths.forecasts.as_deref(), "forecasts")?;
    let cases = io::read_forecasts(path, observations(cfg)?)?;
    log::info!("read {} forecast cases from {}", cases.len(), path.display());
    Ok(cases)
}

fn read_reforecasts(cfg: &RunConfig) -> Result<Vec<ReforecastCase>> {
    let path = existing(cfg.paths.reforecasts.as_deref(), "reforecasts")?;
    let cases = io::read_reforecasts(path, observations(cfg)?)?;
    log::info!("read {} reforecast cases from {}", cases.len(), path.display());
    Ok(cases)
}

struct Outputs<'a> {
    dir: &'a Path,
    written: Vec<PathBuf>,
}

impl Outputs<'_> {
    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.written.push(p.clone());
        p
    }
}

fn fit_stage(cfg: &RunConfig, leads: &[LeadCases<'_>], fit: bool) -> Result<Vec<EmosOutput>> {
    run_emos_stage(leads, &cfg.pipeline(), fit)
}

fn write_fits(out: &mut Outputs<'_>, emos: &[EmosOutput], coefficients: bool) -> Result<()> {
    if coefficients {
        io::write_coefficients(&out.path("coefficients.csv"), emos.iter().flat_map(|e| &e.coefficients))?;
    }
    io::write_clusters(&out.path("clusters.csv"), emos.iter().flat_map(|e| &e.clusters))
}

fn write_qm(out: &mut Outputs<'_>, cfg: &RunConfig, leads: &[LeadCases<'_>], qm: &[QmOutput]) -> Result<()> {
    io::write_histograms(&out.path("histogram.csv"), qm)?;
    io::write_weights(
        &out.path("weights.csv"),
        leads,
        qm,
        &cfg.mixtures,
        cfg.qm.min_histogram_cases,
        cfg.output.all_weight_dates,
    )
}

fn write_scores(out: &mut Outputs<'_>, leads: &[LeadCases<'_>], eval: &Evaluation, curves: bool) -> Result<()> {
    io::write_report(&out.path("report.csv"), &eval.report)?;
    io::write_reliability(&out.path("reliability.csv"), &eval.reliability)?;
    if curves {
        io::write_curves(&out.path("curves.csv"), &eval.curves)?;
    }
    io::write_json(&out.path("summary.json"), &io::Summary::new(leads, eval))
}

/// Checks that the inputs a command reads exist, so a bad invocation leaves no output behind.
fn check_inputs(cfg: &RunConfig, command: &Command) -> Result<()> {
    if matches!(command, Command::Simulate | Command::Config) {
        return Ok(());
    }
    existing(cfg.paths.forecasts.as_deref(), "forecasts")?;
    observations(cfg)?;
    if matches!(command, Command::Qm) || cfg.paths.reforecasts.is_some() {
        existing(cfg.paths.reforecasts.as_deref(), "reforecasts")?;
    }
    Ok(())
}

fn run_command(cfg: &RunConfig, command: &Command) -> Result<Vec<PathBuf>> {
    check_inputs(cfg, command)?;
    let dir = cfg.paths.output.as_path();
    std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))?;
    let mut out = Outputs { dir, written: Vec::new() };
    std::fs::write(out.path("config.toml"), cfg.to_toml()?)?;
    let pipeline = cfg.pipeline();

    if let Command::Simulate = command {
        let data = synth::generate(&cfg.scenario())?;
        io::write_forecasts(&out.path("forecasts.csv"), &data.forecasts)?;
        io::write_observations(&out.path("observations.csv"), &data.forecasts)?;
        io::write_reforecasts(&out.path("reforecasts.csv"), &data.reforecasts)?;
        return Ok(out.written);
    }

    let cases = read_forecasts(cfg)?;
    let leads = split_by_lead(&cases, cfg.emos.window_days)?;
    match command {
        Command::Cluster => {
            let emos = fit_stage(cfg, &leads, false)?;
            write_fits(&mut out, &emos, false)?;
        }
        Command::Fit => {
            let emos = fit_stage(cfg, &leads, true)?;
            write_fits(&mut out, &emos, true)?;
        }
        Command::Qm => {
            let reforecasts = read_reforecasts(cfg)?;
            let qm = run_qm_stage(&leads, &reforecasts, &pipeline)?;
            io::write_qm_forecasts(&out.path("qm_forecasts.csv"), &leads, &qm)?;
            write_qm(&mut out, cfg, &leads, &qm)?;
        }
        Command::Verify | Command::Report => {
            let emos = fit_stage(cfg, &leads, true)?;
            let reforecasts = match cfg.paths.reforecasts {
                Some(_) => Some(read_reforecasts(cfg)?),
                None => {
                    log::warn!("paths.reforecasts is not set; QM and QM+W are not verified");
                    None
                }
            };
            let qm = reforecasts
                .as_deref()
                .map(|r| run_qm_stage(&leads, r, &pipeline))
                .transpose()?;
            let eval = scoring::evaluate(&leads, &emos, qm.as_deref(), &pipeline)?;
            let report = matches!(command, Command::Report);
            write_scores(&mut out, &leads, &eval, report)?;
            if report {
                write_fits(&mut out, &emos, true)?;
                if let Some(qm) = &qm {
                    write_qm(&mut out, cfg, &leads, qm)?;
                }
            }
        }
        Command::Simulate | Command::Config => unreachable!("handled above"),
    }
    Ok(out.written)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    if let Command::Config = cli.command {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} worker threads: {e}", cfg.threads)))?;
    let written = pool.install(|| run_command(&cfg, &cli.command))?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn report_error(class: ErrorClass, message: &str) -> i32 {
    let line = message.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error kind={} code={}: {line}", class.as_str(), class.exit_code());
    class.exit_code()
}

/// Runs the command line and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("CSGEMOS_LOG", "warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or_default();
            return report_error(ErrorClass::Config, first.trim_start_matches("error: "));
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => report_error(e.class(), &e.to_string()),
    }
}

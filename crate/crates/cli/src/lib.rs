//! Pipeline commands behind the `zcbf` binary. Stages talk to each other
//! through files under the output directory:
//!
//! ```text
//! <out>/datasets/<candidate>.csv, <candidate>.json
//! <out>/bounds/<candidate>.bounds.json
//! <out>/run/ or <out>/run_nofilter/
//! <out>/study.csv, <out>/study.json
//! ```

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use zcbf_core::bounds::{self, EstimateSettings};
use zcbf_core::config::ConfigFile;
use zcbf_core::data;
use zcbf_core::error::Error;
use zcbf_core::sim::{self, Fit};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FAILURE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "zcbf", version, about = "Data-driven ZCBF connectivity maintenance simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll out randomized simulations and write one dataset per barrier candidate.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Filter, reduce and fit Jacobian bounds for every dataset.
    FitBounds {
        #[command(flatten)]
        common: Common,
        /// Overrides `bounds.scale` from the config.
        #[arg(long)]
        scale: Option<f64>,
    },
    /// Run the closed loop with the fitted bounds.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Apply the nominal controller directly.
        #[arg(long)]
        no_filter: bool,
    },
    /// Run the dataset-size and bound-scale study.
    Study {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Defaults to `outputs.directory` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failure(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidParameter(_) => CliError::Usage(e.to_string()),
            _ => CliError::Failure(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failure(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn load(common: &Common) -> CliResult<(ConfigFile, PathBuf)> {
    let cfg = ConfigFile::load(&common.config)?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.outputs.directory));
    Ok((cfg, out))
}

pub fn datasets_dir(out: &Path) -> PathBuf {
    out.join("datasets")
}

pub fn bounds_dir(out: &Path) -> PathBuf {
    out.join("bounds")
}

pub fn cmd_generate(cfg: &ConfigFile, out: &Path, seed: Option<u64>, log: &mut dyn Write) -> CliResult<Vec<PathBuf>> {
    let scn = cfg.scenario()?;
    let spec = cfg.generation_spec(seed, None);
    let raw = data::generate(&scn.model, &scn.candidates, &spec, scn.eps)?;
    let dir = datasets_dir(out);
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    writeln!(log, "{:<14}{:>10}{:>10}{:>10}", "candidate", "raw", "filtered", "reduced")?;
    for ds in &raw {
        let filtered = data::filter_by_barrier(ds, scn.alpha, scn.eps)?;
        let reduced = if filtered.is_empty() {
            0
        } else {
            data::kmeans_reduce(&filtered, cfg.dataset.k.min(filtered.len()), spec.seed)?.len()
        };
        writeln!(log, "{:<14}{:>10}{:>10}{:>10}", ds.candidate.id(), ds.len(), filtered.len(), reduced)?;
        let (c, j) = data::save(ds, &dir)?;
        written.push(c);
        written.push(j);
    }
    Ok(written)
}

pub fn cmd_fit_bounds(cfg: &ConfigFile, out: &Path, scale: Option<f64>, log: &mut dyn Write) -> CliResult<Vec<PathBuf>> {
    let scn = cfg.scenario()?;
    let factor = scale.unwrap_or(cfg.bounds.scale);
    if !(factor > 0.0) {
        return Err(CliError::Usage(format!("scale must be positive, got {factor}")));
    }
    let dir = bounds_dir(out);
    let datasets = scn
        .candidates
        .iter()
        .map(|c| data::load(&datasets_dir(out), &c.id()))
        .collect::<Result<Vec<_>, _>>()?;
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    for raw in &datasets {
        let (fit, summary) = sim::fit_dataset(raw, scn.alpha, scn.eps, cfg.dataset.k, raw.provenance.seed, &EstimateSettings::default())?;
        let b = bounds::scale(&fit.bounds, factor)?;
        let widths: Vec<String> = b.widths().iter().map(|w| format!("{w:.4}")).collect();
        writeln!(
            log,
            "{}: {} samples -> {} filtered -> {} reduced; widths [{}]",
            summary.candidate,
            summary.raw_samples,
            summary.filtered_samples,
            summary.reduced_samples,
            widths.join(", ")
        )?;
        written.push(bounds::save(&b, &dir)?);
    }
    Ok(written)
}

/// Load datasets and bounds written by the earlier stages.
pub fn load_fits(cfg: &ConfigFile, out: &Path) -> CliResult<Vec<Fit>> {
    let scn = cfg.scenario()?;
    scn.candidates
        .iter()
        .map(|c| {
            let raw = data::load(&datasets_dir(out), &c.id())?;
            let path = bounds::bounds_path(&bounds_dir(out), &c.id());
            if !path.exists() {
                return Err(CliError::Usage(format!("missing bounds for candidate {}", c.id())));
            }
            let b = bounds::load(&bounds_dir(out), &c.id())?;
            Ok(Fit {
                dataset: data::filter_by_barrier(&raw, scn.alpha, scn.eps)?,
                bounds: b,
            })
        })
        .collect()
}

/// Returns the run metrics; the caller maps violations to the exit code.
pub fn cmd_simulate(cfg: &ConfigFile, out: &Path, no_filter: bool, log: &mut dyn Write) -> CliResult<sim::RunMetrics> {
    let mut scn = cfg.scenario()?;
    scn.filter_enabled = !no_filter;
    let fits = if no_filter { Vec::new() } else { load_fits(cfg, out)? };
    let run = sim::run_closed_loop(&scn, &fits)?;
    let dir = out.join(if no_filter { "run_nofilter" } else { "run" });
    sim::write_run(&run, &dir)?;
    let m = &run.metrics;
    writeln!(log, "control cost      {:.6}", m.control_cost)?;
    match m.min_h_after_warmup {
        Some(h) => writeln!(log, "min h after warmup {h:.6}")?,
        None => writeln!(log, "min h after warmup - (raw {:.6})", m.min_h_after_warmup_raw)?,
    }
    writeln!(log, "violation instants {} ({} after warmup)", m.violation_count, m.violations_after_warmup)?;
    if m.uncertified_steps > 0 {
        writeln!(log, "uncertified steps {}", m.uncertified_steps)?;
    }
    if m.violation_flag {
        let first = run
            .h
            .iter()
            .zip(&run.trajectory.times)
            .skip(1)
            .find_map(|(h, t)| h.iter().position(|&v| v < 0.0).map(|c| (t, &run.candidate_ids[c])));
        if let Some((t, id)) = first {
            writeln!(log, "safety violation: {id} negative at t = {t:.3}")?;
        }
    }
    writeln!(log, "outputs in {}", dir.display())?;
    Ok(run.metrics)
}

pub fn cmd_study(cfg: &ConfigFile, out: &Path, log: &mut dyn Write) -> CliResult<sim::StudyTable> {
    let table = sim::run_study(cfg)?;
    fs::create_dir_all(out)?;
    sim::write_study_csv(&table, fs::File::create(out.join("study.csv"))?)?;
    let json = serde_json::to_string_pretty(&table).map_err(|e| CliError::Failure(e.to_string()))?;
    fs::write(out.join("study.json"), json + "\n")?;
    write!(log, "{}", sim::format_study(&table))?;
    for row in &table.rows {
        for r in &row.runs {
            if let Some(e) = &r.error {
                writeln!(log, "{} seed {}: {e}", row.label, r.seed)?;
            }
        }
    }
    Ok(table)
}

fn dispatch(cli: Cli, log: &mut dyn Write) -> CliResult<i32> {
    match cli.command {
        Command::Generate { common, seed } => {
            let (cfg, out) = load(&common)?;
            cmd_generate(&cfg, &out, seed, log)?;
        }
        Command::FitBounds { common, scale } => {
            let (cfg, out) = load(&common)?;
            cmd_fit_bounds(&cfg, &out, scale, log)?;
        }
        Command::Simulate { common, no_filter } => {
            let (cfg, out) = load(&common)?;
            if cmd_simulate(&cfg, &out, no_filter, log)?.violation_flag {
                return Ok(EXIT_VIOLATION);
            }
        }
        Command::Study { common } => {
            let (cfg, out) = load(&common)?;
            cmd_study(&cfg, &out, log)?;
        }
    }
    Ok(EXIT_OK)
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I, log: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = write!(err, "{e}");
            return code;
        }
    };
    match dispatch(cli, log) {
        Ok(code) => code,
        Err(CliError::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_USAGE
        }
        Err(CliError::Failure(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_FAILURE
        }
    }
}

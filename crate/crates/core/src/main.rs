use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};

use observatory::cli::{execute, load_run_mask, CliError, Outputs, RunConfig};
use observatory::grid::{import_ascii_grid, write_raster, GridSource, PanelDir};
use observatory::pipeline::{demean, diff_year_banded, write_demeaned_csv, write_demeaned_nld1};
use observatory::synth::{write_panel, PanelSpec};

#[derive(Parser)]
#[command(name = "observatory", version, about = "Nighttime-luminosity panel analytics")]
struct Cli {
    /// Run config of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Rows per band in differencing.
    #[arg(long, global = true)]
    chunk_rows: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert an ESRI ASCII grid to NLG1.
    Ingest {
        input: PathBuf,
        #[arg(long)]
        year: i32,
        /// Target file (default: <out>/<year>.nlg).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Generate a synthetic panel from a spec file.
    Synth {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Write the demeaned change grid of one year.
    Diff {
        #[arg(long)]
        year: i32,
        #[arg(long, default_value = "World")]
        scope: String,
        #[arg(long, default_value = "nld1", value_parser = ["nld1", "csv"])]
        format: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Dispersion series, moments, QQ and scatter data.
    Metrics(RunArgs),
    /// Transition matrices and persistence probabilities.
    Markov(RunArgs),
    /// Fixed-effects aggregate growth.
    Growth(RunArgs),
    /// Change maps.
    Render(RunArgs),
    /// Cross-region comparison table.
    Report(RunArgs),
    /// Every artifact in one pass.
    Run(RunArgs),
}

#[derive(Args, Default)]
struct RunArgs {
    /// Panel directory of <year>.nlg files.
    #[arg(long)]
    panel: Option<PathBuf>,
    /// RMSK region mask.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Region table CSV (default: regions.csv beside the mask).
    #[arg(long)]
    regions: Option<PathBuf>,
    /// External `year,value` series to correlate with world light growth.
    #[arg(long)]
    series: Option<PathBuf>,
    /// Comma-separated region names.
    #[arg(long)]
    scopes: Option<String>,
    #[arg(long)]
    period_a: Option<String>,
    #[arg(long)]
    period_b: Option<String>,
    #[arg(long, value_parser = ["raw", "percent"])]
    units: Option<String>,
    #[arg(long, value_parser = ["local", "world"])]
    threshold_scope: Option<String>,
    #[arg(long)]
    clamp: Option<f64>,
    #[arg(long)]
    max_width: Option<usize>,
    #[arg(long, value_parser = ["ppm", "png"])]
    image_format: Option<String>,
}

fn build_config(cli: &Cli, run: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let here = Path::new(".");
    let mut set = |k: &str, v: Option<String>| -> Result<(), CliError> {
        match v {
            Some(v) => cfg.set(k, &v, here),
            None => Ok(()),
        }
    };
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.to_string_lossy().into_owned());
    set("panel", path(&run.panel))?;
    set("mask", path(&run.mask))?;
    set("regions", path(&run.regions))?;
    set("series", path(&run.series))?;
    set("scopes", run.scopes.clone())?;
    set("period_a", run.period_a.clone())?;
    set("period_b", run.period_b.clone())?;
    set("units", run.units.clone())?;
    set("threshold_scope", run.threshold_scope.clone())?;
    set("clamp", run.clamp.map(|x| x.to_string()))?;
    set("max_width", run.max_width.map(|x| x.to_string()))?;
    set("image_format", run.image_format.clone())?;
    set("out", path(&cli.out))?;
    set("threads", cli.threads.map(|x| x.to_string()))?;
    set("chunk_rows", cli.chunk_rows.map(|x| x.to_string()))?;
    Ok(cfg)
}

fn run_outputs(cli: &Cli, run: &RunArgs, outputs: Outputs) -> Result<bool, CliError> {
    let cfg = build_config(cli, run)?;
    let summary = with_threads(cfg.threads, || execute(&cfg, outputs))?;
    for p in &summary.written {
        info!("wrote {}", p.display());
    }
    for f in &summary.failures {
        warn!("{f}");
    }
    Ok(summary.failures.is_empty())
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build().expect("thread pool").install(f),
        None => f(),
    }
}

fn diff_command(cli: &Cli, year: i32, scope: &str, format: &str, run: &RunArgs) -> Result<bool, CliError> {
    let cfg = build_config(cli, run)?;
    let panel = cfg.panel.as_ref().ok_or_else(|| CliError::Argument("no panel directory given".into()))?;
    let source = PanelDir::open(panel).map_err(|e| CliError::Input(format!("{}: {e}", panel.display())))?;
    let mask = load_run_mask(&cfg, source.geometry())?;
    let scope = mask.scope_by_name(scope).map_err(|e| CliError::Argument(e.to_string()))?;
    let load = |y: i32| source.load(y).map_err(|e| CliError::Input(e.to_string()));
    let d = with_threads(cfg.threads, || -> Result<_, CliError> {
        let (prev, curr) = (load(year - 1)?, load(year)?);
        let diff = diff_year_banded(&prev, &curr, cfg.chunk_rows)?;
        Ok(demean(&diff, &mask, scope)?)
    })?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::Output(format!("{}: {e}", cfg.out.display())))?;
    let stem = mask.scope_name(scope).replace(|c: char| !c.is_ascii_alphanumeric(), "_");
    let path = cfg.out.join(format!("diff_{stem}_{year}.{format}"));
    match format {
        "csv" => write_demeaned_csv(&d, &path)?,
        _ => write_demeaned_nld1(&d, &path)?,
    }
    info!("wrote {} ({} active pixels, scope mean {})", path.display(), d.len(), d.scope_mean());
    Ok(true)
}

fn dispatch(cli: &Cli) -> Result<bool, CliError> {
    let out_dir = || cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    match &cli.command {
        Command::Ingest { input, year, output } => {
            let grid = import_ascii_grid(input, *year).map_err(|e| CliError::Input(e.to_string()))?;
            let target = output.clone().unwrap_or_else(|| out_dir().join(format!("{year}.nlg")));
            if let Some(parent) = target.parent() {
                std::fs::create_dir_all(parent).map_err(|e| CliError::Output(format!("{}: {e}", parent.display())))?;
            }
            write_raster(&grid, &target).map_err(|e| CliError::Output(e.to_string()))?;
            info!("wrote {}", target.display());
            Ok(true)
        }
        Command::Synth { spec } => {
            let text = std::fs::read_to_string(spec).map_err(|e| CliError::Input(format!("{}: {e}", spec.display())))?;
            let spec = PanelSpec::parse(&text).map_err(|e| CliError::Argument(e.to_string()))?;
            let dir = out_dir();
            let truth = with_threads(cli.threads, || write_panel(&spec, &dir)).map_err(|e| CliError::Output(e.to_string()))?;
            info!("wrote {} years to {}", truth.n_years, dir.display());
            Ok(true)
        }
        Command::Diff { year, scope, format, run } => diff_command(cli, *year, scope, format, run),
        Command::Metrics(run) => run_outputs(
            cli,
            run,
            Outputs { sigma: true, moments: true, qq: true, scatter: true, correlation: true, ..Outputs::NONE },
        ),
        Command::Markov(run) => run_outputs(cli, run, Outputs { markov: true, ..Outputs::NONE }),
        Command::Growth(run) => run_outputs(cli, run, Outputs { growth: true, ..Outputs::NONE }),
        Command::Render(run) => run_outputs(cli, run, Outputs { maps: true, ..Outputs::NONE }),
        Command::Report(run) => run_outputs(cli, run, Outputs { report: true, ..Outputs::NONE }),
        Command::Run(run) => run_outputs(cli, run, Outputs::ALL),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}

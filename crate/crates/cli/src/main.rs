use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde::Deserialize;

use imbacon::encoder::EncoderParams;
use imbacon::harness::{
    check_bound, correlate, dataset, eval_views, read_sweep_csv, run, sweep, EvalViews, RunConfig,
    SweepAxis, SweepGrid, PARAMS_FILE, RECORD_FILE,
};
use imbacon::metrics::{full_report, TieBreak, DEFAULT_R_FRACTION};
use imbacon::probe::{probe_protocol, ProbeConfig};
use imbacon::sphere::{streams, RngStream};
use imbacon::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
const EXIT_BOUND: u8 = 4;

#[derive(Parser)]
#[command(name = "imbacon", version, about = "Contrastive learning under class imbalance")]
struct Cli {
    /// JSON config for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: runs].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress stdout output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the training set to `<out>/dataset.csv`.
    GenData,
    /// Train one run and write `<out>/<run_id>/`.
    Train,
    /// Representation metrics of an embeddings CSV.
    Metrics {
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Fit and evaluate a linear probe on embeddings CSVs.
    Probe {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Check the SupCon gradient bound on batches at initialization.
    VerifyBound {
        #[arg(long, default_value_t = 10)]
        batches: usize,
    },
    /// Run a grid of configs; resumes from completed runs in `--out`.
    Sweep {
        /// One of imbalance, temperature, batch-size, supervision-fraction, loss-kind.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Correlate sweep metrics with the probe metric.
    Correlate {
        /// Defaults to `<out>/sweep.csv`.
        #[arg(long)]
        sweep: Option<PathBuf>,
    },
    /// Write the evaluation-view embeddings of a (possibly shortened) run.
    ExportEmbeddings {
        /// Stop training after this many epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Destination; defaults to `<out>/<run_id>/embeddings.csv`.
        #[arg(long)]
        file: Option<PathBuf>,
    },
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct MetricsConfig {
    embeddings: Option<PathBuf>,
    r_fraction: f64,
    tie_break: TieBreak,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            embeddings: None,
            r_fraction: DEFAULT_R_FRACTION,
            tie_break: TieBreak::Index,
        }
    }
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ProbeCliConfig {
    train: Option<PathBuf>,
    test: Option<PathBuf>,
    fraction: f64,
    probe: ProbeConfig,
    seed: u64,
}

impl Default for ProbeCliConfig {
    fn default() -> Self {
        Self {
            train: None,
            test: None,
            fraction: 1.0,
            probe: ProbeConfig::default(),
            seed: 0,
        }
    }
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidConfig(msg.into()).into()
}

fn read_json<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| config_error(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", p.display())))
        }
    }
}

/// Paths in a config file are taken relative to the file.
fn relative_to(config: Option<&Path>, p: PathBuf) -> PathBuf {
    match config.and_then(Path::parent) {
        Some(dir) if p.is_relative() => dir.join(p),
        _ => p,
    }
}

fn run_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_json_file(p).map_err(|e| match e {
            Error::Io(io) => config_error(format!("{}: {io}", p.display())),
            e => e.into(),
        })?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg.resolved())
}

fn read_views(path: &Path) -> anyhow::Result<EvalViews> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(EvalViews::read_csv(file)?)
}

fn emit(cli: &Cli, value: &impl serde::Serialize) -> anyhow::Result<()> {
    if !cli.quiet {
        println!("{}", serde_json::to_string_pretty(value)?);
    }
    Ok(())
}

fn execute(cli: &Cli) -> anyhow::Result<()> {
    let config = cli.config.as_deref();
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    match &cli.command {
        Command::GenData => {
            let cfg = run_config(cli)?;
            let (_, ds) = dataset(&cfg)?;
            fs::create_dir_all(&out)?;
            let path = out.join("dataset.csv");
            ds.write_csv(BufWriter::new(File::create(&path)?))?;
            emit(
                cli,
                &serde_json::json!({ "path": path, "n": ds.len(), "minority": ds.count_of(ds.minority()) }),
            )
        }
        Command::Train => {
            let cfg = run_config(cli)?;
            let record = run(&cfg, &out)?;
            emit(
                cli,
                &serde_json::json!({
                    "run_id": record.run_id,
                    "dir": out.join(&record.run_id),
                    "metrics": record.metrics,
                    "probe_balanced_accuracy": record.probe.balanced_accuracy,
                    "collapsed": record.collapse.collapsed,
                }),
            )
        }
        Command::Metrics { embeddings } => {
            let mc: MetricsConfig = read_json(config)?;
            let path = embeddings
                .clone()
                .or_else(|| mc.embeddings.map(|p| relative_to(config, p)))
                .ok_or_else(|| config_error("metrics needs an embeddings file"))?;
            let views = read_views(&path)?;
            let report = full_report(&views.z, &views.labels, &views.partner()?, mc.r_fraction, mc.tie_break)?;
            if let Some(dir) = &cli.out {
                fs::create_dir_all(dir)?;
                fs::write(dir.join("metrics.json"), serde_json::to_vec_pretty(&report)?)?;
            }
            emit(cli, &report)
        }
        Command::Probe { train, test } => {
            let pc: ProbeCliConfig = read_json(config)?;
            let pick = |flag: &Option<PathBuf>, cfg: Option<PathBuf>, what: &str| {
                flag.clone()
                    .or_else(|| cfg.map(|p| relative_to(config, p)))
                    .ok_or_else(|| config_error(format!("probe needs a {what} embeddings file")))
            };
            let tr = read_views(&pick(train, pc.train, "train")?)?;
            let te = read_views(&pick(test, pc.test, "test")?)?;
            let mut rng = RngStream::new(cli.seed.unwrap_or(pc.seed), streams::PROBE);
            let result = probe_protocol((&tr.z, &tr.labels), (&te.z, &te.labels), pc.fraction, &pc.probe, &mut rng)?;
            emit(cli, &result)
        }
        Command::VerifyBound { batches } => {
            let cfg = run_config(cli)?;
            let evals = check_bound(&cfg, *batches)?;
            let failed = evals
                .iter()
                .filter(|e| !e.premise_violated && !e.all_satisfied_proof)
                .count();
            let summary: Vec<_> = evals
                .iter()
                .map(|e| {
                    serde_json::json!({
                        "epsilon": e.epsilon,
                        "premise_violated": e.premise_violated,
                        "anchors": e.anchors.len(),
                        "all_satisfied_proof": e.all_satisfied_proof,
                        "all_satisfied_theorem": e.all_satisfied_theorem,
                        "min_slack_proof": e.min_slack_proof,
                    })
                })
                .collect();
            emit(cli, &serde_json::json!({ "batches": summary, "failed": failed }))?;
            if failed > 0 {
                return Err(BoundFailure(failed).into());
            }
            Ok(())
        }
        Command::Sweep { axis, values, seeds } => {
            let base = run_config(cli)?;
            let grid = match axis {
                None => SweepGrid {
                    seeds: seeds.clone(),
                    ..SweepGrid::default_sweep()
                },
                Some(a) => {
                    if values.is_empty() {
                        return Err(config_error("--axis needs --values"));
                    }
                    SweepGrid {
                        axes: vec![(SweepAxis::parse(a)?, values.clone())],
                        seeds: seeds.clone(),
                    }
                }
            };
            let outcome = sweep(&base, &grid, &out)?;
            emit(cli, &outcome.summary)
        }
        Command::Correlate { sweep } => {
            let path = sweep.clone().unwrap_or_else(|| out.join("sweep.csv"));
            let rows = read_sweep_csv(&path)?;
            let report = correlate(&rows)?;
            let dest = path.with_file_name("correlation.json");
            fs::write(&dest, serde_json::to_vec_pretty(&report)?)?;
            emit(cli, &report)
        }
        Command::ExportEmbeddings { epochs, file } => {
            let mut cfg = run_config(cli)?;
            if let Some(e) = epochs {
                cfg.optim.epochs = *e;
                cfg.validate()?;
            }
            let dir = out.join(cfg.run_id());
            let params = match EncoderParams::load_json(&dir.join(PARAMS_FILE)) {
                Ok(p) if dir.join(RECORD_FILE).exists() => p,
                _ => {
                    run(&cfg, &out)?;
                    EncoderParams::load_json(&dir.join(PARAMS_FILE))?
                }
            };
            let (_, ds) = dataset(&cfg)?;
            let views = eval_views(&cfg, &params, &ds)?;
            let dest = file.clone().unwrap_or_else(|| dir.join("embeddings.csv"));
            if let Some(parent) = dest.parent() {
                fs::create_dir_all(parent)?;
            }
            views.write_csv(BufWriter::new(File::create(&dest)?))?;
            emit(cli, &serde_json::json!({ "path": dest, "views": views.z.rows() }))
        }
    }
}

#[derive(Debug)]
struct BoundFailure(usize);

impl std::fmt::Display for BoundFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gradient bound violated on {} batch(es)", self.0)
    }
}

impl std::error::Error for BoundFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.is::<BoundFailure>() {
        return EXIT_BOUND;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::InvalidConfig(_)) => EXIT_CONFIG,
        Some(Error::NumericalDivergence { .. }) => EXIT_DIVERGENCE,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

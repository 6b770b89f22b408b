//! Command-line driver for the adapter-transfer experiment pipeline.
//!
//! Exit codes: 0 success, 2 usage (bad flags or arguments), 3 missing
//! prerequisite artifact, 4 invalid configuration, 1 anything else.
//! Errors print one machine-parsable line: `error[<category>]: <message>`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use emea_core::config::ExperimentConfig;
use emea_core::error::Error;
use emea_core::eval::{self, Method};
use emea_core::pipeline::{standard_methods, Pipeline};
use emea_core::train::name_seed;

/// Environment variable that overrides the configured working directory
/// (itself overridden by `--workdir`).
const WORKDIR_ENV: &str = "ADAPTER_LAB_WORKDIR";

#[derive(Parser)]
#[command(
    name = "adapter-lab",
    version,
    about = "Train language/task adapters on a synthetic dialect continuum and \
             compare test-time transfer methods"
)]
struct Cli {
    /// Experiment config (TOML). Defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Working directory for corpora, checkpoints, and results.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Override every stochastic choice: training phase seeds are derived
    /// from this value and evaluation uses it as the single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Recompute artifacts that already exist.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the training corpora for the configured continuum.
    GenData,
    /// Pretrain the shared encoder with masked language modeling.
    Pretrain,
    /// Train language adapters (source + related) against the frozen encoder.
    TrainLmAdapter {
        /// Train only this variety's adapter.
        #[arg(long)]
        variety: Option<String>,
    },
    /// Train the task adapter and tag head on labeled source data.
    TrainTaskAdapter,
    /// Train the fusion combination over the language adapters.
    TrainFusion,
    /// Evaluate methods over the target varieties and seeds (resumable).
    Eval {
        /// Comma-separated subset of methods (default: the full comparison).
        #[arg(long)]
        methods: Option<String>,
        /// Run the batch-size sweep on this variety instead of the grid.
        #[arg(long)]
        sweep: Option<String>,
        /// Batch sizes for the sweep.
        #[arg(long, default_value = "1,4,16,32")]
        sizes: String,
    },
    /// Measure inference throughput of one method.
    Bench {
        #[arg(long)]
        method: String,
        #[arg(long)]
        variety: Option<String>,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
        #[arg(long, default_value_t = 10)]
        n_batches: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
    },
    /// Render the summary table from the results file.
    Report {
        /// Also write the table as CSV to this path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

/// Guard that holds `<workdir>/.lock` while a command runs.
struct WorkdirLock {
    path: PathBuf,
}

impl WorkdirLock {
    fn acquire(workdir: &Path) -> Result<WorkdirLock, Error> {
        std::fs::create_dir_all(workdir)?;
        let path = workdir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(WorkdirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Usage(format!(
                "workdir is locked by another run ('{}' exists; delete it if stale)",
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err.category() {
        "usage" => 2,
        "dependency" => 3,
        "config" => 4,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Ok(dir) = std::env::var(WORKDIR_ENV) {
        if !dir.is_empty() {
            cfg.paths.workdir = PathBuf::from(dir);
        }
    }
    if let Some(dir) = &cli.workdir {
        cfg.paths.workdir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.train.pretrain.seed = name_seed(seed, "pretrain");
        cfg.train.lm_adapter.seed = name_seed(seed, "lm-adapter");
        cfg.train.task_adapter.seed = name_seed(seed, "task-adapter");
        cfg.train.fusion.seed = name_seed(seed, "fusion");
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn provenance(cfg: &ExperimentConfig) -> String {
    format!(
        "config={} seeds={} version={}",
        cfg.content_hash(),
        cfg.seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(","),
        env!("CARGO_PKG_VERSION"),
    )
}

/// Start the results file with a provenance header; timestamps live only
/// here so record lines stay reproducible byte for byte.
fn ensure_results_header(cfg: &ExperimentConfig) -> Result<(), Error> {
    let path = cfg.paths.results_file();
    if path.exists() {
        return Ok(());
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    std::fs::write(&path, format!("# {} created={now}\n", provenance(cfg)))?;
    Ok(())
}

fn parse_methods(arg: Option<&str>) -> Result<Vec<Method>, Error> {
    match arg {
        None => Ok(standard_methods()),
        Some(list) => list
            .split(',')
            .map(|m| m.trim().parse::<Method>())
            .collect(),
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    let _lock = WorkdirLock::acquire(&cfg.paths.workdir)?;
    let p = Pipeline::new(cfg.clone())?;
    println!("# {}", provenance(&cfg));

    match &cli.cmd {
        Cmd::GenData => {
            for (path, skipped) in p.gen_data(cli.force)? {
                println!(
                    "{} {}",
                    if skipped { "kept   " } else { "wrote  " },
                    path.display()
                );
            }
        }
        Cmd::Pretrain => {
            let out = p.pretrain(cli.force)?;
            report_phase("pretrain", &out.artifact, out.skipped, &out.logs);
        }
        Cmd::TrainLmAdapter { variety } => {
            let out = p.train_lm_adapters(variety.as_deref(), cli.force)?;
            report_phase("lm-adapter", &out.artifact, out.skipped, &out.logs);
        }
        Cmd::TrainTaskAdapter => {
            let out = p.train_task(cli.force)?;
            report_phase("task-adapter", &out.artifact, out.skipped, &out.logs);
        }
        Cmd::TrainFusion => {
            let out = p.train_fusion(cli.force)?;
            report_phase("fusion", &out.artifact, out.skipped, &out.logs);
        }
        Cmd::Eval {
            methods,
            sweep,
            sizes,
        } => {
            ensure_results_header(&cfg)?;
            if let Some(variety) = sweep {
                let sizes: Vec<usize> = sizes
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::Usage(format!("bad batch size '{s}'")))
                    })
                    .collect::<Result<_, _>>()?;
                let records = p.sweep(variety, &sizes)?;
                eval::append_records(
                    &cfg.paths.results_file(),
                    &records
                        .iter()
                        .filter(|r| r.seed.is_some())
                        .cloned()
                        .collect::<Vec<_>>(),
                )?;
                for r in records.iter().filter(|r| r.seed.is_none()) {
                    println!(
                        "sweep variety={} batch_size={} {}={:.4}",
                        r.variety, r.batch_size, r.metric_name, r.value
                    );
                }
            } else {
                let methods = parse_methods(methods.as_deref())?;
                let records = p.eval_grid(&methods)?;
                let per_seed = records.iter().filter(|r| r.seed.is_some()).count();
                println!(
                    "evaluated {per_seed} cells ({} averages) -> {}",
                    records.len() - per_seed,
                    cfg.paths.results_file().display()
                );
                let table = p.report()?;
                print!("{}", table.render_text());
            }
        }
        Cmd::Bench {
            method,
            variety,
            batch_size,
            n_batches,
            warmup,
        } => {
            let method: Method = method.parse()?;
            let variety = variety
                .clone()
                .or_else(|| cfg.continuum.targets.first().map(|v| v.name.clone()))
                .ok_or_else(|| Error::Config("no target varieties configured".to_string()))?;
            let eps = p.bench(&variety, method, *batch_size, *n_batches, *warmup)?;
            println!(
                "throughput method={} variety={} batch_size={} examples_per_second={eps:.2}",
                method.key(),
                variety,
                batch_size
            );
        }
        Cmd::Report { csv } => {
            let table = p.report()?;
            print!("{}", table.render_text());
            if let Some(path) = csv {
                std::fs::write(path, table.render_csv())?;
                println!("csv -> {}", path.display());
            }
        }
    }
    Ok(())
}

fn report_phase(name: &str, artifact: &Path, skipped: bool, logs: &[emea_core::train::EpochLog]) {
    if skipped {
        println!("{name}: up to date ({})", artifact.display());
        return;
    }
    for log in logs {
        match (log.loss, &log.note) {
            (Some(loss), _) => println!(
                "{name} epoch={} split={} loss={loss:.4} secs={:.2}",
                log.epoch, log.split, log.seconds
            ),
            (None, Some(note)) => println!("{name} {}: {note}", log.split),
            (None, None) => {}
        }
    }
    println!("{name}: wrote {}", artifact.display());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(exit_code_for(&e))
        }
    }
}

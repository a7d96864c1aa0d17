mod spec;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand};
use fair_core::data::{load_csv, synth_lowrank, write_id_map, InteractionDataset};
use fair_core::fedsim::{
    quadratic_bench, run_training, CapacityScheme, ConvergenceReport, QuadraticParams,
};
use fair_core::verify::{run_suite, VerifyOptions, SUITES};
use fair_core::FairError;
use serde::Serialize;

use spec::RunSpecFile;

#[derive(Parser)]
#[command(
    name = "fair",
    version,
    about = "Federated averaging in random subspaces"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON run config and write metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the dense-oracle verification suites.
    Verify {
        /// Print suite names without running them.
        #[arg(long)]
        list: bool,
        #[arg(long, hide = true)]
        corrupt_bucket_map: bool,
    },
    /// Convergence bench on random strongly convex quadratics.
    Quadratic {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 4)]
        devices: usize,
        #[arg(long)]
        rounds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        local_steps: usize,
        /// Report CSV path.
        #[arg(long, default_value = "quadratic.csv")]
        out: PathBuf,
    },
}

/// Exit code plus a one-line message.
struct Failure(u8, String);

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let code = match e.downcast_ref::<FairError>() {
            Some(FairError::Diverged { .. }) => 2,
            _ => 1,
        };
        Failure(code, format!("{e:#}").replace('\n', " "))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Run { config } => cmd_run(&config),
        Command::Verify {
            list,
            corrupt_bucket_map,
        } => cmd_verify(list, corrupt_bucket_map),
        Command::Quadratic {
            n,
            m,
            devices,
            rounds,
            seed,
            local_steps,
            out,
        } => cmd_quadratic(
            QuadraticParams {
                n,
                m,
                devices,
                rounds,
                local_steps,
                seed,
            },
            &out,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("FAIR_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .with_context(|| format!("FAIR_THREADS must be a non-negative integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("cannot configure thread pool")
}

/// Writes through a temp file in the destination directory, then renames.
fn write_atomic(
    path: &Path,
    fill: impl FnOnce(&mut dyn Write) -> anyhow::Result<()>,
) -> anyhow::Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("cannot create temp file in {}", dir.display()))?;
    fill(tmp.as_file_mut())?;
    tmp.as_file_mut().flush()?;
    tmp.persist(path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    spec: &'a RunSpecFile,
    resolved: fair_core::fedsim::RunConfig,
    dataset: DatasetSummary,
    elapsed_seconds: f64,
}

#[derive(Serialize)]
struct DatasetSummary {
    num_users: usize,
    num_items: usize,
    train_records: usize,
    test_records: usize,
    duplicates_dropped: usize,
}

fn load_dataset(spec: &RunSpecFile) -> anyhow::Result<InteractionDataset> {
    let raw = match (&spec.dataset.synth, &spec.dataset.csv) {
        (Some(p), _) => synth_lowrank(p)?,
        (_, Some(csv)) => load_csv(&csv.path, csv.kind)?,
        (None, None) => unreachable!("validated"),
    };
    Ok(raw.split_train_test(spec.dataset.holdout, spec.split_seed())?)
}

fn cmd_run(config: &Path) -> Result<(), Failure> {
    let spec = RunSpecFile::load(config)?;
    let cfg = spec.run_config();
    let ds = load_dataset(&spec)?;
    let scheme = CapacityScheme::parse(&spec.federation.scheme, ds.num_users)
        .map_err(anyhow::Error::from)?;

    let start = Instant::now();
    let log = run_training(&cfg, &ds, &scheme).map_err(anyhow::Error::from)?;
    let elapsed = start.elapsed().as_secs_f64();

    write_atomic(&spec.output.metrics, |w| Ok(log.write_csv(w)?))?;
    if spec.dataset.csv.is_some() {
        write_atomic(&spec.sidecar(".users.csv"), |w| {
            Ok(write_id_map(&ds.user_ids, w)?)
        })?;
        write_atomic(&spec.sidecar(".items.csv"), |w| {
            Ok(write_id_map(&ds.item_ids, w)?)
        })?;
    }
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        spec: &spec,
        resolved: cfg,
        dataset: DatasetSummary {
            num_users: ds.num_users,
            num_items: ds.num_items,
            train_records: ds.train().count(),
            test_records: ds.test().count(),
            duplicates_dropped: ds.duplicates_dropped,
        },
        elapsed_seconds: elapsed,
    };
    write_atomic(&spec.sidecar(".manifest.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &manifest)?;
        writeln!(w)?;
        Ok(())
    })?;
    println!(
        "wrote {} ({} records) in {elapsed:.2}s",
        spec.output.metrics.display(),
        log.records.len()
    );
    Ok(())
}

fn cmd_verify(list: bool, corrupt_bucket_map: bool) -> Result<(), Failure> {
    if list {
        for name in SUITES {
            println!("{name}");
        }
        return Ok(());
    }
    let opts = VerifyOptions { corrupt_bucket_map };
    let mut first_failure = None;
    for name in SUITES {
        let r = run_suite(name, &opts).expect("listed suite");
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!(
            "{status} {:<20} {:>8.3}s  {}",
            r.name,
            r.elapsed.as_secs_f64(),
            r.detail
        );
        if !r.passed && first_failure.is_none() {
            first_failure = Some(r.name);
        }
    }
    match first_failure {
        None => Ok(()),
        Some(name) => Err(Failure(1, format!("suite {name} failed"))),
    }
}

fn cmd_quadratic(params: QuadraticParams, out: &Path) -> Result<(), Failure> {
    let report = quadratic_bench(&params).map_err(anyhow::Error::from)?;
    print_report(&report);
    write_atomic(out, |w| write_report_csv(&report, w))?;
    Ok(())
}

fn print_report(r: &ConvergenceReport) {
    let p = &r.params;
    println!(
        "n={} m={} (subspace dim {}) devices={} rounds={} local_steps={} seed={}",
        p.n, p.m, r.subspace_dim, p.devices, p.rounds, p.local_steps, p.seed
    );
    for (round, gap) in r.checkpoints() {
        println!("gap round {round:>6}: {gap:.6e}");
    }
    println!(
        "restricted spectrum [{:.6e}, {:.6e}] within [mu={:.6e}, L={:.6e}]: {}",
        r.restricted.min,
        r.restricted.max,
        r.mu,
        r.l,
        if r.eigen_ok() { "PASS" } else { "FAIL" }
    );
}

fn write_report_csv(r: &ConvergenceReport, w: &mut dyn Write) -> anyhow::Result<()> {
    writeln!(w, "kind,round,value")?;
    for (round, gap) in r.checkpoints() {
        writeln!(w, "gap,{round},{gap}")?;
    }
    writeln!(w, "mu,,{}", r.mu)?;
    writeln!(w, "L,,{}", r.l)?;
    writeln!(w, "restricted_min,,{}", r.restricted.min)?;
    writeln!(w, "restricted_max,,{}", r.restricted.max)?;
    writeln!(w, "eigen_check,,{}", u8::from(r.eigen_ok()))?;
    Ok(())
}

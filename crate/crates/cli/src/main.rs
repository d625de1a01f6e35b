// Copyright 2026 The warmswap Authors.
// SPDX-License-Identifier: Apache-2.0

//! `warmswap` command-line driver.
//!
//! Exit codes: 0 success, 1 validation error, 2 network error, 3 protocol
//! error.

mod config;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::mpsc;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use warmswap_core::image::{
    dump, read_checkpoint, write_checkpoint, DependencyPool, ImageError, ProcessSpec,
};
use warmswap_core::protocol::{PageClient, PageServer, ProtocolError, ServerConfig};
use warmswap_core::restore::{
    restore_with_reference, AccessTrace, EnvironmentManifest, ExecutionReport, RestoreError,
    RestorePolicy, RestoreSource,
};
use warmswap_core::sim::calibrate::{calibrate, CalibrationTargets};
use warmswap_core::sim::{compare_strategies, simulate, write_comparison_csv, Strategy};
use warmswap_core::workload::{
    bucket_histogram, count_cold_starts, expected_cold_starts, generate_trace, peak_rate,
    prob_no_invocation, qualifies_for_tuning, read_rates_csv, read_traces_csv, write_traces_csv,
    RateParams,
};

use crate::config::{read_json, Experiment};

#[derive(Parser)]
#[command(
    name = "warmswap",
    version,
    about = "Live dependency images for serverless cold starts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a dependency image from a process spec and write its checkpoint.
    Dump {
        /// Process spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve checkpoints from a dependency pool until SIGINT or SIGTERM.
    Serve(ServeArgs),
    /// Restore an image, run an access trace and print the execution report.
    Run(RunArgs),
    /// Run a simulation experiment.
    Simulate {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Also simulate every strategy in the config's "compare" list.
        #[arg(long)]
        compare: bool,
    },
    /// Keep-alive analysis of invocation rates.
    Analyze(AnalyzeArgs),
    /// Fit the cost model and profiles to the reference measurements.
    Calibrate {
        /// Directory for cost_model.json, profiles.json and calibration.json.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Generate Poisson invocation traces.
    Generate {
        /// Invocations per minute.
        #[arg(long)]
        lambda: f64,
        /// Function ids, one trace each.
        #[arg(long, value_delimiter = ',', default_value = "f")]
        functions: Vec<String>,
        /// Horizon in minutes.
        #[arg(long, default_value_t = 1440.0)]
        horizon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV output; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ServeArgs {
    /// Checkpoint files to load into the pool.
    #[arg(required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:7070")]
    listen: String,
    /// Pages per frame while bulk streaming (1 to 256).
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u16).range(1..=256))]
    batch_pages: u16,
    /// Where to write server statistics on shutdown; stdout when absent.
    #[arg(long)]
    stats_out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Page server address.
    #[arg(long, conflicts_with = "checkpoint", requires = "label")]
    connect: Option<String>,
    /// Dependency label to migrate from the server.
    #[arg(long)]
    label: Option<String>,
    /// Local checkpoint (file-copy restore).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// bulk, lazy, eager or file-copy. Defaults to bulk for --connect and
    /// file-copy for --checkpoint.
    #[arg(long)]
    policy: Option<RestorePolicy>,
    /// Access trace CSV (page_id,compute_us).
    #[arg(long)]
    trace: PathBuf,
    /// Container environment manifest (JSON {"files": {path: version}}).
    #[arg(long)]
    env: PathBuf,
    /// Manifest of the node the image was dumped on; versions must match it.
    #[arg(long)]
    reference_env: Option<PathBuf>,
    /// Run the trace a second time as a warm start. Under bulk restore the
    /// stream is allowed to finish first.
    #[arg(long)]
    again: bool,
    /// Sleep for each access's compute cost.
    #[arg(long)]
    pace: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Invocation rate (per minute); repeatable.
    #[arg(long, allow_negative_numbers = true)]
    lambda: Vec<f64>,
    /// Traces CSV (function_id,timestamp_minutes); rates are estimated per function.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Keep-alive in minutes.
    #[arg(long = "T", default_value_t = 15.0)]
    keep_alive: f64,
    /// Horizon in minutes.
    #[arg(long = "D", default_value_t = 1440.0)]
    horizon: f64,
    /// Rates CSV (header "lambda") to bucket into a histogram.
    #[arg(long)]
    histogram: Option<PathBuf>,
    /// Histogram bucket width (per minute).
    #[arg(long, default_value_t = 0.001)]
    bucket_width: f64,
    /// Benefit per avoided cold start, for the tuning verdict.
    #[arg(long, requires = "cost")]
    benefit: Option<f64>,
    /// Cost of tuning, for the tuning verdict.
    #[arg(long, requires = "benefit")]
    cost: Option<f64>,
    /// Also write analysis.json, ecs_grid.csv and histogram.csv here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn validation(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 1,
            error: error.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = if let Some(e) = error.downcast_ref::<RestoreError>() {
            restore_code(e)
        } else if let Some(e) = error.downcast_ref::<ProtocolError>() {
            protocol_code(e)
        } else {
            1
        };
        Self { code, error }
    }
}

impl From<io::Error> for Failure {
    fn from(error: io::Error) -> Self {
        Self::validation(error)
    }
}

fn protocol_code(e: &ProtocolError) -> u8 {
    if e.is_network() {
        2
    } else {
        3
    }
}

fn restore_code(e: &RestoreError) -> u8 {
    match e {
        RestoreError::Protocol(p) => protocol_code(p),
        RestoreError::PageOutOfRange(_) | RestoreError::StreamIncomplete(_) => 3,
        _ => 1,
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("WARMSWAP_LOG", "off")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Dump { spec, out } => cmd_dump(&spec, &out),
        Command::Serve(args) => cmd_serve(args),
        Command::Run(args) => cmd_run(args),
        Command::Simulate { config, compare } => cmd_simulate(&config, compare),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Calibrate { out_dir } => cmd_calibrate(out_dir.as_deref()),
        Command::Generate {
            lambda,
            functions,
            horizon,
            seed,
            out,
        } => cmd_generate(lambda, &functions, horizon, seed, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn write_json(path: Option<&Path>, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = io::stdout().lock();
            writeln!(out, "{text}")?;
            Ok(())
        }
    }
}

fn cmd_dump(spec_path: &Path, out: &Path) -> CmdResult {
    let spec: ProcessSpec = read_json(spec_path)?;
    let image =
        dump(&spec).map_err(|e| Failure::validation(anyhow!("{}: {e}", spec_path.display())))?;
    write_checkpoint(&image, out).with_context(|| format!("writing {}", out.display()))?;
    let bytes = fs::metadata(out).map(|m| m.len()).unwrap_or(0);
    println!(
        "label={} pages={} bytes={} metadata_bytes={}",
        image.label(),
        image.page_count(),
        bytes,
        image.metadata().metadata_size_bytes()
    );
    Ok(())
}

#[derive(Serialize)]
struct ServeReport {
    address: String,
    labels: Vec<String>,
    pool_memory_bytes: u64,
    stats: warmswap_core::protocol::ServerStats,
}

fn cmd_serve(args: ServeArgs) -> CmdResult {
    let pool = DependencyPool::new();
    for path in &args.checkpoints {
        let image = read_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
        pool.register(image).map_err(|e| match e {
            ImageError::DuplicateLabel(l) => Failure::validation(anyhow!(
                "{}: label {l:?} is already in the pool",
                path.display()
            )),
            other => Failure::validation(other),
        })?;
    }
    let pool = Arc::new(pool);
    let server = PageServer::with_config(
        Arc::clone(&pool),
        &args.listen,
        ServerConfig {
            stream_batch_pages: usize::from(args.batch_pages),
        },
    )
    .map_err(|e| Failure {
        code: 2,
        error: anyhow!("cannot listen on {}: {e}", args.listen),
    })?;
    let address = server.local_addr().to_string();
    let (tx, rx) = mpsc::channel();
    ctrlc::set_handler(move || {
        let _ = tx.send(());
    })
    .context("installing signal handler")?;
    {
        let mut out = io::stdout().lock();
        writeln!(out, "listening on {address}").ok();
        out.flush().ok();
    }
    let _ = rx.recv();
    log::info!("shutting down");
    let snapshot = pool.snapshot();
    let stats = server.shutdown();
    write_json(
        args.stats_out.as_deref(),
        &ServeReport {
            address,
            labels: snapshot.labels,
            pool_memory_bytes: snapshot.memory_bytes,
            stats,
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct RunOutput {
    runs: Vec<ExecutionReport>,
}

fn cmd_run(args: RunArgs) -> CmdResult {
    let trace = AccessTrace::read_csv_file(&args.trace)
        .map_err(|e| Failure::validation(anyhow!("{}: {e}", args.trace.display())))?;
    let env = EnvironmentManifest::from_json(
        &fs::read_to_string(&args.env)
            .with_context(|| format!("reading {}", args.env.display()))?,
    )
    .map_err(|e| Failure::validation(anyhow!("{}: {e}", args.env.display())))?;
    let reference = match &args.reference_env {
        Some(p) => Some(
            EnvironmentManifest::from_json(
                &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            )
            .map_err(|e| Failure::validation(anyhow!("{}: {e}", p.display())))?,
        ),
        None => None,
    };
    let (source, default_policy) = match (&args.connect, &args.checkpoint) {
        (Some(addr), None) => {
            let client = PageClient::connect(addr.as_str()).map_err(|e| Failure {
                code: 2,
                error: anyhow!("cannot connect to {addr}: {e}"),
            })?;
            let dep_label = args.label.clone().unwrap_or_default();
            (
                RestoreSource::Network { client, dep_label },
                RestorePolicy::BulkRestore,
            )
        }
        (None, Some(path)) => (
            RestoreSource::Checkpoint(path.clone()),
            RestorePolicy::FileCopy,
        ),
        _ => {
            return Err(Failure::validation(anyhow!(
                "give exactly one of --connect and --checkpoint"
            )))
        }
    };
    let policy = args.policy.unwrap_or(default_policy);
    let mut proc = restore_with_reference(source, policy, &env, reference.as_ref())
        .map_err(|e| Failure::from(anyhow::Error::new(e)))?;
    proc.set_pacing(args.pace);
    let mut runs = vec![proc.execute(&trace).map_err(anyhow::Error::new)?];
    if args.again {
        proc.wait_for_stream();
        runs.push(proc.execute_again(&trace).map_err(anyhow::Error::new)?);
    } else if policy == RestorePolicy::BulkRestore {
        // the report should describe a finished transfer
        proc.wait_for_stream();
        let stats = proc.stats();
        if let Some(last) = runs.last_mut() {
            last.stats = stats;
            last.resident_pages = proc.resident_pages();
            last.stream = proc.stream_report().cloned();
        }
    }
    write_json(args.out.as_deref(), &RunOutput { runs })?;
    Ok(())
}

fn cmd_simulate(config: &Path, compare: bool) -> CmdResult {
    let exp = Experiment::load(config)?;
    let cfg = &exp.config;
    fs::create_dir_all(&exp.output_dir)
        .with_context(|| format!("creating {}", exp.output_dir.display()))?;
    let report = simulate(
        &exp.traces,
        &exp.profiles,
        cfg.strategy,
        &exp.cost,
        cfg.keep_alive_minutes,
    )
    .map_err(Failure::validation)?;
    let report_path = exp.output_dir.join("report.json");
    write_json(Some(&report_path), &report)?;
    let breakdown_path = exp.output_dir.join("breakdown.csv");
    report
        .write_breakdown_csv(fs::File::create(&breakdown_path)?)
        .map_err(Failure::validation)?;
    println!(
        "{}: {} cold, {} warm, accumulated cold latency {:.4} s, memory {} B",
        cfg.strategy,
        report.cold_starts,
        report.warm_starts,
        report.accumulated_cold_latency_s,
        report.memory_bytes
    );
    if compare {
        let strategies: Vec<Strategy> = if cfg.compare.is_empty() {
            Strategy::ALL.to_vec()
        } else {
            cfg.compare.clone()
        };
        let rows = compare_strategies(
            &exp.traces,
            &exp.profiles,
            &strategies,
            &exp.cost,
            cfg.keep_alive_minutes,
        )
        .map_err(Failure::validation)?;
        write_json(Some(&exp.output_dir.join("comparison.json")), &rows)?;
        write_comparison_csv(
            &rows,
            fs::File::create(exp.output_dir.join("comparison.csv"))?,
        )
        .map_err(Failure::validation)?;
        for r in &rows {
            println!(
                "{}: accumulated cold latency {:.4} s, memory {} B",
                r.strategy, r.accumulated_cold_latency_s, r.memory_bytes
            );
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct RateAnalysis {
    function: Option<String>,
    lambda: f64,
    p_no_invocation: f64,
    expected_cold_starts: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    observed_cold_starts: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    qualifies_for_tuning: Option<bool>,
}

#[derive(Serialize)]
struct HistogramRow {
    bucket_lower: f64,
    bucket_upper: f64,
    density: f64,
}

#[derive(Serialize)]
struct Analysis {
    keep_alive_minutes: f64,
    horizon_minutes: f64,
    peak_rate: f64,
    peak_expected_cold_starts: f64,
    rates: Vec<RateAnalysis>,
    #[serde(skip_serializing_if = "Option::is_none")]
    histogram: Option<Vec<HistogramRow>>,
}

fn cmd_analyze(args: AnalyzeArgs) -> CmdResult {
    if args.lambda.is_empty() && args.trace.is_none() && args.histogram.is_none() {
        return Err(Failure::validation(anyhow!(
            "nothing to analyze: give --lambda, --trace or --histogram"
        )));
    }
    let params = |lambda: f64| {
        RateParams::new(lambda, args.keep_alive, args.horizon).map_err(Failure::validation)
    };
    let verdict = |p: &RateParams| match (args.benefit, args.cost) {
        (Some(b), Some(c)) => Some(qualifies_for_tuning(b, c, p)),
        _ => None,
    };
    let peak = params(peak_rate(args.keep_alive))?;
    let mut rates = Vec::new();
    for &lambda in &args.lambda {
        let p = params(lambda)?;
        rates.push(RateAnalysis {
            function: None,
            lambda,
            p_no_invocation: prob_no_invocation(&p),
            expected_cold_starts: expected_cold_starts(&p),
            observed_cold_starts: None,
            qualifies_for_tuning: verdict(&p),
        });
    }
    if let Some(path) = &args.trace {
        let file = fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
        let traces = read_traces_csv(file)
            .map_err(|e| Failure::validation(anyhow!("{}: {e}", path.display())))?;
        for t in &traces {
            let p = params(t.len() as f64 / args.horizon)?;
            rates.push(RateAnalysis {
                function: Some(t.function_id.clone()),
                lambda: p.lambda,
                p_no_invocation: prob_no_invocation(&p),
                expected_cold_starts: expected_cold_starts(&p),
                observed_cold_starts: Some(count_cold_starts(t, args.keep_alive)),
                qualifies_for_tuning: verdict(&p),
            });
        }
    }
    let histogram = match &args.histogram {
        Some(path) => {
            let file =
                fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
            let values = read_rates_csv(file)
                .map_err(|e| Failure::validation(anyhow!("{}: {e}", path.display())))?;
            let h = bucket_histogram(&values, args.bucket_width).map_err(Failure::validation)?;
            Some(h)
        }
        None => None,
    };
    let analysis = Analysis {
        keep_alive_minutes: args.keep_alive,
        horizon_minutes: args.horizon,
        peak_rate: peak.lambda,
        peak_expected_cold_starts: expected_cold_starts(&peak),
        rates,
        histogram: histogram.as_ref().map(|h| {
            h.iter()
                .map(|(lower, density)| HistogramRow {
                    bucket_lower: lower,
                    bucket_upper: lower + h.bucket_width,
                    density,
                })
                .collect()
        }),
    };
    write_json(None, &analysis)?;
    if let Some(dir) = &args.out_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_json(Some(&dir.join("analysis.json")), &analysis)?;
        let mut grid = String::from("lambda,expected_cold_starts\n");
        for i in 1..=10_000u32 {
            let lambda = f64::from(i) * 1e-4;
            let e = expected_cold_starts(&params(lambda)?);
            grid.push_str(&format!("{lambda},{e}\n"));
        }
        fs::write(dir.join("ecs_grid.csv"), grid)?;
        if let Some(h) = &histogram {
            h.write_csv(fs::File::create(dir.join("histogram.csv"))?)
                .map_err(Failure::validation)?;
        }
    }
    Ok(())
}

fn cmd_calibrate(out_dir: Option<&Path>) -> CmdResult {
    let targets = CalibrationTargets::reference();
    let cal = calibrate(&targets).map_err(Failure::validation)?;
    for row in &cal.fit {
        println!(
            "{}: cold {:.3}x (target {:.1}x), dependency boot {:.3}x (target {:.1}x)",
            row.function,
            row.model_cold_speedup,
            row.target_cold_speedup,
            row.model_dep_boot_speedup,
            row.target_dep_boot_speedup
        );
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_json(Some(&dir.join("cost_model.json")), &cal.cost)?;
        write_json(Some(&dir.join("profiles.json")), &cal.profiles)?;
        write_json(Some(&dir.join("calibration.json")), &cal)?;
        write_json(Some(&dir.join("calibration_targets.json")), &targets)?;
    } else {
        write_json(None, &cal)?;
    }
    Ok(())
}

fn cmd_generate(
    lambda: f64,
    functions: &[String],
    horizon: f64,
    seed: u64,
    out: Option<&Path>,
) -> CmdResult {
    // keep-alive does not affect generation
    let p = RateParams::new(lambda, 1.0, horizon).map_err(Failure::validation)?;
    let traces: Vec<_> = functions
        .iter()
        .enumerate()
        .map(|(i, f)| generate_trace(&p, f, seed.wrapping_add(i as u64)))
        .collect();
    match out {
        Some(path) => write_traces_csv(&traces, fs::File::create(path)?),
        None => write_traces_csv(&traces, io::stdout().lock()),
    }
    .map_err(Failure::validation)?;
    Ok(())
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use snnconv::balance::{
    BalanceConfig, Granularity, DEFAULT_BATCH_SIZE, DEFAULT_ETA, DEFAULT_ITERATIONS,
};
use snnconv::diagnostics::{error_bound, format_table};
use snnconv::io::{load_model, save_model, Dataset};
use snnconv::pipeline::{convert, evaluate, measure_energy, ConvertConfig, EvalConfig};
use snnconv::snn::{choose_delay_with_window, estimate_t0, DEFAULT_DELAY_WINDOW};
use snnconv::spectral::NormVariant;
use snnconv::NetworkGraph;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_INTERNAL: u8 = 4;

#[derive(Debug, thiserror::Error)]
enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Engine(#[from] snnconv::Error),
    #[error("{path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Engine(e) if !e.is_data_error() => EXIT_INTERNAL,
            _ => EXIT_DATA,
        }
    }
}

type Outcome = Result<(), Failure>;

/// Convert ReLU networks to integrate-and-fire SNNs and evaluate them.
#[derive(Parser, Debug)]
#[command(name = "snnconv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Model manifest (JSON)
    #[arg(long)]
    manifest: PathBuf,
    /// Weight blob (SNNF)
    #[arg(long)]
    weights: PathBuf,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Samples (SNND)
    #[arg(long)]
    data: PathBuf,
    /// Class labels (SNNL)
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimArgs {
    /// Simulation lengths, comma separated
    #[arg(long, value_delimiter = ',', default_value = "32,64,128")]
    timesteps: Vec<usize>,
    /// Fixed output delay t0 instead of the model's estimate
    #[arg(long)]
    delay: Option<usize>,
    /// Steps kept after the delay when the estimate does not fit
    #[arg(long, default_value_t = DEFAULT_DELAY_WINDOW)]
    delay_window: usize,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    batch_size: usize,
}

impl SimArgs {
    fn config(&self) -> Result<EvalConfig, Failure> {
        let cfg = EvalConfig {
            timesteps: self.timesteps.clone(),
            delay: self.delay,
            delay_window: self.delay_window,
            batch_size: self.batch_size,
        };
        cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GranularityArg {
    Layer,
    Channel,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NormArg {
    Operator,
    ReshapedKernel,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fold batch norm, learn thresholds and write the converted model
    Convert {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Output directory for model.json, model.snnf and convergence.csv
        #[arg(long)]
        out: PathBuf,
        /// Balancing iterations
        #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
        iters: usize,
        #[arg(long, default_value_t = DEFAULT_ETA)]
        eta: f64,
        #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
        batch_size: usize,
        #[arg(long, value_enum, default_value = "channel")]
        granularity: GranularityArg,
        /// Sum threshold updates instead of averaging them
        #[arg(long)]
        no_normalize_delta: bool,
        /// Fold the thresholds into the weights
        #[arg(long)]
        absorb: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Top-1 accuracy of the SNN at each T, next to the ANN
    Evaluate {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        sim: SimArgs,
        /// Directory for eval.csv (and spike traces with --trace)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write per-layer spike counts per timestep
        #[arg(long, requires = "out")]
        trace: bool,
    },
    /// Per-layer conversion error and its bound
    Diagnose {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 128)]
        timesteps: usize,
        /// Samples used, taken from the start of the dataset
        #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
        batch_size: usize,
        /// Weight norm; defaults to the one recorded in the model
        #[arg(long, value_enum)]
        norm: Option<NormArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Expected first-spike delay of the output layer
    EstimateDelay {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Show the delay chosen for each of these lengths
        #[arg(long, value_delimiter = ',', default_value = "32,64,128")]
        timesteps: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_DELAY_WINDOW)]
        delay_window: usize,
        #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
        batch_size: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synaptic operations and estimated energy against the ANN
    Energy {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, requires = "out")]
        trace: bool,
    },
}

fn load(model: &ModelArgs) -> Result<NetworkGraph, Failure> {
    Ok(load_model(&model.manifest, &model.weights)?)
}

fn load_data(data: &DataArgs) -> Result<Dataset, Failure> {
    Ok(Dataset::load(&data.data, data.labels.as_deref())?)
}

fn write(dir: &Path, name: &str, contents: &str) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|source| Failure::Write {
        path: dir.to_path_buf(),
        source,
    })?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|source| Failure::Write { path, source })
}

fn usage_if(cond: bool, msg: &str) -> Outcome {
    if cond {
        Err(Failure::Usage(msg.into()))
    } else {
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_convert(
    model: &ModelArgs,
    data: &DataArgs,
    out: &Path,
    iterations: usize,
    eta: f64,
    batch_size: usize,
    granularity: GranularityArg,
    no_normalize_delta: bool,
    absorb: bool,
    seed: u64,
) -> Outcome {
    let config = ConvertConfig {
        balance: BalanceConfig {
            eta,
            iterations,
            granularity: match granularity {
                GranularityArg::Layer => Granularity::LayerWise,
                GranularityArg::Channel => Granularity::ChannelWise,
            },
            batch_size,
            seed,
            normalize_by_count: !no_normalize_delta,
            ..Default::default()
        },
        absorb,
        norm_variant: NormVariant::Operator,
    };
    config
        .balance
        .validate()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let graph = load(model)?;
    let train = load_data(data)?;
    let c = convert(&graph, &train, &config)?;
    std::fs::create_dir_all(out).map_err(|source| Failure::Write {
        path: out.to_path_buf(),
        source,
    })?;
    save_model(&c.graph, out.join("model.json"), out.join("model.snnf"))?;
    write(out, "convergence.csv", &c.report.to_csv())?;

    let rows: Vec<Vec<String>> =
        c.t0.slots
            .iter()
            .zip(&c.report.final_delta)
            .map(|(s, d)| {
                vec![
                    s.layer.to_string(),
                    format!("{:.4}", s.theta_max),
                    format!("{d:.3e}"),
                    format!("{:.3}", s.contribution),
                ]
            })
            .collect();
    print!(
        "{}",
        format_table(&["slot", "theta_max", "last_delta", "delay_share"], &rows)
    );
    println!(
        "{} iterations, t0 estimate {:.3}, written to {}",
        c.report.iterations,
        c.t0.value,
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(
    model: &ModelArgs,
    data: &DataArgs,
    sim: &SimArgs,
    out: Option<&Path>,
    trace: bool,
) -> Outcome {
    let config = sim.config()?;
    usage_if(data.labels.is_none(), "evaluate needs --labels")?;
    let graph = load(model)?;
    let test = load_data(data)?;
    let result = evaluate(&graph, &test, &config)?;
    print!("{}", result.to_table());
    if let Some(dir) = out {
        write(dir, "eval.csv", &result.to_csv())?;
        if trace {
            write_traces(dir, &graph, &test, &config)?;
        }
    }
    Ok(())
}

fn write_traces(dir: &Path, graph: &NetworkGraph, data: &Dataset, config: &EvalConfig) -> Outcome {
    let energy = measure_energy(graph, data, config)?;
    for (row, trace) in energy.rows.iter().zip(&energy.traces) {
        write(
            dir,
            &format!("trace_T{}.csv", row.timesteps),
            &trace.to_csv(1),
        )?;
    }
    Ok(())
}

fn cmd_diagnose(
    model: &ModelArgs,
    data: &DataArgs,
    timesteps: usize,
    batch_size: usize,
    norm: Option<NormArg>,
    out: Option<&Path>,
) -> Outcome {
    usage_if(timesteps == 0, "--timesteps must be at least 1")?;
    usage_if(batch_size == 0, "--batch-size must be at least 1")?;
    let graph = load(model)?;
    let samples = load_data(data)?;
    let n = batch_size.min(samples.len());
    let batch = samples.batch(&(0..n).collect::<Vec<_>>()).data;
    let variant = match norm {
        Some(NormArg::Operator) => NormVariant::Operator,
        Some(NormArg::ReshapedKernel) => NormVariant::ReshapedKernel,
        None => graph
            .meta
            .norm_variant
            .as_deref()
            .and_then(NormVariant::parse)
            .unwrap_or(NormVariant::Operator),
    };
    let report = error_bound(&graph, &batch, timesteps, variant)?;
    print!("{}", report.to_table());
    println!(
        "e_model {:.5} {} bound {:.5} (clip proxy {:.5})",
        report.e_model,
        if report.holds() { "<=" } else { ">" },
        report.bound,
        report.proxy_bound
    );
    if let Some(dir) = out {
        write(dir, "error_report.csv", &report.to_csv())?;
    }
    Ok(())
}

fn cmd_estimate_delay(
    model: &ModelArgs,
    data: &DataArgs,
    timesteps: &[usize],
    window: usize,
    batch_size: usize,
    out: Option<&Path>,
) -> Outcome {
    usage_if(batch_size == 0, "--batch-size must be at least 1")?;
    usage_if(
        timesteps.contains(&0),
        "--timesteps values must be at least 1",
    )?;
    let graph = load(model)?;
    let samples = load_data(data)?;
    let est = estimate_t0(&graph, samples.batches(batch_size, None)?.map(|b| b.data))?;
    let mut csv = String::from("slot,theta_max,v0,max_mean_activation,contribution,dead\n");
    let rows: Vec<Vec<String>> = est
        .slots
        .iter()
        .map(|s| {
            csv += &format!(
                "{},{:e},{:e},{:e},{:e},{}\n",
                s.layer, s.theta_max, s.v0, s.max_mean_activation, s.contribution, s.dead
            );
            vec![
                s.layer.to_string(),
                format!("{:.4}", s.theta_max),
                format!("{:.4}", s.max_mean_activation),
                format!("{:.3}", s.contribution),
                if s.dead { "dead".into() } else { String::new() },
            ]
        })
        .collect();
    print!(
        "{}",
        format_table(&["slot", "theta_max", "max_rate", "steps", ""], &rows)
    );
    println!("t0 estimate {:.3}", est.value);
    let chosen: Vec<Vec<String>> = timesteps
        .iter()
        .map(|&t| {
            vec![
                t.to_string(),
                choose_delay_with_window(est.value, t, window).to_string(),
            ]
        })
        .collect();
    print!("{}", format_table(&["T", "t0"], &chosen));
    if let Some(dir) = out {
        write(dir, "delay.csv", &csv)?;
    }
    Ok(())
}

fn cmd_energy(
    model: &ModelArgs,
    data: &DataArgs,
    sim: &SimArgs,
    out: Option<&Path>,
    trace: bool,
) -> Outcome {
    let config = sim.config()?;
    let graph = load(model)?;
    let samples = load_data(data)?;
    let result = measure_energy(&graph, &samples, &config)?;
    print!("{}", result.to_table());
    if let Some(dir) = out {
        write(dir, "energy.csv", &result.to_csv())?;
        if trace {
            for (row, t) in result.rows.iter().zip(&result.traces) {
                write(dir, &format!("trace_T{}.csv", row.timesteps), &t.to_csv(1))?;
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match &cli.command {
        Command::Convert {
            model,
            data,
            out,
            iters,
            eta,
            batch_size,
            granularity,
            no_normalize_delta,
            absorb,
            seed,
        } => cmd_convert(
            model,
            data,
            out,
            *iters,
            *eta,
            *batch_size,
            *granularity,
            *no_normalize_delta,
            *absorb,
            *seed,
        ),
        Command::Evaluate {
            model,
            data,
            sim,
            out,
            trace,
        } => cmd_evaluate(model, data, sim, out.as_deref(), *trace),
        Command::Diagnose {
            model,
            data,
            timesteps,
            batch_size,
            norm,
            out,
        } => cmd_diagnose(model, data, *timesteps, *batch_size, *norm, out.as_deref()),
        Command::EstimateDelay {
            model,
            data,
            timesteps,
            delay_window,
            batch_size,
            out,
        } => cmd_estimate_delay(
            model,
            data,
            timesteps,
            *delay_window,
            *batch_size,
            out.as_deref(),
        ),
        Command::Energy {
            model,
            data,
            sim,
            out,
            trace,
        } => cmd_energy(model, data, sim, out.as_deref(), *trace),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::new()
        .filter_level(log::LevelFilter::Warn)
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(f)) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
        Err(_) => ExitCode::from(EXIT_INTERNAL),
    }
}

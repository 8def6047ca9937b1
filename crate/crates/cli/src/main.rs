use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use peelsort_cli::pipeline;
use peelsort_cli::{CliError, PipelineConfig};

#[derive(Parser)]
#[command(
    name = "peelsort",
    version,
    about = "Spike sorting by template matching with jitter cancellation and peeling"
)]
struct Cli {
    /// TOML config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, e.g. `--set cluster.k=8` (repeatable)
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (run.output_dir)
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic recording with ground truth
    Simulate {
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write gzip-compressed channel files
        #[arg(long)]
        gzip: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write detected peak indices, one per line
    Detect {
        #[arg(long)]
        out: PathBuf,
    },
    /// Write cut events as CSV
    Events {
        #[arg(long)]
        out: PathBuf,
    },
    /// Export principal-component projections of the clean events
    Reduce {
        #[arg(long)]
        components: Option<usize>,
        #[arg(long)]
        export: PathBuf,
        #[arg(long)]
        scatter_matrix: Option<PathBuf>,
    },
    /// Build the template catalogue on the estimation window
    Model {
        #[arg(long)]
        k: Option<usize>,
    },
    /// Peel the full recording with an existing catalogue
    Classify {
        #[arg(long)]
        catalogue: PathBuf,
    },
    /// Model then classify
    Sort {
        #[arg(long)]
        k: Option<usize>,
    },
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("PEELSORT_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("PEELSORT_THREADS=`{value}` is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let mut overrides = cli.overrides;
    if let Some(dir) = &cli.output_dir {
        overrides.push(format!("run.output_dir={}", toml_string(&dir.display().to_string())));
    }
    match &cli.command {
        Command::Simulate {
            scenario, seed, gzip, ..
        } => {
            if let Some(s) = scenario {
                overrides.push(format!("synth.scenario={}", toml_string(s)));
            }
            if let Some(s) = seed {
                overrides.push(format!("synth.seed={s}"));
            }
            if *gzip {
                overrides.push("synth.gzip=true".into());
            }
        }
        Command::Reduce {
            components: Some(k), ..
        } => overrides.push(format!("reduce.components={k}")),
        Command::Model { k: Some(k) } | Command::Sort { k: Some(k) } => overrides.push(format!("cluster.k={k}")),
        _ => {}
    }
    let cfg = PipelineConfig::load(cli.config.as_deref(), &overrides)?;

    match &cli.command {
        Command::Simulate { out, .. } => {
            let truth = pipeline::cmd_simulate(&cfg, out)?;
            println!("{} spikes written to {}", truth.spikes.len(), out.display());
        }
        Command::Detect { out } => {
            let peaks = pipeline::cmd_detect(&cfg, out)?;
            println!("{} peaks", peaks.len());
        }
        Command::Events { out } => {
            let sample = pipeline::cmd_events(&cfg, out)?;
            println!(
                "{} events, {} flagged superposed",
                sample.len(),
                sample.superposed_count()
            );
        }
        Command::Reduce {
            export, scatter_matrix, ..
        } => {
            let pe = pipeline::cmd_reduce(&cfg, export, scatter_matrix.as_deref())?;
            println!("{} events projected on {} components", pe.coords.len(), pe.dims());
        }
        Command::Model { .. } => {
            let (model, _) = pipeline::cmd_model(&cfg)?;
            print_model(&model);
        }
        Command::Classify { catalogue } => {
            let (out, _) = pipeline::cmd_classify(&cfg, catalogue)?;
            print_peel(&out);
        }
        Command::Sort { .. } => {
            let (model, out) = pipeline::cmd_sort(&cfg)?;
            print_model(&model);
            print_peel(&out);
        }
    }
    Ok(())
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn print_model(model: &pipeline::Model) {
    let r = &model.report;
    println!(
        "model: {} detected, {} superposed, {} clustered into {} templates",
        r.detected,
        r.superposed,
        r.clustered,
        model.catalogue.len()
    );
    for (j, size) in r.cluster_sizes.iter().enumerate() {
        println!("  neuron {j}: {size} events, l1 {:.1}", r.cluster_l1_sizes[j]);
    }
}

fn print_peel(out: &peelsort::peel::PeelOutput) {
    for r in &out.rounds {
        println!(
            "round {}: {} detected, {} accepted, {} unclassified",
            r.round, r.detected, r.accepted, r.unclassified
        );
    }
    println!(
        "{} spikes, {} unclassified",
        out.spikes.len(),
        out.decisions.len() - out.spikes.len()
    );
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("peelsort: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rase_cli::commands::{cmd_analyze, cmd_curves, cmd_fit, cmd_simulate};
use rase_cli::{CliResult, ExperimentConfig};

/// Simulator and analysis toolkit for rephased amplified spontaneous emission.
#[derive(Parser, Debug)]
#[command(name = "rase", version, about)]
struct Cli {
    /// Experiment config (TOML, or JSON with a .json extension). Defaults to
    /// the shipped published-experiment parameters.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output root; each subcommand writes into its own subdirectory.
    #[arg(long, global = true, value_name = "DIR", env = "RASE_OUT_DIR")]
    out: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Override the number of signal shots.
    #[arg(long, global = true, value_name = "N")]
    shots: Option<usize>,
    /// Re-window both detection windows to this integration time.
    #[arg(long = "window-us", global = true, value_name = "F")]
    window_us: Option<f64>,
    /// Bootstrap standard errors instead of Gaussian formulas.
    #[arg(long, global = true)]
    bootstrap: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the model curves (ASE variance, efficiency, inseparability).
    Curves,
    /// Synthesize a run and write its record dump.
    Simulate,
    /// Analyze a record dump.
    Analyze {
        dump: PathBuf,
    },
    /// Fit the detection loss to a variance-vs-optical-depth table.
    Fit {
        table: PathBuf,
        /// Re-derive each point's optical depth from its variance.
        #[arg(long)]
        invert: bool,
    },
    /// Print the resolved configuration.
    Config {
        #[arg(long, value_enum, default_value_t = Format::Toml)]
        format: Format,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Toml,
    Json,
}

fn resolve_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::paper_defaults(),
    };
    if let Some(seed) = cli.seed {
        cfg.sequence.rng_seed = seed;
    }
    if let Some(n) = cli.shots {
        cfg.sequence.n_shots = n;
    }
    if let Some(w) = cli.window_us {
        cfg.analysis.extract.window_us = Some(w);
    }
    if cli.bootstrap {
        cfg.analysis.bootstrap = true;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = resolve_config(&cli)?;
    let root = cfg.output_dir.clone();
    match &cli.cmd {
        Command::Curves => {
            let dir = root.join("curves");
            for f in cmd_curves(&cfg, &dir)? {
                println!("wrote {}", f.display());
            }
        }
        Command::Simulate => {
            let out = cmd_simulate(&cfg, &root.join("simulate"))?;
            println!("wrote {} records to {}", out.n_records, out.dump.display());
            println!("manifest {}", out.manifest.display());
        }
        Command::Analyze { dump } => {
            let dir = root.join("analyze");
            let s = cmd_analyze(dump, &cfg, &dir)?;
            println!("signal shots     {} ({} rejected)", s.n_signal_shots, s.rejected_shots);
            println!("ASE variance     {:.4} +/- {:.4} (model {:.4})", s.ase.mean_var, s.ase.se, s.ase_model);
            println!("RASE variance    {:.4} +/- {:.4}", s.rase.mean_var, s.rase.se);
            match (&s.efficiency, &s.efficiency_note) {
                (Some(e), _) => println!("efficiency       {:.4} +/- {:.4} (model {:.4})", e.eta_measured, e.eta_se, e.eta_model),
                (None, Some(note)) => println!("efficiency       n/a: {note}"),
                _ => {}
            }
            let m = s.insep_minimum;
            println!(
                "inseparability   min {:.4} +/- {:.4} at b = {:.3} ({:.2} sigma below 2)",
                m.total_variance, m.se, m.b, m.sigma_violation
            );
            println!("results in {}", dir.display());
        }
        Command::Fit { table, invert } => {
            let f = cmd_fit(table, *invert, &cfg, &root.join("fit"))?;
            println!("l = {:.6} +/- {:.6} from {} points", f.fit.l, f.fit.l_se, f.n_points);
        }
        Command::Config { format } => {
            let text = match format {
                Format::Toml => cfg.to_toml_string()?,
                Format::Json => cfg.to_json_string()?,
            };
            println!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}


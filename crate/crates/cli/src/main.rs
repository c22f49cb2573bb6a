use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use apcms_cli::commands::{self, parse_theta_list, write_run};
use apcms_cli::scenario::{self, Resolution};
use apcms_core::archetype::PortModeKind;
use apcms_core::library::TrainOverrides;
use apcms_core::synthesis::BubbleSource;
use apcms_core::{Error, ErrorCategory, Result};

#[derive(Parser)]
#[command(name = "apcms", version, about = "Component reduced-order models with adaptive rotational ports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Inputs {
    /// Trained library directory.
    #[arg(long)]
    library: PathBuf,
    /// System configuration (JSON).
    #[arg(long)]
    system: PathBuf,
}

#[derive(Args)]
struct Common {
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Accepted for reproducible invocations; every stage is deterministic.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a component library from a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        library: PathBuf,
        /// Port modes per port: `full` or an even total count.
        #[arg(long)]
        port_modes: Option<PortModeKind>,
        #[arg(long)]
        rb_tol: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Reduced solve at one rotation angle.
    Solve {
        #[command(flatten)]
        inputs: Inputs,
        /// Rotation angle in degrees.
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        theta: f64,
        #[arg(long)]
        out: PathBuf,
        /// Use finite-element bubbles instead of reduced bases.
        #[arg(long)]
        fe_bubbles: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Monolithic finite-element solve at one rotation angle.
    Oracle {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        theta: f64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Stress errors of run A against reference run B.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Metrics CSV to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Reduced and oracle solves with comparison over a list of angles.
    Sweep {
        #[command(flatten)]
        inputs: Inputs,
        /// Comma-separated angles in degrees.
        #[arg(long, allow_hyphen_values = true)]
        theta_list: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        fe_bubbles: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Write the built-in rotor-in-housing scenario.
    MakeReference {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Resolution::Coarse)]
        resolution: Resolution,
        /// Port modes written into the manifest.
        #[arg(long, default_value = "full")]
        port_modes: PortModeKind,
    },
}

fn bubbles(fe: bool) -> BubbleSource {
    if fe {
        BubbleSource::FeExact
    } else {
        BubbleSource::ReducedBasis
    }
}

fn set_jobs(common: &Common) {
    if let Some(seed) = common.seed {
        log::debug!("seed {seed}");
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(common.jobs.max(1)).build_global() {
        log::warn!("thread pool already initialized: {e}");
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            manifest,
            library,
            port_modes,
            rb_tol,
            common,
        } => {
            set_jobs(&common);
            let lib = commands::train(&manifest, &library, TrainOverrides { port_modes, rb_tol })?;
            println!("trained {} archetypes into {}", lib.archetypes.len(), library.display());
        }
        Command::Solve {
            inputs,
            theta,
            out,
            fe_bubbles,
            common,
        } => {
            set_jobs(&common);
            let (lib, config) = commands::load_inputs(&inputs.library, &inputs.system)?;
            let run = commands::solve_rom(&config, &lib, theta, bubbles(fe_bubbles))?;
            write_run(&out, &run.field, &run.info)?;
            println!("n_sc {} fe_dofs {} total {:.4}s", run.info.n_sc, run.info.fe_dofs, run.info.timing.total_s);
        }
        Command::Oracle {
            inputs,
            theta,
            out,
            common,
        } => {
            set_jobs(&common);
            let (lib, config) = commands::load_inputs(&inputs.library, &inputs.system)?;
            let run = commands::solve_oracle(&config, &lib, theta)?;
            write_run(&out, &run.field, &run.info)?;
            println!("fe_dofs {} total {:.4}s", run.info.fe_dofs, run.info.timing.total_s);
        }
        Command::Compare { a, b, out } => {
            let r = commands::compare_to_csv(&a, &b, &out)?;
            println!("rrmse {:.6e} re_max {:.6e}", r.rrmse, r.re_max);
        }
        Command::Sweep {
            inputs,
            theta_list,
            out,
            fe_bubbles,
            common,
        } => {
            let thetas = parse_theta_list(&theta_list)?;
            let (lib, config) = commands::load_inputs(&inputs.library, &inputs.system)?;
            let points = commands::sweep(&config, &lib, &thetas, bubbles(fe_bubbles), &out, common.jobs)?;
            for p in points {
                println!(
                    "theta {:>7.2} rrmse {:.3e} re_max {:.3e} rom {:.4}s fe {:.4}s",
                    p.record.theta, p.record.rrmse, p.record.re_max, p.record.total_s, p.oracle.total_s
                );
            }
        }
        Command::MakeReference {
            out,
            resolution,
            port_modes,
        } => {
            let s = scenario::build(resolution, port_modes)?;
            s.write(&out)?;
            println!("reference scenario written to {}", out.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Validation => 2,
        ErrorCategory::Numerical => 3,
        ErrorCategory::Io => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

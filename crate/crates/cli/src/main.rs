use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lbo_core::pipeline::{self, PipelineConfig, Scenario, Which};
use lbo_core::Result;

#[derive(Parser)]
#[command(name = "lbo", version, about = "Learning-based state observer with certified gains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads for parallel sections.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(clap::Args)]
struct Common {
    /// Pipeline configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Artifact directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Initial,
    Learned,
    Redesigned,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the initial gain and write phase1.json.
    DesignInitial(Common),
    /// Learn the model coefficients with the initial gain.
    Learn(Common),
    /// Re-estimate the Lipschitz constant and redesign the gain.
    Redesign(Common),
    /// Simulate plant and observer for one stage.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        which: Stage,
    },
    /// Run the Van der Pol scenario end to end.
    ReproduceVdp {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn scenario(c: &Common) -> Result<Scenario> {
    let mut cfg = PipelineConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.build()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::DesignInitial(c) => {
            let a = pipeline::cmd_design_initial(&scenario(&c)?, &c.out)?;
            println!("initial design: lipschitz = {:.6}, gain = {:?}", a.lipschitz, a.solution.l.as_slice());
        }
        Command::Learn(c) => {
            let s = pipeline::cmd_learn(&scenario(&c)?, &c.out)?;
            println!("learning: {} iterations, best reward {:.6}, p = {:?}", s.iterations(), s.incumbent, s.p_final);
        }
        Command::Redesign(c) => {
            let a = pipeline::cmd_redesign(&scenario(&c)?, &c.out)?;
            println!("redesign: lipschitz = {:.6}; {}; gain = {:?}", a.lipschitz, a.note, a.gain.as_slice());
        }
        Command::Simulate { common, which } => {
            let which = match which {
                Stage::Initial => Which::Initial,
                Stage::Learned => Which::Learned,
                Stage::Redesigned => Which::Redesigned,
            };
            let s = pipeline::cmd_simulate(&scenario(&common)?, &common.out, which)?;
            println!(
                "{}: energy {:.6e} (from step {}: {:.6e}), final error {:.3e}",
                which.name(),
                s.energy,
                s.report_from,
                s.energy_after_transient,
                s.final_error
            );
        }
        Command::ReproduceVdp { out, seed } => {
            pipeline::cmd_reproduce_vdp(&out, seed)?;
            print!("{}", std::fs::read_to_string(out.join(pipeline::SUMMARY_FILE))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build_global() {
        log::warn!("thread pool: {e}");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(pipeline::exit_code(&e) as u8)
        }
    }
}

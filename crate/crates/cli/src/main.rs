//! `tai`: corpus synthesis, feature extraction, training, cross-validation,
//! prediction and self-verification.

mod commands;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "tai", version, about = "Acoustic dementia-vs-control classifier")]
struct Cli {
    /// Overrides the seed in the config file.
    #[arg(long, global = true, env = "TAI_SEED")]
    seed: Option<u64>,
    /// Worker threads for extraction and folds; defaults to every core.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Log progress to stderr (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic two-class corpus and its manifest.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compute one feature file per manifest row.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to the config's features_dir.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Recompute files that already exist.
        #[arg(long)]
        force: bool,
        /// Process the decodable rows even when some audio is unreadable.
        #[arg(long)]
        keep_going: bool,
    },
    /// Stratified, subject-grouped k-fold cross-validation.
    Cv(RunArgs),
    /// Train one model on the whole manifest, early-stopped on a held-out fifth.
    Train(RunArgs),
    /// Print class probabilities for one recording.
    Predict {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        /// Frontend settings; must produce the mel bands the parameters expect.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the built-in verification suite.
    Verify {
        #[arg(long, hide = true, default_value_t = 0.0)]
        perturb_gradient: f64,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output goes to `<runs_dir>/<run-name>`.
    #[arg(long, default_value = "default")]
    run_name: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("cannot size the thread pool: {e}");
        }
    }
    let result = match cli.command {
        Command::Synth { config, out_dir } => commands::synth(config.as_deref(), &out_dir, cli.seed),
        Command::Extract { manifest, config, out_dir, force, keep_going } => {
            commands::extract(&manifest, config.as_deref(), out_dir.as_deref(), force, keep_going)
        }
        Command::Cv(a) => commands::cv(&a.manifest, a.config.as_deref(), &a.run_name, cli.seed),
        Command::Train(a) => commands::train(&a.manifest, a.config.as_deref(), &a.run_name, cli.seed),
        Command::Predict { params, wav, config } => commands::predict(&params, &wav, config.as_deref()),
        Command::Verify { perturb_gradient } => commands::verify(perturb_gradient),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

//! Command-line driver: generation, evaluation and reporting over run
//! directories.

use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use elegant::backends::Role;
use elegant::ErrorKind;

pub mod commands;
pub mod config;
pub mod router;

use config::{CliConfig, FlagConfig, Mode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "elegant",
    version,
    about = "Subject-centred scene graph generation and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate scene graphs for the configured images.
    Generate(Common),
    /// Score generated graphs with ECLIPSE for each alpha.
    EvalOpen(Common),
    /// Recall@K and mean Recall@K against annotations.
    EvalClosed(Common),
    /// Counts of graphs, triplets and categories in a run.
    Stats(Common),
    /// Export the length penalty as CSV.
    PenaltyCurve {
        #[command(flatten)]
        common: Common,
        /// Mean prediction length; calibrated from the run's graphs if omitted.
        #[arg(long)]
        m_star: Option<f64>,
        /// Largest length on the grid [default: 5 * m*].
        #[arg(long)]
        x_max: Option<f64>,
        #[arg(long, default_value_t = 100)]
        points: usize,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print the VQA prompt built from a run's graphs.
    VqaPrompt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        question: String,
        #[arg(long)]
        image_id: Option<String>,
    },
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// open | gt-boxes | closed:<vocab>
    #[arg(long)]
    mode: Option<Mode>,
    /// Builtin vocabulary id or vocabulary file.
    #[arg(long)]
    vocab: Option<String>,
    /// Penalty strength(s), comma separated.
    #[arg(long, value_delimiter = ',')]
    alpha: Option<Vec<f64>>,
    /// Recall cut-off(s), comma separated.
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    backend_observer_url: Option<String>,
    #[arg(long)]
    backend_thinker_url: Option<String>,
    #[arg(long)]
    backend_verifier_url: Option<String>,
    #[arg(long)]
    backend_embedder_url: Option<String>,
    /// Fixture file for roles without a live endpoint.
    #[arg(long)]
    mock_fixtures: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Annotation file (canonical JSON schema).
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Reject candidates the verifier does not confirm instead of calibrating.
    #[arg(long)]
    no_coca: bool,
}

impl From<Common> for FlagConfig {
    fn from(c: Common) -> Self {
        let urls = [
            (Role::Observer, c.backend_observer_url),
            (Role::Thinker, c.backend_thinker_url),
            (Role::Verifier, c.backend_verifier_url),
            (Role::Embedder, c.backend_embedder_url),
        ];
        FlagConfig {
            config: c.config,
            mode: c.mode,
            vocab: c.vocab,
            alphas: c.alpha,
            ks: c.k,
            parallelism: c.parallelism,
            backend_urls: urls.into_iter().filter_map(|(r, u)| u.map(|u| (r, u))).collect(),
            mock_fixtures: c.mock_fixtures,
            out_dir: c.out_dir,
            annotations: c.annotations,
            no_coca: c.no_coca,
        }
    }
}

fn exit_code(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<elegant::Error>() {
            return match err.kind() {
                ErrorKind::Validation => EXIT_VALIDATION,
                ErrorKind::Backend => EXIT_BACKEND,
                ErrorKind::Io => EXIT_IO,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_VALIDATION
}

fn dispatch(
    command: Command,
    env: &HashMap<String, String>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> anyhow::Result<()> {
    match command {
        Command::Generate(c) => commands::generate(&CliConfig::resolve(c.into(), env)?, out, err),
        Command::EvalOpen(c) => commands::eval_open(&CliConfig::resolve(c.into(), env)?, out),
        Command::EvalClosed(c) => commands::eval_closed(&CliConfig::resolve(c.into(), env)?, out),
        Command::Stats(c) => commands::stats(&CliConfig::resolve(c.into(), env)?, out),
        Command::PenaltyCurve {
            common,
            m_star,
            x_max,
            points,
            output,
        } => {
            let args = commands::CurveArgs {
                m_star,
                x_max,
                points,
                output,
            };
            commands::penalty_curve(&CliConfig::resolve(common.into(), env)?, &args, out)
        }
        Command::VqaPrompt {
            common,
            question,
            image_id,
        } => commands::vqa_prompt(
            &CliConfig::resolve(common.into(), env)?,
            &question,
            image_id.as_deref(),
            out,
        ),
    }
}

/// Run the CLI on `argv` (including the program name) and return the exit code.
pub fn run_cli<I, S>(argv: I, env: &HashMap<String, String>, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                EXIT_USAGE
            } else {
                let _ = write!(out, "{text}");
                EXIT_OK
            };
        }
    };
    match dispatch(cli.command, env, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            exit_code(&e)
        }
    }
}

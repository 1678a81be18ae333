use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};
use taskvec::verify::Suite;
use taskvec_cli::{config::RunConfigFile, print_json, CliError, DatasetSpec, EditSpec, EXIT_OK};

#[derive(Parser)]
#[command(name = "taskvec", version, about = "Task-vector incremental learning: train, edit, evaluate, verify")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a task sequence from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `out_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Specialize or unlearn on a trained pool.
    #[command(group(ArgGroup::new("op").required(true).args(["specialize", "unlearn"])))]
    Edit {
        #[arg(long)]
        pool: PathBuf,
        /// Comma-separated 1-based task ids to keep.
        #[arg(long, value_delimiter = ',')]
        specialize: Option<Vec<usize>>,
        /// 1-based task id to remove.
        #[arg(long)]
        unlearn: Option<usize>,
        /// Subtract the vector from the full composition instead of
        /// renormalizing over the remaining tasks.
        #[arg(long, requires = "unlearn")]
        raw: bool,
        /// Dataset spec (or run config) to measure FA_TGT / FA_CTRL on.
        #[arg(long)]
        eval: Option<PathBuf>,
        /// Where to write the edited weights [default: edited.json next to the pool].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the composed model of a pool.
    Eval {
        #[arg(long)]
        pool: PathBuf,
        /// Dataset spec (or run config) file.
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Run a numerical property suite.
    Verify {
        #[arg(long, default_value = "all", value_parser = parse_suite)]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse::<Suite>().map_err(|_| {
        let names: Vec<&str> = Suite::EACH.iter().map(|s| s.name()).chain(["all"]).collect();
        format!("unknown suite {s:?}; expected one of {}", names.join(", "))
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = RunConfigFile::from_file(&config)?;
            let res = taskvec_cli::train(&cfg, out.as_deref())?;
            println!(
                "fa={} ff={} written to {}",
                res.result.fa,
                res.result.ff,
                res.out_dir.display()
            );
            Ok(())
        }
        Command::Edit {
            pool,
            specialize,
            unlearn,
            raw,
            eval,
            out,
        } => {
            let e = match (specialize, unlearn) {
                (Some(ids), None) => EditSpec::Specialize { specialize: ids },
                (None, Some(t)) => EditSpec::Unlearn { unlearn: t, raw },
                _ => return Err(CliError::usage("pass exactly one of --specialize / --unlearn")),
            };
            let dataset = eval.as_deref().map(DatasetSpec::from_file).transpose()?;
            let out = out.unwrap_or_else(|| pool.with_file_name("edited.json"));
            let rep = taskvec_cli::edit(&pool, &e, dataset.as_ref(), &out)?;
            print_json(&rep);
            Ok(())
        }
        Command::Eval { pool, dataset } => {
            let spec = DatasetSpec::from_file(&dataset)?;
            print_json(&taskvec_cli::eval(&pool, &spec)?);
            Ok(())
        }
        Command::Verify { suite, seed } => {
            let reports = taskvec_cli::verify(suite, seed, &mut std::io::stdout().lock())?;
            taskvec_cli::verify_outcome(&reports)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}

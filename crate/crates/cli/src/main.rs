mod args;
mod commands;
mod config;
mod error;
mod manifest;

use clap::Parser;

use args::{Cli, Command};
use error::{CliError, CliResult};

fn run(cli: Cli) -> CliResult<()> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(error::user("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Internal(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Preprocess(a) => commands::preprocess_cmd(a),
        Command::Fit(a) => commands::fit_cmd(a),
        Command::Transform(a) => commands::transform_cmd(a),
        Command::Sweep(a) => commands::sweep_cmd(a),
        Command::Eval(a) => commands::eval_cmd(&a.analysis),
        Command::Check(a) => commands::check_cmd(a),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version go to stdout with success; usage errors are user errors
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

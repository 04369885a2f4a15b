mod commands;
mod opts;

use clap::Parser;

use prefix_dpo::error::{Error, Result};
use prefix_dpo::scalar::{Precision, Scalar};

use opts::{Cli, Command, RunConfig};

/// Exit codes: 0 success, 2 config error, 3 data error, 4 verification
/// failure, 1 anything else.
fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_)
        | Error::RowOverflow { .. }
        | Error::UnpackableSample { .. }
        | Error::Json(_)
        | Error::Io(_) => 3,
        Error::Verification(_) => 4,
        _ => 1,
    }
}

fn dispatch<S: Scalar>(command: &Command, cfg: &RunConfig) -> Result<()> {
    match command {
        Command::Stats(_) => commands::cmd_stats(cfg),
        Command::PackPlan(_) => commands::cmd_pack_plan(cfg),
        Command::Verify(_) => commands::cmd_verify::<S>(cfg),
        Command::Bench(_) => commands::cmd_bench::<S>(cfg),
        Command::Train(_) => commands::cmd_train::<S>(cfg),
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let mut command = cli.command;
    if let Some(path) = &cli.config {
        let file = opts::load_file_config(path)?;
        let opts = match &mut command {
            Command::Stats(o)
            | Command::PackPlan(o)
            | Command::Verify(o)
            | Command::Bench(o)
            | Command::Train(o) => o,
        };
        *opts = opts.clone().layered_under(file);
    }
    let cfg = RunConfig::resolve(&command)?;
    eprintln!(
        "effective config: {}",
        serde_json::to_string(&cfg).expect("config serializes")
    );
    match cfg.precision {
        Precision::F64 => dispatch::<f64>(&command, &cfg),
        Precision::F32 => dispatch::<f32>(&command, &cfg),
    }
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}

//! `poissub` command-line interface.
//!
//! Exit codes: 0 success, 2 configuration error (including bad flags),
//! 3 data error, 4 numerical failure.

mod config;
mod run;

use std::process::ExitCode;

use clap::Parser;
use poissub::{Error, ErrorClass};

use config::RunConfig;

fn exit_code(e: &anyhow::Error) -> u8 {
    match e
        .chain()
        .find_map(|c| c.downcast_ref::<Error>())
        .map(Error::class)
    {
        Some(ErrorClass::Config) => 2,
        Some(ErrorClass::Numerical) => 4,
        Some(ErrorClass::Data) | None => 3,
    }
}

/// The error and its causes on one line, skipping causes the message already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !msg.contains(&c) {
            msg.push_str(": ");
            msg.push_str(&c);
        }
    }
    msg
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut config = RunConfig::parse();
    if let Some(n) = config.output.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    config.resolve();
    match run::execute(&config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

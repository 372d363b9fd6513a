use std::process::ExitCode;

use clap::Parser;

use cba_core::runner::{emit_results, run_experiment, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match cli.into_config() {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("cba: {e}");
            return ExitCode::from(2);
        }
    };
    let result = match run_experiment(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("cba: {e}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = emit_results(&result, &cfg) {
        eprintln!("cba: cannot write results to {}: {e}", cfg.out.display());
        return ExitCode::from(1);
    }
    let a = &result.aggregate;
    let done = result.completed().count();
    println!(
        "{} seeds completed, {} failed; ACC {:.2} +/- {:.2}, FM {:.2} +/- {:.2}",
        done,
        result.outcomes.len() - done,
        a.acc.mean,
        a.acc.std,
        a.fm.mean,
        a.fm.std
    );
    if done == 0 {
        return ExitCode::from(3);
    }
    ExitCode::SUCCESS
}

use std::process::ExitCode;

use clap::Parser;
use graphoscope::jobs::{self, JobSpec, RunSummary};
use graphoscope::Error;
use graphoscope_cli::args::{job_spec, Cli, Command};
use graphoscope_cli::service::{self, AppState};

const THREADS_VAR: &str = "GRAPHOSCOPE_THREADS";

fn threads() -> Result<Option<usize>, Error> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_VAR}={v:?} is not a positive integer"))),
        },
    }
}

fn report(summary: &RunSummary) {
    println!("{} → {}", summary.kind, summary.out.display());
    if let Some((name, value)) = &summary.headline {
        println!("{name}: {value:.4}");
    }
    println!("{} files written", summary.files.len());
}

fn execute(command: Command, threads: Option<usize>) -> Result<(), Error> {
    match command {
        Command::Replay { manifest, out } => report(&jobs::replay(&manifest, out.as_deref())?),
        Command::Run { spec } => {
            let spec: JobSpec = serde_json::from_str(&std::fs::read_to_string(&spec)?)?;
            report(&jobs::run(&spec)?)
        }
        Command::Serve(a) => {
            let state = AppState::load(&a.models, &a.corpus)?;
            let mut rt = tokio::runtime::Builder::new_multi_thread();
            if let Some(n) = threads {
                rt.worker_threads(n).max_blocking_threads(n);
            }
            rt.enable_all().build()?.block_on(service::serve(state, a.bind))?;
        }
        other => {
            let spec = job_spec(&other).expect("pipeline subcommand");
            report(&jobs::run(&spec)?)
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let threads = match threads() {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if let Some(n) = threads {
        // the global pool can only be set once; failure means it already is
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match execute(cli.command, threads) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

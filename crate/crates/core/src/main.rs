use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use merton_lab::{parse_config, run, Error, Task};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    Simulate,
    Solve,
    Verify,
    Search,
}

impl From<Command> for Task {
    fn from(c: Command) -> Self {
        match c {
            Command::Simulate => Task::Simulate,
            Command::Solve => Task::Solve,
            Command::Verify => Task::Verify,
            Command::Search => Task::Search,
        }
    }
}

/// Expected-utility portfolio experiments driven by a TOML config file.
#[derive(Debug, Parser)]
#[command(name = "merton-lab", version)]
struct Cli {
    #[arg(value_enum)]
    task: Command,
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Output path prefix; overrides `output.prefix`.
    #[arg(long)]
    out: Option<String>,
    /// Print nothing on success.
    #[arg(long)]
    quiet: bool,
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let text = match std::fs::read_to_string(&cli.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: config: {}: {e}", cli.config.display());
            return ExitCode::from(2);
        }
    };
    let config = match parse_config(&text) {
        Ok(c) => c,
        Err(e) => return fail(&e.into()),
    };
    let result = match run(&config, cli.task.into(), cli.out.as_deref()) {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };
    if !cli.quiet || !result.passed {
        println!("task = {}", result.task);
        println!("run_id = {}", result.run_id);
        println!("wall_time_s = {:.3}", result.wall_time.as_secs_f64());
        for d in &config.defaults {
            println!("default {d}");
        }
        for s in &result.summary {
            println!("{s}");
        }
        for c in &result.checks {
            println!("{} {} = {} (se {}, threshold {})", if c.pass { "PASS" } else { "FAIL" }, c.statistic, c.value, c.std_error, c.threshold);
        }
        for f in &result.files {
            println!("wrote {}", f.display());
        }
    }
    ExitCode::from(result.exit_code() as u8)
}

use std::io::Write;
use std::process::ExitCode;
use std::time::Instant;

use care_lab::{command, dispatch, resolve, thread_count, CliError, Outcome};

fn execute() -> Result<Outcome, CliError> {
    let m = command().get_matches();
    let (name, sub) = m.subcommand().expect("subcommand required");
    let cfg = resolve(sub)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count()?)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))?;
    dispatch(name, &cfg, sub.get_flag("force"))
}

fn main() -> ExitCode {
    let started = Instant::now();
    match execute() {
        Ok(out) => {
            // A closed pipe downstream is not an error of the command.
            let (mut stdout, mut stderr) = (std::io::stdout().lock(), std::io::stderr().lock());
            if out.written.is_empty() {
                let _ = stdout.write_all(out.report.to_json().as_bytes());
                let _ = stderr.write_all(out.report.to_text().as_bytes());
            } else {
                let _ = stdout.write_all(out.report.to_text().as_bytes());
                for p in &out.written {
                    let _ = writeln!(stderr, "wrote {}", p.display());
                }
            }
            drop((stdout, stderr));
            let _ = writeln!(std::io::stderr(), "done in {:.1}s", started.elapsed().as_secs_f64());
            if out.passed {
                ExitCode::SUCCESS
            } else {
                eprintln!("error: at least one check failed");
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

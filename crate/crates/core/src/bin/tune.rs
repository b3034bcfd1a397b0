use std::process::ExitCode;

use simplex_tuner::cli::parse_cli;
use simplex_tuner::session::{run_session, write_report, SessionError, SessionReport};

fn emit(report: &SessionReport, out: Option<&std::path::Path>) -> Result<(), SessionError> {
    match out {
        Some(path) => write_report(report, path),
        None => {
            println!("{}", serde_json::to_string_pretty(report).expect("report serializes"));
            Ok(())
        }
    }
}

fn summarize(report: &SessionReport) {
    if let Some(best) = &report.best {
        eprintln!(
            "best {} score {} after {}/{} distinct points ({:.1}%), stopped: {}",
            best.point,
            best.raw_score,
            report.distinct_points_evaluated,
            report.space_size,
            100.0 * report.efficiency_ratio,
            report.convergence_reason
        );
    }
    if let Some(b) = &report.baseline {
        eprintln!("baseline {} score {} improvement {:+.2}%", b.point, b.raw_score, b.improvement_pct);
    }
}

fn main() -> ExitCode {
    let config = match parse_cli(std::env::args_os()) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            if let simplex_tuner::cli::UsageError::Clap(clap_err) = &e {
                let _ = clap_err.print();
            } else {
                eprintln!("tune: {e}");
            }
            return ExitCode::from(code as u8);
        }
    };
    let result = run_session(&config);
    let outcome = match &result {
        Ok(report) => {
            summarize(report);
            emit(report, config.output.as_deref())
        }
        Err(SessionError::NoSuccessfulEvaluation(report)) => emit(report, config.output.as_deref()),
        Err(_) => Ok(()),
    };
    let err = result.err().or(outcome.err());
    match err {
        None => ExitCode::SUCCESS,
        Some(e) => {
            eprintln!("tune: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! Prints one JSON record per kernel benchmark case: `kernel-report [REPETITIONS]`.

use std::process::ExitCode;

fn main() -> ExitCode {
    let reps = match std::env::args().nth(1).map(|s| s.parse::<usize>()) {
        None => 20,
        Some(Ok(r)) => r,
        Some(Err(e)) => {
            eprintln!("error: repetitions: {e}");
            return ExitCode::from(2);
        }
    };
    match vqcal_core::kernel::bench(&vqcal_bench::kernel_cases(), reps) {
        Ok(report) => {
            print!("{}", report.to_jsonl());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

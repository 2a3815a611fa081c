//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Known failures are reported but do not fail the run unless
//! `ACCEPTANCE_STRICT=1` is set.

mod geometry;
mod learning;
mod mapping;
mod matching;
mod pipeline;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

/// `Ok(details)` passes, `Err(details)` fails.
pub type Outcome = Result<String, String>;

/// Criteria whose failure is analysed and accepted for now.
const KNOWN_FAILURES: &[u32] = &[9];

pub fn check(ok: bool, details: String) -> Outcome {
    if ok {
        Ok(details)
    } else {
        Err(details)
    }
}

pub fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 12] = [
        (1, "geometry", geometry::transforms_and_round_trip),
        (2, "pixel-flow oracle", geometry::pixel_flow_oracle),
        (3, "synthetic-pair contract", geometry::synthetic_contract),
        (4, "gradient checks", learning::gradient_checks),
        (5, "smoke training", learning::smoke_training),
        (6, "extraction", matching::extraction),
        (7, "registration", matching::registration),
        (8, "metric oracles", matching::metric_oracles),
        (9, "square loop", mapping::square_loop),
        (10, "pose graph", mapping::pose_graph),
        (11, "determinism", pipeline::determinism),
        (12, "throughput", learning::throughput),
    ];
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");

    let mut unexpected = 0;
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {id:>2} {name}: PASS ({d}; {secs:.1} s)"),
            Err(d) => {
                failed += 1;
                let known = KNOWN_FAILURES.contains(&id);
                if !known || strict {
                    unexpected += 1;
                }
                let tag = if known { " [known]" } else { "" };
                println!("criterion {id:>2} {name}: FAIL{tag} ({d}; {secs:.1} s)");
            }
        }
    }
    println!("acceptance: {failed} failed, {unexpected} unexpected");
    if unexpected > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

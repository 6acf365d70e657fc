//! Runs the synthetic three-arm comparison and prints the report as JSON.
//!
//! Usage: synth_experiment [config.json]

use std::time::Instant;

use gmatch::synthetic::{run_experiment, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg: ExperimentConfig = match std::env::args().nth(1) {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => ExperimentConfig::default(),
    };
    let start = Instant::now();
    let mut report = run_experiment(&cfg)?;
    report.gmatching_run.loss_trace.clear();
    report.ablated_run.loss_trace.clear();
    println!("{}", serde_json::to_string_pretty(&report)?);
    eprintln!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}

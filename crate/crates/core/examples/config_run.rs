//! Drives a run from config text and writes the artifacts to a directory
//! given on the command line (default `icl-lab-out`).
use icl_lab::harness::{report, simulate, RunConfig};
use std::path::PathBuf;

fn main() -> icl_lab::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "icl-lab-out".into());
    let mut cfg = RunConfig::parse(
        "dist = imbalanced(3, 0.6)
         N = 60
         eta = 2
         max_iters = 400
         estimator = exact
         emit = trajectory_csv, phase_json, loss_json, plotdata
         threshold.c = 0.5",
    )?;
    cfg.output_dir = PathBuf::from(dir);
    let summary = simulate(&cfg)?;
    for f in &summary.files {
        println!("wrote {}", f.display());
    }
    print!("{}", report(&summary.output_dir)?);
    Ok(())
}

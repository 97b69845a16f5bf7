//! How long phase I lasts as K grows with N = 16 K^2.
use icl_lab::harness::{sweep, sweep_csv, RunConfig};

const CONFIG: &str = "
dist = balanced(3)
N = 144
eta = 1
max_iters = 100000
stop = phase_one
sweep.K = 3, 4, 5
sweep.n_per_k2 = 16
";

fn main() -> icl_lab::Result<()> {
    let cfg = RunConfig::parse(CONFIG)?;
    let report = sweep(&cfg)?;
    print!("{}", sweep_csv(&report));
    if let Some(s) = report.slope_k {
        println!("log-log slope of T1 against K: {s:.3}");
    }
    Ok(())
}

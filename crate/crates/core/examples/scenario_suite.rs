//! Runs the four-topology suite in both modes on the virtual clock and
//! prints each report plus the ordering checks.
//!
//!     cargo run --example scenario_suite [out_dir]

use fogdetect::harness::{run_suite, write_suite, SuiteParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let started = std::time::Instant::now();
    let suite = run_suite(&SuiteParams::default())?;
    for o in &suite.outcomes {
        print!("{}", o.report.summary());
    }
    println!();
    print!("{}", suite.comparison.summary());
    println!(
        "\n{} of {} orderings consistent ({:.2} s wall clock)",
        suite.comparison.checks.iter().filter(|c| c.consistent).count(),
        suite.comparison.checks.len(),
        started.elapsed().as_secs_f64()
    );
    if let Some(dir) = std::env::args().nth(1) {
        write_suite(std::path::Path::new(&dir), &suite)?;
        println!("CSVs written to {dir}");
    }
    Ok(())
}

//! Central-difference gradient checks for every layer type and the full
//! desk-profile model loss.

use pitvqa::gradsuite::{run_suite, TOLERANCE};
use pitvqa::model::ModelConfig;

fn main() -> pitvqa::Result<()> {
    let checks = run_suite(&ModelConfig::desk())?;
    for c in &checks {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<40} {:>10.3e}  {:<16} {:>6.2}s  {verdict}",
            c.layer, c.max_rel_error, c.mode, c.seconds
        );
    }
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    println!("worst relative error {worst:.3e} (tolerance {TOLERANCE:e})");
    Ok(())
}

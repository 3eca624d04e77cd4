//! The numerical certificate for the closed-form theory, with reduced case
//! counts. The CLI `certify` command runs the full version.

use peso_cl::harness::certify::{certify, CertifyOptions};

fn main() -> peso_cl::Result<()> {
    let opts = CertifyOptions {
        interpolation_instances: 20,
        hessian_seeds: 10,
        variance_cases: 200,
        descent_instances: 5,
        ..CertifyOptions::default()
    };
    let cert = certify(&opts)?;
    for f in &cert.families {
        println!("{} ({} cases, {:.2}s)", f.name, f.cases, f.seconds);
        for c in &f.checks {
            println!("  {:<28} {:.2e} ≤ {:.0e}  {}", c.name, c.max_error, c.tolerance, if c.passed { "ok" } else { "FAIL" });
        }
    }
    println!("certificate {}", if cert.passed { "passed" } else { "failed" });
    Ok(())
}

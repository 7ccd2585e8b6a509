//! Runs the finite-difference gradient oracle and prints one line per case.
//!
//! cargo run --release --example gradient_check -- [cases] [seed]

use protoscope::synthlab::{gradient_oracle, GRADIENT_REL_TOL};

fn main() -> protoscope::Result<()> {
    let mut args = std::env::args().skip(1);
    let cases = args.next().map_or(30, |s| s.parse().expect("cases"));
    let seed = args.next().map_or(0, |s| s.parse().expect("seed"));
    let report = gradient_oracle(cases, seed)?;
    for c in &report.cases {
        println!(
            "seed {:>5} {:<13} λ={:<4} C={} M/C={} D={} N={:<2} coords {:>3}  max rel {:.2e} {}",
            c.seed,
            c.adaptor.as_str(),
            c.lambda,
            c.n_classes,
            c.per_class,
            c.dim,
            c.batch,
            c.coordinates,
            c.max_rel_err,
            if c.passed { "" } else { "over tolerance" }
        );
    }
    let failing = report.cases.iter().filter(|c| !c.passed).count();
    println!(
        "{failing} of {} cases exceed relative error {GRADIENT_REL_TOL:e}; worst {:.2e}",
        report.cases.len(),
        report.max_rel_err
    );
    Ok(())
}

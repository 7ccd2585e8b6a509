//! Prints the one-cycle learning-rate schedule at a few anchor steps.
//!
//! cargo run --example onecycle_schedule -- [total_steps] [peak_lr]

use protoscope::trainer::{onecycle_lr, peak_step};

fn main() -> protoscope::Result<()> {
    let mut args = std::env::args().skip(1);
    let total: u64 = args.next().map_or(10_000, |s| s.parse().expect("total_steps"));
    let peak: f64 = args.next().map_or(1e-3, |s| s.parse().expect("peak_lr"));
    let top = peak_step(total);
    let mut steps = vec![0, top / 2, top, top + (total - top) / 2, total - 1];
    steps.dedup();
    for step in steps {
        println!("step {step:>7}  lr {:.6e}", onecycle_lr(step, total, peak)?);
    }
    Ok(())
}

//! Evaluates a saved checkpoint on a manifest split and writes the reports.
//!
//! cargo run --example evaluate_checkpoint -- <checkpoint.pckp> <manifest.jsonl> [split] [out_dir]

use protoscope::embedstore::{load_dataset, Split};
use protoscope::evaluator::evaluate_checkpoint;
use protoscope::trainer::load_checkpoint;

fn main() -> protoscope::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() < 2 {
        eprintln!("usage: evaluate_checkpoint <checkpoint.pckp> <manifest.jsonl> [split] [out_dir]");
        std::process::exit(2);
    }
    let split: Split = args.get(2).map_or(Ok(Split::Test), |s| s.parse())?;
    let ck = load_checkpoint(&args[0])?;
    let ds = load_dataset(&args[1])?;
    let report = evaluate_checkpoint(&ck, &ds, split)?;
    print!("{}", report.confusion_csv());
    for (label, recall) in report.labels.iter().zip(&report.per_class_recall) {
        println!("recall {label}: {recall:?}");
    }
    println!(
        "class-normalized accuracy {:.4} over {} tracks",
        report.class_normalized_accuracy, report.n_tracks
    );
    if let Some(out) = args.get(3) {
        report.write_to(out)?;
    }
    Ok(())
}
